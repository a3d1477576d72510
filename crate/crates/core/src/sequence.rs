use serde::{Deserialize, Serialize};

use crate::error::{HetaError, Result};

/// Token ids with the index of the target token.
///
/// The prompt is `ids[..target]`; the model's next-token distribution at
/// position `target - 1` is the one being explained.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub target: usize,
    /// Gold support positions, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support: Option<Vec<usize>>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, target: usize) -> Result<Self> {
        let seq = Self {
            ids,
            target,
            support: None,
        };
        seq.validate()?;
        Ok(seq)
    }

    /// Prompt followed by the answer token, targeting the answer.
    pub fn from_prompt(mut prompt: Vec<usize>, answer: usize) -> Result<Self> {
        let target = prompt.len();
        prompt.push(answer);
        Self::new(prompt, target)
    }

    pub fn with_support(mut self, support: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = support.iter().find(|&&s| s >= self.target) {
            return Err(HetaError::Precondition(format!(
                "support index {} is not a context position (target {})",
                bad, self.target
            )));
        }
        self.support = Some(support);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.target < 1 || self.target >= self.ids.len() {
            return Err(HetaError::Precondition(format!(
                "target index {} must lie in 1..{}",
                self.target,
                self.ids.len()
            )));
        }
        Ok(())
    }

    pub fn context(&self) -> &[usize] {
        &self.ids[..self.target]
    }

    pub fn target_token(&self) -> usize {
        self.ids[self.target]
    }

    /// Position whose output distribution predicts the target.
    pub fn read_pos(&self) -> usize {
        self.target - 1
    }
}
