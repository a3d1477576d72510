//! Versioned per-instance attribution report records.

use serde::{Deserialize, Serialize};

use crate::error::{HetaError, Result};
use crate::heta::{AttributionVector, HetaConfig, Variant, Work};
use crate::model::Vocab;

pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub position: usize,
    pub token: String,
    pub attr: f64,
    #[serde(rename = "M", default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<f64>,
    #[serde(rename = "S", default, skip_serializing_if = "Option::is_none")]
    pub sensitivity: Option<f64>,
    #[serde(rename = "I", default, skip_serializing_if = "Option::is_none")]
    pub info: Option<f64>,
}

/// One line of `report.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub version: u32,
    pub instance: String,
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<Variant>,
    pub tokens: Vec<String>,
    pub target: usize,
    pub target_token: String,
    pub scores: Vec<TokenScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<HetaConfig>,
    pub work: Work,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl AttributionReport {
    /// `tokens` is the full id sequence the attribution was computed on.
    pub fn new(instance: &str, ids: &[usize], attr: &AttributionVector, vocab: &Vocab) -> Result<Self> {
        if attr.target >= ids.len() || attr.scores.len() != attr.target {
            return Err(HetaError::Precondition(format!(
                "attribution over {} tokens does not fit target {} of a {}-token sequence",
                attr.scores.len(),
                attr.target,
                ids.len()
            )));
        }
        let words = ids.iter().map(|&i| vocab.token(i).map(str::to_string)).collect::<Result<Vec<_>>>()?;
        let comp = attr.components.as_ref();
        let pick = |v: Option<&Vec<f64>>, i: usize| v.map(|v| v[i]);
        let scores = attr
            .scores
            .iter()
            .enumerate()
            .map(|(i, &a)| TokenScore {
                position: i,
                token: words[i].clone(),
                attr: a,
                gate: comp.map(|c| c.gate[i]),
                sensitivity: pick(comp.and_then(|c| c.sensitivity.as_ref()), i),
                info: pick(comp.and_then(|c| c.info.as_ref()), i),
            })
            .collect();
        Ok(Self {
            version: REPORT_VERSION,
            instance: instance.to_string(),
            method: attr.method.clone(),
            variant: attr.variant,
            target_token: words[attr.target].clone(),
            tokens: words,
            target: attr.target,
            scores,
            config: attr.config.clone(),
            work: attr.work,
            flags: attr.flags.clone(),
        })
    }

    pub fn label(&self) -> String {
        match self.variant {
            Some(v) => format!("{}/{}", self.method, v),
            None => self.method.clone(),
        }
    }

    pub fn attr(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s.attr).collect()
    }
}

/// Hex SHA-256 of the compact JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    use sha2::{Digest, Sha256};
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(value)?)))
}

/// Parse `report.jsonl`, rejecting unknown versions.
pub fn parse_reports(text: &str) -> Result<Vec<AttributionReport>> {
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| HetaError::Malformed {
            line: k + 1,
            message: e.to_string(),
        })?;
        let found = v.get("version").and_then(|v| v.as_u64());
        if found != Some(REPORT_VERSION as u64) {
            return Err(HetaError::Version {
                found: found.map_or("none".into(), |f| f.to_string()),
                expected: REPORT_VERSION.to_string(),
            });
        }
    }
    crate::dataset::from_jsonl(text)
}

/// Largest and mean absolute per-token difference of two reports on the
/// same instance.
pub fn score_delta(a: &AttributionReport, b: &AttributionReport) -> Result<(f64, f64)> {
    if a.tokens != b.tokens || a.target != b.target {
        return Err(HetaError::Precondition("reports cover different instances".into()));
    }
    let d: Vec<f64> = a.scores.iter().zip(&b.scores).map(|(x, y)| (x.attr - y.attr).abs()).collect();
    let max = d.iter().cloned().fold(0.0, f64::max);
    Ok((max, d.iter().sum::<f64>() / d.len().max(1) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heta;
    use crate::model::{Model, ModelConfig};
    use crate::sequence::TokenSequence;

    fn setup() -> (Model, Vocab, TokenSequence) {
        let vocab = Vocab::new(&["a", "b", "c", "d"]).unwrap();
        let m = Model::init(ModelConfig {
            layers: 1,
            heads: 1,
            d_model: 4,
            vocab_size: vocab.len(),
            max_len: 8,
            seed: 2,
        })
        .unwrap();
        (m, vocab, TokenSequence::new(vec![3, 4, 5, 6], 3).unwrap())
    }

    #[test]
    fn round_trip_and_fields() {
        let (m, vocab, t) = setup();
        let a = heta::attribute(&m, &t, &HetaConfig { samples: 2, ..Default::default() }).unwrap();
        let r = AttributionReport::new("x", &t.ids, &a, &vocab).unwrap();
        assert_eq!(r.tokens, ["a", "b", "c", "d"]);
        assert_eq!(r.target_token, "d");
        assert_eq!(r.scores.len(), 3);
        assert!(r.scores.iter().all(|s| s.gate.is_some() && s.sensitivity.is_some() && s.info.is_some()));
        let line = serde_json::to_string(&r).unwrap();
        assert!(line.contains("\"M\":") && line.contains("\"S\":") && line.contains("\"I\":"));
        let back = parse_reports(&line).unwrap();
        assert_eq!(back, vec![r.clone()]);
        assert_eq!(score_delta(&r, &back[0]).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn rejects_other_versions() {
        let (m, vocab, t) = setup();
        let a = heta::attribute(&m, &t, &HetaConfig { samples: 2, ..Default::default() }).unwrap();
        let mut r = AttributionReport::new("x", &t.ids, &a, &vocab).unwrap();
        r.version = 7;
        let line = serde_json::to_string(&r).unwrap();
        assert!(matches!(parse_reports(&line), Err(HetaError::Version { .. })));
        assert!(matches!(parse_reports("{"), Err(HetaError::Malformed { line: 1, .. })));
    }
}
