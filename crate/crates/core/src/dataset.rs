//! Planted-evidence corpus generation and JSONL persistence.
//!
//! A record lays out as `segment1 <s> segment2 <s> question`, followed by the
//! answer. Segment 2 contains one `KEY` marker; the answer is the token right
//! after it. Segment 1 holds filler and value tokens that never decide the
//! answer.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{HetaError, Result};
use crate::metrics::CuratedInstance;
use crate::model::vocab::SEPARATOR;
use crate::model::{train, Checkpoint, Model, ModelConfig, TrainConfig, TrainExample, TrainReport, Vocab};
use crate::numeric::rng_for;
use crate::sequence::TokenSequence;

pub const CORPUS_VERSION: u32 = 1;
pub const KEY: &str = "KEY";
pub const QUESTION: &str = "Q";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedSpec {
    pub segment1_len: usize,
    pub segment2_len: usize,
    pub num_values: usize,
    pub num_fillers: usize,
    /// Value tokens placed in segment 1 as distractors.
    pub segment1_values: usize,
    /// Value tokens in segment 2 besides the answer.
    pub segment2_values: usize,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            segment1_len: 8,
            segment2_len: 8,
            num_values: 16,
            num_fillers: 16,
            segment1_values: 3,
            segment2_values: 1,
        }
    }
}

impl PlantedSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HetaError::InvalidConfig(m));
        if self.num_values < 2 || self.num_fillers < 1 {
            return bad("need at least 2 value tokens and 1 filler token".into());
        }
        if self.segment1_len < 1 || self.segment1_values > self.segment1_len {
            return bad(format!("segment 1 of {} tokens cannot hold {} values", self.segment1_len, self.segment1_values));
        }
        // KEY, the answer, and the extra values
        if self.segment2_len < 2 + self.segment2_values {
            return bad(format!(
                "segment 2 of {} tokens cannot hold the marker, the answer and {} values",
                self.segment2_len, self.segment2_values
            ));
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<String> {
        (0..self.num_values).map(|k| format!("v{}", k)).collect()
    }

    pub fn fillers(&self) -> Vec<String> {
        (0..self.num_fillers).map(|k| format!("f{}", k)).collect()
    }

    /// Reserved tokens, `KEY`, `Q`, fillers, values.
    pub fn vocab(&self) -> Result<Vocab> {
        let mut extra = vec![KEY.to_string(), QUESTION.to_string()];
        extra.extend(self.fillers());
        extra.extend(self.values());
        Vocab::new(&extra)
    }

    /// Context length of every record.
    pub fn context_len(&self) -> usize {
        self.segment1_len + self.segment2_len + 3
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub version: u32,
    pub id: String,
    pub segment1: Vec<String>,
    pub segment2: Vec<String>,
    pub question: Vec<String>,
    pub answer: String,
    /// Indices into `segment2`.
    pub support: Vec<usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

/// A record resolved against a vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub id: String,
    pub tokens: TokenSequence,
    pub curated: CuratedInstance,
}

impl CorpusRecord {
    /// Full token layout: `segment1 <s> segment2 <s> question answer`.
    pub fn words(&self) -> Vec<&str> {
        let mut w: Vec<&str> = self.segment1.iter().map(String::as_str).collect();
        w.push(SEPARATOR);
        w.extend(self.segment2.iter().map(String::as_str));
        w.push(SEPARATOR);
        w.extend(self.question.iter().map(String::as_str));
        w.push(&self.answer);
        w
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        let bad = |m: String| {
            Err(HetaError::Precondition(format!("record {}: {}", self.id, m)))
        };
        if self.version != CORPUS_VERSION {
            return Err(HetaError::Version {
                found: self.version.to_string(),
                expected: CORPUS_VERSION.to_string(),
            });
        }
        if self.support.is_empty() {
            return bad("empty support".into());
        }
        if let Some(&s) = self.support.iter().find(|&&s| s >= self.segment2.len()) {
            return bad(format!("support index {} outside segment 2 ({} tokens)", s, self.segment2.len()));
        }
        if let Some(w) = self.words().into_iter().find(|w| vocab.id(w).is_none()) {
            return bad(format!("token {:?} not in vocabulary", w));
        }
        Ok(())
    }

    pub fn instance(&self, vocab: &Vocab) -> Result<Instance> {
        self.validate(vocab)?;
        let ids: Vec<usize> = self.words().iter().map(|w| vocab.id(w).expect("validated")).collect();
        let n1 = self.segment1.len();
        let n2 = self.segment2.len();
        let s2 = n1 + 1;
        let q = s2 + n2 + 1;
        let target = ids.len() - 1;
        let support: Vec<usize> = self.support.iter().map(|&s| s2 + s).collect();
        let curated = CuratedInstance {
            segment1: (0..n1).collect(),
            segment2: (s2..s2 + n2).collect(),
            support: support.clone(),
            question: (q..target).collect(),
            target_token: ids[target],
        };
        curated.validate()?;
        let tokens = TokenSequence::new(ids, target)?.with_support(support)?;
        Ok(Instance {
            id: self.id.clone(),
            tokens,
            curated,
        })
    }
}

pub fn generate_planted_corpus(spec: &PlantedSpec, count: usize, seed: u64) -> Result<Vec<CorpusRecord>> {
    spec.validate()?;
    let values = spec.values();
    let fillers = spec.fillers();
    (0..count)
        .map(|k| {
            let mut rng = rng_for(seed, &[k as u64]);
            let pick = |rng: &mut rand_chacha::ChaCha8Rng, pool: &[String]| pool[rng.gen_range(0..pool.len())].clone();

            let mut segment1: Vec<String> = (0..spec.segment1_len).map(|_| pick(&mut rng, &fillers)).collect();
            let mut slots: Vec<usize> = (0..spec.segment1_len).collect();
            slots.shuffle(&mut rng);
            for &s in &slots[..spec.segment1_values] {
                segment1[s] = pick(&mut rng, &values);
            }

            let mut segment2: Vec<String> = (0..spec.segment2_len).map(|_| pick(&mut rng, &fillers)).collect();
            let key = rng.gen_range(0..spec.segment2_len - 1);
            let answer = pick(&mut rng, &values);
            segment2[key] = KEY.to_string();
            segment2[key + 1] = answer.clone();
            let mut free: Vec<usize> = (0..spec.segment2_len).filter(|&i| i != key && i != key + 1).collect();
            free.shuffle(&mut rng);
            for &s in &free[..spec.segment2_values] {
                segment2[s] = pick(&mut rng, &values);
            }

            Ok(CorpusRecord {
                version: CORPUS_VERSION,
                id: format!("planted-{:06}", k),
                segment1,
                segment2,
                question: vec![QUESTION.to_string()],
                answer,
                support: vec![key + 1],
                metadata: BTreeMap::from([("key_index".to_string(), key.to_string())]),
            })
        })
        .collect()
}

/// The same record with its `KEY`-answer pair moved to another slot of
/// segment 2. Returns the rephrased record and the alignment between
/// sequence positions of the two layouts.
pub fn rephrase(record: &CorpusRecord, seed: u64) -> Result<(CorpusRecord, Vec<(usize, usize)>)> {
    let n2 = record.segment2.len();
    let key = record.support[0]
        .checked_sub(1)
        .filter(|&k| record.segment2[k] == KEY)
        .ok_or_else(|| HetaError::Precondition(format!("record {} has no KEY before its support", record.id)))?;
    if n2 < 3 {
        return Err(HetaError::Precondition("segment 2 too short to move the evidence".into()));
    }
    let mut rng = rng_for(seed, &[]);
    let mut new_key = key;
    while new_key == key {
        new_key = rng.gen_range(0..n2 - 1);
    }
    // order of segment-2 slots in the new layout
    let rest: Vec<usize> = (0..n2).filter(|&i| i != key && i != key + 1).collect();
    let mut order = Vec::with_capacity(n2);
    let mut it = rest.into_iter();
    for slot in 0..n2 {
        if slot == new_key {
            order.push(key);
        } else if slot == new_key + 1 {
            order.push(key + 1);
        } else {
            order.push(it.next().expect("slot count"));
        }
    }
    let mut out = record.clone();
    out.id = format!("{}-rephrased", record.id);
    out.segment2 = order.iter().map(|&i| record.segment2[i].clone()).collect();
    out.support = vec![new_key + 1];
    out.metadata.insert("key_index".into(), new_key.to_string());
    let s2 = record.segment1.len() + 1;
    let n = s2 + n2 + 1 + record.question.len();
    let mut align = Vec::with_capacity(n);
    for i in 0..n {
        if i >= s2 && i < s2 + n2 {
            let new_slot = i - s2;
            align.push((s2 + order[new_slot], i));
        } else {
            align.push((i, i));
        }
    }
    align.sort_unstable();
    Ok((out, align))
}

pub fn train_examples(records: &[CorpusRecord], vocab: &Vocab) -> Result<Vec<TrainExample>> {
    records
        .iter()
        .map(|r| {
            let inst = r.instance(vocab)?;
            Ok(TrainExample {
                context: inst.tokens.context().to_vec(),
                answer: inst.tokens.target_token(),
            })
        })
        .collect()
}

/// Model shape used for the planted corpus.
pub fn planted_model_config(spec: &PlantedSpec, seed: u64) -> Result<ModelConfig> {
    let vocab = spec.vocab()?;
    Ok(ModelConfig {
        layers: 2,
        heads: 2,
        d_model: 32,
        vocab_size: vocab.len(),
        max_len: spec.context_len().next_power_of_two().max(8),
        seed,
    })
}

/// Seed and size of the training corpus behind the shipped checkpoint.
pub const TRAIN_SEED: u64 = 1000;
pub const TRAIN_RECORDS: usize = 4000;
/// Seed and size of the evaluation corpus.
pub const EVAL_SEED: u64 = 1;
pub const EVAL_RECORDS: usize = 2000;

/// Optimizer settings used for the shipped checkpoint.
pub fn planted_train_config() -> TrainConfig {
    TrainConfig {
        steps: 3000,
        lr: 3e-3,
        stop_accuracy: 0.995,
        required_accuracy: 0.9,
        ..Default::default()
    }
}

/// The full recipe: default spec, training corpus, model seed 0.
pub fn train_default_planted() -> Result<(Checkpoint, TrainReport)> {
    let spec = PlantedSpec::default();
    let records = generate_planted_corpus(&spec, TRAIN_RECORDS, TRAIN_SEED)?;
    train_planted_model(&records, &spec.vocab()?, planted_model_config(&spec, 0)?, &planted_train_config())
}

/// Train a fresh model on `records`; fails below the configured held-out
/// accuracy.
pub fn train_planted_model(
    records: &[CorpusRecord],
    vocab: &Vocab,
    config: ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainReport)> {
    let examples = train_examples(records, vocab)?;
    let mut model = Model::init(config)?;
    let report = train(&mut model, &examples, train_cfg)?;
    Ok((
        Checkpoint {
            model,
            vocab: Some(vocab.clone()),
        },
        report,
    ))
}

/// One JSON document per line, with a trailing newline.
pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parse JSONL; blank lines are skipped and errors carry 1-based line numbers.
pub fn from_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| HetaError::Malformed {
            line: k + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn save_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(to_jsonl(records)?.as_bytes())?;
    Ok(())
}

pub fn load_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    from_jsonl(&fs::read_to_string(path)?)
}

/// Parse corpus JSONL, checking each record's version before its fields.
pub fn parse_corpus(text: &str) -> Result<Vec<CorpusRecord>> {
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| HetaError::Malformed { line: k + 1, message };
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == CORPUS_VERSION as u64 => {}
            Some(v) => {
                return Err(HetaError::Version {
                    found: v.to_string(),
                    expected: CORPUS_VERSION.to_string(),
                })
            }
            None => return Err(malformed("missing version".into())),
        }
        let rec: CorpusRecord = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
        if let Some(&s) = rec.support.iter().find(|&&s| s >= rec.segment2.len()) {
            return Err(malformed(format!("support index {} outside segment 2", s)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    parse_corpus(&fs::read_to_string(path)?)
}

pub fn save_corpus(records: &[CorpusRecord], path: &Path) -> Result<()> {
    save_jsonl(records, path)
}

/// Write a serializable report as pretty JSON with a trailing newline.
pub fn save_report<T: Serialize>(report: &T, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn answer_follows_the_marker() {
        let spec = PlantedSpec::default();
        let vocab = spec.vocab().unwrap();
        for r in generate_planted_corpus(&spec, 50, 7).unwrap() {
            let s = r.support[0];
            assert_eq!(r.segment2[s - 1], KEY);
            assert_eq!(r.segment2[s], r.answer);
            assert!(!r.segment1.iter().any(|t| t == KEY));
            assert_eq!(r.segment2.iter().filter(|t| *t == KEY).count(), 1);
            let inst = r.instance(&vocab).unwrap();
            assert_eq!(inst.tokens.target, spec.context_len());
            assert_eq!(inst.tokens.ids[inst.curated.support[0]], inst.curated.target_token);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = PlantedSpec::default();
        let a = to_jsonl(&generate_planted_corpus(&spec, 200, 1).unwrap()).unwrap();
        let b = to_jsonl(&generate_planted_corpus(&spec, 200, 1).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = to_jsonl(&generate_planted_corpus(&spec, 200, 2).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let recs = generate_planted_corpus(&PlantedSpec::default(), 20, 3).unwrap();
        let text = to_jsonl(&recs).unwrap();
        let back = parse_corpus(&text).unwrap();
        assert_eq!(back, recs);
        assert_eq!(to_jsonl(&back).unwrap(), text);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let recs = generate_planted_corpus(&PlantedSpec::default(), 3, 3).unwrap();
        let text = to_jsonl(&recs).unwrap();
        let cut = &text[..text.len() - 20];
        match parse_corpus(cut) {
            Err(HetaError::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let bumped = text.replacen("\"version\":1", "\"version\":2", 1);
        assert!(matches!(parse_corpus(&bumped), Err(HetaError::Version { .. })));
    }

    #[test]
    fn support_is_checked_at_load() {
        let mut r = generate_planted_corpus(&PlantedSpec::default(), 1, 0).unwrap().remove(0);
        r.support = vec![99];
        let text = to_jsonl(&[r]).unwrap();
        assert!(matches!(parse_corpus(&text), Err(HetaError::Malformed { line: 1, .. })));
    }

    #[test]
    fn rejects_tiny_specs() {
        let spec = PlantedSpec {
            segment2_len: 2,
            ..Default::default()
        };
        assert!(generate_planted_corpus(&spec, 1, 0).is_err());
    }

    #[test]
    fn rephrase_moves_the_evidence() {
        let spec = PlantedSpec::default();
        let vocab = spec.vocab().unwrap();
        for r in generate_planted_corpus(&spec, 20, 4).unwrap() {
            let (q, align) = rephrase(&r, 9).unwrap();
            let a = r.instance(&vocab).unwrap();
            let b = q.instance(&vocab).unwrap();
            assert_eq!(a.tokens.target_token(), b.tokens.target_token());
            assert_ne!(a.curated.support, b.curated.support);
            for &(i, j) in &align {
                assert_eq!(a.tokens.ids[i], b.tokens.ids[j]);
            }
            assert!(align.contains(&(a.curated.support[0], b.curated.support[0])));
        }
    }
}
