//! Input loading and run-directory output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use heta_core::dataset::{self, CorpusRecord, Instance};
use heta_core::model::{Checkpoint, Model, Vocab};
use heta_core::{HetaError, Result};

use crate::error::CliError;

fn must_exist(path: &Path) -> Result<()> {
    if path.exists() {
        return Ok(());
    }
    Err(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{} does not exist", path.display())).into())
}

pub fn load_model(path: &Path) -> Result<(Model, Vocab)> {
    must_exist(path)?;
    let ck = Checkpoint::load(path)?;
    let vocab = ck
        .vocab
        .ok_or_else(|| HetaError::VocabMismatch(format!("checkpoint {} carries no vocabulary", path.display())))?;
    Ok((ck.model, vocab))
}

/// The vocabulary file accompanying a corpus: the explicit one, else a
/// `vocab.json` next to the corpus.
fn corpus_vocab(corpus: &Path, explicit: Option<&Path>) -> Option<PathBuf> {
    if let Some(p) = explicit {
        return Some(p.to_path_buf());
    }
    let sibling = corpus.parent().unwrap_or(Path::new(".")).join("vocab.json");
    sibling.exists().then_some(sibling)
}

/// Load a corpus for a checkpoint vocabulary, failing on any vocabulary
/// disagreement.
pub fn load_instances(
    corpus: &Path,
    vocab: &Vocab,
    explicit_vocab: Option<&Path>,
    limit: Option<usize>,
) -> Result<(Vec<CorpusRecord>, Vec<Instance>)> {
    must_exist(corpus)?;
    if let Some(vp) = corpus_vocab(corpus, explicit_vocab) {
        must_exist(&vp)?;
        let theirs = Vocab::load(&vp)?;
        if theirs.hash() != vocab.hash() {
            return Err(HetaError::VocabMismatch(format!(
                "{} has hash {}, the checkpoint {}",
                vp.display(),
                theirs.hash(),
                vocab.hash()
            )));
        }
    }
    let mut records = dataset::load_corpus(corpus)?;
    if let Some(n) = limit {
        records.truncate(n);
    }
    for r in &records {
        if let Some(w) = r.words().into_iter().find(|w| vocab.id(w).is_none()) {
            return Err(HetaError::VocabMismatch(format!("record {} uses token {:?} unknown to the checkpoint", r.id, w)));
        }
    }
    let instances = records.iter().map(|r| r.instance(vocab)).collect::<Result<Vec<_>>>()?;
    Ok((records, instances))
}

/// Map `f` over `items` on `jobs` threads; output order follows input order.
pub fn par_map<T, R, F>(jobs: usize, items: &[T], f: F) -> std::result::Result<Vec<R>, CliError>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    if jobs <= 1 {
        return Ok(items.iter().map(&f).collect::<Result<Vec<_>>>()?);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {}", e)))?;
    Ok(pool.install(|| items.par_iter().map(&f).collect::<Result<Vec<_>>>())?)
}

/// Output side of a run: every file lands under `dir`, and wall-clock
/// timings are collected for `timings.json`.
pub struct Run {
    pub dir: PathBuf,
    started: Instant,
    timings: BTreeMap<String, serde_json::Value>,
    written: Vec<String>,
}

impl Run {
    pub fn new<C: Serialize>(dir: &Path, config: &C) -> std::result::Result<Self, CliError> {
        std::fs::create_dir_all(dir)?;
        let mut run = Self {
            dir: dir.to_path_buf(),
            started: Instant::now(),
            timings: BTreeMap::new(),
            written: Vec::new(),
        };
        run.json("config.json", config)?;
        Ok(run)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn note(&mut self, name: &str) {
        self.written.push(name.to_string());
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        dataset::save_report(value, &self.path(name))?;
        self.note(name);
        Ok(())
    }

    pub fn jsonl<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        dataset::save_jsonl(rows, &self.path(name))?;
        self.note(name);
        Ok(())
    }

    pub fn text(&mut self, name: &str, body: &str) -> Result<()> {
        std::fs::write(self.path(name), body)?;
        self.note(name);
        Ok(())
    }

    pub fn time<T: Serialize>(&mut self, key: &str, value: T) {
        self.timings
            .insert(key.to_string(), serde_json::to_value(value).expect("serializable timing"));
    }

    /// Write `timings.json` and list the outputs on stdout.
    pub fn finish(mut self) -> Result<()> {
        let total = self.started.elapsed().as_secs_f64();
        self.time("total_seconds", total);
        let timings = std::mem::take(&mut self.timings);
        self.json("timings.json", &timings)?;
        println!("{}", serde_json::json!({"run_dir": self.dir, "files": self.written}));
        Ok(())
    }
}
