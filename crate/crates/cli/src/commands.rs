//! Subcommand bodies. Each takes its resolved configuration and writes into
//! the run directory.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use heta_core::baselines::{baseline_attribute, baseline_attribute_at, BaselineConfig, BaselineMethod};
use heta_core::dataset::{self, Instance, PlantedSpec};
use heta_core::heta::{self, AttributionVector, FitSample, HetaConfig, PhaseTimes, Variant, BETA_GRID};
use heta_core::info::{self, MaskScheme};
use heta_core::metrics::{self, Aggregate, CuratedInstance, DecodeSetting, InstanceMetrics};
use heta_core::model::{Model, ModelConfig, TrainConfig, Vocab};
use heta_core::numeric::{derive_seed, rng_for};
use heta_core::objective::LmObjective;
use heta_core::report::{config_hash, score_delta, AttributionReport};
use heta_core::theory::{self, BoundReport};
use heta_core::{HetaError, Result, TokenSequence};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::io::{load_instances, load_model, par_map, Run};

type CmdResult = std::result::Result<(), CliError>;

fn required(p: &Option<PathBuf>, flag: &str) -> std::result::Result<PathBuf, CliError> {
    p.clone().ok_or_else(|| CliError::Usage(format!("--{} is required", flag)))
}

/// An attribution method: HETA under one variant, or a baseline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Method {
    Heta(Variant),
    Baseline(BaselineMethod),
}

impl Method {
    pub fn parse(s: &str, default_variant: Variant) -> std::result::Result<Self, CliError> {
        if s == "heta" {
            return Ok(Method::Heta(default_variant));
        }
        if let Some(v) = s.strip_prefix("heta/") {
            return v.parse().map(Method::Heta).map_err(|e: HetaError| CliError::Usage(e.to_string()));
        }
        s.parse()
            .map(Method::Baseline)
            .map_err(|_| CliError::Usage(format!("unknown method {:?}; use heta, heta/<variant> or a baseline", s)))
    }

    pub fn name(&self) -> String {
        match self {
            Method::Heta(v) => format!("heta/{}", v),
            Method::Baseline(b) => b.name().to_string(),
        }
    }

    /// File-name-safe label.
    pub fn slug(&self) -> String {
        self.name().replace('/', "-").replace('+', "")
    }

    fn attribute(&self, model: &Model, tokens: &TokenSequence, cfg: &RunCfgs) -> Result<(AttributionVector, PhaseTimes)> {
        match self {
            Method::Heta(v) => heta::attribute_timed(model, tokens, &cfg.heta.with_variant(*v)),
            Method::Baseline(b) => {
                let clock = Instant::now();
                let a = baseline_attribute(model, tokens, &cfg.baseline_for(*b))?;
                let times = PhaseTimes {
                    combine: clock.elapsed().as_secs_f64(),
                    ..Default::default()
                };
                Ok((a, times))
            }
        }
    }

    fn attribute_at(&self, model: &Model, x: &heta_core::autodiff::Tensor, tokens: &TokenSequence, cfg: &RunCfgs) -> Result<Vec<f64>> {
        Ok(match self {
            Method::Heta(v) => heta::attribute_at(model, x, tokens, &cfg.heta.with_variant(*v))?.scores,
            Method::Baseline(b) => baseline_attribute_at(model, x, tokens, &cfg.baseline_for(*b))?.scores,
        })
    }
}

/// The method configurations shared by all commands.
pub struct RunCfgs {
    pub heta: HetaConfig,
    pub baseline: BaselineConfig,
}

impl RunCfgs {
    pub fn of<A>(cfg: &RunConfig<A>) -> Self {
        Self {
            heta: cfg.heta.clone(),
            baseline: cfg.baseline.clone(),
        }
    }

    fn baseline_for(&self, m: BaselineMethod) -> BaselineConfig {
        BaselineConfig {
            method: m,
            ..self.baseline.clone()
        }
    }
}

fn parse_methods(names: &[String], variant: Variant) -> std::result::Result<Vec<Method>, CliError> {
    let methods = names.iter().map(|m| Method::parse(m, variant)).collect::<std::result::Result<Vec<_>, _>>()?;
    if methods.is_empty() {
        return Err(CliError::Usage("no methods selected".into()));
    }
    for (k, m) in methods.iter().enumerate() {
        if methods[..k].contains(m) {
            return Err(CliError::Usage(format!("method {} listed twice", m.name())));
        }
    }
    Ok(methods)
}

fn add_times(into: &mut BTreeMap<String, PhaseTimes>, key: &str, t: &PhaseTimes) {
    into.entry(key.to_string()).or_default().add(t);
}

fn heatmap_rows(vocab: &Vocab, id: &str, tokens: &TokenSequence, label: &str, scores: &[f64]) -> Result<(String, Vec<String>, Vec<f64>)> {
    let words = tokens.context().iter().map(|&i| vocab.token(i).map(str::to_string)).collect::<Result<Vec<_>>>()?;
    Ok((
        format!("{} · {} → {}", id, label, vocab.token(tokens.target_token())?),
        words,
        scores.to_vec(),
    ))
}

// ---------------------------------------------------------------- gen-corpus

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GenCorpusArgs {
    pub count: usize,
    pub seed: u64,
    pub spec: PlantedSpec,
}

impl Default for GenCorpusArgs {
    fn default() -> Self {
        Self {
            count: dataset::EVAL_RECORDS,
            seed: dataset::EVAL_SEED,
            spec: PlantedSpec::default(),
        }
    }
}

pub fn gen_corpus(cfg: &RunConfig<GenCorpusArgs>, mut run: Run) -> CmdResult {
    let a = &cfg.args;
    a.spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if a.count == 0 {
        return Err(CliError::Usage("count must be at least 1".into()));
    }
    let clock = Instant::now();
    let records = dataset::generate_planted_corpus(&a.spec, a.count, a.seed)?;
    run.time("generate_seconds", clock.elapsed().as_secs_f64());
    dataset::save_corpus(&records, &run.path("corpus.jsonl"))?;
    run.text("corpus.jsonl", &std::fs::read_to_string(run.path("corpus.jsonl"))?)?;
    a.spec.vocab()?.save(&run.path("vocab.json"))?;
    run.text("vocab.json", &std::fs::read_to_string(run.path("vocab.json"))?)?;
    Ok(run.finish()?)
}

// --------------------------------------------------------------------- train

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainArgs {
    /// Training corpus; generated from `records` and `corpus_seed` when absent.
    pub corpus: Option<PathBuf>,
    pub records: usize,
    pub corpus_seed: u64,
    pub spec: PlantedSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for TrainArgs {
    fn default() -> Self {
        let spec = PlantedSpec::default();
        Self {
            corpus: None,
            records: dataset::TRAIN_RECORDS,
            corpus_seed: dataset::TRAIN_SEED,
            model: dataset::planted_model_config(&spec, 0).expect("default spec is valid"),
            spec,
            train: dataset::planted_train_config(),
        }
    }
}

pub fn train_cmd(cfg: &RunConfig<TrainArgs>, mut run: Run) -> CmdResult {
    let a = &cfg.args;
    let vocab = a.spec.vocab()?;
    let records = match &a.corpus {
        Some(p) => load_instances(p, &vocab, None, None)?.0,
        None => dataset::generate_planted_corpus(&a.spec, a.records, a.corpus_seed)?,
    };
    if a.model.vocab_size != vocab.len() {
        return Err(CliError::Usage(format!(
            "model vocab_size {} does not match the {}-token vocabulary",
            a.model.vocab_size,
            vocab.len()
        )));
    }
    let clock = Instant::now();
    let (ck, report) = dataset::train_planted_model(&records, &vocab, a.model.clone(), &a.train)?;
    run.time("train_seconds", clock.elapsed().as_secs_f64());
    ck.save(&run.path("model.ckpt"))?;
    run.text("model.ckpt.sha256", &format!("{}\n", config_hash(&ck.to_bytes()?)?))?;
    vocab.save(&run.path("vocab.json"))?;
    run.text("vocab.json", &std::fs::read_to_string(run.path("vocab.json"))?)?;
    run.json("train_report.json", &report)?;
    eprintln!(
        "trained {} steps, held-out accuracy {:.3} on {} examples",
        report.steps, report.holdout_accuracy, report.holdout_size
    );
    Ok(run.finish()?)
}

// ----------------------------------------------------------------- attribute

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct InputArgs {
    pub checkpoint: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    /// Vocabulary file the corpus was written with.
    pub vocab: Option<PathBuf>,
    pub limit: Option<usize>,
}

impl InputArgs {
    fn load(&self) -> std::result::Result<(Model, Vocab, Vec<Instance>), CliError> {
        let (model, vocab) = load_model(&required(&self.checkpoint, "checkpoint")?)?;
        let corpus = required(&self.corpus, "corpus")?;
        let (_, instances) = load_instances(&corpus, &vocab, self.vocab.as_deref(), self.limit)?;
        if instances.is_empty() {
            return Err(CliError::Core(HetaError::Precondition("corpus has no records".into())));
        }
        Ok((model, vocab, instances))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributeArgs {
    pub input: InputArgs,
    /// Whitespace-separated tokens; the last one is the target. Replaces the
    /// corpus when given.
    pub text: Option<String>,
    /// `heta`, `heta/<variant>` or a baseline name.
    pub methods: Vec<String>,
    /// Extra HETA variants, each written to its own report.
    pub variants: Vec<Variant>,
    pub heatmap: bool,
}

impl Default for AttributeArgs {
    fn default() -> Self {
        Self {
            input: InputArgs {
                limit: Some(5),
                ..Default::default()
            },
            text: None,
            methods: vec!["heta".into()],
            variants: Vec::new(),
            heatmap: true,
        }
    }
}

#[derive(Serialize)]
struct DeltaRow {
    instance: String,
    method: String,
    against: String,
    max_abs: f64,
    mean_abs: f64,
}

pub fn attribute(cfg: &RunConfig<AttributeArgs>, mut run: Run) -> CmdResult {
    let a = &cfg.args;
    let cfgs = RunCfgs::of(cfg);
    let mut methods = parse_methods(&a.methods, cfg.heta.variant)?;
    for v in &a.variants {
        let m = Method::Heta(*v);
        if !methods.contains(&m) {
            methods.push(m);
        }
    }
    let (model, vocab) = load_model(&required(&a.input.checkpoint, "checkpoint")?)?;
    let items: Vec<(String, TokenSequence)> = match &a.text {
        Some(text) => {
            if a.input.corpus.is_some() {
                return Err(CliError::Usage("--text and --corpus are mutually exclusive".into()));
            }
            let ids = vocab.encode(text);
            if ids.len() < 3 {
                return Err(CliError::Usage("--text needs at least two context tokens and a target".into()));
            }
            let target = ids.len() - 1;
            vec![("text".into(), TokenSequence::new(ids, target)?)]
        }
        None => {
            let corpus = required(&a.input.corpus, "corpus")?;
            load_instances(&corpus, &vocab, a.input.vocab.as_deref(), a.input.limit)?
                .1
                .into_iter()
                .map(|i| (i.id, i.tokens))
                .collect()
        }
    };
    let results = par_map(cfg.jobs, &items, |(id, t)| {
        methods
            .iter()
            .map(|m| {
                let (attr, times) = m.attribute(&model, t, &cfgs)?;
                Ok((AttributionReport::new(id, &t.ids, &attr, &vocab)?, times))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut times: BTreeMap<String, PhaseTimes> = BTreeMap::new();
    let mut heat = Vec::new();
    let mut deltas = Vec::new();
    for (k, m) in methods.iter().enumerate() {
        let reports: Vec<AttributionReport> = results.iter().map(|r| r[k].0.clone()).collect();
        for r in &results {
            add_times(&mut times, &m.name(), &r[k].1);
        }
        run.jsonl(&format!("report.{}.jsonl", m.slug()), &reports)?;
        if k > 0 {
            for r in &results {
                let (max_abs, mean_abs) = score_delta(&r[0].0, &r[k].0)?;
                deltas.push(DeltaRow {
                    instance: r[0].0.instance.clone(),
                    method: m.name(),
                    against: methods[0].name(),
                    max_abs,
                    mean_abs,
                });
            }
        }
    }
    if a.heatmap {
        for ((id, t), r) in items.iter().zip(&results) {
            for (m, (rep, _)) in methods.iter().zip(r) {
                heat.push(heatmap_rows(&vocab, id, t, &m.name(), &rep.attr())?);
            }
        }
        run.text("heatmap.html", &metrics::heatmap_html("attributions", &heat))?;
    }
    if !deltas.is_empty() {
        run.jsonl("delta.jsonl", &deltas)?;
        for m in &methods[1..] {
            let rows: Vec<&DeltaRow> = deltas.iter().filter(|d| d.method == m.name()).collect();
            let worst = rows.iter().map(|d| d.max_abs).fold(0.0, f64::max);
            let mean = rows.iter().map(|d| d.mean_abs).sum::<f64>() / rows.len() as f64;
            eprintln!("{} vs {}: max |Δ| {:.3e}, mean |Δ| {:.3e}", m.name(), methods[0].name(), worst, mean);
        }
    }
    run.time("phases", &times);
    Ok(run.finish()?)
}

// ------------------------------------------------------------------ evaluate

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateArgs {
    pub input: InputArgs,
    pub methods: Vec<String>,
    /// Tokens deleted by the intervention check.
    pub deletion_k: usize,
    /// Noise scale of the sensitivity metric; skipped when absent.
    pub sensitivity_delta: Option<f64>,
    pub sensitivity_samples: usize,
    /// Also attribute a rephrased copy of each record and report rank
    /// correlation over aligned tokens.
    pub rephrase: bool,
    /// Instances rendered into `heatmap.html`.
    pub heatmap: usize,
}

impl Default for EvaluateArgs {
    fn default() -> Self {
        Self {
            input: InputArgs {
                limit: Some(200),
                ..Default::default()
            },
            methods: ["heta", "grad", "input-x-grad", "ig", "attn-rollout"].iter().map(|s| s.to_string()).collect(),
            deletion_k: 5,
            sensitivity_delta: None,
            sensitivity_samples: 4,
            rephrase: false,
            heatmap: 10,
        }
    }
}

fn instance_metrics(
    model: &Model,
    inst: &Instance,
    scores: &[f64],
) -> Result<BTreeMap<String, f64>> {
    let mut m = BTreeMap::new();
    let cur: &CuratedInstance = &inst.curated;
    m.insert("dsa".into(), metrics::dsa(scores, cur)?);
    m.insert("f1".into(), metrics::alignment_f1(scores, &cur.support, cur.support.len())?);
    let soft = metrics::soft_nc_ns(model, &inst.tokens, &metrics::unit_scale(scores))?;
    m.insert("soft_nc".into(), soft.soft_nc);
    m.insert("soft_ns".into(), soft.soft_ns);
    let c = metrics::perturbation_curves(model, &inst.tokens, scores, MaskScheme::Sentinel)?;
    m.insert("morf_area".into(), c.morf_area);
    m.insert("lerf_area".into(), c.lerf_area);
    m.insert("abpc".into(), c.abpc);
    m.insert("aopc_del".into(), c.aopc_del);
    m.insert("aopc_ins".into(), c.aopc_ins);
    Ok(m)
}

pub fn evaluate(cfg: &RunConfig<EvaluateArgs>, mut run: Run) -> CmdResult {
    let a = &cfg.args;
    let cfgs = RunCfgs::of(cfg);
    let methods = parse_methods(&a.methods, cfg.heta.variant)?;
    if let Some(d) = a.sensitivity_delta {
        if !(d > 0.0) || a.sensitivity_samples < 2 {
            return Err(CliError::Usage("sensitivity needs delta > 0 and at least 2 samples".into()));
        }
        if methods.iter().any(|m| matches!(m, Method::Heta(v) if v.windowed())) {
            return Err(CliError::Usage("sensitivity is not available for windowed variants".into()));
        }
    }
    if a.deletion_k == 0 {
        return Err(CliError::Usage("deletion-k must be at least 1".into()));
    }
    let (model, vocab) = load_model(&required(&a.input.checkpoint, "checkpoint")?)?;
    let corpus = required(&a.input.corpus, "corpus")?;
    let (records, instances) = load_instances(&corpus, &vocab, a.input.vocab.as_deref(), a.input.limit)?;
    let pairs: Vec<(usize, &Instance)> = instances.iter().enumerate().collect();
    let results = par_map(cfg.jobs, &pairs, |&(j, inst)| {
        let mut out = Vec::new();
        for (k, m) in methods.iter().enumerate() {
            let (attr, times) = m.attribute(&model, &inst.tokens, &cfgs)?;
            let mut row = instance_metrics(&model, inst, &attr.scores)?;
            if let Some(delta) = a.sensitivity_delta {
                let x = model.embed(inst.tokens.context())?;
                let seed = derive_seed(cfg.heta.seed, &[j as u64, k as u64]);
                let s = metrics::sensitivity(&x, |y| m.attribute_at(&model, y, &inst.tokens, &cfgs), delta, a.sensitivity_samples, seed)?;
                row.insert("sensitivity".into(), s);
            }
            if a.rephrase {
                let (other, align) = dataset::rephrase(&records[j], cfg.heta.seed)?;
                let other = other.instance(&vocab)?;
                let (b, _) = m.attribute(&model, &other.tokens, &cfgs)?;
                let ctx: Vec<(usize, usize)> = align
                    .into_iter()
                    .filter(|&(p, q)| p < inst.tokens.target && q < other.tokens.target)
                    .collect();
                row.insert("rephrase_rho".into(), metrics::rephrase_robustness(&attr.scores, &b.scores, &ctx)?);
            }
            out.push((attr.scores, row, times));
        }
        Ok(out)
    })?;
    let mut rows = Vec::new();
    let mut times: BTreeMap<String, PhaseTimes> = BTreeMap::new();
    for (inst, per) in instances.iter().zip(&results) {
        for (m, (_, metrics_row, t)) in methods.iter().zip(per) {
            rows.push(InstanceMetrics {
                version: metrics::EVAL_VERSION,
                instance: inst.id.clone(),
                method: m.name(),
                metrics: metrics_row.clone(),
            });
            add_times(&mut times, &m.name(), t);
        }
    }
    run.jsonl("eval.jsonl", &rows)?;
    let hash = config_hash(cfg)?;
    let mut summary = metrics::summarize(&rows, cfg.heta.seed, &hash)?;
    summary
        .notes
        .push("dsa: mass normalized over both segments, so values lie in [-1, 1]".into());
    run.json("summary.json", &summary)?;

    let tokens: Vec<TokenSequence> = instances.iter().map(|i| i.tokens.clone()).collect();
    let mut deletion = Vec::new();
    if tokens.len() >= 2 {
        for (k, m) in methods.iter().enumerate() {
            let scores: Vec<Vec<f64>> = results.iter().map(|r| r[k].0.clone()).collect();
            deletion.push(theory::deletion_intervention_check(&model, &tokens, &m.name(), &scores, a.deletion_k, cfg.heta.seed)?);
        }
        run.json("deletion.json", &deletion)?;
    }
    let mut heat = Vec::new();
    for (inst, per) in instances.iter().zip(&results).take(a.heatmap) {
        for (m, (scores, _, _)) in methods.iter().zip(per) {
            heat.push(heatmap_rows(&vocab, &inst.id, &inst.tokens, &m.name(), scores)?);
        }
    }
    if !heat.is_empty() {
        run.text("heatmap.html", &metrics::heatmap_html("evaluation", &heat))?;
    }
    for (method, agg) in &summary.methods {
        if let Some(d) = agg.get("dsa") {
            eprintln!("{:24} dsa {:.4} ± {:.4}", method, d.mean, d.stderr.unwrap_or(0.0));
        }
    }
    run.time("phases", &times);
    Ok(run.finish()?)
}

// -------------------------------------------------------------------- ablate

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateArgs {
    pub input: InputArgs,
    pub resamples: usize,
}

impl Default for AblateArgs {
    fn default() -> Self {
        Self {
            input: InputArgs {
                limit: Some(200),
                ..Default::default()
            },
            resamples: 1000,
        }
    }
}

#[derive(Serialize)]
struct AblationRow {
    variant: Variant,
    dsa: Aggregate,
    ci95: (f64, f64),
    /// Bootstrap interval of the mean of `dsa(full) − dsa(variant)`.
    full_minus_ci95: (f64, f64),
    forward_passes: f64,
    hvps: f64,
}

pub fn ablate(cfg: &RunConfig<AblateArgs>, mut run: Run) -> CmdResult {
    let a = &cfg.args;
    if a.resamples == 0 {
        return Err(CliError::Usage("resamples must be at least 1".into()));
    }
    let (model, _, instances) = a.input.load()?;
    let variants: Vec<Variant> = Variant::ABLATIONS.iter().chain(&Variant::EFFICIENCY).copied().collect();
    let base = &cfg.heta;
    let results = par_map(cfg.jobs, &instances, |inst| {
        let mut out = Vec::new();
        let clock = Instant::now();
        let shared = heta::attribute_variants(&model, &inst.tokens, base, &Variant::ABLATIONS)?;
        let shared_secs = clock.elapsed().as_secs_f64();
        for a in shared {
            out.push((a, shared_secs));
        }
        for v in Variant::EFFICIENCY {
            let clock = Instant::now();
            let a = heta::attribute(&model, &inst.tokens, &base.with_variant(v))?;
            out.push((a, clock.elapsed().as_secs_f64()));
        }
        Ok(out)
    })?;
    let mut dsa: Vec<Vec<f64>> = vec![Vec::new(); variants.len()];
    let mut rows_out = Vec::new();
    let mut secs = vec![0.0; variants.len()];
    for (inst, per) in instances.iter().zip(&results) {
        for (k, (attr, s)) in per.iter().enumerate() {
            let d = metrics::dsa(&attr.scores, &inst.curated)?;
            dsa[k].push(d);
            secs[k] += s;
            let mut m = BTreeMap::new();
            m.insert("dsa".to_string(), d);
            m.insert("forward_passes".to_string(), attr.work.forward_passes as f64);
            m.insert("hvps".to_string(), attr.work.hvps as f64);
            rows_out.push(InstanceMetrics {
                version: metrics::EVAL_VERSION,
                instance: inst.id.clone(),
                method: attr.label(),
                metrics: m,
            });
        }
    }
    let n = instances.len() as f64;
    let mut table = Vec::new();
    for (k, v) in variants.iter().enumerate() {
        let diff: Vec<f64> = dsa[0].iter().zip(&dsa[k]).map(|(f, o)| f - o).collect();
        table.push(AblationRow {
            variant: *v,
            dsa: Aggregate::of(&dsa[k])?,
            ci95: metrics::bootstrap_mean_ci(&dsa[k], a.resamples, 0.95, cfg.heta.seed)?,
            full_minus_ci95: metrics::bootstrap_mean_ci(&diff, a.resamples, 0.95, cfg.heta.seed)?,
            forward_passes: results.iter().map(|r| r[k].0.work.forward_passes as f64).sum::<f64>() / n,
            hvps: results.iter().map(|r| r[k].0.work.hvps as f64).sum::<f64>() / n,
        });
    }
    let mut md = String::from("| variant | DSA mean | std err | 95% CI | full − variant 95% CI | forward passes | HVPs |\n|---|---:|---:|---|---|---:|---:|\n");
    for r in &table {
        md.push_str(&format!(
            "| {} | {:.4} | {:.4} | [{:.4}, {:.4}] | [{:.4}, {:.4}] | {:.1} | {:.1} |\n",
            r.variant,
            r.dsa.mean,
            r.dsa.stderr.unwrap_or(0.0),
            r.ci95.0,
            r.ci95.1,
            r.full_minus_ci95.0,
            r.full_minus_ci95.1,
            r.forward_passes,
            r.hvps
        ));
    }
    run.jsonl("ablation.jsonl", &rows_out)?;
    run.json("ablation.json", &table)?;
    run.text("ablation.md", &md)?;
    eprint!("{}", md);
    let per_variant: BTreeMap<String, f64> = variants.iter().zip(&secs).map(|(v, s)| (v.to_string(), *s)).collect();
    run.time("variant_seconds", per_variant);
    run.time("note", "the six ablations share one component pass; each of them reports that pass's time");
    Ok(run.finish()?)
}

// --------------------------------------------------------------------- sweep

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    Beta,
    Decoding,
    All,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepArgs {
    pub input: InputArgs,
    pub kind: SweepKind,
    /// Random multi-token spans per instance used to fit β and γ.
    pub spans: usize,
    pub seeds: Vec<u64>,
}

impl Default for SweepArgs {
    fn default() -> Self {
        Self {
            input: InputArgs {
                limit: Some(10),
                ..Default::default()
            },
            kind: SweepKind::All,
            spans: theory::FIT_SPANS,
            seeds: vec![0, 1],
        }
    }
}

#[derive(Serialize)]
struct BetaRow {
    beta: f64,
    gamma: f64,
    dsa: Aggregate,
}

pub fn sweep(cfg: &RunConfig<SweepArgs>, mut run: Run) -> CmdResult {
    let a = &cfg.args;
    let (model, _, instances) = a.input.load()?;
    let cfgs = RunCfgs::of(cfg);
    if matches!(a.kind, SweepKind::Beta | SweepKind::All) {
        let clock = Instant::now();
        let base = cfg.heta.with_variant(Variant::Full);
        let per = par_map(cfg.jobs, &instances, |inst| {
            let (comp, _, _) = heta::compute_components(&model, &inst.tokens, &base)?;
            let fit = theory::fit_samples(&model, &inst.tokens, &comp, base.mask, a.spans, base.seed)?;
            Ok((comp, fit))
        })?;
        let mut rows = Vec::new();
        for &b in &BETA_GRID {
            let g = 1.0 - b;
            let d = per
                .iter()
                .zip(&instances)
                .map(|((comp, _), inst)| metrics::dsa(&heta::combine_variant(comp, Variant::Full, b, g), &inst.curated))
                .collect::<Result<Vec<_>>>()?;
            rows.push(BetaRow {
                beta: b,
                gamma: g,
                dsa: Aggregate::of(&d)?,
            });
        }
        let samples: Vec<FitSample> = per.iter().flat_map(|(_, f)| f.iter().copied()).collect();
        let fit = heta::fit_weights_grid(&samples, &BETA_GRID)?;
        let free = heta::fit_weights(&samples)?;
        run.json(
            "sweep-beta.json",
            &serde_json::json!({"rows": rows, "grid_fit": fit, "free_fit": free}),
        )?;
        for r in &rows {
            eprintln!("beta {:.1} gamma {:.1}: dsa {:.4}", r.beta, r.gamma, r.dsa.mean);
        }
        run.time("beta_seconds", clock.elapsed().as_secs_f64());
    }
    if matches!(a.kind, SweepKind::Decoding | SweepKind::All) {
        if a.seeds.len() < 2 {
            return Err(CliError::Usage("the decoding sweep needs at least two seeds".into()));
        }
        let clock = Instant::now();
        let prompts: Vec<Vec<usize>> = instances.iter().map(|i| i.tokens.context().to_vec()).collect();
        let curated: BTreeMap<Vec<usize>, CuratedInstance> =
            instances.iter().map(|i| (i.tokens.context().to_vec(), i.curated.clone())).collect();
        let heta_m = Method::Heta(cfg.heta.variant);
        let grad_m = Method::Baseline(BaselineMethod::Grad);
        let report = metrics::decoding_stability_sweep(&model, &prompts, &DecodeSetting::grid(), &a.seeds, |t| {
            let cur = &curated[t.context()];
            let mut m = BTreeMap::new();
            for (name, meth) in [("heta", heta_m), ("grad", grad_m)] {
                let (attr, _) = meth.attribute(&model, t, &cfgs)?;
                m.insert(format!("dsa_{}", name), metrics::dsa(&attr.scores, cur)?);
                let c = metrics::perturbation_curves(&model, t, &attr.scores, MaskScheme::Sentinel)?;
                m.insert(format!("abpc_{}", name), c.abpc);
            }
            Ok(m)
        })?;
        run.json("sweep-decoding.json", &report)?;
        for (k, v) in &report.delta_percent {
            eprintln!("{:12} Δ% {:.3}", k, v);
        }
        run.time("decoding_seconds", clock.elapsed().as_secs_f64());
    }
    Ok(run.finish()?)
}

// -------------------------------------------------------------- check-theory

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckTheoryArgs {
    pub input: InputArgs,
    /// Random tiny models checked against the dense Hessian.
    pub oracle_instances: usize,
    pub lrwin_instances: usize,
    pub ranks: Vec<usize>,
    pub windows: Vec<usize>,
    pub taylor_instances: usize,
    pub taylor_eps: Vec<f64>,
    pub additivity_instances: usize,
    /// Instances used for the deletion and gradient-squared diagnostics.
    pub diagnostic_instances: usize,
}

impl Default for CheckTheoryArgs {
    fn default() -> Self {
        Self {
            input: InputArgs {
                limit: Some(200),
                ..Default::default()
            },
            oracle_instances: 5,
            lrwin_instances: 5,
            ranks: vec![2, 4, 8],
            windows: vec![8, 16, 32],
            taylor_instances: 10,
            taylor_eps: vec![1e-3, 2e-3, 5e-3, 1e-2],
            additivity_instances: 10,
            diagnostic_instances: 20,
        }
    }
}

#[derive(Serialize)]
struct EnvelopeRow {
    scheme: MaskScheme,
    holds: usize,
    tokens: usize,
    frequency: f64,
}

pub fn check_theory(cfg: &RunConfig<CheckTheoryArgs>, mut run: Run) -> CmdResult {
    let a = &cfg.args;
    let (model, _, instances) = a.input.load()?;
    let base = cfg.heta.with_variant(Variant::Full);
    let mut bounds: Vec<BoundReport> = theory::a1_demos()?;
    let mut summary = serde_json::Map::new();

    let clock = Instant::now();
    let per = par_map(cfg.jobs, &instances, |inst| {
        let (comp, _, _) = heta::compute_components(&model, &inst.tokens, &base)?;
        let full = heta::combine_variant(&comp, Variant::Full, base.beta, base.gamma);
        let info = comp.info.clone().unwrap_or_default();
        let mean_at = |rows: &[usize]| rows.iter().map(|&r| info[r]).sum::<f64>() / rows.len().max(1) as f64;
        let cur = &inst.curated;
        let evidence: Vec<usize> = cur.support.clone();
        let others: Vec<usize> = cur.segment1.iter().chain(&cur.segment2).copied().filter(|p| !evidence.contains(p)).collect();
        let info_split = (mean_at(&evidence), mean_at(&others));
        let mut out = Vec::new();
        let mut env = Vec::new();
        for scheme in MaskScheme::ALL {
            let r = info::batch_info(&model, &inst.tokens, scheme)?;
            env.push(theory::envelope_frequency(&r.info, &r.delta_g));
            let comp = heta::Components {
                info: Some(r.info),
                tv: Some(r.tv),
                delta_g: Some(r.delta_g),
                ..comp.clone()
            };
            let mut attr = AttributionVector::plain(
                "heta",
                heta::combine_variant(&comp, Variant::Full, base.beta, base.gamma),
                &inst.tokens,
            );
            attr.variant = Some(Variant::Full);
            attr.components = Some(comp);
            out.extend(theory::attribution_bounds(&format!("{}/{}", inst.id, scheme.name()), &attr, base.gamma)?);
        }
        Ok((out, env, full, info_split))
    })?;
    let mut envelope = vec![(0usize, 0usize); 3];
    let mut full_scores = Vec::new();
    let mut info_split = Vec::new();
    for (b, env, full, split) in per {
        bounds.extend(b);
        full_scores.push(full);
        info_split.push(split);
        for (acc, (h, t)) in envelope.iter_mut().zip(env) {
            acc.0 += h;
            acc.1 += t;
        }
    }
    let env_rows: Vec<EnvelopeRow> = MaskScheme::ALL
        .iter()
        .zip(&envelope)
        .map(|(s, &(h, t))| EnvelopeRow {
            scheme: *s,
            holds: h,
            tokens: t,
            frequency: h as f64 / t.max(1) as f64,
        })
        .collect();
    summary.insert("envelope".into(), serde_json::to_value(&env_rows).map_err(HetaError::from)?);
    summary.insert(
        "info_evidence_vs_rest".into(),
        serde_json::json!({
            "evidence_mean": info_split.iter().map(|p| p.0).sum::<f64>() / info_split.len() as f64,
            "rest_mean": info_split.iter().map(|p| p.1).sum::<f64>() / info_split.len() as f64,
            "instances_evidence_higher": info_split.iter().filter(|p| p.0 > p.1).count(),
            "instances": info_split.len(),
        }),
    );
    run.time("corpus_bounds_seconds", clock.elapsed().as_secs_f64());

    let clock = Instant::now();
    let n_diag = a.diagnostic_instances.min(instances.len());
    if n_diag >= 2 {
        let tokens: Vec<TokenSequence> = instances[..n_diag].iter().map(|i| i.tokens.clone()).collect();
        let deletion = theory::deletion_intervention_check(&model, &tokens, "heta/full", &full_scores[..n_diag], 5, base.seed)?;
        summary.insert("deletion".into(), serde_json::to_value(&deletion).map_err(HetaError::from)?);
        let gs_cfg = base.with_variant(Variant::Gs);
        let rhos = par_map(cfg.jobs, &tokens, |t| heta::attribute(&model, t, &gs_cfg).map(|a| a.scores))?
            .iter()
            .zip(&full_scores)
            .map(|(g, f)| metrics::spearman(g, f))
            .collect::<Result<Vec<_>>>()?;
        summary.insert("gs_vs_full_spearman".into(), serde_json::to_value(Aggregate::of(&rhos)?).map_err(HetaError::from)?);
    }
    run.time("diagnostics_seconds", clock.elapsed().as_secs_f64());

    let clock = Instant::now();
    for k in 0..a.oracle_instances as u64 {
        let (m, t) = oracle_instance(cfg.heta.seed, k)?;
        let x = m.embed(t.context())?;
        let obj = LmObjective::new(&m, x, t.read_pos(), t.target_token())?;
        bounds.extend(theory::norm_bound(&format!("oracle-{}", k), &obj, 16, cfg.heta.seed)?);
    }
    run.time("oracle_seconds", clock.elapsed().as_secs_f64());

    let clock = Instant::now();
    let lr_insts: Vec<&Instance> = instances.iter().take(a.lrwin_instances).collect();
    let lrwin = par_map(cfg.jobs, &lr_insts, |inst| {
        theory::lrwin_error_decomposition(&inst.id, &model, &inst.tokens, &base, &a.ranks, &a.windows)
    })?;
    let mut monotone = 0;
    let mut lrwin_rows = Vec::new();
    for reps in &lrwin {
        let disc: Vec<f64> = a
            .windows
            .iter()
            .filter_map(|w| reps.iter().find(|r| r.window == *w).map(|r| r.gate_discrepancy))
            .collect();
        if disc.windows(2).all(|p| p[1] <= p[0] + 1e-12) {
            monotone += 1;
        }
        for r in reps {
            bounds.extend(r.bounds.iter().cloned());
            lrwin_rows.push(serde_json::json!({
                "instance": r.instance, "rank": r.rank, "window": r.window,
                "gate_discrepancy": r.gate_discrepancy, "leakage": r.leakage,
                "mu": r.mu, "eps_orig": r.eps_orig, "max_error": r.max_error,
            }));
        }
    }
    summary.insert("lrwin".into(), lrwin_rows.into());
    summary.insert(
        "lrwin_gate_discrepancy_monotone".into(),
        serde_json::json!({"instances": lrwin.len(), "non_increasing": monotone}),
    );
    run.time("lrwin_seconds", clock.elapsed().as_secs_f64());

    let clock = Instant::now();
    let mut taylor = Vec::new();
    let mut taylor_failures = Vec::new();
    for inst in instances.iter().take(a.taylor_instances) {
        let x = model.embed(inst.tokens.context())?;
        let obj = LmObjective::new(&model, x, inst.tokens.read_pos(), inst.tokens.target_token())?;
        let i = inst.curated.support[0];
        match theory::taylor_remainder_check(&inst.id, &obj, |y| obj.at(y), i, &a.taylor_eps, cfg.heta.seed) {
            Ok(r) => {
                bounds.extend(r.bounds.iter().cloned());
                taylor.push(serde_json::json!({"instance": r.instance, "token": r.token, "slope": r.slope, "lambda_max": r.lambda_max}));
            }
            Err(e @ HetaError::PowerIteration { .. }) => taylor_failures.push(serde_json::json!({"instance": inst.id, "error": e.to_string()})),
            Err(e) => return Err(e.into()),
        }
    }
    summary.insert("taylor".into(), taylor.into());
    summary.insert("taylor_failures".into(), taylor_failures.into());
    run.time("taylor_seconds", clock.elapsed().as_secs_f64());

    let clock = Instant::now();
    let mut additivity = Vec::new();
    for inst in instances.iter().take(a.additivity_instances) {
        let (comp, _, _) = heta::compute_components(&model, &inst.tokens, &base)?;
        let samples = theory::fit_samples(&model, &inst.tokens, &comp, base.mask, theory::FIT_SPANS, base.seed)?;
        let fit = heta::fit_weights(&samples)?;
        additivity.push(theory::additivity_residual(&inst.id, &model, &inst.tokens, &comp, fit.beta, fit.gamma, base.mask)?);
    }
    summary.insert("additivity".into(), serde_json::to_value(&additivity).map_err(HetaError::from)?);
    run.time("additivity_seconds", clock.elapsed().as_secs_f64());

    let bad = theory::violations(&bounds);
    summary.insert("checks".into(), bounds.len().into());
    summary.insert("violations".into(), bad.into());
    run.jsonl("bounds.jsonl", &bounds)?;
    let table = theory::markdown_table(&bounds);
    run.text("bounds.md", &table)?;
    run.json("theory.json", &summary)?;
    eprint!("{}", table);
    run.finish()?;
    if bad > 0 {
        return Err(CliError::Violations(bad));
    }
    Ok(())
}

/// Random tiny model and sequence small enough for the dense Hessian.
fn oracle_instance(seed: u64, k: u64) -> Result<(Model, TokenSequence)> {
    use rand::Rng;
    let mut rng = rng_for(seed, &[0x0a, k]);
    let m = Model::init(ModelConfig {
        layers: rng.gen_range(1..=2),
        heads: 2,
        d_model: 8,
        vocab_size: 12,
        max_len: 16,
        seed: rng.gen(),
    })?;
    let ctx = rng.gen_range(2..=8);
    let ids = (0..=ctx).map(|_| rng.gen_range(0..12)).collect();
    Ok((m, TokenSequence::new(ids, ctx)?))
}
