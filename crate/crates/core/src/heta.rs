//! The HETA combiner: `Attr_i = M_i (β S_i + γ I_i)`, its ablation and
//! efficiency variants, windowed accumulation, span targets and weight
//! fitting.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::curvature::{self, CurvatureConfig, CurvatureMode, LowRankBlock};
use crate::error::{HetaError, Result};
use crate::flow;
use crate::info::{self, MaskScheme};
use crate::model::{ForwardOptions, Model};
use crate::objective::LmObjective;
use crate::sequence::TokenSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "lr")]
    Lr,
    #[serde(rename = "ls")]
    Ls,
    #[serde(rename = "win")]
    Win,
    #[serde(rename = "lr+win")]
    LrWin,
    #[serde(rename = "gs")]
    Gs,
    #[serde(rename = "transition-only")]
    TransitionOnly,
    #[serde(rename = "hessian-only")]
    HessianOnly,
    #[serde(rename = "kl-only")]
    KlOnly,
    #[serde(rename = "no-gate")]
    NoGate,
    #[serde(rename = "uniform-gate")]
    UniformGate,
}

impl Variant {
    /// The full method and its five component ablations.
    pub const ABLATIONS: [Variant; 6] = [
        Variant::Full,
        Variant::TransitionOnly,
        Variant::HessianOnly,
        Variant::KlOnly,
        Variant::NoGate,
        Variant::UniformGate,
    ];

    pub const EFFICIENCY: [Variant; 5] = [Variant::Lr, Variant::Ls, Variant::Win, Variant::LrWin, Variant::Gs];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Lr => "lr",
            Variant::Ls => "ls",
            Variant::Win => "win",
            Variant::LrWin => "lr+win",
            Variant::Gs => "gs",
            Variant::TransitionOnly => "transition-only",
            Variant::HessianOnly => "hessian-only",
            Variant::KlOnly => "kl-only",
            Variant::NoGate => "no-gate",
            Variant::UniformGate => "uniform-gate",
        }
    }

    pub fn windowed(&self) -> bool {
        matches!(self, Variant::Win | Variant::LrWin)
    }

    pub fn needs_curvature(&self) -> bool {
        !matches!(self, Variant::TransitionOnly | Variant::KlOnly)
    }

    pub fn needs_info(&self) -> bool {
        !matches!(self, Variant::TransitionOnly | Variant::HessianOnly)
    }

    /// Whether scores are multiplied by the transition gate.
    pub fn gated(&self) -> bool {
        !matches!(
            self,
            Variant::HessianOnly | Variant::KlOnly | Variant::NoGate | Variant::UniformGate
        )
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = HetaError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ABLATIONS
            .iter()
            .chain(Variant::EFFICIENCY.iter())
            .find(|v| v.name() == s.to_ascii_lowercase())
            .copied()
            .ok_or_else(|| HetaError::InvalidConfig(format!("unknown variant {:?}", s)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HetaConfig {
    pub beta: f64,
    pub gamma: f64,
    pub variant: Variant,
    pub mask: MaskScheme,
    /// Hutchinson probes per token.
    pub samples: usize,
    /// Rank of the low-rank variants.
    pub rank: usize,
    /// Extra range-finder probes beyond `rank`.
    pub oversample: usize,
    /// Window length of the windowed variants.
    pub window: usize,
    /// Window stride; `None` means half the window (50% overlap).
    pub stride: Option<usize>,
    /// Layers used by the layer-subset variant; `None` means the upper half.
    pub layer_subset: Option<Vec<usize>>,
    /// Replace the Hessian by its Gauss-Newton surrogate.
    pub gauss_newton: bool,
    pub seed: u64,
}

impl Default for HetaConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            gamma: 0.5,
            variant: Variant::Full,
            mask: MaskScheme::Sentinel,
            samples: 8,
            rank: 8,
            oversample: 2,
            window: 32,
            stride: None,
            layer_subset: None,
            gauss_newton: false,
            seed: 0,
        }
    }
}

impl HetaConfig {
    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            ..self.clone()
        }
    }

    pub fn stride(&self) -> usize {
        self.stride.unwrap_or((self.window / 2).max(1))
    }

    /// Fraction of each window shared with the next one.
    pub fn overlap(&self) -> f64 {
        1.0 - self.stride() as f64 / self.window as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HetaError::Precondition(m));
        if !(self.beta >= 0.0 && self.gamma >= 0.0) || !self.beta.is_finite() || !self.gamma.is_finite() {
            return bad(format!("beta and gamma must be finite and nonnegative ({}, {})", self.beta, self.gamma));
        }
        if self.beta + self.gamma <= 0.0 && self.variant != Variant::TransitionOnly {
            return bad("beta + gamma must be positive".into());
        }
        if self.samples == 0 {
            return bad("samples must be at least 1".into());
        }
        if matches!(self.variant, Variant::Lr | Variant::LrWin) && self.rank == 0 {
            return bad("rank must be at least 1".into());
        }
        if self.variant.windowed() {
            if self.window < 2 {
                return bad(format!("window must cover at least 2 tokens, got {}", self.window));
            }
            let s = self.stride();
            if s == 0 || s > self.window {
                return bad(format!("stride {} must lie in 1..={}", s, self.window));
            }
        }
        if let Some(ls) = &self.layer_subset {
            if ls.is_empty() {
                return bad("empty layer subset".into());
            }
        }
        Ok(())
    }

    fn subset(&self, layers: usize) -> Vec<usize> {
        self.layer_subset.clone().unwrap_or_else(|| (layers / 2..layers).collect())
    }

    /// Layers the gate is computed over.
    pub fn gate_layers(&self, layers: usize) -> Option<Vec<usize>> {
        (self.variant == Variant::Ls).then(|| self.subset(layers))
    }

    pub fn curvature(&self, layers: usize) -> CurvatureConfig {
        let mode = match self.variant {
            Variant::Lr | Variant::LrWin => CurvatureMode::LowRank { rank: self.rank },
            Variant::Ls => CurvatureMode::LayerSubset {
                layers: self.subset(layers),
            },
            Variant::Gs => CurvatureMode::GradSquared,
            _ if self.gauss_newton => CurvatureMode::GaussNewton,
            _ => CurvatureMode::ExactHvp,
        };
        CurvatureConfig {
            samples: self.samples,
            mode,
            seed: self.seed,
            oversample: self.oversample,
        }
    }
}

/// Per-token factors of an attribution, indexed by context position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub gate: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitivity: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub info: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tv: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_g: Option<Vec<f64>>,
    /// Windows covering each token (windowed variants).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visits: Option<Vec<usize>>,
}

/// Work counters; deterministic, unlike wall-clock time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Work {
    pub forward_passes: usize,
    pub hvps: usize,
}

/// Nonnegative per-token scores for one target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionVector {
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<Variant>,
    pub scores: Vec<f64>,
    /// Index of the target token in the sequence.
    pub target: usize,
    pub target_token: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<HetaConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<Components>,
    /// The gate carried no mass; scores are all zero.
    pub degenerate: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
    pub work: Work,
}

impl AttributionVector {
    pub fn plain(method: &str, scores: Vec<f64>, tokens: &TokenSequence) -> Self {
        Self {
            method: method.to_string(),
            variant: None,
            scores,
            target: tokens.target,
            target_token: tokens.target_token(),
            config: None,
            components: None,
            degenerate: false,
            flags: Vec::new(),
            work: Work::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.scores.iter().sum()
    }

    /// Scores divided by their sum; `None` when the sum is not positive.
    pub fn normalized(&self) -> Option<Vec<f64>> {
        let z = self.total();
        (z > 0.0).then(|| self.scores.iter().map(|s| s / z).collect())
    }

    /// Method label such as `heta/full` or `ig`.
    pub fn label(&self) -> String {
        match self.variant {
            Some(v) => format!("{}/{}", self.method, v),
            None => self.method.clone(),
        }
    }
}

/// `m (b s + c i)`; every variant goes through this one expression.
#[inline]
pub fn combine(m: f64, s: f64, i: f64, b: f64, c: f64) -> f64 {
    m * (b * s + c * i)
}

/// Scores of `variant` from shared components.
pub fn combine_variant(comp: &Components, variant: Variant, beta: f64, gamma: f64) -> Vec<f64> {
    let n = comp.gate.len();
    let zeros = vec![0.0; n];
    let s = comp.sensitivity.as_deref().unwrap_or(&zeros);
    let info = comp.info.as_deref().unwrap_or(&zeros);
    let uniform = 1.0 / n as f64;
    (0..n)
        .map(|k| match variant {
            Variant::TransitionOnly => combine(comp.gate[k], 1.0, 0.0, 1.0, 0.0),
            Variant::HessianOnly => combine(1.0, s[k], info[k], 1.0, 0.0),
            Variant::KlOnly => combine(1.0, s[k], info[k], 0.0, 1.0),
            Variant::NoGate => combine(1.0, s[k], info[k], beta, gamma),
            Variant::UniformGate => combine(uniform, s[k], info[k], beta, gamma),
            _ => combine(comp.gate[k], s[k], info[k], beta, gamma),
        })
        .collect()
}

fn prompt(model: &Model, tokens: &TokenSequence) -> Result<Tensor> {
    tokens.validate()?;
    model.check_ids(&tokens.ids)?;
    if tokens.target < 2 {
        return Err(HetaError::Precondition("attribution needs at least two context tokens".into()));
    }
    model.embed(tokens.context())
}

/// Every factor the variants need, computed once over the full context.
pub fn compute_components(model: &Model, tokens: &TokenSequence, cfg: &HetaConfig) -> Result<(Components, Work, bool)> {
    compute_components_timed(model, tokens, cfg, &mut PhaseTimes::default())
}

/// Wall-clock seconds per phase. Kept out of reports so they stay
/// byte-reproducible.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub gate: f64,
    pub curvature: f64,
    pub info: f64,
    pub combine: f64,
}

impl PhaseTimes {
    pub fn add(&mut self, other: &PhaseTimes) {
        self.gate += other.gate;
        self.curvature += other.curvature;
        self.info += other.info;
        self.combine += other.combine;
    }

    pub fn total(&self) -> f64 {
        self.gate + self.curvature + self.info + self.combine
    }
}

pub fn compute_components_timed(
    model: &Model,
    tokens: &TokenSequence,
    cfg: &HetaConfig,
    times: &mut PhaseTimes,
) -> Result<(Components, Work, bool)> {
    let x = prompt(model, tokens)?;
    compute_components_at(model, &x, tokens, cfg, times)
}

/// Components for supplied context embeddings `x` (one row per context
/// token of `tokens`), e.g. a perturbed copy of the embedded prompt.
pub fn compute_components_at(
    model: &Model,
    x: &Tensor,
    tokens: &TokenSequence,
    cfg: &HetaConfig,
    times: &mut PhaseTimes,
) -> Result<(Components, Work, bool)> {
    cfg.validate()?;
    let clock = Instant::now();
    let n = tokens.target;
    if x.dims2()?.0 != n {
        return Err(HetaError::Precondition(format!("{} embedding rows for {} context tokens", x.dims2()?.0, n)));
    }
    let p = tokens.read_pos();
    let layers = model.config.layers;
    let mut work = Work::default();

    let trace = model.forward_embeddings(x, p, &ForwardOptions::default())?;
    work.forward_passes += 1;
    let gate_layers = cfg.gate_layers(layers);
    let gate = flow::transition_gate(&trace, p, gate_layers.as_deref())?;
    times.gate += clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let all: Vec<usize> = (0..n).collect();
    let sensitivity = if cfg.variant.needs_curvature() {
        let obj = LmObjective::new(model, x.clone(), p, tokens.target_token())?;
        let s = curvature::block_sensitivity(&obj, &all, &cfg.curvature(layers))?;
        work.hvps += s.hvp_count;
        Some(s.values)
    } else {
        None
    };
    times.curvature += clock.elapsed().as_secs_f64();
    let clock = Instant::now();
    let (info, tv, delta_g) = if cfg.variant.needs_info() {
        let rep = cfg.mask.replacement(model, x)?;
        let r = info::batch_info_embeddings(model, x, p, tokens.target_token(), &all, &rep, &ForwardOptions::default())?;
        work.forward_passes += 1 + n;
        (Some(r.info), Some(r.tv), Some(r.delta_g))
    } else {
        (None, None, None)
    };
    times.info += clock.elapsed().as_secs_f64();
    Ok((
        Components {
            gate: gate.gate,
            sensitivity,
            info,
            tv,
            delta_g,
            visits: None,
        },
        work,
        gate.degenerate,
    ))
}

fn assemble(tokens: &TokenSequence, cfg: &HetaConfig, comp: Components, work: Work, degenerate: bool) -> AttributionVector {
    let scores = combine_variant(&comp, cfg.variant, cfg.beta, cfg.gamma);
    let mut flags = Vec::new();
    if degenerate {
        flags.push("degenerate-gate".to_string());
    }
    AttributionVector {
        method: "heta".into(),
        variant: Some(cfg.variant),
        scores,
        target: tokens.target,
        target_token: tokens.target_token(),
        config: Some(cfg.clone()),
        components: Some(comp),
        degenerate,
        flags,
        work,
    }
}

/// Attribution of the target of `tokens` over its context positions.
/// Windowed variants are routed to [`attribute_windowed`].
pub fn attribute(model: &Model, tokens: &TokenSequence, cfg: &HetaConfig) -> Result<AttributionVector> {
    if cfg.variant.windowed() {
        return attribute_windowed(model, tokens, cfg);
    }
    let (comp, work, degenerate) = compute_components(model, tokens, cfg)?;
    Ok(assemble(tokens, cfg, comp, work, degenerate))
}

/// Non-windowed attribution at supplied context embeddings.
pub fn attribute_at(model: &Model, x: &Tensor, tokens: &TokenSequence, cfg: &HetaConfig) -> Result<AttributionVector> {
    if cfg.variant.windowed() {
        return Err(HetaError::InvalidConfig(format!(
            "variant {} works on token windows, not raw embeddings",
            cfg.variant
        )));
    }
    let (comp, work, degenerate) = compute_components_at(model, x, tokens, cfg, &mut PhaseTimes::default())?;
    Ok(assemble(tokens, cfg, comp, work, degenerate))
}

/// [`attribute`] with per-phase wall-clock times. Windowed variants report
/// their whole run under `combine`.
pub fn attribute_timed(model: &Model, tokens: &TokenSequence, cfg: &HetaConfig) -> Result<(AttributionVector, PhaseTimes)> {
    let mut times = PhaseTimes::default();
    if cfg.variant.windowed() {
        let clock = Instant::now();
        let a = attribute_windowed(model, tokens, cfg)?;
        times.combine = clock.elapsed().as_secs_f64();
        return Ok((a, times));
    }
    let (comp, work, degenerate) = compute_components_timed(model, tokens, cfg, &mut times)?;
    let clock = Instant::now();
    let a = assemble(tokens, cfg, comp, work, degenerate);
    times.combine = clock.elapsed().as_secs_f64();
    Ok((a, times))
}

/// Every listed variant from one shared set of components. Variants that
/// change how components are computed (efficiency variants) are rejected.
pub fn attribute_variants(
    model: &Model,
    tokens: &TokenSequence,
    cfg: &HetaConfig,
    variants: &[Variant],
) -> Result<Vec<AttributionVector>> {
    if let Some(v) = variants.iter().find(|v| !Variant::ABLATIONS.contains(v)) {
        return Err(HetaError::Precondition(format!("variant {} needs its own components", v)));
    }
    let (comp, work, degenerate) = compute_components(model, tokens, &cfg.with_variant(Variant::Full))?;
    Ok(variants
        .iter()
        .map(|&v| assemble(tokens, &cfg.with_variant(v), comp.clone(), work, degenerate))
        .collect())
}

/// Half-open windows `[a, b)` of length `window` and step `stride`
/// covering `0..n`.
pub fn windows(n: usize, window: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    if window < 2 {
        return Err(HetaError::Precondition(format!("window must cover at least 2 tokens, got {}", window)));
    }
    if stride == 0 || stride > window {
        return Err(HetaError::Precondition(format!("stride {} must lie in 1..={}", stride, window)));
    }
    let mut out = Vec::new();
    let mut a = 0;
    loop {
        out.push((a, (a + window).min(n)));
        if a + window >= n {
            break;
        }
        a += stride;
    }
    Ok(out)
}

/// What one window contributed.
#[derive(Clone, Debug)]
pub struct WindowRecord {
    pub start: usize,
    pub end: usize,
    /// Gate normalized over the window, length `n`.
    pub gate: Vec<f64>,
    /// Sensitivities of the window's tokens, in order.
    pub sensitivity: Option<Vec<f64>>,
    pub factors: Option<Vec<LowRankBlock>>,
    /// Target distribution of the restricted pass.
    pub orig_probs: Vec<f64>,
    /// Masked distributions of the window's tokens, in order.
    pub masked_probs: Vec<Vec<f64>>,
    pub info: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct WindowedAttribution {
    pub attribution: AttributionVector,
    pub windows: Vec<WindowRecord>,
    /// Gate of the unrestricted pass.
    pub full_gate: Vec<f64>,
    /// Mean over windows of full-gate mass outside the window.
    pub leakage: f64,
}

/// Windowed attribution with per-window detail.
pub fn attribute_windowed_detailed(model: &Model, tokens: &TokenSequence, cfg: &HetaConfig) -> Result<WindowedAttribution> {
    cfg.validate()?;
    let x = prompt(model, tokens)?;
    let n = tokens.target;
    let p = tokens.read_pos();
    let target = tokens.target_token();
    let layers = model.config.layers;
    let gate_layers = cfg.gate_layers(layers);
    let curv = cfg.curvature(layers);
    let rep = cfg.mask.replacement(model, &x)?;
    let mut work = Work::default();

    let full_trace = model.forward_embeddings(&x, p, &ForwardOptions::default())?;
    work.forward_passes += 1;
    let full_gate = flow::transition_gate(&full_trace, p, gate_layers.as_deref())?.gate;

    let mut acc_m = vec![0.0; n];
    let mut acc_s = vec![0.0; n];
    let mut acc_i = vec![0.0; n];
    let mut acc_tv = vec![0.0; n];
    let mut acc_dg = vec![0.0; n];
    let mut visits = vec![0usize; n];
    let mut records = Vec::new();
    let mut leakage = 0.0;
    let spans = windows(n, cfg.window, cfg.stride())?;
    for &(a, b) in &spans {
        let positions: Vec<usize> = (a..b).collect();
        let mut visible = vec![false; n];
        for &i in &positions {
            visible[i] = true;
        }
        visible[p] = true;
        let opts = ForwardOptions {
            key_visible: Some(visible),
            ..Default::default()
        };
        let trace = model.forward_embeddings(&x, p, &opts)?;
        work.forward_passes += 1;
        let gate = flow::transition_gate_over(&trace, p, gate_layers.as_deref(), &positions)?;
        leakage += 1.0 - positions.iter().map(|&i| full_gate[i]).sum::<f64>();

        let (sens, factors) = if cfg.variant.needs_curvature() {
            let obj = LmObjective::new(model, x.clone(), p, target)?.with_options(opts.clone());
            let s = curvature::block_sensitivity(&obj, &positions, &curv)?;
            work.hvps += s.hvp_count;
            (Some(s.values), s.factors)
        } else {
            (None, None)
        };
        let inf = if cfg.variant.needs_info() {
            let r = info::batch_info_embeddings(model, &x, p, target, &positions, &rep, &opts)?;
            work.forward_passes += 1 + positions.len();
            Some(r)
        } else {
            None
        };

        for (k, &i) in positions.iter().enumerate() {
            acc_m[i] += gate.gate[i];
            if let Some(s) = &sens {
                acc_s[i] += s[k];
            }
            if let Some(r) = &inf {
                acc_i[i] += r.info[k];
                acc_tv[i] += r.tv[k];
                acc_dg[i] += r.delta_g[k];
            }
            visits[i] += 1;
        }
        let (orig_probs, masked_probs, info_vals) = match inf {
            Some(r) => (crate::model::softmax(&r.orig_logits), r.masked_probs, Some(r.info)),
            None => (trace.p_orig.clone(), Vec::new(), None),
        };
        records.push(WindowRecord {
            start: a,
            end: b,
            gate: gate.gate,
            sensitivity: sens,
            factors,
            orig_probs,
            masked_probs,
            info: info_vals,
        });
    }
    let avg = |acc: Vec<f64>| -> Vec<f64> {
        acc.iter()
            .zip(&visits)
            .map(|(v, &c)| v / c.max(1) as f64)
            .collect()
    };
    let gate = avg(acc_m);
    let degenerate = gate.iter().all(|&m| m == 0.0);
    let comp = Components {
        gate,
        sensitivity: cfg.variant.needs_curvature().then(|| avg(acc_s)),
        info: cfg.variant.needs_info().then(|| avg(acc_i.clone())),
        tv: cfg.variant.needs_info().then(|| avg(acc_tv)),
        delta_g: cfg.variant.needs_info().then(|| avg(acc_dg)),
        visits: Some(visits),
    };
    let attribution = assemble(tokens, cfg, comp, work, degenerate);
    Ok(WindowedAttribution {
        attribution,
        windows: records,
        full_gate,
        leakage: leakage / spans.len() as f64,
    })
}

/// Windowed accumulation averaged by visit counts. Non-windowed variants
/// are computed with the configured window as well.
pub fn attribute_windowed(model: &Model, tokens: &TokenSequence, cfg: &HetaConfig) -> Result<AttributionVector> {
    Ok(attribute_windowed_detailed(model, tokens, cfg)?.attribution)
}

/// Sum of per-position attributions over targets
/// `span_start .. span_start + span_len`, over positions `0..span_start + span_len - 1`.
pub fn attribute_span(
    model: &Model,
    ids: &[usize],
    span_start: usize,
    span_len: usize,
    cfg: &HetaConfig,
) -> Result<AttributionVector> {
    if span_len == 0 {
        return Err(HetaError::Precondition("span length must be at least 1".into()));
    }
    if span_start == 0 {
        return Err(HetaError::Precondition("span overlaps position 0".into()));
    }
    let end = span_start + span_len;
    if end > ids.len() {
        return Err(HetaError::Precondition(format!("span end {} beyond {} tokens", end, ids.len())));
    }
    let mut scores = vec![0.0; end - 1];
    let mut work = Work::default();
    let mut degenerate = true;
    let mut flags = Vec::new();
    let mut last = None;
    for t in span_start..end {
        let seq = TokenSequence::new(ids[..=t].to_vec(), t)?;
        let a = attribute(model, &seq, cfg)?;
        for (o, s) in scores.iter_mut().zip(&a.scores) {
            *o += s;
        }
        work.forward_passes += a.work.forward_passes;
        work.hvps += a.work.hvps;
        degenerate &= a.degenerate;
        if a.degenerate {
            flags.push(format!("degenerate-gate@{}", t));
        }
        last = Some(a);
    }
    let mut out = last.expect("span_len >= 1");
    if span_len > 1 {
        out.components = None;
        out.method = "heta-span".into();
    }
    out.scores = scores;
    out.target = span_start;
    out.target_token = ids[span_start];
    out.work = work;
    out.degenerate = degenerate;
    out.flags = flags;
    Ok(out)
}

/// One subset measurement: gated component sums over a token subset and the
/// measured change in target log-probability when that subset is masked.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSample {
    /// `Σ_{i∈R} M_i S_i`.
    pub gated_s: f64,
    /// `Σ_{i∈R} M_i I_i`.
    pub gated_i: f64,
    pub delta_g: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub beta: f64,
    pub gamma: f64,
    /// Mean squared residual at the optimum.
    pub loss: f64,
    /// The two features are (numerically) collinear; the optimum is not unique.
    pub collinear: bool,
    /// `(β, loss)` along the grid, for grid fits.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub curve: Vec<(f64, f64)>,
}

pub const BETA_GRID: [f64; 5] = [0.0, 0.2, 0.5, 0.8, 1.0];

fn fit_loss(samples: &[FitSample], b: f64, c: f64) -> f64 {
    samples
        .iter()
        .map(|s| {
            let r = s.delta_g - b * s.gated_s - c * s.gated_i;
            r * r
        })
        .sum::<f64>()
        / samples.len() as f64
}

/// Nonnegative least squares over `(β, γ)`.
pub fn fit_weights(samples: &[FitSample]) -> Result<FitResult> {
    if samples.is_empty() {
        return Err(HetaError::Precondition("no fit samples".into()));
    }
    let (mut saa, mut sab, mut sbb, mut say, mut sby) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for s in samples {
        saa += s.gated_s * s.gated_s;
        sab += s.gated_s * s.gated_i;
        sbb += s.gated_i * s.gated_i;
        say += s.gated_s * s.delta_g;
        sby += s.gated_i * s.delta_g;
    }
    let det = saa * sbb - sab * sab;
    let collinear = det <= 1e-10 * saa * sbb || saa == 0.0 || sbb == 0.0;
    let mut candidates = vec![(0.0, 0.0)];
    if saa > 0.0 {
        candidates.push(((say / saa).max(0.0), 0.0));
    }
    if sbb > 0.0 {
        candidates.push((0.0, (sby / sbb).max(0.0)));
    }
    if !collinear {
        let b = (sbb * say - sab * sby) / det;
        let c = (saa * sby - sab * say) / det;
        if b >= 0.0 && c >= 0.0 {
            candidates.push((b, c));
        }
    }
    let (beta, gamma, loss) = candidates
        .into_iter()
        .map(|(b, c)| (b, c, fit_loss(samples, b, c)))
        .fold((0.0, 0.0, f64::INFINITY), |best, cand| if cand.2 < best.2 { cand } else { best });
    Ok(FitResult {
        beta,
        gamma,
        loss,
        collinear,
        curve: Vec::new(),
    })
}

/// Loss along `β ∈ grid`, `γ = 1 − β`.
pub fn fit_weights_grid(samples: &[FitSample], grid: &[f64]) -> Result<FitResult> {
    if samples.is_empty() || grid.is_empty() {
        return Err(HetaError::Precondition("no fit samples or empty grid".into()));
    }
    let curve: Vec<(f64, f64)> = grid.iter().map(|&b| (b, fit_loss(samples, b, 1.0 - b))).collect();
    let &(beta, loss) = curve
        .iter()
        .fold(&curve[0], |best, c| if c.1 < best.1 { c } else { best });
    let free = fit_weights(samples)?;
    Ok(FitResult {
        beta,
        gamma: 1.0 - beta,
        loss,
        collinear: free.collinear,
        curve,
    })
}

#[cfg(test)]
mod tests;
