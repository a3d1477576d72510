//! Faithfulness and alignment metrics over attribution scores.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::autodiff::Tensor;
use crate::error::{HetaError, Result};
use crate::info::{mask_rows, MaskScheme};
use crate::model::{ForwardOptions, Model};
use crate::numeric::{mean, rng_for, sample_std};
use crate::sequence::TokenSequence;

/// Sequence-position roles of a two-segment instance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CuratedInstance {
    /// Distractor segment.
    pub segment1: Vec<usize>,
    /// Answer-bearing segment.
    pub segment2: Vec<usize>,
    /// Annotated evidence, a subset of `segment2`.
    pub support: Vec<usize>,
    pub question: Vec<usize>,
    pub target_token: usize,
}

impl CuratedInstance {
    pub fn validate(&self) -> Result<()> {
        if self.support.is_empty() {
            return Err(HetaError::Precondition("empty support set".into()));
        }
        if let Some(s) = self.support.iter().find(|s| !self.segment2.contains(s)) {
            return Err(HetaError::Precondition(format!("support position {} outside segment 2", s)));
        }
        if let Some(s) = self.segment1.iter().find(|s| self.segment2.contains(s)) {
            return Err(HetaError::Precondition(format!("position {} in both segments", s)));
        }
        Ok(())
    }
}

/// Mass on the support minus mass on segment 1, after normalizing over both
/// segments.
pub fn dsa(scores: &[f64], inst: &CuratedInstance) -> Result<f64> {
    let get = |i: usize| {
        scores
            .get(i)
            .copied()
            .ok_or_else(|| HetaError::Precondition(format!("no score for position {}", i)))
    };
    let mut total = 0.0;
    for &i in inst.segment1.iter().chain(&inst.segment2) {
        total += get(i)?;
    }
    if !(total > 0.0) {
        return Err(HetaError::Precondition("attribution carries no mass over the segments".into()));
    }
    let support: f64 = inst.support.iter().map(|&i| get(i)).sum::<Result<f64>>()?;
    let distract: f64 = inst.segment1.iter().map(|&i| get(i)).sum::<Result<f64>>()?;
    Ok((support - distract) / total)
}

/// Scores divided by their maximum, into `[0, 1]`.
pub fn unit_scale(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().fold(0.0f64, |a, &b| a.max(b));
    if m > 0.0 {
        scores.iter().map(|s| s / m).collect()
    } else {
        vec![0.0; scores.len()]
    }
}

fn target_logprob_at(model: &Model, tokens: &TokenSequence, x: &Tensor) -> Result<f64> {
    model.logprob(x, tokens.read_pos(), tokens.target_token(), &ForwardOptions::default())
}

fn scale_rows(x: &Tensor, factors: &[f64]) -> Result<Tensor> {
    let (n, _) = x.dims2()?;
    if factors.len() != n {
        return Err(HetaError::Precondition(format!("{} factors for {} tokens", factors.len(), n)));
    }
    let mut out = x.clone();
    for (i, &f) in factors.iter().enumerate() {
        out.row_mut(i).iter_mut().for_each(|v| *v *= f);
    }
    Ok(out)
}

/// Soft-NC/NS (documented variant): drops in `g` when each embedding is
/// scaled by `1 − a_i` (comprehensiveness) and by `a_i` (sufficiency).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftScores {
    pub soft_nc: f64,
    pub soft_ns: f64,
}

pub fn soft_nc_ns(model: &Model, tokens: &TokenSequence, attr: &[f64]) -> Result<SoftScores> {
    if let Some(a) = attr.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(HetaError::Precondition(format!("soft scores need attributions in [0, 1], got {}", a)));
    }
    let x = model.embed(tokens.context())?;
    let g = target_logprob_at(model, tokens, &x)?;
    let keep: Vec<f64> = attr.iter().map(|a| 1.0 - a).collect();
    let nc = g - target_logprob_at(model, tokens, &scale_rows(&x, &keep)?)?;
    let ns = g - target_logprob_at(model, tokens, &scale_rows(&x, attr)?)?;
    Ok(SoftScores { soft_nc: nc, soft_ns: ns })
}

/// Positions by descending score; ties keep the lower index first.
pub fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Positions by ascending score; ties keep the lower index first.
pub fn rank_asc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx
}

/// Deletion and insertion curves of target probability.
///
/// `morf[k-1]` / `lerf[k-1]` is the probability after masking the `k` most /
/// least relevant tokens; `insertion[k-1]` after unmasking the `k` most
/// relevant tokens of a fully masked context. Areas are means over `k`.
/// `abpc = area(lerf) − area(morf)`; `aopc_del = mean_k (p₀ − morf_k)`;
/// `aopc_ins = mean_k (insertion_k − p_∅)`. Larger is better for all three.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationCurves {
    pub p_orig: f64,
    pub p_empty: f64,
    pub morf: Vec<f64>,
    pub lerf: Vec<f64>,
    pub insertion: Vec<f64>,
    pub morf_area: f64,
    pub lerf_area: f64,
    pub abpc: f64,
    pub aopc_del: f64,
    pub aopc_ins: f64,
}

pub fn perturbation_curves(model: &Model, tokens: &TokenSequence, scores: &[f64], scheme: MaskScheme) -> Result<PerturbationCurves> {
    let n = tokens.target;
    if n < 2 {
        return Err(HetaError::Precondition("perturbation curves need at least two context tokens".into()));
    }
    if scores.len() != n {
        return Err(HetaError::Precondition(format!("{} scores for {} context tokens", scores.len(), n)));
    }
    let x = model.embed(tokens.context())?;
    let rep = scheme.replacement(model, &x)?;
    let prob = |rows: &[usize]| -> Result<f64> { Ok(target_logprob_at(model, tokens, &mask_rows(&x, rows, &rep)?)?.exp()) };
    let p_orig = prob(&[])?;
    let all: Vec<usize> = (0..n).collect();
    let p_empty = prob(&all)?;
    let deletion = |order: &[usize]| -> Result<Vec<f64>> { (1..=n).map(|k| prob(&order[..k])).collect() };
    let down = rank_desc(scores);
    let morf = deletion(&down)?;
    let lerf = deletion(&rank_asc(scores))?;
    let insertion: Vec<f64> = (1..=n)
        .map(|k| prob(&down[k..]))
        .collect::<Result<_>>()?;
    let morf_area = mean(&morf);
    let lerf_area = mean(&lerf);
    Ok(PerturbationCurves {
        p_orig,
        p_empty,
        aopc_del: mean(&morf.iter().map(|p| p_orig - p).collect::<Vec<_>>()),
        aopc_ins: mean(&insertion.iter().map(|p| p - p_empty).collect::<Vec<_>>()),
        abpc: lerf_area - morf_area,
        morf_area,
        lerf_area,
        morf,
        lerf,
        insertion,
    })
}

/// Mean over tokens of the per-token standard deviation of `attr_fn` under
/// `n_samples` Gaussian perturbations of scale `delta` to the embeddings.
pub fn sensitivity<F>(x: &Tensor, attr_fn: F, delta: f64, n_samples: usize, seed: u64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Vec<f64>>,
{
    if !(delta > 0.0) || n_samples < 2 {
        return Err(HetaError::Precondition("sensitivity needs delta > 0 and at least 2 samples".into()));
    }
    let normal = Normal::new(0.0, delta).map_err(|e| HetaError::InvalidConfig(e.to_string()))?;
    let mut rng = rng_for(seed, &[]);
    let mut runs = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let mut noisy = x.clone();
        noisy.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        runs.push(attr_fn(&noisy)?);
    }
    let n = runs[0].len();
    if n == 0 {
        return Ok(0.0);
    }
    let stds: Vec<f64> = (0..n)
        .map(|i| sample_std(&runs.iter().map(|r| r[i]).collect::<Vec<_>>()))
        .collect();
    Ok(mean(&stds))
}

/// Ranks starting at 1, ties receiving their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let order = rank_asc(v);
    let mut ranks = vec![0.0; v.len()];
    let mut k = 0;
    while k < order.len() {
        let mut j = k;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[k]] {
            j += 1;
        }
        let r = (k + j) as f64 / 2.0 + 1.0;
        for &o in &order[k..=j] {
            ranks[o] = r;
        }
        k = j + 1;
    }
    ranks
}

/// Spearman correlation with average ranks; `0` when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(HetaError::Precondition(format!("length mismatch {} vs {}", a.len(), b.len())));
    }
    if a.len() < 3 {
        return Err(HetaError::Precondition(format!("Spearman needs at least 3 points, got {}", a.len())));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let (ma, mb) = (mean(&ra), mean(&rb));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman ρ between two attributions over aligned positions `(i_a, i_b)`.
pub fn rephrase_robustness(attr_a: &[f64], attr_b: &[f64], alignment: &[(usize, usize)]) -> Result<f64> {
    let mut seen_a = std::collections::HashSet::new();
    let mut seen_b = std::collections::HashSet::new();
    let mut xa = Vec::new();
    let mut xb = Vec::new();
    for &(i, j) in alignment {
        if !seen_a.insert(i) || !seen_b.insert(j) {
            return Err(HetaError::Precondition("alignment is not a bijection".into()));
        }
        let (Some(&a), Some(&b)) = (attr_a.get(i), attr_b.get(j)) else {
            return Err(HetaError::Precondition(format!("aligned pair ({}, {}) out of range", i, j)));
        };
        xa.push(a);
        xb.push(b);
    }
    spearman(&xa, &xb)
}

/// F1 between the top-`k` positions and the gold set.
pub fn alignment_f1(scores: &[f64], gold: &[usize], k: usize) -> Result<f64> {
    if gold.is_empty() {
        return Err(HetaError::Precondition("empty gold set".into()));
    }
    if k == 0 {
        return Err(HetaError::Precondition("k must be at least 1".into()));
    }
    let top: Vec<usize> = rank_desc(scores).into_iter().take(k).collect();
    let hit = top.iter().filter(|i| gold.contains(i)).count();
    Ok(2.0 * hit as f64 / (top.len() + gold.len()) as f64)
}

/// One decoding configuration; temperature 0 is greedy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeSetting {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: usize,
}

impl DecodeSetting {
    pub const GREEDY: DecodeSetting = DecodeSetting {
        temperature: 0.0,
        top_p: 1.0,
        top_k: 0,
    };

    /// Temperatures {0.2, 0.5, 0.9} × top-p {0.8, 0.9, 0.95} × top-k {20, 50, 100}.
    pub fn grid() -> Vec<DecodeSetting> {
        let mut out = Vec::new();
        for &temperature in &[0.2, 0.5, 0.9] {
            for &top_p in &[0.8, 0.9, 0.95] {
                for &top_k in &[20, 50, 100] {
                    out.push(DecodeSetting { temperature, top_p, top_k });
                }
            }
        }
        out
    }

    /// Draw one token from `logits`.
    pub fn sample(&self, logits: &[f64], rng: &mut impl Rng) -> usize {
        if self.temperature <= 0.0 {
            return crate::model::argmax(logits);
        }
        let scaled: Vec<f64> = logits.iter().map(|l| l / self.temperature).collect();
        let p = crate::model::softmax(&scaled);
        let mut order = rank_desc(&p);
        if self.top_k > 0 {
            order.truncate(self.top_k);
        }
        let mut kept = Vec::new();
        let mut mass = 0.0;
        for i in order {
            kept.push(i);
            mass += p[i];
            if mass >= self.top_p {
                break;
            }
        }
        let z: f64 = kept.iter().map(|&i| p[i]).sum();
        let mut u = rng.gen::<f64>() * z;
        for &i in &kept {
            u -= p[i];
            if u <= 0.0 {
                return i;
            }
        }
        *kept.last().expect("at least one token kept")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: DecodeSetting,
    /// Metric means over prompts and seeds.
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// `100 · (max − min) / |mean|` of each metric across settings; 0 when
    /// the metric never changes.
    pub delta_percent: BTreeMap<String, f64>,
}

/// Decode one token per prompt, setting and seed, attribute it and score it
/// with `metric_fn`, then report each metric's spread across the grid.
pub fn decoding_stability_sweep<F>(
    model: &Model,
    prompts: &[Vec<usize>],
    grid: &[DecodeSetting],
    seeds: &[u64],
    metric_fn: F,
) -> Result<SweepReport>
where
    F: Fn(&TokenSequence) -> Result<BTreeMap<String, f64>>,
{
    if grid.is_empty() || seeds.len() < 2 || prompts.is_empty() {
        return Err(HetaError::Precondition("sweep needs a non-empty grid, prompts and at least 2 seeds".into()));
    }
    let mut rows = Vec::new();
    for (gi, setting) in grid.iter().enumerate() {
        let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (pi, prompt) in prompts.iter().enumerate() {
            let x = model.embed(prompt)?;
            let logits = model.read_logits(&x, prompt.len() - 1, &ForwardOptions::default())?;
            for &seed in seeds {
                let mut rng = rng_for(seed, &[gi as u64, pi as u64]);
                let token = setting.sample(&logits, &mut rng);
                let seq = TokenSequence::from_prompt(prompt.clone(), token)?;
                for (k, v) in metric_fn(&seq)? {
                    acc.entry(k).or_default().push(v);
                }
            }
        }
        rows.push(SweepRow {
            setting: *setting,
            metrics: acc.into_iter().map(|(k, v)| (k, mean(&v))).collect(),
        });
    }
    let mut delta_percent = BTreeMap::new();
    for key in rows[0].metrics.keys() {
        let vals: Vec<f64> = rows.iter().filter_map(|r| r.metrics.get(key).copied()).collect();
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let m = mean(&vals).abs();
        let d = if hi == lo { 0.0 } else { 100.0 * (hi - lo) / m };
        delta_percent.insert(key.clone(), d);
    }
    Ok(SweepReport { rows, delta_percent })
}

/// Mean, standard deviation and standard error of one metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stderr: Option<f64>,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(HetaError::Precondition("aggregate of no values".into()));
        }
        let n = values.len();
        let std = (n >= 2).then(|| sample_std(values));
        Ok(Self {
            n,
            mean: mean(values),
            std,
            stderr: std.map(|s| s / (n as f64).sqrt()),
        })
    }
}

pub const EVAL_VERSION: u32 = 1;

/// Metrics of one method on one instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetrics {
    pub version: u32,
    pub instance: String,
    pub method: String,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub instances: usize,
    /// method → metric → aggregate.
    pub methods: BTreeMap<String, BTreeMap<String, Aggregate>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

pub fn summarize(records: &[InstanceMetrics], seed: u64, config_hash: &str) -> Result<EvalSummary> {
    let mut grouped: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    let mut instances = std::collections::BTreeSet::new();
    for r in records {
        instances.insert(r.instance.as_str());
        let m = grouped.entry(r.method.clone()).or_default();
        for (k, v) in &r.metrics {
            m.entry(k.clone()).or_default().push(*v);
        }
    }
    let methods = grouped
        .into_iter()
        .map(|(method, ms)| {
            let aggs = ms
                .into_iter()
                .map(|(k, v)| Ok((k, Aggregate::of(&v)?)))
                .collect::<Result<_>>()?;
            Ok((method, aggs))
        })
        .collect::<Result<_>>()?;
    Ok(EvalSummary {
        version: EVAL_VERSION,
        seed,
        config_hash: config_hash.to_string(),
        instances: instances.len(),
        methods,
        notes: vec![
            "soft_nc/soft_ns: Soft-NC/NS (documented variant), embeddings scaled by 1 - a and a".into(),
            "dsa: normalized over both segments, so it lies in [-1, 1]".into(),
        ],
    })
}

/// Percentile bootstrap confidence interval of the mean.
pub fn bootstrap_mean_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if values.is_empty() || resamples == 0 || !(0.0..1.0).contains(&level) {
        return Err(HetaError::Precondition("bootstrap needs values, resamples and a level in (0, 1)".into()));
    }
    let mut rng = rng_for(seed, &[]);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let lo = ((1.0 - level) / 2.0 * resamples as f64).floor() as usize;
    let hi = (((1.0 + level) / 2.0 * resamples as f64).ceil() as usize).min(resamples) - 1;
    Ok((means[lo], means[hi]))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    /// One-sided p-value for `mean(a − b) > 0`.
    pub p_value: f64,
}

/// Paired one-sided t-test of `a > b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(HetaError::Precondition("paired test needs two equal-length samples of size >= 2".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len();
    let m = mean(&d);
    let s = sample_std(&d);
    if s == 0.0 {
        let p = if m > 0.0 { 0.0 } else { 1.0 };
        return Ok(PairedTest {
            n,
            mean_diff: m,
            t: if m > 0.0 { f64::INFINITY } else { 0.0 },
            p_value: p,
        });
    }
    let t = m / (s / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| HetaError::InvalidConfig(e.to_string()))?;
    Ok(PairedTest {
        n,
        mean_diff: m,
        t,
        p_value: 1.0 - dist.cdf(t),
    })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Static HTML page with tokens shaded by normalized score.
pub fn heatmap_html(title: &str, rows: &[(String, Vec<String>, Vec<f64>)]) -> String {
    let mut out = String::new();
    out.push_str("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>");
    out.push_str(&escape(title));
    out.push_str("</title>\n<style>body{font-family:monospace}span{padding:2px 3px;margin:1px;display:inline-block}</style>\n</head><body>\n");
    out.push_str(&format!("<h1>{}</h1>\n", escape(title)));
    for (label, tokens, scores) in rows {
        let scaled = unit_scale(scores);
        out.push_str(&format!("<h2>{}</h2>\n<p>", escape(label)));
        for (k, tok) in tokens.iter().enumerate() {
            let a = scaled.get(k).copied().unwrap_or(0.0);
            let raw = scores.get(k).copied().unwrap_or(0.0);
            out.push_str(&format!(
                "<span style=\"background:rgba(220,40,40,{:.3})\" title=\"{:.6e}\">{}</span>",
                a,
                raw,
                escape(tok)
            ));
        }
        out.push_str("</p>\n");
    }
    out.push_str("</body></html>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn inst() -> CuratedInstance {
        CuratedInstance {
            segment1: vec![0, 1, 2],
            segment2: vec![4, 5, 6],
            support: vec![5],
            question: vec![8],
            target_token: 3,
        }
    }

    #[test]
    fn dsa_extremes_and_split() {
        let i = inst();
        let mut s = vec![0.0; 9];
        s[5] = 2.0;
        assert_eq!(dsa(&s, &i).unwrap(), 1.0);
        let s1 = [1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(dsa(&s1, &i).unwrap(), -1.0);
        let split = [0.1, 0.1, 0.1, 5.0, 0.05, 0.6, 0.05, 9.0, 9.0];
        assert!((dsa(&split, &i).unwrap() - 0.3).abs() < 1e-12);
        assert!(dsa(&[0.0; 9], &i).is_err());
    }

    #[test]
    fn f1_cases() {
        assert_eq!(alignment_f1(&[0.9, 0.8, 0.1], &[0, 1], 2).unwrap(), 1.0);
        assert_eq!(alignment_f1(&[0.9, 0.8, 0.1], &[2], 1).unwrap(), 0.0);
        // a, b, c = 0, 1, 2
        assert_eq!(alignment_f1(&[0.9, 0.8, 0.1, 0.0], &[1, 2], 2).unwrap(), 0.5);
        assert!(alignment_f1(&[1.0], &[], 1).is_err());
    }

    #[test]
    fn spearman_cases() {
        let a = [0.1, 0.5, 0.3, 0.9];
        assert!((spearman(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let r: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((spearman(&a, &r).unwrap() + 1.0).abs() < 1e-12);
        assert!(spearman(&a[..2], &a[..2]).is_err());
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 3.0]), vec![1.0, 2.5, 2.5, 4.0]);
        let align = [(0, 3), (1, 2), (2, 1), (3, 0)];
        let rev = [0.9, 0.3, 0.5, 0.1];
        assert!((rephrase_robustness(&a, &rev, &align).unwrap() - 1.0).abs() < 1e-12);
        assert!(rephrase_robustness(&a, &rev, &[(0, 0), (0, 1), (1, 2)]).is_err());
    }

    fn model() -> Model {
        Model::init(ModelConfig {
            layers: 2,
            heads: 2,
            d_model: 8,
            vocab_size: 12,
            max_len: 16,
            seed: 5,
        })
        .unwrap()
    }

    fn seq() -> TokenSequence {
        TokenSequence::new(vec![3, 7, 1, 9, 4, 4, 11, 2], 7).unwrap()
    }

    #[test]
    fn soft_scores_limits() {
        let m = model();
        let t = seq();
        let zero = soft_nc_ns(&m, &t, &[0.0; 7]).unwrap();
        assert_eq!(zero.soft_nc, 0.0);
        let one = soft_nc_ns(&m, &t, &[1.0; 7]).unwrap();
        let x = m.embed(t.context()).unwrap();
        let g = target_logprob_at(&m, &t, &x).unwrap();
        let g0 = target_logprob_at(&m, &t, &Tensor::zeros(x.shape())).unwrap();
        assert_eq!(one.soft_nc, g - g0);
        assert_eq!(one.soft_ns, 0.0);
        assert!(soft_nc_ns(&m, &t, &[2.0; 7]).is_err());
    }

    #[test]
    fn curves_shape_and_ties() {
        let m = model();
        let t = seq();
        let c = perturbation_curves(&m, &t, &[0.5; 7], MaskScheme::Sentinel).unwrap();
        assert_eq!(c.morf.len(), 7);
        assert_eq!(c.morf, c.lerf);
        assert_eq!(c.abpc, 0.0);
        assert!((c.morf[6] - c.p_empty).abs() < 1e-15);
        assert!((c.insertion[6] - c.p_orig).abs() < 1e-15);
        let c = perturbation_curves(&m, &t, &[0.1, 0.9, 0.3, 0.0, 0.5, 0.2, 0.7], MaskScheme::Zero).unwrap();
        assert!((c.insertion[6] - c.p_orig).abs() < 1e-15);
        assert!((c.abpc - (c.lerf_area - c.morf_area)).abs() < 1e-15);
    }

    #[test]
    fn sensitivity_of_a_constant_is_zero() {
        let x = Tensor::zeros(&[4, 3]);
        assert_eq!(sensitivity(&x, |_| Ok(vec![1.0; 4]), 0.1, 5, 0).unwrap(), 0.0);
        let s = sensitivity(&x, |y| Ok(y.data()[..4].to_vec()), 0.1, 200, 0).unwrap();
        assert!((s - 0.1).abs() < 0.02, "{s}");
        let tiny = sensitivity(&x, |y| Ok(y.data()[..4].to_vec()), 1e-9, 50, 0).unwrap();
        assert!(tiny < 1e-8);
    }

    #[test]
    fn greedy_sweep_has_no_spread() {
        let m = model();
        let prompts = vec![vec![3, 7, 1, 9], vec![4, 4, 11, 2, 5]];
        let metric = |s: &TokenSequence| Ok(BTreeMap::from([("target".to_string(), s.target_token() as f64 + 1.0)]));
        let r = decoding_stability_sweep(&m, &prompts, &[DecodeSetting::GREEDY], &[0, 1], metric).unwrap();
        assert_eq!(r.delta_percent["target"], 0.0);
        let r = decoding_stability_sweep(&m, &prompts, &[DecodeSetting::GREEDY, DecodeSetting::GREEDY], &[3, 4], metric).unwrap();
        assert_eq!(r.delta_percent["target"], 0.0);
        assert_eq!(DecodeSetting::grid().len(), 27);
    }

    #[test]
    fn sampling_respects_top_k() {
        let logits = [0.0, 5.0, 4.9, -1.0];
        let s = DecodeSetting {
            temperature: 1.0,
            top_p: 1.0,
            top_k: 2,
        };
        let mut rng = rng_for(0, &[]);
        for _ in 0..200 {
            let t = s.sample(&logits, &mut rng);
            assert!(t == 1 || t == 2);
        }
    }

    #[test]
    fn aggregates_and_tests() {
        let a = Aggregate::of(&[1.0]).unwrap();
        assert!(a.std.is_none());
        let a = Aggregate::of(&[1.0, 3.0]).unwrap();
        assert_eq!(a.mean, 2.0);
        assert!(Aggregate::of(&[]).is_err());
        let (lo, hi) = bootstrap_mean_ci(&[1.0, 2.0, 3.0, 4.0, 5.0], 2000, 0.95, 1).unwrap();
        assert!(lo < 3.0 && hi > 3.0 && lo >= 1.0 && hi <= 5.0);
        let t = paired_t_test(&[2.0, 3.0, 4.0, 5.5], &[1.0, 1.0, 1.2, 1.1]).unwrap();
        assert!(t.p_value < 0.05);
        let t = paired_t_test(&[1.0, 2.0, 3.0], &[1.1, 1.9, 3.2]).unwrap();
        assert!(t.p_value > 0.05);
    }

    #[test]
    fn heatmap_escapes_tokens() {
        let html = heatmap_html("x", &[("heta".into(), vec!["<s>".into(), "a".into()], vec![0.0, 1.0])]);
        assert!(html.contains("&lt;s&gt;"));
        assert!(html.contains("rgba(220,40,40,1.000)"));
    }
}
