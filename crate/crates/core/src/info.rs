//! Information contribution of a token: KL divergence between the target
//! distribution with and without that token's embedding.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{HetaError, Result};
use crate::model::{log_softmax, vocab::SENTINEL_ID, ForwardOptions, Model};
use crate::sequence::TokenSequence;

/// How a masked token's embedding is replaced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskScheme {
    Zero,
    /// Mean of the instance's context embeddings.
    Mean,
    /// Embedding row of the reserved sentinel token.
    #[default]
    Sentinel,
}

impl MaskScheme {
    pub const ALL: [MaskScheme; 3] = [MaskScheme::Zero, MaskScheme::Mean, MaskScheme::Sentinel];

    pub fn name(&self) -> &'static str {
        match self {
            MaskScheme::Zero => "zero",
            MaskScheme::Mean => "mean",
            MaskScheme::Sentinel => "sentinel",
        }
    }

    /// Replacement row for embeddings `x`.
    pub fn replacement(&self, model: &Model, x: &Tensor) -> Result<Vec<f64>> {
        let (n, d) = x.dims2()?;
        Ok(match self {
            MaskScheme::Zero => vec![0.0; d],
            MaskScheme::Mean => {
                let mut m = vec![0.0; d];
                for i in 0..n {
                    for (a, b) in m.iter_mut().zip(x.row(i)) {
                        *a += b;
                    }
                }
                m.iter().map(|v| v / n as f64).collect()
            }
            MaskScheme::Sentinel => model.embedding_row(SENTINEL_ID)?.to_vec(),
        })
    }
}

impl std::str::FromStr for MaskScheme {
    type Err = HetaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(MaskScheme::Zero),
            "mean" => Ok(MaskScheme::Mean),
            "sentinel" => Ok(MaskScheme::Sentinel),
            other => Err(HetaError::InvalidConfig(format!("unknown mask scheme {:?}", other))),
        }
    }
}

/// Embeddings with rows `rows` replaced by `replacement`.
pub fn mask_rows(x: &Tensor, rows: &[usize], replacement: &[f64]) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    if replacement.len() != d {
        return Err(HetaError::Shape {
            op: "mask",
            detail: format!("replacement of width {} for width {}", replacement.len(), d),
        });
    }
    let mut out = x.clone();
    for &i in rows {
        if i >= n {
            return Err(HetaError::Precondition(format!("mask position {} outside {} tokens", i, n)));
        }
        out.row_mut(i).copy_from_slice(replacement);
    }
    Ok(out)
}

/// Context embeddings of `tokens` with position `i` masked.
pub fn mask_token(model: &Model, tokens: &TokenSequence, i: usize, scheme: MaskScheme) -> Result<Tensor> {
    tokens.validate()?;
    if i >= tokens.target {
        return Err(HetaError::Precondition(format!(
            "only context positions can be masked: {} >= target {}",
            i, tokens.target
        )));
    }
    let x = model.embed(tokens.context())?;
    let rep = scheme.replacement(model, &x)?;
    mask_rows(&x, &[i], &rep)
}

/// `KL(P ‖ Q)` in nats from log-probabilities, as `Σ p (e^t − 1 − t)` with
/// `t = log q − log p`; every term is nonnegative.
pub fn kl_from_log(lp: &[f64], lq: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for (&a, &b) in lp.iter().zip(lq) {
        let p = a.exp();
        if p == 0.0 {
            continue;
        }
        if b == f64::NEG_INFINITY {
            return Err(HetaError::Precondition("masked distribution has a zero where the original does not".into()));
        }
        let t = b - a;
        total += p * (t.exp_m1() - t);
    }
    Ok(total)
}

/// KL of two probability vectors (natural log).
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    let lp: Vec<f64> = p.iter().map(|v| v.ln()).collect();
    let lq: Vec<f64> = q.iter().map(|v| v.ln()).collect();
    kl_from_log(&lp, &lq)
}

/// `Σ |p − q|`, in `[0, 2]`.
pub fn l1_distance(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum()
}

/// KL, total-variation distance and log-prob change for one masking.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlTerms {
    pub info: f64,
    /// `Σ_v |P_orig(v) − P_masked(v)|`.
    pub tv: f64,
    /// `g(X) − g(X with the token masked)`.
    pub delta_g: f64,
}

/// Compare two logit vectors at the target token.
pub fn compare_logits(orig: &[f64], masked: &[f64], target: usize) -> Result<KlTerms> {
    let lp = log_softmax(orig);
    let lq = log_softmax(masked);
    let p: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
    let q: Vec<f64> = lq.iter().map(|v| v.exp()).collect();
    Ok(KlTerms {
        info: kl_from_log(&lp, &lq)?,
        tv: l1_distance(&p, &q),
        delta_g: lp[target] - lq[target],
    })
}

/// Information contribution of context position `i` of `tokens`.
pub fn kl_contribution(model: &Model, tokens: &TokenSequence, i: usize, scheme: MaskScheme) -> Result<KlTerms> {
    let x = model.embed(tokens.context())?;
    let masked = mask_token(model, tokens, i, scheme)?;
    let opts = ForwardOptions::default();
    let orig = model.read_logits(&x, tokens.read_pos(), &opts)?;
    let after = model.read_logits(&masked, tokens.read_pos(), &opts)?;
    compare_logits(&orig, &after, tokens.target_token())
}

/// Per-position information terms, aligned with `positions`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfoResult {
    pub positions: Vec<usize>,
    pub info: Vec<f64>,
    pub tv: Vec<f64>,
    pub delta_g: Vec<f64>,
    pub delta_plus: Vec<f64>,
    /// Logits of the unmasked pass at the read position.
    pub orig_logits: Vec<f64>,
    /// Probabilities of each masked pass at the read position.
    #[serde(skip)]
    pub masked_probs: Vec<Vec<f64>>,
}

impl InfoResult {
    pub fn dense(&self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for (&p, &v) in self.positions.iter().zip(&self.info) {
            out[p] = v;
        }
        out
    }
}

/// One masked forward pass per listed position. `replacement` is the row
/// substituted for the masked token.
pub fn batch_info_embeddings(
    model: &Model,
    x: &Tensor,
    read_pos: usize,
    target: usize,
    positions: &[usize],
    replacement: &[f64],
    opts: &ForwardOptions,
) -> Result<InfoResult> {
    let orig = model.read_logits(x, read_pos, opts)?;
    let mut out = InfoResult {
        positions: positions.to_vec(),
        info: Vec::with_capacity(positions.len()),
        tv: Vec::with_capacity(positions.len()),
        delta_g: Vec::with_capacity(positions.len()),
        delta_plus: Vec::with_capacity(positions.len()),
        orig_logits: orig.clone(),
        masked_probs: Vec::with_capacity(positions.len()),
    };
    for &i in positions {
        let masked = mask_rows(x, &[i], replacement)?;
        let after = model.read_logits(&masked, read_pos, opts)?;
        let t = compare_logits(&orig, &after, target)?;
        out.info.push(t.info);
        out.tv.push(t.tv);
        out.delta_g.push(t.delta_g);
        out.delta_plus.push(t.delta_g.max(0.0));
        out.masked_probs.push(crate::model::softmax(&after));
    }
    Ok(out)
}

/// Information terms for every context position of `tokens`.
pub fn batch_info(model: &Model, tokens: &TokenSequence, scheme: MaskScheme) -> Result<InfoResult> {
    tokens.validate()?;
    if tokens.target < 2 {
        return Err(HetaError::Precondition("need at least two context tokens".into()));
    }
    let x = model.embed(tokens.context())?;
    let rep = scheme.replacement(model, &x)?;
    let positions: Vec<usize> = (0..tokens.target).collect();
    batch_info_embeddings(
        model,
        &x,
        tokens.read_pos(),
        tokens.target_token(),
        &positions,
        &rep,
        &ForwardOptions::default(),
    )
}
