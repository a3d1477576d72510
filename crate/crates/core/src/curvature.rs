//! Per-token second-order sensitivity of a scalar objective.
//!
//! The input is `[n, d]`; block `i` is row `i`. With `B_i` the `i`-th
//! diagonal `d × d` block of the Hessian, the block sensitivity is
//! `S_i = (1/m) Σ_k ‖B_i r_k‖₁` over Rademacher probes `r_k` supported on
//! the block. Probes depend only on `(seed, i, k)`, so every mode and every
//! window sees the same probes for a given token.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, HessianOperator, Tensor, Var};
use crate::error::{HetaError, Result};
use crate::numeric::{self, CompensatedSum};
use crate::objective::{LmObjective, ScalarObjective, TargetFunction};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CurvatureMode {
    ExactHvp,
    LowRank { rank: usize },
    LayerSubset { layers: Vec<usize> },
    GradSquared,
    GaussNewton,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurvatureConfig {
    pub samples: usize,
    pub mode: CurvatureMode,
    pub seed: u64,
    /// Extra range-finder probes beyond the rank.
    pub oversample: usize,
}

impl Default for CurvatureConfig {
    fn default() -> Self {
        Self {
            samples: 16,
            mode: CurvatureMode::ExactHvp,
            seed: 0,
            oversample: 2,
        }
    }
}

impl CurvatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(HetaError::Precondition("Hutchinson samples must be at least 1".into()));
        }
        match &self.mode {
            CurvatureMode::LowRank { rank: 0 } => Err(HetaError::Precondition("low-rank mode needs rank >= 1".into())),
            CurvatureMode::LayerSubset { layers } if layers.is_empty() => {
                Err(HetaError::Precondition("empty layer subset".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Rank-`k` symmetric factorization `V diag(λ) Vᵀ` of one Hessian block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowRankBlock {
    /// Orthonormal columns, stored as `rank` vectors of length `d`.
    pub basis: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
}

impl LowRankBlock {
    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn apply(&self, r: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; r.len()];
        for (v, &lam) in self.basis.iter().zip(&self.eigenvalues) {
            let c = lam * numeric::dot(v, r);
            for (o, x) in out.iter_mut().zip(v) {
                *o += c * x;
            }
        }
        out
    }
}

/// Per-block sensitivities with diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityVector {
    /// Block indices, aligned with `values`.
    pub blocks: Vec<usize>,
    pub values: Vec<f64>,
    /// Sample variance of the per-probe terms.
    pub variance: Vec<f64>,
    pub hvp_count: usize,
    /// Range-finder residual per block (low-rank mode only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tail: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factors: Option<Vec<LowRankBlock>>,
}

impl SensitivityVector {
    /// Scatter into a length-`n` vector, zero outside the computed blocks.
    pub fn dense(&self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for (&b, &v) in self.blocks.iter().zip(&self.values) {
            out[b] = v;
        }
        out
    }
}

/// Rademacher probe for sample `k` of block `i`.
pub fn probe(seed: u64, block: usize, sample: usize, d: usize) -> Vec<f64> {
    numeric::rademacher(&mut numeric::rng_for(seed, &[0, block as u64, sample as u64]), d)
}

fn sketch_probe(seed: u64, block: usize, j: usize, d: usize) -> Vec<f64> {
    numeric::rademacher(&mut numeric::rng_for(seed, &[1, block as u64, j as u64]), d)
}

fn check_blocks(x: &Tensor, blocks: &[usize]) -> Result<(usize, usize)> {
    let (n, d) = x.dims2()?;
    if let Some(&b) = blocks.iter().find(|&&b| b >= n) {
        return Err(HetaError::Precondition(format!("block {} outside {} rows", b, n)));
    }
    Ok((n, d))
}

/// Hessian of an objective at its point, restricted to token blocks.
pub struct BlockHessian<'g> {
    op: HessianOperator<'g>,
    n: usize,
    d: usize,
}

impl<'g> BlockHessian<'g> {
    pub fn new<O: ScalarObjective + ?Sized>(g: &'g Graph, obj: &O) -> Result<Self> {
        let (n, d) = obj.point().dims2()?;
        let x = g.var(obj.point().clone())?;
        let y = obj.eval(g, x)?;
        Ok(Self {
            op: HessianOperator::new(g, y, &[x])?,
            n,
            d,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.n, self.d)
    }

    pub fn gradient(&self) -> Tensor {
        self.op.gradient().remove(0)
    }

    /// Full product `H v` for `v` of shape `[n, d]`.
    pub fn apply(&self, v: &Tensor) -> Result<Tensor> {
        let out = self.op.apply(std::slice::from_ref(v))?.remove(0);
        if !out.is_finite() {
            return Err(HetaError::NonFinite { op: "hvp" });
        }
        Ok(out)
    }

    /// `Π_i H (Π_i r)`, the product with the diagonal block `B_i`.
    pub fn apply_block(&self, i: usize, r: &[f64]) -> Result<Vec<f64>> {
        let mut v = Tensor::zeros(&[self.n, self.d]);
        v.row_mut(i).copy_from_slice(r);
        Ok(self.apply(&v)?.row(i).to_vec())
    }
}

/// Block Hutchinson estimate with exact Hessian-vector products.
pub fn hutchinson<O: ScalarObjective + ?Sized>(
    obj: &O,
    blocks: &[usize],
    samples: usize,
    seed: u64,
) -> Result<SensitivityVector> {
    if samples == 0 {
        return Err(HetaError::Precondition("Hutchinson samples must be at least 1".into()));
    }
    let (_, d) = check_blocks(obj.point(), blocks)?;
    let g = Graph::new();
    let bh = BlockHessian::new(&g, obj)?;
    let mut values = Vec::with_capacity(blocks.len());
    let mut variance = Vec::with_capacity(blocks.len());
    for &i in blocks {
        let terms = (0..samples)
            .map(|k| Ok(numeric::norm_l1(&bh.apply_block(i, &probe(seed, i, k, d))?)))
            .collect::<Result<Vec<f64>>>()?;
        values.push(numeric::mean(&terms));
        variance.push(numeric::sample_variance(&terms));
    }
    Ok(SensitivityVector {
        blocks: blocks.to_vec(),
        values,
        variance,
        hvp_count: blocks.len() * samples,
        tail: None,
        factors: None,
    })
}

/// Orthonormalize columns by modified Gram-Schmidt, dropping columns that
/// fall below `tol` times their original norm.
fn orthonormalize(cols: &[Vec<f64>], tol: f64) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    for c in cols {
        let norm0 = numeric::norm_l2(c);
        if norm0 == 0.0 {
            continue;
        }
        let mut v = c.clone();
        for _ in 0..2 {
            for b in &q {
                let p = numeric::dot(b, &v);
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= p * y;
                }
            }
        }
        let nv = numeric::norm_l2(&v);
        if nv > tol * norm0 {
            q.push(v.into_iter().map(|x| x / nv).collect());
        }
    }
    q
}

/// Randomized rank-`rank` factorization of one block from `rank + oversample`
/// sketch probes. Returns the factor and the sketch residual
/// `sqrt(mean_j ‖(B − B_k) ω_j‖²)`.
pub fn lowrank_block(bh: &BlockHessian, i: usize, rank: usize, oversample: usize, seed: u64) -> Result<(LowRankBlock, f64)> {
    if rank == 0 {
        return Err(HetaError::Precondition("rank must be at least 1".into()));
    }
    let d = bh.d;
    let omegas: Vec<Vec<f64>> = (0..rank + oversample).map(|j| sketch_probe(seed, i, j, d)).collect();
    let ys = omegas
        .iter()
        .map(|w| bh.apply_block(i, w))
        .collect::<Result<Vec<_>>>()?;
    let q = orthonormalize(&ys, 1e-10);
    if q.is_empty() {
        return Err(HetaError::RangeFinderBreakdown { token: i });
    }
    let bq = q.iter().map(|c| bh.apply_block(i, c)).collect::<Result<Vec<_>>>()?;
    let r = q.len();
    let mut c = DMatrix::<f64>::zeros(r, r);
    for a in 0..r {
        for b in 0..r {
            c[(a, b)] = numeric::dot(&q[a], &bq[b]);
        }
    }
    let c = (&c + c.transpose()) * 0.5;
    let eig = c.symmetric_eigen();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].abs().total_cmp(&eig.eigenvalues[a].abs()).then(a.cmp(&b)));
    order.truncate(rank);
    let mut basis = Vec::with_capacity(order.len());
    let mut eigenvalues = Vec::with_capacity(order.len());
    for &k in &order {
        let u = eig.eigenvectors.column(k);
        let mut v = vec![0.0; d];
        for (a, qa) in q.iter().enumerate() {
            for (x, y) in v.iter_mut().zip(qa) {
                *x += u[a] * y;
            }
        }
        basis.push(v);
        eigenvalues.push(eig.eigenvalues[k]);
    }
    let factor = LowRankBlock { basis, eigenvalues };
    let resid: Vec<f64> = omegas
        .iter()
        .zip(&ys)
        .map(|(w, y)| {
            let approx = factor.apply(w);
            y.iter().zip(&approx).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        })
        .collect();
    Ok((factor, numeric::mean(&resid).sqrt()))
}

/// Block sensitivity of a rank-`rank` approximation of each block, using
/// the same probes as [`hutchinson`].
pub fn lowrank<O: ScalarObjective + ?Sized>(
    obj: &O,
    blocks: &[usize],
    rank: usize,
    oversample: usize,
    samples: usize,
    seed: u64,
) -> Result<SensitivityVector> {
    if samples == 0 {
        return Err(HetaError::Precondition("Hutchinson samples must be at least 1".into()));
    }
    if rank == 0 {
        return Err(HetaError::Precondition("rank must be at least 1".into()));
    }
    let (_, d) = check_blocks(obj.point(), blocks)?;
    let g = Graph::new();
    let bh = BlockHessian::new(&g, obj)?;
    let mut values = Vec::new();
    let mut variance = Vec::new();
    let mut tail = Vec::new();
    let mut factors = Vec::new();
    let mut hvps = 0;
    for &i in blocks {
        let (f, t) = lowrank_block(&bh, i, rank, oversample, seed)?;
        hvps += rank + oversample + f.rank().max(1);
        let terms: Vec<f64> = (0..samples).map(|k| numeric::norm_l1(&f.apply(&probe(seed, i, k, d)))).collect();
        values.push(numeric::mean(&terms));
        variance.push(numeric::sample_variance(&terms));
        tail.push(t);
        factors.push(f);
    }
    Ok(SensitivityVector {
        blocks: blocks.to_vec(),
        values,
        variance,
        hvp_count: hvps,
        tail: Some(tail),
        factors: Some(factors),
    })
}

/// `S_i = ‖∇_{x_i} g‖₂²`.
pub fn grad_squared<O: ScalarObjective + ?Sized>(obj: &O, blocks: &[usize]) -> Result<SensitivityVector> {
    check_blocks(obj.point(), blocks)?;
    let grad = obj.gradient_at(obj.point())?;
    let values = blocks.iter().map(|&i| grad.row(i).iter().map(|x| x * x).sum()).collect();
    Ok(SensitivityVector {
        blocks: blocks.to_vec(),
        values,
        variance: vec![0.0; blocks.len()],
        hvp_count: 0,
        tail: None,
        factors: None,
    })
}

/// `Jᵀ F J` with `J` the Jacobian of the logits and `F = diag(p) − p pᵀ`.
pub struct GaussNewtonOperator<'g> {
    graph: &'g Graph,
    x: Var<'g>,
    u: Var<'g>,
    logits: Var<'g>,
    jt_u: Var<'g>,
    p: Vec<f64>,
    n: usize,
    d: usize,
    mark: usize,
}

impl<'g> GaussNewtonOperator<'g> {
    pub fn new<T: TargetFunction + ?Sized>(g: &'g Graph, f: &T) -> Result<Self> {
        let (n, d) = f.point().dims2()?;
        let x = g.var(f.point().clone())?;
        let logits = f.logits(g, x)?;
        let vocab = logits.value().numel();
        let u = g.var(Tensor::zeros(logits.value().shape()))?;
        let s = logits.mul(u)?.sum()?;
        let jt_u = g.grad_graph(s, &[x])?.remove(0);
        let p = crate::model::softmax(logits.value().data());
        debug_assert_eq!(p.len(), vocab);
        Ok(Self {
            graph: g,
            x,
            u,
            logits,
            jt_u,
            p,
            n,
            d,
            mark: g.len(),
        })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.p
    }

    /// `J v` for `v` of shape `[n, d]`.
    pub fn jvp(&self, v: &Tensor) -> Result<Vec<f64>> {
        let out = (|| {
            let t = self.jt_u.mul(self.graph.constant(v.clone())?)?.sum()?;
            Ok(self.graph.grad(t, &[self.u])?.remove(0).into_data())
        })();
        self.graph.truncate(self.mark);
        out
    }

    /// `Jᵀ w` for a vocabulary-sized `w`.
    pub fn vjp(&self, w: &[f64]) -> Result<Tensor> {
        let out = (|| {
            let wt = Tensor::new(self.logits.value().shape().to_vec(), w.to_vec())?;
            let t = self.logits.mul(self.graph.constant(wt)?)?.sum()?;
            Ok(self.graph.grad(t, &[self.x])?.remove(0))
        })();
        self.graph.truncate(self.mark);
        out
    }

    /// `F w` with the softmax Fisher at the point.
    pub fn fisher(&self, w: &[f64]) -> Vec<f64> {
        let pw = numeric::dot(&self.p, w);
        self.p.iter().zip(w).map(|(p, x)| p * (x - pw)).collect()
    }

    pub fn apply(&self, v: &Tensor) -> Result<Tensor> {
        let jv = self.jvp(v)?;
        let out = self.vjp(&self.fisher(&jv))?;
        if !out.is_finite() {
            return Err(HetaError::NonFinite { op: "gauss-newton" });
        }
        Ok(out)
    }

    pub fn apply_block(&self, i: usize, r: &[f64]) -> Result<Vec<f64>> {
        let mut v = Tensor::zeros(&[self.n, self.d]);
        v.row_mut(i).copy_from_slice(r);
        Ok(self.apply(&v)?.row(i).to_vec())
    }
}

/// Block Hutchinson reduction of the Gauss-Newton surrogate.
pub fn gauss_newton<T: TargetFunction + ?Sized>(
    f: &T,
    blocks: &[usize],
    samples: usize,
    seed: u64,
) -> Result<SensitivityVector> {
    if samples == 0 {
        return Err(HetaError::Precondition("Hutchinson samples must be at least 1".into()));
    }
    let (_, d) = check_blocks(f.point(), blocks)?;
    let g = Graph::new();
    let op = GaussNewtonOperator::new(&g, f)?;
    let mut values = Vec::new();
    let mut variance = Vec::new();
    for &i in blocks {
        let terms = (0..samples)
            .map(|k| Ok(numeric::norm_l1(&op.apply_block(i, &probe(seed, i, k, d))?)))
            .collect::<Result<Vec<f64>>>()?;
        values.push(numeric::mean(&terms));
        variance.push(numeric::sample_variance(&terms));
    }
    Ok(SensitivityVector {
        blocks: blocks.to_vec(),
        values,
        variance,
        hvp_count: 2 * blocks.len() * samples,
        tail: None,
        factors: None,
    })
}

/// Dispatch on `cfg.mode` for a language-model objective.
pub fn block_sensitivity(obj: &LmObjective, blocks: &[usize], cfg: &CurvatureConfig) -> Result<SensitivityVector> {
    cfg.validate()?;
    match &cfg.mode {
        CurvatureMode::ExactHvp => hutchinson(obj, blocks, cfg.samples, cfg.seed),
        CurvatureMode::LowRank { rank } => lowrank(obj, blocks, *rank, cfg.oversample, cfg.samples, cfg.seed),
        CurvatureMode::LayerSubset { layers } => hutchinson(&obj.layer_subset(layers)?, blocks, cfg.samples, cfg.seed),
        CurvatureMode::GradSquared => grad_squared(obj, blocks),
        CurvatureMode::GaussNewton => gauss_newton(obj, blocks, cfg.samples, cfg.seed),
    }
}

/// Dense-Hessian oracle for small inputs.
pub mod oracle {
    use super::*;

    /// Largest `n·d` for which the dense Hessian is assembled.
    pub const DENSE_LIMIT: usize = 64;

    /// Full Hessian `[n·d, n·d]` assembled column by column from products
    /// with standard basis vectors.
    pub fn dense_hessian<O: ScalarObjective + ?Sized>(obj: &O) -> Result<Tensor> {
        let (n, d) = obj.point().dims2()?;
        let nd = n * d;
        if nd > DENSE_LIMIT {
            return Err(HetaError::Precondition(format!(
                "dense Hessian needs n·d <= {}, got {}",
                DENSE_LIMIT, nd
            )));
        }
        let g = Graph::new();
        let bh = BlockHessian::new(&g, obj)?;
        let mut h = Tensor::zeros(&[nd, nd]);
        for c in 0..nd {
            let mut e = Tensor::zeros(&[n, d]);
            e.data_mut()[c] = 1.0;
            let col = bh.apply(&e)?;
            for (r, &v) in col.data().iter().enumerate() {
                h.set2(r, c, v);
            }
        }
        Ok(h)
    }

    /// Diagonal block `i` of a dense Hessian, `[d, d]`.
    pub fn block(h: &Tensor, d: usize, i: usize) -> Tensor {
        let mut b = Tensor::zeros(&[d, d]);
        for r in 0..d {
            for c in 0..d {
                b.set2(r, c, h.get2(i * d + r, i * d + c));
            }
        }
        b
    }

    /// Off-diagonal block `(i, j)` of a dense Hessian.
    pub fn cross_block(h: &Tensor, d: usize, i: usize, j: usize) -> Tensor {
        let mut b = Tensor::zeros(&[d, d]);
        for r in 0..d {
            for c in 0..d {
                b.set2(r, c, h.get2(i * d + r, j * d + c));
            }
        }
        b
    }

    /// Exact `E_r ‖B r‖₁` over all `2^d` sign vectors.
    pub fn expected_block_l1(b: &Tensor) -> Result<f64> {
        let (d, d2) = b.dims2()?;
        if d != d2 || d > 20 {
            return Err(HetaError::Precondition("expected a square block with d <= 20".into()));
        }
        let mut total = CompensatedSum::default();
        for mask in 0u32..(1 << d) {
            let r: Vec<f64> = (0..d).map(|k| if mask >> k & 1 == 1 { 1.0 } else { -1.0 }).collect();
            let l1: f64 = (0..d).map(|row| numeric::dot(b.row(row), &r).abs()).sum();
            total.add(l1);
        }
        Ok(total.value() / (1u64 << d) as f64)
    }

    /// Entrywise ℓ1 norm.
    pub fn l11(h: &Tensor) -> f64 {
        h.norm_l1()
    }

    /// Spectral norm of a symmetric or general matrix.
    pub fn operator_norm(b: &Tensor) -> Result<f64> {
        let (r, c) = b.dims2()?;
        let m = DMatrix::from_row_slice(r, c, b.data());
        Ok(m.singular_values().iter().fold(0.0f64, |a, &s| a.max(s)))
    }
}
