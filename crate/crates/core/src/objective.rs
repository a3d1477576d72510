//! Scalar functions of a `[n, d]` input whose token blocks are rows.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{HetaError, Result};
use crate::model::{log_softmax, ForwardOptions, Model};

/// A twice-differentiable scalar function evaluated around a fixed point.
pub trait ScalarObjective {
    /// Point of evaluation, `[n, d]`.
    fn point(&self) -> &Tensor;

    /// Record `f(x)` on `g`; the result must be 0-dimensional.
    fn eval<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>>;

    fn value_at(&self, x: &Tensor) -> Result<f64> {
        let g = Graph::new();
        let xv = g.constant(x.clone())?;
        self.eval(&g, xv)?.item()
    }

    fn value(&self) -> Result<f64> {
        self.value_at(self.point())
    }

    fn gradient_at(&self, x: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let xv = g.var(x.clone())?;
        let y = self.eval(&g, xv)?;
        Ok(g.grad(y, &[xv])?.remove(0))
    }
}

/// Logits over a vocabulary plus a designated target class. The induced
/// scalar objective is the target's log-probability.
pub trait TargetFunction {
    fn point(&self) -> &Tensor;

    /// Logits as a `[1, vocab]` node.
    fn logits<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>>;

    fn target(&self) -> usize;

    /// Output distribution at `x`.
    fn distribution_at(&self, x: &Tensor) -> Result<Vec<f64>> {
        let g = Graph::new();
        let z = self.logits(&g, g.constant(x.clone())?)?.value();
        Ok(crate::model::softmax(z.data()))
    }
}

impl<T: TargetFunction> ScalarObjective for T {
    fn point(&self) -> &Tensor {
        TargetFunction::point(self)
    }

    fn eval<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
        self.logits(g, x)?.log_softmax_rows()?.index_flat(self.target())
    }

    fn value_at(&self, x: &Tensor) -> Result<f64> {
        let g = Graph::new();
        let z = self.logits(&g, g.constant(x.clone())?)?.value();
        Ok(log_softmax(z.data())[self.target()])
    }
}

/// `g(X) = log P(target | X)` at a read position, as a function of the
/// token embeddings.
#[derive(Clone, Debug)]
pub struct LmObjective<'m> {
    pub model: &'m Model,
    pub x: Tensor,
    pub read_pos: usize,
    pub target: usize,
    pub opts: ForwardOptions,
}

impl<'m> LmObjective<'m> {
    pub fn new(model: &'m Model, x: Tensor, read_pos: usize, target: usize) -> Result<Self> {
        let n = model.check_embeddings(&x)?;
        if read_pos >= n {
            return Err(HetaError::Precondition(format!("read position {} outside {} tokens", read_pos, n)));
        }
        model.check_ids(&[target])?;
        Ok(Self {
            model,
            x,
            read_pos,
            target,
            opts: ForwardOptions::default(),
        })
    }

    pub fn with_options(mut self, opts: ForwardOptions) -> Self {
        self.opts = opts;
        self
    }

    /// Same objective with `x` replaced.
    pub fn at(&self, x: Tensor) -> Self {
        Self { x, ..self.clone() }
    }

    /// The objective as a function of the residual stream entering the
    /// lowest layer of `subset`, with layers above it but outside the
    /// subset contributing only through the residual path.
    pub fn layer_subset(&self, subset: &[usize]) -> Result<LayerSubsetObjective<'m>> {
        let layers = self.model.config.layers;
        let mut sub = subset.to_vec();
        sub.sort_unstable();
        sub.dedup();
        let from = *sub
            .first()
            .ok_or_else(|| HetaError::Precondition("empty layer subset".into()))?;
        if let Some(&bad) = sub.iter().find(|&&l| l >= layers) {
            return Err(HetaError::Precondition(format!("layer {} outside 0..{}", bad, layers)));
        }
        let g = Graph::new();
        let b = self.model.bind(&g, false)?;
        let h = b.input(g.constant(self.x.clone())?)?;
        let h = b.run_layers(h, 0..from, &self.opts, None)?;
        let mut opts = self.opts.clone();
        opts.frozen_layers = (from..layers).filter(|l| !sub.contains(l)).collect();
        Ok(LayerSubsetObjective {
            model: self.model,
            h: (*h.value()).clone(),
            from,
            read_pos: self.read_pos,
            target: self.target,
            opts,
        })
    }
}

impl TargetFunction for LmObjective<'_> {
    fn point(&self) -> &Tensor {
        &self.x
    }

    fn logits<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
        let b = self.model.bind(g, false)?;
        let h = b.residual(x, &self.opts, None)?;
        b.read_logits(h, self.read_pos)
    }

    fn target(&self) -> usize {
        self.target
    }
}

/// Target log-probability as a function of an intermediate residual stream.
#[derive(Clone, Debug)]
pub struct LayerSubsetObjective<'m> {
    pub model: &'m Model,
    pub h: Tensor,
    pub from: usize,
    pub read_pos: usize,
    pub target: usize,
    pub opts: ForwardOptions,
}

impl TargetFunction for LayerSubsetObjective<'_> {
    fn point(&self) -> &Tensor {
        &self.h
    }

    fn logits<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
        let b = self.model.bind(g, false)?;
        let h = b.run_layers(x, self.from..self.model.config.layers, &self.opts, None)?;
        b.read_logits(h, self.read_pos)
    }

    fn target(&self) -> usize {
        self.target
    }
}
