//! Reference attribution methods: gradient norm, input×gradient, integrated
//! gradients and ungated attention rollout.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{HetaError, Result};
use crate::flow;
use crate::heta::{AttributionVector, Work};
use crate::info::MaskScheme;
use crate::model::{ForwardOptions, Model};
use crate::objective::{LmObjective, ScalarObjective};
use crate::sequence::TokenSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMethod {
    Grad,
    InputXGrad,
    Ig,
    AttnRollout,
}

impl BaselineMethod {
    pub const ALL: [BaselineMethod; 4] = [
        BaselineMethod::Grad,
        BaselineMethod::InputXGrad,
        BaselineMethod::Ig,
        BaselineMethod::AttnRollout,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BaselineMethod::Grad => "grad",
            BaselineMethod::InputXGrad => "input-x-grad",
            BaselineMethod::Ig => "ig",
            BaselineMethod::AttnRollout => "attn-rollout",
        }
    }
}

impl std::fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for BaselineMethod {
    type Err = HetaError;

    fn from_str(s: &str) -> Result<Self> {
        BaselineMethod::ALL
            .iter()
            .find(|m| m.name() == s)
            .copied()
            .ok_or_else(|| HetaError::InvalidConfig(format!("unknown baseline {:?}", s)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub method: BaselineMethod,
    pub ig_steps: usize,
    /// Reference input of IG; every context row is replaced by this scheme.
    pub ig_baseline: MaskScheme,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            method: BaselineMethod::Grad,
            ig_steps: 32,
            ig_baseline: MaskScheme::Zero,
        }
    }
}

impl BaselineConfig {
    pub fn new(method: BaselineMethod) -> Self {
        Self {
            method,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ig_steps < 2 {
            return Err(HetaError::Precondition(format!("IG needs at least 2 steps, got {}", self.ig_steps)));
        }
        Ok(())
    }
}

fn row_l1(t: &Tensor) -> Result<Vec<f64>> {
    let (n, _) = t.dims2()?;
    Ok((0..n).map(|i| t.row(i).iter().map(|v| v.abs()).sum()).collect())
}

/// `‖∇_{x_i} f‖₁` per row.
pub fn gradient_l1<O: ScalarObjective + ?Sized>(obj: &O) -> Result<Vec<f64>> {
    row_l1(&obj.gradient_at(obj.point())?)
}

/// `Σ_d |x_{i,d} ∂f/∂x_{i,d}|` per row.
pub fn input_x_gradient<O: ScalarObjective + ?Sized>(obj: &O) -> Result<Vec<f64>> {
    let x = obj.point();
    row_l1(&x.zip_map(&obj.gradient_at(x)?, |a, b| a * b)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IgResult {
    /// Signed per-coordinate attributions, shaped like the input.
    pub per_coordinate: Tensor,
    /// ℓ1 of each row of `per_coordinate`.
    pub scores: Vec<f64>,
    /// `|Σ IG − (f(x) − f(x'))|`.
    pub completeness_residual: f64,
    /// The baseline equals the input; every attribution is zero.
    pub degenerate: bool,
}

/// Integrated gradients from `baseline` to the objective's point, midpoint
/// rule with `steps` evaluations.
pub fn integrated_gradients<O: ScalarObjective + ?Sized>(obj: &O, baseline: &Tensor, steps: usize) -> Result<IgResult> {
    if steps == 0 {
        return Err(HetaError::Precondition("IG needs at least one step".into()));
    }
    let x = obj.point();
    let diff = x.sub(baseline)?;
    let fx = obj.value_at(x)?;
    let fb = obj.value_at(baseline)?;
    if diff.max_abs() == 0.0 {
        let n = x.dims2()?.0;
        return Ok(IgResult {
            per_coordinate: Tensor::zeros(x.shape()),
            scores: vec![0.0; n],
            completeness_residual: 0.0,
            degenerate: true,
        });
    }
    let mut avg = Tensor::zeros(x.shape());
    for k in 0..steps {
        let alpha = (k as f64 + 0.5) / steps as f64;
        let xa = baseline.add(&diff.scale(alpha))?;
        avg = avg.add(&obj.gradient_at(&xa)?)?;
    }
    let per_coordinate = diff.zip_map(&avg, |d, g| d * g / steps as f64)?;
    let scores = row_l1(&per_coordinate)?;
    let completeness_residual = (per_coordinate.sum() - (fx - fb)).abs();
    Ok(IgResult {
        per_coordinate,
        scores,
        completeness_residual,
        degenerate: false,
    })
}

/// Completeness residual of IG at each step count.
pub fn ig_convergence_check<O: ScalarObjective + ?Sized>(obj: &O, baseline: &Tensor, steps: &[usize]) -> Result<Vec<(usize, f64)>> {
    if steps.len() < 2 {
        return Err(HetaError::Precondition("convergence check needs at least two step counts".into()));
    }
    steps
        .iter()
        .map(|&s| Ok((s, integrated_gradients(obj, baseline, s)?.completeness_residual)))
        .collect()
}

/// Every row of `x` replaced by the scheme's replacement row.
pub fn baseline_input(model: &Model, x: &Tensor, scheme: MaskScheme) -> Result<Tensor> {
    let (n, _) = x.dims2()?;
    let rep = scheme.replacement(model, x)?;
    let rows: Vec<usize> = (0..n).collect();
    crate::info::mask_rows(x, &rows, &rep)
}

/// Flows summed over layers and heads, normalized over the context, without
/// value weighting.
pub fn attention_rollout(model: &Model, tokens: &TokenSequence) -> Result<Vec<f64>> {
    attention_rollout_at(model, &model.embed(tokens.context())?, tokens)
}

/// [`attention_rollout`] on supplied context embeddings.
pub fn attention_rollout_at(model: &Model, x: &Tensor, tokens: &TokenSequence) -> Result<Vec<f64>> {
    let p = tokens.read_pos();
    let trace = model.forward_embeddings(x, p, &ForwardOptions::default())?;
    let phi = flow::rollout_to_target(&trace, p, None)?;
    let mut raw = vec![0.0; tokens.target];
    for layer in &phi {
        for head in layer {
            for (r, f) in raw.iter_mut().zip(head) {
                *r += f;
            }
        }
    }
    let z: f64 = raw.iter().sum();
    if z > 0.0 {
        raw.iter_mut().for_each(|r| *r /= z);
    }
    Ok(raw)
}

pub fn baseline_attribute(model: &Model, tokens: &TokenSequence, cfg: &BaselineConfig) -> Result<AttributionVector> {
    tokens.validate()?;
    model.check_ids(&tokens.ids)?;
    baseline_attribute_at(model, &model.embed(tokens.context())?, tokens, cfg)
}

/// [`baseline_attribute`] on supplied context embeddings `x` in place of
/// the embedded context of `tokens`.
pub fn baseline_attribute_at(model: &Model, x: &Tensor, tokens: &TokenSequence, cfg: &BaselineConfig) -> Result<AttributionVector> {
    cfg.validate()?;
    if x.dims2()?.0 != tokens.target {
        return Err(HetaError::Precondition(format!(
            "{} embedding rows for {} context tokens",
            x.dims2()?.0,
            tokens.target
        )));
    }
    let x = x.clone();
    let obj = LmObjective::new(model, x.clone(), tokens.read_pos(), tokens.target_token())?;
    let mut flags = Vec::new();
    let mut work = Work::default();
    let scores = match cfg.method {
        BaselineMethod::Grad => {
            work.forward_passes = 1;
            gradient_l1(&obj)?
        }
        BaselineMethod::InputXGrad => {
            work.forward_passes = 1;
            input_x_gradient(&obj)?
        }
        BaselineMethod::Ig => {
            let base = baseline_input(model, &x, cfg.ig_baseline)?;
            let r = integrated_gradients(&obj, &base, cfg.ig_steps)?;
            if r.degenerate {
                flags.push("degenerate-baseline".to_string());
            }
            work.forward_passes = cfg.ig_steps + 2;
            r.scores
        }
        BaselineMethod::AttnRollout => {
            work.forward_passes = 1;
            attention_rollout_at(model, &x, tokens)?
        }
    };
    let mut out = AttributionVector::plain(cfg.method.name(), scores, tokens);
    out.flags = flags;
    out.work = work;
    Ok(out)
}

/// `f(x) = act(wᵀx + b)` on an `[n, 1]` input, one coordinate per row.
#[derive(Clone, Debug)]
pub struct ScalarUnit {
    pub w: Vec<f64>,
    pub b: f64,
    pub x: Tensor,
    pub activation: Activation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Softplus,
}

impl ScalarUnit {
    pub fn new(w: Vec<f64>, b: f64, x: Vec<f64>, activation: Activation) -> Result<Self> {
        if w.len() != x.len() {
            return Err(HetaError::Shape {
                op: "scalar_unit",
                detail: format!("{} weights for {} inputs", w.len(), x.len()),
            });
        }
        let n = x.len();
        Ok(Self {
            w,
            b,
            x: Tensor::new(vec![n, 1], x)?,
            activation,
        })
    }

    pub fn pre_activation(&self, x: &[f64]) -> f64 {
        crate::numeric::dot(&self.w, x) + self.b
    }

    pub fn at(&self, x: Vec<f64>) -> Result<Self> {
        Self::new(self.w.clone(), self.b, x, self.activation)
    }

    pub fn column(v: Vec<f64>) -> Tensor {
        let n = v.len();
        Tensor::new(vec![n, 1], v).expect("column shape")
    }
}

impl ScalarObjective for ScalarUnit {
    fn point(&self) -> &Tensor {
        &self.x
    }

    fn eval<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
        let n = self.w.len();
        let w = g.constant(Tensor::new(vec![1, n], self.w.clone())?)?;
        let z = w.matmul(x)?.add_scalar(self.b)?;
        match self.activation {
            Activation::Relu => z.relu()?.sum(),
            Activation::Softplus => z.softplus()?.sum(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> Model {
        Model::init(ModelConfig {
            layers: 2,
            heads: 2,
            d_model: 8,
            vocab_size: 12,
            max_len: 16,
            seed: 3,
        })
        .unwrap()
    }

    fn seq() -> TokenSequence {
        TokenSequence::new(vec![3, 7, 1, 9, 4, 4, 11, 2], 7).unwrap()
    }

    fn relu_unit(x: Vec<f64>) -> ScalarUnit {
        ScalarUnit::new(vec![1.0, 1.0], -2.0, x, Activation::Relu).unwrap()
    }

    #[test]
    fn relu_flat_region() {
        let f = relu_unit(vec![0.0, 0.0]);
        assert_eq!(gradient_l1(&f).unwrap(), vec![0.0, 0.0]);
        let moved = f.value_at(&ScalarUnit::column(vec![2.1, 0.0])).unwrap();
        assert!((moved - 0.1).abs() < 1e-12);
        let ig = integrated_gradients(&f, &ScalarUnit::column(vec![-1.0, -1.0]), 32).unwrap();
        assert_eq!(ig.scores, vec![0.0, 0.0]);
        // a path that crosses the hinge picks up attribution
        let g = relu_unit(vec![2.1, 0.0]);
        let ig = integrated_gradients(&g, &ScalarUnit::column(vec![-1.0, -1.0]), 32).unwrap();
        assert!(ig.scores[0] > 0.0);
    }

    #[test]
    fn ig_is_exact_on_linear_functions() {
        struct Linear(Tensor);
        impl ScalarObjective for Linear {
            fn point(&self) -> &Tensor {
                &self.0
            }
            fn eval<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
                let w = g.constant(Tensor::new(vec![3, 2], vec![1.0, -2.0, 0.5, 3.0, -1.0, 0.25]).unwrap())?;
                x.mul(w)?.sum()
            }
        }
        let f = Linear(Tensor::new(vec![3, 2], vec![0.3, 0.1, -0.7, 2.0, 1.0, 1.0]).unwrap());
        let r = ig_convergence_check(&f, &Tensor::zeros(&[3, 2]), &[2, 5]).unwrap();
        assert!(r.iter().all(|(_, res)| *res < 1e-12));
        let same = integrated_gradients(&f, f.point(), 8).unwrap();
        assert!(same.degenerate);
        assert_eq!(same.completeness_residual, 0.0);
    }

    #[test]
    fn ig_converges_on_the_lm() {
        let m = model();
        let t = seq();
        let x = m.embed(t.context()).unwrap();
        let obj = LmObjective::new(&m, x.clone(), t.read_pos(), t.target_token()).unwrap();
        let r = ig_convergence_check(&obj, &Tensor::zeros(x.shape()), &[8, 64]).unwrap();
        assert!(r[1].1 <= r[0].1, "{r:?}");
    }

    #[test]
    fn grad_squares_to_grad_squared_sensitivity() {
        let m = model();
        let t = seq();
        let x = m.embed(t.context()).unwrap();
        let obj = LmObjective::new(&m, x, t.read_pos(), t.target_token()).unwrap();
        let g = obj.gradient_at(obj.point()).unwrap();
        let blocks: Vec<usize> = (0..7).collect();
        let gs = crate::curvature::grad_squared(&obj, &blocks).unwrap();
        for i in 0..7 {
            let sq: f64 = g.row(i).iter().map(|v| v * v).sum();
            assert!((sq - gs.values[i]).abs() <= 1e-14 * sq.max(1.0));
        }
    }

    #[test]
    fn every_method_is_nonnegative() {
        let m = model();
        for method in BaselineMethod::ALL {
            for scheme in MaskScheme::ALL {
                let cfg = BaselineConfig {
                    method,
                    ig_steps: 8,
                    ig_baseline: scheme,
                };
                let a = baseline_attribute(&m, &seq(), &cfg).unwrap();
                assert_eq!(a.len(), 7);
                assert!(a.scores.iter().all(|s| *s >= 0.0 && s.is_finite()));
            }
        }
        let rollout = attention_rollout(&m, &seq()).unwrap();
        assert!((rollout.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_single_step_ig() {
        let cfg = BaselineConfig {
            method: BaselineMethod::Ig,
            ig_steps: 1,
            ..Default::default()
        };
        assert!(baseline_attribute(&model(), &seq(), &cfg).is_err());
    }

    #[test]
    fn embedding_entry_point_matches() {
        let m = model();
        let t = TokenSequence::new(vec![1, 4, 7, 2, 9, 5], 5).unwrap();
        let x = m.embed(t.context()).unwrap();
        for method in BaselineMethod::ALL {
            let cfg = BaselineConfig::new(method);
            assert_eq!(baseline_attribute_at(&m, &x, &t, &cfg).unwrap(), baseline_attribute(&m, &t, &cfg).unwrap());
        }
    }
}
