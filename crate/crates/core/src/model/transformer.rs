use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{HetaError, Result};
use crate::sequence::TokenSequence;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Arc<Tensor>,
    pub ln1_b: Arc<Tensor>,
    pub w_q: Arc<Tensor>,
    pub w_k: Arc<Tensor>,
    pub w_v: Arc<Tensor>,
    pub w_o: Arc<Tensor>,
    pub ln2_g: Arc<Tensor>,
    pub ln2_b: Arc<Tensor>,
    pub w_1: Arc<Tensor>,
    pub b_1: Arc<Tensor>,
    pub w_2: Arc<Tensor>,
    pub b_2: Arc<Tensor>,
}

/// All trainable weights. Matrices act on row vectors (`x W`).
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub tok_emb: Arc<Tensor>,
    pub pos_emb: Arc<Tensor>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Arc<Tensor>,
    pub lnf_b: Arc<Tensor>,
    pub w_u: Arc<Tensor>,
}

impl Params {
    /// Every tensor in canonical (checkpoint) order.
    pub fn tensors(&self) -> Vec<&Arc<Tensor>> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            out.extend([
                &l.ln1_g, &l.ln1_b, &l.w_q, &l.w_k, &l.w_v, &l.w_o, &l.ln2_g, &l.ln2_b, &l.w_1, &l.b_1, &l.w_2, &l.b_2,
            ]);
        }
        out.extend([&self.lnf_g, &self.lnf_b, &self.w_u]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Arc<Tensor>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_g,
                &mut l.ln1_b,
                &mut l.w_q,
                &mut l.w_k,
                &mut l.w_v,
                &mut l.w_o,
                &mut l.ln2_g,
                &mut l.ln2_b,
                &mut l.w_1,
                &mut l.b_1,
                &mut l.w_2,
                &mut l.b_2,
            ]);
        }
        out.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.w_u]);
        out
    }

    /// Shapes in canonical order for a configuration.
    pub fn shapes(cfg: &ModelConfig) -> Vec<Vec<usize>> {
        let (d, f, v) = (cfg.d_model, cfg.d_ff(), cfg.vocab_size);
        let mut out = vec![vec![v, d], vec![cfg.max_len, d]];
        for _ in 0..cfg.layers {
            out.extend([
                vec![d],
                vec![d],
                vec![d, d],
                vec![d, d],
                vec![d, d],
                vec![d, d],
                vec![d],
                vec![d],
                vec![d, f],
                vec![f],
                vec![f, d],
                vec![d],
            ]);
        }
        out.extend([vec![d], vec![d], vec![d, v]]);
        out
    }

    /// Rebuild from tensors in canonical order.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let shapes = Self::shapes(cfg);
        if shapes.len() != tensors.len() {
            return Err(HetaError::InvalidConfig(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (s, t) in shapes.iter().zip(&tensors) {
            if s.as_slice() != t.shape() {
                return Err(HetaError::Shape {
                    op: "params",
                    detail: format!("expected {:?}, got {:?}", s, t.shape()),
                });
            }
        }
        let mut it = tensors.into_iter().map(Arc::new);
        let mut next = || it.next().expect("length checked");
        let tok_emb = next();
        let pos_emb = next();
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                ln1_g: next(),
                ln1_b: next(),
                w_q: next(),
                w_k: next(),
                w_v: next(),
                w_o: next(),
                ln2_g: next(),
                ln2_b: next(),
                w_1: next(),
                b_1: next(),
                w_2: next(),
                b_2: next(),
            })
            .collect();
        Ok(Self {
            tok_emb,
            pos_emb,
            layers,
            lnf_g: next(),
            lnf_b: next(),
            w_u: next(),
        })
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }
}

/// Attention internals of one head in one layer.
#[derive(Clone, Debug)]
pub struct HeadTrace {
    /// Row-stochastic attention probabilities, `[n, n]`.
    pub attn: Arc<Tensor>,
    /// Value rows, `[n, d_head]`.
    pub value: Arc<Tensor>,
    /// This head's slice of the output projection, `[d_head, d_model]`.
    pub w_o: Arc<Tensor>,
}

/// Everything recorded by one observed forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Indexed `[layer][head]`.
    pub heads: Vec<Vec<HeadTrace>>,
    /// Logits at every position, `[n, vocab]`.
    pub logits: Tensor,
    pub read_pos: usize,
    /// Logits at `read_pos`, computed on the same path as the attribution objective.
    pub read_logits: Vec<f64>,
    /// Next-token distribution at `read_pos`.
    pub p_orig: Vec<f64>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layers(&self) -> usize {
        self.heads.len()
    }

    pub fn num_heads(&self) -> usize {
        self.heads.first().map_or(0, Vec::len)
    }
}

/// Natural-log probability of `token` under the traced distribution.
pub fn target_logprob(trace: &ForwardTrace, token: usize) -> Result<f64> {
    if token >= trace.read_logits.len() {
        return Err(HetaError::OutOfVocab {
            id: token,
            vocab: trace.read_logits.len(),
        });
    }
    Ok(log_softmax(&trace.read_logits)[token])
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&v| v - max - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Knobs for restricted forward passes.
#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// Per-position key visibility; hidden positions receive no attention.
    pub key_visible: Option<Vec<bool>>,
    /// Layers whose attention and MLP outputs are treated as constants.
    pub frozen_layers: Vec<usize>,
}

impl ForwardOptions {
    fn attention_mask(&self, n: usize) -> Result<Vec<bool>> {
        if let Some(v) = &self.key_visible {
            if v.len() != n {
                return Err(HetaError::Shape {
                    op: "key_visible",
                    detail: format!("{} flags for {} positions", v.len(), n),
                });
            }
        }
        Ok((0..n * n)
            .map(|k| {
                let (i, j) = (k / n, k % n);
                j <= i && self.key_visible.as_ref().map_or(true, |v| v[j])
            })
            .collect())
    }
}

struct LayerVars<'g> {
    ln1_g: Var<'g>,
    ln1_b: Var<'g>,
    w_q: Var<'g>,
    w_k: Var<'g>,
    w_v: Var<'g>,
    w_o: Var<'g>,
    ln2_g: Var<'g>,
    ln2_b: Var<'g>,
    w_1: Var<'g>,
    b_1: Var<'g>,
    w_2: Var<'g>,
    b_2: Var<'g>,
}

/// Model parameters placed on a graph.
pub struct BoundModel<'m, 'g> {
    model: &'m Model,
    pos_emb: Var<'g>,
    layers: Vec<LayerVars<'g>>,
    lnf_g: Var<'g>,
    lnf_b: Var<'g>,
    w_u: Var<'g>,
    /// Present only when bound for training.
    pub tok_emb: Option<Var<'g>>,
    leaves: Vec<Var<'g>>,
}

/// Decoder-only pre-LN transformer with GELU MLPs.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

impl Model {
    /// Scaled-normal initialization from `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model as f64;
        let resid = 1.0 / (2.0 * config.layers as f64).sqrt();
        let mut normal = |shape: &[usize], std: f64| -> Tensor {
            let dist = Normal::new(0.0, std).expect("positive std");
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(&mut rng)).collect()).expect("sized")
        };
        let mut tensors = Vec::new();
        for shape in Params::shapes(&config) {
            tensors.push(Tensor::zeros(&shape));
        }
        // Fill in canonical order; gains are ones, biases zeros.
        let (v, f) = (config.vocab_size, config.d_ff() as f64);
        let dm = config.d_model;
        tensors[0] = normal(&[v, dm], 0.5);
        tensors[1] = normal(&[config.max_len, dm], 0.5);
        for l in 0..config.layers {
            let base = 2 + 12 * l;
            tensors[base] = Tensor::full(&[dm], 1.0);
            for k in 2..5 {
                tensors[base + k] = normal(&[dm, dm], 1.0 / d.sqrt());
            }
            tensors[base + 5] = normal(&[dm, dm], resid / d.sqrt());
            tensors[base + 6] = Tensor::full(&[dm], 1.0);
            tensors[base + 8] = normal(&[dm, config.d_ff()], 1.0 / d.sqrt());
            tensors[base + 10] = normal(&[config.d_ff(), dm], resid / f.sqrt());
        }
        let tail = 2 + 12 * config.layers;
        tensors[tail] = Tensor::full(&[dm], 1.0);
        tensors[tail + 2] = normal(&[dm, v], 1.0 / d.sqrt());
        let params = Params::from_tensors(&config, tensors)?;
        Ok(Self { config, params })
    }

    pub fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.len() > self.config.max_len {
            return Err(HetaError::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(HetaError::OutOfVocab {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Token embedding rows, `[n, d]`.
    pub fn embed(&self, ids: &[usize]) -> Result<Tensor> {
        self.check_ids(ids)?;
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(self.params.tok_emb.row(i));
        }
        Tensor::new(vec![ids.len(), d], data)
    }

    pub fn embedding_row(&self, id: usize) -> Result<&[f64]> {
        self.check_ids(&[id])?;
        Ok(self.params.tok_emb.row(id))
    }

    /// Place the parameters on `g`; `trainable` makes them gradient leaves.
    pub fn bind<'m, 'g>(&'m self, g: &'g Graph, trainable: bool) -> Result<BoundModel<'m, 'g>> {
        let mut leaves = Vec::new();
        let mut put = |t: &Arc<Tensor>| -> Result<Var<'g>> {
            let v = if trainable {
                g.var_arc(t.clone())?
            } else {
                g.constant_arc(t.clone())?
            };
            leaves.push(v);
            Ok(v)
        };
        let p = &self.params;
        let tok_emb = put(&p.tok_emb)?;
        let pos_emb = put(&p.pos_emb)?;
        let mut layers = Vec::with_capacity(p.layers.len());
        for l in &p.layers {
            layers.push(LayerVars {
                ln1_g: put(&l.ln1_g)?,
                ln1_b: put(&l.ln1_b)?,
                w_q: put(&l.w_q)?,
                w_k: put(&l.w_k)?,
                w_v: put(&l.w_v)?,
                w_o: put(&l.w_o)?,
                ln2_g: put(&l.ln2_g)?,
                ln2_b: put(&l.ln2_b)?,
                w_1: put(&l.w_1)?,
                b_1: put(&l.b_1)?,
                w_2: put(&l.w_2)?,
                b_2: put(&l.b_2)?,
            });
        }
        let lnf_g = put(&p.lnf_g)?;
        let lnf_b = put(&p.lnf_b)?;
        let w_u = put(&p.w_u)?;
        Ok(BoundModel {
            model: self,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            w_u,
            tok_emb: trainable.then_some(tok_emb),
            leaves,
        })
    }

    /// Observed forward pass over the prompt `tokens.context()`.
    pub fn forward(&self, tokens: &TokenSequence) -> Result<ForwardTrace> {
        tokens.validate()?;
        self.check_ids(&tokens.ids)?;
        let x = self.embed(tokens.context())?;
        self.forward_embeddings(&x, tokens.read_pos(), &ForwardOptions::default())
    }

    /// Observed forward pass from explicit token embeddings.
    pub fn forward_embeddings(&self, x: &Tensor, read_pos: usize, opts: &ForwardOptions) -> Result<ForwardTrace> {
        let n = self.check_embeddings(x)?;
        if read_pos >= n {
            return Err(HetaError::Precondition(format!("read position {} outside {} tokens", read_pos, n)));
        }
        let g = Graph::new();
        let bound = self.bind(&g, false)?;
        let xv = g.constant(x.clone())?;
        let mut heads = Vec::new();
        let h = bound.residual(xv, opts, Some(&mut heads))?;
        let logits = bound.logits(h)?.value();
        let read = bound.read_logits(h, read_pos)?.value();
        Ok(ForwardTrace {
            heads,
            logits: (*logits).clone(),
            read_pos,
            p_orig: softmax(read.data()),
            read_logits: read.data().to_vec(),
        })
    }

    /// Next-token distribution at `read_pos` without recording a trace.
    pub fn distribution(&self, x: &Tensor, read_pos: usize, opts: &ForwardOptions) -> Result<Vec<f64>> {
        Ok(softmax(&self.read_logits(x, read_pos, opts)?))
    }

    pub fn read_logits(&self, x: &Tensor, read_pos: usize, opts: &ForwardOptions) -> Result<Vec<f64>> {
        let n = self.check_embeddings(x)?;
        if read_pos >= n {
            return Err(HetaError::Precondition(format!("read position {} outside {} tokens", read_pos, n)));
        }
        let g = Graph::new();
        let bound = self.bind(&g, false)?;
        let h = bound.residual(g.constant(x.clone())?, opts, None)?;
        Ok(bound.read_logits(h, read_pos)?.value().data().to_vec())
    }

    /// `log P(token | x)` at `read_pos`.
    pub fn logprob(&self, x: &Tensor, read_pos: usize, token: usize, opts: &ForwardOptions) -> Result<f64> {
        if token >= self.config.vocab_size {
            return Err(HetaError::OutOfVocab {
                id: token,
                vocab: self.config.vocab_size,
            });
        }
        Ok(log_softmax(&self.read_logits(x, read_pos, opts)?)[token])
    }

    pub(crate) fn check_embeddings(&self, x: &Tensor) -> Result<usize> {
        let (n, d) = x.dims2()?;
        if d != self.config.d_model {
            return Err(HetaError::Shape {
                op: "embeddings",
                detail: format!("width {} for model width {}", d, self.config.d_model),
            });
        }
        if n == 0 {
            return Err(HetaError::Precondition("empty sequence".into()));
        }
        if n > self.config.max_len {
            return Err(HetaError::SequenceTooLong {
                len: n,
                max: self.config.max_len,
            });
        }
        Ok(n)
    }
}

fn layer_norm<'g>(x: Var<'g>, gain: Var<'g>, bias: Var<'g>) -> Result<Var<'g>> {
    let d = x.value().dims2()?.1;
    let inv_d = 1.0 / d as f64;
    let mean = x.sum_rows()?.scale(inv_d)?;
    let xc = x.sub(mean.broadcast_col(d)?)?;
    let var = xc.mul(xc)?.sum_rows()?.scale(inv_d)?;
    let inv = var.add_scalar(LN_EPS)?.powf(-0.5)?;
    xc.mul(inv.broadcast_col(d)?)?.mul_row(gain)?.add_row(bias)
}

impl<'m, 'g> BoundModel<'m, 'g> {
    pub fn model(&self) -> &'m Model {
        self.model
    }

    /// Every parameter leaf in canonical order.
    pub fn leaves(&self) -> &[Var<'g>] {
        &self.leaves
    }

    /// Residual stream entering layer 0: token embeddings plus positions.
    pub fn input(&self, x: Var<'g>) -> Result<Var<'g>> {
        let n = x.value().dims2()?.0;
        x.add(self.pos_emb.slice_rows(0, n)?)
    }

    /// Token embeddings `x` through every layer, giving the final residual.
    pub fn residual(
        &self,
        x: Var<'g>,
        opts: &ForwardOptions,
        trace: Option<&mut Vec<Vec<HeadTrace>>>,
    ) -> Result<Var<'g>> {
        let h = self.input(x)?;
        self.run_layers(h, 0..self.layers.len(), opts, trace)
    }

    /// Residual stream entering `layers.start` through `layers`.
    pub fn run_layers(
        &self,
        mut h: Var<'g>,
        layers: std::ops::Range<usize>,
        opts: &ForwardOptions,
        mut trace: Option<&mut Vec<Vec<HeadTrace>>>,
    ) -> Result<Var<'g>> {
        if layers.end > self.layers.len() {
            return Err(HetaError::Precondition(format!("layer range {:?} outside 0..{}", layers, self.layers.len())));
        }
        let n = h.value().dims2()?.0;
        let mask = opts.attention_mask(n)?;
        for l in layers {
            let heads = trace.as_mut().map(|t| {
                t.push(Vec::new());
                t.last_mut().expect("just pushed")
            });
            let next = self.block(l, h, &mask, heads)?;
            h = if opts.frozen_layers.contains(&l) {
                h.add(next.sub(h)?.detach()?)?
            } else {
                next
            };
        }
        Ok(h)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    fn block(&self, l: usize, h: Var<'g>, mask: &[bool], mut trace: Option<&mut Vec<HeadTrace>>) -> Result<Var<'g>> {
        let cfg = &self.model.config;
        let p = &self.layers[l];
        let dh = cfg.d_head();
        let scale = 1.0 / (dh as f64).sqrt();
        let a = layer_norm(h, p.ln1_g, p.ln1_b)?;
        let q = a.matmul(p.w_q)?;
        let k = a.matmul(p.w_k)?;
        let v = a.matmul(p.w_v)?;
        let mut attn_out: Option<Var<'g>> = None;
        for head in 0..cfg.heads {
            let s = head * dh;
            let (qh, kh, vh) = (q.slice_cols(s, dh)?, k.slice_cols(s, dh)?, v.slice_cols(s, dh)?);
            let probs = qh.matmul(kh.t()?)?.scale(scale)?.masked_softmax(mask)?;
            let w_o = p.w_o.slice_rows(s, dh)?;
            let out = probs.matmul(vh)?.matmul(w_o)?;
            if let Some(t) = trace.as_mut() {
                t.push(HeadTrace {
                    attn: probs.value(),
                    value: vh.value(),
                    w_o: w_o.value(),
                });
            }
            attn_out = Some(match attn_out {
                Some(acc) => acc.add(out)?,
                None => out,
            });
        }
        let h = h.add(attn_out.expect("at least one head"))?;
        let m = layer_norm(h, p.ln2_g, p.ln2_b)?;
        let ff = m.matmul(p.w_1)?.add_row(p.b_1)?.gelu()?.matmul(p.w_2)?.add_row(p.b_2)?;
        h.add(ff)
    }

    /// Logits at every position, `[n, vocab]`.
    pub fn logits(&self, h: Var<'g>) -> Result<Var<'g>> {
        layer_norm(h, self.lnf_g, self.lnf_b)?.matmul(self.w_u)
    }

    /// Logits at one position, `[1, vocab]`.
    pub fn read_logits(&self, h: Var<'g>, pos: usize) -> Result<Var<'g>> {
        self.logits(h.slice_rows(pos, 1)?)
    }

    /// Token embedding lookup through the trainable table.
    pub fn lookup(&self, ids: &[usize]) -> Result<Var<'g>> {
        self.model.check_ids(ids)?;
        match self.tok_emb {
            Some(t) => t.gather_rows(ids),
            None => self.leaves[0].graph().constant(self.model.embed(ids)?),
        }
    }
}
