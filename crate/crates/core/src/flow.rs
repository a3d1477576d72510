//! Target-conditioned attention rollout and the value-weighted transition gate.
//!
//! For head `h` of layer `l`, the flow from token `i` to the read position `t`
//! is the `(t, i)` entry of `Ā_h^{(top)} ⋯ Ā_h^{(l+1)} A_h^{(l)}`, where
//! `Ā = ½(A + I)` mixes in the residual stream and only layers from the
//! selected subset appear in the product.

use serde::{Deserialize, Serialize};

use crate::error::{HetaError, Result};
use crate::model::ForwardTrace;

/// Per-head flows into the read position and the normalized gate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    /// Sorted layer indices the flows were computed over.
    pub layers: Vec<usize>,
    /// `phi[k][h][i]`: flow from `i` through head `h` of `layers[k]`.
    pub phi: Vec<Vec<Vec<f64>>>,
    /// Normalizer of the gate.
    pub z: f64,
    /// Gate over positions; sums to one unless `degenerate`.
    pub gate: Vec<f64>,
    /// No causal mass reaches the read position; the gate is all zeros.
    pub degenerate: bool,
}

/// Sorted, deduplicated subset; `None` selects every layer.
pub fn resolve_layers(trace: &ForwardTrace, subset: Option<&[usize]>) -> Result<Vec<usize>> {
    let all = trace.layers();
    let mut layers: Vec<usize> = match subset {
        None => (0..all).collect(),
        Some(s) => s.to_vec(),
    };
    layers.sort_unstable();
    layers.dedup();
    if layers.is_empty() {
        return Err(HetaError::Precondition("empty layer subset".into()));
    }
    if let Some(&bad) = layers.iter().find(|&&l| l >= all) {
        return Err(HetaError::Precondition(format!("layer {} outside 0..{}", bad, all)));
    }
    Ok(layers)
}

/// Flows `phi[k][h][i]` into position `t` for each selected layer.
pub fn rollout_to_target(trace: &ForwardTrace, t: usize, subset: Option<&[usize]>) -> Result<Vec<Vec<Vec<f64>>>> {
    let layers = resolve_layers(trace, subset)?;
    let n = trace.len();
    if t >= n {
        return Err(HetaError::Precondition(format!("target position {} outside {} tokens", t, n)));
    }
    let heads = trace.num_heads();
    let mut phi = vec![vec![Vec::new(); heads]; layers.len()];
    for h in 0..heads {
        let mut r = vec![0.0; n];
        r[t] = 1.0;
        for (k, &l) in layers.iter().enumerate().rev() {
            let a = &trace.heads[l][h].attn;
            // flow = r A; then r <- r (A + I) / 2
            let mut flow = vec![0.0; n];
            for (j, &rj) in r.iter().enumerate() {
                if rj != 0.0 {
                    for (f, &aji) in flow.iter_mut().zip(a.row(j)) {
                        *f += rj * aji;
                    }
                }
            }
            for (rj, fj) in r.iter_mut().zip(&flow) {
                *rj = 0.5 * (*rj + fj);
            }
            phi[k][h] = flow;
        }
    }
    Ok(phi)
}

/// `‖V_i W_O‖₁` for every position of one head.
pub fn value_norms(trace: &ForwardTrace, layer: usize, head: usize) -> Result<Vec<f64>> {
    let ht = &trace.heads[layer][head];
    let vw = ht.value.matmul(&ht.w_o)?;
    let n = vw.shape()[0];
    Ok((0..n).map(|i| vw.row(i).iter().map(|x| x.abs()).sum()).collect())
}

/// Value-weighted, simplex-normalized flow into position `t`.
pub fn transition_gate(trace: &ForwardTrace, t: usize, subset: Option<&[usize]>) -> Result<RolloutResult> {
    let all: Vec<usize> = (0..trace.len()).collect();
    transition_gate_over(trace, t, subset, &all)
}

/// As [`transition_gate`], but normalized over `positions` only; every
/// other entry of the gate is zero.
pub fn transition_gate_over(
    trace: &ForwardTrace,
    t: usize,
    subset: Option<&[usize]>,
    positions: &[usize],
) -> Result<RolloutResult> {
    let layers = resolve_layers(trace, subset)?;
    let phi = rollout_to_target(trace, t, Some(&layers))?;
    let n = trace.len();
    if let Some(&bad) = positions.iter().find(|&&i| i >= n) {
        return Err(HetaError::Precondition(format!("position {} outside {} tokens", bad, n)));
    }
    let mut raw = vec![0.0; n];
    for (k, &l) in layers.iter().enumerate() {
        for (h, flow) in phi[k].iter().enumerate() {
            let norms = value_norms(trace, l, h)?;
            for i in 0..n {
                raw[i] += flow[i] * norms[i];
            }
        }
    }
    let z: f64 = positions.iter().map(|&i| raw[i]).sum();
    let degenerate = !(z > 0.0);
    let mut gate = vec![0.0; n];
    if !degenerate {
        for &i in positions {
            gate[i] = raw[i] / z;
        }
    }
    Ok(RolloutResult {
        layers,
        phi,
        z,
        gate,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use proptest::prelude::*;

    use super::*;
    use crate::autodiff::Tensor;
    use crate::model::HeadTrace;

    fn causal_rows(n: usize, raw: &[f64]) -> Tensor {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            let z: f64 = (0..=i).map(|j| raw[i * n + j]).sum();
            for j in 0..=i {
                t.set2(i, j, raw[i * n + j] / z);
            }
        }
        t
    }

    fn trace(layers: Vec<Vec<(Tensor, Vec<f64>)>>) -> ForwardTrace {
        let n = layers[0][0].0.shape()[0];
        let heads = layers
            .into_iter()
            .map(|hs| {
                hs.into_iter()
                    .map(|(a, v)| HeadTrace {
                        attn: Arc::new(a),
                        value: Arc::new(Tensor::new(vec![n, 1], v).unwrap()),
                        w_o: Arc::new(Tensor::new(vec![1, 1], vec![1.0]).unwrap()),
                    })
                    .collect()
            })
            .collect();
        ForwardTrace {
            heads,
            logits: Tensor::zeros(&[n, 2]),
            read_pos: n - 1,
            read_logits: vec![0.0; 2],
            p_orig: vec![0.5; 2],
        }
    }

    /// Sum over explicit node sequences `t = j_0 -> j_1 -> ... -> i`.
    fn brute_force(tr: &ForwardTrace, t: usize, layers: &[usize], k: usize, h: usize, i: usize) -> f64 {
        let n = tr.len();
        let upper: Vec<usize> = layers[k + 1..].iter().rev().copied().collect();
        let mut total = 0.0;
        let hops = upper.len();
        let mut path = vec![0usize; hops];
        let count = n.pow(hops as u32);
        for code in 0..count {
            let mut c = code;
            for p in path.iter_mut() {
                *p = c % n;
                c /= n;
            }
            let mut w = 1.0;
            let mut from = t;
            for (step, &l) in upper.iter().enumerate() {
                let to = path[step];
                let a = tr.heads[l][h].attn.get2(from, to);
                let eye = if from == to { 1.0 } else { 0.0 };
                w *= 0.5 * (a + eye);
                from = to;
            }
            total += w * tr.heads[layers[k]][h].attn.get2(from, i);
        }
        total
    }

    #[test]
    fn single_layer_flow_is_the_attention_row() {
        let a = causal_rows(4, &(0..16).map(|k| 1.0 + k as f64).collect::<Vec<_>>());
        let tr = trace(vec![vec![(a.clone(), vec![1.0; 4])]]);
        let phi = rollout_to_target(&tr, 2, None).unwrap();
        assert_eq!(phi[0][0], a.row(2));
        assert_eq!(phi[0][0][3], 0.0);
    }

    #[test]
    fn uniform_attention_gate_follows_value_norms() {
        let a = causal_rows(4, &[1.0; 16]);
        let tr = trace(vec![vec![(a, vec![1.0, -2.0, 3.0, 4.0])]]);
        let g = transition_gate(&tr, 3, None).unwrap();
        for (got, want) in g.gate.iter().zip([0.1, 0.2, 0.3, 0.4]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_tokens_split_evenly_and_zero_values_vanish() {
        let a = causal_rows(2, &[1.0; 4]);
        let g = transition_gate(&trace(vec![vec![(a.clone(), vec![2.0, 2.0])]]), 1, None).unwrap();
        assert_eq!(g.gate, vec![0.5, 0.5]);
        let g = transition_gate(&trace(vec![vec![(a, vec![0.0, 2.0])]]), 1, None).unwrap();
        assert_eq!(g.gate, vec![0.0, 1.0]);
    }

    #[test]
    fn no_mass_is_flagged() {
        let a = causal_rows(3, &[1.0; 9]);
        let g = transition_gate(&trace(vec![vec![(a, vec![0.0; 3])]]), 2, None).unwrap();
        assert!(g.degenerate);
        assert_eq!(g.gate, vec![0.0; 3]);
    }

    #[test]
    fn rejects_empty_or_out_of_range_subsets() {
        let a = causal_rows(3, &[1.0; 9]);
        let tr = trace(vec![vec![(a, vec![1.0; 3])]]);
        assert!(rollout_to_target(&tr, 2, Some(&[])).is_err());
        assert!(rollout_to_target(&tr, 2, Some(&[1])).is_err());
        assert!(rollout_to_target(&tr, 3, None).is_err());
    }

    fn arb_trace(layers: usize, heads: usize, n: usize) -> impl Strategy<Value = ForwardTrace> {
        let cells = layers * heads;
        (
            prop::collection::vec(prop::collection::vec(0.0f64..1.0, n * n), cells),
            prop::collection::vec(prop::collection::vec(-2.0f64..2.0, n), cells),
        )
            .prop_map(move |(attn, vals)| {
                let mut out = Vec::new();
                for l in 0..layers {
                    let mut hs = Vec::new();
                    for h in 0..heads {
                        let k = l * heads + h;
                        let raw: Vec<f64> = attn[k].iter().map(|v| v + 0.01).collect();
                        hs.push((causal_rows(n, &raw), vals[k].clone()));
                    }
                    out.push(hs);
                }
                trace(out)
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn matches_brute_force_path_enumeration(tr in arb_trace(3, 2, 5), t in 0usize..5) {
            for subset in [vec![0, 1, 2], vec![0, 2], vec![1]] {
                let phi = rollout_to_target(&tr, t, Some(&subset)).unwrap();
                for k in 0..subset.len() {
                    for h in 0..2 {
                        for i in 0..5 {
                            let want = brute_force(&tr, t, &subset, k, h, i);
                            prop_assert!((phi[k][h][i] - want).abs() < 1e-9);
                            if i > t {
                                prop_assert_eq!(phi[k][h][i], 0.0);
                            }
                        }
                    }
                }
            }
        }

        #[test]
        fn gate_is_a_distribution(tr in arb_trace(2, 2, 6), t in 1usize..6) {
            let g = transition_gate(&tr, t, None).unwrap();
            prop_assume!(!g.degenerate);
            prop_assert!((g.gate.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(g.gate.iter().all(|&m| m >= 0.0));
            prop_assert!(g.gate[t + 1..].iter().all(|&m| m == 0.0));
        }

        #[test]
        fn gate_ignores_value_scale(tr in arb_trace(2, 2, 5), c in 0.1f64..10.0) {
            let g = transition_gate(&tr, 4, None).unwrap();
            let mut scaled = tr.clone();
            for layer in &mut scaled.heads {
                for h in layer {
                    h.value = Arc::new(h.value.scale(c));
                }
            }
            let s = transition_gate(&scaled, 4, None).unwrap();
            for (a, b) in g.gate.iter().zip(&s.gate) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn removing_an_edge_cannot_raise_its_gate(tr in arb_trace(1, 1, 5), i in 0usize..5) {
            let before = transition_gate(&tr, 4, None).unwrap();
            let mut cut = tr.clone();
            let mut a = (*cut.heads[0][0].attn).clone();
            a.set2(4, i, 0.0);
            cut.heads[0][0].attn = Arc::new(a);
            let after = transition_gate(&cut, 4, None).unwrap();
            prop_assert!(after.gate[i] <= before.gate[i] + 1e-15);
        }
    }
}
