//! Differentiable building blocks: multi-head attention with additive
//! masks, feed-forward, layer norm, embeddings, cross-entropy, and the
//! gated labeled GCN layer. All of them carry a finite-difference
//! gradient contract (see `gradcheck`).

use ndarray::Array2;
use rand::Rng;
use thiserror::Error;

use crate::depgraph::DepGraph;
use crate::masks::MaskMatrix;
use crate::scalar::Scalar;
use crate::tensor::{GcnEdge, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NnError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("attention row {row} is fully masked")]
    FullyMaskedRow { row: usize },
    #[error("edge label {label} outside inventory of {n_labels}")]
    LabelOutOfRange { label: usize, n_labels: usize },
    #[error("{op}: expected {expected} heads-compatible masks, got {got}")]
    MaskCount {
        op: &'static str,
        expected: usize,
        got: usize,
    },
}

/// Per-head masking for one attention call.
pub enum HeadMasks<'a> {
    /// No mask (encoder-style full visibility).
    None,
    /// One mask shared by all heads.
    Shared(&'a MaskMatrix),
    /// One mask per head.
    PerHead(Vec<&'a MaskMatrix>),
}

/// Projection weights of one multi-head attention block (no biases).
#[derive(Debug, Clone)]
pub struct AttentionWeights<S: Scalar> {
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub wv: Tensor<S>,
    pub wo: Tensor<S>,
}

/// Scaled dot-product multi-head attention.
///
/// `q`, `k`, `v` are (seq x d_model) inputs; each mask must be at least
/// (seq_q x seq_k). In strict mode a fully masked row is an error;
/// decode-time masks always keep self-attention open, so the error marks
/// a mask construction bug.
pub fn attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    weights: &AttentionWeights<S>,
    masks: &HeadMasks<'_>,
    heads: usize,
    strict: bool,
) -> Result<Tensor<S>, NnError> {
    let (nq, d) = q.shape();
    let (nk, dk) = k.shape();
    if dk != d || v.shape() != (nk, d) {
        return Err(NnError::ShapeMismatch {
            op: "attention",
            detail: format!("q {:?} k {:?} v {:?}", q.shape(), k.shape(), v.shape()),
        });
    }
    if d % heads != 0 {
        return Err(NnError::ShapeMismatch {
            op: "attention",
            detail: format!("d_model {d} not divisible by {heads} heads"),
        });
    }
    let check_mask = |m: &MaskMatrix| -> Result<(), NnError> {
        if m.dim() < nq.max(nk) {
            return Err(NnError::ShapeMismatch {
                op: "attention",
                detail: format!("mask dim {} < seq {}", m.dim(), nq.max(nk)),
            });
        }
        if strict {
            for i in 0..nq {
                if (0..nk).all(|j| !m.is_visible(i, j)) {
                    return Err(NnError::FullyMaskedRow { row: i });
                }
            }
        }
        Ok(())
    };
    let additive_of = |m: &MaskMatrix| -> Array2<S> {
        let add = m.to_additive::<S>();
        add.slice(ndarray::s![..nq, ..nk]).to_owned()
    };
    let per_head: Vec<Option<Array2<S>>> = match masks {
        HeadMasks::None => vec![None; heads],
        HeadMasks::Shared(m) => {
            check_mask(m)?;
            let a = additive_of(m);
            vec![Some(a); heads]
        }
        HeadMasks::PerHead(ms) => {
            if ms.len() != heads {
                return Err(NnError::MaskCount {
                    op: "attention",
                    expected: heads,
                    got: ms.len(),
                });
            }
            let mut out = Vec::with_capacity(heads);
            for m in ms {
                check_mask(m)?;
                out.push(Some(additive_of(m)));
            }
            out
        }
    };

    let dh = d / heads;
    let scale = S::from_f64_c(1.0 / (dh as f64).sqrt());
    let qp = q.matmul(&weights.wq);
    let kp = k.matmul(&weights.wk);
    let vp = v.matmul(&weights.wv);
    let mut ctxs = Vec::with_capacity(heads);
    for (h, mask) in per_head.iter().enumerate() {
        let qh = qp.narrow_cols(h * dh, dh);
        let kh = kp.narrow_cols(h * dh, dh);
        let vh = vp.narrow_cols(h * dh, dh);
        let scores = qh.matmul_transb(&kh).scale(scale);
        let probs = scores.masked_softmax(mask.as_ref());
        ctxs.push(probs.matmul(&vh));
    }
    Ok(Tensor::concat_cols(&ctxs).matmul(&weights.wo))
}

/// Position-wise feed-forward: relu(x W1 + b1) W2 + b2.
pub fn ffn<S: Scalar>(
    x: &Tensor<S>,
    w1: &Tensor<S>,
    b1: &Tensor<S>,
    w2: &Tensor<S>,
    b2: &Tensor<S>,
) -> Result<Tensor<S>, NnError> {
    let (_, d) = x.shape();
    let (dw1, hidden) = w1.shape();
    let (dw2, dout) = w2.shape();
    if dw1 != d || dw2 != hidden || b1.shape() != (1, hidden) || b2.shape() != (1, dout) {
        return Err(NnError::ShapeMismatch {
            op: "ffn",
            detail: format!(
                "x {:?} w1 {:?} b1 {:?} w2 {:?} b2 {:?}",
                x.shape(),
                w1.shape(),
                b1.shape(),
                w2.shape(),
                b2.shape()
            ),
        });
    }
    Ok(x.matmul(w1).add_row(b1).relu().matmul(w2).add_row(b2))
}

/// Row-wise layer norm with affine parameters.
pub fn layer_norm<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
) -> Result<Tensor<S>, NnError> {
    let d = x.shape().1;
    if gamma.shape() != (1, d) || beta.shape() != (1, d) {
        return Err(NnError::ShapeMismatch {
            op: "layer_norm",
            detail: format!(
                "x {:?} gamma {:?} beta {:?}",
                x.shape(),
                gamma.shape(),
                beta.shape()
            ),
        });
    }
    Ok(x.layer_norm(gamma, beta, S::from_f64_c(LAYER_NORM_EPS)))
}

/// Embedding lookup.
pub fn embed<S: Scalar>(table: &Tensor<S>, ids: &[usize]) -> Result<Tensor<S>, NnError> {
    let rows = table.shape().0;
    if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
        return Err(NnError::ShapeMismatch {
            op: "embed",
            detail: format!("id {bad} outside table of {rows} rows"),
        });
    }
    Ok(Tensor::embedding(table, ids))
}

/// Summed cross-entropy of logits rows against target ids (1x1 output).
pub fn xent_loss<S: Scalar>(logits: &Tensor<S>, targets: &[usize]) -> Result<Tensor<S>, NnError> {
    let (n, v) = logits.shape();
    if targets.len() != n {
        return Err(NnError::ShapeMismatch {
            op: "xent_loss",
            detail: format!("{n} logit rows, {} targets", targets.len()),
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
        return Err(NnError::ShapeMismatch {
            op: "xent_loss",
            detail: format!("target {bad} outside vocabulary of {v}"),
        });
    }
    Ok(Tensor::cross_entropy(logits, targets))
}

/// Parameters of one GCN layer over hidden size `d` and `n_labels` labels:
/// per-direction d x d weights, per-label bias vectors, per-direction gate
/// weight vectors and per-label scalar gate biases.
#[derive(Debug, Clone)]
pub struct GcnLayerParams<S: Scalar> {
    pub w_dir: [Tensor<S>; 3],
    pub b_lab: Tensor<S>,      // (n_labels, d)
    pub w_hat_dir: [Tensor<S>; 3], // (d, 1) each
    pub b_hat_lab: Tensor<S>,  // (n_labels, 1)
}

impl<S: Scalar> GcnLayerParams<S> {
    /// 3d^2 + |labels| d + 3d + |labels|
    pub fn n_params(d: usize, n_labels: usize) -> usize {
        3 * d * d + n_labels * d + 3 * d + n_labels
    }
}

/// Builds the GCN message edges for a graph whose token `t` sits at row
/// `t + offset` of the hidden matrix: a self loop on every row, plus a
/// Right edge (from the parent) and a Left edge (toward the parent) for
/// every token-level dependency edge.
pub fn gcn_edges(graph: &DepGraph, n_rows: usize, offset: usize) -> Vec<GcnEdge> {
    let mut edges = Vec::with_capacity(n_rows + 2 * graph.token_edges.len());
    for v in 0..n_rows {
        edges.push(GcnEdge {
            src: v,
            dst: v,
            dir: 0,
            label: None,
        });
    }
    for e in &graph.token_edges {
        let (h, d) = (e.head + offset, e.dependent + offset);
        edges.push(GcnEdge {
            src: h,
            dst: d,
            dir: 2, // from the parent
            label: Some(e.label),
        });
        edges.push(GcnEdge {
            src: d,
            dst: h,
            dir: 1, // toward the parent
            label: Some(e.label),
        });
    }
    edges
}

/// One gated labeled GCN layer:
/// out_v = relu( sum_{u in N(v)} g_{u,v} (W_dir h_u + b_lab) ) with
/// g_{u,v} = sigmoid(h_u . w_hat_dir + b_hat_lab). `use_gates = false`
/// pins g to 1 and detaches the gate parameters; `use_labels = false`
/// zeroes both label biases.
pub fn gcn_layer<S: Scalar>(
    h: &Tensor<S>,
    edges: &[GcnEdge],
    params: &GcnLayerParams<S>,
    use_gates: bool,
    use_labels: bool,
) -> Result<Tensor<S>, NnError> {
    let n = h.shape().0;
    let n_labels = params.b_lab.shape().0;
    for e in edges {
        if e.src >= n || e.dst >= n {
            return Err(NnError::ShapeMismatch {
                op: "gcn_layer",
                detail: format!("edge ({}, {}) outside {n} rows", e.src, e.dst),
            });
        }
        if let Some(l) = e.label {
            if l >= n_labels {
                return Err(NnError::LabelOutOfRange { label: l, n_labels });
            }
        }
    }
    Ok(Tensor::gcn(
        h,
        [&params.w_dir[0], &params.w_dir[1], &params.w_dir[2]],
        &params.b_lab,
        [
            &params.w_hat_dir[0],
            &params.w_hat_dir[1],
            &params.w_hat_dir[2],
        ],
        &params.b_hat_lab,
        edges,
        use_gates,
        use_labels,
    ))
}

/// Sinusoidal positional encodings for `n` positions.
pub fn positional_encoding<S: Scalar>(n: usize, d: usize) -> Array2<S> {
    let mut pe = Array2::zeros((n, d));
    for pos in 0..n {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[[pos, 2 * i]] = S::from_f64_c(angle.sin());
            pe[[pos, 2 * i + 1]] = S::from_f64_c(angle.cos());
        }
    }
    pe
}

/// Glorot-uniform initialization.
pub fn glorot<S: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<S> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| S::from_f64_c(rng.gen_range(-a..a)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{bidirectional_mask, vanilla_mask};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn eye(d: usize) -> Array2<f64> {
        Array2::from_shape_fn((d, d), |(i, j)| if i == j { 1.0 } else { 0.0 })
    }

    fn identity_weights(d: usize) -> AttentionWeights<f64> {
        AttentionWeights {
            wq: Tensor::constant(eye(d)),
            wk: Tensor::constant(eye(d)),
            wv: Tensor::constant(eye(d)),
            wo: Tensor::constant(eye(d)),
        }
    }

    #[test]
    fn delta_attention_returns_value_rows() {
        // only self visible -> output row i equals value row i
        let d = 4;
        let x = Tensor::constant(array![
            [1.0, 2.0, 3.0, 4.0],
            [5.0, 6.0, 7.0, 8.0],
            [-1.0, 0.0, 1.0, 2.0]
        ]);
        let graph = DepGraph::default();
        let m = crate::masks::parent_mask(&graph, 3, 0); // identity pattern
        let out = attention(
            &x,
            &x,
            &x,
            &identity_weights(d),
            &HeadMasks::Shared(&m),
            2,
            true,
        )
        .unwrap();
        let o = out.to_owned_data();
        let xv = x.to_owned_data();
        for i in 0..3 {
            for j in 0..d {
                assert!((o[[i, j]] - xv[[i, j]]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_mask_identical_keys_average_values() {
        let d = 2;
        let x = Tensor::constant(array![[1.0, 1.0], [1.0, 1.0]]);
        let v = Tensor::constant(array![[2.0, 0.0], [0.0, 4.0]]);
        let m = bidirectional_mask(2, 2);
        let out = attention(
            &x,
            &x,
            &v,
            &identity_weights(d),
            &HeadMasks::Shared(&m),
            1,
            true,
        )
        .unwrap();
        let o = out.to_owned_data();
        for i in 0..2 {
            assert!((o[[i, 0]] - 1.0).abs() < 1e-12);
            assert!((o[[i, 1]] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one_under_every_mask() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let d = 8;
        let n = 5;
        let x = Tensor::constant(glorot::<f64, _>(&mut rng, n, d));
        for m in [vanilla_mask(n), bidirectional_mask(n, 3), bidirectional_mask(n, n)] {
            // probe softmax rows through a value matrix of ones: each
            // output row of probs . ones == 1
            let w = AttentionWeights {
                wq: Tensor::constant(glorot::<f64, _>(&mut rng, d, d)),
                wk: Tensor::constant(glorot::<f64, _>(&mut rng, d, d)),
                wv: Tensor::constant(eye(d)),
                wo: Tensor::constant(eye(d)),
            };
            let ones = Tensor::constant(Array2::ones((n, d)));
            let out = attention(&x, &x, &ones, &w, &HeadMasks::Shared(&m), 2, true).unwrap();
            for v in out.to_owned_data().iter() {
                assert!((v - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn strict_mode_rejects_fully_masked_rows() {
        let d = 4;
        let x = Tensor::constant(Array2::zeros((3, d)));
        let m = bidirectional_mask(3, 0); // nothing visible
        let err = attention(
            &x,
            &x,
            &x,
            &identity_weights(d),
            &HeadMasks::Shared(&m),
            1,
            true,
        )
        .unwrap_err();
        assert_eq!(err, NnError::FullyMaskedRow { row: 0 });
    }

    #[test]
    fn gcn_all_zero_params_give_zero_output() {
        let d = 4;
        let h = Tensor::constant(array![[1.0, -2.0, 0.5, 3.0], [0.0, 1.0, 1.0, -1.0]]);
        let zero = |r, c| Tensor::constant(Array2::<f64>::zeros((r, c)));
        let params = GcnLayerParams {
            w_dir: [zero(d, d), zero(d, d), zero(d, d)],
            b_lab: zero(5, d),
            w_hat_dir: [zero(d, 1), zero(d, 1), zero(d, 1)],
            b_hat_lab: zero(5, 1),
        };
        let edges = vec![
            GcnEdge { src: 0, dst: 0, dir: 0, label: None },
            GcnEdge { src: 1, dst: 1, dir: 0, label: None },
            GcnEdge { src: 0, dst: 1, dir: 2, label: Some(3) },
        ];
        let out = gcn_layer(&h, &edges, &params, true, true).unwrap();
        assert!(out.to_owned_data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gcn_isolated_token_identity_case() {
        // self edge only, W_self = I, biases zero, gates off -> relu(h)
        let d = 3;
        let h = Tensor::constant(array![[1.0, -2.0, 0.5]]);
        let zero = |r, c| Tensor::constant(Array2::<f64>::zeros((r, c)));
        let params = GcnLayerParams {
            w_dir: [Tensor::constant(eye(d)), zero(d, d), zero(d, d)],
            b_lab: zero(2, d),
            w_hat_dir: [zero(d, 1), zero(d, 1), zero(d, 1)],
            b_hat_lab: zero(2, 1),
        };
        let edges = vec![GcnEdge { src: 0, dst: 0, dir: 0, label: None }];
        let out = gcn_layer(&h, &edges, &params, false, false).unwrap();
        assert_eq!(out.to_owned_data(), array![[1.0, 0.0, 0.5]]);
    }

    #[test]
    fn gcn_locality_nonneighbor_perturbation_is_invisible() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let d = 6;
        let n = 5;
        let mk = |r, c| Tensor::constant(glorot::<f64, _>(&mut rng, r, c));
        let params = GcnLayerParams {
            w_dir: [mk(d, d), mk(d, d), mk(d, d)],
            b_lab: mk(4, d),
            w_hat_dir: [mk(d, 1), mk(d, 1), mk(d, 1)],
            b_hat_lab: mk(4, 1),
        };
        // node 0's neighborhood: itself and node 1; node 4 is far away
        let mut edges: Vec<GcnEdge> = (0..n)
            .map(|v| GcnEdge { src: v, dst: v, dir: 0, label: None })
            .collect();
        edges.push(GcnEdge { src: 1, dst: 0, dir: 2, label: Some(1) });
        let h0 = glorot::<f64, _>(&mut rng, n, d);
        let mut h1 = h0.clone();
        h1[[4, 2]] += 10.0;
        let out0 = gcn_layer(&Tensor::constant(h0), &edges, &params, true, true)
            .unwrap()
            .to_owned_data();
        let out1 = gcn_layer(&Tensor::constant(h1), &edges, &params, true, true)
            .unwrap()
            .to_owned_data();
        for j in 0..d {
            assert_eq!(out0[[0, j]], out1[[0, j]], "non-neighbor leaked into node 0");
        }
        assert_ne!(out0.row(4), out1.row(4));
    }

    #[test]
    fn gates_off_detaches_gate_parameters() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let d = 4;
        let mk = |r, c| Tensor::constant(glorot::<f64, _>(&mut rng, r, c));
        let h = Tensor::constant(glorot::<f64, _>(&mut rng, 3, d));
        let edges = vec![
            GcnEdge { src: 0, dst: 0, dir: 0, label: None },
            GcnEdge { src: 1, dst: 1, dir: 0, label: None },
            GcnEdge { src: 2, dst: 2, dir: 0, label: None },
            GcnEdge { src: 0, dst: 2, dir: 2, label: Some(0) },
        ];
        let w_dir = [mk(d, d), mk(d, d), mk(d, d)];
        let b_lab = mk(2, d);
        let gate_w = [mk(d, 1), mk(d, 1), mk(d, 1)];
        let gate_b = mk(2, 1);
        let doubled = GcnLayerParams {
            w_dir: w_dir.clone(),
            b_lab: b_lab.clone(),
            w_hat_dir: [
                Tensor::constant(gate_w[0].to_owned_data() * 2.0),
                Tensor::constant(gate_w[1].to_owned_data() * 2.0),
                Tensor::constant(gate_w[2].to_owned_data() * 2.0),
            ],
            b_hat_lab: Tensor::constant(gate_b.to_owned_data() * 2.0),
        };
        let base = GcnLayerParams {
            w_dir,
            b_lab,
            w_hat_dir: gate_w,
            b_hat_lab: gate_b,
        };
        let a = gcn_layer(&h, &edges, &base, false, true).unwrap().to_owned_data();
        let b = gcn_layer(&h, &edges, &doubled, false, true)
            .unwrap()
            .to_owned_data();
        assert_eq!(a, b);
    }

    #[test]
    fn gcn_label_out_of_range() {
        let zero = |r, c| Tensor::constant(Array2::<f64>::zeros((r, c)));
        let params = GcnLayerParams {
            w_dir: [zero(2, 2), zero(2, 2), zero(2, 2)],
            b_lab: zero(3, 2),
            w_hat_dir: [zero(2, 1), zero(2, 1), zero(2, 1)],
            b_hat_lab: zero(3, 1),
        };
        let h = Tensor::constant(Array2::<f64>::zeros((1, 2)));
        let edges = vec![GcnEdge { src: 0, dst: 0, dir: 2, label: Some(7) }];
        assert_eq!(
            gcn_layer(&h, &edges, &params, true, true).unwrap_err(),
            NnError::LabelOutOfRange { label: 7, n_labels: 3 }
        );
    }

    #[test]
    fn xent_one_hot_match_is_tiny() {
        let mut row = vec![0.0f64; 10];
        row[4] = 30.0;
        let logits = Tensor::constant(Array2::from_shape_vec((1, 10), row).unwrap());
        let loss = xent_loss(&logits, &[4]).unwrap();
        assert!(loss.item() < 1e-6);
    }

    #[test]
    fn param_count_formula() {
        assert_eq!(GcnLayerParams::<f32>::n_params(64, 45), 3 * 64 * 64 + 45 * 64 + 3 * 64 + 45);
    }
}
