//! Central finite-difference verification of every backward pass.
//!
//! Each suite builds a scalar loss from an op on random f64 inputs,
//! backpropagates, and compares against central differences with
//! step `eps`. The numeric side only ever calls the forward pass.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::masks::{bidirectional_mask, vanilla_mask};
use crate::nn::{self, AttentionWeights, GcnLayerParams, HeadMasks};
use crate::tensor::{GcnEdge, Tensor};

pub const DEFAULT_EPS: f64 = 1e-3;
pub const DEFAULT_TOL: f64 = 1e-2;

/// Result of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub n_components: usize,
}

impl CheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error with an absolute floor so near-zero components do not
/// blow up the ratio (central differences carry O(eps^2) noise).
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff < 1e-8 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Compares the backward gradients of `inputs` against central finite
/// differences of `forward`. The forward closure must be a pure function
/// of the input data.
pub fn check_gradients<F>(
    name: &str,
    inputs: &[(&str, Tensor<f64>)],
    forward: F,
    eps: f64,
) -> CheckReport
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    let handles: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let loss = forward(&handles);
    assert_eq!(loss.shape(), (1, 1), "gradcheck loss must be scalar");
    loss.backward();

    let mut max_rel = 0.0f64;
    let mut n_components = 0;
    for (iname, tensor) in inputs {
        let analytic = tensor
            .grad()
            .unwrap_or_else(|| panic!("no gradient for input {iname}"));
        let base = tensor.to_owned_data();
        let (rows, cols) = base.dim();
        for r in 0..rows {
            for c in 0..cols {
                let run = |v: f64| -> f64 {
                    let mut probes: Vec<Tensor<f64>> = Vec::with_capacity(inputs.len());
                    for (jname, other) in inputs {
                        if jname == iname {
                            let mut d = base.clone();
                            d[[r, c]] = v;
                            probes.push(Tensor::leaf(d, false));
                        } else {
                            probes.push(Tensor::leaf(other.to_owned_data(), false));
                        }
                    }
                    forward(&probes).item()
                };
                let x = base[[r, c]];
                let numeric = (run(x + eps) - run(x - eps)) / (2.0 * eps);
                let e = rel_err(analytic[[r, c]], numeric);
                max_rel = max_rel.max(e);
                n_components += 1;
            }
        }
    }
    CheckReport {
        name: name.to_owned(),
        max_rel_err: max_rel,
        n_components,
    }
}

fn rand_array(rng: &mut ChaCha20Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..scale))
}

/// Readout weights turning a matrix output into a scalar loss.
fn readout(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Array2<f64> {
    rand_array(rng, rows, cols, 1.0)
}

pub fn check_attention(seed: u64, eps: f64) -> CheckReport {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (n, d, heads) = (4, 8, 2);
    let q = Tensor::leaf(rand_array(&mut rng, n, d, 1.0), true);
    let k = Tensor::leaf(rand_array(&mut rng, n, d, 1.0), true);
    let v = Tensor::leaf(rand_array(&mut rng, n, d, 1.0), true);
    let wq = Tensor::leaf(rand_array(&mut rng, d, d, 0.5), true);
    let wk = Tensor::leaf(rand_array(&mut rng, d, d, 0.5), true);
    let wv = Tensor::leaf(rand_array(&mut rng, d, d, 0.5), true);
    let wo = Tensor::leaf(rand_array(&mut rng, d, d, 0.5), true);
    let mask = if seed % 2 == 0 {
        vanilla_mask(n)
    } else {
        bidirectional_mask(n, n.min(3))
    };
    let read = readout(&mut rng, n, d);
    let inputs = [
        ("q", q),
        ("k", k),
        ("v", v),
        ("wq", wq),
        ("wk", wk),
        ("wv", wv),
        ("wo", wo),
    ];
    check_gradients(
        "attention",
        &inputs,
        move |t| {
            let w = AttentionWeights {
                wq: t[3].clone(),
                wk: t[4].clone(),
                wv: t[5].clone(),
                wo: t[6].clone(),
            };
            nn::attention(&t[0], &t[1], &t[2], &w, &HeadMasks::Shared(&mask), heads, true)
                .unwrap()
                .mul_const(&read)
                .sum_all()
        },
        eps,
    )
}

pub fn check_ffn(seed: u64, eps: f64) -> CheckReport {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x55);
    let (n, d, hidden) = (3, 6, 10);
    // keep pre-activations away from the relu kink so central differences
    // stay meaningful
    let (x, w1, b1) = loop {
        let x = rand_array(&mut rng, n, d, 1.0);
        let w1 = rand_array(&mut rng, d, hidden, 0.7);
        let b1 = rand_array(&mut rng, 1, hidden, 0.5);
        let pre = x.dot(&w1) + &b1.row(0);
        if pre.iter().all(|v| v.abs() > 5.0 * eps) {
            break (x, w1, b1);
        }
    };
    let w2 = rand_array(&mut rng, hidden, d, 0.7);
    let b2 = rand_array(&mut rng, 1, d, 0.5);
    let read = readout(&mut rng, n, d);
    let inputs = [
        ("x", Tensor::leaf(x, true)),
        ("w1", Tensor::leaf(w1, true)),
        ("b1", Tensor::leaf(b1, true)),
        ("w2", Tensor::leaf(w2, true)),
        ("b2", Tensor::leaf(b2, true)),
    ];
    check_gradients(
        "ffn",
        &inputs,
        move |t| {
            nn::ffn(&t[0], &t[1], &t[2], &t[3], &t[4])
                .unwrap()
                .mul_const(&read)
                .sum_all()
        },
        eps,
    )
}

pub fn check_layer_norm(seed: u64, eps: f64) -> CheckReport {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x11);
    let (n, d) = (4, 6);
    let x = Tensor::leaf(rand_array(&mut rng, n, d, 2.0), true);
    let gamma = Tensor::leaf(rand_array(&mut rng, 1, d, 1.0), true);
    let beta = Tensor::leaf(rand_array(&mut rng, 1, d, 1.0), true);
    let read = readout(&mut rng, n, d);
    let inputs = [("x", x), ("gamma", gamma), ("beta", beta)];
    check_gradients(
        "layer_norm",
        &inputs,
        move |t| {
            nn::layer_norm(&t[0], &t[1], &t[2])
                .unwrap()
                .mul_const(&read)
                .sum_all()
        },
        eps,
    )
}

pub fn check_embedding(seed: u64, eps: f64) -> CheckReport {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x22);
    let (vocab, d) = (7, 5);
    let table = Tensor::leaf(rand_array(&mut rng, vocab, d, 1.0), true);
    let ids: Vec<usize> = (0..6).map(|_| rng.gen_range(0..vocab)).collect();
    let read = readout(&mut rng, ids.len(), d);
    let inputs = [("table", table)];
    check_gradients(
        "embedding",
        &inputs,
        move |t| {
            nn::embed(&t[0], &ids)
                .unwrap()
                .mul_const(&read)
                .sum_all()
        },
        eps,
    )
}

pub fn check_xent(seed: u64, eps: f64) -> CheckReport {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x33);
    let (n, v) = (5, 9);
    let logits = Tensor::leaf(rand_array(&mut rng, n, v, 2.0), true);
    let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..v)).collect();
    let inputs = [("logits", logits)];
    check_gradients(
        "xent_loss",
        &inputs,
        move |t| nn::xent_loss(&t[0], &targets).unwrap(),
        eps,
    )
}

/// Gradient check for the GCN layer on a random 5-token, 4-edge graph,
/// in one of the gate/label ablation settings.
pub fn check_gcn(seed: u64, eps: f64, use_gates: bool, use_labels: bool) -> CheckReport {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x44);
    let (n, d, n_labels) = (5, 6, 4);
    let mut edges: Vec<GcnEdge> = (0..n)
        .map(|v| GcnEdge { src: v, dst: v, dir: 0, label: None })
        .collect();
    for _ in 0..4 {
        let h = rng.gen_range(0..n);
        let mut dep = rng.gen_range(0..n);
        while dep == h {
            dep = rng.gen_range(0..n);
        }
        let l = rng.gen_range(0..n_labels);
        edges.push(GcnEdge { src: h, dst: dep, dir: 2, label: Some(l) });
        edges.push(GcnEdge { src: dep, dst: h, dir: 1, label: Some(l) });
    }
    // regenerate until pre-activations clear the relu kink
    let (h, ws, blab, whats, bhat) = loop {
        let h = rand_array(&mut rng, n, d, 1.0);
        let ws: Vec<Array2<f64>> = (0..3).map(|_| rand_array(&mut rng, d, d, 0.6)).collect();
        let blab = rand_array(&mut rng, n_labels, d, 0.5);
        let whats: Vec<Array2<f64>> = (0..3).map(|_| rand_array(&mut rng, d, 1, 0.6)).collect();
        let bhat = rand_array(&mut rng, n_labels, 1, 0.5);
        let pre = nn_pre_act(&h, &ws, &blab, &whats, &bhat, &edges, use_gates, use_labels);
        if pre.iter().all(|&z| z.abs() > 5.0 * eps) {
            break (h, ws, blab, whats, bhat);
        }
    };
    let read = readout(&mut rng, n, d);
    let name = format!("gcn_layer(gates={use_gates},labels={use_labels})");
    let mut inputs: Vec<(&str, Tensor<f64>)> = vec![
        ("h", Tensor::leaf(h, true)),
        ("w_self", Tensor::leaf(ws[0].clone(), true)),
        ("w_left", Tensor::leaf(ws[1].clone(), true)),
        ("w_right", Tensor::leaf(ws[2].clone(), true)),
    ];
    if use_labels {
        inputs.push(("b_lab", Tensor::leaf(blab.clone(), true)));
    }
    if use_gates {
        inputs.push(("w_hat_self", Tensor::leaf(whats[0].clone(), true)));
        inputs.push(("w_hat_left", Tensor::leaf(whats[1].clone(), true)));
        inputs.push(("w_hat_right", Tensor::leaf(whats[2].clone(), true)));
        if use_labels {
            inputs.push(("b_hat_lab", Tensor::leaf(bhat.clone(), true)));
        }
    }
    let edges2 = edges.clone();
    let blab2 = blab;
    let whats2 = whats;
    let bhat2 = bhat;
    check_gradients(
        &name,
        &inputs,
        move |t| {
            let mut i = 4;
            let b_lab = if use_labels {
                i += 1;
                t[i - 1].clone()
            } else {
                Tensor::constant(blab2.clone())
            };
            let (w_hat, b_hat) = if use_gates {
                let w = [t[i].clone(), t[i + 1].clone(), t[i + 2].clone()];
                i += 3;
                let b = if use_labels {
                    t[i].clone()
                } else {
                    Tensor::constant(bhat2.clone())
                };
                (w, b)
            } else {
                (
                    [
                        Tensor::constant(whats2[0].clone()),
                        Tensor::constant(whats2[1].clone()),
                        Tensor::constant(whats2[2].clone()),
                    ],
                    Tensor::constant(bhat2.clone()),
                )
            };
            let params = GcnLayerParams {
                w_dir: [t[1].clone(), t[2].clone(), t[3].clone()],
                b_lab,
                w_hat_dir: w_hat,
                b_hat_lab: b_hat,
            };
            nn::gcn_layer(&t[0], &edges2, &params, use_gates, use_labels)
                .unwrap()
                .mul_const(&read)
                .sum_all()
        },
        eps,
    )
}

/// Plain-ndarray recomputation of the GCN pre-activation, used to keep
/// random instances away from the relu kink.
#[allow(clippy::too_many_arguments)]
fn nn_pre_act(
    h: &Array2<f64>,
    ws: &[Array2<f64>],
    blab: &Array2<f64>,
    whats: &[Array2<f64>],
    bhat: &Array2<f64>,
    edges: &[GcnEdge],
    use_gates: bool,
    use_labels: bool,
) -> Array2<f64> {
    let (n, d) = h.dim();
    let mut z = Array2::zeros((n, d));
    for e in edges {
        let mut f = h.row(e.src).dot(&ws[e.dir]);
        if use_labels {
            if let Some(l) = e.label {
                f += &blab.row(l);
            }
        }
        let g = if use_gates {
            let mut s = 0.0;
            for j in 0..d {
                s += h[[e.src, j]] * whats[e.dir][[j, 0]];
            }
            if use_labels {
                if let Some(l) = e.label {
                    s += bhat[[l, 0]];
                }
            }
            1.0 / (1.0 + (-s).exp())
        } else {
            1.0
        };
        for j in 0..d {
            z[[e.dst, j]] += g * f[j];
        }
    }
    z
}

/// Runs every suite `instances` times each and returns the reports.
pub fn run_all(instances: usize, eps: f64) -> Vec<CheckReport> {
    let mut reports = Vec::new();
    for i in 0..instances as u64 {
        reports.push(check_attention(i, eps));
        reports.push(check_ffn(i, eps));
        reports.push(check_layer_norm(i, eps));
        reports.push(check_embedding(i, eps));
        reports.push(check_xent(i, eps));
        for (g, l) in [(true, true), (true, false), (false, true), (false, false)] {
            reports.push(check_gcn(i, eps, g, l));
        }
    }
    reports
}
