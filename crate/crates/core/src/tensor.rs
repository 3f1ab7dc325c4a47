//! Minimal reverse-mode autodiff over dense 2-d arrays.
//!
//! Every value is a matrix (row vectors are 1 x d). Graphs are built per
//! forward pass and freed when the last handle drops; they are
//! deliberately not thread-safe - parallelism happens across sentences,
//! each building its own graph.

use std::cell::{Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array2, Axis};

use crate::scalar::Scalar;

static NODE_COUNTER: AtomicUsize = AtomicUsize::new(0);

/// Edge of a GCN aggregation, with direction index and optional label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GcnEdge {
    /// Message source u.
    pub src: usize,
    /// Message target v.
    pub dst: usize,
    /// 0 = self loop, 1 = toward parent, 2 = from parent.
    pub dir: usize,
    /// Dependency label; self loops carry none (no bias contribution).
    pub label: Option<usize>,
}

pub(crate) struct GcnOp<S: Scalar> {
    pub h: Tensor<S>,
    pub w_dir: [Tensor<S>; 3],
    pub b_lab: Tensor<S>,
    pub w_hat_dir: [Tensor<S>; 3],
    pub b_hat_lab: Tensor<S>,
    pub edges: Vec<GcnEdge>,
    pub use_gates: bool,
    pub use_labels: bool,
    // caches from the forward pass
    pub pre_act: Array2<S>,
    pub gates: Vec<S>,
    pub messages: Array2<S>, // f_e per edge, one row each
}

enum Op<S: Scalar> {
    Leaf,
    Add(Tensor<S>, Tensor<S>),
    AddRow(Tensor<S>, Tensor<S>),
    Mul(Tensor<S>, Tensor<S>),
    MatMul(Tensor<S>, Tensor<S>),
    MatMulTransB(Tensor<S>, Tensor<S>),
    Scale(Tensor<S>, S),
    AddConst(Tensor<S>),
    MulConst(Tensor<S>, Array2<S>),
    Relu(Tensor<S>),
    /// Row-wise softmax of (x + additive mask); output cached in `data`.
    MaskedSoftmax(Tensor<S>),
    SumAll(Tensor<S>),
    NarrowCols {
        x: Tensor<S>,
        start: usize,
    },
    ConcatCols(Vec<Tensor<S>>),
    LayerNorm {
        x: Tensor<S>,
        gamma: Tensor<S>,
        beta: Tensor<S>,
        normed: Array2<S>,
        inv_std: Vec<S>,
    },
    Embedding {
        table: Tensor<S>,
        ids: Vec<usize>,
    },
    /// Summed token cross-entropy; softmax rows cached.
    CrossEntropy {
        logits: Tensor<S>,
        targets: Vec<usize>,
        probs: Array2<S>,
    },
    Gcn(Box<GcnOp<S>>),
}

struct Node<S: Scalar> {
    id: usize,
    data: Array2<S>,
    grad: Option<Array2<S>>,
    requires_grad: bool,
    op: Op<S>,
}

/// Shared handle to a node of the computation graph.
pub struct Tensor<S: Scalar>(Rc<RefCell<Node<S>>>);

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<S: Scalar> Tensor<S> {
    fn new(data: Array2<S>, requires_grad: bool, op: Op<S>) -> Self {
        Tensor(Rc::new(RefCell::new(Node {
            id: NODE_COUNTER.fetch_add(1, Ordering::Relaxed),
            data,
            grad: None,
            requires_grad,
            op,
        })))
    }

    pub fn leaf(data: Array2<S>, requires_grad: bool) -> Self {
        Self::new(data, requires_grad, Op::Leaf)
    }

    pub fn constant(data: Array2<S>) -> Self {
        Self::leaf(data, false)
    }

    pub fn data(&self) -> Ref<'_, Array2<S>> {
        Ref::map(self.0.borrow(), |n| &n.data)
    }

    pub fn to_owned_data(&self) -> Array2<S> {
        self.0.borrow().data.clone()
    }

    pub fn grad(&self) -> Option<Array2<S>> {
        self.0.borrow().grad.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    pub fn shape(&self) -> (usize, usize) {
        let n = self.0.borrow();
        (n.data.nrows(), n.data.ncols())
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> S {
        let n = self.0.borrow();
        assert_eq!(n.data.len(), 1, "item() on non-scalar tensor");
        n.data[[0, 0]]
    }

    fn rg(&self) -> bool {
        self.0.borrow().requires_grad
    }

    pub fn add(&self, other: &Tensor<S>) -> Tensor<S> {
        let data = &*self.data() + &*other.data();
        Tensor::new(data, self.rg() || other.rg(), Op::Add(self.clone(), other.clone()))
    }

    /// Adds a 1 x d row vector to every row.
    pub fn add_row(&self, row: &Tensor<S>) -> Tensor<S> {
        assert_eq!(row.shape().0, 1);
        assert_eq!(row.shape().1, self.shape().1);
        let data = &*self.data() + &row.data().row(0);
        Tensor::new(data, self.rg() || row.rg(), Op::AddRow(self.clone(), row.clone()))
    }

    pub fn mul(&self, other: &Tensor<S>) -> Tensor<S> {
        let data = &*self.data() * &*other.data();
        Tensor::new(data, self.rg() || other.rg(), Op::Mul(self.clone(), other.clone()))
    }

    pub fn matmul(&self, other: &Tensor<S>) -> Tensor<S> {
        let data = self.data().dot(&*other.data());
        Tensor::new(
            data,
            self.rg() || other.rg(),
            Op::MatMul(self.clone(), other.clone()),
        )
    }

    /// `self . other^T` without materializing the transpose in the graph.
    pub fn matmul_transb(&self, other: &Tensor<S>) -> Tensor<S> {
        let data = self.data().dot(&other.data().t());
        Tensor::new(
            data,
            self.rg() || other.rg(),
            Op::MatMulTransB(self.clone(), other.clone()),
        )
    }

    pub fn scale(&self, s: S) -> Tensor<S> {
        let data = self.data().mapv(|x| x * s);
        Tensor::new(data, self.rg(), Op::Scale(self.clone(), s))
    }

    pub fn add_const(&self, c: &Array2<S>) -> Tensor<S> {
        let data = &*self.data() + c;
        Tensor::new(data, self.rg(), Op::AddConst(self.clone()))
    }

    pub fn mul_const(&self, c: &Array2<S>) -> Tensor<S> {
        let data = &*self.data() * c;
        Tensor::new(data, self.rg(), Op::MulConst(self.clone(), c.clone()))
    }

    pub fn relu(&self) -> Tensor<S> {
        let data = self.data().mapv(|x| if x > S::zero() { x } else { S::zero() });
        Tensor::new(data, self.rg(), Op::Relu(self.clone()))
    }

    /// Row-wise softmax of `self + mask` (mask entries are 0 or a large
    /// negative constant). Masked positions underflow to exactly zero.
    pub fn masked_softmax(&self, mask: Option<&Array2<S>>) -> Tensor<S> {
        let mut scores = self.to_owned_data();
        if let Some(m) = mask {
            assert_eq!(m.dim(), scores.dim(), "mask shape mismatch");
            scores += m;
        }
        for mut row in scores.rows_mut() {
            let mx = row.iter().cloned().fold(S::neg_infinity(), S::max);
            row.mapv_inplace(|x| (x - mx).exp());
            let z = row.iter().cloned().sum::<S>();
            row.mapv_inplace(|x| x / z);
        }
        Tensor::new(scores, self.rg(), Op::MaskedSoftmax(self.clone()))
    }

    pub fn sum_all(&self) -> Tensor<S> {
        let s = self.data().iter().cloned().sum::<S>();
        Tensor::new(
            Array2::from_elem((1, 1), s),
            self.rg(),
            Op::SumAll(self.clone()),
        )
    }

    pub fn narrow_cols(&self, start: usize, len: usize) -> Tensor<S> {
        let data = self
            .data()
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        Tensor::new(data, self.rg(), Op::NarrowCols { x: self.clone(), start })
    }

    pub fn concat_cols(parts: &[Tensor<S>]) -> Tensor<S> {
        assert!(!parts.is_empty());
        let views: Vec<Array2<S>> = parts.iter().map(|p| p.to_owned_data()).collect();
        let view_refs: Vec<_> = views.iter().map(|v| v.view()).collect();
        let data = ndarray::concatenate(Axis(1), &view_refs).expect("concat shapes");
        let rg = parts.iter().any(Tensor::rg);
        Tensor::new(data, rg, Op::ConcatCols(parts.to_vec()))
    }

    /// Row-wise layer normalization with affine parameters (1 x d each).
    pub fn layer_norm(&self, gamma: &Tensor<S>, beta: &Tensor<S>, eps: S) -> Tensor<S> {
        let x = self.to_owned_data();
        let (n, d) = x.dim();
        assert_eq!(gamma.shape(), (1, d));
        assert_eq!(beta.shape(), (1, d));
        let dn = S::from_f64_c(d as f64);
        let mut normed = Array2::zeros((n, d));
        let mut inv_std = Vec::with_capacity(n);
        for (i, row) in x.rows().into_iter().enumerate() {
            let mean = row.iter().cloned().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let is = S::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..d {
                normed[[i, j]] = (row[j] - mean) * is;
            }
        }
        let g = gamma.data();
        let b = beta.data();
        let mut out = normed.clone();
        for mut row in out.rows_mut() {
            for j in 0..d {
                row[j] = row[j] * g[[0, j]] + b[[0, j]];
            }
        }
        let rg = self.rg() || gamma.rg() || beta.rg();
        Tensor::new(
            out,
            rg,
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                normed,
                inv_std,
            },
        )
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(table: &Tensor<S>, ids: &[usize]) -> Tensor<S> {
        let t = table.data();
        let d = t.ncols();
        let mut out = Array2::zeros((ids.len(), d));
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).assign(&t.row(id));
        }
        drop(t);
        Tensor::new(
            out,
            table.rg(),
            Op::Embedding {
                table: table.clone(),
                ids: ids.to_vec(),
            },
        )
    }

    /// Sum over rows of the cross-entropy between `logits` rows and target
    /// ids; returns a 1x1 tensor.
    pub fn cross_entropy(logits: &Tensor<S>, targets: &[usize]) -> Tensor<S> {
        let x = logits.data();
        let (n, v) = x.dim();
        assert_eq!(targets.len(), n);
        let mut probs = Array2::zeros((n, v));
        let mut loss = S::zero();
        for (i, row) in x.rows().into_iter().enumerate() {
            let mx = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for j in 0..v {
                let e = (row[j] - mx).exp();
                probs[[i, j]] = e;
                z += e;
            }
            for j in 0..v {
                probs[[i, j]] /= z;
            }
            // -log softmax[target]
            loss += z.ln() + mx - row[targets[i]];
        }
        drop(x);
        Tensor::new(
            Array2::from_elem((1, 1), loss),
            logits.rg(),
            Op::CrossEntropy {
                logits: logits.clone(),
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// One gated labeled graph-convolution layer; see `nn::gcn_layer` for
    /// the layer contract and parameter shapes.
    #[allow(clippy::too_many_arguments)]
    pub fn gcn(
        h: &Tensor<S>,
        w_dir: [&Tensor<S>; 3],
        b_lab: &Tensor<S>,
        w_hat_dir: [&Tensor<S>; 3],
        b_hat_lab: &Tensor<S>,
        edges: &[GcnEdge],
        use_gates: bool,
        use_labels: bool,
    ) -> Tensor<S> {
        let hd = h.data();
        let (n, d) = hd.dim();
        let hw: Vec<Array2<S>> = w_dir.iter().map(|w| hd.dot(&*w.data())).collect();
        let blab = b_lab.data();
        let bhat = b_hat_lab.data();
        let mut pre_act: Array2<S> = Array2::zeros((n, d));
        let mut gates = Vec::with_capacity(edges.len());
        let mut messages = Array2::zeros((edges.len(), d));
        for (ei, e) in edges.iter().enumerate() {
            let mut f = hw[e.dir].row(e.src).to_owned();
            if use_labels {
                if let Some(l) = e.label {
                    f += &blab.row(l);
                }
            }
            let g = if use_gates {
                let wh = w_hat_dir[e.dir].data();
                let mut s = S::zero();
                for j in 0..d {
                    s += hd[[e.src, j]] * wh[[j, 0]];
                }
                if use_labels {
                    if let Some(l) = e.label {
                        s += bhat[[l, 0]];
                    }
                }
                S::one() / (S::one() + (-s).exp())
            } else {
                S::one()
            };
            gates.push(g);
            messages.row_mut(ei).assign(&f);
            let mut dst = pre_act.row_mut(e.dst);
            for j in 0..d {
                dst[j] += g * f[j];
            }
        }
        drop(hd);
        drop(blab);
        drop(bhat);
        let out = pre_act.mapv(|x| if x > S::zero() { x } else { S::zero() });
        let rg = h.rg()
            || w_dir.iter().any(|t| t.rg())
            || b_lab.rg()
            || w_hat_dir.iter().any(|t| t.rg())
            || b_hat_lab.rg();
        Tensor::new(
            out,
            rg,
            Op::Gcn(Box::new(GcnOp {
                h: h.clone(),
                w_dir: [w_dir[0].clone(), w_dir[1].clone(), w_dir[2].clone()],
                b_lab: b_lab.clone(),
                w_hat_dir: [
                    w_hat_dir[0].clone(),
                    w_hat_dir[1].clone(),
                    w_hat_dir[2].clone(),
                ],
                b_hat_lab: b_hat_lab.clone(),
                edges: edges.to_vec(),
                use_gates,
                use_labels,
                pre_act,
                gates,
                messages,
            })),
        )
    }

    /// Backpropagates from this tensor, seeding its gradient with ones.
    pub fn backward(&self) {
        let order = topo_order(self);
        {
            let mut root = self.0.borrow_mut();
            let shape = root.data.dim();
            root.grad = Some(Array2::ones(shape));
        }
        for node in order {
            backward_node(&node);
        }
    }
}

fn accumulate<S: Scalar>(t: &Tensor<S>, delta: Array2<S>) {
    let mut n = t.0.borrow_mut();
    if !n.requires_grad {
        return;
    }
    match &mut n.grad {
        Some(g) => *g += &delta,
        None => n.grad = Some(delta),
    }
}

/// Root-first topological order over nodes that require grad.
fn topo_order<S: Scalar>(root: &Tensor<S>) -> Vec<Tensor<S>> {
    let mut order: Vec<Tensor<S>> = Vec::new();
    let mut visited = std::collections::HashSet::new();
    // iterative post-order DFS
    enum Frame<S: Scalar> {
        Enter(Tensor<S>),
        Exit(Tensor<S>),
    }
    let mut stack = vec![Frame::Enter(root.clone())];
    while let Some(frame) = stack.pop() {
        match frame {
            Frame::Enter(t) => {
                let id = t.0.borrow().id;
                if !visited.insert(id) {
                    continue;
                }
                stack.push(Frame::Exit(t.clone()));
                let n = t.0.borrow();
                if !n.requires_grad {
                    continue;
                }
                let mut push = |p: &Tensor<S>| stack.push(Frame::Enter(p.clone()));
                match &n.op {
                    Op::Leaf => {}
                    Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) | Op::MatMul(a, b)
                    | Op::MatMulTransB(a, b) => {
                        push(a);
                        push(b);
                    }
                    Op::Scale(a, _)
                    | Op::AddConst(a)
                    | Op::MulConst(a, _)
                    | Op::Relu(a)
                    | Op::MaskedSoftmax(a)
                    | Op::SumAll(a)
                    | Op::NarrowCols { x: a, .. } => push(a),
                    Op::ConcatCols(parts) => parts.iter().for_each(&mut push),
                    Op::LayerNorm { x, gamma, beta, .. } => {
                        push(x);
                        push(gamma);
                        push(beta);
                    }
                    Op::Embedding { table, .. } => push(table),
                    Op::CrossEntropy { logits, .. } => push(logits),
                    Op::Gcn(op) => {
                        push(&op.h);
                        op.w_dir.iter().for_each(&mut push);
                        push(&op.b_lab);
                        op.w_hat_dir.iter().for_each(&mut push);
                        push(&op.b_hat_lab);
                    }
                }
            }
            Frame::Exit(t) => order.push(t),
        }
    }
    order.reverse(); // root first
    order
}

fn backward_node<S: Scalar>(t: &Tensor<S>) {
    let n = t.0.borrow();
    if !n.requires_grad {
        return;
    }
    let grad = match &n.grad {
        Some(g) => g.clone(),
        None => return, // not on a path from the root
    };
    match &n.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            let (ga, gb) = (grad.clone(), grad);
            drop(n);
            accumulate(a, ga);
            accumulate(b, gb);
        }
        Op::AddRow(a, b) => {
            let row_sum = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
            let ga = grad;
            drop(n);
            accumulate(a, ga);
            accumulate(b, row_sum);
        }
        Op::Mul(a, b) => {
            let ga = &grad * &*b.data();
            let gb = &grad * &*a.data();
            drop(n);
            accumulate(a, ga);
            accumulate(b, gb);
        }
        Op::MatMul(a, b) => {
            let ga = grad.dot(&b.data().t());
            let gb = a.data().t().dot(&grad);
            drop(n);
            accumulate(a, ga);
            accumulate(b, gb);
        }
        Op::MatMulTransB(a, b) => {
            // c = a b^T
            let ga = grad.dot(&*b.data());
            let gb = grad.t().dot(&*a.data());
            drop(n);
            accumulate(a, ga);
            accumulate(b, gb);
        }
        Op::Scale(a, s) => {
            let ga = grad.mapv(|x| x * *s);
            drop(n);
            accumulate(a, ga);
        }
        Op::AddConst(a) => {
            let a = a.clone();
            drop(n);
            accumulate(&a, grad);
        }
        Op::MulConst(a, c) => {
            let ga = &grad * c;
            let a = a.clone();
            drop(n);
            accumulate(&a, ga);
        }
        Op::Relu(a) => {
            let ga = {
                let x = a.data();
                Array2::from_shape_fn(grad.dim(), |(i, j)| {
                    if x[[i, j]] > S::zero() {
                        grad[[i, j]]
                    } else {
                        S::zero()
                    }
                })
            };
            drop(n);
            accumulate(a, ga);
        }
        Op::MaskedSoftmax(a) => {
            // dx_row = s . (g - (g . s))
            let s = &n.data;
            let mut ga = Array2::zeros(grad.dim());
            for i in 0..grad.nrows() {
                let dot = (0..grad.ncols())
                    .map(|j| grad[[i, j]] * s[[i, j]])
                    .sum::<S>();
                for j in 0..grad.ncols() {
                    ga[[i, j]] = s[[i, j]] * (grad[[i, j]] - dot);
                }
            }
            let a = a.clone();
            drop(n);
            accumulate(&a, ga);
        }
        Op::SumAll(a) => {
            let g = grad[[0, 0]];
            let shape = a.shape();
            let a = a.clone();
            drop(n);
            accumulate(&a, Array2::from_elem(shape, g));
        }
        Op::NarrowCols { x, start } => {
            let (rows, cols) = x.shape();
            let mut gx = Array2::zeros((rows, cols));
            gx.slice_mut(ndarray::s![.., *start..*start + grad.ncols()])
                .assign(&grad);
            let x = x.clone();
            drop(n);
            accumulate(&x, gx);
        }
        Op::ConcatCols(parts) => {
            let parts = parts.clone();
            drop(n);
            let mut start = 0;
            for p in &parts {
                let w = p.shape().1;
                let gp = grad.slice(ndarray::s![.., start..start + w]).to_owned();
                start += w;
                accumulate(p, gp);
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            normed,
            inv_std,
        } => {
            let d = grad.ncols();
            let dn = S::from_f64_c(d as f64);
            let g = gamma.data().row(0).to_owned();
            let mut gx = Array2::zeros(grad.dim());
            let mut ggamma = Array2::zeros((1, d));
            let mut gbeta = Array2::zeros((1, d));
            for i in 0..grad.nrows() {
                let mut sum_gy = S::zero();
                let mut sum_gyn = S::zero();
                for j in 0..d {
                    let gy = grad[[i, j]] * g[j];
                    sum_gy += gy;
                    sum_gyn += gy * normed[[i, j]];
                    ggamma[[0, j]] += grad[[i, j]] * normed[[i, j]];
                    gbeta[[0, j]] += grad[[i, j]];
                }
                let mean_gy = sum_gy / dn;
                let mean_gyn = sum_gyn / dn;
                for j in 0..d {
                    let gy = grad[[i, j]] * g[j];
                    gx[[i, j]] = inv_std[i] * (gy - mean_gy - normed[[i, j]] * mean_gyn);
                }
            }
            let (x, gamma, beta) = (x.clone(), gamma.clone(), beta.clone());
            drop(n);
            accumulate(&x, gx);
            accumulate(&gamma, ggamma);
            accumulate(&beta, gbeta);
        }
        Op::Embedding { table, ids } => {
            let (rows, cols) = table.shape();
            let mut gt = Array2::zeros((rows, cols));
            for (r, &id) in ids.iter().enumerate() {
                let mut dst = gt.row_mut(id);
                dst += &grad.row(r);
            }
            let table = table.clone();
            drop(n);
            accumulate(&table, gt);
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let g = grad[[0, 0]];
            let mut gl = probs.clone();
            for (i, &t_id) in targets.iter().enumerate() {
                gl[[i, t_id]] -= S::one();
            }
            gl.mapv_inplace(|x| x * g);
            let logits = logits.clone();
            drop(n);
            accumulate(&logits, gl);
        }
        Op::Gcn(op) => {
            // delta_v = upstream . relu'(z_v)
            let mut delta = grad.clone();
            for i in 0..delta.nrows() {
                for j in 0..delta.ncols() {
                    if op.pre_act[[i, j]] <= S::zero() {
                        delta[[i, j]] = S::zero();
                    }
                }
            }
            let d = delta.ncols();
            let h = op.h.data().to_owned();
            let mut gh: Array2<S> = Array2::zeros(h.dim());
            let mut gw: Vec<Array2<S>> = (0..3).map(|_| Array2::zeros((d, d))).collect();
            let (lrows, _) = op.b_lab.shape();
            let mut gblab: Array2<S> = Array2::zeros((lrows, d));
            let mut gwhat: Vec<Array2<S>> = (0..3).map(|_| Array2::zeros((d, 1))).collect();
            let mut gbhat: Array2<S> = Array2::zeros((lrows, 1));
            let w_data: Vec<Array2<S>> = op.w_dir.iter().map(Tensor::to_owned_data).collect();
            let what_data: Vec<Array2<S>> =
                op.w_hat_dir.iter().map(Tensor::to_owned_data).collect();
            for (ei, e) in op.edges.iter().enumerate() {
                let gate = op.gates[ei];
                let dv = delta.row(e.dst);
                // gradient through the message f_e = W_dir h_u (+ b_lab)
                for j in 0..d {
                    let gf = gate * dv[j];
                    if gf != S::zero() {
                        for k in 0..d {
                            gw[e.dir][[k, j]] += h[[e.src, k]] * gf;
                            gh[[e.src, k]] += gf * w_data[e.dir][[k, j]];
                        }
                        if op.use_labels {
                            if let Some(l) = e.label {
                                gblab[[l, j]] += gf;
                            }
                        }
                    }
                }
                // gradient through the gate
                if op.use_gates {
                    let f = op.messages.row(ei);
                    let dot = (0..d).map(|j| dv[j] * f[j]).sum::<S>();
                    let dsig = dot * gate * (S::one() - gate);
                    if dsig != S::zero() {
                        for k in 0..d {
                            gh[[e.src, k]] += dsig * what_data[e.dir][[k, 0]];
                            gwhat[e.dir][[k, 0]] += dsig * h[[e.src, k]];
                        }
                        if op.use_labels {
                            if let Some(l) = e.label {
                                gbhat[[l, 0]] += dsig;
                            }
                        }
                    }
                }
            }
            let hh = op.h.clone();
            let wd: Vec<Tensor<S>> = op.w_dir.to_vec();
            let bl = op.b_lab.clone();
            let wh: Vec<Tensor<S>> = op.w_hat_dir.to_vec();
            let bh = op.b_hat_lab.clone();
            drop(n);
            accumulate(&hh, gh);
            for (w, g) in wd.iter().zip(gw) {
                accumulate(w, g);
            }
            accumulate(&bl, gblab);
            for (w, g) in wh.iter().zip(gwhat) {
                accumulate(w, g);
            }
            accumulate(&bh, gbhat);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn add_and_matmul_grads() {
        let a = Tensor::leaf(array![[1.0f64, 2.0], [3.0, 4.0]], true);
        let b = Tensor::leaf(array![[0.5f64, -1.0], [2.0, 0.0]], true);
        let c = a.matmul(&b);
        let loss = c.sum_all();
        loss.backward();
        // d(sum(AB))/dA = ones . B^T
        let ones = Array2::<f64>::ones((2, 2));
        assert_eq!(a.grad().unwrap(), ones.dot(&b.to_owned_data().t()));
        assert_eq!(b.grad().unwrap(), a.to_owned_data().t().dot(&ones));
    }

    #[test]
    fn shared_node_accumulates() {
        let a = Tensor::leaf(array![[2.0f64]], true);
        let y = a.mul(&a); // a^2
        y.backward();
        assert_eq!(a.grad().unwrap()[[0, 0]], 4.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let a = Tensor::leaf(array![[0.3f64, -1.0, 2.0], [0.0, 0.0, 0.0]], true);
        let mask = array![[0.0, 0.0, -1e9], [0.0, 0.0, 0.0]];
        let s = a.masked_softmax(Some(&mask));
        let d = s.to_owned_data();
        for row in d.rows() {
            let z: f64 = row.sum();
            assert!((z - 1.0).abs() < 1e-12);
        }
        assert_eq!(d[[0, 2]], 0.0, "masked entry must be exactly zero");
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let logits = Tensor::leaf(array![[1.0f64, 2.0, 3.0]], true);
        let loss = Tensor::cross_entropy(&logits, &[2]);
        let z = (1.0f64.exp() + 2.0f64.exp() + 3.0f64.exp()).ln();
        assert!((loss.item() - (z - 3.0)).abs() < 1e-12);
        loss.backward();
        let g = logits.grad().unwrap();
        let p: Vec<f64> = [1.0, 2.0, 3.0]
            .iter()
            .map(|x| (x - z).exp())
            .collect();
        assert!((g[[0, 0]] - p[0]).abs() < 1e-12);
        assert!((g[[0, 2]] - (p[2] - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn narrow_concat_roundtrip() {
        let a = Tensor::leaf(array![[1.0f64, 2.0, 3.0, 4.0]], true);
        let left = a.narrow_cols(0, 2);
        let right = a.narrow_cols(2, 2);
        let back = Tensor::concat_cols(&[left, right]);
        assert_eq!(back.to_owned_data(), a.to_owned_data());
        back.sum_all().backward();
        assert_eq!(a.grad().unwrap(), Array2::ones((1, 4)));
    }

    #[test]
    fn constant_gets_no_grad() {
        let a = Tensor::leaf(array![[1.0f64]], true);
        let c = Tensor::constant(array![[5.0f64]]);
        let y = a.mul(&c);
        y.backward();
        assert!(c.grad().is_none());
        assert_eq!(a.grad().unwrap()[[0, 0]], 5.0);
    }

    #[test]
    fn layer_norm_of_constant_row_is_beta() {
        let x = Tensor::leaf(array![[3.0f64, 3.0, 3.0, 3.0]], true);
        let gamma = Tensor::leaf(array![[1.0f64, 1.0, 1.0, 1.0]], true);
        let beta = Tensor::leaf(array![[0.0f64, 0.0, 0.0, 0.0]], true);
        let y = x.layer_norm(&gamma, &beta, 1e-6);
        for &v in y.to_owned_data().iter() {
            assert!(v.abs() < 1e-3);
        }
    }
}
