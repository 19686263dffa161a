//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to the tape, so node order is a valid
//! topological order and backward is a single reverse sweep.

use super::tensor::Tensor;
use super::{bce_loss, sigmoid, BCE_EPS, NORM_EPS};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    DivScalar(Var, f64),
    Sum(Var),
    Tanh(Var),
    Sigmoid(Var),
    AddChannelBias(Var, Var),
    Conv2d {
        x: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    },
    GroupedPointwise(Var, Var),
    SoftmaxRows(Var),
    L2NormalizeRows(Var),
    GatherRows(Var, Vec<usize>),
    BceWithLogits(Var, Vec<f64>),
    SmoothL1(Var, Vec<f64>),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Recorded computation. One graph per forward pass; not shared across threads.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn contract<T>(op: &'static str, detail: String) -> Result<T> {
    Err(Error::contract(op, detail))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Copies a tensor onto the tape. Its `requires_grad` flag is preserved.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.leaf(&t))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("graph nodes hold valid shapes")
    }

    /// Accumulated gradient of `v`, present once a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Adds the gradient of `v` (if any) into `t.grad`.
    pub fn accumulate_grad(&self, v: Var, t: &mut Tensor) {
        if let Some(g) = self.grad(v) {
            t.accumulate_grad(g);
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[m, n] => Ok((m, n)),
            s => contract(op, format!("expected a rank-2 tensor, got shape {s:?}")),
        }
    }

    fn dims3(&self, op: &'static str, v: Var) -> Result<(usize, usize, usize)> {
        match self.shape(v) {
            &[h, w, c] => Ok((h, w, c)),
            s => contract(op, format!("expected an H×W×C tensor, got shape {s:?}")),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return contract("matmul", format!("inner extents differ: {m}×{k} by {k2}×{n}"));
        }
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", a)?;
        let out = transpose_raw(self.value(a), m, n);
        let rg = self.rg(a);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).len() || shape.contains(&0) {
            return contract(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(a)),
            );
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return contract(
                "add",
                format!("shapes differ: {:?} vs {:?}", self.shape(a), self.shape(b)),
            );
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return contract(
                "mul",
                format!("shapes differ: {:?} vs {:?}", self.shape(a), self.shape(b)),
            );
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    pub fn div_scalar(&mut self, a: Var, divisor: f64) -> Var {
        let out = self.value(a).iter().map(|x| x / divisor).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::DivScalar(a, divisor), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x.tanh()).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Sigmoid(a), rg)
    }

    /// Adds a per-channel bias to the last axis.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap();
        if self.shape(bias) != [c] {
            return contract(
                "add_channel_bias",
                format!("bias {:?} does not match {c} channels", self.shape(bias)),
            );
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks_exact(c)
            .flat_map(|px| px.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddChannelBias(x, bias), rg))
    }

    /// 2-d convolution over an H×W×Cin input with a k×k×Cin×Cout kernel.
    ///
    /// Output extent is `(H + 2·pad − k) / stride + 1` with floor division.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (h, w, cin) = self.dims3("conv2d", x)?;
        let geom = match self.shape(kernel) {
            &[k, k2, ci, co] if k == k2 => ConvGeom {
                h,
                w,
                cin,
                k,
                cout: co,
                stride,
                pad,
                ho: 0,
                wo: 0,
            }
            .check(ci)?,
            s => return contract("conv2d", format!("kernel must be k×k×Cin×Cout, got {s:?}")),
        };
        let out = conv2d_forward(self.value(x), self.value(kernel), &geom);
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(
            vec![geom.ho, geom.wo, geom.cout],
            out,
            Op::Conv2d {
                x,
                kernel,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Grouped 1×1 convolution: input H×W×(G·D), weight G×D, output H×W×G where
    /// output channel g reads only input channels `g·D .. (g+1)·D`.
    pub fn grouped_pointwise(&mut self, x: Var, weight: Var) -> Result<Var> {
        let (h, w, c) = self.dims3("grouped_pointwise", x)?;
        let (groups, d) = self.dims2("grouped_pointwise", weight)?;
        if groups * d != c {
            return contract(
                "grouped_pointwise",
                format!("{c} input channels cannot split into {groups} groups of {d}"),
            );
        }
        let wv = self.value(weight);
        let out = self
            .value(x)
            .chunks_exact(d)
            .enumerate()
            .map(|(i, e)| dot(e, &wv[(i % groups) * d..][..d]))
            .collect();
        let rg = self.rg(x) || self.rg(weight);
        Ok(self.push(vec![h, w, groups], out, Op::GroupedPointwise(x, weight), rg))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2("softmax_rows", x)?;
        let out = softmax_rows_raw(self.value(x), n);
        let rg = self.rg(x);
        Ok(self.push(vec![m, n], out, Op::SoftmaxRows(x), rg))
    }

    /// Scales each row to unit Euclidean norm; rows with norm below 1e-12 become zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2("l2_normalize_rows", x)?;
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(n) {
            let norm = dot(row, row).sqrt();
            if norm < NORM_EPS {
                row.fill(0.0);
            } else {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![m, n], out, Op::L2NormalizeRows(x), rg))
    }

    /// Selects rows of a rank-2 tensor (indices may repeat).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2("gather_rows", x)?;
        if rows.is_empty() {
            return contract("gather_rows", "empty row selection".into());
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return contract("gather_rows", format!("row {bad} out of range for {m} rows"));
        }
        let src = self.value(x);
        let out = rows.iter().flat_map(|&r| src[r * n..(r + 1) * n].iter().copied()).collect();
        let rg = self.rg(x);
        Ok(self.push(vec![rows.len(), n], out, Op::GatherRows(x, rows.to_vec()), rg))
    }

    /// Summed binary cross-entropy of `sigmoid(logits)` against constant soft targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        if self.value(logits).len() != targets.len() {
            return contract(
                "bce_with_logits",
                format!("{} logits vs {} targets", self.value(logits).len(), targets.len()),
            );
        }
        let s = self
            .value(logits)
            .iter()
            .zip(targets)
            .map(|(&z, &y)| bce_loss(sigmoid(z), y))
            .sum();
        let rg = self.rg(logits);
        Ok(self.push(vec![1], vec![s], Op::BceWithLogits(logits, targets.to_vec()), rg))
    }

    /// Summed smooth-L1 between predictions and constant targets of equal length.
    pub fn smooth_l1(&mut self, pred: Var, targets: &[f64]) -> Result<Var> {
        if self.value(pred).len() != targets.len() {
            return contract(
                "smooth_l1",
                format!("{} predictions vs {} targets", self.value(pred).len(), targets.len()),
            );
        }
        let s = self
            .value(pred)
            .iter()
            .zip(targets)
            .map(|(p, t)| super::smooth_l1_term(p - t))
            .sum();
        let rg = self.rg(pred);
        Ok(self.push(vec![1], vec![s], Op::SmoothL1(pred, targets.to_vec()), rg))
    }

    /// Propagates d(loss)/d(node) to every reachable node that requires grad.
    ///
    /// Gradients add onto whatever earlier passes left behind; call
    /// [`zero_grad`](Self::zero_grad) to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            );
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut pending);
            match &mut self.nodes[i].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                None => self.nodes[i].grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], pending: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    // g (m×n) · bᵀ (n×k)
                    let bt = transpose_raw(self.value(*b), k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    add_into(slot(pending, *a, m * k), &da);
                }
                if self.rg(*b) {
                    let at = transpose_raw(self.value(*a), m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    add_into(slot(pending, *b, k * n), &db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let ga = transpose_raw(g, n, m);
                add_into(slot(pending, *a, m * n), &ga);
            }
            Op::Reshape(a) => add_into(slot(pending, *a, g.len()), g),
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(*v) {
                        add_into(slot(pending, *v, g.len()), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let s = slot(pending, *a, g.len());
                    s.iter_mut().zip(g).zip(bv).for_each(|((d, g), b)| *d += g * b);
                }
                if self.rg(*b) {
                    let s = slot(pending, *b, g.len());
                    s.iter_mut().zip(g).zip(av).for_each(|((d, g), a)| *d += g * a);
                }
            }
            Op::DivScalar(a, div) => {
                let s = slot(pending, *a, g.len());
                s.iter_mut().zip(g).for_each(|(d, g)| *d += g / div);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                slot(pending, *a, n).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Tanh(a) => {
                let s = slot(pending, *a, g.len());
                for ((d, g), y) in s.iter_mut().zip(g).zip(&node.value) {
                    *d += g * (1.0 - y * y);
                }
            }
            Op::Sigmoid(a) => {
                let s = slot(pending, *a, g.len());
                for ((d, g), y) in s.iter_mut().zip(g).zip(&node.value) {
                    *d += g * y * (1.0 - y);
                }
            }
            Op::AddChannelBias(x, bias) => {
                if self.rg(*x) {
                    add_into(slot(pending, *x, g.len()), g);
                }
                if self.rg(*bias) {
                    let c = self.value(*bias).len();
                    let s = slot(pending, *bias, c);
                    for px in g.chunks_exact(c) {
                        add_into(s, px);
                    }
                }
            }
            Op::Conv2d {
                x,
                kernel,
                stride,
                pad,
            } => {
                let xs = self.shape(*x);
                let ks = self.shape(*kernel);
                let geom = ConvGeom {
                    h: xs[0],
                    w: xs[1],
                    cin: xs[2],
                    k: ks[0],
                    cout: ks[3],
                    stride: *stride,
                    pad: *pad,
                    ho: node.shape[0],
                    wo: node.shape[1],
                };
                let mut dx = self.rg(*x).then(|| vec![0.0; xs.iter().product()]);
                let mut dk = self.rg(*kernel).then(|| vec![0.0; ks.iter().product()]);
                conv2d_backward(
                    self.value(*x),
                    self.value(*kernel),
                    g,
                    &geom,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    add_into(slot(pending, *x, dx.len()), &dx);
                }
                if let Some(dk) = dk {
                    add_into(slot(pending, *kernel, dk.len()), &dk);
                }
            }
            Op::GroupedPointwise(x, weight) => {
                let (groups, d) = (self.shape(*weight)[0], self.shape(*weight)[1]);
                let xv = self.value(*x);
                let wv = self.value(*weight);
                if self.rg(*x) {
                    let s = slot(pending, *x, xv.len());
                    for (i, (dst, &gi)) in s.chunks_exact_mut(d).zip(g).enumerate() {
                        let wrow = &wv[(i % groups) * d..][..d];
                        dst.iter_mut().zip(wrow).for_each(|(o, w)| *o += gi * w);
                    }
                }
                if self.rg(*weight) {
                    let s = slot(pending, *weight, wv.len());
                    for (i, (e, &gi)) in xv.chunks_exact(d).zip(g).enumerate() {
                        let dst = &mut s[(i % groups) * d..][..d];
                        dst.iter_mut().zip(e).for_each(|(o, e)| *o += gi * e);
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let n = node.shape[1];
                let s = slot(pending, *x, g.len());
                for ((dst, y), gr) in s
                    .chunks_exact_mut(n)
                    .zip(node.value.chunks_exact(n))
                    .zip(g.chunks_exact(n))
                {
                    let inner = dot(y, gr);
                    for j in 0..n {
                        dst[j] += y[j] * (gr[j] - inner);
                    }
                }
            }
            Op::L2NormalizeRows(x) => {
                let n = node.shape[1];
                let xv = self.value(*x);
                let s = slot(pending, *x, g.len());
                for (((dst, y), gr), xr) in s
                    .chunks_exact_mut(n)
                    .zip(node.value.chunks_exact(n))
                    .zip(g.chunks_exact(n))
                    .zip(xv.chunks_exact(n))
                {
                    let norm = dot(xr, xr).sqrt();
                    if norm < NORM_EPS {
                        continue;
                    }
                    let proj = dot(y, gr);
                    for j in 0..n {
                        dst[j] += (gr[j] - y[j] * proj) / norm;
                    }
                }
            }
            Op::GatherRows(x, rows) => {
                let n = node.shape[1];
                let len = self.value(*x).len();
                let s = slot(pending, *x, len);
                for (&r, gr) in rows.iter().zip(g.chunks_exact(n)) {
                    add_into(&mut s[r * n..(r + 1) * n], gr);
                }
            }
            Op::BceWithLogits(logits, targets) => {
                let zs = self.value(*logits);
                let s = slot(pending, *logits, zs.len());
                for ((d, &z), &y) in s.iter_mut().zip(zs).zip(targets) {
                    let p = sigmoid(z);
                    // the clamp is flat outside [eps, 1 - eps]
                    if (BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                        *d += g[0] * (p - y);
                    }
                }
            }
            Op::SmoothL1(pred, targets) => {
                let ps = self.value(*pred);
                let s = slot(pending, *pred, ps.len());
                for ((d, p), t) in s.iter_mut().zip(ps).zip(targets) {
                    let diff = p - t;
                    let dd = if diff.abs() < 1.0 { diff } else { diff.signum() };
                    *d += g[0] * dd;
                }
            }
        }
    }
}

fn slot(pending: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    pending[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            row.iter_mut().zip(brow).for_each(|(o, bv)| *o += av * bv);
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

pub(crate) fn softmax_rows_raw(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for row in out.chunks_exact_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn check(mut self, kernel_cin: usize) -> Result<Self> {
        if kernel_cin != self.cin {
            return contract(
                "conv2d",
                format!("kernel expects {kernel_cin} input channels, input has {}", self.cin),
            );
        }
        if self.k % 2 == 0 || self.stride == 0 {
            return contract(
                "conv2d",
                format!("kernel size {} must be odd and stride {} positive", self.k, self.stride),
            );
        }
        let (ph, pw) = (self.h + 2 * self.pad, self.w + 2 * self.pad);
        if ph < self.k || pw < self.k {
            return contract(
                "conv2d",
                format!(
                    "padded input {ph}×{pw} is smaller than the {}×{} kernel",
                    self.k, self.k
                ),
            );
        }
        self.ho = (ph - self.k) / self.stride + 1;
        self.wo = (pw - self.k) / self.stride + 1;
        Ok(self)
    }

    #[inline]
    fn src(&self, o: usize, kk: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + kk).checked_sub(self.pad)?;
        (pos < extent).then_some(pos)
    }
}

fn conv2d_forward(x: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (cin, cout, k) = (g.cin, g.cout, g.k);
    let mut out = vec![0.0; g.ho * g.wo * cout];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let dst = &mut out[(oy * g.wo + ox) * cout..][..cout];
            for ky in 0..k {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..k {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let xin = &x[(iy * g.w + ix) * cin..][..cin];
                    let kbase = (ky * k + kx) * cin * cout;
                    for (ci, &xv) in xin.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let krow = &kernel[kbase + ci * cout..][..cout];
                        dst.iter_mut().zip(krow).for_each(|(o, kv)| *o += xv * kv);
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward(
    x: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    g: &ConvGeom,
    mut dx: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
) {
    let (cin, cout, k) = (g.cin, g.cout, g.k);
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let go = &grad_out[(oy * g.wo + ox) * cout..][..cout];
            if go.iter().all(|&v| v == 0.0) {
                continue;
            }
            for ky in 0..k {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..k {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let xoff = (iy * g.w + ix) * cin;
                    let kbase = (ky * k + kx) * cin * cout;
                    for ci in 0..cin {
                        let koff = kbase + ci * cout;
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[xoff + ci] += dot(go, &kernel[koff..koff + cout]);
                        }
                        if let Some(dk) = dk.as_deref_mut() {
                            let xv = x[xoff + ci];
                            if xv != 0.0 {
                                dk[koff..koff + cout]
                                    .iter_mut()
                                    .zip(go)
                                    .for_each(|(d, gv)| *d += xv * gv);
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, shape: &[usize], data: Vec<f64>) -> Var {
        g.leaf(&Tensor::new(shape.to_vec(), data).unwrap().with_grad())
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::new();
        let i = leaf(&mut g, &[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = leaf(&mut g, &[2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.value(c), &[3.0, 4.0, 5.0, 6.0]);

        let r = leaf(&mut g, &[1, 2], vec![1.0, 2.0]);
        let col = leaf(&mut g, &[2, 1], vec![3.0, 4.0]);
        let d = g.matmul(r, col).unwrap();
        assert_eq!(g.value(d), &[11.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[2, 3], vec![0.0; 6]);
        let b = leaf(&mut g, &[2, 3], vec![0.0; 6]);
        assert!(matches!(g.matmul(a, b), Err(Error::Contract { op: "matmul", .. })));
    }

    #[test]
    fn conv_scalar_kernel_scales_input() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[5, 5, 1], (0..25).map(f64::from).collect());
        let k = leaf(&mut g, &[1, 1, 1, 1], vec![2.0]);
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[5, 5, 1]);
        for (o, i) in g.value(y).iter().zip(g.value(x)) {
            assert_eq!(*o, 2.0 * i);
        }
    }

    #[test]
    fn conv_counts_overlaps_with_padding() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[3, 3, 1], vec![1.0; 9]);
        let k = leaf(&mut g, &[3, 3, 1, 1], vec![1.0; 9]);
        let y = g.conv2d(x, k, 1, 1).unwrap();
        let v = g.value(y);
        assert_eq!(v[4], 9.0);
        for corner in [0, 2, 6, 8] {
            assert_eq!(v[corner], 4.0);
        }
        assert_eq!(v[1], 6.0);
    }

    #[test]
    fn conv_stride_two_uses_floor_extent() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[16, 16, 1], vec![1.0; 256]);
        let k = leaf(&mut g, &[3, 3, 1, 2], vec![1.0; 18]);
        let y = g.conv2d(x, k, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[8, 8, 2]);
    }

    #[test]
    fn conv_rejects_even_kernel_and_tiny_input() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[4, 4, 1], vec![1.0; 16]);
        let even = leaf(&mut g, &[2, 2, 1, 1], vec![1.0; 4]);
        assert!(g.conv2d(x, even, 1, 0).is_err());
        let big = leaf(&mut g, &[5, 5, 1, 1], vec![1.0; 25]);
        assert!(g.conv2d(x, big, 1, 0).is_err());
        let wrong_cin = leaf(&mut g, &[3, 3, 2, 1], vec![1.0; 18]);
        assert!(g.conv2d(x, wrong_cin, 1, 1).is_err());
    }

    #[test]
    fn softmax_rows_examples() {
        let mut g = Graph::new();
        let x = leaf(
            &mut g,
            &[3, 3],
            vec![0.0, 0.0, 0.0, 1000.0, 0.0, 0.0, 1.0, 2.0, 3.0],
        );
        let y = g.softmax_rows(x).unwrap();
        let v = g.value(y);
        for j in 0..3 {
            assert!((v[j] - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!((v[3] - 1.0).abs() < 1e-12 && v[4] < 1e-300 && v[5] < 1e-300);
        let expected = [0.09003, 0.24473, 0.66524];
        for (a, b) in v[6..].iter().zip(expected) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn l2_normalize_examples() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2, 2], vec![3.0, 4.0, 0.0, 0.0]);
        let y = g.l2_normalize_rows(x).unwrap();
        let v = g.value(y);
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert_eq!(&v[2..], &[0.0, 0.0]);
    }

    #[test]
    fn backward_of_sum_and_square() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.5]);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);

        let mut g = Graph::new();
        let data = vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.5];
        let x = leaf(&mut g, &[2, 3], data.clone());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        let expect: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.grad(x).unwrap(), expect.as_slice());
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[3], vec![1.0, 2.0, 3.0]);
        let s = g.sum(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0; 3]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[3], vec![1.0, 2.0, 3.0]);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(&[2], vec![1.0, 2.0]).unwrap();
        let x = leaf(&mut g, &[2], vec![3.0, 4.0]);
        let p = g.mul(c, x).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn grouped_pointwise_reads_own_slice() {
        let mut g = Graph::new();
        // 1×1 map, 2 groups of D=2
        let x = leaf(&mut g, &[1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        let w = leaf(&mut g, &[2, 2], vec![1.0, 1.0, 10.0, 0.0]);
        let y = g.grouped_pointwise(x, w).unwrap();
        assert_eq!(g.value(y), &[3.0, 30.0]);
    }
}
