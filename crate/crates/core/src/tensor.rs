//! Dense `f64` tensors and a dynamic reverse-mode tape.
//!
//! A [`Tape`] is rebuilt for every forward pass. Leaves are registered with
//! [`Tape::leaf`], every operation appends a node holding its output value and
//! whatever it needs to replay the adjoint, and [`Tape::backward`] walks the
//! nodes in reverse insertion order. Insertion order is a valid topological
//! order because an op can only consume vars that already exist.
//!
//! Layout is row-major; image data is NCHW.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};
use crate::kernels::{mm_nn, mm_nt, mm_tn};

/// Layer normalization epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Sentinel in a gather map meaning "write zero".
pub const GATHER_ZERO: usize = usize::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.len() > 4 {
            return Err(Error::invalid(format!("tensor order {} exceeds 4", shape.len())));
        }
        if numel != data.len() {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        Ok(Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Tensor::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: Vec::new(), data: vec![value], requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sum(Var),
    Reshape(Var),
    Gather {
        x: Var,
        map: Vec<usize>,
    },
    BiasAdd {
        x: Var,
        bias: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        outer: usize,
        len: usize,
        inner: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    pad: usize,
    groups: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    /// Rows of the unfolded input: `cin_g · kh · kw`.
    fn patch_len(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad == 0
    }

    fn is_depthwise(&self) -> bool {
        self.cin_g() == 1 && self.cout_g() == 1
    }

    fn padded(&self) -> (usize, usize) {
        (self.h + 2 * self.pad, self.w + 2 * self.pad)
    }

    /// Output column range `[lo, hi)` whose input column `oj + kj - pad` is in bounds.
    fn col_range(&self, kj: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kj);
        let hi = (self.w + self.pad).saturating_sub(kj).min(self.ow);
        (lo, hi.max(lo))
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backpropagated: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node; variables from before are invalidated.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backpropagated = false;
    }

    /// Clears gradients so that `backward` may run again.
    pub fn reset(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
        self.backpropagated = false;
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a tensor's values as a leaf. The tensor's own `requires_grad`
    /// flag decides whether the leaf collects a gradient.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.data, Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: n.requires_grad,
            grad: self.grads[v.0].clone(),
        }
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Copies the gradient of `v` into `t.grad`.
    pub fn write_grad(&self, v: Var, t: &mut Tensor) {
        t.grad = self.grads[v.0].clone();
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).iter().map(|x| x * s).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), value, Op::Scale(a, s), rg)
    }

    /// Exact GELU, `x * Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| gelu(x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), value, Op::Gelu(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(Vec::new(), vec![s], Op::Sum(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), rg))
    }

    /// `out[i] = x[map[i]]`, or zero where `map[i] == GATHER_ZERO`.
    ///
    /// Backs every pure data-movement op: shifts, padding, cropping,
    /// patch partitioning and transposes.
    pub fn gather(&mut self, x: Var, shape: &[usize], map: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != map.len() {
            return Err(Error::shape("gather", shape, &[map.len()]));
        }
        let src = self.value(x);
        let mut value = Vec::with_capacity(map.len());
        for &m in &map {
            if m == GATHER_ZERO {
                value.push(0.0);
            } else if m < src.len() {
                value.push(src[m]);
            } else {
                return Err(Error::invalid(format!(
                    "gather index {m} out of range for {} elements",
                    src.len()
                )));
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), value, Op::Gather { x, map }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::invalid("transpose needs at least two axes"));
        }
        let r = shape.len();
        let (rows, cols) = (shape[r - 2], shape[r - 1]);
        let batch: usize = shape[..r - 2].iter().product();
        let mut out_shape = shape.clone();
        out_shape.swap(r - 2, r - 1);
        let mut map = Vec::with_capacity(batch * rows * cols);
        for b in 0..batch {
            for j in 0..cols {
                for i in 0..rows {
                    map.push(b * rows * cols + i * cols + j);
                }
            }
        }
        self.gather(x, &out_shape, map)
    }

    /// Adds `bias[c]` to every element whose index along `axis` is `c`.
    pub fn bias_add(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || self.shape(bias) != [shape[axis]] {
            return Err(Error::shape("bias_add", &shape, self.shape(bias)));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut value = self.value(x).to_vec();
        let b = self.value(bias);
        for o in 0..outer {
            for (c, &bc) in b.iter().enumerate() {
                let base = (o * len + c) * inner;
                for v in &mut value[base..base + inner] {
                    *v += bc;
                }
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(shape, value, Op::BiasAdd { x, bias, outer, len, inner }, rg))
    }

    /// Matrix product.
    ///
    /// Accepts `[m,k]·[k,n]`, batched `[b,m,k]·[b,k,n]`, and a batch against a
    /// shared right operand `[b,m,k]·[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, m, k, kb, n, shared_b) = match (sa.len(), sb.len()) {
            (2, 2) => (1, sa[0], sa[1], sb[0], sb[1], true),
            (3, 3) if sa[0] == sb[0] => (sa[0], sa[1], sa[2], sb[1], sb[2], false),
            (3, 2) => (sa[0], sa[1], sa[2], sb[0], sb[1], true),
            _ => return Err(Error::shape("matmul", &sa, &sb)),
        };
        if k != kb {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; batch * m * n];
        if shared_b {
            // one tall product; each output row still depends only on its own row
            mm_nn(&mut out, av, bv, batch * m, k, n);
        } else {
            for bi in 0..batch {
                mm_nn(
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    &av[bi * m * k..(bi + 1) * m * k],
                    &bv[bi * k * n..(bi + 1) * k * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::MatMul { a, b, batch, m, k, n, shared_b }, rg))
    }

    /// Grouped 2-D cross-correlation, stride 1, symmetric zero padding.
    ///
    /// `x` is `[N, Cin, H, W]`, `w` is `[Cout, Cin/groups, kh, kw]`.
    /// `groups == Cin == Cout` is a depth-wise convolution.
    pub fn conv2d(&mut self, x: Var, w: Var, groups: usize, padding: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        let (batch, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, cin_g, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(Error::Shape { op: "conv2d (channels/groups)", lhs: sx, rhs: sw });
        }
        if h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(Error::shape("conv2d (kernel larger than input)", &sx, &sw));
        }
        let geom = ConvGeom {
            batch,
            cin,
            cout,
            h,
            w: wd,
            kh,
            kw,
            oh: h + 2 * padding - kh + 1,
            ow: wd + 2 * padding - kw + 1,
            pad: padding,
            groups,
        };
        let out = conv_forward(&geom, self.value(x), self.value(w));
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(vec![batch, cout, geom.oh, geom.ow], out, Op::Conv2d { x, w, geom }, rg))
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    ///
    /// NaN inputs propagate to NaN outputs.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |c: usize| (o * len + c) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for c in 0..len {
                    // NaN never compares greater, so poison it explicitly
                    let v = xv[at(c)];
                    if v > max || v.is_nan() {
                        max = v;
                    }
                }
                let mut denom = 0.0;
                for c in 0..len {
                    let e = (xv[at(c)] - max).exp();
                    out[at(c)] = e;
                    denom += e;
                }
                for c in 0..len {
                    out[at(c)] /= denom;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax { x, outer, len, inner }, rg))
    }

    /// Layer normalization along `axis` with per-feature affine `gamma`, `beta`.
    ///
    /// For NCHW input with `axis == 1` this normalizes each pixel over its
    /// channels. A zero-variance slice normalizes to zero before the affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || self.shape(gamma) != [shape[axis]] || self.shape(beta) != [shape[axis]] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |c: usize| (o * len + c) * inner + i;
                let mean = (0..len).map(|c| xv[at(c)]).sum::<f64>() / len as f64;
                let var = (0..len).map(|c| (xv[at(c)] - mean).powi(2)).sum::<f64>() / len as f64;
                let is = 1.0 / (var + LN_EPS).sqrt();
                inv_std[o * inner + i] = is;
                for c in 0..len {
                    let xh = (xv[at(c)] - mean) * is;
                    xhat[at(c)] = xh;
                    out[at(c)] = xh * g[c] + b[c];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(shape, out, Op::LayerNorm { x, gamma, beta, outer, len, inner, xhat, inv_std }, rg))
    }

    /// Mean cross-entropy of `[N, K]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
        }
        let (n, k) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &lv[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for c in 0..k {
                probs[r * k + c] = (row[c] - max).exp() / denom;
            }
            loss += denom.ln() + max - row[label];
        }
        loss /= n as f64;
        let rg = self.rg(logits);
        Ok(self.push(Vec::new(), vec![loss], Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, rg))
    }

    /// Back-propagates from a scalar `loss`, populating the gradient of every
    /// reachable node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backpropagated {
            return Err(Error::AlreadyBackpropagated);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        self.backpropagated = true;
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g);
            }
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        // The op is moved out so node values can be read while parent grads
        // are written.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = self.acc(v) {
                        add_into(ga, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let other: Vec<f64> = g.iter().zip(self.value(b)).map(|(g, y)| g * y).collect();
                    add_into(self.acc(a).unwrap(), &other);
                }
                if self.rg(b) {
                    let other: Vec<f64> = g.iter().zip(self.value(a)).map(|(g, x)| g * x).collect();
                    add_into(self.acc(b).unwrap(), &other);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                if let Some(ga) = self.acc(*a) {
                    for (d, gi) in ga.iter_mut().zip(g) {
                        *d += s * gi;
                    }
                }
            }
            Op::Gelu(a) => {
                let a = *a;
                let local: Vec<f64> = self.value(a).iter().zip(g).map(|(&x, gi)| gi * gelu_grad(x)).collect();
                if let Some(ga) = self.acc(a) {
                    add_into(ga, &local);
                }
            }
            Op::Sum(a) => {
                let g0 = g[0];
                if let Some(ga) = self.acc(*a) {
                    for d in ga.iter_mut() {
                        *d += g0;
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(*a) {
                    add_into(ga, g);
                }
            }
            Op::Gather { x, map } => {
                if let Some(gx) = self.acc(*x) {
                    for (&m, gi) in map.iter().zip(g) {
                        if m != GATHER_ZERO {
                            gx[m] += gi;
                        }
                    }
                }
            }
            Op::BiasAdd { x, bias, outer, len, inner } => {
                if let Some(gx) = self.acc(*x) {
                    add_into(gx, g);
                }
                if let Some(gb) = self.acc(*bias) {
                    for o in 0..*outer {
                        for (c, d) in gb.iter_mut().enumerate().take(*len) {
                            let base = (o * len + c) * inner;
                            *d += g[base..base + inner].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::MatMul { a, b, batch, m, k, n, shared_b } => {
                self.matmul_backward(*a, *b, g, *batch, *m, *k, *n, *shared_b)
            }
            Op::Conv2d { x, w, geom } => {
                let (x, w, geom) = (*x, *w, *geom);
                if self.rg(x) {
                    let dx = conv_backward_input(&geom, g, self.value(w));
                    add_into(self.acc(x).unwrap(), &dx);
                }
                if self.rg(w) {
                    let dw = conv_backward_weight(&geom, g, self.value(x));
                    add_into(self.acc(w).unwrap(), &dw);
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                let y = &self.nodes[idx].value;
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |c: usize| (o * len + c) * inner + i;
                        let dot: f64 = (0..len).map(|c| g[at(c)] * y[at(c)]).sum();
                        for c in 0..len {
                            dx[at(c)] = y[at(c)] * (g[at(c)] - dot);
                        }
                    }
                }
                if let Some(gx) = self.acc(*x) {
                    add_into(gx, &dx);
                }
            }
            Op::LayerNorm { x, gamma, beta, outer, len, inner, xhat, inv_std } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                let gv = self.value(*gamma).to_vec();
                if self.rg(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |c: usize| (o * len + c) * inner + i;
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for c in 0..len {
                                let d = g[at(c)] * gv[c];
                                mean_d += d;
                                mean_dx += d * xhat[at(c)];
                            }
                            mean_d /= len as f64;
                            mean_dx /= len as f64;
                            let is = inv_std[o * inner + i];
                            for c in 0..len {
                                let d = g[at(c)] * gv[c];
                                dx[at(c)] = is * (d - mean_d - xhat[at(c)] * mean_dx);
                            }
                        }
                    }
                    add_into(self.acc(*x).unwrap(), &dx);
                }
                let mut dgamma = vec![0.0; len];
                let mut dbeta = vec![0.0; len];
                for o in 0..outer {
                    for c in 0..len {
                        let base = (o * len + c) * inner;
                        for i in 0..inner {
                            dgamma[c] += g[base + i] * xhat[base + i];
                            dbeta[c] += g[base + i];
                        }
                    }
                }
                if let Some(gg) = self.acc(*gamma) {
                    add_into(gg, &dgamma);
                }
                if let Some(gb) = self.acc(*beta) {
                    add_into(gb, &dbeta);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n.max(1);
                let scale = g[0] / n as f64;
                if let Some(gl) = self.acc(*logits) {
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..k {
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            gl[r * k + c] += scale * (probs[r * k + c] - onehot);
                        }
                    }
                }
            }
        }
        self.nodes[idx].op = op;
    }

    #[allow(clippy::too_many_arguments)]
    fn matmul_backward(
        &mut self,
        a: Var,
        b: Var,
        g: &[f64],
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    ) {
        // shared right operands are handled as one tall product
        let (blocks, rows) = if shared_b { (1, batch * m) } else { (batch, m) };
        if self.rg(a) {
            // dA = G · Bᵀ
            let bv = self.value(b);
            let mut da = vec![0.0; batch * m * k];
            for bi in 0..blocks {
                mm_nt(
                    &mut da[bi * rows * k..(bi + 1) * rows * k],
                    &g[bi * rows * n..(bi + 1) * rows * n],
                    &bv[bi * k * n..(bi + 1) * k * n],
                    rows,
                    n,
                    k,
                );
            }
            add_into(self.acc(a).unwrap(), &da);
        }
        if self.rg(b) {
            // dB = Aᵀ · G
            let av = self.value(a);
            let mut db = vec![0.0; blocks * k * n];
            for bi in 0..blocks {
                mm_tn(
                    &mut db[bi * k * n..(bi + 1) * k * n],
                    &av[bi * rows * k..(bi + 1) * rows * k],
                    &g[bi * rows * n..(bi + 1) * rows * n],
                    k,
                    rows,
                    n,
                );
            }
            add_into(self.acc(b).unwrap(), &db);
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

/// `[N, C, P]` to `[C, N·P]`.
fn to_channel_major(x: &[f64], batch: usize, channels: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for n in 0..batch {
        for c in 0..channels {
            let src = &x[(n * channels + c) * plane..][..plane];
            out[(c * batch + n) * plane..][..plane].copy_from_slice(src);
        }
    }
    out
}

/// `[C, N·P]` to `[N, C, P]`.
fn from_channel_major(x: &[f64], batch: usize, channels: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for c in 0..channels {
        for n in 0..batch {
            let src = &x[(c * batch + n) * plane..][..plane];
            out[(n * channels + c) * plane..][..plane].copy_from_slice(src);
        }
    }
    out
}

/// Unfolds channel group `grp` of a channel-major input into
/// `[cin_g·kh·kw, N·oh·ow]`.
fn im2col(g: &ConvGeom, xcm: &[f64], grp: usize, col: &mut [f64]) {
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    let cols = g.batch * ohw;
    for cl in 0..g.cin_g() {
        let ci = grp * g.cin_g() + cl;
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let (lo, hi) = g.col_range(kj);
                let row = &mut col[((cl * g.kh + ki) * g.kw + kj) * cols..][..cols];
                for n in 0..g.batch {
                    let ibase = (ci * g.batch + n) * hw;
                    for oi in 0..g.oh {
                        let orow = &mut row[n * ohw + oi * g.ow..n * ohw + (oi + 1) * g.ow];
                        match (oi + ki).checked_sub(g.pad).filter(|&r| r < g.h) {
                            Some(ii) if hi > lo => {
                                orow[..lo].fill(0.0);
                                orow[hi..].fill(0.0);
                                let istart = ibase + ii * g.w + lo + kj - g.pad;
                                orow[lo..hi].copy_from_slice(&xcm[istart..istart + (hi - lo)]);
                            }
                            _ => orow.fill(0.0),
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `col` back onto a channel-major gradient.
fn col2im_add(g: &ConvGeom, col: &[f64], grp: usize, dxcm: &mut [f64]) {
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    let cols = g.batch * ohw;
    for cl in 0..g.cin_g() {
        let ci = grp * g.cin_g() + cl;
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let (lo, hi) = g.col_range(kj);
                if hi <= lo {
                    continue;
                }
                let row = &col[((cl * g.kh + ki) * g.kw + kj) * cols..][..cols];
                for n in 0..g.batch {
                    let ibase = (ci * g.batch + n) * hw;
                    for oi in 0..g.oh {
                        let Some(ii) = (oi + ki).checked_sub(g.pad).filter(|&r| r < g.h) else {
                            continue;
                        };
                        let istart = ibase + ii * g.w + lo + kj - g.pad;
                        let src = &row[n * ohw + oi * g.ow + lo..n * ohw + oi * g.ow + hi];
                        add_into(&mut dxcm[istart..istart + (hi - lo)], src);
                    }
                }
            }
        }
    }
}

/// Unfolded input of one channel group. Pointwise convolutions read the
/// channel-major input in place.
fn unfolded<'a>(g: &ConvGeom, xcm: &'a [f64], grp: usize, col: &'a mut Vec<f64>) -> &'a [f64] {
    let (kl, cols) = (g.patch_len(), g.batch * g.oh * g.ow);
    if g.is_pointwise() {
        &xcm[grp * g.cin_g() * cols..][..kl * cols]
    } else {
        col.resize(kl * cols, 0.0);
        im2col(g, xcm, grp, col);
        col
    }
}

// Convolutions run as one product per channel group over the whole batch:
// `[cout_g, cin_g·kh·kw] · [cin_g·kh·kw, N·oh·ow]`. Each output element is
// still a fixed-order sum over its own receptive field, so results do not
// depend on which other samples share the batch.

/// `[N, C, H, W]` to zero-padded channels-last `[N, H + 2p, W + 2p, C]`.
fn to_padded_nhwc(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
    let (ph, pw) = g.padded();
    let c = g.cin;
    let mut out = vec![0.0; g.batch * ph * pw * c];
    for n in 0..g.batch {
        for ch in 0..c {
            let plane = &x[(n * c + ch) * g.h * g.w..][..g.h * g.w];
            for y in 0..g.h {
                for xx in 0..g.w {
                    out[((n * ph + y + g.pad) * pw + xx + g.pad) * c + ch] = plane[y * g.w + xx];
                }
            }
        }
    }
    out
}

/// `[N, oh, ow, C]` to `[N, C, oh, ow]`.
fn from_nhwc(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
    let (c, ohw) = (g.cout, g.oh * g.ow);
    let mut out = vec![0.0; x.len()];
    for n in 0..g.batch {
        for p in 0..ohw {
            for ch in 0..c {
                out[(n * c + ch) * ohw + p] = x[(n * ohw + p) * c + ch];
            }
        }
    }
    out
}

/// `[N, C, oh, ow]` to `[N, oh, ow, C]`.
fn to_nhwc(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
    let (c, ohw) = (g.cout, g.oh * g.ow);
    let mut out = vec![0.0; x.len()];
    for n in 0..g.batch {
        for ch in 0..c {
            for p in 0..ohw {
                out[(n * ohw + p) * c + ch] = x[(n * c + ch) * ohw + p];
            }
        }
    }
    out
}

/// `[C, kh, kw]` weights to `[kh, kw, C]`.
fn taps_last(g: &ConvGeom, w: &[f64]) -> Vec<f64> {
    let taps = g.kh * g.kw;
    let mut out = vec![0.0; w.len()];
    for ch in 0..g.cout {
        for t in 0..taps {
            out[t * g.cout + ch] = w[ch * taps + t];
        }
    }
    out
}

// Depth-wise convolutions run channels-last so the innermost loop runs over
// channels; every output is summed over taps in raster order.

fn depthwise_forward(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let (ph, pw) = g.padded();
    let c = g.cout;
    let xp = to_padded_nhwc(g, x);
    let wt = taps_last(g, w);
    let mut out = vec![0.0; g.batch * g.oh * g.ow * c];
    for n in 0..g.batch {
        for oi in 0..g.oh {
            for oj in 0..g.ow {
                let o = &mut out[((n * g.oh + oi) * g.ow + oj) * c..][..c];
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let src = &xp[((n * ph + oi + ki) * pw + oj + kj) * c..][..c];
                        let wk = &wt[(ki * g.kw + kj) * c..][..c];
                        for ((o, &xv), &wv) in o.iter_mut().zip(src).zip(wk) {
                            *o += wv * xv;
                        }
                    }
                }
            }
        }
    }
    from_nhwc(g, &out)
}

fn depthwise_backward_input(g: &ConvGeom, gout: &[f64], w: &[f64]) -> Vec<f64> {
    let (ph, pw) = g.padded();
    let c = g.cout;
    let gt = to_nhwc(g, gout);
    let wt = taps_last(g, w);
    let mut dxp = vec![0.0; g.batch * ph * pw * c];
    for n in 0..g.batch {
        for oi in 0..g.oh {
            for oj in 0..g.ow {
                let gv = &gt[((n * g.oh + oi) * g.ow + oj) * c..][..c];
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let d = &mut dxp[((n * ph + oi + ki) * pw + oj + kj) * c..][..c];
                        let wk = &wt[(ki * g.kw + kj) * c..][..c];
                        for ((d, &gi), &wv) in d.iter_mut().zip(gv).zip(wk) {
                            *d += wv * gi;
                        }
                    }
                }
            }
        }
    }
    let mut dx = vec![0.0; g.batch * c * g.h * g.w];
    for n in 0..g.batch {
        for y in 0..g.h {
            for xx in 0..g.w {
                let src = &dxp[((n * ph + y + g.pad) * pw + xx + g.pad) * c..][..c];
                for (ch, &v) in src.iter().enumerate() {
                    dx[((n * c + ch) * g.h + y) * g.w + xx] = v;
                }
            }
        }
    }
    dx
}

fn depthwise_backward_weight(g: &ConvGeom, gout: &[f64], x: &[f64]) -> Vec<f64> {
    let (ph, pw) = g.padded();
    let c = g.cout;
    let xp = to_padded_nhwc(g, x);
    let gt = to_nhwc(g, gout);
    let taps = g.kh * g.kw;
    let mut dwt = vec![0.0; taps * c];
    for n in 0..g.batch {
        for oi in 0..g.oh {
            for oj in 0..g.ow {
                let gv = &gt[((n * g.oh + oi) * g.ow + oj) * c..][..c];
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let src = &xp[((n * ph + oi + ki) * pw + oj + kj) * c..][..c];
                        let d = &mut dwt[(ki * g.kw + kj) * c..][..c];
                        for ((d, &gi), &xv) in d.iter_mut().zip(gv).zip(src) {
                            *d += gi * xv;
                        }
                    }
                }
            }
        }
    }
    let mut dw = vec![0.0; c * taps];
    for t in 0..taps {
        for ch in 0..c {
            dw[ch * taps + t] = dwt[t * c + ch];
        }
    }
    dw
}

fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    if g.is_depthwise() {
        return depthwise_forward(g, x, w);
    }
    let (kl, ohw) = (g.patch_len(), g.oh * g.ow);
    let cols = g.batch * ohw;
    let xcm = to_channel_major(x, g.batch, g.cin, g.h * g.w);
    let mut ocm = vec![0.0; g.cout * cols];
    let mut col = Vec::new();
    for grp in 0..g.groups {
        let src = unfolded(g, &xcm, grp, &mut col);
        let wg = &w[grp * g.cout_g() * kl..][..g.cout_g() * kl];
        let o = &mut ocm[grp * g.cout_g() * cols..][..g.cout_g() * cols];
        mm_nn(o, wg, src, g.cout_g(), kl, cols);
    }
    from_channel_major(&ocm, g.batch, g.cout, ohw)
}

fn conv_backward_input(g: &ConvGeom, gout: &[f64], w: &[f64]) -> Vec<f64> {
    if g.is_depthwise() {
        return depthwise_backward_input(g, gout, w);
    }
    let (kl, ohw, hw) = (g.patch_len(), g.oh * g.ow, g.h * g.w);
    let cols = g.batch * ohw;
    let gcm = to_channel_major(gout, g.batch, g.cout, ohw);
    let mut dxcm = vec![0.0; g.cin * g.batch * hw];
    let mut dcol = Vec::new();
    for grp in 0..g.groups {
        let gg = &gcm[grp * g.cout_g() * cols..][..g.cout_g() * cols];
        let wg = &w[grp * g.cout_g() * kl..][..g.cout_g() * kl];
        if g.is_pointwise() {
            let d = &mut dxcm[grp * g.cin_g() * cols..][..kl * cols];
            mm_tn(d, wg, gg, kl, g.cout_g(), cols);
        } else {
            dcol.clear();
            dcol.resize(kl * cols, 0.0);
            mm_tn(&mut dcol, wg, gg, kl, g.cout_g(), cols);
            col2im_add(g, &dcol, grp, &mut dxcm);
        }
    }
    from_channel_major(&dxcm, g.batch, g.cin, hw)
}

fn conv_backward_weight(g: &ConvGeom, gout: &[f64], x: &[f64]) -> Vec<f64> {
    if g.is_depthwise() {
        return depthwise_backward_weight(g, gout, x);
    }
    let (kl, ohw) = (g.patch_len(), g.oh * g.ow);
    let cols = g.batch * ohw;
    let xcm = to_channel_major(x, g.batch, g.cin, g.h * g.w);
    let gcm = to_channel_major(gout, g.batch, g.cout, ohw);
    let mut dw = vec![0.0; g.cout * kl];
    let mut col = Vec::new();
    for grp in 0..g.groups {
        let src = unfolded(g, &xcm, grp, &mut col);
        let gg = &gcm[grp * g.cout_g() * cols..][..g.cout_g() * cols];
        let d = &mut dw[grp * g.cout_g() * kl..][..g.cout_g() * kl];
        mm_nt(d, gg, src, g.cout_g(), cols, kl);
    }
    dw
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference gradient check of `f` with respect to every input.
    fn check_grads<F>(inputs: &[Tensor], f: F) -> f64
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(&t.clone().with_grad())).collect();
        let loss = f(&mut tape, &vars);
        tape.backward(loss).unwrap();
        let eval = |ins: &[Tensor]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x)).collect();
            let l = f(&mut t, &vs);
            t.value(l)[0]
        };
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (which, input) in inputs.iter().enumerate() {
            let analytic = tape.grad(vars[which]).unwrap().to_vec();
            for i in 0..input.numel() {
                let mut plus = inputs.to_vec();
                plus[which].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[which].data_mut()[i] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
                worst = worst.max((analytic[i] - numeric).abs() / denom);
            }
        }
        worst
    }

    /// Weighted sum so that every output element has a distinct cotangent.
    fn probe(tape: &mut Tape, y: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random(tape.shape(y), &mut rng);
        let w = tape.constant(w);
        let p = tape.mul(y, w).unwrap();
        tape.sum(p)
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(y), tape.value(b));
    }

    #[test]
    fn hand_matmul() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap());
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(y), &[2, 1]);
        assert_eq!(tape.value(y), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn grad_of_sum_ab_is_ones_bt() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&[3, 4], &mut rng).with_grad();
        let b = random(&[4, 2], &mut rng);
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(&a), tape.leaf(&b));
        let y = tape.matmul(va, vb).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        let g = tape.grad(va).unwrap();
        for i in 0..3 {
            for k in 0..4 {
                let expect: f64 = b.data()[k * 2..k * 2 + 2].iter().sum();
                assert!((g[i * 4 + k] - expect).abs() < 1e-12);
            }
        }
        assert!(tape.grad(vb).is_none());
        let worst = check_grads(&[a, b], |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            t.sum(y)
        });
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[3], vec![0.0; 3]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(Tensor::new(&[1], vec![-4.2]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y), &[1.0]);

        let x = tape.constant(Tensor::new(&[2], vec![1000.0, 1000.5]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        let e = (-0.5f64).exp();
        let expect = [e / (1.0 + e), 1.0 / (1.0 + e)];
        for (v, ex) in tape.value(y).iter().zip(expect) {
            assert!(v.is_finite());
            assert!((v - ex).abs() < 1e-15);
        }

        let x = tape.constant(Tensor::new(&[2], vec![f64::NAN, 1.0]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        assert!(tape.value(y).iter().all(|v| v.is_nan()));
    }

    #[test]
    fn backward_contract() {
        let x = Tensor::new(&[4], vec![1.0, -2.0, 3.0, 0.5]).unwrap().with_grad();
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let s = tape.sum(v);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(v).unwrap(), &[1.0; 4]);
        assert!(matches!(tape.backward(s), Err(Error::AlreadyBackpropagated)));
        tape.reset();
        tape.backward(s).unwrap();

        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let sq = tape.mul(v, v).unwrap();
        assert!(matches!(tape.backward(sq), Err(Error::NonScalarLoss(_))));
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        let expect: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(tape.grad(v).unwrap(), expect.as_slice());
    }

    #[test]
    fn conv_identity_and_depthwise_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 3, 4, 5], &mut rng);
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let mut tape = Tape::new();
        let (vx, vw) = (tape.leaf(&x), tape.leaf(&w));
        let y = tape.conv2d(vx, vw, 1, 0).unwrap();
        assert_eq!(tape.value(y), x.data());

        let ones = Tensor::from_fn(&[1, 2, 5, 5], |_| 1.0);
        let k = Tensor::from_fn(&[2, 1, 3, 3], |_| 1.0);
        let (vx, vk) = (tape.leaf(&ones), tape.leaf(&k));
        let y = tape.conv2d(vx, vk, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 5, 5]);
        assert_eq!(tape.value(y)[2 * 5 + 2], 9.0);
        assert_eq!(tape.value(y)[0], 4.0);
    }

    #[test]
    fn conv_group_mismatch_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 5, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[4, 2, 3, 3]));
        assert!(tape.conv2d(x, w, 2, 1).is_err());
    }

    #[test]
    fn gradients_of_each_op() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&[2, 3, 4], &mut rng);
            let b = random(&[2, 3, 4], &mut rng);
            let w = random(&[2, 4, 3], &mut rng);
            let gamma = random(&[3], &mut rng);
            let beta = random(&[3], &mut rng);
            let checks: Vec<f64> = vec![
                check_grads(&[a.clone(), b.clone()], |t, v| {
                    let y = t.add(v[0], v[1]).unwrap();
                    probe(t, y, seed)
                }),
                check_grads(&[a.clone(), b.clone()], |t, v| {
                    let y = t.mul(v[0], v[1]).unwrap();
                    probe(t, y, seed)
                }),
                check_grads(std::slice::from_ref(&a), |t, v| {
                    let y = t.gelu(v[0]);
                    probe(t, y, seed)
                }),
                check_grads(&[a.clone(), w.clone()], |t, v| {
                    let y = t.matmul(v[0], v[1]).unwrap();
                    probe(t, y, seed)
                }),
                check_grads(std::slice::from_ref(&a), |t, v| {
                    let y = t.softmax(v[0], 1).unwrap();
                    probe(t, y, seed)
                }),
                check_grads(&[a.clone(), gamma.clone(), beta.clone()], |t, v| {
                    let y = t.layer_norm(v[0], v[1], v[2], 1).unwrap();
                    probe(t, y, seed)
                }),
                check_grads(std::slice::from_ref(&a), |t, v| {
                    let y = t.transpose_last2(v[0]).unwrap();
                    probe(t, y, seed)
                }),
                check_grads(&[a.clone(), gamma.clone()], |t, v| {
                    let y = t.bias_add(v[0], v[1], 1).unwrap();
                    probe(t, y, seed)
                }),
                check_grads(std::slice::from_ref(&a), |t, v| {
                    let y = t.reshape(v[0], &[6, 4]).unwrap();
                    let y = t.cross_entropy(y, &[0, 1, 2, 3, 0, 1]).unwrap();
                    t.scale(y, 1.7)
                }),
            ];
            for (i, worst) in checks.into_iter().enumerate() {
                assert!(worst < 1e-4, "op {i} seed {seed}: {worst}");
            }
        }
    }

    #[test]
    fn conv_gradients() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = random(&[2, 4, 5, 6], &mut rng);
            let dense = random(&[3, 4, 3, 3], &mut rng);
            let grouped = random(&[4, 2, 1, 1], &mut rng);
            let depth = random(&[4, 1, 5, 5], &mut rng);
            for (w, groups, pad) in [(dense, 1, 1), (grouped, 2, 0), (depth, 4, 2)] {
                let worst = check_grads(&[x.clone(), w], |t, v| {
                    let y = t.conv2d(v[0], v[1], groups, pad).unwrap();
                    probe(t, y, seed)
                });
                assert!(worst < 1e-4, "groups {groups} seed {seed}: {worst}");
            }
        }
    }
}
