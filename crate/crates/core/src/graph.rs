//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as it is evaluated eagerly. Calling
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! every node that depends on a leaf created with `requires_grad`.

use std::rc::Rc;

use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A fixed sparse linear map `out[k] = sum_j w[k, j] * in[j]` over flat
/// element indices. Used for crops, masks and resampling.
#[derive(Debug, Clone)]
pub struct SparseMap {
    pub in_len: usize,
    pub out_shape: Vec<usize>,
    /// CSR row offsets, `out_len + 1` entries.
    pub offsets: Vec<usize>,
    pub index: Vec<usize>,
    pub weight: Vec<f64>,
}

impl SparseMap {
    pub fn out_len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        (0..self.out_len())
            .map(|k| {
                let (s, e) = (self.offsets[k], self.offsets[k + 1]);
                self.index[s..e].iter().zip(&self.weight[s..e]).map(|(&j, &w)| w * input[j]).sum()
            })
            .collect()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Gelu(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, cols: Vec<f64> },
    ChannelNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchMatMul { a: Var, b: Var, ta: bool, tb: bool },
    SoftmaxRows(Var),
    Reshape(Var),
    ConcatChannels(Vec<Var>),
    Stack(Vec<Var>),
    Select(Var, usize),
    PixelShuffle(Var, usize),
    PixelUnshuffle(Var, usize),
    Upsample2x(Var),
    Sparse(Var, Rc<SparseMap>),
    Sum(Var),
    Mean(Var),
    L1To(Var, Tensor),
    MseTo(Var, Tensor),
    /// Scalar computed outside the graph with its gradient w.r.t. `Var`.
    External(Var, Tensor),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).map(|x| x * k);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, k), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let t = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(a);
        self.push(t, Op::LeakyRelu(a, slope), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg)
    }

    /// 2-d convolution, NCHW input, weight `[cout, cin, k, k]`, optional bias `[cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, cin, h, wd) = self.value(x).dims4();
        let (cout, wcin, k, k2) = self.value(w).dims4();
        assert_eq!(cin, wcin, "conv2d channel mismatch");
        assert_eq!(k, k2);
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d kernel larger than input");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let rows = cin * k * k;
        let spatial = ho * wo;
        let keep_cols = self.rg(w);
        let direct = k == 1 && stride == 1 && pad == 0;
        let mut out = vec![0.0; n * cout * spatial];
        let mut cols = Vec::new();
        let mut col = vec![0.0; if direct { 0 } else { rows * spatial }];
        for s in 0..n {
            let xs = &self.value(x).data()[s * cin * h * wd..(s + 1) * cin * h * wd];
            let colref: &[f64] = if direct {
                xs
            } else {
                im2col(xs, cin, h, wd, k, stride, pad, ho, wo, &mut col);
                &col
            };
            let os = &mut out[s * cout * spatial..(s + 1) * cout * spatial];
            gemm(cout, rows, spatial, self.value(w).data(), false, colref, false, 0.0, os);
            if let Some(b) = b {
                for (co, &bv) in self.value(b).data().iter().enumerate() {
                    for v in &mut os[co * spatial..(co + 1) * spatial] {
                        *v += bv;
                    }
                }
            }
            if keep_cols {
                cols.extend_from_slice(colref);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = Tensor::new(vec![n, cout, ho, wo], out).expect("conv shape");
        self.push(t, Op::Conv2d { x, w, b, stride, pad, cols }, rg)
    }

    /// Layer normalization over the channel axis at every spatial position,
    /// with per-channel affine `gamma`, `beta` of shape `[c]`.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let xv = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; n * hw];
        let mut out = vec![0.0; xv.len()];
        for s in 0..n {
            let base = s * c * hw;
            for p in 0..hw {
                let mean = (0..c).map(|ch| xv[base + ch * hw + p]).sum::<f64>() / c as f64;
                let var = (0..c).map(|ch| (xv[base + ch * hw + p] - mean).powi(2)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[s * hw + p] = is;
                for ch in 0..c {
                    let i = base + ch * hw + p;
                    xhat[i] = (xv[i] - mean) * is;
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let t = Tensor::new(vec![n, c, h, w], out).expect("norm shape");
        self.push(t, Op::ChannelNorm { x, gamma, beta, xhat, inv_std }, rg)
    }

    /// Batched matrix product over 3-d tensors `[batch, rows, cols]`, with
    /// optional transposition of either operand.
    pub fn batch_matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "batch_matmul shapes {sa:?} {sb:?}");
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        assert_eq!(k, k2, "batch_matmul inner dims");
        let batch = sa[0];
        let mut out = vec![0.0; batch * m * n];
        for s in 0..batch {
            let av = &self.value(a).data()[s * m * k..(s + 1) * m * k];
            let bv = &self.value(b).data()[s * k * n..(s + 1) * k * n];
            gemm(m, k, n, av, ta, bv, tb, 0.0, &mut out[s * m * n..(s + 1) * m * n]);
        }
        let rg = self.rg(a) || self.rg(b);
        let t = Tensor::new(vec![batch, m, n], out).expect("bmm shape");
        self.push(t, Op::BatchMatMul { a, b, ta, tb }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let cols = *t.shape().last().expect("softmax of scalar");
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let t = Tensor::new(t.shape().to_vec(), out).expect("softmax shape");
        let rg = self.rg(a);
        self.push(t, Op::SoftmaxRows(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshaped(shape).expect("reshape element count");
        let rg = self.rg(a);
        self.push(t, Op::Reshape(a), rg)
    }

    /// Concatenate NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let hw = h * w;
        let cs: Vec<usize> = parts.iter().map(|&p| self.value(p).dims4().1).collect();
        let ctot: usize = cs.iter().sum();
        let mut out = Vec::with_capacity(n * ctot * hw);
        for s in 0..n {
            for (&p, &c) in parts.iter().zip(&cs) {
                let (pn, _, ph, pw) = self.value(p).dims4();
                assert!(pn == n && ph == h && pw == w, "concat_channels shape mismatch");
                out.extend_from_slice(&self.value(p).data()[s * c * hw..(s + 1) * c * hw]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let t = Tensor::new(vec![n, ctot, h, w], out).expect("concat shape");
        self.push(t, Op::ConcatChannels(parts.to_vec()), rg)
    }

    /// Concatenate along the leading (batch) axis.
    pub fn stack(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<Tensor> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let t = Tensor::stack(&vals).expect("stack shapes");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(t, Op::Stack(parts.to_vec()), rg)
    }

    /// Batch element `i`, keeping a leading axis of 1.
    pub fn select(&mut self, a: Var, i: usize) -> Var {
        let t = self.value(a).batch_item(i);
        let rg = self.rg(a);
        self.push(t, Op::Select(a, i), rg)
    }

    /// `[n, c*r*r, h, w] -> [n, c, h*r, w*r]`.
    pub fn pixel_shuffle(&mut self, a: Var, r: usize) -> Var {
        let (n, cr, h, w) = self.value(a).dims4();
        assert_eq!(cr % (r * r), 0);
        let c = cr / (r * r);
        let mut out = vec![0.0; self.value(a).len()];
        shuffle_copy(self.value(a).data(), &mut out, n, c, h, w, r, false);
        let t = Tensor::new(vec![n, c, h * r, w * r], out).expect("shuffle shape");
        let rg = self.rg(a);
        self.push(t, Op::PixelShuffle(a, r), rg)
    }

    /// `[n, c, h*r, w*r] -> [n, c*r*r, h, w]`.
    pub fn pixel_unshuffle(&mut self, a: Var, r: usize) -> Var {
        let (n, c, hr, wr) = self.value(a).dims4();
        assert!(hr % r == 0 && wr % r == 0);
        let (h, w) = (hr / r, wr / r);
        let mut out = vec![0.0; self.value(a).len()];
        shuffle_copy(self.value(a).data(), &mut out, n, c, h, w, r, true);
        let t = Tensor::new(vec![n, c * r * r, h, w], out).expect("unshuffle shape");
        let rg = self.rg(a);
        self.push(t, Op::PixelUnshuffle(a, r), rg)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, a: Var) -> Var {
        let (n, c, h, w) = self.value(a).dims4();
        let src = self.value(a).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * h2 * w2];
        for plane in 0..n * c {
            for y in 0..h2 {
                for x in 0..w2 {
                    out[plane * h2 * w2 + y * w2 + x] = src[plane * h * w + (y / 2) * w + x / 2];
                }
            }
        }
        let t = Tensor::new(vec![n, c, h2, w2], out).expect("upsample shape");
        let rg = self.rg(a);
        self.push(t, Op::Upsample2x(a), rg)
    }

    pub fn sparse(&mut self, a: Var, map: Rc<SparseMap>) -> Var {
        assert_eq!(map.in_len, self.value(a).len(), "sparse map input length");
        let out = map.apply(self.value(a).data());
        let t = Tensor::new(map.out_shape.clone(), out).expect("sparse map shape");
        let rg = self.rg(a);
        self.push(t, Op::Sparse(a, map), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(t, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::scalar(v.sum() / v.len() as f64);
        let rg = self.rg(a);
        self.push(t, Op::Mean(a), rg)
    }

    /// Mean absolute difference to a constant target.
    pub fn l1_to(&mut self, a: Var, target: Tensor) -> Var {
        let v = self.value(a);
        assert_eq!(v.shape(), target.shape(), "l1 target shape");
        let s: f64 = v.data().iter().zip(target.data()).map(|(x, y)| (x - y).abs()).sum();
        let t = Tensor::scalar(s / v.len() as f64);
        let rg = self.rg(a);
        self.push(t, Op::L1To(a, target), rg)
    }

    /// Mean squared difference to a constant target.
    pub fn mse_to(&mut self, a: Var, target: Tensor) -> Var {
        let v = self.value(a);
        assert_eq!(v.shape(), target.shape(), "mse target shape");
        let s: f64 = v.data().iter().zip(target.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let t = Tensor::scalar(s / v.len() as f64);
        let rg = self.rg(a);
        self.push(t, Op::MseTo(a, target), rg)
    }

    /// Attach a scalar whose value and gradient w.r.t. `a` were computed
    /// outside the tape.
    pub fn external_scalar(&mut self, a: Var, value: f64, grad: Tensor) -> Var {
        assert_eq!(grad.shape(), self.shape(a), "external gradient shape");
        let rg = self.rg(a);
        self.push(Tensor::scalar(value), Op::External(a, grad), rg)
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().expect("just set").data_mut());
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate_with(grads, *a, |d| {
                    for ((d, &gv), &y) in d.iter_mut().zip(gd).zip(vb.data()) {
                        *d += gv * y;
                    }
                });
                self.accumulate_with(grads, *b, |d| {
                    for ((d, &gv), &x) in d.iter_mut().zip(gd).zip(va.data()) {
                        *d += gv * x;
                    }
                });
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.map(|x| x * k)),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.accumulate_with(grads, *a, |d| {
                    for ((d, &gv), &xv) in d.iter_mut().zip(gd).zip(x) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a).data();
                self.accumulate_with(grads, *a, |d| {
                    for ((d, &gv), &xv) in d.iter_mut().zip(gd).zip(x) {
                        *d += if xv > 0.0 { gv } else { slope * gv };
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                self.accumulate_with(grads, *a, |d| {
                    for ((d, &gv), &yv) in d.iter_mut().zip(gd).zip(y) {
                        *d += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                self.accumulate_with(grads, *a, |d| {
                    for ((d, &gv), &xv) in d.iter_mut().zip(gd).zip(x) {
                        let t = (GELU_C * (xv + GELU_A * xv * xv * xv)).tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * xv * xv);
                        *d += gv * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du);
                    }
                });
            }
            Op::Conv2d { x, w, b, stride, pad, cols } => {
                self.conv_backward(g, *x, *w, *b, *stride, *pad, cols, grads);
            }
            Op::ChannelNorm { x, gamma, beta, xhat, inv_std } => {
                let (n, c, h, w) = node.value.dims4();
                let hw = h * w;
                let gam = self.value(*gamma).data();
                self.accumulate_with(grads, *gamma, |d| {
                    for (i, (&gv, &xh)) in gd.iter().zip(xhat).enumerate() {
                        d[(i / hw) % c] += gv * xh;
                    }
                });
                self.accumulate_with(grads, *beta, |d| {
                    for (i, &gv) in gd.iter().enumerate() {
                        d[(i / hw) % c] += gv;
                    }
                });
                self.accumulate_with(grads, *x, |d| {
                    for s in 0..n {
                        let base = s * c * hw;
                        for p in 0..hw {
                            let mut sum_dxh = 0.0;
                            let mut sum_dxh_xh = 0.0;
                            for ch in 0..c {
                                let idx = base + ch * hw + p;
                                let dxh = gd[idx] * gam[ch];
                                sum_dxh += dxh;
                                sum_dxh_xh += dxh * xhat[idx];
                            }
                            let is = inv_std[s * hw + p] / c as f64;
                            for ch in 0..c {
                                let idx = base + ch * hw + p;
                                let dxh = gd[idx] * gam[ch];
                                d[idx] += is * (c as f64 * dxh - sum_dxh - xhat[idx] * sum_dxh_xh);
                            }
                        }
                    }
                });
            }
            Op::BatchMatMul { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = if *ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
                let n = if *tb { sb[1] } else { sb[2] };
                let batch = sa[0];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate_with(grads, *a, |d| {
                    for s in 0..batch {
                        let dc = &gd[s * m * n..(s + 1) * m * n];
                        let bv = &vb[s * k * n..(s + 1) * k * n];
                        let da = &mut d[s * m * k..(s + 1) * m * k];
                        if *ta {
                            gemm(k, n, m, bv, *tb, dc, true, 1.0, da);
                        } else {
                            gemm(m, n, k, dc, false, bv, !*tb, 1.0, da);
                        }
                    }
                });
                self.accumulate_with(grads, *b, |d| {
                    for s in 0..batch {
                        let dc = &gd[s * m * n..(s + 1) * m * n];
                        let av = &va[s * m * k..(s + 1) * m * k];
                        let db = &mut d[s * k * n..(s + 1) * k * n];
                        if *tb {
                            gemm(n, m, k, dc, true, av, *ta, 1.0, db);
                        } else {
                            gemm(k, m, n, av, !*ta, dc, false, 1.0, db);
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let cols = *node.value.shape().last().expect("softmax shape");
                self.accumulate_with(grads, *a, |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(cols).zip(gd.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for ((dv, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dv += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                let shaped = g.clone().reshaped(self.shape(*a)).expect("reshape grad");
                self.accumulate(grads, *a, shaped);
            }
            Op::ConcatChannels(parts) => {
                let (n, ctot, h, w) = node.value.dims4();
                let hw = h * w;
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).dims4().1;
                    self.accumulate_with(grads, p, |d| {
                        for s in 0..n {
                            let src = &gd[(s * ctot + off) * hw..(s * ctot + off + c) * hw];
                            for (dv, &gv) in d[s * c * hw..(s + 1) * c * hw].iter_mut().zip(src) {
                                *dv += gv;
                            }
                        }
                    });
                    off += c;
                }
            }
            Op::Stack(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate_with(grads, p, |d| {
                        for (dv, &gv) in d.iter_mut().zip(&gd[off..off + len]) {
                            *dv += gv;
                        }
                    });
                    off += len;
                }
            }
            Op::Select(a, i) => {
                let len = node.value.len();
                self.accumulate_with(grads, *a, |d| {
                    for (dv, &gv) in d[i * len..(i + 1) * len].iter_mut().zip(gd) {
                        *dv += gv;
                    }
                });
            }
            Op::PixelShuffle(a, r) => {
                let (n, c, hr, wr) = node.value.dims4();
                self.accumulate_with(grads, *a, |d| {
                    let mut tmp = vec![0.0; d.len()];
                    shuffle_copy(gd, &mut tmp, n, c, hr / r, wr / r, *r, true);
                    for (dv, t) in d.iter_mut().zip(tmp) {
                        *dv += t;
                    }
                });
            }
            Op::PixelUnshuffle(a, r) => {
                let (n, crr, h, w) = node.value.dims4();
                self.accumulate_with(grads, *a, |d| {
                    let mut tmp = vec![0.0; d.len()];
                    shuffle_copy(gd, &mut tmp, n, crr / (r * r), h, w, *r, false);
                    for (dv, t) in d.iter_mut().zip(tmp) {
                        *dv += t;
                    }
                });
            }
            Op::Upsample2x(a) => {
                let (n, c, h2, w2) = node.value.dims4();
                let (h, w) = (h2 / 2, w2 / 2);
                self.accumulate_with(grads, *a, |d| {
                    for plane in 0..n * c {
                        for y in 0..h2 {
                            for x in 0..w2 {
                                d[plane * h * w + (y / 2) * w + x / 2] += gd[plane * h2 * w2 + y * w2 + x];
                            }
                        }
                    }
                });
            }
            Op::Sparse(a, map) => {
                self.accumulate_with(grads, *a, |d| {
                    for k in 0..map.out_len() {
                        let gv = gd[k];
                        if gv == 0.0 {
                            continue;
                        }
                        for j in map.offsets[k]..map.offsets[k + 1] {
                            d[map.index[j]] += map.weight[j] * gv;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let gv = gd[0];
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::Mean(a) => {
                let gv = gd[0] / self.value(*a).len() as f64;
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::L1To(a, target) => {
                let x = self.value(*a);
                let k = gd[0] / x.len() as f64;
                let data = x
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&xv, &tv)| {
                        let diff = xv - tv;
                        if diff > 0.0 {
                            k
                        } else if diff < 0.0 {
                            -k
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data).expect("l1 grad"));
            }
            Op::MseTo(a, target) => {
                let x = self.value(*a);
                let k = 2.0 * gd[0] / x.len() as f64;
                let data = x.data().iter().zip(target.data()).map(|(&xv, &tv)| k * (xv - tv)).collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data).expect("mse grad"));
            }
            Op::External(a, local) => {
                let gv = gd[0];
                self.accumulate(grads, *a, local.map(|x| x * gv));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        g: &Tensor,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        cols: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (n, cin, h, wd) = self.value(x).dims4();
        let (cout, _, k, _) = self.value(w).dims4();
        let (_, _, ho, wo) = g.dims4();
        let rows = cin * k * k;
        let spatial = ho * wo;
        let gd = g.data();
        if let Some(b) = b {
            self.accumulate_with(grads, b, |d| {
                for s in 0..n {
                    for (co, dv) in d.iter_mut().enumerate() {
                        let base = (s * cout + co) * spatial;
                        *dv += gd[base..base + spatial].iter().sum::<f64>();
                    }
                }
            });
        }
        self.accumulate_with(grads, w, |d| {
            for s in 0..n {
                let col = &cols[s * rows * spatial..(s + 1) * rows * spatial];
                let dout = &gd[s * cout * spatial..(s + 1) * cout * spatial];
                gemm(cout, spatial, rows, dout, false, col, true, 1.0, d);
            }
        });
        let direct = k == 1 && stride == 1 && pad == 0;
        let wv = self.value(w).data();
        self.accumulate_with(grads, x, |d| {
            let mut dcol = vec![0.0; rows * spatial];
            for s in 0..n {
                let dout = &gd[s * cout * spatial..(s + 1) * cout * spatial];
                let dxs = &mut d[s * cin * h * wd..(s + 1) * cin * h * wd];
                if direct {
                    gemm(rows, cout, spatial, wv, true, dout, false, 1.0, dxs);
                } else {
                    gemm(rows, cout, spatial, wv, true, dout, false, 0.0, &mut dcol);
                    col2im(&dcol, cin, h, wd, k, stride, pad, ho, wo, dxs);
                }
            }
        });
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize, col: &mut [f64]) {
    for c in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[c * h * w + iy as usize * w..c * h * w + (iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(col: &[f64], cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize, dx: &mut [f64]) {
    for c in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[c * h * w + iy as usize * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Copy between the `[n, c*r*r, h, w]` and `[n, c, h*r, w*r]` layouts.
/// `to_packed` selects the direction (spatial -> channel-packed).
#[allow(clippy::too_many_arguments)]
fn shuffle_copy(src: &[f64], dst: &mut [f64], n: usize, c: usize, h: usize, w: usize, r: usize, to_packed: bool) {
    let (hr, wr) = (h * r, w * r);
    for s in 0..n {
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let pc = (s * c + ch) * r * r + i * r + j;
                    for y in 0..h {
                        for x in 0..w {
                            let packed = (pc * h + y) * w + x;
                            let spatial = ((s * c + ch) * hr + y * r + i) * wr + x * r + j;
                            if to_packed {
                                dst[packed] = src[spatial];
                            } else {
                                dst[spatial] = src[packed];
                            }
                        }
                    }
                }
            }
        }
    }
}
