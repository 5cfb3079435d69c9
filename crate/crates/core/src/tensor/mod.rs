//! Minimal reverse-mode autodiff over `ndarray` arrays.
//!
//! Each training or sampling step builds a fresh [`Tape`] per sample, runs the
//! forward pass eagerly, and calls [`Tape::backward`] once. Parallelism lives
//! strictly above this layer (across samples or images), so every op here is
//! single-threaded and bit-deterministic: the same inputs produce the same
//! floats in the same order on one platform.
//!
//! Ops only reference earlier node ids, so reverse iteration over the node
//! vector is a valid topological backward order. Gradients are propagated only
//! into subgraphs that contain a leaf created with `needs_grad = true`; frozen
//! parameters therefore cost no gradient GEMMs.

pub mod kernels;

use kernels::{col2im, im2col, sigmoid};
use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};

pub type Arr = ArrayD<f32>;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(pub usize);

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    AddScalar(NodeId, f32),
    MatMul(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        k: usize,
        cols: Array2<f32>,
    },
    AvgPool2(NodeId),
    Upsample2(NodeId),
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        xhat: Arr,
        inv_std: Vec<f32>,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Arr,
        inv_std: Vec<f32>,
    },
    Silu(NodeId),
    SoftmaxRows(NodeId),
    ChwToTokens(NodeId),
    TokensToChw(NodeId, usize, usize),
    Reshape(NodeId, Vec<usize>),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    ConcatChannels(NodeId, NodeId),
    MulChan(NodeId, NodeId),
    AddChan(NodeId, NodeId),
    AddRowBroadcast(NodeId, NodeId),
    EmbedRows(NodeId, Vec<usize>),
    MeanSpatial(NodeId),
    Mse(NodeId, Arr),
    CeRows {
        x: NodeId,
        targets: Vec<usize>,
        probs: Array2<f32>,
    },
    AddN(Vec<NodeId>),
}

struct Node {
    value: Arr,
    needs_grad: bool,
    op: Op,
}

/// Gradients produced by one backward pass, indexed by node id.
pub struct Grads {
    g: Vec<Option<Arr>>,
}

impl Grads {
    pub fn take(&mut self, id: NodeId) -> Option<Arr> {
        self.g[id.0].take()
    }
    pub fn get(&self, id: NodeId) -> Option<&Arr> {
        self.g[id.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(256) }
    }

    pub fn value(&self, id: NodeId) -> &Arr {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f32 {
        let v = &self.nodes[id.0].value;
        debug_assert_eq!(v.len(), 1);
        v.iter().next().copied().unwrap()
    }

    fn push(&mut self, value: Arr, needs_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node { value, needs_grad, op });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    // ---- leaves -----------------------------------------------------------

    pub fn leaf(&mut self, value: Arr, needs_grad: bool) -> NodeId {
        self.push(value, needs_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Arr) -> NodeId {
        self.leaf(value, false)
    }

    // ---- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, self.ng(&[a, b]), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, self.ng(&[a, b]), Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, self.ng(&[a, b]), Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(v, self.ng(&[a]), Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f32) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(v, self.ng(&[a]), Op::AddScalar(a, c))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * sigmoid(x));
        self.push(v, self.ng(&[a]), Op::Silu(a))
    }

    // ---- linear algebra ---------------------------------------------------

    /// [M,K] x [K,N] -> [M,N]
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = as2(&self.nodes[a.0].value);
        let bv = as2(&self.nodes[b.0].value);
        let v = av.dot(&bv).into_dyn();
        self.push(v, self.ng(&[a, b]), Op::MatMul(a, b))
    }

    /// Stride-1 same-padding convolution; x [Cin,H,W], w [Cout,Cin,k,k], b [Cout].
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, k: usize) -> NodeId {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("conv input must be [C,H,W]");
        let (_, h, wd) = xv.dim();
        let wv = &self.nodes[w.0].value;
        let cout = wv.shape()[0];
        let kk = wv.shape()[1] * k * k;
        let cols = im2col(xv, k);
        let wmat = wv.view().into_shape_with_order((cout, kk)).unwrap();
        let mut y = wmat.dot(&cols); // [Cout, H*W]
        let bv = as1(&self.nodes[b.0].value);
        for (mut row, bi) in y.axis_iter_mut(Axis(0)).zip(bv.iter()) {
            row += *bi;
        }
        let v = y.into_shape_with_order(IxDyn(&[cout, h, wd])).unwrap();
        let needs = self.ng(&[x, w, b]);
        self.push(v, needs, Op::Conv2d { x, w, b, k, cols })
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = xv.dim();
        let mut y = ArrayD::<f32>::zeros(IxDyn(&[c, h / 2, w / 2]));
        for ci in 0..c {
            for yi in 0..h / 2 {
                for xi in 0..w / 2 {
                    let s = xv[[ci, 2 * yi, 2 * xi]]
                        + xv[[ci, 2 * yi, 2 * xi + 1]]
                        + xv[[ci, 2 * yi + 1, 2 * xi]]
                        + xv[[ci, 2 * yi + 1, 2 * xi + 1]];
                    y[[ci, yi, xi]] = s * 0.25;
                }
            }
        }
        self.push(y, self.ng(&[x]), Op::AvgPool2(x))
    }

    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = xv.dim();
        let mut y = ArrayD::<f32>::zeros(IxDyn(&[c, h * 2, w * 2]));
        for ci in 0..c {
            for yi in 0..h * 2 {
                for xi in 0..w * 2 {
                    y[[ci, yi, xi]] = xv[[ci, yi / 2, xi / 2]];
                }
            }
        }
        self.push(y, self.ng(&[x]), Op::Upsample2(x))
    }

    /// GroupNorm over [C,H,W] with per-channel affine.
    pub fn group_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, groups: usize) -> NodeId {
        const EPS: f32 = 1e-5;
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = xv.dim();
        debug_assert_eq!(c % groups, 0);
        let cg = c / groups;
        let m = (cg * h * w) as f64;
        let mut xhat = ArrayD::<f32>::zeros(IxDyn(&[c, h, w]));
        let mut inv_std = vec![0.0f32; groups];
        for g in 0..groups {
            let sl = xv.slice(ndarray::s![g * cg..(g + 1) * cg, .., ..]);
            let mean = sl.iter().map(|&v| v as f64).sum::<f64>() / m;
            let var = sl.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / m;
            let is = 1.0 / (var + EPS as f64).sqrt();
            inv_std[g] = is as f32;
            let mut dst = xhat.slice_mut(ndarray::s![g * cg..(g + 1) * cg, .., ..]);
            dst.assign(&sl.mapv(|v| ((v as f64 - mean) * is) as f32));
        }
        let gv = as1(&self.nodes[gamma.0].value).to_owned();
        let bv = as1(&self.nodes[beta.0].value).to_owned();
        let mut y = xhat.clone();
        for ci in 0..c {
            let mut sl = y.slice_mut(ndarray::s![ci, .., ..]);
            sl.mapv_inplace(|v| v * gv[ci] + bv[ci]);
        }
        let needs = self.ng(&[x, gamma, beta]);
        self.push(y, needs, Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std })
    }

    /// LayerNorm over the last axis of [T,C] with shared affine.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        const EPS: f32 = 1e-5;
        let xv = as2(&self.nodes[x.0].value);
        let (t, c) = xv.dim();
        let mut xhat = Array2::<f32>::zeros((t, c));
        let mut inv_std = vec![0.0f32; t];
        for ti in 0..t {
            let row = xv.row(ti);
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + EPS as f64).sqrt();
            inv_std[ti] = is as f32;
            for ci in 0..c {
                xhat[[ti, ci]] = ((row[ci] as f64 - mean) * is) as f32;
            }
        }
        let gv = as1(&self.nodes[gamma.0].value).to_owned();
        let bv = as1(&self.nodes[beta.0].value).to_owned();
        let mut y = xhat.clone();
        for ti in 0..t {
            for ci in 0..c {
                y[[ti, ci]] = y[[ti, ci]] * gv[ci] + bv[ci];
            }
        }
        let needs = self.ng(&[x, gamma, beta]);
        self.push(y.into_dyn(), needs, Op::LayerNorm { x, gamma, beta, xhat: xhat.into_dyn(), inv_std })
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xv = as2(&self.nodes[x.0].value);
        let mut y = xv.to_owned();
        for mut row in y.axis_iter_mut(Axis(0)) {
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v as f64;
            }
            let inv = (1.0 / sum) as f32;
            row.mapv_inplace(|v| v * inv);
        }
        self.push(y.into_dyn(), self.ng(&[x]), Op::SoftmaxRows(x))
    }

    // ---- shape plumbing ---------------------------------------------------

    /// [C,H,W] -> [H*W, C]
    pub fn chw_to_tokens(&mut self, x: NodeId) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = xv.dim();
        let mut y = Array2::<f32>::zeros((h * w, c));
        for ci in 0..c {
            for yi in 0..h {
                for xi in 0..w {
                    y[[yi * w + xi, ci]] = xv[[ci, yi, xi]];
                }
            }
        }
        self.push(y.into_dyn(), self.ng(&[x]), Op::ChwToTokens(x))
    }

    /// [H*W, C] -> [C,H,W]
    pub fn tokens_to_chw(&mut self, x: NodeId, h: usize, w: usize) -> NodeId {
        let xv = as2(&self.nodes[x.0].value);
        let c = xv.dim().1;
        let mut y = ArrayD::<f32>::zeros(IxDyn(&[c, h, w]));
        for ci in 0..c {
            for yi in 0..h {
                for xi in 0..w {
                    y[[ci, yi, xi]] = xv[[yi * w + xi, ci]];
                }
            }
        }
        self.push(y, self.ng(&[x]), Op::TokensToChw(x, h, w))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let old = self.nodes[x.0].value.shape().to_vec();
        let v = self.nodes[x.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: incompatible size");
        self.push(v, self.ng(&[x]), Op::Reshape(x, old))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|p| as2(&self.nodes[p.0].value)).collect();
        let v = ndarray::concatenate(Axis(0), &views).unwrap().into_dyn();
        self.push(v, self.ng(parts), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|p| as2(&self.nodes[p.0].value)).collect();
        let v = ndarray::concatenate(Axis(1), &views).unwrap().into_dyn();
        self.push(v, self.ng(parts), Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: NodeId, lo: usize, hi: usize) -> NodeId {
        let xv = as2(&self.nodes[x.0].value);
        let v = xv.slice(ndarray::s![.., lo..hi]).to_owned().into_dyn();
        self.push(v, self.ng(&[x]), Op::SliceCols(x, lo, hi))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let v = ndarray::concatenate(Axis(0), &[av, bv]).unwrap().into_dyn();
        self.push(v, self.ng(&[a, b]), Op::ConcatChannels(a, b))
    }

    // ---- broadcasts -------------------------------------------------------

    /// y[c,h,w] = x[c,h,w] * s[c]
    pub fn mul_chan(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let sv = as1(&self.nodes[s.0].value).to_owned();
        let mut y = xv.to_owned();
        for (ci, mut sl) in y.axis_iter_mut(Axis(0)).enumerate() {
            sl.mapv_inplace(|v| v * sv[ci]);
        }
        self.push(y.into_dyn(), self.ng(&[x, s]), Op::MulChan(x, s))
    }

    /// y[c,h,w] = x[c,h,w] + b[c]
    pub fn add_chan(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let bv = as1(&self.nodes[b.0].value).to_owned();
        let mut y = xv.to_owned();
        for (ci, mut sl) in y.axis_iter_mut(Axis(0)).enumerate() {
            sl.mapv_inplace(|v| v + bv[ci]);
        }
        self.push(y.into_dyn(), self.ng(&[x, b]), Op::AddChan(x, b))
    }

    /// y[t,c] = x[t,c] + r[c]
    pub fn add_row_broadcast(&mut self, x: NodeId, r: NodeId) -> NodeId {
        let xv = as2(&self.nodes[x.0].value);
        let rv = as1(&self.nodes[r.0].value);
        let mut y = xv.to_owned();
        for mut row in y.axis_iter_mut(Axis(0)) {
            row += &rv;
        }
        self.push(y.into_dyn(), self.ng(&[x, r]), Op::AddRowBroadcast(x, r))
    }

    /// Gather rows of a [V,D] table; gradient scatter-adds into the table.
    pub fn embed_rows(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let tv = as2(&self.nodes[table.0].value);
        let d = tv.dim().1;
        let mut y = Array2::<f32>::zeros((ids.len(), d));
        for (i, &id) in ids.iter().enumerate() {
            y.row_mut(i).assign(&tv.row(id));
        }
        self.push(y.into_dyn(), self.ng(&[table]), Op::EmbedRows(table, ids.to_vec()))
    }

    /// [C,H,W] -> [C] spatial mean.
    pub fn mean_spatial(&mut self, x: NodeId) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = xv.dim();
        let mut y = Array1::<f32>::zeros(c);
        for ci in 0..c {
            let mut acc = 0.0f64;
            for v in xv.index_axis(Axis(0), ci).iter() {
                acc += *v as f64;
            }
            y[ci] = (acc / (h * w) as f64) as f32;
        }
        self.push(y.into_dyn(), self.ng(&[x]), Op::MeanSpatial(x))
    }

    // ---- losses -----------------------------------------------------------

    /// Mean squared error against a constant target; scalar output.
    /// Accumulation happens in f64 so finite-difference checks stay sharp.
    pub fn mse(&mut self, a: NodeId, target: Arr) -> NodeId {
        debug_assert_eq!(self.value(a).shape(), target.shape());
        let av = &self.nodes[a.0].value;
        let mut acc = 0.0f64;
        for (x, t) in av.iter().zip(target.iter()) {
            let d = (*x - *t) as f64;
            acc += d * d;
        }
        let v = Arr::from_elem(IxDyn(&[1]), (acc / av.len() as f64) as f32);
        self.push(v, self.ng(&[a]), Op::Mse(a, target))
    }

    /// Mean cross-entropy over rows of logits [N,C] with integer targets.
    pub fn cross_entropy_rows(&mut self, x: NodeId, targets: &[usize]) -> NodeId {
        let xv = as2(&self.nodes[x.0].value);
        let (n, _c) = xv.dim();
        debug_assert_eq!(n, targets.len());
        let mut probs = xv.to_owned();
        let mut loss = 0.0f64;
        for (ti, mut row) in probs.axis_iter_mut(Axis(0)).enumerate() {
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v as f64;
            }
            let inv = 1.0 / sum;
            for v in row.iter_mut() {
                *v = (*v as f64 * inv) as f32;
            }
            loss -= (row[targets[ti]] as f64).max(1e-30).ln();
        }
        let v = Arr::from_elem(IxDyn(&[1]), (loss / n as f64) as f32);
        self.push(v, self.ng(&[x]), Op::CeRows { x, targets: targets.to_vec(), probs })
    }

    pub fn add_n(&mut self, parts: &[NodeId]) -> NodeId {
        let mut v = self.nodes[parts[0].0].value.clone();
        for p in &parts[1..] {
            v += &self.nodes[p.0].value;
        }
        self.push(v, self.ng(parts), Op::AddN(parts.to_vec()))
    }

    // ---- backward ---------------------------------------------------------

    pub fn backward(&self, loss: NodeId) -> Grads {
        let mut g: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(Arr::from_elem(IxDyn(&[1]), 1.0));
        for i in (0..=loss.0).rev() {
            if g[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let gi = g[i].take().unwrap();
            self.step_backward(i, &gi, &mut g);
            g[i] = Some(gi);
        }
        Grads { g }
    }

    fn acc(&self, g: &mut [Option<Arr>], id: NodeId, delta: Arr) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut g[id.0] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn step_backward(&self, i: usize, gi: &Arr, g: &mut [Option<Arr>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(g, *a, gi.clone());
                self.acc(g, *b, gi.clone());
            }
            Op::Sub(a, b) => {
                self.acc(g, *a, gi.clone());
                self.acc(g, *b, gi.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                self.acc(g, *a, gi * &self.nodes[b.0].value);
                self.acc(g, *b, gi * &self.nodes[a.0].value);
            }
            Op::Scale(a, c) => self.acc(g, *a, gi.mapv(|v| v * c)),
            Op::AddScalar(a, _) => self.acc(g, *a, gi.clone()),
            Op::Silu(a) => {
                let xv = &self.nodes[a.0].value;
                let d = xv.mapv(|x| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                });
                self.acc(g, *a, gi * &d);
            }
            Op::MatMul(a, b) => {
                let gv = as2(gi);
                let av = as2(&self.nodes[a.0].value);
                let bv = as2(&self.nodes[b.0].value);
                if self.nodes[a.0].needs_grad {
                    self.acc(g, *a, gv.dot(&bv.t()).into_dyn());
                }
                if self.nodes[b.0].needs_grad {
                    self.acc(g, *b, av.t().dot(&gv).into_dyn());
                }
            }
            Op::Conv2d { x, w, b, k, cols } => {
                let (cout, h, wd) = {
                    let s = gi.shape();
                    (s[0], s[1], s[2])
                };
                let gmat = gi.view().into_shape_with_order((cout, h * wd)).unwrap();
                let wv = &self.nodes[w.0].value;
                let kk = wv.shape()[1] * k * k;
                if self.nodes[w.0].needs_grad {
                    let dw = gmat.dot(&cols.t());
                    self.acc(g, *w, dw.into_shape_with_order(wv.raw_dim().clone()).unwrap().into_dyn());
                }
                if self.nodes[b.0].needs_grad {
                    let db = gmat.sum_axis(Axis(1));
                    self.acc(g, *b, db.into_dyn());
                }
                if self.nodes[x.0].needs_grad {
                    let wmat = wv.view().into_shape_with_order((cout, kk)).unwrap();
                    let dcols = wmat.t().dot(&gmat);
                    let xs = self.nodes[x.0].value.shape();
                    let mut dx = ndarray::Array3::<f32>::zeros((xs[0], xs[1], xs[2]));
                    col2im(dcols.view(), dx.view_mut(), *k);
                    self.acc(g, *x, dx.into_dyn());
                }
            }
            Op::AvgPool2(x) => {
                let s = self.nodes[x.0].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let gv = gi.view().into_dimensionality::<Ix3>().unwrap();
                let mut dx = ndarray::Array3::<f32>::zeros((c, h, w));
                for ci in 0..c {
                    for yi in 0..h {
                        for xi in 0..w {
                            dx[[ci, yi, xi]] = gv[[ci, yi / 2, xi / 2]] * 0.25;
                        }
                    }
                }
                self.acc(g, *x, dx.into_dyn());
            }
            Op::Upsample2(x) => {
                let s = self.nodes[x.0].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let gv = gi.view().into_dimensionality::<Ix3>().unwrap();
                let mut dx = ndarray::Array3::<f32>::zeros((c, h, w));
                for ci in 0..c {
                    for yi in 0..2 * h {
                        for xi in 0..2 * w {
                            dx[[ci, yi / 2, xi / 2]] += gv[[ci, yi, xi]];
                        }
                    }
                }
                self.acc(g, *x, dx.into_dyn());
            }
            Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std } => {
                let s = xhat.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let cg = c / groups;
                let m = (cg * h * w) as f64;
                let gv = gi.view().into_dimensionality::<Ix3>().unwrap();
                let xh = xhat.view().into_dimensionality::<Ix3>().unwrap();
                let gam = as1(&self.nodes[gamma.0].value).to_owned();
                if self.nodes[gamma.0].needs_grad {
                    let mut dgam = Array1::<f32>::zeros(c);
                    let mut dbet = Array1::<f32>::zeros(c);
                    for ci in 0..c {
                        let mut sg = 0.0f64;
                        let mut sgx = 0.0f64;
                        for yi in 0..h {
                            for xi in 0..w {
                                let gval = gv[[ci, yi, xi]] as f64;
                                sg += gval;
                                sgx += gval * xh[[ci, yi, xi]] as f64;
                            }
                        }
                        dgam[ci] = sgx as f32;
                        dbet[ci] = sg as f32;
                    }
                    self.acc(g, *gamma, dgam.into_dyn());
                    self.acc(g, *beta, dbet.into_dyn());
                }
                if self.nodes[x.0].needs_grad {
                    let mut dx = ndarray::Array3::<f32>::zeros((c, h, w));
                    for gr in 0..*groups {
                        let is = inv_std[gr] as f64;
                        let mut s1 = 0.0f64;
                        let mut s2 = 0.0f64;
                        for ci in gr * cg..(gr + 1) * cg {
                            for yi in 0..h {
                                for xi in 0..w {
                                    let dxh = gv[[ci, yi, xi]] as f64 * gam[ci] as f64;
                                    s1 += dxh;
                                    s2 += dxh * xh[[ci, yi, xi]] as f64;
                                }
                            }
                        }
                        for ci in gr * cg..(gr + 1) * cg {
                            for yi in 0..h {
                                for xi in 0..w {
                                    let dxh = gv[[ci, yi, xi]] as f64 * gam[ci] as f64;
                                    let v = is * (dxh - (s1 + xh[[ci, yi, xi]] as f64 * s2) / m);
                                    dx[[ci, yi, xi]] = v as f32;
                                }
                            }
                        }
                    }
                    self.acc(g, *x, dx.into_dyn());
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gv = as2(gi);
                let xh = as2(xhat);
                let (t, c) = xh.dim();
                let gam = as1(&self.nodes[gamma.0].value).to_owned();
                if self.nodes[gamma.0].needs_grad {
                    let mut dgam = Array1::<f32>::zeros(c);
                    let mut dbet = Array1::<f32>::zeros(c);
                    for ti in 0..t {
                        for ci in 0..c {
                            dgam[ci] += gv[[ti, ci]] * xh[[ti, ci]];
                            dbet[ci] += gv[[ti, ci]];
                        }
                    }
                    self.acc(g, *gamma, dgam.into_dyn());
                    self.acc(g, *beta, dbet.into_dyn());
                }
                if self.nodes[x.0].needs_grad {
                    let mut dx = Array2::<f32>::zeros((t, c));
                    let m = c as f64;
                    for ti in 0..t {
                        let is = inv_std[ti] as f64;
                        let mut s1 = 0.0f64;
                        let mut s2 = 0.0f64;
                        for ci in 0..c {
                            let dxh = gv[[ti, ci]] as f64 * gam[ci] as f64;
                            s1 += dxh;
                            s2 += dxh * xh[[ti, ci]] as f64;
                        }
                        for ci in 0..c {
                            let dxh = gv[[ti, ci]] as f64 * gam[ci] as f64;
                            dx[[ti, ci]] = (is * (dxh - (s1 + xh[[ti, ci]] as f64 * s2) / m)) as f32;
                        }
                    }
                    self.acc(g, *x, dx.into_dyn());
                }
            }
            Op::SoftmaxRows(x) => {
                let p = as2(&self.nodes[i].value);
                let gv = as2(gi);
                let (t, c) = p.dim();
                let mut dx = Array2::<f32>::zeros((t, c));
                for ti in 0..t {
                    let mut dot = 0.0f64;
                    for ci in 0..c {
                        dot += gv[[ti, ci]] as f64 * p[[ti, ci]] as f64;
                    }
                    for ci in 0..c {
                        dx[[ti, ci]] = p[[ti, ci]] * (gv[[ti, ci]] - dot as f32);
                    }
                }
                self.acc(g, *x, dx.into_dyn());
            }
            Op::ChwToTokens(x) => {
                let s = self.nodes[x.0].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let gv = as2(gi);
                let mut dx = ndarray::Array3::<f32>::zeros((c, h, w));
                for ci in 0..c {
                    for yi in 0..h {
                        for xi in 0..w {
                            dx[[ci, yi, xi]] = gv[[yi * w + xi, ci]];
                        }
                    }
                }
                self.acc(g, *x, dx.into_dyn());
            }
            Op::TokensToChw(x, h, w) => {
                let gv = gi.view().into_dimensionality::<Ix3>().unwrap();
                let c = gv.dim().0;
                let mut dx = Array2::<f32>::zeros((h * w, c));
                for ci in 0..c {
                    for yi in 0..*h {
                        for xi in 0..*w {
                            dx[[yi * w + xi, ci]] = gv[[ci, yi, xi]];
                        }
                    }
                }
                self.acc(g, *x, dx.into_dyn());
            }
            Op::Reshape(x, old) => {
                let dx = gi.clone().into_shape_with_order(IxDyn(old)).unwrap();
                self.acc(g, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let gv = as2(gi);
                let mut off = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.shape()[0];
                    let dg = gv.slice(ndarray::s![off..off + n, ..]).to_owned().into_dyn();
                    self.acc(g, *p, dg);
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let gv = as2(gi);
                let mut off = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.shape()[1];
                    let dg = gv.slice(ndarray::s![.., off..off + n]).to_owned().into_dyn();
                    self.acc(g, *p, dg);
                    off += n;
                }
            }
            Op::SliceCols(x, lo, _hi) => {
                let s = self.nodes[x.0].value.shape();
                let gv = as2(gi);
                let mut dx = Array2::<f32>::zeros((s[0], s[1]));
                dx.slice_mut(ndarray::s![.., *lo..*lo + gv.dim().1]).assign(&gv);
                self.acc(g, *x, dx.into_dyn());
            }
            Op::ConcatChannels(a, b) => {
                let ca = self.nodes[a.0].value.shape()[0];
                let gv = gi.view().into_dimensionality::<Ix3>().unwrap();
                let da = gv.slice(ndarray::s![..ca, .., ..]).to_owned().into_dyn();
                let db = gv.slice(ndarray::s![ca.., .., ..]).to_owned().into_dyn();
                self.acc(g, *a, da);
                self.acc(g, *b, db);
            }
            Op::MulChan(x, sc) => {
                let gv = gi.view().into_dimensionality::<Ix3>().unwrap();
                let sv = as1(&self.nodes[sc.0].value).to_owned();
                if self.nodes[x.0].needs_grad {
                    let mut dx = gv.to_owned();
                    for (ci, mut sl) in dx.axis_iter_mut(Axis(0)).enumerate() {
                        sl.mapv_inplace(|v| v * sv[ci]);
                    }
                    self.acc(g, *x, dx.into_dyn());
                }
                if self.nodes[sc.0].needs_grad {
                    let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().unwrap();
                    let c = xv.dim().0;
                    let mut ds = Array1::<f32>::zeros(c);
                    for ci in 0..c {
                        let mut acc = 0.0f64;
                        for (gg, xx) in gv.index_axis(Axis(0), ci).iter().zip(xv.index_axis(Axis(0), ci).iter()) {
                            acc += *gg as f64 * *xx as f64;
                        }
                        ds[ci] = acc as f32;
                    }
                    self.acc(g, *sc, ds.into_dyn());
                }
            }
            Op::AddChan(x, b) => {
                self.acc(g, *x, gi.clone());
                if self.nodes[b.0].needs_grad {
                    let gv = gi.view().into_dimensionality::<Ix3>().unwrap();
                    let c = gv.dim().0;
                    let mut db = Array1::<f32>::zeros(c);
                    for ci in 0..c {
                        db[ci] = gv.index_axis(Axis(0), ci).iter().map(|&v| v as f64).sum::<f64>() as f32;
                    }
                    self.acc(g, *b, db.into_dyn());
                }
            }
            Op::AddRowBroadcast(x, r) => {
                self.acc(g, *x, gi.clone());
                if self.nodes[r.0].needs_grad {
                    let gv = as2(gi);
                    let dr = gv.sum_axis(Axis(0));
                    self.acc(g, *r, dr.into_dyn());
                }
            }
            Op::EmbedRows(table, ids) => {
                if self.nodes[table.0].needs_grad {
                    let tv = &self.nodes[table.0].value;
                    let gv = as2(gi);
                    let mut dt = Array2::<f32>::zeros((tv.shape()[0], tv.shape()[1]));
                    for (ri, &id) in ids.iter().enumerate() {
                        let mut dst = dt.row_mut(id);
                        dst += &gv.row(ri);
                    }
                    self.acc(g, *table, dt.into_dyn());
                }
            }
            Op::MeanSpatial(x) => {
                let s = self.nodes[x.0].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let gv = as1(gi);
                let inv = 1.0 / (h * w) as f32;
                let mut dx = ndarray::Array3::<f32>::zeros((c, h, w));
                for ci in 0..c {
                    dx.index_axis_mut(Axis(0), ci).fill(gv[ci] * inv);
                }
                self.acc(g, *x, dx.into_dyn());
            }
            Op::Mse(a, target) => {
                let gs = gi[[0]];
                let av = &self.nodes[a.0].value;
                let scale = 2.0 * gs / av.len() as f32;
                let mut da = av.clone();
                for (d, t) in da.iter_mut().zip(target.iter()) {
                    *d = (*d - *t) * scale;
                }
                self.acc(g, *a, da);
            }
            Op::CeRows { x, targets, probs } => {
                let gs = gi[[0]];
                let n = targets.len();
                let mut dx = probs.clone();
                for (ti, &tgt) in targets.iter().enumerate() {
                    dx[[ti, tgt]] -= 1.0;
                }
                dx.mapv_inplace(|v| v * gs / n as f32);
                self.acc(g, *x, dx.into_dyn());
            }
            Op::AddN(parts) => {
                for p in parts {
                    self.acc(g, *p, gi.clone());
                }
            }
        }
    }
}

fn as2(a: &Arr) -> ndarray::ArrayView2<f32> {
    a.view().into_dimensionality::<Ix2>().expect("expected 2-d array")
}

fn as1(a: &Arr) -> ndarray::ArrayView1<f32> {
    a.view().into_dimensionality::<Ix1>().expect("expected 1-d array")
}
