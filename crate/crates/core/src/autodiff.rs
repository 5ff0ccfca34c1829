//! Tape-based reverse-mode differentiation over NCHW tensors.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and `backward` is a single reverse sweep. Operations
//! save what their backward pass needs only when at least one input
//! requires a gradient.

use crate::tensor::{gemm, MatRef, Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Batch statistics observed by a training-mode batch norm, used by the
/// caller to update running estimates.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance estimate.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: NodeId,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Upsample2x {
        x: NodeId,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    Softmax {
        x: NodeId,
    },
    /// Scalar loss whose gradients w.r.t. its inputs were computed during
    /// the forward pass.
    Loss {
        inputs: Vec<(NodeId, Vec<T>)>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu { .. } => "relu",
            Op::Add { .. } => "add",
            Op::MaxPool { .. } => "max_pool",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Linear { .. } => "linear",
            Op::Upsample2x { .. } => "upsample2x",
            Op::Concat { .. } => "concat",
            Op::Softmax { .. } => "softmax",
            Op::Loss { .. } => "loss",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    stats: Option<BatchStats<T>>,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn cols_width(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

/// Gradients indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn batch_stats(&self, id: NodeId) -> Option<&BatchStats<T>> {
        self.nodes[id.0].stats.as_ref()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad, stats: None });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// 2D convolution, NCHW input, OIHW kernel, symmetric zero padding.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert_eq!(ws.len(), 4, "conv2d kernel must be OIHW");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d kernel larger than input");
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let out = conv_forward(&cols, self.value(w).data(), b.map(|b| self.value(b).data()), &geom);
        let mut ids = vec![x, w];
        ids.extend(b);
        let rg = self.any_grad(&ids);
        let cols = if rg { cols } else { Vec::new() };
        self.push(out, Op::Conv2d { x, w, b, geom, cols }, rg)
    }

    /// Batch normalization over every axis except the channel axis (1).
    /// In training mode the batch statistics are used and recorded; in
    /// evaluation mode the supplied running statistics are used.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: Option<(&[T], &[T])>,
    ) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        assert!(xs.len() == 2 || xs.len() == 4, "batch_norm expects NC or NCHW input");
        let (n, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        let m = n * spatial;
        let eps = T::from_f64(BN_EPS);
        let xv = self.value(x).data();
        let (mean, var_biased) = match running {
            Some((rm, rv)) => (rm.to_vec(), rv.to_vec()),
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let inv_m = T::one() / T::from_f64(m as f64);
                for ch in 0..c {
                    let mut s = T::zero();
                    for i in 0..n {
                        let base = (i * c + ch) * spatial;
                        for &v in &xv[base..base + spatial] {
                            s += v;
                        }
                    }
                    let mu = s * inv_m;
                    let mut sq = T::zero();
                    for i in 0..n {
                        let base = (i * c + ch) * spatial;
                        for &v in &xv[base..base + spatial] {
                            let d = v - mu;
                            sq += d * d;
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = sq * inv_m;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<T> = var_biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        assert_eq!(g.len(), c, "batch_norm gamma size mismatch");
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * spatial;
                let (mu, is, gg, bb) = (mean[ch], inv_std[ch], g[ch], bt[ch]);
                for k in base..base + spatial {
                    let xh = (xv[k] - mu) * is;
                    xhat[k] = xh;
                    out[k] = gg * xh + bb;
                }
            }
        }
        let train = running.is_none();
        let stats = if train {
            let corr = if m > 1 { T::from_f64(m as f64 / (m as f64 - 1.0)) } else { T::one() };
            Some(BatchStats { mean, var: var_biased.iter().map(|&v| v * corr).collect() })
        } else {
            None
        };
        let rg = self.any_grad(&[x, gamma, beta]);
        let (xhat, inv_std) = if rg { (xhat, inv_std) } else { (Vec::new(), Vec::new()) };
        let id = self.push(
            Tensor::from_vec(&xs, out),
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train },
            rg,
        );
        self.nodes[id.0].stats = stats;
        id
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let out: Vec<T> = v.data().iter().map(|&a| a.max(T::zero())).collect();
        let out = Tensor::from_vec(v.shape(), out);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let out: Vec<T> = va.data().iter().zip(vb.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::from_vec(va.shape(), out);
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Add { a, b }, rg)
    }

    /// 3x3 max pooling, stride 2, padding 1.
    pub fn max_pool3x3s2(&mut self, x: NodeId) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let ho = (h + 2 - 3) / 2 + 1;
        let wo = (w + 2 - 3) / 2 + 1;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        let mut argmax = vec![0usize; out.len()];
        for plane in 0..n * c {
            let ib = plane * h * w;
            let ob = plane * ho * wo;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = None::<(T, usize)>;
                    for ky in 0..3 {
                        let iy = (oy * 2 + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * 2 + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = ib + iy as usize * w + ix as usize;
                            let v = xv[idx];
                            if best.is_none_or(|(b, _)| v > b) {
                                best = Some((v, idx));
                            }
                        }
                    }
                    let (v, idx) = best.expect("pooling window always overlaps the input");
                    out[ob + oy * wo + ox] = v;
                    argmax[ob + oy * wo + ox] = idx;
                }
            }
        }
        let rg = self.any_grad(&[x]);
        self.push(Tensor::from_vec(&[n, c, ho, wo], out), Op::MaxPool { x, argmax }, rg)
    }

    /// NCHW -> NC mean over the spatial axes.
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        let (n, c) = (xs[0], xs[1]);
        let spatial = xs[2] * xs[3];
        let inv = T::one() / T::from_f64(spatial as f64);
        let xv = self.value(x).data();
        let out: Vec<T> = (0..n * c)
            .map(|p| xv[p * spatial..(p + 1) * spatial].iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::from_vec(&[n, c], out), Op::GlobalAvgPool { x }, rg)
    }

    /// `x W^T + b` for `x: [N, F]`, `W: [O, F]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 2, "linear input must be [N, F]");
        assert_eq!(xs[1], ws[1], "linear feature mismatch");
        let (n, f, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * o];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(
            T::one(),
            MatRef::new(self.value(x).data(), n, f),
            MatRef::new(self.value(w).data(), o, f).t(),
            beta,
            &mut out,
        );
        let mut ids = vec![x, w];
        ids.extend(b);
        let rg = self.any_grad(&ids);
        self.push(Tensor::from_vec(&[n, o], out), Op::Linear { x, w, b }, rg)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let xv = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * h2 * w2];
        for plane in 0..n * c {
            let ib = plane * h * w;
            let ob = plane * h2 * w2;
            for y in 0..h2 {
                let src_row = ib + (y / 2) * w;
                let dst_row = ob + y * w2;
                for xx in 0..w2 {
                    out[dst_row + xx] = xv[src_row + xx / 2];
                }
            }
        }
        let rg = self.any_grad(&[x]);
        self.push(Tensor::from_vec(&[n, c, h2, w2], out), Op::Upsample2x { x }, rg)
    }

    /// Channel concatenation of two NCHW tensors.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        assert!(
            sa[0] == sb[0] && sa[2..] == sb[2..],
            "concat_channels shape mismatch {sa:?} vs {sb:?}"
        );
        let spatial = sa[2] * sa[3];
        let (ca, cb) = (sa[1], sb[1]);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for i in 0..sa[0] {
            out.extend_from_slice(&va[i * ca * spatial..(i + 1) * ca * spatial]);
            out.extend_from_slice(&vb[i * cb * spatial..(i + 1) * cb * spatial]);
        }
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::from_vec(&[sa[0], ca + cb, sa[2], sa[3]], out), Op::Concat { a, b }, rg)
    }

    /// Softmax over the channel axis of an NCHW tensor.
    pub fn softmax_channels(&mut self, x: NodeId) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        let out = softmax_channels(self.value(x).data(), &xs);
        let rg = self.any_grad(&[x]);
        self.push(Tensor::from_vec(&xs, out), Op::Softmax { x }, rg)
    }

    /// Appends a scalar loss node with precomputed input gradients.
    pub fn loss(&mut self, value: T, inputs: Vec<(NodeId, Vec<T>)>) -> NodeId {
        for (id, g) in &inputs {
            assert_eq!(self.value(*id).len(), g.len(), "loss gradient size mismatch");
        }
        let rg = inputs.iter().any(|(id, _)| self.requires_grad(*id));
        self.push(Tensor::from_vec(&[1], vec![value]), Op::Loss { inputs }, rg)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, root: NodeId) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            self.backprop_node(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], id: NodeId, g: Vec<T>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g) {
                    *e += v;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, cols } => {
                let g = geom;
                let hw = g.ho * g.wo;
                let width = g.cols_width();
                // dOut NCHW -> [O, N*HoWo]
                let mut dy = vec![T::zero(); g.o * width];
                for n in 0..g.n {
                    for o in 0..g.o {
                        let src = &gout[(n * g.o + o) * hw..(n * g.o + o + 1) * hw];
                        dy[o * width + n * hw..o * width + (n + 1) * hw].copy_from_slice(src);
                    }
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let db: Vec<T> = dy.chunks(width).map(|r| r.iter().copied().sum()).collect();
                        self.accumulate(grads, *b, db);
                    }
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![T::zero(); g.o * g.ckk()];
                    gemm(
                        T::one(),
                        MatRef::new(&dy, g.o, width),
                        MatRef::new(cols, g.ckk(), width).t(),
                        T::zero(),
                        &mut dw,
                    );
                    self.accumulate(grads, *w, dw);
                }
                if self.requires_grad(*x) {
                    let wv = self.value(*w).data();
                    let mut dcols = vec![T::zero(); g.ckk() * width];
                    gemm(
                        T::one(),
                        MatRef::new(wv, g.o, g.ckk()).t(),
                        MatRef::new(&dy, g.o, width),
                        T::zero(),
                        &mut dcols,
                    );
                    self.accumulate(grads, *x, col2im(&dcols, g));
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let xs = self.value(*x).shape();
                let (n, c) = (xs[0], xs[1]);
                let spatial: usize = xs[2..].iter().product();
                let m = T::from_f64((n * spatial) as f64);
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * spatial;
                        for k in base..base + spatial {
                            dgamma[ch] += gout[k] * xhat[k];
                            dbeta[ch] += gout[k];
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![T::zero(); gout.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * spatial;
                            let gi = gv[ch] * inv_std[ch];
                            if *train {
                                let sum_dy = dbeta[ch];
                                let sum_dy_xhat = dgamma[ch];
                                for k in base..base + spatial {
                                    dx[k] = gi / m * (m * gout[k] - sum_dy - xhat[k] * sum_dy_xhat);
                                }
                            } else {
                                for k in base..base + spatial {
                                    dx[k] = gi * gout[k];
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Relu { x } => {
                let dx: Vec<T> = node
                    .value
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, gout.to_vec());
                self.accumulate(grads, *b, gout.to_vec());
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&src, &g) in argmax.iter().zip(gout) {
                    dx[src] += g;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GlobalAvgPool { x } => {
                let xs = self.value(*x).shape();
                let spatial = xs[2] * xs[3];
                let inv = T::one() / T::from_f64(spatial as f64);
                let mut dx = Vec::with_capacity(self.value(*x).len());
                for &g in gout {
                    dx.extend(std::iter::repeat_n(g * inv, spatial));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let xs = self.value(*x).shape();
                let (n, f) = (xs[0], xs[1]);
                let o = self.value(*w).shape()[0];
                if self.requires_grad(*x) {
                    let mut dx = vec![T::zero(); n * f];
                    gemm(
                        T::one(),
                        MatRef::new(gout, n, o),
                        MatRef::new(self.value(*w).data(), o, f),
                        T::zero(),
                        &mut dx,
                    );
                    self.accumulate(grads, *x, dx);
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![T::zero(); o * f];
                    gemm(
                        T::one(),
                        MatRef::new(gout, n, o).t(),
                        MatRef::new(self.value(*x).data(), n, f),
                        T::zero(),
                        &mut dw,
                    );
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); o];
                    for row in gout.chunks(o) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Upsample2x { x } => {
                let xs = self.value(*x).shape();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let w2 = 2 * w;
                let mut dx = vec![T::zero(); n * c * h * w];
                for plane in 0..n * c {
                    let ib = plane * h * w;
                    let ob = plane * 4 * h * w;
                    for y in 0..2 * h {
                        for xx in 0..w2 {
                            dx[ib + (y / 2) * w + xx / 2] += gout[ob + y * w2 + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { a, b } => {
                let sa = self.value(*a).shape();
                let cb = self.value(*b).shape()[1];
                let spatial = sa[2] * sa[3];
                let (n, ca) = (sa[0], sa[1]);
                let mut da = Vec::with_capacity(n * ca * spatial);
                let mut db = Vec::with_capacity(n * cb * spatial);
                for i in 0..n {
                    let base = i * (ca + cb) * spatial;
                    da.extend_from_slice(&gout[base..base + ca * spatial]);
                    db.extend_from_slice(&gout[base + ca * spatial..base + (ca + cb) * spatial]);
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Softmax { x } => {
                let xs = node.value.shape();
                let (n, c) = (xs[0], xs[1]);
                let spatial: usize = xs[2..].iter().product();
                let p = node.value.data();
                let mut dx = vec![T::zero(); p.len()];
                for i in 0..n {
                    for s in 0..spatial {
                        let idx = |ch: usize| (i * c + ch) * spatial + s;
                        let dot: T = (0..c).map(|ch| p[idx(ch)] * gout[idx(ch)]).sum();
                        for ch in 0..c {
                            dx[idx(ch)] = p[idx(ch)] * (gout[idx(ch)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Loss { inputs } => {
                let scale = gout[0];
                for (id, g) in inputs {
                    self.accumulate(grads, *id, g.iter().map(|&v| v * scale).collect());
                }
            }
        }
    }

    /// Op names along the tape, for diagnostics.
    pub fn describe(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let width = g.cols_width();
    let hw = g.ho * g.wo;
    let mut cols = vec![T::zero(); g.ckk() * width];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let row_base = row * width;
                for n in 0..g.n {
                    let plane = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    let dst = &mut cols[row_base + n * hw..row_base + (n + 1) * hw];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let dst_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let width = g.cols_width();
    let hw = g.ho * g.wo;
    let mut x = vec![T::zero(); g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let row_base = row * width;
                for n in 0..g.n {
                    let plane_base = (n * g.c + c) * g.h * g.w;
                    let src = &cols[row_base + n * hw..row_base + (n + 1) * hw];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let xrow = plane_base + iy as usize * g.w;
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                x[xrow + ix as usize] += src[oy * g.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

fn conv_forward<T: Scalar>(cols: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Tensor<T> {
    let width = g.cols_width();
    let hw = g.ho * g.wo;
    let mut tmp = vec![T::zero(); g.o * width];
    gemm(T::one(), MatRef::new(w, g.o, g.ckk()), MatRef::new(cols, g.ckk(), width), T::zero(), &mut tmp);
    let mut out = vec![T::zero(); g.n * g.o * hw];
    for o in 0..g.o {
        let b = bias.map_or(T::zero(), |b| b[o]);
        for n in 0..g.n {
            let src = &tmp[o * width + n * hw..o * width + (n + 1) * hw];
            let dst = &mut out[(n * g.o + o) * hw..(n * g.o + o + 1) * hw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + b;
            }
        }
    }
    Tensor::from_vec(&[g.n, g.o, g.ho, g.wo], out)
}

/// Plain convolution without a tape; used by weight-adaptation checks.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let mut g = Graph::new();
    let xi = g.leaf(x.clone(), false);
    let wi = g.leaf(w.clone(), false);
    let out = g.conv2d(xi, wi, None, stride, pad);
    g.value(out).clone()
}

pub fn softmax_channels<T: Scalar>(x: &[T], shape: &[usize]) -> Vec<T> {
    let (n, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    let mut out = vec![T::zero(); x.len()];
    for i in 0..n {
        for s in 0..spatial {
            let idx = |ch: usize| (i * c + ch) * spatial + s;
            let mut mx = x[idx(0)];
            for ch in 1..c {
                mx = mx.max(x[idx(ch)]);
            }
            let mut z = T::zero();
            for ch in 0..c {
                let e = (x[idx(ch)] - mx).exp();
                out[idx(ch)] = e;
                z += e;
            }
            for ch in 0..c {
                out[idx(ch)] /= z;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Weighted sum of the output with fixed random weights, as a scalar
    /// objective for gradient checks.
    fn probe(g: &mut Graph<f64>, out: NodeId, weights: &[f64]) -> NodeId {
        let v = g.value(out).data();
        let value = v.iter().zip(weights).map(|(a, b)| a * b).sum();
        g.loss(value, vec![(out, weights.to_vec())])
    }

    /// Central-difference check of d(probe)/d(leaf) for every leaf entry.
    fn check<F>(leaves: Vec<Tensor<f64>>, build: F)
    where
        F: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let run = |leaves: &[Tensor<f64>], weights: Option<&[f64]>| {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = leaves.iter().map(|t| g.leaf(t.clone(), true)).collect();
            let out = build(&mut g, &ids);
            (g, ids, out, weights.map(|w| w.to_vec()))
        };
        let (g0, _, out0, _) = run(&leaves, None);
        let weights: Vec<f64> = (0..g0.value(out0).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |leaves: &[Tensor<f64>]| {
            let (mut g, _, out, _) = run(leaves, Some(&weights));
            let l = probe(&mut g, out, &weights);
            g.value(l).data()[0]
        };
        let (mut g, ids, out, _) = run(&leaves, Some(&weights));
        let l = probe(&mut g, out, &weights);
        let grads = g.backward(l);
        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(ids[li]).expect("leaf gradient").to_vec();
            for k in 0..leaf.len() {
                let mut plus = leaves.clone();
                plus[li].data_mut()[k] += h;
                let mut minus = leaves.clone();
                minus[li].data_mut()[k] -= h;
                let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let err = (numeric - analytic[k]).abs() / numeric.abs().max(analytic[k].abs()).max(1e-6);
                assert!(
                    err < 1e-4 || (numeric - analytic[k]).abs() < 1e-8,
                    "leaf {li} entry {k}: numeric {numeric} analytic {}",
                    analytic[k]
                );
            }
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[2, 2, 5, 5]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        check(vec![x, w, b], |g, ids| g.conv2d(ids[0], ids[1], Some(ids[2]), 2, 1));
    }

    #[test]
    fn batch_norm_train_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[3, 2, 2, 2]);
        let gamma = rand_tensor(&mut rng, &[2]);
        let beta = rand_tensor(&mut rng, &[2]);
        check(vec![x, gamma, beta], |g, ids| g.batch_norm(ids[0], ids[1], ids[2], None));
    }

    #[test]
    fn batch_norm_eval_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let gamma = rand_tensor(&mut rng, &[4]);
        let beta = rand_tensor(&mut rng, &[4]);
        let rm = [0.1, -0.2, 0.3, 0.0];
        let rv = [1.0, 0.5, 2.0, 0.9];
        check(vec![x, gamma, beta], move |g, ids| {
            g.batch_norm(ids[0], ids[1], ids[2], Some((&rm[..], &rv[..])))
        });
    }

    #[test]
    fn composite_ops_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_tensor(&mut rng, &[2, 2, 4, 4]);
        let b = rand_tensor(&mut rng, &[2, 1, 4, 4]);
        let c = rand_tensor(&mut rng, &[2, 2, 2, 2]);
        check(vec![a, b, c], |g, ids| {
            let pooled = g.max_pool3x3s2(ids[0]);
            let summed = g.add(pooled, ids[2]);
            let up = g.upsample2x(summed);
            let cat = g.concat_channels(up, ids[1]);
            let r = g.relu(cat);
            g.softmax_channels(r)
        });
    }

    #[test]
    fn linear_and_pool_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[3, 4, 2, 2]);
        let w = rand_tensor(&mut rng, &[5, 4]);
        let b = rand_tensor(&mut rng, &[5]);
        check(vec![x, w, b], |g, ids| {
            let p = g.global_avg_pool(ids[0]);
            g.linear(p, ids[1], Some(ids[2]))
        });
    }

    #[test]
    fn conv_output_shape_and_values_for_identity_kernel() {
        let x = Tensor::from_vec(&[1, 1, 3, 3], (0..9).map(|v| v as f32).collect());
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let y = conv2d_forward(&x, &k, 1, 1);
        assert_eq!(y, x);
        let y2 = conv2d_forward(&x, &k, 2, 1);
        assert_eq!(y2.shape(), &[1, 1, 2, 2]);
        assert_eq!(y2.data(), &[0.0, 2.0, 6.0, 8.0]);
    }

    #[test]
    fn batch_norm_train_records_unbiased_variance() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]), false);
        let gm = g.leaf(Tensor::full(&[1], 1.0), false);
        let bt = g.leaf(Tensor::zeros(&[1]), false);
        let y = g.batch_norm(x, gm, bt, None);
        let st = g.batch_stats(y).unwrap();
        assert_eq!(st.mean, vec![2.5]);
        assert!((st.var[0] - 5.0 / 3.0).abs() < 1e-12);
        let s: f64 = g.value(y).data().iter().sum();
        assert!(s.abs() < 1e-12);
    }
}
