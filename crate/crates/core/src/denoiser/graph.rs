//! A small reverse-mode tape covering exactly the operations the UNet needs.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the node
//! list is a valid topological order for backpropagation. Parameters are
//! borrowed from the owning model rather than copied into the tape.

use alloc::vec;
use alloc::vec::Vec;

use crate::scalar::{gemm, Layout, Scalar};

use super::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Value<'p, F> {
    Owned(Tensor<F>),
    Param(&'p Tensor<F>),
}

#[derive(Debug)]
enum Op<F> {
    Input,
    Param(usize),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, mean: Vec<F>, rstd: Vec<F> },
    Silu(Var),
    Add(Var, Var),
    AddChannelBias { x: Var, bias: Var },
    Concat(Var, Var),
    Upsample2x(Var),
    Attention { qkv: Var, heads: usize, probs: Vec<F> },
    MulConst { x: Var, factor: Vec<F> },
    Mse { pred: Var, target: Vec<F> },
}

#[derive(Debug)]
struct Node<'p, F> {
    value: Value<'p, F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Recorded computation over a borrowed parameter set.
#[derive(Debug)]
pub struct Graph<'p, F: Scalar> {
    params: &'p [Tensor<F>],
    nodes: Vec<Node<'p, F>>,
    track: bool,
}

/// Parameter gradients produced by [`Graph::backward`], indexed by parameter id.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    pub grads: Vec<Option<Tensor<F>>>,
}

impl<'p, F: Scalar> Graph<'p, F> {
    /// A tape that records what backpropagation needs.
    pub fn new(params: &'p [Tensor<F>]) -> Self {
        Self { params, nodes: Vec::new(), track: true }
    }

    /// A tape for inference only; `backward` yields no parameter gradients.
    pub fn inference(params: &'p [Tensor<F>]) -> Self {
        Self { params, nodes: Vec::new(), track: false }
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(t) => t,
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs_grad = self.track && inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node { value: Value::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node { value: Value::Owned(t), op: Op::Input, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: usize) -> Var {
        let value = Value::Param(&self.params[id]);
        self.nodes.push(Node { value, op: Op::Param(id), needs_grad: self.track });
        Var(self.nodes.len() - 1)
    }

    /// Parameter ids referenced by this tape, in first-use order.
    pub fn touched_params(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Param(id) => Some(id),
                _ => None,
            })
            .collect();
        ids.dedup();
        ids
    }

    /// 2-D convolution with square kernels, `w: [Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, cin, h, wd) = self.value(x).dims4().expect("conv input is rank 4");
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight is rank 4");
        assert_eq!(ws[1], cin, "conv input channels");
        let (cout, k) = (ws[0], ws[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let l = ho * wo;
        let ckk = cin * k * k;
        let mut out = vec![F::zero(); n * cout * l];
        let direct = k == 1 && stride == 1 && pad == 0;
        let mut col = if direct { Vec::new() } else { vec![F::zero(); ckk * l] };
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for i in 0..n {
                let xi = &xv[i * cin * h * wd..(i + 1) * cin * h * wd];
                let src: &[F] = if direct {
                    xi
                } else {
                    im2col(xi, cin, h, wd, k, stride, pad, ho, wo, &mut col);
                    &col
                };
                let yi = &mut out[i * cout * l..(i + 1) * cout * l];
                gemm(cout, ckk, l, F::one(), wv, Layout::row_major(0, ckk), src, Layout::row_major(0, l), F::zero(), yi, Layout::row_major(0, l));
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for i in 0..n {
                    for co in 0..cout {
                        let bias = bv[co];
                        for v in &mut out[(i * cout + co) * l..(i * cout + co + 1) * l] {
                            *v += bias;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(&[n, cout, ho, wo], out).expect("conv output shape");
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(t, Op::Conv2d { x, w, b, stride, pad }, &inputs)
    }

    /// Affine map over the last axis of a `[N, in]` tensor, `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 2, "linear input is rank 2");
        assert_eq!(xs[1], ws[1], "linear input features");
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![F::zero(); n * fout];
        gemm(n, fin, fout, F::one(), self.value(x).data(), Layout::row_major(0, fin), self.value(w).data(), Layout::col_major(0, fin), F::zero(), &mut out, Layout::row_major(0, fout));
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(fout) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let t = Tensor::new(&[n, fout], out).expect("linear output shape");
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(t, Op::Linear { x, w, b }, &inputs)
    }

    /// Group normalization over `[N, C, H, W]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4().expect("group norm input is rank 4");
        assert_eq!(c % groups, 0, "groups must divide channels");
        let cpg = c / groups;
        let hw = h * w;
        let m = cpg * hw;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![F::zero(); xv.len()];
        let mut means = Vec::with_capacity(n * groups);
        let mut rstds = Vec::with_capacity(n * groups);
        let eps = F::lit(NORM_EPS);
        let inv_m = F::one() / F::lit(m as f64);
        for i in 0..n {
            for g in 0..groups {
                let start = (i * c + g * cpg) * hw;
                let seg = &xv[start..start + m];
                let mean = seg.iter().copied().sum::<F>() * inv_m;
                let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_m;
                let rstd = F::one() / (var + eps).sqrt();
                for cc in 0..cpg {
                    let ch = g * cpg + cc;
                    let (ga, be) = (gv[ch], bv[ch]);
                    let off = start + cc * hw;
                    for j in 0..hw {
                        out[off + j] = (xv[off + j] - mean) * rstd * ga + be;
                    }
                }
                means.push(mean);
                rstds.push(rstd);
            }
        }
        let t = Tensor::new(&[n, c, h, w], out).expect("group norm shape");
        self.push(t, Op::GroupNorm { x, gamma, beta, groups, mean: means, rstd: rstds }, &[x, gamma, beta])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v / (F::one() + (-v).exp()));
        self.push(t, Op::Silu(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add operands");
        let data = av.data().iter().zip(bv.data()).map(|(&p, &q)| p + q).collect();
        let t = Tensor::new(av.shape(), data).expect("add shape");
        self.push(t, Op::Add(a, b), &[a, b])
    }

    /// Adds `bias: [N, C]` to every spatial position of `x: [N, C, H, W]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4().expect("rank 4");
        assert_eq!(self.value(bias).shape(), &[n, c], "channel bias shape");
        let hw = h * w;
        let bv = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for (idx, plane) in out.chunks_mut(hw).enumerate() {
            let b = bv[idx];
            for v in plane {
                *v += b;
            }
        }
        let t = Tensor::new(&[n, c, h, w], out).expect("shape");
        self.push(t, Op::AddChannelBias { x, bias }, &[x, bias])
    }

    /// Concatenation along axis 1 (channels or features).
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        assert_eq!(sa.len(), sb.len(), "concat rank");
        assert_eq!(sa[0], sb[0], "concat batch");
        assert_eq!(sa[2..], sb[2..], "concat trailing dims");
        let n = sa[0];
        let (pa, pb) = (av.len() / n, bv.len() / n);
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for i in 0..n {
            out.extend_from_slice(&av.data()[i * pa..(i + 1) * pa]);
            out.extend_from_slice(&bv.data()[i * pb..(i + 1) * pb]);
        }
        let mut shape = sa.to_vec();
        shape[1] += sb[1];
        let t = Tensor::new(&shape, out).expect("concat shape");
        self.push(t, Op::Concat(a, b), &[a, b])
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4().expect("rank 4");
        let xv = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![F::zero(); n * c * h2 * w2];
        for p in 0..n * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for y in 0..h2 {
                for xx in 0..w2 {
                    dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let t = Tensor::new(&[n, c, h2, w2], out).expect("shape");
        self.push(t, Op::Upsample2x(x), &[x])
    }

    /// Multi-head self-attention over spatial positions.
    ///
    /// `qkv: [N, 3C, H, W]` holds queries, keys and values stacked along
    /// channels; the result is `[N, C, H, W]`.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Var {
        let (n, c3, h, w) = self.value(qkv).dims4().expect("rank 4");
        assert_eq!(c3 % 3, 0, "qkv channels");
        let c = c3 / 3;
        assert_eq!(c % heads, 0, "heads must divide channels");
        let d = c / heads;
        let l = h * w;
        let scale = F::one() / F::lit(d as f64).sqrt();
        let qv = self.value(qkv).data();
        let mut out = vec![F::zero(); n * c * l];
        let mut probs = vec![F::zero(); n * heads * l * l];
        for i in 0..n {
            for hd in 0..heads {
                let qb = (i * c3 + hd * d) * l;
                let kb = (i * c3 + c + hd * d) * l;
                let vb = (i * c3 + 2 * c + hd * d) * l;
                let pb = (i * heads + hd) * l * l;
                let p = &mut probs[pb..pb + l * l];
                gemm(l, d, l, scale, qv, Layout::col_major(qb, l), qv, Layout::row_major(kb, l), F::zero(), p, Layout::row_major(0, l));
                for row in p.chunks_mut(l) {
                    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
                    let mut sum = F::zero();
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= sum;
                    }
                }
                let ob = (i * c + hd * d) * l;
                gemm(l, l, d, F::one(), p, Layout::row_major(0, l), qv, Layout::col_major(vb, l), F::zero(), &mut out, Layout::col_major(ob, l));
            }
        }
        let t = Tensor::new(&[n, c, h, w], out).expect("shape");
        let probs = if self.track { probs } else { Vec::new() };
        self.push(t, Op::Attention { qkv, heads, probs }, &[qkv])
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, factor: Vec<F>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), factor.len(), "mul_const operand");
        let data = xv.data().iter().zip(&factor).map(|(&a, &b)| a * b).collect();
        let t = Tensor::new(xv.shape(), data).expect("shape");
        self.push(t, Op::MulConst { x, factor }, &[x])
    }

    /// Mean squared error against a constant target; a scalar node.
    pub fn mse(&mut self, pred: Var, target: &Tensor<F>) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "mse operands");
        let n = F::lit(pv.len() as f64);
        let loss = pv.data().iter().zip(target.data()).map(|(&p, &t)| (p - t) * (p - t)).sum::<F>() / n;
        let t = Tensor::new(&[], vec![loss]).expect("scalar");
        self.push(t, Op::Mse { pred, target: target.data().to_vec() }, &[pred])
    }

    /// Backpropagates from a scalar node and returns parameter gradients.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        let mut param_grads: Vec<Option<Tensor<F>>> = vec![None; self.params.len()];
        if !self.needs(root) {
            return Gradients { grads: param_grads };
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![F::one(); self.value(root).len()]);
        for idx in (0..=root.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    let shape = self.params[*id].shape();
                    match &mut param_grads[*id] {
                        Some(acc) => acc.data_mut().iter_mut().zip(&gy).for_each(|(a, &g)| *a += g),
                        slot => *slot = Some(Tensor::new(shape, gy).expect("grad shape")),
                    }
                }
                Op::Conv2d { x, w, b, stride, pad } => self.conv2d_backward(&mut grads, &gy, *x, *w, *b, *stride, *pad),
                Op::Linear { x, w, b } => {
                    let xs = self.value(*x).shape();
                    let (n, fin) = (xs[0], xs[1]);
                    let fout = self.value(*w).shape()[0];
                    if self.needs(*x) {
                        let mut dx = vec![F::zero(); n * fin];
                        gemm(n, fout, fin, F::one(), &gy, Layout::row_major(0, fout), self.value(*w).data(), Layout::row_major(0, fin), F::zero(), &mut dx, Layout::row_major(0, fin));
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.needs(*w) {
                        let mut dw = vec![F::zero(); fout * fin];
                        gemm(fout, n, fin, F::one(), &gy, Layout::col_major(0, fout), self.value(*x).data(), Layout::row_major(0, fin), F::zero(), &mut dw, Layout::row_major(0, fin));
                        accumulate(&mut grads, *w, dw);
                    }
                    if let Some(b) = b {
                        if self.needs(*b) {
                            let mut db = vec![F::zero(); fout];
                            for row in gy.chunks(fout) {
                                db.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
                            }
                            accumulate(&mut grads, *b, db);
                        }
                    }
                }
                Op::GroupNorm { x, gamma, beta, groups, mean, rstd } => {
                    self.group_norm_backward(&mut grads, &gy, *x, *gamma, *beta, *groups, mean, rstd)
                }
                Op::Silu(x) => {
                    if self.needs(*x) {
                        let dx = self
                            .value(*x)
                            .data()
                            .iter()
                            .zip(&gy)
                            .map(|(&v, &g)| {
                                let s = F::one() / (F::one() + (-v).exp());
                                g * s * (F::one() + v * (F::one() - s))
                            })
                            .collect();
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, gy.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, gy);
                    }
                }
                Op::AddChannelBias { x, bias } => {
                    let (_, _, h, w) = self.value(*x).dims4().expect("rank 4");
                    if self.needs(*bias) {
                        let db = gy.chunks(h * w).map(|p| p.iter().copied().sum::<F>()).collect();
                        accumulate(&mut grads, *bias, db);
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, gy);
                    }
                }
                Op::Concat(a, b) => {
                    let n = self.value(*a).batch();
                    let pa = self.value(*a).len() / n;
                    let pb = self.value(*b).len() / n;
                    if self.needs(*a) {
                        let da = (0..n).flat_map(|i| gy[i * (pa + pb)..i * (pa + pb) + pa].iter().copied()).collect();
                        accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let db = (0..n).flat_map(|i| gy[i * (pa + pb) + pa..(i + 1) * (pa + pb)].iter().copied()).collect();
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Upsample2x(x) => {
                    if self.needs(*x) {
                        let (n, c, h, w) = self.value(*x).dims4().expect("rank 4");
                        let w2 = 2 * w;
                        let mut dx = vec![F::zero(); n * c * h * w];
                        for p in 0..n * c {
                            let src = &gy[p * 4 * h * w..(p + 1) * 4 * h * w];
                            let dst = &mut dx[p * h * w..(p + 1) * h * w];
                            for (j, &g) in src.iter().enumerate() {
                                let (y, xx) = (j / w2, j % w2);
                                dst[(y / 2) * w + xx / 2] += g;
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Attention { qkv, heads, probs } => {
                    if self.needs(*qkv) {
                        let dqkv = self.attention_backward(&gy, *qkv, *heads, probs);
                        accumulate(&mut grads, *qkv, dqkv);
                    }
                }
                Op::MulConst { x, factor } => {
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, gy.iter().zip(factor).map(|(&g, &f)| g * f).collect());
                    }
                }
                Op::Mse { pred, target } => {
                    if self.needs(*pred) {
                        let pv = self.value(*pred).data();
                        let scale = gy[0] * F::lit(2.0) / F::lit(pv.len() as f64);
                        let dp = pv.iter().zip(target).map(|(&p, &t)| scale * (p - t)).collect();
                        accumulate(&mut grads, *pred, dp);
                    }
                }
            }
        }
        Gradients { grads: param_grads }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(&self, grads: &mut [Option<Vec<F>>], gy: &[F], x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) {
        let (n, cin, h, wd) = self.value(x).dims4().expect("rank 4");
        let ws = self.value(w).shape();
        let (cout, k) = (ws[0], ws[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let l = ho * wo;
        let ckk = cin * k * k;
        let direct = k == 1 && stride == 1 && pad == 0;
        let (need_x, need_w) = (self.needs(x), self.needs(w));
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut dw = if need_w { vec![F::zero(); cout * ckk] } else { Vec::new() };
        let mut dx = if need_x { vec![F::zero(); xv.len()] } else { Vec::new() };
        let mut col = if direct { Vec::new() } else { vec![F::zero(); ckk * l] };
        let mut dcol = if direct || !need_x { Vec::new() } else { vec![F::zero(); ckk * l] };
        let isz = cin * h * wd;
        for i in 0..n {
            let gyi = &gy[i * cout * l..(i + 1) * cout * l];
            if need_w {
                let xi = &xv[i * isz..(i + 1) * isz];
                let src: &[F] = if direct {
                    xi
                } else {
                    im2col(xi, cin, h, wd, k, stride, pad, ho, wo, &mut col);
                    &col
                };
                gemm(cout, l, ckk, F::one(), gyi, Layout::row_major(0, l), src, Layout::col_major(0, l), F::one(), &mut dw, Layout::row_major(0, ckk));
            }
            if need_x {
                let dxi = &mut dx[i * isz..(i + 1) * isz];
                if direct {
                    gemm(ckk, cout, l, F::one(), wv, Layout::col_major(0, ckk), gyi, Layout::row_major(0, l), F::zero(), dxi, Layout::row_major(0, l));
                } else {
                    gemm(ckk, cout, l, F::one(), wv, Layout::col_major(0, ckk), gyi, Layout::row_major(0, l), F::zero(), &mut dcol, Layout::row_major(0, l));
                    col2im(&dcol, cin, h, wd, k, stride, pad, ho, wo, dxi);
                }
            }
        }
        if need_w {
            accumulate(grads, w, dw);
        }
        if need_x {
            accumulate(grads, x, dx);
        }
        if let Some(b) = b {
            if self.needs(b) {
                let mut db = vec![F::zero(); cout];
                for (idx, plane) in gy.chunks(l).enumerate() {
                    db[idx % cout] += plane.iter().copied().sum::<F>();
                }
                accumulate(grads, b, db);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn group_norm_backward(&self, grads: &mut [Option<Vec<F>>], gy: &[F], x: Var, gamma: Var, beta: Var, groups: usize, mean: &[F], rstd: &[F]) {
        let (n, c, h, w) = self.value(x).dims4().expect("rank 4");
        let hw = h * w;
        let cpg = c / groups;
        let m = F::lit((cpg * hw) as f64);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let mut dgamma = vec![F::zero(); c];
        let mut dbeta = vec![F::zero(); c];
        let need_x = self.needs(x);
        let mut dx = if need_x { vec![F::zero(); xv.len()] } else { Vec::new() };
        for i in 0..n {
            for g in 0..groups {
                let (mu, rs) = (mean[i * groups + g], rstd[i * groups + g]);
                let mut sum_dxhat = F::zero();
                let mut sum_dxhat_xhat = F::zero();
                for cc in 0..cpg {
                    let ch = g * cpg + cc;
                    let off = (i * c + ch) * hw;
                    for j in 0..hw {
                        let xhat = (xv[off + j] - mu) * rs;
                        let gyv = gy[off + j];
                        dgamma[ch] += gyv * xhat;
                        dbeta[ch] += gyv;
                        let dxhat = gyv * gv[ch];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                }
                if need_x {
                    let (mean_d, mean_dx) = (sum_dxhat / m, sum_dxhat_xhat / m);
                    for cc in 0..cpg {
                        let ch = g * cpg + cc;
                        let off = (i * c + ch) * hw;
                        for j in 0..hw {
                            let xhat = (xv[off + j] - mu) * rs;
                            let dxhat = gy[off + j] * gv[ch];
                            dx[off + j] = rs * (dxhat - mean_d - xhat * mean_dx);
                        }
                    }
                }
            }
        }
        if need_x {
            accumulate(grads, x, dx);
        }
        if self.needs(gamma) {
            accumulate(grads, gamma, dgamma);
        }
        if self.needs(beta) {
            accumulate(grads, beta, dbeta);
        }
    }

    fn attention_backward(&self, gy: &[F], qkv: Var, heads: usize, probs: &[F]) -> Vec<F> {
        let (n, c3, h, w) = self.value(qkv).dims4().expect("rank 4");
        let c = c3 / 3;
        let d = c / heads;
        let l = h * w;
        let scale = F::one() / F::lit(d as f64).sqrt();
        let qv = self.value(qkv).data();
        let mut dqkv = vec![F::zero(); qv.len()];
        let mut dp = vec![F::zero(); l * l];
        for i in 0..n {
            for hd in 0..heads {
                let qb = (i * c3 + hd * d) * l;
                let kb = (i * c3 + c + hd * d) * l;
                let vb = (i * c3 + 2 * c + hd * d) * l;
                let ob = (i * c + hd * d) * l;
                let pb = (i * heads + hd) * l * l;
                let p = &probs[pb..pb + l * l];
                // dV = P^T dO
                gemm(l, l, d, F::one(), p, Layout::col_major(0, l), gy, Layout::col_major(ob, l), F::zero(), &mut dqkv, Layout::col_major(vb, l));
                // dP = dO V^T
                gemm(l, d, l, F::one(), gy, Layout::col_major(ob, l), qv, Layout::row_major(vb, l), F::zero(), &mut dp, Layout::row_major(0, l));
                // dS = P ⊙ (dP - rowsum(dP ⊙ P)), folded with the logit scale.
                for (prow, drow) in p.chunks(l).zip(dp.chunks_mut(l)) {
                    let dot = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum::<F>();
                    for (dv, &pv) in drow.iter_mut().zip(prow) {
                        *dv = pv * (*dv - dot) * scale;
                    }
                }
                // dQ = dS K ; dK = dS^T Q
                gemm(l, l, d, F::one(), &dp, Layout::row_major(0, l), qv, Layout::col_major(kb, l), F::zero(), &mut dqkv, Layout::col_major(qb, l));
                gemm(l, l, d, F::one(), &dp, Layout::col_major(0, l), qv, Layout::col_major(qb, l), F::zero(), &mut dqkv, Layout::col_major(kb, l));
            }
        }
        dqkv
    }
}

fn accumulate<F: Scalar>(grads: &mut [Option<Vec<F>>], v: Var, g: Vec<F>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        slot => *slot = Some(g),
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<F: Scalar>(x: &[F], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize, col: &mut [F]) {
    let l = ho * wo;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut col[row * l..(row + 1) * l];
                let (lo, hi) = valid_cols(w, wo, kj, stride, pad);
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(F::zero());
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    drow[..lo].fill(F::zero());
                    drow[hi.max(lo)..].fill(F::zero());
                    if stride == 1 {
                        let start = (lo + kj) - pad;
                        if hi > lo {
                            drow[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        }
                    } else {
                        for ox in lo..hi {
                            drow[ox] = src[ox * stride + kj - pad];
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `[lo, hi)` whose kernel tap `kj` lands inside the input row.
fn valid_cols(w: usize, wo: usize, kj: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if kj >= pad { 0 } else { (pad - kj).div_ceil(stride) };
    let hi = if w + pad <= kj { 0 } else { ((w + pad - kj - 1) / stride + 1).min(wo) };
    (lo.min(wo), hi)
}

#[allow(clippy::too_many_arguments)]
fn col2im<F: Scalar>(col: &[F], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize, x: &mut [F]) {
    let l = ho * wo;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &col[row * l..(row + 1) * l];
                let (lo, hi) = valid_cols(w, wo, kj, stride, pad);
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    for ox in lo..hi {
                        dst[ox * stride + kj - pad] += srow[ox];
                    }
                }
            }
        }
    }
}
