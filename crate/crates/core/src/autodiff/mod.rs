//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Tape`] borrows a [`ParameterStore`] immutably, evaluates every op eagerly
//! while recording it, and [`Tape::backward`] walks the record in reverse to
//! produce parameter gradients. Only the ops the model needs are provided.

pub mod conv;

use std::collections::HashMap;

use crate::error::{GmnError, Result};
use crate::params::{ParamGrads, ParamId, ParameterStore};
use crate::real::{gemm, Real};
use crate::tensor::Tensor;

use conv::{col2im, im2col, BilinearPlan, ConvGeometry};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// `[outer, channels, inner]` view of a tensor for per-channel operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelView {
    pub outer: usize,
    pub channels: usize,
    pub inner: usize,
}

impl ChannelView {
    /// Channels along `axis` of `shape`.
    pub fn along(shape: &[usize], axis: usize) -> Self {
        ChannelView {
            outer: shape[..axis].iter().product(),
            channels: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }
}

enum Op<F> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    AddChannel { x: Var, bias: Var, view: ChannelView },
    Prelu { x: Var, slope: Var, view: ChannelView },
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    Clamp { x: Var, lo: F, hi: F },
    Concat { a: Var, b: Var, outer: usize, a_inner: usize, b_inner: usize },
    Repeat { x: Var, times: usize },
    OuterAdd { a: Var, c: Var, rows: usize, set: usize, dim: usize },
    BatchedDot { q: Var, k: Var, rows: usize, set: usize, dim: usize },
    MaskedSoftmax { x: Var, rows: usize, cols: usize, mask: Vec<bool> },
    WeightedSum { w: Var, p: Var, rows: usize, set: usize, dim: usize },
    Conv2d { x: Var, w: Var, batch: usize, out_channels: usize, geom: ConvGeometry },
    ConvTranspose2d { x: Var, w: Var, batch: usize, in_channels: usize, geom: ConvGeometry },
    AvgPool { x: Var, batch: usize, geom: ConvGeometry },
    Bilinear { x: Var, batch: usize, plan: BilinearPlan },
    Reshape(Var),
    SumAxis { x: Var, view: ChannelView },
    SumAll(Var),
    BernoulliLogLik { logits: Var, targets: Vec<F>, rows: usize, cols: usize },
    GatherRows { x: Var, index: Vec<usize>, row_len: usize },
    SliceCols { x: Var, rows: usize, cols: usize, start: usize, len: usize },
}

struct Node<F> {
    shape: Vec<usize>,
    // empty for parameters, which are read from the store
    value: Vec<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Recorded computation over a fixed parameter store.
pub struct Tape<'p, F: Real> {
    params: &'p ParameterStore<F>,
    nodes: Vec<Node<F>>,
    param_vars: HashMap<ParamId, Var>,
    row_blocks: HashMap<(ParamId, usize, usize), Var>,
}

/// Result of [`Tape::backward`].
pub struct Gradients<F> {
    params: ParamGrads<F>,
    vars: HashMap<usize, Vec<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn params(&self) -> &ParamGrads<F> {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads<F> {
        self.params
    }

    /// Gradient with respect to a leaf created by [`Tape::variable`].
    pub fn wrt(&self, v: Var) -> Option<&[F]> {
        self.vars.get(&v.0).map(|g| g.as_slice())
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(GmnError::Shape(msg))
}

impl<'p, F: Real> Tape<'p, F> {
    pub fn new(params: &'p ParameterStore<F>) -> Self {
        Tape { params, nodes: Vec::with_capacity(256), param_vars: HashMap::new(), row_blocks: HashMap::new() }
    }

    pub fn params(&self) -> &'p ParameterStore<F> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, needs_grad: bool) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || shape.iter().product::<usize>() == value.len());
        self.nodes.push(Node { shape, value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &[F] {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.get(id).data(),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].shape.iter().product()
    }

    pub fn tensor(&self, v: Var) -> Tensor<F> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("recorded shapes are consistent")
    }

    pub fn scalar(&self, v: Var) -> F {
        self.value(v)[0]
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<F>) -> Result<Var> {
        Ok(self.constant(Tensor::new(shape, data)?))
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> Var {
        self.constant(Tensor::zeros(shape))
    }

    /// Input whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, t: Tensor<F>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let shape = self.params.get(id).shape().to_vec();
        let v = self.push(shape, Vec::new(), Op::Param(id), true);
        self.param_vars.insert(id, v);
        v
    }

    /// Rows `start..start + len` of a parameter, recorded once per tape.
    pub fn param_rows(&mut self, id: ParamId, start: usize, len: usize) -> Result<Var> {
        if let Some(v) = self.row_blocks.get(&(id, start, len)) {
            return Ok(*v);
        }
        let p = self.param(id);
        let rows = self.shape(p).first().copied().unwrap_or(0);
        if start + len > rows {
            return shape_err(format!("rows {start}..{} of parameter with {rows} rows", start + len));
        }
        let v = self.gather_rows(p, (start..start + len).collect())?;
        self.row_blocks.insert((id, start, len), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err(format!("matmul {sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        gemm(false, false, m, n, k, F::one(), self.value(a), self.value(b), F::zero(), &mut out);
        let ng = self.ng(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(F, F) -> F, op: Op<F>) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let out: Vec<F> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, x: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let out: Vec<F> = self.value(x).iter().map(|&v| f(v)).collect();
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), out, op, ng)
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        self.map(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Var {
        self.map(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, |v| v * v, Op::Square(x))
    }

    pub fn clamp(&mut self, x: Var, lo: F, hi: F) -> Var {
        self.map(x, |v| v.max(lo).min(hi), Op::Clamp { x, lo, hi })
    }

    /// Add `bias[c]` to every element of channel `c` along `axis`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let view = ChannelView::along(self.shape(x), axis);
        if self.numel(bias) != view.channels {
            return shape_err(format!("bias of {} for {} channels", self.numel(bias), view.channels));
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for o in 0..view.outer {
            for c in 0..view.channels {
                let base = (o * view.channels + c) * view.inner;
                for v in &mut out[base..base + view.inner] {
                    *v += b[c];
                }
            }
        }
        let ng = self.ng(&[x, bias]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddChannel { x, bias, view }, ng))
    }

    /// Parametric ReLU with one slope per channel along `axis`.
    pub fn prelu(&mut self, x: Var, slope: Var, axis: usize) -> Result<Var> {
        let view = ChannelView::along(self.shape(x), axis);
        if self.numel(slope) != view.channels {
            return shape_err(format!("prelu slope of {} for {} channels", self.numel(slope), view.channels));
        }
        let a = self.value(slope);
        let mut out = self.value(x).to_vec();
        for o in 0..view.outer {
            for c in 0..view.channels {
                let base = (o * view.channels + c) * view.inner;
                for v in &mut out[base..base + view.inner] {
                    *v = prelu(*v, a[c]);
                }
            }
        }
        let ng = self.ng(&[x, slope]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Prelu { x, slope, view }, ng))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len()
            || axis >= sa.len()
            || sa.iter().zip(&sb).enumerate().any(|(i, (x, y))| i != axis && x != y)
        {
            return shape_err(format!("concat {sa:?} and {sb:?} along {axis}"));
        }
        let outer: usize = sa[..axis].iter().product();
        let a_inner: usize = sa[axis..].iter().product();
        let b_inner: usize = sb[axis..].iter().product();
        let mut out = Vec::with_capacity(outer * (a_inner + b_inner));
        let (va, vb) = (self.value(a), self.value(b));
        for o in 0..outer {
            out.extend_from_slice(&va[o * a_inner..(o + 1) * a_inner]);
            out.extend_from_slice(&vb[o * b_inner..(o + 1) * b_inner]);
        }
        let mut shape = sa;
        shape[axis] += sb[axis];
        let ng = self.ng(&[a, b]);
        Ok(self.push(shape, out, Op::Concat { a, b, outer, a_inner, b_inner }, ng))
    }

    /// Repeat a tensor whose leading dimension is 1 `times` times along that dimension.
    pub fn repeat(&mut self, x: Var, times: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || s[0] != 1 {
            return shape_err(format!("repeat needs a leading unit dimension, got {s:?}"));
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(v.len() * times);
        for _ in 0..times {
            out.extend_from_slice(v);
        }
        let mut shape = s;
        shape[0] = times;
        let ng = self.ng(&[x]);
        Ok(self.push(shape, out, Op::Repeat { x, times }, ng))
    }

    /// `out[b, n, :] = a[b, :] + c[n, :]`.
    pub fn outer_add(&mut self, a: Var, c: Var) -> Result<Var> {
        let (sa, sc) = (self.shape(a), self.shape(c));
        if sa.len() != 2 || sc.len() != 2 || sa[1] != sc[1] {
            return shape_err(format!("outer_add {sa:?} and {sc:?}"));
        }
        let (rows, set, dim) = (sa[0], sc[0], sa[1]);
        let (va, vc) = (self.value(a), self.value(c));
        let mut out = Vec::with_capacity(rows * set * dim);
        for b in 0..rows {
            let ra = &va[b * dim..(b + 1) * dim];
            for n in 0..set {
                out.extend(ra.iter().zip(&vc[n * dim..(n + 1) * dim]).map(|(&x, &y)| x + y));
            }
        }
        let ng = self.ng(&[a, c]);
        Ok(self.push(vec![rows, set, dim], out, Op::OuterAdd { a, c, rows, set, dim }, ng))
    }

    /// `out[b, n] = q[b, :] · k[b, n, :]`.
    pub fn batched_dot(&mut self, q: Var, k: Var) -> Result<Var> {
        let (sq, sk) = (self.shape(q), self.shape(k));
        if sq.len() != 2 || sk.len() != 3 || sq[0] != sk[0] || sq[1] != sk[2] {
            return shape_err(format!("batched_dot {sq:?} and {sk:?}"));
        }
        let (rows, set, dim) = (sk[0], sk[1], sk[2]);
        let (vq, vk) = (self.value(q), self.value(k));
        let mut out = Vec::with_capacity(rows * set);
        for b in 0..rows {
            let qb = &vq[b * dim..(b + 1) * dim];
            for n in 0..set {
                let kb = &vk[(b * set + n) * dim..(b * set + n + 1) * dim];
                out.push(qb.iter().zip(kb).map(|(&x, &y)| x * y).sum());
            }
        }
        let ng = self.ng(&[q, k]);
        Ok(self.push(vec![rows, set], out, Op::BatchedDot { q, k, rows, set, dim }, ng))
    }

    /// Row-wise softmax restricted to `mask`; masked entries are exactly zero.
    ///
    /// Fails when a row has no unmasked entry.
    pub fn masked_softmax(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || mask.len() != s[0] * s[1] {
            return shape_err(format!("masked_softmax over {s:?} with mask of {}", mask.len()));
        }
        let (rows, cols) = (s[0], s[1]);
        let mut out = vec![F::zero(); rows * cols];
        softmax_rows(self.value(x), &mask, rows, cols, &mut out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(vec![rows, cols], out, Op::MaskedSoftmax { x, rows, cols, mask }, ng))
    }

    /// `out[b, :] = Σ_n w[b, n] · p[b, n, :]`.
    pub fn weighted_sum(&mut self, w: Var, p: Var) -> Result<Var> {
        let (sw, sp) = (self.shape(w), self.shape(p));
        if sw.len() != 2 || sp.len() != 3 || sw[0] != sp[0] || sw[1] != sp[1] {
            return shape_err(format!("weighted_sum {sw:?} and {sp:?}"));
        }
        let (rows, set, dim) = (sp[0], sp[1], sp[2]);
        let (vw, vp) = (self.value(w), self.value(p));
        let mut out = vec![F::zero(); rows * dim];
        for b in 0..rows {
            let ob = &mut out[b * dim..(b + 1) * dim];
            for n in 0..set {
                let wn = vw[b * set + n];
                if wn == F::zero() {
                    continue;
                }
                for (o, &v) in ob.iter_mut().zip(&vp[(b * set + n) * dim..(b * set + n + 1) * dim]) {
                    *o += wn * v;
                }
            }
        }
        let ng = self.ng(&[w, p]);
        Ok(self.push(vec![rows, dim], out, Op::WeightedSum { w, p, rows, set, dim }, ng))
    }

    /// Cross-correlation of `x: [B, C, H, W]` with `w: [Cout, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: (usize, usize, usize, usize)) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return shape_err(format!("conv2d input {sx:?} with weights {sw:?}"));
        }
        let geom = ConvGeometry::new(sx[1], sx[2], sx[3], sw[2], sw[3], stride, pad)?;
        let (batch, cout) = (sx[0], sw[0]);
        let (img, ckk, p) = (geom.image_len(), geom.col_rows(), geom.col_cols());
        let mut cols = vec![F::zero(); ckk * p];
        let mut out = vec![F::zero(); batch * cout * p];
        let (vx, vw) = (self.value(x), self.value(w));
        for b in 0..batch {
            im2col(&geom, &vx[b * img..(b + 1) * img], &mut cols);
            gemm(false, false, cout, p, ckk, F::one(), vw, &cols, F::zero(), &mut out[b * cout * p..(b + 1) * cout * p]);
        }
        let ng = self.ng(&[x, w]);
        Ok(self.push(
            vec![batch, cout, geom.out_h, geom.out_w],
            out,
            Op::Conv2d { x, w, batch, out_channels: cout, geom },
            ng,
        ))
    }

    /// Transposed convolution (no padding) of `x: [B, Cin, H, W]` with `w: [Cin, Cout, kh, kw]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] || stride == 0 || sx[2] == 0 || sx[3] == 0 {
            return shape_err(format!("conv_transpose2d input {sx:?} with weights {sw:?}"));
        }
        let (batch, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[1], sw[2], sw[3]);
        let oh = conv::conv_transpose_out_side(h, kh, stride);
        let ow = conv::conv_transpose_out_side(wd, kw, stride);
        let geom = ConvGeometry::unpadded(cout, oh, ow, kh, kw, stride)?;
        debug_assert_eq!((geom.out_h, geom.out_w), (h, wd));
        let (hw, ckk, out_img) = (h * wd, geom.col_rows(), geom.image_len());
        let mut cols = vec![F::zero(); ckk * hw];
        let mut out = vec![F::zero(); batch * out_img];
        let (vx, vw) = (self.value(x), self.value(w));
        for b in 0..batch {
            gemm(true, false, ckk, hw, cin, F::one(), vw, &vx[b * cin * hw..(b + 1) * cin * hw], F::zero(), &mut cols);
            col2im(&geom, &cols, &mut out[b * out_img..(b + 1) * out_img]);
        }
        let ng = self.ng(&[x, w]);
        Ok(self.push(
            vec![batch, cout, oh, ow],
            out,
            Op::ConvTranspose2d { x, w, batch, in_channels: cin, geom },
            ng,
        ))
    }

    pub fn avg_pool(&mut self, x: Var, kernel_h: usize, kernel_w: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return shape_err(format!("avg_pool input {s:?}"));
        }
        let geom = ConvGeometry::unpadded(s[1], s[2], s[3], kernel_h, kernel_w, stride)?;
        let (img, oimg) = (geom.image_len(), s[1] * geom.out_h * geom.out_w);
        let mut out = vec![F::zero(); s[0] * oimg];
        let vx = self.value(x);
        for b in 0..s[0] {
            conv::avg_pool(&geom, &vx[b * img..(b + 1) * img], &mut out[b * oimg..(b + 1) * oimg]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(vec![s[0], s[1], geom.out_h, geom.out_w], out, Op::AvgPool { x, batch: s[0], geom }, ng))
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || out_h == 0 || out_w == 0 {
            return shape_err(format!("bilinear_resize input {s:?} to {out_h}×{out_w}"));
        }
        let plan = BilinearPlan::new(s[1], s[2], s[3], out_h, out_w);
        let (il, ol) = (plan.in_len(), plan.out_len());
        let mut out = vec![F::zero(); s[0] * ol];
        let vx = self.value(x);
        for b in 0..s[0] {
            plan.forward(&vx[b * il..(b + 1) * il], &mut out[b * ol..(b + 1) * ol]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(vec![s[0], s[1], out_h, out_w], out, Op::Bilinear { x, batch: s[0], plan }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.numel(x) {
            return shape_err(format!("reshape {:?} into {shape:?}", self.shape(x)));
        }
        let out = self.value(x).to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(shape, out, Op::Reshape(x), ng))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return shape_err(format!("sum over axis {axis} of {s:?}"));
        }
        let view = ChannelView::along(&s, axis);
        let vx = self.value(x);
        let mut out = vec![F::zero(); view.outer * view.inner];
        for o in 0..view.outer {
            let dst = &mut out[o * view.inner..(o + 1) * view.inner];
            for c in 0..view.channels {
                let base = (o * view.channels + c) * view.inner;
                for (d, &v) in dst.iter_mut().zip(&vx[base..base + view.inner]) {
                    *d += v;
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(shape, out, Op::SumAxis { x, view }, ng))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total: F = self.value(x).iter().copied().sum();
        let ng = self.ng(&[x]);
        self.push(vec![1], vec![total], Op::SumAll(x), ng)
    }

    /// Per-row Bernoulli log-likelihood `Σ t·l − softplus(l)` of binary `targets` under `logits`.
    pub fn bernoulli_loglik(&mut self, logits: Var, targets: Vec<F>) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || targets.len() != s[0] * s[1] {
            return shape_err(format!("bernoulli_loglik logits {s:?} with {} targets", targets.len()));
        }
        let (rows, cols) = (s[0], s[1]);
        let vl = self.value(logits);
        let out: Vec<F> = (0..rows)
            .map(|r| {
                (0..cols)
                    .map(|c| {
                        let l = vl[r * cols + c];
                        targets[r * cols + c] * l - softplus(l)
                    })
                    .sum()
            })
            .collect();
        let ng = self.ng(&[logits]);
        Ok(self.push(vec![rows], out, Op::BernoulliLogLik { logits, targets, rows, cols }, ng))
    }

    /// Select rows (first-axis slices) of `x` by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || index.iter().any(|&i| i >= s[0]) {
            return shape_err(format!("gather rows {index:?} from {s:?}"));
        }
        let row_len: usize = s[1..].iter().product();
        let vx = self.value(x);
        let mut out = Vec::with_capacity(index.len() * row_len);
        for &i in &index {
            out.extend_from_slice(&vx[i * row_len..(i + 1) * row_len]);
        }
        let mut shape = s;
        shape[0] = index.len();
        let ng = self.ng(&[x]);
        Ok(self.push(shape, out, Op::GatherRows { x, index, row_len }, ng))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start + len > s[1] {
            return shape_err(format!("slice columns {start}..{} of {s:?}", start + len));
        }
        let (rows, cols) = (s[0], s[1]);
        let vx = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&vx[r * cols + start..r * cols + start + len]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(vec![rows, len], out, Op::SliceCols { x, rows, cols, start, len }, ng))
    }

    /// `x · W + b` for `x: [B, in]`, `W: [in, out]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_channel_bias(y, b, 1)
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.numel(loss) != 1 {
            return shape_err(format!("backward needs a scalar, got {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![F::one()]);
        let mut out = Gradients { params: ParamGrads::empty(self.params.len()), vars: HashMap::new() };

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            match node.op {
                Op::Param(id) => out.params.accumulate(id, &g),
                Op::Leaf => {
                    out.vars.insert(i, g);
                }
                _ => {}
            }
        }
        Ok(out)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<F>>], v: Var) -> Option<&'g mut Vec<F>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.numel(v);
        Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
    }

    fn backprop(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if let Some(da) = self.slot(grads, *a) {
                    gemm(false, true, m, k, n, F::one(), g, self.value(*b), F::one(), da);
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm(true, false, k, n, m, F::one(), self.value(*a), g, F::one(), db);
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    add_into(db, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    for (d, &v) in db.iter_mut().zip(g) {
                        *d -= v;
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &v), &o) in da.iter_mut().zip(g).zip(self.value(*b)) {
                        *d += v * o;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for ((d, &v), &o) in db.iter_mut().zip(g).zip(self.value(*a)) {
                        *d += v * o;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (d, &v) in dx.iter_mut().zip(g) {
                        *d += v * *c;
                    }
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    add_into(dx, g);
                }
            }
            Op::AddChannel { x, bias, view } => {
                if let Some(dx) = self.slot(grads, *x) {
                    add_into(dx, g);
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for o in 0..view.outer {
                        for (c, d) in db.iter_mut().enumerate() {
                            let base = (o * view.channels + c) * view.inner;
                            *d += g[base..base + view.inner].iter().copied().sum::<F>();
                        }
                    }
                }
            }
            Op::Prelu { x, slope, view } => {
                let vx = self.value(*x);
                let a = self.value(*slope);
                if let Some(dx) = self.slot(grads, *x) {
                    for o in 0..view.outer {
                        for (c, &ac) in a.iter().enumerate() {
                            let base = (o * view.channels + c) * view.inner;
                            for j in base..base + view.inner {
                                dx[j] += if vx[j] >= F::zero() { g[j] } else { ac * g[j] };
                            }
                        }
                    }
                }
                if let Some(da) = self.slot(grads, *slope) {
                    for o in 0..view.outer {
                        for (c, d) in da.iter_mut().enumerate() {
                            let base = (o * view.channels + c) * view.inner;
                            for j in base..base + view.inner {
                                if vx[j] < F::zero() {
                                    *d += vx[j] * g[j];
                                }
                            }
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &v), &s) in dx.iter_mut().zip(g).zip(y) {
                        *d += v * s * (F::one() - s);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &v), &t) in dx.iter_mut().zip(g).zip(y) {
                        *d += v * (F::one() - t * t);
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &v), &e) in dx.iter_mut().zip(g).zip(y) {
                        *d += v * e;
                    }
                }
            }
            Op::Square(x) => {
                let vx = self.value(*x);
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &v), &xv) in dx.iter_mut().zip(g).zip(vx) {
                        *d += v * (xv + xv);
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let vx = self.value(*x);
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &v), &xv) in dx.iter_mut().zip(g).zip(vx) {
                        if xv >= *lo && xv <= *hi {
                            *d += v;
                        }
                    }
                }
            }
            Op::Concat { a, b, outer, a_inner, b_inner } => {
                let w = a_inner + b_inner;
                if let Some(da) = self.slot(grads, *a) {
                    for o in 0..*outer {
                        add_into(&mut da[o * a_inner..(o + 1) * a_inner], &g[o * w..o * w + a_inner]);
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for o in 0..*outer {
                        add_into(&mut db[o * b_inner..(o + 1) * b_inner], &g[o * w + a_inner..(o + 1) * w]);
                    }
                }
            }
            Op::Repeat { x, times } => {
                if let Some(dx) = self.slot(grads, *x) {
                    let n = dx.len();
                    for t in 0..*times {
                        add_into(dx, &g[t * n..(t + 1) * n]);
                    }
                }
            }
            Op::OuterAdd { a, c, rows, set, dim } => {
                if let Some(da) = self.slot(grads, *a) {
                    for b in 0..*rows {
                        for n in 0..*set {
                            let src = &g[(b * set + n) * dim..(b * set + n + 1) * dim];
                            add_into(&mut da[b * dim..(b + 1) * dim], src);
                        }
                    }
                }
                if let Some(dc) = self.slot(grads, *c) {
                    for b in 0..*rows {
                        for n in 0..*set {
                            let src = &g[(b * set + n) * dim..(b * set + n + 1) * dim];
                            add_into(&mut dc[n * dim..(n + 1) * dim], src);
                        }
                    }
                }
            }
            Op::BatchedDot { q, k, rows, set, dim } => {
                let (vq, vk) = (self.value(*q), self.value(*k));
                if let Some(dq) = self.slot(grads, *q) {
                    for b in 0..*rows {
                        for n in 0..*set {
                            let gv = g[b * set + n];
                            let kb = &vk[(b * set + n) * dim..(b * set + n + 1) * dim];
                            for (d, &kv) in dq[b * dim..(b + 1) * dim].iter_mut().zip(kb) {
                                *d += gv * kv;
                            }
                        }
                    }
                }
                if let Some(dk) = self.slot(grads, *k) {
                    for b in 0..*rows {
                        let qb = &vq[b * dim..(b + 1) * dim];
                        for n in 0..*set {
                            let gv = g[b * set + n];
                            for (d, &qv) in dk[(b * set + n) * dim..(b * set + n + 1) * dim].iter_mut().zip(qb) {
                                *d += gv * qv;
                            }
                        }
                    }
                }
            }
            Op::MaskedSoftmax { x, rows, cols, mask } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for r in 0..*rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for c in 0..*cols {
                            if mask[r * cols + c] {
                                dx[r * cols + c] += yr[c] * (gr[c] - dot);
                            }
                        }
                    }
                }
            }
            Op::WeightedSum { w, p, rows, set, dim } => {
                let (vw, vp) = (self.value(*w), self.value(*p));
                if let Some(dw) = self.slot(grads, *w) {
                    for b in 0..*rows {
                        let gb = &g[b * dim..(b + 1) * dim];
                        for n in 0..*set {
                            let pb = &vp[(b * set + n) * dim..(b * set + n + 1) * dim];
                            dw[b * set + n] += gb.iter().zip(pb).map(|(&a, &c)| a * c).sum::<F>();
                        }
                    }
                }
                if let Some(dp) = self.slot(grads, *p) {
                    for b in 0..*rows {
                        let gb = &g[b * dim..(b + 1) * dim];
                        for n in 0..*set {
                            let wn = vw[b * set + n];
                            for (d, &gv) in dp[(b * set + n) * dim..(b * set + n + 1) * dim].iter_mut().zip(gb) {
                                *d += wn * gv;
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, batch, out_channels, geom } => {
                let (img, ckk, p) = (geom.image_len(), geom.col_rows(), geom.col_cols());
                let cout = *out_channels;
                let vx = self.value(*x);
                let vw = self.value(*w);
                let mut cols = vec![F::zero(); ckk * p];
                if self.nodes[w.0].needs_grad {
                    let dw = self.slot(grads, *w).expect("needs grad");
                    for b in 0..*batch {
                        im2col(geom, &vx[b * img..(b + 1) * img], &mut cols);
                        gemm(false, true, cout, ckk, p, F::one(), &g[b * cout * p..(b + 1) * cout * p], &cols, F::one(), dw);
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    for b in 0..*batch {
                        gemm(true, false, ckk, p, cout, F::one(), vw, &g[b * cout * p..(b + 1) * cout * p], F::zero(), &mut cols);
                        col2im(geom, &cols, &mut dx[b * img..(b + 1) * img]);
                    }
                }
            }
            Op::ConvTranspose2d { x, w, batch, in_channels, geom } => {
                let cin = *in_channels;
                let (hw, ckk, out_img) = (geom.col_cols(), geom.col_rows(), geom.image_len());
                let vx = self.value(*x);
                let vw = self.value(*w);
                let mut dcols = vec![F::zero(); ckk * hw];
                let want_w = self.nodes[w.0].needs_grad;
                let want_x = self.nodes[x.0].needs_grad;
                for b in 0..*batch {
                    im2col(geom, &g[b * out_img..(b + 1) * out_img], &mut dcols);
                    if want_w {
                        let dw = self.slot(grads, *w).expect("needs grad");
                        gemm(false, true, cin, ckk, hw, F::one(), &vx[b * cin * hw..(b + 1) * cin * hw], &dcols, F::one(), dw);
                    }
                    if want_x {
                        let dx = self.slot(grads, *x).expect("needs grad");
                        gemm(false, false, cin, hw, ckk, F::one(), vw, &dcols, F::one(), &mut dx[b * cin * hw..(b + 1) * cin * hw]);
                    }
                }
            }
            Op::AvgPool { x, batch, geom } => {
                if let Some(dx) = self.slot(grads, *x) {
                    let (img, oimg) = (geom.image_len(), geom.channels * geom.out_h * geom.out_w);
                    for b in 0..*batch {
                        conv::avg_pool_backward(geom, &g[b * oimg..(b + 1) * oimg], &mut dx[b * img..(b + 1) * img]);
                    }
                }
            }
            Op::Bilinear { x, batch, plan } => {
                if let Some(dx) = self.slot(grads, *x) {
                    let (il, ol) = (plan.in_len(), plan.out_len());
                    for b in 0..*batch {
                        plan.backward(&g[b * ol..(b + 1) * ol], &mut dx[b * il..(b + 1) * il]);
                    }
                }
            }
            Op::SumAxis { x, view } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for o in 0..view.outer {
                        let src = &g[o * view.inner..(o + 1) * view.inner];
                        for c in 0..view.channels {
                            let base = (o * view.channels + c) * view.inner;
                            add_into(&mut dx[base..base + view.inner], src);
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::BernoulliLogLik { logits, targets, rows, cols } => {
                let vl = self.value(*logits);
                if let Some(dl) = self.slot(grads, *logits) {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            let j = r * cols + c;
                            dl[j] += g[r] * (targets[j] - sigmoid(vl[j]));
                        }
                    }
                }
            }
            Op::GatherRows { x, index, row_len } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, &src) in index.iter().enumerate() {
                        add_into(&mut dx[src * row_len..(src + 1) * row_len], &g[r * row_len..(r + 1) * row_len]);
                    }
                }
            }
            Op::SliceCols { x, rows, cols, start, len } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for r in 0..*rows {
                        add_into(&mut dx[r * cols + start..r * cols + start + len], &g[r * len..(r + 1) * len]);
                    }
                }
            }
        }
    }
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
pub fn prelu<F: Real>(x: F, slope: F) -> F {
    if x >= F::zero() {
        x
    } else {
        slope * x
    }
}

#[inline]
pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus<F: Real>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

/// Max-shifted softmax of each row over its unmasked entries.
pub fn softmax_rows<F: Real>(x: &[F], mask: &[bool], rows: usize, cols: usize, out: &mut [F]) -> Result<()> {
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let mr = &mask[r * cols..(r + 1) * cols];
        let max = xr
            .iter()
            .zip(mr)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .fold(F::neg_infinity(), F::max);
        if max == F::neg_infinity() {
            return Err(GmnError::Contract(format!("attention row {r} has no element to attend to")));
        }
        let or = &mut out[r * cols..(r + 1) * cols];
        let mut total = F::zero();
        for c in 0..cols {
            or[c] = if mr[c] { (xr[c] - max).exp() } else { F::zero() };
            total += or[c];
        }
        for v in or.iter_mut() {
            *v = *v / total;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
