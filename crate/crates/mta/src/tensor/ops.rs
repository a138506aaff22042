//! Forward implementations and backward rules for every tensor operation.
//!
//! Elementwise binary ops broadcast numpy-style (right-aligned, size-1 axes
//! stretch). Convolution and matmul are direct loops; good enough for the
//! image sizes this toolkit works at.

use crate::error::{MtaError, Result};

use super::{NormKind, Op, Tensor};

/// Probability floor applied before logarithms in cross-entropy.
pub const CE_DELTA: f64 = 1e-12;

// ---------------------------------------------------------------------------
// broadcasting machinery
// ---------------------------------------------------------------------------

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(MtaError::shape(
                op,
                format!("operands {a:?} and {b:?} do not broadcast"),
            ));
        };
    }
    Ok(out)
}

/// Per-output-axis element stride into a tensor of `shape`, with 0 where the
/// axis is broadcast.
fn bcast_strides(shape: &[usize], out_rank: usize) -> Vec<usize> {
    let mut strides = vec![0usize; out_rank];
    let offset = out_rank - shape.len();
    let mut s = 1usize;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

/// Visit every element of the broadcast output, handing the closure flat
/// offsets into the output and both operands.
fn for_each_bcast(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let n: usize = out_shape.iter().product();
    if rank == 0 {
        if n == 1 {
            f(0, 0, 0);
        }
        return;
    }
    let sa = bcast_strides(a_shape, rank);
    let sb = bcast_strides(b_shape, rank);
    let mut idx = vec![0usize; rank];
    let mut offa = 0usize;
    let mut offb = 0usize;
    for out_off in 0..n {
        f(out_off, offa, offb);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offa += sa[d];
            offb += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            offa -= sa[d] * out_shape[d];
            offb -= sb[d] * out_shape[d];
        }
    }
}

fn ewise_forward(
    op_name: &'static str,
    a: &Tensor,
    b: &Tensor,
    op: Op,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::node(a.shape().to_vec(), data, op, vec![a.clone(), b.clone()]));
    }
    let out_shape = broadcast_shape(op_name, a.shape(), b.shape())?;
    let n: usize = out_shape.iter().product();
    let mut data = vec![0.0; n];
    let (ad, bd) = (a.data(), b.data());
    for_each_bcast(&out_shape, a.shape(), b.shape(), |o, ia, ib| {
        data[o] = f(ad[ia], bd[ib]);
    });
    Ok(Tensor::node(out_shape, data, op, vec![a.clone(), b.clone()]))
}

/// Shared backward for elementwise binary ops: `dfa`/`dfb` give the partial
/// of the output w.r.t. each operand at the operand values.
fn ewise_backward(
    node: &Tensor,
    g: &[f64],
    dfa: impl Fn(f64, f64) -> f64,
    dfb: impl Fn(f64, f64) -> f64,
) {
    let a = &node.inputs()[0];
    let b = &node.inputs()[1];
    let (ad, bd) = (a.data(), b.data());
    let (wa, wb) = (a.requires_grad(), b.requires_grad());
    let mut ga = if wa { vec![0.0; a.numel()] } else { Vec::new() };
    let mut gb = if wb { vec![0.0; b.numel()] } else { Vec::new() };
    if a.shape() == b.shape() {
        for i in 0..g.len() {
            if wa {
                ga[i] = g[i] * dfa(ad[i], bd[i]);
            }
            if wb {
                gb[i] = g[i] * dfb(ad[i], bd[i]);
            }
        }
    } else {
        for_each_bcast(node.shape(), a.shape(), b.shape(), |o, ia, ib| {
            if wa {
                ga[ia] += g[o] * dfa(ad[ia], bd[ib]);
            }
            if wb {
                gb[ib] += g[o] * dfb(ad[ia], bd[ib]);
            }
        });
    }
    if wa {
        a.accum_grad(&ga);
    }
    if wb {
        b.accum_grad(&gb);
    }
}

// ---------------------------------------------------------------------------
// raw kernels
// ---------------------------------------------------------------------------

/// out[m,n] = a[m,k] * b[k,n]
fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let bo = p * n;
            let oo = i * n;
            for j in 0..n {
                out[oo + j] += av * b[bo + j];
            }
        }
    }
    out
}

/// out[m,k] = a[m,n] * b[k,n]^T
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        for p in 0..k {
            let mut s = 0.0;
            for j in 0..n {
                s += a[i * n + j] * b[p * n + j];
            }
            out[i * k + p] = s;
        }
    }
    out
}

/// out[k,n] = a[m,k]^T * g[m,n]
fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let oo = p * n;
            let go = i * n;
            for j in 0..n {
                out[oo + j] += av * g[go + j];
            }
        }
    }
    out
}

/// Valid output index range `[lo, hi]` (inclusive) along one spatial axis for
/// kernel offset `a`: positions where `i*stride + a - pad` lands inside
/// `[0, size)`. Returns None when empty.
fn conv_span(size: usize, out_size: usize, stride: usize, pad: usize, a: usize) -> Option<(usize, usize)> {
    let lo = if a >= pad { 0 } else { (pad - a).div_ceil(stride) };
    let hi_raw = size as isize - 1 + pad as isize - a as isize;
    if hi_raw < 0 {
        return None;
    }
    let hi = ((hi_raw as usize) / stride).min(out_size - 1);
    if lo > hi {
        None
    } else {
        Some((lo, hi))
    }
}

struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

fn conv_dims(x: &Tensor, wt: &Tensor, stride: usize, pad: usize) -> Result<ConvDims> {
    if x.rank() != 4 || wt.rank() != 4 {
        return Err(MtaError::shape(
            "conv2d",
            format!("input rank {} and kernel rank {} (both must be 4)", x.rank(), wt.rank()),
        ));
    }
    if stride == 0 {
        return Err(MtaError::domain("conv2d", "stride must be >= 1".to_string()));
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, ck, kh, kw) = (wt.shape()[0], wt.shape()[1], wt.shape()[2], wt.shape()[3]);
    if c != ck {
        return Err(MtaError::shape(
            "conv2d",
            format!("input has {c} channels, kernel expects {ck}"),
        ));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(MtaError::shape(
            "conv2d",
            format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
        ));
    }
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    Ok(ConvDims { n, c, h, w, f, kh, kw, ho, wo })
}

// ---------------------------------------------------------------------------
// public operations
// ---------------------------------------------------------------------------

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        ewise_forward("add", self, other, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        ewise_forward("sub", self, other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        ewise_forward("mul", self, other, Op::Mul, |a, b| a * b)
    }

    /// Elementwise division. Rejects exact-zero divisor entries; clamp first
    /// if zeros are expected.
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        if let Some(i) = other.data().iter().position(|&v| v == 0.0) {
            return Err(MtaError::domain("div", format!("divisor entry {i} is exactly zero")));
        }
        ewise_forward("div", self, other, Op::Div, |a, b| a / b)
    }

    /// Multiply every entry by a constant.
    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|&x| x * c).collect();
        Tensor::node(self.shape().to_vec(), data, Op::Scale(c), vec![self.clone()])
    }

    /// Elementwise `max(x, m)`. Entries at the floor stop propagating
    /// gradient (subgradient 0 below, 1 at and above).
    pub fn clamp_min(&self, m: f64) -> Tensor {
        let data = self.data().iter().map(|&x| x.max(m)).collect();
        Tensor::node(self.shape().to_vec(), data, Op::ClampMin(m), vec![self.clone()])
    }

    /// Rectified linear unit; the subgradient at 0 is 0.
    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        Tensor::node(self.shape().to_vec(), data, Op::Relu, vec![self.clone()])
    }

    pub fn tanh(&self) -> Tensor {
        let data = self.data().iter().map(|&x| x.tanh()).collect();
        Tensor::node(self.shape().to_vec(), data, Op::Tanh, vec![self.clone()])
    }

    /// Natural logarithm. Rejects non-positive entries; clamp first.
    pub fn log(&self) -> Result<Tensor> {
        if let Some(i) = self.data().iter().position(|&v| v <= 0.0) {
            return Err(MtaError::domain(
                "log",
                format!("entry {i} is {} (must be > 0)", self.data()[i]),
            ));
        }
        let data = self.data().iter().map(|&x| x.ln()).collect();
        Ok(Tensor::node(self.shape().to_vec(), data, Op::Log, vec![self.clone()]))
    }

    pub fn exp(&self) -> Tensor {
        let data = self.data().iter().map(|&x| x.exp()).collect();
        Tensor::node(self.shape().to_vec(), data, Op::Exp, vec![self.clone()])
    }

    /// Elementwise square root. Rejects negative entries.
    pub fn sqrt(&self) -> Result<Tensor> {
        if let Some(i) = self.data().iter().position(|&v| v < 0.0) {
            return Err(MtaError::domain(
                "sqrt",
                format!("entry {i} is {} (must be >= 0)", self.data()[i]),
            ));
        }
        let data = self.data().iter().map(|&x| x.sqrt()).collect();
        Ok(Tensor::node(self.shape().to_vec(), data, Op::Sqrt, vec![self.clone()]))
    }

    /// 2-D matrix product: `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(MtaError::shape(
                "matmul",
                format!("ranks {} and {} (both must be 2)", self.rank(), other.rank()),
            ));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        if k != k2 {
            return Err(MtaError::shape(
                "matmul",
                format!("inner dimensions {k} and {k2} differ"),
            ));
        }
        let data = matmul_kernel(self.data(), other.data(), m, k, n);
        Ok(Tensor::node(vec![m, n], data, Op::Matmul, vec![self.clone(), other.clone()]))
    }

    /// 2-D convolution. Input `[N,C,H,W]`, kernel `[F,C,kh,kw]`, zero padding.
    /// Output spatial size is `floor((H + 2*pad - kh) / stride) + 1`.
    pub fn conv2d(&self, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let d = conv_dims(self, weight, stride, pad)?;
        let (xd, wd) = (self.data(), weight.data());
        let mut out = vec![0.0; d.n * d.f * d.ho * d.wo];
        for ni in 0..d.n {
            for fi in 0..d.f {
                let obase = (ni * d.f + fi) * d.ho * d.wo;
                for ci in 0..d.c {
                    let xbase = (ni * d.c + ci) * d.h * d.w;
                    let wbase = (fi * d.c + ci) * d.kh * d.kw;
                    for a in 0..d.kh {
                        let Some((ilo, ihi)) = conv_span(d.h, d.ho, stride, pad, a) else {
                            continue;
                        };
                        for b in 0..d.kw {
                            let Some((jlo, jhi)) = conv_span(d.w, d.wo, stride, pad, b) else {
                                continue;
                            };
                            let wv = wd[wbase + a * d.kw + b];
                            for i in ilo..=ihi {
                                let y = i * stride + a - pad;
                                let xrow = xbase + y * d.w;
                                let orow = obase + i * d.wo;
                                for j in jlo..=jhi {
                                    let x = j * stride + b - pad;
                                    out[orow + j] += wv * xd[xrow + x];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(Tensor::node(
            vec![d.n, d.f, d.ho, d.wo],
            out,
            Op::Conv2d { stride, pad },
            vec![self.clone(), weight.clone()],
        ))
    }

    /// Sum of all entries (rank-0 result).
    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        Tensor::node(vec![], vec![s], Op::Sum, vec![self.clone()])
    }

    /// Arithmetic mean of all entries (rank-0 result).
    pub fn mean(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel().max(1);
        Tensor::node(vec![], vec![s / n as f64], Op::Mean, vec![self.clone()])
    }

    pub fn sum_axis(&self, axis: usize, keepdims: bool) -> Result<Tensor> {
        self.reduce_axis(axis, keepdims, false)
    }

    pub fn mean_axis(&self, axis: usize, keepdims: bool) -> Result<Tensor> {
        self.reduce_axis(axis, keepdims, true)
    }

    fn reduce_axis(&self, axis: usize, keepdims: bool, mean: bool) -> Result<Tensor> {
        let name: &'static str = if mean { "mean_axis" } else { "sum_axis" };
        if axis >= self.rank() {
            return Err(MtaError::shape(
                name,
                format!("axis {axis} out of range for rank {}", self.rank()),
            ));
        }
        let shape = self.shape();
        let pre: usize = shape[..axis].iter().product();
        let d = shape[axis];
        let post: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; pre * post];
        let xd = self.data();
        for pi in 0..pre {
            for k in 0..d {
                let row = (pi * d + k) * post;
                let orow = pi * post;
                for pj in 0..post {
                    out[orow + pj] += xd[row + pj];
                }
            }
        }
        if mean && d > 0 {
            let inv = 1.0 / d as f64;
            for v in &mut out {
                *v *= inv;
            }
        }
        let mut out_shape: Vec<usize> = shape.to_vec();
        if keepdims {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let op = if mean { Op::MeanAxis { axis } } else { Op::SumAxis { axis } };
        Ok(Tensor::node(out_shape, out, op, vec![self.clone()]))
    }

    /// Same data reinterpreted under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(MtaError::shape(
                "reshape",
                format!("cannot view {:?} ({} elements) as {shape:?} ({n})", self.shape(), self.numel()),
            ));
        }
        Ok(Tensor::node(shape.to_vec(), self.data().to_vec(), Op::Reshape, vec![self.clone()]))
    }

    /// Nearest-neighbor upsampling by 2 in both spatial axes of `[N,C,H,W]`.
    pub fn upsample2x_nearest(&self) -> Result<Tensor> {
        if self.rank() != 4 {
            return Err(MtaError::shape(
                "upsample2x_nearest",
                format!("rank {} (must be 4)", self.rank()),
            ));
        }
        let (n, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let (ho, wo) = (2 * h, 2 * w);
        let xd = self.data();
        let mut out = vec![0.0; n * c * ho * wo];
        for nc in 0..n * c {
            let xbase = nc * h * w;
            let obase = nc * ho * wo;
            for i in 0..ho {
                let xrow = xbase + (i / 2) * w;
                let orow = obase + i * wo;
                for j in 0..wo {
                    out[orow + j] = xd[xrow + j / 2];
                }
            }
        }
        Ok(Tensor::node(vec![n, c, ho, wo], out, Op::Upsample2x, vec![self.clone()]))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return Err(MtaError::shape("concat", "no tensors given".to_string()));
        };
        let rank = first.rank();
        if axis >= rank {
            return Err(MtaError::shape(
                "concat",
                format!("axis {axis} out of range for rank {rank}"),
            ));
        }
        let mut d_total = 0usize;
        for p in parts {
            if p.rank() != rank {
                return Err(MtaError::shape("concat", "ranks differ".to_string()));
            }
            for ax in 0..rank {
                if ax != axis && p.shape()[ax] != first.shape()[ax] {
                    return Err(MtaError::shape(
                        "concat",
                        format!("shapes {:?} and {:?} differ off-axis", first.shape(), p.shape()),
                    ));
                }
            }
            d_total += p.shape()[axis];
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = d_total;
        let pre: usize = out_shape[..axis].iter().product();
        let post: usize = out_shape[axis + 1..].iter().product();
        let mut out = vec![0.0; pre * d_total * post];
        let mut off = 0usize;
        for p in parts {
            let dk = p.shape()[axis];
            let pd = p.data();
            for pi in 0..pre {
                let src = pi * dk * post;
                let dst = (pi * d_total + off) * post;
                out[dst..dst + dk * post].copy_from_slice(&pd[src..src + dk * post]);
            }
            off += dk;
        }
        Ok(Tensor::node(out_shape, out, Op::Concat { axis }, parts.to_vec()))
    }

    /// Softmax over the last axis, computed with max subtraction. Each slice
    /// of the result is positive and sums to 1.
    pub fn softmax(&self) -> Result<Tensor> {
        if self.rank() == 0 {
            return Err(MtaError::shape("softmax", "rank-0 tensor has no axis".to_string()));
        }
        self.softmax_axis(self.rank() - 1)
    }

    /// Softmax over an arbitrary axis (channel axis for dense predictions).
    pub fn softmax_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(MtaError::shape(
                "softmax",
                format!("axis {axis} out of range for rank {}", self.rank()),
            ));
        }
        let shape = self.shape();
        let pre: usize = shape[..axis].iter().product();
        let d = shape[axis];
        let post: usize = shape[axis + 1..].iter().product();
        let xd = self.data();
        let mut out = vec![0.0; xd.len()];
        for pi in 0..pre {
            for pj in 0..post {
                let at = |k: usize| (pi * d + k) * post + pj;
                let mut mx = f64::NEG_INFINITY;
                for k in 0..d {
                    mx = mx.max(xd[at(k)]);
                }
                let mut z = 0.0;
                for k in 0..d {
                    let e = (xd[at(k)] - mx).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..d {
                    out[at(k)] /= z;
                }
            }
        }
        Ok(Tensor::node(shape.to_vec(), out, Op::Softmax { axis }, vec![self.clone()]))
    }

    /// Scale the whole tensor by `min(1, eps / ||t||_p)`: inside the ball it
    /// is the identity, outside it lands exactly on the boundary. The
    /// identity branch also carries the gradient at the boundary.
    pub fn project_norm(&self, eps: f64, p: NormKind) -> Result<Tensor> {
        if eps <= 0.0 {
            return Err(MtaError::domain("project_norm", format!("eps {eps} must be > 0")));
        }
        let data = project_slice(self.data(), eps, p);
        Ok(Tensor::node(
            self.shape().to_vec(),
            data,
            Op::ProjectNorm { eps, p },
            vec![self.clone()],
        ))
    }

    /// Per-sample projection: every slice along axis 0 is scaled into the
    /// eps-ball independently, so a batch of perturbations each satisfies
    /// its own norm bound. On a single-row tensor this equals
    /// [`Tensor::project_norm`].
    pub fn project_norm_batch(&self, eps: f64, p: NormKind) -> Result<Tensor> {
        if eps <= 0.0 {
            return Err(MtaError::domain("project_norm_batch", format!("eps {eps} must be > 0")));
        }
        if self.rank() == 0 {
            return Err(MtaError::shape("project_norm_batch", "need a batch axis".to_string()));
        }
        let b = self.shape()[0];
        let row = self.numel() / b.max(1);
        let xd = self.data();
        let mut out = Vec::with_capacity(self.numel());
        for i in 0..b {
            out.extend_from_slice(&project_slice(&xd[i * row..(i + 1) * row], eps, p));
        }
        Ok(Tensor::node(
            self.shape().to_vec(),
            out,
            Op::ProjectNormBatch { eps, p },
            vec![self.clone()],
        ))
    }

    /// Norm of all entries taken together.
    pub fn norm(&self, p: NormKind) -> f64 {
        norm_slice(self.data(), p)
    }

    /// Flat indices of the maximal entry along `axis` (first maximum wins).
    pub fn argmax_axis(&self, axis: usize) -> Vec<usize> {
        assert!(axis < self.rank(), "argmax axis {axis} out of range");
        let shape = self.shape();
        let pre: usize = shape[..axis].iter().product();
        let d = shape[axis];
        let post: usize = shape[axis + 1..].iter().product();
        let xd = self.data();
        let mut out = Vec::with_capacity(pre * post);
        for pi in 0..pre {
            for pj in 0..post {
                let mut best = 0usize;
                let mut bv = f64::NEG_INFINITY;
                for k in 0..d {
                    let v = xd[(pi * d + k) * post + pj];
                    if v > bv {
                        bv = v;
                        best = k;
                    }
                }
                out.push(best);
            }
        }
        out
    }

    /// New constant tensor from the given rows along axis 0. Detached from
    /// the graph: used to assemble batches from stored datasets.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        if self.rank() == 0 {
            return Err(MtaError::shape("gather_rows", "rank-0 tensor has no rows".to_string()));
        }
        let rows = self.shape()[0];
        let row_len: usize = self.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * row_len);
        for &i in idx {
            if i >= rows {
                return Err(MtaError::shape(
                    "gather_rows",
                    format!("row {i} out of range ({rows} rows)"),
                ));
            }
            data.extend_from_slice(&self.data()[i * row_len..(i + 1) * row_len]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = idx.len();
        Tensor::from_vec(data, &shape)
    }
}

pub(crate) fn norm_slice(xs: &[f64], p: NormKind) -> f64 {
    match p {
        NormKind::LInf => xs.iter().fold(0.0f64, |m, &v| m.max(v.abs())),
        NormKind::L2 => xs.iter().map(|&v| v * v).sum::<f64>().sqrt(),
    }
}

fn project_slice(xs: &[f64], eps: f64, p: NormKind) -> Vec<f64> {
    let nrm = norm_slice(xs, p);
    let s = if nrm == 0.0 { 1.0 } else { (eps / nrm).min(1.0) };
    xs.iter().map(|&v| v * s).collect()
}

/// Mean cross-entropy `-sum(onehot * log(max(p, delta)))` over the batch
/// (leading) axis. Composed from primitives, so it differentiates for free.
pub fn cross_entropy(probs: &Tensor, onehot: &Tensor) -> Result<Tensor> {
    Ok(cross_entropy_per_sample(probs, onehot, CE_DELTA)?.mean())
}

/// Per-sample cross-entropy over the last (class) axis: shape `[B, C] -> [B]`.
pub fn cross_entropy_per_sample(probs: &Tensor, onehot: &Tensor, delta: f64) -> Result<Tensor> {
    if probs.shape() != onehot.shape() {
        return Err(MtaError::shape(
            "cross_entropy",
            format!("probabilities {:?} vs targets {:?}", probs.shape(), onehot.shape()),
        ));
    }
    if probs.rank() < 1 {
        return Err(MtaError::shape("cross_entropy", "need at least one axis".to_string()));
    }
    let last = probs.rank() - 1;
    probs
        .clamp_min(delta)
        .log()?
        .mul(onehot)?
        .sum_axis(last, false)
        .map(|t| t.scale(-1.0))
}

// ---------------------------------------------------------------------------
// backward dispatch
// ---------------------------------------------------------------------------

pub(crate) fn backprop_node(node: &Tensor) {
    let Some(g) = node.grad() else { return };
    let op = node.op().expect("backprop on leaf").clone();
    match op {
        Op::Add => ewise_backward(node, &g, |_, _| 1.0, |_, _| 1.0),
        Op::Sub => ewise_backward(node, &g, |_, _| 1.0, |_, _| -1.0),
        Op::Mul => ewise_backward(node, &g, |_, b| b, |a, _| a),
        Op::Div => ewise_backward(node, &g, |_, b| 1.0 / b, |a, b| -a / (b * b)),
        Op::Scale(c) => {
            let x = &node.inputs()[0];
            let gx: Vec<f64> = g.iter().map(|&v| v * c).collect();
            x.accum_grad(&gx);
        }
        Op::ClampMin(m) => {
            let x = &node.inputs()[0];
            let gx: Vec<f64> = x
                .data()
                .iter()
                .zip(&g)
                .map(|(&xv, &gv)| if xv >= m { gv } else { 0.0 })
                .collect();
            x.accum_grad(&gx);
        }
        Op::Relu => {
            let x = &node.inputs()[0];
            let gx: Vec<f64> = x
                .data()
                .iter()
                .zip(&g)
                .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                .collect();
            x.accum_grad(&gx);
        }
        Op::Tanh => {
            let x = &node.inputs()[0];
            let y = node.data();
            let gx: Vec<f64> = y.iter().zip(&g).map(|(&yv, &gv)| gv * (1.0 - yv * yv)).collect();
            x.accum_grad(&gx);
        }
        Op::Log => {
            let x = &node.inputs()[0];
            let gx: Vec<f64> = x.data().iter().zip(&g).map(|(&xv, &gv)| gv / xv).collect();
            x.accum_grad(&gx);
        }
        Op::Exp => {
            let x = &node.inputs()[0];
            let y = node.data();
            let gx: Vec<f64> = y.iter().zip(&g).map(|(&yv, &gv)| gv * yv).collect();
            x.accum_grad(&gx);
        }
        Op::Sqrt => {
            let x = &node.inputs()[0];
            let y = node.data();
            let gx: Vec<f64> = y.iter().zip(&g).map(|(&yv, &gv)| gv * 0.5 / yv).collect();
            x.accum_grad(&gx);
        }
        Op::Matmul => {
            let a = &node.inputs()[0];
            let b = &node.inputs()[1];
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if a.requires_grad() {
                a.accum_grad(&matmul_nt(&g, b.data(), m, n, k));
            }
            if b.requires_grad() {
                b.accum_grad(&matmul_tn(a.data(), &g, m, k, n));
            }
        }
        Op::Conv2d { stride, pad } => backprop_conv2d(node, &g, stride, pad),
        Op::Sum => {
            let x = &node.inputs()[0];
            x.accum_grad(&vec![g[0]; x.numel()]);
        }
        Op::Mean => {
            let x = &node.inputs()[0];
            let n = x.numel().max(1);
            x.accum_grad(&vec![g[0] / n as f64; x.numel()]);
        }
        Op::SumAxis { axis } => backprop_reduce_axis(node, &g, axis, false),
        Op::MeanAxis { axis } => backprop_reduce_axis(node, &g, axis, true),
        Op::Reshape => {
            node.inputs()[0].accum_grad(&g);
        }
        Op::Upsample2x => {
            let x = &node.inputs()[0];
            let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let (ho, wo) = (2 * h, 2 * w);
            let mut gx = vec![0.0; x.numel()];
            for nc in 0..n * c {
                let xbase = nc * h * w;
                let obase = nc * ho * wo;
                for i in 0..ho {
                    let xrow = xbase + (i / 2) * w;
                    let orow = obase + i * wo;
                    for j in 0..wo {
                        gx[xrow + j / 2] += g[orow + j];
                    }
                }
            }
            x.accum_grad(&gx);
        }
        Op::Concat { axis } => {
            let out_shape = node.shape().to_vec();
            let pre: usize = out_shape[..axis].iter().product();
            let post: usize = out_shape[axis + 1..].iter().product();
            let d_total = out_shape[axis];
            let mut off = 0usize;
            for p in node.inputs() {
                let dk = p.shape()[axis];
                if p.requires_grad() {
                    let mut gp = vec![0.0; p.numel()];
                    for pi in 0..pre {
                        let src = (pi * d_total + off) * post;
                        let dst = pi * dk * post;
                        gp[dst..dst + dk * post].copy_from_slice(&g[src..src + dk * post]);
                    }
                    p.accum_grad(&gp);
                }
                off += dk;
            }
        }
        Op::Softmax { axis } => {
            let x = &node.inputs()[0];
            let y = node.data();
            let shape = node.shape();
            let pre: usize = shape[..axis].iter().product();
            let d = shape[axis];
            let post: usize = shape[axis + 1..].iter().product();
            let mut gx = vec![0.0; y.len()];
            for pi in 0..pre {
                for pj in 0..post {
                    let at = |k: usize| (pi * d + k) * post + pj;
                    let mut dot = 0.0;
                    for k in 0..d {
                        dot += g[at(k)] * y[at(k)];
                    }
                    for k in 0..d {
                        gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                    }
                }
            }
            x.accum_grad(&gx);
        }
        Op::ProjectNorm { eps, p } => {
            let x = &node.inputs()[0];
            let xd = x.data();
            let nrm = norm_slice(xd, p);
            if nrm <= eps || nrm == 0.0 {
                x.accum_grad(&g);
            } else {
                let gx = project_backward_slice(xd, &g, eps, nrm, p);
                x.accum_grad(&gx);
            }
        }
        Op::ProjectNormBatch { eps, p } => {
            let x = &node.inputs()[0];
            let xd = x.data();
            let b = x.shape()[0];
            let row = x.numel() / b.max(1);
            let mut gx = Vec::with_capacity(x.numel());
            for i in 0..b {
                let xs = &xd[i * row..(i + 1) * row];
                let gs = &g[i * row..(i + 1) * row];
                let nrm = norm_slice(xs, p);
                if nrm <= eps || nrm == 0.0 {
                    gx.extend_from_slice(gs);
                } else {
                    gx.extend_from_slice(&project_backward_slice(xs, gs, eps, nrm, p));
                }
            }
            x.accum_grad(&gx);
        }
    }
}

fn project_backward_slice(xd: &[f64], g: &[f64], eps: f64, nrm: f64, p: NormKind) -> Vec<f64> {
    let s = eps / nrm;
    match p {
        NormKind::LInf => {
            let mut jmax = 0usize;
            let mut best = -1.0f64;
            for (i, &v) in xd.iter().enumerate() {
                if v.abs() > best {
                    best = v.abs();
                    jmax = i;
                }
            }
            let dot: f64 = g.iter().zip(xd).map(|(&gv, &xv)| gv * xv).sum();
            let mut gx: Vec<f64> = g.iter().map(|&gv| gv * s).collect();
            gx[jmax] -= (eps / (nrm * nrm)) * xd[jmax].signum() * dot;
            gx
        }
        NormKind::L2 => {
            let dot: f64 = g.iter().zip(xd).map(|(&gv, &xv)| gv * xv).sum();
            let c = eps / (nrm * nrm * nrm);
            g.iter().zip(xd).map(|(&gv, &xv)| gv * s - xv * c * dot).collect()
        }
    }
}

fn backprop_conv2d(node: &Tensor, g: &[f64], stride: usize, pad: usize) {
    let x = &node.inputs()[0];
    let wt = &node.inputs()[1];
    let d = conv_dims(x, wt, stride, pad).expect("conv dims already validated at forward");
    let (xd, wd) = (x.data(), wt.data());
    let (want_x, want_w) = (x.requires_grad(), wt.requires_grad());
    let mut gx = if want_x { vec![0.0; x.numel()] } else { Vec::new() };
    let mut gw = if want_w { vec![0.0; wt.numel()] } else { Vec::new() };
    for ni in 0..d.n {
        for fi in 0..d.f {
            let obase = (ni * d.f + fi) * d.ho * d.wo;
            for ci in 0..d.c {
                let xbase = (ni * d.c + ci) * d.h * d.w;
                let wbase = (fi * d.c + ci) * d.kh * d.kw;
                for a in 0..d.kh {
                    let Some((ilo, ihi)) = conv_span(d.h, d.ho, stride, pad, a) else {
                        continue;
                    };
                    for b in 0..d.kw {
                        let Some((jlo, jhi)) = conv_span(d.w, d.wo, stride, pad, b) else {
                            continue;
                        };
                        let wv = wd[wbase + a * d.kw + b];
                        let mut wacc = 0.0;
                        for i in ilo..=ihi {
                            let y = i * stride + a - pad;
                            let xrow = xbase + y * d.w;
                            let orow = obase + i * d.wo;
                            for j in jlo..=jhi {
                                let xi = j * stride + b - pad;
                                let gv = g[orow + j];
                                if want_x {
                                    gx[xrow + xi] += gv * wv;
                                }
                                if want_w {
                                    wacc += gv * xd[xrow + xi];
                                }
                            }
                        }
                        if want_w {
                            gw[wbase + a * d.kw + b] += wacc;
                        }
                    }
                }
            }
        }
    }
    if want_x {
        x.accum_grad(&gx);
    }
    if want_w {
        wt.accum_grad(&gw);
    }
}

fn backprop_reduce_axis(node: &Tensor, g: &[f64], axis: usize, mean: bool) {
    let x = &node.inputs()[0];
    let shape = x.shape();
    let pre: usize = shape[..axis].iter().product();
    let d = shape[axis];
    let post: usize = shape[axis + 1..].iter().product();
    let scale = if mean && d > 0 { 1.0 / d as f64 } else { 1.0 };
    let mut gx = vec![0.0; x.numel()];
    for pi in 0..pre {
        for k in 0..d {
            let row = (pi * d + k) * post;
            let orow = pi * post;
            for pj in 0..post {
                gx[row + pj] = g[orow + pj] * scale;
            }
        }
    }
    x.accum_grad(&gx);
}
