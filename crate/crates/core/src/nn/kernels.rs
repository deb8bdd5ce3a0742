//! CPU kernels with hand-written gradients: convolution, instance
//! normalisation, leaky ReLU and ×2 nearest upsampling.
//!
//! Convolutions unfold one image at a time into a `(C·K·K, Ho·Wo)` patch
//! matrix (row `c·K·K + ki·K + kj`, column `oy·Wo + ox`) and call `gemm`
//! directly, so no batch-sized patch matrix or transposed copy is ever built.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Shape, Tensor, WithDType};
use gemm::Parallelism;

use super::NORM_EPS;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Geometry {
    pub fn out_size(&self, n: usize) -> Option<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = n + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

trait Elem: WithDType {
    fn wrap(v: Vec<Self>) -> CpuStorage;
}

impl Elem for f32 {
    fn wrap(v: Vec<Self>) -> CpuStorage {
        CpuStorage::F32(v)
    }
}

impl Elem for f64 {
    fn wrap(v: Vec<Self>) -> CpuStorage {
        CpuStorage::F64(v)
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("kernel expects a contiguous input"),
    }
}

macro_rules! dispatch1 {
    ($name:expr, $s:expr, $l:expr, |$d:ident| $body:expr) => {
        match $s {
            CpuStorage::F32(x) => {
                let $d = contiguous(x, $l)?;
                Elem::wrap($body)
            }
            CpuStorage::F64(x) => {
                let $d = contiguous(x, $l)?;
                Elem::wrap($body)
            }
            other => candle_core::bail!("{}: unsupported dtype {:?}", $name, other.dtype()),
        }
    };
}

macro_rules! dispatch2 {
    ($name:expr, $s1:expr, $l1:expr, $s2:expr, $l2:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(x), CpuStorage::F32(y)) => {
                let ($a, $b) = (contiguous(x, $l1)?, contiguous(y, $l2)?);
                Elem::wrap($body)
            }
            (CpuStorage::F64(x), CpuStorage::F64(y)) => {
                let ($a, $b) = (contiguous(x, $l1)?, contiguous(y, $l2)?);
                Elem::wrap($body)
            }
            (x, y) => candle_core::bail!("{}: unsupported dtypes {:?}, {:?}", $name, x.dtype(), y.dtype()),
        }
    };
}

use candle_core::backend::BackendStorage;

/// `dst (m×n, row-major) = [dst +] lhs · rhs`, each operand given with its
/// row and column strides.
#[allow(clippy::too_many_arguments)]
fn matmul<T: WithDType>(
    (m, n, k): (usize, usize, usize),
    dst: &mut [T],
    accumulate: bool,
    lhs: &[T],
    (lhs_rs, lhs_cs): (usize, usize),
    rhs: &[T],
    (rhs_rs, rhs_cs): (usize, usize),
) {
    assert_eq!(dst.len(), m * n);
    assert!(m == 0 || k == 0 || (m - 1) * lhs_rs + (k - 1) * lhs_cs < lhs.len());
    assert!(n == 0 || k == 0 || (k - 1) * rhs_rs + (n - 1) * rhs_cs < rhs.len());
    // SAFETY: the asserts above keep every index gemm touches inside the slices.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            lhs.as_ptr(),
            lhs_cs as isize,
            lhs_rs as isize,
            rhs.as_ptr(),
            rhs_cs as isize,
            rhs_rs as isize,
            T::one(),
            T::one(),
            false,
            false,
            false,
            Parallelism::None,
        )
    }
}

#[derive(Debug, Clone, Copy)]
struct Dims {
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

impl Dims {
    fn new(c: usize, h: usize, w: usize, g: Geometry) -> candle_core::Result<Self> {
        match (g.out_size(h), g.out_size(w)) {
            (Some(ho), Some(wo)) => Ok(Self { c, h, w, ho, wo }),
            _ => candle_core::bail!("input {h}x{w} smaller than kernel span"),
        }
    }

    fn rows(&self, g: Geometry) -> usize {
        self.c * g.kernel * g.kernel
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// For kernel tap offset `t` (already scaled by dilation), the valid output
/// range along an axis and the matching input index of its first element.
fn tap_range(t: usize, g: Geometry, n_in: usize, n_out: usize) -> (usize, usize) {
    // input = o·stride + t − padding must lie in [0, n_in).
    let lo = g.padding.saturating_sub(t).div_ceil(g.stride);
    let hi = if n_in + g.padding > t { (n_in + g.padding - t - 1) / g.stride + 1 } else { 0 };
    (lo.min(n_out), hi.min(n_out).max(lo.min(n_out)))
}

/// Writes patch-matrix row `(ci, ki, kj)` of one image into `row`.
fn unfold_row<T: WithDType>(plane: &[T], d: Dims, g: Geometry, (ki, kj): (usize, usize), row: &mut [T]) {
    let (oy0, oy1) = tap_range(ki * g.dilation, g, d.h, d.ho);
    let (ox0, ox1) = tap_range(kj * g.dilation, g, d.w, d.wo);
    row[..oy0 * d.wo].fill(T::zero());
    row[oy1 * d.wo..].fill(T::zero());
    for oy in oy0..oy1 {
        let iy = oy * g.stride + ki * g.dilation - g.padding;
        let src = &plane[iy * d.w..(iy + 1) * d.w];
        let dst = &mut row[oy * d.wo..(oy + 1) * d.wo];
        dst[..ox0].fill(T::zero());
        dst[ox1..].fill(T::zero());
        if g.stride == 1 {
            let ix0 = ox0 + kj * g.dilation - g.padding;
            dst[ox0..ox1].copy_from_slice(&src[ix0..ix0 + ox1 - ox0]);
        } else {
            for ox in ox0..ox1 {
                dst[ox] = src[ox * g.stride + kj * g.dilation - g.padding];
            }
        }
    }
}

/// Scatter-adds patch-matrix row `(ci, ki, kj)` back into its input plane.
fn fold_row<T: WithDType>(row: &[T], d: Dims, g: Geometry, (ki, kj): (usize, usize), plane: &mut [T]) {
    let (oy0, oy1) = tap_range(ki * g.dilation, g, d.h, d.ho);
    let (ox0, ox1) = tap_range(kj * g.dilation, g, d.w, d.wo);
    for oy in oy0..oy1 {
        let iy = oy * g.stride + ki * g.dilation - g.padding;
        let dst = &mut plane[iy * d.w..(iy + 1) * d.w];
        let src = &row[oy * d.wo..(oy + 1) * d.wo];
        if g.stride == 1 {
            let ix0 = ox0 + kj * g.dilation - g.padding;
            for (o, &v) in dst[ix0..ix0 + ox1 - ox0].iter_mut().zip(&src[ox0..ox1]) {
                *o += v;
            }
        } else {
            for ox in ox0..ox1 {
                dst[ox * g.stride + kj * g.dilation - g.padding] += src[ox];
            }
        }
    }
}

fn unfold<T: WithDType>(img: &[T], d: Dims, g: Geometry, col: &mut [T]) {
    let (k, p) = (g.kernel, d.cols());
    for ci in 0..d.c {
        let plane = &img[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ki in 0..k {
            for kj in 0..k {
                unfold_row(plane, d, g, (ki, kj), &mut col[((ci * k + ki) * k + kj) * p..][..p]);
            }
        }
    }
}

/// `conv(x, W)` for `x: (B, C, H, W)` and a kernel matrix `W: (Cout, C·K·K)`.
pub(crate) struct Conv {
    pub geom: Geometry,
}

struct ConvGradInput {
    geom: Geometry,
    dims: (usize, usize, usize, usize),
}

struct ConvGradWeight {
    geom: Geometry,
}

fn conv_fwd<T: WithDType>(x: &[T], wt: &[T], b: usize, d: Dims, g: Geometry, cout: usize) -> Vec<T> {
    let (rows, p) = (d.rows(g), d.cols());
    let mut y = vec![T::zero(); b * cout * p];
    let mut col = vec![T::zero(); rows * p];
    for bi in 0..b {
        unfold(&x[bi * d.c * d.h * d.w..(bi + 1) * d.c * d.h * d.w], d, g, &mut col);
        matmul((cout, p, rows), &mut y[bi * cout * p..(bi + 1) * cout * p], false, wt, (rows, 1), &col, (p, 1));
    }
    y
}

fn conv_grad_input<T: WithDType>(wt: &[T], gy: &[T], b: usize, d: Dims, g: Geometry, cout: usize) -> Vec<T> {
    let (rows, p, k) = (d.rows(g), d.cols(), g.kernel);
    let mut gx = vec![T::zero(); b * d.c * d.h * d.w];
    // gemm only pays off once the reduction over output channels is long.
    let mut col = vec![T::zero(); if cout >= 32 { rows * p } else { p }];
    for bi in 0..b {
        let gy_b = &gy[bi * cout * p..(bi + 1) * cout * p];
        if cout >= 32 {
            // Wᵀ · gy_b, with W read through swapped strides.
            matmul((rows, p, cout), &mut col, false, wt, (1, rows), gy_b, (p, 1));
        }
        for ci in 0..d.c {
            let plane = &mut gx[(bi * d.c + ci) * d.h * d.w..(bi * d.c + ci + 1) * d.h * d.w];
            for ki in 0..k {
                for kj in 0..k {
                    let r = (ci * k + ki) * k + kj;
                    if cout >= 32 {
                        fold_row(&col[r * p..(r + 1) * p], d, g, (ki, kj), plane);
                        continue;
                    }
                    let row = &mut col[..p];
                    row.fill(T::zero());
                    for co in 0..cout {
                        let w = wt[co * rows + r];
                        for (o, &v) in row.iter_mut().zip(&gy_b[co * p..(co + 1) * p]) {
                            *o += w * v;
                        }
                    }
                    fold_row(row, d, g, (ki, kj), plane);
                }
            }
        }
    }
    gx
}

fn conv_grad_weight<T: WithDType>(x: &[T], gy: &[T], b: usize, d: Dims, g: Geometry, cout: usize) -> Vec<T> {
    let (rows, p) = (d.rows(g), d.cols());
    let mut col = vec![T::zero(); rows * p];
    // Accumulate Wᵀ = Σ_b col_b · gy_bᵀ; gemm is markedly faster writing this
    // orientation than W itself.
    let mut gwt = vec![T::zero(); rows * cout];
    for bi in 0..b {
        unfold(&x[bi * d.c * d.h * d.w..(bi + 1) * d.c * d.h * d.w], d, g, &mut col);
        matmul((rows, cout, p), &mut gwt, bi > 0, &col, (p, 1), &gy[bi * cout * p..(bi + 1) * cout * p], (1, p));
    }
    let mut gw = vec![T::zero(); cout * rows];
    for r in 0..rows {
        for co in 0..cout {
            gw[co * rows + r] = gwt[r * cout + co];
        }
    }
    gw
}

impl CustomOp2 for Conv {
    fn name(&self) -> &'static str {
        "conv"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l1.shape().dims4()?;
        let (cout, rows) = l2.shape().dims2()?;
        let d = Dims::new(c, h, w, self.geom)?;
        if rows != d.rows(self.geom) {
            candle_core::bail!("conv: kernel has {rows} columns, expected {}", d.rows(self.geom));
        }
        let g = self.geom;
        let out = dispatch2!("conv", s1, l1, s2, l2, |x, wt| conv_fwd(x, wt, b, d, g, cout));
        Ok((out, Shape::from((b, cout, d.ho, d.wo))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        wt: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let wt = wt.contiguous()?;
        let x = x.contiguous()?;
        // Inputs built only from data carry no gradient; skip their products.
        let gx = match x.track_op() {
            true => Some(wt.apply_op2_no_bwd(&grad, &ConvGradInput { geom: self.geom, dims: x.dims4()? })?),
            false => None,
        };
        let gw = match wt.track_op() {
            true => Some(x.apply_op2_no_bwd(&grad, &ConvGradWeight { geom: self.geom })?),
            false => None,
        };
        Ok((gx, gw))
    }
}

impl CustomOp2 for ConvGradInput {
    fn name(&self) -> &'static str {
        "conv-grad-input"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = self.dims;
        let (cout, _) = l1.shape().dims2()?;
        let d = Dims::new(c, h, w, self.geom)?;
        let g = self.geom;
        let out = dispatch2!("conv-grad-input", s1, l1, s2, l2, |wt, gy| conv_grad_input(wt, gy, b, d, g, cout));
        Ok((out, Shape::from(self.dims)))
    }
}

impl CustomOp2 for ConvGradWeight {
    fn name(&self) -> &'static str {
        "conv-grad-weight"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l1.shape().dims4()?;
        let (_, cout, _, _) = l2.shape().dims4()?;
        let d = Dims::new(c, h, w, self.geom)?;
        let g = self.geom;
        let out = dispatch2!("conv-grad-weight", s1, l1, s2, l2, |x, gy| conv_grad_weight(x, gy, b, d, g, cout));
        Ok((out, Shape::from((cout, d.rows(g)))))
    }
}

/// Adds a per-channel bias to `(B, C, H, W)`.
pub(crate) struct BiasAdd;

struct ChannelSum;

impl CustomOp2 for BiasAdd {
    fn name(&self) -> &'static str {
        "bias-add"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, c, h, w) = l1.shape().dims4()?;
        if l2.shape().dims() != [c] {
            candle_core::bail!("bias-add: bias shape {:?} for {c} channels", l2.shape());
        }
        fn f<T: WithDType>(x: &[T], bias: &[T], plane: usize) -> Vec<T> {
            let mut out = x.to_vec();
            for (i, p) in out.chunks_exact_mut(plane).enumerate() {
                let b = bias[i % bias.len()];
                p.iter_mut().for_each(|v| *v += b);
            }
            out
        }
        let out = dispatch2!("bias-add", s1, l1, s2, l2, |x, b| f(x, b, h * w));
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        bias: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let gb = match bias.track_op() {
            true => Some(grad.contiguous()?.apply_op1_no_bwd(&ChannelSum)?),
            false => None,
        };
        Ok((x.track_op().then(|| grad.clone()), gb))
    }
}

impl CustomOp1 for ChannelSum {
    fn name(&self) -> &'static str {
        "channel-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, c, h, w) = l.shape().dims4()?;
        fn f<T: WithDType>(g: &[T], c: usize, plane: usize) -> Vec<T> {
            let mut out = vec![0f64; c];
            for (i, p) in g.chunks_exact(plane).enumerate() {
                out[i % c] += p.iter().map(|v| v.to_f64()).sum::<f64>();
            }
            out.into_iter().map(T::from_f64).collect()
        }
        Ok((dispatch1!("channel-sum", s, l, |g| f(g, c, h * w)), Shape::from(c)))
    }
}

/// Per-sample, per-channel normalisation over the spatial axes.
pub(crate) struct InstanceNorm;

struct InstanceNormGrad;

fn plane_stats<T: WithDType>(p: &[T]) -> (f64, f64) {
    let n = p.len() as f64;
    let mean = p.iter().map(|v| v.to_f64()).sum::<f64>() / n;
    let var = p.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + NORM_EPS).sqrt())
}

fn instance_norm_fwd<T: WithDType>(x: &[T], plane: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for p in x.chunks_exact(plane) {
        let (mean, inv) = plane_stats(p);
        out.extend(p.iter().map(|v| T::from_f64((v.to_f64() - mean) * inv)));
    }
    out
}

fn instance_norm_bwd<T: WithDType>(x: &[T], g: &[T], plane: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    let n = plane as f64;
    for (p, gp) in x.chunks_exact(plane).zip(g.chunks_exact(plane)) {
        let (mean, inv) = plane_stats(p);
        let mut g_mean = 0.0;
        let mut gy_mean = 0.0;
        for (v, gv) in p.iter().zip(gp) {
            let gv = gv.to_f64();
            g_mean += gv;
            gy_mean += gv * (v.to_f64() - mean) * inv;
        }
        g_mean /= n;
        gy_mean /= n;
        out.extend(p.iter().zip(gp).map(|(v, gv)| {
            let y = (v.to_f64() - mean) * inv;
            T::from_f64(inv * (gv.to_f64() - g_mean - y * gy_mean))
        }));
    }
    out
}

fn plane_size(l: &Layout) -> candle_core::Result<usize> {
    let (_, _, h, w) = l.shape().dims4()?;
    Ok(h * w)
}

impl CustomOp1 for InstanceNorm {
    fn name(&self) -> &'static str {
        "instance-norm"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let plane = plane_size(l)?;
        Ok((dispatch1!("instance-norm", s, l, |x| instance_norm_fwd(x, plane)), l.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(x.contiguous()?.apply_op2_no_bwd(&grad.contiguous()?, &InstanceNormGrad)?))
    }
}

impl CustomOp2 for InstanceNormGrad {
    fn name(&self) -> &'static str {
        "instance-norm-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let plane = plane_size(l1)?;
        let out = dispatch2!("instance-norm-grad", s1, l1, s2, l2, |x, g| instance_norm_bwd(x, g, plane));
        Ok((out, l1.shape().clone()))
    }
}

/// `IN(x) · (1 + γ) + β` with `γ`, `β` the same shape as `x`.
pub(crate) struct Modulate;

/// Gradient of [`Modulate`] with respect to `x`.
struct ModulateGradInput;

/// `IN(x) · g`, the gradient with respect to `γ`.
struct NormTimes;

impl CustomOp3 for Modulate {
    fn name(&self) -> &'static str {
        "modulate"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        if l1.shape() != l2.shape() || l1.shape() != l3.shape() {
            candle_core::bail!("modulate: shapes {:?}, {:?}, {:?} differ", l1.shape(), l2.shape(), l3.shape());
        }
        let plane = plane_size(l1)?;
        fn f<T: WithDType>(x: &[T], gamma: &[T], beta: &[T], plane: usize) -> Vec<T> {
            let mut out = instance_norm_fwd(x, plane);
            for ((o, &g), &b) in out.iter_mut().zip(gamma).zip(beta) {
                *o = *o * (g + T::one()) + b;
            }
            out
        }
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => {
                Elem::wrap(f(contiguous(x, l1)?, contiguous(g, l2)?, contiguous(b, l3)?, plane))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => {
                Elem::wrap(f(contiguous(x, l1)?, contiguous(g, l2)?, contiguous(b, l3)?, plane))
            }
            _ => candle_core::bail!("modulate: unsupported dtypes"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let x = x.contiguous()?;
        let gx = x.apply_op3_no_bwd(&gamma.contiguous()?, &grad, &ModulateGradInput)?;
        let gg = x.apply_op2_no_bwd(&grad, &NormTimes)?;
        Ok((Some(gx), Some(gg), Some(grad)))
    }
}

impl CustomOp3 for ModulateGradInput {
    fn name(&self) -> &'static str {
        "modulate-grad-input"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let plane = plane_size(l1)?;
        fn f<T: WithDType>(x: &[T], gamma: &[T], g: &[T], plane: usize) -> Vec<T> {
            let scaled: Vec<T> = g.iter().zip(gamma).map(|(&g, &m)| g * (m + T::one())).collect();
            instance_norm_bwd(x, &scaled, plane)
        }
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(m), CpuStorage::F32(g)) => {
                Elem::wrap(f(contiguous(x, l1)?, contiguous(m, l2)?, contiguous(g, l3)?, plane))
            }
            (CpuStorage::F64(x), CpuStorage::F64(m), CpuStorage::F64(g)) => {
                Elem::wrap(f(contiguous(x, l1)?, contiguous(m, l2)?, contiguous(g, l3)?, plane))
            }
            _ => candle_core::bail!("modulate-grad-input: unsupported dtypes"),
        };
        Ok((out, l1.shape().clone()))
    }
}

impl CustomOp2 for NormTimes {
    fn name(&self) -> &'static str {
        "norm-times"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let plane = plane_size(l1)?;
        fn f<T: WithDType>(x: &[T], g: &[T], plane: usize) -> Vec<T> {
            let mut out = instance_norm_fwd(x, plane);
            out.iter_mut().zip(g).for_each(|(o, &g)| *o *= g);
            out
        }
        let out = dispatch2!("norm-times", s1, l1, s2, l2, |x, g| f(x, g, plane));
        Ok((out, l1.shape().clone()))
    }
}

/// `x` where positive, `slope · x` elsewhere; the derivative at 0 is `slope`.
pub(crate) struct LeakyRelu {
    pub slope: f64,
}

struct LeakyReluGrad {
    slope: f64,
}

impl CustomOp1 for LeakyRelu {
    fn name(&self) -> &'static str {
        "leaky-relu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn f<T: WithDType>(x: &[T], slope: f64) -> Vec<T> {
            let s = T::from_f64(slope);
            x.iter().map(|&v| if v > T::zero() { v } else { v * s }).collect()
        }
        Ok((dispatch1!("leaky-relu", s, l, |x| f(x, self.slope)), l.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let op = LeakyReluGrad { slope: self.slope };
        Ok(Some(x.contiguous()?.apply_op2_no_bwd(&grad.contiguous()?, &op)?))
    }
}

impl CustomOp2 for LeakyReluGrad {
    fn name(&self) -> &'static str {
        "leaky-relu-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        fn f<T: WithDType>(x: &[T], g: &[T], slope: f64) -> Vec<T> {
            let s = T::from_f64(slope);
            x.iter().zip(g).map(|(&v, &gv)| if v > T::zero() { gv } else { gv * s }).collect()
        }
        let out = dispatch2!("leaky-relu-grad", s1, l1, s2, l2, |x, g| f(x, g, self.slope));
        Ok((out, l1.shape().clone()))
    }
}

/// Nearest-neighbour ×2 upsampling; its gradient sums each 2×2 block.
pub(crate) struct Upsample2x;

struct BlockSum2x;

impl CustomOp1 for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        fn f<T: WithDType>(x: &[T], w: usize) -> Vec<T> {
            let mut out = Vec::with_capacity(x.len() * 4);
            for row in x.chunks_exact(w) {
                let start = out.len();
                for &v in row {
                    out.push(v);
                    out.push(v);
                }
                out.extend_from_within(start..);
            }
            out
        }
        Ok((dispatch1!("upsample2x", s, l, |x| f(x, w)), Shape::from((b, c, 2 * h, 2 * w))))
    }

    fn bwd(&self, _x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&BlockSum2x)?))
    }
}

impl CustomOp1 for BlockSum2x {
    fn name(&self) -> &'static str {
        "block-sum2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            candle_core::bail!("block-sum2x: odd size {h}x{w}");
        }
        fn f<T: WithDType>(g: &[T], w: usize) -> Vec<T> {
            let mut out = Vec::with_capacity(g.len() / 4);
            for rows in g.chunks_exact(2 * w) {
                let (top, bottom) = rows.split_at(w);
                for x in 0..w / 2 {
                    out.push(top[2 * x] + top[2 * x + 1] + bottom[2 * x] + bottom[2 * x + 1]);
                }
            }
            out
        }
        Ok((dispatch1!("block-sum2x", s, l, |x| f(x, w)), Shape::from((b, c, h / 2, w / 2))))
    }
}
