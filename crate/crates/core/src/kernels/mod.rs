//! Raw volumetric kernels behind the autodiff operators.
//!
//! Same-size stride-1 convolutions on wide volumes use direct row kernels;
//! everything else is lowered to im2col + GEMM. Every reduction runs in a
//! fixed order on one thread, so results are bitwise reproducible.

use crate::error::{HvedError, Result};
use crate::tensor::{Real, Tensor};

/// Resolved geometry of one `conv3d` call on an `(N, C, D, H, W)` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeometry {
    pub fn resolve(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 5 || w.len() != 5 {
            return Err(HvedError::shape(
                "conv3d",
                format!("expected 5-D input and weight, got {x:?} and {w:?}"),
            ));
        }
        let k = w[2];
        if w[3] != k || w[4] != k {
            return Err(HvedError::shape("conv3d", format!("kernel must be cubic, got {w:?}")));
        }
        if w[1] != x[1] {
            return Err(HvedError::shape(
                "conv3d",
                format!("weight expects {} input channels, input has {}", w[1], x[1]),
            ));
        }
        if stride == 0 {
            return Err(HvedError::shape("conv3d", "stride must be positive"));
        }
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = x[2 + a] + 2 * pad;
            if padded < k {
                return Err(HvedError::shape(
                    "conv3d",
                    format!("kernel {k} larger than padded extent {padded}"),
                ));
            }
            output[a] = (padded - k) / stride + 1;
        }
        Ok(ConvGeometry {
            batch: x[0],
            c_in: x[1],
            c_out: w[0],
            kernel: k,
            stride,
            pad,
            input: [x[2], x[3], x[4]],
            output,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.c_out, self.output[0], self.output[1], self.output[2]]
    }

    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kernel.pow(3)
    }

    /// A 1³ kernel with unit stride and no padding needs no column buffer.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Valid output range along one axis for kernel offset `off`: all `o` with
/// `0 <= o*stride + off - pad < extent`.
fn valid_range(out: usize, extent: usize, stride: usize, off: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > off { (pad - off).div_ceil(stride) } else { 0 };
    let hi_excl = if extent + pad > off { (extent + pad - off).div_ceil(stride) } else { 0 };
    (lo.min(out), hi_excl.min(out).max(lo.min(out)))
}

/// Visits every (column-row, output-position, input-position) triple of the
/// im2col matrix for one batch element. Positions falling in padding are
/// skipped; callers pre-zero destination buffers.
#[inline]
fn for_each_patch_run<F: FnMut(usize, usize, usize, usize)>(g: &ConvGeometry, mut f: F) {
    // f(row, out_offset, in_offset, run_len) with stride-1 contiguous runs
    // along W, or single elements when stride > 1.
    let k = g.kernel;
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let s = g.stride;
    for ci in 0..g.c_in {
        for kd in 0..k {
            let (d_lo, d_hi) = valid_range(od, id, s, kd, g.pad);
            for kh in 0..k {
                let (h_lo, h_hi) = valid_range(oh, ih, s, kh, g.pad);
                for kw in 0..k {
                    let (w_lo, w_hi) = valid_range(ow, iw, s, kw, g.pad);
                    if w_lo >= w_hi {
                        continue;
                    }
                    let row = ((ci * k + kd) * k + kh) * k + kw;
                    for o_d in d_lo..d_hi {
                        let i_d = o_d * s + kd - g.pad;
                        for o_h in h_lo..h_hi {
                            let i_h = o_h * s + kh - g.pad;
                            let out_base = (o_d * oh + o_h) * ow;
                            let in_base = ((ci * id + i_d) * ih + i_h) * iw;
                            if s == 1 {
                                let i_w = w_lo + kw - g.pad;
                                f(row, out_base + w_lo, in_base + i_w, w_hi - w_lo);
                            } else {
                                for o_w in w_lo..w_hi {
                                    let i_w = o_w * s + kw - g.pad;
                                    f(row, out_base + o_w, in_base + i_w, 1);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: Real>(g: &ConvGeometry, x: &[T], col: &mut [T]) {
    let p = g.out_volume();
    col.iter_mut().for_each(|v| *v = T::zero());
    for_each_patch_run(g, |row, o, i, len| {
        col[row * p + o..row * p + o + len].copy_from_slice(&x[i..i + len]);
    });
}

fn col2im<T: Real>(g: &ConvGeometry, col: &[T], dx: &mut [T]) {
    let p = g.out_volume();
    for_each_patch_run(g, |row, o, i, len| {
        let src = &col[row * p + o..row * p + o + len];
        for (d, &s) in dx[i..i + len].iter_mut().zip(src) {
            *d += s;
        }
    });
}

mod simd;

/// Convolutions at least this wide along W use the direct kernels.
const DIRECT_MIN_WIDTH: usize = 8;

fn use_direct(g: &ConvGeometry) -> bool {
    g.stride == 1 && g.kernel > 1 && g.input == g.output && g.output[2] >= DIRECT_MIN_WIDTH
}

/// Output channels computed together by the direct kernels.
const CB: usize = 8;

/// Tile width of the portable kernels.
const SCALAR_TW: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Isa {
    Avx512,
    Avx2,
    Scalar,
}

/// Kernel variant and tile width for one direct call; W is padded to a
/// whole number of tiles.
#[derive(Clone, Copy, Debug)]
struct Plan {
    isa: Isa,
    nv: usize,
    tw: usize,
}

impl Plan {
    fn new<T: Real>(width: usize) -> Plan {
        let f32_simd = T::DTYPE == crate::tensor::DType::F32;
        if f32_simd && width >= 16 && simd::has_avx512() {
            let nv = if width >= 32 { 2 } else { 1 };
            return Plan { isa: Isa::Avx512, nv, tw: nv * simd::avx512::LANES };
        }
        if f32_simd && simd::has_avx2() {
            return Plan { isa: Isa::Avx2, nv: 1, tw: simd::avx2::LANES };
        }
        Plan { isa: Isa::Scalar, nv: 1, tw: SCALAR_TW }
    }

    fn padded_width(&self, width: usize) -> usize {
        width.div_ceil(self.tw) * self.tw
    }
}

/// Zero-padded copy of a `(C, D, H, W)` volume.
struct Padded<T> {
    data: Vec<T>,
    extent: [usize; 3],
}

/// Places `x` at offset `lo` on every axis of a `c_to × extent` zero volume.
fn pad_volume<T: Real>(x: &[T], c: usize, dims: [usize; 3], lo: usize, extent: [usize; 3], c_to: usize) -> Padded<T> {
    let [d, h, w] = dims;
    let [pd, ph, pw] = extent;
    let mut data = vec![T::zero(); c_to * pd * ph * pw];
    for ci in 0..c {
        for z in 0..d {
            for y in 0..h {
                let src = &x[((ci * d + z) * h + y) * w..][..w];
                let at = ((ci * pd + z + lo) * ph + y + lo) * pw + lo;
                data[at..at + w].copy_from_slice(src);
            }
        }
    }
    Padded { data, extent }
}

/// Weights as `[c_dst/CB][c_src·k³][CB]`, zero-filled past `c_dst`.
/// `flip` produces the adjoint kernel used for input gradients.
fn block_weights<T: Real>(g: &ConvGeometry, w: &[T], flip: bool) -> Vec<T> {
    let k3 = g.kernel.pow(3);
    let (c_src, c_dst) = if flip { (g.c_out, g.c_in) } else { (g.c_in, g.c_out) };
    let rows = c_src * k3;
    let mut out = vec![T::zero(); c_dst.div_ceil(CB) * rows * CB];
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            for off in 0..k3 {
                let v = w[(co * g.c_in + ci) * k3 + off];
                let (src, dst, o) = if flip { (co, ci, k3 - 1 - off) } else { (ci, co, off) };
                out[((dst / CB) * rows + src * k3 + o) * CB + dst % CB] = v;
            }
        }
    }
    out
}

/// Portable form of the direct correlation
/// `out[cd, o] (+)= Σ wt[cd, (cs, off)] · xp[cs, o + off]`.
#[allow(clippy::too_many_arguments)]
fn correlate_scalar<T: Real>(
    xp: &Padded<T>,
    wt: &[T],
    c_src: usize,
    k: usize,
    dims: [usize; 3],
    c_dst: usize,
    out: &mut [T],
    accumulate: bool,
) {
    const TW: usize = SCALAR_TW;
    let [dd, hh, ww] = dims;
    let [pd, ph, pw] = xp.extent;
    let rows = c_src * k * k * k;
    for cb in 0..c_dst.div_ceil(CB) {
        let wb = &wt[cb * rows * CB..][..rows * CB];
        for od in 0..dd {
            for oh in 0..hh {
                for ow in (0..ww).step_by(TW) {
                    let mut acc = [[T::zero(); TW]; CB];
                    for cs in 0..c_src {
                        for kd in 0..k {
                            for kh in 0..k {
                                let base = ((cs * pd + od + kd) * ph + oh + kh) * pw + ow;
                                let row0 = ((cs * k + kd) * k + kh) * k;
                                for kw in 0..k {
                                    let xv = &xp.data[base + kw..][..TW];
                                    let wr = &wb[(row0 + kw) * CB..][..CB];
                                    for (a, &w) in acc.iter_mut().zip(wr) {
                                        for (al, &xl) in a.iter_mut().zip(xv) {
                                            *al += w * xl;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    let n = TW.min(ww - ow);
                    for (c, a) in acc.iter().enumerate() {
                        let cd = cb * CB + c;
                        if cd >= c_dst {
                            break;
                        }
                        let dst = &mut out[((cd * dd + od) * hh + oh) * ww + ow..][..n];
                        if accumulate {
                            for (d, &s) in dst.iter_mut().zip(a) {
                                *d += s;
                            }
                        } else {
                            dst.copy_from_slice(&a[..n]);
                        }
                    }
                }
            }
        }
    }
}

/// Portable weight gradient of a same-size stride-1 convolution.
#[allow(clippy::too_many_arguments)]
fn weight_grad_scalar<T: Real>(
    xp: &Padded<T>,
    dyp: &[T],
    c_in: usize,
    k: usize,
    dims: [usize; 3],
    wt_w: usize,
    c_out: usize,
    dw: &mut [T],
) {
    let [dd, hh, _] = dims;
    let [pd, ph, pw] = xp.extent;
    let rows = c_in * k * k * k;
    for co in 0..c_out {
        for ci in 0..c_in {
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let row = ((ci * k + kd) * k + kh) * k + kw;
                        let mut acc = T::zero();
                        for od in 0..dd {
                            for oh in 0..hh {
                                let xb = ((ci * pd + od + kd) * ph + oh + kh) * pw + kw;
                                let db = ((co * dd + od) * hh + oh) * wt_w;
                                for (a, b) in dyp[db..db + wt_w].iter().zip(&xp.data[xb..xb + wt_w]) {
                                    acc += *a * *b;
                                }
                            }
                        }
                        dw[co * rows + row] += acc;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn correlate<T: Real>(
    plan: Plan,
    xp: &Padded<T>,
    wt: &[T],
    c_src: usize,
    k: usize,
    dims: [usize; 3],
    c_dst: usize,
    out: &mut [T],
    accumulate: bool,
) {
    #[cfg(target_arch = "x86_64")]
    if plan.isa != Isa::Scalar {
        let x = T::as_f32_slice(&xp.data).expect("simd plans are f32 only");
        let w = T::as_f32_slice(wt).expect("simd plans are f32 only");
        let o = T::as_f32_slice_mut(out).expect("simd plans are f32 only");
        let e = xp.extent;
        // SAFETY: the plan was built only after detecting the instruction
        // set; the kernels assert every buffer bound they rely on.
        unsafe {
            match (plan.isa, plan.nv) {
                (Isa::Avx512, 2) => simd::avx512::correlate::<2>(x, e, w, c_src, k, dims, c_dst, o, accumulate),
                (Isa::Avx512, _) => simd::avx512::correlate::<1>(x, e, w, c_src, k, dims, c_dst, o, accumulate),
                _ => simd::avx2::correlate::<1>(x, e, w, c_src, k, dims, c_dst, o, accumulate),
            }
        }
        return;
    }
    let _ = plan;
    correlate_scalar(xp, wt, c_src, k, dims, c_dst, out, accumulate)
}

#[allow(clippy::too_many_arguments)]
fn weight_grad<T: Real>(
    plan: Plan,
    xp: &Padded<T>,
    dyp: &[T],
    c_in: usize,
    k: usize,
    dims: [usize; 3],
    wt_w: usize,
    c_out: usize,
    dw: &mut [T],
) {
    #[cfg(target_arch = "x86_64")]
    if plan.isa != Isa::Scalar {
        let x = T::as_f32_slice(&xp.data).expect("simd plans are f32 only");
        let d = T::as_f32_slice(dyp).expect("simd plans are f32 only");
        let o = T::as_f32_slice_mut(dw).expect("simd plans are f32 only");
        let e = xp.extent;
        // SAFETY: as in `correlate`.
        unsafe {
            match plan.isa {
                Isa::Avx512 => simd::avx512::weight_grad(x, e, d, c_in, k, dims, wt_w, c_out, o),
                _ => simd::avx2::weight_grad(x, e, d, c_in, k, dims, wt_w, c_out, o),
            }
        }
        return;
    }
    let _ = plan;
    weight_grad_scalar(xp, dyp, c_in, k, dims, wt_w, c_out, dw)
}

/// Padded extent for a `dims` volume under `plan`: `k − 1` halo on every
/// axis, with W first rounded up to whole tiles.
fn direct_extent(plan: &Plan, dims: [usize; 3], k: usize) -> [usize; 3] {
    [dims[0] + k - 1, dims[1] + k - 1, plan.padded_width(dims[2]) + k - 1]
}

pub fn conv3d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::resolve(x.shape(), w.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.numel() != g.c_out {
            return Err(HvedError::shape(
                "conv3d",
                format!("bias has {} entries for {} output channels", b.numel(), g.c_out),
            ));
        }
    }
    let (vin, vout, kk) = (g.in_volume(), g.out_volume(), g.patch_len());
    let mut out = vec![T::zero(); g.batch * g.c_out * vout];
    let direct_w = use_direct(&g).then(|| block_weights(&g, w.data(), false));
    let mut col = if g.is_pointwise() || direct_w.is_some() { Vec::new() } else { vec![T::zero(); kk * vout] };
    for n in 0..g.batch {
        let xs = &x.data()[n * g.c_in * vin..(n + 1) * g.c_in * vin];
        let ys = &mut out[n * g.c_out * vout..(n + 1) * g.c_out * vout];
        if let Some(b) = bias {
            for (c, chunk) in ys.chunks_mut(vout).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b.data()[c]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        if let Some(wt) = &direct_w {
            let plan = Plan::new::<T>(g.input[2]);
            let xp = pad_volume(xs, g.c_in, g.input, g.pad, direct_extent(&plan, g.input, g.kernel), g.c_in);
            correlate(plan, &xp, wt, g.c_in, g.kernel, g.output, g.c_out, ys, bias.is_some());
            continue;
        }
        let cols: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(&g, xs, &mut col);
            &col
        };
        T::gemm(g.c_out, kk, vout, w.data(), false, cols, false, beta, ys);
    }
    Tensor::new(g.out_shape(), out)
}

/// Gradients of `conv3d` with respect to input, weight and bias.
pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn conv3d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::resolve(x.shape(), w.shape(), stride, pad)?;
    if dy.shape() != g.out_shape().as_slice() {
        return Err(HvedError::shape("conv3d backward", format!("{:?}", dy.shape())));
    }
    let (vin, vout, kk) = (g.in_volume(), g.out_volume(), g.patch_len());
    let mut dw = vec![T::zero(); g.c_out * kk];
    let mut db = vec![T::zero(); g.c_out];
    let mut dx = if need_dx { vec![T::zero(); x.numel()] } else { Vec::new() };
    let direct = use_direct(&g);
    let flipped = (direct && need_dx).then(|| block_weights(&g, w.data(), true));
    let mut col = if g.is_pointwise() || direct { Vec::new() } else { vec![T::zero(); kk * vout] };
    for n in 0..g.batch {
        let xs = &x.data()[n * g.c_in * vin..(n + 1) * g.c_in * vin];
        let dys = &dy.data()[n * g.c_out * vout..(n + 1) * g.c_out * vout];
        for (c, chunk) in dys.chunks(vout).enumerate() {
            db[c] += chunk.iter().copied().sum::<T>();
        }
        if direct {
            let plan = Plan::new::<T>(g.input[2]);
            let extent = direct_extent(&plan, g.input, g.kernel);
            let wt_w = plan.padded_width(g.output[2]);
            let xp = pad_volume(xs, g.c_in, g.input, g.pad, extent, g.c_in);
            let [od, oh, _] = g.output;
            let dyp = pad_volume(dys, g.c_out, g.output, 0, [od, oh, wt_w], g.c_out.div_ceil(CB) * CB);
            weight_grad(plan, &xp, &dyp.data, g.c_in, g.kernel, g.output, wt_w, g.c_out, &mut dw);
            if let Some(wt) = &flipped {
                let dxs = &mut dx[n * g.c_in * vin..(n + 1) * g.c_in * vin];
                let adj = pad_volume(dys, g.c_out, g.output, g.kernel - 1 - g.pad, extent, g.c_out);
                correlate(plan, &adj, wt, g.c_out, g.kernel, g.input, g.c_in, dxs, true);
            }
            continue;
        }
        // dW += dY · colᵀ
        {
            let cols: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(&g, xs, &mut col);
                &col
            };
            T::gemm(g.c_out, vout, kk, dys, false, cols, true, T::one(), &mut dw);
        }
        if need_dx {
            let dxs = &mut dx[n * g.c_in * vin..(n + 1) * g.c_in * vin];
            if g.is_pointwise() {
                // dX = Wᵀ · dY directly
                T::gemm(kk, g.c_out, vout, w.data(), true, dys, false, T::one(), dxs);
            } else {
                T::gemm(kk, g.c_out, vout, w.data(), true, dys, false, T::zero(), &mut col);
                col2im(&g, &col, dxs);
            }
        }
    }
    Ok(ConvGrads {
        dx: if need_dx { Some(Tensor::new(x.shape().to_vec(), dx)?) } else { None },
        dw: Tensor::new(w.shape().to_vec(), dw)?,
        db: Tensor::new(vec![g.c_out], db)?,
    })
}

fn spatial5(shape: &[usize], op: &'static str) -> Result<[usize; 5]> {
    match shape {
        &[n, c, d, h, w] => Ok([n, c, d, h, w]),
        _ => Err(HvedError::shape(op, format!("expected 5-D tensor, got {shape:?}"))),
    }
}

/// Nearest-neighbour ×2 upsampling of `(N, C, D, H, W)`.
pub fn upsample2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, d, h, w] = spatial5(x.shape(), "upsample2")?;
    let (d2, h2, w2) = (2 * d, 2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * d2 * h2 * w2];
    let src = x.data();
    for nc in 0..n * c {
        let s = &src[nc * d * h * w..(nc + 1) * d * h * w];
        let o = &mut out[nc * d2 * h2 * w2..(nc + 1) * d2 * h2 * w2];
        for zd in 0..d2 {
            for zh in 0..h2 {
                let srow = &s[((zd / 2) * h + zh / 2) * w..][..w];
                let orow = &mut o[(zd * h2 + zh) * w2..][..w2];
                for (i, v) in orow.iter_mut().enumerate() {
                    *v = srow[i / 2];
                }
            }
        }
    }
    Tensor::new(vec![n, c, d2, h2, w2], out)
}

/// Adjoint of [`upsample2`]: sums each 2×2×2 block.
pub fn upsample2_backward<T: Real>(dy: &Tensor<T>, x_shape: &[usize]) -> Result<Tensor<T>> {
    let [n, c, d, h, w] = spatial5(x_shape, "upsample2 backward")?;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * d * h * w];
    let src = dy.data();
    for nc in 0..n * c {
        let s = &src[nc * 8 * d * h * w..(nc + 1) * 8 * d * h * w];
        let o = &mut out[nc * d * h * w..(nc + 1) * d * h * w];
        for zd in 0..2 * d {
            for zh in 0..h2 {
                let srow = &s[(zd * h2 + zh) * w2..][..w2];
                let orow = &mut o[((zd / 2) * h + zh / 2) * w..][..w];
                for (i, &v) in srow.iter().enumerate() {
                    orow[i / 2] += v;
                }
            }
        }
    }
    Tensor::new(x_shape.to_vec(), out)
}

/// Concatenates `(N, C_i, ...)` tensors along the channel axis.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| HvedError::shape("concat", "no inputs"))?;
    if first.ndim() < 2 {
        return Err(HvedError::shape("concat", "inputs need a channel axis"));
    }
    let n = first.shape()[0];
    let rest = &first.shape()[2..];
    let mut channels = 0;
    for p in parts {
        if p.ndim() != first.ndim() || p.shape()[0] != n || &p.shape()[2..] != rest {
            return Err(HvedError::shape(
                "concat",
                format!("{:?} incompatible with {:?}", p.shape(), first.shape()),
            ));
        }
        channels += p.shape()[1];
    }
    let mut out = Vec::with_capacity(n * channels * crate::tensor::numel(rest));
    for b in 0..n {
        for p in parts {
            let chunk = p.numel() / n;
            out.extend_from_slice(&p.data()[b * chunk..(b + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[1] = channels;
    Tensor::new(shape, out)
}

/// Splits a channel-concatenated gradient back into per-part gradients.
pub fn concat_backward<T: Real>(dy: &Tensor<T>, shapes: &[Vec<usize>]) -> Result<Vec<Tensor<T>>> {
    let n = dy.shape()[0];
    let per_batch = dy.numel() / n;
    let mut outs: Vec<Vec<T>> = shapes.iter().map(|s| Vec::with_capacity(s.iter().product())).collect();
    for b in 0..n {
        let mut offset = b * per_batch;
        for (s, out) in shapes.iter().zip(outs.iter_mut()) {
            let chunk = s.iter().product::<usize>() / n;
            out.extend_from_slice(&dy.data()[offset..offset + chunk]);
            offset += chunk;
        }
    }
    shapes.iter().zip(outs).map(|(s, d)| Tensor::new(s.clone(), d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct seven-loop convolution.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let g = ConvGeometry::resolve(x.shape(), w.shape(), stride, pad).unwrap();
        let [id, ih, iw] = g.input;
        let [od, oh, ow] = g.output;
        let k = g.kernel;
        let mut out = Tensor::zeros(g.out_shape());
        for n in 0..g.batch {
            for co in 0..g.c_out {
                for a in 0..od {
                    for b in 0..oh {
                        for c in 0..ow {
                            let mut acc = 0.0;
                            for ci in 0..g.c_in {
                                for kd in 0..k {
                                    for kh in 0..k {
                                        for kw in 0..k {
                                            let zd = (a * stride + kd) as isize - pad as isize;
                                            let zh = (b * stride + kh) as isize - pad as isize;
                                            let zw = (c * stride + kw) as isize - pad as isize;
                                            if zd < 0 || zh < 0 || zw < 0 {
                                                continue;
                                            }
                                            let (zd, zh, zw) = (zd as usize, zh as usize, zw as usize);
                                            if zd >= id || zh >= ih || zw >= iw {
                                                continue;
                                            }
                                            let xi = (((n * g.c_in + ci) * id + zd) * ih + zh) * iw + zw;
                                            let wi = (((co * g.c_in + ci) * k + kd) * k + kh) * k + kw;
                                            acc += x.data()[xi] * w.data()[wi];
                                        }
                                    }
                                }
                            }
                            let oi = (((n * g.c_out + co) * od + a) * oh + b) * ow + c;
                            out.data_mut()[oi] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad, k, dims) in &[
            (1, 1, 3, [5, 4, 6]),
            (2, 1, 3, [8, 7, 6]),
            (1, 0, 1, [3, 3, 3]),
            (2, 0, 3, [7, 7, 7]),
        ] {
            let x = Tensor::<f64>::randn(vec![2, 3, dims[0], dims[1], dims[2]], &mut rng);
            let w = Tensor::<f64>::randn(vec![4, 3, k, k, k], &mut rng);
            let fast = conv3d_forward(&x, &w, None, stride, pad).unwrap();
            let slow = naive_conv(&x, &w, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12, "stride {stride} pad {pad} k {k}");
        }
    }

    #[test]
    fn direct_conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &(k, pad, dims) in &[(3, 1, [6, 9, 8]), (5, 2, [4, 3, 10]), (3, 1, [1, 1, 8])] {
            let x = Tensor::<f64>::randn(vec![2, 3, dims[0], dims[1], dims[2]], &mut rng);
            let w = Tensor::<f64>::randn(vec![5, 3, k, k, k], &mut rng);
            let g = ConvGeometry::resolve(x.shape(), w.shape(), 1, pad).unwrap();
            assert!(use_direct(&g));
            let fast = conv3d_forward(&x, &w, None, 1, pad).unwrap();
            assert!(fast.max_abs_diff(&naive_conv(&x, &w, 1, pad)) < 1e-12, "k {k} dims {dims:?}");
        }
    }

    #[test]
    fn f32_direct_conv_matches_f64() {
        // exercises whichever SIMD variant this machine selects
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for &(c_in, c_out, dims) in &[(3, 5, [4, 5, 8]), (2, 9, [3, 3, 16]), (4, 8, [2, 3, 32]), (1, 3, [3, 2, 24])] {
            let x = Tensor::<f64>::randn(vec![1, c_in, dims[0], dims[1], dims[2]], &mut rng);
            let w = Tensor::<f64>::randn(vec![c_out, c_in, 3, 3, 3], &mut rng);
            let b = Tensor::<f64>::randn(vec![c_out], &mut rng);
            let (x32, w32, b32) = (x.cast::<f32>(), w.cast::<f32>(), b.cast::<f32>());
            let y64 = conv3d_forward(&x, &w, Some(&b), 1, 1).unwrap();
            let y32 = conv3d_forward(&x32, &w32, Some(&b32), 1, 1).unwrap();
            assert!(y32.cast::<f64>().max_abs_diff(&y64) < 1e-4, "fwd {dims:?}");
            let dy = Tensor::<f64>::randn(y64.shape().to_vec(), &mut rng);
            let g64 = conv3d_backward(&x, &w, &dy, 1, 1, true).unwrap();
            let g32 = conv3d_backward(&x32, &w32, &dy.cast::<f32>(), 1, 1, true).unwrap();
            assert!(g32.dw.cast::<f64>().max_abs_diff(&g64.dw) < 1e-3, "dw {dims:?}");
            assert!(g32.db.cast::<f64>().max_abs_diff(&g64.db) < 1e-3, "db {dims:?}");
            let (dx32, dx64) = (g32.dx.unwrap(), g64.dx.unwrap());
            assert!(dx32.cast::<f64>().max_abs_diff(&dx64) < 1e-4, "dx {dims:?}");
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x, w), dy> == <x, dx> == <w, dw> since conv is bilinear
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for &(stride, pad, k, dims) in &[
            (1, 1, 3, [5, 9, 8]),
            (1, 1, 3, [4, 4, 4]),
            (2, 1, 3, [8, 7, 6]),
            (1, 0, 1, [3, 3, 3]),
            (1, 2, 5, [3, 4, 9]),
        ] {
            let x = Tensor::<f64>::randn(vec![2, 3, dims[0], dims[1], dims[2]], &mut rng);
            let w = Tensor::<f64>::randn(vec![4, 3, k, k, k], &mut rng);
            let y = conv3d_forward(&x, &w, None, stride, pad).unwrap();
            let dy = Tensor::<f64>::randn(y.shape().to_vec(), &mut rng);
            let grads = conv3d_backward(&x, &w, &dy, stride, pad, true).unwrap();
            let dot = |a: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
                a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum()
            };
            let lhs = dot(&y, &dy);
            let tol = 1e-9 * lhs.abs().max(1.0);
            assert!((lhs - dot(&x, grads.dx.as_ref().unwrap())).abs() < tol, "dx {dims:?}");
            assert!((lhs - dot(&w, &grads.dw)).abs() < tol, "dw {dims:?}");
            let db_expect: Vec<f64> = (0..4)
                .map(|c| {
                    let v = dy.numel() / 8;
                    (0..2).map(|n| dy.data()[(n * 4 + c) * v..][..v].iter().sum::<f64>()).sum()
                })
                .collect();
            for (a, b) in grads.db.data().iter().zip(&db_expect) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn conv_shape_arithmetic() {
        let x = Tensor::<f64>::zeros(vec![1, 1, 8, 8, 8]);
        let w = Tensor::<f64>::zeros(vec![5, 1, 3, 3, 3]);
        let y = conv3d_forward(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 5, 8, 8, 8]);
        let y2 = conv3d_forward(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y2.shape(), &[1, 5, 4, 4, 4]);
    }

    #[test]
    fn upsample_adjoint_identity() {
        // <up(x), y> == <x, up^T(y)>
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(vec![1, 2, 2, 3, 2], &mut rng);
        let y = Tensor::<f64>::randn(vec![1, 2, 4, 6, 4], &mut rng);
        let ux = upsample2(&x).unwrap();
        let uty = upsample2_backward(&y, x.shape()).unwrap();
        let lhs: f64 = ux.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(uty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn concat_split_round_trip() {
        let a = Tensor::<f64>::from_fn(vec![2, 1, 2, 2, 2], |i| i as f64);
        let b = Tensor::<f64>::from_fn(vec![2, 3, 2, 2, 2], |i| -(i as f64));
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 4, 2, 2, 2]);
        let parts = concat_backward(&c, &[a.shape().to_vec(), b.shape().to_vec()]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
