//! f32 microkernels for the direct convolution path.
//!
//! A tile is `CB` output channels by `NV` vectors along W, held in registers
//! for the whole reduction over input channels and kernel offsets.

use super::CB;

/// Vector width instantiations. Each module is compiled for its target
/// feature set and only called after runtime detection.
macro_rules! isa_kernels {
    ($modname:ident, $feat:literal, $lanes:literal, $vec:ty,
     $zero:ident, $load:ident, $store:ident, $set1:ident, $fmadd:ident) => {
        pub(super) mod $modname {
            use super::CB;
            #[cfg(target_arch = "x86_64")]
            use std::arch::x86_64::*;

            pub(crate) const LANES: usize = $lanes;

            /// `out[cd, o] (+)= Σ wt[cd, (cs, off)] · xp[cs, o + off]` over a
            /// padded source whose W extent covers whole tiles.
            #[target_feature(enable = $feat)]
            #[allow(clippy::too_many_arguments)]
            pub(crate) unsafe fn correlate<const NV: usize>(
                xp: &[f32],
                xdims: [usize; 3],
                wt: &[f32],
                c_src: usize,
                k: usize,
                dims: [usize; 3],
                c_dst: usize,
                out: &mut [f32],
                accumulate: bool,
            ) {
                let [dd, hh, ww] = dims;
                let [pd, ph, pw] = xdims;
                let tw = NV * LANES;
                let rows = c_src * k * k * k;
                assert!(wt.len() >= c_dst.div_ceil(CB) * rows * CB);
                assert!(xp.len() >= c_src * pd * ph * pw);
                assert!(pd >= dd + k - 1 && ph >= hh + k - 1 && pw >= ww.div_ceil(tw) * tw + k - 1);
                assert!(out.len() >= c_dst * dd * hh * ww);
                let x = xp.as_ptr();
                let mut spill = [0f32; 64];
                for cb in 0..c_dst.div_ceil(CB) {
                    let wb = wt.as_ptr().add(cb * rows * CB);
                    for od in 0..dd {
                        for oh in 0..hh {
                            for ow in (0..ww).step_by(tw) {
                                let mut acc: [[$vec; NV]; CB] = [[$zero(); NV]; CB];
                                for cs in 0..c_src {
                                    for kd in 0..k {
                                        for kh in 0..k {
                                            let base = ((cs * pd + od + kd) * ph + oh + kh) * pw + ow;
                                            let row0 = ((cs * k + kd) * k + kh) * k;
                                            for kw in 0..k {
                                                let mut xv: [$vec; NV] = [$zero(); NV];
                                                for (v, slot) in xv.iter_mut().enumerate() {
                                                    *slot = $load(x.add(base + kw + v * LANES));
                                                }
                                                let wr = wb.add((row0 + kw) * CB);
                                                for (c, a) in acc.iter_mut().enumerate() {
                                                    let wv = $set1(*wr.add(c));
                                                    for v in 0..NV {
                                                        a[v] = $fmadd(wv, xv[v], a[v]);
                                                    }
                                                }
                                            }
                                        }
                                    }
                                }
                                let n = tw.min(ww - ow);
                                for (c, a) in acc.iter().enumerate() {
                                    let cd = cb * CB + c;
                                    if cd >= c_dst {
                                        break;
                                    }
                                    for (v, &av) in a.iter().enumerate() {
                                        $store(spill.as_mut_ptr().add(v * LANES), av);
                                    }
                                    let dst = &mut out[((cd * dd + od) * hh + oh) * ww + ow..][..n];
                                    if accumulate {
                                        for (d, &s) in dst.iter_mut().zip(&spill[..n]) {
                                            *d += s;
                                        }
                                    } else {
                                        dst.copy_from_slice(&spill[..n]);
                                    }
                                }
                            }
                        }
                    }
                }
            }

            /// `dw[co, (ci, off)] += Σ_o dyp[co, o] · xp[ci, o + off]`, with
            /// `dyp` channel-padded to whole blocks and W-padded to `wt_w`.
            #[target_feature(enable = $feat)]
            #[allow(clippy::too_many_arguments)]
            pub(crate) unsafe fn weight_grad(
                xp: &[f32],
                xdims: [usize; 3],
                dyp: &[f32],
                c_in: usize,
                k: usize,
                dims: [usize; 3],
                wt_w: usize,
                c_out: usize,
                dw: &mut [f32],
            ) {
                let [dd, hh, _] = dims;
                let [pd, ph, pw] = xdims;
                let rows = c_in * k * k * k;
                let nb = c_out.div_ceil(CB);
                assert!(wt_w % LANES == 0);
                assert!(dyp.len() >= nb * CB * dd * hh * wt_w);
                assert!(xp.len() >= c_in * pd * ph * pw);
                assert!(pd >= dd + k - 1 && ph >= hh + k - 1 && pw >= wt_w + k - 1);
                assert!(dw.len() >= c_out * rows);
                let (x, dy) = (xp.as_ptr(), dyp.as_ptr());
                let mut lanes = vec![0f32; nb * rows * CB * LANES];
                for cb in 0..nb {
                    for od in 0..dd {
                        for ci in 0..c_in {
                            for kd in 0..k {
                                for kh in 0..k {
                                    for kw in 0..k {
                                        let row = ((ci * k + kd) * k + kh) * k + kw;
                                        let slot = lanes.as_mut_ptr().add((cb * rows + row) * CB * LANES);
                                        let mut acc: [$vec; CB] = [$zero(); CB];
                                        for (c, a) in acc.iter_mut().enumerate() {
                                            *a = $load(slot.add(c * LANES));
                                        }
                                        for oh in 0..hh {
                                            let xb = ((ci * pd + od + kd) * ph + oh + kh) * pw + kw;
                                            let db = ((cb * CB * dd + od) * hh + oh) * wt_w;
                                            for ow in (0..wt_w).step_by(LANES) {
                                                let xv = $load(x.add(xb + ow));
                                                for (c, a) in acc.iter_mut().enumerate() {
                                                    let dv = $load(dy.add(db + c * dd * hh * wt_w + ow));
                                                    *a = $fmadd(dv, xv, *a);
                                                }
                                            }
                                        }
                                        for (c, a) in acc.iter().enumerate() {
                                            $store(slot.add(c * LANES), *a);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                for co in 0..c_out {
                    let (cb, c) = (co / CB, co % CB);
                    for row in 0..rows {
                        let at = ((cb * rows + row) * CB + c) * LANES;
                        dw[co * rows + row] += lanes[at..at + LANES].iter().sum::<f32>();
                    }
                }
            }
        }
    };
}

#[cfg(target_arch = "x86_64")]
isa_kernels!(avx512, "avx512f", 16, __m512,
    _mm512_setzero_ps, _mm512_loadu_ps, _mm512_storeu_ps, _mm512_set1_ps, _mm512_fmadd_ps);

#[cfg(target_arch = "x86_64")]
isa_kernels!(avx2, "avx2,fma", 8, __m256,
    _mm256_setzero_ps, _mm256_loadu_ps, _mm256_storeu_ps, _mm256_set1_ps, _mm256_fmadd_ps);

pub(super) fn has_avx512() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx512f")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

pub(super) fn has_avx2() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}
