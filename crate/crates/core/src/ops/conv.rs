//! 2-D cross-correlation with zero padding.
//!
//! Every output element is accumulated in `(c_in, ky, kx)` order starting
//! from zero, with the bias added last. The kernels below are tiled over
//! output channels and columns but keep that per-element order, so results
//! are bit-identical to a naive nested loop. Stride-1 kernels read from a
//! zero-padded copy of the input; the extra `w · 0` terms are exact zeros
//! and leave every partial sum unchanged.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub const fn same3x3() -> Self {
        ConvGeometry {
            stride: 1,
            padding: 1,
        }
    }
}

/// Output shape of a convolution, validating every precondition.
pub fn conv_output_shape(
    input: Shape,
    weight: Shape,
    bias: Option<Shape>,
    geom: ConvGeometry,
) -> Result<Shape> {
    if weight.h != weight.w || weight.c != input.c {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: input,
            right: weight,
        });
    }
    if let Some(b) = bias {
        if b.len() != weight.n {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: weight,
                right: b,
            });
        }
    }
    if geom.stride == 0 {
        return Err(Error::Config("convolution stride must be at least 1".into()));
    }
    let k = weight.h;
    let ph = input.h + 2 * geom.padding;
    let pw = input.w + 2 * geom.padding;
    if ph < k || pw < k {
        return Err(Error::ShapeMismatch {
            op: "conv2d kernel larger than padded input",
            left: input,
            right: weight,
        });
    }
    Ok(Shape::new(
        input.n,
        weight.n,
        (ph - k) / geom.stride + 1,
        (pw - k) / geom.stride + 1,
    ))
}

/// Range of output indices `o` for which `o * stride + tap - padding`
/// lands inside `[0, extent)`.
#[inline]
fn valid_range(out_len: usize, extent: usize, tap: usize, geom: ConvGeometry) -> (usize, usize) {
    let s = geom.stride;
    let p = geom.padding;
    // o * s + tap >= p
    let lo = if tap >= p { 0 } else { (p - tap).div_ceil(s) };
    // o * s + tap - p <= extent - 1
    let hi = if extent + p > tap {
        ((extent + p - tap - 1) / s + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Copies every `h × w` plane of `x` into a zero border of width `pad`.
fn pad_planes(x: &Tensor4, pad: usize) -> (Vec<f64>, usize, usize) {
    let s = x.shape();
    let (ph, pw) = (s.h + 2 * pad, s.w + 2 * pad);
    let mut out = vec![0.0; s.n * s.c * ph * pw];
    for (plane, dst) in x.data().chunks_exact(s.plane().max(1)).zip(out.chunks_exact_mut(ph * pw)) {
        for y in 0..s.h {
            dst[(y + pad) * pw + pad..(y + pad) * pw + pad + s.w].copy_from_slice(&plane[y * s.w..(y + 1) * s.w]);
        }
    }
    (out, ph, pw)
}

/// Stride-1 correlation of one padded sample.
struct Correlate<'a> {
    /// `cin` planes of `ph × pw`.
    src: &'a [f64],
    ph: usize,
    pw: usize,
    cin: usize,
    k: usize,
    oh: usize,
    ow: usize,
}

/// Kernel repacked as `[co / 4][ci][ky][kx][co % 4]`, zero-filled past `cout`.
fn pack_weight(weight: &[f64], cout: usize, cin: usize, k: usize) -> Vec<f64> {
    let kk = k * k;
    let blocks = cout.div_ceil(4);
    let mut packed = vec![0.0; blocks * cin * kk * 4];
    for co in 0..cout {
        for ci in 0..cin {
            for t in 0..kk {
                packed[((co / 4 * cin + ci) * kk + t) * 4 + co % 4] = weight[(co * cin + ci) * kk + t];
            }
        }
    }
    packed
}

impl Correlate<'_> {
    /// Accumulates four output channels over `X` columns starting at `x0`
    /// on row `y`.
    #[inline(always)]
    fn tile<const X: usize>(&self, wblock: &[f64], y: usize, x0: usize) -> [[f64; X]; 4] {
        let k = self.k;
        let mut acc = [[0.0f64; X]; 4];
        let plane_len = self.ph * self.pw;
        for (ci, wci) in wblock.chunks_exact(k * k * 4).enumerate().take(self.cin) {
            let plane = &self.src[ci * plane_len..(ci + 1) * plane_len];
            for (ky, wrow) in wci.chunks_exact(k * 4).enumerate() {
                let start = (y + ky) * self.pw + x0;
                let row = &plane[start..start + X + k - 1];
                for (kx, w4) in wrow.chunks_exact(4).enumerate() {
                    let s = &row[kx..kx + X];
                    for j in 0..4 {
                        let wv = w4[j];
                        for i in 0..X {
                            acc[j][i] += wv * s[i];
                        }
                    }
                }
            }
        }
        acc
    }

    #[inline(always)]
    fn run_portable(&self, weight: &[f64], cout: usize, out: &mut [f64]) {
        let packed = pack_weight(weight, cout, self.cin, self.k);
        let block_len = self.cin * self.k * self.k * 4;
        let plane = self.oh * self.ow;
        let x_main = self.ow - self.ow % 8;
        for (b, wblock) in packed.chunks_exact(block_len).enumerate() {
            let co0 = b * 4;
            let width = (cout - co0).min(4);
            for y in 0..self.oh {
                for x0 in (0..x_main).step_by(8) {
                    let acc = self.tile::<8>(wblock, y, x0);
                    for (j, a) in acc.iter().enumerate().take(width) {
                        let base = (co0 + j) * plane + y * self.ow + x0;
                        out[base..base + 8].copy_from_slice(a);
                    }
                }
                for x0 in x_main..self.ow {
                    let acc = self.tile::<1>(wblock, y, x0);
                    for (j, a) in acc.iter().enumerate().take(width) {
                        out[(co0 + j) * plane + y * self.ow + x0] = a[0];
                    }
                }
            }
        }
    }
}

// The tiled kernels are compiled twice: once for the baseline target and
// once with AVX enabled, picked at runtime. Neither build fuses multiplies
// into adds, so both produce identical bits.
#[cfg(any(target_arch = "x86", target_arch = "x86_64"))]
cpufeatures::new!(avx_cpu, "avx");

#[inline]
fn use_avx() -> bool {
    #[cfg(any(target_arch = "x86", target_arch = "x86_64"))]
    {
        avx_cpu::get()
    }
    #[cfg(not(any(target_arch = "x86", target_arch = "x86_64")))]
    {
        false
    }
}

#[cfg(any(target_arch = "x86", target_arch = "x86_64"))]
#[target_feature(enable = "avx")]
unsafe fn correlate_avx(c: &Correlate<'_>, weight: &[f64], cout: usize, out: &mut [f64]) {
    c.run_portable(weight, cout, out)
}

#[cfg(any(target_arch = "x86", target_arch = "x86_64"))]
#[target_feature(enable = "avx")]
unsafe fn weight_grad_avx(grad_out: &Tensor4, input: &Tensor4, padding: usize, k: usize, gw: &mut [f64]) {
    weight_grad_portable(grad_out, input, padding, k, gw)
}

impl Correlate<'_> {
    fn run(&self, weight: &[f64], cout: usize, out: &mut [f64]) {
        self.run_with(weight, cout, out, use_avx())
    }

    fn run_with(&self, weight: &[f64], cout: usize, out: &mut [f64], avx: bool) {
        #[cfg(any(target_arch = "x86", target_arch = "x86_64"))]
        if avx {
            // SAFETY: `avx` is only true when the CPU reports AVX support.
            return unsafe { correlate_avx(self, weight, cout, out) };
        }
        let _ = avx;
        self.run_portable(weight, cout, out)
    }
}

fn weight_grad_s1(grad_out: &Tensor4, input: &Tensor4, padding: usize, k: usize, gw: &mut [f64], avx: bool) {
    #[cfg(any(target_arch = "x86", target_arch = "x86_64"))]
    if avx {
        // SAFETY: as above.
        return unsafe { weight_grad_avx(grad_out, input, padding, k, gw) };
    }
    let _ = avx;
    weight_grad_portable(grad_out, input, padding, k, gw)
}

pub fn conv2d_forward(
    input: &Tensor4,
    weight: &Tensor4,
    bias: Option<&Tensor4>,
    geom: ConvGeometry,
) -> Result<Tensor4> {
    let is = input.shape();
    let ws = weight.shape();
    let os = conv_output_shape(is, ws, bias.map(|b| b.shape()), geom)?;
    let k = ws.h;
    let mut out = Tensor4::zeros(os);
    if geom.stride == 1 {
        let (padded, ph, pw) = pad_planes(input, geom.padding);
        let sample_out = os.c * os.plane();
        for n in 0..is.n {
            let c = Correlate {
                src: &padded[n * is.c * ph * pw..(n + 1) * is.c * ph * pw],
                ph,
                pw,
                cin: is.c,
                k,
                oh: os.h,
                ow: os.w,
            };
            c.run(weight.data(), os.c, &mut out.data_mut()[n * sample_out..(n + 1) * sample_out]);
        }
        if let Some(b) = bias {
            for n in 0..os.n {
                for co in 0..os.c {
                    let bv = b.data()[co];
                    out.plane_mut(n, co).iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        return Ok(out);
    }
    let w = weight.data();
    for n in 0..is.n {
        for co in 0..ws.n {
            let out_plane = out.plane_mut(n, co);
            for ci in 0..is.c {
                let in_plane = input.plane(n, ci);
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_range(os.h, is.h, ky, geom);
                    for kx in 0..k {
                        let wv = w[((co * ws.c + ci) * k + ky) * k + kx];
                        let (ox_lo, ox_hi) = valid_range(os.w, is.w, kx, geom);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * geom.stride + ky - geom.padding;
                            let out_row = &mut out_plane[oy * os.w..(oy + 1) * os.w];
                            let in_row = &in_plane[iy * is.w..(iy + 1) * is.w];
                            if geom.stride == 1 {
                                let ix0 = ox_lo + kx - geom.padding;
                                let dst = &mut out_row[ox_lo..ox_hi];
                                let src = &in_row[ix0..ix0 + (ox_hi - ox_lo)];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += wv * s;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    out_row[ox] += wv * in_row[ox * geom.stride + kx - geom.padding];
                                }
                            }
                        }
                    }
                }
            }
            if let Some(b) = bias {
                let bv = b.data()[co];
                out_plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

/// Gradient with respect to the convolution input.
pub fn conv2d_backward_input(
    grad_out: &Tensor4,
    weight: &Tensor4,
    input_shape: Shape,
    geom: ConvGeometry,
) -> Tensor4 {
    let os = grad_out.shape();
    let ws = weight.shape();
    let k = ws.h;
    let w = weight.data();
    let mut grad_in = Tensor4::zeros(input_shape);
    if geom.stride == 1 && geom.padding < k {
        // Full correlation of the output gradient with the flipped,
        // channel-transposed kernel.
        let mut flipped = vec![0.0; w.len()];
        for co in 0..ws.n {
            for ci in 0..ws.c {
                for ky in 0..k {
                    for kx in 0..k {
                        flipped[((ci * ws.n + co) * k + (k - 1 - ky)) * k + (k - 1 - kx)] =
                            w[((co * ws.c + ci) * k + ky) * k + kx];
                    }
                }
            }
        }
        let (padded, ph, pw) = pad_planes(grad_out, k - 1 - geom.padding);
        let sample_in = input_shape.c * input_shape.plane();
        for n in 0..os.n {
            let c = Correlate {
                src: &padded[n * os.c * ph * pw..(n + 1) * os.c * ph * pw],
                ph,
                pw,
                cin: os.c,
                k,
                oh: input_shape.h,
                ow: input_shape.w,
            };
            c.run(&flipped, input_shape.c, &mut grad_in.data_mut()[n * sample_in..(n + 1) * sample_in]);
        }
        return grad_in;
    }
    for n in 0..os.n {
        for ci in 0..input_shape.c {
            let gin = grad_in.plane_mut(n, ci);
            for co in 0..os.c {
                let gout = grad_out.plane(n, co);
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_range(os.h, input_shape.h, ky, geom);
                    for kx in 0..k {
                        let wv = w[((co * ws.c + ci) * k + ky) * k + kx];
                        let (ox_lo, ox_hi) = valid_range(os.w, input_shape.w, kx, geom);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * geom.stride + ky - geom.padding;
                            let g_row = &gout[oy * os.w..(oy + 1) * os.w];
                            let i_row = &mut gin[iy * input_shape.w..(iy + 1) * input_shape.w];
                            if geom.stride == 1 {
                                let ix0 = ox_lo + kx - geom.padding;
                                let dst = &mut i_row[ix0..ix0 + (ox_hi - ox_lo)];
                                for (d, g) in dst.iter_mut().zip(&g_row[ox_lo..ox_hi]) {
                                    *d += wv * g;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    i_row[ox * geom.stride + kx - geom.padding] += wv * g_row[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    grad_in
}

/// Gradient with respect to the kernel.
pub fn conv2d_backward_weight(
    grad_out: &Tensor4,
    input: &Tensor4,
    weight_shape: Shape,
    geom: ConvGeometry,
) -> Tensor4 {
    let os = grad_out.shape();
    let is = input.shape();
    let k = weight_shape.h;
    let mut gw = vec![0.0; weight_shape.len()];
    if geom.stride == 1 {
        weight_grad_s1(grad_out, input, geom.padding, k, &mut gw, use_avx());
        return Tensor4::from_vec(weight_shape, gw).expect("weight gradient length");
    }
    for n in 0..os.n {
        for co in 0..os.c {
            let gout = grad_out.plane(n, co);
            for ci in 0..is.c {
                let in_plane = input.plane(n, ci);
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_range(os.h, is.h, ky, geom);
                    for kx in 0..k {
                        let (ox_lo, ox_hi) = valid_range(os.w, is.w, kx, geom);
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * geom.stride + ky - geom.padding;
                            let g_row = &gout[oy * os.w..(oy + 1) * os.w];
                            let i_row = &in_plane[iy * is.w..(iy + 1) * is.w];
                            if geom.stride == 1 {
                                let ix0 = ox_lo + kx - geom.padding;
                                acc += dot(&g_row[ox_lo..ox_hi], &i_row[ix0..ix0 + (ox_hi - ox_lo)]);
                            } else {
                                for ox in ox_lo..ox_hi {
                                    acc += g_row[ox] * i_row[ox * geom.stride + kx - geom.padding];
                                }
                            }
                        }
                        gw[((co * weight_shape.c + ci) * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    }
    Tensor4::from_vec(weight_shape, gw).expect("weight gradient length")
}

/// Gradient with respect to the bias: per-channel sum of the output gradient.
pub fn conv2d_backward_bias(grad_out: &Tensor4, bias_shape: Shape) -> Tensor4 {
    let os = grad_out.shape();
    let mut gb = vec![0.0; os.c];
    for n in 0..os.n {
        for (co, g) in gb.iter_mut().enumerate() {
            *g += grad_out.plane(n, co).iter().sum::<f64>();
        }
    }
    Tensor4::from_vec(bias_shape, gb).expect("bias gradient length")
}

/// Stride-1 kernel gradient. Tiles of four output channels by eight input
/// channels are accumulated per kernel tap; each kernel element sums its
/// pixel products in `(n, y, x)` order.
#[inline(always)]
fn weight_grad_portable(grad_out: &Tensor4, input: &Tensor4, padding: usize, k: usize, gw: &mut [f64]) {
    const CI: usize = 8;
    const CO: usize = 4;
    let os = grad_out.shape();
    let is = input.shape();
    let (padded, ph, pw) = pad_planes(input, padding);
    let ci_blocks = is.c.div_ceil(CI);
    let co_blocks = os.c.div_ceil(CO);
    let pp = ph * pw;
    // Padded input as [n][pixel][ci], channels zero-filled to a multiple of CI.
    let cpad = ci_blocks * CI;
    let mut xt = vec![0.0; os.n * pp * cpad];
    for n in 0..is.n {
        for ci in 0..is.c {
            let src = &padded[(n * is.c + ci) * pp..(n * is.c + ci + 1) * pp];
            for (i, &v) in src.iter().enumerate() {
                xt[(n * pp + i) * cpad + ci] = v;
            }
        }
    }
    // Output gradient with channels zero-filled to a multiple of CO.
    let p = os.plane();
    let mut g = vec![0.0; os.n * co_blocks * CO * p];
    for n in 0..os.n {
        for co in 0..os.c {
            let dst = (n * co_blocks * CO + co) * p;
            g[dst..dst + p].copy_from_slice(grad_out.plane(n, co));
        }
    }
    for cb in 0..co_blocks {
        for ib in 0..ci_blocks {
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = [[0.0f64; CI]; CO];
                    for n in 0..os.n {
                        let gb = &g[(n * co_blocks + cb) * CO * p..(n * co_blocks + cb + 1) * CO * p];
                        for y in 0..os.h {
                            let row_at = (n * pp + (y + ky) * pw + kx) * cpad + ib * CI;
                            let xrow = &xt[row_at..row_at + (os.w - 1) * cpad + CI];
                            for (x, v) in xrow.chunks(cpad).enumerate() {
                                let v: &[f64; CI] = v[..CI].try_into().expect("lane");
                                for (j, a) in acc.iter_mut().enumerate() {
                                    let gv = gb[j * p + y * os.w + x];
                                    for i in 0..CI {
                                        a[i] += gv * v[i];
                                    }
                                }
                            }
                        }
                    }
                    for (j, a) in acc.iter().enumerate() {
                        let co = cb * CO + j;
                        if co >= os.c {
                            break;
                        }
                        for (i, v) in a.iter().enumerate() {
                            let ci = ib * CI + i;
                            if ci < is.c {
                                gw[((co * is.c + ci) * k + ky) * k + kx] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent partial sums keep the loop vectorizable.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for j in 0..4 {
            acc[j] += a[i * 4 + j] * b[i * 4 + j];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
