//! Forward and backward numeric kernels behind the tape operations.
//!
//! All kernels assume the crate-wide row-major `[H, W, C, F]` layout with
//! the frame axis innermost. They are plain functions over flat slices so
//! the non-recorded inference path can reuse the exact same arithmetic.

use super::{sigmoid, softplus, Scalar};

/// Denominator guard for the softplus normalization; softplus never reaches
/// zero analytically but underflows for strongly negative scores.
pub(crate) const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv3dDims {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub f: usize,
    pub k: usize,
    pub cout: usize,
    pub kf: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv3dDims {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }
    /// Stack-axis pad keeping the frame extent unchanged (kernel extent odd).
    pub fn pad_f(&self) -> usize {
        (self.kf - 1) / 2
    }
}

/// Inclusive-exclusive output-frame range for which `fo + shift` stays in
/// `[0, f)`.
fn frame_range(f: usize, shift: isize) -> (usize, usize) {
    let lo = if shift < 0 { (-shift) as usize } else { 0 };
    let hi = if shift > 0 {
        f.saturating_sub(shift as usize)
    } else {
        f
    };
    (lo.min(hi), hi)
}

pub(crate) fn conv3d_forward<T: Scalar>(
    input: &[T],
    weight: &[T],
    bias: &[T],
    d: Conv3dDims,
) -> Vec<T> {
    let (ho, wo) = (d.out_h(), d.out_w());
    let pf = d.pad_f() as isize;
    let mut out = vec![T::zero(); ho * wo * d.cout * d.f];

    for oy in 0..ho {
        for ox in 0..wo {
            let out_px = ((oy * wo + ox) * d.cout) * d.f;
            for co in 0..d.cout {
                let row = out_px + co * d.f;
                for fo in 0..d.f {
                    out[row + fo] = bias[co];
                }
            }
            for kh in 0..d.k {
                let iy = (oy * d.stride + kh) as isize - d.pad as isize;
                if iy < 0 || iy >= d.h as isize {
                    continue;
                }
                for kw in 0..d.k {
                    let ix = (ox * d.stride + kw) as isize - d.pad as isize;
                    if ix < 0 || ix >= d.w as isize {
                        continue;
                    }
                    let in_px = ((iy as usize * d.w + ix as usize) * d.cin) * d.f;
                    let w_px = (kh * d.k + kw) * d.cin;
                    for ci in 0..d.cin {
                        let in_row = &input[in_px + ci * d.f..in_px + ci * d.f + d.f];
                        let w_ci = (w_px + ci) * d.cout;
                        for co in 0..d.cout {
                            let taps = &weight[(w_ci + co) * d.kf..(w_ci + co) * d.kf + d.kf];
                            let out_row = out_px + co * d.f;
                            for (kf, &wv) in taps.iter().enumerate() {
                                let shift = kf as isize - pf;
                                let (lo, hi) = frame_range(d.f, shift);
                                for fo in lo..hi {
                                    out[out_row + fo] = out[out_row + fo]
                                        + wv * in_row[(fo as isize + shift) as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input/weight/bias gradients for one conv in a single sweep.
/// Any of the gradient buffers may be empty to skip that accumulation.
pub(crate) fn conv3d_backward<T: Scalar>(
    input: &[T],
    weight: &[T],
    gout: &[T],
    d: Conv3dDims,
    gin: &mut [T],
    gweight: &mut [T],
    gbias: &mut [T],
) {
    let (ho, wo) = (d.out_h(), d.out_w());
    let pf = d.pad_f() as isize;
    let want_in = !gin.is_empty();
    let want_w = !gweight.is_empty();

    if !gbias.is_empty() {
        for oy in 0..ho {
            for ox in 0..wo {
                let out_px = ((oy * wo + ox) * d.cout) * d.f;
                for co in 0..d.cout {
                    let row = out_px + co * d.f;
                    let mut acc = T::zero();
                    for fo in 0..d.f {
                        acc = acc + gout[row + fo];
                    }
                    gbias[co] = gbias[co] + acc;
                }
            }
        }
    }
    if !want_in && !want_w {
        return;
    }

    for oy in 0..ho {
        for ox in 0..wo {
            let out_px = ((oy * wo + ox) * d.cout) * d.f;
            for kh in 0..d.k {
                let iy = (oy * d.stride + kh) as isize - d.pad as isize;
                if iy < 0 || iy >= d.h as isize {
                    continue;
                }
                for kw in 0..d.k {
                    let ix = (ox * d.stride + kw) as isize - d.pad as isize;
                    if ix < 0 || ix >= d.w as isize {
                        continue;
                    }
                    let in_px = ((iy as usize * d.w + ix as usize) * d.cin) * d.f;
                    let w_px = (kh * d.k + kw) * d.cin;
                    for ci in 0..d.cin {
                        let in_row = in_px + ci * d.f;
                        let w_ci = (w_px + ci) * d.cout;
                        for co in 0..d.cout {
                            let tap0 = (w_ci + co) * d.kf;
                            let out_row = out_px + co * d.f;
                            for kf in 0..d.kf {
                                let shift = kf as isize - pf;
                                let (lo, hi) = frame_range(d.f, shift);
                                let wv = weight[tap0 + kf];
                                let mut wacc = T::zero();
                                for fo in lo..hi {
                                    let g = gout[out_row + fo];
                                    let fi = (fo as isize + shift) as usize;
                                    if want_in {
                                        gin[in_row + fi] = gin[in_row + fi] + wv * g;
                                    }
                                    wacc = wacc + g * input[in_row + fi];
                                }
                                if want_w {
                                    gweight[tap0 + kf] = gweight[tap0 + kf] + wacc;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 average over H and W; stack and channel axes untouched.
pub(crate) fn down2_forward<T: Scalar>(input: &[T], h: usize, w: usize, rest: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = vec![T::zero(); ho * wo * rest];
    for oy in 0..ho {
        for ox in 0..wo {
            let o = (oy * wo + ox) * rest;
            let i00 = ((2 * oy) * w + 2 * ox) * rest;
            let i01 = i00 + rest;
            let i10 = i00 + w * rest;
            let i11 = i10 + rest;
            for r in 0..rest {
                out[o + r] =
                    (input[i00 + r] + input[i01 + r] + input[i10 + r] + input[i11 + r]) * quarter;
            }
        }
    }
    out
}

pub(crate) fn down2_backward<T: Scalar>(gout: &[T], h: usize, w: usize, rest: usize, gin: &mut [T]) {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    for oy in 0..ho {
        for ox in 0..wo {
            let o = (oy * wo + ox) * rest;
            let i00 = ((2 * oy) * w + 2 * ox) * rest;
            let i01 = i00 + rest;
            let i10 = i00 + w * rest;
            let i11 = i10 + rest;
            for r in 0..rest {
                let g = gout[o + r] * quarter;
                gin[i00 + r] = gin[i00 + r] + g;
                gin[i01 + r] = gin[i01 + r] + g;
                gin[i10 + r] = gin[i10 + r] + g;
                gin[i11 + r] = gin[i11 + r] + g;
            }
        }
    }
}

/// Nearest-neighbor 2x upsampling over H and W.
pub(crate) fn up2_forward<T: Scalar>(input: &[T], h: usize, w: usize, rest: usize) -> Vec<T> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); ho * wo * rest];
    for oy in 0..ho {
        for ox in 0..wo {
            let o = (oy * wo + ox) * rest;
            let i = ((oy / 2) * w + ox / 2) * rest;
            out[o..o + rest].copy_from_slice(&input[i..i + rest]);
        }
    }
    out
}

pub(crate) fn up2_backward<T: Scalar>(gout: &[T], h: usize, w: usize, rest: usize, gin: &mut [T]) {
    let wo = 2 * w;
    for oy in 0..2 * h {
        for ox in 0..wo {
            let o = (oy * wo + ox) * rest;
            let i = ((oy / 2) * w + ox / 2) * rest;
            for r in 0..rest {
                gin[i + r] = gin[i + r] + gout[o + r];
            }
        }
    }
}

/// Per-pixel softplus normalization over the frame axis (Eq. form:
/// `w_t = softplus(m_t) / sum_n softplus(m_n)`, guarded denominator).
pub(crate) fn softplus_norm_forward<T: Scalar>(scores: &[T], frames: usize) -> Vec<T> {
    let eps = T::from_f64(NORM_EPS);
    let mut out = vec![T::zero(); scores.len()];
    for (px_in, px_out) in scores.chunks_exact(frames).zip(out.chunks_exact_mut(frames)) {
        let mut total = T::zero();
        for (t, &m) in px_in.iter().enumerate() {
            let s = softplus(m);
            px_out[t] = s;
            total = total + s;
        }
        let denom = if total > eps { total } else { eps };
        for v in px_out.iter_mut() {
            *v = *v / denom;
        }
    }
    out
}

pub(crate) fn softplus_norm_backward<T: Scalar>(
    scores: &[T],
    weights: &[T],
    gout: &[T],
    frames: usize,
    gin: &mut [T],
) {
    let eps = T::from_f64(NORM_EPS);
    let n = scores.len() / frames;
    for px in 0..n {
        let base = px * frames;
        let mut total = T::zero();
        for t in 0..frames {
            total = total + softplus(scores[base + t]);
        }
        if total > eps {
            // y_t = s_t / S:  dL/dx_u = sigmoid(x_u) * (g_u - sum_t g_t y_t) / S
            let mut dot = T::zero();
            for t in 0..frames {
                dot = dot + gout[base + t] * weights[base + t];
            }
            for u in 0..frames {
                gin[base + u] =
                    gin[base + u] + sigmoid(scores[base + u]) * (gout[base + u] - dot) / total;
            }
        } else {
            // clamped denominator acts as a constant
            for u in 0..frames {
                gin[base + u] = gin[base + u] + sigmoid(scores[base + u]) * gout[base + u] / eps;
            }
        }
    }
}

/// Per-pixel softmax over the frame axis with max subtraction;
/// `temperature` scales the scores before exponentiation.
pub(crate) fn softmax_norm_forward<T: Scalar>(
    scores: &[T],
    frames: usize,
    temperature: T,
) -> Vec<T> {
    let mut out = vec![T::zero(); scores.len()];
    for (px_in, px_out) in scores.chunks_exact(frames).zip(out.chunks_exact_mut(frames)) {
        let mut peak = px_in[0] * temperature;
        for &m in &px_in[1..] {
            let z = m * temperature;
            if z > peak {
                peak = z;
            }
        }
        let mut total = T::zero();
        for (t, &m) in px_in.iter().enumerate() {
            let e = (m * temperature - peak).exp();
            px_out[t] = e;
            total = total + e;
        }
        for v in px_out.iter_mut() {
            *v = *v / total;
        }
    }
    out
}

pub(crate) fn softmax_norm_backward<T: Scalar>(
    weights: &[T],
    gout: &[T],
    frames: usize,
    temperature: T,
    gin: &mut [T],
) {
    let n = weights.len() / frames;
    for px in 0..n {
        let base = px * frames;
        let mut dot = T::zero();
        for t in 0..frames {
            dot = dot + gout[base + t] * weights[base + t];
        }
        for u in 0..frames {
            gin[base + u] =
                gin[base + u] + temperature * weights[base + u] * (gout[base + u] - dot);
        }
    }
}

/// Expectation over focus positions: `out(i,j,c) = sum_t w(i,j,c,t) p_t`.
pub(crate) fn expected_depth_forward<T: Scalar>(weights: &[T], positions: &[T]) -> Vec<T> {
    let frames = positions.len();
    weights
        .chunks_exact(frames)
        .map(|px| {
            px.iter()
                .zip(positions)
                .fold(T::zero(), |acc, (&w, &p)| acc + w * p)
        })
        .collect()
}

pub(crate) fn expected_depth_backward<T: Scalar>(gout: &[T], positions: &[T], gin: &mut [T]) {
    let frames = positions.len();
    for (px, &g) in gout.iter().enumerate() {
        let base = px * frames;
        for (t, &p) in positions.iter().enumerate() {
            gin[base + t] = gin[base + t] + g * p;
        }
    }
}

/// Attention-weighted slice blend: `out(i,j,k) = sum_t w(i,j,1,t) s(i,j,k,t)`.
/// One weight per pixel multiplies every color channel.
pub(crate) fn fuse_aif_forward<T: Scalar>(
    weights: &[T],
    stack: &[T],
    channels: usize,
    frames: usize,
) -> Vec<T> {
    let pixels = weights.len() / frames;
    let mut out = vec![T::zero(); pixels * channels];
    for px in 0..pixels {
        let wb = px * frames;
        for c in 0..channels {
            let sb = (px * channels + c) * frames;
            let mut acc = T::zero();
            for t in 0..frames {
                acc = acc + weights[wb + t] * stack[sb + t];
            }
            out[px * channels + c] = acc;
        }
    }
    out
}

pub(crate) fn fuse_aif_backward<T: Scalar>(
    weights: &[T],
    stack: &[T],
    gout: &[T],
    channels: usize,
    frames: usize,
    gweights: &mut [T],
    gstack: &mut [T],
) {
    let pixels = weights.len() / frames;
    for px in 0..pixels {
        let wb = px * frames;
        for c in 0..channels {
            let sb = (px * channels + c) * frames;
            let g = gout[px * channels + c];
            for t in 0..frames {
                if !gweights.is_empty() {
                    gweights[wb + t] = gweights[wb + t] + g * stack[sb + t];
                }
                if !gstack.is_empty() {
                    gstack[sb + t] = gstack[sb + t] + g * weights[wb + t];
                }
            }
        }
    }
}

/// Forward difference along W: `out(i,j,.) = in(i,j+1,.) - in(i,j,.)`.
pub(crate) fn diff_x_forward<T: Scalar>(input: &[T], h: usize, w: usize, rest: usize) -> Vec<T> {
    let mut out = vec![T::zero(); h * (w - 1) * rest];
    for y in 0..h {
        for x in 0..w - 1 {
            let o = (y * (w - 1) + x) * rest;
            let i = (y * w + x) * rest;
            for r in 0..rest {
                out[o + r] = input[i + rest + r] - input[i + r];
            }
        }
    }
    out
}

pub(crate) fn diff_x_backward<T: Scalar>(gout: &[T], h: usize, w: usize, rest: usize, gin: &mut [T]) {
    for y in 0..h {
        for x in 0..w - 1 {
            let o = (y * (w - 1) + x) * rest;
            let i = (y * w + x) * rest;
            for r in 0..rest {
                let g = gout[o + r];
                gin[i + rest + r] = gin[i + rest + r] + g;
                gin[i + r] = gin[i + r] - g;
            }
        }
    }
}

/// Forward difference along H: `out(i,j,.) = in(i+1,j,.) - in(i,j,.)`.
pub(crate) fn diff_y_forward<T: Scalar>(input: &[T], h: usize, w: usize, rest: usize) -> Vec<T> {
    let row = w * rest;
    let mut out = vec![T::zero(); (h - 1) * row];
    for y in 0..h - 1 {
        for i in 0..row {
            out[y * row + i] = input[(y + 1) * row + i] - input[y * row + i];
        }
    }
    out
}

pub(crate) fn diff_y_backward<T: Scalar>(gout: &[T], h: usize, w: usize, rest: usize, gin: &mut [T]) {
    let row = w * rest;
    for y in 0..h - 1 {
        for i in 0..row {
            let g = gout[y * row + i];
            gin[(y + 1) * row + i] = gin[(y + 1) * row + i] + g;
            gin[y * row + i] = gin[y * row + i] - g;
        }
    }
}
