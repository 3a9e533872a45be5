//! 2-D convolution kernels (stride 1).
//!
//! Channel counts in this model are small (1-48), where im2col + GEMM is
//! bandwidth-bound; a direct tap loop over contiguous row slices is faster.
//! 1x1 kernels reduce to a plain matrix product. Shared by the raw
//! inference path and the autodiff tape so both produce bit-identical
//! results.

use ndarray::{Array1, Array3, Array4, ArrayView1, ArrayView3, ArrayView4};

use super::Scalar;

/// Spatial padding mode for stride-1 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pad {
    /// Zero padding preserving H x W (odd kernels only).
    Same,
    /// No padding; output shrinks by k-1 per axis.
    Valid,
}

impl Pad {
    fn amount(self, k: usize) -> usize {
        match self {
            Pad::Same => {
                debug_assert!(k % 2 == 1, "Same padding requires odd kernels");
                (k - 1) / 2
            }
            Pad::Valid => 0,
        }
    }
}

/// Output spatial size for one axis.
pub fn out_len(len: usize, k: usize, pad: Pad) -> usize {
    match pad {
        Pad::Same => len,
        Pad::Valid => len + 1 - k,
    }
}

/// Valid output range of one kernel tap: oy in [lo, hi) keeps the source
/// row oy + d - p inside [0, len).
#[inline]
fn tap_range(len: usize, out: usize, d: usize, p: usize) -> (usize, usize) {
    let lo = p.saturating_sub(d);
    let hi = (len + p).saturating_sub(d).min(out);
    (lo, hi.max(lo))
}

/// Stride-1 convolution: x [Ci,H,W], w [Co,Ci,kh,kw] -> [Co,Ho,Wo].
pub fn conv2d<S: Scalar>(
    x: &ArrayView3<S>,
    w: &ArrayView4<S>,
    bias: Option<&ArrayView1<S>>,
    pad: Pad,
) -> Array3<S> {
    let (ci, h, wd) = x.dim();
    let (co, ciw, kh, kw) = w.dim();
    assert_eq!(ci, ciw, "conv2d channel mismatch: {ci} vs {ciw}");
    let (ho, wo) = (out_len(h, kh, pad), out_len(wd, kw, pad));
    let (ph, pw) = (pad.amount(kh), pad.amount(kw));
    let mut y = Array3::<S>::zeros((co, ho, wo));
    if let Some(b) = bias {
        for (o, mut plane) in y.outer_iter_mut().enumerate() {
            plane.fill(b[o]);
        }
    }
    if kh == 1 && kw == 1 {
        // pure channel mixing
        let xs = x.as_slice().expect("conv input must be standard layout");
        let ys = y.as_slice_mut().unwrap();
        let n = h * wd;
        for o in 0..co {
            for i in 0..ci {
                let coef = w[[o, i, 0, 0]];
                let src = &xs[i * n..(i + 1) * n];
                let dst = &mut ys[o * n..(o + 1) * n];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += coef * s;
                }
            }
        }
        return y;
    }
    let xs = x.as_slice().expect("conv input must be standard layout");
    let ys = y.as_slice_mut().unwrap();
    for o in 0..co {
        for i in 0..ci {
            for dy in 0..kh {
                let (oy_lo, oy_hi) = tap_range(h, ho, dy, ph);
                for dx in 0..kw {
                    let coef = w[[o, i, dy, dx]];
                    if coef == S::zero() {
                        continue;
                    }
                    let (ox_lo, ox_hi) = tap_range(wd, wo, dx, pw);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let n = ox_hi - ox_lo;
                    for oy in oy_lo..oy_hi {
                        let iy = oy + dy - ph;
                        let src_at = i * h * wd + iy * wd + (ox_lo + dx - pw);
                        let dst_at = o * ho * wo + oy * wo + ox_lo;
                        let src = &xs[src_at..src_at + n];
                        let dst = &mut ys[dst_at..dst_at + n];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += coef * s;
                        }
                    }
                }
            }
        }
    }
    y
}

/// Gradient of [`conv2d`] with respect to the input.
pub fn conv2d_grad_input<S: Scalar>(
    dy: &ArrayView3<S>,
    w: &ArrayView4<S>,
    in_h: usize,
    in_w: usize,
    pad: Pad,
) -> Array3<S> {
    let (co, ho, wo) = dy.dim();
    let (cow, ci, kh, kw) = w.dim();
    assert_eq!(co, cow);
    let (ph, pw) = (pad.amount(kh), pad.amount(kw));
    let mut dx = Array3::<S>::zeros((ci, in_h, in_w));
    let dys = dy.as_slice().expect("grad must be standard layout");
    let dxs = dx.as_slice_mut().unwrap();
    for o in 0..co {
        for i in 0..ci {
            for dyk in 0..kh {
                let (oy_lo, oy_hi) = tap_range(in_h, ho, dyk, ph);
                for dxk in 0..kw {
                    let coef = w[[o, i, dyk, dxk]];
                    if coef == S::zero() {
                        continue;
                    }
                    let (ox_lo, ox_hi) = tap_range(in_w, wo, dxk, pw);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let n = ox_hi - ox_lo;
                    for oy in oy_lo..oy_hi {
                        let iy = oy + dyk - ph;
                        let src_at = o * ho * wo + oy * wo + ox_lo;
                        let dst_at = i * in_h * in_w + iy * in_w + (ox_lo + dxk - pw);
                        let src = &dys[src_at..src_at + n];
                        let dst = &mut dxs[dst_at..dst_at + n];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += coef * s;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradients of [`conv2d`] with respect to kernel and bias.
pub fn conv2d_grad_weights<S: Scalar>(
    dy: &ArrayView3<S>,
    x: &ArrayView3<S>,
    kh: usize,
    kw: usize,
    pad: Pad,
) -> (Array4<S>, Array1<S>) {
    let (co, ho, wo) = dy.dim();
    let (ci, h, wd) = x.dim();
    let (ph, pw) = (pad.amount(kh), pad.amount(kw));
    let mut dw = Array4::<S>::zeros((co, ci, kh, kw));
    let dys = dy.as_slice().expect("grad must be standard layout");
    let xs = x.as_slice().expect("conv input must be standard layout");
    for o in 0..co {
        for i in 0..ci {
            for dyk in 0..kh {
                let (oy_lo, oy_hi) = tap_range(h, ho, dyk, ph);
                for dxk in 0..kw {
                    let (ox_lo, ox_hi) = tap_range(wd, wo, dxk, pw);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let n = ox_hi - ox_lo;
                    let mut acc = S::zero();
                    for oy in oy_lo..oy_hi {
                        let iy = oy + dyk - ph;
                        let a = &dys[o * ho * wo + oy * wo + ox_lo..][..n];
                        let b = &xs[i * h * wd + iy * wd + (ox_lo + dxk - pw)..][..n];
                        acc += a.iter()
                                .zip(b)
                                .map(|(&u, &v)| u * v)
                                .sum::<S>();
                    }
                    dw[[o, i, dyk, dxk]] = acc;
                }
            }
        }
    }
    let mut db = Array1::<S>::zeros(co);
    for (i, plane) in dy.outer_iter().enumerate() {
        db[i] = plane.iter().copied().sum();
    }
    (dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Array4};

    fn conv_naive(x: &Array3<f64>, w: &Array4<f64>, b: &[f64], pad: Pad) -> Array3<f64> {
        let (ci, h, wd) = x.dim();
        let (co, _, kh, kw) = w.dim();
        let (ph, pw) = match pad {
            Pad::Same => ((kh - 1) / 2, (kw - 1) / 2),
            Pad::Valid => (0, 0),
        };
        let (ho, wo) = (out_len(h, kh, pad), out_len(wd, kw, pad));
        let mut y = Array3::<f64>::zeros((co, ho, wo));
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[o];
                    for i in 0..ci {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = oy as isize + dy as isize - ph as isize;
                                let ix = ox as isize + dx as isize - pw as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x[[i, iy as usize, ix as usize]]
                                        * w[[o, i, dy, dx]];
                                }
                            }
                        }
                    }
                    y[[o, oy, ox]] = acc;
                }
            }
        }
        y
    }

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed;
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f64) / (u32::MAX as f64) - 0.5
        }
    }

    #[test]
    fn matches_naive_convolution() {
        let mut next = lcg(1234);
        for &pad in &[Pad::Same, Pad::Valid] {
            for &(ci, co, k, h, w) in &[
                (3usize, 4usize, 3usize, 7usize, 6usize),
                (2, 1, 5, 9, 9),
                (4, 2, 1, 5, 8),
            ] {
                let x = Array3::from_shape_simple_fn((ci, h, w), &mut next);
                let wt = Array4::from_shape_simple_fn((co, ci, k, k), &mut next);
                let b: Vec<f64> = (0..co).map(|_| next()).collect();
                let got = conv2d(
                    &x.view(),
                    &wt.view(),
                    Some(&ndarray::ArrayView1::from(&b)),
                    pad,
                );
                let want = conv_naive(&x, &wt, &b, pad);
                let diff = (&got - &want).iter().map(|v| v.abs()).fold(0.0, f64::max);
                assert!(diff < 1e-12, "pad {pad:?} k {k} diff {diff}");
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut next = lcg(99);
        let x = Array3::from_shape_simple_fn((2, 5, 5), &mut next);
        let w = Array4::from_shape_simple_fn((3, 2, 3, 3), &mut next);
        let b = vec![0.0; 3];
        let loss = |x: &Array3<f64>| {
            conv2d(&x.view(), &w.view(), Some(&ndarray::ArrayView1::from(&b)), Pad::Same)
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
        };
        let y = conv2d(&x.view(), &w.view(), Some(&ndarray::ArrayView1::from(&b)), Pad::Same);
        let dy = y.mapv(|v| 2.0 * v);
        let dx = conv2d_grad_input(&dy.view(), &w.view(), 5, 5, Pad::Same);
        let h = 1e-6;
        for idx in [[0usize, 0usize, 0usize], [1, 2, 3], [0, 4, 4], [1, 1, 0]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-6, "idx {idx:?}: {fd} vs {}", dx[idx]);
        }
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let mut next = lcg(7);
        let x = Array3::from_shape_simple_fn((2, 6, 4), &mut next);
        let w = Array4::from_shape_simple_fn((2, 2, 3, 3), &mut next);
        let b = vec![0.1, -0.2];
        let loss = |w: &Array4<f64>, b: &[f64]| {
            conv2d(&x.view(), &w.view(), Some(&ndarray::ArrayView1::from(b)), Pad::Valid)
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
        };
        let y = conv2d(&x.view(), &w.view(), Some(&ndarray::ArrayView1::from(&b)), Pad::Valid);
        let dy = y.mapv(|v| 2.0 * v);
        let (dw, db) = conv2d_grad_weights(&dy.view(), &x.view(), 3, 3, Pad::Valid);
        let h = 1e-6;
        for idx in [[0usize, 0usize, 0usize, 0usize], [1, 1, 2, 2], [0, 1, 1, 0]] {
            let mut wp = w.clone();
            wp[idx] += h;
            let mut wm = w.clone();
            wm[idx] -= h;
            let fd = (loss(&wp, &b) - loss(&wm, &b)) / (2.0 * h);
            assert!((fd - dw[idx]).abs() < 1e-6);
        }
        for i in 0..2 {
            let mut bp = b.clone();
            bp[i] += h;
            let mut bm = b.clone();
            bm[i] -= h;
            let fd = (loss(&w, &bp) - loss(&w, &bm)) / (2.0 * h);
            assert!((fd - db[i]).abs() < 1e-6);
        }
    }
}
