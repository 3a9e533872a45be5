//! Visual information fidelity for fusion: a four-scale pixel-domain VIF
//! between each source and the fused image under the Gaussian scalar-mixture
//! noise model (sigma_n^2 = 2 on the 0-255 scale), averaged over the two
//! sources with uniform per-scale weights.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

const SIGMA_N_SQ: f64 = 2.0;
const EPS: f64 = 1e-10;
const SCALES: usize = 4;
const SCALE_WEIGHTS: [f64; SCALES] = [0.25, 0.25, 0.25, 0.25];

/// 1-D Gaussian taps of length n with sigma = n/5, normalized.
fn gaussian_taps(n: usize) -> Vec<f64> {
    let sigma = n as f64 / 5.0;
    let c = (n / 2) as f64;
    let mut taps: Vec<f64> = (0..n)
        .map(|i| (-((i as f64 - c) * (i as f64 - c)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Separable valid-mode Gaussian filter.
fn filter_valid(x: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let n = taps.len();
    let (h, w) = x.dim();
    let mut rows = Array2::zeros((h, w - n + 1));
    for i in 0..h {
        for j in 0..w - n + 1 {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                acc += t * x[[i, j + k]];
            }
            rows[[i, j]] = acc;
        }
    }
    let mut out = Array2::zeros((h - n + 1, w - n + 1));
    for i in 0..h - n + 1 {
        for j in 0..w - n + 1 {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                acc += t * rows[[i + k, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

fn downsample2(x: &Array2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    Array2::from_shape_fn((h.div_ceil(2), w.div_ceil(2)), |(i, j)| x[[2 * i, 2 * j]])
}

/// Pixel-domain VIF of `dist` against reference `ref_img`, both in [0,1].
/// Returns 1 when the reference carries no information at any usable scale.
pub fn vif_pixel(ref_img: &ArrayView2<f64>, dist: &ArrayView2<f64>) -> Result<f64> {
    if ref_img.dim() != dist.dim() {
        return Err(Error::Size("vif inputs differ in size".into()));
    }
    let mut r = ref_img.mapv(|v| v * 255.0);
    let mut d = dist.mapv(|v| v * 255.0);
    let mut num = 0.0;
    let mut den = 0.0;
    let mut used_any = false;
    for scale in 1..=SCALES {
        let n = (1usize << (SCALES - scale + 1)) + 1;
        let taps = gaussian_taps(n);
        if scale > 1 {
            if r.nrows() < n || r.ncols() < n {
                break;
            }
            r = downsample2(&filter_valid(&r, &taps));
            d = downsample2(&filter_valid(&d, &taps));
        }
        if r.nrows() < n || r.ncols() < n {
            break;
        }
        let mu1 = filter_valid(&r, &taps);
        let mu2 = filter_valid(&d, &taps);
        let s11 = filter_valid(&r.mapv(|v| v * v), &taps);
        let s22 = filter_valid(&d.mapv(|v| v * v), &taps);
        let s12 = filter_valid(&(&r * &d), &taps);
        let w = SCALE_WEIGHTS[scale - 1];
        for ((i, j), &m1) in mu1.indexed_iter() {
            let m2 = mu2[[i, j]];
            let mut sigma1_sq = s11[[i, j]] - m1 * m1;
            let mut sigma2_sq = s22[[i, j]] - m2 * m2;
            let sigma12 = s12[[i, j]] - m1 * m2;
            if sigma1_sq < 0.0 {
                sigma1_sq = 0.0;
            }
            if sigma2_sq < 0.0 {
                sigma2_sq = 0.0;
            }
            let mut g = sigma12 / (sigma1_sq + EPS);
            let mut sv_sq = sigma2_sq - g * sigma12;
            if sigma1_sq < EPS {
                g = 0.0;
                sv_sq = sigma2_sq;
                sigma1_sq = 0.0;
            }
            if sigma2_sq < EPS {
                g = 0.0;
                sv_sq = 0.0;
            }
            if g < 0.0 {
                sv_sq = sigma2_sq;
                g = 0.0;
            }
            if sv_sq < EPS {
                sv_sq = EPS;
            }
            num += w * (1.0 + g * g * sigma1_sq / (sv_sq + SIGMA_N_SQ)).ln();
            den += w * (1.0 + sigma1_sq / SIGMA_N_SQ).ln();
        }
        used_any = true;
    }
    if !used_any {
        return Err(Error::Size(
            "image too small for the coarsest VIF scale".into(),
        ));
    }
    if den <= 0.0 {
        return Ok(1.0);
    }
    Ok(num / den)
}

/// VIFF(fused; a, b): mean VIF over the two sources.
pub fn viff(fused: &ArrayView2<f64>, a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<f64> {
    Ok((vif_pixel(a, fused)? + vif_pixel(b, fused)?) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn smooth_img(h: usize, w: usize, seed: u64) -> Array2<f64> {
        // band-limited content so local statistics are non-trivial
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (fx, fy, phase) = (
            rng.gen_range(0.02..0.2),
            rng.gen_range(0.02..0.2),
            rng.gen_range(0.0..6.28),
        );
        Array2::from_shape_fn((h, w), |(i, j)| {
            0.5 + 0.3 * ((i as f64) * fy + (j as f64) * fx + phase).sin()
                + 0.1 * ((i as f64) * 0.45).cos() * ((j as f64) * 0.31).sin()
        })
    }

    #[test]
    fn identical_images_have_unit_fidelity() {
        let x = smooth_img(96, 96, 1);
        let v = vif_pixel(&x.view(), &x.view()).unwrap();
        assert!((v - 1.0).abs() < 1e-6, "vif {v}");
        let vf = viff(&x.view(), &x.view(), &x.view()).unwrap();
        assert!((vf - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_fused_loses_information() {
        let x = smooth_img(96, 96, 2);
        let c = Array2::from_elem((96, 96), 0.5);
        let v = vif_pixel(&x.view(), &c.view()).unwrap();
        assert!(v < 0.05, "vif {v}");
    }

    #[test]
    fn fidelity_decreases_with_noise() {
        let x = smooth_img(96, 96, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise: Array2<f64> = Array2::from_shape_simple_fn((96, 96), || rng.gen_range(-1.0..1.0));
        let mut prev = f64::INFINITY;
        for level in [0.0, 0.05, 0.15, 0.4] {
            let d = ndarray::Zip::from(&x)
                .and(&noise)
                .map_collect(|&a, &n| (a + level * n).clamp(0.0, 1.0));
            let v = vif_pixel(&x.view(), &d.view()).unwrap();
            assert!(v <= prev + 1e-9, "level {level}: {v} vs {prev}");
            prev = v;
        }
    }

    #[test]
    fn constant_reference_defines_unit_fidelity() {
        let c = Array2::from_elem((64, 64), 0.3);
        let d = smooth_img(64, 64, 5);
        assert_eq!(vif_pixel(&c.view(), &d.view()).unwrap(), 1.0);
    }
}
