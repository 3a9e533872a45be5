//! Edge-transfer fusion quality (the Xydeas-Petrovic measure): Sobel edge
//! strength and orientation preservation pushed through sigmoid models,
//! averaged with edge-strength weights over both sources.

use ndarray::{Array2, ArrayView2};
use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};

const GAMMA_G: f64 = 0.9994;
const KAPPA_G: f64 = -15.0;
const SIGMA_G: f64 = 0.5;
const GAMMA_A: f64 = 0.9879;
const KAPPA_A: f64 = -22.0;
const SIGMA_A: f64 = 0.8;

/// Sobel gradients with replicated borders (same size). Replication keeps
/// constant images gradient-free, so flat inputs carry no edge weight.
fn sobel(x: &ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = x.dim();
    let mut gx = Array2::zeros((h, w));
    let mut gy = Array2::zeros((h, w));
    let at = |i: isize, j: isize| {
        let ic = i.clamp(0, h as isize - 1) as usize;
        let jc = j.clamp(0, w as isize - 1) as usize;
        x[[ic, jc]]
    };
    for i in 0..h as isize {
        for j in 0..w as isize {
            let gxv = at(i - 1, j + 1) + 2.0 * at(i, j + 1) + at(i + 1, j + 1)
                - at(i - 1, j - 1)
                - 2.0 * at(i, j - 1)
                - at(i + 1, j - 1);
            let gyv = at(i + 1, j - 1) + 2.0 * at(i + 1, j) + at(i + 1, j + 1)
                - at(i - 1, j - 1)
                - 2.0 * at(i - 1, j)
                - at(i - 1, j + 1);
            gx[[i as usize, j as usize]] = gxv;
            gy[[i as usize, j as usize]] = gyv;
        }
    }
    (gx, gy)
}

fn strength_orientation(x: &ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (gx, gy) = sobel(x);
    let g = ndarray::Zip::from(&gx)
        .and(&gy)
        .map_collect(|&a, &b| (a * a + b * b).sqrt());
    let alpha = ndarray::Zip::from(&gy).and(&gx).map_collect(|&a, &b| {
        if a == 0.0 && b == 0.0 {
            0.0
        } else {
            (a / b).atan() // atan of +-inf gives +-pi/2 when b = 0
        }
    });
    (g, alpha)
}

/// Per-pixel edge preservation of one source in the fused image.
fn preservation(
    gs: &Array2<f64>,
    als: &Array2<f64>,
    gf: &Array2<f64>,
    alf: &Array2<f64>,
) -> Array2<f64> {
    ndarray::Zip::from(gs)
        .and(als)
        .and(gf)
        .and(alf)
        .map_collect(|&ga, &aa, &gff, &af| {
            let g = if ga > gff {
                gff / ga
            } else if ga < gff {
                ga / gff
            } else if ga == 0.0 {
                0.0
            } else {
                1.0
            };
            let a = 1.0 - (aa - af).abs() / FRAC_PI_2;
            let qg = GAMMA_G / (1.0 + (KAPPA_G * (g - SIGMA_G)).exp());
            let qa = GAMMA_A / (1.0 + (KAPPA_A * (a - SIGMA_A)).exp());
            qg * qa
        })
}

/// QABF(fused; a, b): edge-strength-weighted preservation over both sources.
pub fn qabf(fused: &ArrayView2<f64>, a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<f64> {
    if fused.dim() != a.dim() || fused.dim() != b.dim() {
        return Err(Error::Size("qabf inputs differ in size".into()));
    }
    let (h, w) = fused.dim();
    if h < 3 || w < 3 {
        return Err(Error::Size(format!("qabf needs at least 3x3, got {h}x{w}")));
    }
    let (gf, alf) = strength_orientation(fused);
    let (ga, ala) = strength_orientation(a);
    let (gb, alb) = strength_orientation(b);
    let qa = preservation(&ga, &ala, &gf, &alf);
    let qb = preservation(&gb, &alb, &gf, &alf);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..h {
        for j in 0..w {
            num += qa[[i, j]] * ga[[i, j]] + qb[[i, j]] * gb[[i, j]];
            den += ga[[i, j]] + gb[[i, j]];
        }
    }
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_img(h: usize, w: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((h, w), || rng.gen_range(0.0..1.0))
    }

    #[test]
    fn self_fusion_sits_on_the_sigmoid_plateau() {
        // Perfect preservation: G = A = 1 at every edge pixel, so
        // QABF = Qg(1) * Qa(1) exactly.
        let plateau = GAMMA_G / (1.0 + (KAPPA_G * (1.0 - SIGMA_G)).exp()) * GAMMA_A
            / (1.0 + (KAPPA_A * (1.0 - SIGMA_A)).exp());
        let x = rand_img(32, 32, 1);
        let q = qabf(&x.view(), &x.view(), &x.view()).unwrap();
        assert!((q - plateau).abs() < 1e-9, "q {q} plateau {plateau}");
        // the canonical constants put the plateau just under 0.975
        assert!((plateau - 0.9747943).abs() < 1e-6);
    }

    #[test]
    fn constant_fused_transfers_no_edges() {
        let a = rand_img(32, 32, 2);
        let b = rand_img(32, 32, 3);
        let f = Array2::from_elem((32, 32), 0.5);
        let q = qabf(&f.view(), &a.view(), &b.view()).unwrap();
        assert!(q < 0.02, "q {q}");
    }

    #[test]
    fn symmetric_in_sources() {
        let a = rand_img(16, 16, 4);
        let b = rand_img(16, 16, 5);
        let f = rand_img(16, 16, 6);
        let q1 = qabf(&f.view(), &a.view(), &b.view()).unwrap();
        let q2 = qabf(&f.view(), &b.view(), &a.view()).unwrap();
        assert!((q1 - q2).abs() < 1e-12);
    }

    #[test]
    fn all_constant_inputs_define_zero() {
        let c = Array2::from_elem((8, 8), 0.25);
        assert_eq!(qabf(&c.view(), &c.view(), &c.view()).unwrap(), 0.0);
        assert!(qabf(
            &Array2::zeros((2, 8)).view(),
            &Array2::zeros((2, 8)).view(),
            &Array2::zeros((2, 8)).view()
        )
        .is_err());
    }

    #[test]
    fn bounded_in_unit_interval() {
        for seed in 0..5 {
            let f = rand_img(24, 24, 10 + seed);
            let a = rand_img(24, 24, 20 + seed);
            let b = rand_img(24, 24, 30 + seed);
            let q = qabf(&f.view(), &a.view(), &b.view()).unwrap();
            assert!((0.0..=1.0).contains(&q));
        }
    }
}
