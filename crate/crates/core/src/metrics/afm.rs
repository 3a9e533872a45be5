//! Phase-congruency feature measure: log-Gabor phase congruency maps
//! (4 scales, 6 orientations) for the fused image and both sources; the
//! score is the product of the correlation coefficients between the fused
//! map and each source map and the maximum-of-sources map.

use ndarray::{Array2, ArrayView2};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

const NSCALE: usize = 4;
const NORIENT: usize = 6;
const MIN_WAVELENGTH: f64 = 3.0;
const MULT: f64 = 2.1;
const SIGMA_ONF: f64 = 0.55;
const D_THETA_SIGMA: f64 = 1.5;
const EPS: f64 = 1e-4;

fn fft2(data: &mut Array2<Complex<f64>>, inverse: bool) {
    let (h, w) = data.dim();
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    for mut row in data.rows_mut() {
        let mut buf: Vec<Complex<f64>> = row.iter().copied().collect();
        row_fft.process(&mut buf);
        for (dst, src) in row.iter_mut().zip(buf) {
            *dst = src;
        }
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    for j in 0..w {
        let mut buf: Vec<Complex<f64>> = (0..h).map(|i| data[[i, j]]).collect();
        col_fft.process(&mut buf);
        for (i, v) in buf.into_iter().enumerate() {
            data[[i, j]] = v;
        }
    }
    if inverse {
        let norm = 1.0 / (h * w) as f64;
        data.mapv_inplace(|v| v * norm);
    }
}

/// Log-Gabor phase congruency map, values in [0,1).
pub fn phase_congruency(x: &ArrayView2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    let mut spectrum = x.mapv(|v| Complex::new(v, 0.0));
    fft2(&mut spectrum, false);

    // centered frequency coordinates in cycles per pixel
    let freq = |idx: usize, n: usize| {
        let v = if idx < n.div_ceil(2) {
            idx as f64
        } else {
            idx as f64 - n as f64
        };
        v / n as f64
    };
    let mut radius = Array2::zeros((h, w));
    let mut theta = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let (fy, fx) = (freq(i, h), freq(j, w));
            radius[[i, j]] = (fx * fx + fy * fy).sqrt();
            theta[[i, j]] = (-fy).atan2(fx);
        }
    }
    radius[[0, 0]] = 1.0;

    let sigma_theta = std::f64::consts::PI / NORIENT as f64 / D_THETA_SIGMA;
    let log_sigma = SIGMA_ONF.ln();
    let mut total_energy = Array2::<f64>::zeros((h, w));
    let mut total_an = Array2::<f64>::zeros((h, w));

    for o in 0..NORIENT {
        let angl = o as f64 * std::f64::consts::PI / NORIENT as f64;
        let spread = theta.mapv(|t| {
            let ds = t.sin() * angl.cos() - t.cos() * angl.sin();
            let dc = t.cos() * angl.cos() + t.sin() * angl.sin();
            let dt = ds.atan2(dc).abs();
            (-dt * dt / (2.0 * sigma_theta * sigma_theta)).exp()
        });
        let mut responses: Vec<Array2<Complex<f64>>> = Vec::with_capacity(NSCALE);
        for s in 0..NSCALE {
            let f0 = 1.0 / (MIN_WAVELENGTH * MULT.powi(s as i32));
            let mut filtered = Array2::zeros((h, w));
            for i in 0..h {
                for j in 0..w {
                    let lg = if i == 0 && j == 0 {
                        0.0
                    } else {
                        let lr = (radius[[i, j]] / f0).ln();
                        (-lr * lr / (2.0 * log_sigma * log_sigma)).exp()
                    };
                    filtered[[i, j]] = spectrum[[i, j]] * lg * spread[[i, j]];
                }
            }
            fft2(&mut filtered, true);
            responses.push(filtered);
        }
        let mut sum_e = Array2::<f64>::zeros((h, w));
        let mut sum_o = Array2::<f64>::zeros((h, w));
        let mut sum_an = Array2::<f64>::zeros((h, w));
        for r in &responses {
            for ((i, j), &c) in r.indexed_iter() {
                sum_e[[i, j]] += c.re;
                sum_o[[i, j]] += c.im;
                sum_an[[i, j]] += c.norm();
            }
        }
        for i in 0..h {
            for j in 0..w {
                let xe = (sum_e[[i, j]] * sum_e[[i, j]] + sum_o[[i, j]] * sum_o[[i, j]]).sqrt()
                    + EPS;
                let (me, mo) = (sum_e[[i, j]] / xe, sum_o[[i, j]] / xe);
                let mut energy = 0.0;
                for r in &responses {
                    let c = r[[i, j]];
                    energy += c.re * me + c.im * mo - (c.re * mo - c.im * me).abs();
                }
                total_energy[[i, j]] += energy.max(0.0);
                total_an[[i, j]] += sum_an[[i, j]];
            }
        }
    }
    ndarray::Zip::from(&total_energy)
        .and(&total_an)
        .map_collect(|&e, &a| e / (a + EPS))
}

fn pearson(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let n = a.len() as f64;
    let ma = a.sum() / n;
    let mb = b.sum() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b.iter()) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va < 1e-20 || vb < 1e-20 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// AFM(fused; a, b) in [-1, 1].
pub fn afm(fused: &ArrayView2<f64>, a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<f64> {
    if fused.dim() != a.dim() || fused.dim() != b.dim() {
        return Err(Error::Size("afm inputs differ in size".into()));
    }
    let pf = phase_congruency(fused);
    let pa = phase_congruency(a);
    let pb = phase_congruency(b);
    let pmax = ndarray::Zip::from(&pa).and(&pb).map_collect(|&x, &y| x.max(y));
    Ok(pearson(&pf, &pa) * pearson(&pf, &pb) * pearson(&pf, &pmax))
}
