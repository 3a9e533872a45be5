//! Adaptive data-driven loss: structural similarity weighted by each
//! source's average gradient, plus region mutual information weighted by
//! each source's entropy. All weights come from the source images per
//! sample; none are learned or hand-set.
//!
//! The RMI contribution enters the total loss negated so that minimizing
//! the loss maximizes region mutual information between the fused image and
//! each source.
//!
//! Every quantity has two routes: a direct implementation here (used for
//! evaluation and as an oracle) and a tape mirror (used for training
//! gradients). Tests pin the two against each other.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::tensor::{linalg, Pad, Scalar, Tape, Var};

/// SSIM window side.
pub const SSIM_WINDOW: usize = 11;
/// SSIM Gaussian sigma.
pub const SSIM_SIGMA: f64 = 1.5;
/// SSIM stabilizers for dynamic range 1: (K1*L)^2 and (K2*L)^2.
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
/// Diagonal loading of RMI covariance blocks.
pub const RMI_EPS: f64 = 1e-6;
/// RMI neighborhood is 3x3 (9-dim vectors) sampled at stride 3.
pub const RMI_DIM: usize = 9;

/// Per-sample loss weights: AG of each source drives the SSIM terms, EN of
/// each source drives the RMI terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptiveWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl AdaptiveWeights {
    /// Fixed weights for the manual-weight ablation grid.
    pub fn fixed(alpha1: f64, alpha2: f64, beta1: f64, beta2: f64) -> Self {
        AdaptiveWeights {
            alpha1,
            alpha2,
            beta1,
            beta2,
        }
    }

    /// True when every weight is zero (both sources constant); such samples
    /// contribute zero loss and should be logged, not fail.
    pub fn is_degenerate(&self) -> bool {
        self.alpha1 == 0.0 && self.alpha2 == 0.0 && self.beta1 == 0.0 && self.beta2 == 0.0
    }
}

/// One evaluated loss with its ingredients.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub ssim_term: f64,
    pub rmi_term: f64,
    pub total: f64,
    pub weights: AdaptiveWeights,
    pub degenerate: bool,
}

/// The 11x11 Gaussian SSIM window, normalized to sum 1.
pub fn ssim_window() -> Array2<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut w = Array2::from_shape_fn((SSIM_WINDOW, SSIM_WINDOW), |(i, j)| {
        let (di, dj) = (i as f64 - c, j as f64 - c);
        (-(di * di + dj * dj) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    });
    let sum: f64 = w.iter().sum();
    w.mapv_inplace(|v| v / sum);
    w
}

fn check_equal_dims(a: &ArrayView2<f64>, b: &ArrayView2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "{what}: dimensions differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Mean local SSIM over valid 11x11 Gaussian windows; dynamic range 1.
pub fn ssim(x: &ArrayView2<f64>, y: &ArrayView2<f64>) -> Result<f64> {
    check_equal_dims(x, y, "ssim")?;
    let (h, w) = x.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Size(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let win = ssim_window();
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for oy in 0..ho {
        for ox in 0..wo {
            let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let wv = win[[dy, dx]];
                    let xv = x[[oy + dy, ox + dx]];
                    let yv = y[[oy + dy, ox + dx]];
                    mx += wv * xv;
                    my += wv * yv;
                    mxx += wv * xv * xv;
                    myy += wv * yv * yv;
                    mxy += wv * xv * yv;
                }
            }
            let (vx, vy, cxy) = (mxx - mx * mx, myy - my * my, mxy - mx * my);
            let num = (2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2);
            let den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2);
            total += num / den;
        }
    }
    Ok(total / (ho * wo) as f64)
}

/// Mean forward-difference gradient magnitude over the (H-1)x(W-1) interior,
/// on the [0,1] intensity scale.
pub fn average_gradient(x: &ArrayView2<f64>) -> Result<f64> {
    let (h, w) = x.dim();
    if h < 2 || w < 2 {
        return Err(Error::Size(format!(
            "average gradient needs at least 2x2, got {h}x{w}"
        )));
    }
    let mut sum = 0.0;
    for i in 0..h - 1 {
        for j in 0..w - 1 {
            let dx = x[[i, j + 1]] - x[[i, j]];
            let dy = x[[i + 1, j]] - x[[i, j]];
            sum += (dx * dx + dy * dy).sqrt();
        }
    }
    Ok(sum / ((h - 1) * (w - 1)) as f64)
}

/// Shannon entropy over 256 gray levels (floor(x*255)), in bits.
pub fn entropy(x: &ArrayView2<f64>) -> f64 {
    let mut hist = [0u64; 256];
    for &v in x.iter() {
        let level = ((v * 255.0).floor() as i64).clamp(0, 255) as usize;
        hist[level] += 1;
    }
    let n = x.len() as f64;
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Extract centered 3x3-neighborhood vectors (stride 3) as columns.
fn rmi_vectors(x: &ArrayView2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    let (ni, nj) = ((h - 3) / 3 + 1, (w - 3) / 3 + 1);
    let mut m = Array2::zeros((RMI_DIM, ni * nj));
    for i in 0..ni {
        for j in 0..nj {
            for dy in 0..3 {
                for dx in 0..3 {
                    m[[dy * 3 + dx, i * nj + j]] = x[[3 * i + dy, 3 * j + dx]];
                }
            }
        }
    }
    for mut row in m.rows_mut() {
        let mu = row.sum() / row.len() as f64;
        row.mapv_inplace(|v| v - mu);
    }
    m
}

/// Region mutual information lower bound between a fused image and a source:
/// (logdet(S_src) - logdet(S_src - S_sf S_f^-1 S_fs)) / (2 * 9), with
/// eps-loaded covariance diagonals.
pub fn region_mutual_information(fused: &ArrayView2<f64>, src: &ArrayView2<f64>) -> Result<f64> {
    check_equal_dims(fused, src, "rmi")?;
    let (h, w) = fused.dim();
    if h < RMI_DIM || w < RMI_DIM {
        return Err(Error::Size(format!(
            "rmi needs at least {RMI_DIM}x{RMI_DIM}, got {h}x{w}"
        )));
    }
    let cf = rmi_vectors(fused);
    let cs = rmi_vectors(src);
    let n1 = (cf.ncols() - 1).max(1) as f64;
    let mut sigma_s = cs.dot(&cs.t()) / n1;
    let mut sigma_f = cf.dot(&cf.t()) / n1;
    let sigma_sf = cs.dot(&cf.t()) / n1;
    for i in 0..RMI_DIM {
        sigma_s[[i, i]] += RMI_EPS;
        sigma_f[[i, i]] += RMI_EPS;
    }
    let lf = linalg::cholesky(&sigma_f.view())?;
    let inv_f = linalg::inverse_from_cholesky(&lf);
    let m = &sigma_s - &sigma_sf.dot(&inv_f).dot(&sigma_sf.t());
    let ls = linalg::cholesky(&sigma_s.view())?;
    let lm = linalg::cholesky(&m.view())?;
    let ld_s = linalg::logdet_from_cholesky(&ls);
    let ld_m = linalg::logdet_from_cholesky(&lm);
    Ok((ld_s - ld_m) / (2.0 * RMI_DIM as f64))
}

/// AG of each source becomes the SSIM weights, EN the RMI weights.
/// With `normalize`, each pair is rescaled to sum to one (zero pairs stay
/// zero).
pub fn compute_weights(
    mri: &ArrayView2<f64>,
    func: &ArrayView2<f64>,
    normalize: bool,
) -> Result<AdaptiveWeights> {
    let mut w = AdaptiveWeights {
        alpha1: average_gradient(mri)?,
        alpha2: average_gradient(func)?,
        beta1: entropy(mri),
        beta2: entropy(func),
    };
    if normalize {
        let a = w.alpha1 + w.alpha2;
        if a > 0.0 {
            w.alpha1 /= a;
            w.alpha2 /= a;
        }
        let b = w.beta1 + w.beta2;
        if b > 0.0 {
            w.beta1 /= b;
            w.beta2 /= b;
        }
    }
    Ok(w)
}

/// Total adaptive loss:
/// ssim_term = a1 (1 - SSIM(f, mri)) + a2 (1 - SSIM(f, func));
/// rmi_term  = -(b1 RMI(f, mri) + b2 RMI(f, func)).
pub fn total_loss(
    fused: &ArrayView2<f64>,
    mri: &ArrayView2<f64>,
    func: &ArrayView2<f64>,
    weights: &AdaptiveWeights,
) -> Result<LossBreakdown> {
    let ssim_term = weights.alpha1 * (1.0 - ssim(fused, mri)?)
        + weights.alpha2 * (1.0 - ssim(fused, func)?);
    let rmi_term = -(weights.beta1 * region_mutual_information(fused, mri)?
        + weights.beta2 * region_mutual_information(fused, func)?);
    Ok(LossBreakdown {
        ssim_term,
        rmi_term,
        total: ssim_term + rmi_term,
        weights: *weights,
        degenerate: weights.is_degenerate(),
    })
}

// ---- tape mirrors -------------------------------------------------------

/// SSIM as a tape node; `x`, `y` are [H,W] nodes.
pub fn ssim_t<S: Scalar>(tape: &mut Tape<S>, x: Var, y: Var) -> Var {
    let shape = tape.shape(x).to_vec();
    let (h, w) = (shape[0], shape[1]);
    assert!(h >= SSIM_WINDOW && w >= SSIM_WINDOW, "image below SSIM window");
    let win = ssim_window().mapv(S::from_float);
    let win4 = win
        .into_shape_with_order((1, 1, SSIM_WINDOW, SSIM_WINDOW))
        .unwrap()
        .into_dyn();
    let wvar = tape.constant(win4);

    let x3 = tape.reshape(x, &[1, h, w]);
    let y3 = tape.reshape(y, &[1, h, w]);
    let xx = tape.mul(x3, x3);
    let yy = tape.mul(y3, y3);
    let xy = tape.mul(x3, y3);
    let mx = tape.conv2d(x3, wvar, None, Pad::Valid);
    let my = tape.conv2d(y3, wvar, None, Pad::Valid);
    let mxx = tape.conv2d(xx, wvar, None, Pad::Valid);
    let myy = tape.conv2d(yy, wvar, None, Pad::Valid);
    let mxy = tape.conv2d(xy, wvar, None, Pad::Valid);

    let mx2 = tape.mul(mx, mx);
    let my2 = tape.mul(my, my);
    let mxmy = tape.mul(mx, my);
    let vx = tape.sub(mxx, mx2);
    let vy = tape.sub(myy, my2);
    let cxy = tape.sub(mxy, mxmy);

    let two = S::from_float(2.0);
    let c1 = S::from_float(SSIM_C1);
    let c2 = S::from_float(SSIM_C2);
    let l = tape.scale(mxmy, two);
    let l = tape.add_scalar(l, c1);
    let c = tape.scale(cxy, two);
    let c = tape.add_scalar(c, c2);
    let num = tape.mul(l, c);
    let d1 = tape.add(mx2, my2);
    let d1 = tape.add_scalar(d1, c1);
    let d2 = tape.add(vx, vy);
    let d2 = tape.add_scalar(d2, c2);
    let den = tape.mul(d1, d2);
    let map = tape.div(num, den);
    tape.mean_all(map)
}

/// Region mutual information as a tape node; `fused`, `src` are [H,W] nodes.
pub fn rmi_t<S: Scalar>(tape: &mut Tape<S>, fused: Var, src: Var) -> Result<Var> {
    let uf = tape.unfold3x3_s3(fused);
    let us = tape.unfold3x3_s3(src);
    let cf = tape.center_rows(uf);
    let cs = tape.center_rows(us);
    let n1 = S::from_float((tape.shape(cf)[1] - 1).max(1) as f64);
    let inv_n1 = S::one() / n1;
    let eps_eye = tape.constant(
        (Array2::<f64>::eye(RMI_DIM) * RMI_EPS)
            .mapv(S::from_float)
            .into_dyn(),
    );
    let cst = tape.transpose(cs);
    let cft = tape.transpose(cf);
    let ss = tape.matmul(cs, cst);
    let ss = tape.scale(ss, inv_n1);
    let sigma_s = tape.add(ss, eps_eye);
    let sf = tape.matmul(cf, cft);
    let sf = tape.scale(sf, inv_n1);
    let sigma_f = tape.add(sf, eps_eye);
    let ssf = tape.matmul(cs, cft);
    let sigma_sf = tape.scale(ssf, inv_n1);

    let inv_f = tape.psd_inverse(sigma_f)?;
    let t1 = tape.matmul(sigma_sf, inv_f);
    let sigma_sf_t = tape.transpose(sigma_sf);
    let t2 = tape.matmul(t1, sigma_sf_t);
    let m = tape.sub(sigma_s, t2);

    let ld_s = tape.logdet_psd(sigma_s)?;
    let ld_m = tape.logdet_psd(m)?;
    let diff = tape.sub(ld_s, ld_m);
    Ok(tape.scale(diff, S::from_float(1.0 / (2.0 * RMI_DIM as f64))))
}

/// Tape nodes of the loss pieces.
pub struct LossVars {
    pub ssim_term: Var,
    pub rmi_term: Var,
    pub total: Var,
}

/// Total adaptive loss as tape nodes; inputs are [H,W] nodes and weights are
/// per-sample constants.
pub fn total_loss_t<S: Scalar>(
    tape: &mut Tape<S>,
    fused: Var,
    mri: Var,
    func: Var,
    weights: &AdaptiveWeights,
) -> Result<LossVars> {
    let one = S::one();
    let s1 = ssim_t(tape, fused, mri);
    let s2 = ssim_t(tape, fused, func);
    let d1 = tape.scale(s1, -one);
    let d1 = tape.add_scalar(d1, one);
    let d1 = tape.scale(d1, S::from_float(weights.alpha1));
    let d2 = tape.scale(s2, -one);
    let d2 = tape.add_scalar(d2, one);
    let d2 = tape.scale(d2, S::from_float(weights.alpha2));
    let ssim_term = tape.add(d1, d2);

    let r1 = rmi_t(tape, fused, mri)?;
    let r2 = rmi_t(tape, fused, func)?;
    let r1 = tape.scale(r1, S::from_float(weights.beta1));
    let r2 = tape.scale(r2, S::from_float(weights.beta2));
    let rsum = tape.add(r1, r2);
    let rmi_term = tape.scale(rsum, -one);

    let total = tape.add(ssim_term, rmi_term);
    Ok(LossVars {
        ssim_term,
        rmi_term,
        total,
    })
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
    fn ssim_self_similarity_and_symmetry() {
        let x = rand_img(16, 16, 1);
        let y = rand_img(16, 16, 2);
        assert!((ssim(&x.view(), &x.view()).unwrap() - 1.0).abs() < 1e-9);
        let a = ssim(&x.view(), &y.view()).unwrap();
        let b = ssim(&y.view(), &x.view()).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(ssim(&rand_img(8, 8, 3).view(), &rand_img(8, 8, 3).view()).is_err());
    }

    #[test]
    fn ssim_of_inverted_step_image_is_negative() {
        let x = Array2::from_shape_fn((16, 16), |(_, j)| if j < 8 { 0.0 } else { 1.0 });
        let y = x.mapv(|v| 1.0 - v);
        let s = ssim(&x.view(), &y.view()).unwrap();
        assert!(s < 0.0, "ssim {s}");
    }

    #[test]
    fn ssim_tape_matches_direct_route() {
        let x = rand_img(20, 14, 4);
        let y = rand_img(20, 14, 5);
        let direct = ssim(&x.view(), &y.view()).unwrap();
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.into_dyn());
        let yv = tape.constant(y.into_dyn());
        let s = ssim_t(&mut tape, xv, yv);
        assert!((tape.value(s)[[0]] - direct).abs() < 1e-10);
    }

    #[test]
    fn average_gradient_examples() {
        let c = Array2::from_elem((8, 8), 0.4);
        assert_eq!(average_gradient(&c.view()).unwrap(), 0.0);
        // vertical step: left half 0, right half 1 -> AG = 1/(W-1)
        for w in [8usize, 12, 16] {
            let x = Array2::from_shape_fn((8, w), |(_, j)| if j < w / 2 { 0.0 } else { 1.0 });
            let ag = average_gradient(&x.view()).unwrap();
            assert!((ag - 1.0 / (w - 1) as f64).abs() < 1e-12);
        }
        // homogeneity: AG(c x) = c AG(x)
        let x = rand_img(10, 10, 6);
        let a1 = average_gradient(&x.view()).unwrap();
        let a2 = average_gradient(&x.mapv(|v| 0.37 * v).view()).unwrap();
        assert!((a2 - 0.37 * a1).abs() < 1e-12);
        assert!(average_gradient(&Array2::zeros((1, 5)).view()).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&Array2::from_elem((8, 8), 0.3).view()), 0.0);
        let two = Array2::from_shape_fn((8, 8), |(i, _)| if i < 4 { 0.1 } else { 0.9 });
        assert!((entropy(&two.view()) - 1.0).abs() < 1e-12);
        let sixteen = Array2::from_shape_fn((4, 4), |(i, j)| (i * 4 + j) as f64 / 16.0);
        assert!((entropy(&sixteen.view()) - 4.0).abs() < 1e-12);
        // bounds
        let x = rand_img(32, 32, 7);
        let e = entropy(&x.view());
        assert!((0.0..=8.0).contains(&e));
    }

    #[test]
    fn rmi_prefers_dependent_images() {
        let mut self_sum = 0.0;
        let mut indep_sum = 0.0;
        for seed in 0..50 {
            let x = rand_img(64, 64, 100 + seed);
            let y = rand_img(64, 64, 200 + seed);
            self_sum += region_mutual_information(&x.view(), &x.view()).unwrap();
            indep_sum += region_mutual_information(&x.view(), &y.view()).unwrap();
        }
        assert!(
            self_sum / 50.0 > indep_sum / 50.0,
            "self {self_sum} indep {indep_sum}"
        );
    }

    #[test]
    fn rmi_is_finite_for_constants_and_shift_invariant() {
        let c = Array2::from_elem((16, 16), 0.5);
        let r = region_mutual_information(&c.view(), &c.view()).unwrap();
        assert!(r.is_finite());

        let x = rand_img(18, 18, 8).mapv(|v| 0.4 * v + 0.1);
        let y = rand_img(18, 18, 9).mapv(|v| 0.4 * v + 0.2);
        let a = region_mutual_information(&x.view(), &y.view()).unwrap();
        let b = region_mutual_information(
            &x.mapv(|v| v + 0.1).view(),
            &y.mapv(|v| v + 0.1).view(),
        )
        .unwrap();
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        assert!(region_mutual_information(&rand_img(8, 8, 1).view(), &rand_img(8, 8, 1).view())
            .is_err());
    }

    #[test]
    fn rmi_tape_matches_direct_route() {
        let x = rand_img(21, 15, 10);
        let y = rand_img(21, 15, 11);
        let direct = region_mutual_information(&x.view(), &y.view()).unwrap();
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.into_dyn());
        let yv = tape.constant(y.into_dyn());
        let r = rmi_t(&mut tape, xv, yv).unwrap();
        assert!((tape.value(r)[[0]] - direct).abs() < 1e-10);
    }

    #[test]
    fn weights_from_sources() {
        let c = Array2::from_elem((16, 16), 0.5);
        let w = compute_weights(&c.view(), &c.view(), false).unwrap();
        assert!(w.is_degenerate());

        let x = rand_img(16, 16, 12);
        let w = compute_weights(&x.view(), &x.view(), false).unwrap();
        assert_eq!(w.alpha1, w.alpha2);
        assert_eq!(w.beta1, w.beta2);

        // step image: alpha = 1/(W-1), beta = 1 bit
        let step = Array2::from_shape_fn((8, 8), |(_, j)| if j < 4 { 0.0 } else { 1.0 });
        let w = compute_weights(&step.view(), &step.view(), false).unwrap();
        assert!((w.alpha1 - 1.0 / 7.0).abs() < 1e-12);
        assert!((w.beta1 - 1.0).abs() < 1e-12);

        let wn = compute_weights(&step.view(), &step.view(), true).unwrap();
        assert!((wn.alpha1 - 0.5).abs() < 1e-12);
        assert!((wn.beta1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn total_loss_structure() {
        let x = rand_img(16, 16, 13);
        let w = compute_weights(&x.view(), &x.view(), false).unwrap();
        let l = total_loss(&x.view(), &x.view(), &x.view(), &w).unwrap();
        assert!(l.ssim_term.abs() < 1e-9);
        assert!(!l.degenerate);
        assert_eq!(l.total, l.ssim_term + l.rmi_term);

        // increasing alpha1 weakly increases the ssim term when ssim < 1
        let f = rand_img(16, 16, 14);
        let mut w2 = w;
        let l1 = total_loss(&f.view(), &x.view(), &x.view(), &w2).unwrap();
        w2.alpha1 *= 2.0;
        let l2 = total_loss(&f.view(), &x.view(), &x.view(), &w2).unwrap();
        assert!(l2.ssim_term >= l1.ssim_term);

        // degenerate sources: zero loss, flagged
        let c = Array2::from_elem((16, 16), 0.5);
        let wz = compute_weights(&c.view(), &c.view(), false).unwrap();
        let lz = total_loss(&f.view(), &c.view(), &c.view(), &wz).unwrap();
        assert_eq!(lz.total, 0.0);
        assert!(lz.degenerate);
    }

    #[test]
    fn total_loss_tape_matches_direct_route() {
        let f = rand_img(16, 16, 15);
        let a = rand_img(16, 16, 16);
        let b = rand_img(16, 16, 17);
        let w = compute_weights(&a.view(), &b.view(), false).unwrap();
        let direct = total_loss(&f.view(), &a.view(), &b.view(), &w).unwrap();
        let mut tape = Tape::<f64>::new();
        let fv = tape.constant(f.into_dyn());
        let av = tape.constant(a.into_dyn());
        let bv = tape.constant(b.into_dyn());
        let lv = total_loss_t(&mut tape, fv, av, bv, &w).unwrap();
        assert!((tape.value(lv.ssim_term)[[0]] - direct.ssim_term).abs() < 1e-10);
        assert!((tape.value(lv.rmi_term)[[0]] - direct.rmi_term).abs() < 1e-10);
        assert!((tape.value(lv.total)[[0]] - direct.total).abs() < 1e-10);
    }

    #[test]
    fn loss_gradient_spot_check() {
        // Small finite-difference probe; the acceptance suite runs the full
        // coordinate sweep.
        let f = rand_img(16, 16, 18).mapv(|v| 0.05 + 0.9 * v);
        let a = rand_img(16, 16, 19);
        let b = rand_img(16, 16, 20);
        let w = compute_weights(&a.view(), &b.view(), false).unwrap();

        let mut tape = Tape::<f64>::new();
        let fv = tape.param(f.clone().into_dyn());
        let av = tape.constant(a.clone().into_dyn());
        let bv = tape.constant(b.clone().into_dyn());
        let lv = total_loss_t(&mut tape, fv, av, bv, &w).unwrap();
        let mut grads = tape.backward(lv.total);
        let g = grads.take(fv).unwrap();

        let h = 1e-5;
        for (i, j) in [(0usize, 0usize), (7, 9), (15, 15), (3, 12)] {
            let mut fp = f.clone();
            fp[[i, j]] += h;
            let mut fm = f.clone();
            fm[[i, j]] -= h;
            let lp = total_loss(&fp.view(), &a.view(), &b.view(), &w).unwrap().total;
            let lm = total_loss(&fm.view(), &a.view(), &b.view(), &w).unwrap().total;
            let fd = (lp - lm) / (2.0 * h);
            let ad = g[[i, j]];
            let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-8);
            assert!(rel < 1e-3, "({i},{j}): fd {fd} ad {ad} rel {rel}");
        }
    }
}
