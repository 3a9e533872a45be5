//! Histogram-family metrics: mutual information, normalized mutual
//! information, and fusion PSNR. All consume [0,1] images and quantize to
//! 256 gray levels exactly as the entropy measure does.

use ndarray::ArrayView2;

use crate::error::{Error, Result};

/// PSNR sentinel for identical inputs (MSE = 0).
pub const PSNR_SENTINEL: f64 = 100.0;

fn check_dims(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Size(format!(
            "metric inputs differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

pub(crate) fn quantize(v: f64) -> usize {
    ((v * 255.0).floor() as i64).clamp(0, 255) as usize
}

/// I(A;B) in bits from a 256x256 joint histogram.
pub fn mutual_information_pair(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<f64> {
    check_dims(a, b)?;
    let mut joint = vec![0u64; 256 * 256];
    let mut ha = [0u64; 256];
    let mut hb = [0u64; 256];
    for (&x, &y) in a.iter().zip(b.iter()) {
        let (i, j) = (quantize(x), quantize(y));
        joint[i * 256 + j] += 1;
        ha[i] += 1;
        hb[j] += 1;
    }
    let n = a.len() as f64;
    let mut mi = 0.0;
    for i in 0..256 {
        if ha[i] == 0 {
            continue;
        }
        for j in 0..256 {
            let c = joint[i * 256 + j];
            if c == 0 {
                continue;
            }
            let pij = c as f64 / n;
            let pi = ha[i] as f64 / n;
            let pj = hb[j] as f64 / n;
            mi += pij * (pij / (pi * pj)).log2();
        }
    }
    Ok(mi)
}

/// MI = I(F;A) + I(F;B).
pub fn mutual_information(
    fused: &ArrayView2<f64>,
    a: &ArrayView2<f64>,
    b: &ArrayView2<f64>,
) -> Result<f64> {
    Ok(mutual_information_pair(fused, a)? + mutual_information_pair(fused, b)?)
}

/// Hossny-style normalized MI:
/// 2 [ I(F;A)/(H(F)+H(A)) + I(F;B)/(H(F)+H(B)) ].
pub fn normalized_mi(
    fused: &ArrayView2<f64>,
    a: &ArrayView2<f64>,
    b: &ArrayView2<f64>,
) -> Result<f64> {
    let hf = crate::loss::entropy(fused);
    let term = |src: &ArrayView2<f64>| -> Result<f64> {
        let hs = crate::loss::entropy(src);
        let denom = hf + hs;
        if denom == 0.0 {
            return Ok(0.0);
        }
        Ok(mutual_information_pair(fused, src)? / denom)
    };
    Ok(2.0 * (term(a)? + term(b)?))
}

/// Fusion PSNR: mean of the two MSEs on the 0-255 scale;
/// 10 log10(255^2 / MSE), with a 100 dB sentinel at MSE = 0.
pub fn psnr_fusion(
    fused: &ArrayView2<f64>,
    a: &ArrayView2<f64>,
    b: &ArrayView2<f64>,
) -> Result<f64> {
    check_dims(fused, a)?;
    check_dims(fused, b)?;
    let mse = |x: &ArrayView2<f64>, y: &ArrayView2<f64>| {
        x.iter()
            .zip(y.iter())
            .map(|(&u, &v)| {
                let d = 255.0 * (u - v);
                d * d
            })
            .sum::<f64>()
            / x.len() as f64
    };
    let m = (mse(fused, a) + mse(fused, b)) / 2.0;
    if m == 0.0 {
        return Ok(PSNR_SENTINEL);
    }
    Ok(10.0 * (255.0 * 255.0 / m).log10())
}
