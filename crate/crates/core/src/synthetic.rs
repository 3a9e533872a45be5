//! Synthetic test imagery: structured gradients plus Gaussian blobs, with
//! distinct content per modality. Used by the test suites and handy for
//! demo runs without a dataset.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{save_gray_png, save_rgb_png};
use crate::error::Result;

fn blobs(img: &mut Array2<f64>, rng: &mut ChaCha8Rng, count: usize, sign: f64) {
    let (h, w) = img.dim();
    for _ in 0..count {
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let sigma = rng.gen_range(0.04..0.15) * h.min(w) as f64;
        let amp = sign * rng.gen_range(0.25..0.6);
        for ((i, j), v) in img.indexed_iter_mut() {
            let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
            *v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
}

/// An anatomical-style and a functional-style Y plane with structured
/// gradients and blobs; deterministic in the seed, values in [0,1].
pub fn structured_pair(h: usize, w: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mri = Array2::from_shape_fn((h, w), |(i, j)| {
        0.35 + 0.25 * ((i as f64 / h as f64) * std::f64::consts::PI * 2.0).sin()
            + 0.15 * ((j as f64 / w as f64) * std::f64::consts::PI * 3.0).cos()
    });
    blobs(&mut mri, &mut rng, 4, 1.0);
    blobs(&mut mri, &mut rng, 2, -1.0);
    let mut func = Array2::from_shape_fn((h, w), |(i, j)| {
        0.4 + 0.2 * (((i + j) as f64 / (h + w) as f64) * std::f64::consts::PI * 4.0).sin()
    });
    blobs(&mut func, &mut rng, 3, 1.0);
    blobs(&mut func, &mut rng, 3, -1.0);
    (mri.mapv(|v| v.clamp(0.0, 1.0)), func.mapv(|v| v.clamp(0.0, 1.0)))
}

/// Write `n_pairs` synthetic 256x256 pairs (gray anatomical PNG + color
/// functional PNG) and a manifest referencing them. Returns the manifest
/// path.
pub fn write_demo_dataset(dir: &Path, n_pairs: usize, seed: u64) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for i in 0..n_pairs {
        let (mri, func) = structured_pair(256, 256, seed.wrapping_add(i as u64));
        let mri_path = dir.join(format!("pair{i:03}_mri.png"));
        let func_path = dir.join(format!("pair{i:03}_func.png"));
        save_gray_png(&mri, &mri_path)?;
        // color the functional plane so the chroma path is exercised
        let r = func.mapv(|v| (0.9 * v + 0.1).clamp(0.0, 1.0));
        let g = func.mapv(|v| (0.6 * v).clamp(0.0, 1.0));
        let b = func.mapv(|v| (1.0 - 0.7 * v).clamp(0.0, 1.0));
        save_rgb_png(&r, &g, &b, &func_path)?;
        manifest.push_str(&format!(
            "{}\t{}\n",
            mri_path.file_name().unwrap().to_string_lossy(),
            func_path.file_name().unwrap().to_string_lossy()
        ));
    }
    let manifest_path = dir.join("manifest.tsv");
    std::fs::write(&manifest_path, manifest)?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_are_structured_and_deterministic() {
        let (m1, f1) = structured_pair(64, 64, 5);
        let (m2, _) = structured_pair(64, 64, 5);
        assert_eq!(m1, m2);
        assert!(crate::loss::average_gradient(&m1.view()).unwrap() > 0.0);
        assert!(crate::loss::entropy(&f1.view()) > 1.0);
        assert!(m1.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn demo_dataset_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_demo_dataset(dir.path(), 2, 1).unwrap();
        let pairs = crate::data::read_manifest(&manifest).unwrap();
        assert_eq!(pairs.len(), 2);
        let pair = crate::data::load_pair(&pairs[0].0, &pairs[0].1).unwrap();
        assert_eq!((pair.height(), pair.width()), (256, 256));
        assert!(pair.functional_chroma.is_some());
    }
}
