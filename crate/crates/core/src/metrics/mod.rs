//! Fusion-quality metric suite: EN, AG, MI, VIFF, QABF, NMI, PSNR, AFM.
//!
//! All metrics consume [0,1] images and internally rescale to the 0-255
//! range where their classical definitions require it.

pub mod afm;
pub mod info;
pub mod qabf;
pub mod viff;

use ndarray::ArrayView2;

use crate::error::Result;

/// Report column order used by every emitted table.
pub const COLUMNS: [&str; 8] = ["EN", "AG", "MI", "VIFF", "QABF", "NMI", "PSNR", "AFM"];

/// The eight quality scores for one fused/source triple.
#[derive(Clone, Debug)]
pub struct MetricReport {
    pub pair_id: String,
    pub en: f64,
    pub ag: f64,
    pub mi: f64,
    pub viff: f64,
    pub qabf: f64,
    pub nmi: f64,
    pub psnr: f64,
    pub afm: f64,
}

impl MetricReport {
    /// Values in [`COLUMNS`] order.
    pub fn values(&self) -> [f64; 8] {
        [
            self.en, self.ag, self.mi, self.viff, self.qabf, self.nmi, self.psnr, self.afm,
        ]
    }

    /// One tab-separated row: id then the eight scores.
    pub fn tsv_row(&self) -> String {
        let mut row = self.pair_id.clone();
        for v in self.values() {
            row.push('\t');
            row.push_str(&format!("{v:.6}"));
        }
        row
    }
}

/// Entropy of the fused image (delegates to the loss-side implementation).
pub fn metric_en(fused: &ArrayView2<f64>) -> f64 {
    crate::loss::entropy(fused)
}

/// Average gradient of the fused image, reported on the 0-255 scale.
pub fn metric_ag(fused: &ArrayView2<f64>) -> Result<f64> {
    Ok(crate::loss::average_gradient(fused)? * 255.0)
}

/// Compute all eight metrics for one triple.
pub fn evaluate(
    pair_id: &str,
    fused: &ArrayView2<f64>,
    a: &ArrayView2<f64>,
    b: &ArrayView2<f64>,
) -> Result<MetricReport> {
    Ok(MetricReport {
        pair_id: pair_id.to_string(),
        en: metric_en(fused),
        ag: metric_ag(fused)?,
        mi: info::mutual_information(fused, a, b)?,
        viff: viff::viff(fused, a, b)?,
        qabf: qabf::qabf(fused, a, b)?,
        nmi: info::normalized_mi(fused, a, b)?,
        psnr: info::psnr_fusion(fused, a, b)?,
        afm: afm::afm(fused, a, b)?,
    })
}

/// Column-wise mean of a batch of reports.
pub fn mean_report(reports: &[MetricReport]) -> MetricReport {
    let n = reports.len().max(1) as f64;
    let sum = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    MetricReport {
        pair_id: "mean".to_string(),
        en: sum(|r| r.en),
        ag: sum(|r| r.ag),
        mi: sum(|r| r.mi),
        viff: sum(|r| r.viff),
        qabf: sum(|r| r.qabf),
        nmi: sum(|r| r.nmi),
        psnr: sum(|r| r.psnr),
        afm: sum(|r| r.afm),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn report_is_finite_on_random_triples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = |rng: &mut ChaCha8Rng| {
            Array2::from_shape_simple_fn((64, 64), || rng.gen_range(0.0..1.0))
        };
        let f = img(&mut rng);
        let a = img(&mut rng);
        let b = img(&mut rng);
        let r = evaluate("t", &f.view(), &a.view(), &b.view()).unwrap();
        for v in r.values() {
            assert!(v.is_finite());
        }
        assert!((0.0..=8.0).contains(&r.en));
        assert!((0.0..=1.0).contains(&r.qabf));
        assert!(r.psnr > 0.0);
    }

    #[test]
    fn batch_mean_is_columnwise() {
        let mk = |v: f64| MetricReport {
            pair_id: "x".into(),
            en: v,
            ag: 2.0 * v,
            mi: v,
            viff: v,
            qabf: v,
            nmi: v,
            psnr: v,
            afm: v,
        };
        let m = mean_report(&[mk(1.0), mk(3.0)]);
        assert_eq!(m.en, 2.0);
        assert_eq!(m.ag, 4.0);
        assert_eq!(m.pair_id, "mean");
    }

    #[test]
    fn tsv_row_has_nine_fields() {
        let r = mean_report(&[]);
        assert_eq!(r.tsv_row().split('\t').count(), 9);
    }
}
