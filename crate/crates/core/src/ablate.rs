//! Ablation harness: trains grid variants at a desk-scale budget, evaluates
//! each on the manifest pairs, and aggregates per-metric ranks (lower rank
//! sums are better).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::{parse_quadruple, AblateConfig};
use crate::data::{load_pair, read_manifest};
use crate::error::{Error, Result};
use crate::fusion::{fuse_full, ModelConfig};
use crate::metrics::{evaluate, mean_report, MetricReport, COLUMNS};
use crate::trainer::{train, TrainConfig};

/// One grid entry: a named structural/loss variation of the base config.
#[derive(Clone, Debug)]
pub struct Variant {
    pub name: String,
    pub model: ModelConfig,
    pub fixed_weights: Option<[f64; 4]>,
}

/// Parse a grid file: one variant per line, `<name> [key=value ...]`.
/// Keys: idb_count, tmu_count, use_cbam, kernels (all3|all5|all7|mixed),
/// weights (adaptive or a1,a2,b1,b2). Blank lines and `#` comments skipped.
pub fn parse_grid(path: &Path, base: &ModelConfig) -> Result<Vec<Variant>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read grid {}: {e}", path.display())))?;
    let mut variants = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let name = fields.next().unwrap().to_string();
        let mut model = base.clone();
        let mut fixed_weights = None;
        for field in fields {
            let Some((key, value)) = field.split_once('=') else {
                return Err(Error::Config(format!(
                    "grid line {}: expected key=value, got {field:?}",
                    lineno + 1
                )));
            };
            match key {
                "idb_count" => {
                    model.idb_count = value.parse().map_err(|_| {
                        Error::Config(format!("grid line {}: bad idb_count", lineno + 1))
                    })?;
                }
                "tmu_count" => {
                    model.tmu_count = value.parse().map_err(|_| {
                        Error::Config(format!("grid line {}: bad tmu_count", lineno + 1))
                    })?;
                }
                "use_cbam" => {
                    model.use_cbam = match value {
                        "true" | "1" | "on" => true,
                        "false" | "0" | "off" => false,
                        _ => {
                            return Err(Error::Config(format!(
                                "grid line {}: bad use_cbam {value:?}",
                                lineno + 1
                            )))
                        }
                    };
                }
                "kernels" => {
                    model.branch_kernels = match value {
                        "all3" => [3, 3, 3],
                        "all5" => [5, 5, 5],
                        "all7" => [7, 7, 7],
                        "mixed" => [3, 5, 7],
                        _ => {
                            return Err(Error::Config(format!(
                                "grid line {}: kernels must be all3|all5|all7|mixed",
                                lineno + 1
                            )))
                        }
                    };
                }
                "weights" => {
                    fixed_weights = if value == "adaptive" {
                        None
                    } else {
                        Some(parse_quadruple(value)?)
                    };
                }
                other => {
                    return Err(Error::Config(format!(
                        "grid line {}: unknown key {other:?}",
                        lineno + 1
                    )));
                }
            }
        }
        model.validate()?;
        variants.push(Variant {
            name,
            model,
            fixed_weights,
        });
    }
    if variants.is_empty() {
        return Err(Error::Config(format!(
            "grid {} lists no variants",
            path.display()
        )));
    }
    Ok(variants)
}

/// Train one variant at the desk budget and score it over the manifest.
fn run_variant(
    variant: &Variant,
    base_train: &TrainConfig,
    budget: &AblateConfig,
    manifest: &Path,
    out_dir: &Path,
) -> Result<MetricReport> {
    let vdir = out_dir.join(&variant.name);
    std::fs::create_dir_all(&vdir)?;
    let tc = TrainConfig {
        epochs: budget.epochs,
        max_steps: budget.max_steps,
        fixed_weights: variant.fixed_weights,
        ..base_train.clone()
    };
    let outcome = train(&variant.model, &tc, manifest, &vdir, None)?;

    let mut reports = Vec::new();
    for (mri_path, func_path) in read_manifest(manifest)? {
        let pair = load_pair(&mri_path, &func_path)?;
        let fused = fuse_full(&outcome.state.params, &pair)?;
        let fused_y = fused.luma();
        reports.push(evaluate(
            &pair.identifier,
            &fused_y.view(),
            &pair.mri.pixels().view(),
            &pair.functional_y.pixels().view(),
        )?);
    }
    let mean = mean_report(&reports);
    let mut table = format!("pair_id\t{}\n", COLUMNS.join("\t"));
    for r in &reports {
        table.push_str(&r.tsv_row());
        table.push('\n');
    }
    table.push_str(&mean.tsv_row());
    table.push('\n');
    std::fs::write(vdir.join("metrics.tsv"), table)?;
    Ok(MetricReport {
        pair_id: variant.name.clone(),
        ..mean
    })
}

/// Competition ranks (1 = best) for one metric column, higher values better.
/// Ties share the lowest position; name order breaks exact ties stably.
fn ranks_for(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0usize; values.len()];
    for (pos, &idx) in order.iter().enumerate() {
        ranks[idx] = pos + 1;
    }
    ranks
}

/// Outcome of the full grid.
pub struct AblateOutcome {
    pub means: Vec<MetricReport>,
    pub ranking_table: PathBuf,
}

/// Run every variant and write per-variant tables plus the rank-aggregation
/// table (sum of per-metric ranks, ascending).
pub fn run_grid(
    variants: &[Variant],
    base_train: &TrainConfig,
    budget: &AblateConfig,
    manifest: &Path,
    out_dir: &Path,
) -> Result<AblateOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let mut means = Vec::new();
    for v in variants {
        eprintln!("ablate: running variant {}", v.name);
        means.push(run_variant(v, base_train, budget, manifest, out_dir)?);
    }

    // means.tsv: raw mean scores per variant
    let mut mtab = format!("variant\t{}\n", COLUMNS.join("\t"));
    for m in &means {
        mtab.push_str(&m.tsv_row());
        mtab.push('\n');
    }
    std::fs::write(out_dir.join("means.tsv"), mtab)?;

    // ranking.tsv: per-metric ranks plus their sum, best first
    let mut per_metric_ranks: Vec<Vec<usize>> = Vec::new();
    for col in 0..COLUMNS.len() {
        let values: Vec<f64> = means.iter().map(|m| m.values()[col]).collect();
        per_metric_ranks.push(ranks_for(&values));
    }
    let mut rows: Vec<(usize, usize)> = (0..means.len())
        .map(|i| (i, per_metric_ranks.iter().map(|r| r[i]).sum::<usize>()))
        .collect();
    rows.sort_by_key(|&(i, sum)| (sum, means[i].pair_id.clone()));
    let mut rtab = String::from("variant");
    for c in COLUMNS {
        let _ = write!(rtab, "\trank_{}", c.to_lowercase());
    }
    rtab.push_str("\trank_sum\n");
    for (i, sum) in &rows {
        let _ = write!(rtab, "{}", means[*i].pair_id);
        for r in &per_metric_ranks {
            let _ = write!(rtab, "\t{}", r[*i]);
        }
        let _ = writeln!(rtab, "\t{sum}");
    }
    let ranking_table = out_dir.join("ranking.tsv");
    std::fs::write(&ranking_table, rtab)?;
    Ok(AblateOutcome {
        means,
        ranking_table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("grid.txt");
        std::fs::write(
            &p,
            "# structural variants\nbaseline\nIDB_0 idb_count=0\nTMU_0 tmu_count=0\n\
             CBAM_0 use_cbam=false\nall3x3 kernels=all3\nW1 weights=0.2,0.8,1,1\n",
        )
        .unwrap();
        let base = ModelConfig::default();
        let variants = parse_grid(&p, &base).unwrap();
        assert_eq!(variants.len(), 6);
        assert_eq!(variants[1].model.idb_count, 0);
        assert_eq!(variants[2].model.tmu_count, 0);
        assert!(!variants[3].model.use_cbam);
        assert_eq!(variants[4].model.branch_kernels, [3, 3, 3]);
        assert_eq!(variants[5].fixed_weights, Some([0.2, 0.8, 1.0, 1.0]));

        std::fs::write(&p, "bad idb_count=oops\n").unwrap();
        assert!(parse_grid(&p, &base).is_err());
        std::fs::write(&p, "\n").unwrap();
        assert!(parse_grid(&p, &base).is_err());
    }

    #[test]
    fn rank_aggregation_orders_by_value() {
        let ranks = ranks_for(&[0.3, 0.9, 0.5]);
        assert_eq!(ranks, vec![3, 1, 2]);
    }
}
