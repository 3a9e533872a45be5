//! Command-line entry points: train, fuse, eval, ablate.
//!
//! Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numerics
//! error. Every run prints its resolved configuration and seed before
//! executing.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use medfuse::ablate::{parse_grid, run_grid};
use medfuse::checkpoint::Checkpoint;
use medfuse::config::{render_resolved, Settings};
use medfuse::data::{load_pair, read_manifest, save_gray_png, save_rgb_png};
use medfuse::error::{Error, Result};
use medfuse::fusion::{count_parameters, fuse_full, Fused};
use medfuse::metrics::{evaluate, mean_report, COLUMNS};
use medfuse::trainer::train;

#[derive(Parser)]
#[command(name = "medfuse", version, about = "Multimodal medical image fusion: train, fuse, evaluate, ablate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Optional key=value config file with model./train./ablate. sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline overrides, e.g. --set model.idb_count=2 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a fusion model over a dataset manifest.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset manifest: one `<mri>\t<functional>` line per pair.
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for checkpoints and the loss log.
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
        /// Shorthand for --set train.epochs=N.
        #[arg(long)]
        epochs: Option<usize>,
        /// Shorthand for --set model.seed=N.
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fuse one image pair with a trained checkpoint.
    Fuse {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        mri: PathBuf,
        #[arg(long)]
        functional: PathBuf,
        /// Output PNG (grayscale pair -> grayscale, color functional -> color).
        #[arg(long)]
        out: PathBuf,
    },
    /// Score fused images over a manifest (eight metrics + mean row).
    Eval {
        /// Fuse on the fly with this checkpoint...
        #[arg(long, conflicts_with = "fused_dir")]
        checkpoint: Option<PathBuf>,
        /// ...or read precomputed fused images named `<mri-stem>.png`.
        #[arg(long = "fused-dir")]
        fused_dir: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        /// Output TSV table.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score a grid of ablation variants.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Grid file: `<name> [key=value ...]` per line.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn load_settings(cfg: &ConfigArgs) -> Result<Settings> {
    let mut settings = match &cfg.config {
        Some(path) => Settings::from_file(path)?,
        None => Settings::default(),
    };
    settings.apply_overrides(&cfg.set)?;
    Ok(settings)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train {
            cfg,
            manifest,
            out_dir,
            epochs,
            seed,
            resume,
        } => {
            let mut settings = load_settings(&cfg)?;
            if let Some(e) = epochs {
                settings.set_pair(&format!("train.epochs={e}"))?;
            }
            if let Some(s) = seed {
                settings.set_pair(&format!("model.seed={s}"))?;
            }
            let model = settings.model_config()?;
            let tcfg = settings.train_config(&model)?;
            print!("{}", render_resolved(&model, Some(&tcfg), None));
            let params: medfuse::fusion::ModelParams<f32> =
                medfuse::fusion::build_model(&model)?;
            println!("parameters={}", count_parameters(&params));
            let outcome = train(&model, &tcfg, &manifest, &out_dir, resume.as_deref())?;
            println!(
                "trained {} steps; final checkpoint {}; loss log {}",
                outcome.steps_run,
                outcome.final_checkpoint.display(),
                outcome.loss_log.display()
            );
            Ok(())
        }
        Command::Fuse {
            checkpoint,
            mri,
            functional,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            print!("{}", render_resolved(&ck.config, None, None));
            println!("parameters={}", count_parameters(&ck.params));
            let pair = load_pair(&mri, &functional)?;
            match fuse_full(&ck.params, &pair)? {
                Fused::Gray(y) => save_gray_png(&y, &out)?,
                Fused::Rgb { r, g, b } => save_rgb_png(&r, &g, &b, &out)?,
            }
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            fused_dir,
            manifest,
            out,
        } => {
            let pairs = read_manifest(&manifest)?;
            let ck = match (&checkpoint, &fused_dir) {
                (Some(path), None) => Some(Checkpoint::load(path)?),
                (None, Some(dir)) => {
                    println!("eval.fused_dir={}", dir.display());
                    None
                }
                _ => {
                    return Err(Error::Config(
                        "eval needs exactly one of --checkpoint or --fused-dir".into(),
                    ))
                }
            };
            if let Some(ck) = &ck {
                print!("{}", render_resolved(&ck.config, None, None));
            }
            println!("eval.manifest={}", manifest.display());

            let mut reports = Vec::new();
            for (mri_path, func_path) in &pairs {
                let pair = load_pair(mri_path, func_path)?;
                let fused_y = match &ck {
                    Some(ck) => fuse_full(&ck.params, &pair)?.luma(),
                    None => {
                        let dir = fused_dir.as_ref().unwrap();
                        let path = dir.join(format!("{}.png", pair.identifier));
                        load_fused_luma(&path)?
                    }
                };
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
            std::fs::write(&out, table)?;
            println!("wrote {} ({} pairs + mean)", out.display(), reports.len());
            Ok(())
        }
        Command::Ablate {
            cfg,
            grid,
            manifest,
            out_dir,
        } => {
            let settings = load_settings(&cfg)?;
            let model = settings.model_config()?;
            let tcfg = settings.train_config(&model)?;
            let acfg = settings.ablate_config()?;
            print!("{}", render_resolved(&model, Some(&tcfg), Some(&acfg)));
            let variants = parse_grid(&grid, &model)?;
            println!("ablate.variants={}", variants.len());
            let outcome = run_grid(&variants, &tcfg, &acfg, &manifest, &out_dir)?;
            println!(
                "wrote {} variant tables and {}",
                outcome.means.len(),
                outcome.ranking_table.display()
            );
            Ok(())
        }
    }
}

/// Read a fused PNG back as a luma plane.
fn load_fused_luma(path: &Path) -> Result<ndarray::Array2<f64>> {
    let pair = load_pair(path, path)?;
    Ok(pair.mri.pixels().clone())
}
