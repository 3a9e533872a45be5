//! Self-supervised training loop: Adam over the adaptive loss with
//! per-sample data-driven weights, periodic checkpointing, and a
//! tab-separated loss log. Everything is single-threaded and seed-
//! deterministic; resuming from a checkpoint reproduces the uninterrupted
//! run bit for bit.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::data::{crop_augment, load_pair, read_manifest, PATCH_SIDE};
use crate::error::{Error, Result};
use crate::fusion::{build_model, forward_t, plane3, ModelConfig, ModelParams};
use crate::loss::{compute_weights, total_loss_t, AdaptiveWeights, LossBreakdown};
use crate::tensor::Tape;

/// Minimum training patch side (loss windows need 11x11 and 9x9 footprints).
pub const MIN_PATCH_SIDE: usize = 16;

/// Optimization settings; the defaults follow the reference training recipe
/// (Adam, lr 1e-4, batch 1, 30 epochs).
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub max_steps: Option<u64>,
    /// Global-norm gradient clipping; off by default, 1.0 for rescue runs.
    pub grad_clip: Option<f64>,
    /// Fixed loss-weight quadruple {a1,a2,b1,b2} for the manual-weight
    /// ablation; `None` selects the adaptive data-driven weights.
    pub fixed_weights: Option<[f64; 4]>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 1,
            epochs: 30,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            checkpoint_every: 500,
            max_steps: None,
            grad_clip: None,
            fixed_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size != 1 {
            return Err(Error::Config(
                "the reference path trains with batch size 1".into(),
            ));
        }
        if self.learning_rate <= 0.0 || self.epochs == 0 {
            return Err(Error::Config(
                "learning_rate must be positive and epochs nonzero".into(),
            ));
        }
        Ok(())
    }
}

/// Adam first/second moments, aligned with the parameter traversal order.
pub struct AdamState {
    pub m: Vec<ArrayD<f32>>,
    pub v: Vec<ArrayD<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams<f32>) -> Self {
        let mut m = Vec::new();
        params.for_each(&mut |_, t| m.push(ArrayD::zeros(t.raw_dim())));
        let v = m.clone();
        AdamState { m, v, t: 0 }
    }

    fn update(
        &mut self,
        params: &mut ModelParams<f32>,
        grads: &[ArrayD<f32>],
        cfg: &TrainConfig,
    ) {
        self.t += 1;
        let b1 = cfg.beta1 as f32;
        let b2 = cfg.beta2 as f32;
        let lr = cfg.learning_rate as f32;
        let eps = cfg.eps as f32;
        let bc1 = 1.0 - (cfg.beta1 as f32).powi(self.t as i32);
        let bc2 = 1.0 - (cfg.beta2 as f32).powi(self.t as i32);
        let mut i = 0;
        params.for_each_mut(&mut |_, p| {
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
            i += 1;
        });
    }
}

/// Mutable training state: parameters, optimizer moments, step counter, and
/// the trainer RNG.
pub struct TrainState {
    pub config: ModelConfig,
    pub train_seed: u64,
    pub params: ModelParams<f32>,
    pub opt: AdamState,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: &ModelConfig, train_seed: u64) -> Result<Self> {
        let params: ModelParams<f32> = build_model(config)?;
        let opt = AdamState::new(&params);
        Ok(TrainState {
            config: config.clone(),
            train_seed,
            params,
            opt,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(train_seed),
        })
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        Checkpoint {
            config: self.config,
            train_seed: self.train_seed,
            step: self.step,
            rng: self.rng,
            params: self.params,
            opt: self.opt,
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        TrainState {
            config: ck.config,
            train_seed: ck.train_seed,
            params: ck.params,
            opt: ck.opt,
            step: ck.step,
            rng: ck.rng,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            config: self.config.clone(),
            train_seed: self.train_seed,
            step: self.step,
            rng: self.rng.clone(),
            params: self.params.clone(),
            opt: AdamState {
                m: self.opt.m.clone(),
                v: self.opt.v.clone(),
                t: self.opt.t,
            },

        };
        ck.save(path)
    }
}

/// One optimization step on a single (mri_y, func_y) patch.
pub fn train_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    mri: &Array2<f64>,
    func: &Array2<f64>,
) -> Result<LossBreakdown> {
    if mri.dim() != func.dim() {
        return Err(Error::Shape(format!(
            "patch dimensions differ: {:?} vs {:?}",
            mri.dim(),
            func.dim()
        )));
    }
    let (h, w) = mri.dim();
    if h < MIN_PATCH_SIDE || w < MIN_PATCH_SIDE {
        return Err(Error::Size(format!(
            "training patches must be at least {MIN_PATCH_SIDE}x{MIN_PATCH_SIDE}, got {h}x{w}"
        )));
    }
    let weights = match cfg.fixed_weights {
        Some([a1, a2, b1, b2]) => AdaptiveWeights::fixed(a1, a2, b1, b2),
        None => compute_weights(&mri.view(), &func.view(), state.config.normalize_weights)?,
    };

    let n_tensors = state.opt.m.len();
    if weights.is_degenerate() {
        // Constant sources carry no training signal: zero loss, zero
        // gradients, but the optimizer still ticks so resume stays exact.
        let zero_grads: Vec<ArrayD<f32>> = state
            .opt
            .m
            .iter()
            .map(|t| ArrayD::zeros(t.raw_dim()))
            .collect();
        state.opt.update(&mut state.params, &zero_grads, cfg);
        state.step += 1;
        return Ok(LossBreakdown {
            ssim_term: 0.0,
            rmi_term: 0.0,
            total: 0.0,
            weights,
            degenerate: true,
        });
    }

    let mri32 = mri.mapv(|v| v as f32);
    let func32 = func.mapv(|v| v as f32);
    let mut tape = Tape::<f32>::new();
    let mut order = Vec::with_capacity(n_tensors);
    let vars = state.params.bind(&mut tape, &mut order);
    let mri_in = tape.constant(plane3(&mri32).into_dyn());
    let func_in = tape.constant(plane3(&func32).into_dyn());
    let fused = forward_t(&mut tape, &state.params, &vars, mri_in, func_in);
    let mri_loss = tape.constant(mri32.into_dyn());
    let func_loss = tape.constant(func32.into_dyn());
    let loss = total_loss_t(&mut tape, fused, mri_loss, func_loss, &weights)?;

    let breakdown = LossBreakdown {
        ssim_term: tape.value(loss.ssim_term)[[0]] as f64,
        rmi_term: tape.value(loss.rmi_term)[[0]] as f64,
        total: tape.value(loss.total)[[0]] as f64,
        weights,
        degenerate: false,
    };
    if !breakdown.total.is_finite() {
        return Err(Error::Numerics(format!(
            "non-finite loss at step {}: ssim_term {} rmi_term {} weights {:?}",
            state.step, breakdown.ssim_term, breakdown.rmi_term, weights
        )));
    }

    let mut grad_store = tape.backward(loss.total);
    let mut grads = Vec::with_capacity(n_tensors);
    for &var in &order {
        let g = grad_store
            .take(var)
            .unwrap_or_else(|| ArrayD::zeros(tape.value(var).raw_dim()));
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerics(format!(
                "non-finite gradient at step {} (loss {})",
                state.step, breakdown.total
            )));
        }
        grads.push(g);
    }
    if let Some(max_norm) = cfg.grad_clip {
        let norm: f32 = grads
            .iter()
            .map(|g| g.iter().map(|&v| v * v).sum::<f32>())
            .sum::<f32>()
            .sqrt();
        if norm > max_norm as f32 {
            let s = max_norm as f32 / norm;
            for g in &mut grads {
                g.mapv_inplace(|v| v * s);
            }
        }
    }
    state.opt.update(&mut state.params, &grads, cfg);
    state.step += 1;
    Ok(breakdown)
}

/// Y-plane training patches extracted from the manifest: each 256x256 pair
/// becomes 36 patches, any other size is used whole.
pub fn load_training_patches(manifest: &Path) -> Result<Vec<(Array2<f64>, Array2<f64>)>> {
    let mut patches = Vec::new();
    for (mri_path, func_path) in read_manifest(manifest)? {
        let pair = load_pair(&mri_path, &func_path)?;
        if pair.height() == 256 && pair.width() == 256 {
            for p in crop_augment(&pair)?.patches {
                patches.push((
                    p.mri.pixels().clone(),
                    p.functional_y.pixels().clone(),
                ));
            }
        } else {
            patches.push((
                pair.mri.pixels().clone(),
                pair.functional_y.pixels().clone(),
            ));
        }
    }
    Ok(patches)
}

fn epoch_permutation(train_seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(train_seed ^ epoch.wrapping_mul(0x9E3779B97F4A7C15));
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Per-step record appended to the loss log.
fn log_line(step: u64, b: &LossBreakdown) -> String {
    format!(
        "{step}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
        b.weights.alpha1,
        b.weights.alpha2,
        b.weights.beta1,
        b.weights.beta2,
        b.ssim_term,
        b.rmi_term,
        b.total
    )
}

/// Outcome of a [`train`] run.
pub struct TrainOutcome {
    pub state: TrainState,
    pub final_checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub steps_run: u64,
}

/// Full training loop over a dataset manifest. Patches are shuffled with a
/// per-epoch permutation derived from the training seed, so a resumed run
/// retraces the interrupted one exactly.
pub fn train(
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    manifest: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let patches = load_training_patches(manifest)?;
    if patches.is_empty() {
        return Err(Error::Config("manifest produced no training patches".into()));
    }
    for (m, _) in &patches {
        let (h, w) = m.dim();
        if h < MIN_PATCH_SIDE || w < MIN_PATCH_SIDE {
            return Err(Error::Size(format!(
                "training patch {h}x{w} below minimum {MIN_PATCH_SIDE}"
            )));
        }
        let _ = PATCH_SIDE; // canonical side documented by data::PATCH_SIDE
    }

    let mut state = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if &ck.config != model_config {
                return Err(Error::Config(
                    "checkpoint was produced under a different model config".into(),
                ));
            }
            TrainState::from_checkpoint(ck)
        }
        None => TrainState::new(model_config, cfg.seed)?,
    };

    let steps_per_epoch = patches.len() as u64;
    let mut total_steps = steps_per_epoch * cfg.epochs as u64;
    if let Some(max) = cfg.max_steps {
        total_steps = total_steps.min(max);
    }

    let loss_log = out_dir.join("loss_log.tsv");
    let mut log = if state.step == 0 {
        let mut f = std::fs::File::create(&loss_log)?;
        f.write_all(b"step\talpha1\talpha2\tbeta1\tbeta2\tssim_term\trmi_term\ttotal\n")?;
        f
    } else {
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&loss_log)?
    };

    let latest = out_dir.join("latest.ckpt");
    let mut order: Option<(u64, Vec<usize>)> = None;
    let start_step = state.step;
    let mut degenerate_warned = false;
    while state.step < total_steps {
        let epoch = state.step / steps_per_epoch;
        let within = (state.step % steps_per_epoch) as usize;
        let perm = match &order {
            Some((e, p)) if *e == epoch => p,
            _ => {
                order = Some((
                    epoch,
                    epoch_permutation(state.train_seed, epoch, patches.len()),
                ));
                &order.as_ref().unwrap().1
            }
        };
        let (mri, func) = &patches[perm[within]];
        let breakdown = train_step(&mut state, cfg, mri, func)?;
        if breakdown.degenerate && !degenerate_warned {
            eprintln!(
                "warning: degenerate sample (all adaptive weights zero) at step {}",
                state.step
            );
            degenerate_warned = true;
        }
        log.write_all(log_line(state.step, &breakdown).as_bytes())?;
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every as u64 == 0 {
            state.save(&latest)?;
        }
    }
    log.flush()?;

    let final_checkpoint = out_dir.join("final.ckpt");
    state.save(&final_checkpoint)?;
    Ok(TrainOutcome {
        steps_run: state.step - start_step,
        state,
        final_checkpoint,
        loss_log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::structured_pair;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            idb_count: 1,
            tmu_count: 1,
            seed: 9,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let cfg = tiny_config();
        let mut state = TrainState::new(&cfg, 1).unwrap();
        let mut before = Vec::new();
        state.params.for_each(&mut |_, t| before.push(t.clone()));
        let tc = TrainConfig {
            learning_rate: 1e-30, // effectively zero; exact zero is rejected
            ..TrainConfig::default()
        };
        let (m, f) = structured_pair(16, 16, 3);
        train_step(&mut state, &tc, &m, &f).unwrap();
        let mut i = 0;
        let mut max_delta = 0.0f32;
        state.params.for_each(&mut |_, t| {
            for (a, b) in t.iter().zip(before[i].iter()) {
                max_delta = max_delta.max((a - b).abs());
            }
            i += 1;
        });
        assert!(max_delta < 1e-25);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn same_seed_runs_are_identical() {
        let cfg = tiny_config();
        let tc = TrainConfig::default();
        let (m, f) = structured_pair(16, 16, 4);
        let run = || {
            let mut state = TrainState::new(&cfg, 2).unwrap();
            let mut losses = Vec::new();
            for _ in 0..5 {
                losses.push(train_step(&mut state, &tc, &m, &f).unwrap().total);
            }
            (losses, state)
        };
        let (l1, s1) = run();
        let (l2, s2) = run();
        assert_eq!(l1, l2);
        let mut t1 = Vec::new();
        s1.params.for_each(&mut |_, t| t1.push(t.clone()));
        let mut i = 0;
        s2.params.for_each(&mut |_, t| {
            assert_eq!(t, &t1[i]);
            i += 1;
        });
    }

    #[test]
    fn degenerate_sample_is_flagged_not_fatal() {
        let cfg = tiny_config();
        let mut state = TrainState::new(&cfg, 3).unwrap();
        let tc = TrainConfig::default();
        let c = Array2::from_elem((16, 16), 0.5);
        let b = train_step(&mut state, &tc, &c, &c).unwrap();
        assert!(b.degenerate);
        assert_eq!(b.total, 0.0);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn fixed_weights_override_adaptive() {
        let cfg = tiny_config();
        let mut state = TrainState::new(&cfg, 5).unwrap();
        let tc = TrainConfig {
            fixed_weights: Some([0.2, 0.8, 1.0, 1.0]),
            ..TrainConfig::default()
        };
        let (m, f) = structured_pair(16, 16, 6);
        let b = train_step(&mut state, &tc, &m, &f).unwrap();
        assert_eq!(b.weights.alpha1, 0.2);
        assert_eq!(b.weights.beta2, 1.0);
    }

    #[test]
    fn loss_decreases_over_a_short_run() {
        let cfg = tiny_config();
        let mut state = TrainState::new(&cfg, 7).unwrap();
        let tc = TrainConfig {
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let (m, f) = structured_pair(24, 24, 8);
        let first = train_step(&mut state, &tc, &m, &f).unwrap().total;
        let mut last = first;
        for _ in 0..30 {
            last = train_step(&mut state, &tc, &m, &f).unwrap().total;
        }
        assert!(last < first, "no improvement: {first} -> {last}");
    }
}
