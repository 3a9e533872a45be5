//! Flat key=value run configuration with section prefixes (`model.`,
//! `train.`, `ablate.`). A config file is optional; command-line `--set`
//! overrides are applied on top, and every run echoes the resolved values.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::ModelConfig;
use crate::trainer::TrainConfig;

/// Ablation-runner settings (desk-scale defaults).
#[derive(Clone, Debug)]
pub struct AblateConfig {
    /// Epochs per grid variant.
    pub epochs: usize,
    /// Optional hard cap on optimization steps per variant.
    pub max_steps: Option<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            epochs: 2,
            max_steps: None,
        }
    }
}

/// Parsed key=value settings.
#[derive(Clone, Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut s = Settings::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            s.set_pair(line).map_err(|e| {
                Error::Config(format!("{} line {}: {e}", path.display(), lineno + 1))
            })?;
        }
        Ok(s)
    }

    /// Apply one `key=value` assignment.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let Some((k, v)) = pair.split_once('=') else {
            return Err(Error::Config(format!("expected key=value, got {pair:?}")));
        };
        self.values
            .insert(k.trim().to_string(), v.trim().to_string());
        Ok(())
    }

    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<()> {
        for p in pairs {
            self.set_pair(p)?;
        }
        Ok(())
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("cannot parse {key}={raw}"))),
        }
    }

    fn parse_bool(&self, key: &str) -> Result<Option<bool>> {
        match self.get(key) {
            None => Ok(None),
            Some("true") | Some("1") | Some("on") => Ok(Some(true)),
            Some("false") | Some("0") | Some("off") => Ok(Some(false)),
            Some(other) => Err(Error::Config(format!("cannot parse {key}={other} as bool"))),
        }
    }

    /// Resolve the model section.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut c = ModelConfig::default();
        if let Some(v) = self.parse("model.idb_count")? {
            c.idb_count = v;
        }
        if let Some(v) = self.parse("model.tmu_count")? {
            c.tmu_count = v;
        }
        if let Some(raw) = self.get("model.branch_kernels") {
            let parts: Vec<usize> = raw
                .split(',')
                .map(|p| p.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| {
                    Error::Config(format!("cannot parse model.branch_kernels={raw}"))
                })?;
            if parts.len() != 3 {
                return Err(Error::Config(
                    "model.branch_kernels needs exactly three entries".into(),
                ));
            }
            c.branch_kernels = [parts[0], parts[1], parts[2]];
        }
        if let Some(v) = self.parse_bool("model.use_cbam")? {
            c.use_cbam = v;
        }
        if let Some(v) = self.parse("model.channels")? {
            c.channels = v;
        }
        if let Some(v) = self.parse("model.growth")? {
            c.growth = v;
        }
        if let Some(v) = self.parse("model.embed_channels")? {
            c.embed_channels = v;
        }
        if let Some(v) = self.parse("model.patch")? {
            c.patch = v;
        }
        if let Some(v) = self.parse("model.reduction")? {
            c.reduction = v;
        }
        if let Some(v) = self.parse("model.heads")? {
            c.heads = v;
        }
        if let Some(v) = self.parse_bool("model.normalize_weights")? {
            c.normalize_weights = v;
        }
        if let Some(v) = self.parse("model.seed")? {
            c.seed = v;
        }
        c.validate()?;
        Ok(c)
    }

    /// Resolve the train section; the train seed defaults to the model seed.
    pub fn train_config(&self, model: &ModelConfig) -> Result<TrainConfig> {
        let mut t = TrainConfig {
            seed: model.seed,
            ..TrainConfig::default()
        };
        if let Some(v) = self.parse("train.learning_rate")? {
            t.learning_rate = v;
        }
        if let Some(v) = self.parse("train.batch_size")? {
            t.batch_size = v;
        }
        if let Some(v) = self.parse("train.epochs")? {
            t.epochs = v;
        }
        if let Some(v) = self.parse("train.beta1")? {
            t.beta1 = v;
        }
        if let Some(v) = self.parse("train.beta2")? {
            t.beta2 = v;
        }
        if let Some(v) = self.parse("train.eps")? {
            t.eps = v;
        }
        if let Some(v) = self.parse("train.seed")? {
            t.seed = v;
        }
        if let Some(v) = self.parse("train.checkpoint_every")? {
            t.checkpoint_every = v;
        }
        if let Some(v) = self.parse("train.max_steps")? {
            t.max_steps = Some(v);
        }
        if let Some(v) = self.parse("train.grad_clip")? {
            t.grad_clip = Some(v);
        }
        if let Some(raw) = self.get("train.fixed_weights") {
            if raw == "adaptive" {
                t.fixed_weights = None;
            } else {
                t.fixed_weights = Some(parse_quadruple(raw)?);
            }
        }
        t.validate()?;
        Ok(t)
    }

    /// Resolve the ablate section.
    pub fn ablate_config(&self) -> Result<AblateConfig> {
        let mut a = AblateConfig::default();
        if let Some(v) = self.parse("ablate.epochs")? {
            a.epochs = v;
        }
        if let Some(v) = self.parse("ablate.max_steps")? {
            a.max_steps = Some(v);
        }
        Ok(a)
    }
}

/// Parse `a,b,c,d` into a weight quadruple.
pub fn parse_quadruple(raw: &str) -> Result<[f64; 4]> {
    let parts: Vec<f64> = raw
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("cannot parse weight quadruple {raw:?}")))?;
    if parts.len() != 4 {
        return Err(Error::Config(format!(
            "weight quadruple needs four entries, got {}",
            parts.len()
        )));
    }
    Ok([parts[0], parts[1], parts[2], parts[3]])
}

/// Render the resolved configuration in the same key=value syntax the file
/// uses; printed by every CLI run before executing.
pub fn render_resolved(
    model: &ModelConfig,
    train: Option<&TrainConfig>,
    ablate: Option<&AblateConfig>,
) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "model.idb_count={}", model.idb_count);
    let _ = writeln!(out, "model.tmu_count={}", model.tmu_count);
    let _ = writeln!(
        out,
        "model.branch_kernels={},{},{}",
        model.branch_kernels[0], model.branch_kernels[1], model.branch_kernels[2]
    );
    let _ = writeln!(out, "model.use_cbam={}", model.use_cbam);
    let _ = writeln!(out, "model.channels={}", model.channels);
    let _ = writeln!(out, "model.growth={}", model.growth);
    let _ = writeln!(out, "model.embed_channels={}", model.embed_channels);
    let _ = writeln!(out, "model.patch={}", model.patch);
    let _ = writeln!(out, "model.reduction={}", model.reduction);
    let _ = writeln!(out, "model.heads={}", model.heads);
    let _ = writeln!(out, "model.normalize_weights={}", model.normalize_weights);
    let _ = writeln!(out, "model.seed={}", model.seed);
    if let Some(t) = train {
        let _ = writeln!(out, "train.learning_rate={}", t.learning_rate);
        let _ = writeln!(out, "train.batch_size={}", t.batch_size);
        let _ = writeln!(out, "train.epochs={}", t.epochs);
        let _ = writeln!(out, "train.beta1={}", t.beta1);
        let _ = writeln!(out, "train.beta2={}", t.beta2);
        let _ = writeln!(out, "train.eps={}", t.eps);
        let _ = writeln!(out, "train.seed={}", t.seed);
        let _ = writeln!(out, "train.checkpoint_every={}", t.checkpoint_every);
        if let Some(ms) = t.max_steps {
            let _ = writeln!(out, "train.max_steps={ms}");
        }
        if let Some(gc) = t.grad_clip {
            let _ = writeln!(out, "train.grad_clip={gc}");
        }
        match t.fixed_weights {
            None => {
                let _ = writeln!(out, "train.fixed_weights=adaptive");
            }
            Some([a, b, c, d]) => {
                let _ = writeln!(out, "train.fixed_weights={a},{b},{c},{d}");
            }
        }
    }
    if let Some(a) = ablate {
        let _ = writeln!(out, "ablate.epochs={}", a.epochs);
        if let Some(ms) = a.max_steps {
            let _ = writeln!(out, "ablate.max_steps={ms}");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_and_overrides_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(
            &p,
            "# comment\nmodel.idb_count=2\ntrain.epochs=5\nablate.epochs=1\n",
        )
        .unwrap();
        let mut s = Settings::from_file(&p).unwrap();
        s.apply_overrides(&["train.epochs=1".to_string(), "model.seed=7".to_string()])
            .unwrap();
        let m = s.model_config().unwrap();
        assert_eq!(m.idb_count, 2);
        assert_eq!(m.seed, 7);
        let t = s.train_config(&m).unwrap();
        assert_eq!(t.epochs, 1);
        assert_eq!(t.seed, 7); // defaults to the model seed
        assert_eq!(s.ablate_config().unwrap().epochs, 1);
        let echo = render_resolved(&m, Some(&t), None);
        assert!(echo.contains("model.idb_count=2"));
        assert!(echo.contains("train.epochs=1"));
        assert!(echo.contains("train.fixed_weights=adaptive"));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let mut s = Settings::default();
        s.set_pair("model.idb_count=nine").unwrap();
        assert!(matches!(s.model_config(), Err(Error::Config(_))));
        let mut s = Settings::default();
        s.set_pair("model.idb_count=9").unwrap();
        assert!(s.model_config().is_err());
        assert!(Settings::default().set_pair("no_equals").is_err());
        assert!(parse_quadruple("1,2,3").is_err());
        assert_eq!(
            parse_quadruple("0.2, 0.8, 1, 1").unwrap(),
            [0.2, 0.8, 1.0, 1.0]
        );
    }
}
