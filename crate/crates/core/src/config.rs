//! Experiment configuration files.
//!
//! A config is a TOML document with one table per block. Every leaf is a
//! key path, so `[train]\nbatch_size = 64` and `train.batch_size = 64` are
//! the same setting. Unknown keys are rejected. The top-level `schema` key
//! must equal [`CONFIG_SCHEMA_VERSION`].
//!
//! ```toml
//! schema = 1
//! seed = 1
//!
//! [dataset]
//! source = "mixture"        # or "idx"
//! classes = 10
//! per_class = 500
//! test_per_class = 200
//! dim = 10
//! radius = 4.0
//! sigma = 0.5
//!
//! [imbalance]
//! keep = [[3, 25]]          # (class, samples kept)
//!
//! [model]
//! hidden = [64, 64]
//! embedding_dim = 2
//! activation = "relu"
//!
//! [loss]
//! kind = "ir"               # softmax | margin | ir | npairs
//! margin = "angular"        # plain | angular | additive_angle | combined
//! m = 3
//! center = "aux_loss"       # exact | instance_replace | memory_bank | aux_loss
//! center_lr = 0.05
//!
//! [train]
//! epochs = 60
//! batch_size = 64
//! learning_rate = 0.002
//! momentum = 0.9
//! warm_start_epochs = 30
//!
//! [eval]
//! far_targets = [0.01, 0.1]
//! gallery_per_class = 5
//! unknown_classes = 2
//! verification_limit = 2000 # optional: VR pairs from the first N test samples
//! out_dir = "runs/toy"
//! ```
//!
//! Environment variables named `IRS__<BLOCK>__<KEY>` override single keys
//! before validation (`IRS__TRAIN__BATCH_SIZE=32`, `IRS__SEED=4`). The
//! value is read as a TOML literal and falls back to a plain string.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::centers::CenterStrategy;
use crate::error::{Error, Result};
use crate::losses::{AngularHead, MarginSpec};
use crate::model::{Activation, MlpSpec};
use crate::train::{LossSelection, TrainConfig};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Prefix of environment overrides; `__` separates path segments.
pub const ENV_PREFIX: &str = "IRS__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub seed: u64,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub imbalance: ImbalanceConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainBlock,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Mixture,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    pub classes: Option<usize>,
    pub per_class: Option<usize>,
    pub test_per_class: Option<usize>,
    pub dim: Option<usize>,
    pub radius: Option<f64>,
    pub sigma: Option<f64>,
    /// IDX paths, resolved against the config file's directory.
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImbalanceConfig {
    #[serde(default)]
    pub keep: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Softmax,
    Margin,
    Ir,
    Npairs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginKind {
    Plain,
    Angular,
    AdditiveAngle,
    Combined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterKind {
    Exact,
    InstanceReplace,
    MemoryBank,
    AuxLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub margin: Option<MarginKind>,
    pub m: Option<u32>,
    pub alpha: Option<f64>,
    pub m1: Option<f64>,
    pub m2: Option<f64>,
    pub m3: Option<f64>,
    pub feature_scale: Option<f64>,
    pub lambda: Option<f64>,
    pub center: Option<CenterKind>,
    pub center_lr: Option<f64>,
    pub center_window: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainBlock {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// IR only; 0 disables the softmax warm start.
    #[serde(default)]
    pub warm_start_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub far_targets: Vec<f64>,
    /// Test samples per known class enrolled in the open-set gallery.
    pub gallery_per_class: usize,
    /// The highest class ids are kept out of the gallery and act as
    /// non-mated probes.
    pub unknown_classes: usize,
    /// Verification pairs come from the first this-many test samples only;
    /// bounds the quadratic pair count on large test sets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verification_limit: Option<usize>,
    pub out_dir: PathBuf,
}

fn invalid(field: &str, reason: impl Into<String>) -> Error {
    Error::Config(format!("{field}: {}", reason.into()))
}

fn required<T: Copy>(v: Option<T>, field: &str) -> Result<T> {
    v.ok_or_else(|| invalid(field, "required"))
}

/// Re-roots a nested validation error under `block`.
fn scoped(block: &str, e: Error) -> Error {
    match e {
        Error::InvalidArgument { name, reason } => invalid(&format!("{block}.{name}"), reason),
        other => invalid(block, other.to_string()),
    }
}

impl ExperimentConfig {
    /// Parses and validates `text` with the given overrides applied.
    /// Relative IDX paths resolve against `base`.
    pub fn parse<I, K, V>(text: &str, overrides: I, base: &Path) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for (k, v) in overrides {
            apply_override(&mut doc, k.as_ref(), v.as_ref())?;
        }
        let mut cfg: ExperimentConfig = ExperimentConfig::deserialize(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and applies `IRS__*` overrides from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let overrides = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX));
        Self::parse(&text, overrides, base).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let d = &mut self.dataset;
        for p in [&mut d.train_images, &mut d.train_labels, &mut d.test_images, &mut d.test_labels]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != CONFIG_SCHEMA_VERSION {
            return Err(invalid(
                "schema",
                format!("unsupported version {}, expected {CONFIG_SCHEMA_VERSION}", self.schema),
            ));
        }
        self.validate_dataset()?;
        self.mlp_spec()?;
        self.train_config()?;
        let classes = self.classes()?;
        for &(class, _) in &self.imbalance.keep {
            if class >= classes {
                return Err(invalid("imbalance.keep", format!("class {class} out of range for {classes} classes")));
            }
        }
        let ev = &self.eval;
        if ev.far_targets.is_empty() {
            return Err(invalid("eval.far_targets", "need at least one target"));
        }
        if let Some(f) = ev.far_targets.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(invalid("eval.far_targets", format!("{f} is outside (0, 1]")));
        }
        if ev.gallery_per_class == 0 {
            return Err(invalid("eval.gallery_per_class", "must be >= 1"));
        }
        if ev.unknown_classes == 0 || ev.unknown_classes + 1 > classes {
            return Err(invalid("eval.unknown_classes", format!("must be in [1, {}]", classes - 1)));
        }
        if ev.verification_limit.is_some_and(|n| n < 2) {
            return Err(invalid("eval.verification_limit", "must be at least 2"));
        }
        Ok(())
    }

    fn validate_dataset(&self) -> Result<()> {
        let d = &self.dataset;
        match d.source {
            DataSource::Mixture => {
                let classes = required(d.classes, "dataset.classes")?;
                if classes < 2 {
                    return Err(invalid("dataset.classes", "need at least 2 classes"));
                }
                if required(d.per_class, "dataset.per_class")? == 0 {
                    return Err(invalid("dataset.per_class", "must be >= 1"));
                }
                if required(d.test_per_class, "dataset.test_per_class")? == 0 {
                    return Err(invalid("dataset.test_per_class", "must be >= 1"));
                }
                if required(d.dim, "dataset.dim")? < 2 {
                    return Err(invalid("dataset.dim", "need at least 2 dimensions"));
                }
                let sigma = required(d.sigma, "dataset.sigma")?;
                if !(sigma >= 0.0 && sigma.is_finite()) {
                    return Err(invalid("dataset.sigma", format!("must be finite and >= 0, got {sigma}")));
                }
                if !required(d.radius, "dataset.radius")?.is_finite() {
                    return Err(invalid("dataset.radius", "must be finite"));
                }
            }
            DataSource::Idx => {
                required(d.classes, "dataset.classes")?;
                for (field, p) in [
                    ("dataset.train_images", &d.train_images),
                    ("dataset.train_labels", &d.train_labels),
                    ("dataset.test_images", &d.test_images),
                    ("dataset.test_labels", &d.test_labels),
                ] {
                    let p = p.as_ref().ok_or_else(|| invalid(field, "required"))?;
                    if !p.is_file() {
                        return Err(invalid(field, format!("{} does not exist", p.display())));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> Result<usize> {
        required(self.dataset.classes, "dataset.classes")
    }

    /// Input width: the mixture dimension, or the image size for IDX data
    /// (taken from `model.hidden`'s caller once the files are read).
    pub fn input_dim(&self) -> Option<usize> {
        match self.dataset.source {
            DataSource::Mixture => self.dataset.dim,
            DataSource::Idx => None,
        }
    }

    /// Network spec for an input of width `input_dim`.
    pub fn mlp_spec_for(&self, input_dim: usize) -> Result<MlpSpec> {
        let m = &self.model;
        if m.embedding_dim == 0 {
            return Err(invalid("model.embedding_dim", "must be >= 1"));
        }
        if let Some(i) = m.hidden.iter().position(|&h| h == 0) {
            return Err(invalid(&format!("model.hidden[{i}]"), "must be >= 1"));
        }
        let mut sizes = Vec::with_capacity(m.hidden.len() + 2);
        sizes.push(input_dim);
        sizes.extend_from_slice(&m.hidden);
        sizes.push(m.embedding_dim);
        MlpSpec::new(sizes, m.activation).map_err(|e| scoped("model", e))
    }

    fn mlp_spec(&self) -> Result<MlpSpec> {
        // IDX widths are only known after loading; check with a placeholder.
        self.mlp_spec_for(self.input_dim().unwrap_or(1))
    }

    pub fn margin_spec(&self) -> Result<MarginSpec> {
        let l = &self.loss;
        let spec = match required(l.margin, "loss.margin")? {
            MarginKind::Plain => MarginSpec::Plain,
            MarginKind::Angular => MarginSpec::Angular { m: required(l.m, "loss.m")? },
            MarginKind::AdditiveAngle => MarginSpec::AdditiveAngle { alpha: required(l.alpha, "loss.alpha")? },
            MarginKind::Combined => MarginSpec::Combined {
                m1: required(l.m1, "loss.m1")?,
                m2: required(l.m2, "loss.m2")?,
                m3: required(l.m3, "loss.m3")?,
            },
        };
        spec.validate().map_err(|e| scoped("loss", e))?;
        Ok(spec)
    }

    pub fn center_strategy(&self) -> Result<CenterStrategy> {
        let l = &self.loss;
        let s = match required(l.center, "loss.center")? {
            CenterKind::Exact => CenterStrategy::Exact,
            CenterKind::InstanceReplace => CenterStrategy::InstanceReplace,
            CenterKind::MemoryBank => CenterStrategy::MemoryBank { window: required(l.center_window, "loss.center_window")? },
            CenterKind::AuxLoss => CenterStrategy::AuxLoss { lr: required(l.center_lr, "loss.center_lr")? },
        };
        s.validate().map_err(|e| match e {
            Error::InvalidArgument { name, reason } => {
                let field = if name == "window" { "loss.center_window" } else { "loss.center_lr" };
                invalid(field, reason)
            }
            other => other,
        })?;
        Ok(s)
    }

    fn angular_head(&self) -> Result<AngularHead> {
        let mut head = AngularHead::new(self.margin_spec()?);
        if let Some(s) = self.loss.feature_scale {
            head = head.with_feature_scale(s);
        }
        if let Some(l) = self.loss.lambda {
            head = head.with_lambda(l);
        }
        head.validate().map_err(|e| scoped("loss", e))?;
        Ok(head)
    }

    pub fn loss_selection(&self) -> Result<LossSelection> {
        Ok(match self.loss.kind {
            LossKind::Softmax => LossSelection::Softmax,
            LossKind::Npairs => LossSelection::Npairs,
            LossKind::Margin => LossSelection::Margin { head: self.angular_head()? },
            LossKind::Ir => LossSelection::Ir { head: self.angular_head()?, strategy: self.center_strategy()? },
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let cfg = TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            seed: self.seed,
            loss: self.loss_selection()?,
            warm_start: t.warm_start_epochs > 0,
            warm_start_epochs: t.warm_start_epochs,
        };
        cfg.validate().map_err(|e| scoped("train", e))?;
        Ok(cfg)
    }
}

/// Sets the key path named by an `IRS__A__B` variable to `raw`.
fn apply_override(doc: &mut toml::Table, var: &str, raw: &str) -> Result<()> {
    let path = var
        .strip_prefix(ENV_PREFIX)
        .ok_or_else(|| Error::Config(format!("{var}: override names must start with {ENV_PREFIX}")))?;
    let segments: Vec<String> = path.split("__").map(str::to_ascii_lowercase).collect();
    if segments.iter().any(String::is_empty) {
        return Err(Error::Config(format!("{var}: empty key segment")));
    }
    let value = parse_literal(raw);
    let (leaf, parents) = segments.split_last().expect("split yields at least one segment");
    let mut table = doc;
    for seg in parents {
        let entry = table.entry(seg.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{var}: `{seg}` is not a table")))?;
    }
    table.insert(leaf.clone(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const TOY: &str = r#"
schema = 1
seed = 1

[dataset]
source = "mixture"
classes = 10
per_class = 50
test_per_class = 20
dim = 10
radius = 4.0
sigma = 0.5

[imbalance]
keep = [[3, 5]]

[model]
hidden = [16]
embedding_dim = 2
activation = "relu"

[loss]
kind = "ir"
margin = "angular"
m = 3
center = "aux_loss"
center_lr = 0.05

[train]
epochs = 4
batch_size = 32
learning_rate = 0.01
momentum = 0.9
warm_start_epochs = 2

[eval]
far_targets = [0.01, 0.1]
gallery_per_class = 3
unknown_classes = 2
out_dir = "runs/toy"
"#;

    fn parse(text: &str, ov: &[(&str, &str)]) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(text, ov.iter().copied(), Path::new("."))
    }

    fn message(e: Error) -> String {
        e.to_string()
    }

    #[test]
    fn parses_and_builds_types() {
        let cfg = parse(TOY, &[]).unwrap();
        let t = cfg.train_config().unwrap();
        assert!(t.warm_start);
        assert_eq!(
            t.loss,
            LossSelection::Ir {
                head: AngularHead::new(MarginSpec::Angular { m: 3 }),
                strategy: CenterStrategy::AuxLoss { lr: 0.05 }
            }
        );
        assert_eq!(cfg.mlp_spec_for(10).unwrap().layer_sizes, vec![10, 16, 2]);
    }

    #[test]
    fn round_trips() {
        let cfg = parse(TOY, &[]).unwrap();
        let again = parse(&cfg.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn dotted_keys_are_equivalent() {
        // top-level dotted key in place of the [imbalance] table
        let dotted = format!("imbalance.keep = [[3, 5]]\n{}", TOY.replace("[imbalance]\nkeep = [[3, 5]]\n", ""));
        assert!(!dotted.contains("[imbalance]"));
        assert_eq!(parse(&dotted, &[]).unwrap(), parse(TOY, &[]).unwrap());
    }

    #[test]
    fn zero_batch_size_names_field() {
        let msg = message(parse(TOY, &[("IRS__TRAIN__BATCH_SIZE", "0")]).unwrap_err());
        assert!(msg.contains("train.batch_size"), "{msg}");
    }

    #[test]
    fn overrides_apply() {
        let cfg = parse(TOY, &[("IRS__SEED", "9"), ("IRS__LOSS__KIND", "softmax")]).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train_config().unwrap().loss, LossSelection::Softmax);
    }

    #[test]
    fn syntax_error_reports_line() {
        let broken = TOY.replace("epochs = 4", "epochs = = 4");
        let msg = message(parse(&broken, &[]).unwrap_err());
        assert!(msg.contains("line"), "{msg}");
    }

    #[test]
    fn unknown_key_rejected() {
        let msg = message(parse(&TOY.replace("epochs = 4", "epochs = 4\nepoch = 3"), &[]).unwrap_err());
        assert!(msg.contains("epoch"), "{msg}");
    }

    #[test]
    fn missing_margin_parameter_named() {
        let msg = message(parse(&TOY.replace("m = 3\n", ""), &[]).unwrap_err());
        assert!(msg.contains("loss.m"), "{msg}");
        let msg = message(parse(TOY, &[("IRS__LOSS__CENTER_LR", "-1.0")]).unwrap_err());
        assert!(msg.contains("loss.center_lr"), "{msg}");
    }

    #[test]
    fn bad_schema_and_ranges() {
        assert!(message(parse(TOY, &[("IRS__SCHEMA", "2")]).unwrap_err()).contains("schema"));
        assert!(message(parse(TOY, &[("IRS__IMBALANCE__KEEP", "[[12, 1]]")]).unwrap_err()).contains("imbalance.keep"));
        assert!(message(parse(TOY, &[("IRS__EVAL__FAR_TARGETS", "[0.0]")]).unwrap_err()).contains("eval.far_targets"));
        assert!(message(parse(TOY, &[("IRS__TRAIN__MOMENTUM", "1.0")]).unwrap_err()).contains("train.momentum"));
    }

    #[test]
    fn missing_idx_file_named() {
        let text = TOY.replace(
            "source = \"mixture\"",
            "source = \"idx\"\ntrain_images = \"nope.idx\"\ntrain_labels = \"nope\"\ntest_images = \"a\"\ntest_labels = \"b\"",
        );
        let msg = message(parse(&text, &[]).unwrap_err());
        assert!(msg.contains("dataset.train_images"), "{msg}");
    }

    #[test]
    fn string_fallback_literal() {
        assert_eq!(parse_literal("softmax"), toml::Value::String("softmax".into()));
        assert_eq!(parse_literal("3"), toml::Value::Integer(3));
        assert_eq!(parse_literal("[1, 2]"), toml::Value::Array(vec![1.into(), 2.into()]));
    }
}
