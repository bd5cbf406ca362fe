//! Config-driven runs: data construction, training, evaluation, artifacts.
//!
//! A run directory holds
//!
//! * `config.toml`: the resolved config,
//! * `checkpoint.json`: network, head and the SHA-256 of the train config,
//! * `embeddings.csv`: `id,label,e0..` for every test sample,
//! * `eval_report.json`: the [`EvalReport`],
//! * `run_log.jsonl`: one [`EpochRecord`] per line.
//!
//! Everything written is a pure function of the config, so repeated runs
//! produce identical bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::centers::{weight_center_gap, exact_centers, CenterBank};
use crate::config::{DataSource, ExperimentConfig};
use crate::data::{apply_imbalance, gen_gaussian_mixture, load_idx, ImbalanceSpec, LabeledDataset, MixtureSpec};
use crate::error::{Error, Result};
use crate::eval::{
    cmc, dir_at_far, embedding_stats, mean_average_precision, per_class_recall, score_all_pairs, vr_at_far,
    EvalReport, IdentitySet, REPORT_SCHEMA_VERSION,
};
use crate::model::MlpParams;
use crate::numerics::{Matrix, RandomStream};
use crate::train::{train, EpochRecord, Head, TrainConfig, TrainedModel};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Train and test splits built from a config.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

pub fn build_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    let d = &cfg.dataset;
    let classes = cfg.classes()?;
    let root = RandomStream::new(cfg.seed);
    let (train, test) = match d.source {
        DataSource::Mixture => {
            let spec = |per: usize| MixtureSpec {
                classes,
                per_class: vec![per; classes],
                dim: d.dim.unwrap_or_default(),
                radius: d.radius.unwrap_or_default(),
                sigma: d.sigma.unwrap_or_default(),
            };
            let train = gen_gaussian_mixture(&spec(d.per_class.unwrap_or_default()), &mut root.fork(10))?;
            let test = gen_gaussian_mixture(&spec(d.test_per_class.unwrap_or_default()), &mut root.fork(11))?;
            (train, test)
        }
        DataSource::Idx => {
            let path = |p: &Option<PathBuf>| p.clone().unwrap_or_default();
            let load = |img: &Option<PathBuf>, lab: &Option<PathBuf>| -> Result<LabeledDataset> {
                let ds = load_idx(&path(img), &path(lab))?;
                if ds.classes > classes {
                    return Err(Error::Config(format!(
                        "dataset.classes: {classes} is smaller than the {} classes in {}",
                        ds.classes,
                        path(lab).display()
                    )));
                }
                LabeledDataset::new(ds.features, ds.labels, classes)
            };
            (load(&d.train_images, &d.train_labels)?, load(&d.test_images, &d.test_labels)?)
        }
    };
    let imbalance = ImbalanceSpec {
        keep: cfg.imbalance.keep.clone(),
    };
    let train = apply_imbalance(&train, &imbalance, &mut root.fork(12))?;
    Ok(Datasets { train, test })
}

/// Hex SHA-256 of the canonical JSON form of `cfg`.
pub fn train_config_hash(cfg: &TrainConfig) -> Result<String> {
    let json = serde_json::to_string(cfg)?;
    let digest = Sha256::digest(json.as_bytes());
    Ok(digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CheckpointHead {
    Softmax { weights: Matrix, bias: Vec<f64> },
    Margin { weights: Matrix },
    /// Banks are stored in their text format.
    Ir { bank: String },
    Prototypes { bank: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub train_config_sha256: String,
    pub params: MlpParams,
    pub head: CheckpointHead,
}

impl Checkpoint {
    pub fn new(model: &TrainedModel, cfg: &TrainConfig) -> Result<Self> {
        let head = match &model.head {
            Head::Softmax { weights, bias } => CheckpointHead::Softmax {
                weights: weights.clone(),
                bias: bias.clone(),
            },
            Head::Margin { weights } => CheckpointHead::Margin {
                weights: weights.clone(),
            },
            Head::Ir { bank } => CheckpointHead::Ir { bank: bank.to_text() },
            Head::Prototypes { bank } => CheckpointHead::Prototypes { bank: bank.to_text() },
        };
        Ok(Self {
            version: CHECKPOINT_VERSION,
            train_config_sha256: train_config_hash(cfg)?,
            params: model.params.clone(),
            head,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Parse {
                what: "checkpoint".to_string(),
                reason: format!("unsupported version {}", ck.version),
            });
        }
        Ok(ck)
    }

    /// Rebuilds the model, refusing a checkpoint trained under another
    /// train config.
    pub fn into_model(self, expected: &TrainConfig) -> Result<TrainedModel> {
        let want = train_config_hash(expected)?;
        if want != self.train_config_sha256 {
            return Err(Error::Config(format!(
                "checkpoint train config hash {} does not match config hash {want}",
                self.train_config_sha256
            )));
        }
        // Round-trip through parts to re-check shapes.
        let p = self.params;
        let params = MlpParams::from_parts(p.activation, p.weights, p.biases)?;
        let head = match self.head {
            CheckpointHead::Softmax { weights, bias } => Head::Softmax { weights, bias },
            CheckpointHead::Margin { weights } => Head::Margin { weights },
            CheckpointHead::Ir { bank } => Head::Ir {
                bank: CenterBank::from_text(&bank)?,
            },
            CheckpointHead::Prototypes { bank } => Head::Prototypes {
                bank: CenterBank::from_text(&bank)?,
            },
        };
        if head.rows().cols() != params.embedding_dim() {
            return Err(Error::ShapeMismatch {
                context: "checkpoint head",
                expected: format!("{} columns", params.embedding_dim()),
                got: format!("{}", head.rows().cols()),
            });
        }
        Ok(TrainedModel { params, head })
    }
}

/// `id,label,e0..` with one row per sample.
pub fn embeddings_csv(e: &Matrix, labels: &[usize]) -> String {
    let mut out = String::from("id,label");
    for j in 0..e.cols() {
        let _ = write!(out, ",e{j}");
    }
    out.push('\n');
    for (i, (row, y)) in e.iter_rows().zip(labels).enumerate() {
        let _ = write!(out, "{i},{y}");
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Full evaluation of `model` on the config's splits.
///
/// The open-set protocol is a single split of the test set: the first
/// `gallery_per_class` samples of each known class form the gallery, every
/// other test sample is a probe, and the `unknown_classes` highest class
/// ids supply the non-mated probes.
pub fn evaluate(model: &TrainedModel, cfg: &ExperimentConfig, data: &Datasets) -> Result<EvalReport> {
    let classes = cfg.classes()?;
    let ev = &cfg.eval;
    let train_e = model.embed(&data.train.features)?;
    let test_e = model.embed(&data.test.features)?;
    let exact = exact_centers(&train_e, &data.train.labels, classes)?;
    let gaps = weight_center_gap(model.head.rows(), &exact)?;

    let pred = model.head.predict(&test_e)?;
    let truth = &data.test.labels;
    let correct = truth.iter().zip(&pred).filter(|(t, p)| t == p).count();
    let stats = embedding_stats(&test_e, truth, classes, model.head.rows())?;

    let scores = match ev.verification_limit {
        Some(n) if n < truth.len() => {
            let head: Vec<usize> = (0..n).collect();
            score_all_pairs(&test_e.select_rows(&head), &truth[..n])?
        }
        _ => score_all_pairs(&test_e, truth)?,
    };
    let vr = vr_at_far(&scores, &ev.far_targets)?;

    let known = classes - ev.unknown_classes;
    let mut per_class_taken = vec![0usize; classes];
    let (mut gallery_idx, mut probe_idx) = (Vec::new(), Vec::new());
    for (i, &y) in truth.iter().enumerate() {
        if y < known && per_class_taken[y] < ev.gallery_per_class {
            per_class_taken[y] += 1;
            gallery_idx.push(i);
        } else {
            probe_idx.push(i);
        }
    }
    let g_e = test_e.select_rows(&gallery_idx);
    let g_ids: Vec<usize> = gallery_idx.iter().map(|&i| truth[i]).collect();
    let p_e = test_e.select_rows(&probe_idx);
    let p_ids: Vec<usize> = probe_idx.iter().map(|&i| truth[i]).collect();
    let gallery = IdentitySet::new(&g_e, &g_ids)?;
    let dir = dir_at_far(gallery, IdentitySet::new(&p_e, &p_ids)?, &ev.far_targets)?;

    let mated: Vec<usize> = (0..probe_idx.len()).filter(|&p| p_ids[p] < known).collect();
    let m_e = p_e.select_rows(&mated);
    let m_ids: Vec<usize> = mated.iter().map(|&p| p_ids[p]).collect();
    let mated_set = IdentitySet::new(&m_e, &m_ids)?;

    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        accuracy: correct as f64 / truth.len() as f64,
        per_class_recall: per_class_recall(truth, &pred),
        vr_at_far: vr,
        dir_at_far: dir,
        cmc: cmc(gallery, mated_set)?,
        map: mean_average_precision(gallery, mated_set)?,
        max_intra_angle: stats.max_intra_angle,
        min_inter_angle: stats.min_inter_angle,
        weight_center_gaps: gaps,
    })
}

/// In-memory products of one run.
pub struct RunOutput {
    pub report: EvalReport,
    pub history: Vec<EpochRecord>,
    pub checkpoint: Checkpoint,
    pub embeddings_csv: String,
    pub run_log: String,
}

/// Trains and evaluates `cfg`; `on_epoch` sees each epoch as it finishes.
pub fn run(cfg: &ExperimentConfig, on_epoch: impl FnMut(&EpochRecord)) -> Result<RunOutput> {
    let data = build_datasets(cfg)?;
    let spec = cfg.mlp_spec_for(data.train.dim())?;
    let tc = cfg.train_config()?;
    let outcome = train(&spec, &tc, &data.train, on_epoch)?;
    let report = evaluate(&outcome.model, cfg, &data)?;
    let test_e = outcome.model.embed(&data.test.features)?;
    let mut run_log = String::new();
    for rec in &outcome.history {
        run_log.push_str(&serde_json::to_string(rec)?);
        run_log.push('\n');
    }
    Ok(RunOutput {
        checkpoint: Checkpoint::new(&outcome.model, &tc)?,
        embeddings_csv: embeddings_csv(&test_e, &data.test.labels),
        report,
        history: outcome.history,
        run_log,
    })
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Error::io(path, e))
}

/// Writes every artifact of `out` under `dir`, creating it if needed.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, out: &RunOutput) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(dir, "config.toml", &cfg.to_toml()?)?;
    write(dir, "checkpoint.json", &out.checkpoint.to_json()?)?;
    write(dir, "embeddings.csv", &out.embeddings_csv)?;
    write(dir, "eval_report.json", &out.report.to_json()?)?;
    write(dir, "run_log.jsonl", &out.run_log)
}

/// Re-evaluates the checkpoint in `dir` against `cfg`'s data and rewrites
/// the report and embeddings there.
pub fn eval_checkpoint(dir: &Path, cfg: &ExperimentConfig) -> Result<EvalReport> {
    let path = dir.join("checkpoint.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let model = Checkpoint::from_json(&text)?.into_model(&cfg.train_config()?)?;
    let data = build_datasets(cfg)?;
    let report = evaluate(&model, cfg, &data)?;
    let test_e = model.embed(&data.test.features)?;
    write(dir, "embeddings.csv", &embeddings_csv(&test_e, &data.test.labels))?;
    write(dir, "eval_report.json", &report.to_json()?)?;
    Ok(report)
}

/// Canned base config of the imbalance study: 10-class mixture, class 3
/// kept at 5 % of the others, 2-D embedding, IR-Softmax with an angular
/// margin and aux-loss centers.
pub const TOY_IMBALANCE_CONFIG: &str = r#"schema = 1
seed = 1

[dataset]
source = "mixture"
classes = 10
per_class = 500
test_per_class = 200
dim = 10
radius = 4.0
sigma = 0.5

[imbalance]
keep = [[3, 25]]

[model]
hidden = [64, 64]
embedding_dim = 2
activation = "relu"

[loss]
kind = "ir"
margin = "angular"
m = 3
center = "aux_loss"
center_lr = 0.05

[train]
epochs = 60
batch_size = 64
learning_rate = 0.002
momentum = 0.9
warm_start_epochs = 30

[eval]
far_targets = [0.001, 0.01, 0.1]
gallery_per_class = 5
unknown_classes = 2
out_dir = "runs/toy-imbalance"
"#;

/// One quadrant of the imbalance study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRun {
    pub name: String,
    pub accuracy: f64,
    /// `None` for the balanced runs.
    pub minority_gap: Option<f64>,
    pub minority_recall: Option<f64>,
    pub max_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySummary {
    pub minority_class: usize,
    pub runs: Vec<ToyRun>,
    pub softmax_minority_gap: f64,
    pub ir_minority_gap: f64,
    pub softmax_minority_recall: f64,
    pub ir_minority_recall: f64,
    /// Softmax gap at least twice the IR gap.
    pub gap_ratio_ok: bool,
    /// IR gap at most 0.15 rad.
    pub ir_gap_ok: bool,
    /// IR recall at least the softmax recall.
    pub recall_ok: bool,
}

/// The four study configs derived from an IR base: (name, config).
///
/// Softmax runs train for the IR run's total epoch count (warm start
/// included) so both see the same number of updates.
pub fn toy_variants(base: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>> {
    if base.loss.kind != crate::config::LossKind::Ir {
        return Err(Error::Config("loss.kind: the imbalance study needs an ir base config".into()));
    }
    if base.imbalance.keep.is_empty() {
        return Err(Error::Config("imbalance.keep: the imbalance study needs a minority class".into()));
    }
    let mut out = Vec::new();
    for loss in ["softmax", "ir"] {
        for balanced in [true, false] {
            let mut cfg = base.clone();
            if balanced {
                cfg.imbalance.keep.clear();
            }
            if loss == "softmax" {
                cfg.loss.kind = crate::config::LossKind::Softmax;
                cfg.train.epochs += cfg.train.warm_start_epochs;
                cfg.train.warm_start_epochs = 0;
            }
            let name = format!("{loss}_{}", if balanced { "balanced" } else { "imbalanced" });
            cfg.eval.out_dir = base.eval.out_dir.join(&name);
            cfg.validate()?;
            out.push((name, cfg));
        }
    }
    Ok(out)
}

/// Runs all four study quadrants, writing each under `out` when given.
pub fn toy_imbalance(
    base: &ExperimentConfig,
    out: Option<&Path>,
    mut on_run: impl FnMut(&str, &EvalReport),
) -> Result<ToySummary> {
    let minority = base.imbalance.keep.first().map(|&(k, _)| k).unwrap_or_default();
    let mut runs = Vec::new();
    let (mut sm, mut ir) = ((0.0, 0.0), (0.0, 0.0));
    for (name, cfg) in toy_variants(base)? {
        let res = run(&cfg, |_| {})?;
        if let Some(dir) = out {
            write_run(&dir.join(&name), &cfg, &res)?;
        }
        on_run(&name, &res.report);
        let r = &res.report;
        let gap = r.weight_center_gaps.get(&minority).copied().unwrap_or(f64::NAN);
        let recall = r.per_class_recall.get(&minority).copied().unwrap_or(f64::NAN);
        let imbalanced = name.ends_with("_imbalanced");
        if imbalanced {
            if name.starts_with("softmax") {
                sm = (gap, recall);
            } else {
                ir = (gap, recall);
            }
        }
        runs.push(ToyRun {
            name,
            accuracy: r.accuracy,
            minority_gap: imbalanced.then_some(gap),
            minority_recall: imbalanced.then_some(recall),
            max_gap: r.weight_center_gaps.values().copied().fold(0.0, f64::max),
        });
    }
    let summary = ToySummary {
        minority_class: minority,
        runs,
        softmax_minority_gap: sm.0,
        ir_minority_gap: ir.0,
        softmax_minority_recall: sm.1,
        ir_minority_recall: ir.1,
        gap_ratio_ok: sm.0 >= 2.0 * ir.0,
        ir_gap_ok: ir.0 <= 0.15,
        recall_ok: ir.1 >= sm.1,
    };
    if let Some(dir) = out {
        let mut s = serde_json::to_string_pretty(&summary)?;
        s.push('\n');
        write(dir, "summary.json", &s)?;
    }
    Ok(summary)
}
