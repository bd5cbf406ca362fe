//! Mini-batch training of the embedder under each loss head.
//!
//! Batch order for IR-Softmax: forward, loss against a frozen bank, SGD on
//! the network, then the bank's own center update from the batch's
//! (pre-step) embeddings. The bank is never moved along a loss gradient.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::centers::{exact_centers, weight_center_gap, CenterBank, CenterStrategy};
use crate::data::{sample_batches, LabeledDataset};
use crate::error::{Error, Result};
use crate::losses::{npairs_loss, positive_pairs, softmax_ce, AngularHead};
use crate::model::{MlpParams, MlpSpec, Momentum};
use crate::numerics::{cosine_similarity, dot, Matrix, RandomStream, NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSelection {
    Softmax,
    Margin { head: AngularHead },
    Ir { head: AngularHead, strategy: CenterStrategy },
    Npairs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub loss: LossSelection,
    /// IR only: pretrain with plain softmax, then seed the bank with the
    /// exact centers of the pretrained embedding.
    pub warm_start: bool,
    pub warm_start_epochs: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be >= 1"));
        }
        Momentum::new(self.learning_rate, self.momentum)?;
        match self.loss {
            LossSelection::Margin { head } => head.validate()?,
            LossSelection::Ir { head, strategy } => {
                head.validate()?;
                strategy.validate()?;
                if self.warm_start && self.warm_start_epochs == 0 {
                    return Err(Error::invalid("warm_start_epochs", "must be >= 1 when warm_start is set"));
                }
            }
            LossSelection::Softmax | LossSelection::Npairs => {}
        }
        Ok(())
    }
}

/// Classifier attached to the embedding.
#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Softmax { weights: Matrix, bias: Vec<f64> },
    /// Raw rows; normalized when used.
    Margin { weights: Matrix },
    Ir { bank: CenterBank },
    /// Exact training-set centers, for heads that carry no classifier.
    Prototypes { bank: CenterBank },
}

impl Head {
    /// Per-class direction rows compared against exact centers.
    pub fn rows(&self) -> &Matrix {
        match self {
            Head::Softmax { weights, .. } | Head::Margin { weights } => weights,
            Head::Ir { bank } | Head::Prototypes { bank } => bank.centers(),
        }
    }

    /// Arg-max class per embedding; ties go to the lower class id.
    pub fn predict(&self, e: &Matrix) -> Result<Vec<usize>> {
        let argmax = |scores: Vec<f64>| -> usize {
            let mut best = 0;
            for (j, &s) in scores.iter().enumerate() {
                if s > scores[best] {
                    best = j;
                }
            }
            best
        };
        e.iter_rows()
            .map(|x| {
                let scores: Vec<f64> = match self {
                    Head::Softmax { weights, bias } => {
                        weights.iter_rows().zip(bias).map(|(w, b)| dot(w, x) + b).collect()
                    }
                    Head::Margin { weights } => weights
                        .iter_rows()
                        .map(|w| cosine_similarity(w, x))
                        .collect::<Result<_>>()?,
                    Head::Ir { bank } | Head::Prototypes { bank } => (0..bank.classes())
                        .map(|k| {
                            if bank.is_degenerate(k) {
                                Ok(f64::NEG_INFINITY)
                            } else {
                                cosine_similarity(bank.centers().row(k), x)
                            }
                        })
                        .collect::<Result<_>>()?,
                };
                Ok(argmax(scores))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// `pretrain` for the warm-start phase, `train` otherwise.
    pub phase: String,
    pub epoch: usize,
    pub mean_loss: f64,
    pub weight_center_gaps: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: MlpParams,
    pub head: Head,
}

impl TrainedModel {
    pub fn embed(&self, x: &Matrix) -> Result<Matrix> {
        self.params.embed(x)
    }
}

pub struct TrainOutcome {
    pub model: TrainedModel,
    pub history: Vec<EpochRecord>,
}

/// Trains `spec` on `data` under `cfg`. `on_epoch` sees each record as it
/// is produced.
pub fn train(
    spec: &MlpSpec,
    cfg: &TrainConfig,
    data: &LabeledDataset,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    spec.validate()?;
    cfg.validate()?;
    if spec.input_dim() != data.dim() {
        return Err(Error::ShapeMismatch {
            context: "train",
            expected: format!("input width {}", spec.input_dim()),
            got: format!("{}", data.dim()),
        });
    }
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let root = RandomStream::new(cfg.seed);
    let mut params = MlpParams::init(spec, &mut root.fork(0))?;
    let mut head_stream = root.fork(1);
    let mut batch_stream = root.fork(2);
    let k = data.classes;
    let d = spec.embedding_dim();
    let mut history = Vec::new();

    let mut run = |phase: &str,
                   params: &mut MlpParams,
                   head: &mut Head,
                   epochs: usize,
                   history: &mut Vec<EpochRecord>|
     -> Result<()> {
        let mut net_mom = Momentum::new(cfg.learning_rate, cfg.momentum)?;
        let mut head_mom = Momentum::new(cfg.learning_rate, cfg.momentum)?;
        for epoch in 0..epochs {
            let batches = sample_batches(data.len(), cfg.batch_size, &mut batch_stream)?;
            let mut loss_sum = 0.0;
            let mut seen = 0usize;
            for (b, idx) in batches.iter().enumerate() {
                let xb = data.features.select_rows(idx);
                let yb: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
                let at_batch = |e: Error| match e {
                    Error::NonFiniteGradient { .. } => Error::NonFiniteLoss { epoch, batch: b },
                    other => other,
                };
                let (e, cache) = params.forward(&xb)?;
                let step = batch_step(cfg, head, &e, &yb, &mut head_mom, params.layers()).map_err(at_batch)?;
                let Some((loss, d_e)) = step else { continue };
                if !loss.is_finite() || !d_e.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: b });
                }
                let grads = params.backward(&cache, &d_e)?;
                params.sgd_step(&grads, &mut net_mom).map_err(at_batch)?;
                if let Head::Ir { bank } = head {
                    bank.update_from_batch(&e, &yb)?;
                }
                loss_sum += loss * idx.len() as f64;
                seen += idx.len();
            }
            let emb = params.embed(&data.features)?;
            let exact = exact_centers(&emb, &data.labels, k)?;
            if matches!(head, Head::Prototypes { .. }) {
                *head = Head::Prototypes { bank: exact.clone() };
            }
            let record = EpochRecord {
                phase: phase.to_string(),
                epoch,
                mean_loss: if seen > 0 { loss_sum / seen as f64 } else { f64::NAN },
                weight_center_gaps: weight_center_gap(head.rows(), &exact)?,
            };
            on_epoch(&record);
            history.push(record);
        }
        Ok(())
    };

    let mut head = match cfg.loss {
        LossSelection::Softmax => softmax_head(k, d, &mut head_stream)?,
        LossSelection::Margin { .. } => {
            let rows: Vec<Vec<f64>> = (0..k).map(|_| head_stream.unit_vector(d)).collect();
            Head::Margin {
                weights: Matrix::from_rows(&rows)?,
            }
        }
        LossSelection::Ir { strategy, .. } => {
            if cfg.warm_start {
                let mut pre = softmax_head(k, d, &mut head_stream)?;
                run("pretrain", &mut params, &mut pre, cfg.warm_start_epochs, &mut history)?;
                let emb = params.embed(&data.features)?;
                Head::Ir {
                    bank: exact_centers(&emb, &data.labels, k)?.with_strategy(strategy)?,
                }
            } else {
                Head::Ir {
                    bank: CenterBank::random(k, d, strategy, &mut root.fork(3))?,
                }
            }
        }
        LossSelection::Npairs => Head::Prototypes {
            bank: CenterBank::from_rows(&Matrix::zeros(k, d), CenterStrategy::Exact)?,
        },
    };
    run("train", &mut params, &mut head, cfg.epochs, &mut history)?;

    Ok(TrainOutcome {
        model: TrainedModel { params, head },
        history,
    })
}

fn softmax_head(k: usize, d: usize, stream: &mut RandomStream) -> Result<Head> {
    let a = (6.0 / (k + d) as f64).sqrt();
    let data = (0..k * d).map(|_| stream.uniform(-a, a)).collect();
    Ok(Head::Softmax {
        weights: Matrix::new(k, d, data)?,
        bias: vec![0.0; k],
    })
}

/// Loss and `∂J/∂E` for one batch, stepping any trainable head weights.
/// A non-finite head gradient is reported as layer `layer` (one past the
/// network).
/// `None` when the batch carries no training signal (N-pairs without a
/// positive pair).
fn batch_step(
    cfg: &TrainConfig,
    head: &mut Head,
    e: &Matrix,
    labels: &[usize],
    head_mom: &mut Momentum,
    layer: usize,
) -> Result<Option<(f64, Matrix)>> {
    match head {
        Head::Softmax { weights, bias } => {
            let g = softmax_ce(e, labels, weights, Some(bias))?;
            let db = g.d_bias.as_ref().expect("bias supplied");
            if !g.d_weights.is_finite() || !db.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteGradient { layer });
            }
            head_mom.apply(0, weights.data_mut(), g.d_weights.data());
            head_mom.apply(1, bias, db);
            Ok(Some((g.loss, g.d_features)))
        }
        Head::Margin { weights } => {
            let LossSelection::Margin { head: spec } = cfg.loss else {
                unreachable!("margin head only built for margin loss")
            };
            let g = spec.margin_softmax_raw(e, labels, weights)?;
            if !g.d_weights.is_finite() {
                return Err(Error::NonFiniteGradient { layer });
            }
            head_mom.apply(0, weights.data_mut(), g.d_weights.data());
            // keep raw rows near unit length so the effective step size
            // does not drift
            for r in 0..weights.rows() {
                let row = weights.row_mut(r);
                let n = crate::numerics::norm(row);
                if n > NORM_EPS {
                    row.iter_mut().for_each(|v| *v /= n);
                }
            }
            Ok(Some((g.loss, g.d_features)))
        }
        Head::Ir { bank } => {
            let LossSelection::Ir { head: spec, .. } = cfg.loss else {
                unreachable!("ir head only built for ir loss")
            };
            let g = spec.ir_softmax(e, labels, bank)?;
            Ok(Some((g.loss, g.d_features)))
        }
        Head::Prototypes { .. } => {
            let pairs = positive_pairs(labels);
            if pairs.is_empty() {
                return Ok(None);
            }
            let (loss, d_e) = npairs_loss(e, labels, &pairs)?;
            Ok(Some((loss, d_e)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_gaussian_mixture, MixtureSpec};
    use crate::losses::MarginSpec;
    use crate::model::Activation;

    fn toy() -> (MlpSpec, LabeledDataset) {
        let mix = MixtureSpec {
            classes: 3,
            per_class: vec![40, 40, 40],
            dim: 4,
            radius: 3.0,
            sigma: 0.5,
        };
        let ds = gen_gaussian_mixture(&mix, &mut RandomStream::new(1)).unwrap();
        (MlpSpec::new(vec![4, 16, 2], Activation::Relu).unwrap(), ds)
    }

    fn cfg(loss: LossSelection) -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 16,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 7,
            loss,
            warm_start: true,
            warm_start_epochs: 2,
        }
    }

    #[test]
    fn every_head_trains_and_is_reproducible() {
        let (spec, ds) = toy();
        let losses = [
            LossSelection::Softmax,
            LossSelection::Margin {
                head: AngularHead::new(MarginSpec::Angular { m: 2 }),
            },
            LossSelection::Ir {
                head: AngularHead::new(MarginSpec::AdditiveAngle { alpha: 0.2 }),
                strategy: CenterStrategy::AuxLoss { lr: 0.5 },
            },
            LossSelection::Npairs,
        ];
        for loss in losses {
            let a = train(&spec, &cfg(loss), &ds, |_| {}).unwrap();
            let b = train(&spec, &cfg(loss), &ds, |_| {}).unwrap();
            assert_eq!(a.model.params, b.model.params, "{loss:?}");
            assert_eq!(a.model.head, b.model.head);
            assert_eq!(a.history, b.history);
            assert!(a.history.iter().all(|r| r.mean_loss.is_finite()));
            let pred = a.model.head.predict(&a.model.embed(&ds.features).unwrap()).unwrap();
            assert_eq!(pred.len(), ds.len());
        }
    }

    #[test]
    fn warm_start_records_pretrain_phase() {
        let (spec, ds) = toy();
        let c = cfg(LossSelection::Ir {
            head: AngularHead::new(MarginSpec::Plain),
            strategy: CenterStrategy::MemoryBank { window: 10 },
        });
        let out = train(&spec, &c, &ds, |_| {}).unwrap();
        let phases: Vec<&str> = out.history.iter().map(|r| r.phase.as_str()).collect();
        assert_eq!(phases, vec!["pretrain", "pretrain", "train", "train", "train"]);
        assert!(matches!(out.model.head, Head::Ir { .. }));
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(LossSelection::Softmax);
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = cfg(LossSelection::Softmax);
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        let c = cfg(LossSelection::Ir {
            head: AngularHead::new(MarginSpec::Angular { m: 0 }),
            strategy: CenterStrategy::Exact,
        });
        assert!(c.validate().is_err());
    }
}
