//! Three-phase training: embedding pretraining, downstream training with a
//! frozen embedding, then joint fine-tuning. Optimized with Adam.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::MultiOmicsDataset;
use crate::error::{Error, Result};
use crate::eval::{accuracy, Strategy};
use crate::losses::LossBreakdown;
use crate::model::VaeModel;
use crate::objective::{embedding_step, evaluate_objective, BatchNoise, Objective, UnlabeledBatch};
use crate::tensor::{Matrix, ParamGroup, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSchedule {
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub phase3_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PhaseSchedule {
    fn default() -> Self {
        Self {
            phase1_epochs: 50,
            phase2_epochs: 50,
            phase3_epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl PhaseSchedule {
    pub fn total_epochs(&self) -> usize {
        self.phase1_epochs + self.phase2_epochs + self.phase3_epochs
    }

    /// Phase (1-3) of zero-based global epoch `e`.
    pub fn phase_of(&self, e: usize) -> u8 {
        if e < self.phase1_epochs {
            1
        } else if e < self.phase1_epochs + self.phase2_epochs {
            2
        } else {
            3
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based global epoch number.
    pub epoch: usize,
    pub phase: u8,
    pub embed_loss: f64,
    pub classification_loss: f64,
    pub joint_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

impl EpochRecord {
    pub const HEADER: &'static str =
        "epoch\tphase\tembed_loss\tclassification_loss\tjoint_loss\ttrain_accuracy\tval_accuracy";

    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.epoch,
            self.phase,
            self.embed_loss,
            self.classification_loss,
            self.joint_loss,
            self.train_accuracy,
            self.val_accuracy
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(EpochRecord::HEADER);
        out.push('\n');
        for r in &self.records {
            writeln!(out, "{}", r.tsv_row()).expect("write to String");
        }
        out
    }
}

/// Adam moment buffers for every entry of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        Self::with_constants(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_constants(params: &ParamStore, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            beta1,
            beta2,
            epsilon,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// One bias-corrected Adam update of every unfrozen entry; all gradients
/// are zeroed afterwards.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    for (e, p) in params.iter_mut().enumerate() {
        if !p.frozen {
            let m = &mut state.first[e];
            let v = &mut state.second[e];
            let nw = p.weight.data().len();
            let values = p.weight.data_mut().iter_mut().chain(p.bias.iter_mut());
            let grads = p.grad_weight.data().iter().chain(p.grad_bias.iter());
            for (k, (w, &g)) in values.zip(grads).enumerate() {
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            debug_assert_eq!(m.len(), nw + p.bias.len());
        }
        p.zero_grad();
    }
}

fn set_phase_freezing(params: &mut ParamStore, phase: u8) {
    params.unfreeze_all();
    match phase {
        1 => params.set_group_frozen(ParamGroup::Downstream, true),
        2 => {
            params.set_group_frozen(ParamGroup::Encoder, true);
            params.set_group_frozen(ParamGroup::Decoder, true);
        }
        _ => {}
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// One optimization step of a given phase on a batch.
///
/// Phase 1 receives only the features: its step function has no access to
/// labels.
pub enum PhaseStep<'a> {
    Embedding(UnlabeledBatch<'a>),
    Classification { full: &'a [Matrix], labels: &'a [usize] },
    Joint { full: &'a [Matrix], labels: &'a [usize] },
}

pub fn run_step(model: &mut VaeModel, step: PhaseStep<'_>, noise: &BatchNoise) -> Result<LossBreakdown> {
    match step {
        PhaseStep::Embedding(batch) => embedding_step(model, batch, noise),
        PhaseStep::Classification { full, labels } => {
            evaluate_objective(model, full, Some(labels), noise, Objective::Classification, true)
        }
        PhaseStep::Joint { full, labels } => evaluate_objective(model, full, Some(labels), noise, Objective::Joint, true),
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: VaeModel,
    pub history: TrainHistory,
    /// Model with the highest validation accuracy, and its epoch.
    pub best: (usize, VaeModel),
}

pub type EpochCallback<'a> = Box<dyn FnMut(&EpochRecord, &VaeModel) + 'a>;

/// Drives the schedule; epochs already present in `history` are skipped so
/// a run can resume from a checkpoint.
pub struct Trainer<'a> {
    pub schedule: PhaseSchedule,
    /// Strategy for the per-epoch train/validation accuracy.
    pub strategy: Option<Strategy>,
    /// Called after every epoch with its record and the current model.
    pub on_epoch: Option<EpochCallback<'a>>,
    /// Best (epoch, validation accuracy, model) from an earlier run that is
    /// being resumed.
    pub initial_best: Option<(usize, f64, VaeModel)>,
}

impl<'a> Trainer<'a> {
    pub fn new(schedule: PhaseSchedule) -> Self {
        Self {
            schedule,
            strategy: None,
            on_epoch: None,
            initial_best: None,
        }
    }

    pub fn run(
        &mut self,
        mut model: VaeModel,
        train_set: &MultiOmicsDataset,
        val_set: &MultiOmicsDataset,
        mut history: TrainHistory,
    ) -> Result<TrainOutcome> {
        let s = self.schedule.clone();
        s.validate()?;
        for (name, d) in [("training", train_set), ("validation", val_set)] {
            if d.omics_dims() != model.config().omics_dims {
                return Err(Error::dim(
                    format!("{name} data vs model omics dims"),
                    format!("{:?}", model.config().omics_dims),
                    format!("{:?}", d.omics_dims()),
                ));
            }
            if d.class_count() > model.config().class_count {
                return Err(Error::Validation(format!(
                    "{name} data has {} classes, model has {}",
                    d.class_count(),
                    model.config().class_count
                )));
            }
        }
        if train_set.is_empty() {
            return Err(Error::Validation("training set is empty".into()));
        }
        let strategy = self.strategy.unwrap_or_else(|| Strategy::default_for(&model));
        let full = train_set.sample_major();
        let labels = train_set.labels();
        let (m, q) = (model.subset_count(), model.latent_dim());

        let mut best = self.initial_best.take();
        let mut adam: Option<(u8, AdamState)> = None;
        for e in history.len()..s.total_epochs() {
            let phase = s.phase_of(e);
            set_phase_freezing(model.params_mut(), phase);
            if adam.as_ref().is_none_or(|(p, _)| *p != phase) {
                adam = Some((phase, AdamState::new(model.params())));
            }
            let state = &mut adam.as_mut().expect("initialized above").1;

            let mut rng = epoch_rng(s.seed, e);
            let mut order: Vec<usize> = (0..train_set.len()).collect();
            order.shuffle(&mut rng);
            let mut totals = LossBreakdown::default();
            for (b, idx) in order.chunks(s.batch_size).enumerate() {
                let batch: Vec<Matrix> = full.iter().map(|x| x.select_rows(idx)).collect();
                let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                let noise = BatchNoise::sample(&mut rng, idx.len(), m, q);
                let step = match phase {
                    1 => PhaseStep::Embedding(UnlabeledBatch { full: &batch }),
                    2 => PhaseStep::Classification {
                        full: &batch,
                        labels: &batch_labels,
                    },
                    _ => PhaseStep::Joint {
                        full: &batch,
                        labels: &batch_labels,
                    },
                };
                let loss = run_step(&mut model, step, &noise)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { phase, epoch: e + 1, batch: b });
                }
                adam_step(model.params_mut(), state, s.learning_rate);
                let w = idx.len() as f64 / train_set.len() as f64;
                totals.embed += w * loss.embed;
                totals.classification += w * loss.classification;
                totals.joint += w * loss.joint;
            }

            let record = EpochRecord {
                epoch: e + 1,
                phase,
                embed_loss: totals.embed,
                classification_loss: totals.classification,
                joint_loss: totals.joint,
                train_accuracy: accuracy(&model, train_set, strategy, s.seed)?,
                val_accuracy: if val_set.is_empty() {
                    0.0
                } else {
                    accuracy(&model, val_set, strategy, s.seed)?
                },
            };
            if best.as_ref().is_none_or(|(_, acc, _)| record.val_accuracy > *acc) {
                best = Some((e + 1, record.val_accuracy, model.clone()));
            }
            if let Some(cb) = self.on_epoch.as_mut() {
                cb(&record, &model);
            }
            history.records.push(record);
        }
        model.params_mut().unfreeze_all();
        let best = match best {
            Some((epoch, _, mut b)) => {
                b.params_mut().unfreeze_all();
                (epoch, b)
            }
            None => (history.len(), model.clone()),
        };
        Ok(TrainOutcome { model, history, best })
    }
}

/// Runs the full schedule from scratch.
pub fn train(
    model: VaeModel,
    train_set: &MultiOmicsDataset,
    val_set: &MultiOmicsDataset,
    schedule: &PhaseSchedule,
) -> Result<(VaeModel, TrainHistory)> {
    let out = Trainer::new(schedule.clone()).run(model, train_set, val_set, TrainHistory::default())?;
    Ok((out.model, out.history))
}
