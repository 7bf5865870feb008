//! Mini-batch training loop with early stopping on validation Recall@20.

use crate::autograd::Tape;
use crate::error::{DreamError, Result};
use crate::eval::{evaluate, relevant_by_user, EvalReport};
use crate::ingest::Dataset;
use crate::model::{DreamModel, DualRepresentations, ModelConfig, PreparedData};
use crate::objectives::{total_loss, BatchTriples, LossBreakdown, LossWeights};
use crate::params::{adam_step, AdamConfig, ParamSet};
use crate::sampling::{sample_batch, TrainIndex};
use crate::tensor::Tensor2D;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// The validation metric cutoff used as the stopping indicator.
pub const STOP_K: usize = 20;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub max_epochs: usize,
    pub patience: usize,
    pub eval_ks: Vec<usize>,
    pub seed: u64,
    pub weights: LossWeights,
    pub model: ModelConfig,
    /// Items sampled (once, seeded) for the drift series.
    pub drift_sample: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            batch_size: 2048,
            adam: AdamConfig::default(),
            max_epochs: 1000,
            patience: 20,
            eval_ks: vec![10, 20],
            seed: 42,
            weights: LossWeights::default(),
            model: ModelConfig::default(),
            drift_sample: 512,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(DreamError::Config("batch_size must be >= 2".into()));
        }
        if self.patience < 1 {
            return Err(DreamError::Config("patience must be >= 1".into()));
        }
        if self.max_epochs < 1 {
            return Err(DreamError::Config("max_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Anything the loop can train: the full model or a baseline host.
pub trait TrainableModel {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn loss_on_batch(
        &self,
        tape: &mut Tape,
        prepared: &PreparedData,
        batch: &BatchTriples,
        weights: &LossWeights,
    ) -> Result<(crate::autograd::Var, LossBreakdown)>;
    fn representations(&self, prepared: &PreparedData) -> Result<DualRepresentations>;
}

impl TrainableModel for DreamModel {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn loss_on_batch(
        &self,
        tape: &mut Tape,
        prepared: &PreparedData,
        batch: &BatchTriples,
        weights: &LossWeights,
    ) -> Result<(crate::autograd::Var, LossBreakdown)> {
        let fwd = self.forward(tape, prepared)?;
        total_loss(
            tape,
            &fwd,
            prepared,
            batch,
            weights,
            self.config.normalize_alignment,
        )
    }

    fn representations(&self, prepared: &PreparedData) -> Result<DualRepresentations> {
        DreamModel::representations(self, prepared)
    }
}

/// One line of the per-step loss stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown,
}

/// One line of the per-epoch training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub val_recall: f64,
    pub best_so_far: f64,
    pub drift: Option<f32>,
    pub dual_cosine_users: Option<f32>,
    pub dual_cosine_items: Option<f32>,
    pub dual_cosine_pooled: Option<f32>,
    pub wall_ms: u64,
}

/// Everything a finished (or aborted) run leaves behind.
pub struct TrainOutcome {
    /// Values of the best checkpoint (model params already restored to it).
    pub best_values: Vec<Tensor2D>,
    pub best_epoch: usize,
    pub best_val_recall: f64,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepLog>,
    pub test_report: Option<EvalReport>,
    /// Set when training stopped on a numeric failure; the best checkpoint
    /// up to that point is preserved.
    pub aborted: Option<String>,
}

/// Run the training loop: per epoch, ceil(|train| / B) sampled batches, one
/// validation evaluation, early stopping after `patience` epochs without
/// improvement, final test evaluation with the best checkpoint restored.
pub fn train<M: TrainableModel>(
    model: &mut M,
    dataset: &Dataset,
    prepared: &PreparedData,
    config: &TrainerConfig,
) -> Result<TrainOutcome> {
    train_with_epoch_hook(model, dataset, prepared, config, |_, _| {})
}

/// Same loop, invoking `hook(epoch, representations)` after each epoch's
/// evaluation; used by diagnostics to record per-line series.
pub fn train_with_epoch_hook<M, F>(
    model: &mut M,
    dataset: &Dataset,
    prepared: &PreparedData,
    config: &TrainerConfig,
    mut hook: F,
) -> Result<TrainOutcome>
where
    M: TrainableModel,
    F: FnMut(usize, &DualRepresentations),
{
    config.validate()?;
    if dataset.val.is_empty() {
        return Err(DreamError::Config(
            "training requires a non-empty validation split".into(),
        ));
    }
    let index = TrainIndex::new(&dataset.train, dataset.num_users, dataset.num_items);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5ba7c4);
    let steps_per_epoch = dataset.train.len().div_ceil(config.batch_size);

    let val_relevant = relevant_by_user(&dataset.val, dataset.num_users);
    let train_items = dataset.train_items_by_user();
    let drift_sample = {
        let mut pick_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xd21f7);
        let n = dataset.num_items;
        let take = config.drift_sample.min(n);
        let mut all: Vec<usize> = (0..n).collect();
        for i in 0..take {
            let j = pick_rng.random_range(i..n);
            all.swap(i, j);
        }
        all.truncate(take);
        all.sort_unstable();
        all
    };
    let track_modal = config.model.modal.enabled;

    let mut best_values = model.params().values_snapshot();
    let mut best_val_recall = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut epochs_since_best = 0usize;
    let mut epochs: Vec<EpochLog> = Vec::new();
    let mut steps: Vec<StepLog> = Vec::new();
    let mut aborted = None;

    'outer: for epoch in 1..=config.max_epochs {
        let started = std::time::Instant::now();
        let mut loss_acc = LossBreakdown::default();
        for step in 1..=steps_per_epoch {
            let batch = sample_batch(&index, config.batch_size, &mut rng)?;
            let mut tape = Tape::new();
            let step_result = model
                .loss_on_batch(&mut tape, prepared, &batch, &config.weights)
                .and_then(|(loss, breakdown)| {
                    tape.backward(loss, model.params_mut())?;
                    adam_step(model.params_mut(), &config.adam)?;
                    Ok(breakdown)
                });
            match step_result {
                Ok(b) => {
                    steps.push(StepLog {
                        epoch,
                        step,
                        loss: b,
                    });
                    loss_acc.general += b.general;
                    loss_acc.intra_behavior += b.intra_behavior;
                    loss_acc.intra_modal += b.intra_modal;
                    loss_acc.inter += b.inter;
                    loss_acc.s3 += b.s3;
                    loss_acc.reg += b.reg;
                    loss_acc.total += b.total;
                }
                Err(e @ (DreamError::NonFinite { .. } | DreamError::NonFiniteGrad { .. })) => {
                    aborted = Some(e.to_string());
                    break 'outer;
                }
                Err(e) => return Err(e),
            }
        }
        let inv = 1.0 / steps_per_epoch as f64;
        for v in [
            &mut loss_acc.general,
            &mut loss_acc.intra_behavior,
            &mut loss_acc.intra_modal,
            &mut loss_acc.inter,
            &mut loss_acc.s3,
            &mut loss_acc.reg,
            &mut loss_acc.total,
        ] {
            *v *= inv;
        }

        let reprs = model.representations(prepared)?;
        let val_report = evaluate(
            &reprs.general_user,
            &reprs.general_item,
            &val_relevant,
            &train_items,
            &[STOP_K],
            true,
            "val",
        )?;
        let val_recall = val_report.recall_at(STOP_K).unwrap_or(0.0);

        let (drift, dc_users, dc_items, dc_pooled) = if track_modal {
            let drift = crate::diagnostics::modal_drift(
                &reprs.modal_item,
                &prepared.raw_fused_item,
                &drift_sample,
            )
            .ok();
            let du = crate::tensor::Tensor2D::mean_row_cosine(
                &reprs.behavior_user,
                &reprs.modal_user,
            )
            .ok();
            let di = crate::tensor::Tensor2D::mean_row_cosine(
                &reprs.behavior_item,
                &reprs.modal_item,
            )
            .ok();
            let pooled = match (du, di) {
                (Some(u), Some(i)) => {
                    let (m, n) = (reprs.behavior_user.rows as f32, reprs.behavior_item.rows as f32);
                    Some((u * m + i * n) / (m + n))
                }
                _ => None,
            };
            (drift, du, di, pooled)
        } else {
            (None, None, None, None)
        };

        hook(epoch, &reprs);

        let improved = val_recall > best_val_recall;
        if improved {
            best_val_recall = val_recall;
            best_epoch = epoch;
            best_values = model.params().values_snapshot();
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
        }
        epochs.push(EpochLog {
            epoch,
            loss: loss_acc,
            val_recall,
            best_so_far: best_val_recall,
            drift,
            dual_cosine_users: dc_users,
            dual_cosine_items: dc_items,
            dual_cosine_pooled: dc_pooled,
            wall_ms: started.elapsed().as_millis() as u64,
        });
        if epochs_since_best >= config.patience {
            break;
        }
    }

    model.params_mut().restore_values(&best_values);
    let test_report = if dataset.test.is_empty() {
        None
    } else {
        let reprs = model.representations(prepared)?;
        let test_relevant = relevant_by_user(&dataset.test, dataset.num_users);
        let mut report = evaluate(
            &reprs.general_user,
            &reprs.general_item,
            &test_relevant,
            &train_items,
            &config.eval_ks,
            true,
            "test",
        )?;
        report.epoch = Some(best_epoch);
        Some(report)
    };
    Ok(TrainOutcome {
        best_values,
        best_epoch,
        best_val_recall,
        epochs,
        steps,
        test_report,
        aborted,
    })
}

/// Which loss to check against finite differences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Bpr,
    IntraBehavior,
    IntraModal,
    Inter,
    S3,
    Total,
}

impl LossTerm {
    pub fn name(&self) -> &'static str {
        match self {
            LossTerm::Bpr => "bpr",
            LossTerm::IntraBehavior => "intra_behavior",
            LossTerm::IntraModal => "intra_modal",
            LossTerm::Inter => "inter",
            LossTerm::S3 => "s3",
            LossTerm::Total => "total",
        }
    }

    pub fn all() -> [LossTerm; 6] {
        [
            LossTerm::Bpr,
            LossTerm::IntraBehavior,
            LossTerm::IntraModal,
            LossTerm::Inter,
            LossTerm::S3,
            LossTerm::Total,
        ]
    }
}

fn term_scalar(
    model: &DreamModel,
    params: &ParamSet,
    prepared: &PreparedData,
    batch: &BatchTriples,
    weights: &LossWeights,
    term: LossTerm,
) -> Result<(Tape, crate::autograd::Var)> {
    use crate::objectives;
    let mut tape = Tape::new();
    let fwd = model.forward_with(&mut tape, params, prepared)?;
    let norm = model.config.normalize_alignment;
    let var = match term {
        LossTerm::Bpr => {
            objectives::bpr_loss(&mut tape, fwd.general_user, fwd.general_item, batch)?
        }
        LossTerm::IntraBehavior => {
            objectives::intra_behavior_term(&mut tape, &fwd, batch, weights.tau, norm)?
        }
        LossTerm::IntraModal => {
            objectives::intra_modal_term(&mut tape, &fwd, batch, weights.tau, norm)?
        }
        LossTerm::Inter => objectives::inter_term(&mut tape, &fwd, batch, weights.tau, norm)?,
        LossTerm::S3 => objectives::s3_term(&mut tape, &fwd, prepared, batch, norm)?,
        LossTerm::Total => {
            let (total, _) = total_loss(&mut tape, &fwd, prepared, batch, weights, norm)?;
            total
        }
    };
    Ok((tape, var))
}

/// Finite-difference check of one loss term's analytic gradients on the
/// current model parameters.
#[allow(clippy::too_many_arguments)]
pub fn grad_check_model(
    model: &mut DreamModel,
    prepared: &PreparedData,
    batch: &BatchTriples,
    weights: &LossWeights,
    term: LossTerm,
    h: f64,
    tol: f64,
    min_coords: usize,
    seed: u64,
) -> Result<crate::autograd::GradCheckReport> {
    model.params.zero_grads();
    let (tape, loss) = term_scalar(model, &model.params, prepared, batch, weights, term)?;
    tape.backward(loss, &mut model.params)?;
    let mut params = model.params.clone();
    let report = crate::autograd::grad_check(
        &mut params,
        |q| {
            let (t, l) = term_scalar(model, q, prepared, batch, weights, term)?;
            Ok(t.scalar(l))
        },
        h,
        tol,
        min_coords,
        seed,
    )?;
    model.params.zero_grads();
    Ok(report)
}

/// The ablation switches, one per study row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    NoFilterGate,
    NoRelationGraphs,
    NoText,
    NoImage,
    NoModalEncoders,
    NoS3,
    NoIntra,
    NoInter,
    NoAlignment,
}

impl Ablation {
    pub fn flag(&self) -> &'static str {
        match self {
            Ablation::NoFilterGate => "no-filter-gate",
            Ablation::NoRelationGraphs => "no-relation-graphs",
            Ablation::NoText => "no-text",
            Ablation::NoImage => "no-image",
            Ablation::NoModalEncoders => "no-modal-encoders",
            Ablation::NoS3 => "no-s3",
            Ablation::NoIntra => "no-intra",
            Ablation::NoInter => "no-inter",
            Ablation::NoAlignment => "no-alignment",
        }
    }

    pub fn from_flag(flag: &str) -> Option<Ablation> {
        [
            Ablation::NoFilterGate,
            Ablation::NoRelationGraphs,
            Ablation::NoText,
            Ablation::NoImage,
            Ablation::NoModalEncoders,
            Ablation::NoS3,
            Ablation::NoIntra,
            Ablation::NoInter,
            Ablation::NoAlignment,
        ]
        .into_iter()
        .find(|a| a.flag() == flag)
    }

    /// The standard study set: eight ablations (the combined no-alignment
    /// row is available separately).
    pub fn default_set() -> Vec<Ablation> {
        vec![
            Ablation::NoFilterGate,
            Ablation::NoRelationGraphs,
            Ablation::NoText,
            Ablation::NoImage,
            Ablation::NoModalEncoders,
            Ablation::NoS3,
            Ablation::NoIntra,
            Ablation::NoInter,
        ]
    }

    /// Apply the switch to a model/weights pair.
    pub fn apply(&self, model: &mut ModelConfig, weights: &mut LossWeights) {
        match self {
            Ablation::NoFilterGate => model.modal.use_filter_gate = false,
            Ablation::NoRelationGraphs => {
                model.modal.use_item_graph = false;
                model.modal.use_user_graph = false;
            }
            Ablation::NoText => model.modal.use_text = false,
            Ablation::NoImage => model.modal.use_vision = false,
            Ablation::NoModalEncoders => {
                // Removing both encoders reduces the model to the behavior
                // line with plain ranking loss.
                model.modal.enabled = false;
                weights.alpha = 0.0;
                weights.beta = 0.0;
                weights.gamma = 0.0;
            }
            Ablation::NoS3 => weights.gamma = 0.0,
            Ablation::NoIntra => weights.alpha = 0.0,
            Ablation::NoInter => weights.beta = 0.0,
            Ablation::NoAlignment => {
                weights.alpha = 0.0;
                weights.beta = 0.0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BehaviorLineConfig, DreamModel, ModalLineConfig};
    use crate::synthetic::{generate_dataset, SyntheticConfig};

    fn small_setup(seed: u64) -> (Dataset, PreparedData, TrainerConfig) {
        let ds = generate_dataset(
            &SyntheticConfig {
                users: 30,
                items: 24,
                blocks: 3,
                feature_dim: 8,
                interactions_per_user: 12,
                in_block_prob: 0.9,
                feature_noise: 0.2,
                seed,
            },
            (0.8, 0.1, 0.1),
            seed + 1,
        )
        .unwrap();
        let config = TrainerConfig {
            batch_size: 32,
            max_epochs: 4,
            patience: 2,
            eval_ks: vec![10, 20],
            seed,
            model: ModelConfig {
                behavior: BehaviorLineConfig { layers: 2, dim: 8 },
                modal: ModalLineConfig {
                    k: 4,
                    ..Default::default()
                },
                ..Default::default()
            },
            drift_sample: 16,
            ..Default::default()
        };
        let prepared = PreparedData::build(&ds, &config.model).unwrap();
        (ds, prepared, config)
    }

    #[test]
    fn same_seed_same_loss_log() {
        let (ds, prepared, config) = small_setup(11);
        let run = || {
            let mut model = DreamModel::new(&prepared, config.model, config.seed).unwrap();
            train(&mut model, &ds, &prepared, &config).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.epochs.len(), b.epochs.len());
        for (x, y) in a.epochs.iter().zip(&b.epochs) {
            assert_eq!(x.loss.total, y.loss.total);
            assert_eq!(x.val_recall, y.val_recall);
        }
        assert_eq!(a.best_epoch, b.best_epoch);
    }

    #[test]
    fn zero_lr_with_patience_one_stops_after_two_epochs() {
        let (ds, prepared, mut config) = small_setup(13);
        config.adam.lr = 0.0;
        config.patience = 1;
        config.max_epochs = 50;
        let mut model = DreamModel::new(&prepared, config.model, config.seed).unwrap();
        let out = train(&mut model, &ds, &prepared, &config).unwrap();
        // First epoch sets the best; the second cannot improve, so exactly
        // two evaluation epochs run.
        assert_eq!(out.epochs.len(), 2);
        assert_eq!(out.best_epoch, 1);
    }

    #[test]
    fn training_improves_validation_early() {
        let (ds, prepared, mut config) = small_setup(17);
        config.max_epochs = 6;
        config.patience = 6;
        let mut model = DreamModel::new(&prepared, config.model, config.seed).unwrap();
        let out = train(&mut model, &ds, &prepared, &config).unwrap();
        let first = out.epochs.first().unwrap().val_recall;
        let best = out.best_val_recall;
        assert!(
            best >= first,
            "validation recall should not degrade from epoch 1 ({first} -> {best})"
        );
        assert!(out.test_report.is_some());
        assert!(out.aborted.is_none());
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let ds = generate_dataset(
            &SyntheticConfig {
                users: 6,
                items: 8,
                blocks: 2,
                feature_dim: 5,
                interactions_per_user: 4,
                in_block_prob: 0.8,
                feature_noise: 0.3,
                seed: 23,
            },
            (1.0, 0.0, 0.0),
            24,
        )
        .unwrap();
        let config = ModelConfig {
            behavior: BehaviorLineConfig { layers: 2, dim: 4 },
            modal: ModalLineConfig {
                k: 3,
                ..Default::default()
            },
            ..Default::default()
        };
        let prepared = PreparedData::build(&ds, &config).unwrap();
        let mut model = DreamModel::new(&prepared, config, 31).unwrap();
        let batch = crate::objectives::BatchTriples {
            users: vec![0, 1, 2, 3],
            pos_items: vec![0, 1, 2, 3],
            neg_items: vec![4, 5, 6, 7],
        };
        let weights = LossWeights::default();
        let report = grad_check_model(
            &mut model,
            &prepared,
            &batch,
            &weights,
            LossTerm::Total,
            1e-3,
            1e-3,
            250,
            7,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err());
    }

    #[test]
    fn ablation_flags_round_trip() {
        for a in Ablation::default_set() {
            assert_eq!(Ablation::from_flag(a.flag()), Some(a));
        }
        assert_eq!(Ablation::default_set().len(), 8);
    }

    #[test]
    fn no_modal_encoders_zeroes_alignment() {
        let mut model = ModelConfig::default();
        let mut weights = LossWeights::default();
        Ablation::NoModalEncoders.apply(&mut model, &mut weights);
        assert!(!model.modal.enabled);
        assert_eq!(weights.alpha, 0.0);
        assert_eq!(weights.beta, 0.0);
        assert_eq!(weights.gamma, 0.0);
    }
}
