//! Nadam training with a restarting cosine schedule and best-dev selection.

pub mod checkpoint;
pub mod optimizer;

use std::f64::consts::PI;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optimizer::{nadam_update, NadamConfig, OptimizerState};

use crate::data::{make_batches, Sentence};
use crate::error::{GtiError, Result};
use crate::eval::{task_report, EvalReport};
use crate::layers::Mode;
use crate::model::{GtiModel, Prediction};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha0: f64,
    /// Schedule length `T` in epochs.
    pub total_epochs: usize,
    /// Number of cosine cycles `M` within `T`.
    pub cycles: usize,
    pub epoch_cap: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub dropout: f64,
    /// Global-norm gradient clipping threshold; off when `None`.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha0: 0.001,
            total_epochs: 270,
            cycles: 9,
            epoch_cap: 70,
            batch_size: 10,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 1,
            dropout: 0.25,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub const DEFAULT_CLIP_NORM: f64 = 5.0;

    pub fn validate(&self) -> Result<()> {
        if self.cycles == 0 || !self.total_epochs.is_multiple_of(self.cycles) {
            return Err(GtiError::arg(format!(
                "T = {} must be a positive multiple of M = {}",
                self.total_epochs, self.cycles
            )));
        }
        if self.epoch_cap > self.total_epochs {
            return Err(GtiError::arg(format!(
                "epoch cap {} exceeds schedule length {}",
                self.epoch_cap, self.total_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(GtiError::arg("batch size must be positive"));
        }
        if !(self.alpha0 > 0.0) || self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(GtiError::arg("learning rate and clip norm must be positive"));
        }
        Ok(())
    }

    pub fn cycle_length(&self) -> f64 {
        (self.total_epochs / self.cycles) as f64
    }

    pub fn nadam(&self) -> NadamConfig {
        NadamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// `α₀/2 · (1 + cos(π·p))` with phase `p = (epoch mod C)/C`, `C = T/M`.
pub fn learning_rate(epoch: f64, cfg: &TrainConfig) -> f64 {
    let c = cfg.cycle_length();
    let phase = epoch.rem_euclid(c) / c;
    cfg.alpha0 / 2.0 * (1.0 + (PI * phase).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean joint loss per sentence.
    pub loss: f64,
    pub steps: usize,
    pub dev_score: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_dev: Option<f64>,
    pub stopped_early: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

pub trait Callback {
    fn on_epoch_end(&mut self, model: &GtiModel, record: &EpochRecord) -> Result<Control>;
}

impl<F> Callback for F
where
    F: FnMut(&GtiModel, &EpochRecord) -> Result<Control>,
{
    fn on_epoch_end(&mut self, model: &GtiModel, record: &EpochRecord) -> Result<Control> {
        self(model, record)
    }
}

/// Optimizer, rng and epoch counter: everything besides the model that a
/// resumed run needs.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub optimizer: OptimizerState,
    pub rng: ChaCha8Rng,
    /// Number of completed epochs.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: &GtiModel) -> Result<Self> {
        config.validate()?;
        if config.dropout != model.config.dropout_rate {
            return Err(GtiError::ConfigMismatch(format!(
                "trainer dropout {} vs model dropout {}",
                config.dropout, model.config.dropout_rate
            )));
        }
        Ok(Trainer {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            optimizer: OptimizerState::new(&model.params),
            config,
            epoch: 0,
        })
    }

    /// One optimizer step on the mean joint loss of `batch`.
    pub fn step(&mut self, model: &mut GtiModel, batch: &[&Sentence], lr: f64) -> Result<f64> {
        let (loss, mut grads) = model.batch_loss_and_grads(batch, Mode::Train, &mut self.rng)?;
        if !loss.is_finite() {
            return Err(GtiError::Numerical(format!(
                "joint loss is {loss} at step {}",
                self.optimizer.t + 1
            )));
        }
        if let Some(c) = self.config.clip_norm {
            let norm = grads.global_norm();
            if norm > c {
                grads.scale(c / norm);
            }
        }
        nadam_update(&mut model.params, &grads, &mut self.optimizer, lr, &self.config.nadam())?;
        Ok(loss)
    }

    /// Shuffles, batches and steps once over `train`.
    pub fn train_epoch(&mut self, model: &mut GtiModel, train: &[Sentence]) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(GtiError::arg("no training sentences"));
        }
        let lr = learning_rate(self.epoch as f64, &self.config);
        let batches = make_batches(train, self.config.batch_size, &mut self.rng)?;
        let mut total = 0.0;
        for b in &batches {
            let refs: Vec<&Sentence> = b.indices.iter().map(|&i| &train[i]).collect();
            total += self.step(model, &refs, lr)? * refs.len() as f64;
        }
        let record = EpochRecord {
            epoch: self.epoch,
            lr,
            loss: total / train.len() as f64,
            steps: batches.len(),
            dev_score: None,
        };
        self.epoch += 1;
        Ok(record)
    }
}

/// Trains until the epoch cap or a callback asks to stop. With dev data the
/// best-scoring parameters are restored at the end; ties keep the earlier
/// epoch.
pub fn fit(
    model: &mut GtiModel,
    trainer: &mut Trainer,
    train: &[Sentence],
    dev: &[Sentence],
    callbacks: &mut [&mut dyn Callback],
) -> Result<TrainLog> {
    let mut log = TrainLog::default();
    let mut best: Option<Vec<Tensor>> = None;
    while trainer.epoch < trainer.config.epoch_cap {
        let mut rec = trainer.train_epoch(model, train)?;
        if !dev.is_empty() {
            let score = evaluate(model, dev)?.main_score(model);
            rec.dev_score = Some(score);
            if log.best_dev.is_none_or(|b| score > b) {
                log.best_dev = Some(score);
                log.best_epoch = Some(rec.epoch);
                best = Some(model.params.iter().map(|(_, p)| p.value.clone()).collect());
            }
        }
        info!(
            "epoch {} lr {:.6} loss {:.4} dev {}",
            rec.epoch,
            rec.lr,
            rec.loss,
            rec.dev_score.map_or("-".to_string(), |s| format!("{s:.4}"))
        );
        let mut stop = false;
        for cb in callbacks.iter_mut() {
            stop |= cb.on_epoch_end(model, &rec)? == Control::Stop;
        }
        log.epochs.push(rec);
        if stop {
            log.stopped_early = true;
            break;
        }
    }
    if let Some(values) = best {
        let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
        for (id, v) in ids.into_iter().zip(values) {
            *model.params.value_mut(id) = v;
        }
    }
    Ok(log)
}

/// Reports for the main task and every auxiliary head, in model order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelScores {
    pub main: EvalReport,
    pub aux: Vec<EvalReport>,
}

impl ModelScores {
    pub fn main_score(&self, model: &GtiModel) -> f64 {
        self.main.score(model.config.main.span)
    }
}

pub fn evaluate(model: &GtiModel, sentences: &[Sentence]) -> Result<ModelScores> {
    let preds = sentences.iter().map(|s| model.predict(s)).collect::<Result<Vec<_>>>()?;
    score_predictions(model, sentences, &preds)
}

/// Scores predictions against the gold tags carried by `sentences`.
pub fn score_predictions(model: &GtiModel, sentences: &[Sentence], preds: &[Prediction]) -> Result<ModelScores> {
    let c = &model.config;
    let gold_main = sentences
        .iter()
        .map(|s| s.main.as_ref().map(|t| c.main.decode(t)))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| GtiError::arg("evaluation needs gold main-task tags"))?;
    let pred_main: Vec<_> = preds.iter().map(|p| c.main.decode(&p.main)).collect();
    let main = task_report(&gold_main, &pred_main, c.main.span)?;
    let mut aux = Vec::new();
    for k in 0..model.aux_heads.len() {
        let task = &c.aux[k];
        let gold: Option<Vec<_>> = sentences
            .iter()
            .map(|s| s.aux.get(k).and_then(Option::as_ref).map(|t| task.decode(t)))
            .collect();
        let Some(gold) = gold else { break };
        let pred: Vec<_> = preds.iter().map(|p| task.decode(&p.aux[k])).collect();
        aux.push(task_report(&gold, &pred, task.span)?);
    }
    Ok(ModelScores { main, aux })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::model::Variant;
    use crate::synthetic::ToyTask;

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(learning_rate(0.0, &cfg), 0.001);
        assert_eq!(learning_rate(15.0, &cfg), 0.0005);
        assert_eq!(learning_rate(30.0, &cfg), 0.001);
        assert_eq!(learning_rate(60.0, &cfg), 0.001);
        assert_eq!(learning_rate(69.0, &cfg), 0.0005 * (1.0 + (PI * (9.0 / 30.0)).cos()));
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            cycles: 7,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            epoch_cap: 271,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn schedule_bounds(epoch in 0.0f64..270.0) {
            let cfg = TrainConfig::default();
            let lr = learning_rate(epoch, &cfg);
            prop_assert!((0.0..=cfg.alpha0).contains(&lr));
        }

        #[test]
        fn schedule_is_continuous_within_a_cycle(cycle in 0usize..9, x in 0.0f64..29.99) {
            let cfg = TrainConfig::default();
            let e = cycle as f64 * 30.0 + x;
            let d = (learning_rate(e, &cfg) - learning_rate(e + 1e-3, &cfg)).abs();
            prop_assert!(d < 1e-6);
            prop_assert_eq!(learning_rate(cycle as f64 * 30.0, &cfg), cfg.alpha0);
        }
    }

    fn setup(variant: Variant, n: usize) -> (ToyTask, GtiModel) {
        let task = ToyTask::new(n, 3, "ner", &["chunk", "pos"]).unwrap();
        let m = GtiModel::new(task.config(variant, 6), 5, None).unwrap();
        (task, m)
    }

    #[test]
    fn one_epoch_one_batch_is_one_step() {
        let (task, mut m) = setup(Variant::Gti, 4);
        let before: Vec<Tensor> = m.params.iter().map(|(_, p)| p.value.clone()).collect();
        let cfg = TrainConfig {
            epoch_cap: 1,
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(cfg, &m).unwrap();
        let log = fit(&mut m, &mut tr, &task.sentences, &[], &mut []).unwrap();
        assert_eq!(log.epochs.len(), 1);
        assert_eq!(log.epochs[0].steps, 1);
        assert_eq!(tr.optimizer.t, 1);
        for ((_, p), b) in m.params.iter().zip(&before) {
            assert_eq!(p.trainable(), &p.value != b, "{}", p.name);
        }
    }

    #[test]
    fn word_table_checksum_is_constant() {
        let (task, mut m) = setup(Variant::Gti, 6);
        let sum = |m: &GtiModel| {
            m.params
                .value(m.word_table)
                .data()
                .iter()
                .map(|v| v.to_bits())
                .fold(0u64, u64::wrapping_add)
        };
        let before = sum(&m);
        let cfg = TrainConfig {
            epoch_cap: 3,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(cfg, &m).unwrap();
        fit(&mut m, &mut tr, &task.sentences, &[], &mut []).unwrap();
        assert_eq!(sum(&m), before);
    }

    #[test]
    fn log_records_scheduled_rates() {
        let (task, mut m) = setup(Variant::Vanilla, 3);
        let cfg = TrainConfig {
            epoch_cap: 4,
            total_epochs: 8,
            cycles: 2,
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(cfg.clone(), &m).unwrap();
        let log = fit(&mut m, &mut tr, &task.sentences, &task.sentences, &mut []).unwrap();
        for r in &log.epochs {
            assert_eq!(r.lr, learning_rate(r.epoch as f64, &cfg));
            assert!(r.dev_score.is_some());
        }
        assert!(log.best_epoch.is_some());
    }

    #[test]
    fn callback_can_stop() {
        let (task, mut m) = setup(Variant::Single1, 3);
        let mut tr = Trainer::new(TrainConfig::default(), &m).unwrap();
        let mut seen = 0;
        let mut cb = |_: &GtiModel, r: &EpochRecord| -> Result<Control> {
            seen += 1;
            Ok(if r.epoch == 1 { Control::Stop } else { Control::Continue })
        };
        let log = fit(&mut m, &mut tr, &task.sentences, &[], &mut [&mut cb]).unwrap();
        assert!(log.stopped_early);
        assert_eq!(log.epochs.len(), 2);
        assert_eq!(seen, 2);
    }

    #[test]
    fn fixed_batch_descent() {
        let (task, mut m) = setup(Variant::Gti, 4);
        m.config.dropout_rate = 0.0;
        let cfg = TrainConfig {
            dropout: 0.0,
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(cfg, &m).unwrap();
        let batch: Vec<&Sentence> = task.sentences.iter().collect();
        let losses: Vec<f64> = (0..101).map(|_| tr.step(&mut m, &batch, 1e-4).unwrap()).collect();
        let non_increasing = losses.windows(2).filter(|w| w[1] <= w[0]).count();
        assert!(non_increasing >= 95, "{non_increasing}/100");
    }

    #[test]
    fn identical_seeds_identical_logs() {
        let run = || {
            let (task, mut m) = setup(Variant::Gti, 6);
            let cfg = TrainConfig {
                epoch_cap: 3,
                batch_size: 4,
                ..TrainConfig::default()
            };
            let mut tr = Trainer::new(cfg, &m).unwrap();
            fit(&mut m, &mut tr, &task.sentences, &task.sentences, &mut []).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clipping_shrinks_the_first_update() {
        // a tiny clip norm pushes sqrt(v) below eps, damping the step
        let (task, m0) = setup(Variant::Gti, 2);
        let batch: Vec<&Sentence> = task.sentences.iter().collect();
        let delta = |clip: Option<f64>| {
            let mut m = m0.clone();
            let cfg = TrainConfig {
                clip_norm: clip,
                ..TrainConfig::default()
            };
            let mut tr = Trainer::new(cfg, &m).unwrap();
            tr.step(&mut m, &batch, 1e-3).unwrap();
            m.params
                .iter()
                .zip(m0.params.iter())
                .map(|((_, a), (_, b))| a.value.max_abs_diff(&b.value))
                .fold(0.0, f64::max)
        };
        assert!(delta(Some(1e-12)) < 0.01 * delta(None));
    }

    #[test]
    fn dropout_must_agree() {
        let (_, m) = setup(Variant::Gti, 2);
        let cfg = TrainConfig {
            dropout: 0.5,
            ..TrainConfig::default()
        };
        assert!(matches!(Trainer::new(cfg, &m), Err(GtiError::ConfigMismatch(_))));
    }
}
