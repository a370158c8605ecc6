//! Training loop (Euclidean density loss + Adam) and MAE/MSE evaluation.
//!
//! Counting convention: MAE is the mean absolute per-scene count error and
//! "MSE" is the ROOT of the mean squared count error, which keeps both
//! metrics on the count scale. The rooted form is what makes MAE/MSE pairs
//! comparable in this literature despite the name.

use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::data::{make_batches, Scene};
use crate::density::KernelSpec;
use crate::error::{Error, Result};
use crate::model::{build, CCNNConfig, Model};
use crate::tape::{adam_step_layers, flatten_params};
use crate::tensor::{euclidean_loss, euclidean_loss_backward};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
    pub kernel: KernelSpec,
    pub model: CCNNConfig,
    /// Evaluate on the validation set every this many epochs (0 = never).
    pub checkpoint_cadence: usize,
    /// Where the CLI writes line-delimited JSON loss/metric records.
    #[serde(default)]
    pub log_path: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 8,
            lr: 1e-5,
            seed: 0,
            kernel: KernelSpec::default(),
            model: CCNNConfig::default(),
            checkpoint_cadence: 10,
            log_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig("lr must be > 0".into()));
        }
        self.kernel.validate()?;
        self.model.validate()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneScore {
    pub id: String,
    pub predicted_count: f64,
    pub gt_count: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub mse: f64,
    pub n: usize,
    pub per_scene: Vec<SceneScore>,
}

/// Incremental trainer so callers can interleave epochs with their own
/// stopping checks.
pub struct Trainer {
    pub model: Model,
    pub state: AdamState,
    pub cfg: TrainConfig,
    pub epoch: usize,
    pub global_step: usize,
    pub history: Vec<LossRecord>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = build(&cfg.model, cfg.seed)?;
        let n_params = flatten_params(&model.layers).len();
        let state = AdamState::new(n_params, cfg.lr);
        Ok(Trainer {
            model,
            state,
            cfg,
            epoch: 0,
            global_step: 0,
            history: Vec::new(),
        })
    }

    /// One pass over the training scenes; returns the mean batch loss.
    pub fn run_epoch(&mut self, scenes: &[Scene]) -> Result<f32> {
        if scenes.is_empty() {
            return Err(Error::invalid_argument("empty training set"));
        }
        self.epoch += 1;
        let factor = self.cfg.model.downsampling_factor();
        let shuffle_seed = self.cfg.seed.wrapping_add(self.epoch as u64);
        let batches = make_batches(
            scenes,
            self.cfg.batch_size,
            factor,
            &self.cfg.kernel,
            shuffle_seed,
        )?;
        let mut total = 0.0f64;
        for batch in &batches {
            self.global_step += 1;
            let (tape, out) = self.model.forward_tape(batch.images.clone())?;
            let pred = tape.value(out);
            let loss = euclidean_loss(pred, &batch.gt_density)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch: self.epoch,
                    step: self.global_step,
                });
            }
            let seed = euclidean_loss_backward(pred, &batch.gt_density);
            let grads = tape.backward(out, seed)?;
            drop(tape);
            adam_step_layers(&mut self.model.layers, &grads, &mut self.state)?;
            total += loss as f64;
            self.history.push(LossRecord {
                epoch: self.epoch,
                step: self.global_step,
                loss,
            });
        }
        Ok((total / batches.len() as f64) as f32)
    }
}

pub struct TrainOutput {
    pub model: Model,
    pub loss_history: Vec<LossRecord>,
    /// Validation metrics at each checkpoint cadence: (epoch, metrics).
    pub val_metrics: Vec<(usize, Metrics)>,
}

/// Full training run per the config. Deterministic per seed.
pub fn train(train_scenes: &[Scene], val_scenes: &[Scene], cfg: &TrainConfig) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut val_metrics = Vec::new();
    for _ in 0..cfg.epochs {
        trainer.run_epoch(train_scenes)?;
        let at_cadence =
            cfg.checkpoint_cadence > 0 && trainer.epoch % cfg.checkpoint_cadence == 0;
        if at_cadence && !val_scenes.is_empty() {
            val_metrics.push((trainer.epoch, evaluate(&trainer.model, val_scenes)?));
        }
    }
    Ok(TrainOutput {
        model: trainer.model,
        loss_history: trainer.history,
        val_metrics,
    })
}

/// Predicted count for one scene: the sum of the predicted density map.
pub fn predicted_count(model: &Model, scene: &Scene) -> Result<f64> {
    let out = model.forward(&scene.image)?;
    Ok(out.data().iter().map(|&v| v as f64).sum())
}

/// Count-level MAE and (rooted) MSE over scenes, evaluated one scene at a
/// time at full cropped resolution. Independent of scene order.
pub fn evaluate(model: &Model, scenes: &[Scene]) -> Result<Metrics> {
    if scenes.is_empty() {
        return Err(Error::invalid_argument("evaluate: no scenes"));
    }
    let per_scene: Vec<SceneScore> = scenes
        .iter()
        .map(|s| {
            Ok(SceneScore {
                id: s.id.clone(),
                predicted_count: predicted_count(model, s)?,
                gt_count: s.head_count() as f64,
            })
        })
        .collect::<Result<_>>()?;
    Ok(metrics_from_scores(per_scene))
}

/// Count metrics from per-scene scores: MAE and rooted MSE (the square root
/// of the mean squared count error), sorted by scene id.
pub fn metrics_from_scores(mut per_scene: Vec<SceneScore>) -> Metrics {
    per_scene.sort_by(|a, b| a.id.cmp(&b.id));
    let n = per_scene.len();
    let mut abs_sum = 0.0f64;
    let mut sq_sum = 0.0f64;
    for s in &per_scene {
        let e = s.predicted_count - s.gt_count;
        abs_sum += e.abs();
        sq_sum += e * e;
    }
    let mae = abs_sum / n as f64;
    let mse = (sq_sum / n as f64).sqrt();
    // power-mean inequality; holds for every evaluation
    assert!(mae <= mse + 1e-9, "MAE {} > MSE {}", mae, mse);
    Metrics {
        mae,
        mse,
        n,
        per_scene,
    }
}

/// Compact JSON record for logs: `{split, mae, mse, n}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub split: String,
    pub mae: f64,
    pub mse: f64,
    pub n: usize,
}

impl MetricsRecord {
    pub fn new(split: &str, m: &Metrics) -> Self {
        MetricsRecord {
            split: split.into(),
            mae: m.mae,
            mse: m.mse,
            n: m.n,
        }
    }
}
