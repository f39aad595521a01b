//! Sequential, deterministic mini-batch training.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::HumanSceneTransformer;
use crate::numerics::{rng_from_seed, AdamConfig, AdamState, Graph, ParamGrads, Rng};
use crate::objective::{min_nll_loss_graph, LossBreakdown, MetricAccumulator, MetricReport, ModeSelection};
use crate::scene::Scene;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Final learning rate as a fraction of the initial one (cosine decay).
    pub final_lr_fraction: f64,
    /// Linear warm-up length in steps.
    pub warmup_steps: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    /// Steps between held-out evaluations; 0 disables them.
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 4,
            learning_rate: 1e-3,
            final_lr_fraction: 0.05,
            warmup_steps: 50,
            clip_norm: 5.0,
            seed: 0,
            eval_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::Config("final learning-rate fraction outside [0, 1]".into()));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::Config("clip norm must be non-negative".into()));
        }
        Ok(())
    }

    /// Learning rate for 0-based step `step`.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let base = self.learning_rate;
        if step < self.warmup_steps {
            return base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let cosine = 0.5 * (1.0 + crate::math::cos(core::f64::consts::PI * progress));
        base * (self.final_lr_fraction + (1.0 - self.final_lr_fraction) * cosine)
    }
}

/// Loss and parameter gradients of one scene.
pub fn scene_gradients(model: &HumanSceneTransformer, scene: &Scene, rng: Option<&mut Rng>) -> Result<(LossBreakdown, ParamGrads)> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, scene, rng)?;
    let loss = min_nll_loss_graph(&mut g, out.mu, out.sigma, out.logits, &scene.ground_truth)?;
    let grads = g.backward(loss.total)?;
    Ok((loss.breakdown, g.param_grads(&grads, &model.params)))
}

/// Summary of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub step: usize,
    /// Mean total loss over the batch.
    pub loss: f64,
    pub nll: f64,
    pub mode_ce: f64,
    pub grad_norm: f64,
    pub learning_rate: f64,
}

/// A training step failed on a specific scene.
#[derive(Clone, Debug, PartialEq)]
pub struct StepFailure {
    pub step: usize,
    pub scene_index: usize,
    pub scene_id: String,
    pub window_start: i64,
    pub error: Error,
}

pub struct Trainer {
    pub model: HumanSceneTransformer,
    pub config: TrainConfig,
    pub adam: AdamState,
    rng: Rng,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
    /// How often each mode was selected by the loss.
    pub mode_usage: Vec<usize>,
    /// Scene indices of the most recent batch.
    pub last_batch: Vec<usize>,
}

impl Trainer {
    pub fn new(model: HumanSceneTransformer, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(
            &model.params,
            AdamConfig {
                learning_rate: config.learning_rate,
                ..AdamConfig::default()
            },
        );
        let rng = rng_from_seed(config.seed ^ 0x7472_6169_6e00);
        let modes = model.config.modes;
        Ok(Trainer {
            model,
            config,
            adam,
            rng,
            order: Vec::new(),
            cursor: 0,
            step: 0,
            mode_usage: vec![0; modes],
            last_batch: Vec::new(),
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Draws the next batch of scene indices; each epoch is a fresh shuffle.
    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.config.batch_size);
        while out.len() < self.config.batch_size.min(n) {
            if self.cursor >= self.order.len() {
                self.order = (0..n).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    /// One Adam step on the next batch of `scenes`.
    pub fn train_step(&mut self, scenes: &[Scene]) -> core::result::Result<StepStats, StepFailure> {
        if scenes.is_empty() {
            return Err(StepFailure {
                step: self.step,
                scene_index: 0,
                scene_id: String::new(),
                window_start: 0,
                error: Error::InvalidArgument("no training scenes".into()),
            });
        }
        let batch = self.next_batch(scenes.len());
        self.last_batch.clone_from(&batch);
        let mut total = ParamGrads::zeros_like(&self.model.params);
        let (mut loss, mut nll, mut ce) = (0.0, 0.0, 0.0);
        for &i in &batch {
            let fail = |error| StepFailure {
                step: self.step,
                scene_index: i,
                scene_id: scenes[i].scene_id.clone(),
                window_start: scenes[i].window_start,
                error,
            };
            let (b, grads) = scene_gradients(&self.model, &scenes[i], Some(&mut self.rng)).map_err(fail)?;
            if !grads.all_finite() {
                return Err(fail(Error::NonFinite("gradient")));
            }
            total.add_assign(&grads);
            loss += b.total;
            nll += b.nll;
            ce += b.mode_ce;
            self.mode_usage[b.best_mode] += 1;
        }
        let k = batch.len() as f64;
        total.scale(1.0 / k);
        let grad_norm = match self.config.clip_norm > 0.0 {
            true => total.clip_global_norm(self.config.clip_norm),
            false => total.global_norm(),
        };
        let lr = self.config.learning_rate_at(self.step);
        self.adam.config.learning_rate = lr;
        self.model.params.zero_grad();
        self.model.params.accumulate_grads(&total);
        self.adam.step(&mut self.model.params);
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            loss: loss / k,
            nll: nll / k,
            mode_ce: ce / k,
            grad_norm,
            learning_rate: lr,
        })
    }
}

/// Dataset metrics of a model, scenes taken in order.
pub fn evaluate(model: &HumanSceneTransformer, scenes: &[Scene], selection: ModeSelection) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new(model.config.period, selection);
    for s in scenes {
        let pred = model.predict(s)?;
        acc.add(&pred, &s.ground_truth)?;
    }
    acc.finish()
}
