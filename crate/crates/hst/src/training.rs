//! Training loop with loss-curve logging and failure dumps.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Result};
use hst_core::model::HumanSceneTransformer;
use hst_core::objective::{MetricReport, ModeSelection};
use hst_core::scene::Scene;
use hst_core::train::{evaluate, StepStats, TrainConfig, Trainer};
use serde_json::{json, Value};

use crate::fsio;

pub struct TrainOptions {
    /// Print progress to stderr every this many steps; 0 is silent.
    pub log_every: usize,
    /// Where a diagnostic dump goes if a step produces a non-finite value.
    pub dump_path: Option<PathBuf>,
}

pub struct TrainOutcome {
    pub model: HumanSceneTransformer,
    pub curve: Vec<CurvePoint>,
    pub mode_usage: Vec<usize>,
}

pub struct CurvePoint {
    pub stats: StepStats,
    /// Held-out minADE when an evaluation ran after this step.
    pub eval_min_ade: Option<f64>,
}

/// A window as JSON, for diagnostics.
pub fn scene_json(s: &Scene) -> Value {
    let agents: Vec<Value> = s
        .agents
        .iter()
        .enumerate()
        .map(|(i, a)| {
            json!({
                "agent_id": s.agent_ids[i],
                "position": a.position,
                "position_valid": a.position_valid,
                "keypoints_valid": a.keypoints_valid,
                "head": a.head,
                "head_valid": a.head_valid,
                "future": s.ground_truth.position[i],
                "future_valid": s.ground_truth.valid[i],
            })
        })
        .collect();
    json!({
        "scene_id": s.scene_id,
        "window_start": s.window_start,
        "offset": s.offset,
        "agents": agents,
    })
}

fn dump(path: Option<&Path>, step: usize, reason: &str, scenes: &[&Scene]) -> Result<()> {
    let Some(path) = path else { return Ok(()) };
    let v = json!({
        "step": step,
        "reason": reason,
        "scenes": scenes.iter().map(|s| scene_json(s)).collect::<Vec<_>>(),
    });
    fsio::write_atomic_str(path, &(serde_json::to_string_pretty(&v)? + "\n"))?;
    eprintln!("wrote diagnostic dump to {}", path.display());
    Ok(())
}

/// Runs `config.steps` optimizer steps. Held-out evaluation runs every
/// `config.eval_interval` steps when `test` is non-empty.
pub fn train(
    model: HumanSceneTransformer,
    config: TrainConfig,
    train: &[Scene],
    test: &[Scene],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        bail!("no training windows");
    }
    let steps = config.steps;
    let interval = config.eval_interval;
    let mut trainer = Trainer::new(model, config)?;
    let mut curve = Vec::with_capacity(steps);
    let start = Instant::now();
    for _ in 0..steps {
        let stats = match trainer.train_step(train) {
            Ok(s) => s,
            Err(f) => {
                let reason = format!("{} (scene {} from frame {})", f.error, f.scene_id, f.window_start);
                dump(opts.dump_path.as_deref(), f.step, &reason, &[&train[f.scene_index]])?;
                bail!("training step {} failed: {reason}", f.step);
            }
        };
        if !stats.loss.is_finite() {
            let batch: Vec<&Scene> = trainer.last_batch.iter().map(|&i| &train[i]).collect();
            dump(opts.dump_path.as_deref(), stats.step, "non-finite loss", &batch)?;
            bail!("non-finite loss at step {}", stats.step);
        }
        let eval_min_ade = match interval > 0 && stats.step % interval == 0 && !test.is_empty() {
            true => Some(evaluate(&trainer.model, test, ModeSelection::PerAgent)?.min_ade),
            false => None,
        };
        if opts.log_every > 0 && (stats.step % opts.log_every == 0 || stats.step == steps) {
            let extra = eval_min_ade.map_or(String::new(), |v| format!(" test minADE {v:.4}"));
            eprintln!(
                "step {:>5} loss {:>9.3} nll {:>9.3} ce {:.3} |g| {:>8.2} lr {:.2e}{extra} [{:.0}s]",
                stats.step,
                stats.loss,
                stats.nll,
                stats.mode_ce,
                stats.grad_norm,
                stats.learning_rate,
                start.elapsed().as_secs_f64()
            );
        }
        curve.push(CurvePoint { stats, eval_min_ade });
    }
    Ok(TrainOutcome {
        mode_usage: trainer.mode_usage.clone(),
        model: trainer.model,
        curve,
    })
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("step,loss,nll,mode_ce,grad_norm,learning_rate,eval_min_ade\n");
    for p in curve {
        let s = &p.stats;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.step,
            s.loss,
            s.nll,
            s.mode_ce,
            s.grad_norm,
            s.learning_rate,
            p.eval_min_ade.map_or(String::new(), |v| v.to_string())
        ));
    }
    out
}

pub fn mode_usage_text(usage: &[usize]) -> String {
    let total: usize = usage.iter().sum::<usize>().max(1);
    let mut out = String::from("mode,count,share\n");
    for (m, &c) in usage.iter().enumerate() {
        out.push_str(&format!("{m},{c},{:.4}\n", c as f64 / total as f64));
    }
    out
}

/// Prints the mode-usage histogram as bars.
pub fn print_mode_usage(usage: &[usize]) {
    let max = usage.iter().copied().max().unwrap_or(0).max(1);
    eprintln!("loss-selected mode usage:");
    for (m, &c) in usage.iter().enumerate() {
        eprintln!("  mode {m:>2} {:>7} {}", c, "#".repeat(c * 40 / max));
    }
}

pub fn report_value(r: &MetricReport) -> Value {
    json!({
        "min_ade": r.min_ade,
        "min_fde": r.min_fde,
        "ml_ade": r.ml_ade,
        "nll": r.nll,
        "min_ade_2s": r.min_ade_2s,
        "min_ade_4s": r.min_ade_4s,
        "count": r.count,
    })
}
