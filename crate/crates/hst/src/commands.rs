//! The subcommands, as library functions so they can be driven from tests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hst_core::model::{GmmPrediction, HumanSceneTransformer, ModelConfig};
use hst_core::objective::{MetricReport, ModeSelection};
use hst_core::pose::{fit_pose, head_orientation, Camera, FitOptions, PosePrior, Skeleton3D};
use hst_core::scene::Scene;
use hst_core::synth::{generate, SynthConfig};
use serde_json::{json, Value};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::eval::{self, Evaluation, Predictor};
use crate::fsio;
use crate::pipeline;
use crate::plot;
use crate::tracks::{self, RawRecord};
use crate::training::{self, TrainOptions};

pub fn cmd_synth(synth: &SynthConfig, scenes: usize, output: &Path) -> Result<usize> {
    let ds = generate(synth, scenes)?;
    tracks::write_dataset(output, &ds)?;
    Ok(ds.num_frames())
}

#[derive(Debug, Default, PartialEq)]
pub struct FitSummary {
    pub fitted: usize,
    pub failed: usize,
    pub skipped: usize,
}

/// Lifts every record's `kp2` detections to 3D joints and head yaw. The
/// fit starts from the neutral skeleton standing at the record's position,
/// facing its `head` yaw when given and the camera otherwise.
pub fn cmd_fit_pose(input: &Path, camera: &Camera, output: &Path, opts: &FitOptions) -> Result<FitSummary> {
    let parsed = tracks::read_tracks(input)?;
    for w in &parsed.warnings {
        eprintln!("warning: {}: {w}", input.display());
    }
    let prior = PosePrior::default();
    let reference = Skeleton3D::reference();
    let eye = camera.point_to_world([0.0; 3]);
    let mut summary = FitSummary::default();
    let mut out = Vec::with_capacity(parsed.records.len());
    for raw in parsed.records {
        let mut r = raw.record;
        let Some(k2) = raw.keypoints_2d else {
            summary.skipped += 1;
            out.push(RawRecord { record: r, keypoints_2d: None });
            continue;
        };
        let [x, y] = r.position;
        let yaw = r.head.unwrap_or_else(|| (eye[1] - y).atan2(eye[0] - x));
        let init = reference.rotated_z(yaw).translated([x, y, 0.0]);
        match fit_pose(&k2, camera, &prior, &init, opts).and_then(|f| Ok((head_orientation(&f.skeleton)?, f))) {
            Ok((head, fit)) => {
                r.keypoints = Some(fit.skeleton.to_flat());
                r.head = Some(head);
                summary.fitted += 1;
            }
            Err(e) => {
                eprintln!("warning: {}/{} at t={}: {e}", r.scene_id, r.agent_id, r.time);
                summary.failed += 1;
            }
        }
        out.push(RawRecord { record: r, keypoints_2d: None });
    }
    tracks::write_records(output, &out)?;
    Ok(summary)
}

fn model_for(cfg: &RunConfig, model_cfg: &ModelConfig) -> Result<HumanSceneTransformer> {
    match &cfg.train.resume {
        Some(p) => {
            let (m, step) = checkpoint::load_model(p)?;
            if m.config != *model_cfg {
                eprintln!("note: using the model configuration stored in {}", p.display());
            }
            eprintln!("resuming from {} after {step} steps", p.display());
            Ok(m)
        }
        None => Ok(HumanSceneTransformer::new(model_cfg.clone(), cfg.train.seed)?),
    }
}

#[derive(Debug)]
pub struct TrainResult {
    pub checkpoint: PathBuf,
    pub final_loss: Option<f64>,
    pub train_report: MetricReport,
}

/// Trains on the configured data and writes the checkpoint, `loss_curve.csv`
/// and `mode_usage.csv` to the output directory.
pub fn cmd_train(cfg: &RunConfig, log_every: usize) -> Result<TrainResult> {
    cfg.validate()?;
    let model_cfg = cfg.model_config()?;
    let model = model_for(cfg, &model_cfg)?;
    let model_cfg = model.config.clone();
    let splits = pipeline::prepare(cfg, &model_cfg)?;
    eprintln!("{} training and {} test windows", splits.train.len(), splits.test.len());
    let out_dir = cfg.out_dir();
    let opts = TrainOptions {
        log_every,
        dump_path: Some(out_dir.join("failure_dump.json")),
    };
    let outcome = training::train(model, cfg.train.train_config(), &splits.train, &splits.test, &opts)?;
    let ckpt = cfg.checkpoint_path();
    checkpoint::save_model(&ckpt, &outcome.model, outcome.curve.len())?;
    fsio::write_atomic_str(&out_dir.join("loss_curve.csv"), &training::curve_csv(&outcome.curve))?;
    fsio::write_atomic_str(&out_dir.join("mode_usage.csv"), &training::mode_usage_text(&outcome.mode_usage))?;
    if log_every > 0 {
        training::print_mode_usage(&outcome.mode_usage);
    }
    let train_report = hst_core::train::evaluate(&outcome.model, &splits.train, ModeSelection::PerAgent)?;
    Ok(TrainResult {
        checkpoint: ckpt,
        final_loss: outcome.curve.last().map(|p| p.stats.loss),
        train_report,
    })
}

/// Test windows for `model_cfg` as configured in `[data]`.
pub fn test_windows(cfg: &RunConfig, model_cfg: &ModelConfig) -> Result<Vec<Scene>> {
    let data = &cfg.data;
    let ds = match &data.test_tracks {
        Some(p) => pipeline::load_dataset(p, data)?,
        None => pipeline::split_scenes(&pipeline::load_dataset(cfg.tracks_path()?, data)?, data.test_fraction).1,
    };
    pipeline::windows(&ds, model_cfg, data.stride, data.feature_parity, cfg.train.seed ^ 0x5445_5354)
}

/// Evaluates `model` and writes `report.json` (and the breakdown by
/// consecutive observed steps when enabled) into the output directory.
pub fn run_eval<P: Predictor + ?Sized>(cfg: &RunConfig, model: &P, scenes: &[Scene], period: f64) -> Result<Evaluation> {
    let selection = cfg.eval.mode_selection()?;
    let e = eval::evaluate(model, scenes, period, selection, cfg.eval.consecutive_breakdown)?;
    let dir = cfg.out_dir();
    fsio::write_atomic_str(&dir.join("report.json"), &eval::report_json(&e.overall))?;
    if cfg.eval.consecutive_breakdown {
        fsio::write_atomic_str(&dir.join("report_by_consecutive.json"), &eval::breakdown_json(&e.by_consecutive))?;
    }
    Ok(e)
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint_path: &Path) -> Result<Evaluation> {
    if !checkpoint_path.exists() {
        bail!("checkpoint {} does not exist", checkpoint_path.display());
    }
    let (model, _) = checkpoint::load_model(checkpoint_path)?;
    let scenes = test_windows(cfg, &model.config)?;
    if scenes.is_empty() {
        bail!("no test windows");
    }
    run_eval(cfg, &model, &scenes, model.config.period)
}

#[derive(Clone, Debug, Default)]
pub struct PredictOptions {
    pub scene_id: Option<String>,
    pub start: Option<i64>,
    pub plot: bool,
    pub drop_keypoints: bool,
    pub output: PathBuf,
}

/// Heading of the most likely mode's final displacement from the last
/// observed position, per agent.
pub fn most_likely_headings(scene: &Scene, pred: &GmmPrediction) -> Vec<Option<f64>> {
    let best = hst_core::objective::most_likely_mode(pred);
    let cur = scene.current();
    (0..pred.agents)
        .map(|i| {
            let (_, p) = scene.agents[i].last_observed(cur)?;
            let q = pred.mean(i, pred.steps - 1, best);
            Some((q[1] - p[1]).atan2(q[0] - p[0]))
        })
        .collect()
}

/// Prediction of one window as JSON, in world coordinates.
pub fn prediction_json(scene: &Scene, pred: &GmmPrediction) -> Value {
    let weights = pred.weights();
    let o = scene.offset;
    let headings = most_likely_headings(scene, pred);
    let agents: Vec<Value> = (0..pred.agents)
        .map(|i| {
            let modes: Vec<Value> = (0..pred.modes)
                .map(|m| {
                    let mu: Vec<[f64; 2]> = (0..pred.steps).map(|t| {
                        let p = pred.mean(i, t, m);
                        [p[0] + o[0], p[1] + o[1]]
                    }).collect();
                    let sigma: Vec<[f64; 2]> = (0..pred.steps).map(|t| pred.scale(i, t, m)).collect();
                    json!({"mode": m, "weight": weights[m], "mu": mu, "sigma": sigma})
                })
                .collect();
            json!({
                "agent_id": scene.agent_ids[i],
                "most_likely_heading": headings[i],
                "modes": modes,
            })
        })
        .collect();
    json!({
        "scene_id": scene.scene_id,
        "window_start": scene.window_start,
        "period": scene.timestep_period,
        "mode_weights": weights,
        "most_likely_mode": hst_core::objective::most_likely_mode(pred),
        "agents": agents,
    })
}

/// Predicts every window of `scene_file` that passes the filters and writes
/// a JSON array to `opts.output`, plus one SVG per window with `plot`.
pub fn cmd_predict(cfg: &RunConfig, checkpoint_path: &Path, scene_file: &Path, opts: &PredictOptions) -> Result<Vec<Value>> {
    let (model, _) = checkpoint::load_model(checkpoint_path)?;
    let ds = pipeline::load_dataset(scene_file, &cfg.data)?;
    let scenes = pipeline::windows(&ds, &model.config, cfg.data.stride, false, cfg.train.seed)?;
    let selected: Vec<Scene> = scenes
        .into_iter()
        .filter(|s| opts.scene_id.as_ref().is_none_or(|id| *id == s.scene_id))
        .filter(|s| opts.start.is_none_or(|t| t == s.window_start))
        .map(|s| if opts.drop_keypoints { s.without_keypoints() } else { s })
        .collect();
    if selected.is_empty() {
        bail!("no window of {} matches", scene_file.display());
    }
    let mut out = Vec::with_capacity(selected.len());
    for s in &selected {
        let pred = model.predict(s).with_context(|| format!("window {} from frame {}", s.scene_id, s.window_start))?;
        if opts.plot {
            let stem = opts.output.file_stem().and_then(|x| x.to_str()).unwrap_or("prediction");
            let name = format!("{stem}_{}_{}.svg", s.scene_id, s.window_start);
            let path = opts.output.with_file_name(name);
            fsio::write_atomic_str(&path, &plot::render_svg(s, &pred))?;
        }
        out.push(prediction_json(s, &pred));
    }
    fsio::write_atomic_str(&opts.output, &(serde_json::to_string_pretty(&out)? + "\n"))?;
    Ok(out)
}

/// Model configuration of a named ablation variant.
pub fn apply_variant(base: &ModelConfig, name: &str) -> Result<ModelConfig> {
    let mut c = base.clone();
    match name {
        "position-only" => {
            c.use_keypoints = false;
            c.use_head = false;
        }
        "head" => {
            c.use_keypoints = false;
            c.use_head = true;
        }
        "keypoints" => {
            c.use_keypoints = true;
            c.use_head = false;
        }
        "keypoints+head" => {
            c.use_keypoints = true;
            c.use_head = true;
        }
        "fsa" => {
            c.full_self_attention = true;
            c.interaction = true;
        }
        "no-interaction" => {
            c.full_self_attention = true;
            c.interaction = false;
        }
        "factorized" => {
            c.full_self_attention = false;
            c.interaction = true;
        }
        "no-alignment" => c.agent_self_alignment = false,
        "base" => {}
        _ => bail!(
            "unknown variant '{name}'; expected position-only, head, keypoints, keypoints+head, fsa, no-interaction, factorized, no-alignment or base"
        ),
    }
    c.validate()?;
    Ok(c)
}

/// Agents observed at exactly one input step, each scored as its own window.
pub fn first_detection_subset(scenes: &[Scene]) -> Vec<Scene> {
    let mut out = Vec::new();
    for s in scenes {
        let cur = s.current();
        for i in 0..s.num_agents() {
            if s.agents[i].observed_steps(cur) == 1 && s.ground_truth.valid[i].iter().any(|&v| v) {
                let mut order = vec![i];
                order.extend((0..s.num_agents()).filter(|&j| j != i));
                let mut w = s.select_agents(&order);
                // score only the newly detected agent; the others stay as context
                for v in w.ground_truth.valid.iter_mut().skip(1) {
                    v.iter_mut().for_each(|x| *x = false);
                }
                out.push(w);
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct VariantResult {
    pub name: String,
    pub per_seed: Vec<MetricReport>,
    pub first_detection: Vec<Option<f64>>,
}

impl VariantResult {
    fn mean(&self, f: impl Fn(&MetricReport) -> f64) -> f64 {
        self.per_seed.iter().map(f).sum::<f64>() / self.per_seed.len() as f64
    }

    pub fn min_ade(&self) -> f64 {
        self.mean(|r| r.min_ade)
    }

    pub fn ml_ade(&self) -> f64 {
        self.mean(|r| r.ml_ade)
    }

    pub fn nll(&self) -> f64 {
        self.mean(|r| r.nll)
    }

    pub fn first_detection_min_ade(&self) -> Option<f64> {
        let v: Option<Vec<f64>> = self.first_detection.iter().copied().collect();
        v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Trains every variant under every seed on the same windows and evaluates
/// on the same test windows.
pub fn run_ablation(
    cfg: &RunConfig,
    base: &ModelConfig,
    variants: &[String],
    seeds: &[u64],
    train: &[Scene],
    test: &[Scene],
    log_every: usize,
) -> Result<Vec<VariantResult>> {
    if variants.is_empty() || seeds.is_empty() {
        bail!("ablation needs at least one variant and one seed");
    }
    let first = first_detection_subset(test);
    let mut results = Vec::new();
    for name in variants {
        let mc = apply_variant(base, name)?;
        let mut r = VariantResult {
            name: name.clone(),
            per_seed: Vec::new(),
            first_detection: Vec::new(),
        };
        for &seed in seeds {
            if log_every > 0 {
                eprintln!("variant {name}, seed {seed}");
            }
            let mut tc = cfg.train.train_config();
            tc.seed = seed;
            tc.eval_interval = 0;
            let model = HumanSceneTransformer::new(mc.clone(), seed)?;
            let opts = TrainOptions {
                log_every,
                dump_path: None,
            };
            let outcome = training::train(model, tc, train, &[], &opts)?;
            let sel = cfg.eval.mode_selection()?;
            r.per_seed.push(hst_core::train::evaluate(&outcome.model, test, sel)?);
            r.first_detection.push(match first.is_empty() {
                true => None,
                false => Some(hst_core::train::evaluate(&outcome.model, &first, ModeSelection::PerAgent)?.min_ade),
            });
        }
        results.push(r);
    }
    Ok(results)
}

fn relative(v: f64, base: f64) -> String {
    if base == 0.0 {
        return "n/a".into();
    }
    format!("{:+.1}%", 100.0 * (v - base) / base)
}

/// Markdown table with metric means over seeds and the change relative to
/// the first row.
pub fn ablation_table(results: &[VariantResult]) -> String {
    let mut s = String::from("| variant | minADE | rel. | MLADE | rel. | NLL | first-det. minADE | rel. |\n");
    s.push_str("|---|---|---|---|---|---|---|---|\n");
    let Some(base) = results.first() else { return s };
    for r in results {
        let fd = match (r.first_detection_min_ade(), base.first_detection_min_ade()) {
            (Some(v), Some(b)) => (format!("{v:.4}"), relative(v, b)),
            _ => ("n/a".into(), "n/a".into()),
        };
        s.push_str(&format!(
            "| {} | {:.4} | {} | {:.4} | {} | {:.4} | {} | {} |\n",
            r.name,
            r.min_ade(),
            relative(r.min_ade(), base.min_ade()),
            r.ml_ade(),
            relative(r.ml_ade(), base.ml_ade()),
            r.nll(),
            fd.0,
            fd.1
        ));
    }
    s
}

pub fn ablation_json(results: &[VariantResult]) -> Value {
    let rows: Vec<Value> = results
        .iter()
        .map(|r| {
            json!({
                "variant": r.name,
                "min_ade": r.min_ade(),
                "ml_ade": r.ml_ade(),
                "nll": r.nll(),
                "first_detection_min_ade": r.first_detection_min_ade(),
                "per_seed": r.per_seed.iter().map(training::report_value).collect::<Vec<_>>(),
            })
        })
        .collect();
    Value::Array(rows)
}

/// Trains and evaluates the configured variants; writes `ablation.md` and
/// `ablation.json` to the output directory.
pub fn cmd_ablate(cfg: &RunConfig, log_every: usize) -> Result<Vec<VariantResult>> {
    cfg.validate()?;
    let base = cfg.model_config()?;
    let splits = pipeline::prepare(cfg, &base)?;
    if splits.test.is_empty() {
        bail!("no test windows for the ablation");
    }
    let results = run_ablation(cfg, &base, &cfg.ablate.variants, &cfg.ablate.seeds, &splits.train, &splits.test, log_every)?;
    let dir = cfg.out_dir();
    fsio::write_atomic_str(&dir.join("ablation.md"), &ablation_table(&results))?;
    fsio::write_atomic_str(&dir.join("ablation.json"), &(serde_json::to_string_pretty(&ablation_json(&results))? + "\n"))?;
    Ok(results)
}

/// Per-variant minADE means, keyed by name.
pub fn min_ade_by_variant(results: &[VariantResult]) -> BTreeMap<String, f64> {
    results.iter().map(|r| (r.name.clone(), r.min_ade())).collect()
}
