//! Dataset evaluation and metric reports.

use std::collections::BTreeMap;

use anyhow::Result;
use hst_core::model::{GmmPrediction, HumanSceneTransformer};
use hst_core::objective::{MetricAccumulator, MetricReport, ModeSelection};
use hst_core::scene::{GroundTruth, Scene};
use serde::Serialize;

/// Anything that maps a window to a mixture prediction.
pub trait Predictor {
    fn predict(&self, scene: &Scene) -> hst_core::Result<GmmPrediction>;
}

impl Predictor for HumanSceneTransformer {
    fn predict(&self, scene: &Scene) -> hst_core::Result<GmmPrediction> {
        HumanSceneTransformer::predict(self, scene)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub overall: MetricReport,
    /// Keyed by the number of consecutive observed input steps ending at
    /// the current one. Agents are scored one at a time here, so the
    /// breakdown always uses the per-agent mode minimum.
    pub by_consecutive: BTreeMap<usize, MetricReport>,
}

fn agent_truth(gt: &GroundTruth, i: usize) -> GroundTruth {
    GroundTruth {
        position: vec![gt.position[i].clone()],
        valid: vec![gt.valid[i].clone()],
    }
}

pub fn evaluate<P: Predictor + ?Sized>(
    model: &P,
    scenes: &[Scene],
    period: f64,
    selection: ModeSelection,
    breakdown: bool,
) -> Result<Evaluation> {
    let mut overall = MetricAccumulator::new(period, selection);
    let mut groups: BTreeMap<usize, MetricAccumulator> = BTreeMap::new();
    for s in scenes {
        let pred = model.predict(s)?;
        overall.add(&pred, &s.ground_truth)?;
        if !breakdown {
            continue;
        }
        for i in 0..s.num_agents() {
            if !s.ground_truth.valid[i].iter().any(|&v| v) {
                continue;
            }
            let k = s.agents[i].consecutive_observed(s.current());
            groups
                .entry(k)
                .or_insert_with(|| MetricAccumulator::new(period, ModeSelection::PerAgent))
                .add(&pred.select_agents(&[i]), &agent_truth(&s.ground_truth, i))?;
        }
    }
    let by_consecutive = groups.into_iter().map(|(k, a)| Ok((k, a.finish()?))).collect::<Result<_>>()?;
    Ok(Evaluation {
        overall: overall.finish()?,
        by_consecutive,
    })
}

#[derive(Serialize)]
struct ReportFields {
    min_ade: f64,
    min_fde: f64,
    ml_ade: f64,
    nll: f64,
    min_ade_2s: f64,
    min_ade_4s: f64,
    count: usize,
}

fn fields(r: &MetricReport) -> ReportFields {
    ReportFields {
        min_ade: r.min_ade,
        min_fde: r.min_fde,
        ml_ade: r.ml_ade,
        nll: r.nll,
        min_ade_2s: r.min_ade_2s,
        min_ade_4s: r.min_ade_4s,
        count: r.count,
    }
}

/// Flat JSON object with fixed field names.
pub fn report_json(r: &MetricReport) -> String {
    serde_json::to_string_pretty(&fields(r)).expect("report serializes") + "\n"
}

pub fn breakdown_json(groups: &BTreeMap<usize, MetricReport>) -> String {
    let map: BTreeMap<String, ReportFields> = groups.iter().map(|(k, r)| (k.to_string(), fields(r))).collect();
    serde_json::to_string_pretty(&map).expect("breakdown serializes") + "\n"
}

pub fn report_table(e: &Evaluation) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>7}\n",
        "subset", "minADE", "minFDE", "MLADE", "NLL", "ADE@2s", "ADE@4s", "count"
    ));
    let mut row = |name: &str, r: &MetricReport| {
        out.push_str(&format!(
            "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>7}\n",
            name, r.min_ade, r.min_fde, r.ml_ade, r.nll, r.min_ade_2s, r.min_ade_4s, r.count
        ));
    };
    row("all", &e.overall);
    for (k, r) in &e.by_consecutive {
        row(&format!("consec={k}"), r);
    }
    out
}
