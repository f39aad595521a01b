//! Mixture likelihood, the min-NLL training loss and evaluation metrics.
//!
//! Ground truth is indexed `[agent][future step]`; only valid entries are
//! scored. Densities are axis-aligned 2D Gaussians.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::model::GmmPrediction;
use crate::numerics::{Graph, Tensor, Var};
use crate::scene::GroundTruth;

/// Lower bound applied to every scale inside the density.
pub const SIGMA_FLOOR: f64 = 1e-3;
/// Weight of the mode-classification term in the training loss.
pub const MODE_LOSS_WEIGHT: f64 = 1.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `-log N(x; mu, diag(sigma^2))` for a 2D point.
pub fn gaussian_nll(x: [f64; 2], mu: [f64; 2], sigma: [f64; 2]) -> f64 {
    let mut out = LN_2PI;
    for d in 0..2 {
        let s = sigma[d].max(SIGMA_FLOOR);
        let z = (x[d] - mu[d]) / s;
        out += 0.5 * z * z + math::ln(s);
    }
    out
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = math::log_sum_exp(logits);
    logits.iter().map(|l| l - lse).collect()
}

/// Log density of the full mixture for agent `i` at future step `t`.
pub fn gmm_log_prob(pred: &GmmPrediction, x: [f64; 2], i: usize, t: usize) -> f64 {
    let lw = log_softmax(&pred.logits);
    let terms: Vec<f64> = (0..pred.modes)
        .map(|m| lw[m] - gaussian_nll(x, pred.mean(i, t, m), pred.scale(i, t, m)))
        .collect();
    math::log_sum_exp(&terms)
}

fn check(pred: &GmmPrediction, gt: &GroundTruth) -> Result<()> {
    let bad_len = |n: usize| n != pred.steps;
    if gt.agents() != pred.agents
        || gt.valid.len() != pred.agents
        || gt.valid.iter().any(|v| bad_len(v.len()))
        || gt.position.iter().any(|v| bad_len(v.len()))
    {
        return Err(Error::shape(
            "ground truth",
            &[pred.agents, pred.steps],
            &[gt.agents(), gt.steps()],
        ));
    }
    Ok(())
}

/// Single-Gaussian NLL of each mode summed over all valid agent-timesteps.
pub fn mode_nll_sums(pred: &GmmPrediction, gt: &GroundTruth) -> Result<Vec<f64>> {
    check(pred, gt)?;
    let mut sums = vec![0.0; pred.modes];
    for i in 0..pred.agents {
        for t in 0..pred.steps {
            if gt.valid[i][t] {
                for (m, s) in sums.iter_mut().enumerate() {
                    *s += gaussian_nll(gt.position[i][t], pred.mean(i, t, m), pred.scale(i, t, m));
                }
            }
        }
    }
    Ok(sums)
}

/// Index of the smallest value; ties go to the lowest index.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (m, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = m;
        }
    }
    best
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (m, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = m;
        }
    }
    best
}

/// Training loss and its parts.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Summed NLL of the selected mode.
    pub nll: f64,
    /// Cross-entropy of the mode logits against the selected mode.
    pub mode_ce: f64,
    pub best_mode: usize,
    pub mode_nll: Vec<f64>,
}

/// Min-NLL loss: the mode with the smallest joint NLL over all agents is
/// scored, and the logits are pushed toward it.
pub fn min_nll_loss(pred: &GmmPrediction, gt: &GroundTruth) -> Result<LossBreakdown> {
    let mode_nll = mode_nll_sums(pred, gt)?;
    if gt.count_valid() == 0 {
        return Err(Error::NoGroundTruth);
    }
    let best_mode = argmin(&mode_nll);
    let nll = mode_nll[best_mode];
    let mode_ce = -log_softmax(&pred.logits)[best_mode];
    Ok(LossBreakdown {
        total: nll + MODE_LOSS_WEIGHT * mode_ce,
        nll,
        mode_ce,
        best_mode,
        mode_nll,
    })
}

/// Differentiable loss on graph values.
#[derive(Clone, Debug)]
pub struct GraphLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// [`min_nll_loss`] on the graph. `mu` and `sigma` are `[M, N, F, 2]`,
/// `logits` is `[M]`. Scales below [`SIGMA_FLOOR`] are rejected since the
/// floor is not differentiable; the prediction head never produces them.
pub fn min_nll_loss_graph(g: &mut Graph, mu: Var, sigma: Var, logits: Var, gt: &GroundTruth) -> Result<GraphLoss> {
    let shape = g.shape(mu).to_vec();
    if shape.len() != 4 || shape[3] != 2 || g.shape(sigma) != shape.as_slice() || g.shape(logits) != [shape[0]] {
        return Err(Error::shape("min_nll_loss_graph", &shape, g.shape(sigma)));
    }
    let (modes, agents, steps) = (shape[0], shape[1], shape[2]);
    if gt.agents() != agents || gt.valid.iter().any(|v| v.len() != steps) || gt.position.iter().any(|v| v.len() != steps) {
        return Err(Error::shape("ground truth", &[agents, steps], &[gt.agents(), gt.steps()]));
    }
    if gt.count_valid() == 0 {
        return Err(Error::NoGroundTruth);
    }
    if g.value(sigma).data().iter().any(|&s| s < SIGMA_FLOOR) {
        return Err(Error::InvalidArgument("mixture scale below floor".into()));
    }
    let mut target = Vec::with_capacity(agents * steps * 2);
    let mut weight = Vec::with_capacity(agents * steps * 2);
    for i in 0..agents {
        for t in 0..steps {
            let w = if gt.valid[i][t] { 1.0 } else { 0.0 };
            target.extend_from_slice(&[gt.position[i][t][0] * w, gt.position[i][t][1] * w]);
            weight.extend_from_slice(&[w, w]);
        }
    }
    let target = g.constant(Tensor::new(&[1, agents, steps, 2], target)?)?;
    let weight = g.constant(Tensor::new(&[1, agents, steps, 2], weight)?)?;

    // per coordinate: 0.5 z^2 + ln s + 0.5 ln 2pi
    let diff = g.sub(target, mu)?;
    let z = g.div(diff, sigma)?;
    let z2 = g.square(z)?;
    let half = g.scale(z2, 0.5)?;
    let ls = g.ln(sigma)?;
    let e = g.add(half, ls)?;
    let e = g.add_scalar(e, 0.5 * LN_2PI)?;
    let e = g.mul(e, weight)?;
    let e = g.reshape(e, &[modes, agents * steps * 2])?;
    let per_mode = g.sum_axis(e, 1)?;

    let mode_nll = g.value(per_mode).data().to_vec();
    let best_mode = argmin(&mode_nll);
    let nll_var = g.index_select(per_mode, 0, &[best_mode])?;
    let lsm = g.log_softmax(logits, 0)?;
    let picked = g.index_select(lsm, 0, &[best_mode])?;
    let ce = g.scale(picked, -MODE_LOSS_WEIGHT)?;
    let total = g.add(nll_var, ce)?;
    let total = g.reshape(total, &[1])?;

    let nll = mode_nll[best_mode];
    let mode_ce = -g.value(picked).item();
    Ok(GraphLoss {
        total,
        breakdown: LossBreakdown {
            total: g.value(total).item(),
            nll,
            mode_ce,
            best_mode,
            mode_nll,
        },
    })
}

/// Mode of highest weight; ties go to the lowest index.
pub fn most_likely_mode(pred: &GmmPrediction) -> usize {
    argmax(&pred.logits)
}

/// How the mode is chosen for the min-over-modes metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ModeSelection {
    /// Each agent takes its own best mode.
    #[default]
    PerAgent,
    /// One mode for the whole scene, minimizing the summed per-agent error.
    Joint,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    math::hypot(a[0] - b[0], a[1] - b[1])
}

/// Mean displacement of agent `i` under mode `m` over the valid steps among
/// the first `horizon`. `None` when no step there is valid.
pub fn agent_ade(pred: &GmmPrediction, gt: &GroundTruth, i: usize, m: usize, horizon: usize) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for t in 0..horizon.min(pred.steps) {
        if gt.valid[i][t] {
            sum += dist(pred.mean(i, t, m), gt.position[i][t]);
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Displacement of agent `i` under mode `m` at its last valid step.
pub fn agent_fde(pred: &GmmPrediction, gt: &GroundTruth, i: usize, m: usize) -> Option<f64> {
    let t = (0..pred.steps).rev().find(|&t| gt.valid[i][t])?;
    Some(dist(pred.mean(i, t, m), gt.position[i][t]))
}

/// Per-agent errors `[agent][mode]` for the agents that have any score.
fn error_table(pred: &GmmPrediction, f: impl Fn(usize, usize) -> Option<f64>) -> Vec<Vec<f64>> {
    (0..pred.agents)
        .filter_map(|i| (0..pred.modes).map(|m| f(i, m)).collect::<Option<Vec<f64>>>())
        .collect()
}

/// Min-over-modes of each agent's error, per the selection rule.
fn select_min(table: &[Vec<f64>], modes: usize, sel: ModeSelection) -> Vec<f64> {
    match sel {
        ModeSelection::PerAgent => table
            .iter()
            .map(|row| row.iter().copied().fold(f64::INFINITY, f64::min))
            .collect(),
        ModeSelection::Joint => {
            let totals: Vec<f64> = (0..modes).map(|m| table.iter().map(|r| r[m]).sum()).collect();
            let m = argmin(&totals);
            table.iter().map(|r| r[m]).collect()
        }
    }
}

fn mean(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    Ok(xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Per-agent minADE values, restricted to the first `horizon` steps.
pub fn min_ade_per_agent(pred: &GmmPrediction, gt: &GroundTruth, horizon: usize, sel: ModeSelection) -> Result<Vec<f64>> {
    check(pred, gt)?;
    let table = error_table(pred, |i, m| agent_ade(pred, gt, i, m, horizon));
    Ok(select_min(&table, pred.modes, sel))
}

pub fn min_fde_per_agent(pred: &GmmPrediction, gt: &GroundTruth, sel: ModeSelection) -> Result<Vec<f64>> {
    check(pred, gt)?;
    let table = error_table(pred, |i, m| agent_fde(pred, gt, i, m));
    Ok(select_min(&table, pred.modes, sel))
}

/// minADE over the scene's agents.
pub fn min_ade(pred: &GmmPrediction, gt: &GroundTruth, sel: ModeSelection) -> Result<f64> {
    mean(&min_ade_per_agent(pred, gt, pred.steps, sel)?)
}

/// minADE over the first `horizon` future steps.
pub fn min_ade_within(pred: &GmmPrediction, gt: &GroundTruth, horizon: usize, sel: ModeSelection) -> Result<f64> {
    mean(&min_ade_per_agent(pred, gt, horizon, sel)?)
}

pub fn min_fde(pred: &GmmPrediction, gt: &GroundTruth, sel: ModeSelection) -> Result<f64> {
    mean(&min_fde_per_agent(pred, gt, sel)?)
}

fn ml_ade_per_agent(pred: &GmmPrediction, gt: &GroundTruth) -> Result<Vec<f64>> {
    check(pred, gt)?;
    let m = most_likely_mode(pred);
    Ok((0..pred.agents).filter_map(|i| agent_ade(pred, gt, i, m, pred.steps)).collect())
}

/// ADE of the most likely mode.
pub fn ml_ade(pred: &GmmPrediction, gt: &GroundTruth) -> Result<f64> {
    mean(&ml_ade_per_agent(pred, gt)?)
}

fn nll_per_agent(pred: &GmmPrediction, gt: &GroundTruth) -> Result<Vec<f64>> {
    check(pred, gt)?;
    let mut out = Vec::new();
    for i in 0..pred.agents {
        let v: Vec<f64> = (0..pred.steps)
            .filter(|&t| gt.valid[i][t])
            .map(|t| -gmm_log_prob(pred, gt.position[i][t], i, t))
            .collect();
        if !v.is_empty() {
            out.push(v.iter().sum::<f64>() / v.len() as f64);
        }
    }
    Ok(out)
}

/// Mean over valid agent-timesteps of the full-mixture negative log density.
pub fn nll_metric(pred: &GmmPrediction, gt: &GroundTruth) -> Result<f64> {
    check(pred, gt)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..pred.agents {
        for t in 0..pred.steps {
            if gt.valid[i][t] {
                sum += -gmm_log_prob(pred, gt.position[i][t], i, t);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::NoGroundTruth);
    }
    Ok(sum / n as f64)
}

/// Number of future steps covering `seconds` at the given step period.
pub fn horizon_steps(seconds: f64, period: f64) -> usize {
    let s = seconds / period;
    let r = math::round(s);
    if (s - r).abs() < 1e-9 {
        r as usize
    } else {
        math::floor(s) as usize + 1
    }
}

/// Dataset-level metrics, each an unweighted mean over agent-windows.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub min_ade: f64,
    pub min_fde: f64,
    pub ml_ade: f64,
    pub nll: f64,
    pub min_ade_2s: f64,
    pub min_ade_4s: f64,
    /// Agent-windows with at least one valid future step.
    pub count: usize,
}

/// Running sums behind a [`MetricReport`]. Scenes are added in order so
/// the reduction is reproducible.
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    selection: ModeSelection,
    period: f64,
    min_ade: f64,
    min_fde: f64,
    ml_ade: f64,
    nll: f64,
    count: usize,
    short: (f64, usize),
    long: (f64, usize),
}

impl MetricAccumulator {
    pub fn new(period: f64, selection: ModeSelection) -> Self {
        MetricAccumulator {
            selection,
            period,
            min_ade: 0.0,
            min_fde: 0.0,
            ml_ade: 0.0,
            nll: 0.0,
            count: 0,
            short: (0.0, 0),
            long: (0.0, 0),
        }
    }

    pub fn add(&mut self, pred: &GmmPrediction, gt: &GroundTruth) -> Result<()> {
        let ade = min_ade_per_agent(pred, gt, pred.steps, self.selection)?;
        let fde = min_fde_per_agent(pred, gt, self.selection)?;
        let ml = ml_ade_per_agent(pred, gt)?;
        let nll = nll_per_agent(pred, gt)?;
        debug_assert!(ade.len() == fde.len() && ade.len() == ml.len() && ade.len() == nll.len());
        self.min_ade += ade.iter().sum::<f64>();
        self.min_fde += fde.iter().sum::<f64>();
        self.ml_ade += ml.iter().sum::<f64>();
        self.nll += nll.iter().sum::<f64>();
        self.count += ade.len();
        for (slot, seconds) in [(&mut self.short, 2.0), (&mut self.long, 4.0)] {
            let h = horizon_steps(seconds, self.period);
            let v = min_ade_per_agent(pred, gt, h, self.selection)?;
            slot.0 += v.iter().sum::<f64>();
            slot.1 += v.len();
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Horizon slices with no scored agent report 0.
    pub fn finish(&self) -> Result<MetricReport> {
        if self.count == 0 {
            return Err(Error::NoGroundTruth);
        }
        let n = self.count as f64;
        let part = |(s, c): (f64, usize)| if c == 0 { 0.0 } else { s / c as f64 };
        Ok(MetricReport {
            min_ade: self.min_ade / n,
            min_fde: self.min_fde / n,
            ml_ade: self.ml_ade / n,
            nll: self.nll / n,
            min_ade_2s: part(self.short),
            min_ade_4s: part(self.long),
            count: self.count,
        })
    }
}
