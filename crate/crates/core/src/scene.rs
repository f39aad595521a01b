//! Prediction windows and the datasets they are cut from.
//!
//! A [`Scene`] holds `T = H + 1 + F` timesteps per agent. Timesteps `0..=H`
//! are observed input, timestep `H` is the current one and the remaining `F`
//! steps are the prediction horizon. Input features for the horizon are
//! always masked; the targets live in [`GroundTruth`].

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::math;
use crate::numerics::rng_from_seed;
use crate::pose::KEYPOINT_DIM;

pub type Keypoints = [f64; KEYPOINT_DIM];

/// Per-timestep features of one agent in a window.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentFeatures {
    pub position: Vec<[f64; 2]>,
    pub keypoints: Vec<Keypoints>,
    /// Planar yaw in radians, wrapped to (-pi, pi].
    pub head: Vec<f64>,
    pub position_valid: Vec<bool>,
    pub keypoints_valid: Vec<bool>,
    pub head_valid: Vec<bool>,
}

impl AgentFeatures {
    pub fn empty(steps: usize) -> Self {
        AgentFeatures {
            position: vec![[0.0; 2]; steps],
            keypoints: vec![[0.0; KEYPOINT_DIM]; steps],
            head: vec![0.0; steps],
            position_valid: vec![false; steps],
            keypoints_valid: vec![false; steps],
            head_valid: vec![false; steps],
        }
    }

    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    pub fn set_position(&mut self, t: usize, p: [f64; 2]) {
        self.position[t] = p;
        self.position_valid[t] = true;
    }

    pub fn set_keypoints(&mut self, t: usize, k: Keypoints) {
        self.keypoints[t] = k;
        self.keypoints_valid[t] = true;
    }

    pub fn set_head(&mut self, t: usize, yaw: f64) {
        self.head[t] = math::wrap_angle(yaw);
        self.head_valid[t] = true;
    }

    pub fn clear_position(&mut self, t: usize) {
        self.position[t] = [0.0; 2];
        self.position_valid[t] = false;
    }

    pub fn clear_keypoints(&mut self, t: usize) {
        self.keypoints[t] = [0.0; KEYPOINT_DIM];
        self.keypoints_valid[t] = false;
    }

    pub fn clear_head(&mut self, t: usize) {
        self.head[t] = 0.0;
        self.head_valid[t] = false;
    }

    /// True if any feature is valid at `t`.
    pub fn any_valid(&self, t: usize) -> bool {
        self.position_valid[t] || self.keypoints_valid[t] || self.head_valid[t]
    }

    /// Most recent valid position at or before `current`.
    pub fn last_observed(&self, current: usize) -> Option<(usize, [f64; 2])> {
        (0..=current.min(self.len().saturating_sub(1)))
            .rev()
            .find(|&t| self.position_valid[t])
            .map(|t| (t, self.position[t]))
    }

    pub fn observed_steps(&self, current: usize) -> usize {
        (0..=current).filter(|&t| self.any_valid(t)).count()
    }

    /// Number of consecutive timesteps ending at `current` with a valid position.
    pub fn consecutive_observed(&self, current: usize) -> usize {
        (0..=current).rev().take_while(|&t| self.position_valid[t]).count()
    }

    /// Checks the zero-fill and keypoints-imply-position invariants.
    pub fn check(&self) -> Result<()> {
        let n = self.len();
        let lens = [
            self.keypoints.len(),
            self.head.len(),
            self.position_valid.len(),
            self.keypoints_valid.len(),
            self.head_valid.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::InvalidArgument(format!("agent feature lengths differ: {n} vs {lens:?}")));
        }
        for t in 0..n {
            if !self.position_valid[t] && self.position[t] != [0.0; 2] {
                return Err(Error::InvalidArgument(format!("invalid position slot {t} is not zero")));
            }
            if !self.keypoints_valid[t] && self.keypoints[t].iter().any(|&v| v != 0.0) {
                return Err(Error::InvalidArgument(format!("invalid keypoint slot {t} is not zero")));
            }
            if !self.head_valid[t] && self.head[t] != 0.0 {
                return Err(Error::InvalidArgument(format!("invalid head slot {t} is not zero")));
            }
            if self.keypoints_valid[t] && !self.position_valid[t] {
                return Err(Error::InvalidArgument(format!("keypoints valid without position at {t}")));
            }
            let h = self.head[t];
            if !(h > -core::f64::consts::PI && h <= core::f64::consts::PI) {
                return Err(Error::InvalidArgument(format!("head yaw {h} outside (-pi, pi]")));
            }
        }
        Ok(())
    }
}

/// Future x-y targets, `[N, F]` with per-point validity.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub position: Vec<Vec<[f64; 2]>>,
    pub valid: Vec<Vec<bool>>,
}

impl GroundTruth {
    pub fn empty(agents: usize, steps: usize) -> Self {
        GroundTruth {
            position: vec![vec![[0.0; 2]; steps]; agents],
            valid: vec![vec![false; steps]; agents],
        }
    }

    pub fn agents(&self) -> usize {
        self.position.len()
    }

    pub fn steps(&self) -> usize {
        self.position.first().map_or(0, Vec::len)
    }

    pub fn count_valid(&self) -> usize {
        self.valid.iter().flatten().filter(|&&v| v).count()
    }
}

/// Binary static-obstacle raster. Cell `(row, col)` covers
/// `[origin_x + col*cell, origin_x + (col+1)*cell) x [origin_y + row*cell, ...)`.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    pub width: usize,
    pub height: usize,
    pub cell_size: f64,
    pub origin: [f64; 2],
    /// Row-major, `height * width`.
    pub cells: Vec<bool>,
}

impl OccupancyGrid {
    pub fn new(width: usize, height: usize, cell_size: f64, origin: [f64; 2], cells: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 || cells.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "occupancy grid {width}x{height} with {} cells",
                cells.len()
            )));
        }
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::InvalidArgument(format!("occupancy cell size {cell_size}")));
        }
        Ok(OccupancyGrid {
            width,
            height,
            cell_size,
            origin,
            cells,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.width + col]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    /// Frame index (at the dataset rate) of timestep 0.
    pub window_start: i64,
    pub agent_ids: Vec<String>,
    pub agents: Vec<AgentFeatures>,
    pub history_len: usize,
    pub future_len: usize,
    pub timestep_period: f64,
    pub ground_truth: GroundTruth,
    pub occupancy: Option<OccupancyGrid>,
    /// World coordinates of the scene frame origin; add to recover world positions.
    pub offset: [f64; 2],
}

impl Scene {
    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn steps(&self) -> usize {
        self.history_len + 1 + self.future_len
    }

    pub fn current(&self) -> usize {
        self.history_len
    }

    /// Checks agent counts and array lengths only; feature values are not
    /// inspected.
    pub fn check_shape(&self) -> Result<()> {
        let n = self.agents.len();
        if n == 0 {
            return Err(Error::InvalidArgument("scene has no agents".into()));
        }
        if self.agent_ids.len() != n || self.ground_truth.agents() != n || self.ground_truth.valid.len() != n {
            return Err(Error::InvalidArgument(format!(
                "scene has {n} agents but {} ids and {} ground-truth rows",
                self.agent_ids.len(),
                self.ground_truth.agents()
            )));
        }
        let t = self.steps();
        for (i, a) in self.agents.iter().enumerate() {
            let lens = [
                a.position.len(),
                a.keypoints.len(),
                a.head.len(),
                a.position_valid.len(),
                a.keypoints_valid.len(),
                a.head_valid.len(),
            ];
            if lens.iter().any(|&l| l != t) {
                return Err(Error::InvalidArgument(format!("agent {i} feature lengths {lens:?}, expected {t}")));
            }
            if self.ground_truth.position[i].len() != self.future_len || self.ground_truth.valid[i].len() != self.future_len {
                return Err(Error::InvalidArgument(format!("agent {i} ground truth length")));
            }
        }
        Ok(())
    }

    /// Checks every structural invariant of a window.
    pub fn validate(&self) -> Result<()> {
        let n = self.agents.len();
        if n == 0 {
            return Err(Error::InvalidArgument("scene has no agents".into()));
        }
        if self.agent_ids.len() != n || self.ground_truth.agents() != n {
            return Err(Error::InvalidArgument(format!(
                "scene has {n} agents but {} ids and {} ground-truth rows",
                self.agent_ids.len(),
                self.ground_truth.agents()
            )));
        }
        let t = self.steps();
        for (i, a) in self.agents.iter().enumerate() {
            if a.len() != t {
                return Err(Error::InvalidArgument(format!("agent {i} has {} steps, expected {t}", a.len())));
            }
            a.check()?;
            if (self.history_len + 1..t).any(|s| a.any_valid(s)) {
                return Err(Error::InvalidArgument(format!("agent {i} has valid future input features")));
            }
            if self.ground_truth.position[i].len() != self.future_len || self.ground_truth.valid[i].len() != self.future_len {
                return Err(Error::InvalidArgument(format!("agent {i} ground truth length")));
            }
        }
        Ok(())
    }

    /// Keeps the agents at `indices`, in the given order.
    pub fn select_agents(&self, indices: &[usize]) -> Scene {
        let mut out = self.clone();
        out.agents = indices.iter().map(|&i| self.agents[i].clone()).collect();
        out.agent_ids = indices.iter().map(|&i| self.agent_ids[i].clone()).collect();
        out.ground_truth = GroundTruth {
            position: indices.iter().map(|&i| self.ground_truth.position[i].clone()).collect(),
            valid: indices.iter().map(|&i| self.ground_truth.valid[i].clone()).collect(),
        };
        out
    }

    /// Drops position and head observations that lack keypoints, then drops
    /// agents left with no observation.
    pub fn feature_parity(&self) -> Scene {
        let mut out = self.clone();
        for a in &mut out.agents {
            for t in 0..a.len() {
                if !a.keypoints_valid[t] {
                    a.clear_position(t);
                    a.clear_head(t);
                }
            }
        }
        let cur = self.current();
        let keep: Vec<usize> = (0..out.agents.len()).filter(|&i| out.agents[i].observed_steps(cur) > 0).collect();
        out.select_agents(&keep)
    }

    /// Masks every keypoint observation.
    pub fn without_keypoints(&self) -> Scene {
        let mut out = self.clone();
        for a in &mut out.agents {
            for t in 0..a.len() {
                a.clear_keypoints(t);
            }
        }
        out
    }

    /// Masks every head observation.
    pub fn without_head(&self) -> Scene {
        let mut out = self.clone();
        for a in &mut out.agents {
            for t in 0..a.len() {
                a.clear_head(t);
            }
        }
        out
    }
}

/// One observation of one agent.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackFrame {
    /// Frame index at the dataset rate, relative to the first frame of the scene.
    pub frame: i64,
    pub time: f64,
    pub position: [f64; 2],
    pub keypoints: Option<Keypoints>,
    pub head: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub agent_id: String,
    pub frames: Vec<TrackFrame>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct SceneTracks {
    pub scene_id: String,
    pub tracks: Vec<Track>,
    pub occupancy: Option<OccupancyGrid>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackDataset {
    pub rate_hz: f64,
    pub scenes: Vec<SceneTracks>,
}

/// A flat observation as stored in a track file.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackRecord {
    pub scene_id: String,
    pub time: f64,
    pub agent_id: String,
    pub position: [f64; 2],
    pub keypoints: Option<Keypoints>,
    pub head: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RejectedTrack {
    pub scene_id: String,
    pub agent_id: String,
    pub reason: String,
}

impl TrackDataset {
    pub fn num_tracks(&self) -> usize {
        self.scenes.iter().map(|s| s.tracks.len()).sum()
    }

    pub fn num_frames(&self) -> usize {
        self.scenes.iter().flat_map(|s| &s.tracks).map(|t| t.frames.len()).sum()
    }

    /// Groups records into per-scene tracks. Tracks whose timestamps are not
    /// strictly increasing in record order are rejected and reported. When
    /// `rate_hz` is `None` it is inferred from the median time step.
    pub fn from_records(records: &[TrackRecord], rate_hz: Option<f64>) -> Result<(Self, Vec<RejectedTrack>)> {
        let mut grouped: BTreeMap<&str, BTreeMap<&str, Vec<&TrackRecord>>> = BTreeMap::new();
        for r in records {
            grouped.entry(&r.scene_id).or_default().entry(&r.agent_id).or_default().push(r);
        }
        let mut rejected = Vec::new();
        let mut accepted: Vec<(&str, Vec<(&str, Vec<&TrackRecord>)>)> = Vec::new();
        for (scene_id, agents) in grouped {
            let mut tracks = Vec::new();
            for (agent_id, recs) in agents {
                if let Some(w) = recs.windows(2).find(|w| !(w[1].time > w[0].time)) {
                    rejected.push(RejectedTrack {
                        scene_id: scene_id.into(),
                        agent_id: agent_id.into(),
                        reason: format!("timestamp {} does not follow {}", w[1].time, w[0].time),
                    });
                    continue;
                }
                tracks.push((agent_id, recs));
            }
            accepted.push((scene_id, tracks));
        }

        let rate = match rate_hz {
            Some(r) if r > 0.0 && r.is_finite() => r,
            Some(r) => return Err(Error::InvalidArgument(format!("rate {r} Hz"))),
            None => {
                let mut dts: Vec<f64> = accepted
                    .iter()
                    .flat_map(|(_, ts)| ts.iter())
                    .flat_map(|(_, recs)| recs.windows(2).map(|w| w[1].time - w[0].time))
                    .collect();
                if dts.is_empty() {
                    1.0
                } else {
                    dts.sort_by(f64::total_cmp);
                    let median = dts[dts.len() / 2];
                    // snap to a whole rate when close, which is the usual case
                    let r = 1.0 / median;
                    if (r - math::round(r)).abs() < 1e-3 * r { math::round(r) } else { r }
                }
            }
        };

        let mut scenes = Vec::new();
        for (scene_id, tracks) in accepted {
            let t0 = tracks
                .iter()
                .flat_map(|(_, recs)| recs.iter().map(|r| r.time))
                .fold(f64::INFINITY, f64::min);
            let mut out = SceneTracks {
                scene_id: scene_id.into(),
                tracks: Vec::new(),
                occupancy: None,
            };
            for (agent_id, recs) in tracks {
                let frames: Vec<TrackFrame> = recs
                    .iter()
                    .map(|r| TrackFrame {
                        frame: math::round((r.time - t0) * rate) as i64,
                        time: r.time,
                        position: r.position,
                        keypoints: r.keypoints,
                        head: r.head.map(math::wrap_angle),
                    })
                    .collect();
                if let Some(w) = frames.windows(2).find(|w| w[1].frame <= w[0].frame) {
                    rejected.push(RejectedTrack {
                        scene_id: scene_id.into(),
                        agent_id: agent_id.into(),
                        reason: format!("two observations fall in frame {} at {rate} Hz", w[1].frame),
                    });
                    continue;
                }
                out.tracks.push(Track {
                    agent_id: agent_id.into(),
                    frames,
                });
            }
            scenes.push(out);
        }
        Ok((TrackDataset { rate_hz: rate, scenes }, rejected))
    }

    /// Flattens back to records, scene by scene and track by track.
    pub fn to_records(&self) -> Vec<TrackRecord> {
        let mut out = Vec::new();
        for s in &self.scenes {
            for t in &s.tracks {
                for f in &t.frames {
                    out.push(TrackRecord {
                        scene_id: s.scene_id.clone(),
                        time: f.time,
                        agent_id: t.agent_id.clone(),
                        position: f.position,
                        keypoints: f.keypoints,
                        head: f.head,
                    });
                }
            }
        }
        out
    }
}

/// Splits a dataset into `from_hz / to_hz` phase-shifted copies at `to_hz`.
/// Phase `p` keeps the frames whose index is `p` modulo the ratio.
pub fn subsample(ds: &TrackDataset, from_hz: f64, to_hz: f64) -> Result<Vec<TrackDataset>> {
    if !(from_hz > 0.0 && to_hz > 0.0) {
        return Err(Error::InvalidArgument(format!("rates {from_hz} Hz -> {to_hz} Hz")));
    }
    let ratio = from_hz / to_hz;
    let k = math::round(ratio);
    if k < 1.0 || (ratio - k).abs() > 1e-9 * ratio {
        return Err(Error::InvalidArgument(format!("{from_hz} Hz is not a multiple of {to_hz} Hz")));
    }
    let k = k as i64;
    let phases = (0..k)
        .map(|p| TrackDataset {
            rate_hz: to_hz,
            scenes: ds
                .scenes
                .iter()
                .map(|s| SceneTracks {
                    scene_id: s.scene_id.clone(),
                    occupancy: s.occupancy.clone(),
                    tracks: s
                        .tracks
                        .iter()
                        .filter_map(|t| {
                            let frames: Vec<TrackFrame> = t
                                .frames
                                .iter()
                                .filter(|f| f.frame.rem_euclid(k) == p)
                                .map(|f| TrackFrame {
                                    frame: f.frame.div_euclid(k),
                                    ..f.clone()
                                })
                                .collect();
                            (!frames.is_empty()).then(|| Track {
                                agent_id: t.agent_id.clone(),
                                frames,
                            })
                        })
                        .collect(),
                })
                .collect(),
        })
        .collect();
    Ok(phases)
}

/// Cuts sliding windows of `history + 1 + future` frames.
///
/// An agent enters a window if it has at least one observation among the
/// `history + 1` input frames. Windows in which no included agent has a
/// future observation are skipped since they carry no target.
pub fn make_windows(ds: &TrackDataset, history: usize, future: usize, stride: usize) -> Result<Vec<Scene>> {
    if future == 0 || stride == 0 {
        return Err(Error::InvalidArgument(format!("future {future}, stride {stride}")));
    }
    let steps = (history + 1 + future) as i64;
    let period = 1.0 / ds.rate_hz;
    let mut out = Vec::new();
    for s in &ds.scenes {
        let frames = s.tracks.iter().flat_map(|t| t.frames.iter().map(|f| f.frame));
        let (Some(lo), Some(hi)) = (frames.clone().min(), frames.max()) else {
            continue;
        };
        let mut start = lo;
        while start + steps - 1 <= hi {
            if let Some(scene) = window_at(s, start, history, future, period) {
                out.push(scene);
            }
            start += stride as i64;
        }
    }
    Ok(out)
}

/// The window of `history + 1 + future` frames starting at frame `start`,
/// or `None` if it has no agent or no future target.
pub fn window_at(s: &SceneTracks, start: i64, history: usize, future: usize, period: f64) -> Option<Scene> {
    let steps = history + 1 + future;
    let mut ids = Vec::new();
    let mut agents = Vec::new();
    let mut gt = GroundTruth::empty(0, future);
    for track in &s.tracks {
        let mut a = AgentFeatures::empty(steps);
        let mut fut = vec![[0.0; 2]; future];
        let mut fut_valid = vec![false; future];
        for f in &track.frames {
            let j = f.frame - start;
            if j < 0 || j >= steps as i64 {
                continue;
            }
            let j = j as usize;
            if j <= history {
                a.set_position(j, f.position);
                if let Some(k) = f.keypoints {
                    a.set_keypoints(j, k);
                }
                if let Some(h) = f.head {
                    a.set_head(j, h);
                }
            } else {
                fut[j - history - 1] = f.position;
                fut_valid[j - history - 1] = true;
            }
        }
        if a.observed_steps(history) == 0 {
            continue;
        }
        ids.push(track.agent_id.clone());
        agents.push(a);
        gt.position.push(fut);
        gt.valid.push(fut_valid);
    }
    if agents.is_empty() || gt.count_valid() == 0 {
        return None;
    }
    let offset = centroid(&agents, history);
    let mut scene = Scene {
        scene_id: s.scene_id.clone(),
        window_start: start,
        agent_ids: ids,
        agents,
        history_len: history,
        future_len: future,
        timestep_period: period,
        ground_truth: gt,
        occupancy: s.occupancy.clone(),
        offset: [0.0; 2],
    };
    recenter(&mut scene, offset);
    Some(scene)
}

/// Centroid of positions at `current` over agents observed there; falls back
/// to the agents' last observed positions when nobody is seen at `current`.
fn centroid(agents: &[AgentFeatures], current: usize) -> [f64; 2] {
    let at_current: Vec<[f64; 2]> = agents.iter().filter(|a| a.position_valid[current]).map(|a| a.position[current]).collect();
    let pts = if at_current.is_empty() {
        agents.iter().filter_map(|a| a.last_observed(current).map(|(_, p)| p)).collect()
    } else {
        at_current
    };
    if pts.is_empty() {
        return [0.0; 2];
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p[0]).sum();
    let sy: f64 = pts.iter().map(|p| p[1]).sum();
    [sx / n, sy / n]
}

/// Shifts every valid x-y quantity in the scene by `-shift` and accumulates
/// it into the stored offset.
pub fn recenter(scene: &mut Scene, shift: [f64; 2]) {
    for a in &mut scene.agents {
        for t in 0..a.len() {
            if a.position_valid[t] {
                a.position[t][0] -= shift[0];
                a.position[t][1] -= shift[1];
            }
            if a.keypoints_valid[t] {
                for j in 0..KEYPOINT_DIM / 3 {
                    a.keypoints[t][3 * j] -= shift[0];
                    a.keypoints[t][3 * j + 1] -= shift[1];
                }
            }
        }
    }
    for (row, valid) in scene.ground_truth.position.iter_mut().zip(&scene.ground_truth.valid) {
        for (p, &v) in row.iter_mut().zip(valid) {
            if v {
                p[0] -= shift[0];
                p[1] -= shift[1];
            }
        }
    }
    if let Some(g) = &mut scene.occupancy {
        g.origin[0] -= shift[0];
        g.origin[1] -= shift[1];
    }
    scene.offset[0] += shift[0];
    scene.offset[1] += shift[1];
}

/// The anchor index [`cap_agents`] draws for a scene of `n` agents.
pub fn draw_anchor(n: usize, seed: u64) -> usize {
    rng_from_seed(seed).random_range(0..n)
}

/// Keeps at most `n_max` agents: a uniformly drawn anchor and its nearest
/// neighbours by distance between last observed positions. Selected agents
/// keep their original relative order.
pub fn cap_agents(scene: &Scene, n_max: usize, seed: u64) -> Result<Scene> {
    if n_max == 0 {
        return Err(Error::InvalidArgument("n_max must be at least 1".into()));
    }
    let n = scene.num_agents();
    if n <= n_max {
        return Ok(scene.clone());
    }
    let anchor = draw_anchor(n, seed);
    let cur = scene.current();
    let pos: Vec<[f64; 2]> = scene
        .agents
        .iter()
        .map(|a| a.last_observed(cur).map_or([f64::INFINITY; 2], |(_, p)| p))
        .collect();
    let dist = |i: usize| {
        if i == anchor {
            -1.0
        } else {
            let d = math::hypot(pos[i][0] - pos[anchor][0], pos[i][1] - pos[anchor][1]);
            if d.is_nan() { f64::INFINITY } else { d }
        }
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b)));
    let mut keep = order[..n_max].to_vec();
    keep.sort_unstable();
    Ok(scene.select_agents(&keep))
}

/// Minimum-cost one-to-one assignment of `min(rows, cols)` pairs.
///
/// The matrix is padded to square with a constant, which shifts every
/// complete assignment by the same amount and therefore leaves the optimum
/// unchanged. Pairs are returned sorted by row.
pub fn hungarian_associate(costs: &[Vec<f64>]) -> Result<Vec<(usize, usize)>> {
    let rows = costs.len();
    let cols = costs.first().map_or(0, Vec::len);
    if costs.iter().any(|r| r.len() != cols) {
        return Err(Error::InvalidArgument("ragged cost matrix".into()));
    }
    if costs.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::InvalidArgument("cost matrix has non-finite entries".into()));
    }
    if rows == 0 || cols == 0 {
        return Ok(Vec::new());
    }
    let n = rows.max(cols);
    let cost = |i: usize, j: usize| if i < rows && j < cols { costs[i][j] } else { 0.0 };

    // Shortest augmenting path with row/column potentials, 1-based with a
    // virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut assigned = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        assigned[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = assigned[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[assigned[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if assigned[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            assigned[j0] = assigned[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=n)
        .filter(|&j| assigned[j] != 0 && assigned[j] - 1 < rows && j - 1 < cols)
        .map(|j| (assigned[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    Ok(pairs)
}

pub fn assignment_cost(costs: &[Vec<f64>], pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| costs[i][j]).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub track_id: usize,
    pub position: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Label {
    pub id: String,
    pub position: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Association {
    /// Per frame, per detection: index of the matched label in that frame.
    pub matches: Vec<Vec<Option<usize>>>,
    /// Label id per detection track, by majority over matched frames
    /// (ties go to the lexicographically smallest id).
    pub track_labels: BTreeMap<usize, String>,
}

/// Per-frame Hungarian matching on Euclidean distance. Pairs farther apart
/// than `gate` are never matched.
pub fn associate_detections(detections: &[Vec<Detection>], labels: &[Vec<Label>], gate: f64) -> Result<Association> {
    if detections.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} detection frames vs {} label frames",
            detections.len(),
            labels.len()
        )));
    }
    let mut matches = Vec::with_capacity(detections.len());
    let mut votes: BTreeMap<usize, BTreeMap<String, usize>> = BTreeMap::new();
    for (dets, labs) in detections.iter().zip(labels) {
        let dist: Vec<Vec<f64>> = dets
            .iter()
            .map(|d| {
                labs.iter()
                    .map(|l| math::hypot(d.position[0] - l.position[0], d.position[1] - l.position[1]))
                    .collect()
            })
            .collect();
        // Gated pairs get a cost larger than any admissible assignment, so
        // the matcher maximises the number of admissible pairs first.
        let sentinel = gate * (dets.len().max(labs.len()) as f64 + 1.0) + 1.0;
        let costs: Vec<Vec<f64>> = dist
            .iter()
            .map(|row| row.iter().map(|&d| if d <= gate { d } else { sentinel }).collect())
            .collect();
        let mut frame = vec![None; dets.len()];
        if !labs.is_empty() {
            for (i, j) in hungarian_associate(&costs)? {
                if dist[i][j] <= gate {
                    frame[i] = Some(j);
                    *votes.entry(dets[i].track_id).or_default().entry(labs[j].id.clone()).or_default() += 1;
                }
            }
        }
        matches.push(frame);
    }
    let track_labels = votes
        .into_iter()
        .map(|(track, counts)| {
            let best = counts.iter().fold((None::<&String>, 0usize), |acc, (id, &c)| if c > acc.1 { (Some(id), c) } else { acc });
            (track, best.0.cloned().unwrap_or_default())
        })
        .collect();
    Ok(Association { matches, track_labels })
}
