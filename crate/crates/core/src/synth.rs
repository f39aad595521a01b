//! Deterministic social-force scenes with walking skeletons.
//!
//! Agents steer toward goals at a preferred speed, relax their velocity
//! toward it and are pushed apart by `A * exp((r - d) / B)`. Each agent
//! carries a 33-joint skeleton whose torso lean and limb swing scale with
//! speed, so a single frame of keypoints carries both heading and speed.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::math;
use crate::numerics::{rng_from_seed, Rng};
use crate::pose::{self, Skeleton3D};
use crate::scene::{self, Scene, SceneTracks, Track, TrackDataset, TrackFrame};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    /// Inclusive range of agents per scene.
    pub agents: (usize, usize),
    /// Preferred walking speed range, m/s.
    pub speed: (f64, f64),
    pub repulsion_gain: f64,
    pub repulsion_range: f64,
    pub repulsion_radius: f64,
    /// Velocity relaxation time, s.
    pub relaxation_time: f64,
    pub max_speed: f64,
    /// `[x_min, x_max, y_min, y_max]`, metres.
    pub arena: [f64; 4],
    /// Optional fixed goals; when empty goals are drawn inside the arena.
    pub goals: Vec<[f64; 2]>,
    pub goal_tolerance: f64,
    pub keypoint_probability: f64,
    /// Fraction of agents that enter the scene after its first frame.
    pub first_detection_fraction: f64,
    pub stationary_fraction: f64,
    /// Per-frame probability that an observed agent is missed entirely.
    pub occlusion_probability: f64,
    pub head_noise: f64,
    pub frames: usize,
    pub rate_hz: f64,
    pub substeps: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            agents: (3, 8),
            speed: (0.5, 1.5),
            repulsion_gain: 2.0,
            repulsion_range: 0.35,
            repulsion_radius: 2.0,
            relaxation_time: 0.5,
            max_speed: 2.0,
            arena: [-6.0, 6.0, -6.0, 6.0],
            goals: Vec::new(),
            goal_tolerance: 0.5,
            keypoint_probability: 0.5,
            first_detection_fraction: 0.3,
            stationary_fraction: 0.1,
            occlusion_probability: 0.05,
            head_noise: 0.05,
            frames: 40,
            rate_hz: 3.0,
            substeps: 10,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.agents.0 == 0 || self.agents.0 > self.agents.1 {
            return bad(format!("agent range {:?}", self.agents));
        }
        if !(self.speed.0 >= 0.0 && self.speed.0 <= self.speed.1) {
            return bad(format!("speed range {:?}", self.speed));
        }
        if !(self.arena[0] < self.arena[1] && self.arena[2] < self.arena[3]) {
            return bad(format!("arena {:?}", self.arena));
        }
        for (name, p) in [
            ("keypoint_probability", self.keypoint_probability),
            ("first_detection_fraction", self.first_detection_fraction),
            ("stationary_fraction", self.stationary_fraction),
            ("occlusion_probability", self.occlusion_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if !(self.rate_hz > 0.0) || self.substeps == 0 || self.frames == 0 {
            return bad("rate, substeps and frames must be positive".into());
        }
        if !(self.relaxation_time > 0.0 && self.repulsion_range > 0.0 && self.max_speed > 0.0) {
            return bad("relaxation time, repulsion range and max speed must be positive".into());
        }
        Ok(())
    }
}

/// Gait and posture of one agent at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BodyState {
    pub position: [f64; 2],
    pub heading: f64,
    pub head_yaw: f64,
    pub speed: f64,
    pub phase: f64,
}

/// Forward lean per m/s of walking speed, radians.
pub const LEAN_GAIN: f64 = 0.12;
pub const LEG_SWING_GAIN: f64 = 0.3;
pub const ARM_SWING_GAIN: f64 = 0.25;
/// Stride frequency per m/s, Hz.
pub const CADENCE_GAIN: f64 = 0.9;

const HEAD_JOINTS: core::ops::RangeInclusive<usize> = 0..=10;
const LEFT_ARM: [usize; 5] = [13, 15, 17, 19, 21];
const RIGHT_ARM: [usize; 5] = [14, 16, 18, 20, 22];
const LEFT_LEG: [usize; 4] = [25, 27, 29, 31];
const RIGHT_LEG: [usize; 4] = [26, 28, 30, 32];

/// Rotation in the body's sagittal plane (about the lateral axis through
/// `pivot`); positive angles move points below the pivot forward.
fn swing(p: [f64; 3], pivot: [f64; 3], angle: f64) -> [f64; 3] {
    let (s, c) = (math::sin(angle), math::cos(angle));
    let (dx, dz) = (p[0] - pivot[0], p[2] - pivot[2]);
    [pivot[0] + c * dx - s * dz, p[1], pivot[2] + s * dx + c * dz]
}

/// World-frame skeleton for a body state. Limb swing and lean are rigid
/// rotations about joints of the reference pose, so the bone lengths of the
/// limbs and torso match the reference exactly.
pub fn skeleton(state: &BodyState) -> Skeleton3D {
    let mut j = Skeleton3D::reference().joints;
    let v = state.speed;
    let leg = LEG_SWING_GAIN * v * math::sin(state.phase);
    let arm = ARM_SWING_GAIN * v * math::sin(state.phase);
    for (limb, pivot, angle) in [
        (&LEFT_LEG[..], j[pose::LEFT_HIP], leg),
        (&RIGHT_LEG[..], j[pose::RIGHT_HIP], -leg),
        (&LEFT_ARM[..], j[pose::LEFT_SHOULDER], -arm),
        (&RIGHT_ARM[..], j[pose::RIGHT_SHOULDER], arm),
    ] {
        for &i in limb {
            j[i] = swing(j[i], pivot, angle);
        }
    }
    // upper body leans forward about the hip axis; both hips lie on it
    let hip = [0.0, 0.0, j[pose::LEFT_HIP][2]];
    for p in j.iter_mut().take(23) {
        *p = swing(*p, hip, -LEAN_GAIN * v);
    }
    // head turn about the vertical axis through the neck, after the lean so
    // the ears-to-eyes direction turns by exactly the requested angle
    let turn = math::wrap_angle(state.head_yaw - state.heading);
    let (s, c) = (math::sin(turn), math::cos(turn));
    let neck = midpoint2(j[pose::LEFT_SHOULDER], j[pose::RIGHT_SHOULDER]);
    for i in HEAD_JOINTS {
        let [x, y, z] = j[i];
        let (dx, dy) = (x - neck[0], y - neck[1]);
        j[i] = [neck[0] + c * dx - s * dy, neck[1] + s * dx + c * dy, z];
    }
    Skeleton3D { joints: j }
        .rotated_z(state.heading)
        .translated([state.position[0], state.position[1], 0.0])
}

fn midpoint2(a: [f64; 3], b: [f64; 3]) -> [f64; 2] {
    [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]
}

#[derive(Clone, Debug)]
struct Agent {
    pos: [f64; 2],
    vel: [f64; 2],
    goal: [f64; 2],
    pref_speed: f64,
    stationary: bool,
    heading: f64,
    phase: f64,
    entry: usize,
}

fn random_point(rng: &mut Rng, arena: &[f64; 4], margin: f64) -> [f64; 2] {
    [
        rng.random_range(arena[0] + margin..arena[1] - margin),
        rng.random_range(arena[2] + margin..arena[3] - margin),
    ]
}

fn draw_goal(rng: &mut Rng, cfg: &SynthConfig, pos: [f64; 2]) -> [f64; 2] {
    for _ in 0..32 {
        let g = if cfg.goals.is_empty() {
            random_point(rng, &cfg.arena, 0.5)
        } else {
            cfg.goals[rng.random_range(0..cfg.goals.len())]
        };
        if math::hypot(g[0] - pos[0], g[1] - pos[1]) > 2.0 * cfg.goal_tolerance {
            return g;
        }
    }
    [cfg.arena[0] + cfg.arena[1] - pos[0], cfg.arena[2] + cfg.arena[3] - pos[1]]
}

fn unit(v: [f64; 2]) -> [f64; 2] {
    let n = math::hypot(v[0], v[1]);
    if n > 0.0 { [v[0] / n, v[1] / n] } else { [0.0; 2] }
}

/// Advances all agents by one frame with `cfg.substeps` explicit Euler steps.
fn step(agents: &mut [Agent], cfg: &SynthConfig, rng: &mut Rng) {
    let dt = 1.0 / (cfg.rate_hz * cfg.substeps as f64);
    for _ in 0..cfg.substeps {
        let accel: Vec<[f64; 2]> = (0..agents.len())
            .map(|i| {
                let a = &agents[i];
                if a.stationary {
                    return [0.0; 2];
                }
                let dir = unit([a.goal[0] - a.pos[0], a.goal[1] - a.pos[1]]);
                let mut f = [
                    (dir[0] * a.pref_speed - a.vel[0]) / cfg.relaxation_time,
                    (dir[1] * a.pref_speed - a.vel[1]) / cfg.relaxation_time,
                ];
                for (k, b) in agents.iter().enumerate() {
                    if k == i {
                        continue;
                    }
                    let d = [a.pos[0] - b.pos[0], a.pos[1] - b.pos[1]];
                    let dist = math::hypot(d[0], d[1]).max(1e-6);
                    let mag = cfg.repulsion_gain * math::exp((cfg.repulsion_radius - dist) / cfg.repulsion_range);
                    f[0] += mag * d[0] / dist;
                    f[1] += mag * d[1] / dist;
                }
                f
            })
            .collect();
        for (a, f) in agents.iter_mut().zip(accel) {
            if a.stationary {
                continue;
            }
            a.vel[0] += dt * f[0];
            a.vel[1] += dt * f[1];
            let s = math::hypot(a.vel[0], a.vel[1]);
            if s > cfg.max_speed {
                a.vel = [a.vel[0] * cfg.max_speed / s, a.vel[1] * cfg.max_speed / s];
            }
            a.pos[0] = (a.pos[0] + dt * a.vel[0]).clamp(cfg.arena[0], cfg.arena[1]);
            a.pos[1] = (a.pos[1] + dt * a.vel[1]).clamp(cfg.arena[2], cfg.arena[3]);
            a.phase += 2.0 * core::f64::consts::PI * CADENCE_GAIN * math::hypot(a.vel[0], a.vel[1]) * dt;
            if math::hypot(a.goal[0] - a.pos[0], a.goal[1] - a.pos[1]) < cfg.goal_tolerance {
                a.goal = draw_goal(rng, cfg, a.pos);
            }
        }
    }
    for a in agents.iter_mut() {
        let s = math::hypot(a.vel[0], a.vel[1]);
        if s > 1e-9 {
            a.heading = math::atan2(a.vel[1], a.vel[0]);
        }
    }
}

fn spawn(rng: &mut Rng, cfg: &SynthConfig) -> Agent {
    let pos = random_point(rng, &cfg.arena, 0.5);
    let goal = draw_goal(rng, cfg, pos);
    let stationary = rng.random_bool(cfg.stationary_fraction);
    let pref_speed = if stationary { 0.0 } else { rng.random_range(cfg.speed.0..=cfg.speed.1) };
    let dir = unit([goal[0] - pos[0], goal[1] - pos[1]]);
    let heading = if stationary {
        rng.random_range(-core::f64::consts::PI..core::f64::consts::PI)
    } else {
        math::atan2(dir[1], dir[0])
    };
    let late = rng.random_bool(cfg.first_detection_fraction);
    let entry = if late && cfg.frames > 1 { rng.random_range(1..cfg.frames) } else { 0 };
    Agent {
        pos,
        vel: [dir[0] * pref_speed, dir[1] * pref_speed],
        goal,
        pref_speed,
        stationary,
        heading,
        phase: rng.random_range(0.0..2.0 * core::f64::consts::PI),
        entry,
    }
}

/// Simulates one scene whose agents start at the given states. Used for
/// the random scenes of [`generate`] and for hand-built scenarios.
pub fn simulate(cfg: &SynthConfig, scene_id: &str, initial: Vec<SpawnState>, seed: u64) -> Result<SceneTracks> {
    cfg.validate()?;
    let mut rng = rng_from_seed(seed);
    let mut agents: Vec<Agent> = initial
        .into_iter()
        .map(|s| {
            let dir = unit([s.goal[0] - s.position[0], s.goal[1] - s.position[1]]);
            Agent {
                pos: s.position,
                vel: [dir[0] * s.speed, dir[1] * s.speed],
                goal: s.goal,
                pref_speed: s.speed,
                stationary: s.speed == 0.0,
                heading: if s.speed == 0.0 { s.heading } else { math::atan2(dir[1], dir[0]) },
                phase: 0.0,
                entry: s.entry,
            }
        })
        .collect();
    run(cfg, scene_id, &mut agents, &mut rng)
}

/// Initial condition for [`simulate`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpawnState {
    pub position: [f64; 2],
    pub goal: [f64; 2],
    pub speed: f64,
    /// Used only for stationary agents.
    pub heading: f64,
    pub entry: usize,
}

fn run(cfg: &SynthConfig, scene_id: &str, agents: &mut [Agent], rng: &mut Rng) -> Result<SceneTracks> {
    let noise = Normal::new(0.0, cfg.head_noise.max(0.0)).map_err(|e| Error::Config(format!("head noise: {e}")))?;
    let period = 1.0 / cfg.rate_hz;
    let mut frames: Vec<Vec<TrackFrame>> = vec![Vec::new(); agents.len()];
    for f in 0..cfg.frames {
        if f > 0 {
            step(agents, cfg, rng);
        }
        for (i, a) in agents.iter().enumerate() {
            // draws happen for every agent and frame so one agent's
            // visibility does not shift another agent's random stream
            let occluded = rng.random_bool(cfg.occlusion_probability);
            let has_kp = rng.random_bool(cfg.keypoint_probability);
            let look = noise.sample(rng);
            if f < a.entry || (f > a.entry && occluded) {
                continue;
            }
            let keypoints = (f == a.entry || has_kp).then(|| {
                let state = BodyState {
                    position: a.pos,
                    heading: a.heading,
                    head_yaw: math::wrap_angle(a.heading + look),
                    speed: math::hypot(a.vel[0], a.vel[1]),
                    phase: a.phase,
                };
                (skeleton(&state).to_flat(), state.head_yaw)
            });
            frames[i].push(TrackFrame {
                frame: f as i64,
                time: f as f64 * period,
                position: a.pos,
                keypoints: keypoints.map(|k| k.0),
                head: keypoints.map(|k| k.1),
            });
        }
    }
    Ok(SceneTracks {
        scene_id: scene_id.into(),
        tracks: frames
            .into_iter()
            .enumerate()
            .filter(|(_, f)| !f.is_empty())
            .map(|(i, frames)| Track {
                agent_id: format!("a{i:02}"),
                frames,
            })
            .collect(),
        occupancy: None,
    })
}

/// Generates `n_scenes` independent scenes. Scene `s` depends only on
/// `cfg` and `s`, so prefixes of a larger run are reproducible.
pub fn generate(cfg: &SynthConfig, n_scenes: usize) -> Result<TrackDataset> {
    cfg.validate()?;
    if n_scenes == 0 {
        return Err(Error::InvalidArgument("n_scenes must be at least 1".into()));
    }
    let mut scenes = Vec::with_capacity(n_scenes);
    for s in 0..n_scenes {
        let mut rng = rng_from_seed(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(s as u64));
        let n = rng.random_range(cfg.agents.0..=cfg.agents.1);
        let mut agents: Vec<Agent> = (0..n).map(|_| spawn(&mut rng, cfg)).collect();
        scenes.push(run(cfg, &format!("synth-{s:04}"), &mut agents, &mut rng)?);
    }
    Ok(TrackDataset {
        rate_hz: cfg.rate_hz,
        scenes,
    })
}

/// Windows whose current timestep is some agent's first observation. The
/// newly detected agent is moved to index 0 of each returned scene.
pub fn first_detection_windows(ds: &TrackDataset, history: usize, future: usize) -> Vec<Scene> {
    let mut out = Vec::new();
    let period = 1.0 / ds.rate_hz;
    for s in &ds.scenes {
        for track in &s.tracks {
            let Some(first) = track.frames.first() else { continue };
            if first.keypoints.is_none() || first.frame < history as i64 {
                continue;
            }
            let start = first.frame - history as i64;
            let Some(scene) = scene::window_at(s, start, history, future, period) else {
                continue;
            };
            let Some(target) = scene.agent_ids.iter().position(|id| *id == track.agent_id) else {
                continue;
            };
            if !scene.ground_truth.valid[target].iter().any(|&v| v) {
                continue;
            }
            let mut order = vec![target];
            order.extend((0..scene.num_agents()).filter(|&i| i != target));
            out.push(scene.select_agents(&order));
        }
    }
    out
}
