//! Random windows for model tests.
#![allow(dead_code)]

use hst_core::model::{ModelConfig, Protocol};
use hst_core::scene::{AgentFeatures, GroundTruth, Scene};
use rand::Rng;

pub type R = rand_chacha::ChaCha8Rng;

pub fn small() -> ModelConfig {
    ModelConfig {
        protocol: Protocol::Custom,
        width: 16,
        heads: 2,
        ff_width: 32,
        encoder_layers: 2,
        decoder_layers: 1,
        modes: 3,
        dropout: 0.0,
        ..ModelConfig::jrdb()
    }
}

pub fn random_agent(rng: &mut R, cfg: &ModelConfig, observed: &[usize]) -> AgentFeatures {
    let mut a = AgentFeatures::empty(cfg.steps());
    let start = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
    let vel = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
    for &t in observed {
        let p = [start[0] + vel[0] * t as f64, start[1] + vel[1] * t as f64];
        a.set_position(t, p);
        if rng.random_bool(0.7) {
            let mut k = [0.0; 99];
            for (j, v) in k.iter_mut().enumerate() {
                *v = match j % 3 {
                    0 => p[0] + rng.random_range(-0.3..0.3),
                    1 => p[1] + rng.random_range(-0.3..0.3),
                    _ => rng.random_range(0.0..1.8),
                };
            }
            a.set_keypoints(t, k);
            a.set_head(t, rng.random_range(-3.0..3.0));
        }
    }
    a
}

pub fn random_scene(rng: &mut R, cfg: &ModelConfig, agents: usize) -> Scene {
    let cur = cfg.history;
    let mut list = Vec::new();
    let mut gt = GroundTruth::empty(agents, cfg.future);
    for i in 0..agents {
        let observed: Vec<usize> = (0..=cur).filter(|&t| t == cur || rng.random_bool(0.8)).collect();
        list.push(random_agent(rng, cfg, &observed));
        for t in 0..cfg.future {
            gt.position[i][t] = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
            gt.valid[i][t] = rng.random_bool(0.9);
        }
        gt.valid[i][0] = true;
    }
    Scene {
        scene_id: "test".into(),
        window_start: 0,
        agent_ids: (0..agents).map(|i| format!("a{i}")).collect(),
        agents: list,
        history_len: cfg.history,
        future_len: cfg.future,
        timestep_period: cfg.period,
        ground_truth: gt,
        occupancy: None,
        offset: [0.0; 2],
    }
}
