use hst_core::pose::{head_orientation, Skeleton3D};
use hst_core::scene::TrackDataset;
use hst_core::synth::*;
use proptest::prelude::*;

fn quiet(cfg: SynthConfig) -> SynthConfig {
    SynthConfig {
        occlusion_probability: 0.0,
        keypoint_probability: 1.0,
        head_noise: 0.0,
        ..cfg
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[test]
fn head_on_agents_keep_apart() {
    let cfg = quiet(SynthConfig {
        frames: 60,
        ..SynthConfig::default()
    });
    let spawn = |x: f64, y: f64, gx: f64| SpawnState {
        position: [x, y],
        goal: [gx, y],
        speed: 1.2,
        heading: 0.0,
        entry: 0,
    };
    let s = simulate(&cfg, "head-on", vec![spawn(-5.0, 0.05, 5.5), spawn(5.0, -0.05, -5.5)], 1).unwrap();
    let (a, b) = (&s.tracks[0].frames, &s.tracks[1].frames);
    let closest = a.iter().zip(b).map(|(p, q)| dist(p.position, q.position)).fold(f64::INFINITY, f64::min);
    assert!(closest > 0.3, "closest approach {closest}");
    // they did get close enough to interact
    assert!(closest < 3.0, "closest approach {closest}");
}

#[test]
fn lone_walker_covers_a_third_of_a_metre_per_frame() {
    let cfg = quiet(SynthConfig {
        arena: [-50.0, 50.0, -50.0, 50.0],
        frames: 30,
        ..SynthConfig::default()
    });
    let s = simulate(
        &cfg,
        "walk",
        vec![SpawnState {
            position: [0.0, 0.0],
            goal: [40.0, 0.0],
            speed: 1.0,
            heading: 0.0,
            entry: 0,
        }],
        2,
    )
    .unwrap();
    for w in s.tracks[0].frames.windows(2) {
        assert!((dist(w[0].position, w[1].position) - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn fixed_seed_is_reproducible() {
    let cfg = SynthConfig {
        seed: 42,
        ..SynthConfig::default()
    };
    let a = generate(&cfg, 4).unwrap();
    let b = generate(&cfg, 4).unwrap();
    assert_eq!(format!("{a:?}"), format!("{b:?}"));
    let c = generate(&SynthConfig { seed: 43, ..cfg }, 4).unwrap();
    assert_ne!(a, c);
}

#[test]
fn config_validation() {
    assert!(SynthConfig::default().validate().is_ok());
    assert!(SynthConfig {
        keypoint_probability: 1.5,
        ..SynthConfig::default()
    }
    .validate()
    .is_err());
    assert!(SynthConfig {
        agents: (3, 2),
        ..SynthConfig::default()
    }
    .validate()
    .is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn keypoints_encode_head_yaw_and_stay_in_arena(seed in any::<u64>()) {
        let cfg = SynthConfig { seed, ..SynthConfig::default() };
        let ds = generate(&cfg, 2).unwrap();
        for s in &ds.scenes {
            for t in &s.tracks {
                for f in &t.frames {
                    prop_assert!(f.position[0] >= cfg.arena[0] && f.position[0] <= cfg.arena[1]);
                    prop_assert!(f.position[1] >= cfg.arena[2] && f.position[1] <= cfg.arena[3]);
                    if let Some(k) = f.keypoints {
                        let yaw = head_orientation(&Skeleton3D::from_flat(&k).unwrap()).unwrap();
                        let d = hst_core::math::wrap_angle(yaw - f.head.unwrap());
                        prop_assert!(d.abs() < 1e-6);
                    }
                }
            }
        }
    }
}

#[test]
fn skeleton_heading_and_stationary_gait() {
    let base = BodyState {
        position: [1.0, 2.0],
        heading: 0.8,
        head_yaw: 0.8,
        speed: 0.0,
        phase: 0.0,
    };
    let a = skeleton(&base);
    let b = skeleton(&BodyState { phase: 2.0, ..base });
    for (p, q) in a.joints.iter().zip(&b.joints) {
        for d in 0..3 {
            assert!((p[d] - q[d]).abs() < 1e-15);
        }
    }
    let yaw = head_orientation(&a).unwrap();
    assert!((yaw - 0.8).abs() < 1e-12);
    let walking = skeleton(&BodyState { speed: 1.2, phase: 1.0, ..base });
    let moving = skeleton(&BodyState { speed: 1.2, phase: 2.5, ..base });
    assert!(walking.joints[27] != moving.joints[27]);
}

#[test]
fn skeleton_preserves_limb_lengths() {
    let r = Skeleton3D::reference();
    let k = skeleton(&BodyState {
        position: [0.0, 0.0],
        heading: -2.0,
        head_yaw: -2.0,
        speed: 1.4,
        phase: 0.9,
    });
    for &(a, b) in hst_core::pose::BONES.iter() {
        assert!((k.bone_length(a, b) - r.bone_length(a, b)).abs() < 1e-12, "bone {a}-{b}");
    }
}

fn first_detection_set(seeds: core::ops::Range<u64>) -> Vec<hst_core::scene::Scene> {
    let mut out = Vec::new();
    for seed in seeds {
        let cfg = SynthConfig {
            seed,
            first_detection_fraction: 0.6,
            ..SynthConfig::default()
        };
        out.extend(first_detection_windows(&generate(&cfg, 4).unwrap(), 6, 12));
    }
    out
}

#[test]
fn first_detection_signature() {
    let scenes: Vec<_> = first_detection_set(0..40).into_iter().take(100).collect();
    assert_eq!(scenes.len(), 100);
    for s in &scenes {
        s.validate().unwrap();
        let target = &s.agents[0];
        assert_eq!(target.observed_steps(6), 1);
        assert!(target.position_valid[6] && target.keypoints_valid[6] && target.head_valid[6]);
        assert!(s.ground_truth.valid[0].iter().any(|&v| v));
    }
}

fn track_velocity(ds: &TrackDataset, scene: usize, agent: &str, frame: i64) -> Option<[f64; 2]> {
    let t = ds.scenes[scene].tracks.iter().find(|t| t.agent_id == agent)?;
    let i = t.frames.iter().position(|f| f.frame == frame)?;
    let (a, b) = (t.frames.get(i)?, t.frames.get(i + 1)?);
    if b.frame != a.frame + 1 {
        return None;
    }
    Some([(b.position[0] - a.position[0]) * 3.0, (b.position[1] - a.position[1]) * 3.0])
}

/// Keypoints relative to the agent's ground position, with a bias column.
fn features(k: &[f64], p: [f64; 2]) -> Vec<f64> {
    let mut x: Vec<f64> = k.chunks(3).flat_map(|j| [j[0] - p[0], j[1] - p[1], j[2]]).collect();
    x.push(1.0);
    x
}

/// Ridge least squares through the normal equations.
fn fit_linear(xs: &[Vec<f64>], ys: &[f64]) -> Vec<f64> {
    let d = xs[0].len();
    let mut a = vec![vec![0.0; d + 1]; d];
    for (x, &y) in xs.iter().zip(ys) {
        for i in 0..d {
            for j in 0..d {
                a[i][j] += x[i] * x[j];
            }
            a[i][d] += x[i] * y;
        }
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += 1e-8;
    }
    for c in 0..d {
        let p = (c..d).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        for r in 0..d {
            if r != c {
                let f = a[r][c] / a[c][c];
                for k in c..=d {
                    a[r][k] -= f * a[c][k];
                }
            }
        }
    }
    (0..d).map(|i| a[i][d] / a[i][i]).collect()
}

fn r_squared(pred: &[f64], y: &[f64]) -> f64 {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_res: f64 = pred.iter().zip(y).map(|(p, y)| (y - p).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|y| (y - mean).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

#[test]
fn velocity_is_linearly_decodable_from_first_detection_keypoints() {
    // probe trained on ordinary frames of some seeds ...
    let mut xs = Vec::new();
    let mut vs = Vec::new();
    for seed in 100..130 {
        let ds = generate(&SynthConfig { seed, ..SynthConfig::default() }, 4).unwrap();
        for (si, s) in ds.scenes.iter().enumerate() {
            for t in &s.tracks {
                for f in &t.frames {
                    if let (Some(k), Some(v)) = (f.keypoints, track_velocity(&ds, si, &t.agent_id, f.frame)) {
                        xs.push(features(&k, f.position));
                        vs.push(v);
                    }
                }
            }
        }
    }
    assert!(xs.len() > 1000);
    let wx = fit_linear(&xs, &vs.iter().map(|v| v[0]).collect::<Vec<_>>());
    let wy = fit_linear(&xs, &vs.iter().map(|v| v[1]).collect::<Vec<_>>());

    // ... evaluated on first-detection frames of other seeds
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for seed in 0..30 {
        let cfg = SynthConfig {
            seed,
            first_detection_fraction: 0.6,
            ..SynthConfig::default()
        };
        let ds = generate(&cfg, 4).unwrap();
        for (si, s) in ds.scenes.iter().enumerate() {
            for t in &s.tracks {
                let f = &t.frames[0];
                if f.frame == 0 {
                    continue;
                }
                let Some(v) = track_velocity(&ds, si, &t.agent_id, f.frame) else { continue };
                let x = features(&f.keypoints.unwrap(), f.position);
                let dot = |w: &[f64]| w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
                pred.push([dot(&wx), dot(&wy)]);
                truth.push(v);
            }
        }
    }
    assert!(truth.len() >= 50, "{} first-detection frames", truth.len());
    let flat_pred: Vec<f64> = pred.iter().flatten().copied().collect();
    let flat_truth: Vec<f64> = truth.iter().flatten().copied().collect();
    let r2 = r_squared(&flat_pred, &flat_truth);
    assert!(r2 > 0.9, "R^2 = {r2}");
}
