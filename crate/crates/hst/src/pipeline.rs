//! From track files to model-ready windows.

use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{bail, Result};
use hst_core::model::ModelConfig;
use hst_core::scene::{cap_agents, make_windows, subsample, Scene, TrackDataset};

use crate::config::{DataSection, RunConfig};
use crate::occupancy;
use crate::tracks;

/// Loads a track file, reports rejected tracks and unknown fields on
/// stderr, and attaches `<scene_id>.occ` grids from `occupancy_dir`.
pub fn load_dataset(path: &Path, data: &DataSection) -> Result<TrackDataset> {
    let loaded = tracks::load_tracks(path, data.rate_hz)?;
    for w in &loaded.warnings {
        eprintln!("warning: {}: {w}", path.display());
    }
    if !loaded.rejected.is_empty() {
        eprintln!("warning: {}: rejected {} track(s)", path.display(), loaded.rejected.len());
        for r in &loaded.rejected {
            eprintln!("  {}/{}: {}", r.scene_id, r.agent_id, r.reason);
        }
    }
    let mut ds = loaded.dataset;
    if let Some(dir) = &data.occupancy_dir {
        for s in &mut ds.scenes {
            let p = dir.join(format!("{}.occ", s.scene_id));
            if p.exists() {
                s.occupancy = Some(occupancy::read_occupancy(&p)?);
            }
        }
    }
    Ok(ds)
}

/// Splits by sorted scene id; the last `ceil(fraction * scenes)` scenes
/// form the second part.
pub fn split_scenes(ds: &TrackDataset, fraction: f64) -> (TrackDataset, TrackDataset) {
    let ids: BTreeSet<&str> = ds.scenes.iter().map(|s| s.scene_id.as_str()).collect();
    let n_test = (fraction * ids.len() as f64).ceil() as usize;
    let test_ids: BTreeSet<&str> = ids.iter().rev().take(n_test).copied().collect();
    let part = |test: bool| TrackDataset {
        rate_hz: ds.rate_hz,
        scenes: ds.scenes.iter().filter(|s| test_ids.contains(s.scene_id.as_str()) == test).cloned().collect(),
    };
    (part(false), part(true))
}

/// Cuts windows at the model's step rate, resampling higher-rate data into
/// every phase, caps the agent count and optionally enforces feature parity.
pub fn windows(ds: &TrackDataset, model: &ModelConfig, stride: usize, feature_parity: bool, seed: u64) -> Result<Vec<Scene>> {
    let target_hz = 1.0 / model.period;
    let phases = if (ds.rate_hz - target_hz).abs() <= 1e-6 * target_hz {
        vec![ds.clone()]
    } else if ds.rate_hz > target_hz {
        subsample(ds, ds.rate_hz, target_hz)?
    } else {
        bail!("data rate {} Hz is below the model rate {target_hz} Hz", ds.rate_hz);
    };
    let mut out = Vec::new();
    for phase in &phases {
        for w in make_windows(phase, model.history, model.future, stride)? {
            let w = if feature_parity { w.feature_parity() } else { w };
            if w.num_agents() == 0 || w.ground_truth.count_valid() == 0 {
                continue;
            }
            let capped = cap_agents(&w, model.max_agents, seed.wrapping_add(out.len() as u64))?;
            if capped.ground_truth.count_valid() > 0 {
                out.push(capped);
            }
        }
    }
    Ok(out)
}

pub struct Splits {
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
}

/// Training and test windows as configured in `[data]`.
pub fn prepare(cfg: &RunConfig, model: &ModelConfig) -> Result<Splits> {
    let data = &cfg.data;
    let ds = load_dataset(cfg.tracks_path()?, data)?;
    let (train_ds, test_ds) = match &data.test_tracks {
        Some(p) => (ds, load_dataset(p, data)?),
        None => split_scenes(&ds, data.test_fraction),
    };
    let seed = cfg.train.seed;
    let mut train = windows(&train_ds, model, data.stride, data.feature_parity, seed)?;
    if data.max_train_windows > 0 {
        train.truncate(data.max_train_windows);
    }
    let test = windows(&test_ds, model, data.stride, data.feature_parity, seed ^ 0x5445_5354)?;
    Ok(Splits { train, test })
}
