//! Run configuration: a TOML file with `[data]`, `[model]`, `[train]`,
//! `[eval]` and `[ablate]` tables. Every key is optional; see
//! `docs/formats.md` for the schema.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use hst_core::model::{ModelConfig, Protocol};
use hst_core::objective::ModeSelection;
use hst_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::fsio;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub protocol: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ff_width: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder_layers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decoder_layers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub modes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub history: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub future: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub period: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_agents: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub use_keypoints: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub use_head: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub use_occupancy: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub full_self_attention: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interaction: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub agent_self_alignment: Option<bool>,
}

impl ModelSection {
    /// Overlays the set keys on the named protocol's defaults.
    pub fn resolve(&self) -> Result<ModelConfig> {
        let protocol = match &self.protocol {
            Some(p) => Protocol::parse(p)?,
            None => Protocol::Jrdb,
        };
        let mut c = match protocol {
            Protocol::Eth => ModelConfig::eth(),
            _ => ModelConfig::jrdb(),
        };
        c.protocol = protocol;
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(
            width, heads, ff_width, encoder_layers, decoder_layers, modes, history, future, period, max_agents,
            dropout, use_keypoints, use_head, use_occupancy, patch_size, full_self_attention, interaction,
            agent_self_alignment
        );
        c.validate()?;
        Ok(c)
    }

    pub fn from_config(c: &ModelConfig) -> Self {
        ModelSection {
            protocol: Some(c.protocol.name().into()),
            width: Some(c.width),
            heads: Some(c.heads),
            ff_width: Some(c.ff_width),
            encoder_layers: Some(c.encoder_layers),
            decoder_layers: Some(c.decoder_layers),
            modes: Some(c.modes),
            history: Some(c.history),
            future: Some(c.future),
            period: Some(c.period),
            max_agents: Some(c.max_agents),
            dropout: Some(c.dropout),
            use_keypoints: Some(c.use_keypoints),
            use_head: Some(c.use_head),
            use_occupancy: Some(c.use_occupancy),
            patch_size: Some(c.patch_size),
            full_self_attention: Some(c.full_self_attention),
            interaction: Some(c.interaction),
            agent_self_alignment: Some(c.agent_self_alignment),
        }
    }
}

/// `ModelConfig` as a standalone `[model]` table.
pub fn model_config_to_toml(c: &ModelConfig) -> String {
    #[derive(Serialize)]
    struct Wrapper {
        model: ModelSection,
    }
    toml::to_string(&Wrapper {
        model: ModelSection::from_config(c),
    })
    .expect("model section serializes")
}

pub fn model_config_from_toml(text: &str) -> Result<ModelConfig> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Wrapper {
        model: ModelSection,
    }
    let w: Wrapper = toml::from_str(text)?;
    w.model.resolve()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Training track file; also the test source when `test_tracks` is unset.
    pub tracks: Option<PathBuf>,
    pub test_tracks: Option<PathBuf>,
    /// Directory of `<scene_id>.occ` grids.
    pub occupancy_dir: Option<PathBuf>,
    /// Source frame rate; inferred from timestamps when unset.
    pub rate_hz: Option<f64>,
    /// Frames between consecutive window starts.
    pub stride: usize,
    /// Fraction of scenes (by sorted scene id, taken from the end) held out
    /// when no separate test file is given.
    pub test_fraction: f64,
    /// Drop position and head observations that lack keypoints.
    pub feature_parity: bool,
    /// Keep at most this many training windows; 0 keeps all.
    pub max_train_windows: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            tracks: None,
            test_tracks: None,
            occupancy_dir: None,
            rate_hz: None,
            stride: 1,
            test_fraction: 0.2,
            feature_parity: false,
            max_train_windows: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub final_lr_fraction: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub eval_interval: usize,
    pub checkpoint: PathBuf,
    /// Continue from this checkpoint instead of a fresh initialization.
    pub resume: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            final_lr_fraction: t.final_lr_fraction,
            warmup_steps: t.warmup_steps,
            clip_norm: t.clip_norm,
            seed: t.seed,
            eval_interval: t.eval_interval,
            checkpoint: PathBuf::from("model.ckpt"),
            resume: None,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            final_lr_fraction: self.final_lr_fraction,
            warmup_steps: self.warmup_steps,
            clip_norm: self.clip_norm,
            seed: self.seed,
            eval_interval: self.eval_interval,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// `per-agent` or `joint`.
    pub selection: String,
    /// Also report metrics grouped by consecutive observed input steps.
    pub consecutive_breakdown: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            selection: "per-agent".into(),
            consecutive_breakdown: true,
        }
    }
}

impl EvalSection {
    pub fn mode_selection(&self) -> Result<ModeSelection> {
        match self.selection.as_str() {
            "per-agent" => Ok(ModeSelection::PerAgent),
            "joint" => Ok(ModeSelection::Joint),
            s => bail!("unknown mode selection '{s}', expected per-agent or joint"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub variants: Vec<String>,
    pub seeds: Vec<u64>,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            variants: vec!["position-only".into(), "head".into(), "keypoints".into()],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
    /// Output directory; relative output paths resolve against it.
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Parses a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fsio::read_to_string(path)?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut cfg.data.tracks, &mut cfg.data.test_tracks, &mut cfg.data.occupancy_dir, &mut cfg.train.resume, &mut cfg.out]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        self.model.resolve()
    }

    /// Sets the training seed, which also seeds initialization and agent capping.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    /// `p` if absolute, otherwise under the output directory.
    pub fn output_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() { p.to_path_buf() } else { self.out_dir().join(p) }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_path(&self.train.checkpoint)
    }

    pub fn tracks_path(&self) -> Result<&Path> {
        self.data.tracks.as_deref().ok_or_else(|| anyhow!("no track file configured ([data] tracks)"))
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        self.train.train_config().validate()?;
        self.eval.mode_selection()?;
        if self.data.stride == 0 {
            bail!("[data] stride must be at least 1");
        }
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            bail!("[data] test_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}
