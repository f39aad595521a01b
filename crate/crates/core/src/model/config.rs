use alloc::format;

use crate::error::{Error, Result};
use crate::scene::Scene;

/// Evaluation protocol a configuration claims to follow. Named protocols
/// pin the horizons, rate, agent cap and mode count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Protocol {
    /// Robot-centric crowd data: 7 input steps, 12 future steps at 3 Hz, at
    /// most 16 agents.
    Jrdb,
    /// Top-down pedestrian benchmarks: 8 input steps, 12 future steps at
    /// 2.5 Hz, 20 modes.
    Eth,
    #[default]
    Custom,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Jrdb => "jrdb",
            Protocol::Eth => "eth",
            Protocol::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "jrdb" => Ok(Protocol::Jrdb),
            "eth" => Ok(Protocol::Eth),
            "custom" => Ok(Protocol::Custom),
            _ => Err(Error::Config(format!("unknown protocol '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub protocol: Protocol,
    /// Token width.
    pub width: usize,
    pub heads: usize,
    /// Hidden width of the feed-forward sublayers.
    pub ff_width: usize,
    /// Layers before scene cross-attention.
    pub encoder_layers: usize,
    /// Layers after mode induction.
    pub decoder_layers: usize,
    pub modes: usize,
    /// Past steps before the current one; the input has `history + 1` steps.
    pub history: usize,
    pub future: usize,
    /// Seconds between steps.
    pub period: f64,
    pub max_agents: usize,
    pub dropout: f64,
    pub use_keypoints: bool,
    pub use_head: bool,
    pub use_occupancy: bool,
    /// Grid cells per patch side for the occupancy encoder.
    pub patch_size: usize,
    /// Attend jointly over agents and time; `false` alternates between the
    /// two axes layer by layer.
    pub full_self_attention: bool,
    /// Let agents attend to each other; `false` restricts every token to its
    /// own agent.
    pub interaction: bool,
    /// Per-agent time-axis alignment of the embedded tokens.
    pub agent_self_alignment: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::jrdb()
    }
}

impl ModelConfig {
    pub fn jrdb() -> Self {
        ModelConfig {
            protocol: Protocol::Jrdb,
            width: 64,
            heads: 4,
            ff_width: 128,
            encoder_layers: 2,
            decoder_layers: 2,
            modes: 6,
            history: 6,
            future: 12,
            period: 1.0 / 3.0,
            max_agents: 16,
            dropout: 0.1,
            use_keypoints: true,
            use_head: true,
            use_occupancy: false,
            patch_size: 8,
            full_self_attention: true,
            interaction: true,
            agent_self_alignment: true,
        }
    }

    pub fn eth() -> Self {
        ModelConfig {
            protocol: Protocol::Eth,
            modes: 20,
            history: 7,
            future: 12,
            period: 0.4,
            use_keypoints: false,
            use_head: false,
            ..Self::jrdb()
        }
    }

    /// Total timesteps per window.
    pub fn steps(&self) -> usize {
        self.history + 1 + self.future
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: alloc::string::String| Err(Error::Config(m));
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return fail(format!("width {} is not divisible by {} heads", self.width, self.heads));
        }
        if self.width % 2 != 0 {
            return fail(format!("width {} must be even for the sinusoidal embeddings", self.width));
        }
        if self.ff_width == 0 {
            return fail("feed-forward width must be positive".into());
        }
        if self.modes == 0 {
            return fail("at least one mode is required".into());
        }
        if self.future == 0 {
            return fail("future horizon must be at least one step".into());
        }
        if self.max_agents == 0 {
            return fail("agent cap must be at least one".into());
        }
        if !(self.period > 0.0 && self.period.is_finite()) {
            return fail(format!("step period {} must be positive", self.period));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.patch_size == 0 {
            return fail("patch size must be positive".into());
        }
        let close = |a: f64, b: f64| (a - b).abs() < 1e-9;
        match self.protocol {
            Protocol::Jrdb => {
                if self.history + 1 != 7 || self.future != 12 || !close(self.period, 1.0 / 3.0) || self.max_agents != 16 {
                    return fail(format!(
                        "jrdb protocol needs 7 input and 12 future steps at 3 Hz with 16 agents, got {} / {} at {:.4} s with {}",
                        self.history + 1,
                        self.future,
                        self.period,
                        self.max_agents
                    ));
                }
            }
            Protocol::Eth => {
                if self.history + 1 != 8 || self.future != 12 || !close(self.period, 0.4) || self.modes != 20 {
                    return fail(format!(
                        "eth protocol needs 8 input and 12 future steps at 2.5 Hz with 20 modes, got {} / {} at {:.4} s with {} modes",
                        self.history + 1,
                        self.future,
                        self.period,
                        self.modes
                    ));
                }
            }
            Protocol::Custom => {}
        }
        Ok(())
    }

    /// Checks that `scene` fits this configuration. Feature values in
    /// invalid slots are not inspected; the model never reads them.
    pub fn check_scene(&self, scene: &Scene) -> Result<()> {
        if scene.history_len != self.history || scene.future_len != self.future {
            return Err(Error::InvalidArgument(format!(
                "scene horizons {}+1+{} do not match model {}+1+{}",
                scene.history_len, scene.future_len, self.history, self.future
            )));
        }
        if scene.num_agents() > self.max_agents {
            return Err(Error::InvalidArgument(format!(
                "scene has {} agents, model cap is {}",
                scene.num_agents(),
                self.max_agents
            )));
        }
        if (scene.timestep_period - self.period).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "scene step {:.4} s does not match model step {:.4} s",
                scene.timestep_period, self.period
            )));
        }
        scene.check_shape()
    }
}
