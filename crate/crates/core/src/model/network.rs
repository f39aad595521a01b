use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use super::config::ModelConfig;
use super::prediction::GmmPrediction;
use crate::error::Result;
use crate::math;
use crate::numerics::{rng_from_seed, Graph, Linear, Mask, Mlp, MultiHeadAttention, ParamId, ParamStore, Rng, Tensor, TransformerLayer, Var};
use crate::objective::SIGMA_FLOOR;
use crate::pose::KEYPOINT_DIM;
use crate::scene::{OccupancyGrid, Scene};

/// Sinusoidal code of a scalar position: `width / 2` frequencies, sines in
/// the even slots and cosines in the odd ones.
pub fn sinusoid(pos: f64, width: usize, base: f64, out: &mut [f64]) {
    let half = width / 2;
    for k in 0..half {
        let freq = 1.0 / math::pow(base, k as f64 / half as f64);
        out[2 * k] = math::sin(pos * freq);
        out[2 * k + 1] = math::cos(pos * freq);
    }
}

/// `[T, width]` timestep embedding.
pub fn timestep_embedding(steps: usize, width: usize) -> Tensor {
    let mut data = vec![0.0; steps * width];
    for t in 0..steps {
        sinusoid(t as f64, width, 100.0, &mut data[t * width..(t + 1) * width]);
    }
    Tensor::from_parts(vec![steps, width], data)
}

/// 2D code of a planar point in meters: first half encodes x, second y.
pub fn planar_embedding(p: [f64; 2], width: usize, out: &mut [f64]) {
    let half = width / 2;
    // shortest wavelength about 0.5 m
    let scale = 4.0 * core::f64::consts::PI;
    sinusoid(p[0] * scale, half, 1000.0, &mut out[..half]);
    sinusoid(p[1] * scale, width - half, 1000.0, &mut out[half..]);
}

/// Occupancy patches and their scene-frame centers.
pub fn occupancy_patches(grid: &OccupancyGrid, patch: usize, offset: [f64; 2]) -> (Vec<f64>, Vec<[f64; 2]>) {
    let rows = grid.height.div_ceil(patch);
    let cols = grid.width.div_ceil(patch);
    let mut cells = Vec::with_capacity(rows * cols * patch * patch);
    let mut centers = Vec::with_capacity(rows * cols);
    for pr in 0..rows {
        for pc in 0..cols {
            for r in 0..patch {
                for c in 0..patch {
                    let (row, col) = (pr * patch + r, pc * patch + c);
                    let occupied = row < grid.height && col < grid.width && grid.get(row, col);
                    cells.push(if occupied { 1.0 } else { 0.0 });
                }
            }
            let half = patch as f64 * grid.cell_size / 2.0;
            centers.push([
                grid.origin[0] + (pc * patch) as f64 * grid.cell_size + half - offset[0],
                grid.origin[1] + (pr * patch) as f64 * grid.cell_size + half - offset[1],
            ]);
        }
    }
    (cells, centers)
}

/// Dense model inputs read from the valid slots of a scene.
#[derive(Clone, Debug)]
pub struct ModelInputs {
    pub agents: usize,
    pub steps: usize,
    /// `[N*T, 2]`
    pub position: Tensor,
    /// `[N*T, 99]`, joints relative to the agent's ground position.
    pub keypoints: Tensor,
    /// `[N*T, 2]`, cosine and sine of the yaw.
    pub head: Tensor,
    /// Per agent-timestep availability of position, keypoints, head.
    pub available: Vec<[bool; 3]>,
    /// `[N, 2]` last observed position, the residual base of the means.
    pub last_position: Vec<[f64; 2]>,
}

impl ModelInputs {
    pub fn from_scene(scene: &Scene, cfg: &ModelConfig) -> Self {
        let (n, t_all) = (scene.num_agents(), scene.steps());
        let mut position = vec![0.0; n * t_all * 2];
        let mut keypoints = vec![0.0; n * t_all * KEYPOINT_DIM];
        let mut head = vec![0.0; n * t_all * 2];
        let mut available = vec![[false; 3]; n * t_all];
        let mut last_position = Vec::with_capacity(n);
        for (i, a) in scene.agents.iter().enumerate() {
            for t in 0..=scene.current() {
                let k = i * t_all + t;
                let p = a.position[t];
                if a.position_valid[t] {
                    position[2 * k..2 * k + 2].copy_from_slice(&p);
                    available[k][0] = true;
                }
                if cfg.use_keypoints && a.keypoints_valid[t] && a.position_valid[t] {
                    let dst = &mut keypoints[k * KEYPOINT_DIM..(k + 1) * KEYPOINT_DIM];
                    for (j, v) in a.keypoints[t].iter().enumerate() {
                        dst[j] = match j % 3 {
                            0 => v - p[0],
                            1 => v - p[1],
                            _ => *v,
                        };
                    }
                    available[k][1] = true;
                }
                if cfg.use_head && a.head_valid[t] {
                    head[2 * k] = math::cos(a.head[t]);
                    head[2 * k + 1] = math::sin(a.head[t]);
                    available[k][2] = true;
                }
            }
            last_position.push(a.last_observed(scene.current()).map_or([0.0; 2], |(_, p)| p));
        }
        ModelInputs {
            agents: n,
            steps: t_all,
            position: Tensor::from_parts(vec![n * t_all, 2], position),
            keypoints: Tensor::from_parts(vec![n * t_all, KEYPOINT_DIM], keypoints),
            head: Tensor::from_parts(vec![n * t_all, 2], head),
            available,
            last_position,
        }
    }

    pub fn token_valid(&self, i: usize, t: usize) -> bool {
        self.available[i * self.steps + t].iter().any(|&v| v)
    }
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `[M, N, F, 2]`
    pub mu: Var,
    /// `[M, N, F, 2]`
    pub sigma: Var,
    /// `[M]`
    pub logits: Var,
    /// `[N, T, h]` after the encoder stack and scene cross-attention.
    pub tokens: Var,
}

/// Which tokens a layer lets each token attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Reach {
    All,
    SameAgent,
    SameStep,
    Itself,
}

/// The agent-timestep transformer.
#[derive(Clone, Debug)]
pub struct HumanSceneTransformer {
    pub config: ModelConfig,
    pub params: ParamStore,
    position_encoder: Mlp,
    keypoint_encoder: Option<Mlp>,
    head_encoder: Option<Mlp>,
    feature_query: ParamId,
    feature_attention: MultiHeadAttention,
    alignment: Option<(ParamId, MultiHeadAttention)>,
    encoder: Vec<TransformerLayer>,
    occupancy: Option<(Mlp, TransformerLayer)>,
    mode_ids: ParamId,
    mode_attention: MultiHeadAttention,
    mode_logit: Mlp,
    decoder: Vec<TransformerLayer>,
    head: Linear,
}

fn random_param(store: &mut ParamStore, name: &str, shape: &[usize], limit: f64, rng: &mut Rng) -> Result<ParamId> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    store.add(name, Tensor::new(shape, data)?)
}

impl HumanSceneTransformer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let rng = &mut rng;
        let mut p = ParamStore::new();
        let (h, heads, ff) = (config.width, config.heads, config.ff_width);
        let position_encoder = Mlp::new(&mut p, "embed.position", 2, h, h, rng)?;
        let keypoint_encoder = match config.use_keypoints {
            true => Some(Mlp::new(&mut p, "embed.keypoints", KEYPOINT_DIM, h, h, rng)?),
            false => None,
        };
        let head_encoder = match config.use_head {
            true => Some(Mlp::new(&mut p, "embed.head", 2, h, h, rng)?),
            false => None,
        };
        let feature_query = random_param(&mut p, "embed.query", &[1, 1, h], 1.0, rng)?;
        let feature_attention = MultiHeadAttention::new(&mut p, "embed.attn", h, heads, rng)?;
        let alignment = match config.agent_self_alignment {
            true => Some((
                random_param(&mut p, "align.query", &[1, config.steps(), h], 1.0, rng)?,
                MultiHeadAttention::new(&mut p, "align.attn", h, heads, rng)?,
            )),
            false => None,
        };
        let encoder = (0..config.encoder_layers)
            .map(|k| TransformerLayer::new(&mut p, &format!("encoder.{k}"), h, heads, ff, config.dropout, rng))
            .collect::<Result<Vec<_>>>()?;
        let occupancy = match config.use_occupancy {
            true => {
                let cells = config.patch_size * config.patch_size;
                Some((
                    Mlp::new(&mut p, "scene.patch", cells, h, h, rng)?,
                    TransformerLayer::new(&mut p, "scene.xattn", h, heads, ff, config.dropout, rng)?,
                ))
            }
            false => None,
        };
        let mode_ids = random_param(&mut p, "modes.id", &[config.modes, 1, h], 1.0, rng)?;
        let mode_attention = MultiHeadAttention::new(&mut p, "modes.attn", h, heads, rng)?;
        let mode_logit = Mlp::new(&mut p, "modes.logit", h, h, 1, rng)?;
        let decoder = (0..config.decoder_layers)
            .map(|l| TransformerLayer::new(&mut p, &format!("decoder.{l}"), h, heads, ff, config.dropout, rng))
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::new(&mut p, "head", h, 4, rng)?;
        Ok(HumanSceneTransformer {
            config,
            params: p,
            position_encoder,
            keypoint_encoder,
            head_encoder,
            feature_query,
            feature_attention,
            alignment,
            encoder,
            occupancy,
            mode_ids,
            mode_attention,
            mode_logit,
            decoder,
            head,
        })
    }

    /// Output layer weights, exposed for initialization experiments.
    pub fn head_layer(&self) -> &Linear {
        &self.head
    }

    /// Mode identifier parameter `[M, 1, h]`.
    pub fn mode_ids(&self) -> ParamId {
        self.mode_ids
    }

    fn reach(&self, layer: usize) -> Reach {
        let cfg = &self.config;
        match (cfg.full_self_attention, cfg.interaction, layer % 2) {
            (true, true, _) => Reach::All,
            (true, false, _) => Reach::SameAgent,
            (false, true, 0) => Reach::SameStep,
            (false, false, 0) => Reach::Itself,
            (false, _, _) => Reach::SameAgent,
        }
    }

    fn mask(reach: Reach, n: usize, t: usize) -> Option<Mask> {
        let nt = n * t;
        let f: fn(usize, usize, usize) -> bool = match reach {
            Reach::All => return None,
            Reach::SameAgent => |a, b, t| a / t == b / t,
            Reach::SameStep => |a, b, t| a % t == b % t,
            Reach::Itself => |a, b, _| a == b,
        };
        Some(Mask::from_fn(&[nt, nt], |ix| f(ix[0], ix[1], t)))
    }

    /// Embedding: per-stream encoders, timestep code, and a learned query
    /// that pools the available streams. Returns `[N, T, h]`.
    pub fn embed(&self, g: &mut Graph, inputs: &ModelInputs) -> Result<Var> {
        let store = &self.params;
        let (n, t, h) = (inputs.agents, inputs.steps, self.config.width);
        let time = g.constant(timestep_embedding(t, h).reshape(&[1, t, h])?)?;
        let mut streams = Vec::new();
        let mut kinds = Vec::new();
        let encoders = [
            (Some(&self.position_encoder), &inputs.position, 0),
            (self.keypoint_encoder.as_ref(), &inputs.keypoints, 1),
            (self.head_encoder.as_ref(), &inputs.head, 2),
        ];
        for (enc, x, kind) in encoders {
            let Some(enc) = enc else { continue };
            let x = g.constant(x.clone())?;
            let e = enc.forward(g, store, x)?;
            let e = g.reshape(e, &[n, t, h])?;
            let e = g.add(e, time)?;
            streams.push(g.reshape(e, &[n * t, 1, h])?);
            kinds.push(kind);
        }
        let keys = g.concat(&streams, 1)?;
        let s = kinds.len();
        let mask = Mask::new(
            &[n * t, 1, s],
            inputs.available.iter().flat_map(|a| kinds.iter().map(move |&k| a[k])).collect(),
        )?;
        let q = g.param(store, self.feature_query);
        let pooled = self.feature_attention.forward(g, store, q, keys, keys, Some(&mask))?;
        g.reshape(pooled, &[n, t, h])
    }

    /// Per-agent time-axis cross-attention from a learned `[T, h]` query onto
    /// the agent's observed tokens, added residually.
    pub fn align(&self, g: &mut Graph, tokens: Var, inputs: &ModelInputs) -> Result<Var> {
        let Some((query, attention)) = &self.alignment else { return Ok(tokens) };
        let (n, t) = (inputs.agents, inputs.steps);
        let mask = Mask::from_fn(&[n, t, t], |ix| inputs.token_valid(ix[0], ix[2]));
        let q = g.param(&self.params, *query);
        let a = attention.forward(g, &self.params, q, tokens, tokens, Some(&mask))?;
        g.add(tokens, a)
    }

    /// Occupancy patch tokens `[1, S, h]`, or `None` without a grid.
    pub fn encode_occupancy(&self, g: &mut Graph, scene: &Scene) -> Result<Option<Var>> {
        let (Some((mlp, _)), Some(grid)) = (&self.occupancy, &scene.occupancy) else {
            return Ok(None);
        };
        let h = self.config.width;
        let ps = self.config.patch_size;
        let (cells, centers) = occupancy_patches(grid, ps, scene.offset);
        let s = centers.len();
        let x = g.constant(Tensor::new(&[s, ps * ps], cells)?)?;
        let e = mlp.forward(g, &self.params, x)?;
        let mut pos = vec![0.0; s * h];
        for (k, c) in centers.iter().enumerate() {
            planar_embedding(*c, h, &mut pos[k * h..(k + 1) * h]);
        }
        let pos = g.constant(Tensor::new(&[s, h], pos)?)?;
        let e = g.add(e, pos)?;
        Ok(Some(g.reshape(e, &[1, s, h])?))
    }

    /// Embedding, alignment, encoder stack and scene cross-attention.
    /// Returns `[N, T, h]`.
    pub fn encode(&self, g: &mut Graph, scene: &Scene, inputs: &ModelInputs, mut rng: Option<&mut Rng>) -> Result<Var> {
        let (n, t, h) = (inputs.agents, inputs.steps, self.config.width);
        let x = self.embed(g, inputs)?;
        let x = self.align(g, x, inputs)?;
        let mut x = g.reshape(x, &[1, n * t, h])?;
        for (k, layer) in self.encoder.iter().enumerate() {
            let mask = Self::mask(self.reach(k), n, t);
            x = layer.forward(g, &self.params, x, x, mask.as_ref(), rng.as_deref_mut())?;
        }
        if let Some(scene_tokens) = self.encode_occupancy(g, scene)? {
            let (_, layer) = self.occupancy.as_ref().expect("occupancy encoder");
            x = layer.forward(g, &self.params, x, scene_tokens, None, rng.as_deref_mut())?;
        }
        g.reshape(x, &[n, t, h])
    }

    /// Full forward pass. `rng` enables dropout.
    pub fn forward(&self, g: &mut Graph, scene: &Scene, mut rng: Option<&mut Rng>) -> Result<ForwardOutput> {
        self.config.check_scene(scene)?;
        let cfg = &self.config;
        let store = &self.params;
        let inputs = ModelInputs::from_scene(scene, cfg);
        let (n, t, h, m, f) = (inputs.agents, inputs.steps, cfg.width, cfg.modes, cfg.future);
        let tokens = self.encode(g, scene, &inputs, rng.as_deref_mut())?;

        // mode induction
        let flat = g.reshape(tokens, &[1, n * t, h])?;
        let tiled = g.broadcast_to(flat, &[m, n * t, h])?;
        let ids = g.param(store, self.mode_ids);
        let mut x = g.add(tiled, ids)?;
        let summary = self.mode_attention.forward(g, store, ids, x, x, None)?;
        let logits = self.mode_logit.forward(g, store, summary)?;
        let logits = g.reshape(logits, &[m])?;

        for (l, layer) in self.decoder.iter().enumerate() {
            let mask = Self::mask(self.reach(l), n, t);
            x = layer.forward(g, store, x, x, mask.as_ref(), rng.as_deref_mut())?;
        }

        // prediction head on the future steps
        let x = g.reshape(x, &[m, n, t, h])?;
        let x = g.narrow(x, 2, cfg.history + 1, f)?;
        let out = self.head.forward(g, store, x)?;
        let offset = g.narrow(out, 3, 0, 2)?;
        let raw_scale = g.narrow(out, 3, 2, 2)?;
        let base: Vec<f64> = inputs.last_position.iter().flatten().copied().collect();
        let base = g.constant(Tensor::new(&[1, n, 1, 2], base)?)?;
        let mu = g.add(offset, base)?;
        let sigma = g.softplus(raw_scale)?;
        let sigma = g.add_scalar(sigma, SIGMA_FLOOR)?;
        Ok(ForwardOutput { mu, sigma, logits, tokens })
    }

    /// Inference without dropout.
    pub fn predict(&self, scene: &Scene) -> Result<GmmPrediction> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, scene, None)?;
        let (m, n, f) = (self.config.modes, scene.num_agents(), self.config.future);
        GmmPrediction::from_mode_major(
            n,
            f,
            m,
            g.value(out.mu).data(),
            g.value(out.sigma).data(),
            g.value(out.logits).data().to_vec(),
        )
    }

    /// Replaces the parameter values, e.g. from a checkpoint.
    pub fn load_params(&mut self, entries: &[(alloc::string::String, Tensor)]) -> Result<()> {
        self.params.load(entries)
    }
}
