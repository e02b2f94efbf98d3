//! The full planner: context encoder, CMCA stack with scene-adaptive expert
//! layers, and the flow head.
//!
//! Token order: BEV patches, world tokens, language tokens, ego tokens, then
//! the action tokens. The ego and action tokens form the planning side.

use samoe_numerics::{ops, Graph, Rng, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::cmca::{self, BlockContext, CmcaLayout};
use crate::dataset::Entry;
use crate::dse::{self, DseConfig};
use crate::error::{CoreError, Result};
use crate::flow;
use crate::moe;
use crate::nn;
use crate::params::{Bound, ParamStore};
use crate::scene::{BevConfig, HISTORY, HORIZON, INSTRUCTION_VOCAB};

pub const WORLD_TOKENS: usize = 2;
pub const LANG_TOKENS: usize = 2;
pub const EGO_TOKENS: usize = 2;
/// Ego speed and yaw rate are multiplied by these before projection.
pub const SPEED_NORM: f64 = 0.1;
pub const YAW_NORM: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub layers: usize,
    pub d: usize,
    pub m: usize,
    pub heads: usize,
    pub experts: usize,
    pub moe_period: usize,
    pub horizon: usize,
    pub action_dim: usize,
    pub ode_steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub clip: f64,
    pub batch: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Side length of the square BEV patches that become context tokens.
    pub patch: usize,
    /// Waypoints are divided by this (meters) before entering the flow.
    pub action_scale: f64,
    pub bev: BevConfig,
    pub dse: DseConfig,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            layers: 8,
            d: 64,
            m: 256,
            heads: 4,
            experts: 4,
            moe_period: 4,
            horizon: HORIZON,
            action_dim: 2,
            ode_steps: flow::DEFAULT_STEPS,
            lr: 1e-4,
            momentum: 0.9,
            clip: 1.0,
            batch: 8,
            seed: 0,
            precision: Precision::F32,
            patch: 8,
            action_scale: 10.0,
            bev: BevConfig::default(),
            dse: DseConfig::default(),
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        self.bev.validate()?;
        self.dse.validate()?;
        let bad = |msg: String| Err(CoreError::Config(msg));
        if self.layers == 0 || self.d == 0 || self.m == 0 || self.moe_period == 0 || self.batch == 0 {
            return bad("layers, widths, moe_period and batch must be positive".into());
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!("{} heads do not divide width {}", self.heads, self.d));
        }
        if !self.d.is_multiple_of(2) {
            return bad(format!("model width {} must be even for the time embedding", self.d));
        }
        if self.horizon != HORIZON || self.action_dim != 2 {
            return bad(format!("actions must be {HORIZON} x 2 waypoints"));
        }
        if self.dse.experts != self.experts {
            return bad(format!(
                "router has {} outputs for {} experts",
                self.dse.experts, self.experts
            ));
        }
        if self.dse.channels != self.bev.channels {
            return bad(format!(
                "encoder expects {} channels, grid has {}",
                self.dse.channels, self.bev.channels
            ));
        }
        if self.patch == 0 || !self.bev.height.is_multiple_of(self.patch) || !self.bev.width.is_multiple_of(self.patch)
        {
            return bad(format!(
                "patch {} does not tile the {}x{} grid",
                self.patch, self.bev.height, self.bev.width
            ));
        }
        if !(self.action_scale > 0.0) || !(self.lr > 0.0) || !(self.clip > 0.0) {
            return bad("action_scale, lr and clip must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.ode_steps == 0 {
            return bad("ode_steps must be at least 1".into());
        }
        Ok(())
    }

    /// Layers whose planning FFN is an expert layer: `(i + 1) % period == 0`.
    pub fn moe_layers(&self) -> Vec<usize> {
        (0..self.layers).filter(|i| (i + 1) % self.moe_period == 0).collect()
    }

    pub fn is_moe_layer(&self, layer: usize) -> bool {
        (layer + 1).is_multiple_of(self.moe_period)
    }

    pub fn patch_tokens(&self) -> usize {
        (self.bev.height / self.patch) * (self.bev.width / self.patch)
    }

    pub fn cond_len(&self) -> usize {
        self.patch_tokens() + WORLD_TOKENS + LANG_TOKENS + EGO_TOKENS
    }

    pub fn seq_len(&self) -> usize {
        self.cond_len() + self.horizon
    }

    pub fn layout(&self) -> Result<CmcaLayout> {
        CmcaLayout::canonical(self.cond_len(), self.horizon, EGO_TOKENS + self.horizon)
    }
}

/// Which parameter set the planning FFNs of expert layers hold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// One dense FFN per layer.
    Dense,
    /// `E` experts per expert layer plus routing heads.
    Moe,
}

/// How expert layers are evaluated.
#[derive(Clone, Debug, PartialEq)]
pub enum Routing {
    Dense,
    /// Per-sample merge with scene-derived weights.
    SceneMerge,
    /// Per-sample merge with given weights, `[B * E]` per expert layer.
    Fixed(Vec<Vec<f64>>),
    /// Per-token top-k over planning tokens with a token router.
    TopK(usize),
}

/// Model inputs for a batch of scenes, already normalized.
#[derive(Clone, Debug)]
pub struct Batch<T: Scalar> {
    /// `[B, C, H, W]`.
    pub bev: Tensor<T>,
    pub lang: Vec<[usize; 2]>,
    /// `[B, 2 * HISTORY]`.
    pub history: Tensor<T>,
    /// `[B, 2]`: scaled speed and yaw rate.
    pub bus: Tensor<T>,
    /// `[B, K, 2]` ground-truth actions divided by the action scale.
    pub actions: Tensor<T>,
    /// BEV seen by the scene encoder when it differs from `bev`.
    pub route_bev: Option<Tensor<T>>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_entries(entries: &[&Entry], cfg: &PlannerConfig) -> Result<Self> {
        if entries.is_empty() {
            return Err(CoreError::InsufficientData { needed: 1, got: 0 });
        }
        let s = 1.0 / cfg.action_scale;
        let grids: Vec<Tensor<T>> = entries.iter().map(|e| e.grid.data.cast()).collect();
        let bev = Tensor::stack(&grids)?;
        let mut hist = Vec::new();
        let mut bus = Vec::new();
        let mut act = Vec::new();
        let mut lang = Vec::new();
        for e in entries {
            let sc = &e.scene;
            for p in sc.ego_history() {
                hist.extend([p[0] * s, p[1] * s]);
            }
            bus.extend([sc.ego_speed * SPEED_NORM, sc.ego_yaw_rate * YAW_NORM]);
            for p in sc.ego_waypoints {
                act.extend([p[0] * s, p[1] * s]);
            }
            lang.push(sc.instruction_ids());
        }
        let b = entries.len();
        Ok(Batch {
            bev,
            lang,
            history: Tensor::from_f64(&[b, 2 * HISTORY], &hist)?,
            bus: Tensor::from_f64(&[b, 2], &bus)?,
            actions: Tensor::from_f64(&[b, cfg.horizon, 2], &act)?,
            route_bev: None,
        })
    }

    pub fn len(&self) -> usize {
        self.lang.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lang.is_empty()
    }

    /// Rows `idx` of every field.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        use samoe_numerics::kernels::index_select;
        Ok(Batch {
            bev: index_select(&self.bev, 0, idx)?,
            lang: idx.iter().map(|&i| self.lang[i]).collect(),
            history: index_select(&self.history, 0, idx)?,
            bus: index_select(&self.bus, 0, idx)?,
            actions: index_select(&self.actions, 0, idx)?,
            route_bev: match &self.route_bev {
                Some(r) => Some(index_select(r, 0, idx)?),
                None => None,
            },
        })
    }
}

/// Noisy actions, times and target velocities for one batch.
#[derive(Clone, Debug)]
pub struct FlowBatch<T: Scalar> {
    pub x_tau: Tensor<T>,
    pub u: Tensor<T>,
    pub taus: Vec<f64>,
}

impl<T: Scalar> FlowBatch<T> {
    pub fn draw(actions: &Tensor<T>, rng: &mut Rng) -> Result<Self> {
        let b = actions.shape()[0];
        let mut xs = Vec::with_capacity(b);
        let mut us = Vec::with_capacity(b);
        let mut taus = Vec::with_capacity(b);
        for i in 0..b {
            let s = flow::FlowSample::draw(actions.row(i), rng)?;
            xs.push(s.x_tau);
            us.push(s.u);
            taus.push(s.tau);
        }
        Ok(FlowBatch {
            x_tau: Tensor::stack(&xs)?,
            u: Tensor::stack(&us)?,
            taus,
        })
    }
}

/// Side outputs of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    /// Routing weights `[B, E]` per expert layer (scene merge).
    pub routing: Vec<Vec<f64>>,
    /// Chosen experts, one `k`-set per planning token, per expert layer (top-k).
    pub selections: Vec<Vec<Vec<usize>>>,
    /// How many times the scene encoder ran.
    pub encoder_calls: usize,
}

pub fn init_params<T: Scalar>(cfg: &PlannerConfig, rng: &mut Rng) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut p = ParamStore::new();
    let d = cfg.d;
    let patch_in = cfg.bev.channels * cfg.patch * cfg.patch;
    p.init_linear("ctx/patch", patch_in, d, rng);
    p.insert("ctx/patch_pos", rng.normal_tensor(&[cfg.patch_tokens(), d], 0.02));
    p.insert("ctx/prompt", rng.normal_tensor(&[WORLD_TOKENS, d], 0.02));
    p.insert("ctx/frame", rng.normal_tensor(&[WORLD_TOKENS, d], 0.02));
    p.insert("ctx/lang", rng.normal_tensor(&[INSTRUCTION_VOCAB, d], 1.0));
    p.init_linear("ctx/his", 2 * HISTORY, d, rng);
    p.init_linear("ctx/bus", 2, d, rng);
    p.insert("flow/act/w", rng.normal_tensor(&[cfg.action_dim, d], 1.0));
    p.init_linear("flow/mlp1", 2 * d, d, rng);
    p.init_linear("flow/mlp2", d, d, rng);
    for l in 0..cfg.layers {
        cmca::init_block_params(&format!("blk{l}"), d, cfg.m, rng, &mut p);
    }
    p.init_norm("head/norm", d);
    p.init_linear("flow/out", d, cfg.action_dim, rng);
    dse::init_params(&cfg.dse, &cfg.moe_layers(), rng, &mut p);
    Ok(p)
}

fn expert_name(layer: usize, which: &str) -> String {
    format!("blk{layer}/moe/{which}")
}

fn const_tensor<T: Scalar>(g: &mut Graph<T>, t: &Tensor<T>) -> Var {
    g.constant(t.clone())
}

/// `[B, C, H, W] -> [B, N, C*P*P]` non-overlapping patches in row-major
/// patch order.
fn patchify<T: Scalar>(g: &mut Graph<T>, bev: Var, patch: usize) -> Result<Var> {
    let s = g.shape(bev).to_vec();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (hp, wp) = (h / patch, w / patch);
    let r = g.reshape(bev, &[b, c, hp, patch, wp, patch])?;
    let r = g.permute(r, &[0, 2, 4, 1, 3, 5])?;
    Ok(g.reshape(r, &[b, hp * wp, c * patch * patch])?)
}

/// Context tokens `[B, cond_len, d]` in layout order.
pub fn encode_context<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &PlannerConfig,
    batch: &Batch<T>,
    bev: Var,
) -> Result<Var> {
    let b = batch.len();
    let d = cfg.d;
    let patches = patchify(g, bev, cfg.patch)?;
    let z = nn::linear_named(g, p, "ctx/patch", patches)?;
    let z = g.add(z, p.get("ctx/patch_pos")?)?;

    let pooled = g.mean_axis(z, 1)?;
    let pooled = g.reshape(pooled, &[b, 1, d])?;
    let world = g.add(pooled, p.get("ctx/prompt")?)?;
    let world = g.add(world, p.get("ctx/frame")?)?;

    let mut ids = Vec::with_capacity(b * LANG_TOKENS);
    for l in &batch.lang {
        for &id in l {
            if id >= INSTRUCTION_VOCAB {
                return Err(CoreError::Vocabulary(id));
            }
            ids.push(id);
        }
    }
    let lang = g.index_select(p.get("ctx/lang")?, 0, &ids)?;
    let lang = g.reshape(lang, &[b, LANG_TOKENS, d])?;

    let his = const_tensor(g, &batch.history);
    let his = nn::linear_named(g, p, "ctx/his", his)?;
    let his = g.reshape(his, &[b, 1, d])?;
    let bus = const_tensor(g, &batch.bus);
    let bus = nn::linear_named(g, p, "ctx/bus", bus)?;
    let bus = g.reshape(bus, &[b, 1, d])?;

    Ok(g.concat(&[z, world, lang, his, bus], 1)?)
}

/// Scene-merged SwiGLU weights for expert layer `layer`: `π @ stack`.
fn merged_weights<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &PlannerConfig,
    layer: usize,
    pi: Var,
) -> Result<[Var; 3]> {
    let b = g.shape(pi)[0];
    let (d, m, e) = (cfg.d, cfg.m, cfg.experts);
    let mut out = [pi; 3];
    for (slot, (which, shape)) in [("w1", [d, m]), ("w3", [d, m]), ("w2", [m, d])].into_iter().enumerate() {
        let stack = p.get(&expert_name(layer, which))?;
        let flat = g.reshape(stack, &[e, d * m])?;
        let first = g.narrow(flat, 0, 0, 1)?;
        let first = g.reshape(first, &[d * m])?;
        // W_0 + Σ_{e>0} π_e (W_e - W_0): the same point of the simplex, but
        // exact when every expert is a copy of the first.
        let merged = if e == 1 {
            let zeros = g.constant(Tensor::zeros(&[b, d * m]));
            g.add(zeros, first)?
        } else {
            let rest = g.narrow(flat, 0, 1, e - 1)?;
            let diff = g.sub(rest, first)?;
            let pi_rest = g.narrow(pi, 1, 1, e - 1)?;
            let mix = g.matmul(pi_rest, diff)?;
            g.add(mix, first)?
        };
        out[slot] = g.reshape(merged, &[b, shape[0], shape[1]])?;
    }
    Ok(out)
}

/// Token-level top-k expert FFN. Gates are computed from the token values
/// and enter the graph as constants.
fn top_k_ffn<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &PlannerConfig,
    layer: usize,
    k: usize,
    x: Var,
    trace: &mut Trace,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, l, d) = (s[0], s[1], s[2]);
    let e = cfg.experts;
    let gate_w = g.value(p.get(&expert_name(layer, "gate"))?).clone();
    let flat = g.value(x).reshape(&[b * l, d])?;
    let gates = moe::sparse_gates(&ops::matmul(&flat, &gate_w)?, k)?;
    trace.selections.push(
        gates
            .iter()
            .map(|row| (0..e).filter(|&i| row[i] != 0.0).collect())
            .collect(),
    );
    let stacks = [
        p.get(&expert_name(layer, "w1"))?,
        p.get(&expert_name(layer, "w3"))?,
        p.get(&expert_name(layer, "w2"))?,
    ];
    let mut acc: Option<Var> = None;
    for ex in 0..e {
        if gates.iter().all(|row| row[ex] == 0.0) {
            continue;
        }
        let mut w = [x; 3];
        for (slot, &stack) in stacks.iter().enumerate() {
            let one = g.narrow(stack, 0, ex, 1)?;
            let sh = g.shape(one)[1..].to_vec();
            w[slot] = g.reshape(one, &sh)?;
        }
        let y = nn::swiglu(g, x, w[0], w[1], w[2])?;
        let gate = Tensor::from_fn(&[b, l, 1], |t| T::from_f64(gates[t][ex]));
        let gate = g.constant(gate);
        let y = g.mul(y, gate)?;
        acc = Some(match acc {
            Some(a) => g.add(a, y)?,
            None => y,
        });
    }
    acc.ok_or_else(|| CoreError::Config("top-k routing selected no expert".into()))
}

/// Velocity prediction `[B, K, 2]` for noisy actions `x_tau` (`[B, K, 2]`).
#[allow(clippy::too_many_arguments)]
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &PlannerConfig,
    routing: &Routing,
    batch: &Batch<T>,
    x_tau: Var,
    taus: &[f64],
    trace: &mut Trace,
) -> Result<Var> {
    let x = forward_tokens(g, p, cfg, routing, batch, x_tau, taus, trace)?;
    let tail = g.narrow(x, 1, cfg.cond_len(), cfg.horizon)?;
    let tail = nn::layer_norm_named(g, p, "head/norm", tail)?;
    nn::linear_named(g, p, "flow/out", tail)
}

/// Output of the last block, `[B, L, d]`.
#[allow(clippy::too_many_arguments)]
pub fn forward_tokens<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &PlannerConfig,
    routing: &Routing,
    batch: &Batch<T>,
    x_tau: Var,
    taus: &[f64],
    trace: &mut Trace,
) -> Result<Var> {
    let b = batch.len();
    if g.shape(x_tau) != [b, cfg.horizon, cfg.action_dim] || taus.len() != b {
        return Err(CoreError::Config(format!(
            "noisy actions {:?} and {} times do not match batch {b}",
            g.shape(x_tau),
            taus.len()
        )));
    }
    let bev = const_tensor(g, &batch.bev);
    let context = encode_context(g, p, cfg, batch, bev)?;
    let actions = flow::suffix_tokens(g, p, x_tau, taus, cfg.d)?;
    let seq = g.concat(&[context, actions], 1)?;
    let pos = g.constant(nn::sinusoidal_positions(cfg.seq_len(), cfg.d));
    let mut x = g.add(seq, pos)?;

    let scene = if *routing == Routing::SceneMerge {
        let near = dse::near_field_map(cfg.bev.height, cfg.bev.width, cfg.bev.ego_center)?;
        trace.encoder_calls += 1;
        let rb = match &batch.route_bev {
            Some(t) => const_tensor(g, t),
            None => bev,
        };
        Some(dse::encode(g, p, &cfg.dse, rb, &near)?)
    } else {
        None
    };

    let ctx = BlockContext::<T>::new(cfg.layout()?, cfg.heads)?;
    let mut fixed = 0;
    for l in 0..cfg.layers {
        let prefix = format!("blk{l}");
        let dense_name = format!("{prefix}/plan/ffn");
        x = match (cfg.is_moe_layer(l), routing) {
            (true, Routing::SceneMerge) => {
                let pi = dse::route(g, p, scene.expect("encoder ran"), l)?;
                trace.routing.push(g.value(pi).to_f64_vec());
                let [w1, w3, w2] = merged_weights(g, p, cfg, l, pi)?;
                cmca::block_forward(g, p, &prefix, &ctx, x, &mut |g, h| nn::swiglu(g, h, w1, w3, w2))?
            }
            (true, Routing::Fixed(pis)) => {
                let pi = pis
                    .get(fixed)
                    .ok_or_else(|| CoreError::Config(format!("no routing weights for expert layer {l}")))?;
                fixed += 1;
                let pi = Tensor::from_f64(&[b, cfg.experts], pi)?;
                let pi = g.constant(pi);
                let [w1, w3, w2] = merged_weights(g, p, cfg, l, pi)?;
                cmca::block_forward(g, p, &prefix, &ctx, x, &mut |g, h| nn::swiglu(g, h, w1, w3, w2))?
            }
            (true, &Routing::TopK(k)) => {
                cmca::block_forward(g, p, &prefix, &ctx, x, &mut |g, h| top_k_ffn(g, p, cfg, l, k, h, trace))?
            }
            _ => cmca::block_forward(g, p, &prefix, &ctx, x, &mut |g, h| {
                cmca::dense_ffn(g, p, &dense_name, h)
            })?,
        };
    }
    Ok(x)
}

/// A planner and its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Planner<T: Scalar> {
    pub config: PlannerConfig,
    pub stage: Stage,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Planner<T> {
    /// Fresh dense planner; parameters drawn from `Rng(config.seed, 0x1417)`.
    pub fn new(config: PlannerConfig) -> Result<Self> {
        let mut rng = Rng::new(config.seed, 0x1417);
        let params = init_params(&config, &mut rng)?;
        Ok(Planner {
            config,
            stage: Stage::Dense,
            params,
        })
    }

    pub fn routing(&self) -> Routing {
        match self.stage {
            Stage::Dense => Routing::Dense,
            Stage::Moe => Routing::SceneMerge,
        }
    }

    /// Expert-layer initialization: every expert of layer `l` becomes a copy
    /// of that layer's dense planning FFN, plus `N(0, jitter²)` noise.
    pub fn to_moe(&self, jitter: f64, rng: &mut Rng) -> Result<Planner<T>> {
        if self.stage != Stage::Dense {
            return Err(CoreError::Config("planner already has expert layers".into()));
        }
        let mut params = self.params.clone();
        for l in self.config.moe_layers() {
            let w: Vec<Tensor<T>> = ["w1", "w3", "w2"]
                .iter()
                .map(|n| {
                    params
                        .remove(&format!("blk{l}/plan/ffn/{n}"))
                        .expect("dense ffn present")
                })
                .collect();
            let bank = moe::ExpertBank::replicate(&w[0], &w[1], &w[2], self.config.experts, jitter, rng);
            for (name, mats) in [("w1", &bank.w1), ("w3", &bank.w3), ("w2", &bank.w2)] {
                params.insert(expert_name(l, name), Tensor::stack(mats)?);
            }
        }
        Ok(Planner {
            config: self.config.clone(),
            stage: Stage::Moe,
            params,
        })
    }

    /// Adds token routers `[d, E]` so the planner can run with top-k routing.
    pub fn with_token_routers(mut self, rng: &mut Rng) -> Result<Self> {
        if self.stage != Stage::Moe {
            return Err(CoreError::Config("token routers need expert layers".into()));
        }
        let d = self.config.d;
        for l in self.config.moe_layers() {
            self.params.insert(
                expert_name(l, "gate"),
                rng.normal_tensor(&[d, self.config.experts], 1.0 / (d as f64).sqrt()),
            );
        }
        Ok(self)
    }

    /// Expert bank of layer `layer`.
    pub fn bank(&self, layer: usize) -> Result<moe::ExpertBank<T>> {
        let split = |name: &str| -> Result<Vec<Tensor<T>>> {
            let s = self.params.get(&expert_name(layer, name))?;
            Ok((0..s.shape()[0]).map(|e| s.row(e)).collect())
        };
        moe::ExpertBank::new(split("w1")?, split("w3")?, split("w2")?)
    }

    /// Velocities `[B, K, 2]` with every parameter held constant.
    pub fn velocity(&self, routing: &Routing, batch: &Batch<T>, x: &Tensor<T>, taus: &[f64]) -> Result<Tensor<T>> {
        self.velocity_traced(routing, batch, x, taus, &mut Trace::default())
    }

    pub fn velocity_traced(
        &self,
        routing: &Routing,
        batch: &Batch<T>,
        x: &Tensor<T>,
        taus: &[f64],
        trace: &mut Trace,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.params, |_| false);
        let xv = g.constant(x.clone());
        let v = forward(&mut g, &p, &self.config, routing, batch, xv, taus, trace)?;
        Ok(g.value(v).clone())
    }

    /// Flow loss on one batch.
    pub fn loss(&self, routing: &Routing, batch: &Batch<T>, fb: &FlowBatch<T>) -> Result<f64> {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.params, |_| false);
        let loss = loss_graph(&mut g, &p, &self.config, routing, batch, fb)?;
        Ok(g.value(loss).item().to_f64())
    }

    /// Loss and gradients of the parameters accepted by `trainable`.
    pub fn loss_and_grads(
        &self,
        routing: &Routing,
        batch: &Batch<T>,
        fb: &FlowBatch<T>,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<(f64, Vec<(String, Tensor<T>)>)> {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.params, &trainable);
        let loss = loss_graph(&mut g, &p, &self.config, routing, batch, fb)?;
        let names: Vec<String> = self.params.names().into_iter().filter(|n| trainable(n)).collect();
        let vars: Vec<Var> = names.iter().map(|n| p.get(n)).collect::<Result<_>>()?;
        let grads = g.grad(loss, &vars)?;
        Ok((g.value(loss).item().to_f64(), names.into_iter().zip(grads).collect()))
    }

    /// Euler-integrated actions (normalized units) from noise `x1`.
    pub fn sample_from(&self, routing: &Routing, batch: &Batch<T>, x1: Tensor<T>, steps: usize) -> Result<Tensor<T>> {
        flow::euler_from(
            |x, t| {
                let taus = vec![t; batch.len()];
                self.velocity(routing, batch, x, &taus)
            },
            x1,
            steps,
        )
    }

    /// Waypoints in meters, `[B, K, 2]`, with per-scene noise streams.
    pub fn plan(&self, batch: &Batch<T>, noise: &[Rng]) -> Result<Tensor<T>> {
        let shape = [self.config.horizon, self.config.action_dim];
        let x1: Vec<Tensor<T>> = noise.iter().map(|r| r.clone().normal_tensor(&shape, 1.0)).collect();
        let out = self.sample_from(&self.routing(), batch, Tensor::stack(&x1)?, self.config.ode_steps)?;
        Ok(out.scale(T::from_f64(self.config.action_scale)))
    }
}

pub fn loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &PlannerConfig,
    routing: &Routing,
    batch: &Batch<T>,
    fb: &FlowBatch<T>,
) -> Result<Var> {
    let x = g.constant(fb.x_tau.clone());
    let u = g.constant(fb.u.clone());
    let v = forward(g, p, cfg, routing, batch, x, &fb.taus, &mut Trace::default())?;
    flow::flow_loss_graph(g, v, u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Dataset, RegimeMix};

    pub(crate) fn tiny_config() -> PlannerConfig {
        PlannerConfig {
            layers: 4,
            d: 16,
            m: 32,
            heads: 2,
            experts: 3,
            moe_period: 2,
            batch: 2,
            bev: BevConfig {
                height: 16,
                width: 16,
                channels: 8,
                ego_center: (8, 8),
                ..BevConfig::default()
            },
            dse: DseConfig {
                channels: 8,
                width: 8,
                heads: 2,
                queries: 2,
                experts: 3,
                ..DseConfig::default()
            },
            ..PlannerConfig::default()
        }
    }

    fn tiny_batch(cfg: &PlannerConfig, n: usize) -> Batch<f64> {
        let ds = Dataset::generate(n, RegimeMix::Mixed, 3, &cfg.bev).unwrap();
        let refs: Vec<&Entry> = ds.entries.iter().collect();
        Batch::from_entries(&refs, cfg).unwrap()
    }

    #[test]
    fn default_layout() {
        let cfg = PlannerConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.moe_layers(), vec![3, 7]);
        assert_eq!(cfg.patch_tokens(), 16);
        assert_eq!(cfg.seq_len(), 28);
        let l = cfg.layout().unwrap();
        assert_eq!(l.plan, (20..28).collect::<Vec<_>>());
        assert_eq!(l.action, (22..28).collect::<Vec<_>>());
    }

    #[test]
    fn forward_shapes_and_trace() {
        let cfg = tiny_config();
        let planner = Planner::<f64>::new(cfg.clone())
            .unwrap()
            .to_moe(0.0, &mut Rng::new(0, 0))
            .unwrap();
        let batch = tiny_batch(&cfg, 2);
        let x = Rng::new(1, 0).normal_tensor(&[2, 6, 2], 1.0);
        let mut trace = Trace::default();
        let v = planner
            .velocity_traced(&Routing::SceneMerge, &batch, &x, &[0.3, 0.7], &mut trace)
            .unwrap();
        assert_eq!(v.shape(), &[2, 6, 2]);
        assert_eq!(trace.encoder_calls, 1);
        assert_eq!(trace.routing.len(), cfg.moe_layers().len());
        for pi in &trace.routing {
            for row in pi.chunks(3) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unknown_instruction_is_rejected() {
        let cfg = tiny_config();
        let planner = Planner::<f64>::new(cfg.clone()).unwrap();
        let mut batch = tiny_batch(&cfg, 1);
        batch.lang[0][1] = INSTRUCTION_VOCAB;
        let x = Tensor::zeros(&[1, 6, 2]);
        let err = planner.velocity(&Routing::Dense, &batch, &x, &[0.5]).unwrap_err();
        assert!(matches!(err, CoreError::Vocabulary(6)));
    }

    #[test]
    fn identical_experts_match_dense_model() {
        let cfg = tiny_config();
        let dense = Planner::<f64>::new(cfg.clone()).unwrap();
        let moe = dense.to_moe(0.0, &mut Rng::new(0, 0)).unwrap();
        let batch = tiny_batch(&cfg, 2);
        let x = Rng::new(2, 0).normal_tensor(&[2, 6, 2], 1.0);
        let a = dense.velocity(&Routing::Dense, &batch, &x, &[0.2, 0.9]).unwrap();
        let b = moe.velocity(&Routing::SceneMerge, &batch, &x, &[0.2, 0.9]).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn top_k_with_all_experts_selected_and_identical_bank_is_dense() {
        let cfg = tiny_config();
        let dense = Planner::<f64>::new(cfg.clone()).unwrap();
        let moe = dense
            .to_moe(0.0, &mut Rng::new(0, 0))
            .unwrap()
            .with_token_routers(&mut Rng::new(5, 0))
            .unwrap();
        let batch = tiny_batch(&cfg, 2);
        let x = Rng::new(2, 0).normal_tensor(&[2, 6, 2], 1.0);
        let a = dense.velocity(&Routing::Dense, &batch, &x, &[0.2, 0.9]).unwrap();
        let mut trace = Trace::default();
        let b = moe
            .velocity_traced(&Routing::TopK(2), &batch, &x, &[0.2, 0.9], &mut trace)
            .unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
        assert_eq!(trace.selections.len(), 2);
        assert!(trace.selections[0].iter().all(|s| s.len() == 2));
        assert_eq!(trace.encoder_calls, 0);
    }

    #[test]
    fn conditioning_is_blind_to_actions() {
        let cfg = tiny_config();
        let planner = Planner::<f64>::new(cfg.clone())
            .unwrap()
            .to_moe(0.1, &mut Rng::new(0, 0))
            .unwrap();
        let batch = tiny_batch(&cfg, 1);
        let run = |x: Tensor<f64>, tau: f64| {
            let mut g = Graph::new();
            let p = Bound::new(&mut g, &planner.params, |_| false);
            let xv = g.constant(x);
            let h = forward_tokens(
                &mut g,
                &p,
                &cfg,
                &Routing::SceneMerge,
                &batch,
                xv,
                &[tau],
                &mut Trace::default(),
            )
            .unwrap();
            let c = g.narrow(h, 1, 0, cfg.cond_len()).unwrap();
            g.value(c).clone()
        };
        let a = run(Tensor::zeros(&[1, 6, 2]), 0.1);
        let b = run(Rng::new(9, 0).normal_tensor(&[1, 6, 2], 3.0), 0.8);
        assert!(a.bit_eq(&b));
    }
}
