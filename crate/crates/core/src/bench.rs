//! Analytic FLOPs model and measured latency, throughput and memory of the
//! dense, top-k, slot-based and scene-merged FFN layers.
//!
//! FLOPs count one multiply-add as 2. The main convention is the gated FFN
//! (three `d x m` matrices, `6dm` per token and expert); the single-matrix
//! `2dm` convention is reported next to it.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use samoe_numerics::{Graph, Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::dse::{self, DseConfig};
use crate::error::{CoreError, Result};
use crate::moe::{self, ExpertBank};
use crate::params::{Bound, ParamStore};
use crate::scene::BevConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostConfig {
    pub d: usize,
    pub m: usize,
    pub experts: usize,
    pub k: usize,
    pub slots: usize,
    pub batch: usize,
    pub seq: usize,
    pub moe_layers: usize,
    /// Routing embedding width of the scene encoder.
    pub router_width: usize,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            d: 256,
            m: 1024,
            experts: 4,
            k: 2,
            slots: 2,
            batch: 2,
            seq: 512,
            moe_layers: 2,
            router_width: 32,
        }
    }
}

impl CostConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            self.d,
            self.m,
            self.experts,
            self.k,
            self.slots,
            self.batch,
            self.seq,
            self.moe_layers,
            self.router_width,
        ];
        if extents.contains(&0) {
            return Err(CoreError::Config(format!(
                "cost config extents must be positive: {self:?}"
            )));
        }
        if self.k > self.experts {
            return Err(CoreError::Config(format!(
                "k = {} exceeds {} experts",
                self.k, self.experts
            )));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.batch * self.seq
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Dense,
    Sparse,
    Soft,
    Samoe,
}

impl Mechanism {
    pub const ALL: [Mechanism; 4] = [Mechanism::Dense, Mechanism::Sparse, Mechanism::Soft, Mechanism::Samoe];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Dense => "dense",
            Mechanism::Sparse => "sparse",
            Mechanism::Soft => "soft",
            Mechanism::Samoe => "samoe",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Mechanism::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown mechanism {s:?} (dense, sparse, soft, samoe)")))
    }
}

/// Per-token FLOPs of one mechanism, with its additive terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsEntry {
    pub mechanism: Mechanism,
    pub per_token: f64,
    /// Same formula with `2dm` per expert instead of `6dm`.
    pub per_token_2dm: f64,
    pub terms: Vec<(String, f64)>,
}

fn entry(mechanism: Mechanism, ffn: f64, terms: Vec<(String, f64)>) -> FlopsEntry {
    // `terms[0]` always carries the expert FFN cost; the alternative
    // convention rescales it by 1/3.
    let total: f64 = terms.iter().map(|t| t.1).sum();
    FlopsEntry {
        mechanism,
        per_token: total,
        per_token_2dm: total - ffn + ffn / 3.0,
        terms,
    }
}

/// Per-token FLOPs of each mechanism.
pub fn flops_model(cfg: &CostConfig) -> Result<Vec<FlopsEntry>> {
    cfg.validate()?;
    let (d, m, e, k, sl) = (
        cfg.d as f64,
        cfg.m as f64,
        cfg.experts as f64,
        cfg.k as f64,
        cfg.slots as f64,
    );
    let (bl, l, cr) = (cfg.tokens() as f64, cfg.seq as f64, cfg.router_width as f64);
    let ffn = 6.0 * d * m;
    let t = |n: &str, v: f64| (n.to_string(), v);
    Ok(vec![
        entry(Mechanism::Dense, ffn, vec![t("expert_ffn", ffn)]),
        entry(
            Mechanism::Sparse,
            k * ffn,
            vec![t("expert_ffn", k * ffn), t("token_router", 2.0 * d * e)],
        ),
        entry(
            Mechanism::Soft,
            sl * e * ffn / l,
            vec![
                t("expert_ffn", sl * e * ffn / l),
                t("dispatch_combine", 2.0 * e * sl * d),
            ],
        ),
        entry(
            Mechanism::Samoe,
            ffn,
            vec![
                t("expert_ffn", ffn),
                t("weight_merge", 2.0 * e * 3.0 * d * m / bl),
                t("routing_head", 2.0 * cr * e / bl),
            ],
        ),
    ])
}

pub fn flops_of(cfg: &CostConfig, mech: Mechanism) -> Result<f64> {
    Ok(flops_model(cfg)?
        .into_iter()
        .find(|f| f.mechanism == mech)
        .expect("all mechanisms")
        .per_token)
}

/// Parameters of one layer of each mechanism (router weights included for
/// the token-level routers, scene encoder excluded).
pub fn layer_params(cfg: &CostConfig, mech: Mechanism) -> usize {
    let expert = 3 * cfg.d * cfg.m;
    match mech {
        Mechanism::Dense => expert,
        Mechanism::Sparse => cfg.experts * expert + cfg.d * cfg.experts,
        Mechanism::Soft => cfg.experts * expert + cfg.experts * cfg.slots * cfg.d,
        Mechanism::Samoe => cfg.experts * expert,
    }
}

// ---------------------------------------------------------------------------
// allocation counter

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static ACTIVE: AtomicBool = AtomicBool::new(false);

/// Global allocator wrapper that tracks live and peak heap bytes of the
/// allocator it wraps. Install it in a binary or test with
/// `#[global_allocator]`; without it the memory columns read zero.
pub struct CountingAlloc<A = System>(pub A);

unsafe impl<A: GlobalAlloc> GlobalAlloc for CountingAlloc<A> {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = self.0.alloc(layout);
        if !p.is_null() {
            grow(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = self.0.alloc_zeroed(layout);
        if !p.is_null() {
            grow(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        self.0.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = self.0.realloc(ptr, layout, new_size);
        if !p.is_null() {
            CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
            grow(new_size);
        }
        p
    }
}

fn grow(n: usize) {
    ACTIVE.store(true, Ordering::Relaxed);
    let now = CURRENT.fetch_add(n, Ordering::Relaxed) + n;
    PEAK.fetch_max(now, Ordering::Relaxed);
}

/// Whether [`CountingAlloc`] is the global allocator of this process.
pub fn alloc_tracking() -> bool {
    drop(std::hint::black_box(vec![0u8; 1]));
    ACTIVE.load(Ordering::Relaxed)
}

fn alloc_now() -> usize {
    CURRENT.load(Ordering::Relaxed)
}

fn reset_peak() {
    PEAK.store(CURRENT.load(Ordering::Relaxed), Ordering::Relaxed);
}

fn alloc_peak() -> usize {
    PEAK.load(Ordering::Relaxed)
}

// ---------------------------------------------------------------------------
// latency

/// Smallest nonzero step of the monotonic clock.
pub fn timer_tick() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..2000 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mechanism: Mechanism,
    pub d: usize,
    pub m: usize,
    pub experts: usize,
    pub k: usize,
    pub flops_per_token: f64,
    pub median_ms: f64,
    pub tokens_per_s: f64,
    /// Transient heap growth during one forward.
    pub peak_bytes: usize,
    /// Heap growth that survives the forward once its output is dropped.
    pub steady_bytes: usize,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterReport {
    pub encoder_ms: f64,
    pub stack_ms: f64,
    /// `encoder / (encoder + stack)`.
    pub share: f64,
    pub encoder_calls: usize,
    pub flops_per_sample: f64,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: CostConfig,
    pub reps: usize,
    pub seed: u64,
    pub timer_tick_ns: f64,
    pub alloc_tracking: bool,
    pub flops: Vec<FlopsEntry>,
    pub rows: Vec<BenchRow>,
    /// Measured sparse dispatch overhead in FLOP-equivalents per token,
    /// `(t_sparse / t_dense - k) * 6dm`; needs both rows.
    pub sparse_overhead_flops: Option<f64>,
    pub router: Option<RouterReport>,
}

pub const CSV_HEADER: &str = "mechanism,d,m,E,k,flops_per_token,median_ms,tokens_per_s,peak_bytes,steady_bytes,params";

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.mechanism.name(),
                r.d,
                r.m,
                r.experts,
                r.k,
                r.flops_per_token,
                r.median_ms,
                r.tokens_per_s,
                r.peak_bytes,
                r.steady_bytes,
                r.params
            ));
        }
        s
    }

    pub fn row(&self, mech: Mechanism) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.mechanism == mech)
    }
}

/// Deterministic inputs and weights of one layer benchmark.
pub struct LayerFixture {
    pub x: Tensor<f32>,
    pub bank: ExpertBank<f32>,
    pub gate: Tensor<f32>,
    pub slots: Tensor<f32>,
    pub pis: Vec<Vec<f64>>,
    pub k: usize,
}

impl LayerFixture {
    pub fn new(cfg: &CostConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed, 0xbe4c);
        let s = 1.0 / (cfg.d as f64).sqrt();
        Ok(LayerFixture {
            x: rng.normal_tensor(&[cfg.batch, cfg.seq, cfg.d], 1.0),
            bank: ExpertBank::random(cfg.experts, cfg.d, cfg.m, &mut rng),
            gate: rng.normal_tensor(&[cfg.d, cfg.experts], s),
            slots: rng.normal_tensor(&[cfg.experts, cfg.slots, cfg.d], s),
            pis: (0..cfg.batch).map(|_| rng.simplex(cfg.experts)).collect(),
            k: cfg.k,
        })
    }

    pub fn forward(&self, mech: Mechanism) -> Result<Tensor<f32>> {
        match mech {
            Mechanism::Dense => moe::expert_forward(&self.bank, 0, &self.x),
            Mechanism::Sparse => moe::sparse_moe_forward(&self.bank, &self.gate, &self.x, self.k),
            Mechanism::Soft => moe::soft_moe_forward(&self.bank, &self.slots, &self.x),
            Mechanism::Samoe => moe::scene_merged_forward(&self.bank, &self.pis, &self.x),
        }
    }
}

pub const WARMUP: usize = 2;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median wall time of `f` over `reps` timed runs after [`WARMUP`] discarded
/// ones, in seconds, with the transient and surviving heap growth of one run.
fn time_reps<R>(reps: usize, tick: Duration, mut f: impl FnMut() -> Result<R>) -> Result<(f64, usize, usize)> {
    for _ in 0..WARMUP {
        drop(f()?);
    }
    let base = alloc_now();
    reset_peak();
    drop(f()?);
    let peak = alloc_peak().saturating_sub(base);
    let steady = alloc_now().saturating_sub(base);
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        let out = f()?;
        times.push(t.elapsed().as_secs_f64());
        drop(out);
    }
    let med = median(times);
    let ticks = med / tick.as_secs_f64();
    if ticks < 50.0 {
        return Err(CoreError::TimerResolution { ticks });
    }
    Ok((med, peak, steady))
}

/// Times one forward of each mechanism in `impls`.
pub fn latency_bench(cfg: &CostConfig, impls: &[Mechanism], reps: usize, seed: u64) -> Result<BenchReport> {
    if reps < 10 {
        return Err(CoreError::Config(format!("need at least 10 repetitions, got {reps}")));
    }
    let fix = LayerFixture::new(cfg, seed)?;
    let flops = flops_model(cfg)?;
    let tick = timer_tick();
    let mut rows = Vec::new();
    for &mech in impls {
        let (med, peak, steady) = time_reps(reps, tick, || fix.forward(mech))?;
        rows.push(BenchRow {
            mechanism: mech,
            d: cfg.d,
            m: cfg.m,
            experts: cfg.experts,
            k: cfg.k,
            flops_per_token: flops_of(cfg, mech)?,
            median_ms: med * 1e3,
            tokens_per_s: cfg.tokens() as f64 / med,
            peak_bytes: peak,
            steady_bytes: steady,
            params: layer_params(cfg, mech),
        });
    }
    let time_of = |m: Mechanism| rows.iter().find(|r| r.mechanism == m).map(|r| r.median_ms);
    let sparse_overhead_flops = match (time_of(Mechanism::Dense), time_of(Mechanism::Sparse)) {
        (Some(d), Some(s)) => Some((s / d - cfg.k as f64) * 6.0 * (cfg.d * cfg.m) as f64),
        _ => None,
    };
    Ok(BenchReport {
        config: cfg.clone(),
        reps,
        seed,
        timer_tick_ns: tick.as_secs_f64() * 1e9,
        alloc_tracking: alloc_tracking(),
        flops,
        rows,
        sparse_overhead_flops,
        router: None,
    })
}

/// Analytic FLOPs of one scene-encoder pass per sample; depends on the BEV
/// grid only, never on the token sequence.
pub fn router_flops(dse: &DseConfig, bev: &BevConfig, moe_layers: usize) -> f64 {
    let hw = (bev.height * bev.width) as f64;
    let (c, k2, cr, q) = (
        dse.channels as f64,
        (dse.kernel * dse.kernel) as f64,
        dse.width as f64,
        dse.queries as f64,
    );
    let offsets = 2.0 * hw * c * k2 * 2.0 * k2;
    let sampling = 8.0 * hw * c * k2;
    let conv = 2.0 * hw * c * k2 * cr;
    let kv = 2.0 * 2.0 * hw * cr * cr;
    let attn = 2.0 * 2.0 * q * hw * cr + 2.0 * 2.0 * q * cr * cr;
    let heads = 2.0 * moe_layers as f64 * cr * dse.experts as f64;
    offsets + sampling + conv + kv + attn + heads
}

/// One scene-encoder forward over `bev` (`[B, C, H, W]`): encodes once, then
/// evaluates every routing head. Returns the routing weights per layer and
/// the number of encoder passes.
pub fn run_router(
    store: &ParamStore<f32>,
    cfg: &DseConfig,
    near: &Tensor<f64>,
    bev: &Tensor<f32>,
    layers: &[usize],
) -> Result<(Vec<Tensor<f32>>, usize)> {
    let mut g = Graph::new();
    let p = Bound::new(&mut g, store, |_| false);
    let x = g.constant(bev.clone());
    let h = dse::encode(&mut g, &p, cfg, x, near)?;
    let pis = layers
        .iter()
        .map(|&l| dse::route(&mut g, &p, h, l).map(|v| g.value(v).clone()))
        .collect::<Result<_>>()?;
    Ok((pis, 1))
}

/// Times the scene encoder alone against the stack of scene-merged layers
/// it feeds.
pub fn router_bench(cfg: &CostConfig, reps: usize, seed: u64) -> Result<RouterReport> {
    if reps < 10 {
        return Err(CoreError::Config(format!("need at least 10 repetitions, got {reps}")));
    }
    cfg.validate()?;
    let bev = BevConfig::default();
    let dcfg = DseConfig {
        channels: bev.channels,
        width: cfg.router_width,
        experts: cfg.experts,
        ..DseConfig::default()
    };
    let layers: Vec<usize> = (0..cfg.moe_layers).collect();
    let mut rng = Rng::new(seed, 0x4047);
    let mut store = ParamStore::<f32>::new();
    dse::init_params(&dcfg, &layers, &mut rng, &mut store);
    let near = dse::near_field_map(bev.height, bev.width, bev.ego_center)?;
    let input: Tensor<f32> = rng.uniform_tensor(&[cfg.batch, bev.channels, bev.height, bev.width], 0.0, 1.0);
    let fix = LayerFixture::new(cfg, seed)?;
    let tick = timer_tick();
    let mut calls = 0;
    let (enc, _, _) = time_reps(reps, tick, || {
        let (pis, c) = run_router(&store, &dcfg, &near, &input, &layers)?;
        calls = c;
        Ok(pis)
    })?;
    let (stack, _, _) = time_reps(reps, tick, || {
        let mut x = fix.x.clone();
        for _ in 0..cfg.moe_layers {
            x = moe::scene_merged_forward(&fix.bank, &fix.pis, &x)?;
        }
        Ok(x)
    })?;
    Ok(RouterReport {
        encoder_ms: enc * 1e3,
        stack_ms: stack * 1e3,
        share: enc / (enc + stack),
        encoder_calls: calls,
        flops_per_sample: router_flops(&dcfg, &bev, cfg.moe_layers),
        params: store.numel(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_ratio() {
        let cfg = CostConfig {
            batch: 4,
            seq: 256,
            ..CostConfig::default()
        };
        let r = flops_of(&cfg, Mechanism::Sparse).unwrap() / flops_of(&cfg, Mechanism::Samoe).unwrap();
        assert!((1.90..=2.00).contains(&r), "{r}");
    }

    #[test]
    fn single_expert_collapses() {
        let cfg = CostConfig {
            experts: 1,
            k: 1,
            ..CostConfig::default()
        };
        let dense = flops_of(&cfg, Mechanism::Dense).unwrap();
        for m in [Mechanism::Sparse, Mechanism::Samoe] {
            assert!((flops_of(&cfg, m).unwrap() / dense - 1.0).abs() <= 1e-3, "{m:?}");
        }
    }

    #[test]
    fn linear_in_m() {
        let a = CostConfig::default();
        let b = CostConfig {
            m: 2 * a.m,
            ..a.clone()
        };
        for m in Mechanism::ALL {
            let (fa, fb) = (flops_model(&a).unwrap(), flops_model(&b).unwrap());
            let get = |f: &[FlopsEntry]| f.iter().find(|e| e.mechanism == m).unwrap().terms[0].1;
            assert_eq!(get(&fb), 2.0 * get(&fa));
        }
    }

    #[test]
    fn samoe_below_sparse() {
        for (k, b, l) in [(2, 1, 1024), (2, 8, 256), (3, 4, 512), (4, 16, 64)] {
            let cfg = CostConfig {
                k,
                batch: b,
                seq: l,
                ..CostConfig::default()
            };
            assert!(flops_of(&cfg, Mechanism::Samoe).unwrap() < flops_of(&cfg, Mechanism::Sparse).unwrap());
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(flops_model(&CostConfig {
            k: 5,
            ..CostConfig::default()
        })
        .is_err());
        assert!(flops_model(&CostConfig {
            d: 0,
            ..CostConfig::default()
        })
        .is_err());
        let tiny = CostConfig {
            d: 4,
            m: 4,
            batch: 1,
            seq: 2,
            ..CostConfig::default()
        };
        assert!(latency_bench(&tiny, &[Mechanism::Dense], 5, 0).is_err());
    }

    #[test]
    fn router_flops_ignore_sequence() {
        let d = DseConfig::default();
        let b = BevConfig::default();
        assert_eq!(router_flops(&d, &b, 2), router_flops(&d, &b, 2));
        assert!(router_flops(&d, &b, 4) > router_flops(&d, &b, 2));
    }

    #[test]
    fn fixture_mechanisms_agree_when_experts_match() {
        let cfg = CostConfig {
            d: 8,
            m: 16,
            batch: 2,
            seq: 5,
            ..CostConfig::default()
        };
        let mut fix = LayerFixture::new(&cfg, 3).unwrap();
        let e0 = (fix.bank.w1[0].clone(), fix.bank.w3[0].clone(), fix.bank.w2[0].clone());
        let n = cfg.experts;
        fix.bank = ExpertBank::new(vec![e0.0; n], vec![e0.1; n], vec![e0.2; n]).unwrap();
        let dense = fix.forward(Mechanism::Dense).unwrap();
        for m in [Mechanism::Sparse, Mechanism::Samoe] {
            assert!(fix.forward(m).unwrap().max_abs_diff(&dense) < 1e-5, "{m:?}");
        }
    }
}
