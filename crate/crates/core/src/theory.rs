//! Numerical experiments on weight-space merging.
//!
//! Quantities that are only defined existentially (the ideal per-scene
//! parameters, the flip margin of top-k routing) are replaced by measured
//! proxies: realized parameter dispersion, flip-induced trajectory
//! divergence, finite-difference Lipschitz ratios.

use std::collections::BTreeMap;

use samoe_numerics::{Graph, Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Entry, RegimeMix};
use crate::dse;
use crate::error::{CoreError, Result};
use crate::moe::{self, ExpertBank};
use crate::params::Bound;
use crate::planner::{Batch, FlowBatch, Planner, PlannerConfig, Routing, Trace};
use crate::scene::{BevConfig, Regime};

/// Finite-difference step used by every probe.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    /// The experiment could not reach its precondition (no routing flip).
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub seed: u64,
    pub status: Status,
    pub parameters: BTreeMap<String, f64>,
    pub measured: BTreeMap<String, f64>,
    pub series: BTreeMap<String, Vec<f64>>,
    pub notes: Vec<String>,
}

impl ExperimentReport {
    fn new(name: &str, seed: u64) -> Self {
        ExperimentReport {
            name: name.to_string(),
            seed,
            status: Status::Fail,
            parameters: BTreeMap::new(),
            measured: BTreeMap::new(),
            series: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    fn param(&mut self, k: &str, v: f64) -> &mut Self {
        self.parameters.insert(k.into(), v);
        self
    }

    fn measure(&mut self, k: &str, v: f64) -> &mut Self {
        self.measured.insert(k.into(), v);
        self
    }

    fn verdict(&mut self, ok: bool) {
        self.status = if ok { Status::Pass } else { Status::Fail };
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }
}

pub const EXPERIMENTS: [&str; 6] = [
    "dispersion_identity",
    "residual_bound",
    "bilipschitz_probe",
    "variance_ordering",
    "trajectory_divergence",
    "gradient_stability",
];

fn rel_err(a: f64, b: f64) -> f64 {
    let den = a.abs().max(b.abs());
    if den < 1e-300 {
        0.0
    } else {
        (a - b).abs() / den
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Least-squares `y = a + b x`; returns `(a, b)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let b = if sxx == 0.0 { 0.0 } else { sxy / sxx };
    (my - b * mx, b)
}

/// `Σ_e π_e‖W_e - W(π)‖²` over one bank's flattened experts.
fn spread(experts: &[Vec<f64>], pi: &[f64]) -> f64 {
    moe::dispersion_identity_sides(experts, pi).0
}

// ---------------------------------------------------------------------------

/// Checks `Σ_e π_e‖W_e - W(π)‖² = ½ Σ_{e≠e'} π_e π_e'‖W_e - W_e'‖²` on random
/// banks with `E ∈ {2..8}`.
pub fn exp_dispersion_identity(seed: u64, trials: usize) -> Result<ExperimentReport> {
    if trials == 0 {
        return Err(CoreError::Experiment("need at least one trial".into()));
    }
    let mut rng = Rng::new(seed, 0xd15);
    let mut rep = ExperimentReport::new("dispersion_identity", seed);
    rep.param("trials", trials as f64).param("tolerance", 1e-10);
    let mut worst = 0.0f64;
    let mut errs = Vec::with_capacity(trials);
    for _ in 0..trials {
        let e = rng.int_in(2, 8);
        let (d, m) = (rng.int_in(2, 6), rng.int_in(2, 8));
        let bank = ExpertBank::<f64>::random(e, d, m, &mut rng);
        let experts: Vec<Vec<f64>> = (0..e).map(|i| bank.flatten(i)).collect();
        let pi = rng.simplex(e);
        let (l, r) = moe::dispersion_identity_sides(&experts, &pi);
        let err = rel_err(l, r);
        worst = worst.max(err);
        errs.push(err);
    }
    rep.measure("max_rel_err", worst);
    rep.series.insert("rel_err".into(), errs);
    rep.verdict(worst <= 1e-10);
    Ok(rep)
}

/// Merging residual of banks `W̄ + s D_e` against the scale `s`.
pub fn exp_residual_bound(seed: u64, scales: &[f64]) -> Result<ExperimentReport> {
    if scales.len() < 5 {
        return Err(CoreError::Experiment(format!(
            "need at least 5 scales, got {}",
            scales.len()
        )));
    }
    let (e, d, m, n) = (4, 8, 16, 16);
    let mut rng = Rng::new(seed, 0x4e5);
    let base = ExpertBank::<f64>::random(1, d, m, &mut rng);
    let dirs = ExpertBank::<f64>::random(e, d, m, &mut rng);
    let pis: Vec<Vec<f64>> = (0..8)
        .map(|_| rng.simplex(e).iter().map(|p| 0.5 * p + 0.5 / e as f64).collect())
        .collect();
    let x: Tensor<f64> = rng.normal_tensor(&[n, d], 1.0);
    let bank_at = |s: f64| -> ExpertBank<f64> {
        let mk = |b: &Tensor<f64>, dv: &[Tensor<f64>]| -> Vec<Tensor<f64>> {
            dv.iter()
                .map(|t| b.zip_map(t, |a, c| a + s * c).expect("same shape"))
                .collect()
        };
        ExpertBank::new(
            mk(&base.w1[0], &dirs.w1),
            mk(&base.w3[0], &dirs.w3),
            mk(&base.w2[0], &dirs.w2),
        )
        .expect("consistent bank")
    };
    let run = |xs: &Tensor<f64>| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut res = Vec::new();
        let mut ratio = Vec::new();
        for &s in scales {
            let bank = bank_at(s);
            let experts: Vec<Vec<f64>> = (0..e).map(|i| bank.flatten(i)).collect();
            let mut r_sum = 0.0;
            let mut q_sum = 0.0;
            for pi in &pis {
                let r = moe::merging_residual(&bank, pi, xs)?;
                // Ordered-pair sum Σ_{e≠e'} π_e π_e' ‖ΔW‖² = 2 Σ_e π_e ‖W_e - W(π)‖².
                let bound = 2.0 * spread(&experts, pi);
                r_sum += r;
                q_sum += r / bound;
            }
            res.push(r_sum / pis.len() as f64);
            ratio.push(q_sum / pis.len() as f64);
        }
        Ok((res, ratio))
    };
    let fit = |res: &[f64]| -> Result<f64> {
        let pts: Vec<(f64, f64)> = scales
            .iter()
            .zip(res)
            .filter(|(_, &r)| r > 0.0)
            .map(|(s, r)| (s.ln(), r.ln()))
            .collect();
        if pts.len() < 3 {
            return Err(CoreError::Experiment("fewer than 3 nonzero residuals to fit".into()));
        }
        let (xs, ys): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        Ok(linear_fit(&xs, &ys).1)
    };
    let (res, ratio) = run(&x)?;
    let slope = fit(&res)?;
    let (res2, _) = run(&x.scale(2.0))?;
    let slope2 = fit(&res2)?;
    let rmax = ratio.iter().cloned().fold(f64::MIN, f64::max);
    let rmin = ratio.iter().cloned().fold(f64::MAX, f64::min);

    let mut rep = ExperimentReport::new("residual_bound", seed);
    rep.param("experts", e as f64).param("d", d as f64).param("m", m as f64);
    rep.measure("slope", slope)
        .measure("slope_x2", slope2)
        .measure("ratio_spread", rmax / rmin);
    rep.series.insert("scales".into(), scales.to_vec());
    rep.series.insert("residual".into(), res);
    rep.series.insert("bound_ratio".into(), ratio);
    let band = |s: f64| (1.8..=2.2).contains(&s);
    rep.verdict(band(slope) && band(slope2) && rmax / rmin <= 3.0);
    Ok(rep)
}

/// Five-point geometric grid from `1e-3` to `1e-1`.
pub fn default_scales() -> Vec<f64> {
    (0..5).map(|i| 10f64.powf(-3.0 + 0.5 * i as f64)).collect()
}

// ---------------------------------------------------------------------------
// planner-based experiments

/// Expert jitter of the lab planner.
pub const LAB_JITTER: f64 = 0.05;

/// Default-size SA-MoE planner with jittered experts, a live offset
/// predictor and token routers for the top-k variant.
pub fn lab_planner(seed: u64) -> Result<Planner<f64>> {
    let cfg = PlannerConfig {
        seed,
        ..PlannerConfig::default()
    };
    let mut rng = Rng::new(seed, 0x1ab);
    let mut p = Planner::<f64>::new(cfg)?.to_moe(LAB_JITTER, &mut rng)?;
    let ow = p.params.get("dse/offset/w")?.shape().to_vec();
    p.params.insert("dse/offset/w", rng.normal_tensor(&ow, 0.05));
    p.with_token_routers(&mut rng)
}

fn lab_scenes(seed: u64, count: usize, bev: &BevConfig) -> Result<Dataset> {
    Dataset::generate(count, RegimeMix::Mixed, seed, bev)
}

fn single_batch(planner: &Planner<f64>, entry: &Entry) -> Result<Batch<f64>> {
    Batch::from_entries(&[entry], &planner.config)
}

/// Per-layer flattened expert parameters.
fn layer_experts(planner: &Planner<f64>) -> Result<Vec<Vec<Vec<f64>>>> {
    planner
        .config
        .moe_layers()
        .into_iter()
        .map(|l| {
            let bank = planner.bank(l)?;
            Ok((0..bank.experts()).map(|e| bank.flatten(e)).collect())
        })
        .collect()
}

/// Directional derivatives of the velocity field along segments inside the
/// convex hull of the expert parameters.
pub fn exp_bilipschitz_probe(planner: &Planner<f64>, probes: usize, seed: u64) -> Result<ExperimentReport> {
    let mut rng = Rng::new(seed, 0xb11);
    let data = lab_scenes(seed, 1, &planner.config.bev)?;
    let batch = single_batch(planner, &data.entries[0])?;
    let fb = FlowBatch::draw(&batch.actions, &mut rng)?;
    let experts = layer_experts(planner)?;
    let e = planner.config.experts;
    let layers = experts.len();
    let mut ratios = Vec::new();
    let mut skipped = 0;
    for _ in 0..probes {
        let a: Vec<Vec<f64>> = (0..layers).map(|_| rng.simplex(e)).collect();
        let b: Vec<Vec<f64>> = (0..layers).map(|_| rng.simplex(e)).collect();
        let lam = rng.uniform_in(0.1, 0.9);
        let at = |t: f64| -> Vec<Vec<f64>> {
            a.iter()
                .zip(&b)
                .map(|(pa, pb)| pa.iter().zip(pb).map(|(x, y)| (1.0 - t) * x + t * y).collect())
                .collect()
        };
        // ‖dθ/dλ‖ over all expert layers.
        let mut dtheta = 0.0;
        for (l, ex) in experts.iter().enumerate() {
            let dir: Vec<f64> = (0..ex[0].len())
                .map(|j| ex.iter().enumerate().map(|(i, w)| (b[l][i] - a[l][i]) * w[j]).sum())
                .collect();
            dtheta += norm(&dir).powi(2);
        }
        let dtheta = dtheta.sqrt();
        if dtheta < 1e-12 {
            skipped += 1;
            continue;
        }
        let vp = planner.velocity(&Routing::Fixed(at(lam + FD_STEP)), &batch, &fb.x_tau, &fb.taus)?;
        let vm = planner.velocity(&Routing::Fixed(at(lam - FD_STEP)), &batch, &fb.x_tau, &fb.taus)?;
        let dv = diff_norm(&vp.to_f64_vec(), &vm.to_f64_vec()) / (2.0 * FD_STEP);
        ratios.push(dv / dtheta);
    }
    let mut rep = ExperimentReport::new("bilipschitz_probe", seed);
    rep.param("probes", probes as f64).param("fd_step", FD_STEP);
    if ratios.is_empty() {
        rep.notes.push("expert hull is a point; no direction to probe".into());
        rep.status = Status::Inconclusive;
        return Ok(rep);
    }
    let l = ratios.iter().cloned().fold(f64::MIN, f64::max);
    let c = ratios.iter().cloned().fold(f64::MAX, f64::min);
    rep.measure("upper_l", l)
        .measure("lower_c", c)
        .measure("skipped", skipped as f64);
    rep.series.insert("ratios".into(), ratios);
    rep.notes
        .push("probe set: segments between random routing weights, i.e. the routing-reachable hull".into());
    rep.verdict(l.is_finite() && c.is_finite() && c > 0.0 && l >= c);
    Ok(rep)
}

/// Scenes from three regimes used by the variance experiment.
pub fn three_regime_dataset(seed: u64, per_regime: usize, bev: &BevConfig) -> Result<Dataset> {
    let mut scenes = Vec::new();
    let mut rng = Rng::new(seed, 0x3e9);
    for _ in 0..per_regime {
        for r in [Regime::Nominal, Regime::Intersection, Regime::NarrowTurn] {
            scenes.push(crate::scene::gen_scene(rng.next_u64(), r));
        }
    }
    Dataset::from_scenes(scenes, bev)
}

/// Realized parameter dispersion of the three routing mechanisms on one
/// batch: `(scene merge, soft slots, top-k)`.
pub fn mechanism_dispersions(data: &Dataset, seed: u64, jitter: f64, k: usize) -> Result<(f64, f64, f64)> {
    let cfg = dse::DseConfig {
        channels: data.bev.channels,
        ..dse::DseConfig::default()
    };
    let (c, e, m, slots) = (cfg.width, cfg.experts, 2 * cfg.width, 2);
    let mut rng = Rng::new(seed, 0x7a2);
    let base = ExpertBank::<f64>::random(1, c, m, &mut rng);
    let bank = ExpertBank::replicate(&base.w1[0], &base.w3[0], &base.w2[0], e, jitter, &mut rng);
    let experts: Vec<Vec<f64>> = (0..e).map(|i| bank.flatten(i)).collect();
    if spread(&experts, &vec![1.0 / e as f64; e]) == 0.0 {
        return Err(CoreError::Experiment(
            "experts are identical; dispersion is zero for every mechanism (add jitter)".into(),
        ));
    }
    let mut store = crate::params::ParamStore::<f64>::new();
    dse::init_params(&cfg, &[0], &mut rng, &mut store);
    let ow = store.get("dse/offset/w")?.shape().to_vec();
    store.insert("dse/offset/w", rng.normal_tensor(&ow, 0.05));
    let gate: Tensor<f64> = rng.normal_tensor(&[c, e], 1.0 / (c as f64).sqrt());
    let slot_w: Tensor<f64> = rng.normal_tensor(&[e, slots, c], 1.0 / (c as f64).sqrt());

    let grids: Vec<Tensor<f64>> = data.entries.iter().map(|en| en.grid.data.cast()).collect();
    let bev = Tensor::stack(&grids)?;
    let b = data.len();
    let near = dse::near_field_map(data.bev.height, data.bev.width, data.bev.ego_center)?;
    let mut g = Graph::new();
    let p = Bound::new(&mut g, &store, |_| false);
    let bv = g.constant(bev);
    let (ow, ob) = (p.get("dse/offset/w")?, p.get("dse/offset/b")?);
    let offsets = dse::predict_offsets(&mut g, bv, &near, ow, ob, cfg.kernel)?;
    let (cw, cb) = (p.get("dse/conv/w")?, p.get("dse/conv/b")?);
    let tokens = dse::deformable_conv_tokens(&mut g, bv, offsets, cw, cb, cfg.kernel)?;
    let s = crate::nn::layer_norm_named(&mut g, &p, "dse/norm", tokens)?;
    let h = dse::encode(&mut g, &p, &cfg, bv, &near)?;
    let pi = dse::route(&mut g, &p, h, 0)?;
    let s_val = g.value(s).clone();
    let pi_val = g.value(pi).to_f64_vec();
    let l = s_val.shape()[1];

    let sa: Vec<Vec<f64>> = (0..b * l)
        .map(|t| pi_val[(t / l) * e..(t / l + 1) * e].to_vec())
        .collect();
    let flat = s_val.reshape(&[b * l, c])?;
    let sparse = moe::sparse_gates(&samoe_numerics::ops::matmul(&flat, &gate)?, k)?;
    let soft = moe::soft_moe_detailed(&bank, &slot_w, &s_val)?.token_weights;
    Ok((
        moe::parameter_dispersion(&bank, &sa)?,
        moe::parameter_dispersion(&bank, &soft)?,
        moe::parameter_dispersion(&bank, &sparse)?,
    ))
}

/// Ordering of realized dispersion across routing mechanisms, repeated
/// over seeds.
pub fn exp_variance_ordering(data: &Dataset, seed: u64, seeds: usize) -> Result<ExperimentReport> {
    let regimes: std::collections::BTreeSet<Regime> = data.entries.iter().map(|e| e.scene.regime).collect();
    if regimes.len() < 3 {
        return Err(CoreError::Experiment(format!(
            "need 3 scene regimes, got {}",
            regimes.len()
        )));
    }
    let mut rep = ExperimentReport::new("variance_ordering", seed);
    rep.param("seeds", seeds as f64)
        .param("jitter", LAB_JITTER)
        .param("top_k", 2.0);
    let (mut sa, mut soft, mut sparse) = (Vec::new(), Vec::new(), Vec::new());
    let mut held = 0;
    for i in 0..seeds {
        let (a, b, c) = mechanism_dispersions(data, seed.wrapping_add(i as u64), LAB_JITTER, 2)?;
        if a <= b && b <= c {
            held += 1;
        }
        sa.push(a);
        soft.push(b);
        sparse.push(c);
    }
    rep.measure("ordered_seeds", held as f64);
    rep.series.insert("scene_merge".into(), sa);
    rep.series.insert("soft".into(), soft);
    rep.series.insert("sparse".into(), sparse);
    let need = (seeds * 9).div_ceil(10);
    rep.param("required", need as f64);
    rep.verdict(held >= need);
    Ok(rep)
}

/// Continuous inputs of a scene as one vector (BEV, history, bus).
fn scene_vector(b: &Batch<f64>) -> Vec<f64> {
    let mut v = b.bev.to_vec();
    v.extend(b.history.data());
    v.extend(b.bus.data());
    v
}

/// `(1 - λ) a + λ b` on every continuous input; discrete inputs from `a`.
fn blend(a: &Batch<f64>, b: &Batch<f64>, lam: f64) -> Result<Batch<f64>> {
    let mix = |x: &Tensor<f64>, y: &Tensor<f64>| x.zip_map(y, |p, q| (1.0 - lam) * p + lam * q);
    Ok(Batch {
        bev: mix(&a.bev, &b.bev)?,
        lang: a.lang.clone(),
        history: mix(&a.history, &b.history)?,
        bus: mix(&a.bus, &b.bus)?,
        actions: a.actions.clone(),
        route_bev: None,
    })
}

/// Final trajectory plus the concatenated top-k selections along the way.
fn integrate(
    planner: &Planner<f64>,
    routing: &Routing,
    batch: &Batch<f64>,
    x1: &Tensor<f64>,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut sig = Vec::new();
    let out = crate::flow::euler_from(
        |x, t| {
            let mut tr = Trace::default();
            let v = planner.velocity_traced(routing, batch, x, &[t], &mut tr)?;
            for layer in tr.selections {
                for tok in layer {
                    sig.extend(tok);
                }
            }
            Ok(v)
        },
        x1.clone(),
        planner.config.ode_steps,
    )?;
    Ok((out.scale(planner.config.action_scale).to_vec(), sig))
}

/// Grid of relative perturbation sizes spanning a factor of 100.
pub fn default_eps_grid() -> Vec<f64> {
    (0..5).map(|i| 1e-3 * 10f64.powf(-0.5 * i as f64)).collect()
}

/// Trajectory deviation under shrinking scene perturbations, for scene
/// merging and for top-k routing across a located routing flip.
pub fn exp_trajectory_divergence(
    planner: &Planner<f64>,
    eps_grid: &[f64],
    max_probes: usize,
    seed: u64,
) -> Result<ExperimentReport> {
    if eps_grid.len() < 3 {
        return Err(CoreError::Experiment("need at least 3 perturbation sizes".into()));
    }
    let k = 2.min(planner.config.experts);
    let sparse = Routing::TopK(k);
    let data = lab_scenes(seed, 16, &planner.config.bev)?;
    let batches: Vec<Batch<f64>> = data
        .entries
        .iter()
        .map(|e| single_batch(planner, e))
        .collect::<Result<_>>()?;
    let mut rng = Rng::new(seed, 0xd1f);
    let x1: Tensor<f64> = rng.normal_tensor(&[1, planner.config.horizon, 2], 1.0);
    let mut rep = ExperimentReport::new("trajectory_divergence", seed);
    rep.param("top_k", k as f64).param("max_probes", max_probes as f64);

    // Locate a flip: a pair of scenes whose routing signatures differ, then
    // bisect the blend parameter.
    let mut probes = 0;
    let mut found = None;
    'search: while probes < max_probes {
        let i = rng.below(batches.len());
        let j = (i + 1 + rng.below(batches.len() - 1)) % batches.len();
        let (a, b) = (&batches[i], &batches[j]);
        let sig = |lam: f64, probes: &mut usize| -> Result<Vec<usize>> {
            *probes += 1;
            Ok(integrate(planner, &sparse, &blend(a, b, lam)?, &x1)?.1)
        };
        let s0 = sig(0.0, &mut probes)?;
        if sig(1.0, &mut probes)? == s0 {
            continue;
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        while hi - lo > 1e-12 {
            if probes >= max_probes {
                break 'search;
            }
            let mid = 0.5 * (lo + hi);
            if sig(mid, &mut probes)? == s0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        found = Some((i, j, 0.5 * (lo + hi)));
        break;
    }
    rep.measure("probes", probes as f64);
    let Some((i, j, flip)) = found else {
        rep.notes.push(format!("flip not found after {probes} probes"));
        rep.status = Status::Inconclusive;
        return Ok(rep);
    };
    rep.measure("flip_lambda", flip);
    let (a, b) = (&batches[i], &batches[j]);
    let span = diff_norm(&scene_vector(a), &scene_vector(b));

    let mut deltas = Vec::new();
    let mut dev_sa = Vec::new();
    let mut dev_sparse = Vec::new();
    for &eta in eps_grid {
        let (l0, l1) = (flip - 0.5 * eta, flip + 0.5 * eta);
        let (p0, p1) = (blend(a, b, l0)?, blend(a, b, l1)?);
        deltas.push(eta * span);
        let (ya, _) = integrate(planner, &Routing::SceneMerge, &p0, &x1)?;
        let (yb, _) = integrate(planner, &Routing::SceneMerge, &p1, &x1)?;
        dev_sa.push(diff_norm(&ya, &yb));
        let (ya, _) = integrate(planner, &sparse, &p0, &x1)?;
        let (yb, _) = integrate(planner, &sparse, &p1, &x1)?;
        dev_sparse.push(diff_norm(&ya, &yb));
    }
    let same = blend(a, b, flip)?;
    let (y0, _) = integrate(planner, &Routing::SceneMerge, &same, &x1)?;
    let (y1, _) = integrate(planner, &Routing::SceneMerge, &same, &x1)?;
    rep.measure("zero_delta_deviation", diff_norm(&y0, &y1));

    let (intercept, slope) = linear_fit(&deltas, &dev_sa);
    let (big, small) = (dev_sparse[0], *dev_sparse.last().expect("non-empty grid"));
    let shrink = deltas[0] / deltas[deltas.len() - 1];
    rep.measure("scene_merge_slope", slope)
        .measure("scene_merge_intercept", intercept)
        .measure("sparse_large_delta", big)
        .measure("sparse_small_delta", small)
        .measure("delta_shrink", shrink);
    rep.series.insert("delta".into(), deltas);
    rep.series.insert("scene_merge_deviation".into(), dev_sa);
    rep.series.insert("sparse_deviation".into(), dev_sparse);
    rep.verdict(slope > 0.0 && intercept.abs() <= 1e-4 && big > 0.0 && small >= 0.1 * big);
    Ok(rep)
}

/// Lipschitz ratio of expert gradients under routing-scene perturbations.
pub fn exp_gradient_stability(planner: &Planner<f64>, probes: usize, seed: u64) -> Result<ExperimentReport> {
    if probes < 2 {
        return Err(CoreError::Experiment("need at least 2 probes".into()));
    }
    let mut rng = Rng::new(seed, 0x9a5);
    let data = lab_scenes(seed, 1, &planner.config.bev)?;
    let batch = single_batch(planner, &data.entries[0])?;
    let fb = FlowBatch::draw(&batch.actions, &mut rng)?;
    let is_expert = |n: &str| n.contains("/moe/") && !n.ends_with("/gate");
    let grads = |route: &Tensor<f64>| -> Result<Vec<f64>> {
        let mut b = batch.clone();
        b.route_bev = Some(route.clone());
        let (_, g) = planner.loss_and_grads(&Routing::SceneMerge, &b, &fb, is_expert)?;
        Ok(g.into_iter().flat_map(|(_, t)| t.to_vec()).collect())
    };
    let s1 = batch.bev.clone();
    let g1 = grads(&s1)?;
    let radius = 1e-3 * s1.norm();
    let mut ratios = Vec::with_capacity(probes);
    let mut halving = 0.0;
    for i in 0..probes {
        let dir: Tensor<f64> = rng.normal_tensor(s1.shape(), 1.0);
        let dir = dir.scale(radius / dir.norm());
        let s2 = s1.zip_map(&dir, |a, b| a + b)?;
        let diff = diff_norm(&g1, &grads(&s2)?);
        ratios.push(diff / radius);
        if i == 0 {
            let s_half = s1.zip_map(&dir, |a, b| a + 0.5 * b)?;
            let half = diff_norm(&g1, &grads(&s_half)?);
            halving = (half / diff - 0.5).abs() / 0.5;
        }
    }
    let zero = diff_norm(&g1, &grads(&s1)?);
    let h = probes / 2;
    let first = ratios[..h].iter().cloned().fold(0.0, f64::max);
    let second = ratios[h..].iter().cloned().fold(0.0, f64::max);
    let mut rep = ExperimentReport::new("gradient_stability", seed);
    rep.param("probes", probes as f64).param("radius", radius);
    rep.measure("max_ratio", first.max(second))
        .measure("max_first_half", first)
        .measure("max_second_half", second)
        .measure("halving_rel_dev", halving)
        .measure("zero_perturbation_diff", zero);
    rep.series.insert("ratios".into(), ratios.clone());
    let finite = ratios.iter().all(|r| r.is_finite());
    rep.verdict(finite && second <= 2.0 * first && halving <= 0.2 && zero == 0.0);
    Ok(rep)
}

/// Default probe counts used by [`run`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabOptions {
    pub identity_trials: usize,
    pub bilipschitz_probes: usize,
    pub ordering_seeds: usize,
    pub divergence_probes: usize,
    pub gradient_probes: usize,
}

impl Default for LabOptions {
    fn default() -> Self {
        LabOptions {
            identity_trials: 200,
            bilipschitz_probes: 16,
            ordering_seeds: 20,
            divergence_probes: 10_000,
            gradient_probes: 12,
        }
    }
}

/// Runs one named experiment with a lab planner built from `seed` unless
/// `planner` is given.
pub fn run(name: &str, seed: u64, opts: &LabOptions, planner: Option<&Planner<f64>>) -> Result<ExperimentReport> {
    let owned;
    let lab = |owned: &mut Option<Planner<f64>>| -> Result<()> {
        if owned.is_none() && planner.is_none() {
            *owned = Some(lab_planner(seed)?);
        }
        Ok(())
    };
    let mut slot = None;
    match name {
        "dispersion_identity" => exp_dispersion_identity(seed, opts.identity_trials),
        "residual_bound" => exp_residual_bound(seed, &default_scales()),
        "variance_ordering" => {
            let data = three_regime_dataset(seed, 4, &BevConfig::default())?;
            exp_variance_ordering(&data, seed, opts.ordering_seeds)
        }
        "bilipschitz_probe" | "trajectory_divergence" | "gradient_stability" => {
            lab(&mut slot)?;
            owned = slot;
            let p = planner.or(owned.as_ref()).expect("planner available");
            match name {
                "bilipschitz_probe" => exp_bilipschitz_probe(p, opts.bilipschitz_probes, seed),
                "trajectory_divergence" => {
                    exp_trajectory_divergence(p, &default_eps_grid(), opts.divergence_probes, seed)
                }
                _ => exp_gradient_stability(p, opts.gradient_probes, seed),
            }
        }
        other => Err(CoreError::Experiment(format!(
            "unknown experiment {other:?}; expected one of {}",
            EXPERIMENTS.join(", ")
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_examples() {
        let two = vec![vec![0.0], vec![2.0]];
        assert_eq!(moe::dispersion_identity_sides(&two, &[0.5, 0.5]), (1.0, 1.0));
        assert_eq!(moe::dispersion_identity_sides(&two, &[1.0, 0.0]), (0.0, 0.0));
        let same = vec![vec![1.5, 2.0]; 3];
        assert_eq!(moe::dispersion_identity_sides(&same, &[0.2, 0.3, 0.5]), (0.0, 0.0));
    }

    #[test]
    fn identity_experiment_passes_and_round_trips() {
        let r = exp_dispersion_identity(3, 50).unwrap();
        assert!(r.passed(), "{:?}", r.measured);
        let json = serde_json::to_string(&r).unwrap();
        let back: ExperimentReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        assert_eq!(exp_dispersion_identity(3, 50).unwrap(), r);
    }

    #[test]
    fn residual_needs_five_scales() {
        assert!(exp_residual_bound(0, &[1e-3, 1e-2]).is_err());
    }

    #[test]
    fn fit_recovers_line() {
        let (a, b) = linear_fit(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]);
        assert!((a - 1.0).abs() < 1e-12 && (b - 2.0).abs() < 1e-12);
    }

    #[test]
    fn identical_bank_is_rejected() {
        let data = three_regime_dataset(0, 1, &BevConfig::default()).unwrap();
        assert!(matches!(
            mechanism_dispersions(&data, 0, 0.0, 2),
            Err(CoreError::Experiment(_))
        ));
    }

    #[test]
    fn single_scene_merge_has_zero_dispersion() {
        let data = three_regime_dataset(0, 1, &BevConfig::default()).unwrap();
        let one = data.subset(&[0]);
        let (sa, soft, sparse) = mechanism_dispersions(&one, 1, LAB_JITTER, 1).unwrap();
        assert_eq!(sa, 0.0);
        assert!(soft > 0.0 && sparse > 0.0);
    }

    #[test]
    fn unknown_experiment() {
        assert!(run("nope", 0, &LabOptions::default(), None).is_err());
    }
}
