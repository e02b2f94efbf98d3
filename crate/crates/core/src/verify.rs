//! Numbered verification checks, shared by the `verify` command and the
//! acceptance suite.
//!
//! Each check is deterministic in its seed, reports what it measured and
//! fails when it overruns its time budget.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use samoe_numerics::{gradcheck, Graph, Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::bench::{self, CostConfig, Mechanism};
use crate::cmca::{self, BlockContext, CmcaLayout};
use crate::dataset::{Dataset, Entry, RegimeMix};
use crate::dse;
use crate::error::{CoreError, Result};
use crate::eval;
use crate::flow;
use crate::moe::{self, ExpertBank};
use crate::params::{Bound, ParamStore};
use crate::planner::{Batch, FlowBatch, Planner, PlannerConfig, Precision, Routing};
use crate::scene::{select_challenging, SceneStats, Tag};
use crate::theory::{self, ExperimentReport, LabOptions};
use crate::train;

pub use crate::theory::Status;

/// `(id, name, time budget in seconds)`.
pub const CRITERIA: [(u32, &str, f64); 13] = [
    (1, "merge_exactness", 5.0),
    (2, "dispersion_identity", 5.0),
    (3, "residual_slope", 30.0),
    (4, "euler_point_mass", 1.0),
    (5, "gradient_check", 120.0),
    (6, "cmca_invariants", 10.0),
    (7, "deform_zero_offset", 5.0),
    (8, "flops_ratio", 1.0),
    (9, "variance_ordering", 120.0),
    (10, "routing_divergence", 300.0),
    (11, "dense_equivalence", 5.0),
    (12, "training_smoke", 300.0),
    (13, "tag_thresholds", 1.0),
];

/// Criteria grouped by the module whose invariants they exercise.
pub const SUITES: [(&str, &[u32]); 9] = [
    ("moe", &[1, 2, 3]),
    ("flow", &[4]),
    ("planner", &[5, 11]),
    ("cmca", &[6]),
    ("dse", &[7]),
    ("bench", &[8]),
    ("lab", &[9, 10]),
    ("train", &[12]),
    ("scenes", &[13]),
];

pub fn suite(name: &str) -> Option<Vec<u32>> {
    if name == "all" {
        return Some(CRITERIA.iter().map(|c| c.0).collect());
    }
    SUITES.iter().find(|s| s.0 == name).map(|s| s.1.to_vec())
}

pub fn criterion_name(id: u32) -> Option<&'static str> {
    CRITERIA.iter().find(|c| c.0 == id).map(|c| c.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub id: u32,
    pub name: String,
    pub seed: u64,
    pub status: Status,
    pub seconds: f64,
    pub budget_seconds: f64,
    pub measured: BTreeMap<String, f64>,
    pub notes: Vec<String>,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }

    /// `pass` / `FAIL` / `inconclusive`.
    pub fn label(&self) -> &'static str {
        match self.status {
            Status::Pass => "pass",
            Status::Fail => "FAIL",
            Status::Inconclusive => "inconclusive",
        }
    }

    /// One-line summary: label, id, name, the key measurements, runtime.
    pub fn line(&self) -> String {
        let keys: Vec<String> = self
            .measured
            .iter()
            .take(4)
            .map(|(k, v)| format!("{k}={v:.4e}"))
            .collect();
        format!(
            "[{:>12}] {:>2} {:<20} {} ({:.2}s / {:.0}s)",
            self.label(),
            self.id,
            self.name,
            keys.join(" "),
            self.seconds,
            self.budget_seconds
        )
    }
}

#[derive(Default)]
struct Outcome {
    status: Option<Status>,
    measured: BTreeMap<String, f64>,
    notes: Vec<String>,
}

impl Outcome {
    fn m(&mut self, k: &str, v: f64) {
        self.measured.insert(k.into(), v);
    }

    fn verdict(mut self, ok: bool) -> Self {
        self.status = Some(if ok { Status::Pass } else { Status::Fail });
        self
    }

    fn from_report(rep: ExperimentReport) -> Self {
        let mut o = Outcome {
            measured: rep.measured,
            notes: rep.notes,
            ..Outcome::default()
        };
        o.status = Some(rep.status);
        o
    }
}

/// Runs criterion `id` with `seed`.
pub fn run(id: u32, seed: u64) -> Result<Check> {
    let &(_, name, budget) = CRITERIA
        .iter()
        .find(|c| c.0 == id)
        .ok_or_else(|| CoreError::Config(format!("no criterion {id}; expected 1..={}", CRITERIA.len())))?;
    let start = Instant::now();
    let out = match id {
        1 => merge_exactness(seed, 100)?,
        2 => Outcome::from_report(theory::exp_dispersion_identity(seed, 200)?),
        3 => Outcome::from_report(theory::exp_residual_bound(seed, &theory::default_scales())?),
        4 => euler_point_mass(seed, 20)?,
        5 => gradient_check(seed, 200)?,
        6 => cmca_invariants(seed, 50)?,
        7 => deform_zero_offset(seed, 50)?,
        8 => flops_ratio()?,
        9 => Outcome::from_report(theory::run("variance_ordering", seed, &LabOptions::default(), None)?),
        10 => Outcome::from_report(theory::run(
            "trajectory_divergence",
            seed,
            &LabOptions::default(),
            None,
        )?),
        11 => dense_equivalence(seed, 100)?,
        12 => training_smoke(seed)?,
        _ => tag_thresholds()?,
    };
    let seconds = start.elapsed().as_secs_f64();
    let mut notes = out.notes;
    let mut status = out.status.unwrap_or(Status::Fail);
    if seconds > budget {
        notes.push(format!("runtime {seconds:.1}s exceeds the {budget:.0}s budget"));
        if status == Status::Pass {
            status = Status::Fail;
        }
    }
    Ok(Check {
        id,
        name: name.to_string(),
        seed,
        status,
        seconds,
        budget_seconds: budget,
        measured: out.measured,
        notes,
    })
}

// ---------------------------------------------------------------------------

fn one_hot(e: usize, sel: usize) -> Vec<f64> {
    (0..e).map(|i| if i == sel { 1.0 } else { 0.0 }).collect()
}

fn merge_exactness(seed: u64, cases: usize) -> Result<Outcome> {
    let mut rng = Rng::new(seed, 0x3e1);
    let (mut hot_res, mut same_res, mut hot_f32) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..cases {
        let (e, d, m, n) = (rng.int_in(2, 8), rng.int_in(2, 8), rng.int_in(2, 12), rng.int_in(1, 6));
        let sel = rng.below(e);
        let hot = one_hot(e, sel);

        let bank = ExpertBank::<f64>::random(e, d, m, &mut rng);
        let x: Tensor<f64> = rng.normal_tensor(&[n, d], 1.0);
        hot_res = hot_res.max(moe::merging_residual(&bank, &hot, &x)?);
        let same = ExpertBank::replicate(&bank.w1[0], &bank.w3[0], &bank.w2[0], e, 0.0, &mut rng);
        let pi = rng.simplex(e);
        same_res = same_res.max(moe::merging_residual(&same, &pi, &x)?);

        let b32 = ExpertBank::<f32>::random(e, d, m, &mut rng);
        let x32: Tensor<f32> = rng.normal_tensor(&[n, d], 1.0);
        let merged = moe::swiglu_forward(&x32, &moe::merge_experts(&b32, &hot)?)?;
        hot_f32 = hot_f32.max(merged.max_abs_diff(&moe::expert_forward(&b32, sel, &x32)?));
    }
    let mut o = Outcome::default();
    o.m("cases", cases as f64);
    o.m("one_hot_residual", hot_res);
    o.m("identical_residual", same_res);
    o.m("one_hot_f32_diff", hot_f32);
    Ok(o.verdict(hot_res <= 1e-12 && same_res <= 1e-12 && hot_f32 <= 1e-6))
}

fn euler_point_mass(seed: u64, trials: usize) -> Result<Outcome> {
    let mut rng = Rng::new(seed, 0xe71);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let a: Tensor<f64> = rng.normal_tensor(&[crate::scene::HORIZON, 2], 10.0);
        let x1: Tensor<f64> = rng.normal_tensor(a.shape(), 1.0);
        let x0 = flow::euler_from(flow::point_mass_field(&a), x1, flow::DEFAULT_STEPS)?;
        worst = worst.max(x0.max_abs_diff(&a));
    }
    let mut o = Outcome::default();
    o.m("trials", trials as f64);
    o.m("steps", flow::DEFAULT_STEPS as f64);
    o.m("max_inf_err", worst);
    Ok(o.verdict(worst <= 1e-5))
}

/// Which part of the planner a parameter belongs to.
fn section(name: &str) -> usize {
    if name.starts_with("dse/") {
        0
    } else if name.contains("/moe/") {
        1
    } else if name.starts_with("blk") {
        2
    } else {
        3
    }
}

const SECTIONS: [&str; 4] = ["encoder", "experts", "attention", "flow_head"];

fn gradient_check(seed: u64, coords: usize) -> Result<Outcome> {
    let mut rng = Rng::new(seed, 0x9c4);
    let cfg = PlannerConfig {
        batch: 2,
        seed,
        precision: Precision::F64,
        ..PlannerConfig::default()
    };
    let mut planner = Planner::<f64>::new(cfg.clone())?.to_moe(theory::LAB_JITTER, &mut rng)?;
    // Nonzero offsets, so the bilinear sampling path is exercised.
    for name in ["dse/offset/w", "dse/offset/b"] {
        let shape = planner.params.get(name)?.shape().to_vec();
        planner.params.insert(name, rng.normal_tensor(&shape, 0.05));
    }
    let data = Dataset::generate(cfg.batch, RegimeMix::Mixed, seed, &cfg.bev)?;
    let refs: Vec<&Entry> = data.entries.iter().collect();
    let batch = Batch::<f64>::from_entries(&refs, &cfg)?;
    let fb = FlowBatch::draw(&batch.actions, &mut rng)?;
    let routing = Routing::SceneMerge;
    let (loss, grads) = planner.loss_and_grads(&routing, &batch, &fb, |_| true)?;

    let mut by_section: [Vec<usize>; 4] = Default::default();
    for (i, (name, _)) in grads.iter().enumerate() {
        by_section[section(name)].push(i);
    }
    let h = theory::FD_STEP;
    let mut worst = [0.0f64; 4];
    let mut count = [0usize; 4];
    for i in 0..coords {
        let s = i % 4;
        let pool = &by_section[s];
        if pool.is_empty() {
            return Err(CoreError::Experiment(format!("no {} parameters to probe", SECTIONS[s])));
        }
        let (name, g) = &grads[pool[rng.below(pool.len())]];
        let c = rng.below(g.len());
        let base = planner.params.get(name)?.clone();
        let mut eval_at = |delta: f64| -> Result<f64> {
            let mut v = base.to_vec();
            v[c] += delta;
            planner.params.insert(name.clone(), Tensor::new(base.shape(), v)?);
            planner.loss(&routing, &batch, &fb)
        };
        let fd = (eval_at(h)? - eval_at(-h)?) / (2.0 * h);
        planner.params.insert(name.clone(), base);
        worst[s] = worst[s].max(gradcheck::rel_err(g.data()[c], fd));
        count[s] += 1;
    }
    let mut o = Outcome::default();
    o.m("coordinates", coords as f64);
    o.m("loss", loss);
    o.m("max_rel_err", worst.iter().cloned().fold(0.0, f64::max));
    for s in 0..4 {
        o.m(&format!("max_rel_err_{}", SECTIONS[s]), worst[s]);
        o.m(&format!("coords_{}", SECTIONS[s]), count[s] as f64);
    }
    o.notes.push(format!("relative error floor {}", gradcheck::REL_FLOOR));
    let ok = worst.iter().all(|&w| w <= 1e-4);
    Ok(o.verdict(ok))
}

/// A random layout: every position is conditioning or action with equal
/// odds, and a random subset is on the planning side.
fn random_layout(rng: &mut Rng) -> CmcaLayout {
    let l = rng.int_in(1, 24);
    let (mut cond, mut action, mut plan) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..l {
        if rng.uniform() < 0.5 {
            cond.push(i);
        } else {
            action.push(i);
        }
        if rng.uniform() < 0.5 {
            plan.push(i);
        }
    }
    CmcaLayout {
        total_len: l,
        cond,
        action,
        plan,
    }
}

fn block_out(store: &ParamStore<f32>, ctx: &BlockContext<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let p = Bound::new(&mut g, store, |_| false);
    let xv = g.constant(x.clone());
    let y = cmca::block_forward(&mut g, &p, "blk", ctx, xv, &mut |g, h| {
        cmca::dense_ffn(g, &p, "blk/plan/ffn", h)
    })?;
    Ok(g.value(y).clone())
}

/// `x` with every token at `positions` shifted by fresh noise.
fn perturb_tokens(x: &Tensor<f32>, positions: &[usize], rng: &mut Rng) -> Result<Tensor<f32>> {
    let (b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut v = x.to_vec();
    for bi in 0..b {
        for &p in positions {
            for k in 0..d {
                v[(bi * l + p) * d + k] += rng.normal() as f32;
            }
        }
    }
    Ok(Tensor::new(x.shape(), v)?)
}

fn rows(x: &Tensor<f32>, positions: &[usize]) -> Tensor<f32> {
    let (b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut v = Vec::with_capacity(b * positions.len() * d);
    for bi in 0..b {
        for &p in positions {
            v.extend_from_slice(&x.data()[(bi * l + p) * d..(bi * l + p + 1) * d]);
        }
    }
    Tensor::new(&[b, positions.len(), d], v).expect("consistent sizes")
}

fn cmca_invariants(seed: u64, cases: usize) -> Result<Outcome> {
    let mut rng = Rng::new(seed, 0xc3c);
    let mut mismatches = 0usize;
    for _ in 0..cases {
        let layout = random_layout(&mut rng);
        let mask = cmca::build_mask(&layout)?;
        let cs: BTreeSet<usize> = layout.cond.iter().copied().collect();
        let acts: BTreeSet<usize> = layout.action.iter().copied().collect();
        let l = layout.total_len;
        for i in 0..l {
            for j in 0..l {
                let want = cs.contains(&j) || (acts.contains(&i) && acts.contains(&j) && j <= i);
                let got = mask.data()[i * l + j];
                if got != if want { 1.0 } else { 0.0 } {
                    mismatches += 1;
                }
            }
        }
    }

    let mut cond_changed = 0usize;
    let mut prefix_err = 0.0f64;
    for _ in 0..cases {
        let heads = rng.int_in(1, 3);
        let d = 4 * heads;
        let (nc, na) = (rng.int_in(1, 8), rng.int_in(2, 6));
        let layout = CmcaLayout::canonical(nc, na, na + rng.int_in(0, nc))?;
        let mut store = ParamStore::new();
        cmca::init_block_params("blk", d, 2 * d, &mut rng, &mut store);
        let ctx = BlockContext::<f32>::new(layout.clone(), heads)?;
        let x: Tensor<f32> = rng.normal_tensor(&[2, layout.total_len, d], 1.0);
        let y = block_out(&store, &ctx, &x)?;

        let y_act = block_out(&store, &ctx, &perturb_tokens(&x, &layout.action, &mut rng)?)?;
        if !rows(&y, &layout.cond).bit_eq(&rows(&y_act, &layout.cond)) {
            cond_changed += 1;
        }
        let cut = rng.int_in(1, na - 1);
        let y_tail = block_out(&store, &ctx, &perturb_tokens(&x, &layout.action[cut..], &mut rng)?)?;
        let head = &layout.action[..cut];
        prefix_err = prefix_err.max(rows(&y, head).max_abs_diff(&rows(&y_tail, head)));
        if !rows(&y, &layout.cond).bit_eq(&rows(&y_tail, &layout.cond)) {
            cond_changed += 1;
        }
    }
    let mut o = Outcome::default();
    o.m("layouts", cases as f64);
    o.m("mask_mismatches", mismatches as f64);
    o.m("conditioning_changes", cond_changed as f64);
    o.m("causal_prefix_err", prefix_err);
    Ok(o.verdict(mismatches == 0 && cond_changed == 0 && prefix_err <= 1e-6))
}

/// Direct same-padded convolution in f64; weights are `[C*k², O]` with row
/// `c*k² + ky*k + kx`.
fn direct_conv(x: &Tensor<f32>, w: &Tensor<f32>, bias: &Tensor<f32>, k: usize) -> Vec<f64> {
    let s = x.shape();
    let (b, c, h, wd) = (s[0], s[1], s[2], s[3]);
    let o = w.shape()[1];
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; b * o * h * wd];
    for bi in 0..b {
        for oc in 0..o {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = bias.data()[oc] as f64;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (sy, sx) = (y as isize + ky as isize - pad, xx as isize + kx as isize - pad);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                let v = x.data()[((bi * c + ci) * h + sy as usize) * wd + sx as usize] as f64;
                                acc += v * w.data()[(ci * k * k + ky * k + kx) * o + oc] as f64;
                            }
                        }
                    }
                    out[((bi * o + oc) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    out
}

fn deform_zero_offset(seed: u64, cases: usize) -> Result<Outcome> {
    let mut rng = Rng::new(seed, 0xdef);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (b, c, h, w, o) = (
            rng.int_in(1, 2),
            rng.int_in(1, 4),
            rng.int_in(3, 9),
            rng.int_in(3, 9),
            rng.int_in(1, 4),
        );
        let k = [1, 3, 5][rng.below(3)];
        let x: Tensor<f32> = rng.normal_tensor(&[b, c, h, w], 1.0);
        let wt: Tensor<f32> = rng.normal_tensor(&[c * k * k, o], 0.3);
        let bias: Tensor<f32> = rng.normal_tensor(&[o], 0.1);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let off = g.constant(Tensor::zeros(&[b, 2 * k * k, h, w]));
        let wv = g.constant(wt.clone());
        let bv = g.constant(bias.clone());
        let y = dse::deformable_conv(&mut g, xv, off, wv, bv, k)?;
        let want = direct_conv(&x, &wt, &bias, k);
        for (a, e) in g.value(y).data().iter().zip(&want) {
            worst = worst.max((*a as f64 - e).abs());
        }
    }

    let mut near_bad = 0usize;
    for i in 0..cases + 1 {
        let (h, w, center) = if i == 0 {
            let bev = crate::scene::BevConfig::default();
            (bev.height, bev.width, bev.ego_center)
        } else {
            let (h, w) = (rng.int_in(1, 40), rng.int_in(1, 40));
            (h, w, (rng.below(h), rng.below(w)))
        };
        let m = dse::near_field_map(h, w, center)?;
        let sq = |y: usize, x: usize| (y as i64 - center.0 as i64).pow(2) + (x as i64 - center.1 as i64).pow(2);
        let far = (0..h * w).max_by_key(|&q| sq(q / w, q % w)).expect("non-empty grid");
        let far_ok = (h == 1 && w == 1) || m.data()[far] == 0.0;
        if m.data()[center.0 * w + center.1] != 1.0 || !far_ok {
            near_bad += 1;
        }
    }
    let mut o = Outcome::default();
    o.m("cases", cases as f64);
    o.m("max_abs_err", worst);
    o.m("near_field_failures", near_bad as f64);
    Ok(o.verdict(worst <= 1e-5 && near_bad == 0))
}

fn flops_ratio() -> Result<Outcome> {
    let cfg = CostConfig::default();
    let ratio = bench::flops_of(&cfg, Mechanism::Sparse)? / bench::flops_of(&cfg, Mechanism::Samoe)?;
    let mut violations = 0usize;
    let mut grid = 0usize;
    for k in 2..=cfg.experts {
        for tokens in [1024usize, 2048, 4096, 8192, 16384] {
            let c = CostConfig {
                k,
                batch: 2,
                seq: tokens / 2,
                ..cfg.clone()
            };
            grid += 1;
            if bench::flops_of(&c, Mechanism::Samoe)? >= bench::flops_of(&c, Mechanism::Sparse)? {
                violations += 1;
            }
        }
    }
    let mut o = Outcome::default();
    o.m("ratio", ratio);
    o.m("tokens", cfg.tokens() as f64);
    o.m("strict_order_violations", violations as f64);
    o.m("grid_points", grid as f64);
    Ok(o.verdict((1.90..=2.00).contains(&ratio) && violations == 0))
}

fn dense_equivalence(seed: u64, inputs: usize) -> Result<Outcome> {
    let cfg = PlannerConfig {
        seed,
        ..PlannerConfig::default()
    };
    let data = Dataset::generate(inputs, RegimeMix::Mixed, seed, &cfg.bev)?;
    let step1 = train::train_step1::<f32>(&data, &cfg, 3)?.checkpoint;
    let step2 = train::init_step2(&step1)?;
    let mut rng = Rng::new(seed, 0xde5);
    let mut worst = 0.0f64;
    for chunk in data.entries.chunks(10) {
        let refs: Vec<&Entry> = chunk.iter().collect();
        let batch = Batch::<f32>::from_entries(&refs, &cfg)?;
        let x: Tensor<f32> = rng.normal_tensor(&[chunk.len(), cfg.horizon, cfg.action_dim], 1.0);
        let taus: Vec<f64> = (0..chunk.len()).map(|_| flow::sample_time(&mut rng)).collect();
        let dense = step1.planner.velocity(&Routing::Dense, &batch, &x, &taus)?;
        let merged = step2.planner.velocity(&step2.planner.routing(), &batch, &x, &taus)?;
        worst = worst.max(dense.max_abs_diff(&merged));
    }
    let mut o = Outcome::default();
    o.m("inputs", inputs as f64);
    o.m("max_abs_diff", worst);
    Ok(o.verdict(worst <= 1e-6))
}

/// Training steps, scene count and smoothing window of the smoke run.
pub const SMOKE_STEPS: usize = 500;
pub const SMOKE_SCENES: usize = 256;
pub const SMOKE_WINDOW: usize = 50;
pub const SMOKE_EVAL_SCENES: usize = 32;

fn training_smoke(seed: u64) -> Result<Outcome> {
    let cfg = PlannerConfig {
        seed,
        ..PlannerConfig::default()
    };
    let data = Dataset::generate(SMOKE_SCENES, RegimeMix::Mixed, seed, &cfg.bev)?;
    let run = train::train_step1::<f32>(&data, &cfg, SMOKE_STEPS)?;
    let drop = train::smoothed_drop(&run.losses, SMOKE_WINDOW).unwrap_or(f64::NAN);
    let held_out = Dataset::generate(SMOKE_EVAL_SCENES, RegimeMix::Mixed, seed.wrapping_add(1), &cfg.bev)?;
    let report = eval::evaluate(&run.checkpoint.planner, &held_out, seed)?;
    let errs = eval::report_schema_errors(&serde_json::to_value(&report)?);

    let rerun = train::train_step1::<f32>(&data, &cfg, SMOKE_STEPS)?;
    let replay_ok = rerun.checkpoint.to_bytes()? == run.checkpoint.to_bytes()?;

    let mut o = Outcome::default();
    o.m("steps", run.losses.len() as f64);
    o.m("smoothed_drop", drop);
    o.m("first_loss", run.losses.first().copied().unwrap_or(f64::NAN));
    o.m("last_loss", run.losses.last().copied().unwrap_or(f64::NAN));
    o.m("eval_l2_avg", report.overall.l2_avg);
    o.m("schema_errors", errs.len() as f64);
    o.m("rerun_identical", replay_ok as u8 as f64);
    o.notes.extend(errs.iter().cloned());
    if let Some(at) = run.aborted_at {
        o.notes.push(format!("aborted with a non-finite loss at step {at}"));
    }
    Ok(o.verdict(run.aborted_at.is_none() && drop >= 0.5 && errs.is_empty() && replay_ok))
}

fn tag_thresholds() -> Result<Outcome> {
    let stats = |agents: usize, yaw: f64, dist: Option<f64>| SceneStats {
        agent_count: agents,
        yaw_rate: yaw,
        min_dist: dist,
    };
    let cases: Vec<(SceneStats, Vec<Tag>)> = vec![
        (stats(40, 0.0, None), vec![]),
        (stats(41, 0.0, None), vec![Tag::Dense]),
        (stats(0, 0.05, None), vec![]),
        (stats(0, 0.051, None), vec![Tag::HighYaw]),
        (stats(2, 0.0, Some(8.0)), vec![]),
        (stats(2, 0.0, Some(7.9)), vec![Tag::CloseProx]),
        (stats(1, 0.0, None), vec![]),
        // Mean statistics of the challenging split; the count is rounded down.
        (stats(52, 0.0764, Some(6.323)), Tag::ALL.to_vec()),
    ];
    let wrong = cases
        .iter()
        .filter(|(s, want)| select_challenging(s) != want.iter().copied().collect::<BTreeSet<_>>())
        .count();
    let mut o = Outcome::default();
    o.m("cases", cases.len() as f64);
    o.m("wrong", wrong as f64);
    Ok(o.verdict(wrong == 0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_cover_every_criterion_once() {
        let mut ids: Vec<u32> = SUITES.iter().flat_map(|s| s.1.iter().copied()).collect();
        ids.sort();
        assert_eq!(ids, (1..=13).collect::<Vec<_>>());
        assert_eq!(suite("all").unwrap().len(), 13);
        assert!(suite("nope").is_none());
    }

    #[test]
    fn unknown_criterion_is_an_error() {
        assert!(run(14, 0).is_err());
    }

    #[test]
    fn quick_criteria_pass() {
        for id in [4, 8, 13] {
            let c = run(id, 1).unwrap();
            assert!(c.passed(), "{}", c.line());
        }
    }

    #[test]
    fn direct_conv_identity_kernel() {
        let x = Tensor::<f32>::from_fn(&[1, 1, 3, 3], |i| i as f32);
        let w = Tensor::<f32>::from_fn(&[9, 1], |i| if i == 4 { 1.0 } else { 0.0 });
        let out = direct_conv(&x, &w, &Tensor::zeros(&[1]), 3);
        assert_eq!(out, (0..9).map(|i| i as f64).collect::<Vec<_>>());
    }
}
