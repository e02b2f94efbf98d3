//! Procedural driving scenes, their summary statistics, challenge tags and
//! BEV rasterization.
//!
//! Everything is expressed in the ego frame at t = 0: ego at the origin,
//! heading along +x. Agents move at constant velocity.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use samoe_numerics::{Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Number of future waypoints.
pub const HORIZON: usize = 6;
/// Seconds between waypoints.
pub const STEP_SECONDS: f64 = 0.5;
/// Past ego positions fed to the planner.
pub const HISTORY: usize = 4;
/// Boxes are inflated by this margin for collision checks.
pub const COLLISION_MARGIN: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub heading: f64,
    /// (length, width) in meters.
    pub extent: [f64; 2],
}

impl Agent {
    pub fn position_at(&self, t: f64) -> [f64; 2] {
        [self.pos[0] + self.vel[0] * t, self.pos[1] + self.vel[1] * t]
    }

    /// Half sizes of the axis-aligned box around the oriented footprint,
    /// inflated by [`COLLISION_MARGIN`].
    pub fn half_box(&self) -> [f64; 2] {
        let (c, s) = (self.heading.cos().abs(), self.heading.sin().abs());
        let (hl, hw) = (self.extent[0] / 2.0, self.extent[1] / 2.0);
        [hl * c + hw * s + COLLISION_MARGIN, hl * s + hw * c + COLLISION_MARGIN]
    }

    /// Whether `p` lies inside this agent's inflated box at time `t`.
    pub fn contains(&self, p: [f64; 2], t: f64) -> bool {
        let c = self.position_at(t);
        let h = self.half_box();
        (p[0] - c[0]).abs() <= h[0] && (p[1] - c[1]).abs() <= h[1]
    }
}

/// Whether any waypoint (at `STEP_SECONDS * (k + 1)`) is inside any agent box.
pub fn trajectory_collides(agents: &[Agent], waypoints: &[[f64; 2]]) -> bool {
    waypoints.iter().enumerate().any(|(k, &p)| {
        let t = STEP_SECONDS * (k + 1) as f64;
        agents.iter().any(|a| a.contains(p, t))
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Intersection,
    NarrowTurn,
    Overtake,
    Nominal,
}

impl Regime {
    pub const ALL: [Regime; 4] = [
        Regime::Intersection,
        Regime::NarrowTurn,
        Regime::Overtake,
        Regime::Nominal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Intersection => "intersection",
            Regime::NarrowTurn => "narrow_turn",
            Regime::Overtake => "overtake",
            Regime::Nominal => "nominal",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Regime::Intersection => 11,
            Regime::NarrowTurn => 12,
            Regime::Overtake => 13,
            Regime::Nominal => 14,
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown regime {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub seed: u64,
    pub regime: Regime,
    pub agents: Vec<Agent>,
    pub ego_speed: f64,
    /// Signed; positive turns left.
    pub ego_yaw_rate: f64,
    pub ego_waypoints: [[f64; 2]; HORIZON],
}

/// Position after `t` seconds on a constant-speed, constant-yaw-rate arc
/// starting at the origin along +x. Negative `t` runs the arc backwards.
pub fn arc_position(speed: f64, yaw_rate: f64, t: f64) -> [f64; 2] {
    if yaw_rate.abs() < 1e-12 {
        return [speed * t, 0.0];
    }
    let r = speed / yaw_rate;
    let th = yaw_rate * t;
    [r * th.sin(), r * (1.0 - th.cos())]
}

impl SyntheticScene {
    /// Past positions at t = -2.0, -1.5, -1.0, -0.5 s.
    pub fn ego_history(&self) -> [[f64; 2]; HISTORY] {
        std::array::from_fn(|i| {
            let t = -STEP_SECONDS * (HISTORY - i) as f64;
            arc_position(self.ego_speed, self.ego_yaw_rate, t)
        })
    }

    /// (turn direction, speed hint) token ids; see [`INSTRUCTION_VOCAB`].
    pub fn instruction_ids(&self) -> [usize; 2] {
        let turn = if self.ego_yaw_rate > 0.02 {
            1
        } else if self.ego_yaw_rate < -0.02 {
            2
        } else {
            0
        };
        let speed = if self.ego_speed < 5.0 {
            3
        } else if self.ego_speed < 8.0 {
            4
        } else {
            5
        };
        [turn, speed]
    }
}

/// straight, left, right, slow, medium, fast.
pub const INSTRUCTION_VOCAB: usize = 6;

const FIELD_HALF: f64 = 38.0;

fn place_agents(
    rng: &mut Rng,
    agents: &mut Vec<Agent>,
    count: usize,
    waypoints: &[[f64; 2]],
    min_sep: f64,
    max_speed: f64,
) {
    let target = agents.len() + count;
    let mut attempts = 0;
    while agents.len() < target && attempts < 400 * count {
        attempts += 1;
        let pos = [
            rng.uniform_in(-FIELD_HALF, FIELD_HALF),
            rng.uniform_in(-FIELD_HALF, FIELD_HALF),
        ];
        if pos[0].hypot(pos[1]) < 4.0 {
            continue;
        }
        if agents
            .iter()
            .any(|a| (a.pos[0] - pos[0]).hypot(a.pos[1] - pos[1]) < min_sep)
        {
            continue;
        }
        let heading = rng.uniform_in(-std::f64::consts::PI, std::f64::consts::PI);
        let speed = rng.uniform_in(0.0, max_speed);
        let agent = Agent {
            pos,
            vel: [speed * heading.cos(), speed * heading.sin()],
            heading,
            extent: [rng.uniform_in(4.0, 5.0), rng.uniform_in(1.8, 2.2)],
        };
        if agent.contains([0.0, 0.0], 0.0) || trajectory_collides(std::slice::from_ref(&agent), waypoints) {
            continue;
        }
        agents.push(agent);
    }
}

/// Generates one scene. A total function of `(seed, regime)`.
pub fn gen_scene(seed: u64, regime: Regime) -> SyntheticScene {
    let mut rng = Rng::new(seed, regime.stream());
    let ego_speed = rng.uniform_in(3.0, 10.0);
    let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
    let ego_yaw_rate = sign
        * match regime {
            Regime::NarrowTurn => rng.uniform_in(0.08, 0.3),
            Regime::Overtake => (0.01 * rng.normal()).abs(),
            _ => (0.02 * rng.normal()).abs(),
        };
    let ego_waypoints: [[f64; 2]; HORIZON] = std::array::from_fn(|k| {
        let p = arc_position(ego_speed, ego_yaw_rate, STEP_SECONDS * (k + 1) as f64);
        [p[0] + rng.uniform_in(-0.05, 0.05), p[1] + rng.uniform_in(-0.05, 0.05)]
    });

    let mut agents = Vec::new();
    match regime {
        Regime::Intersection => {
            let n = rng.int_in(44, 64);
            place_agents(&mut rng, &mut agents, n, &ego_waypoints, 3.0, 6.0);
        }
        Regime::Overtake => {
            // A slower vehicle alongside the ego path, with a neighbour in the
            // next lane.
            loop {
                let side = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                let lead_pos = [rng.uniform_in(6.0, 20.0), side * rng.uniform_in(3.5, 7.0)];
                let lead_speed = ego_speed * rng.uniform_in(0.5, 0.8);
                let lead = Agent {
                    pos: lead_pos,
                    vel: [lead_speed, 0.0],
                    heading: 0.0,
                    extent: [rng.uniform_in(4.0, 5.0), rng.uniform_in(1.8, 2.2)],
                };
                let next_pos = [
                    lead_pos[0] + rng.uniform_in(-3.0, 3.0),
                    lead_pos[1] + side * rng.uniform_in(3.5, 7.0),
                ];
                let next = Agent {
                    pos: next_pos,
                    vel: [lead_speed * rng.uniform_in(0.9, 1.1), 0.0],
                    heading: 0.0,
                    extent: [rng.uniform_in(4.0, 5.0), rng.uniform_in(1.8, 2.2)],
                };
                let pair = [lead, next];
                if !trajectory_collides(&pair, &ego_waypoints) {
                    agents.extend(pair);
                    break;
                }
            }
            let n = rng.int_in(4, 34);
            place_agents(&mut rng, &mut agents, n, &ego_waypoints, 9.0, 10.0);
        }
        Regime::NarrowTurn | Regime::Nominal => {
            let n = rng.int_in(6, 36);
            place_agents(&mut rng, &mut agents, n, &ego_waypoints, 9.0, 10.0);
        }
    }

    SyntheticScene {
        seed,
        regime,
        agents,
        ego_speed,
        ego_yaw_rate,
        ego_waypoints,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneStats {
    pub agent_count: usize,
    pub yaw_rate: f64,
    /// Minimum inter-agent distance; `None` with fewer than two agents.
    pub min_dist: Option<f64>,
}

/// Minimum pairwise distance by exhaustive scan.
pub fn min_pairwise_distance(points: &[[f64; 2]]) -> Option<f64> {
    let mut best: Option<f64> = None;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = (points[i][0] - points[j][0]).hypot(points[i][1] - points[j][1]);
            best = Some(best.map_or(d, |b| b.min(d)));
        }
    }
    best
}

pub fn scene_stats(s: &SyntheticScene) -> SceneStats {
    let pts: Vec<[f64; 2]> = s.agents.iter().map(|a| a.pos).collect();
    SceneStats {
        agent_count: s.agents.len(),
        yaw_rate: s.ego_yaw_rate.abs(),
        min_dist: min_pairwise_distance(&pts),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Dense,
    HighYaw,
    CloseProx,
}

impl Tag {
    pub const ALL: [Tag; 3] = [Tag::Dense, Tag::HighYaw, Tag::CloseProx];

    pub fn name(self) -> &'static str {
        match self {
            Tag::Dense => "dense",
            Tag::HighYaw => "high_yaw",
            Tag::CloseProx => "close_prox",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub agent_count: usize,
    pub yaw_rate: f64,
    pub min_dist: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            agent_count: 40,
            yaw_rate: 0.05,
            min_dist: 8.0,
        }
    }
}

/// Challenge tags under strict inequalities.
pub fn select_challenging_with(stats: &SceneStats, th: &Thresholds) -> BTreeSet<Tag> {
    let mut tags = BTreeSet::new();
    if stats.agent_count > th.agent_count {
        tags.insert(Tag::Dense);
    }
    if stats.yaw_rate > th.yaw_rate {
        tags.insert(Tag::HighYaw);
    }
    if stats.min_dist.is_some_and(|d| d < th.min_dist) {
        tags.insert(Tag::CloseProx);
    }
    tags
}

pub fn select_challenging(stats: &SceneStats) -> BTreeSet<Tag> {
    select_challenging_with(stats, &Thresholds::default())
}

// ---------------------------------------------------------------------------
// rasterization

/// Channels computed directly from agents; the rest are derived features.
pub const PHYSICAL_CHANNELS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Meters per cell.
    pub cell_size: f64,
    /// (row, col) of the ego vehicle.
    pub ego_center: (usize, usize),
    pub projection_seed: u64,
}

impl Default for BevConfig {
    fn default() -> Self {
        BevConfig {
            height: 32,
            width: 32,
            channels: 16,
            cell_size: 2.5,
            ego_center: (16, 16),
            projection_seed: 0x5eed,
        }
    }
}

impl BevConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0) {
            return Err(CoreError::Config(format!(
                "cell_size must be positive, got {}",
                self.cell_size
            )));
        }
        if self.height == 0 || self.width == 0 || self.channels < PHYSICAL_CHANNELS {
            return Err(CoreError::Config(format!(
                "grid {}x{} with {} channels is too small",
                self.height, self.width, self.channels
            )));
        }
        if self.ego_center.0 >= self.height || self.ego_center.1 >= self.width {
            return Err(CoreError::Config(format!(
                "ego center {:?} outside grid",
                self.ego_center
            )));
        }
        Ok(())
    }

    /// Continuous (row, col) of an ego-frame point; x runs along rows.
    pub fn to_cell(&self, p: [f64; 2]) -> (f64, f64) {
        (
            self.ego_center.0 as f64 + p[0] / self.cell_size,
            self.ego_center.1 as f64 + p[1] / self.cell_size,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BevGrid {
    pub config: BevConfig,
    /// `[C, H, W]`.
    pub data: Tensor<f32>,
    /// Agents whose splat footprint was partly or fully outside the grid.
    pub clipped: usize,
}

/// Occupancy, velocity and heading channels, `[4, H, W]`.
pub fn physical_channels(s: &SyntheticScene, cfg: &BevConfig) -> Result<(Tensor<f32>, usize)> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let plane = h * w;
    let mut data = vec![0f64; PHYSICAL_CHANNELS * plane];
    let mut clipped = 0;
    for a in &s.agents {
        let (r, c) = cfg.to_cell(a.pos);
        let (r0, c0) = (r.floor(), c.floor());
        let (fr, fc) = (r - r0, c - c0);
        let mut lost = false;
        for (dr, dc, wgt) in [
            (0, 0, (1.0 - fr) * (1.0 - fc)),
            (0, 1, (1.0 - fr) * fc),
            (1, 0, fr * (1.0 - fc)),
            (1, 1, fr * fc),
        ] {
            if wgt == 0.0 {
                continue;
            }
            let (rr, cc) = (r0 as isize + dr, c0 as isize + dc);
            if rr < 0 || cc < 0 || rr as usize >= h || cc as usize >= w {
                lost = true;
                continue;
            }
            let idx = rr as usize * w + cc as usize;
            data[idx] += wgt;
            data[plane + idx] += wgt * a.vel[0] / 10.0;
            data[2 * plane + idx] += wgt * a.vel[1] / 10.0;
            data[3 * plane + idx] += wgt * a.heading / std::f64::consts::PI;
        }
        if lost {
            clipped += 1;
        }
    }
    for v in &mut data[..plane] {
        *v = v.min(1.0);
    }
    let t = Tensor::new(&[PHYSICAL_CHANNELS, h, w], data.into_iter().map(|v| v as f32).collect())?;
    Ok((t, clipped))
}

fn projection_matrix(cfg: &BevConfig) -> Vec<f32> {
    let extra = cfg.channels - PHYSICAL_CHANNELS;
    let mut rng = Rng::new(cfg.projection_seed, 0);
    (0..extra * 9).map(|_| rng.normal() as f32 / 3.0).collect()
}

/// Appends the random-projection channels (tanh of a fixed projection of
/// each cell's 3x3 occupancy neighbourhood) to the physical channels.
pub fn complete_channels(physical: &Tensor<f32>, cfg: &BevConfig) -> Result<Tensor<f32>> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    if physical.shape() != [PHYSICAL_CHANNELS, h, w] {
        return Err(CoreError::Config(format!(
            "physical channels have shape {:?}, expected {:?}",
            physical.shape(),
            [PHYSICAL_CHANNELS, h, w]
        )));
    }
    let plane = h * w;
    let extra = cfg.channels - PHYSICAL_CHANNELS;
    let proj = projection_matrix(cfg);
    let occ = &physical.data()[..plane];
    let mut out = physical.data().to_vec();
    out.resize(cfg.channels * plane, 0.0);
    for r in 0..h {
        for c in 0..w {
            let mut nb = [0f32; 9];
            for (k, v) in nb.iter_mut().enumerate() {
                let (rr, cc) = (r as isize + k as isize / 3 - 1, c as isize + k as isize % 3 - 1);
                if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                    *v = occ[rr as usize * w + cc as usize];
                }
            }
            for e in 0..extra {
                let z: f32 = (0..9).map(|k| proj[e * 9 + k] * nb[k]).sum();
                out[(PHYSICAL_CHANNELS + e) * plane + r * w + c] = z.tanh();
            }
        }
    }
    Ok(Tensor::new(&[cfg.channels, h, w], out)?)
}

pub fn rasterize(s: &SyntheticScene, cfg: &BevConfig) -> Result<BevGrid> {
    let (phys, clipped) = physical_channels(s, cfg)?;
    Ok(BevGrid {
        config: cfg.clone(),
        data: complete_channels(&phys, cfg)?,
        clipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(n: usize, yaw: f64, d: f64) -> SceneStats {
        SceneStats {
            agent_count: n,
            yaw_rate: yaw,
            min_dist: Some(d),
        }
    }

    #[test]
    fn thresholds_are_strict() {
        assert_eq!(select_challenging(&stats(41, 0.01, 20.0)), BTreeSet::from([Tag::Dense]));
        assert!(select_challenging(&stats(40, 0.05, 8.0)).is_empty());
        assert_eq!(select_challenging(&stats(52, 0.076, 6.3)).len(), 3);
    }

    #[test]
    fn pythagorean_min_dist() {
        assert_eq!(min_pairwise_distance(&[[0.0, 0.0], [3.0, 4.0]]), Some(5.0));
        assert_eq!(min_pairwise_distance(&[]), None);
    }

    #[test]
    fn straight_arc_has_zero_lateral_offset() {
        assert_eq!(arc_position(5.0, 0.0, 2.0), [10.0, 0.0]);
        let p = arc_position(5.0, 0.1, 2.0);
        assert!((p[0].hypot(p[1]) - 2.0 * 50.0 * (0.1f64).sin()).abs() < 1e-12);
    }

    #[test]
    fn scenes_are_deterministic() {
        for r in Regime::ALL {
            assert_eq!(gen_scene(3, r), gen_scene(3, r));
        }
    }

    #[test]
    fn ground_truth_never_collides() {
        for seed in 0..40 {
            for r in Regime::ALL {
                let s = gen_scene(seed, r);
                assert!(!trajectory_collides(&s.agents, &s.ego_waypoints), "{r} seed {seed}");
                assert!(s.agents.iter().all(|a| !a.contains([0.0, 0.0], 0.0)));
            }
        }
    }

    #[test]
    fn regime_parses() {
        assert_eq!("narrow_turn".parse::<Regime>().unwrap(), Regime::NarrowTurn);
        assert!("highway".parse::<Regime>().is_err());
    }

    #[test]
    fn stationary_agent_at_center_splats_unit_mass() {
        let cfg = BevConfig::default();
        let s = SyntheticScene {
            seed: 0,
            regime: Regime::Nominal,
            agents: vec![Agent {
                pos: [0.0, 0.0],
                vel: [0.0, 0.0],
                heading: 0.0,
                extent: [4.0, 2.0],
            }],
            ego_speed: 5.0,
            ego_yaw_rate: 0.0,
            ego_waypoints: [[0.0; 2]; HORIZON],
        };
        let g = rasterize(&s, &cfg).unwrap();
        let plane = 32 * 32;
        let mass: f32 = g.data.data()[..plane].iter().sum();
        assert_eq!(mass, 1.0);
        assert_eq!(g.data.get(&[0, 16, 16]), 1.0);
    }

    #[test]
    fn rasterize_rejects_bad_cell_size() {
        let cfg = BevConfig {
            cell_size: 0.0,
            ..BevConfig::default()
        };
        assert!(rasterize(&gen_scene(0, Regime::Nominal), &cfg).is_err());
    }
}
