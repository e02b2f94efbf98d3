//! On-disk scene datasets.
//!
//! Layout of a dataset directory:
//! - `manifest.json`: version, grid config, thresholds, per-scene metadata
//! - `scene_<id>.ndt`: the physical BEV channels of one scene, `[4, H, W]` f32
//! - `actions.ndt`: ground-truth waypoints, `[N, 6, 2]` f64
//! - `agents.ndt`: all agents, `[total, 7]` f64 (pos, vel, heading, extent)
//!
//! Derived BEV channels are recomputed on load.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use samoe_numerics::{io as ndt, Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::scene::{
    complete_channels, gen_scene, physical_channels, scene_stats, select_challenging_with, Agent, BevConfig, BevGrid,
    Regime, SceneStats, SyntheticScene, Tag, Thresholds, HORIZON,
};

pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub scene: SyntheticScene,
    pub grid: BevGrid,
    pub stats: SceneStats,
    pub tags: BTreeSet<Tag>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub bev: BevConfig,
    pub thresholds: Thresholds,
    pub entries: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct SceneMeta {
    id: usize,
    seed: u64,
    regime: Regime,
    ego_speed: f64,
    ego_yaw_rate: f64,
    agent_count: usize,
    stats: SceneStats,
    tags: Vec<Tag>,
    clipped: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    bev: BevConfig,
    thresholds: Thresholds,
    scenes: Vec<SceneMeta>,
}

/// Which regimes to draw scenes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegimeMix {
    Single(Regime),
    /// Cycles through all four regimes.
    Mixed,
}

impl std::str::FromStr for RegimeMix {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "mixed" {
            Ok(RegimeMix::Mixed)
        } else {
            Ok(RegimeMix::Single(s.parse()?))
        }
    }
}

impl Dataset {
    pub fn from_scenes(scenes: Vec<SyntheticScene>, bev: &BevConfig) -> Result<Dataset> {
        Dataset::from_scenes_threads(scenes, bev, 1)
    }

    /// Rasterizes on up to `threads` workers; the result is the same for any
    /// thread count.
    pub fn from_scenes_threads(scenes: Vec<SyntheticScene>, bev: &BevConfig, threads: usize) -> Result<Dataset> {
        let thresholds = Thresholds::default();
        let entries = crate::par::map_indexed(&scenes, threads, |_, scene| {
            let scene = scene.clone();
            let (phys, clipped) = physical_channels(&scene, bev)?;
            let grid = BevGrid {
                config: bev.clone(),
                data: complete_channels(&phys, bev)?,
                clipped,
            };
            let stats = scene_stats(&scene);
            let tags = select_challenging_with(&stats, &thresholds);
            Ok(Entry {
                scene,
                grid,
                stats,
                tags,
            })
        })?;
        Ok(Dataset {
            bev: bev.clone(),
            thresholds,
            entries,
        })
    }

    /// `count` scenes with per-scene seeds derived from `seed`.
    pub fn generate(count: usize, mix: RegimeMix, seed: u64, bev: &BevConfig) -> Result<Dataset> {
        Dataset::generate_threads(count, mix, seed, bev, 1)
    }

    pub fn generate_threads(
        count: usize,
        mix: RegimeMix,
        seed: u64,
        bev: &BevConfig,
        threads: usize,
    ) -> Result<Dataset> {
        let mut rng = Rng::new(seed, 0xda7a);
        let scenes = (0..count)
            .map(|i| {
                let regime = match mix {
                    RegimeMix::Single(r) => r,
                    RegimeMix::Mixed => Regime::ALL[i % Regime::ALL.len()],
                };
                gen_scene(rng.next_u64(), regime)
            })
            .collect();
        Dataset::from_scenes_threads(scenes, bev, threads)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// A dataset holding the entries at `indices`.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            bev: self.bev.clone(),
            thresholds: self.thresholds.clone(),
            entries: indices.iter().map(|&i| self.entries[i].clone()).collect(),
        }
    }
}

fn scene_file(id: usize) -> String {
    format!("scene_{id:05}.ndt")
}

pub fn dataset_write(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut metas = Vec::with_capacity(ds.len());
    let mut actions = Vec::with_capacity(ds.len() * HORIZON * 2);
    let mut agents = Vec::new();
    for (id, e) in ds.entries.iter().enumerate() {
        let plane = ds.bev.height * ds.bev.width;
        let phys = Tensor::new(
            &[crate::scene::PHYSICAL_CHANNELS, ds.bev.height, ds.bev.width],
            e.grid.data.data()[..crate::scene::PHYSICAL_CHANNELS * plane].to_vec(),
        )?;
        ndt::save(dir.join(scene_file(id)), &phys)?;
        for p in &e.scene.ego_waypoints {
            actions.extend_from_slice(p);
        }
        for a in &e.scene.agents {
            agents.extend_from_slice(&[
                a.pos[0],
                a.pos[1],
                a.vel[0],
                a.vel[1],
                a.heading,
                a.extent[0],
                a.extent[1],
            ]);
        }
        metas.push(SceneMeta {
            id,
            seed: e.scene.seed,
            regime: e.scene.regime,
            ego_speed: e.scene.ego_speed,
            ego_yaw_rate: e.scene.ego_yaw_rate,
            agent_count: e.scene.agents.len(),
            stats: e.stats.clone(),
            tags: e.tags.iter().copied().collect(),
            clipped: e.grid.clipped,
        });
    }
    ndt::save(dir.join("actions.ndt"), &Tensor::new(&[ds.len(), HORIZON, 2], actions)?)?;
    let n_agents = agents.len() / 7;
    ndt::save(dir.join("agents.ndt"), &Tensor::new(&[n_agents, 7], agents)?)?;
    let manifest = Manifest {
        version: DATASET_VERSION,
        bev: ds.bev.clone(),
        thresholds: ds.thresholds.clone(),
        scenes: metas,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn dataset_read(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.version != DATASET_VERSION {
        return Err(CoreError::Dataset(format!(
            "dataset version {} is not supported (expected {DATASET_VERSION})",
            manifest.version
        )));
    }
    let n = manifest.scenes.len();
    let actions: Tensor<f64> = ndt::load(dir.join("actions.ndt"))?;
    if actions.shape() != [n, HORIZON, 2] {
        return Err(CoreError::Dataset(format!(
            "actions.ndt has shape {:?} for {n} scenes",
            actions.shape()
        )));
    }
    let agents: Tensor<f64> = ndt::load(dir.join("agents.ndt"))?;
    let total: usize = manifest.scenes.iter().map(|m| m.agent_count).sum();
    if agents.shape() != [total, 7] {
        return Err(CoreError::Dataset(format!(
            "agents.ndt has shape {:?}, expected [{total}, 7]",
            agents.shape()
        )));
    }
    let bev = manifest.bev;
    let mut entries = Vec::with_capacity(n);
    let mut cursor = 0;
    for (i, meta) in manifest.scenes.into_iter().enumerate() {
        let scene_agents = (cursor..cursor + meta.agent_count)
            .map(|r| {
                let v = &agents.data()[r * 7..(r + 1) * 7];
                Agent {
                    pos: [v[0], v[1]],
                    vel: [v[2], v[3]],
                    heading: v[4],
                    extent: [v[5], v[6]],
                }
            })
            .collect();
        cursor += meta.agent_count;
        let a = &actions.data()[i * HORIZON * 2..(i + 1) * HORIZON * 2];
        let scene = SyntheticScene {
            seed: meta.seed,
            regime: meta.regime,
            agents: scene_agents,
            ego_speed: meta.ego_speed,
            ego_yaw_rate: meta.ego_yaw_rate,
            ego_waypoints: std::array::from_fn(|k| [a[2 * k], a[2 * k + 1]]),
        };
        let phys: Tensor<f32> = ndt::load(dir.join(scene_file(meta.id)))?;
        let grid = BevGrid {
            config: bev.clone(),
            data: complete_channels(&phys, &bev)?,
            clipped: meta.clipped,
        };
        entries.push(Entry {
            scene,
            grid,
            stats: meta.stats,
            tags: meta.tags.into_iter().collect(),
        });
    }
    Ok(Dataset {
        bev,
        thresholds: manifest.thresholds,
        entries,
    })
}
