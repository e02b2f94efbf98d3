//! Two-step training and checkpoints.
//!
//! Step 1 trains the dense stack with the scene encoder frozen. Step 2
//! copies each dense planning FFN into every expert of its layer and trains
//! everything, routing heads included.
//!
//! Checkpoint file layout: a magic line, one JSON header line, then one NDT1
//! record per parameter followed by one per momentum buffer, both in name
//! order.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use samoe_numerics::{io as ndt, DType, Rng, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Entry};
use crate::error::{CoreError, Result};
use crate::params::ParamStore;
use crate::planner::{Batch, FlowBatch, Planner, PlannerConfig, Stage};

pub const CHECKPOINT_MAGIC: &str = "SAMOE-CKPT 1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub planner: Planner<T>,
    /// Momentum buffers of the trainable parameters.
    pub momentum: ParamStore<T>,
    /// Optimizer steps taken in the current stage.
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    stage: Stage,
    step: u64,
    config: PlannerConfig,
    params: Vec<TensorMeta>,
    momentum: Vec<TensorMeta>,
}

fn metas<T: Scalar>(store: &ParamStore<T>) -> Vec<TensorMeta> {
    store
        .iter()
        .map(|(n, t)| TensorMeta {
            name: n.clone(),
            shape: t.shape().to_vec(),
        })
        .collect()
}

impl<T: Scalar> Checkpoint<T> {
    pub fn fresh(planner: Planner<T>) -> Self {
        Checkpoint {
            planner,
            momentum: ParamStore::new(),
            step: 0,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            version: CHECKPOINT_VERSION,
            dtype: T::DTYPE.name().to_string(),
            stage: self.planner.stage,
            step: self.step,
            config: self.planner.config.clone(),
            params: metas(&self.planner.params),
            momentum: metas(&self.momentum),
        };
        let mut out = Vec::new();
        writeln!(out, "{CHECKPOINT_MAGIC}")?;
        serde_json::to_writer(&mut out, &header)?;
        out.push(b'\n');
        for (_, t) in self.planner.params.iter().chain(self.momentum.iter()) {
            ndt::write_to(&mut out, t)?;
        }
        Ok(out)
    }

    pub fn from_reader(r: &mut impl BufRead) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end_matches('\n') != CHECKPOINT_MAGIC {
            return Err(CoreError::Checkpoint(format!("bad magic line {:?}", line.trim_end())));
        }
        line.clear();
        r.read_line(&mut line)?;
        let header: Header = serde_json::from_str(&line)?;
        if header.version != CHECKPOINT_VERSION {
            return Err(CoreError::Checkpoint(format!("unsupported version {}", header.version)));
        }
        if DType::parse(&header.dtype) != Some(T::DTYPE) {
            return Err(CoreError::Checkpoint(format!(
                "checkpoint holds {} tensors, expected {}",
                header.dtype,
                T::DTYPE.name()
            )));
        }
        let mut read = |metas: &[TensorMeta]| -> Result<ParamStore<T>> {
            let mut store = ParamStore::new();
            for m in metas {
                let t: Tensor<T> = ndt::read_from(r)?;
                if t.shape() != m.shape.as_slice() {
                    return Err(CoreError::Checkpoint(format!(
                        "tensor {} has shape {:?}, header says {:?}",
                        m.name,
                        t.shape(),
                        m.shape
                    )));
                }
                store.insert(m.name.clone(), t);
            }
            Ok(store)
        };
        let params = read(&header.params)?;
        let momentum = read(&header.momentum)?;
        header.config.validate()?;
        Ok(Checkpoint {
            planner: Planner {
                config: header.config,
                stage: header.stage,
                params,
            },
            momentum,
            step: header.step,
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = fs::File::open(path)?;
        Self::from_reader(&mut BufReader::new(f))
    }
}

/// Reads only the dtype of a checkpoint file.
pub fn checkpoint_dtype(path: impl AsRef<Path>) -> Result<DType> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end_matches('\n') != CHECKPOINT_MAGIC {
        return Err(CoreError::Checkpoint("bad magic line".into()));
    }
    line.clear();
    r.read_line(&mut line)?;
    let v: serde_json::Value = serde_json::from_str(&line)?;
    v.get("dtype")
        .and_then(|d| d.as_str())
        .and_then(DType::parse)
        .ok_or_else(|| CoreError::Checkpoint("header has no valid dtype".into()))
}

/// Parameters trained in each stage.
pub fn trainable(stage: Stage) -> fn(&str) -> bool {
    match stage {
        Stage::Dense => |n: &str| !n.starts_with("dse/") && !n.contains("/moe/"),
        Stage::Moe => |n: &str| !n.ends_with("/moe/gate"),
    }
}

/// The batch and flow noise used at optimizer step `step`.
pub fn step_batch<T: Scalar>(
    data: &Dataset,
    cfg: &PlannerConfig,
    stage: Stage,
    step: u64,
) -> Result<(Batch<T>, FlowBatch<T>)> {
    if data.is_empty() {
        return Err(CoreError::InsufficientData { needed: 1, got: 0 });
    }
    let stream = ((stage == Stage::Moe) as u64) << 40 | step;
    let mut rng = Rng::new(cfg.seed ^ 0x7a11_5eed, stream);
    let picks: Vec<&Entry> = (0..cfg.batch).map(|_| &data.entries[rng.below(data.len())]).collect();
    let batch = Batch::from_entries(&picks, cfg)?;
    let fb = FlowBatch::draw(&batch.actions, &mut rng)?;
    Ok((batch, fb))
}

/// Result of a training run. When `aborted_at` is set the checkpoint is the
/// last one with a finite loss.
#[derive(Clone, Debug)]
pub struct TrainRun<T: Scalar> {
    pub checkpoint: Checkpoint<T>,
    pub losses: Vec<f64>,
    pub aborted_at: Option<u64>,
}

/// Gradient norm clipping followed by a momentum SGD update.
fn apply_update<T: Scalar>(ckpt: &mut Checkpoint<T>, grads: Vec<(String, Tensor<T>)>) -> Result<()> {
    let cfg = &ckpt.planner.config;
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter().map(|v| v.to_f64() * v.to_f64()))
        .sum::<f64>()
        .sqrt();
    let clip = if norm > cfg.clip { cfg.clip / norm } else { 1.0 };
    let (mu, lr, c) = (T::from_f64(cfg.momentum), T::from_f64(cfg.lr), T::from_f64(clip));
    for (name, g) in grads {
        let v = match ckpt.momentum.get(&name) {
            Ok(prev) => prev.zip_map(&g, |m, gv| mu * m + c * gv)?,
            Err(_) => g.scale(c),
        };
        let p = ckpt.planner.params.get(&name)?.zip_map(&v, |p, vv| p - lr * vv)?;
        ckpt.planner.params.insert(name.clone(), p);
        ckpt.momentum.insert(name, v);
    }
    Ok(())
}

/// Runs `steps` optimizer steps from `ckpt`, logging the loss of each.
pub fn train<T: Scalar>(mut ckpt: Checkpoint<T>, data: &Dataset, steps: usize) -> Result<TrainRun<T>> {
    ckpt.planner.config.validate()?;
    let stage = ckpt.planner.stage;
    let routing = ckpt.planner.routing();
    let filter = trainable(stage);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (batch, fb) = step_batch::<T>(data, &ckpt.planner.config, stage, ckpt.step)?;
        let (loss, grads) = ckpt.planner.loss_and_grads(&routing, &batch, &fb, filter)?;
        let finite = loss.is_finite() && grads.iter().all(|(_, g)| g.all_finite());
        if !finite {
            let at = ckpt.step;
            return Ok(TrainRun {
                checkpoint: ckpt,
                losses,
                aborted_at: Some(at),
            });
        }
        apply_update(&mut ckpt, grads)?;
        ckpt.step += 1;
        losses.push(loss);
    }
    Ok(TrainRun {
        checkpoint: ckpt,
        losses,
        aborted_at: None,
    })
}

pub fn train_step1<T: Scalar>(data: &Dataset, cfg: &PlannerConfig, steps: usize) -> Result<TrainRun<T>> {
    let planner = Planner::new(cfg.clone())?;
    train(Checkpoint::fresh(planner), data, steps)
}

/// Expert initialization from a step-1 checkpoint; no update taken yet.
pub fn init_step2<T: Scalar>(ckpt1: &Checkpoint<T>) -> Result<Checkpoint<T>> {
    if ckpt1.planner.stage != Stage::Dense {
        return Err(CoreError::Checkpoint("step 2 starts from a dense checkpoint".into()));
    }
    let mut rng = Rng::new(ckpt1.planner.config.seed, 0x5e2);
    Ok(Checkpoint::fresh(ckpt1.planner.to_moe(0.0, &mut rng)?))
}

pub fn train_step2<T: Scalar>(ckpt1: &Checkpoint<T>, data: &Dataset, steps: usize) -> Result<TrainRun<T>> {
    train(init_step2(ckpt1)?, data, steps)
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn smooth(losses: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut out = Vec::with_capacity(losses.len());
    let mut acc = 0.0;
    for i in 0..losses.len() {
        acc += losses[i];
        if i >= w {
            acc -= losses[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

/// `1 - last / first` over the smoothed curve, counting only full windows.
pub fn smoothed_drop(losses: &[f64], w: usize) -> Option<f64> {
    if losses.len() < 2 * w || w == 0 {
        return None;
    }
    let s = smooth(losses, w);
    Some(1.0 - s[losses.len() - 1] / s[w - 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::RegimeMix;
    use crate::dse::DseConfig;
    use crate::scene::BevConfig;

    fn cfg() -> PlannerConfig {
        PlannerConfig {
            layers: 2,
            d: 8,
            m: 16,
            heads: 2,
            experts: 2,
            moe_period: 2,
            batch: 2,
            lr: 1e-2,
            bev: BevConfig {
                height: 8,
                width: 8,
                channels: 4,
                ego_center: (4, 4),
                ..BevConfig::default()
            },
            dse: DseConfig {
                channels: 4,
                width: 4,
                heads: 1,
                queries: 2,
                experts: 2,
                ..DseConfig::default()
            },
            patch: 4,
            ..PlannerConfig::default()
        }
    }

    fn data(c: &PlannerConfig) -> Dataset {
        Dataset::generate(6, RegimeMix::Mixed, 1, &c.bev).unwrap()
    }

    #[test]
    fn smoothing() {
        assert_eq!(smooth(&[2.0, 4.0, 6.0], 2), vec![2.0, 3.0, 5.0]);
        assert_eq!(smoothed_drop(&[4.0, 4.0, 1.0, 1.0], 2), Some(0.75));
        assert_eq!(smoothed_drop(&[1.0], 2), None);
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let c = cfg();
        let run = train_step1::<f32>(&data(&c), &c, 2).unwrap();
        let bytes = run.checkpoint.to_bytes().unwrap();
        assert!(bytes.starts_with(b"SAMOE-CKPT 1\n"));
        let back = Checkpoint::<f32>::from_reader(&mut &bytes[..]).unwrap();
        assert_eq!(back, run.checkpoint);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(Checkpoint::<f64>::from_reader(&mut &bytes[..]).is_err());
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let c = cfg();
        let d = data(&c);
        let full = train_step1::<f64>(&d, &c, 4).unwrap();
        let half = train_step1::<f64>(&d, &c, 2).unwrap();
        let bytes = half.checkpoint.to_bytes().unwrap();
        let resumed = train(Checkpoint::<f64>::from_reader(&mut &bytes[..]).unwrap(), &d, 2).unwrap();
        assert_eq!(&full.losses[2..], &resumed.losses[..]);
        assert_eq!(full.checkpoint, resumed.checkpoint);
    }

    #[test]
    fn step2_starts_where_step1_ends() {
        let c = cfg();
        let d = data(&c);
        let run = train_step1::<f64>(&d, &c, 3).unwrap();
        let s2 = init_step2(&run.checkpoint).unwrap();
        let (batch, fb) = step_batch::<f64>(&d, &c, Stage::Dense, 11).unwrap();
        let a = run
            .checkpoint
            .planner
            .loss(&run.checkpoint.planner.routing(), &batch, &fb)
            .unwrap();
        let b = s2.planner.loss(&s2.planner.routing(), &batch, &fb).unwrap();
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        assert!(s2.planner.params.contains("blk1/moe/w1"));
        assert!(!s2.planner.params.contains("blk1/plan/ffn/w1"));
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let c = cfg();
        let start = Planner::<f64>::new(c.clone()).unwrap();
        let run = train_step1::<f64>(&data(&c), &c, 2).unwrap();
        let end = &run.checkpoint.planner.params;
        assert_eq!(start.params.get("dse/conv/w").unwrap(), end.get("dse/conv/w").unwrap());
        assert_ne!(start.params.get("flow/out/w").unwrap(), end.get("flow/out/w").unwrap());
    }

    #[test]
    fn non_finite_loss_aborts_with_last_good_state() {
        let mut c = cfg();
        c.lr = 1e-3;
        let mut planner = Planner::<f64>::new(c.clone()).unwrap();
        let w = planner.params.get("flow/out/b").unwrap().map(|_| f64::NAN);
        planner.params.insert("flow/out/b", w);
        let start = Checkpoint::fresh(planner);
        let run = train(start.clone(), &data(&c), 3).unwrap();
        assert_eq!(run.aborted_at, Some(0));
        assert!(run.losses.is_empty());
        // NaN != NaN, so compare encodings.
        assert_eq!(run.checkpoint.to_bytes().unwrap(), start.to_bytes().unwrap());
    }
}
