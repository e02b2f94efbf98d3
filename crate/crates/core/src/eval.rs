//! Open-loop evaluation: L2 error at 1/2/3 s, collision and success rates,
//! overall and per scenario tag.
//!
//! Collision uses the inflated axis-aligned agent boxes of the synthetic
//! scenes; a prediction collides at horizon h if any of its waypoints up to
//! h does. A scene succeeds when its mean L2 over the three horizons is
//! below [`SUCCESS_L2`] and the full trajectory is collision free.

use std::collections::BTreeMap;

use samoe_numerics::{Rng, Scalar};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Entry};
use crate::error::{CoreError, Result};
use crate::planner::{Batch, Planner};
use crate::scene::{trajectory_collides, Tag, HORIZON};

pub const SUCCESS_L2: f64 = 0.4;
/// Waypoint indices of the 1 s, 2 s and 3 s horizons.
pub const HORIZON_INDEX: [usize; 3] = [1, 3, 5];

pub type Trajectory = [[f64; 2]; HORIZON];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    pub l2_1s: f64,
    pub l2_2s: f64,
    pub l2_3s: f64,
    pub l2_avg: f64,
    pub collision_1s: f64,
    pub collision_2s: f64,
    pub collision_3s: f64,
    pub collision_avg: f64,
    pub success_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub overall: Metrics,
    /// Every tag appears; tags without scenes have `count = 0` and zeros.
    pub by_tag: BTreeMap<String, Metrics>,
}

#[derive(Clone, Copy, Debug)]
struct SceneScore {
    l2: [f64; 3],
    collision: [bool; 3],
    success: bool,
}

fn score(entry: &Entry, pred: &Trajectory) -> SceneScore {
    let gt = &entry.scene.ego_waypoints;
    let l2 = HORIZON_INDEX.map(|k| (pred[k][0] - gt[k][0]).hypot(pred[k][1] - gt[k][1]));
    let agents = &entry.scene.agents;
    let collision = HORIZON_INDEX.map(|k| trajectory_collides(agents, &pred[..=k]));
    let mean = l2.iter().sum::<f64>() / 3.0;
    SceneScore {
        l2,
        collision,
        success: mean < SUCCESS_L2 && !trajectory_collides(agents, pred),
    }
}

fn aggregate<'a>(scores: impl Iterator<Item = &'a SceneScore>) -> Metrics {
    let mut m = Metrics::default();
    let mut l2 = [0.0; 3];
    let mut col = [0.0; 3];
    let mut ok = 0.0;
    for s in scores {
        m.count += 1;
        for h in 0..3 {
            l2[h] += s.l2[h];
            col[h] += s.collision[h] as u8 as f64;
        }
        ok += s.success as u8 as f64;
    }
    if m.count == 0 {
        return m;
    }
    let n = m.count as f64;
    [m.l2_1s, m.l2_2s, m.l2_3s] = l2.map(|v| v / n);
    [m.collision_1s, m.collision_2s, m.collision_3s] = col.map(|v| v / n);
    m.l2_avg = (m.l2_1s + m.l2_2s + m.l2_3s) / 3.0;
    m.collision_avg = (m.collision_1s + m.collision_2s + m.collision_3s) / 3.0;
    m.success_rate = ok / n;
    m
}

/// Scores given predictions (meters, ego frame), one per dataset entry.
pub fn evaluate_predictions(data: &Dataset, preds: &[Trajectory]) -> Result<EvalReport> {
    if preds.len() != data.len() {
        return Err(CoreError::Dataset(format!(
            "{} predictions for {} scenes",
            preds.len(),
            data.len()
        )));
    }
    let scores: Vec<SceneScore> = data.entries.iter().zip(preds).map(|(e, p)| score(e, p)).collect();
    let by_tag = Tag::ALL
        .iter()
        .map(|&t| {
            let sel = data
                .entries
                .iter()
                .zip(&scores)
                .filter(|(e, _)| e.tags.contains(&t))
                .map(|(_, s)| s);
            (t.name().to_string(), aggregate(sel))
        })
        .collect();
    Ok(EvalReport {
        overall: aggregate(scores.iter()),
        by_tag,
    })
}

/// Keys every metrics object carries.
pub const REPORT_KEYS: [&str; 10] = [
    "count",
    "l2_1s",
    "l2_2s",
    "l2_3s",
    "l2_avg",
    "collision_1s",
    "collision_2s",
    "collision_3s",
    "collision_avg",
    "success_rate",
];

/// Schema violations of a serialized [`EvalReport`]; empty when valid.
pub fn report_schema_errors(v: &serde_json::Value) -> Vec<String> {
    let mut errs = Vec::new();
    let check = |obj: &serde_json::Value, at: &str, errs: &mut Vec<String>| {
        for k in REPORT_KEYS {
            match obj.get(k).and_then(|x| x.as_f64()) {
                Some(x) if x.is_finite() && x >= 0.0 => {}
                Some(x) => errs.push(format!("{at}{k} = {x} is not a finite non-negative number")),
                None => errs.push(format!("{at}{k} missing or not a number")),
            }
        }
        for k in ["collision_avg", "success_rate"] {
            if obj.get(k).and_then(|x| x.as_f64()).is_some_and(|x| x > 1.0) {
                errs.push(format!("{at}{k} is a rate above 1"));
            }
        }
    };
    if !v.is_object() {
        return vec!["report is not a JSON object".into()];
    }
    check(v, "", &mut errs);
    match v.get("by_tag").and_then(|t| t.as_object()) {
        Some(tags) => {
            for t in Tag::ALL {
                match tags.get(t.name()) {
                    Some(m) => check(m, &format!("by_tag.{}.", t.name()), &mut errs),
                    None => errs.push(format!("by_tag.{} missing", t.name())),
                }
            }
        }
        None => errs.push("by_tag missing or not an object".into()),
    }
    errs
}

/// Noise stream of scene `index` for evaluation seed `seed`.
pub fn scene_noise(seed: u64, index: usize) -> Rng {
    Rng::new(seed, 0xe7a1_0000_0000 | index as u64)
}

/// Sampled trajectories for every scene, in batches of the planner's size.
pub fn predict<T: Scalar>(planner: &Planner<T>, data: &Dataset, seed: u64) -> Result<Vec<Trajectory>> {
    predict_threads(planner, data, seed, 1)
}

/// [`predict`] with batches spread over up to `threads` workers. Batches
/// and noise streams are fixed by scene index, so the output does not
/// depend on `threads`.
pub fn predict_threads<T: Scalar>(
    planner: &Planner<T>,
    data: &Dataset,
    seed: u64,
    threads: usize,
) -> Result<Vec<Trajectory>> {
    let bs = planner.config.batch;
    let chunks: Vec<&[Entry]> = data.entries.chunks(bs).collect();
    let per_chunk = crate::par::map_indexed(&chunks, threads, |chunk_id, chunk| {
        let refs: Vec<&Entry> = chunk.iter().collect();
        let batch = Batch::from_entries(&refs, &planner.config)?;
        let noise: Vec<Rng> = (0..chunk.len()).map(|i| scene_noise(seed, chunk_id * bs + i)).collect();
        let plan = planner.plan(&batch, &noise)?.to_f64_vec();
        Ok(plan
            .chunks(2 * HORIZON)
            .map(|traj| -> Trajectory { std::array::from_fn(|k| [traj[2 * k], traj[2 * k + 1]]) })
            .collect::<Vec<_>>())
    })?;
    Ok(per_chunk.into_iter().flatten().collect())
}

pub fn evaluate<T: Scalar>(planner: &Planner<T>, data: &Dataset, seed: u64) -> Result<EvalReport> {
    evaluate_predictions(data, &predict(planner, data, seed)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::RegimeMix;
    use crate::scene::{BevConfig, Regime};

    fn data() -> Dataset {
        Dataset::generate(8, RegimeMix::Mixed, 2, &BevConfig::default()).unwrap()
    }

    #[test]
    fn perfect_predictions() {
        let d = data();
        let preds: Vec<Trajectory> = d.entries.iter().map(|e| e.scene.ego_waypoints).collect();
        let r = evaluate_predictions(&d, &preds).unwrap();
        assert_eq!(r.overall.l2_avg, 0.0);
        assert_eq!(r.overall.collision_avg, 0.0);
        assert_eq!(r.overall.success_rate, 1.0);
        assert_eq!(r.overall.count, 8);
    }

    #[test]
    fn constant_offset() {
        let d = data();
        let preds: Vec<Trajectory> = d
            .entries
            .iter()
            .map(|e| e.scene.ego_waypoints.map(|p| [p[0] + 0.3, p[1]]))
            .collect();
        let r = evaluate_predictions(&d, &preds).unwrap();
        for v in [r.overall.l2_1s, r.overall.l2_2s, r.overall.l2_3s, r.overall.l2_avg] {
            assert!((v - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_scenes_never_collide() {
        let mut d = data();
        for e in &mut d.entries {
            e.scene.agents.clear();
        }
        let preds = vec![[[0.0, 0.0]; HORIZON]; d.len()];
        assert_eq!(evaluate_predictions(&d, &preds).unwrap().overall.collision_avg, 0.0);
    }

    #[test]
    fn report_keys() {
        let d = Dataset::generate(2, RegimeMix::Single(Regime::Nominal), 0, &BevConfig::default()).unwrap();
        let preds: Vec<Trajectory> = d.entries.iter().map(|e| e.scene.ego_waypoints).collect();
        let v = serde_json::to_value(evaluate_predictions(&d, &preds).unwrap()).unwrap();
        for k in [
            "l2_1s",
            "l2_2s",
            "l2_3s",
            "l2_avg",
            "collision_avg",
            "success_rate",
            "by_tag",
        ] {
            assert!(v.get(k).is_some(), "missing {k}");
        }
        assert_eq!(v["by_tag"].as_object().unwrap().len(), 3);
    }

    #[test]
    fn mismatched_lengths() {
        assert!(evaluate_predictions(&data(), &[]).is_err());
    }
}
