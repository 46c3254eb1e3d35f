//! Canonical data model for states, actions, windows, and trajectories,
//! plus alignment, dataset splitting, normalization, and line-delimited
//! serialization.
//!
//! All types here are immutable values after construction; "mutation" means
//! building a new value. That makes them safe to share read-only across
//! parallel workers.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng::rng_from_seed;
use crate::{Error, Result};

/// Plant measurements at one step, unitless after normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct State(pub Vec<f64>);

impl State {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn zeros(d: usize) -> Self {
        State(vec![0.0; d])
    }
}

/// Operation magnitudes per action type; every component is non-negative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action(pub Vec<f64>);

impl Action {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn zeros(k: usize) -> Self {
        Action(vec![0.0; k])
    }
}

/// One (state, action) pair. `valid == false` marks dummy padding appended
/// by [`align_trajectory`]; dummy steps are all-zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub state: State,
    pub action: Action,
    pub valid: bool,
}

impl Step {
    pub fn new(state: State, action: Action) -> Self {
        Step {
            state,
            action,
            valid: true,
        }
    }

    pub fn dummy(d_s: usize, k: usize) -> Self {
        Step {
            state: State::zeros(d_s),
            action: Action::zeros(k),
            valid: false,
        }
    }
}

/// Fixed-horizon sequence of steps with one terminal score.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub id: String,
    pub steps: Vec<Step>,
    pub sdg: Option<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn valid_len(&self) -> usize {
        self.steps.iter().filter(|s| s.valid).count()
    }

    pub fn sdg_or_err(&self) -> Result<f64> {
        self.sdg.ok_or_else(|| Error::MissingSdg {
            id: self.id.clone(),
        })
    }
}

/// The `l` steps preceding some step `t`, left-padded with zeros where the
/// trajectory has no history yet. `mask[i] == false` marks padding.
#[derive(Clone, Debug)]
pub struct HistoryWindow {
    pub entries: Vec<Step>,
    pub mask: Vec<bool>,
}

impl HistoryWindow {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Per-feature normalization statistics, computed on expert ∪ train only.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Normalization {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
}

impl Normalization {
    /// Identity statistics, for datasets that are already normalized.
    pub fn identity(d_s: usize) -> Self {
        Normalization {
            state_mean: vec![0.0; d_s],
            state_std: vec![1.0; d_s],
        }
    }

    pub fn normalize_state(&self, s: &State) -> State {
        State(
            s.0.iter()
                .zip(self.state_mean.iter().zip(&self.state_std))
                .map(|(&v, (&m, &sd))| (v - m) / sd)
                .collect(),
        )
    }

    pub fn denormalize_state(&self, s: &State) -> State {
        State(
            s.0.iter()
                .zip(self.state_mean.iter().zip(&self.state_std))
                .map(|(&v, (&m, &sd))| v * sd + m)
                .collect(),
        )
    }
}

/// Expert/train/test partition of a dataset plus its normalization stats.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub expert: Vec<Trajectory>,
    pub train: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
    pub normalization: Normalization,
}

/// Pad `traj` with dummy steps up to length `T`. Existing steps are kept
/// bit-exactly; a trajectory longer than `T` is an error.
pub fn align_trajectory(traj: &Trajectory, horizon: usize) -> Result<Trajectory> {
    if traj.len() > horizon {
        return Err(Error::TrajectoryExceedsHorizon {
            len: traj.len(),
            horizon,
        });
    }
    let (d_s, k) = match traj.steps.first() {
        Some(s) => (s.state.dim(), s.action.dim()),
        None => (0, 0),
    };
    let mut steps = traj.steps.clone();
    while steps.len() < horizon {
        steps.push(Step::dummy(d_s, k));
    }
    Ok(Trajectory {
        id: traj.id.clone(),
        steps,
        sdg: traj.sdg,
    })
}

/// Rank by sdg, take the top `expert_fraction` (ceiling) as the expert set,
/// shuffle the remainder by `seed`, and split it `train_ratio` : rest.
pub fn split_dataset(
    trajs: Vec<Trajectory>,
    expert_fraction: f64,
    train_ratio: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if !(0.0 < expert_fraction && expert_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "expert_fraction must be in (0,1), got {expert_fraction}"
        )));
    }
    for t in &trajs {
        t.sdg_or_err()?;
    }
    let n = trajs.len();
    let n_expert = ((expert_fraction * n as f64).ceil() as usize).min(n);

    // Stable sort keeps input order on sdg ties, for reproducibility.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        trajs[b]
            .sdg
            .unwrap()
            .partial_cmp(&trajs[a].sdg.unwrap())
            .unwrap()
    });
    let expert_idx: Vec<usize> = order[..n_expert].to_vec();
    let mut is_expert = vec![false; n];
    for &i in &expert_idx {
        is_expert[i] = true;
    }

    let mut rest_idx: Vec<usize> = (0..n).filter(|&i| !is_expert[i]).collect();
    let mut rng = rng_from_seed(seed);
    rest_idx.shuffle(&mut rng);
    let n_train = (rest_idx.len() as f64 * train_ratio).floor() as usize;

    let mut slots: Vec<Option<Trajectory>> = trajs.into_iter().map(Some).collect();
    let take = |slots: &mut Vec<Option<Trajectory>>, idx: &[usize]| -> Vec<Trajectory> {
        idx.iter().map(|&i| slots[i].take().unwrap()).collect()
    };
    let expert = take(&mut slots, &expert_idx);
    let train = take(&mut slots, &rest_idx[..n_train]);
    let test = take(&mut slots, &rest_idx[n_train..]);

    Ok(DatasetSplit {
        expert,
        train,
        test,
        normalization: Normalization::identity(0),
    })
}

/// Compute z-scoring statistics from the valid steps of expert ∪ train and
/// apply them to state features in all three splits. Features with standard
/// deviation below `1e-8` use divisor 1. Actions stay in raw units; dummy
/// steps stay zero.
pub fn normalize(split: &DatasetSplit) -> DatasetSplit {
    let d_s = split
        .expert
        .iter()
        .chain(&split.train)
        .flat_map(|t| &t.steps)
        .find(|s| s.valid)
        .map(|s| s.state.dim())
        .unwrap_or(0);

    let mut mean = vec![0.0; d_s];
    let mut count = 0usize;
    for t in split.expert.iter().chain(&split.train) {
        for s in t.steps.iter().filter(|s| s.valid) {
            for (m, v) in mean.iter_mut().zip(&s.state.0) {
                *m += v;
            }
            count += 1;
        }
    }
    if count > 0 {
        for m in &mut mean {
            *m /= count as f64;
        }
    }
    let mut var = vec![0.0; d_s];
    for t in split.expert.iter().chain(&split.train) {
        for s in t.steps.iter().filter(|s| s.valid) {
            for (v, (&x, &m)) in var.iter_mut().zip(s.state.0.iter().zip(&mean)) {
                *v += (x - m) * (x - m);
            }
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|&v| {
            let sd = if count > 0 { (v / count as f64).sqrt() } else { 0.0 };
            if sd < 1e-8 {
                1.0
            } else {
                sd
            }
        })
        .collect();

    let norm = Normalization {
        state_mean: mean,
        state_std: std,
    };
    let apply = |trajs: &[Trajectory]| -> Vec<Trajectory> {
        trajs
            .iter()
            .map(|t| Trajectory {
                id: t.id.clone(),
                sdg: t.sdg,
                steps: t
                    .steps
                    .iter()
                    .map(|s| {
                        if s.valid {
                            Step {
                                state: norm.normalize_state(&s.state),
                                action: s.action.clone(),
                                valid: true,
                            }
                        } else {
                            s.clone()
                        }
                    })
                    .collect(),
            })
            .collect()
    };

    DatasetSplit {
        expert: apply(&split.expert),
        train: apply(&split.train),
        test: apply(&split.test),
        normalization: norm,
    }
}

/// History window for step `t`: steps `t-l .. t-1`, left-padded with masked
/// zero entries where `t < l`.
pub fn history_at(traj: &Trajectory, t: usize, lookback: usize) -> HistoryWindow {
    let (d_s, k) = match traj.steps.first() {
        Some(s) => (s.state.dim(), s.action.dim()),
        None => (0, 0),
    };
    let mut entries = Vec::with_capacity(lookback);
    let mut mask = Vec::with_capacity(lookback);
    for offset in (1..=lookback).rev() {
        if t >= offset {
            let step = &traj.steps[t - offset];
            entries.push(step.clone());
            mask.push(step.valid);
        } else {
            entries.push(Step::dummy(d_s, k));
            mask.push(false);
        }
    }
    HistoryWindow { entries, mask }
}

// ---------------------------------------------------------------------------
// Serialization: one trajectory per line, self-describing records.

#[derive(Serialize, Deserialize)]
struct StepRecord {
    s: Vec<f64>,
    a: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryRecord {
    id: String,
    sdg: f64,
    steps: Vec<StepRecord>,
}

/// Write trajectories as line-delimited records. Only valid steps are
/// stored; alignment is re-applied on load.
pub fn write_jsonl(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in trajs {
        let record = TrajectoryRecord {
            id: t.id.clone(),
            sdg: t.sdg_or_err()?,
            steps: t
                .steps
                .iter()
                .filter(|s| s.valid)
                .map(|s| StepRecord {
                    s: s.state.0.clone(),
                    a: s.action.0.clone(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Trajectory>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TrajectoryRecord = serde_json::from_str(&line)?;
        out.push(Trajectory {
            id: record.id,
            sdg: Some(record.sdg),
            steps: record
                .steps
                .into_iter()
                .map(|r| Step::new(State(r.s), Action(r.a)))
                .collect(),
        });
    }
    Ok(out)
}

pub fn write_normalization(path: &Path, norm: &Normalization) -> Result<()> {
    let json = serde_json::to_string_pretty(norm)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_normalization(path: &Path) -> Result<Normalization> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_traj(id: &str, len: usize, sdg: f64) -> Trajectory {
        let steps = (0..len)
            .map(|i| {
                Step::new(
                    State(vec![i as f64, -(i as f64)]),
                    Action(vec![0.5 + i as f64]),
                )
            })
            .collect();
        Trajectory {
            id: id.to_string(),
            steps,
            sdg: Some(sdg),
        }
    }

    #[test]
    fn align_pads_with_dummies() {
        let t = toy_traj("a", 25, 1.0);
        let aligned = align_trajectory(&t, 30).unwrap();
        assert_eq!(aligned.len(), 30);
        assert_eq!(aligned.valid_len(), 25);
        assert_eq!(aligned.steps[..25], t.steps[..]);
        for s in &aligned.steps[25..] {
            assert!(!s.valid);
            assert!(s.state.0.iter().all(|&v| v == 0.0));
            assert!(s.action.0.iter().all(|&v| v == 0.0));
        }
        assert_eq!(aligned.sdg, t.sdg);
    }

    #[test]
    fn align_exact_length_is_identity() {
        let t = toy_traj("a", 30, 2.0);
        let aligned = align_trajectory(&t, 30).unwrap();
        assert_eq!(aligned, t);
    }

    #[test]
    fn align_rejects_overlong() {
        let t = toy_traj("a", 31, 0.0);
        let err = align_trajectory(&t, 30).unwrap_err();
        assert!(err.to_string().contains("trajectory exceeds horizon"));
    }

    #[test]
    fn split_matches_reference_counts() {
        let trajs: Vec<Trajectory> = (0..1100)
            .map(|i| toy_traj(&format!("t{i}"), 3, i as f64))
            .collect();
        let split = split_dataset(trajs, 0.10, 0.8, 7).unwrap();
        assert_eq!(split.expert.len(), 110);
        assert_eq!(split.train.len(), 792);
        assert_eq!(split.test.len(), 198);
        // expert really is the top slice
        let min_expert = split
            .expert
            .iter()
            .map(|t| t.sdg.unwrap())
            .fold(f64::INFINITY, f64::min);
        let max_rest = split
            .train
            .iter()
            .chain(&split.test)
            .map(|t| t.sdg.unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(min_expert > max_rest);
    }

    #[test]
    fn split_small_dataset_uses_ceiling_then_floor() {
        let trajs: Vec<Trajectory> = (0..10)
            .map(|i| toy_traj(&format!("t{i}"), 2, i as f64))
            .collect();
        let split = split_dataset(trajs, 0.10, 0.8, 3).unwrap();
        assert_eq!(split.expert.len(), 1);
        assert_eq!(split.train.len(), 7);
        assert_eq!(split.test.len(), 2);
    }

    #[test]
    fn split_is_deterministic_and_a_partition() {
        let make =
            || -> Vec<Trajectory> { (0..53).map(|i| toy_traj(&format!("t{i}"), 2, (i * 7 % 13) as f64)).collect() };
        let a = split_dataset(make(), 0.2, 0.8, 99).unwrap();
        let b = split_dataset(make(), 0.2, 0.8, 99).unwrap();
        let ids = |s: &DatasetSplit| -> Vec<String> {
            s.expert
                .iter()
                .chain(&s.train)
                .chain(&s.test)
                .map(|t| t.id.clone())
                .collect()
        };
        assert_eq!(ids(&a), ids(&b));
        // partition: every input id appears exactly once
        let mut all = ids(&a);
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 53);
    }

    #[test]
    fn split_requires_sdg() {
        let mut t = toy_traj("a", 2, 0.0);
        t.sdg = None;
        let err = split_dataset(vec![t], 0.5, 0.8, 0).unwrap_err();
        assert!(matches!(err, Error::MissingSdg { .. }));
    }

    #[test]
    fn normalize_zscore_and_constant_column() {
        // Feature 0 is constant; feature 1 varies.
        let t = Trajectory {
            id: "a".into(),
            sdg: Some(0.0),
            steps: vec![
                Step::new(State(vec![5.0, 1.0]), Action(vec![1.0])),
                Step::new(State(vec![5.0, 3.0]), Action(vec![2.0])),
            ],
        };
        let split = DatasetSplit {
            expert: vec![],
            train: vec![t],
            test: vec![],
            normalization: Normalization::identity(2),
        };
        let normed = normalize(&split);
        let steps = &normed.train[0].steps;
        assert_eq!(steps[0].state.0[0], 0.0);
        assert_eq!(steps[1].state.0[0], 0.0);
        assert!((steps[0].state.0[1] + 1.0).abs() < 1e-12);
        assert!((steps[1].state.0[1] - 1.0).abs() < 1e-12);
        // actions untouched
        assert_eq!(steps[0].action.0, vec![1.0]);
    }

    #[test]
    fn normalize_identity_feature_unchanged_and_round_trip() {
        let vals = [-1.2, 0.3, 0.9, -0.7, 0.7];
        let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        let t = Trajectory {
            id: "a".into(),
            sdg: Some(0.0),
            steps: vals
                .iter()
                .map(|&v| Step::new(State(vec![v - mean]), Action(vec![0.0])))
                .collect(),
        };
        let split = DatasetSplit {
            expert: vec![],
            train: vec![t.clone()],
            test: vec![],
            normalization: Normalization::identity(1),
        };
        let normed = normalize(&split);
        let norm = &normed.normalization;
        for (orig, got) in t.steps.iter().zip(&normed.train[0].steps) {
            let back = norm.denormalize_state(&got.state);
            assert!((back.0[0] - orig.state.0[0]).abs() < 1e-10);
        }
    }

    #[test]
    fn normalize_keeps_dummy_steps_zero() {
        let t = align_trajectory(&toy_traj("a", 3, 1.0), 6).unwrap();
        let split = DatasetSplit {
            expert: vec![],
            train: vec![t],
            test: vec![],
            normalization: Normalization::identity(2),
        };
        let normed = normalize(&split);
        for s in &normed.train[0].steps[3..] {
            assert!(s.state.0.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn history_boundaries() {
        let t = toy_traj("a", 12, 0.0);
        let w = history_at(&t, 0, 4);
        assert_eq!(w.len(), 4);
        assert_eq!(w.valid_count(), 0);
        assert!(w.entries.iter().all(|s| !s.valid));

        let w = history_at(&t, 9, 4);
        assert_eq!(w.valid_count(), 4);
        for (i, e) in w.entries.iter().enumerate() {
            assert_eq!(e, &t.steps[5 + i]);
        }

        let w = history_at(&t, 2, 4);
        assert_eq!(w.valid_count(), 2);
        assert!(!w.mask[0] && !w.mask[1] && w.mask[2] && w.mask[3]);
        assert_eq!(w.entries[2], t.steps[0]);
        assert_eq!(w.entries[3], t.steps[1]);
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trajs.jsonl");
        let trajs: Vec<Trajectory> = (0..5)
            .map(|i| toy_traj(&format!("t{i}"), 4, 0.1 * i as f64 + 1.0 / 3.0))
            .collect();
        write_jsonl(&path, &trajs).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back, trajs);
    }
}
