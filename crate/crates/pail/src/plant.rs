//! Ground-truth synthetic industrial process. It generates datasets with the
//! shape the engine expects (fixed horizon, multi-type non-negative actions,
//! one terminal score per trajectory) and provides oracles for testing: the
//! true dynamics, the true score functional, and a tiny enumerable decision
//! process.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::matrix::{sigmoid, Matrix};
use crate::rng::{derive_seed, rng_from_seed, PailRng};
use crate::trajectory::{Action, State, Step, Trajectory};
use crate::{Error, Result};

const STREAM_TRAJECTORY: u64 = 0x1;

/// Configuration of the synthetic plant and its behavior dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantConfig {
    /// State dimension.
    pub d_s: usize,
    /// Number of action types.
    pub k: usize,
    /// Horizon (steps per trajectory).
    pub horizon: usize,
    /// Dataset size.
    pub n_traj: usize,
    /// Seed for the plant dynamics matrices.
    pub dynamics_seed: u64,
    /// Process noise scale.
    pub sigma_plant: f64,
    /// Per-action-type production weights.
    pub c_p: Vec<f64>,
    /// Per-action-type emission weights.
    pub c_e: Vec<f64>,
    /// Gain of the saturated state-action interaction in the dynamics.
    pub nl_gain: f64,
    /// Scale of the random initial state.
    pub init_state_scale: f64,
    /// Standard deviation of the behavior policy's exploration noise.
    pub behavior_noise: f64,
    /// Per-trajectory controller-quality range (uniform draw).
    pub skill_min: f64,
    pub skill_max: f64,
    /// Upper clamp on behavior actions.
    pub a_max: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        PlantConfig {
            d_s: 16,
            k: 5,
            horizon: 30,
            n_traj: 1100,
            dynamics_seed: 7,
            sigma_plant: 0.05,
            c_p: vec![1.0; 5],
            c_e: vec![0.1; 5],
            nl_gain: 0.3,
            init_state_scale: 0.5,
            behavior_noise: 0.15,
            skill_min: 0.3,
            skill_max: 1.5,
            a_max: 2.0,
        }
    }
}

impl PlantConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_s == 0 || self.k == 0 || self.horizon == 0 || self.n_traj == 0 {
            return Err(Error::InvalidConfig(
                "plant dimensions and dataset size must be positive".into(),
            ));
        }
        if self.sigma_plant < 0.0 {
            return Err(Error::InvalidConfig("sigma_plant must be >= 0".into()));
        }
        if self.c_p.len() != self.k || self.c_e.len() != self.k {
            return Err(Error::InvalidConfig(format!(
                "c_p/c_e must have length K = {}",
                self.k
            )));
        }
        Ok(())
    }
}

/// The plant's transition structure. `a_dyn` has spectral radius below 1 so
/// zero-action trajectories stay bounded.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlantDynamics {
    pub a_dyn: Matrix,
    pub b_dyn: Matrix,
    /// Per-action-type state sensitivity defining the production yield.
    pub yield_w: Matrix,
    pub nl_gain: f64,
    pub noise_scale: f64,
}

fn matvec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    assert_eq!(m.cols, v.len(), "matvec dimension mismatch");
    (0..m.rows)
        .map(|r| m.row(r).iter().zip(v).map(|(&a, &b)| a * b).sum())
        .collect()
}

/// Largest absolute eigenvalue of a square matrix, by power iteration.
pub fn spectral_radius(m: &Matrix, iterations: usize) -> f64 {
    assert_eq!(m.rows, m.cols);
    let mut v = vec![1.0; m.rows];
    let mut radius = 0.0;
    for _ in 0..iterations {
        let w = matvec(m, &v);
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        radius = norm / v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = w.iter().map(|x| x / norm).collect();
    }
    radius
}

impl PlantDynamics {
    /// Build dynamics from the config's seed; the linear part is rescaled to
    /// spectral radius 0.85.
    pub fn from_config(cfg: &PlantConfig) -> Self {
        let mut rng = rng_from_seed(cfg.dynamics_seed);
        let mut a_dyn = Matrix::zeros(cfg.d_s, cfg.d_s);
        for v in &mut a_dyn.data {
            *v = rng.sample::<f64, _>(StandardNormal) / (cfg.d_s as f64).sqrt();
        }
        let rho = spectral_radius(&a_dyn, 200);
        if rho > 0.0 {
            a_dyn = a_dyn.scale(0.85 / rho);
        }
        let mut b_dyn = Matrix::zeros(cfg.d_s, cfg.k);
        for v in &mut b_dyn.data {
            *v = 0.4 * rng.sample::<f64, _>(StandardNormal);
        }
        let mut yield_w = Matrix::zeros(cfg.k, cfg.d_s);
        for v in &mut yield_w.data {
            *v = rng.sample::<f64, _>(StandardNormal) / (cfg.d_s as f64).sqrt();
        }
        PlantDynamics {
            a_dyn,
            b_dyn,
            yield_w,
            nl_gain: cfg.nl_gain,
            noise_scale: cfg.sigma_plant,
        }
    }
}

/// Full plant: config plus derived dynamics. Immutable and shareable.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Plant {
    pub config: PlantConfig,
    pub dynamics: PlantDynamics,
}

impl Plant {
    pub fn new(config: PlantConfig) -> Result<Self> {
        config.validate()?;
        let dynamics = PlantDynamics::from_config(&config);
        Ok(Plant { config, dynamics })
    }

    /// One true transition:
    /// `s' = A·s + B·a + nl_gain · tanh((A·s) ⊙ (B·a)) + noise`.
    pub fn step_true(&self, s: &State, a: &Action, rng: &mut PailRng) -> Result<State> {
        if s.dim() != self.config.d_s {
            return Err(Error::DimensionMismatch {
                expected: self.config.d_s,
                got: s.dim(),
                context: "state",
            });
        }
        if a.dim() != self.config.k {
            return Err(Error::DimensionMismatch {
                expected: self.config.k,
                got: a.dim(),
                context: "action",
            });
        }
        let lin_s = matvec(&self.dynamics.a_dyn, &s.0);
        let lin_a = matvec(&self.dynamics.b_dyn, &a.0);
        let mut next = vec![0.0; self.config.d_s];
        for i in 0..self.config.d_s {
            next[i] = lin_s[i]
                + lin_a[i]
                + self.dynamics.nl_gain * (lin_s[i] * lin_a[i]).tanh();
            if self.dynamics.noise_scale > 0.0 {
                next[i] += self.dynamics.noise_scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        debug_assert!(next.iter().all(|v| v.is_finite()));
        Ok(State(next))
    }

    /// Per-type production yield at step `t`: a bounded, state-dependent,
    /// time-weighted response to each action component. The time weight
    /// makes the score order-sensitive.
    fn yield_at(&self, t: usize, s: &State, a: &Action) -> Vec<f64> {
        let w_t = self.time_weight(t);
        (0..self.config.k)
            .map(|k| {
                let sense = sigmoid(
                    self.dynamics
                        .yield_w
                        .row(k)
                        .iter()
                        .zip(&s.0)
                        .map(|(&u, &x)| u * x)
                        .sum(),
                );
                w_t * a.0[k].tanh() * sense
            })
            .collect()
    }

    fn time_weight(&self, t: usize) -> f64 {
        let horizon = self.config.horizon.max(2);
        0.5 + t as f64 / (horizon - 1) as f64
    }

    /// Terminal score of a full trajectory:
    /// `y = Σ_t [ c_p · g_t(s_t, a_t) − c_e · e(a_t) ]` with `e(a)_k = a_k²`.
    /// Only this single scalar is ever exposed to the learner.
    pub fn true_sdg(&self, traj: &Trajectory) -> f64 {
        let mut total = 0.0;
        for (t, step) in traj.steps.iter().enumerate().filter(|(_, s)| s.valid) {
            let g = self.yield_at(t, &step.state, &step.action);
            for k in 0..self.config.k {
                total += self.config.c_p[k] * g[k];
                total -= self.config.c_e[k] * step.action.0[k] * step.action.0[k];
            }
        }
        total
    }

    fn behavior_action(
        &self,
        s: &State,
        skill: f64,
        rng: &mut PailRng,
    ) -> Action {
        let values = (0..self.config.k)
            .map(|k| {
                let sense = sigmoid(
                    self.dynamics
                        .yield_w
                        .row(k)
                        .iter()
                        .zip(&s.0)
                        .map(|(&u, &x)| u * x)
                        .sum(),
                );
                let noise = if self.config.behavior_noise > 0.0 {
                    self.config.behavior_noise * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                (skill * sense + noise).clamp(0.0, self.config.a_max)
            })
            .collect();
        Action(values)
    }

    /// Roll out one behavior trajectory from a derived per-index seed.
    pub fn rollout_behavior(&self, seed: u64, index: u64) -> Result<Trajectory> {
        let mut rng = rng_from_seed(derive_seed(seed, STREAM_TRAJECTORY, index));
        let mut state = State(
            (0..self.config.d_s)
                .map(|_| self.config.init_state_scale * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        );
        // Per-trajectory controller quality; the spread in skill is what
        // makes the top slice of the dataset meaningfully better.
        let skill: f64 = if self.config.skill_max > self.config.skill_min {
            rng.gen_range(self.config.skill_min..self.config.skill_max)
        } else {
            self.config.skill_min
        };
        let mut steps = Vec::with_capacity(self.config.horizon);
        for _ in 0..self.config.horizon {
            let action = self.behavior_action(&state, skill, &mut rng);
            let next = self.step_true(&state, &action, &mut rng)?;
            steps.push(Step::new(state, action));
            state = next;
        }
        let mut traj = Trajectory {
            id: format!("traj-{index:05}"),
            steps,
            sdg: None,
        };
        traj.sdg = Some(self.true_sdg(&traj));
        Ok(traj)
    }

    /// Generate the full behavior dataset. Each trajectory draws from its
    /// own derived stream, so the result is independent of scheduling.
    pub fn generate_dataset(&self, seed: u64) -> Result<Vec<Trajectory>> {
        (0..self.config.n_traj as u64)
            .into_par_iter()
            .map(|i| self.rollout_behavior(seed, i))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Enumerable toy decision process, small enough for exact answers.

/// A 2-state, 2-action, 3-step process with tabulated transitions and
/// terminal values; per-path quantities are computable by exhaustive
/// enumeration.
#[derive(Clone, Debug)]
pub struct ToyMdp {
    pub horizon: usize,
    pub start_state: usize,
    /// `transition[s][a][s']`.
    pub transition: Vec<Vec<Vec<f64>>>,
    /// Value of the state reached after the final step.
    pub terminal_value: Vec<f64>,
}

/// Tabular policy `policy[t][s][a]`.
pub type ToyPolicy = Vec<Vec<Vec<f64>>>;

/// One sampled path through the toy process.
#[derive(Clone, Debug)]
pub struct ToyTrajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub terminal: f64,
}

/// The standard enumerable toy process.
pub fn toy_mdp() -> ToyMdp {
    ToyMdp {
        horizon: 3,
        start_state: 0,
        transition: vec![
            vec![vec![0.7, 0.3], vec![0.2, 0.8]],
            vec![vec![0.6, 0.4], vec![0.1, 0.9]],
        ],
        terminal_value: vec![1.0, 3.0],
    }
}

impl ToyMdp {
    pub fn n_states(&self) -> usize {
        self.transition.len()
    }

    pub fn n_actions(&self) -> usize {
        self.transition[0].len()
    }

    /// Deterministic variant: every transition has probability 1.
    pub fn deterministic() -> Self {
        ToyMdp {
            horizon: 3,
            start_state: 0,
            transition: vec![
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            ],
            terminal_value: vec![1.0, 3.0],
        }
    }

    pub fn uniform_policy(&self) -> ToyPolicy {
        vec![
            vec![vec![1.0 / self.n_actions() as f64; self.n_actions()]; self.n_states()];
            self.horizon
        ]
    }

    /// Policy that always takes `action`.
    pub fn constant_policy(&self, action: usize) -> ToyPolicy {
        let mut row = vec![0.0; self.n_actions()];
        row[action] = 1.0;
        vec![vec![row; self.n_states()]; self.horizon]
    }

    /// Exact policy value by exhaustive enumeration over every
    /// (action, next-state) branch.
    pub fn exact_value(&self, policy: &ToyPolicy) -> f64 {
        fn recurse(mdp: &ToyMdp, policy: &ToyPolicy, t: usize, s: usize, p: f64, total: &mut f64) {
            if t == mdp.horizon {
                *total += p * mdp.terminal_value[s];
                return;
            }
            for a in 0..mdp.n_actions() {
                let pa = policy[t][s][a];
                if pa == 0.0 {
                    continue;
                }
                for (s_next, &pt) in mdp.transition[s][a].iter().enumerate() {
                    if pt == 0.0 {
                        continue;
                    }
                    recurse(mdp, policy, t + 1, s_next, p * pa * pt, total);
                }
            }
        }
        let mut total = 0.0;
        recurse(self, policy, 0, self.start_state, 1.0, &mut total);
        total
    }

    /// Exact per-step action values by backward induction:
    /// `Q_t(s,a) = r(s,a) + γ · E_{s'}[ Σ_a' π(a'|s') Q_{t+1}(s',a') ]`,
    /// with the final step grounded in `E_{s'}[terminal_value(s')]`.
    /// `reward(t, s, a)` applies to every non-final step.
    pub fn exact_q(
        &self,
        policy: &ToyPolicy,
        gamma: f64,
        reward: &dyn Fn(usize, usize, usize) -> f64,
    ) -> Vec<Vec<Vec<f64>>> {
        let (ns, na) = (self.n_states(), self.n_actions());
        let mut q = vec![vec![vec![0.0; na]; ns]; self.horizon];
        for t in (0..self.horizon).rev() {
            for s in 0..ns {
                for a in 0..na {
                    if t == self.horizon - 1 {
                        q[t][s][a] = self.transition[s][a]
                            .iter()
                            .enumerate()
                            .map(|(sn, &p)| p * self.terminal_value[sn])
                            .sum();
                    } else {
                        let expected_next: f64 = self.transition[s][a]
                            .iter()
                            .enumerate()
                            .map(|(sn, &p)| {
                                p * (0..na)
                                    .map(|an| policy[t + 1][sn][an] * q[t + 1][sn][an])
                                    .sum::<f64>()
                            })
                            .sum();
                        q[t][s][a] = reward(t, s, a) + gamma * expected_next;
                    }
                }
            }
        }
        q
    }

    /// Sample one path under `policy`.
    pub fn sample(&self, policy: &ToyPolicy, rng: &mut PailRng) -> ToyTrajectory {
        let mut states = vec![self.start_state];
        let mut actions = Vec::with_capacity(self.horizon);
        let mut s = self.start_state;
        for t in 0..self.horizon {
            let a = sample_index(&policy[t][s], rng);
            let s_next = sample_index(&self.transition[s][a], rng);
            actions.push(a);
            states.push(s_next);
            s = s_next;
        }
        ToyTrajectory {
            terminal: self.terminal_value[s],
            states,
            actions,
        }
    }

    /// Enumerate every path with its probability under `policy`, as
    /// (states, actions, probability) tuples.
    pub fn enumerate_paths(&self, policy: &ToyPolicy) -> Vec<(Vec<usize>, Vec<usize>, f64)> {
        let mut out = Vec::new();
        fn recurse(
            mdp: &ToyMdp,
            policy: &ToyPolicy,
            t: usize,
            states: &mut Vec<usize>,
            actions: &mut Vec<usize>,
            p: f64,
            out: &mut Vec<(Vec<usize>, Vec<usize>, f64)>,
        ) {
            if t == mdp.horizon {
                out.push((states.clone(), actions.clone(), p));
                return;
            }
            let s = *states.last().unwrap();
            for a in 0..mdp.n_actions() {
                let pa = policy[t][s][a];
                if pa == 0.0 {
                    continue;
                }
                for (s_next, &pt) in mdp.transition[s][a].iter().enumerate() {
                    if pt == 0.0 {
                        continue;
                    }
                    states.push(s_next);
                    actions.push(a);
                    recurse(mdp, policy, t + 1, states, actions, p * pa * pt, out);
                    states.pop();
                    actions.pop();
                }
            }
        }
        recurse(
            self,
            policy,
            0,
            &mut vec![self.start_state],
            &mut Vec::new(),
            1.0,
            &mut out,
        );
        out
    }
}

fn sample_index(probs: &[f64], rng: &mut PailRng) -> usize {
    let draw: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if draw < acc {
            return i;
        }
    }
    probs.len() - 1
}

pub fn write_plant(path: &std::path::Path, plant: &Plant) -> Result<()> {
    let json = serde_json::to_string_pretty(plant)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_plant(path: &std::path::Path) -> Result<Plant> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
