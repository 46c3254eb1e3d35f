//! Training orchestration: rollout generation from the inference-start step
//! onward, the adversarial alternation, the TD credit loop, and the combined
//! policy objective with entropy decay.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::discriminator::{pool_history, Discriminator, Source, TupleBatch};
use crate::estimator::{target_action, value_loss, value_loss_on_tape, CreditEstimate, QNet, ValueNet};
use crate::matrix::{softplus, Matrix};
use crate::nn::{Adam, ParamVars};
use crate::policy::{Bind, GaussianActionDistribution, PolicyNetwork};
use crate::rng::{derive_seed, rng_from_seed, PailRng};
use crate::simulator::Simulator;
use crate::tape::Tape;
use crate::trajectory::{history_at, DatasetSplit, State, Step, Trajectory};
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// First step at which the policy replaces recorded actions.
    pub t_s: usize,
    /// Weight between adversarial and value objectives.
    pub lambda: f64,
    /// Initial entropy-bonus coefficient.
    pub beta0: f64,
    /// Exponential decay rate of the entropy coefficient per epoch.
    pub decay_rate: f64,
    pub gamma: f64,
    pub epochs: usize,
    /// Base trajectories per epoch.
    pub batch_size: usize,
    pub lr_policy: f64,
    pub lr_disc: f64,
    pub lr_q: f64,
    /// Q-update + soft-update iterations per epoch.
    pub n_td: usize,
    /// Soft-update coefficient ε.
    pub soft_eps: f64,
    /// Target-action noise scale and clip.
    pub noise_scale: f64,
    pub noise_clip: f64,
    pub seed: u64,
    /// Write a resumable checkpoint every this many epochs (0 = end only).
    pub checkpoint_every: usize,
    /// Deterministic action head (no sampling).
    pub deterministic_head: bool,
    /// State-action-only discriminator.
    pub no_history_discriminator: bool,
    /// Bypass the Q-learning credit estimator (forces λ = 1).
    pub no_performance_estimator: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            t_s: 9,
            lambda: 0.5,
            beta0: 0.01,
            decay_rate: 0.05,
            gamma: 0.99,
            epochs: 120,
            batch_size: 16,
            lr_policy: 3e-4,
            lr_disc: 1e-3,
            lr_q: 1e-3,
            n_td: 5,
            soft_eps: 0.01,
            noise_scale: 0.2,
            noise_clip: 0.5,
            seed: 17,
            checkpoint_every: 25,
            deterministic_head: false,
            no_history_discriminator: false,
            no_performance_estimator: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        if self.t_s >= horizon {
            return Err(Error::InvalidConfig(format!(
                "t_s {} must be below horizon {horizon}",
                self.t_s
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig("lambda must be in [0,1]".into()));
        }
        if self.beta0 < 0.0 || self.decay_rate < 0.0 {
            return Err(Error::InvalidConfig(
                "beta0 and decay_rate must be >= 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig("gamma must be in [0,1]".into()));
        }
        Ok(())
    }

    /// Effective adversarial weight; the estimator-free variant forces 1.
    pub fn effective_lambda(&self) -> f64 {
        if self.no_performance_estimator {
            1.0
        } else {
            self.lambda
        }
    }
}

/// `β(t) = β₀ · e^(−k·t)`.
pub fn beta_schedule(beta0: f64, decay_rate: f64, epoch: usize) -> f64 {
    beta0 * (-decay_rate * epoch as f64).exp()
}

/// A base trajectory with its generated suffix and everything needed to
/// rebuild the policy gradient: raw samples, reparameterization noise, and
/// the emitted distributions.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub base_id: String,
    pub t_s: usize,
    /// Full horizon-length trajectory: steps below `t_s` bit-identical to
    /// the base, steps from `t_s` on generated.
    pub trajectory: Trajectory,
    /// Per generated step, indexed from `t_s`.
    pub dists: Vec<GaussianActionDistribution>,
    pub raw: Vec<Vec<f64>>,
    pub eps: Vec<Vec<f64>>,
    /// Per-step rewards from the discriminator; filled by the trainer.
    pub rewards: Vec<f64>,
}

impl Rollout {
    pub fn generated_len(&self) -> usize {
        self.trajectory.len() - self.t_s
    }

    /// Flattened emitted action sequence of the generated suffix.
    pub fn generated_action_flat(&self) -> Vec<f64> {
        self.trajectory.steps[self.t_s..]
            .iter()
            .flat_map(|s| s.action.0.iter().copied())
            .collect()
    }
}

/// Roll a batch of base trajectories forward in lockstep: at each step the
/// policy is queried for all rollouts at once, then the frozen simulator
/// advances each of them.
pub fn rollout_batch(
    policy: &PolicyNetwork,
    simulator: &Simulator,
    bases: &[&Trajectory],
    t_s: usize,
    seed: u64,
) -> Result<Vec<Rollout>> {
    if !simulator.frozen {
        return Err(Error::SimulatorNotFrozen);
    }
    let horizon = match bases.first() {
        Some(b) => b.len(),
        None => return Ok(Vec::new()),
    };
    for b in bases {
        if b.len() != horizon {
            return Err(Error::ShapeMismatch(
                "rollout bases must share one horizon".into(),
            ));
        }
        if t_s < horizon && b.valid_len() <= t_s {
            return Err(Error::InvalidConfig(format!(
                "base {} has no valid state at t_s {t_s}",
                b.id
            )));
        }
    }
    let lookback = policy.cfg.lookback;
    let mut working: Vec<Trajectory> = bases.iter().map(|b| (*b).clone()).collect();
    for w in &mut working {
        w.sdg = None;
    }
    let mut rngs: Vec<PailRng> = (0..bases.len())
        .map(|i| rng_from_seed(derive_seed(seed, 0x2, i as u64)))
        .collect();
    let mut dists: Vec<Vec<GaussianActionDistribution>> = vec![Vec::new(); bases.len()];
    let mut raws: Vec<Vec<Vec<f64>>> = vec![Vec::new(); bases.len()];
    let mut epss: Vec<Vec<Vec<f64>>> = vec![Vec::new(); bases.len()];

    for t in t_s..horizon {
        let windows: Vec<_> = working.iter().map(|w| history_at(w, t, lookback)).collect();
        let window_refs: Vec<&_> = windows.iter().collect();
        let states: Vec<State> = working.iter().map(|w| w.steps[t].state.clone()).collect();
        let state_refs: Vec<&State> = states.iter().collect();
        let step_dists = policy.distributions(&window_refs, &state_refs)?;

        for (b, dist) in step_dists.into_iter().enumerate() {
            let (raw, eps) = if policy.cfg.deterministic {
                (dist.mean.clone(), vec![0.0; dist.dim()])
            } else {
                dist.sample_raw(&mut rngs[b])
            };
            let action =
                crate::trajectory::Action(raw.iter().map(|&x| softplus(x)).collect());
            working[b].steps[t] = Step::new(states[b].clone(), action.clone());
            if t + 1 < horizon {
                let next = simulator.simulate_step(&states[b], &action, &mut rngs[b])?;
                let placeholder = crate::trajectory::Action::zeros(policy.cfg.k);
                working[b].steps[t + 1] = Step::new(next, placeholder);
            }
            dists[b].push(dist);
            raws[b].push(raw);
            epss[b].push(eps);
        }
    }

    Ok(working
        .into_iter()
        .enumerate()
        .map(|(b, trajectory)| Rollout {
            base_id: bases[b].id.clone(),
            t_s,
            rewards: vec![0.0; trajectory.len().saturating_sub(t_s)],
            trajectory,
            dists: std::mem::take(&mut dists[b]),
            raw: std::mem::take(&mut raws[b]),
            eps: std::mem::take(&mut epss[b]),
        })
        .collect())
}

/// Roll out a single base trajectory.
pub fn rollout(
    policy: &PolicyNetwork,
    simulator: &Simulator,
    base: &Trajectory,
    t_s: usize,
    seed: u64,
) -> Result<Rollout> {
    Ok(rollout_batch(policy, simulator, &[base], t_s, seed)?.remove(0))
}

/// Per-epoch scalar metrics; serialized one record per line.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub disc_loss: f64,
    pub disc_acc: f64,
    pub mean_reward: f64,
    pub mean_td_sq: f64,
    pub policy_loss: f64,
    pub beta: f64,
    pub entropy: f64,
}

/// All trainable and frozen components plus optimizer and RNG state; the
/// whole struct serializes, which is what makes resume exact.
#[derive(Serialize, Deserialize)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub policy: PolicyNetwork,
    pub disc: Discriminator,
    pub qnet: QNet,
    pub q_target: QNet,
    pub value_net: ValueNet,
    pub simulator: Simulator,
    pub opt_policy: Adam,
    pub opt_disc: Adam,
    pub opt_q: Adam,
    pub rng: PailRng,
    pub epoch: usize,
}

impl Trainer {
    /// Assemble a trainer around pretrained (frozen) simulator and value
    /// net. Fresh policy, discriminator, and Q networks are initialized from
    /// the config seed; the Q output affine is calibrated to the value net's
    /// label scale.
    pub fn new(
        cfg: TrainConfig,
        mut policy: PolicyNetwork,
        mut disc: Discriminator,
        mut qnet: QNet,
        value_net: ValueNet,
        simulator: Simulator,
    ) -> Result<Self> {
        if !simulator.frozen {
            return Err(Error::SimulatorNotFrozen);
        }
        if !value_net.frozen {
            return Err(Error::InvalidConfig(
                "value net must be pretrained and frozen".into(),
            ));
        }
        policy.cfg.deterministic = cfg.deterministic_head;
        disc.cfg.history_free = cfg.no_history_discriminator;
        qnet.calibrate_output(value_net.label_mean.data[0], value_net.label_scale.data[0]);
        let q_target = qnet.clone();
        let opt_policy = Adam::new(cfg.lr_policy);
        let opt_disc = Adam::new(cfg.lr_disc);
        let opt_q = Adam::new(cfg.lr_q);
        let rng = rng_from_seed(cfg.seed);
        Ok(Trainer {
            policy,
            disc,
            qnet,
            q_target,
            value_net,
            simulator,
            opt_policy,
            opt_disc,
            opt_q,
            rng,
            epoch: 0,
            cfg,
        })
    }

    fn horizon(&self) -> usize {
        self.value_net.cfg.horizon
    }

    /// (pooled history ‖ state) rows plus action rows for each generated
    /// step of each rollout.
    fn generated_tuples(&self, rollouts: &[Rollout]) -> TupleBatch {
        let lookback = self.policy.cfg.lookback;
        let mut pooled = Vec::new();
        let mut states = Vec::new();
        let mut actions = Vec::new();
        for r in rollouts {
            for t in r.t_s..r.trajectory.len() {
                let window = history_at(&r.trajectory, t, lookback);
                pooled.push(pool_history(&window, &self.policy.embed));
                states.push(r.trajectory.steps[t].state.0.clone());
                actions.push(r.trajectory.steps[t].action.0.clone());
            }
        }
        TupleBatch {
            pooled_history: Matrix::from_rows(&pooled),
            states: Matrix::from_rows(&states),
            actions: Matrix::from_rows(&actions),
            source: Source::Generated,
        }
    }

    /// Random expert tuples at steps `>= t_s`.
    fn expert_tuples(&mut self, expert: &[Trajectory], count: usize) -> TupleBatch {
        let lookback = self.policy.cfg.lookback;
        let horizon = self.horizon();
        let mut pooled = Vec::with_capacity(count);
        let mut states = Vec::with_capacity(count);
        let mut actions = Vec::with_capacity(count);
        for _ in 0..count {
            let traj = &expert[self.rng.gen_range(0..expert.len())];
            let t = self.rng.gen_range(self.cfg.t_s..horizon);
            let window = history_at(traj, t, lookback);
            pooled.push(pool_history(&window, &self.policy.embed));
            states.push(traj.steps[t].state.0.clone());
            actions.push(traj.steps[t].action.0.clone());
        }
        TupleBatch {
            pooled_history: Matrix::from_rows(&pooled),
            states: Matrix::from_rows(&states),
            actions: Matrix::from_rows(&actions),
            source: Source::Expert,
        }
    }

    /// Per-step rewards for every rollout from the current discriminator.
    pub fn fill_rewards(&self, rollouts: &mut [Rollout]) {
        let lookback = self.policy.cfg.lookback;
        for r in rollouts.iter_mut() {
            for (i, t) in (r.t_s..r.trajectory.len()).enumerate() {
                let window = history_at(&r.trajectory, t, lookback);
                let pooled = pool_history(&window, &self.policy.embed);
                r.rewards[i] = self.disc.reward(
                    &pooled,
                    &r.trajectory.steps[t].state.0,
                    &r.trajectory.steps[t].action.0,
                );
            }
        }
    }

    /// Combined policy objective
    /// `λ·L_IL + (1−λ)·L_value − β(epoch)·H(π)` evaluated on rollouts.
    pub fn policy_loss(&self, rollouts: &[Rollout], epoch: usize) -> f64 {
        let lambda = self.cfg.effective_lambda();
        let beta = beta_schedule(self.cfg.beta0, self.cfg.decay_rate, epoch);

        let generated = self.generated_tuples(rollouts);
        let l_il = self.disc.generator_adv_loss(&generated);

        let l_value = if lambda < 1.0 {
            let mut states = Vec::new();
            let mut actions = Vec::new();
            for r in rollouts {
                for t in r.t_s..r.trajectory.len() {
                    states.push(&r.trajectory.steps[t].state);
                    actions.push(&r.trajectory.steps[t].action);
                }
            }
            value_loss(&self.qnet, &states, &actions)
        } else {
            0.0
        };

        let mut entropy_sum = 0.0;
        let mut n = 0usize;
        for r in rollouts {
            for d in &r.dists {
                entropy_sum += d.entropy();
                n += 1;
            }
        }
        let entropy = if n > 0 { entropy_sum / n as f64 } else { 0.0 };

        lambda * l_il + (1.0 - lambda) * l_value - beta * entropy
    }

    /// One gradient step on the combined policy objective. Returns
    /// (loss, mean entropy).
    fn policy_step(&mut self, rollouts: &[Rollout], epoch: usize) -> Result<(f64, f64)> {
        let lambda = self.cfg.effective_lambda();
        let beta = beta_schedule(self.cfg.beta0, self.cfg.decay_rate, epoch);
        let k = self.policy.cfg.k;
        let lookback = self.policy.cfg.lookback;

        // flatten generated tuples
        let mut windows = Vec::new();
        let mut states = Vec::new();
        let mut eps_rows: Vec<Vec<f64>> = Vec::new();
        let mut hs_rows: Vec<Vec<f64>> = Vec::new();
        let mut state_rows: Vec<Vec<f64>> = Vec::new();
        for r in rollouts {
            for (i, t) in (r.t_s..r.trajectory.len()).enumerate() {
                let window = history_at(&r.trajectory, t, lookback);
                let pooled = pool_history(&window, &self.policy.embed);
                let state = &r.trajectory.steps[t].state;
                let mut hs = pooled.clone();
                hs.extend_from_slice(&state.0);
                hs_rows.push(hs);
                state_rows.push(state.0.clone());
                windows.push(window);
                states.push(state.clone());
                eps_rows.push(r.eps[i].clone());
            }
        }
        if windows.is_empty() {
            return Ok((0.0, 0.0));
        }
        let n = windows.len();
        let window_refs: Vec<&_> = windows.iter().collect();
        let state_refs: Vec<&State> = states.iter().collect();

        let mut tape = Tape::new();
        let mut pv = ParamVars::new();
        let mut bind = Bind::Params(&mut pv);
        let fwd = self
            .policy
            .forward_batch(&mut tape, &mut bind, &window_refs, &state_refs)?;

        // reparameterized raw actions and emitted (softplus) actions
        let raw = if self.policy.cfg.deterministic {
            fwd.mu
        } else {
            let eps = tape.leaf(Matrix::from_rows(&eps_rows));
            let half_logvar = tape.scale(fwd.logvar, 0.5);
            let sigma = tape.exp(half_logvar);
            let noise = tape.mul(sigma, eps);
            tape.add(fwd.mu, noise)
        };
        let emitted = tape.softplus_op(raw);

        // λ·L_IL
        let hs = Matrix::from_rows(&hs_rows);
        let l_il = self.disc.adv_loss_on_tape(&mut tape, &hs, emitted);
        let mut total = tape.scale(l_il, lambda);

        // (1−λ)·L_value
        if lambda < 1.0 {
            let state_matrix = Matrix::from_rows(&state_rows);
            let l_value = value_loss_on_tape(&self.qnet, &mut tape, &state_matrix, emitted);
            let weighted = tape.scale(l_value, 1.0 - lambda);
            total = tape.add(total, weighted);
        }

        // −β·H with H = ½K·ln(2πe) + ½K·mean(logvar)
        let mean_logvar = tape.mean(fwd.logvar);
        let h_var = tape.scale(mean_logvar, 0.5 * k as f64);
        let h_const = 0.5 * k as f64 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        let h_const = tape.leaf(Matrix::from_vec(1, 1, vec![h_const]));
        let entropy_node = tape.add(h_var, h_const);
        let beta_term = tape.scale(entropy_node, -beta);
        total = tape.add(total, beta_term);

        let loss = tape.value(total).data[0];
        let entropy = tape.value(entropy_node).data[0];
        let grads = tape.backward(total);
        let grads = pv.grads(&grads);
        self.opt_policy.step(&mut self.policy, &grads);
        let _ = n;
        Ok((loss, entropy))
    }

    /// TD credit assignment: grounded targets for every generated step.
    fn credit_pass(&mut self, rollouts: &[Rollout], v_tau: &[f64]) -> Result<f64> {
        let horizon = self.horizon();
        let lookback = self.policy.cfg.lookback;
        let gamma = self.cfg.gamma;

        // policy distributions at the *next* step of every non-terminal
        // generated step, for the noisy target actions
        let mut next_windows = Vec::new();
        let mut next_states = Vec::new();
        for r in rollouts {
            for t in self.cfg.t_s..horizon - 1 {
                next_windows.push(history_at(&r.trajectory, t + 1, lookback));
                next_states.push(r.trajectory.steps[t + 1].state.clone());
            }
        }
        let next_dists = if next_windows.is_empty() {
            Vec::new()
        } else {
            let w: Vec<&_> = next_windows.iter().collect();
            let s: Vec<&State> = next_states.iter().collect();
            self.policy.distributions(&w, &s)?
        };

        // current (s, a) rows
        let mut inputs = Vec::new();
        for r in rollouts {
            for t in self.cfg.t_s..horizon {
                inputs.push(
                    self.qnet
                        .input_row(&r.trajectory.steps[t].state, &r.trajectory.steps[t].action),
                );
            }
        }
        let inputs = Matrix::from_rows(&inputs);

        let mut last_loss = 0.0;
        for _ in 0..self.cfg.n_td {
            // rebuild noisy target actions and next-step target values
            let mut next_inputs = Vec::with_capacity(next_dists.len());
            let mut di = 0usize;
            for (ri, r) in rollouts.iter().enumerate() {
                let _ = ri;
                for t in self.cfg.t_s..horizon - 1 {
                    let a_next = target_action(
                        &next_dists[di],
                        self.cfg.noise_scale,
                        self.cfg.noise_clip,
                        &mut self.rng,
                    );
                    next_inputs.push(
                        self.qnet
                            .input_row(&r.trajectory.steps[t + 1].state, &a_next),
                    );
                    di += 1;
                }
            }
            let q_next = if next_inputs.is_empty() {
                Vec::new()
            } else {
                self.q_target.values_batch(&Matrix::from_rows(&next_inputs))
            };
            let q_now = self.qnet.values_batch(&inputs);

            let mut targets = Vec::with_capacity(inputs.rows);
            let mut row = 0usize;
            let mut next_row = 0usize;
            for (ri, r) in rollouts.iter().enumerate() {
                for t in self.cfg.t_s..horizon {
                    let credit = if t + 1 < horizon {
                        let c = CreditEstimate::non_terminal(
                            r.rewards[t - self.cfg.t_s],
                            gamma,
                            q_next[next_row],
                            q_now[row],
                        );
                        next_row += 1;
                        c
                    } else {
                        CreditEstimate::terminal(v_tau[ri], q_now[row])
                    };
                    targets.push(credit.target());
                    row += 1;
                }
            }
            last_loss = self.qnet.q_update(&mut self.opt_q, &inputs, &targets)?;
            crate::estimator::soft_update(&mut self.q_target, &self.qnet, self.cfg.soft_eps)?;
        }
        Ok(last_loss)
    }

    /// One full training epoch: collect rollouts, one discriminator step,
    /// `n_td` credit iterations, one policy step.
    pub fn train_epoch(&mut self, data: &DatasetSplit) -> Result<EpochMetrics> {
        if data.train.is_empty() || data.expert.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let epoch = self.epoch;
        let epoch_seed = derive_seed(self.cfg.seed, 0x10, epoch as u64);

        // (1) rollouts from randomly drawn base trajectories
        let bases: Vec<&Trajectory> = (0..self.cfg.batch_size)
            .map(|_| &data.train[self.rng.gen_range(0..data.train.len())])
            .collect();
        let mut rollouts =
            rollout_batch(&self.policy, &self.simulator, &bases, self.cfg.t_s, epoch_seed)?;

        // (2) one discriminator step on expert vs generated tuples
        let generated = self.generated_tuples(&rollouts);
        let expert = self.expert_tuples(&data.expert, generated.len());
        let (disc_loss, disc_grads) = self.disc.loss_and_grads(&expert, &generated)?;
        self.opt_disc.step(&mut self.disc, &disc_grads);
        // held-out accuracy: fresh expert tuples vs the same rollout tuples
        let holdout_expert = self.expert_tuples(&data.expert, generated.len());
        let disc_acc = self.disc.accuracy(&holdout_expert, &generated);

        // (3) rewards at the moment of the credit updates
        self.fill_rewards(&mut rollouts);
        let mean_reward = {
            let all: Vec<f64> = rollouts.iter().flat_map(|r| r.rewards.iter().copied()).collect();
            all.iter().sum::<f64>() / all.len().max(1) as f64
        };
        let mean_td_sq = if self.cfg.no_performance_estimator {
            0.0
        } else {
            let roll_refs: Vec<&Trajectory> = rollouts.iter().map(|r| &r.trajectory).collect();
            let v_tau = self.value_net.values(&roll_refs)?;
            self.credit_pass(&rollouts, &v_tau)?
        };

        // (4) one policy step on the combined objective
        let (policy_loss, entropy) = self.policy_step(&rollouts, epoch)?;

        self.epoch += 1;
        Ok(EpochMetrics {
            epoch,
            disc_loss,
            disc_acc,
            mean_reward,
            mean_td_sq,
            policy_loss,
            beta: beta_schedule(self.cfg.beta0, self.cfg.decay_rate, epoch),
            entropy,
        })
    }

    /// Run the configured number of epochs, appending metrics to
    /// `metrics.jsonl` and checkpointing under `run_dir` when given. On a
    /// component error the last good state is checkpointed before the error
    /// propagates.
    pub fn train(&mut self, data: &DatasetSplit, run_dir: Option<&Path>) -> Result<Vec<EpochMetrics>> {
        let mut all = Vec::new();
        if let Some(dir) = run_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            if self.epoch == 0 {
                self.save_bundle(&dir.join("checkpoints").join("epoch-0000"))?;
            }
        }
        let mut metrics_file = match run_dir {
            Some(dir) => {
                let path = dir.join("metrics.jsonl");
                let file = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some((file, path))
            }
            None => None,
        };
        while self.epoch < self.cfg.epochs {
            let started = std::time::Instant::now();
            let metrics = match self.train_epoch(data) {
                Ok(m) => m,
                Err(e) => {
                    if let Some(dir) = run_dir {
                        let _ = self.save_bundle(&dir.join("checkpoints").join("last-good"));
                    }
                    return Err(e);
                }
            };
            if let Some((file, path)) = &mut metrics_file {
                let line = serde_json::to_string(&metrics)?;
                writeln!(file, "{line}").map_err(|e| Error::io(&*path, e))?;
            }
            // wall-clock goes to the console, not the byte-stable log
            println!(
                "epoch {:4}  disc_loss {:.4}  disc_acc {:.3}  reward {:+.4}  td² {:.4}  policy {:+.5}  H {:+.3}  ({} ms)",
                metrics.epoch,
                metrics.disc_loss,
                metrics.disc_acc,
                metrics.mean_reward,
                metrics.mean_td_sq,
                metrics.policy_loss,
                metrics.entropy,
                started.elapsed().as_millis()
            );
            let at_checkpoint = self.cfg.checkpoint_every > 0
                && self.epoch % self.cfg.checkpoint_every == 0
                && self.epoch < self.cfg.epochs;
            if let Some(dir) = run_dir {
                if at_checkpoint {
                    self.save_bundle(&dir.join("checkpoints").join(format!("epoch-{:04}", self.epoch)))?;
                }
            }
            all.push(metrics);
        }
        if let Some(dir) = run_dir {
            self.save_bundle(&dir.join("checkpoints").join("final"))?;
        }
        Ok(all)
    }

    /// Write a checkpoint bundle: fp32 interchange archives per network,
    /// the resolved config, and the exact f64 training state for resume.
    pub fn save_bundle(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut header = BTreeMap::new();
        header.insert("epoch".to_string(), serde_json::json!(self.epoch));
        header.insert("d".to_string(), serde_json::json!(self.policy.cfg.d_model));
        header.insert("h".to_string(), serde_json::json!(self.policy.cfg.heads));
        header.insert("L".to_string(), serde_json::json!(self.policy.cfg.layers));
        header.insert("l".to_string(), serde_json::json!(self.policy.cfg.lookback));
        header.insert("K".to_string(), serde_json::json!(self.policy.cfg.k));
        header.insert("d_s".to_string(), serde_json::json!(self.policy.cfg.d_s));
        crate::checkpoint::save_network(&dir.join("policy.ckpt"), &header, &self.policy)?;
        crate::checkpoint::save_network(&dir.join("discriminator.ckpt"), &header, &self.disc)?;
        crate::checkpoint::save_network(&dir.join("q.ckpt"), &header, &self.qnet)?;
        crate::checkpoint::save_network(&dir.join("q_target.ckpt"), &header, &self.q_target)?;
        let mut sim_header = header.clone();
        sim_header.insert("frozen".to_string(), serde_json::json!(self.simulator.frozen));
        if let Some(mse) = self.simulator.val_mse {
            sim_header.insert("val_mse".to_string(), serde_json::json!(mse));
        }
        crate::checkpoint::save_network(&dir.join("sim.ckpt"), &sim_header, &self.simulator)?;
        crate::checkpoint::save_network(&dir.join("value.ckpt"), &header, &self.value_net)?;
        let config_json = serde_json::to_string_pretty(&self.cfg)?;
        std::fs::write(dir.join("config.json"), config_json)
            .map_err(|e| Error::io(dir.join("config.json"), e))?;
        crate::checkpoint::save_f64_state(&dir.join("state.json"), self)?;
        Ok(())
    }

    /// Restore the exact training state written by [`Self::save_bundle`].
    pub fn load_bundle(dir: &Path) -> Result<Trainer> {
        crate::checkpoint::load_f64_state(&dir.join("state.json"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discriminator::DiscriminatorConfig;
    use crate::estimator::{QNetConfig, ValueNetConfig};
    use crate::plant::{Plant, PlantConfig};
    use crate::policy::PolicyConfig;
    use crate::simulator::{SimulatorConfig, TransitionSet};
    use crate::trajectory::{normalize, split_dataset};

    // One small end-to-end fixture shared by the trainer tests.
    pub(crate) struct Fixture {
        pub data: DatasetSplit,
        pub trainer: Trainer,
    }

    pub(crate) fn build_fixture(cfg: TrainConfig, seed: u64) -> Fixture {
        let plant_cfg = PlantConfig {
            d_s: 5,
            k: 2,
            horizon: 8,
            n_traj: 40,
            c_p: vec![1.0; 2],
            c_e: vec![0.1; 2],
            ..PlantConfig::default()
        };
        let plant = Plant::new(plant_cfg).unwrap();
        let trajs = plant.generate_dataset(seed).unwrap();
        let split = split_dataset(trajs, 0.2, 0.8, seed).unwrap();
        let data = normalize(&split);

        let mut rng = rng_from_seed(derive_seed(seed, 0x99, 0));
        let mut sim = Simulator::new(
            SimulatorConfig {
                d_s: 5,
                k: 2,
                d_z: 2,
                hidden: 24,
                criterion: 0.5,
                max_epochs: 60,
                ..SimulatorConfig::default()
            },
            &mut rng,
        );
        let transitions = TransitionSet::from_trajectories(
            &data.train.iter().chain(&data.expert).cloned().collect::<Vec<_>>(),
            5,
            2,
        );
        sim.pretrain(&transitions, derive_seed(seed, 0x9a, 0)).unwrap();

        let mut value_net = ValueNet::new(
            ValueNetConfig {
                d_s: 5,
                k: 2,
                horizon: 8,
                d_model: 8,
                heads: 2,
                layers: 1,
                d_ff: 12,
                epochs: 10,
                ..ValueNetConfig::default()
            },
            &mut rng,
        );
        let labeled: Vec<Trajectory> =
            data.train.iter().chain(&data.expert).cloned().collect();
        value_net.pretrain(&labeled, derive_seed(seed, 0x9b, 0)).unwrap();

        let policy = PolicyNetwork::new(
            PolicyConfig {
                d_s: 5,
                k: 2,
                lookback: 3,
                d_model: 8,
                heads: 2,
                layers: 1,
                d_ff: 12,
                deterministic: false,
            },
            &mut rng,
        );
        let disc = Discriminator::new(
            DiscriminatorConfig {
                d_model: 8,
                d_s: 5,
                k: 2,
                hidden: 16,
                ..DiscriminatorConfig::default()
            },
            &mut rng,
        );
        let qnet = QNet::new(
            QNetConfig {
                d_s: 5,
                k: 2,
                hidden: 16,
                lr: 1e-3,
            },
            &mut rng,
        );
        let trainer = Trainer::new(cfg, policy, disc, qnet, value_net, sim).unwrap();
        Fixture { data, trainer }
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            t_s: 3,
            epochs: 3,
            batch_size: 4,
            checkpoint_every: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn beta_schedule_fixtures() {
        assert_eq!(beta_schedule(0.01, 0.05, 0), 0.01);
        let halved = beta_schedule(0.2, std::f64::consts::LN_2, 1);
        assert!((halved - 0.1).abs() < 1e-12);
        assert_eq!(beta_schedule(0.3, 0.0, 1000), 0.3);
        // non-increasing in epoch
        let mut last = f64::INFINITY;
        for epoch in 0..50 {
            let b = beta_schedule(0.01, 0.07, epoch);
            assert!(b <= last);
            last = b;
        }
    }

    #[test]
    fn rollout_prefix_is_bit_identical_and_suffix_generated() {
        let f = build_fixture(small_cfg(), 7);
        let base = &f.data.train[0];
        let r = rollout(&f.trainer.policy, &f.trainer.simulator, base, 3, 5).unwrap();
        assert_eq!(r.trajectory.len(), 8);
        for t in 0..3 {
            assert_eq!(r.trajectory.steps[t], base.steps[t]);
        }
        assert_eq!(r.generated_len(), 5);
        assert_eq!(r.dists.len(), 5);
        // the state at t_s is the recorded one
        assert_eq!(r.trajectory.steps[3].state, base.steps[3].state);
        // generated actions generally differ from the recorded ones
        let differs = (3..8).any(|t| r.trajectory.steps[t].action != base.steps[t].action);
        assert!(differs);
    }

    #[test]
    fn rollout_with_t_s_at_horizon_is_the_base() {
        let f = build_fixture(small_cfg(), 8);
        let base = &f.data.train[0];
        let r = rollout(&f.trainer.policy, &f.trainer.simulator, base, 8, 5).unwrap();
        assert_eq!(r.trajectory.steps, base.steps);
        assert_eq!(r.generated_len(), 0);
    }

    #[test]
    fn rollout_is_deterministic_in_its_seed() {
        let f = build_fixture(small_cfg(), 9);
        let base = &f.data.train[1];
        let a = rollout(&f.trainer.policy, &f.trainer.simulator, base, 3, 42).unwrap();
        let b = rollout(&f.trainer.policy, &f.trainer.simulator, base, 3, 42).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
        let c = rollout(&f.trainer.policy, &f.trainer.simulator, base, 3, 43).unwrap();
        assert_ne!(a.trajectory, c.trajectory);
    }

    #[test]
    fn rollout_requires_frozen_simulator() {
        let f = build_fixture(small_cfg(), 10);
        let mut sim = f.trainer.simulator.clone();
        sim.frozen = false;
        let err = rollout(&f.trainer.policy, &sim, &f.data.train[0], 3, 1).unwrap_err();
        assert_eq!(err.to_string(), "simulator not frozen");
    }

    #[test]
    fn loss_decomposition_matches_each_pure_term() {
        let mut f = build_fixture(small_cfg(), 11);
        let bases: Vec<&Trajectory> = f.data.train.iter().take(3).collect();
        let mut rollouts = rollout_batch(
            &f.trainer.policy,
            &f.trainer.simulator,
            &bases,
            3,
            7,
        )
        .unwrap();
        f.trainer.fill_rewards(&mut rollouts);

        // λ=1, β=0 -> exactly the adversarial term
        f.trainer.cfg.lambda = 1.0;
        f.trainer.cfg.beta0 = 0.0;
        let generated = f.trainer.generated_tuples(&rollouts);
        let expected = f.trainer.disc.generator_adv_loss(&generated);
        let got = f.trainer.policy_loss(&rollouts, 0);
        assert!((got - expected).abs() <= 1e-12);

        // λ=0, β=0 -> exactly the value term
        f.trainer.cfg.lambda = 0.0;
        let mut states = Vec::new();
        let mut actions = Vec::new();
        for r in &rollouts {
            for t in r.t_s..r.trajectory.len() {
                states.push(&r.trajectory.steps[t].state);
                actions.push(&r.trajectory.steps[t].action);
            }
        }
        let expected = value_loss(&f.trainer.qnet, &states, &actions);
        let got = f.trainer.policy_loss(&rollouts, 0);
        assert!((got - expected).abs() <= 1e-12);

        // larger σ strictly lowers the loss through the entropy bonus
        f.trainer.cfg.lambda = 0.5;
        f.trainer.cfg.beta0 = 0.1;
        let base_loss = f.trainer.policy_loss(&rollouts, 0);
        for r in &mut rollouts {
            for d in &mut r.dists {
                for v in &mut d.diag_var {
                    *v *= 4.0;
                }
            }
        }
        let wider = f.trainer.policy_loss(&rollouts, 0);
        assert!(wider < base_loss);
    }

    #[test]
    fn zero_learning_rates_leave_parameters_unchanged() {
        let mut f = build_fixture(
            TrainConfig {
                lr_policy: 0.0,
                lr_disc: 0.0,
                lr_q: 0.0,
                soft_eps: 1e-12,
                ..small_cfg()
            },
            12,
        );
        let p0 = crate::nn::params_map(&f.trainer.policy);
        let d0 = crate::nn::params_map(&f.trainer.disc);
        let q0 = crate::nn::params_map(&f.trainer.qnet);
        let metrics = f.trainer.train_epoch(&f.data).unwrap();
        assert_eq!(crate::nn::params_map(&f.trainer.policy), p0);
        assert_eq!(crate::nn::params_map(&f.trainer.disc), d0);
        assert_eq!(crate::nn::params_map(&f.trainer.qnet), q0);
        assert!(metrics.disc_loss.is_finite());
    }

    #[test]
    fn metrics_schema_and_determinism() {
        let run = |seed: u64| {
            let mut f = build_fixture(small_cfg(), seed);
            f.trainer.train(&f.data, None).unwrap()
        };
        let a = run(13);
        let b = run(13);
        assert_eq!(a, b, "same seed must give identical metric streams");
        assert_eq!(a.len(), 3);
        let json = serde_json::to_value(&a[0]).unwrap();
        for key in [
            "epoch",
            "disc_loss",
            "disc_acc",
            "mean_reward",
            "mean_td_sq",
            "policy_loss",
            "beta",
            "entropy",
        ] {
            assert!(json.get(key).is_some(), "missing metrics key {key}");
        }
    }

    #[test]
    fn frozen_components_survive_training_untouched() {
        let mut f = build_fixture(small_cfg(), 14);
        let sim_fp = crate::nn::fingerprint(&f.trainer.simulator);
        let val_fp = crate::nn::fingerprint(&f.trainer.value_net);
        f.trainer.train(&f.data, None).unwrap();
        assert_eq!(crate::nn::fingerprint(&f.trainer.simulator), sim_fp);
        assert_eq!(crate::nn::fingerprint(&f.trainer.value_net), val_fp);
    }

    #[test]
    fn zero_epochs_writes_only_the_initial_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = build_fixture(
            TrainConfig {
                epochs: 0,
                ..small_cfg()
            },
            15,
        );
        let metrics = f.trainer.train(&f.data, Some(dir.path())).unwrap();
        assert!(metrics.is_empty());
        assert!(dir.path().join("checkpoints/epoch-0000/state.json").exists());
        assert!(dir.path().join("checkpoints/final/policy.ckpt").exists());
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_metric_stream() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 4,
            checkpoint_every: 2,
            ..small_cfg()
        };

        // uninterrupted run
        let mut f = build_fixture(cfg.clone(), 16);
        let full = f.trainer.train(&f.data, None).unwrap();

        // interrupted run: stop after 2 epochs, resume from the checkpoint
        let mut g = build_fixture(cfg.clone(), 16);
        g.trainer.cfg.epochs = 2;
        let first_half = g.trainer.train(&g.data, Some(dir.path())).unwrap();
        let mut resumed = Trainer::load_bundle(&dir.path().join("checkpoints/final")).unwrap();
        assert_eq!(resumed.epoch, 2);
        resumed.cfg.epochs = 4;
        let second_half = resumed.train(&g.data, None).unwrap();

        let stitched: Vec<EpochMetrics> =
            first_half.into_iter().chain(second_half).collect();
        assert_eq!(stitched, full);
    }

    #[test]
    fn ablation_flags_wire_through() {
        // deterministic head
        let f = build_fixture(
            TrainConfig {
                deterministic_head: true,
                ..small_cfg()
            },
            17,
        );
        assert!(f.trainer.policy.cfg.deterministic);
        let base = &f.data.train[0];
        let a = rollout(&f.trainer.policy, &f.trainer.simulator, base, 3, 1).unwrap();
        for (raw, dist) in a.raw.iter().zip(&a.dists) {
            assert_eq!(raw, &dist.mean);
        }

        // history-free discriminator
        let f = build_fixture(
            TrainConfig {
                no_history_discriminator: true,
                ..small_cfg()
            },
            18,
        );
        assert!(f.trainer.disc.cfg.history_free);

        // no performance estimator: λ forced to 1, training still runs
        let mut f = build_fixture(
            TrainConfig {
                no_performance_estimator: true,
                lambda: 0.25,
                ..small_cfg()
            },
            19,
        );
        assert_eq!(f.trainer.cfg.effective_lambda(), 1.0);
        let q0 = crate::nn::params_map(&f.trainer.qnet);
        let metrics = f.trainer.train_epoch(&f.data).unwrap();
        assert_eq!(metrics.mean_td_sq, 0.0);
        assert_eq!(crate::nn::params_map(&f.trainer.qnet), q0);
    }
}
