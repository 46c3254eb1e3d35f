//! Performance estimator: a trajectory value network regressing the
//! terminal score from a full step sequence, a Q-network with a softly
//! updated target twin, temporal-difference credit assignment on
//! discriminator rewards with terminal grounding, and the value-maximization
//! objective for the policy.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::matrix::{softplus, Matrix};
use crate::nn::{Adam, Linear, Mlp, Network, ParamVars};
use crate::policy::{positional_encode, Bind, EncoderLayer, GaussianActionDistribution};
use crate::rng::PailRng;
use crate::tape::{AttnMask, Tape, Var};
use crate::trajectory::{Action, State, Trajectory};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Trajectory value network F

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValueNetConfig {
    pub d_s: usize,
    pub k: usize,
    pub horizon: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Minibatches per epoch (subsampled sweep).
    pub max_batches_per_epoch: usize,
}

impl Default for ValueNetConfig {
    fn default() -> Self {
        ValueNetConfig {
            d_s: 16,
            k: 5,
            horizon: 30,
            d_model: 64,
            heads: 4,
            layers: 1,
            d_ff: 128,
            lr: 1e-3,
            epochs: 60,
            batch_size: 32,
            max_batches_per_epoch: 10,
        }
    }
}

/// Self-attention stack over full-length step sequences plus a pooled
/// regression head emitting one scalar per trajectory.
///
/// The head output passes through an affine `label_mean + label_scale · h`
/// whose coefficients are initialized from the label statistics during
/// pretraining; labels themselves stay in raw units everywhere.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValueNet {
    pub cfg: ValueNetConfig,
    pub embed: Linear,
    pub enc: Vec<EncoderLayer>,
    pub head: Linear,
    pub label_mean: Matrix,
    pub label_scale: Matrix,
    pub frozen: bool,
}

/// Handles into a value-net forward pass.
pub struct ValueForward {
    /// B×1 predictions.
    pub value: Var,
    /// (B·T)×d embedded steps (before positions).
    pub embedded: Var,
}

impl ValueNet {
    pub fn new(cfg: ValueNetConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        ValueNet {
            embed: Linear::new("value.embed", cfg.d_s + cfg.k, d, rng),
            enc: (0..cfg.layers)
                .map(|i| EncoderLayer::new(format!("value.enc.{i}"), d, cfg.d_ff, rng))
                .collect(),
            head: Linear::new("value.head", d, 1, rng),
            label_mean: Matrix::zeros(1, 1),
            label_scale: Matrix::filled(1, 1, 1.0),
            frozen: false,
            cfg,
        }
    }

    fn features(&self, trajs: &[&Trajectory]) -> Matrix {
        let t_len = self.cfg.horizon;
        let width = self.cfg.d_s + self.cfg.k;
        let mut m = Matrix::zeros(trajs.len() * t_len, width);
        for (b, traj) in trajs.iter().enumerate() {
            assert_eq!(traj.len(), t_len, "trajectory must be aligned to horizon");
            for (i, step) in traj.steps.iter().enumerate() {
                let row = m.row_mut(b * t_len + i);
                row[..self.cfg.d_s].copy_from_slice(&step.state.0);
                row[self.cfg.d_s..].copy_from_slice(&step.action.0);
            }
        }
        m
    }

    /// Batched forward pass; masked (dummy) steps are excluded from both
    /// attention and pooling.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        bind: &mut Bind,
        trajs: &[&Trajectory],
    ) -> Result<ValueForward> {
        let t_len = self.cfg.horizon;
        let d = self.cfg.d_model;
        let batch = trajs.len();

        let features = tape.leaf(self.features(trajs));
        let embedded = match bind {
            Bind::Params(pv) => self.embed.forward(tape, pv, features),
            Bind::Const => self.embed.forward_const(tape, features),
        };

        let pos_table = positional_encode(t_len, d);
        let mut pos = Matrix::zeros(batch * t_len, d);
        for b in 0..batch {
            for i in 0..t_len {
                pos.row_mut(b * t_len + i).copy_from_slice(pos_table.row(i));
            }
        }
        let pos = tape.leaf(pos);
        let mut z = tape.add(embedded, pos);

        let valid: Vec<Vec<bool>> = trajs
            .iter()
            .map(|t| t.steps.iter().map(|s| s.valid).collect())
            .collect();
        let mask = Rc::new(AttnMask::block_self(&valid));
        for layer in &self.enc {
            z = layer.forward(tape, bind, z, self.cfg.heads, &mask)?;
        }

        // masked mean pooling per trajectory, as a constant linear map
        let mut pool = Matrix::zeros(batch, batch * t_len);
        for (b, v) in valid.iter().enumerate() {
            let count = v.iter().filter(|&&x| x).count();
            if count == 0 {
                return Err(Error::EmptyAttentionContext);
            }
            for (i, &ok) in v.iter().enumerate() {
                if ok {
                    pool.set(b, b * t_len + i, 1.0 / count as f64);
                }
            }
        }
        let pool = tape.leaf(pool);
        let pooled = tape.matmul(pool, z);
        let raw = match bind {
            Bind::Params(pv) => self.head.forward(tape, pv, pooled),
            Bind::Const => self.head.forward_const(tape, pooled),
        };
        let (scale, mean) = match bind {
            Bind::Params(pv) => (
                pv.bind(tape, "value.label_scale", &self.label_scale),
                pv.bind(tape, "value.label_mean", &self.label_mean),
            ),
            Bind::Const => (
                tape.leaf(self.label_scale.clone()),
                tape.leaf(self.label_mean.clone()),
            ),
        };
        let scaled = tape.matmul(raw, scale);
        let value = tape.add_row(scaled, mean);
        Ok(ValueForward { value, embedded })
    }

    /// Predicted terminal score for one aligned trajectory.
    pub fn trajectory_value(&self, traj: &Trajectory) -> Result<f64> {
        Ok(self.values(&[traj])?[0])
    }

    /// Batched predictions outside any tape.
    pub fn values(&self, trajs: &[&Trajectory]) -> Result<Vec<f64>> {
        if trajs.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let fwd = self.forward_batch(&mut tape, &mut Bind::Const, trajs)?;
        Ok(tape.value(fwd.value).data.clone())
    }

    /// Gradient-times-input saliency: per step, `‖∂V/∂e_t‖ · ‖e_t‖` where
    /// `e_t` is the embedded step vector.
    pub fn embedding_saliency(&self, traj: &Trajectory) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let fwd = self.forward_batch(&mut tape, &mut Bind::Const, &[traj])?;
        let grads = tape.backward(fwd.value);
        let e = tape.value(fwd.embedded).clone();
        let g = grads.get_or_zero(fwd.embedded, e.rows, e.cols);
        Ok((0..e.rows)
            .map(|r| {
                let gn = g.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                let en = e.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                gn * en
            })
            .collect())
    }

    /// Minimize the square loss between predictions and terminal labels.
    pub fn pretrain(&mut self, trajs: &[Trajectory], seed: u64) -> Result<ValuePretrainReport> {
        if self.frozen {
            return Err(Error::InvalidConfig("value net already frozen".into()));
        }
        if trajs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        for t in trajs {
            t.sdg_or_err()?;
        }
        // calibrate the output affine to the label statistics
        let labels: Vec<f64> = trajs.iter().map(|t| t.sdg.unwrap()).collect();
        let mean = labels.iter().sum::<f64>() / labels.len() as f64;
        let var = labels.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / labels.len() as f64;
        self.label_mean = Matrix::from_vec(1, 1, vec![mean]);
        self.label_scale = Matrix::from_vec(1, 1, vec![if var.sqrt() < 1e-8 { 1.0 } else { var.sqrt() }]);

        let mut rng = crate::rng::rng_from_seed(seed);
        let mut adam = Adam::new(self.cfg.lr);
        let mut order: Vec<usize> = (0..trajs.len()).collect();
        let mut last_mse = f64::INFINITY;
        for _ in 0..self.cfg.epochs {
            order.shuffle(&mut rng);
            let mut epoch_sq = 0.0;
            let mut epoch_n = 0usize;
            for chunk in order
                .chunks(self.cfg.batch_size)
                .take(self.cfg.max_batches_per_epoch)
            {
                let batch: Vec<&Trajectory> = chunk.iter().map(|&i| &trajs[i]).collect();
                let labels =
                    Matrix::from_vec(batch.len(), 1, batch.iter().map(|t| t.sdg.unwrap()).collect());
                let mut tape = Tape::new();
                let mut pv = ParamVars::new();
                let mut bind = Bind::Params(&mut pv);
                let fwd = self.forward_batch(&mut tape, &mut bind, &batch)?;
                let target = tape.leaf(labels);
                let diff = tape.sub(fwd.value, target);
                let sq = tape.square(diff);
                let loss = tape.mean(sq);
                let grads = tape.backward(loss);
                let grads = pv.grads(&grads);
                epoch_sq += tape.value(loss).data[0] * batch.len() as f64;
                epoch_n += batch.len();
                adam.step(self, &grads);
            }
            last_mse = epoch_sq / epoch_n.max(1) as f64;
        }
        self.frozen = true;
        Ok(ValuePretrainReport {
            epochs: self.cfg.epochs,
            train_mse: last_mse,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ValuePretrainReport {
    pub epochs: usize,
    pub train_mse: f64,
}

impl Network for ValueNet {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        f(&format!("{}.w", self.embed.name), &self.embed.w);
        if let Some(b) = &self.embed.b {
            f(&format!("{}.b", self.embed.name), b);
        }
        for layer in &self.enc {
            layer.visit(f);
        }
        f(&format!("{}.w", self.head.name), &self.head.w);
        if let Some(b) = &self.head.b {
            f(&format!("{}.b", self.head.name), b);
        }
        f("value.label_mean", &self.label_mean);
        f("value.label_scale", &self.label_scale);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        assert!(!self.frozen, "frozen value net parameters are immutable");
        f(&format!("{}.w", self.embed.name), &mut self.embed.w);
        if let Some(b) = &mut self.embed.b {
            f(&format!("{}.b", self.embed.name), b);
        }
        for layer in &mut self.enc {
            layer.visit_mut(f);
        }
        f(&format!("{}.w", self.head.name), &mut self.head.w);
        if let Some(b) = &mut self.head.b {
            f(&format!("{}.b", self.head.name), b);
        }
        f("value.label_mean", &mut self.label_mean);
        f("value.label_scale", &mut self.label_scale);
    }
}

// ---------------------------------------------------------------------------
// Q-network, target twin, TD errors

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QNetConfig {
    pub d_s: usize,
    pub k: usize,
    pub hidden: usize,
    pub lr: f64,
}

impl Default for QNetConfig {
    fn default() -> Self {
        QNetConfig {
            d_s: 16,
            k: 5,
            hidden: 128,
            lr: 1e-3,
        }
    }
}

/// MLP mapping state ‖ action to a scalar credit estimate. An output
/// affine (calibrated to the score scale when targets are known up front)
/// keeps the raw head near unit range.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QNet {
    pub cfg: QNetConfig,
    pub mlp: Mlp,
    pub out_mean: Matrix,
    pub out_scale: Matrix,
}

impl QNet {
    pub fn new(cfg: QNetConfig, rng: &mut impl Rng) -> Self {
        QNet {
            mlp: Mlp::new("q", &[cfg.d_s + cfg.k, cfg.hidden, cfg.hidden, 1], rng),
            out_mean: Matrix::zeros(1, 1),
            out_scale: Matrix::filled(1, 1, 1.0),
            cfg,
        }
    }

    /// Set the output affine (e.g. from the value net's label statistics).
    pub fn calibrate_output(&mut self, mean: f64, scale: f64) {
        self.out_mean = Matrix::from_vec(1, 1, vec![mean]);
        self.out_scale = Matrix::from_vec(1, 1, vec![if scale.abs() < 1e-8 { 1.0 } else { scale }]);
    }

    pub fn input_row(&self, s: &State, a: &Action) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.cfg.d_s + self.cfg.k);
        row.extend_from_slice(&s.0);
        row.extend_from_slice(&a.0);
        row
    }

    pub fn value(&self, s: &State, a: &Action) -> f64 {
        self.values_batch(&Matrix::row_vector(&self.input_row(s, a)))[0]
    }

    pub fn values_batch(&self, inputs: &Matrix) -> Vec<f64> {
        let mean = self.out_mean.data[0];
        let scale = self.out_scale.data[0];
        self.mlp
            .eval(inputs)
            .data
            .iter()
            .map(|&h| mean + scale * h)
            .collect()
    }

    /// Q-values on a tape with gradients into the Q parameters.
    fn q_on_tape(&self, tape: &mut Tape, pv: &mut ParamVars, x: Var) -> Var {
        let h = self.mlp.forward(tape, pv, x);
        let scale = pv.bind(tape, "q.out_scale", &self.out_scale);
        let mean = pv.bind(tape, "q.out_mean", &self.out_mean);
        let scaled = tape.matmul(h, scale);
        tape.add_row(scaled, mean)
    }

    /// Q-values on a tape with all Q parameters constant (for policy
    /// updates where gradients flow only through the action input).
    pub fn q_on_tape_const(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.mlp.forward_const(tape, x);
        let scale = tape.leaf(self.out_scale.clone());
        let mean = tape.leaf(self.out_mean.clone());
        let scaled = tape.matmul(h, scale);
        tape.add_row(scaled, mean)
    }

    /// One optimizer step on `mean[(target − Q(s,a))²]`; targets are
    /// constants. Returns the loss before the step.
    pub fn q_update(&mut self, adam: &mut Adam, inputs: &Matrix, targets: &[f64]) -> Result<f64> {
        if inputs.rows == 0 {
            return Err(Error::EmptyBatch);
        }
        assert_eq!(inputs.rows, targets.len());
        let mut tape = Tape::new();
        let mut pv = ParamVars::new();
        let x = tape.leaf(inputs.clone());
        let q = self.q_on_tape(&mut tape, &mut pv, x);
        let t = tape.leaf(Matrix::from_vec(targets.len(), 1, targets.to_vec()));
        let delta = tape.sub(t, q);
        let sq = tape.square(delta);
        let loss = tape.mean(sq);
        let grads = tape.backward(loss);
        let grads = pv.grads(&grads);
        let value = tape.value(loss).data[0];
        adam.step(self, &grads);
        Ok(value)
    }
}

impl Network for QNet {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        self.mlp.visit(f);
        f("q.out_mean", &self.out_mean);
        f("q.out_scale", &self.out_scale);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.mlp.visit_mut(f);
        f("q.out_mean", &mut self.out_mean);
        f("q.out_scale", &mut self.out_scale);
    }
}

/// `θ' ← ε·θ + (1−ε)·θ'` elementwise; shapes must match.
pub fn soft_update(target: &mut QNet, live: &QNet, eps: f64) -> Result<()> {
    let live_params = crate::nn::params_map(live);
    let mut err = None;
    target.visit_params_mut(&mut |name, m| {
        match live_params.get(name) {
            Some(src) if src.same_shape(m) => {
                for (t, &s) in m.data.iter_mut().zip(&src.data) {
                    *t = eps * s + (1.0 - eps) * *t;
                }
            }
            _ => err = Some(name.to_string()),
        };
    });
    match err {
        Some(name) => Err(Error::ShapeMismatch(format!(
            "target/live mismatch on {name}"
        ))),
        None => Ok(()),
    }
}

/// One history-state-action credit tuple.
#[derive(Clone, Debug)]
pub struct CreditEstimate {
    pub q: f64,
    pub q_target_next: f64,
    pub td_error: f64,
    pub reward: f64,
    pub gamma: f64,
}

impl CreditEstimate {
    pub fn non_terminal(reward: f64, gamma: f64, q_target_next: f64, q: f64) -> Self {
        CreditEstimate {
            q,
            q_target_next,
            td_error: td_error(reward, gamma, q_target_next, q),
            reward,
            gamma,
        }
    }

    pub fn terminal(v_tau: f64, q: f64) -> Self {
        CreditEstimate {
            q,
            q_target_next: 0.0,
            td_error: terminal_td_error(v_tau, q),
            reward: v_tau,
            gamma: 0.0,
        }
    }

    /// The regression target implied by the stored pieces.
    pub fn target(&self) -> f64 {
        self.td_error + self.q
    }
}

/// `δ_t = r_t + γ·Q'(s_{t+1}, a_{t+1}) − Q(s_t, a_t)`.
pub fn td_error(reward: f64, gamma: f64, q_next_target: f64, q_current: f64) -> f64 {
    reward + gamma * q_next_target - q_current
}

/// Final-step grounding: `δ_T = V(τ) − Q(s_T, a_T)`.
pub fn terminal_td_error(v_tau: f64, q_terminal: f64) -> f64 {
    v_tau - q_terminal
}

/// Noisy deterministic action for the target network:
/// `softplus(μ + clip(Normal(0, noise_scale), ±clip))`.
pub fn target_action(
    dist: &GaussianActionDistribution,
    noise_scale: f64,
    clip: f64,
    rng: &mut PailRng,
) -> Action {
    Action(
        dist.mean
            .iter()
            .map(|&m| {
                let noise = if noise_scale > 0.0 && clip > 0.0 {
                    (noise_scale * rng.sample::<f64, _>(StandardNormal)).clamp(-clip, clip)
                } else {
                    0.0
                };
                softplus(m + noise)
            })
            .collect(),
    )
}

/// `−mean Q(s, a)` over sampled actions; zero for an empty batch. The tape
/// variant used for policy updates lives in the trainer.
pub fn value_loss(qnet: &QNet, states: &[&State], actions: &[&Action]) -> f64 {
    if states.is_empty() {
        return 0.0;
    }
    let rows: Vec<Vec<f64>> = states
        .iter()
        .zip(actions)
        .map(|(s, a)| qnet.input_row(s, a))
        .collect();
    let q = qnet.values_batch(&Matrix::from_rows(&rows));
    -q.iter().sum::<f64>() / q.len() as f64
}

/// Q-value term on a tape: `−mean Q(s, a(θ))` with Q's parameters constant
/// and gradients flowing through the action rows.
pub fn value_loss_on_tape(qnet: &QNet, tape: &mut Tape, states: &Matrix, actions: Var) -> Var {
    let s = tape.leaf(states.clone());
    let input = tape.concat_cols(&[s, actions]);
    let q = qnet.q_on_tape_const(tape, input);
    let mean_q = tape.mean(q);
    tape.neg(mean_q)
}

/// Grounded TD targets for a rollout's credit tuples.
pub fn credit_targets(credits: &[CreditEstimate]) -> Vec<f64> {
    credits.iter().map(|c| c.target()).collect()
}
