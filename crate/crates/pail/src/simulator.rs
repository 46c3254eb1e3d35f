//! Conditional variational world model predicting the next state from the
//! current (state, action) pair. Pretrained once to a validation criterion,
//! then frozen for all policy learning that follows.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::nn::{Adam, Mlp, Network, ParamVars};
use crate::rng::{rng_from_seed, PailRng};
use crate::tape::{Tape, Var};
use crate::trajectory::{Action, State, Trajectory};
use crate::{Error, Result};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 4.0;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulatorConfig {
    pub d_s: usize,
    pub k: usize,
    /// Latent width; zero makes the decoder deterministic.
    pub d_z: usize,
    /// Hidden width of both MLPs.
    pub hidden: usize,
    /// Weight on the KL regularizer.
    pub beta_vae: f64,
    /// Freeze criterion: validation reconstruction MSE threshold.
    pub criterion: f64,
    /// Epochs without improvement before giving up.
    pub patience: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Fraction of transitions held out for validation.
    pub val_fraction: f64,
    /// Upper bound on minibatches per epoch (subsampled sweep).
    pub max_batches_per_epoch: usize,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        SimulatorConfig {
            d_s: 16,
            k: 5,
            d_z: 8,
            hidden: 128,
            beta_vae: 1e-3,
            criterion: 0.1,
            patience: 20,
            max_epochs: 200,
            lr: 1e-3,
            batch_size: 256,
            val_fraction: 0.1,
            max_batches_per_epoch: 30,
        }
    }
}

/// Encoder + decoder MLPs plus the freeze flag. Once frozen the parameters
/// are immutable; the engine enforces that on every training entry point.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Simulator {
    pub cfg: SimulatorConfig,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub frozen: bool,
    pub val_mse: Option<f64>,
}

/// Encoder moments and a decoded prediction for one transition.
#[derive(Clone, Debug)]
pub struct LatentTransition {
    pub mu_z: Vec<f64>,
    pub log_var_z: Vec<f64>,
    pub z_sample: Vec<f64>,
    pub next_state_pred: State,
}

/// Consecutive (state, action) -> next-state pairs from valid steps.
pub struct TransitionSet {
    pub inputs: Matrix,
    pub targets: Matrix,
}

impl TransitionSet {
    pub fn from_trajectories(trajs: &[Trajectory], d_s: usize, k: usize) -> Self {
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for t in trajs {
            for w in t.steps.windows(2) {
                if w[0].valid && w[1].valid {
                    let mut row = Vec::with_capacity(d_s + k);
                    row.extend_from_slice(&w[0].state.0);
                    row.extend_from_slice(&w[0].action.0);
                    inputs.push(row);
                    targets.push(w[1].state.0.clone());
                }
            }
        }
        TransitionSet {
            inputs: Matrix::from_rows(&inputs),
            targets: Matrix::from_rows(&targets),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn rows(&self, idx: &[usize]) -> (Matrix, Matrix) {
        let mut x = Matrix::zeros(idx.len(), self.inputs.cols);
        let mut y = Matrix::zeros(idx.len(), self.targets.cols);
        for (r, &i) in idx.iter().enumerate() {
            x.row_mut(r).copy_from_slice(self.inputs.row(i));
            y.row_mut(r).copy_from_slice(self.targets.row(i));
        }
        (x, y)
    }
}

impl Simulator {
    pub fn new(cfg: SimulatorConfig, rng: &mut impl Rng) -> Self {
        let enc_dims = [cfg.d_s + cfg.k, cfg.hidden, cfg.hidden, 2 * cfg.d_z];
        let dec_dims = [cfg.d_s + cfg.k + cfg.d_z, cfg.hidden, cfg.hidden, cfg.d_s];
        Simulator {
            encoder: Mlp::new("enc", &enc_dims, rng),
            decoder: Mlp::new("dec", &dec_dims, rng),
            frozen: false,
            val_mse: None,
            cfg,
        }
    }

    /// Posterior moments for one (state, action) pair.
    pub fn encode(&self, s: &State, a: &Action) -> Result<(Vec<f64>, Vec<f64>)> {
        if s.dim() != self.cfg.d_s {
            return Err(Error::DimensionMismatch {
                expected: self.cfg.d_s,
                got: s.dim(),
                context: "simulator state",
            });
        }
        if a.dim() != self.cfg.k {
            return Err(Error::DimensionMismatch {
                expected: self.cfg.k,
                got: a.dim(),
                context: "simulator action",
            });
        }
        let mut row = Vec::with_capacity(self.cfg.d_s + self.cfg.k);
        row.extend_from_slice(&s.0);
        row.extend_from_slice(&a.0);
        let out = self.encoder.eval(&Matrix::row_vector(&row));
        let mu = out.row(0)[..self.cfg.d_z].to_vec();
        let logvar = out.row(0)[self.cfg.d_z..]
            .iter()
            .map(|&v| v.clamp(LOGVAR_MIN, LOGVAR_MAX))
            .collect();
        Ok((mu, logvar))
    }

    fn decode_rows(&self, x: &Matrix, z: &Matrix) -> Matrix {
        let mut input = Matrix::zeros(x.rows, x.cols + z.cols);
        for r in 0..x.rows {
            input.row_mut(r)[..x.cols].copy_from_slice(x.row(r));
            input.row_mut(r)[x.cols..].copy_from_slice(z.row(r));
        }
        self.decoder.eval(&input)
    }

    /// Evidence-lower-bound pieces for a batch, built on a tape.
    ///
    /// Returns (loss, reconstruction, kl) nodes; `loss = recon + β·kl` with
    /// the reconstruction term a plain MSE and the KL summed over latent
    /// dimensions, averaged over the batch.
    fn elbo_on_tape(
        &self,
        tape: &mut Tape,
        pv: Option<&mut ParamVars>,
        x: &Matrix,
        target: &Matrix,
        eps: &Matrix,
    ) -> (Var, Var, Var) {
        let batch = x.rows;
        let xv = tape.leaf(x.clone());
        let tv = tape.leaf(target.clone());
        let ev = tape.leaf(eps.clone());

        let mut bound_pv = pv;
        let mut enc_forward = |tape: &mut Tape, input: Var| match bound_pv {
            Some(ref mut pv) => self.encoder.forward(tape, pv, input),
            None => self.encoder.forward_const(tape, input),
        };
        let enc_out = enc_forward(tape, xv);
        let mu = tape.slice_cols(enc_out, 0, self.cfg.d_z);
        let logvar_raw = tape.slice_cols(enc_out, self.cfg.d_z, self.cfg.d_z);
        let logvar = tape.clamp(logvar_raw, LOGVAR_MIN, LOGVAR_MAX);
        let half_logvar = tape.scale(logvar, 0.5);
        let sigma = tape.exp(half_logvar);
        let noise = tape.mul(sigma, ev);
        let z = tape.add(mu, noise);

        let dec_in = tape.concat_cols(&[xv, z]);
        let pred = match bound_pv {
            Some(ref mut pv) => self.decoder.forward(tape, pv, dec_in),
            None => self.decoder.forward_const(tape, dec_in),
        };
        let diff = tape.sub(pred, tv);
        let sq = tape.square(diff);
        let recon = tape.mean(sq);

        // KL(q ‖ N(0, I)) = ½ Σ (μ² + σ² − logσ² − 1) per sample
        let mu_sq = tape.square(mu);
        let var = tape.exp(logvar);
        let sum_terms = tape.add(mu_sq, var);
        let minus_logvar = tape.neg(logvar);
        let sum_terms = tape.add(sum_terms, minus_logvar);
        let kl_sum = tape.sum(sum_terms);
        let ones_correction = -0.5 * self.cfg.d_z as f64; // the "−1" per latent dim
        let kl_scaled = tape.scale(kl_sum, 0.5 / batch as f64);
        let correction = tape.leaf(Matrix::from_vec(1, 1, vec![ones_correction]));
        let kl = tape.add(kl_scaled, correction);

        let beta_kl = tape.scale(kl, self.cfg.beta_vae);
        let loss = tape.add(recon, beta_kl);
        (loss, recon, kl)
    }

    /// Scalar loss `recon + β·KL` for a single transition, sampling z by
    /// reparameterization.
    pub fn elbo_loss(
        &self,
        s: &State,
        a: &Action,
        s_next: &State,
        rng: &mut PailRng,
    ) -> Result<f64> {
        let (mu, logvar) = self.encode(s, a)?; // validates dimensions
        let _ = (mu, logvar);
        let mut row = Vec::with_capacity(self.cfg.d_s + self.cfg.k);
        row.extend_from_slice(&s.0);
        row.extend_from_slice(&a.0);
        let x = Matrix::row_vector(&row);
        let target = Matrix::row_vector(&s_next.0);
        let eps = Matrix::from_vec(
            1,
            self.cfg.d_z,
            (0..self.cfg.d_z)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect(),
        );
        let mut tape = Tape::new();
        let (loss, _, _) = self.elbo_on_tape(&mut tape, None, &x, &target, &eps);
        Ok(tape.value(loss).data[0])
    }

    /// Closed-form KL for given posterior moments; exposed for tests and
    /// diagnostics.
    pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> f64 {
        0.5 * mu
            .iter()
            .zip(logvar)
            .map(|(&m, &lv)| m * m + lv.exp() - lv - 1.0)
            .sum::<f64>()
    }

    /// Validation reconstruction MSE with the posterior mean as latent.
    pub fn reconstruction_mse(&self, x: &Matrix, target: &Matrix) -> f64 {
        let enc_out = self.encoder.eval(x);
        let mut mu = Matrix::zeros(x.rows, self.cfg.d_z);
        for r in 0..x.rows {
            mu.row_mut(r)
                .copy_from_slice(&enc_out.row(r)[..self.cfg.d_z]);
        }
        let pred = self.decode_rows(x, &mu);
        let mut err = 0.0;
        for i in 0..pred.data.len() {
            let d = pred.data[i] - target.data[i];
            err += d * d;
        }
        err / pred.data.len() as f64
    }

    /// Gradient-descent pretraining until the validation criterion is met.
    /// Freezes the simulator on success; errors with the best MSE seen when
    /// the criterion stays out of reach.
    pub fn pretrain(&mut self, transitions: &TransitionSet, seed: u64) -> Result<PretrainReport> {
        if self.frozen {
            return Err(Error::SimulatorFrozen);
        }
        if transitions.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut rng = rng_from_seed(seed);
        let n = transitions.len();
        let mut indices: Vec<usize> = (0..n).collect();
        indices.shuffle(&mut rng);
        let n_val = ((n as f64 * self.cfg.val_fraction).round() as usize).clamp(1, n - 1);
        let (val_idx, train_idx) = indices.split_at(n_val);
        let (val_x, val_y) = transitions.rows(val_idx);
        let mut train_idx: Vec<usize> = train_idx.to_vec();

        let mut adam = Adam::new(self.cfg.lr);
        let mut best = f64::INFINITY;
        let mut since_best = 0usize;
        let mut epochs_run;
        for epoch in 0..self.cfg.max_epochs {
            epochs_run = epoch + 1;
            train_idx.shuffle(&mut rng);
            let batches = train_idx
                .chunks(self.cfg.batch_size)
                .take(self.cfg.max_batches_per_epoch);
            for chunk in batches {
                let (x, y) = transitions.rows(chunk);
                let eps = Matrix::from_vec(
                    x.rows,
                    self.cfg.d_z,
                    (0..x.rows * self.cfg.d_z)
                        .map(|_| rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                );
                let mut tape = Tape::new();
                let mut pv = ParamVars::new();
                let (loss, _, _) = self.elbo_on_tape(&mut tape, Some(&mut pv), &x, &y, &eps);
                let grads = tape.backward(loss);
                let grads = pv.grads(&grads);
                adam.step(self, &grads);
            }
            let val = self.reconstruction_mse(&val_x, &val_y);
            if val < best {
                best = val;
                since_best = 0;
            } else {
                since_best += 1;
            }
            if val <= self.cfg.criterion {
                self.frozen = true;
                self.val_mse = Some(val);
                return Ok(PretrainReport {
                    epochs: epochs_run,
                    val_mse: val,
                });
            }
            if since_best >= self.cfg.patience {
                break;
            }
        }
        Err(Error::CriterionUnreachable { best_mse: best })
    }

    /// Predict one step with the latent drawn from the prior N(0, I).
    pub fn simulate_step(&self, s: &State, a: &Action, rng: &mut PailRng) -> Result<State> {
        if !self.frozen {
            return Err(Error::SimulatorNotFrozen);
        }
        Ok(self.transition(s, a, rng)?.next_state_pred)
    }

    /// Full latent transition (moments, sampled prior z, prediction).
    pub fn transition(&self, s: &State, a: &Action, rng: &mut PailRng) -> Result<LatentTransition> {
        let (mu_z, log_var_z) = self.encode(s, a)?;
        let z_sample: Vec<f64> = (0..self.cfg.d_z)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut row = Vec::with_capacity(self.cfg.d_s + self.cfg.k);
        row.extend_from_slice(&s.0);
        row.extend_from_slice(&a.0);
        let x = Matrix::row_vector(&row);
        let z = Matrix::row_vector(&z_sample);
        let pred = self.decode_rows(&x, &z);
        Ok(LatentTransition {
            mu_z,
            log_var_z,
            z_sample,
            next_state_pred: State(pred.row(0).to_vec()),
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PretrainReport {
    pub epochs: usize,
    pub val_mse: f64,
}

impl Network for Simulator {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        self.encoder.visit(f);
        self.decoder.visit(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        assert!(!self.frozen, "frozen simulator parameters are immutable");
        self.encoder.visit_mut(f);
        self.decoder.visit_mut(f);
    }
}
