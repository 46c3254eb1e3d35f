//! History-aware binary classifier separating expert tuples from generated
//! tuples, and the per-step reward signal read off its output.
//!
//! The history enters as a mean-pooled embedding of the window's valid
//! steps, using the policy's embedding weights as constants. The reward is
//! `log D` by default: expert-like tuples earn rewards near zero, clearly
//! non-expert ones earn large negative rewards. The sign-flipped variant
//! `-log D` is available behind a config switch for comparison.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::nn::{Linear, Mlp, Network, ParamVars};
use crate::policy::step_features;
use crate::tape::{Tape, Var};
use crate::trajectory::HistoryWindow;
use crate::{Error, Result};

pub const CLIP_LO: f64 = 1e-6;
pub const CLIP_HI: f64 = 1.0 - 1e-6;

/// Which function of the discriminator output is used as the reward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSign {
    /// `r = log D`: higher confidence of expert-likeness, higher reward.
    LogD,
    /// `r = -log D`, the sign-flipped variant.
    NegLogD,
}

impl Default for RewardSign {
    fn default() -> Self {
        RewardSign::LogD
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    /// Width of the pooled history embedding (the policy's d_model).
    pub d_model: usize,
    pub d_s: usize,
    pub k: usize,
    pub hidden: usize,
    /// Zero out the pooled history input (state-action-only variant).
    pub history_free: bool,
    pub reward_sign: RewardSign,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            d_model: 64,
            d_s: 16,
            k: 5,
            hidden: 128,
            history_free: false,
            reward_sign: RewardSign::LogD,
        }
    }
}

/// Source tag for a tuple batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Expert,
    Generated,
}

/// A batch of (pooled history, state, action) rows with a common source.
#[derive(Clone, Debug)]
pub struct TupleBatch {
    pub pooled_history: Matrix,
    pub states: Matrix,
    pub actions: Matrix,
    pub source: Source,
}

impl TupleBatch {
    pub fn len(&self) -> usize {
        self.states.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Mean of the embedded valid window entries; zero vector for a fully
/// padded window. The embedding layer is the policy's, applied here as a
/// fixed feature map.
pub fn pool_history(window: &HistoryWindow, embed: &Linear) -> Vec<f64> {
    let d = embed.w.cols;
    let mut pooled = vec![0.0; d];
    let mut count = 0usize;
    for (step, &valid) in window.entries.iter().zip(&window.mask) {
        if !valid {
            continue;
        }
        let row = embed.eval(&Matrix::row_vector(&step_features(step)));
        for (p, v) in pooled.iter_mut().zip(row.row(0)) {
            *p += v;
        }
        count += 1;
    }
    if count > 0 {
        for p in &mut pooled {
            *p /= count as f64;
        }
    }
    pooled
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    pub mlp: Mlp,
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig, rng: &mut impl Rng) -> Self {
        let input = cfg.d_model + cfg.d_s + cfg.k;
        Discriminator {
            mlp: Mlp::new("disc", &[input, cfg.hidden, cfg.hidden, 1], rng),
            cfg,
        }
    }

    /// Assemble one input row, honoring the history-free variant.
    fn input_row(&self, pooled: &[f64], state: &[f64], action: &[f64]) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.cfg.d_model + self.cfg.d_s + self.cfg.k);
        if self.cfg.history_free {
            row.extend(std::iter::repeat(0.0).take(self.cfg.d_model));
        } else {
            row.extend_from_slice(pooled);
        }
        row.extend_from_slice(state);
        row.extend_from_slice(action);
        row
    }

    /// Stack a batch into one input matrix.
    pub fn input_matrix(&self, batch: &TupleBatch) -> Matrix {
        let mut rows = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            rows.push(self.input_row(
                batch.pooled_history.row(i),
                batch.states.row(i),
                batch.actions.row(i),
            ));
        }
        Matrix::from_rows(&rows)
    }

    /// Probability that one tuple is expert-like, clipped into
    /// `[1e-6, 1-1e-6]`.
    pub fn forward(&self, pooled: &[f64], state: &[f64], action: &[f64]) -> f64 {
        let input = Matrix::row_vector(&self.input_row(pooled, state, action));
        let logit = self.mlp.eval(&input).data[0];
        crate::matrix::sigmoid(logit).clamp(CLIP_LO, CLIP_HI)
    }

    /// Batch probabilities outside any tape.
    pub fn probabilities(&self, batch: &TupleBatch) -> Vec<f64> {
        let out = self.mlp.eval(&self.input_matrix(batch));
        out.data
            .iter()
            .map(|&logit| crate::matrix::sigmoid(logit).clamp(CLIP_LO, CLIP_HI))
            .collect()
    }

    /// Clipped probabilities on a tape, tracking gradients into the
    /// discriminator parameters.
    fn probs_on_tape(&self, tape: &mut Tape, pv: &mut ParamVars, inputs: &Matrix) -> Var {
        let x = tape.leaf(inputs.clone());
        let logits = self.mlp.forward(tape, pv, x);
        let p = tape.sigmoid_op(logits);
        tape.clamp(p, CLIP_LO, CLIP_HI)
    }

    /// Binary cross-entropy objective (to minimize):
    /// `-mean_expert[log D] - mean_generated[log(1-D)]`.
    pub fn discriminator_loss(&self, expert: &TupleBatch, generated: &TupleBatch) -> Result<f64> {
        if expert.is_empty() || generated.is_empty() {
            return Err(Error::EmptyBatch);
        }
        Ok(loss_from_probs(
            &self.probabilities(expert),
            &self.probabilities(generated),
        ))
    }

    /// One Adam-ready gradient of the discriminator loss.
    pub fn loss_and_grads(
        &self,
        expert: &TupleBatch,
        generated: &TupleBatch,
    ) -> Result<(f64, std::collections::BTreeMap<String, Matrix>)> {
        if expert.is_empty() || generated.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut tape = Tape::new();
        let mut pv = ParamVars::new();
        let pe = self.probs_on_tape(&mut tape, &mut pv, &self.input_matrix(expert));
        let pg = self.probs_on_tape(&mut tape, &mut pv, &self.input_matrix(generated));
        let log_pe = tape.ln(pe);
        let mean_log_pe = tape.mean(log_pe);
        let one = tape.leaf(Matrix::filled(
            tape.value(pg).rows,
            tape.value(pg).cols,
            1.0,
        ));
        let one_minus = tape.sub(one, pg);
        let log_omp = tape.ln(one_minus);
        let mean_log_omp = tape.mean(log_omp);
        let total = tape.add(mean_log_pe, mean_log_omp);
        let loss = tape.neg(total);
        let grads = tape.backward(loss);
        Ok((tape.value(loss).data[0], pv.grads(&grads)))
    }

    /// The policy's adversarial objective `mean[log(1-D)]` over generated
    /// tuples; zero for an empty batch.
    pub fn generator_adv_loss(&self, generated: &TupleBatch) -> f64 {
        if generated.is_empty() {
            return 0.0;
        }
        self.probabilities(generated)
            .iter()
            .map(|&p| (1.0 - p).ln())
            .sum::<f64>()
            / generated.len() as f64
    }

    /// Adversarial generator loss on a tape, with the action rows supplied
    /// as a differentiable node and the discriminator as constants.
    /// `hs` holds the (pooled history ‖ state) columns.
    pub fn adv_loss_on_tape(&self, tape: &mut Tape, hs: &Matrix, actions: Var) -> Var {
        let mut hs = hs.clone();
        if self.cfg.history_free {
            for r in 0..hs.rows {
                for c in 0..self.cfg.d_model {
                    hs.set(r, c, 0.0);
                }
            }
        }
        let hs = tape.leaf(hs);
        let input = tape.concat_cols(&[hs, actions]);
        let logits = self.mlp.forward_const(tape, input);
        let p = tape.sigmoid_op(logits);
        let p = tape.clamp(p, CLIP_LO, CLIP_HI);
        let one = tape.leaf(Matrix::filled(tape.value(p).rows, 1, 1.0));
        let one_minus = tape.sub(one, p);
        let log_omp = tape.ln(one_minus);
        tape.mean(log_omp)
    }

    /// Per-tuple reward read off the discriminator.
    pub fn reward(&self, pooled: &[f64], state: &[f64], action: &[f64]) -> f64 {
        let d = self.forward(pooled, state, action);
        match self.cfg.reward_sign {
            RewardSign::LogD => d.ln(),
            RewardSign::NegLogD => -d.ln(),
        }
    }

    /// Classification accuracy against the conventional 0.5 threshold.
    pub fn accuracy(&self, expert: &TupleBatch, generated: &TupleBatch) -> f64 {
        let mut correct = 0usize;
        let mut total = 0usize;
        for &p in &self.probabilities(expert) {
            if p >= 0.5 {
                correct += 1;
            }
            total += 1;
        }
        for &p in &self.probabilities(generated) {
            if p < 0.5 {
                correct += 1;
            }
            total += 1;
        }
        if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        }
    }
}

/// The bare objective on probability arrays.
pub fn loss_from_probs(expert_p: &[f64], generated_p: &[f64]) -> f64 {
    let e: f64 = expert_p.iter().map(|&p| p.ln()).sum::<f64>() / expert_p.len() as f64;
    let g: f64 =
        generated_p.iter().map(|&p| (1.0 - p).ln()).sum::<f64>() / generated_p.len() as f64;
    -e - g
}

impl Network for Discriminator {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        self.mlp.visit(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.mlp.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check_gradients;
    use crate::rng::rng_from_seed;
    use crate::trajectory::{Action, State, Step};

    fn small_cfg() -> DiscriminatorConfig {
        DiscriminatorConfig {
            d_model: 6,
            d_s: 3,
            k: 2,
            hidden: 8,
            history_free: false,
            reward_sign: RewardSign::LogD,
        }
    }

    fn batch(n: usize, seed: u64, source: Source) -> TupleBatch {
        let mut rng = rng_from_seed(seed);
        TupleBatch {
            pooled_history: Matrix::xavier(n, 6, &mut rng),
            states: Matrix::xavier(n, 3, &mut rng),
            actions: Matrix::xavier(n, 2, &mut rng).map(f64::abs),
            source,
        }
    }

    #[test]
    fn zero_weights_give_exactly_half() {
        let mut rng = rng_from_seed(60);
        let mut d = Discriminator::new(small_cfg(), &mut rng);
        d.visit_params_mut(&mut |_, m| *m = Matrix::zeros(m.rows, m.cols));
        let p = d.forward(&[1.0; 6], &[2.0; 3], &[3.0; 2]);
        assert_eq!(p, 0.5);
    }

    #[test]
    fn saturated_logit_is_clipped() {
        let mut rng = rng_from_seed(61);
        let mut d = Discriminator::new(small_cfg(), &mut rng);
        d.mlp.layers.last_mut().unwrap().b = Some(Matrix::row_vector(&[1e6]));
        let p = d.forward(&[0.0; 6], &[0.0; 3], &[0.0; 2]);
        assert_eq!(p, CLIP_HI);
        d.mlp.layers.last_mut().unwrap().b = Some(Matrix::row_vector(&[-1e6]));
        let p = d.forward(&[0.0; 6], &[0.0; 3], &[0.0; 2]);
        assert_eq!(p, CLIP_LO);
    }

    #[test]
    fn discriminator_gradients_match_finite_differences() {
        let mut rng = rng_from_seed(62);
        let mut d = Discriminator::new(small_cfg(), &mut rng);
        let expert = batch(4, 1, Source::Expert);
        let generated = batch(5, 2, Source::Generated);
        let (_, analytic) = d.loss_and_grads(&expert, &generated).unwrap();
        let report = check_gradients(
            &mut d,
            &analytic,
            |d| d.discriminator_loss(&expert, &generated).unwrap(),
            5,
            1e-5,
            &mut rng,
        );
        assert!(
            report.max_rel_err <= 1e-4,
            "max rel err {}",
            report.max_rel_err
        );
    }

    #[test]
    fn indifferent_discriminator_loss_is_two_log_two() {
        let mut rng = rng_from_seed(63);
        let mut d = Discriminator::new(small_cfg(), &mut rng);
        d.visit_params_mut(&mut |_, m| *m = Matrix::zeros(m.rows, m.cols));
        let loss = d
            .discriminator_loss(&batch(6, 3, Source::Expert), &batch(6, 4, Source::Generated))
            .unwrap();
        assert!((loss - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((loss - 1.38629).abs() < 1e-5);
    }

    #[test]
    fn loss_fixtures_at_clip_bounds() {
        // perfect separation
        let perfect = loss_from_probs(&[CLIP_HI], &[CLIP_LO]);
        assert!((perfect - 2e-6).abs() < 1e-9, "perfect loss {perfect}");
        // swapped batches with a perfect discriminator
        let swapped = loss_from_probs(&[CLIP_LO], &[CLIP_HI]);
        assert!((swapped - (-2.0 * (1e-6f64).ln())).abs() < 1e-6);
        assert!((swapped - 27.631).abs() < 1e-3);
    }

    #[test]
    fn label_swap_symmetry_under_output_flip() {
        let mut rng = rng_from_seed(64);
        for _ in 0..50 {
            let a: Vec<f64> = (0..4).map(|_| rng.gen_range(0.01..0.99)).collect();
            let b: Vec<f64> = (0..7).map(|_| rng.gen_range(0.01..0.99)).collect();
            let lhs = loss_from_probs(&a, &b);
            let flipped_b: Vec<f64> = b.iter().map(|p| 1.0 - p).collect();
            let flipped_a: Vec<f64> = a.iter().map(|p| 1.0 - p).collect();
            let rhs = loss_from_probs(&flipped_b, &flipped_a);
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn generator_loss_fixtures() {
        let mut rng = rng_from_seed(65);
        let mut d = Discriminator::new(small_cfg(), &mut rng);
        d.visit_params_mut(&mut |_, m| *m = Matrix::zeros(m.rows, m.cols));
        let g = batch(5, 6, Source::Generated);
        let loss = d.generator_adv_loss(&g);
        assert!((loss - 0.5f64.ln()).abs() < 1e-12);
        assert!((loss + 0.69315).abs() < 1e-5);

        // empty batch -> 0 by convention
        let empty = TupleBatch {
            pooled_history: Matrix::zeros(0, 6),
            states: Matrix::zeros(0, 3),
            actions: Matrix::zeros(0, 2),
            source: Source::Generated,
        };
        assert_eq!(d.generator_adv_loss(&empty), 0.0);

        // a fooled discriminator (D -> 1) minimizes the generator loss
        d.mlp.layers.last_mut().unwrap().b = Some(Matrix::row_vector(&[1e6]));
        assert!((d.generator_adv_loss(&g) - CLIP_LO.ln()).abs() < 1e-9);
    }

    #[test]
    fn empty_batches_error_for_discriminator_loss() {
        let mut rng = rng_from_seed(66);
        let d = Discriminator::new(small_cfg(), &mut rng);
        let empty = TupleBatch {
            pooled_history: Matrix::zeros(0, 6),
            states: Matrix::zeros(0, 3),
            actions: Matrix::zeros(0, 2),
            source: Source::Expert,
        };
        let err = d
            .discriminator_loss(&empty, &batch(3, 7, Source::Generated))
            .unwrap_err();
        assert!(matches!(err, Error::EmptyBatch));
    }

    #[test]
    fn reward_fixtures_and_monotonicity() {
        let mut rng = rng_from_seed(67);
        let mut d = Discriminator::new(small_cfg(), &mut rng);

        // force specific outputs through the final bias
        let with_output = |d: &mut Discriminator, p: f64| {
            let logit = (p / (1.0 - p)).ln();
            for layer in &mut d.mlp.layers {
                layer.w = Matrix::zeros(layer.w.rows, layer.w.cols);
                if let Some(b) = &mut layer.b {
                    *b = Matrix::zeros(1, b.cols);
                }
            }
            d.mlp.layers.last_mut().unwrap().b = Some(Matrix::row_vector(&[logit]));
        };

        with_output(&mut d, 0.1);
        let r = d.reward(&[0.0; 6], &[0.0; 3], &[0.0; 2]);
        assert!((r - 0.1f64.ln()).abs() < 1e-9);
        assert!((r + 2.30259).abs() < 1e-5);

        with_output(&mut d, CLIP_HI);
        let near_zero = d.reward(&[0.0; 6], &[0.0; 3], &[0.0; 2]);
        assert!(near_zero < 0.0 && near_zero > -2e-6);

        // monotone increasing in D, always within the clip-induced bounds
        let mut last = f64::NEG_INFINITY;
        for &p in &[0.001, 0.05, 0.3, 0.7, 0.95, 0.999] {
            with_output(&mut d, p);
            let r = d.reward(&[0.0; 6], &[0.0; 3], &[0.0; 2]);
            assert!(r > last);
            assert!(r >= CLIP_LO.ln() && r <= CLIP_HI.ln());
            last = r;
        }

        // sign-flipped variant for comparison
        d.cfg.reward_sign = RewardSign::NegLogD;
        with_output(&mut d, 0.1);
        let r = d.reward(&[0.0; 6], &[0.0; 3], &[0.0; 2]);
        assert!((r - 2.302585).abs() < 1e-5);
    }

    #[test]
    fn pooling_fixtures() {
        let mut rng = rng_from_seed(68);
        let embed = Linear::new("embed", 5, 6, &mut rng);
        let step = |vals: [f64; 5], valid: bool| Step {
            state: State(vals[..3].to_vec()),
            action: Action(vals[3..].to_vec()),
            valid,
        };

        // single valid entry -> exactly its embedding
        let s = step([0.3, -0.1, 0.4, 0.2, 0.6], true);
        let w = HistoryWindow {
            entries: vec![step([9.0; 5], false), s.clone()],
            mask: vec![false, true],
        };
        let pooled = pool_history(&w, &embed);
        let expected = embed.eval(&Matrix::row_vector(&step_features(&s)));
        for (a, b) in pooled.iter().zip(expected.row(0)) {
            assert!((a - b).abs() < 1e-14);
        }

        // entries v and -v cancel when the embedding has no bias
        let embed_nb = Linear::new_no_bias("embed2", 5, 6, &mut rng);
        let v = step([0.5, 0.2, -0.3, 0.1, 0.7], true);
        let neg = step([-0.5, -0.2, 0.3, -0.1, -0.7], true);
        let w = HistoryWindow {
            entries: vec![v, neg],
            mask: vec![true, true],
        };
        let pooled = pool_history(&w, &embed_nb);
        assert!(pooled.iter().all(|&x| x.abs() < 1e-14));

        // fully masked -> zero vector
        let w = HistoryWindow {
            entries: vec![step([1.0; 5], false); 3],
            mask: vec![false; 3],
        };
        assert!(pool_history(&w, &embed).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn history_free_variant_ignores_history_entirely() {
        let mut rng = rng_from_seed(69);
        let mut cfg = small_cfg();
        cfg.history_free = true;
        let d = Discriminator::new(cfg, &mut rng);
        let s = [0.1, 0.2, 0.3];
        let a = [0.4, 0.5];
        let p1 = d.forward(&[1.0; 6], &s, &a);
        let p2 = d.forward(&[-5.0; 6], &s, &a);
        assert_eq!(p1, p2);

        // losses still run
        let expert = batch(3, 8, Source::Expert);
        let generated = batch(3, 9, Source::Generated);
        assert!(d.discriminator_loss(&expert, &generated).unwrap().is_finite());
        assert!(d.generator_adv_loss(&generated).is_finite());
    }

    #[test]
    fn forward_is_pure() {
        let mut rng = rng_from_seed(70);
        let d = Discriminator::new(small_cfg(), &mut rng);
        let p1 = d.forward(&[0.5; 6], &[0.1; 3], &[0.2; 2]);
        let p2 = d.forward(&[0.5; 6], &[0.1; 3], &[0.2; 2]);
        assert_eq!(p1, p2);
    }
}
