//! Sliding-window attention policy: a self-attention encoder over the
//! history window plus a cross-attention decoder conditioned on the current
//! state, ending in a diagonal-Gaussian action head.
//!
//! The policy's distribution lives in "raw" (pre-softplus) space; emitted
//! actions are `softplus(raw)`, which keeps every component non-negative.
//! Log-density and entropy are computed in raw space.

use std::f64::consts::PI;
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::matrix::{softplus, Matrix};
use crate::nn::{Linear, Network, ParamVars};
use crate::rng::PailRng;
use crate::tape::{AttnMask, Tape, Var};
use crate::trajectory::{Action, HistoryWindow, State, Step};
use crate::Result;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 4.0;

/// Shape of the policy network.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub d_s: usize,
    pub k: usize,
    /// History window length l.
    pub lookback: usize,
    /// Model width d.
    pub d_model: usize,
    /// Attention heads h; must divide d_model.
    pub heads: usize,
    /// Encoder layers L.
    pub layers: usize,
    /// Feed-forward hidden width.
    pub d_ff: usize,
    /// Deterministic head: emit softplus(mean) without sampling.
    pub deterministic: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            d_s: 16,
            k: 5,
            lookback: 4,
            d_model: 64,
            heads: 4,
            layers: 2,
            d_ff: 128,
            deterministic: false,
        }
    }
}

/// Standard sinusoidal positional-encoding table:
/// `entry(pos, 2i) = sin(pos / 10000^(2i/d))`, `entry(pos, 2i+1) = cos(·)`.
pub fn positional_encode(seq_len: usize, d: usize) -> Matrix {
    let mut out = Matrix::zeros(seq_len, d);
    for pos in 0..seq_len {
        for i in 0..d.div_ceil(2) {
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let angle = pos as f64 * rate;
            out.set(pos, 2 * i, angle.sin());
            if 2 * i + 1 < d {
                out.set(pos, 2 * i + 1, angle.cos());
            }
        }
    }
    out
}

/// Scaled dot-product attention `softmax(QKᵀ/√d_k)·V` with masked logits
/// treated as −∞. Errors if any query row has no unmasked key.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, mask: &Rc<AttnMask>) -> Result<Var> {
    let d_k = tape.value(q).cols as f64;
    let scores = tape.matmul_nt(q, k);
    let scaled = tape.scale(scores, 1.0 / d_k.sqrt());
    let probs = tape.masked_softmax(scaled, mask)?;
    Ok(tape.matmul(probs, v))
}

/// Parameter-sharing mode for one forward pass.
pub enum Bind<'a> {
    /// Track gradients into the network parameters.
    Params(&'a mut ParamVars),
    /// Insert parameters as constants (inference or frozen use).
    Const,
}

impl Bind<'_> {
    fn linear(&mut self, tape: &mut Tape, layer: &Linear, x: Var) -> Var {
        match self {
            Bind::Params(pv) => layer.forward(tape, pv, x),
            Bind::Const => layer.forward_const(tape, x),
        }
    }

    fn raw(&mut self, tape: &mut Tape, name: &str, value: &Matrix) -> Var {
        match self {
            Bind::Params(pv) => pv.bind(tape, name, value),
            Bind::Const => tape.leaf(value.clone()),
        }
    }
}

/// One post-norm encoder layer: multi-head self-attention and a
/// position-wise feed-forward block, each wrapped in residual + layer norm.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderLayer {
    name: String,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
}

impl EncoderLayer {
    pub(crate) fn new(name: String, d: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        EncoderLayer {
            wq: Linear::new_no_bias(format!("{name}.wq"), d, d, rng),
            wk: Linear::new_no_bias(format!("{name}.wk"), d, d, rng),
            wv: Linear::new_no_bias(format!("{name}.wv"), d, d, rng),
            wo: Linear::new_no_bias(format!("{name}.wo"), d, d, rng),
            ffn1: Linear::new(format!("{name}.ffn1"), d, d_ff, rng),
            ffn2: Linear::new(format!("{name}.ffn2"), d_ff, d, rng),
            ln1_gain: Matrix::filled(1, d, 1.0),
            ln1_bias: Matrix::zeros(1, d),
            ln2_gain: Matrix::filled(1, d, 1.0),
            ln2_bias: Matrix::zeros(1, d),
            name,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        bind: &mut Bind,
        z: Var,
        heads: usize,
        mask: &Rc<AttnMask>,
    ) -> Result<Var> {
        let q = bind.linear(tape, &self.wq, z);
        let k = bind.linear(tape, &self.wk, z);
        let v = bind.linear(tape, &self.wv, z);
        let mha = multi_head(tape, q, k, v, heads, mask)?;
        let proj = bind.linear(tape, &self.wo, mha);
        let res = tape.add(z, proj);
        let g1 = bind.raw(tape, &format!("{}.ln1.gain", self.name), &self.ln1_gain);
        let b1 = bind.raw(tape, &format!("{}.ln1.bias", self.name), &self.ln1_bias);
        let z = tape.layer_norm(res, g1, b1, 1e-5);

        let h = bind.linear(tape, &self.ffn1, z);
        let h = tape.tanh(h);
        let h = bind.linear(tape, &self.ffn2, h);
        let res = tape.add(z, h);
        let g2 = bind.raw(tape, &format!("{}.ln2.gain", self.name), &self.ln2_gain);
        let b2 = bind.raw(tape, &format!("{}.ln2.bias", self.name), &self.ln2_bias);
        Ok(tape.layer_norm(res, g2, b2, 1e-5))
    }

    pub(crate) fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        for l in [&self.wq, &self.wk, &self.wv, &self.wo, &self.ffn1, &self.ffn2] {
            f(&format!("{}.w", l.name), &l.w);
            if let Some(b) = &l.b {
                f(&format!("{}.b", l.name), b);
            }
        }
        f(&format!("{}.ln1.gain", self.name), &self.ln1_gain);
        f(&format!("{}.ln1.bias", self.name), &self.ln1_bias);
        f(&format!("{}.ln2.gain", self.name), &self.ln2_gain);
        f(&format!("{}.ln2.bias", self.name), &self.ln2_bias);
    }

    pub(crate) fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        for l in [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ffn1,
            &mut self.ffn2,
        ] {
            f(&format!("{}.w", l.name), &mut l.w);
            if let Some(b) = &mut l.b {
                f(&format!("{}.b", l.name), b);
            }
        }
        f(&format!("{}.ln1.gain", self.name), &mut self.ln1_gain);
        f(&format!("{}.ln1.bias", self.name), &mut self.ln1_bias);
        f(&format!("{}.ln2.gain", self.name), &mut self.ln2_gain);
        f(&format!("{}.ln2.bias", self.name), &mut self.ln2_bias);
    }
}

/// Split into `heads` column groups, attend per head, concatenate.
fn multi_head(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: &Rc<AttnMask>,
) -> Result<Var> {
    let d = tape.value(q).cols;
    assert_eq!(d % heads, 0, "d_model must be divisible by heads");
    let d_k = d / heads;
    let mut parts = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * d_k, d_k);
        let kh = tape.slice_cols(k, h * d_k, d_k);
        let vh = tape.slice_cols(v, h * d_k, d_k);
        parts.push(attention(tape, qh, kh, vh, mask)?);
    }
    Ok(tape.concat_cols(&parts))
}

/// Diagonal Gaussian over the raw action space.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianActionDistribution {
    pub mean: Vec<f64>,
    pub diag_var: Vec<f64>,
}

impl GaussianActionDistribution {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Reparameterized draw: returns (raw, noise) with `raw = μ + σ ⊙ ε`.
    pub fn sample_raw(&self, rng: &mut PailRng) -> (Vec<f64>, Vec<f64>) {
        let eps: Vec<f64> = (0..self.dim())
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let raw = self
            .mean
            .iter()
            .zip(&self.diag_var)
            .zip(&eps)
            .map(|((&m, &v), &e)| m + v.sqrt() * e)
            .collect();
        (raw, eps)
    }

    /// Gaussian log-density of a raw-space point.
    pub fn log_prob(&self, raw: &[f64]) -> f64 {
        assert_eq!(raw.len(), self.dim());
        -0.5 * self
            .mean
            .iter()
            .zip(&self.diag_var)
            .zip(raw)
            .map(|((&m, &v), &x)| (2.0 * PI * v).ln() + (x - m) * (x - m) / v)
            .sum::<f64>()
    }

    /// Closed-form entropy `½ Σ ln(2πe σ²)` in raw space.
    pub fn entropy(&self) -> f64 {
        0.5 * self
            .diag_var
            .iter()
            .map(|&v| (2.0 * PI * std::f64::consts::E * v).ln())
            .sum::<f64>()
    }
}

/// Sample an emitted action: `softplus(μ + σ ⊙ ε)`.
pub fn sample_action(dist: &GaussianActionDistribution, rng: &mut PailRng) -> Action {
    let (raw, _) = dist.sample_raw(rng);
    Action(raw.iter().map(|&x| softplus(x)).collect())
}

/// Deterministic head: `softplus(μ)` without sampling.
pub fn deterministic_action(dist: &GaussianActionDistribution) -> Action {
    Action(dist.mean.iter().map(|&x| softplus(x)).collect())
}

/// Concatenated (state, action) features of one step.
pub fn step_features(step: &Step) -> Vec<f64> {
    let mut f = Vec::with_capacity(step.state.dim() + step.action.dim());
    f.extend_from_slice(&step.state.0);
    f.extend_from_slice(&step.action.0);
    f
}

/// Handles into a policy forward pass; values are read through the tape.
pub struct PolicyForward {
    /// B×K means.
    pub mu: Var,
    /// B×K clamped log-variances.
    pub logvar: Var,
    /// (B·l)×d embedded window entries (before positions are added).
    pub embedded: Var,
    /// (B·l)×d encoder output Z^L.
    pub encoded: Var,
}

/// The policy network.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolicyNetwork {
    pub cfg: PolicyConfig,
    pub embed: Linear,
    pub enc: Vec<EncoderLayer>,
    pub dec_wq: Linear,
    pub dec_wk: Linear,
    pub dec_wv: Linear,
    pub dec_wo: Linear,
    pub head: Linear,
}

impl PolicyNetwork {
    pub fn new(cfg: PolicyConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let enc = (0..cfg.layers)
            .map(|i| EncoderLayer::new(format!("enc.{i}"), d, cfg.d_ff, rng))
            .collect();
        PolicyNetwork {
            embed: Linear::new("embed", cfg.d_s + cfg.k, d, rng),
            enc,
            dec_wq: Linear::new_no_bias("dec.wq", cfg.d_s, d, rng),
            dec_wk: Linear::new_no_bias("dec.wk", d, d, rng),
            dec_wv: Linear::new_no_bias("dec.wv", d, d, rng),
            dec_wo: Linear::new_no_bias("dec.wo", d, d, rng),
            head: Linear::new("head", d, 2 * cfg.k, rng),
            cfg,
        }
    }

    /// Embed a window batch into one (B·l)×(d_s+K) feature matrix.
    fn window_matrix(&self, windows: &[&HistoryWindow]) -> Matrix {
        let l = self.cfg.lookback;
        let width = self.cfg.d_s + self.cfg.k;
        let mut m = Matrix::zeros(windows.len() * l, width);
        for (b, w) in windows.iter().enumerate() {
            assert_eq!(w.len(), l, "window length mismatch");
            for (i, step) in w.entries.iter().enumerate() {
                m.row_mut(b * l + i).copy_from_slice(&step_features(step));
            }
        }
        m
    }

    /// Batched forward pass over windows and their current states.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        bind: &mut Bind,
        windows: &[&HistoryWindow],
        states: &[&State],
    ) -> Result<PolicyForward> {
        assert_eq!(windows.len(), states.len());
        let batch = windows.len();
        let l = self.cfg.lookback;
        let d = self.cfg.d_model;

        let features = tape.leaf(self.window_matrix(windows));
        let embedded = bind.linear(tape, &self.embed, features);

        // positions repeat per block
        let pos_table = positional_encode(l, d);
        let mut pos = Matrix::zeros(batch * l, d);
        for b in 0..batch {
            for i in 0..l {
                pos.row_mut(b * l + i).copy_from_slice(pos_table.row(i));
            }
        }
        let pos = tape.leaf(pos);
        let mut z = tape.add(embedded, pos);

        let valid: Vec<Vec<bool>> = windows.iter().map(|w| w.mask.clone()).collect();
        let self_mask = Rc::new(AttnMask::block_self(&valid));
        for layer in &self.enc {
            z = layer.forward(tape, bind, z, self.cfg.heads, &self_mask)?;
        }
        let encoded = z;

        // cross-attention decoder: one query row per sample, from the state
        let mut s = Matrix::zeros(batch, self.cfg.d_s);
        for (b, st) in states.iter().enumerate() {
            s.row_mut(b).copy_from_slice(&st.0);
        }
        let s = tape.leaf(s);
        let q = bind.linear(tape, &self.dec_wq, s);
        let k = bind.linear(tape, &self.dec_wk, encoded);
        let v = bind.linear(tape, &self.dec_wv, encoded);
        let cross_mask = Rc::new(AttnMask::block_cross(&valid));
        let mha = multi_head(tape, q, k, v, self.cfg.heads, &cross_mask)?;
        let z_prime = bind.linear(tape, &self.dec_wo, mha);

        let out = bind.linear(tape, &self.head, z_prime);
        let mu = tape.slice_cols(out, 0, self.cfg.k);
        let logvar_raw = tape.slice_cols(out, self.cfg.k, self.cfg.k);
        let logvar = tape.clamp(logvar_raw, LOGVAR_MIN, LOGVAR_MAX);

        Ok(PolicyForward {
            mu,
            logvar,
            embedded,
            encoded,
        })
    }

    /// Encoder output Z^L for one window (l×d).
    pub fn encode_history(&self, window: &HistoryWindow) -> Result<Matrix> {
        let state = State::zeros(self.cfg.d_s);
        let mut tape = Tape::new();
        let fwd = self.forward_batch(&mut tape, &mut Bind::Const, &[window], &[&state])?;
        Ok(tape.value(fwd.encoded).clone())
    }

    /// Action distributions for a batch, outside any tape.
    pub fn distributions(
        &self,
        windows: &[&HistoryWindow],
        states: &[&State],
    ) -> Result<Vec<GaussianActionDistribution>> {
        let mut tape = Tape::new();
        let fwd = self.forward_batch(&mut tape, &mut Bind::Const, windows, states)?;
        let mu = tape.value(fwd.mu);
        let logvar = tape.value(fwd.logvar);
        Ok((0..windows.len())
            .map(|b| GaussianActionDistribution {
                mean: mu.row(b).to_vec(),
                diag_var: logvar.row(b).iter().map(|&lv| lv.exp()).collect(),
            })
            .collect())
    }

    /// Single-sample convenience wrapper.
    pub fn action_distribution(
        &self,
        window: &HistoryWindow,
        state: &State,
    ) -> Result<GaussianActionDistribution> {
        Ok(self.distributions(&[window], &[state])?.remove(0))
    }
}

impl Network for PolicyNetwork {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        f("embed.w", &self.embed.w);
        if let Some(b) = &self.embed.b {
            f("embed.b", b);
        }
        for layer in &self.enc {
            layer.visit(f);
        }
        for l in [&self.dec_wq, &self.dec_wk, &self.dec_wv, &self.dec_wo] {
            f(&format!("{}.w", l.name), &l.w);
        }
        f("head.w", &self.head.w);
        if let Some(b) = &self.head.b {
            f("head.b", b);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f("embed.w", &mut self.embed.w);
        if let Some(b) = &mut self.embed.b {
            f("embed.b", b);
        }
        for layer in &mut self.enc {
            layer.visit_mut(f);
        }
        for l in [
            &mut self.dec_wq,
            &mut self.dec_wk,
            &mut self.dec_wv,
            &mut self.dec_wo,
        ] {
            f(&format!("{}.w", l.name), &mut l.w);
        }
        f("head.w", &mut self.head.w);
        if let Some(b) = &mut self.head.b {
            f("head.b", b);
        }
    }
}
