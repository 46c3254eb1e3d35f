//! Shared neural-network plumbing: named parameters, affine layers, MLPs,
//! the Adam optimizer, and a finite-difference gradient checker.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::tape::{Gradients, Tape, Var};

/// Anything with named, visitable parameter tensors. Names are stable and
/// unique within a network; they key optimizer state and checkpoints.
pub trait Network {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Matrix));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix));
}

/// Clone all parameters into a name-keyed map.
pub fn params_map(net: &dyn Network) -> BTreeMap<String, Matrix> {
    let mut out = BTreeMap::new();
    net.visit_params(&mut |name, m| {
        out.insert(name.to_string(), m.clone());
    });
    out
}

/// Overwrite parameters from a name-keyed map; missing or extra names are
/// reported by the caller via the returned lists.
pub fn load_params(net: &mut dyn Network, map: &BTreeMap<String, Matrix>) -> Vec<String> {
    let mut missing = Vec::new();
    net.visit_params_mut(&mut |name, m| match map.get(name) {
        Some(src) if src.rows == m.rows && src.cols == m.cols => *m = src.clone(),
        _ => missing.push(name.to_string()),
    });
    missing
}

pub fn param_count(net: &dyn Network) -> usize {
    let mut n = 0;
    net.visit_params(&mut |_, m| n += m.data.len());
    n
}

/// Order-sensitive FNV-1a hash over parameter names and bit patterns; used
/// to assert that frozen networks stay untouched.
pub fn fingerprint(net: &dyn Network) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    let mut mix = |byte: u8| {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(0x1000_0000_01b3);
    };
    net.visit_params(&mut |name, m| {
        for b in name.bytes() {
            mix(b);
        }
        for v in &m.data {
            for b in v.to_bits().to_le_bytes() {
                mix(b);
            }
        }
    });
    hash
}

/// Binds parameter tensors into a tape, recording `name -> Var` so that
/// gradients can be collected by name after the backward pass. Binding the
/// same name twice returns the same node, so reuse accumulates gradients.
#[derive(Default)]
pub struct ParamVars {
    map: BTreeMap<String, (Var, usize, usize)>,
}

impl ParamVars {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, tape: &mut Tape, name: &str, value: &Matrix) -> Var {
        if let Some(&(var, _, _)) = self.map.get(name) {
            return var;
        }
        let var = tape.leaf(value.clone());
        self.map
            .insert(name.to_string(), (var, value.rows, value.cols));
        var
    }

    /// Collect gradients for every bound parameter (zeros when unused).
    pub fn grads(&self, grads: &Gradients) -> BTreeMap<String, Matrix> {
        self.map
            .iter()
            .map(|(name, &(var, rows, cols))| {
                (name.clone(), grads.get_or_zero(var, rows, cols))
            })
            .collect()
    }
}

/// Affine layer `y = x·W (+ b)` with Xavier-initialized weights.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub name: String,
    pub w: Matrix,
    pub b: Option<Matrix>,
}

impl Linear {
    pub fn new(name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Linear {
            name: name.into(),
            w: Matrix::xavier(fan_in, fan_out, rng),
            b: Some(Matrix::zeros(1, fan_out)),
        }
    }

    pub fn new_no_bias(
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Linear {
            name: name.into(),
            w: Matrix::xavier(fan_in, fan_out, rng),
            b: None,
        }
    }

    pub fn forward(&self, tape: &mut Tape, pv: &mut ParamVars, x: Var) -> Var {
        let w = pv.bind(tape, &format!("{}.w", self.name), &self.w);
        let y = tape.matmul(x, w);
        match &self.b {
            Some(b) => {
                let bv = pv.bind(tape, &format!("{}.b", self.name), b);
                tape.add_row(y, bv)
            }
            None => y,
        }
    }

    /// Forward with parameters inserted as constants (no gradient tracking).
    pub fn forward_const(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.leaf(self.w.clone());
        let y = tape.matmul(x, w);
        match &self.b {
            Some(b) => {
                let bv = tape.leaf(b.clone());
                tape.add_row(y, bv)
            }
            None => y,
        }
    }

    /// Plain evaluation outside any tape.
    pub fn eval(&self, x: &Matrix) -> Matrix {
        let mut y = x.matmul(&self.w);
        if let Some(b) = &self.b {
            for r in 0..y.rows {
                for (c, v) in y.row_mut(r).iter_mut().enumerate() {
                    *v += b.data[c];
                }
            }
        }
        y
    }

    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        f(&format!("{}.w", self.name), &self.w);
        if let Some(b) = &self.b {
            f(&format!("{}.b", self.name), b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f(&format!("{}.w", self.name), &mut self.w);
        if let Some(b) = &mut self.b {
            f(&format!("{}.b", self.name), b);
        }
    }
}

/// Feed-forward stack with tanh activations between layers and a linear
/// output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(name: &str, dims: &[usize], rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "mlp needs input and output dims");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, tape: &mut Tape, pv: &mut ParamVars, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, pv, h);
            if i + 1 < self.layers.len() {
                h = tape.tanh(h);
            }
        }
        h
    }

    pub fn forward_const(&self, tape: &mut Tape, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward_const(tape, h);
            if i + 1 < self.layers.len() {
                h = tape.tanh(h);
            }
        }
        h
    }

    pub fn eval(&self, x: &Matrix) -> Matrix {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.eval(&h);
            if i + 1 < self.layers.len() {
                h = h.map(f64::tanh);
            }
        }
        h
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        for layer in &self.layers {
            layer.visit(f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        for layer in &mut self.layers {
            layer.visit_mut(f);
        }
    }
}

impl Network for Mlp {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        self.visit(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.visit_mut(f);
    }
}

/// Adam with the usual defaults; moment state is keyed by parameter name so
/// it serializes alongside checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: BTreeMap<String, Matrix>,
    v: BTreeMap<String, Matrix>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, net: &mut dyn Network, grads: &BTreeMap<String, Matrix>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        net.visit_params_mut(&mut |name, param| {
            let Some(g) = grads.get(name) else { return };
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Matrix::zeros(param.rows, param.cols));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Matrix::zeros(param.rows, param.cols));
            for i in 0..param.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                param.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        });
    }
}

/// Result of a finite-difference sweep.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compare analytic gradients against central finite differences at
/// `points_per_tensor` random entries of every parameter tensor.
///
/// `loss` must be a deterministic pure function of the network parameters
/// (fix all inputs and noise outside). `analytic` holds the gradients at the
/// unperturbed point.
pub fn check_gradients<N: Network>(
    net: &mut N,
    analytic: &BTreeMap<String, Matrix>,
    loss: impl Fn(&N) -> f64,
    points_per_tensor: usize,
    step: f64,
    rng: &mut impl Rng,
) -> GradCheckReport {
    let mut names: Vec<(String, usize)> = Vec::new();
    net.visit_params(&mut |name, m| names.push((name.to_string(), m.data.len())));

    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0;
    for (name, numel) in names {
        let points = points_per_tensor.min(numel);
        let mut indices: Vec<usize> = (0..numel).collect();
        for p in 0..points {
            let j = rng.gen_range(p..numel);
            indices.swap(p, j);
        }
        for &idx in &indices[..points] {
            let set = |net: &mut N, delta: f64| {
                net.visit_params_mut(&mut |n, m| {
                    if n == name {
                        m.data[idx] += delta;
                    }
                });
            };
            set(net, step);
            let plus = loss(net);
            set(net, -2.0 * step);
            let minus = loss(net);
            set(net, step);
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic
                .get(&name)
                .map(|g| g.data[idx])
                .unwrap_or(0.0);
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            let rel = (a - numeric).abs() / denom;
            if rel > max_rel_err {
                max_rel_err = rel;
            }
            checked += 1;
        }
    }
    GradCheckReport {
        max_rel_err,
        checked,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::tape::Tape;

    #[test]
    fn mlp_gradcheck_passes() {
        let mut rng = rng_from_seed(3);
        let mut mlp = Mlp::new("net", &[4, 8, 3], &mut rng);
        let x = Matrix::xavier(5, 4, &mut rng);
        let target = Matrix::xavier(5, 3, &mut rng);

        let loss = |net: &Mlp| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let tv = tape.leaf(target.clone());
            let y = net.forward_const(&mut tape, xv);
            let d = tape.sub(y, tv);
            let sq = tape.square(d);
            let out = tape.mean(sq);
            tape.value(out).data[0]
        };

        let mut tape = Tape::new();
        let mut pv = ParamVars::new();
        let xv = tape.leaf(x.clone());
        let tv = tape.leaf(target.clone());
        let y = mlp.forward(&mut tape, &mut pv, xv);
        let d = tape.sub(y, tv);
        let sq = tape.square(d);
        let out = tape.mean(sq);
        let grads = tape.backward(out);
        let analytic = pv.grads(&grads);

        let report = check_gradients(&mut mlp, &analytic, loss, 6, 1e-5, &mut rng);
        assert!(
            report.max_rel_err <= 1e-4,
            "max rel err {}",
            report.max_rel_err
        );
        assert!(report.checked > 0);
    }

    #[test]
    fn adam_zero_grad_leaves_params_unchanged() {
        let mut rng = rng_from_seed(4);
        let mut mlp = Mlp::new("net", &[2, 2], &mut rng);
        let before = params_map(&mlp);
        let zeros: BTreeMap<String, Matrix> = before
            .iter()
            .map(|(k, v)| (k.clone(), Matrix::zeros(v.rows, v.cols)))
            .collect();
        let mut adam = Adam::new(1e-2);
        adam.step(&mut mlp, &zeros);
        adam.step(&mut mlp, &zeros);
        assert_eq!(params_map(&mlp), before);
    }

    #[test]
    fn adam_two_small_steps_differ_from_one_big_step() {
        let mut rng = rng_from_seed(5);
        let make = || {
            let mut r = rng_from_seed(5);
            Mlp::new("net", &[2, 1], &mut r)
        };
        let x = Matrix::xavier(3, 2, &mut rng);
        let grad_of = |net: &Mlp| {
            let mut tape = Tape::new();
            let mut pv = ParamVars::new();
            let xv = tape.leaf(x.clone());
            let y = net.forward(&mut tape, &mut pv, xv);
            let sq = tape.square(y);
            let out = tape.mean(sq);
            let grads = tape.backward(out);
            pv.grads(&grads)
        };
        let mut a = make();
        let mut opt_a = Adam::new(1e-2);
        let g = grad_of(&a);
        opt_a.step(&mut a, &g);
        let g = grad_of(&a);
        opt_a.step(&mut a, &g);

        let mut b = make();
        let mut opt_b = Adam::new(2e-2);
        let g = grad_of(&b);
        opt_b.step(&mut b, &g);

        assert_ne!(params_map(&a), params_map(&b));
    }

    #[test]
    fn fingerprint_tracks_any_bit_change() {
        let mut rng = rng_from_seed(6);
        let mut mlp = Mlp::new("net", &[3, 3], &mut rng);
        let before = fingerprint(&mlp);
        assert_eq!(before, fingerprint(&mlp));
        let v = &mut mlp.layers[0].w.data[0];
        *v = f64::from_bits(v.to_bits() ^ 1); // flip the lowest mantissa bit
        assert_ne!(before, fingerprint(&mlp));
    }

    #[test]
    fn shared_binding_accumulates_gradients() {
        // Use the same layer twice in one graph; its gradient must be the
        // sum of both paths.
        let mut rng = rng_from_seed(7);
        let layer = Linear::new("shared", 2, 2, &mut rng);
        let x = Matrix::xavier(1, 2, &mut rng);

        let mut tape = Tape::new();
        let mut pv = ParamVars::new();
        let xv = tape.leaf(x.clone());
        let once = layer.forward(&mut tape, &mut pv, xv);
        let twice = layer.forward(&mut tape, &mut pv, once);
        let out = tape.sum(twice);
        let grads = tape.backward(out);
        let analytic = pv.grads(&grads);

        struct One(Linear);
        impl Network for One {
            fn visit_params(&self, f: &mut dyn FnMut(&str, &Matrix)) {
                self.0.visit(f);
            }
            fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
                self.0.visit_mut(f);
            }
        }
        let mut net = One(layer);
        let loss = |net: &One| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let once = net.0.forward_const(&mut tape, xv);
            let twice = net.0.forward_const(&mut tape, once);
            let out = tape.sum(twice);
            tape.value(out).data[0]
        };
        let report = check_gradients(&mut net, &analytic, loss, 4, 1e-5, &mut rng);
        assert!(report.max_rel_err <= 1e-6, "rel err {}", report.max_rel_err);
    }
}
