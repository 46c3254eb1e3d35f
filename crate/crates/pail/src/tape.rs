//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] is a Wengert list: every operation appends a node holding its
//! value and enough information to push gradients back to its parents.
//! Networks rebuild their graph on every forward pass; at this scale the
//! bookkeeping is cheap and it keeps parameter updates trivially correct.

use std::rc::Rc;

use crate::matrix::{sigmoid, softplus, Matrix};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Boolean attention mask: `allow[r * cols + c]` says whether row `r` of the
/// score matrix may attend to column `c`.
#[derive(Clone, Debug)]
pub struct AttnMask {
    pub rows: usize,
    pub cols: usize,
    pub allow: Vec<bool>,
}

impl AttnMask {
    pub fn all_allowed(rows: usize, cols: usize) -> Self {
        AttnMask {
            rows,
            cols,
            allow: vec![true; rows * cols],
        }
    }

    /// Block-diagonal mask for a batch of `blocks` windows of length `len`
    /// each: query row `b*len + i` may attend to key column `b*len + j`
    /// exactly when `valid[b][j]` holds.
    pub fn block_self(valid: &[Vec<bool>]) -> Self {
        let blocks = valid.len();
        let len = if blocks == 0 { 0 } else { valid[0].len() };
        let n = blocks * len;
        let mut allow = vec![false; n * n];
        for (b, v) in valid.iter().enumerate() {
            assert_eq!(v.len(), len, "ragged validity");
            for i in 0..len {
                for (j, &ok) in v.iter().enumerate() {
                    allow[(b * len + i) * n + b * len + j] = ok;
                }
            }
        }
        AttnMask {
            rows: n,
            cols: n,
            allow,
        }
    }

    /// Cross-attention mask: one query row per block, keys laid out in
    /// blocks of `len`.
    pub fn block_cross(valid: &[Vec<bool>]) -> Self {
        let blocks = valid.len();
        let len = if blocks == 0 { 0 } else { valid[0].len() };
        let cols = blocks * len;
        let mut allow = vec![false; blocks * cols];
        for (b, v) in valid.iter().enumerate() {
            for (j, &ok) in v.iter().enumerate() {
                allow[b * cols + b * len + j] = ok;
            }
        }
        AttnMask {
            rows: blocks,
            cols,
            allow,
        }
    }

    #[inline]
    pub fn allowed(&self, r: usize, c: usize) -> bool {
        self.allow[r * self.cols + c]
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `(n×d) + (1×d)` with the row broadcast over all rows.
    AddRow(usize, usize),
    Scale(usize, f64),
    Matmul(usize, usize),
    /// `a * bᵀ`.
    MatmulNT(usize, usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Softplus(usize),
    Square(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    Mean(usize),
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    MaskedSoftmax(usize, Rc<AttnMask>),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        eps: f64,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads[var.0].as_ref()
    }

    /// Gradient for `var`, or a zero matrix of the given shape when the node
    /// did not influence the loss.
    pub fn get_or_zero(&self, var: Var, rows: usize, cols: usize) -> Matrix {
        match self.grads[var.0] {
            Some(ref g) => g.clone(),
            None => Matrix::zeros(rows, cols),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Insert a value as a leaf. Leaves accumulate gradients; whether anyone
    /// reads them is up to the caller (parameters do, plain inputs do not).
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a.0, b.0))
    }

    /// Broadcast-add a 1×d row vector to every row of an n×d matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let m = self.value(a);
        let r = self.value(row);
        assert_eq!(r.rows, 1, "add_row expects a row vector");
        assert_eq!(m.cols, r.cols, "add_row width mismatch");
        let mut v = m.clone();
        for i in 0..v.rows {
            for (j, x) in v.row_mut(i).iter_mut().enumerate() {
                *x += r.data[j];
            }
        }
        self.push(v, Op::AddRow(a.0, row.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a.0, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::Matmul(a.0, b.0))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push(v, Op::MatmulNT(a.0, b.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a.0))
    }

    pub fn sigmoid_op(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a.0))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Ln(a.0))
    }

    pub fn softplus_op(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a.0))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a.0, lo, hi))
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::from_vec(1, 1, vec![self.value(a).sum()]);
        self.push(v, Op::Sum(a.0))
    }

    /// Mean of all entries, as a 1×1 node.
    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Matrix::from_vec(1, 1, vec![m.sum() / (m.rows * m.cols) as f64]);
        self.push(v, Op::Mean(a.0))
    }

    /// Columns `[start, start+len)` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.cols, "slice_cols out of range");
        let mut v = Matrix::zeros(m.rows, len);
        for r in 0..m.rows {
            v.row_mut(r).copy_from_slice(&m.row(r)[start..start + len]);
        }
        self.push(v, Op::SliceCols(a.0, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let total: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut v = Matrix::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                v.row_mut(r)[offset..offset + m.cols].copy_from_slice(m.row(r));
            }
            offset += m.cols;
        }
        self.push(v, Op::ConcatCols(parts.iter().map(|p| p.0).collect()))
    }

    /// Row-wise softmax with masked entries excluded (treated as −∞ logits).
    /// Fails if any row of the mask has no allowed column.
    pub fn masked_softmax(&mut self, scores: Var, mask: &Rc<AttnMask>) -> Result<Var> {
        let s = self.value(scores);
        assert_eq!(s.rows, mask.rows, "mask row mismatch");
        assert_eq!(s.cols, mask.cols, "mask col mismatch");
        let mut v = Matrix::zeros(s.rows, s.cols);
        for r in 0..s.rows {
            let row = s.row(r);
            let mut max = f64::NEG_INFINITY;
            for (c, &x) in row.iter().enumerate() {
                if mask.allowed(r, c) && x > max {
                    max = x;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::EmptyAttentionContext);
            }
            let mut denom = 0.0;
            for (c, &x) in row.iter().enumerate() {
                if mask.allowed(r, c) {
                    let e = (x - max).exp();
                    v.set(r, c, e);
                    denom += e;
                }
            }
            for c in 0..s.cols {
                if mask.allowed(r, c) {
                    v.set(r, c, v.get(r, c) / denom);
                }
            }
        }
        Ok(self.push(v, Op::MaskedSoftmax(scores.0, Rc::clone(mask))))
    }

    /// Per-row layer normalization with learned gain and bias (both 1×d).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let m = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        assert_eq!(g.rows, 1);
        assert_eq!(b.rows, 1);
        assert_eq!(g.cols, m.cols);
        assert_eq!(b.cols, m.cols);
        let d = m.cols as f64;
        let mut v = Matrix::zeros(m.rows, m.cols);
        for r in 0..m.rows {
            let row = m.row(r);
            let mu = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..m.cols {
                let xhat = (row[c] - mu) * inv;
                v.set(r, c, g.data[c] * xhat + b.data[c]);
            }
        }
        self.push(
            v,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                eps,
            },
        )
    }

    /// Reverse pass from a scalar (1×1) root.
    pub fn backward(&self, root: Var) -> Gradients {
        let root_val = self.value(root);
        assert_eq!(
            (root_val.rows, root_val.cols),
            (1, 1),
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Matrix::from_vec(1, 1, vec![1.0]));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.accumulate_parents(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate_parents(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let add_to = |grads: &mut [Option<Matrix>], parent: usize, contribution: Matrix| {
            match grads[parent] {
                Some(ref mut acc) => acc.add_assign(&contribution),
                None => grads[parent] = Some(contribution),
            }
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                add_to(grads, *a, g.zip_map(bv, |x, y| x * y));
                add_to(grads, *b, g.zip_map(av, |x, y| x * y));
            }
            Op::AddRow(a, row) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *row, g.col_sums());
            }
            Op::Scale(a, c) => add_to(grads, *a, g.scale(*c)),
            Op::Matmul(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                add_to(grads, *a, g.matmul_nt(bv));
                add_to(grads, *b, av.matmul_tn(g));
            }
            Op::MatmulNT(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                add_to(grads, *a, g.matmul(bv));
                add_to(grads, *b, g.matmul_tn(av));
            }
            Op::Tanh(a) => {
                let out = &self.nodes[idx].value;
                add_to(grads, *a, g.zip_map(out, |gi, y| gi * (1.0 - y * y)));
            }
            Op::Sigmoid(a) => {
                let out = &self.nodes[idx].value;
                add_to(grads, *a, g.zip_map(out, |gi, y| gi * y * (1.0 - y)));
            }
            Op::Exp(a) => {
                let out = &self.nodes[idx].value;
                add_to(grads, *a, g.zip_map(out, |gi, y| gi * y));
            }
            Op::Ln(a) => {
                let av = &self.nodes[*a].value;
                add_to(grads, *a, g.zip_map(av, |gi, x| gi / x));
            }
            Op::Softplus(a) => {
                let av = &self.nodes[*a].value;
                add_to(grads, *a, g.zip_map(av, |gi, x| gi * sigmoid(x)));
            }
            Op::Square(a) => {
                let av = &self.nodes[*a].value;
                add_to(grads, *a, g.zip_map(av, |gi, x| gi * 2.0 * x));
            }
            Op::Clamp(a, lo, hi) => {
                let av = &self.nodes[*a].value;
                add_to(
                    grads,
                    *a,
                    g.zip_map(av, |gi, x| if x > *lo && x < *hi { gi } else { 0.0 }),
                );
            }
            Op::Sum(a) => {
                let av = &self.nodes[*a].value;
                add_to(grads, *a, Matrix::filled(av.rows, av.cols, g.data[0]));
            }
            Op::Mean(a) => {
                let av = &self.nodes[*a].value;
                let scale = g.data[0] / (av.rows * av.cols) as f64;
                add_to(grads, *a, Matrix::filled(av.rows, av.cols, scale));
            }
            Op::SliceCols(a, start) => {
                let av = &self.nodes[*a].value;
                let mut d = Matrix::zeros(av.rows, av.cols);
                for r in 0..g.rows {
                    d.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                add_to(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = &self.nodes[p].value;
                    let mut d = Matrix::zeros(pv.rows, pv.cols);
                    for r in 0..pv.rows {
                        d.row_mut(r)
                            .copy_from_slice(&g.row(r)[offset..offset + pv.cols]);
                    }
                    offset += pv.cols;
                    add_to(grads, p, d);
                }
            }
            Op::MaskedSoftmax(a, mask) => {
                // dL/ds_rc = p_rc * (g_rc - Σ_k g_rk p_rk) on allowed entries
                let p = &self.nodes[idx].value;
                let mut d = Matrix::zeros(p.rows, p.cols);
                for r in 0..p.rows {
                    let mut dot = 0.0;
                    for c in 0..p.cols {
                        dot += g.get(r, c) * p.get(r, c);
                    }
                    for c in 0..p.cols {
                        if mask.allowed(r, c) {
                            d.set(r, c, p.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                }
                add_to(grads, *a, d);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = &self.nodes[*x].value;
                let gv = &self.nodes[*gain].value;
                let d = xv.cols as f64;
                let mut dx = Matrix::zeros(xv.rows, xv.cols);
                let mut dgain = Matrix::zeros(1, xv.cols);
                let mut dbias = Matrix::zeros(1, xv.cols);
                for r in 0..xv.rows {
                    let row = xv.row(r);
                    let mu = row.iter().sum::<f64>() / d;
                    let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / d;
                    let inv = 1.0 / (var + eps).sqrt();
                    // xhat and dL/dxhat for this row
                    let xhat: Vec<f64> = row.iter().map(|&x| (x - mu) * inv).collect();
                    let dxhat: Vec<f64> = (0..xv.cols)
                        .map(|c| g.get(r, c) * gv.data[c])
                        .collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d;
                    let mean_dxhat_xhat = dxhat
                        .iter()
                        .zip(&xhat)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / d;
                    for c in 0..xv.cols {
                        dx.set(
                            r,
                            c,
                            inv * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat),
                        );
                        dgain.data[c] += g.get(r, c) * xhat[c];
                        dbias.data[c] += g.get(r, c);
                    }
                }
                add_to(grads, *x, dx);
                add_to(grads, *gain, dgain);
                add_to(grads, *bias, dbias);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    /// Central finite difference of a scalar tape program w.r.t. one input
    /// entry.
    fn fd<F>(build: F, inputs: &[Matrix], which: usize, idx: usize, h: f64) -> f64
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let eval = |delta: f64| {
            let mut shifted: Vec<Matrix> = inputs.to_vec();
            shifted[which].data[idx] += delta;
            let mut tape = Tape::new();
            let vars: Vec<Var> = shifted.iter().map(|m| tape.leaf(m.clone())).collect();
            let out = build(&mut tape, &vars);
            tape.value(out).data[0]
        };
        (eval(h) - eval(-h)) / (2.0 * h)
    }

    fn check_all<F>(build: F, inputs: &[Matrix], tol: f64)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out);
        for (which, input) in inputs.iter().enumerate() {
            let g = grads.get_or_zero(vars[which], input.rows, input.cols);
            for idx in 0..input.data.len() {
                let n = fd(&build, inputs, which, idx, 1e-5);
                let a = g.data[idx];
                let denom = a.abs().max(n.abs()).max(1e-6);
                assert!(
                    (a - n).abs() / denom < tol,
                    "input {which} entry {idx}: analytic {a} vs numeric {n}"
                );
            }
        }
    }

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn elementwise_and_reduction_grads() {
        let mut rng = rng_from_seed(11);
        let a = random(3, 4, &mut rng);
        let b = random(3, 4, &mut rng);
        check_all(
            |t, v| {
                let x = t.mul(v[0], v[1]);
                let y = t.tanh(x);
                let z = t.square(y);
                t.mean(z)
            },
            &[a, b],
            1e-6,
        );
    }

    #[test]
    fn matmul_grads() {
        let mut rng = rng_from_seed(12);
        let a = random(3, 4, &mut rng);
        let b = random(4, 2, &mut rng);
        let c = random(3, 2, &mut rng);
        check_all(
            |t, v| {
                let x = t.matmul(v[0], v[1]);
                let y = t.matmul_nt(x, v[2]);
                t.sum(y)
            },
            &[a, b, c],
            1e-6,
        );
    }

    #[test]
    fn unary_chain_grads() {
        let mut rng = rng_from_seed(13);
        let a = random(2, 3, &mut rng).map(|x| x + 2.5); // keep ln argument positive
        check_all(
            |t, v| {
                let x = t.ln(v[0]);
                let y = t.softplus_op(x);
                let z = t.exp(y);
                let w = t.sigmoid_op(z);
                t.mean(w)
            },
            &[a],
            1e-6,
        );
    }

    #[test]
    fn add_row_and_slice_concat_grads() {
        let mut rng = rng_from_seed(14);
        let a = random(3, 6, &mut rng);
        let row = random(1, 6, &mut rng);
        check_all(
            |t, v| {
                let x = t.add_row(v[0], v[1]);
                let left = t.slice_cols(x, 0, 3);
                let right = t.slice_cols(x, 3, 3);
                let swapped = t.concat_cols(&[right, left]);
                let y = t.tanh(swapped);
                t.mean(y)
            },
            &[a, row],
            1e-6,
        );
    }

    #[test]
    fn masked_softmax_grads() {
        let mut rng = rng_from_seed(15);
        let scores = random(3, 4, &mut rng);
        let mut mask = AttnMask::all_allowed(3, 4);
        mask.allow[1] = false; // row 0 cannot see col 1
        mask.allow[2 * 4 + 3] = false;
        let mask = Rc::new(mask);
        let values = random(4, 2, &mut rng);
        check_all(
            |t, v| {
                let p = t.masked_softmax(v[0], &mask).unwrap();
                let out = t.matmul(p, v[1]);
                let sq = t.square(out);
                t.sum(sq)
            },
            &[scores, values],
            1e-6,
        );
    }

    #[test]
    fn masked_softmax_rows_are_stochastic() {
        let mut rng = rng_from_seed(16);
        let scores = random(5, 5, &mut rng).scale(3.0);
        let mut mask = AttnMask::all_allowed(5, 5);
        for c in 2..5 {
            mask.allow[3 * 5 + c] = false;
        }
        let mask = Rc::new(mask);
        let mut tape = Tape::new();
        let s = tape.leaf(scores);
        let p = tape.masked_softmax(s, &mask).unwrap();
        let pv = tape.value(p);
        for r in 0..5 {
            let sum: f64 = pv.row(r).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12, "row {r} sums to {sum}");
            for c in 0..5 {
                if !mask.allowed(r, c) {
                    assert_eq!(pv.get(r, c), 0.0);
                }
            }
        }
    }

    #[test]
    fn masked_softmax_empty_row_errors() {
        let mut tape = Tape::new();
        let s = tape.leaf(Matrix::zeros(2, 3));
        let mut mask = AttnMask::all_allowed(2, 3);
        for c in 0..3 {
            mask.allow[1 * 3 + c] = false;
        }
        let err = tape.masked_softmax(s, &Rc::new(mask)).unwrap_err();
        assert!(matches!(err, Error::EmptyAttentionContext));
        assert_eq!(err.to_string(), "empty attention context");
    }

    #[test]
    fn layer_norm_grads() {
        let mut rng = rng_from_seed(17);
        let x = random(3, 5, &mut rng);
        let gain = random(1, 5, &mut rng).map(|v| v + 1.5);
        let bias = random(1, 5, &mut rng);
        check_all(
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5);
                let z = t.square(y);
                t.mean(z)
            },
            &[x, gain, bias],
            1e-5,
        );
    }

    #[test]
    fn clamp_grad_is_zero_outside_bounds() {
        let x = Matrix::from_vec(1, 3, vec![-2.0, 0.3, 2.0]);
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let c = tape.clamp(v, -1.0, 1.0);
        let s = tape.sum(c);
        let grads = tape.backward(s);
        let g = grads.get(v).unwrap();
        assert_eq!(g.data, vec![0.0, 1.0, 0.0]);
    }
}
