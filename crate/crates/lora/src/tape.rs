//! Reverse-mode differentiation over matrix operations.
//!
//! Values are computed eagerly as operations are recorded; [`Tape::backward`]
//! walks the record in reverse and returns the gradient of a scalar output
//! with respect to every recorded value.

use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// Matrix plus a broadcast row vector.
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    /// Per-row root-mean-square normalisation.
    RmsNorm(Var, f64),
    /// Row-wise softmax with entries above the diagonal masked out.
    CausalSoftmax(Var),
    Transpose(Var),
    /// Rows of a table, by index.
    Gather(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    /// Sum over `(row, class)` of `-log softmax(row)[class]`.
    CrossEntropy(Var, Vec<(usize, usize)>),
}

#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Mat>,
    ops: Vec<Op>,
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.values[v.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn leaf(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (m, b) = (self.value(a), self.value(bias));
        assert_eq!((b.rows, b.cols), (1, m.cols), "bias shape mismatch");
        let v = Mat::from_fn(m.rows, m.cols, |i, j| m.get(i, j) + b.get(0, j));
        self.push(v, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn rms_norm(&mut self, a: Var, eps: f64) -> Var {
        let m = self.value(a);
        let mut v = m.clone();
        for i in 0..m.rows {
            let r = (m.row(i).iter().map(|x| x * x).sum::<f64>() / m.cols as f64 + eps).sqrt();
            for x in v.row_mut(i) {
                *x /= r;
            }
        }
        self.push(v, Op::RmsNorm(a, eps))
    }

    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let m = self.value(a);
        assert_eq!(m.rows, m.cols, "attention scores must be square");
        let mut v = Mat::zeros(m.rows, m.cols);
        for i in 0..m.rows {
            let row = &m.row(i)[..=i];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                v.set(i, j, e / sum);
            }
        }
        self.push(v, Op::CausalSoftmax(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let t = self.value(table);
        let mut v = Mat::zeros(ids.len(), t.cols);
        for (i, &id) in ids.iter().enumerate() {
            v.row_mut(i).copy_from_slice(t.row(id));
        }
        self.push(v, Op::Gather(table, ids))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        for p in &parts {
            let m = self.value(*p);
            assert_eq!(m.cols, cols, "concat_rows width mismatch");
            data.extend_from_slice(&m.data);
        }
        let rows = data.len() / cols.max(1);
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        let v = Mat::from_fn(m.rows, len, |i, j| m.get(i, start + j));
        self.push(v, Op::SliceCols(a, start, len))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut off = 0;
        for p in &parts {
            let m = self.value(*p);
            assert_eq!(m.rows, rows, "concat_cols height mismatch");
            for i in 0..rows {
                v.row_mut(i)[off..off + m.cols].copy_from_slice(m.row(i));
            }
            off += m.cols;
        }
        self.push(v, Op::ConcatCols(parts))
    }

    /// Summed negative log-likelihood of `targets` given as (row, class).
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<(usize, usize)>) -> Var {
        let m = self.value(logits);
        let loss: f64 = targets.iter().map(|&(i, c)| -log_softmax_row(m.row(i))[c]).sum();
        self.push(Mat::from_vec(1, 1, vec![loss]), Op::CrossEntropy(logits, targets))
    }

    /// Gradients of the scalar `out` with respect to every value, indexed
    /// by [`Var`]. Values that `out` does not depend on get zeros.
    pub fn backward(&self, out: Var) -> Grads {
        assert_eq!(self.value(out).shape(), (1, 1), "backward needs a scalar output");
        let mut g: Vec<Option<Mat>> = vec![None; self.values.len()];
        g[out.0] = Some(Mat::from_vec(1, 1, vec![1.0]));

        fn acc(g: &mut [Option<Mat>], v: Var, delta: Mat) {
            match &mut g[v.0] {
                Some(m) => m.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        }

        for idx in (0..=out.0).rev() {
            let Some(gout) = g[idx].take() else { continue };
            match &self.ops[idx] {
                Op::Leaf => {
                    g[idx] = Some(gout);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = gout.matmul(&self.value(*b).transpose());
                    let db = self.value(*a).transpose().matmul(&gout);
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut g, *a, gout.clone());
                    acc(&mut g, *b, gout);
                }
                Op::AddRow(a, bias) => {
                    let mut db = Mat::zeros(1, gout.cols);
                    for i in 0..gout.rows {
                        for (d, x) in db.data.iter_mut().zip(gout.row(i)) {
                            *d += x;
                        }
                    }
                    acc(&mut g, *a, gout);
                    acc(&mut g, *bias, db);
                }
                Op::Scale(a, s) => acc(&mut g, *a, gout.scale(*s)),
                Op::Tanh(a) => {
                    let y = &self.values[idx];
                    let d = Mat::from_fn(y.rows, y.cols, |i, j| gout.get(i, j) * (1.0 - y.get(i, j).powi(2)));
                    acc(&mut g, *a, d);
                }
                Op::RmsNorm(a, eps) => {
                    let x = self.value(*a);
                    let n = x.cols as f64;
                    let mut d = Mat::zeros(x.rows, x.cols);
                    for i in 0..x.rows {
                        let row = x.row(i);
                        let r = (row.iter().map(|v| v * v).sum::<f64>() / n + eps).sqrt();
                        let dot: f64 = row.iter().zip(gout.row(i)).map(|(a, b)| a * b).sum();
                        for (j, out) in d.row_mut(i).iter_mut().enumerate() {
                            *out = gout.get(i, j) / r - row[j] * dot / (n * r * r * r);
                        }
                    }
                    acc(&mut g, *a, d);
                }
                Op::CausalSoftmax(a) => {
                    let y = &self.values[idx];
                    let mut d = Mat::zeros(y.rows, y.cols);
                    for i in 0..y.rows {
                        let dot: f64 = (0..=i).map(|j| y.get(i, j) * gout.get(i, j)).sum();
                        for j in 0..=i {
                            d.set(i, j, y.get(i, j) * (gout.get(i, j) - dot));
                        }
                    }
                    acc(&mut g, *a, d);
                }
                Op::Transpose(a) => acc(&mut g, *a, gout.transpose()),
                Op::Gather(table, ids) => {
                    let t = self.value(*table);
                    let mut d = Mat::zeros(t.rows, t.cols);
                    for (i, &id) in ids.iter().enumerate() {
                        for (dst, x) in d.row_mut(id).iter_mut().zip(gout.row(i)) {
                            *dst += x;
                        }
                    }
                    acc(&mut g, *table, d);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let m = self.value(*p);
                        let d = Mat::from_vec(
                            m.rows,
                            m.cols,
                            gout.data[off * gout.cols..(off + m.rows) * gout.cols].to_vec(),
                        );
                        off += m.rows;
                        acc(&mut g, *p, d);
                    }
                }
                Op::SliceCols(a, start, len) => {
                    let x = self.value(*a);
                    let mut d = Mat::zeros(x.rows, x.cols);
                    for i in 0..x.rows {
                        d.row_mut(i)[*start..start + len].copy_from_slice(gout.row(i));
                    }
                    acc(&mut g, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let m = self.value(*p);
                        let d = Mat::from_fn(m.rows, m.cols, |i, j| gout.get(i, off + j));
                        off += m.cols;
                        acc(&mut g, *p, d);
                    }
                }
                Op::CrossEntropy(logits, targets) => {
                    let x = self.value(*logits);
                    let s = gout.get(0, 0);
                    let mut d = Mat::zeros(x.rows, x.cols);
                    for &(i, c) in targets {
                        let lp = log_softmax_row(x.row(i));
                        for (j, out) in d.row_mut(i).iter_mut().enumerate() {
                            *out += s * (lp[j].exp() - if j == c { 1.0 } else { 0.0 });
                        }
                    }
                    acc(&mut g, *logits, d);
                }
            }
        }
        Grads {
            grads: g,
            shapes: self.values.iter().map(Mat::shape).collect(),
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Mat>>,
    shapes: Vec<(usize, usize)>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Mat {
        match &self.grads[v.0] {
            Some(m) => m.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Mat::zeros(r, c)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences over every entry of every leaf.
    fn check(build: impl Fn(&mut Tape, &[Var]) -> Var, leaves: Vec<Mat>) {
        let mut t = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|m| t.leaf(m.clone())).collect();
        let out = build(&mut t, &vars);
        let grads = t.backward(out);
        let eval = |ls: &[Mat]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ls.iter().map(|m| t.leaf(m.clone())).collect();
            let o = build(&mut t, &vs);
            t.value(o).get(0, 0)
        };
        let eps = 1e-6;
        for (k, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(vars[k]);
            for idx in 0..leaf.data.len() {
                let mut plus = leaves.clone();
                plus[k].data[idx] += eps;
                let mut minus = leaves.clone();
                minus[k].data[idx] -= eps;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let a = analytic.data[idx];
                assert!(
                    (a - numeric).abs() < 1e-6 * (1.0 + a.abs()),
                    "leaf {k}[{idx}]: {a} vs {numeric}"
                );
            }
        }
    }

    fn m(rows: usize, cols: usize, seed: f64) -> Mat {
        Mat::from_fn(rows, cols, |i, j| ((i * 7 + j * 3) as f64 * 0.37 + seed).sin())
    }

    #[test]
    fn every_op_matches_finite_differences() {
        check(
            |t, v| {
                let x = t.matmul(v[0], v[1]);
                let x = t.add_row(x, v[2]);
                let x = t.tanh(x);
                let x = t.rms_norm(x, 1e-5);
                let xt = t.transpose(x);
                let s = t.matmul(x, xt);
                let s = t.scale(s, 0.5);
                let a = t.causal_softmax(s);
                let h = t.matmul(a, x);
                let left = t.slice_cols(h, 0, 2);
                let right = t.slice_cols(h, 2, 2);
                let h = t.concat_cols(vec![right, left]);
                let h = t.add(h, x);
                let g = t.gather(v[3], vec![1, 0, 1]);
                let h = t.concat_rows(vec![h, g]);
                t.cross_entropy(h, vec![(0, 1), (2, 3), (4, 0)])
            },
            vec![m(3, 3, 0.1), m(3, 4, 0.7), m(1, 4, 1.3), m(2, 4, 2.1)],
        );
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(m(2, 2, 0.3));
        let unused = t.leaf(m(2, 2, 0.9));
        let out = t.cross_entropy(a, vec![(0, 1)]);
        let g = t.backward(out);
        assert!(g.get(unused).data.iter().all(|v| *v == 0.0));
    }
}
