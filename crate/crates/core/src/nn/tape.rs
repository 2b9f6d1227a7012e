//! Reverse-mode automatic differentiation over 2-D `f64` matrices.
//!
//! Every model in the crate builds its forward pass on a [`Tape`]. Values are
//! row-major matrices; a vector is a `1 x n` row. Parameters live in a
//! [`ParamStore`] and enter the tape through [`Tape::param`], which memoizes
//! one leaf per parameter so gradients accumulate in a single place.

use ndarray::{s, Array2, Axis, Zip};

use super::params::{ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Transpose(Var),
    SoftmaxRows(Var),
    /// Normalizes each row to zero mean and unit variance; stores `1/sigma` per row.
    NormalizeRows(Var, Vec<f64>),
    Sum(Var),
    WeightedCrossEntropy {
        logits: Var,
        gold: Vec<usize>,
        weights: Vec<f64>,
        probs: Array2<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients of a scalar output with respect to every parameter in a store.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub grads: Vec<Array2<f64>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            grads: store
                .values()
                .iter()
                .map(|v| Array2::zeros(v.raw_dim()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.grads[id.index()]
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.mapv_inplace(|x| x * factor);
        }
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            *a += b;
        }
    }
}

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input. Gradients flow into it but are discarded.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Array2::zeros((rows, cols)))
    }

    pub fn row(&mut self, values: &[f64]) -> Var {
        let row = Array2::from_shape_vec((1, values.len()), values.to_vec())
            .expect("row vector shape");
        self.constant(row)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = self.push(value, Op::Param(id));
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    /// `a + row`, broadcasting a `1 x n` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ra, ca) = self.shape(a);
        assert_eq!(self.shape(row), (1, ca), "add_row: shape mismatch");
        let mut value = self.value(a).clone();
        let r = self.value(row).row(0).to_owned();
        for mut line in value.rows_mut() {
            line += &r;
        }
        debug_assert_eq!(value.nrows(), ra);
        self.push(value, Op::AddRow(a, row))
    }

    /// `a * row` elementwise, broadcasting a `1 x n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (_, ca) = self.shape(a);
        assert_eq!(self.shape(row), (1, ca), "mul_row: shape mismatch");
        let mut value = self.value(a).clone();
        let r = self.value(row).row(0).to_owned();
        for mut line in value.rows_mut() {
            line *= &r;
        }
        self.push(value, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        self.push(value, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        self.push(value, Op::AddScalar(a))
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: col mismatch");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(value, Op::SliceRows(a, start))
    }

    pub fn row_of(&mut self, a: Var, index: usize) -> Var {
        self.slice_rows(a, index, 1)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut line in value.rows_mut() {
            let max = line.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            line.mapv_inplace(|x| (x - max).exp());
            let total = line.sum();
            line.mapv_inplace(|x| x / total);
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut value = self.value(a).clone();
        let mut inv_std = Vec::with_capacity(value.nrows());
        for mut line in value.rows_mut() {
            let n = line.len() as f64;
            let mean = line.sum() / n;
            let var = line.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            line.mapv_inplace(|x| (x - mean) * inv);
            inv_std.push(inv);
        }
        self.push(value, Op::NormalizeRows(a, inv_std))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), total), Op::Sum(a))
    }

    /// Mean over rows of `-weights[gold_i] * log softmax(logits_i)[gold_i]`.
    pub fn weighted_cross_entropy(&mut self, logits: Var, gold: &[usize], weights: &[f64]) -> Var {
        let x = self.value(logits);
        assert_eq!(x.nrows(), gold.len(), "one gold label per logit row");
        assert!(!gold.is_empty(), "cross entropy over zero positions");
        let mut probs = x.clone();
        let mut total = 0.0;
        for (i, mut line) in probs.rows_mut().into_iter().enumerate() {
            let max = line.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let log_z = max + line.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total -= weights[gold[i]] * (line[gold[i]] - log_z);
            line.mapv_inplace(|v| (v - log_z).exp());
        }
        let loss = total / gold.len() as f64;
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::WeightedCrossEntropy {
                logits,
                gold: gold.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        )
    }

    /// Back-propagates from a `1 x 1` output and returns parameter gradients.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut out = Gradients::zeros_like(self.store);
        self.backward_into(output, &mut out);
        out
    }

    /// Like [`Tape::backward`] but adds into existing gradients.
    pub fn backward_into(&self, output: Var, out: &mut Gradients) {
        assert_eq!(self.shape(output), (1, 1), "backward from a non-scalar");
        assert_eq!(out.grads.len(), self.store.len(), "gradients sized for another store");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.grads[id.index()] += &g,
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let r = self.value(*row).row(0).to_owned();
                    let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let mut ga = g;
                    for mut line in ga.rows_mut() {
                        line *= &r;
                    }
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, g * *f),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|gi, &y| *gi *= y * (1.0 - y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|gi, &y| *gi *= 1.0 - y * y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|gi, &y| if y <= 0.0 { *gi = 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let width = self.value(p).ncols();
                        let gp = g.slice(s![.., offset..offset + width]).to_owned();
                        accumulate(&mut grads, p, gp);
                        offset += width;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let height = self.value(p).nrows();
                        let gp = g.slice(s![offset..offset + height, ..]).to_owned();
                        accumulate(&mut grads, p, gp);
                        offset += height;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.value(*a).raw_dim());
                    let width = g.ncols();
                    ga.slice_mut(s![.., *start..*start + width]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Array2::zeros(self.value(*a).raw_dim());
                    let height = g.nrows();
                    ga.slice_mut(s![*start..*start + height, ..]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = g;
                    for (mut gl, yl) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let dot: f64 = gl.iter().zip(yl.iter()).map(|(a, b)| a * b).sum();
                        Zip::from(&mut gl).and(&yl).for_each(|gi, &yi| *gi = yi * (*gi - dot));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::NormalizeRows(a, inv_std) => {
                    let y = &node.value;
                    let mut ga = g;
                    for ((mut gl, yl), inv) in ga.rows_mut().into_iter().zip(y.rows()).zip(inv_std) {
                        let n = gl.len() as f64;
                        let mean_g = gl.sum() / n;
                        let mean_gy: f64 =
                            gl.iter().zip(yl.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                        Zip::from(&mut gl)
                            .and(&yl)
                            .for_each(|gi, &yi| *gi = inv * (*gi - mean_g - yi * mean_gy));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.value(*a).raw_dim(), g[[0, 0]]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::WeightedCrossEntropy {
                    logits,
                    gold,
                    weights,
                    probs,
                } => {
                    let scale = g[[0, 0]] / gold.len() as f64;
                    let mut ga = probs.clone();
                    for (i, mut line) in ga.rows_mut().into_iter().enumerate() {
                        line[gold[i]] -= 1.0;
                        line *= weights[gold[i]] * scale;
                    }
                    accumulate(&mut grads, *logits, ga);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn store_with(values: Vec<(&str, Array2<f64>)>) -> (ParamStore, Vec<ParamId>) {
        let mut store = ParamStore::new();
        let ids = values
            .into_iter()
            .map(|(name, v)| store.insert(name, v))
            .collect();
        (store, ids)
    }

    fn numeric_check(store: &ParamStore, f: impl Fn(&mut Tape) -> Var) {
        let mut tape = Tape::new(store);
        let out = f(&mut tape);
        let grads = tape.backward(out);
        let h = 1e-6;
        for (pi, value) in store.values().iter().enumerate() {
            for (idx, _) in value.indexed_iter() {
                let mut plus = store.clone();
                plus.values_mut()[pi][idx] += h;
                let mut minus = store.clone();
                minus.values_mut()[pi][idx] -= h;
                let fp = {
                    let mut t = Tape::new(&plus);
                    let o = f(&mut t);
                    t.value(o)[[0, 0]]
                };
                let fm = {
                    let mut t = Tape::new(&minus);
                    let o = f(&mut t);
                    t.value(o)[[0, 0]]
                };
                let numeric = (fp - fm) / (2.0 * h);
                let analytic = grads.grads[pi][idx];
                assert!(
                    (numeric - analytic).abs() < 1e-6 * (1.0 + numeric.abs()),
                    "param {pi} {idx:?}: analytic {analytic} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_and_activation_gradients() {
        let (store, ids) = store_with(vec![
            ("a", array![[0.3, -0.2, 0.5], [0.1, 0.4, -0.7]]),
            ("b", array![[0.2, 0.1], [-0.3, 0.8], [0.5, -0.4]]),
            ("r", array![[0.05, -0.1]]),
        ]);
        numeric_check(&store, |t| {
            let a = t.param(ids[0]);
            let b = t.param(ids[1]);
            let r = t.param(ids[2]);
            let m = t.matmul(a, b);
            let m = t.add_row(m, r);
            let s = t.sigmoid(m);
            let th = t.tanh(m);
            let p = t.mul(s, th);
            let q = t.mul_row(p, r);
            let om = t.one_minus(q);
            let rl = t.relu(om);
            t.sum(rl)
        });
    }

    #[test]
    fn structural_op_gradients() {
        let (store, ids) = store_with(vec![
            ("a", array![[0.3, -0.2, 0.5], [0.1, 0.4, -0.7]]),
            ("b", array![[0.9, 0.1, -0.2]]),
        ]);
        numeric_check(&store, |t| {
            let a = t.param(ids[0]);
            let b = t.param(ids[1]);
            let rows = t.concat_rows(&[a, b]);
            let cols = t.concat_cols(&[rows, rows]);
            let sl = t.slice_cols(cols, 2, 3);
            let sr = t.slice_rows(sl, 1, 2);
            let tr = t.transpose(sr);
            let sm = t.softmax_rows(tr);
            let w = t.row(&[1.0, -2.0]);
            let mw = t.mul_row(sm, w);
            let nr = t.normalize_rows(cols, 1e-5);
            let nr = t.tanh(nr);
            let s1 = t.sum(mw);
            let s2 = t.sum(nr);
            let total = t.sub(s1, s2);
            t.scale(total, 0.5)
        });
    }

    #[test]
    fn weighted_cross_entropy_gradient() {
        let (store, ids) = store_with(vec![("l", array![[0.3, -0.2, 0.5], [1.1, 0.4, -0.7]])]);
        numeric_check(&store, |t| {
            let l = t.param(ids[0]);
            t.weighted_cross_entropy(l, &[2, 0], &[0.5, 1.0, 3.0])
        });
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let x = t.constant(array![[1000.0, 1.0, -5.0], [0.0, 0.0, 0.0]]);
        let y = t.softmax_rows(x);
        for row in t.value(y).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn param_leaf_is_memoized() {
        let (store, ids) = store_with(vec![("a", array![[1.0]])]);
        let mut t = Tape::new(&store);
        let a1 = t.param(ids[0]);
        let a2 = t.param(ids[0]);
        assert_eq!(a1, a2);
        let s = t.add(a1, a2);
        let g = t.backward(s);
        assert_eq!(g.grads[0][[0, 0]], 2.0);
    }
}
