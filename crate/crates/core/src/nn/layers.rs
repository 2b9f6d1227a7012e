use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.uniform(format!("{name}.weight"), in_dim, out_dim, in_dim, rng);
        let bias = store.uniform(format!("{name}.bias"), 1, out_dim, in_dim, rng);
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }
}

/// Gated recurrent unit with gates packed as `[reset | update | candidate]`.
///
/// ```text
/// r  = sigmoid(x W_r + b_r + h U_r + c_r)
/// z  = sigmoid(x W_z + b_z + h U_z + c_z)
/// n  = tanh(x W_n + b_n + r * (h U_n + c_n))
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Debug, Clone)]
pub struct Gru {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub b_input: ParamId,
    pub b_hidden: ParamId,
    pub in_dim: usize,
    pub hidden_dim: usize,
}

impl Gru {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let h3 = 3 * hidden_dim;
        Gru {
            w_input: store.uniform(format!("{name}.w_input"), in_dim, h3, hidden_dim, rng),
            w_hidden: store.uniform(format!("{name}.w_hidden"), hidden_dim, h3, hidden_dim, rng),
            b_input: store.uniform(format!("{name}.b_input"), 1, h3, hidden_dim, rng),
            b_hidden: store.uniform(format!("{name}.b_hidden"), 1, h3, hidden_dim, rng),
            in_dim,
            hidden_dim,
        }
    }

    /// Input projection `x W + b` for one or more rows.
    pub fn project_input(&self, tape: &mut Tape, x: Var) -> Var {
        assert_eq!(tape.shape(x).1, self.in_dim, "GRU input width");
        let w = tape.param(self.w_input);
        let b = tape.param(self.b_input);
        let gx = tape.matmul(x, w);
        tape.add_row(gx, b)
    }

    /// One step from an already projected input row.
    pub fn step_projected(&self, tape: &mut Tape, gx: Var, h: Var) -> Var {
        let hd = self.hidden_dim;
        let u = tape.param(self.w_hidden);
        let c = tape.param(self.b_hidden);
        let gh = tape.matmul(h, u);
        let gh = tape.add_row(gh, c);

        let gx_rz = tape.slice_cols(gx, 0, 2 * hd);
        let gh_rz = tape.slice_cols(gh, 0, 2 * hd);
        let rz = tape.add(gx_rz, gh_rz);
        let rz = tape.sigmoid(rz);
        let r = tape.slice_cols(rz, 0, hd);
        let z = tape.slice_cols(rz, hd, hd);

        let gx_n = tape.slice_cols(gx, 2 * hd, hd);
        let gh_n = tape.slice_cols(gh, 2 * hd, hd);
        let gated = tape.mul(r, gh_n);
        let n = tape.add(gx_n, gated);
        let n = tape.tanh(n);

        let keep = tape.one_minus(z);
        let fresh = tape.mul(keep, n);
        let carried = tape.mul(z, h);
        tape.add(fresh, carried)
    }

    pub fn step(&self, tape: &mut Tape, x: Var, h: Var) -> Var {
        let gx = self.project_input(tape, x);
        self.step_projected(tape, gx, h)
    }

    /// Runs over the rows of `xs` from a zero state and returns every hidden state
    /// as a `T x hidden` matrix.
    pub fn run(&self, tape: &mut Tape, xs: Var) -> Var {
        let steps = tape.shape(xs).0;
        let gx = self.project_input(tape, xs);
        let mut h = tape.zeros(1, self.hidden_dim);
        let mut outs = Vec::with_capacity(steps);
        for t in 0..steps {
            let row = tape.row_of(gx, t);
            h = self.step_projected(tape, row, h);
            outs.push(h);
        }
        tape.concat_rows(&outs)
    }

    /// Final hidden state after running over the rows of `xs` from a zero state.
    pub fn last_state(&self, tape: &mut Tape, xs: Var) -> Var {
        let steps = tape.shape(xs).0;
        let gx = self.project_input(tape, xs);
        let mut h = tape.zeros(1, self.hidden_dim);
        for t in 0..steps {
            let row = tape.row_of(gx, t);
            h = self.step_projected(tape, row, h);
        }
        h
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.filled(format!("{name}.gamma"), 1, dim, 1.0),
            beta: store.filled(format!("{name}.beta"), 1, dim, 0.0),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let normed = tape.normalize_rows(x, self.eps);
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        let scaled = tape.mul_row(normed, g);
        tape.add_row(scaled, b)
    }
}

/// Scaled dot-product attention of a single query row over `keys` rows.
///
/// Returns `(read, weights)` where `weights` is a `1 x n` row summing to one.
pub fn attend(tape: &mut Tape, query: Var, keys: Var, values: Var) -> (Var, Var) {
    let dim = tape.shape(query).1 as f64;
    let kt = tape.transpose(keys);
    let scores = tape.matmul(query, kt);
    let scores = tape.scale(scores, 1.0 / dim.sqrt());
    let weights = tape.softmax_rows(scores);
    let read = tape.matmul(weights, values);
    (read, weights)
}

#[derive(Debug, Clone)]
pub struct MultiHeadSelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub model_dim: usize,
}

impl MultiHeadSelfAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        model_dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(heads > 0 && model_dim.is_multiple_of(heads), "model_dim must divide by heads");
        MultiHeadSelfAttention {
            query: Linear::new(store, &format!("{name}.query"), model_dim, model_dim, rng),
            key: Linear::new(store, &format!("{name}.key"), model_dim, model_dim, rng),
            value: Linear::new(store, &format!("{name}.value"), model_dim, model_dim, rng),
            output: Linear::new(store, &format!("{name}.output"), model_dim, model_dim, rng),
            heads,
            model_dim,
        }
    }

    /// Bidirectional self-attention over all rows of `x`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let q = self.query.forward(tape, x);
        let k = self.key.forward(tape, x);
        let v = self.value.forward(tape, x);
        let head_dim = self.model_dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * head_dim, head_dim);
            let kh = tape.slice_cols(k, h * head_dim, head_dim);
            let vh = tape.slice_cols(v, h * head_dim, head_dim);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scores = tape.scale(scores, scale);
            let weights = tape.softmax_rows(scores);
            outs.push(tape.matmul(weights, vh));
        }
        let joined = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)
        };
        self.output.forward(tape, joined)
    }
}

/// Inverted dropout. Identity when `rate == 0` or when no RNG is supplied.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 - rate;
            let (r, c) = tape.shape(x);
            let mask = Array2::from_shape_simple_fn((r, c), || {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            let m = tape.constant(mask);
            tape.mul(x, m)
        }
        _ => x,
    }
}

/// Sinusoidal positional encodings for `len` positions.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, dim), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn gru_with_zero_parameters_keeps_zero_state() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gru = Gru::new(&mut store, "g", 3, 4, &mut rng);
        store.zero_all();
        let mut tape = Tape::new(&store);
        let x = tape.zeros(1, 3);
        let h = tape.zeros(1, 4);
        let out = gru.step(&mut tape, x, h);
        assert!(tape.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_run_matches_repeated_steps() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gru = Gru::new(&mut store, "g", 2, 3, &mut rng);
        let mut tape = Tape::new(&store);
        let xs = tape.constant(ndarray::array![[0.1, 0.2], [-0.3, 0.5], [0.7, -0.1]]);
        let all = gru.run(&mut tape, xs);
        let mut h = tape.zeros(1, 3);
        for t in 0..3 {
            let x = tape.row_of(xs, t);
            h = gru.step(&mut tape, x, h);
            let expected = tape.value(h).clone();
            let got = tape.value(all).row(t).to_owned();
            for (a, b) in expected.row(0).iter().zip(got.iter()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn attention_weights_normalize() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let q = tape.row(&[0.5, -1.0]);
        let k = tape.constant(ndarray::array![[1.0, 2.0], [0.0, 1.0], [3.0, -1.0]]);
        let (_, w) = attend(&mut tape, q, k, k);
        assert!((tape.value(w).sum() - 1.0).abs() < 1e-12);
        assert!(tape.value(w).iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn positional_encodings_distinguish_positions() {
        let pe = sinusoidal_positions(5, 8);
        assert_eq!(pe[[0, 0]], 0.0);
        assert_eq!(pe[[0, 1]], 1.0);
        assert_ne!(pe.row(1), pe.row(2));
    }
}
