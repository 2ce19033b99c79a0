//! Layer wrappers over the tape: affine maps, MLPs, batch norm, dropout.
//!
//! Each layer registers its parameters in a `ParamStore` at construction
//! and offers two forward paths: `forward` records onto a tape (training),
//! `infer` evaluates directly on arrays (no gradients, eval-mode norm).

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};

/// Xavier-uniform initialization: U(-sqrt(6/(fan_in+fan_out)), +).
pub fn xavier_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
}

/// Affine map x -> x.W + b with W stored as in_dim x out_dim.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(
            &format!("{name}.w"),
            xavier_uniform(rng, in_dim, out_dim),
            true,
        );
        let b = bias.then(|| store.add(&format!("{name}.b"), Array2::zeros((1, out_dim)), true));
        Linear { w, b, in_dim, out_dim }
    }

    /// Constant-filled weights and bias; used for identity-at-init heads
    /// (weights zero, bias set to the neutral element).
    pub fn new_const(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        w_val: f64,
        b_val: f64,
    ) -> Self {
        let w = store.add(
            &format!("{name}.w"),
            Array2::from_elem((in_dim, out_dim), w_val),
            true,
        );
        let b = Some(store.add(
            &format!("{name}.b"),
            Array2::from_elem((1, out_dim), b_val),
            true,
        ));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let bv = tape.param(store, b);
                tape.add_bias(y, bv)
            }
            None => y,
        }
    }

    pub fn infer(&self, store: &ParamStore, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(store.get(self.w));
        if let Some(b) = self.b {
            y += &store.get(b).broadcast(y.raw_dim()).unwrap();
        }
        y
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w];
        ids.extend(self.b);
        ids
    }
}

/// Fully connected stack with ReLU between all but the last layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dims: &[usize],
    ) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least input and output dims");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1], true))
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h);
            if i < last {
                h = tape.relu(h);
            }
        }
        h
    }

    pub fn infer(&self, store: &ParamStore, x: &Array2<f64>) -> Array2<f64> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.infer(store, &h);
            if i < last {
                h.mapv_inplace(|v| v.max(0.0));
            }
        }
        h
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.param_ids()).collect()
    }
}

/// Batch norm over feature columns. Running statistics live in the store
/// as non-trainable buffers so checkpoints capture them.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub dim: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(&format!("{name}.gamma"), Array2::ones((1, dim)), true);
        let beta = store.add(&format!("{name}.beta"), Array2::zeros((1, dim)), true);
        let running_mean =
            store.add(&format!("{name}.running_mean"), Array2::zeros((1, dim)), false);
        let running_var =
            store.add(&format!("{name}.running_var"), Array2::ones((1, dim)), false);
        BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
            dim,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Training-mode forward. When `update_running` is set, running
    /// statistics move toward the batch statistics (unbiased variance).
    pub fn forward_train(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        x: Var,
        update_running: bool,
    ) -> Var {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        let (y, mean, var) = tape.batchnorm_train(x, gamma, beta, self.eps);
        if update_running {
            let n = tape.value(x).nrows() as f64;
            let unbiased = if n > 1.0 { &var * (n / (n - 1.0)) } else { var.clone() };
            let m = self.momentum;
            let rm = store.get_mut(self.running_mean);
            for (r, &b) in rm.row_mut(0).iter_mut().zip(mean.iter()) {
                *r = (1.0 - m) * *r + m * b;
            }
            let rv = store.get_mut(self.running_var);
            for (r, &b) in rv.row_mut(0).iter_mut().zip(unbiased.iter()) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
        y
    }

    /// Eval-mode forward on plain arrays using running statistics.
    pub fn infer(&self, store: &ParamStore, x: &Array2<f64>) -> Array2<f64> {
        let rm = store.get(self.running_mean);
        let rv = store.get(self.running_var);
        let gamma = store.get(self.gamma);
        let beta = store.get(self.beta);
        let mut y = Array2::zeros(x.raw_dim());
        for (mut yrow, xrow) in y.rows_mut().into_iter().zip(x.rows()) {
            for j in 0..self.dim {
                let xhat = (xrow[j] - rm[[0, j]]) / (rv[[0, j]] + self.eps).sqrt();
                yrow[j] = gamma[[0, j]] * xhat + beta[[0, j]];
            }
        }
        y
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta, self.running_mean, self.running_var]
    }
}

/// Inverted-dropout mask: entries are 0 with probability `p`, else 1/(1-p).
/// Sampled by the caller so tapes stay deterministic.
pub fn dropout_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize, p: f64) -> Array2<f64> {
    assert!((0.0..1.0).contains(&p), "dropout probability in [0,1)");
    let keep = 1.0 - p;
    Array2::from_shape_fn((rows, cols), |_| {
        if rng.random::<f64>() < p {
            0.0
        } else {
            1.0 / keep
        }
    })
}

/// Identity mask for eval-mode paths that reuse the training graph.
pub fn identity_mask(rows: usize, cols: usize) -> Array2<f64> {
    Array2::ones((rows, cols))
}

/// Mean over rows, returned as 1 x d.
pub fn column_means(x: &Array2<f64>) -> Array2<f64> {
    (x.sum_axis(Axis(0)) / x.nrows() as f64).insert_axis(Axis(0))
}
