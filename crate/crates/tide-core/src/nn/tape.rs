//! Reverse-mode autodiff on dense f64 matrices.
//!
//! Values are `Array2<f64>`; scalars are 1x1 matrices. Nodes are recorded
//! in topological order, so one reverse sweep propagates gradients. All
//! stochastic inputs (dropout masks, augmented views, sampled pairings)
//! are materialized by the caller and enter the tape as constants; every
//! recorded function is therefore deterministic and finite-difference
//! checkable.

use std::sync::Arc;

use ndarray::{Array1, Array2, Axis, s};

use super::params::{ParamId, ParamStore};

type BackwardFn = Box<dyn Fn(&Array2<f64>, &mut [Option<Array2<f64>>])>;

struct Node {
    value: Arc<Array2<f64>>,
    backward: Option<BackwardFn>,
    param: Option<ParamId>,
}

#[derive(Copy, Clone, Debug)]
pub struct Var(usize);

/// Gradients with respect to store parameters, indexed by `ParamId`.
/// `None` means the parameter did not appear in the recorded graph.
pub struct Grads {
    pub by_param: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.by_param[id.0].as_ref()
    }
}

pub struct Tape {
    nodes: Vec<Node>,
}

fn accum(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(existing) => *existing += &g,
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(
        &mut self,
        value: Array2<f64>,
        backward: Option<BackwardFn>,
        param: Option<ParamId>,
    ) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            backward,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    fn arc(&self, v: Var) -> Arc<Array2<f64>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "expected scalar node");
        val[[0, 0]]
    }

    /// Leaf with no gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, None, None)
    }

    /// Leaf carrying the current value of a stored parameter. Multiple
    /// nodes may reference the same `ParamId`; their gradients accumulate.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), None, Some(id))
    }

    /// Copy of a node's value with the gradient path cut.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.constant(v)
    }

    /// `a . b` for a: n x k, b: k x m.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.arc(a), self.arc(b));
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dims");
        let value = av.dot(&*bv);
        let (ai, bi) = (a.0, b.0);
        self.push(
            value,
            Some(Box::new(move |g, grads| {
                accum(&mut grads[ai], g.dot(&bv.t()));
                accum(&mut grads[bi], av.t().dot(g));
            })),
            None,
        )
    }

    /// `a . b^T` for a: n x k, b: m x k.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.arc(a), self.arc(b));
        assert_eq!(av.ncols(), bv.ncols(), "matmul_nt inner dims");
        let value = av.dot(&bv.t());
        let (ai, bi) = (a.0, b.0);
        self.push(
            value,
            Some(Box::new(move |g, grads| {
                accum(&mut grads[ai], g.dot(&*bv));
                accum(&mut grads[bi], g.t().dot(&*av));
            })),
            None,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.arc(a), self.arc(b));
        assert_eq!(av.dim(), bv.dim(), "add shapes");
        let value = &*av + &*bv;
        let (ai, bi) = (a.0, b.0);
        self.push(
            value,
            Some(Box::new(move |g, grads| {
                accum(&mut grads[ai], g.clone());
                accum(&mut grads[bi], g.clone());
            })),
            None,
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.arc(a), self.arc(b));
        assert_eq!(av.dim(), bv.dim(), "sub shapes");
        let value = &*av - &*bv;
        let (ai, bi) = (a.0, b.0);
        self.push(
            value,
            Some(Box::new(move |g, grads| {
                accum(&mut grads[ai], g.clone());
                accum(&mut grads[bi], -g);
            })),
            None,
        )
    }

    /// Row-broadcast add: x: n x d, b: 1 x d.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.arc(x), self.arc(b));
        assert_eq!(bv.nrows(), 1, "bias must be 1 x d");
        assert_eq!(xv.ncols(), bv.ncols(), "bias width");
        let value = &*xv + &bv.broadcast(xv.raw_dim()).unwrap();
        let (xi, bi) = (x.0, b.0);
        self.push(
            value,
            Some(Box::new(move |g, grads| {
                accum(&mut grads[xi], g.clone());
                accum(&mut grads[bi], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            })),
            None,
        )
    }

    /// Elementwise product of same-shape matrices.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.arc(a), self.arc(b));
        assert_eq!(av.dim(), bv.dim(), "mul shapes");
        let value = &*av * &*bv;
        let (ai, bi) = (a.0, b.0);
        self.push(
            value,
            Some(Box::new(move |g, grads| {
                accum(&mut grads[ai], g * &*bv);
                accum(&mut grads[bi], g * &*av);
            })),
            None,
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.arc(a);
        let value = &*av * c;
        let ai = a.0;
        self.push(
            value,
            Some(Box::new(move |g, grads| {
                accum(&mut grads[ai], g * c);
            })),
            None,
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.arc(a);
        let value = av.mapv(|x| x.max(0.0));
        let ai = a.0;
        self.push(
            value,
            Some(Box::new(move |g, grads| {
                let mask = av.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                accum(&mut grads[ai], g * &mask);
            })),
            None,
        )
    }

    /// Gather one entry per row: out[i, 0] = a[i, idx[i]].
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.arc(a);
        assert_eq!(av.nrows(), idx.len(), "pick index count");
        let mut value = Array2::zeros((idx.len(), 1));
        for (i, &j) in idx.iter().enumerate() {
            assert!(j < av.ncols(), "pick index out of range");
            value[[i, 0]] = av[[i, j]];
        }
        let idx = idx.to_vec();
        let dim = av.raw_dim();
        let ai = a.0;
        self.push(
            value,
            Some(Box::new(move |g, grads| {
                let mut ga = Array2::zeros(dim);
                for (i, &j) in idx.iter().enumerate() {
                    ga[[i, j]] = g[[i, 0]];
                }
                accum(&mut grads[ai], ga);
            })),
            None,
        )
    }

    /// Select rows: out[i, ..] = a[rows[i], ..]. Repeats are allowed;
    /// gradients scatter-add back to the source rows.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let av = self.arc(a);
        let mut value = Array2::zeros((rows.len(), av.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            assert!(r < av.nrows(), "gather_rows index out of range");
            value.row_mut(i).assign(&av.row(r));
        }
        let rows = rows.to_vec();
        let in_dim = av.raw_dim();
        let ai = a.0;
        self.push(
            value,
            Some(Box::new(move |g, grads| {
                let mut ga = Array2::zeros(in_dim);
                for (i, &r) in rows.iter().enumerate() {
                    let mut dst = ga.row_mut(r);
                    dst += &g.row(i);
                }
                accum(&mut grads[ai], ga);
            })),
            None,
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let av = self.arc(a);
        let value = Array2::from_elem((1, 1), av.sum());
        let dim = av.raw_dim();
        let ai = a.0;
        self.push(
            value,
            Some(Box::new(move |g, grads| {
                accum(&mut grads[ai], Array2::from_elem(dim, g[[0, 0]]));
            })),
            None,
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let av = self.arc(a);
        let n = av.len() as f64;
        let value = Array2::from_elem((1, 1), av.sum() / n);
        let dim = av.raw_dim();
        let ai = a.0;
        self.push(
            value,
            Some(Box::new(move |g, grads| {
                accum(&mut grads[ai], Array2::from_elem(dim, g[[0, 0]] / n));
            })),
            None,
        )
    }

    /// Mean over consecutive row groups: (n*group) x d -> n x d.
    pub fn mean_pool_rows(&mut self, a: Var, group: usize) -> Var {
        let av = self.arc(a);
        assert!(group > 0 && av.nrows() % group == 0, "pool group must divide rows");
        let out_rows = av.nrows() / group;
        let d = av.ncols();
        let mut value = Array2::zeros((out_rows, d));
        for r in 0..out_rows {
            let block = av.slice(s![r * group..(r + 1) * group, ..]);
            value
                .row_mut(r)
                .assign(&(block.sum_axis(Axis(0)) / group as f64));
        }
        let in_dim = av.raw_dim();
        let ai = a.0;
        self.push(
            value,
            Some(Box::new(move |g, grads| {
                let mut ga = Array2::zeros(in_dim);
                for r in 0..g.nrows() {
                    let grow = &g.row(r) / group as f64;
                    for k in 0..group {
                        ga.row_mut(r * group + k).assign(&grow);
                    }
                }
                accum(&mut grads[ai], ga);
            })),
            None,
        )
    }

    /// Horizontal concatenation: n x d1, n x d2 -> n x (d1+d2).
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.arc(a), self.arc(b));
        assert_eq!(av.nrows(), bv.nrows(), "concat rows");
        let (d1, d2) = (av.ncols(), bv.ncols());
        let n = av.nrows();
        let mut value = Array2::zeros((n, d1 + d2));
        value.slice_mut(s![.., ..d1]).assign(&*av);
        value.slice_mut(s![.., d1..]).assign(&*bv);
        let (ai, bi) = (a.0, b.0);
        self.push(
            value,
            Some(Box::new(move |g, grads| {
                accum(&mut grads[ai], g.slice(s![.., ..d1]).to_owned());
                accum(&mut grads[bi], g.slice(s![.., d1..]).to_owned());
            })),
            None,
        )
    }

    /// Rows rescaled to unit L2 norm. Norms are clamped below at 1e-12;
    /// callers must keep rows away from zero.
    pub fn row_l2_normalize(&mut self, a: Var) -> Var {
        let av = self.arc(a);
        let norms: Array1<f64> = av
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt().max(1e-12))
            .collect();
        let mut value = av.as_ref().clone();
        for (mut row, &n) in value.rows_mut().into_iter().zip(norms.iter()) {
            row /= n;
        }
        let yv = Arc::new(value.clone());
        let ai = a.0;
        self.push(
            value,
            Some(Box::new(move |g, grads| {
                let mut ga = Array2::zeros(g.raw_dim());
                for i in 0..g.nrows() {
                    let gi = g.row(i);
                    let yi = yv.row(i);
                    let dot = gi.dot(&yi);
                    let gx = (&gi - &(&yi * dot)) / norms[i];
                    ga.row_mut(i).assign(&gx);
                }
                accum(&mut grads[ai], ga);
            })),
            None,
        )
    }

    /// Numerically stable log-softmax per row.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = self.arc(a);
        let mut value = av.as_ref().clone();
        for mut row in value.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| x - m);
            let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        let lsv = Arc::new(value.clone());
        let ai = a.0;
        self.push(
            value,
            Some(Box::new(move |g, grads| {
                let mut ga = Array2::zeros(g.raw_dim());
                for i in 0..g.nrows() {
                    let gsum: f64 = g.row(i).sum();
                    let p = lsv.row(i).mapv(f64::exp);
                    ga.row_mut(i).assign(&(&g.row(i) - &(&p * gsum)));
                }
                accum(&mut grads[ai], ga);
            })),
            None,
        )
    }

    /// Batch normalization over columns in training mode (batch statistics,
    /// biased variance). Returns the normalized output and the batch mean
    /// and variance so the caller can maintain running estimates.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, Array1<f64>, Array1<f64>) {
        let xv = self.arc(x);
        let gv = self.arc(gamma);
        let bv = self.arc(beta);
        let n = xv.nrows();
        assert!(n > 1, "batchnorm needs more than one row");
        let d = xv.ncols();
        assert_eq!(gv.dim(), (1, d), "gamma shape");
        assert_eq!(bv.dim(), (1, d), "beta shape");
        let mean = xv.sum_axis(Axis(0)) / n as f64;
        let var = xv
            .rows()
            .into_iter()
            .fold(Array1::<f64>::zeros(d), |acc, row| {
                let diff = &row - &mean;
                acc + &diff * &diff
            })
            / n as f64;
        let sigma = var.mapv(|v| (v + eps).sqrt());
        let mut xhat = Array2::zeros((n, d));
        for i in 0..n {
            xhat.row_mut(i).assign(&((&xv.row(i) - &mean) / &sigma));
        }
        let mut value = Array2::zeros((n, d));
        for i in 0..n {
            value
                .row_mut(i)
                .assign(&(&xhat.row(i) * &gv.row(0) + &bv.row(0)));
        }
        let xhat = Arc::new(xhat);
        let (xi, gi, bi) = (x.0, gamma.0, beta.0);
        let ret_mean = mean.clone();
        let ret_var = var.clone();
        let out = self.push(
            value,
            Some(Box::new(move |g, grads| {
                let nf = n as f64;
                let dbeta = g.sum_axis(Axis(0));
                let dgamma = (g * &*xhat).sum_axis(Axis(0));
                // dxhat = g * gamma (row broadcast)
                let mut dxhat = Array2::zeros((n, d));
                for i in 0..n {
                    dxhat.row_mut(i).assign(&(&g.row(i) * &gv.row(0)));
                }
                let sum_dxhat = dxhat.sum_axis(Axis(0));
                let sum_dxhat_xhat = (&dxhat * &*xhat).sum_axis(Axis(0));
                let mut dx = Array2::zeros((n, d));
                for i in 0..n {
                    let num = &(&dxhat.row(i) * nf) - &sum_dxhat
                        - &(&xhat.row(i) * &sum_dxhat_xhat);
                    dx.row_mut(i).assign(&(&num / (&sigma * nf)));
                }
                accum(&mut grads[xi], dx);
                accum(&mut grads[gi], dgamma.insert_axis(Axis(0)));
                accum(&mut grads[bi], dbeta.insert_axis(Axis(0)));
            })),
            None,
        );
        (out, ret_mean, ret_var)
    }

    /// Reverse sweep from a scalar loss. `n_params` sizes the output so
    /// parameters absent from the graph report `None`.
    pub fn backward(&self, loss: Var, n_params: usize) -> Grads {
        assert_eq!(self.value(loss).dim(), (1, 1), "loss must be scalar");
        let mut node_grads: Vec<Option<Array2<f64>>> = Vec::with_capacity(self.nodes.len());
        node_grads.resize_with(self.nodes.len(), || None);
        node_grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut by_param: Vec<Option<Array2<f64>>> = Vec::with_capacity(n_params);
        by_param.resize_with(n_params, || None);
        for i in (0..=loss.0).rev() {
            let Some(g) = node_grads[i].take() else {
                continue;
            };
            if let Some(back) = &self.nodes[i].backward {
                back(&g, &mut node_grads);
            }
            if let Some(pid) = self.nodes[i].param {
                accum(&mut by_param[pid.0], g);
            }
        }
        Grads { by_param }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn store_with(values: &[Array2<f64>]) -> (ParamStore, Vec<ParamId>) {
        let mut store = ParamStore::new();
        let ids = values
            .iter()
            .enumerate()
            .map(|(i, v)| store.add(&format!("p{i}"), v.clone(), true))
            .collect();
        (store, ids)
    }

    #[test]
    fn matmul_forward_and_grad() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        let b = array![[5.0, 6.0], [7.0, 8.0]];
        let (store, ids) = store_with(&[a.clone(), b.clone()]);
        let mut tape = Tape::new();
        let va = tape.param(&store, ids[0]);
        let vb = tape.param(&store, ids[1]);
        let c = tape.matmul(va, vb);
        assert_eq!(tape.value(c), &array![[19.0, 22.0], [43.0, 50.0]]);
        let loss = tape.sum_all(c);
        let grads = tape.backward(loss, store.len());
        // d(sum(AB))/dA = ones . B^T
        assert_eq!(grads.get(ids[0]).unwrap(), &array![[11.0, 15.0], [11.0, 15.0]]);
        assert_eq!(grads.get(ids[1]).unwrap(), &array![[4.0, 4.0], [6.0, 6.0]]);
    }

    #[test]
    fn gather_rows_selects_and_scatters() {
        let a = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let (store, ids) = store_with(&[a]);
        let mut tape = Tape::new();
        let v = tape.param(&store, ids[0]);
        let g = tape.gather_rows(v, &[2, 0, 2]);
        assert_eq!(tape.value(g), &array![[5.0, 6.0], [1.0, 2.0], [5.0, 6.0]]);
        let loss = tape.sum_all(g);
        let grads = tape.backward(loss, store.len());
        // Row 2 was taken twice, row 1 never.
        assert_eq!(
            grads.get(ids[0]).unwrap(),
            &array![[1.0, 1.0], [0.0, 0.0], [2.0, 2.0]]
        );
    }

    #[test]
    fn shared_param_grads_accumulate() {
        let a = array![[2.0]];
        let (store, ids) = store_with(&[a]);
        let mut tape = Tape::new();
        let v1 = tape.param(&store, ids[0]);
        let v2 = tape.param(&store, ids[0]);
        let prod = tape.mul(v1, v2); // x * x
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss, store.len());
        // d(x^2)/dx = 2x = 4
        assert_eq!(grads.get(ids[0]).unwrap()[[0, 0]], 4.0);
    }

    #[test]
    fn detach_cuts_gradient() {
        let a = array![[3.0]];
        let (store, ids) = store_with(&[a]);
        let mut tape = Tape::new();
        let v = tape.param(&store, ids[0]);
        let d = tape.detach(v);
        let prod = tape.mul(v, d); // x * const(3)
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss, store.len());
        assert_eq!(grads.get(ids[0]).unwrap()[[0, 0]], 3.0);
    }

    #[test]
    fn log_softmax_rows_sum_to_one() {
        let x = array![[1.0, 2.0, 3.0], [-1.0, 0.0, 1.0]];
        let (store, ids) = store_with(&[x]);
        let mut tape = Tape::new();
        let v = tape.param(&store, ids[0]);
        let ls = tape.log_softmax_rows(v);
        for row in tape.value(ls).rows() {
            let total: f64 = row.iter().map(|x| x.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pick_gathers_and_scatters() {
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        let (store, ids) = store_with(&[x]);
        let mut tape = Tape::new();
        let v = tape.param(&store, ids[0]);
        let p = tape.pick(v, &[1, 0]);
        assert_eq!(tape.value(p), &array![[2.0], [3.0]]);
        let loss = tape.sum_all(p);
        let grads = tape.backward(loss, store.len());
        assert_eq!(grads.get(ids[0]).unwrap(), &array![[0.0, 1.0], [1.0, 0.0]]);
    }

    #[test]
    fn mean_pool_rows_groups() {
        let x = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]];
        let (store, ids) = store_with(&[x]);
        let mut tape = Tape::new();
        let v = tape.param(&store, ids[0]);
        let pooled = tape.mean_pool_rows(v, 2);
        assert_eq!(tape.value(pooled), &array![[2.0, 3.0], [6.0, 7.0]]);
    }

    #[test]
    fn row_l2_normalize_unit_norm() {
        let x = array![[3.0, 4.0], [0.5, 0.0]];
        let (store, ids) = store_with(&[x]);
        let mut tape = Tape::new();
        let v = tape.param(&store, ids[0]);
        let y = tape.row_l2_normalize(v);
        for row in tape.value(y).rows() {
            assert!((row.dot(&row) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unused_param_has_no_grad() {
        let (store, ids) = store_with(&[array![[1.0]], array![[2.0]]]);
        let mut tape = Tape::new();
        let v = tape.param(&store, ids[0]);
        let loss = tape.sum_all(v);
        let grads = tape.backward(loss, store.len());
        assert!(grads.get(ids[1]).is_none());
    }
}
