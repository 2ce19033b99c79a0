//! Loss builders on tape plus closed-form scalar variants for oracles.
//!
//! Every stochastic input (teacher targets, labels, partner projections)
//! enters as a constant, so each builder is finite-difference checkable.

use ndarray::{Array2, ArrayView1};

use crate::error::{Result, TideError};
use crate::nn::tape::{Tape, Var};

/// Mean KL(P_t || P_s) over rows with constant (stop-gradient) targets.
/// The student term goes through log-softmax, so a vanishing P_s entry
/// never produces a NaN; 0 * log 0 on the target side counts as 0.
pub fn kl_distill(tape: &mut Tape, p_t: &Array2<f64>, student_logits: Var) -> Result<Var> {
    let dim = tape.value(student_logits).raw_dim();
    if p_t.raw_dim() != dim {
        return Err(TideError::config(format!(
            "distill targets {:?} vs student logits {:?}",
            p_t.raw_dim(),
            dim
        )));
    }
    let n = p_t.nrows() as f64;
    let neg_entropy: f64 =
        p_t.iter().map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 }).sum::<f64>() / n;
    let log_p_s = tape.log_softmax_rows(student_logits);
    let targets = tape.constant(p_t.clone());
    let prod = tape.mul(targets, log_p_s);
    let total = tape.sum_all(prod);
    let cross = tape.scale(total, -1.0 / n);
    let shift = tape.constant(Array2::from_elem((1, 1), neg_entropy));
    Ok(tape.add(cross, shift))
}

/// Mean cross-entropy of logits against integer labels.
pub fn mean_cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, k) = {
        let v = tape.value(logits);
        (v.nrows(), v.ncols())
    };
    if labels.len() != n {
        return Err(TideError::config(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(TideError::domain(format!(
            "label {bad} outside [0,{k})"
        )));
    }
    let log_p = tape.log_softmax_rows(logits);
    let picked = tape.pick(log_p, labels);
    let mean = tape.mean_all(picked);
    Ok(tape.scale(mean, -1.0))
}

/// Symmetric InfoNCE between row-aligned projection batches. Rows are
/// L2-normalized inside; diagonal entries are the positives.
pub fn info_nce_symmetric(tape: &mut Tape, za: Var, zb: Var, temp: f64) -> Result<Var> {
    if !(temp > 0.0) {
        return Err(TideError::domain(format!(
            "InfoNCE temperature must be positive, got {temp}"
        )));
    }
    let (n, dims_match) = {
        let a = tape.value(za);
        let b = tape.value(zb);
        (a.nrows(), a.raw_dim() == b.raw_dim())
    };
    if !dims_match {
        return Err(TideError::config("InfoNCE projections must share a shape"));
    }
    if n < 2 {
        return Err(TideError::data(format!(
            "InfoNCE needs at least 2 pairs, got {n}"
        )));
    }
    let a = tape.row_l2_normalize(za);
    let b = tape.row_l2_normalize(zb);
    let labels: Vec<usize> = (0..n).collect();
    let sim_ab = tape.matmul_nt(a, b);
    let logits_ab = tape.scale(sim_ab, 1.0 / temp);
    let ce_ab = mean_cross_entropy(tape, logits_ab, &labels)?;
    let sim_ba = tape.matmul_nt(b, a);
    let logits_ba = tape.scale(sim_ba, 1.0 / temp);
    let ce_ba = mean_cross_entropy(tape, logits_ba, &labels)?;
    let total = tape.add(ce_ab, ce_ba);
    Ok(tape.scale(total, 0.5))
}

/// -log P_t[label] for one teacher distribution.
pub fn teacher_loss_value(p_t: &ArrayView1<f64>, label: usize) -> Result<f64> {
    if label >= p_t.len() {
        return Err(TideError::domain(format!(
            "label {label} outside [0,{})",
            p_t.len()
        )));
    }
    Ok(-p_t[label].ln())
}

/// KL(P_t || P_s) for one distribution pair; 0 * log 0 counts as 0 and a
/// zero P_s mass under positive P_t gives +inf, never NaN.
pub fn distill_loss_value(p_t: &ArrayView1<f64>, p_s: &ArrayView1<f64>) -> Result<f64> {
    if p_t.len() != p_s.len() {
        return Err(TideError::config("distributions must share a length"));
    }
    let mut kl = 0.0;
    for (&p, &q) in p_t.iter().zip(p_s.iter()) {
        if p > 0.0 {
            if q > 0.0 {
                kl += p * (p.ln() - q.ln());
            } else {
                return Ok(f64::INFINITY);
            }
        }
    }
    Ok(kl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use rand::Rng;

    use crate::nn::params::ParamStore;
    use crate::rng::derive;

    #[test]
    fn distill_matches_closed_forms() {
        let p_t = array![1.0, 0.0, 0.0, 0.0];
        let p_s = Array1::from_elem(4, 0.25);
        let kl = distill_loss_value(&p_t.view(), &p_s.view()).unwrap();
        assert!((kl - 4.0f64.ln()).abs() < 1e-12);
        assert_eq!(distill_loss_value(&p_t.view(), &p_t.view()).unwrap(), 0.0);
        let dead = array![0.0, 0.5, 0.25, 0.25];
        assert!(distill_loss_value(&p_t.view(), &dead.view()).unwrap().is_infinite());
    }

    #[test]
    fn teacher_loss_closed_forms_and_domain() {
        let uniform = Array1::from_elem(10, 0.1);
        let loss = teacher_loss_value(&uniform.view(), 3).unwrap();
        assert!((loss - 10.0f64.ln()).abs() < 1e-12);
        let onehot = array![0.0, 1.0, 0.0];
        assert_eq!(teacher_loss_value(&onehot.view(), 1).unwrap(), 0.0);
        let err = teacher_loss_value(&onehot.view(), 3).unwrap_err();
        assert!(matches!(err, TideError::Domain(_)));
    }

    #[test]
    fn kl_is_nonnegative_over_random_pairs() {
        let mut rng = derive(11, &[1]);
        for _ in 0..1000 {
            let k = rng.random_range(2..8);
            let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
                let mut v = Array1::from_shape_fn(k, |_| rng.random_range(1e-6..1.0f64));
                let z = v.sum();
                v.mapv_inplace(|x| x / z);
                v
            };
            let p = draw(&mut rng);
            let q = draw(&mut rng);
            let kl = distill_loss_value(&p.view(), &q.view()).unwrap();
            assert!(kl >= -1e-12, "KL must be nonnegative, got {kl}");
            if kl.abs() > 1e-9 {
                assert!(kl > 0.0);
            }
        }
    }

    #[test]
    fn tape_kl_matches_scalar_oracle() {
        let mut rng = derive(12, &[2]);
        let mut store = ParamStore::new();
        let logits_val =
            Array2::from_shape_fn((5, 7), |_| rng.random_range(-2.0..2.0f64));
        let id = store.add("logits", logits_val.clone(), true);
        let mut p_t = Array2::from_shape_fn((5, 7), |_| rng.random_range(0.01..1.0f64));
        for mut row in p_t.rows_mut() {
            let z = row.sum();
            row.mapv_inplace(|x| x / z);
        }
        let mut tape = Tape::new();
        let logits = tape.param(&store, id);
        let kl = kl_distill(&mut tape, &p_t, logits).unwrap();
        let got = tape.scalar_value(kl);

        let mut expect = 0.0;
        for i in 0..5 {
            let row = logits_val.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&x| (x - max).exp()).sum();
            let log_q: Vec<f64> = row.iter().map(|&x| x - max - z.ln()).collect();
            for j in 0..7 {
                expect += p_t[[i, j]] * (p_t[[i, j]].ln() - log_q[j]);
            }
        }
        expect /= 5.0;
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn info_nce_orthogonal_partners_is_tiny() {
        // 8 orthogonal unit vectors, each matched to itself: the positive
        // logit is 1/temp and every negative is 0.
        let mut store = ParamStore::new();
        let eye: Array2<f64> = Array2::eye(8);
        let a = store.add("a", eye.clone(), true);
        let b = store.add("b", eye, true);
        let mut tape = Tape::new();
        let (va, vb) = (tape.param(&store, a), tape.param(&store, b));
        let loss = info_nce_symmetric(&mut tape, va, vb, 0.07).unwrap();
        assert!(tape.scalar_value(loss) < 1e-4);
    }

    #[test]
    fn info_nce_identical_projections_hit_ln_batch() {
        let mut store = ParamStore::new();
        let same = Array2::from_shape_fn((6, 3), |(_, j)| (j + 1) as f64);
        let a = store.add("a", same.clone(), true);
        let b = store.add("b", same, true);
        let mut tape = Tape::new();
        let (va, vb) = (tape.param(&store, a), tape.param(&store, b));
        let loss = info_nce_symmetric(&mut tape, va, vb, 0.07).unwrap();
        assert!((tape.scalar_value(loss) - 6.0f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn info_nce_is_symmetric_in_modalities() {
        let mut rng = derive(13, &[3]);
        let mut store = ParamStore::new();
        let xa = Array2::from_shape_fn((5, 4), |_| rng.random_range(-1.0..1.0f64));
        let xb = Array2::from_shape_fn((5, 4), |_| rng.random_range(-1.0..1.0f64));
        let a = store.add("a", xa, true);
        let b = store.add("b", xb, true);

        let mut t1 = Tape::new();
        let (va, vb) = (t1.param(&store, a), t1.param(&store, b));
        let l1 = info_nce_symmetric(&mut t1, va, vb, 0.07).unwrap();
        let mut t2 = Tape::new();
        let (vb2, va2) = (t2.param(&store, b), t2.param(&store, a));
        let l2 = info_nce_symmetric(&mut t2, vb2, va2, 0.07).unwrap();
        assert!((t1.scalar_value(l1) - t2.scalar_value(l2)).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut store = ParamStore::new();
        let id = store.add("x", Array2::zeros((2, 3)), true);
        let mut tape = Tape::new();
        let v = tape.param(&store, id);
        let err = mean_cross_entropy(&mut tape, v, &[0, 3]).unwrap_err();
        assert!(matches!(err, TideError::Domain(_)));
    }
}
