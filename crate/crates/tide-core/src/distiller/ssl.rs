//! Simplified DINO-style self-supervision.
//!
//! An EMA copy of the encoder + SSL head scores two augmented views; the
//! online network is trained with cross-entropy against the centered,
//! sharpened target distributions of the opposite view. The target never
//! receives gradients; it moves only through the EMA update, and the
//! center only through its own momentum update.

use ndarray::{Array2, Axis};

use crate::nn::params::{ParamId, ParamStore};
use crate::nn::tape::{Tape, Var};

use super::model::Model;

pub struct SslState {
    /// EMA target parameters; a full clone of the online store, of which
    /// only `tracked` entries are ever read or updated.
    pub target: ParamStore,
    pub tracked: Vec<ParamId>,
    /// Center of target outputs in logit space, shape 1 x ssl_out.
    pub center: Array2<f64>,
    pub ema_momentum: f64,
    pub center_momentum: f64,
    pub target_temp: f64,
    pub online_temp: f64,
}

impl SslState {
    /// Target initialized equal to the online network, center at zero.
    pub fn new(model: &Model) -> SslState {
        SslState {
            target: model.store.clone(),
            tracked: model.ssl_tracked_ids(),
            center: Array2::zeros((1, model.cfg.ssl_out_dim)),
            ema_momentum: model.cfg.ema_momentum,
            center_momentum: model.cfg.center_momentum,
            target_temp: model.cfg.ssl_target_temp,
            online_temp: model.cfg.ssl_online_temp,
        }
    }

    /// Raw target-network outputs for one view (no centering applied).
    pub fn target_outputs(&self, model: &Model, patches: &Array2<f64>) -> Array2<f64> {
        model.ssl_forward_infer(&self.target, patches)
    }

    /// Centered, sharpened target distribution for raw outputs.
    pub fn target_probs(&self, outputs: &Array2<f64>) -> Array2<f64> {
        softmax_centered(outputs, &self.center, self.target_temp)
    }

    /// center <- cm * center + (1 - cm) * batch mean of target outputs.
    pub fn update_center(&mut self, target_outputs: &[&Array2<f64>]) {
        let total: usize = target_outputs.iter().map(|o| o.nrows()).sum();
        if total == 0 {
            return;
        }
        let mut mean = Array2::zeros((1, self.center.ncols()));
        for out in target_outputs {
            mean += &out.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        mean /= total as f64;
        let cm = self.center_momentum;
        self.center = &self.center * cm + &mean * (1.0 - cm);
    }

    /// target <- m * target + (1 - m) * online, on the tracked ids only.
    pub fn ema_update(&mut self, online: &ParamStore) {
        let m = self.ema_momentum;
        for &id in &self.tracked {
            let updated = self.target.get(id) * m + online.get(id) * (1.0 - m);
            self.target.set(id, updated);
        }
    }
}

/// Row-wise softmax((out - center) / temp).
pub fn softmax_centered(out: &Array2<f64>, center: &Array2<f64>, temp: f64) -> Array2<f64> {
    assert!(temp > 0.0, "softmax temperature must be positive");
    assert_eq!(out.ncols(), center.ncols(), "center width");
    let mut p = Array2::zeros(out.raw_dim());
    for (i, row) in out.rows().into_iter().enumerate() {
        let shifted: Vec<f64> = row
            .iter()
            .zip(center.row(0).iter())
            .map(|(&x, &c)| (x - c) / temp)
            .collect();
        let max = shifted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = shifted.iter().map(|&x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (j, e) in exps.iter().enumerate() {
            p[[i, j]] = e / z;
        }
    }
    p
}

/// Mean of the two cross-view terms:
/// [CE(P_t(v1), softmax(o2/temp)) + CE(P_t(v2), softmax(o1/temp))] / 2.
pub fn ssl_cross_terms(
    tape: &mut Tape,
    p_t1: &Array2<f64>,
    p_t2: &Array2<f64>,
    online1: Var,
    online2: Var,
    online_temp: f64,
) -> Var {
    let ce_a = cross_entropy_const_targets(tape, p_t1, online2, online_temp);
    let ce_b = cross_entropy_const_targets(tape, p_t2, online1, online_temp);
    let total = tape.add(ce_a, ce_b);
    tape.scale(total, 0.5)
}

/// -mean_i sum_k p[i,k] * log softmax(out/temp)[i,k] with constant p.
fn cross_entropy_const_targets(
    tape: &mut Tape,
    p: &Array2<f64>,
    online: Var,
    temp: f64,
) -> Var {
    let n = p.nrows() as f64;
    let scaled = tape.scale(online, 1.0 / temp);
    let log_q = tape.log_softmax_rows(scaled);
    let targets = tape.constant(p.clone());
    let prod = tape.mul(targets, log_q);
    let total = tape.sum_all(prod);
    tape.scale(total, -1.0 / n)
}
