//! Brute-force verification of the guided-learning bound on exactly
//! enumerable discrete worlds.
//!
//! For a joint distribution over (D, I, R, C) and a teacher T(d | i, r, c),
//! the marginalized student S_T(d | i, c) = E_{R|I,C}[T] satisfies
//!
//!   risk[S_T] <= H(D | I, C) + E_{I,R,C}[ KL(P(D | I, R, C) || T) ]
//!
//! with equality when T is the exact posterior. Everything here is exact
//! enumeration in natural log with the 0 * log 0 := 0 convention;
//! conditional slices with zero mass are excluded from expectations.

use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TideError};
use crate::rng::derive;

const SUM_TOL: f64 = 1e-12;

fn kl_div(p: &[f64], q: &[f64]) -> f64 {
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return f64::INFINITY;
            }
            kl += pi * (pi / qi).ln();
        }
    }
    kl
}

/// Exact joint distribution over (D, I, R, C), axes in that order.
#[derive(Clone, Debug)]
pub struct DiscreteWorld {
    joint: Array4<f64>,
}

impl DiscreteWorld {
    pub const MAX_AXIS: usize = 8;

    pub fn new(joint: Array4<f64>) -> Result<Self> {
        let dims = joint.dim();
        for (name, n) in [("D", dims.0), ("I", dims.1), ("R", dims.2), ("C", dims.3)] {
            if n == 0 || n > Self::MAX_AXIS {
                return Err(TideError::config(format!(
                    "axis {name} has cardinality {n}, must be in 1..={}",
                    Self::MAX_AXIS
                )));
            }
        }
        if joint.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(TideError::domain("joint entries must be finite and >= 0"));
        }
        let total: f64 = joint.sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(TideError::domain(format!(
                "joint sums to {total}, expected 1 within {SUM_TOL}"
            )));
        }
        Ok(DiscreteWorld { joint })
    }

    /// Uniform-random positive joint, normalized.
    pub fn random(rng: &mut ChaCha8Rng, dims: (usize, usize, usize, usize)) -> Self {
        Self::random_with_zero_slices(rng, dims, 0.0)
    }

    /// Random joint where, with probability `p_zero`, one (i, c) slice is
    /// emptied; exercises the zero-mass exclusion paths.
    pub fn random_with_zero_slices(
        rng: &mut ChaCha8Rng,
        dims: (usize, usize, usize, usize),
        p_zero: f64,
    ) -> Self {
        let mut joint = Array4::from_shape_fn(dims, |_| rng.random::<f64>() + 1e-3);
        if dims.1 * dims.3 > 1 && rng.random::<f64>() < p_zero {
            let i = rng.random_range(0..dims.1);
            let c = rng.random_range(0..dims.3);
            for d in 0..dims.0 {
                for r in 0..dims.2 {
                    joint[[d, i, r, c]] = 0.0;
                }
            }
        }
        let total = joint.sum();
        joint /= total;
        DiscreteWorld { joint }
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.joint.dim()
    }

    pub fn joint(&self) -> &Array4<f64> {
        &self.joint
    }

    /// P(d, i, c), marginalized over R.
    pub fn p_dic(&self) -> Array3<f64> {
        let (nd, ni, nr, nc) = self.dims();
        let mut p = Array3::zeros((nd, ni, nc));
        for d in 0..nd {
            for i in 0..ni {
                for c in 0..nc {
                    for r in 0..nr {
                        p[[d, i, c]] += self.joint[[d, i, r, c]];
                    }
                }
            }
        }
        p
    }

    /// P(i, r, c), marginalized over D.
    pub fn p_irc(&self) -> Array3<f64> {
        let (nd, ni, nr, nc) = self.dims();
        let mut p = Array3::zeros((ni, nr, nc));
        for d in 0..nd {
            for i in 0..ni {
                for c in 0..nc {
                    for r in 0..nr {
                        p[[i, r, c]] += self.joint[[d, i, r, c]];
                    }
                }
            }
        }
        p
    }

    /// P(i, c).
    pub fn p_ic(&self) -> Array2<f64> {
        let (nd, ni, nr, nc) = self.dims();
        let mut p = Array2::zeros((ni, nc));
        for d in 0..nd {
            for i in 0..ni {
                for c in 0..nc {
                    for r in 0..nr {
                        p[[i, c]] += self.joint[[d, i, r, c]];
                    }
                }
            }
        }
        p
    }

    /// P(d | i, r, c) as a vector over d; uniform on zero-mass slices
    /// (those slices never enter any expectation).
    pub fn posterior(&self, i: usize, r: usize, c: usize) -> Vec<f64> {
        let nd = self.dims().0;
        let mass: f64 = (0..nd).map(|d| self.joint[[d, i, r, c]]).sum();
        if mass <= 0.0 {
            return vec![1.0 / nd as f64; nd];
        }
        (0..nd).map(|d| self.joint[[d, i, r, c]] / mass).collect()
    }
}

/// Conditional table T(d | i, r, c); every (i, r, c) slice is a
/// distribution over d. Axes ordered (d, i, r, c) like the world.
#[derive(Clone, Debug)]
pub struct TeacherTable {
    t: Array4<f64>,
}

impl TeacherTable {
    pub fn new(t: Array4<f64>) -> Result<Self> {
        let (nd, ni, nr, nc) = t.dim();
        if t.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(TideError::domain("teacher entries must be finite and >= 0"));
        }
        for i in 0..ni {
            for r in 0..nr {
                for c in 0..nc {
                    let total: f64 = (0..nd).map(|d| t[[d, i, r, c]]).sum();
                    if (total - 1.0).abs() > SUM_TOL {
                        return Err(TideError::domain(format!(
                            "teacher slice (i={i}, r={r}, c={c}) sums to {total}"
                        )));
                    }
                }
            }
        }
        Ok(TeacherTable { t })
    }

    pub fn table(&self) -> &Array4<f64> {
        &self.t
    }

    pub fn slice(&self, i: usize, r: usize, c: usize) -> Vec<f64> {
        (0..self.t.dim().0).map(|d| self.t[[d, i, r, c]]).collect()
    }

    /// Exact posterior P(D | I, R, C); the bound is tight here.
    pub fn bayes(world: &DiscreteWorld) -> Self {
        let (nd, ni, nr, nc) = world.dims();
        let mut t = Array4::zeros((nd, ni, nr, nc));
        for i in 0..ni {
            for r in 0..nr {
                for c in 0..nc {
                    let post = world.posterior(i, r, c);
                    for d in 0..nd {
                        t[[d, i, r, c]] = post[d];
                    }
                }
            }
        }
        TeacherTable { t }
    }

    pub fn uniform(dims: (usize, usize, usize, usize)) -> Self {
        let (nd, ni, nr, nc) = dims;
        TeacherTable {
            t: Array4::from_elem((nd, ni, nr, nc), 1.0 / nd as f64),
        }
    }

    /// Independent softmax-of-Gaussian slice per (i, r, c).
    pub fn random(rng: &mut ChaCha8Rng, dims: (usize, usize, usize, usize)) -> Self {
        let (nd, ni, nr, nc) = dims;
        let mut t = Array4::zeros((nd, ni, nr, nc));
        for i in 0..ni {
            for r in 0..nr {
                for c in 0..nc {
                    let logits: Vec<f64> =
                        (0..nd).map(|_| StandardNormal.sample(rng)).collect();
                    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    for d in 0..nd {
                        t[[d, i, r, c]] = exps[d] / z;
                    }
                }
            }
        }
        TeacherTable { t }
    }

    /// Posterior raised to 1/temp and renormalized; temp = 1 recovers the
    /// Bayes teacher, temp != 1 degrades it smoothly.
    pub fn tempered(world: &DiscreteWorld, temp: f64) -> Self {
        assert!(temp > 0.0, "temperature must be positive");
        let (nd, ni, nr, nc) = world.dims();
        let mut t = Array4::zeros((nd, ni, nr, nc));
        for i in 0..ni {
            for r in 0..nr {
                for c in 0..nc {
                    let post = world.posterior(i, r, c);
                    let powered: Vec<f64> = post.iter().map(|&p| p.powf(1.0 / temp)).collect();
                    let z: f64 = powered.iter().sum();
                    for d in 0..nd {
                        t[[d, i, r, c]] = if z > 0.0 { powered[d] / z } else { 1.0 / nd as f64 };
                    }
                }
            }
        }
        TeacherTable { t }
    }
}

/// H(D | I, C) by exact enumeration, natural log.
pub fn conditional_entropy(world: &DiscreteWorld) -> f64 {
    let p_dic = world.p_dic();
    let p_ic = world.p_ic();
    let (nd, ni, _, nc) = world.dims();
    let mut h = 0.0;
    for d in 0..nd {
        for i in 0..ni {
            for c in 0..nc {
                let p = p_dic[[d, i, c]];
                if p > 0.0 {
                    h -= p * (p / p_ic[[i, c]]).ln();
                }
            }
        }
    }
    h
}

/// S_T(d | i, c) = sum_r P(r | i, c) T(d | i, r, c). Zero-mass (i, c)
/// slices are filled uniform and reported as excluded.
pub fn marginalize_teacher(
    world: &DiscreteWorld,
    teacher: &TeacherTable,
) -> (Array3<f64>, Vec<(usize, usize)>) {
    let (nd, ni, nr, nc) = world.dims();
    assert_eq!(teacher.t.dim(), world.dims(), "teacher/world dims");
    let p_irc = world.p_irc();
    let p_ic = world.p_ic();
    let mut s = Array3::zeros((nd, ni, nc));
    let mut excluded = Vec::new();
    for i in 0..ni {
        for c in 0..nc {
            if p_ic[[i, c]] <= 0.0 {
                excluded.push((i, c));
                for d in 0..nd {
                    s[[d, i, c]] = 1.0 / nd as f64;
                }
                continue;
            }
            for r in 0..nr {
                let w = p_irc[[i, r, c]] / p_ic[[i, c]];
                if w <= 0.0 {
                    continue;
                }
                for d in 0..nd {
                    s[[d, i, c]] += w * teacher.t[[d, i, r, c]];
                }
            }
        }
    }
    (s, excluded)
}

/// Cross-entropy risk E[-log q(D | I, C)] of any conditional table over
/// (d, i, c); infinite when q is zero on a positive-probability event.
pub fn cross_entropy_risk(world: &DiscreteWorld, q: &Array3<f64>) -> f64 {
    let p_dic = world.p_dic();
    let (nd, ni, _, nc) = world.dims();
    let mut risk = 0.0;
    for d in 0..nd {
        for i in 0..ni {
            for c in 0..nc {
                let p = p_dic[[d, i, c]];
                if p > 0.0 {
                    let qv = q[[d, i, c]];
                    if qv <= 0.0 {
                        return f64::INFINITY;
                    }
                    risk -= p * qv.ln();
                }
            }
        }
    }
    risk
}

/// E_{(I,R,C)}[ KL(P(D | I, R, C) || T) ].
pub fn expected_posterior_kl(world: &DiscreteWorld, teacher: &TeacherTable) -> f64 {
    let p_irc = world.p_irc();
    let (_, ni, nr, nc) = world.dims();
    let mut total = 0.0;
    for i in 0..ni {
        for r in 0..nr {
            for c in 0..nc {
                let w = p_irc[[i, r, c]];
                if w <= 0.0 {
                    continue;
                }
                let post = world.posterior(i, r, c);
                let t_slice = teacher.slice(i, r, c);
                let kl = kl_div(&post, &t_slice);
                if kl.is_infinite() {
                    return f64::INFINITY;
                }
                total += w * kl;
            }
        }
    }
    total
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundReport {
    pub risk: f64,
    pub entropy: f64,
    pub kl_term: f64,
    pub slack: f64,
    /// Smallest per-(i, c) gap of the mixture inequality
    /// KL(P(D|i,c) || S_T) <= E_{R|i,c} KL(P(D|i,r,c) || T); the bound's
    /// only inequality step. Nonnegative when the step holds everywhere.
    pub jensen_min_gap: f64,
}

impl BoundReport {
    pub fn holds(&self, tol: f64) -> bool {
        self.slack >= -tol && self.jensen_min_gap >= -tol
    }
}

/// Evaluate every quantity in the bound plus the per-slice mixture step.
pub fn verify_bound(world: &DiscreteWorld, teacher: &TeacherTable) -> BoundReport {
    let entropy = conditional_entropy(world);
    let kl_term = expected_posterior_kl(world, teacher);
    let (s, _) = marginalize_teacher(world, teacher);
    let risk = cross_entropy_risk(world, &s);
    // An infinite KL term dominates any risk; the bound holds trivially
    // and the subtraction below would otherwise produce NaN.
    let slack = if kl_term.is_infinite() {
        f64::INFINITY
    } else {
        entropy + kl_term - risk
    };

    let p_irc = world.p_irc();
    let p_ic = world.p_ic();
    let p_dic = world.p_dic();
    let (nd, ni, nr, nc) = world.dims();
    let mut jensen_min_gap = f64::INFINITY;
    for i in 0..ni {
        for c in 0..nc {
            let mass = p_ic[[i, c]];
            if mass <= 0.0 {
                continue;
            }
            let post_ic: Vec<f64> = (0..nd).map(|d| p_dic[[d, i, c]] / mass).collect();
            let s_ic: Vec<f64> = (0..nd).map(|d| s[[d, i, c]]).collect();
            let lhs = kl_div(&post_ic, &s_ic);
            let mut rhs = 0.0;
            for r in 0..nr {
                let w = p_irc[[i, r, c]] / mass;
                if w <= 0.0 {
                    continue;
                }
                let post = world.posterior(i, r, c);
                let t_slice = teacher.slice(i, r, c);
                let kl = kl_div(&post, &t_slice);
                if kl.is_infinite() {
                    rhs = f64::INFINITY;
                    break;
                }
                rhs += w * kl;
            }
            let gap = if rhs.is_infinite() { f64::INFINITY } else { rhs - lhs };
            if gap < jensen_min_gap {
                jensen_min_gap = gap;
            }
        }
    }
    if jensen_min_gap == f64::INFINITY && ni * nc > 0 {
        // All slices excluded or infinite; the step holds vacuously.
        jensen_min_gap = 0.0;
    }

    BoundReport {
        risk,
        entropy,
        kl_term,
        slack,
        jensen_min_gap,
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherFamily {
    Bayes,
    Uniform,
    Random,
    Tempered,
}

impl TeacherFamily {
    pub const ALL: [TeacherFamily; 4] = [
        TeacherFamily::Bayes,
        TeacherFamily::Uniform,
        TeacherFamily::Random,
        TeacherFamily::Tempered,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            TeacherFamily::Bayes => "bayes",
            TeacherFamily::Uniform => "uniform",
            TeacherFamily::Random => "random",
            TeacherFamily::Tempered => "tempered",
        }
    }

    pub fn build(&self, world: &DiscreteWorld, rng: &mut ChaCha8Rng) -> TeacherTable {
        match self {
            TeacherFamily::Bayes => TeacherTable::bayes(world),
            TeacherFamily::Uniform => TeacherTable::uniform(world.dims()),
            TeacherFamily::Random => TeacherTable::random(rng, world.dims()),
            TeacherFamily::Tempered => {
                let temp = rng.random_range(0.5..2.0);
                TeacherTable::tempered(world, temp)
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed: u64,
    pub family: String,
    pub risk: f64,
    pub entropy: f64,
    pub kl_term: f64,
    pub slack: f64,
    pub jensen_min_gap: f64,
}

const TAG_THEORY: u64 = 0x54;

/// Random worlds x teacher families, fully parallel and schedule
/// independent: world w uses the stream (seed, [TAG, w, 0]) and family f
/// the stream (seed, [TAG, w, 1 + f]).
pub fn sweep(
    master_seed: u64,
    n_worlds: usize,
    max_dims: (usize, usize, usize, usize),
    families: &[TeacherFamily],
) -> Vec<SweepRow> {
    (0..n_worlds as u64)
        .into_par_iter()
        .flat_map_iter(|w| {
            let mut wrng = derive(master_seed, &[TAG_THEORY, w, 0]);
            let dims = (
                wrng.random_range(2..=max_dims.0),
                wrng.random_range(2..=max_dims.1),
                wrng.random_range(2..=max_dims.2),
                wrng.random_range(2..=max_dims.3),
            );
            let world = DiscreteWorld::random_with_zero_slices(&mut wrng, dims, 0.25);
            families
                .iter()
                .enumerate()
                .map(move |(f, fam)| {
                    let mut frng = derive(master_seed, &[TAG_THEORY, w, 1 + f as u64]);
                    let teacher = fam.build(&world, &mut frng);
                    let report = verify_bound(&world, &teacher);
                    SweepRow {
                        seed: w,
                        family: fam.label().to_string(),
                        risk: report.risk,
                        entropy: report.entropy,
                        kl_term: report.kl_term,
                        slack: report.slack,
                        jensen_min_gap: report.jensen_min_gap,
                    }
                })
                .collect::<Vec<_>>()
        })
        .collect()
}
