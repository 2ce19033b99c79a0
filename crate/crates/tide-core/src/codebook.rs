//! Chemistry-aware prototype codebook: binary drug fingerprints are
//! projected to the unit hypersphere, one prototype row per training
//! drug, and kept unit-norm by projection after every optimizer step.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TideError};
use crate::nn::{Mlp, ParamId, ParamStore, Tape, Var};
use crate::rng::derive;

const TAG_CODEBOOK: u64 = 0x20;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodebookMode {
    /// Prototypes trained jointly with everything else.
    Learned,
    /// Prototypes frozen at their fingerprint-projected initialization.
    Fixed,
    /// No codebook: the model routes through a plain K-way affine head.
    None,
}

impl CodebookMode {
    pub fn label(self) -> &'static str {
        match self {
            CodebookMode::Learned => "learned",
            CodebookMode::Fixed => "fixed",
            CodebookMode::None => "none",
        }
    }
}

/// Prototype matrix V (K×d, unit-norm rows) plus the fingerprint
/// projection that initialized it. Row order follows sorted drug ids and
/// therefore matches the dataset's training class indices.
#[derive(Debug)]
pub struct Codebook {
    pub mode: CodebookMode,
    pub k: usize,
    pub d: usize,
    pub f: usize,
    pub v: ParamId,
    pub proj: Mlp,
    pub drug_ids: Vec<String>,
}

impl Codebook {
    /// Build the codebook from one binary fingerprint row per drug.
    /// V = row-normalized MLP(F -> 2d -> d) applied to the fingerprints;
    /// V is a trainable parameter only in `Learned` mode.
    pub fn init(
        store: &mut ParamStore,
        drug_ids: &[String],
        fingerprints: &Array2<f64>,
        d: usize,
        mode: CodebookMode,
        seed: u64,
    ) -> Result<Codebook> {
        let k = drug_ids.len();
        if k < 2 {
            return Err(TideError::config(format!("codebook needs K >= 2 drugs, got {k}")));
        }
        if fingerprints.nrows() != k {
            return Err(TideError::config(format!(
                "{} fingerprint rows for {k} drug ids",
                fingerprints.nrows()
            )));
        }
        if fingerprints.iter().any(|&x| x != 0.0 && x != 1.0) {
            return Err(TideError::config("fingerprints must be binary"));
        }
        let mut sorted: Vec<usize> = (0..k).collect();
        sorted.sort_by(|&a, &b| drug_ids[a].cmp(&drug_ids[b]));
        for w in sorted.windows(2) {
            if drug_ids[w[0]] == drug_ids[w[1]] {
                return Err(TideError::config(format!(
                    "duplicate drug id {:?} in codebook",
                    drug_ids[w[0]]
                )));
            }
        }
        let f = fingerprints.ncols();
        let ordered_ids: Vec<String> = sorted.iter().map(|&i| drug_ids[i].clone()).collect();
        let mut ordered_fp = Array2::zeros((k, f));
        for (row, &i) in sorted.iter().enumerate() {
            ordered_fp.row_mut(row).assign(&fingerprints.row(i));
        }

        let mut rng = derive(seed, &[TAG_CODEBOOK, 0]);
        let proj = Mlp::new(store, &mut rng, "codebook.proj", &[f, 2 * d, d]);
        let mut v = proj.infer(store, &ordered_fp);
        normalize_rows_in_place(&mut v)?;
        let trainable = mode == CodebookMode::Learned;
        let v = store.add("codebook.v", v, trainable);
        Ok(Codebook {
            mode,
            k,
            d,
            f,
            v,
            proj,
            drug_ids: ordered_ids,
        })
    }

    pub fn row_of(&self, drug_id: &str) -> Option<usize> {
        self.drug_ids.iter().position(|d| d == drug_id)
    }

    /// Project every prototype back onto the unit sphere. Idempotent.
    pub fn renormalize_rows(&self, store: &mut ParamStore) -> Result<()> {
        let mut v = store.get(self.v).clone();
        normalize_rows_in_place(&mut v)?;
        store.set(self.v, v);
        Ok(())
    }

    /// Cosine logits against the prototypes on tape: rows of `h` are
    /// L2-normalized, multiplied by V^T, and scaled by 1/tau. Gradients
    /// flow into both `h` and (when trainable) V.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, h: Var, tau: f64) -> Result<Var> {
        if tau <= 0.0 {
            return Err(TideError::domain(format!("temperature must be positive, got {tau}")));
        }
        let hn = tape.row_l2_normalize(h);
        let v = tape.param(store, self.v);
        let sim = tape.matmul_nt(hn, v);
        Ok(tape.scale(sim, 1.0 / tau))
    }
}

fn normalize_rows_in_place(v: &mut Array2<f64>) -> Result<()> {
    for (i, mut row) in v.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm < 1e-12 {
            return Err(TideError::numerical(format!(
                "codebook row {i} has zero norm, cannot renormalize"
            )));
        }
        row.mapv_inplace(|x| x / norm);
    }
    Ok(())
}

/// P = Softmax(V.h / (tau * |h|)): the prototype-similarity distribution
/// for one embedding. With unit-norm rows the logits are cosines / tau.
pub fn codebook_distribution(v: &Array2<f64>, h: &Array1<f64>, tau: f64) -> Result<Array1<f64>> {
    if tau <= 0.0 {
        return Err(TideError::domain(format!("temperature must be positive, got {tau}")));
    }
    if v.ncols() != h.len() {
        return Err(TideError::config(format!(
            "embedding dim {} does not match codebook dim {}",
            h.len(),
            v.ncols()
        )));
    }
    let norm = h.dot(h).sqrt();
    if norm < 1e-12 {
        return Err(TideError::domain("zero embedding has no codebook distribution"));
    }
    let logits = v.dot(h) / (tau * norm);
    Ok(softmax(&logits))
}

fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p = logits.mapv(|x| (x - max).exp());
    let z = p.sum();
    p.mapv_inplace(|x| x / z);
    p
}
