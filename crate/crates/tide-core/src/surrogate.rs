//! Perturbation-response surrogate: predicts perturbed expression from a
//! control profile, a drug fingerprint, and a normalized dose. After
//! training it is frozen and serves the teacher two encodings: the
//! cell-type encoding h_C (basal encoder output) and the dose embedding
//! e_delta. Held-out evaluation splits drug-cell combinations, never
//! individual samples.

use ndarray::{Array1, Array2};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Result, TideError};
use crate::io;
use crate::nn::{Adam, Mlp, ParamStore, Tape};
use crate::rng::derive;
use crate::synthworld::{Dataset, Sample};

const TAG_SURROGATE: u64 = 0x30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    /// Basal (cell-type) encoder width e: two layers G -> e -> e.
    pub basal_width: usize,
    /// Drug embedding dim d_e, reached via two layers F -> 2d_e -> d_e.
    pub drug_embed_dim: usize,
    /// Dose embedding dim d_delta, a single linear layer on [0,1].
    pub dose_embed_dim: usize,
    /// Decoder hidden width between the combined encoding and G genes.
    pub decoder_hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Fraction of drug-cell combinations held out for R2/LogFC.
    pub holdout_fraction: f64,
    /// Upper dose for [0,1] normalization; None means the dataset max.
    pub max_dose: Option<f64>,
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            basal_width: 64,
            drug_embed_dim: 32,
            dose_embed_dim: 8,
            decoder_hidden: 128,
            lr: 3e-3,
            epochs: 400,
            holdout_fraction: 0.2,
            max_dose: None,
            seed: 0,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("basal_width", self.basal_width),
            ("drug_embed_dim", self.drug_embed_dim),
            ("dose_embed_dim", self.dose_embed_dim),
            ("decoder_hidden", self.decoder_hidden),
            ("epochs", self.epochs),
        ] {
            if v < 1 {
                return Err(TideError::config(format!("{name} must be >= 1")));
            }
        }
        if !(self.lr > 0.0) {
            return Err(TideError::config("surrogate lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(TideError::config("holdout_fraction must be in [0,1)"));
        }
        Ok(())
    }
}

/// Map a dose onto [0,1]. The whole pipeline shares this convention.
pub fn normalize_dose(dose: f64, max_dose: f64) -> Result<f64> {
    if !(max_dose > 0.0) {
        return Err(TideError::domain(format!("max_dose must be positive, got {max_dose}")));
    }
    if !(0.0..=max_dose).contains(&dose) {
        return Err(TideError::domain(format!(
            "dose {dose} outside [0, {max_dose}]"
        )));
    }
    Ok(dose / max_dose)
}

/// Pick a uniformly random control of the perturbed sample's cell type;
/// returns (X_c, X_R).
pub fn pair_with_control(
    perturbed: &Sample,
    controls: &[&Sample],
    rng: &mut impl Rng,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let x_r = perturbed.rna.as_ref().ok_or_else(|| {
        TideError::data(format!("sample {} has no transcriptome", perturbed.sample_id))
    })?;
    let candidates: Vec<&&Sample> = controls
        .iter()
        .filter(|c| c.cell_id == perturbed.cell_id)
        .collect();
    let chosen = candidates.choose(rng).ok_or_else(|| {
        TideError::data(format!("no control of cell type {}", perturbed.cell_id))
    })?;
    let x_c = chosen.rna.as_ref().ok_or_else(|| {
        TideError::data(format!("control {} has no transcriptome", chosen.sample_id))
    })?;
    Ok((x_c.clone(), x_r.clone()))
}

/// Pooled coefficient of determination over all entries; exactly 0 for
/// the mean predictor and exactly 1 for a perfect one.
pub fn r_squared(target: &Array2<f64>, pred: &Array2<f64>) -> f64 {
    assert_eq!(target.dim(), pred.dim());
    let mean = target.mean().unwrap_or(0.0);
    let ss_res: f64 = target.iter().zip(pred.iter()).map(|(y, p)| (y - p) * (y - p)).sum();
    let ss_tot: f64 = target.iter().map(|y| (y - mean) * (y - mean)).sum();
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { f64::NEG_INFINITY };
    }
    1.0 - ss_res / ss_tot
}

/// Pearson correlation between predicted and observed log2 fold change
/// over the paired control, pseudocount 1e-6. Negative expressions are
/// floored at zero before the log so the metric stays finite.
pub fn logfc_correlation(
    control: &Array2<f64>,
    target: &Array2<f64>,
    pred: &Array2<f64>,
) -> f64 {
    const EPS: f64 = 1e-6;
    let lfc = |x: f64, c: f64| ((x.max(0.0) + EPS) / (c.max(0.0) + EPS)).log2();
    let a: Vec<f64> = target
        .iter()
        .zip(control.iter())
        .map(|(&x, &c)| lfc(x, c))
        .collect();
    let b: Vec<f64> = pred
        .iter()
        .zip(control.iter())
        .map(|(&x, &c)| lfc(x, c))
        .collect();
    pearson(&a, &b)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    cov / (va * vb).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateEpoch {
    pub epoch: usize,
    pub mse: f64,
    pub r2: f64,
    pub logfc: f64,
}

/// Trained (or in-training) surrogate. Teacher-facing extractors refuse
/// to run until the state is frozen.
#[derive(Debug)]
pub struct Surrogate {
    pub config: SurrogateConfig,
    pub n_genes: usize,
    pub fingerprint_len: usize,
    pub max_dose: f64,
    pub store: ParamStore,
    pub basal: Mlp,
    pub drug: Mlp,
    pub dose: Mlp,
    pub decoder: Mlp,
    pub frozen: bool,
    pub metrics: Vec<SurrogateEpoch>,
}

impl Surrogate {
    pub fn new(
        n_genes: usize,
        fingerprint_len: usize,
        max_dose: f64,
        config: &SurrogateConfig,
    ) -> Result<Surrogate> {
        config.validate()?;
        if !(max_dose > 0.0) {
            return Err(TideError::config("surrogate max_dose must be positive"));
        }
        let mut store = ParamStore::new();
        let mut rng = derive(config.seed, &[TAG_SURROGATE, 0]);
        let e = config.basal_width;
        let de = config.drug_embed_dim;
        let dd = config.dose_embed_dim;
        let basal = Mlp::new(&mut store, &mut rng, "surrogate.basal", &[n_genes, e, e]);
        let drug = Mlp::new(
            &mut store,
            &mut rng,
            "surrogate.drug",
            &[fingerprint_len, 2 * de, de],
        );
        let dose = Mlp::new(&mut store, &mut rng, "surrogate.dose", &[1, dd]);
        let decoder = Mlp::new(
            &mut store,
            &mut rng,
            "surrogate.decoder",
            &[e + de + dd, config.decoder_hidden, n_genes],
        );
        Ok(Surrogate {
            config: config.clone(),
            n_genes,
            fingerprint_len,
            max_dose,
            store,
            basal,
            drug,
            dose,
            decoder,
            frozen: false,
            metrics: Vec::new(),
        })
    }

    fn check_dims(&self, x_c: &Array2<f64>, fingerprints: &Array2<f64>, doses: &[f64]) -> Result<()> {
        if x_c.ncols() != self.n_genes
            || fingerprints.ncols() != self.fingerprint_len
            || x_c.nrows() != fingerprints.nrows()
            || x_c.nrows() != doses.len()
        {
            return Err(TideError::config(format!(
                "surrogate input dims ({}x{}, {}x{}, {} doses) do not match G={} F={}",
                x_c.nrows(),
                x_c.ncols(),
                fingerprints.nrows(),
                fingerprints.ncols(),
                doses.len(),
                self.n_genes,
                self.fingerprint_len
            )));
        }
        Ok(())
    }

    fn dose_column(&self, doses: &[f64]) -> Result<Array2<f64>> {
        let mut col = Array2::zeros((doses.len(), 1));
        for (i, &d) in doses.iter().enumerate() {
            col[[i, 0]] = normalize_dose(d, self.max_dose)?;
        }
        Ok(col)
    }

    /// X_hat_R for a batch of (control profile, fingerprint, dose) rows.
    pub fn predict_response(
        &self,
        x_c: &Array2<f64>,
        fingerprints: &Array2<f64>,
        doses: &[f64],
    ) -> Result<Array2<f64>> {
        self.check_dims(x_c, fingerprints, doses)?;
        let z_c = self.basal.infer(&self.store, x_c);
        let e_d = self.drug.infer(&self.store, fingerprints);
        let e_dose = self.dose.infer(&self.store, &self.dose_column(doses)?);
        let mut combined = Array2::zeros((x_c.nrows(), z_c.ncols() + e_d.ncols() + e_dose.ncols()));
        for (dst, src) in [(0, &z_c), (z_c.ncols(), &e_d), (z_c.ncols() + e_d.ncols(), &e_dose)] {
            combined
                .slice_mut(ndarray::s![.., dst..dst + src.ncols()])
                .assign(src);
        }
        Ok(self.decoder.infer(&self.store, &combined))
    }

    fn require_frozen(&self, what: &str) -> Result<()> {
        if !self.frozen {
            return Err(TideError::usage(format!(
                "{what} requires a frozen surrogate; train it first"
            )));
        }
        Ok(())
    }

    /// Cell-type encoding h_C = basal encoder output on a control profile.
    pub fn extract_cell_encoding(&self, x_c: &Array2<f64>) -> Result<Array2<f64>> {
        self.require_frozen("extract_cell_encoding")?;
        if x_c.ncols() != self.n_genes {
            return Err(TideError::config(format!(
                "cell encoding input has {} genes, surrogate expects {}",
                x_c.ncols(),
                self.n_genes
            )));
        }
        Ok(self.basal.infer(&self.store, x_c))
    }

    /// Dose embedding e_delta for raw (unnormalized) doses.
    pub fn extract_dose_embedding(&self, doses: &[f64]) -> Result<Array2<f64>> {
        self.require_frozen("extract_dose_embedding")?;
        Ok(self.dose.infer(&self.store, &self.dose_column(doses)?))
    }
}

struct Row {
    x_c_source: RowControl,
    x_r: Array1<f64>,
    fingerprint: Array1<f64>,
    dose: f64,
}

enum RowControl {
    /// Re-paired each epoch from the same-cell control pool.
    SameCell(String),
    /// Fixed profile (the control sample itself for dose-0 anchors).
    Fixed(Array1<f64>),
}

fn control_pools(ds: &Dataset) -> Result<std::collections::BTreeMap<String, Vec<Array1<f64>>>> {
    let mut pools: std::collections::BTreeMap<String, Vec<Array1<f64>>> = Default::default();
    for c in ds.controls() {
        if let Some(r) = &c.rna {
            pools.entry(c.cell_id.clone()).or_default().push(r.clone());
        }
    }
    if pools.is_empty() {
        return Err(TideError::data("dataset has no control transcriptomes"));
    }
    Ok(pools)
}

/// Train on paired transcriptomes plus dose-0 control anchors; hold out
/// a fraction of drug-cell combinations for R2/LogFC reporting; freeze.
pub fn train_surrogate(ds: &Dataset, config: &SurrogateConfig) -> Result<Surrogate> {
    config.validate()?;
    let grid_max = ds
        .config
        .dose_grid
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let max_dose = config.max_dose.unwrap_or(grid_max);
    let mut surrogate = Surrogate::new(
        ds.config.n_genes,
        ds.config.fingerprint_len,
        max_dose,
        config,
    )?;

    let pools = control_pools(ds)?;
    let paired: Vec<&Sample> = ds.paired().collect();
    if paired.is_empty() {
        return Err(TideError::data(
            "no paired transcriptomes; surrogate needs pair_fraction > 0",
        ));
    }

    // Drug-cell combination split.
    let mut combos: Vec<(String, String)> = paired
        .iter()
        .map(|s| (s.drug_id.clone().expect("paired samples are treated"), s.cell_id.clone()))
        .collect();
    combos.sort();
    combos.dedup();
    let mut rng = derive(config.seed, &[TAG_SURROGATE, 1]);
    for i in (1..combos.len()).rev() {
        let j = rng.random_range(0..=i);
        combos.swap(i, j);
    }
    let n_holdout = ((combos.len() as f64) * config.holdout_fraction).round() as usize;
    let n_holdout = n_holdout.min(combos.len().saturating_sub(1));
    let holdout: std::collections::BTreeSet<(String, String)> =
        combos.iter().take(n_holdout).cloned().collect();

    let row_of = |s: &&Sample| -> Result<Row> {
        let drug = ds.world.drug(s.drug_id.as_deref().expect("treated"))?;
        Ok(Row {
            x_c_source: RowControl::SameCell(s.cell_id.clone()),
            x_r: s.rna.clone().expect("paired samples carry rna"),
            fingerprint: drug.fingerprint.clone(),
            dose: s.dose_rna.expect("paired samples carry an rna dose"),
        })
    };
    let mut train_rows = Vec::new();
    let mut eval_rows = Vec::new();
    for s in &paired {
        let key = (s.drug_id.clone().unwrap(), s.cell_id.clone());
        if holdout.contains(&key) {
            eval_rows.push(row_of(s)?);
        } else {
            train_rows.push(row_of(s)?);
        }
    }
    if train_rows.is_empty() {
        return Err(TideError::data("surrogate train split is empty"));
    }
    // Dose-0 anchors: each control predicts itself at dose 0 under
    // several random fingerprints, teaching the decoder that dose 0
    // means "no perturbation" whatever the drug looks like.
    let mut anchor_rng = derive(config.seed, &[TAG_SURROGATE, 2]);
    for c in ds.controls() {
        if let Some(r) = &c.rna {
            for _ in 0..4 {
                let fp = Array1::from_shape_fn(ds.config.fingerprint_len, |_| {
                    if anchor_rng.random_bool(0.5) {
                        1.0
                    } else {
                        0.0
                    }
                });
                train_rows.push(Row {
                    x_c_source: RowControl::Fixed(r.clone()),
                    x_r: r.clone(),
                    fingerprint: fp,
                    dose: 0.0,
                });
            }
        }
    }

    let g = ds.config.n_genes;
    let f_len = ds.config.fingerprint_len;
    let assemble = |rows: &[Row], rng: &mut rand_chacha::ChaCha8Rng| -> Result<(Array2<f64>, Array2<f64>, Array2<f64>, Vec<f64>)> {
        let n = rows.len();
        let mut x_c = Array2::zeros((n, g));
        let mut x_r = Array2::zeros((n, g));
        let mut fp = Array2::zeros((n, f_len));
        let mut doses = Vec::with_capacity(n);
        for (i, row) in rows.iter().enumerate() {
            let control = match &row.x_c_source {
                RowControl::Fixed(r) => r.clone(),
                RowControl::SameCell(cell) => {
                    let pool = pools.get(cell).ok_or_else(|| {
                        TideError::data(format!("no control of cell type {cell}"))
                    })?;
                    pool[rng.random_range(0..pool.len())].clone()
                }
            };
            x_c.row_mut(i).assign(&control);
            x_r.row_mut(i).assign(&row.x_r);
            fp.row_mut(i).assign(&row.fingerprint);
            doses.push(row.dose);
        }
        Ok((x_c, x_r, fp, doses))
    };

    let mut eval_pair_rng = derive(config.seed, &[TAG_SURROGATE, 3]);
    let eval_batch = if eval_rows.is_empty() {
        None
    } else {
        Some(assemble(&eval_rows, &mut eval_pair_rng)?)
    };

    let mut adam = Adam::new(&surrogate.store, config.lr);
    for epoch in 1..=config.epochs {
        let mut pair_rng = derive(config.seed, &[TAG_SURROGATE, 4, epoch as u64]);
        let (x_c, x_r, fp, doses) = assemble(&train_rows, &mut pair_rng)?;
        let mut tape = Tape::new();
        let xc_v = tape.constant(x_c);
        let fp_v = tape.constant(fp);
        let dose_v = tape.constant(surrogate.dose_column(&doses)?);
        let target = tape.constant(x_r);
        let z_c = surrogate.basal.forward(&mut tape, &surrogate.store, xc_v);
        let e_d = surrogate.drug.forward(&mut tape, &surrogate.store, fp_v);
        let e_dose = surrogate.dose.forward(&mut tape, &surrogate.store, dose_v);
        let cat = tape.concat_cols(z_c, e_d);
        let cat = tape.concat_cols(cat, e_dose);
        let pred = surrogate.decoder.forward(&mut tape, &surrogate.store, cat);
        let diff = tape.sub(pred, target);
        let sq = tape.mul(diff, diff);
        let loss = tape.mean_all(sq);
        let mse = tape.scalar_value(loss);
        let grads = tape.backward(loss, surrogate.store.len());
        adam.step(&mut surrogate.store, &grads);

        let (r2, logfc) = match &eval_batch {
            Some((x_c, x_r, fp, doses)) => {
                let pred = surrogate.predict_response(x_c, fp, doses)?;
                (r_squared(x_r, &pred), logfc_correlation(x_c, x_r, &pred))
            }
            None => (f64::NAN, f64::NAN),
        };
        surrogate.metrics.push(SurrogateEpoch { epoch, mse, r2, logfc });
    }
    surrogate.frozen = true;
    Ok(surrogate)
}

#[derive(Serialize, Deserialize)]
struct SurrogateManifest {
    kind: String,
    config: SurrogateConfig,
    config_hash: String,
    n_genes: usize,
    fingerprint_len: usize,
    max_dose: f64,
    frozen: bool,
    metrics: Vec<SurrogateEpoch>,
    params: Vec<io::BlobEntry>,
}

const PARAMS_BLOB: &str = "params.f32";

pub fn save_surrogate(s: &Surrogate, dir: &Path, force: bool) -> Result<()> {
    io::prepare_dir(dir, force)?;
    let params = io::save_store(&dir.join(PARAMS_BLOB), &s.store, false)?;
    let manifest = SurrogateManifest {
        kind: "surrogate".into(),
        config: s.config.clone(),
        config_hash: io::config_hash(&s.config)?,
        n_genes: s.n_genes,
        fingerprint_len: s.fingerprint_len,
        max_dose: s.max_dose,
        frozen: s.frozen,
        metrics: s.metrics.clone(),
        params,
    };
    io::write_manifest(dir, &manifest)
}

pub fn load_surrogate(dir: &Path) -> Result<Surrogate> {
    let manifest: SurrogateManifest = io::read_manifest(dir)?;
    if manifest.kind != "surrogate" {
        return Err(TideError::data(format!(
            "{} holds a {} checkpoint, not a surrogate",
            dir.display(),
            manifest.kind
        )));
    }
    let mut s = Surrogate::new(
        manifest.n_genes,
        manifest.fingerprint_len,
        manifest.max_dose,
        &manifest.config,
    )?;
    io::load_store(&dir.join(PARAMS_BLOB), &manifest.params, &mut s.store, false)?;
    s.frozen = manifest.frozen;
    s.metrics = manifest.metrics;
    Ok(s)
}
