//! Model assembly: shared image encoder, FiLM conditioner, teacher heads,
//! student head, SSL head, and contrastive projections, all in one
//! `ParamStore` so a single optimizer step covers every path.

use ndarray::{Array1, Array2, ArrayView3, s};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::{codebook_distribution, Codebook, CodebookMode};
use crate::error::{Result, TideError};
use crate::nn::layers::{BatchNorm, Linear, Mlp};
use crate::nn::params::{ParamId, ParamStore};
use crate::nn::tape::{Tape, Var};
use crate::rng::derive;
use crate::surrogate::{normalize_dose, Surrogate};
use crate::synthworld::{Dataset, Sample};

use super::{TrainConfig, TAG_DISTILL};

/// Hidden width of the FiLM dose head.
pub const FILM_HIDDEN: usize = 128;

/// Everything needed to rebuild the architecture without the dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub n_genes: usize,
    pub fingerprint_len: usize,
    pub n_classes: usize,
    pub surrogate_cell_dim: usize,
    pub surrogate_dose_dim: usize,
}

/// Rows are images, columns the flattened (channel, y, x) patch pixels;
/// patches are emitted image-major, then row-major over the patch grid.
pub fn patchify(images: &[ArrayView3<f64>], patch: usize) -> Result<Array2<f64>> {
    let Some(first) = images.first() else {
        return Err(TideError::data("patchify: empty image batch"));
    };
    let (c, h, w) = first.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(TideError::config(format!(
            "patch size {patch} must divide image {h}x{w}"
        )));
    }
    let (py, px) = (h / patch, w / patch);
    let n_patches = py * px;
    let cols = c * patch * patch;
    let mut out = Array2::zeros((images.len() * n_patches, cols));
    for (i, img) in images.iter().enumerate() {
        if img.dim() != (c, h, w) {
            return Err(TideError::config(format!(
                "patchify: image {i} has shape {:?}, expected {:?}",
                img.dim(),
                (c, h, w)
            )));
        }
        for gy in 0..py {
            for gx in 0..px {
                let row = i * n_patches + gy * px + gx;
                let mut col = 0;
                for chan in 0..c {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            out[[row, col]] = img[[chan, gy * patch + dy, gx * patch + dx]];
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug)]
pub struct Model {
    pub cfg: TrainConfig,
    pub dims: ModelDims,
    /// Shared [0,1] dose normalizer, identical to the surrogate's.
    pub max_dose: f64,
    pub store: ParamStore,
    pub patch_embed: Linear,
    pub head1: Linear,
    pub head2: Linear,
    pub film_hidden: Linear,
    pub film_gamma: Linear,
    pub film_beta: Linear,
    /// Scalar dose-regression probe on the FiLM hidden features; kept out
    /// of the loss.
    pub film_probe: Linear,
    pub rna_enc: Mlp,
    pub rna_proj: Linear,
    pub cell_proj: Linear,
    pub fusion1: Linear,
    pub fusion_bn: BatchNorm,
    pub fusion2: Linear,
    pub student1: Linear,
    pub student2: Linear,
    pub ssl1: Linear,
    pub ssl2: Linear,
    pub nce_img: Linear,
    pub nce_drug: Linear,
    pub nce_rna: Linear,
    /// Present unless codebook_mode = none.
    pub codebook: Option<Codebook>,
    /// Plain affine K-way head used when codebook_mode = none.
    pub classify: Option<Linear>,
    /// Training drugs in class order.
    pub drug_ids: Vec<String>,
    /// Binary fingerprints in the same order, kept for checkpointing.
    pub fingerprints: Array2<f64>,
}

impl Model {
    pub fn new(ds: &Dataset, surrogate: &Surrogate, cfg: &TrainConfig) -> Result<Model> {
        let (c, h, w) = ds.config.image_shape;
        if ds.config.n_genes != surrogate.n_genes {
            return Err(TideError::config(format!(
                "dataset has {} genes but the surrogate was trained on {}",
                ds.config.n_genes, surrogate.n_genes
            )));
        }
        let drug_ids = ds.splits.train_drugs.clone();
        if drug_ids.len() < 2 {
            return Err(TideError::data("need at least two training drugs"));
        }
        let mut fingerprints = Array2::zeros((drug_ids.len(), ds.config.fingerprint_len));
        for (row, id) in drug_ids.iter().enumerate() {
            fingerprints.row_mut(row).assign(&ds.world.drug(id)?.fingerprint);
        }
        let dims = ModelDims {
            channels: c,
            height: h,
            width: w,
            n_genes: ds.config.n_genes,
            fingerprint_len: ds.config.fingerprint_len,
            n_classes: drug_ids.len(),
            surrogate_cell_dim: surrogate.config.basal_width,
            surrogate_dose_dim: surrogate.config.dose_embed_dim,
        };
        let model = Model::build(dims, surrogate.max_dose, drug_ids, fingerprints, cfg)?;
        for (row, id) in model.drug_ids.iter().enumerate() {
            if ds.train_class_of(id) != Some(row) {
                return Err(TideError::config(format!(
                    "class order mismatch for drug {id}"
                )));
            }
        }
        Ok(model)
    }

    /// Deterministic construction from recorded metadata; the checkpoint
    /// loader uses the same path so parameter names and ids line up.
    pub fn build(
        dims: ModelDims,
        max_dose: f64,
        drug_ids: Vec<String>,
        fingerprints: Array2<f64>,
        cfg: &TrainConfig,
    ) -> Result<Model> {
        cfg.validate()?;
        if !(max_dose > 0.0) {
            return Err(TideError::config("max_dose must be positive"));
        }
        if dims.height % cfg.patch != 0 || dims.width % cfg.patch != 0 {
            return Err(TideError::config(format!(
                "patch size {} must divide image {}x{}",
                cfg.patch, dims.height, dims.width
            )));
        }
        let d = cfg.d;
        let patch_cols = dims.channels * cfg.patch * cfg.patch;
        let mut store = ParamStore::new();
        let mut rng: ChaCha8Rng = derive(cfg.seed, &[TAG_DISTILL, 0]);

        let patch_embed = Linear::new(&mut store, &mut rng, "encoder.patch", patch_cols, d, true);
        let head1 = Linear::new(&mut store, &mut rng, "encoder.head1", d, d, true);
        let head2 = Linear::new(&mut store, &mut rng, "encoder.head2", d, d, true);

        let film_hidden = Linear::new(&mut store, &mut rng, "film.hidden", 1, FILM_HIDDEN, true);
        // Identity modulation at init: gamma = 1, beta = 0 regardless of dose.
        let film_gamma = Linear::new_const(&mut store, "film.gamma", FILM_HIDDEN, d, 0.0, 1.0);
        let film_beta = Linear::new_const(&mut store, "film.beta", FILM_HIDDEN, d, 0.0, 0.0);
        let film_probe = Linear::new(&mut store, &mut rng, "film.probe", FILM_HIDDEN, 1, true);

        let rna_enc = Mlp::new(&mut store, &mut rng, "teacher.rna", &[dims.n_genes, d, d]);
        let rna_proj = Linear::new(
            &mut store,
            &mut rng,
            "teacher.rna_proj",
            d + dims.surrogate_dose_dim,
            d,
            true,
        );
        let cell_proj = Linear::new(
            &mut store,
            &mut rng,
            "teacher.cell_proj",
            dims.surrogate_cell_dim,
            d,
            true,
        );
        let fusion1 = Linear::new(&mut store, &mut rng, "teacher.fusion1", 3 * d, 2 * d, true);
        let fusion_bn = BatchNorm::new(&mut store, "teacher.fusion_bn", 2 * d);
        let fusion2 = Linear::new(&mut store, &mut rng, "teacher.fusion2", 2 * d, d, true);

        let student1 = Linear::new(&mut store, &mut rng, "student.head1", d, d, true);
        let student2 = Linear::new(&mut store, &mut rng, "student.head2", d, d, true);

        let ssl1 = Linear::new(&mut store, &mut rng, "ssl.head1", d, d, true);
        let ssl2 = Linear::new(&mut store, &mut rng, "ssl.head2", d, cfg.ssl_out_dim, true);

        let nce_img = Linear::new(&mut store, &mut rng, "nce.img", d, cfg.proj_dim, true);
        let nce_drug = Linear::new(
            &mut store,
            &mut rng,
            "nce.drug",
            dims.fingerprint_len,
            cfg.proj_dim,
            true,
        );
        let nce_rna = Linear::new(&mut store, &mut rng, "nce.rna", dims.n_genes, cfg.proj_dim, true);

        let (codebook, classify) = match cfg.codebook_mode {
            CodebookMode::None => {
                let head = Linear::new(
                    &mut store,
                    &mut rng,
                    "head.classify",
                    d,
                    dims.n_classes,
                    true,
                );
                (None, Some(head))
            }
            mode => {
                let cb = Codebook::init(&mut store, &drug_ids, &fingerprints, d, mode, cfg.seed)?;
                (Some(cb), None)
            }
        };

        Ok(Model {
            cfg: cfg.clone(),
            dims,
            max_dose,
            store,
            patch_embed,
            head1,
            head2,
            film_hidden,
            film_gamma,
            film_beta,
            film_probe,
            rna_enc,
            rna_proj,
            cell_proj,
            fusion1,
            fusion_bn,
            fusion2,
            student1,
            student2,
            ssl1,
            ssl2,
            nce_img,
            nce_drug,
            nce_rna,
            codebook,
            classify,
            drug_ids,
            fingerprints,
        })
    }

    pub fn n_patches(&self) -> usize {
        (self.dims.height / self.cfg.patch) * (self.dims.width / self.cfg.patch)
    }

    /// Patch matrix for a batch, validated against the model's image shape.
    pub fn patch_rows(&self, images: &[ArrayView3<f64>]) -> Result<Array2<f64>> {
        if let Some(img) = images.first() {
            let expect = (self.dims.channels, self.dims.height, self.dims.width);
            if img.dim() != expect {
                return Err(TideError::config(format!(
                    "image shape {:?} does not match model {:?}",
                    img.dim(),
                    expect
                )));
            }
        }
        patchify(images, self.cfg.patch)
    }

    /// Raw (pre-FiLM) image encoding h_raw on tape: per-patch embed,
    /// mean-pool over patches, two-layer head.
    pub fn encode_tape(&self, tape: &mut Tape, store: &ParamStore, patches: Var) -> Var {
        let e = self.patch_embed.forward(tape, store, patches);
        let pooled = tape.mean_pool_rows(e, self.n_patches());
        let h = self.head1.forward(tape, store, pooled);
        let h = tape.relu(h);
        self.head2.forward(tape, store, h)
    }

    pub fn encode_infer(&self, store: &ParamStore, patches: &Array2<f64>) -> Array2<f64> {
        let e = self.patch_embed.infer(store, patches);
        let np = self.n_patches();
        let mut pooled = Array2::zeros((e.nrows() / np, e.ncols()));
        for r in 0..pooled.nrows() {
            let block = e.slice(s![r * np..(r + 1) * np, ..]);
            pooled
                .row_mut(r)
                .assign(&(block.sum_axis(ndarray::Axis(0)) / np as f64));
        }
        let mut h = self.head1.infer(store, &pooled);
        h.mapv_inplace(|v| v.max(0.0));
        self.head2.infer(store, &h)
    }

    /// FiLM on tape: gamma(dose) (.) h_raw + beta(dose). Doses are already
    /// normalized to [0,1]. Identity when the dose ablation is active.
    pub fn film_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h_raw: Var,
        doses_norm: &Array2<f64>,
    ) -> Var {
        if self.cfg.no_dose {
            return h_raw;
        }
        let dose = tape.constant(doses_norm.clone());
        let hidden = self.film_hidden.forward(tape, store, dose);
        let hidden = tape.relu(hidden);
        let gamma = self.film_gamma.forward(tape, store, hidden);
        let beta = self.film_beta.forward(tape, store, hidden);
        let scaled = tape.mul(h_raw, gamma);
        tape.add(scaled, beta)
    }

    /// Plain-array FiLM conditioning; doses must lie in [0,1].
    pub fn film_condition(&self, h_raw: &Array2<f64>, doses_norm: &[f64]) -> Result<Array2<f64>> {
        if doses_norm.len() != h_raw.nrows() {
            return Err(TideError::config("film: one dose per row required"));
        }
        for &d in doses_norm {
            if !(0.0..=1.0).contains(&d) {
                return Err(TideError::domain(format!(
                    "film dose {d} outside [0,1]; normalize it first"
                )));
            }
        }
        if self.cfg.no_dose {
            return Ok(h_raw.clone());
        }
        let col = Array2::from_shape_fn((doses_norm.len(), 1), |(i, _)| doses_norm[i]);
        let mut hidden = self.film_hidden.infer(&self.store, &col);
        hidden.mapv_inplace(|v| v.max(0.0));
        let gamma = self.film_gamma.infer(&self.store, &hidden);
        let beta = self.film_beta.infer(&self.store, &hidden);
        Ok(h_raw * &gamma + &beta)
    }

    /// Scalar output of the dose head (the auxiliary regression probe).
    pub fn dose_probe(&self, doses_norm: &[f64]) -> Array1<f64> {
        let col = Array2::from_shape_fn((doses_norm.len(), 1), |(i, _)| doses_norm[i]);
        let mut hidden = self.film_hidden.infer(&self.store, &col);
        hidden.mapv_inplace(|v| v.max(0.0));
        let out = self.film_probe.infer(&self.store, &hidden);
        out.column(0).to_owned()
    }

    /// Student embedding h_s: two linear layers on the shared encoding,
    /// L2-normalized.
    pub fn student_tape(&self, tape: &mut Tape, store: &ParamStore, h_raw: Var) -> Var {
        let h = self.student1.forward(tape, store, h_raw);
        let h = tape.relu(h);
        let h = self.student2.forward(tape, store, h);
        tape.row_l2_normalize(h)
    }

    /// Codebook (or affine-head) logits at temperature tau. Rows of `h`
    /// are L2-normalized first, so the logits are scale-invariant in h.
    /// `detached` blocks gradients into the prototype/head weights; the
    /// student path always uses it.
    pub fn class_logits_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        tau: f64,
        detached: bool,
    ) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(TideError::domain(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        let hn = tape.row_l2_normalize(h);
        if let Some(cb) = &self.codebook {
            let mut v = tape.param(store, cb.v);
            if detached {
                v = tape.detach(v);
            }
            let sim = tape.matmul_nt(hn, v);
            Ok(tape.scale(sim, 1.0 / tau))
        } else {
            let head = self.classify.as_ref().expect("either codebook or classify head");
            let mut w = tape.param(store, head.w);
            let mut b = tape.param(store, head.b.expect("classify head has a bias"));
            if detached {
                w = tape.detach(w);
                b = tape.detach(b);
            }
            let logits = tape.matmul(hn, w);
            let logits = tape.add_bias(logits, b);
            Ok(tape.scale(logits, 1.0 / tau))
        }
    }

    /// Class distribution for one embedding row, eval mode.
    pub fn class_distribution(&self, h: &Array1<f64>, tau: f64) -> Result<Array1<f64>> {
        if let Some(cb) = &self.codebook {
            codebook_distribution(self.store.get(cb.v), h, tau)
        } else {
            if !(tau > 0.0) {
                return Err(TideError::domain(format!(
                    "temperature must be positive, got {tau}"
                )));
            }
            let norm = h.dot(h).sqrt();
            if norm < 1e-12 {
                return Err(TideError::domain("zero embedding has no class distribution"));
            }
            let head = self.classify.as_ref().expect("either codebook or classify head");
            let hn = Array2::from_shape_fn((1, h.len()), |(_, j)| h[j] / norm);
            let logits = head.infer(&self.store, &hn);
            let row = logits.row(0).mapv(|v| v / tau);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps = row.mapv(|v| (v - max).exp());
            let z = exps.sum();
            Ok(exps / z)
        }
    }

    /// SSL projection head on tape (online path).
    pub fn ssl_head_tape(&self, tape: &mut Tape, store: &ParamStore, h_raw: Var) -> Var {
        let h = self.ssl1.forward(tape, store, h_raw);
        let h = tape.relu(h);
        self.ssl2.forward(tape, store, h)
    }

    /// Encoder + SSL head on plain arrays against an arbitrary store
    /// (used for the EMA target network).
    pub fn ssl_forward_infer(&self, store: &ParamStore, patches: &Array2<f64>) -> Array2<f64> {
        let h_raw = self.encode_infer(store, patches);
        let mut h = self.ssl1.infer(store, &h_raw);
        h.mapv_inplace(|v| v.max(0.0));
        self.ssl2.infer(store, &h)
    }

    /// Parameters mirrored by the EMA target: encoder + SSL head.
    pub fn ssl_tracked_ids(&self) -> Vec<ParamId> {
        let mut ids = self.patch_embed.param_ids();
        ids.extend(self.head1.param_ids());
        ids.extend(self.head2.param_ids());
        ids.extend(self.ssl1.param_ids());
        ids.extend(self.ssl2.param_ids());
        ids
    }

    /// The method-agnostic evaluation embedding: L2-normalized h_raw.
    pub fn embed_images(&self, images: &[ArrayView3<f64>]) -> Result<Array2<f64>> {
        let patches = self.patch_rows(images)?;
        let mut h = self.encode_infer(&self.store, &patches);
        for mut row in h.rows_mut() {
            let norm = row.dot(&row).sqrt().max(1e-12);
            row.mapv_inplace(|v| v / norm);
        }
        Ok(h)
    }

    /// Eval-mode teacher pass for one paired sample: running-statistics
    /// batch norm; dropout only when a mask RNG is supplied (train mode).
    /// Returns (h_t, P_t).
    pub fn teacher_forward(
        &self,
        surrogate: &Surrogate,
        sample: &Sample,
        control_rna: &Array1<f64>,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Array1<f64>, Array1<f64>)> {
        let rna = sample.rna.as_ref().ok_or_else(|| {
            TideError::usage("teacher_forward requires a paired sample with a transcriptome")
        })?;
        let dose_rna = sample
            .dose_rna
            .ok_or_else(|| TideError::usage("teacher_forward requires dose_rna on the sample"))?;
        let dose_image = sample
            .dose_image
            .ok_or_else(|| TideError::usage("teacher_forward requires dose_image on the sample"))?;

        let patches = self.patch_rows(&[sample.image.view()])?;
        let h_raw = self.encode_infer(&self.store, &patches);
        let delta_i = normalize_dose(dose_image, self.max_dose)?;
        let h_i = self.film_condition(&h_raw, &[delta_i])?;

        let rna_row = Array2::from_shape_fn((1, rna.len()), |(_, j)| rna[j]);
        let rna_h = self.rna_enc.infer(&self.store, &rna_row);
        let e_dose = if self.cfg.no_dose {
            Array2::zeros((1, self.dims.surrogate_dose_dim))
        } else {
            surrogate.extract_dose_embedding(&[dose_rna])?
        };
        let mut rna_cat = Array2::zeros((1, rna_h.ncols() + e_dose.ncols()));
        rna_cat.slice_mut(s![.., ..rna_h.ncols()]).assign(&rna_h);
        rna_cat.slice_mut(s![.., rna_h.ncols()..]).assign(&e_dose);
        let h_r = self.rna_proj.infer(&self.store, &rna_cat);

        let ctrl_row = Array2::from_shape_fn((1, control_rna.len()), |(_, j)| control_rna[j]);
        let cell_enc = surrogate.extract_cell_encoding(&ctrl_row)?;
        let h_c = self.cell_proj.infer(&self.store, &cell_enc);

        let d = self.cfg.d;
        let mut fused = Array2::zeros((1, 3 * d));
        fused.slice_mut(s![.., ..d]).assign(&h_i);
        fused.slice_mut(s![.., d..2 * d]).assign(&h_r);
        fused.slice_mut(s![.., 2 * d..]).assign(&h_c);

        let mut hidden = self.fusion1.infer(&self.store, &fused);
        hidden = self.fusion_bn.infer(&self.store, &hidden);
        hidden.mapv_inplace(|v| v.max(0.0));
        if let Some(rng) = dropout_rng {
            let mask =
                crate::nn::layers::dropout_mask(rng, hidden.nrows(), hidden.ncols(), self.cfg.dropout);
            hidden *= &mask;
        }
        let h_t = self.fusion2.infer(&self.store, &hidden);
        let h_t_row = h_t.row(0).to_owned();
        let p_t = self.class_distribution(&h_t_row, self.cfg.tau)?;
        Ok((h_t_row, p_t))
    }
}
