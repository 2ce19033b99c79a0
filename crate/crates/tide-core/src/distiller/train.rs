//! The training loop: weakly paired minibatches, per-epoch kNN checkpoint
//! selection, per-epoch CSV logging, and exact (f64) resume state.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::codebook::CodebookMode;
use crate::error::{Result, TideError};
use crate::eval::knn_select;
use crate::io::{
    config_hash, load_store, prepare_dir, read_f64_blob, read_manifest, save_store,
    write_f64_blob, write_manifest, BlobEntry,
};
use crate::nn::layers::dropout_mask;
use crate::nn::optim::Adam;
use crate::nn::params::ParamStore;
use crate::nn::tape::{Tape, Var};
use crate::rng::derive;
use crate::surrogate::{normalize_dose, Surrogate};
use crate::synthworld::{Dataset, Split};

use super::augment::augment_image;
use super::losses::{info_nce_symmetric, kl_distill, mean_cross_entropy};
use super::model::{Model, ModelDims};
use super::ssl::SslState;
use super::{BaselineKind, TrainConfig, TAG_DISTILL};

const SUB_SHUFFLE: u64 = 1;
const SUB_CONTROL: u64 = 2;
const SUB_DROPOUT: u64 = 3;
const SUB_AUG: u64 = 4;
const SUB_KNN: u64 = 5;

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub l_total: f64,
    pub l_distill: f64,
    pub l_teacher: f64,
    pub l_ssl: f64,
    pub l_aux: f64,
    pub knn_acc: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Model carrying the best-kNN checkpoint parameters.
    pub model: Model,
    pub log: Vec<EpochRow>,
    pub best_epoch: usize,
    pub best_knn: f64,
    /// Batches where every sample was unpaired (distill/teacher terms 0).
    pub unpaired_batches: usize,
    /// SSL batches with fewer than 2 samples (degenerate but defined).
    pub small_ssl_batches: usize,
    /// Contrastive batches skipped for lack of 2 aligned pairs.
    pub skipped_nce_batches: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DistillerManifest {
    pub format_version: u32,
    pub kind: String,
    pub config: TrainConfig,
    pub config_hash: String,
    pub dataset_config_hash: String,
    pub dims: ModelDims,
    pub max_dose: f64,
    pub drug_ids: Vec<String>,
    pub fingerprints: Vec<Vec<u8>>,
    pub epochs_done: usize,
    pub best_epoch: usize,
    pub best_knn: f64,
    pub unpaired_batches: usize,
    pub small_ssl_batches: usize,
    pub skipped_nce_batches: usize,
    pub log: Vec<EpochRow>,
    /// Best-checkpoint parameters (float32 blob `params.f32`).
    pub params: Vec<BlobEntry>,
    /// Exact training state (float64 blob `resume.f64`).
    pub resume: Vec<BlobEntry>,
}

/// Per-run immutable training data derived from the dataset.
struct TrainData {
    /// Treated training-split sample indices.
    idx: Vec<usize>,
    labels: Vec<usize>,
    /// Normalized image dose per entry of `idx`.
    doses: Vec<f64>,
    /// Frozen cell encodings of every control with a transcriptome.
    ctrl_enc: Array2<f64>,
    /// cell_id -> rows of `ctrl_enc`.
    ctrl_by_cell: BTreeMap<String, Vec<usize>>,
}

struct ValSet {
    sample_idx: Vec<usize>,
    labels: Vec<usize>,
}

struct RunState {
    log: Vec<EpochRow>,
    best_epoch: usize,
    best_knn: f64,
    best_store: ParamStore,
    epochs_done: usize,
    unpaired_batches: usize,
    small_ssl_batches: usize,
    skipped_nce_batches: usize,
}

#[derive(Default)]
struct Components {
    total: f64,
    distill: f64,
    teacher: f64,
    ssl: f64,
    aux: f64,
}

struct BatchInput {
    labels: Vec<usize>,
    patches: Array2<f64>,
    /// Normalized image dose column for the paired subset.
    doses_paired: Array2<f64>,
    paired_pos: Vec<usize>,
    paired_labels: Vec<usize>,
    rna: Array2<f64>,
    dose_emb: Array2<f64>,
    cell_enc: Array2<f64>,
    dropout: Option<Array2<f64>>,
    fingerprints: Option<Array2<f64>>,
    view1: Option<Array2<f64>>,
    view2: Option<Array2<f64>>,
}

struct Needs {
    teacher: bool,
    student: bool,
    ssl: bool,
    fingerprints: bool,
    rna_nce: bool,
}

fn needs_for(cfg: &TrainConfig) -> Needs {
    match cfg.baseline {
        BaselineKind::Tide => Needs {
            teacher: true,
            student: true,
            ssl: cfg.beta > 0.0,
            fingerprints: false,
            rna_nce: false,
        },
        BaselineKind::SslOnly => Needs {
            teacher: false,
            student: false,
            ssl: true,
            fingerprints: false,
            rna_nce: false,
        },
        BaselineKind::ClDrug => Needs {
            teacher: false,
            student: false,
            ssl: cfg.beta > 0.0,
            fingerprints: true,
            rna_nce: false,
        },
        BaselineKind::ClRna => Needs {
            teacher: false,
            student: false,
            ssl: cfg.beta > 0.0,
            fingerprints: false,
            rna_nce: true,
        },
    }
}

pub fn train(
    ds: &Dataset,
    surrogate: &Surrogate,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    resume: bool,
    force: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !surrogate.frozen {
        return Err(TideError::usage(
            "training requires a frozen surrogate; train it first",
        ));
    }
    let data = prepare_train_data(ds, surrogate, cfg)?;
    if cfg.baseline == BaselineKind::ClRna {
        let any_paired = data
            .idx
            .iter()
            .any(|&i| ds.samples[i].is_paired && ds.samples[i].rna.is_some());
        if !any_paired {
            return Err(TideError::data(
                "cl_rna needs paired transcriptomes; the training split has none",
            ));
        }
    }
    let val = knn_val_set(ds, cfg)?;
    let ds_hash = config_hash(&ds.config)?;

    let resumed = match out_dir {
        Some(dir) if resume && dir.join("manifest.json").exists() => {
            Some(load_resume(dir, &ds_hash, cfg)?)
        }
        _ => None,
    };
    let (mut model, mut ssl, mut adam, mut st) = match resumed {
        Some(parts) => parts,
        None => {
            if let Some(dir) = out_dir {
                prepare_dir(dir, force)?;
            }
            let model = Model::new(ds, surrogate, cfg)?;
            let ssl = SslState::new(&model);
            let adam = Adam::new(&model.store, cfg.lr);
            let st = RunState {
                log: Vec::new(),
                best_epoch: 0,
                best_knn: f64::NEG_INFINITY,
                best_store: model.store.clone(),
                epochs_done: 0,
                unpaired_batches: 0,
                small_ssl_batches: 0,
                skipped_nce_batches: 0,
            };
            (model, ssl, adam, st)
        }
    };

    let needs = needs_for(cfg);
    for epoch in (st.epochs_done + 1)..=cfg.epochs {
        let order = shuffled_positions(data.idx.len(), cfg.seed, epoch);
        let mut sums = Components::default();
        let mut n_batches = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let binput = assemble_batch(ds, surrogate, &model, &data, chunk, epoch, batch_idx, &needs)?;
            let mut tape = Tape::new();
            let mut comps = Components::default();
            let mut distill_term: Option<Var> = None;
            let mut teacher_term: Option<Var> = None;
            let mut ssl_term: Option<Var> = None;
            let mut aux_term: Option<Var> = None;
            let mut nce_term: Option<Var> = None;
            let mut target_outs: Vec<Array2<f64>> = Vec::new();

            if needs.ssl {
                if binput.labels.len() < 2 {
                    st.small_ssl_batches += 1;
                    eprintln!(
                        "warning: SSL batch of size {} is degenerate (no in-batch diversity)",
                        binput.labels.len()
                    );
                }
                let v1 = binput.view1.as_ref().expect("ssl views assembled");
                let v2 = binput.view2.as_ref().expect("ssl views assembled");
                let t1 = ssl.target_outputs(&model, v1);
                let t2 = ssl.target_outputs(&model, v2);
                let p1 = ssl.target_probs(&t1);
                let p2 = ssl.target_probs(&t2);
                let v1c = tape.constant(v1.clone());
                let v2c = tape.constant(v2.clone());
                let h1 = model.encode_tape(&mut tape, &model.store, v1c);
                let o1 = model.ssl_head_tape(&mut tape, &model.store, h1);
                let h2 = model.encode_tape(&mut tape, &model.store, v2c);
                let o2 = model.ssl_head_tape(&mut tape, &model.store, h2);
                let loss = super::ssl::ssl_cross_terms(&mut tape, &p1, &p2, o1, o2, ssl.online_temp);
                comps.ssl = tape.scalar_value(loss);
                ssl_term = Some(loss);
                target_outs = vec![t1, t2];
            }

            if needs.student || needs.fingerprints || needs.rna_nce {
                let pc = tape.constant(binput.patches.clone());
                let h_raw = model.encode_tape(&mut tape, &model.store, pc);

                if needs.student {
                    let h_s = model.student_tape(&mut tape, &model.store, h_raw);
                    let logits_s =
                        model.class_logits_tape(&mut tape, &model.store, h_s, cfg.tau_s, true)?;
                    let l_aux = mean_cross_entropy(&mut tape, logits_s, &binput.labels)?;
                    comps.aux = tape.scalar_value(l_aux);
                    aux_term = Some(l_aux);

                    if binput.paired_pos.is_empty() {
                        st.unpaired_batches += 1;
                    } else {
                        let h_src = if cfg.detach_teacher_encoder {
                            tape.detach(h_raw)
                        } else {
                            h_raw
                        };
                        let h_raw_m = tape.gather_rows(h_src, &binput.paired_pos);
                        let h_i = model.film_tape(&mut tape, &model.store, h_raw_m, &binput.doses_paired);
                        let rna_c = tape.constant(binput.rna.clone());
                        let rna_h = model.rna_enc.forward(&mut tape, &model.store, rna_c);
                        let dose_c = tape.constant(binput.dose_emb.clone());
                        let rna_cat = tape.concat_cols(rna_h, dose_c);
                        let h_r = model.rna_proj.forward(&mut tape, &model.store, rna_cat);
                        let cell_c = tape.constant(binput.cell_enc.clone());
                        let h_c = model.cell_proj.forward(&mut tape, &model.store, cell_c);
                        let cat = tape.concat_cols(h_i, h_r);
                        let cat = tape.concat_cols(cat, h_c);
                        let f1 = model.fusion1.forward(&mut tape, &model.store, cat);
                        let bn = &model.fusion_bn;
                        let f1 = bn.forward_train(&mut tape, &mut model.store, f1, true);
                        let f1 = tape.relu(f1);
                        let f1 = match &binput.dropout {
                            Some(mask) => {
                                let m = tape.constant(mask.clone());
                                tape.mul(f1, m)
                            }
                            None => f1,
                        };
                        let h_t = model.fusion2.forward(&mut tape, &model.store, f1);
                        let logits_t =
                            model.class_logits_tape(&mut tape, &model.store, h_t, cfg.tau, false)?;
                        let l_teacher =
                            mean_cross_entropy(&mut tape, logits_t, &binput.paired_labels)?;
                        comps.teacher = tape.scalar_value(l_teacher);
                        teacher_term = Some(l_teacher);

                        let p_t = softmax_rows(tape.value(logits_t));
                        let logits_s_m = tape.gather_rows(logits_s, &binput.paired_pos);
                        let l_distill = kl_distill(&mut tape, &p_t, logits_s_m)?;
                        comps.distill = tape.scalar_value(l_distill);
                        distill_term = Some(l_distill);
                    }
                }

                if needs.fingerprints {
                    if binput.labels.len() < 2 {
                        st.skipped_nce_batches += 1;
                    } else {
                        let zi = model.nce_img.forward(&mut tape, &model.store, h_raw);
                        let fpc = tape.constant(
                            binput.fingerprints.clone().expect("fingerprints assembled"),
                        );
                        let zd = model.nce_drug.forward(&mut tape, &model.store, fpc);
                        nce_term = Some(info_nce_symmetric(&mut tape, zi, zd, cfg.info_nce_temp)?);
                    }
                }

                if needs.rna_nce {
                    if binput.paired_pos.len() < 2 {
                        st.skipped_nce_batches += 1;
                    } else {
                        let h_m = tape.gather_rows(h_raw, &binput.paired_pos);
                        let zi = model.nce_img.forward(&mut tape, &model.store, h_m);
                        let rna_c = tape.constant(binput.rna.clone());
                        let zr = model.nce_rna.forward(&mut tape, &model.store, rna_c);
                        nce_term = Some(info_nce_symmetric(&mut tape, zi, zr, cfg.info_nce_temp)?);
                    }
                }
            }

            // Canonical term order keeps f64 summation deterministic:
            // distill + alpha*teacher + beta*ssl + lambda_aux*aux (+ nce).
            let ssl_weight = if cfg.baseline == BaselineKind::SslOnly { 1.0 } else { cfg.beta };
            let mut weighted: Vec<(f64, Var)> = Vec::new();
            if let Some(v) = distill_term {
                weighted.push((1.0, v));
            }
            if let Some(v) = teacher_term {
                weighted.push((cfg.alpha, v));
            }
            if let Some(v) = nce_term {
                weighted.push((1.0, v));
            }
            if let Some(v) = ssl_term {
                weighted.push((ssl_weight, v));
            }
            if let Some(v) = aux_term {
                weighted.push((cfg.lambda_aux, v));
            }
            let mut total: Option<Var> = None;
            for (w, v) in weighted {
                if w == 0.0 {
                    continue;
                }
                let term = if w == 1.0 { v } else { tape.scale(v, w) };
                total = Some(match total {
                    None => term,
                    Some(acc) => tape.add(acc, term),
                });
            }
            let total = match total {
                Some(t) => t,
                None => tape.constant(Array2::zeros((1, 1))),
            };
            comps.total = tape.scalar_value(total);

            let grads = tape.backward(total, model.store.len());
            adam.step(&mut model.store, &grads);
            if let Some(cb) = &model.codebook {
                // Renormalize only when the step moved V, so untouched
                // prototypes stay bitwise identical.
                if cb.mode == CodebookMode::Learned && grads.get(cb.v).is_some() {
                    cb.renormalize_rows(&mut model.store)?;
                }
            }
            if needs.ssl {
                let refs: Vec<&Array2<f64>> = target_outs.iter().collect();
                ssl.update_center(&refs);
                ssl.ema_update(&model.store);
            }

            sums.total += comps.total;
            sums.distill += comps.distill;
            sums.teacher += comps.teacher;
            sums.ssl += comps.ssl;
            sums.aux += comps.aux;
            n_batches += 1;
        }

        let nb = n_batches.max(1) as f64;
        let knn_acc = eval_knn(&model, ds, &val, cfg)?;
        let row = EpochRow {
            epoch,
            l_total: sums.total / nb,
            l_distill: sums.distill / nb,
            l_teacher: sums.teacher / nb,
            l_ssl: sums.ssl / nb,
            l_aux: sums.aux / nb,
            knn_acc,
        };
        st.log.push(row);
        if knn_acc > st.best_knn {
            st.best_knn = knn_acc;
            st.best_epoch = epoch;
            st.best_store = model.store.clone();
        }
        st.epochs_done = epoch;
        if let Some(dir) = out_dir {
            save_checkpoint(dir, &model, &ssl, &adam, &st, &ds_hash)?;
        }
    }

    model.store = st.best_store.clone();
    Ok(TrainOutcome {
        model,
        log: st.log,
        best_epoch: st.best_epoch,
        best_knn: if st.best_knn.is_finite() { st.best_knn } else { 0.0 },
        unpaired_batches: st.unpaired_batches,
        small_ssl_batches: st.small_ssl_batches,
        skipped_nce_batches: st.skipped_nce_batches,
    })
}

/// Baseline entry point: same loop with the loss family switched.
pub fn train_baseline(
    kind: BaselineKind,
    ds: &Dataset,
    surrogate: &Surrogate,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    resume: bool,
    force: bool,
) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    cfg.baseline = kind;
    train(ds, surrogate, &cfg, out_dir, resume, force)
}

fn prepare_train_data(ds: &Dataset, surrogate: &Surrogate, cfg: &TrainConfig) -> Result<TrainData> {
    let idx = ds.split_sample_indices(Split::Train);
    if idx.is_empty() {
        return Err(TideError::data("training split has no treated samples"));
    }
    let mut labels = Vec::with_capacity(idx.len());
    let mut doses = Vec::with_capacity(idx.len());
    for &i in &idx {
        let s = &ds.samples[i];
        let drug = s.drug_id.as_deref().expect("treated sample has a drug");
        let label = ds
            .train_class_of(drug)
            .ok_or_else(|| TideError::data(format!("drug {drug} missing from training split")))?;
        labels.push(label);
        let dose = s
            .dose_image
            .ok_or_else(|| TideError::data(format!("sample {} lacks an image dose", s.sample_id)))?;
        doses.push(if cfg.no_dose { 0.0 } else { normalize_dose(dose, surrogate.max_dose)? });
    }

    let controls: Vec<&crate::synthworld::Sample> =
        ds.controls().filter(|c| c.rna.is_some()).collect();
    if controls.is_empty() {
        return Err(TideError::data("dataset has no control transcriptomes"));
    }
    let n_genes = ds.config.n_genes;
    let mut ctrl_rna = Array2::zeros((controls.len(), n_genes));
    let mut ctrl_by_cell: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (row, c) in controls.iter().enumerate() {
        ctrl_rna
            .row_mut(row)
            .assign(c.rna.as_ref().expect("filtered to controls with rna"));
        ctrl_by_cell.entry(c.cell_id.clone()).or_default().push(row);
    }
    let ctrl_enc = surrogate.extract_cell_encoding(&ctrl_rna)?;
    for &i in &idx {
        let cell = &ds.samples[i].cell_id;
        if !ctrl_by_cell.contains_key(cell) {
            return Err(TideError::data(format!(
                "no control transcriptomes for cell type {cell}"
            )));
        }
    }
    Ok(TrainData { idx, labels, doses, ctrl_enc, ctrl_by_cell })
}

fn shuffled_positions(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = derive(seed, &[TAG_DISTILL, SUB_SHUFFLE, epoch as u64]);
    for i in (1..n).rev() {
        let j = rand::Rng::random_range(&mut rng, 0..=i);
        order.swap(i, j);
    }
    order
}

#[allow(clippy::too_many_arguments)]
fn assemble_batch(
    ds: &Dataset,
    surrogate: &Surrogate,
    model: &Model,
    data: &TrainData,
    chunk: &[usize],
    epoch: usize,
    batch_idx: usize,
    needs: &Needs,
) -> Result<BatchInput> {
    let cfg = &model.cfg;
    let mut labels = Vec::with_capacity(chunk.len());
    let mut images: Vec<ArrayView3<f64>> = Vec::with_capacity(chunk.len());
    let mut paired_pos = Vec::new();
    let mut paired_labels = Vec::new();
    let mut paired_doses = Vec::new();
    let mut rna_rows: Vec<usize> = Vec::new();

    for (pos, &p) in chunk.iter().enumerate() {
        let i = data.idx[p];
        let s = &ds.samples[i];
        labels.push(data.labels[p]);
        images.push(s.image.view());
        if s.is_paired && s.rna.is_some() {
            paired_pos.push(pos);
            paired_labels.push(data.labels[p]);
            paired_doses.push(data.doses[p]);
            rna_rows.push(i);
        }
    }
    let patches = model.patch_rows(&images)?;

    let m = paired_pos.len();
    let n_genes = ds.config.n_genes;
    let mut rna = Array2::zeros((m, n_genes));
    let mut dose_rna_raw = Vec::with_capacity(m);
    let mut cell_enc = Array2::zeros((m, model.dims.surrogate_cell_dim));
    for (row, &i) in rna_rows.iter().enumerate() {
        let s = &ds.samples[i];
        rna.row_mut(row).assign(s.rna.as_ref().expect("paired sample has rna"));
        dose_rna_raw.push(
            s.dose_rna
                .ok_or_else(|| TideError::data(format!("paired sample {} lacks dose_rna", s.sample_id)))?,
        );
        let pool = &data.ctrl_by_cell[&s.cell_id];
        let mut rng = derive(cfg.seed, &[TAG_DISTILL, SUB_CONTROL, epoch as u64, i as u64]);
        let pick = pool[rand::Rng::random_range(&mut rng, 0..pool.len())];
        cell_enc.row_mut(row).assign(&data.ctrl_enc.row(pick));
    }
    let dose_emb = if cfg.no_dose || m == 0 {
        Array2::zeros((m, model.dims.surrogate_dose_dim))
    } else {
        surrogate.extract_dose_embedding(&dose_rna_raw)?
    };
    let doses_paired = Array2::from_shape_fn((m, 1), |(r, _)| paired_doses[r]);

    let dropout = if needs.teacher && m > 0 && cfg.dropout > 0.0 {
        let mut rng = derive(
            cfg.seed,
            &[TAG_DISTILL, SUB_DROPOUT, epoch as u64, batch_idx as u64],
        );
        Some(dropout_mask(&mut rng, m, 2 * cfg.d, cfg.dropout))
    } else {
        None
    };

    let fingerprints = if needs.fingerprints {
        let mut fp = Array2::zeros((chunk.len(), model.dims.fingerprint_len));
        for (pos, &p) in chunk.iter().enumerate() {
            let s = &ds.samples[data.idx[p]];
            let drug = s.drug_id.as_deref().expect("treated sample has a drug");
            fp.row_mut(pos).assign(&ds.world.drug(drug)?.fingerprint);
        }
        Some(fp)
    } else {
        None
    };

    let (view1, view2) = if needs.ssl {
        let mut v1 = Vec::with_capacity(chunk.len());
        let mut v2 = Vec::with_capacity(chunk.len());
        for &p in chunk {
            let i = data.idx[p];
            let img = ds.samples[i].image.view();
            let mut r1 = derive(cfg.seed, &[TAG_DISTILL, SUB_AUG, epoch as u64, i as u64, 0]);
            let mut r2 = derive(cfg.seed, &[TAG_DISTILL, SUB_AUG, epoch as u64, i as u64, 1]);
            v1.push(augment_image(&img, &mut r1));
            v2.push(augment_image(&img, &mut r2));
        }
        let views1: Vec<ArrayView3<f64>> = v1.iter().map(|a| a.view()).collect();
        let views2: Vec<ArrayView3<f64>> = v2.iter().map(|a| a.view()).collect();
        (Some(model.patch_rows(&views1)?), Some(model.patch_rows(&views2)?))
    } else {
        (None, None)
    };

    Ok(BatchInput {
        labels,
        patches,
        doses_paired,
        paired_pos,
        paired_labels,
        rna,
        dose_emb,
        cell_enc,
        dropout,
        fingerprints,
        view1,
        view2,
    })
}

fn knn_val_set(ds: &Dataset, cfg: &TrainConfig) -> Result<ValSet> {
    let val_idx = ds.split_sample_indices(Split::Val);
    if val_idx.is_empty() {
        return Err(TideError::data(
            "validation split is empty; kNN checkpoint selection needs validation drugs",
        ));
    }
    let mut by_class: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for &i in &val_idx {
        let drug = ds.samples[i].drug_id.clone().expect("treated sample has a drug");
        by_class.entry(drug).or_default().push(i);
    }
    let mut sample_idx = Vec::new();
    let mut labels = Vec::new();
    for (class, (_, members)) in by_class.into_iter().enumerate() {
        let mut order: Vec<usize> = (0..members.len()).collect();
        let mut rng = derive(cfg.seed, &[TAG_DISTILL, SUB_KNN, class as u64]);
        for i in (1..order.len()).rev() {
            let j = rand::Rng::random_range(&mut rng, 0..=i);
            order.swap(i, j);
        }
        for &o in order.iter().take(cfg.knn_per_class) {
            sample_idx.push(members[o]);
            labels.push(class);
        }
    }
    Ok(ValSet { sample_idx, labels })
}

fn eval_knn(model: &Model, ds: &Dataset, val: &ValSet, cfg: &TrainConfig) -> Result<f64> {
    let n = val.sample_idx.len();
    if n < 2 {
        return Err(TideError::data(
            "kNN checkpoint selection needs at least 2 validation images",
        ));
    }
    let images: Vec<ArrayView3<f64>> =
        val.sample_idx.iter().map(|&i| ds.samples[i].image.view()).collect();
    let emb = model.embed_images(&images)?;
    let k = cfg.knn_k.min(n - 1);
    knn_select(&emb, &val.labels, k)
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = Array2::zeros(logits.raw_dim());
    for (i, row) in logits.rows().into_iter().enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (j, e) in exps.iter().enumerate() {
            p[[i, j]] = e / z;
        }
    }
    p
}

fn array_data(a: &Array2<f64>) -> Vec<f64> {
    a.iter().cloned().collect()
}

fn save_checkpoint(
    dir: &Path,
    model: &Model,
    ssl: &SslState,
    adam: &Adam,
    st: &RunState,
    ds_hash: &str,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let params = save_store(&dir.join("params.f32"), &st.best_store, false)?;

    let store = &model.store;
    let mut owned: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    for id in store.ids() {
        let a = store.get(id);
        owned.push((format!("online.{}", store.name(id)), vec![a.nrows(), a.ncols()], array_data(a)));
    }
    for &id in &ssl.tracked {
        let a = ssl.target.get(id);
        owned.push((format!("target.{}", store.name(id)), vec![a.nrows(), a.ncols()], array_data(a)));
    }
    for id in store.ids() {
        let a = &adam.m[id.0];
        owned.push((format!("adam_m.{}", store.name(id)), vec![a.nrows(), a.ncols()], array_data(a)));
    }
    for id in store.ids() {
        let a = &adam.v[id.0];
        owned.push((format!("adam_v.{}", store.name(id)), vec![a.nrows(), a.ncols()], array_data(a)));
    }
    owned.push((
        "adam_t".to_string(),
        vec![1, adam.t.len()],
        adam.t.iter().map(|&t| t as f64).collect(),
    ));
    owned.push((
        "center".to_string(),
        vec![1, ssl.center.ncols()],
        array_data(&ssl.center),
    ));
    for id in store.ids() {
        let a = st.best_store.get(id);
        owned.push((format!("best.{}", store.name(id)), vec![a.nrows(), a.ncols()], array_data(a)));
    }
    let parts: Vec<(&str, Vec<usize>, &[f64])> = owned
        .iter()
        .map(|(n, s, d)| (n.as_str(), s.clone(), d.as_slice()))
        .collect();
    let resume = write_f64_blob(&dir.join("resume.f64"), &parts)?;

    let manifest = DistillerManifest {
        format_version: 1,
        kind: "distiller".to_string(),
        config: model.cfg.clone(),
        config_hash: resume_hash(&model.cfg)?,
        dataset_config_hash: ds_hash.to_string(),
        dims: model.dims.clone(),
        max_dose: model.max_dose,
        drug_ids: model.drug_ids.clone(),
        fingerprints: model
            .fingerprints
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|&x| x as u8).collect())
            .collect(),
        epochs_done: st.epochs_done,
        best_epoch: st.best_epoch,
        best_knn: if st.best_knn.is_finite() { st.best_knn } else { 0.0 },
        unpaired_batches: st.unpaired_batches,
        small_ssl_batches: st.small_ssl_batches,
        skipped_nce_batches: st.skipped_nce_batches,
        log: st.log.clone(),
        params,
        resume,
    };
    write_manifest(dir, &manifest)?;
    write_train_log(dir, &st.log)?;
    Ok(())
}

/// Hash used for resume compatibility: everything but the epoch budget,
/// so an interrupted run can be resumed toward a larger `epochs`.
fn resume_hash(cfg: &TrainConfig) -> Result<String> {
    let mut c = cfg.clone();
    c.epochs = 0;
    config_hash(&c)
}

fn write_train_log(dir: &Path, log: &[EpochRow]) -> Result<()> {
    let mut text = String::from("epoch,l_total,l_distill,l_teacher,l_ssl,l_aux,knn_acc\n");
    for r in log {
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.l_total, r.l_distill, r.l_teacher, r.l_ssl, r.l_aux, r.knn_acc
        ));
    }
    fs::write(dir.join("train_log.csv"), text)?;
    Ok(())
}

fn fingerprint_matrix(rows: &[Vec<u8>]) -> Result<Array2<f64>> {
    let k = rows.len();
    let f = rows.first().map(|r| r.len()).unwrap_or(0);
    if k == 0 || f == 0 {
        return Err(TideError::data("checkpoint fingerprints are empty"));
    }
    let mut fp = Array2::zeros((k, f));
    for (i, row) in rows.iter().enumerate() {
        if row.len() != f {
            return Err(TideError::data("checkpoint fingerprints are ragged"));
        }
        for (j, &x) in row.iter().enumerate() {
            fp[[i, j]] = x as f64;
        }
    }
    Ok(fp)
}

type ResumeParts = (Model, SslState, Adam, RunState);

fn load_resume(dir: &Path, ds_hash: &str, cfg: &TrainConfig) -> Result<ResumeParts> {
    let man: DistillerManifest = read_manifest(dir)?;
    if man.kind != "distiller" {
        return Err(TideError::usage(format!(
            "{} holds a {:?} checkpoint, not a distiller run",
            dir.display(),
            man.kind
        )));
    }
    if man.config_hash != resume_hash(cfg)? {
        return Err(TideError::usage(
            "resume config does not match the checkpoint; rerun with the original config",
        ));
    }
    if man.dataset_config_hash != ds_hash {
        return Err(TideError::usage(
            "resume dataset does not match the checkpoint's dataset",
        ));
    }
    let fp = fingerprint_matrix(&man.fingerprints)?;
    let mut model = Model::build(man.dims.clone(), man.max_dose, man.drug_ids.clone(), fp, cfg)?;

    let data = read_f64_blob(&dir.join("resume.f64"), &man.resume)?;
    let mut by_name: BTreeMap<&str, (&BlobEntry, Vec<f64>)> = BTreeMap::new();
    for (e, d) in man.resume.iter().zip(data) {
        by_name.insert(e.name.as_str(), (e, d));
    }
    let mut take = |name: &str, rows: usize, cols: usize| -> Result<Array2<f64>> {
        let (e, d) = by_name
            .remove(name)
            .ok_or_else(|| TideError::data(format!("resume blob lacks entry {name}")))?;
        if e.shape != [rows, cols] {
            return Err(TideError::data(format!(
                "resume entry {name} has shape {:?}, expected [{rows}, {cols}]",
                e.shape
            )));
        }
        Ok(Array2::from_shape_vec((rows, cols), d).expect("count validated by reader"))
    };

    let ids: Vec<_> = model.store.ids().collect();
    for &id in &ids {
        let (r, c) = {
            let a = model.store.get(id);
            (a.nrows(), a.ncols())
        };
        let name = format!("online.{}", model.store.name(id));
        let arr = take(&name, r, c)?;
        model.store.set(id, arr);
    }
    let mut ssl = SslState::new(&model);
    for &id in &ssl.tracked.clone() {
        let (r, c) = {
            let a = model.store.get(id);
            (a.nrows(), a.ncols())
        };
        let name = format!("target.{}", model.store.name(id));
        let arr = take(&name, r, c)?;
        ssl.target.set(id, arr);
    }
    let mut adam = Adam::new(&model.store, cfg.lr);
    for &id in &ids {
        let (r, c) = {
            let a = model.store.get(id);
            (a.nrows(), a.ncols())
        };
        adam.m[id.0] = take(&format!("adam_m.{}", model.store.name(id)), r, c)?;
        adam.v[id.0] = take(&format!("adam_v.{}", model.store.name(id)), r, c)?;
    }
    let t = take("adam_t", 1, ids.len())?;
    adam.t = t.row(0).iter().map(|&x| x as u64).collect();
    ssl.center = take("center", 1, model.cfg.ssl_out_dim)?;

    let mut best_store = model.store.clone();
    for &id in &ids {
        let (r, c) = {
            let a = model.store.get(id);
            (a.nrows(), a.ncols())
        };
        let name = format!("best.{}", model.store.name(id));
        let arr = take(&name, r, c)?;
        best_store.set(id, arr);
    }

    let st = RunState {
        log: man.log,
        best_epoch: man.best_epoch,
        best_knn: if man.epochs_done == 0 { f64::NEG_INFINITY } else { man.best_knn },
        best_store,
        epochs_done: man.epochs_done,
        unpaired_batches: man.unpaired_batches,
        small_ssl_batches: man.small_ssl_batches,
        skipped_nce_batches: man.skipped_nce_batches,
    };
    Ok((model, ssl, adam, st))
}

/// Load the best checkpoint of a finished (or in-progress) run for
/// evaluation.
pub fn load_model(dir: &Path) -> Result<(Model, DistillerManifest)> {
    let man: DistillerManifest = read_manifest(dir)?;
    if man.kind != "distiller" {
        return Err(TideError::usage(format!(
            "{} holds a {:?} checkpoint, not a distiller run",
            dir.display(),
            man.kind
        )));
    }
    let fp = fingerprint_matrix(&man.fingerprints)?;
    let mut model = Model::build(
        man.dims.clone(),
        man.max_dose,
        man.drug_ids.clone(),
        fp,
        &man.config,
    )?;
    load_store(&dir.join("params.f32"), &man.params, &mut model.store, false)?;
    Ok((model, man))
}
