//! Finite-difference verification of every gradient path the trainer
//! optimizes: FiLM conditioning, the fused teacher trunk, codebook
//! cross-entropy, KL distillation, the auxiliary student head, InfoNCE
//! alignment (drug and transcriptome pairings), and the SSL online path.
//! Each family runs on 20+ randomized shapes, parameter jitters, and
//! inputs; analytic and central differences must agree to 1e-4.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use tide_core::codebook::CodebookMode;
use tide_core::distiller::{
    info_nce_symmetric, kl_distill, mean_cross_entropy, ssl_cross_terms, Model, ModelDims,
    TrainConfig,
};
use tide_core::nn::layers::dropout_mask;
use tide_core::nn::{check_gradients, ParamId, Tape};
use tide_core::rng::derive;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SAMPLES: usize = 4;
const CONFIGS: usize = 20;

fn pick(rng: &mut ChaCha8Rng, options: &[usize]) -> usize {
    options[rng.random_range(0..options.len())]
}

/// Small model with randomized dimensions. Every trainable tensor is
/// nudged off its initialization so identity points (FiLM generators,
/// zero biases) cannot mask a wrong gradient with a zero value.
fn random_model(rng: &mut ChaCha8Rng, mode: CodebookMode) -> Model {
    let patch = 2;
    let dims = ModelDims {
        channels: pick(rng, &[1, 2, 3]),
        height: patch * pick(rng, &[1, 2]),
        width: patch * pick(rng, &[1, 2]),
        n_genes: pick(rng, &[4, 6, 8]),
        fingerprint_len: pick(rng, &[6, 8, 10]),
        n_classes: pick(rng, &[3, 4, 5]),
        surrogate_cell_dim: pick(rng, &[2, 3]),
        surrogate_dose_dim: pick(rng, &[2, 3]),
    };
    let drug_ids: Vec<String> = (0..dims.n_classes).map(|i| format!("drug{i:02}")).collect();
    let mut fingerprints = Array2::from_shape_fn((dims.n_classes, dims.fingerprint_len), |_| {
        f64::from(rng.random::<f64>() < 0.5)
    });
    // An all-zero fingerprint projects to a zero prototype; keep one bit set.
    for mut row in fingerprints.rows_mut() {
        if row.sum() == 0.0 {
            let j = rng.random_range(0..dims.fingerprint_len);
            row[j] = 1.0;
        }
    }
    let cfg = TrainConfig {
        d: pick(rng, &[8, 12, 16]),
        patch,
        ssl_out_dim: pick(rng, &[5, 7, 9]),
        proj_dim: pick(rng, &[6, 8]),
        codebook_mode: mode,
        seed: rng.random::<u64>(),
        ..TrainConfig::default()
    };
    let mut model = Model::build(dims, 1.0, drug_ids, fingerprints, &cfg).unwrap();
    let ids = model.store.trainable_ids();
    for id in ids {
        let jitter =
            Array2::from_shape_fn(model.store.get(id).dim(), |_| rng.random_range(-0.2..0.2));
        *model.store.get_mut(id) += &jitter;
    }
    model
}

fn smooth(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

/// Rows are strictly positive distributions.
fn prob_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut p = Array2::from_shape_fn((rows, cols), |_| rng.random_range(0.05..1.0));
    for mut row in p.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

fn random_patches(rng: &mut ChaCha8Rng, model: &Model, batch: usize) -> Array2<f64> {
    let cols = model.dims.channels * model.cfg.patch * model.cfg.patch;
    smooth(rng, batch * model.n_patches(), cols, 1.0)
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

/// Sorted m-subset of 0..n without repeats, as the batch pairing produces.
fn subset(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    let mut s = idx[..m].to_vec();
    s.sort_unstable();
    s
}

fn encoder_ids(model: &Model) -> Vec<ParamId> {
    let mut ids = model.patch_embed.param_ids();
    ids.extend(model.head1.param_ids());
    ids.extend(model.head2.param_ids());
    ids
}

fn film_ids(model: &Model) -> Vec<ParamId> {
    let mut ids = model.film_hidden.param_ids();
    ids.extend(model.film_gamma.param_ids());
    ids.extend(model.film_beta.param_ids());
    ids
}

/// Biases that reach the loss only as row-uniform shifts into the fusion
/// batch norm. Mean subtraction cancels them exactly, so their true
/// gradient is zero and a finite-difference ratio is pure noise; they get
/// their own zero-gradient assertion instead.
fn bn_shadowed_bias_ids(model: &Model) -> Vec<ParamId> {
    vec![
        model.rna_enc.layers.last().unwrap().b.unwrap(),
        model.rna_proj.b.unwrap(),
        model.cell_proj.b.unwrap(),
        model.fusion1.b.unwrap(),
        model.film_beta.b.unwrap(),
    ]
}

fn teacher_trunk_ids(model: &Model) -> Vec<ParamId> {
    let mut ids = model.rna_enc.param_ids();
    ids.extend(model.rna_proj.param_ids());
    ids.extend(model.cell_proj.param_ids());
    ids.extend(model.fusion1.param_ids());
    ids.push(model.fusion_bn.gamma);
    ids.push(model.fusion_bn.beta);
    ids.extend(model.fusion2.param_ids());
    ids
}

#[test]
fn film_gradients() {
    let mut rng = derive(101, &[0]);
    for it in 0..CONFIGS {
        let model = random_model(&mut rng, CodebookMode::Learned);
        let b = rng.random_range(2..6);
        let patches = random_patches(&mut rng, &model, b);
        let doses = Array2::from_shape_fn((b, 1), |_| rng.random::<f64>());
        let weights = smooth(&mut rng, b, model.cfg.d, 1.0);
        let mut pids = encoder_ids(&model);
        pids.extend(film_ids(&model));
        let mut store = model.store.clone();
        let mut check_rng = derive(101, &[1, it as u64]);
        let report = check_gradients(
            &mut store,
            &pids,
            SAMPLES,
            EPS,
            &mut check_rng,
            &mut |tape, store| {
                let pc = tape.constant(patches.clone());
                let h_raw = model.encode_tape(tape, store, pc);
                let h_i = model.film_tape(tape, store, h_raw, &doses);
                let wv = tape.constant(weights.clone());
                let prod = tape.mul(h_i, wv);
                let sq = tape.mul(prod, prod);
                tape.mean_all(sq)
            },
        );
        assert!(
            report.max_rel_err < TOL,
            "film config {it}: {} at {}",
            report.max_rel_err,
            report.worst_param
        );
    }
}

#[test]
fn fusion_trunk_gradients() {
    let mut rng = derive(102, &[0]);
    for it in 0..CONFIGS {
        let model = random_model(&mut rng, CodebookMode::Learned);
        let d = model.cfg.d;
        let k = model.dims.n_classes;
        let b = rng.random_range(3..6);
        let m = rng.random_range(2..=b - 1);
        let paired = subset(&mut rng, b, m);
        let patches = random_patches(&mut rng, &model, b);
        let doses = Array2::from_shape_fn((m, 1), |_| rng.random::<f64>());
        let rna = smooth(&mut rng, m, model.dims.n_genes, 1.0);
        let dose_emb = smooth(&mut rng, m, model.dims.surrogate_dose_dim, 1.0);
        let cell_enc = smooth(&mut rng, m, model.dims.surrogate_cell_dim, 1.0);
        let mask = dropout_mask(&mut rng, m, 2 * d, 0.2);
        let labels = random_labels(&mut rng, m, k);
        let tau = rng.random_range(0.15..0.4);
        let mut pids = encoder_ids(&model);
        pids.extend(film_ids(&model));
        pids.extend(teacher_trunk_ids(&model));
        pids.push(model.codebook.as_ref().unwrap().v);
        let shadowed = bn_shadowed_bias_ids(&model);
        pids.retain(|id| !shadowed.contains(id));
        let bn = model.fusion_bn.clone();
        let mut store = model.store.clone();
        let mut check_rng = derive(102, &[1, it as u64]);
        let report = check_gradients(
            &mut store,
            &pids,
            SAMPLES,
            EPS,
            &mut check_rng,
            &mut |tape, store| {
                let pc = tape.constant(patches.clone());
                let h_raw = model.encode_tape(tape, store, pc);
                let h_m = tape.gather_rows(h_raw, &paired);
                let h_i = model.film_tape(tape, store, h_m, &doses);
                let rna_c = tape.constant(rna.clone());
                let rna_h = model.rna_enc.forward(tape, store, rna_c);
                let dose_c = tape.constant(dose_emb.clone());
                let rna_cat = tape.concat_cols(rna_h, dose_c);
                let h_r = model.rna_proj.forward(tape, store, rna_cat);
                let cell_c = tape.constant(cell_enc.clone());
                let h_c = model.cell_proj.forward(tape, store, cell_c);
                let cat = tape.concat_cols(h_i, h_r);
                let cat = tape.concat_cols(cat, h_c);
                let f1 = model.fusion1.forward(tape, store, cat);
                let gamma = tape.param(store, bn.gamma);
                let beta = tape.param(store, bn.beta);
                let (f1, _, _) = tape.batchnorm_train(f1, gamma, beta, bn.eps);
                let f1 = tape.relu(f1);
                let mc = tape.constant(mask.clone());
                let f1 = tape.mul(f1, mc);
                let h_t = model.fusion2.forward(tape, store, f1);
                let logits = model.class_logits_tape(tape, store, h_t, tau, false).unwrap();
                mean_cross_entropy(tape, logits, &labels).unwrap()
            },
        );
        assert!(
            report.max_rel_err < TOL,
            "fusion config {it}: {} at {}",
            report.max_rel_err,
            report.worst_param
        );
    }
}

/// Mean subtraction inside the fusion batch norm makes the teacher loss
/// invariant to row-uniform shifts, so every bias that enters the trunk
/// only through such a shift must receive an (exactly) zero gradient.
#[test]
fn batchnorm_blinds_pre_norm_biases() {
    let mut rng = derive(111, &[0]);
    for it in 0..10 {
        let model = random_model(&mut rng, CodebookMode::Learned);
        let d = model.cfg.d;
        let k = model.dims.n_classes;
        let b = rng.random_range(3..6);
        let m = rng.random_range(2..=b - 1);
        let paired = subset(&mut rng, b, m);
        let patches = random_patches(&mut rng, &model, b);
        let doses = Array2::from_shape_fn((m, 1), |_| rng.random::<f64>());
        let rna = smooth(&mut rng, m, model.dims.n_genes, 1.0);
        let dose_emb = smooth(&mut rng, m, model.dims.surrogate_dose_dim, 1.0);
        let cell_enc = smooth(&mut rng, m, model.dims.surrogate_cell_dim, 1.0);
        let mask = dropout_mask(&mut rng, m, 2 * d, 0.2);
        let labels = random_labels(&mut rng, m, k);
        let bn = model.fusion_bn.clone();
        let store = &model.store;
        let mut tape = Tape::new();
        let pc = tape.constant(patches.clone());
        let h_raw = model.encode_tape(&mut tape, store, pc);
        let h_m = tape.gather_rows(h_raw, &paired);
        let h_i = model.film_tape(&mut tape, store, h_m, &doses);
        let rna_c = tape.constant(rna.clone());
        let rna_h = model.rna_enc.forward(&mut tape, store, rna_c);
        let dose_c = tape.constant(dose_emb.clone());
        let rna_cat = tape.concat_cols(rna_h, dose_c);
        let h_r = model.rna_proj.forward(&mut tape, store, rna_cat);
        let cell_c = tape.constant(cell_enc.clone());
        let h_c = model.cell_proj.forward(&mut tape, store, cell_c);
        let cat = tape.concat_cols(h_i, h_r);
        let cat = tape.concat_cols(cat, h_c);
        let f1 = model.fusion1.forward(&mut tape, store, cat);
        let gamma = tape.param(store, bn.gamma);
        let beta = tape.param(store, bn.beta);
        let (f1, _, _) = tape.batchnorm_train(f1, gamma, beta, bn.eps);
        let f1 = tape.relu(f1);
        let mc = tape.constant(mask.clone());
        let f1 = tape.mul(f1, mc);
        let h_t = model.fusion2.forward(&mut tape, store, f1);
        let logits = model
            .class_logits_tape(&mut tape, store, h_t, model.cfg.tau, false)
            .unwrap();
        let loss = mean_cross_entropy(&mut tape, logits, &labels).unwrap();
        let grads = tape.backward(loss, store.len());
        for id in bn_shadowed_bias_ids(&model) {
            let g = grads.get(id).expect("bias participates in the graph");
            let worst = g.iter().fold(0.0f64, |acc, &x| acc.max(x.abs()));
            assert!(
                worst < 1e-10,
                "config {it}: {} gradient {} should be cancelled by batch norm",
                model.store.name(id),
                worst
            );
        }
    }
}

#[test]
fn codebook_ce_gradients() {
    let mut rng = derive(103, &[0]);
    for it in 0..CONFIGS {
        let model = random_model(&mut rng, CodebookMode::Learned);
        let b = rng.random_range(2..6);
        let patches = random_patches(&mut rng, &model, b);
        let labels = random_labels(&mut rng, b, model.dims.n_classes);
        let tau = rng.random_range(0.15..0.4);
        let mut pids = encoder_ids(&model);
        pids.push(model.codebook.as_ref().unwrap().v);
        let mut store = model.store.clone();
        let mut check_rng = derive(103, &[1, it as u64]);
        let report = check_gradients(
            &mut store,
            &pids,
            SAMPLES,
            EPS,
            &mut check_rng,
            &mut |tape, store| {
                let pc = tape.constant(patches.clone());
                let h = model.encode_tape(tape, store, pc);
                let logits = model.class_logits_tape(tape, store, h, tau, false).unwrap();
                mean_cross_entropy(tape, logits, &labels).unwrap()
            },
        );
        assert!(
            report.max_rel_err < TOL,
            "codebook ce config {it}: {} at {}",
            report.max_rel_err,
            report.worst_param
        );
    }
}

#[test]
fn affine_head_ce_gradients() {
    let mut rng = derive(104, &[0]);
    for it in 0..CONFIGS {
        let model = random_model(&mut rng, CodebookMode::None);
        let b = rng.random_range(2..6);
        let patches = random_patches(&mut rng, &model, b);
        let labels = random_labels(&mut rng, b, model.dims.n_classes);
        let tau = rng.random_range(0.15..0.4);
        let mut pids = encoder_ids(&model);
        pids.extend(model.classify.as_ref().unwrap().param_ids());
        let mut store = model.store.clone();
        let mut check_rng = derive(104, &[1, it as u64]);
        let report = check_gradients(
            &mut store,
            &pids,
            SAMPLES,
            EPS,
            &mut check_rng,
            &mut |tape, store| {
                let pc = tape.constant(patches.clone());
                let h = model.encode_tape(tape, store, pc);
                let logits = model.class_logits_tape(tape, store, h, tau, false).unwrap();
                mean_cross_entropy(tape, logits, &labels).unwrap()
            },
        );
        assert!(
            report.max_rel_err < TOL,
            "affine head config {it}: {} at {}",
            report.max_rel_err,
            report.worst_param
        );
    }
}

#[test]
fn kl_distillation_gradients() {
    let mut rng = derive(105, &[0]);
    for it in 0..CONFIGS {
        let model = random_model(&mut rng, CodebookMode::Learned);
        let k = model.dims.n_classes;
        let b = rng.random_range(3..6);
        let m = rng.random_range(2..=b - 1);
        let paired = subset(&mut rng, b, m);
        let patches = random_patches(&mut rng, &model, b);
        let p_t = prob_rows(&mut rng, m, k);
        let mut pids = encoder_ids(&model);
        pids.extend(model.student1.param_ids());
        pids.extend(model.student2.param_ids());
        let tau_s = model.cfg.tau_s;
        let mut store = model.store.clone();
        let mut check_rng = derive(105, &[1, it as u64]);
        let report = check_gradients(
            &mut store,
            &pids,
            SAMPLES,
            EPS,
            &mut check_rng,
            &mut |tape, store| {
                let pc = tape.constant(patches.clone());
                let h_raw = model.encode_tape(tape, store, pc);
                let h_s = model.student_tape(tape, store, h_raw);
                let logits = model.class_logits_tape(tape, store, h_s, tau_s, true).unwrap();
                let logits_m = tape.gather_rows(logits, &paired);
                kl_distill(tape, &p_t, logits_m).unwrap()
            },
        );
        assert!(
            report.max_rel_err < TOL,
            "kl config {it}: {} at {}",
            report.max_rel_err,
            report.worst_param
        );
    }
}

#[test]
fn auxiliary_ce_gradients() {
    let mut rng = derive(106, &[0]);
    for it in 0..CONFIGS {
        let model = random_model(&mut rng, CodebookMode::Learned);
        let b = rng.random_range(2..6);
        let patches = random_patches(&mut rng, &model, b);
        let labels = random_labels(&mut rng, b, model.dims.n_classes);
        let tau_s = model.cfg.tau_s;
        let mut pids = encoder_ids(&model);
        pids.extend(model.student1.param_ids());
        pids.extend(model.student2.param_ids());
        let mut store = model.store.clone();
        let mut check_rng = derive(106, &[1, it as u64]);
        let report = check_gradients(
            &mut store,
            &pids,
            SAMPLES,
            EPS,
            &mut check_rng,
            &mut |tape, store| {
                let pc = tape.constant(patches.clone());
                let h_raw = model.encode_tape(tape, store, pc);
                let h_s = model.student_tape(tape, store, h_raw);
                let logits = model.class_logits_tape(tape, store, h_s, tau_s, true).unwrap();
                mean_cross_entropy(tape, logits, &labels).unwrap()
            },
        );
        assert!(
            report.max_rel_err < TOL,
            "aux ce config {it}: {} at {}",
            report.max_rel_err,
            report.worst_param
        );
    }
}

#[test]
fn info_nce_drug_gradients() {
    let mut rng = derive(107, &[0]);
    for it in 0..CONFIGS {
        let model = random_model(&mut rng, CodebookMode::Learned);
        let b = rng.random_range(2..6);
        let patches = random_patches(&mut rng, &model, b);
        let labels = random_labels(&mut rng, b, model.dims.n_classes);
        let fps = model.fingerprints.select(Axis(0), &labels);
        let temp = rng.random_range(0.05..0.2);
        let mut pids = encoder_ids(&model);
        pids.extend(model.nce_img.param_ids());
        pids.extend(model.nce_drug.param_ids());
        let mut store = model.store.clone();
        let mut check_rng = derive(107, &[1, it as u64]);
        let report = check_gradients(
            &mut store,
            &pids,
            SAMPLES,
            EPS,
            &mut check_rng,
            &mut |tape, store| {
                let pc = tape.constant(patches.clone());
                let h_raw = model.encode_tape(tape, store, pc);
                let zi = model.nce_img.forward(tape, store, h_raw);
                let fc = tape.constant(fps.clone());
                let zd = model.nce_drug.forward(tape, store, fc);
                info_nce_symmetric(tape, zi, zd, temp).unwrap()
            },
        );
        assert!(
            report.max_rel_err < TOL,
            "nce drug config {it}: {} at {}",
            report.max_rel_err,
            report.worst_param
        );
    }
}

#[test]
fn info_nce_rna_gradients() {
    let mut rng = derive(108, &[0]);
    for it in 0..CONFIGS {
        let model = random_model(&mut rng, CodebookMode::Learned);
        let b = rng.random_range(3..6);
        let m = rng.random_range(2..=b - 1);
        let paired = subset(&mut rng, b, m);
        let patches = random_patches(&mut rng, &model, b);
        let rna = smooth(&mut rng, m, model.dims.n_genes, 1.0);
        let temp = rng.random_range(0.05..0.2);
        let mut pids = encoder_ids(&model);
        pids.extend(model.nce_img.param_ids());
        pids.extend(model.nce_rna.param_ids());
        let mut store = model.store.clone();
        let mut check_rng = derive(108, &[1, it as u64]);
        let report = check_gradients(
            &mut store,
            &pids,
            SAMPLES,
            EPS,
            &mut check_rng,
            &mut |tape, store| {
                let pc = tape.constant(patches.clone());
                let h_raw = model.encode_tape(tape, store, pc);
                let h_m = tape.gather_rows(h_raw, &paired);
                let zi = model.nce_img.forward(tape, store, h_m);
                let rc = tape.constant(rna.clone());
                let zr = model.nce_rna.forward(tape, store, rc);
                info_nce_symmetric(tape, zi, zr, temp).unwrap()
            },
        );
        assert!(
            report.max_rel_err < TOL,
            "nce rna config {it}: {} at {}",
            report.max_rel_err,
            report.worst_param
        );
    }
}

#[test]
fn ssl_online_gradients() {
    let mut rng = derive(109, &[0]);
    for it in 0..CONFIGS {
        let model = random_model(&mut rng, CodebookMode::Learned);
        let b = rng.random_range(2..6);
        let view1 = random_patches(&mut rng, &model, b);
        let view2 = random_patches(&mut rng, &model, b);
        let p1 = prob_rows(&mut rng, b, model.cfg.ssl_out_dim);
        let p2 = prob_rows(&mut rng, b, model.cfg.ssl_out_dim);
        let temp = model.cfg.ssl_online_temp;
        let mut pids = encoder_ids(&model);
        pids.extend(model.ssl1.param_ids());
        pids.extend(model.ssl2.param_ids());
        let mut store = model.store.clone();
        let mut check_rng = derive(109, &[1, it as u64]);
        let report = check_gradients(
            &mut store,
            &pids,
            SAMPLES,
            EPS,
            &mut check_rng,
            &mut |tape, store| {
                let v1 = tape.constant(view1.clone());
                let h1 = model.encode_tape(tape, store, v1);
                let o1 = model.ssl_head_tape(tape, store, h1);
                let v2 = tape.constant(view2.clone());
                let h2 = model.encode_tape(tape, store, v2);
                let o2 = model.ssl_head_tape(tape, store, h2);
                ssl_cross_terms(tape, &p1, &p2, o1, o2, temp)
            },
        );
        assert!(
            report.max_rel_err < TOL,
            "ssl config {it}: {} at {}",
            report.max_rel_err,
            report.worst_param
        );
    }
}

/// The weighted sum of all five terms on one tape, sharing a single
/// encoder forward. Catches accumulation errors across paths that the
/// per-family checks cannot see.
#[test]
fn full_objective_gradients() {
    let mut rng = derive(110, &[0]);
    for it in 0..CONFIGS {
        let model = random_model(&mut rng, CodebookMode::Learned);
        let d = model.cfg.d;
        let k = model.dims.n_classes;
        let b = rng.random_range(3..6);
        let m = rng.random_range(2..=b - 1);
        let paired = subset(&mut rng, b, m);
        let patches = random_patches(&mut rng, &model, b);
        let view1 = random_patches(&mut rng, &model, b);
        let view2 = random_patches(&mut rng, &model, b);
        let doses = Array2::from_shape_fn((m, 1), |_| rng.random::<f64>());
        let rna = smooth(&mut rng, m, model.dims.n_genes, 1.0);
        let dose_emb = smooth(&mut rng, m, model.dims.surrogate_dose_dim, 1.0);
        let cell_enc = smooth(&mut rng, m, model.dims.surrogate_cell_dim, 1.0);
        let mask = dropout_mask(&mut rng, m, 2 * d, 0.2);
        let labels = random_labels(&mut rng, b, k);
        let paired_labels: Vec<usize> = paired.iter().map(|&i| labels[i]).collect();
        let fps = model.fingerprints.select(Axis(0), &labels);
        let p_t = prob_rows(&mut rng, m, k);
        let p1 = prob_rows(&mut rng, b, model.cfg.ssl_out_dim);
        let p2 = prob_rows(&mut rng, b, model.cfg.ssl_out_dim);
        let alpha = rng.random_range(0.2..1.5);
        let beta = rng.random_range(0.2..1.5);
        let lambda_aux = rng.random_range(0.2..1.5);
        let cfg = model.cfg.clone();
        let bn = model.fusion_bn.clone();
        // The student path sees the prototypes through a stop-gradient.
        // Finite differences cannot express that (perturbing V still moves
        // the detached value), so the snapshot below plays the constant the
        // detach op produces at this exact parameter setting.
        let v_snapshot = model.store.get(model.codebook.as_ref().unwrap().v).clone();
        let mut pids = encoder_ids(&model);
        pids.extend(film_ids(&model));
        pids.extend(teacher_trunk_ids(&model));
        pids.push(model.codebook.as_ref().unwrap().v);
        pids.extend(model.student1.param_ids());
        pids.extend(model.student2.param_ids());
        pids.extend(model.ssl1.param_ids());
        pids.extend(model.ssl2.param_ids());
        pids.extend(model.nce_img.param_ids());
        pids.extend(model.nce_drug.param_ids());
        let shadowed = bn_shadowed_bias_ids(&model);
        pids.retain(|id| !shadowed.contains(id));
        let mut store = model.store.clone();
        let mut check_rng = derive(110, &[1, it as u64]);
        let report = check_gradients(
            &mut store,
            &pids,
            2,
            EPS,
            &mut check_rng,
            &mut |tape, store| {
                let pc = tape.constant(patches.clone());
                let h_raw = model.encode_tape(tape, store, pc);

                let h_s = model.student_tape(tape, store, h_raw);
                let hn = tape.row_l2_normalize(h_s);
                let vc = tape.constant(v_snapshot.clone());
                let sim = tape.matmul_nt(hn, vc);
                let logits_s = tape.scale(sim, 1.0 / cfg.tau_s);
                let l_aux = mean_cross_entropy(tape, logits_s, &labels).unwrap();

                let h_m = tape.gather_rows(h_raw, &paired);
                let h_i = model.film_tape(tape, store, h_m, &doses);
                let rna_c = tape.constant(rna.clone());
                let rna_h = model.rna_enc.forward(tape, store, rna_c);
                let dose_c = tape.constant(dose_emb.clone());
                let rna_cat = tape.concat_cols(rna_h, dose_c);
                let h_r = model.rna_proj.forward(tape, store, rna_cat);
                let cell_c = tape.constant(cell_enc.clone());
                let h_c = model.cell_proj.forward(tape, store, cell_c);
                let cat = tape.concat_cols(h_i, h_r);
                let cat = tape.concat_cols(cat, h_c);
                let f1 = model.fusion1.forward(tape, store, cat);
                let gamma = tape.param(store, bn.gamma);
                let beta_p = tape.param(store, bn.beta);
                let (f1, _, _) = tape.batchnorm_train(f1, gamma, beta_p, bn.eps);
                let f1 = tape.relu(f1);
                let mc = tape.constant(mask.clone());
                let f1 = tape.mul(f1, mc);
                let h_t = model.fusion2.forward(tape, store, f1);
                let logits_t =
                    model.class_logits_tape(tape, store, h_t, cfg.tau, false).unwrap();
                let l_teacher = mean_cross_entropy(tape, logits_t, &paired_labels).unwrap();

                let logits_s_m = tape.gather_rows(logits_s, &paired);
                let l_distill = kl_distill(tape, &p_t, logits_s_m).unwrap();

                let zi = model.nce_img.forward(tape, store, h_raw);
                let fc = tape.constant(fps.clone());
                let zd = model.nce_drug.forward(tape, store, fc);
                let l_nce = info_nce_symmetric(tape, zi, zd, cfg.info_nce_temp).unwrap();

                let v1 = tape.constant(view1.clone());
                let e1 = model.encode_tape(tape, store, v1);
                let o1 = model.ssl_head_tape(tape, store, e1);
                let v2 = tape.constant(view2.clone());
                let e2 = model.encode_tape(tape, store, v2);
                let o2 = model.ssl_head_tape(tape, store, e2);
                let l_ssl = ssl_cross_terms(tape, &p1, &p2, o1, o2, cfg.ssl_online_temp);

                let mut total = l_distill;
                let t = tape.scale(l_teacher, alpha);
                total = tape.add(total, t);
                total = tape.add(total, l_nce);
                let s = tape.scale(l_ssl, beta);
                total = tape.add(total, s);
                let a = tape.scale(l_aux, lambda_aux);
                tape.add(total, a)
            },
        );
        assert!(
            report.max_rel_err < TOL,
            "full objective config {it}: {} at {}",
            report.max_rel_err,
            report.worst_param
        );
    }
}
