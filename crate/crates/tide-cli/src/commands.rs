//! Command implementations. Each writes its artifacts plus a
//! `run_config.json` echo into the output directory and prints a short
//! summary line; verification commands return an exit code instead of
//! erroring so the caller can distinguish failures from misuse.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView3};
use serde::Serialize;

use tide_core::distiller::{load_model, train, DistillerManifest, Model, TrainConfig};
use tide_core::eval::{
    aggregate_wells, oneshot_transfer, pca_cs_align, permutation_ap, score_and_rank,
    OneShotConfig, OneShotReport, TargetReport,
};
use tide_core::io::{config_hash, load_dataset, read_manifest, save_dataset};
use tide_core::rng::derive;
use tide_core::surrogate::{load_surrogate, save_surrogate, train_surrogate};
use tide_core::synthworld::{generate_dataset, Dataset, Split};
use tide_core::theory::{sweep, DiscreteWorld, TeacherFamily, TeacherTable};
use tide_core::{Result, TideError};

use crate::config::{write_echo, RunConfig};

const TAG_CLI: u64 = 0xC1;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn cmd_synth(cfg: &RunConfig, force: bool) -> Result<()> {
    let ds = generate_dataset(&cfg.synth)?;
    save_dataset(&ds, &cfg.dataset_dir, force)?;
    write_echo(&cfg.dataset_dir, "synth", cfg)?;
    println!(
        "dataset: {} samples ({} paired, {} controls), {} gene-perturbation images -> {}",
        ds.samples.len(),
        ds.paired().count(),
        ds.controls().count(),
        ds.gene_samples.len(),
        cfg.dataset_dir.display()
    );
    Ok(())
}

pub fn cmd_train_scfm(cfg: &RunConfig, force: bool) -> Result<()> {
    let ds = load_dataset(&cfg.dataset_dir)?;
    let sur = train_surrogate(&ds, &cfg.surrogate)?;
    save_surrogate(&sur, &cfg.surrogate_dir, force)?;
    let mut csv = String::from("epoch,mse,r2,logfc\n");
    for m in &sur.metrics {
        csv.push_str(&format!("{},{},{},{}\n", m.epoch, m.mse, m.r2, m.logfc));
    }
    fs::write(cfg.surrogate_dir.join("surrogate_log.csv"), csv)?;
    write_echo(&cfg.surrogate_dir, "train-scfm", cfg)?;
    match sur.metrics.last() {
        Some(m) => println!(
            "surrogate: {} epochs, held-out R2 {:.3}, logFC corr {:.3} -> {}",
            m.epoch,
            m.r2,
            m.logfc,
            cfg.surrogate_dir.display()
        ),
        None => println!("surrogate: trained 0 epochs -> {}", cfg.surrogate_dir.display()),
    }
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, command: &str, resume: bool, force: bool) -> Result<()> {
    let ds = load_dataset(&cfg.dataset_dir)?;
    let sur = load_surrogate(&cfg.surrogate_dir)?;
    let out = train(&ds, &sur, &cfg.train, Some(&cfg.checkpoint_dir), resume, force)?;
    write_echo(&cfg.checkpoint_dir, command, cfg)?;
    println!(
        "trained {}: {} epochs, best knn {:.3} at epoch {} -> {}",
        cfg.train.baseline.label(),
        out.log.len(),
        out.best_knn,
        out.best_epoch,
        cfg.checkpoint_dir.display()
    );
    Ok(())
}

fn split_label(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

fn load_eval_pair(cfg: &RunConfig) -> Result<(Dataset, Model, DistillerManifest)> {
    let ds = load_dataset(&cfg.dataset_dir)?;
    let (model, man) = load_model(&cfg.checkpoint_dir)?;
    let ds_hash = config_hash(&ds.config)?;
    if man.dataset_config_hash != ds_hash {
        return Err(TideError::usage(format!(
            "checkpoint {} was trained on a different dataset (hash {}, this dataset {})",
            cfg.checkpoint_dir.display(),
            man.dataset_config_hash,
            ds_hash
        )));
    }
    Ok((ds, model, man))
}

#[derive(Serialize)]
struct OneshotReportFile<'a> {
    kind: &'static str,
    run_config_hash: &'a str,
    dataset_config_hash: &'a str,
    checkpoint_config_hash: &'a str,
    split: &'static str,
    n_classes: usize,
    #[serde(flatten)]
    report: &'a OneShotReport,
}

/// Frozen-encoder one-shot transfer on one drug split; returns the
/// report plus per-sample (id, drug, label) metadata and embeddings for
/// the projection scatter.
pub(crate) fn oneshot_eval(
    ds: &Dataset,
    model: &Model,
    ocfg: &OneShotConfig,
    split: Split,
) -> Result<(OneShotReport, Vec<(String, String, usize)>, Array2<f64>)> {
    let drugs = match split {
        Split::Train => &ds.splits.train_drugs,
        Split::Val => &ds.splits.val_drugs,
        Split::Test => &ds.splits.test_drugs,
    };
    if drugs.len() < 2 {
        return Err(TideError::data(format!(
            "{} split holds {} drug(s); one-shot transfer needs at least 2",
            split_label(split),
            drugs.len()
        )));
    }
    let idx = ds.split_sample_indices(split);
    if idx.is_empty() {
        return Err(TideError::data(format!(
            "{} split has no treated samples",
            split_label(split)
        )));
    }
    let images: Vec<ArrayView3<f64>> = idx.iter().map(|&i| ds.samples[i].image.view()).collect();
    let embs = model.embed_images(&images)?;
    let mut labels = Vec::with_capacity(idx.len());
    let mut meta = Vec::with_capacity(idx.len());
    for &i in &idx {
        let s = &ds.samples[i];
        let drug = s.drug_id.as_deref().expect("split indices are treated samples");
        let label = drugs
            .iter()
            .position(|d| d == drug)
            .expect("split indices filtered by this split");
        labels.push(label);
        meta.push((s.sample_id.clone(), drug.to_string(), label));
    }
    let report = oneshot_transfer(&embs, &labels, drugs.len(), ocfg)?;
    Ok((report, meta, embs))
}

fn write_embeddings_csv(
    path: &Path,
    meta: &[(String, String, usize)],
    embs: &Array2<f64>,
) -> Result<()> {
    let mut csv = String::from("sample_id,drug_id,label");
    for j in 0..embs.ncols() {
        csv.push_str(&format!(",e{j}"));
    }
    csv.push('\n');
    for (row, (sid, drug, label)) in meta.iter().enumerate() {
        csv.push_str(&format!("{sid},{drug},{label}"));
        for &x in embs.row(row) {
            csv.push_str(&format!(",{x}"));
        }
        csv.push('\n');
    }
    fs::write(path, csv)?;
    Ok(())
}

pub fn cmd_eval_oneshot(cfg: &RunConfig, split: Split) -> Result<()> {
    let (ds, model, man) = load_eval_pair(cfg)?;
    let n_classes = match split {
        Split::Train => ds.splits.train_drugs.len(),
        Split::Val => ds.splits.val_drugs.len(),
        Split::Test => ds.splits.test_drugs.len(),
    };
    let (report, meta, embs) = oneshot_eval(&ds, &model, &cfg.oneshot, split)?;
    let run_hash = write_echo(&cfg.report_dir, "eval-oneshot", cfg)?;
    write_json(
        &cfg.report_dir.join("oneshot_report.json"),
        &OneshotReportFile {
            kind: "oneshot_report",
            run_config_hash: &run_hash,
            dataset_config_hash: &man.dataset_config_hash,
            checkpoint_config_hash: &man.config_hash,
            split: split_label(split),
            n_classes,
            report: &report,
        },
    )?;
    write_embeddings_csv(&cfg.report_dir.join("embeddings.csv"), &meta, &embs)?;
    println!(
        "one-shot ({}): top1 {:.2} +- {:.2}, top5 {:.2} +- {:.2} over {} runs -> {}",
        split_label(split),
        report.top1_mean,
        report.top1_sd,
        report.top5_mean,
        report.top5_sd,
        report.n_runs,
        cfg.report_dir.display()
    );
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
struct WellInfo {
    batch: String,
    control: bool,
    drug: Option<String>,
    dose: Option<f64>,
    gene: Option<usize>,
}

fn well_table(ds: &Dataset) -> Result<BTreeMap<String, WellInfo>> {
    let mut map: BTreeMap<String, WellInfo> = BTreeMap::new();
    let mut insert = |well: &str, info: WellInfo| -> Result<()> {
        match map.get(well) {
            None => {
                map.insert(well.to_string(), info);
                Ok(())
            }
            Some(prev) if *prev == info => Ok(()),
            Some(_) => Err(TideError::data(format!(
                "well {well} carries inconsistent metadata across samples"
            ))),
        }
    };
    for s in &ds.samples {
        insert(
            &s.well_id,
            WellInfo {
                batch: s.batch_id.clone(),
                control: s.is_control,
                drug: s.drug_id.clone(),
                dose: s.dose_image,
                gene: None,
            },
        )?;
    }
    for g in &ds.gene_samples {
        insert(
            &g.well_id,
            WellInfo {
                batch: g.batch_id.clone(),
                control: false,
                drug: None,
                dose: None,
                gene: Some(g.gene),
            },
        )?;
    }
    Ok(map)
}

#[derive(Serialize)]
struct TargetReportFile<'a> {
    kind: &'static str,
    run_config_hash: &'a str,
    dataset_config_hash: &'a str,
    checkpoint_config_hash: &'a str,
    permutation_ap: f64,
    pca_rank: usize,
    #[serde(flatten)]
    report: &'a TargetReport,
}

pub fn cmd_eval_target(cfg: &RunConfig) -> Result<()> {
    let (ds, model, man) = load_eval_pair(cfg)?;
    if ds.gene_samples.is_empty() {
        return Err(TideError::data(
            "target discovery needs gene-perturbation references; \
             regenerate the dataset with gene_wells_per_gene >= 1",
        ));
    }

    let images: Vec<ArrayView3<f64>> = ds
        .samples
        .iter()
        .map(|s| s.image.view())
        .chain(ds.gene_samples.iter().map(|g| g.image.view()))
        .collect();
    let well_ids: Vec<String> = ds
        .samples
        .iter()
        .map(|s| s.well_id.clone())
        .chain(ds.gene_samples.iter().map(|g| g.well_id.clone()))
        .collect();
    let crop_embs = model.embed_images(&images)?;
    let (well_embs, order) = aggregate_wells(&crop_embs, &well_ids)?;
    let table = well_table(&ds)?;
    let mut mask = Vec::with_capacity(order.len());
    let mut batches = Vec::with_capacity(order.len());
    for id in &order {
        let info = &table[id];
        mask.push(info.control);
        batches.push(info.batch.clone());
    }
    let (aligned, align_info) = pca_cs_align(&well_embs, &mask, &batches)?;
    for w in &align_info.warnings {
        eprintln!("warning: {w}");
    }
    let dim = aligned.ncols();

    let mean_rows = |rows: &[usize]| -> Array1<f64> {
        let mut m = Array1::zeros(dim);
        for &r in rows {
            m += &aligned.row(r);
        }
        m / rows.len() as f64
    };

    let mut per_dose: Vec<(f64, Array2<f64>, Vec<String>)> = Vec::new();
    for &dose in &ds.config.dose_grid {
        let mut by_drug: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (row, id) in order.iter().enumerate() {
            let info = &table[id];
            if info.dose == Some(dose) {
                if let Some(drug) = &info.drug {
                    by_drug.entry(drug).or_default().push(row);
                }
            }
        }
        if by_drug.is_empty() {
            continue;
        }
        let mut embs = Array2::zeros((by_drug.len(), dim));
        let mut ids = Vec::with_capacity(by_drug.len());
        for (i, (drug, rows)) in by_drug.iter().enumerate() {
            embs.row_mut(i).assign(&mean_rows(rows));
            ids.push(drug.to_string());
        }
        per_dose.push((dose, embs, ids));
    }
    if per_dose.is_empty() {
        return Err(TideError::data("no treated wells found on the dose grid"));
    }

    let n_genes = ds.config.n_genes;
    let mut gene_rows: Vec<Vec<usize>> = vec![Vec::new(); n_genes];
    for (row, id) in order.iter().enumerate() {
        if let Some(g) = table[id].gene {
            gene_rows[g].push(row);
        }
    }
    let mut gene_embs = Array2::zeros((n_genes, dim));
    for (g, rows) in gene_rows.iter().enumerate() {
        if rows.is_empty() {
            return Err(TideError::data(format!(
                "gene {g} has no perturbation wells; cannot build its reference embedding"
            )));
        }
        gene_embs.row_mut(g).assign(&mean_rows(rows));
    }

    let mut report = score_and_rank(&per_dose, &gene_embs, &ds.truth)?;
    report.n_seeds = cfg.target_seeds;

    let eval_seed = cfg.seed.unwrap_or(0);
    let mut perm_sum = 0.0;
    for (_, _, ids) in &per_dose {
        let mut labels = Vec::with_capacity(ids.len() * n_genes);
        for id in ids {
            let pos = ds.truth.positives_of(id);
            for g in 0..n_genes {
                labels.push(pos.contains(&g));
            }
        }
        perm_sum += permutation_ap(&labels, cfg.target_seeds, eval_seed)?;
    }
    let perm_ap = perm_sum / per_dose.len() as f64;

    let run_hash = write_echo(&cfg.report_dir, "eval-target", cfg)?;
    write_json(
        &cfg.report_dir.join("target_report.json"),
        &TargetReportFile {
            kind: "target_report",
            run_config_hash: &run_hash,
            dataset_config_hash: &man.dataset_config_hash,
            checkpoint_config_hash: &man.config_hash,
            permutation_ap: perm_ap,
            pca_rank: align_info.rank,
            report: &report,
        },
    )?;
    println!(
        "target discovery: dose-avg AP {:.3} (chance {:.3}), AUC {:.3}, hit@1 {:.3}, hit@5 {:.3} -> {}",
        report.dose_avg.ap,
        perm_ap,
        report.dose_avg.auc,
        report.dose_avg.hit_at_1,
        report.dose_avg.hit_at_5,
        cfg.report_dir.display()
    );
    Ok(())
}

pub fn cmd_verify_bound(cfg: &RunConfig, inject_fault: bool) -> Result<i32> {
    if inject_fault {
        // Negative control: break one teacher slice's normalization and
        // confirm the verifier refuses it.
        let mut rng = derive(cfg.seed.unwrap_or(0), &[TAG_CLI, 0xFA]);
        let world = DiscreteWorld::random(&mut rng, (4, 3, 3, 2));
        let mut table = TeacherTable::bayes(&world).table().clone();
        for d in 0..4 {
            table[[d, 0, 0, 0]] *= 1.5;
        }
        match TeacherTable::new(table) {
            Err(e) => eprintln!("verification failure: injected unnormalized teacher rejected: {e}"),
            Ok(_) => eprintln!(
                "verification failure: injected unnormalized teacher was NOT rejected"
            ),
        }
        return Ok(1);
    }

    let rows = sweep(
        cfg.seed.unwrap_or(0),
        cfg.sweep.n_worlds,
        cfg.sweep.max_dims,
        &TeacherFamily::ALL,
    );
    fs::create_dir_all(&cfg.report_dir)?;
    let mut csv = String::from("seed,family,risk,entropy,kl_term,slack\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.seed, r.family, r.risk, r.entropy, r.kl_term, r.slack
        ));
    }
    fs::write(cfg.report_dir.join("bound_sweep.csv"), csv)?;
    write_echo(&cfg.report_dir, "verify-bound", cfg)?;

    let tol = cfg.sweep.tolerance;
    let mut violations = 0usize;
    let mut min_slack = f64::INFINITY;
    for r in &rows {
        if r.slack < min_slack {
            min_slack = r.slack;
        }
        if r.slack < -tol || r.jensen_min_gap < -tol {
            violations += 1;
            eprintln!(
                "violation: world {} family {} slack {} jensen gap {}",
                r.seed, r.family, r.slack, r.jensen_min_gap
            );
        }
    }
    println!(
        "bound sweep: {} worlds x {} families, min slack {:.3e} -> {}",
        cfg.sweep.n_worlds,
        TeacherFamily::ALL.len(),
        min_slack,
        cfg.report_dir.display()
    );
    if violations > 0 {
        eprintln!("verification failure: {violations} of {} rows violate the bound", rows.len());
        return Ok(1);
    }
    Ok(0)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum AblationVariant {
    Full,
    NoDose,
    CodebookFixed,
    CodebookNone,
    SslOnly,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [
        AblationVariant::Full,
        AblationVariant::NoDose,
        AblationVariant::CodebookFixed,
        AblationVariant::CodebookNone,
        AblationVariant::SslOnly,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoDose => "no_dose",
            AblationVariant::CodebookFixed => "codebook_fixed",
            AblationVariant::CodebookNone => "codebook_none",
            AblationVariant::SslOnly => "ssl_only",
        }
    }

    fn apply(self, t: &mut TrainConfig) {
        use tide_core::codebook::CodebookMode;
        use tide_core::distiller::BaselineKind;
        t.baseline = BaselineKind::Tide;
        match self {
            AblationVariant::Full => {}
            AblationVariant::NoDose => t.no_dose = true,
            AblationVariant::CodebookFixed => t.codebook_mode = CodebookMode::Fixed,
            AblationVariant::CodebookNone => t.codebook_mode = CodebookMode::None,
            AblationVariant::SslOnly => t.baseline = BaselineKind::SslOnly,
        }
    }

    pub fn parse_list(s: &str) -> Result<Vec<AblationVariant>> {
        let mut out = Vec::new();
        for part in s.split(',') {
            let part = part.trim();
            let v = Self::ALL
                .iter()
                .find(|v| v.label() == part)
                .copied()
                .ok_or_else(|| {
                    TideError::usage(format!(
                        "unknown ablation variant {part:?}; expected one of full, no_dose, \
                         codebook_fixed, codebook_none, ssl_only"
                    ))
                })?;
            if !out.contains(&v) {
                out.push(v);
            }
        }
        if out.is_empty() {
            return Err(TideError::usage("ablation variant list is empty"));
        }
        Ok(out)
    }
}

/// Train every requested variant into its own subdirectory and run the
/// one-shot protocol on each, so a single `report` call can compare them.
pub fn cmd_ablate(
    cfg: &RunConfig,
    variants: &[AblationVariant],
    resume: bool,
    force: bool,
) -> Result<()> {
    let ds = load_dataset(&cfg.dataset_dir)?;
    let sur = load_surrogate(&cfg.surrogate_dir)?;
    let ds_hash = config_hash(&ds.config)?;
    let mut lines = Vec::with_capacity(variants.len());
    for &v in variants {
        let mut vcfg = cfg.clone();
        v.apply(&mut vcfg.train);
        vcfg.checkpoint_dir = cfg.checkpoint_dir.join(v.label());
        let out = train(&ds, &sur, &vcfg.train, Some(&vcfg.checkpoint_dir), resume, force)?;
        let (report, meta, embs) = oneshot_eval(&ds, &out.model, &cfg.oneshot, Split::Test)?;
        let run_hash = write_echo(&vcfg.checkpoint_dir, "ablate", &vcfg)?;
        let man: DistillerManifest = read_manifest(&vcfg.checkpoint_dir)?;
        write_json(
            &vcfg.checkpoint_dir.join("oneshot_report.json"),
            &OneshotReportFile {
                kind: "oneshot_report",
                run_config_hash: &run_hash,
                dataset_config_hash: &ds_hash,
                checkpoint_config_hash: &man.config_hash,
                split: "test",
                n_classes: ds.splits.test_drugs.len(),
                report: &report,
            },
        )?;
        write_embeddings_csv(&vcfg.checkpoint_dir.join("embeddings.csv"), &meta, &embs)?;
        lines.push(format!(
            "{:<15} top1 {:>6.2} top5 {:>6.2} best-knn {:.3}",
            v.label(),
            report.top1_mean,
            report.top5_mean,
            out.best_knn
        ));
    }
    println!(
        "ablation grid (test split, {} one-shot runs each):",
        cfg.oneshot.n_runs
    );
    for l in &lines {
        println!("  {l}");
    }
    Ok(())
}
