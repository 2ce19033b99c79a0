//! Report merging: harvest metrics from run directories into one summary
//! table plus comparison plots. Missing or unreadable metric files mark
//! the row "absent" instead of failing, so partial pipelines still report.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde_json::Value;

use tide_core::eval::jacobi_eigh;
use tide_core::Result;

use crate::config::{write_echo, RunConfig};
use crate::plots;

pub const METRICS: &[&str] = &[
    "oneshot_top1_mean",
    "oneshot_top1_sd",
    "oneshot_top5_mean",
    "oneshot_top5_sd",
    "target_ap",
    "target_auc",
    "target_hit1",
    "target_hit5",
    "permutation_ap",
    "best_knn",
];

struct RunSummary {
    run: String,
    method: String,
    values: Vec<Option<f64>>,
    sweep: Option<Vec<(u64, String, f64)>>,
    embedding: Option<(Vec<usize>, Array2<f64>)>,
}

impl RunSummary {
    fn get(&self, metric: &str) -> Option<f64> {
        METRICS
            .iter()
            .position(|&m| m == metric)
            .and_then(|i| self.values[i])
    }
}

fn read_json(path: &Path) -> Option<Value> {
    let text = fs::read_to_string(path).ok()?;
    match serde_json::from_str(&text) {
        Ok(v) => Some(v),
        Err(e) => {
            eprintln!("warning: skipping malformed {}: {e}", path.display());
            None
        }
    }
}

fn field(v: Option<&Value>, path: &[&str]) -> Option<f64> {
    let mut cur = v?;
    for key in path {
        cur = cur.get(key)?;
    }
    cur.as_f64()
}

fn method_label(train: Option<&Value>, fallback: &str) -> String {
    let Some(train) = train else {
        return fallback.to_string();
    };
    let mut label = train
        .get("baseline")
        .and_then(Value::as_str)
        .unwrap_or(fallback)
        .to_string();
    if let Some(mode) = train.get("codebook_mode").and_then(Value::as_str) {
        if mode != "learned" {
            label.push_str("+cb_");
            label.push_str(mode);
        }
    }
    if train.get("no_dose").and_then(Value::as_bool) == Some(true) {
        label.push_str("+no_dose");
    }
    label
}

fn method_of(dir: &Path) -> String {
    let fallback = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    if let Some(man) = read_json(&dir.join("manifest.json")) {
        match man.get("kind").and_then(Value::as_str) {
            Some("distiller") => return method_label(man.get("config"), &fallback),
            Some("surrogate") => return "surrogate".to_string(),
            Some("dataset") => return "dataset".to_string(),
            _ => {}
        }
    }
    if let Some(echo) = read_json(&dir.join("run_config.json")) {
        if let Some(cfg) = echo.get("config") {
            return method_label(cfg.get("train"), &fallback);
        }
    }
    if dir.join("bound_sweep.csv").exists() {
        return "theory".to_string();
    }
    fallback
}

fn read_sweep_csv(path: &Path) -> Option<Vec<(u64, String, f64)>> {
    let text = fs::read_to_string(path).ok()?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            continue;
        }
        let (Ok(seed), Ok(slack)) = (f[0].parse::<u64>(), f[5].parse::<f64>()) else {
            continue;
        };
        rows.push((seed, f[1].to_string(), slack));
    }
    if rows.is_empty() {
        None
    } else {
        Some(rows)
    }
}

fn read_embeddings_csv(path: &Path) -> Option<(Vec<usize>, Array2<f64>)> {
    let text = fs::read_to_string(path).ok()?;
    let mut labels = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 4 {
            continue;
        }
        let Ok(label) = f[2].parse::<usize>() else {
            continue;
        };
        let mut row = Vec::with_capacity(f.len() - 3);
        let mut ok = true;
        for x in &f[3..] {
            match x.parse::<f64>() {
                Ok(v) => row.push(v),
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok || rows.first().is_some_and(|r| r.len() != row.len()) {
            continue;
        }
        labels.push(label);
        rows.push(row);
    }
    let dim = rows.first()?.len();
    let mut mat = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        for (j, &x) in r.iter().enumerate() {
            mat[[i, j]] = x;
        }
    }
    Some((labels, mat))
}

fn summarize(dir: &Path) -> RunSummary {
    if !dir.is_dir() {
        eprintln!("warning: run directory {} not found", dir.display());
    }
    let oneshot = read_json(&dir.join("oneshot_report.json"));
    let target = read_json(&dir.join("target_report.json"));
    let manifest = read_json(&dir.join("manifest.json"));
    let best_knn = manifest.as_ref().and_then(|m| {
        if m.get("kind").and_then(Value::as_str) == Some("distiller") {
            m.get("best_knn").and_then(Value::as_f64)
        } else {
            None
        }
    });
    let values = vec![
        field(oneshot.as_ref(), &["top1_mean"]),
        field(oneshot.as_ref(), &["top1_sd"]),
        field(oneshot.as_ref(), &["top5_mean"]),
        field(oneshot.as_ref(), &["top5_sd"]),
        field(target.as_ref(), &["dose_avg", "ap"]),
        field(target.as_ref(), &["dose_avg", "auc"]),
        field(target.as_ref(), &["dose_avg", "hit_at_1"]),
        field(target.as_ref(), &["dose_avg", "hit_at_5"]),
        field(target.as_ref(), &["permutation_ap"]),
        best_knn,
    ];
    RunSummary {
        run: dir.display().to_string(),
        method: method_of(dir),
        values,
        sweep: read_sweep_csv(&dir.join("bound_sweep.csv")),
        embedding: read_embeddings_csv(&dir.join("embeddings.csv")),
    }
}

/// Category labels for plots; duplicate method names get a numeric suffix
/// so bars stay distinguishable.
fn plot_labels(runs: &[&RunSummary]) -> Vec<String> {
    let mut labels = Vec::with_capacity(runs.len());
    for (i, r) in runs.iter().enumerate() {
        let dup = runs
            .iter()
            .enumerate()
            .any(|(j, o)| j != i && o.method == r.method);
        if dup {
            labels.push(format!("{}#{}", r.method, i + 1));
        } else {
            labels.push(r.method.clone());
        }
    }
    labels
}

fn pca2(x: &Array2<f64>) -> Vec<(f64, f64)> {
    if x.nrows() == 0 || x.ncols() == 0 {
        return Vec::new();
    }
    let mean = x.mean_axis(Axis(0)).expect("nonempty");
    let centered = x - &mean;
    let denom = (x.nrows().max(2) - 1) as f64;
    let cov = centered.t().dot(&centered) / denom;
    let (_, vecs) = jacobi_eigh(&cov);
    let p1 = vecs.column(0);
    let p2 = vecs.column(if vecs.ncols() > 1 { 1 } else { 0 });
    centered
        .rows()
        .into_iter()
        .map(|r| (r.dot(&p1), r.dot(&p2)))
        .collect()
}

pub fn cmd_report(cfg: &RunConfig, run_dirs: &[PathBuf]) -> Result<()> {
    fs::create_dir_all(&cfg.report_dir)?;
    let runs: Vec<RunSummary> = run_dirs.iter().map(|d| summarize(d)).collect();

    let mut csv = String::from("run,method,metric,value\n");
    for r in &runs {
        for (i, &metric) in METRICS.iter().enumerate() {
            match r.values[i] {
                Some(v) => csv.push_str(&format!("{},{},{},{}\n", r.run, r.method, metric, v)),
                None => csv.push_str(&format!("{},{},{},absent\n", r.run, r.method, metric)),
            }
        }
    }
    fs::write(cfg.report_dir.join("summary.csv"), csv)?;

    let oneshot_runs: Vec<&RunSummary> = runs
        .iter()
        .filter(|r| r.get("oneshot_top1_mean").is_some())
        .collect();
    if !oneshot_runs.is_empty() {
        let cats = plot_labels(&oneshot_runs);
        let top1: Vec<Option<f64>> = oneshot_runs.iter().map(|r| r.get("oneshot_top1_mean")).collect();
        let top5: Vec<Option<f64>> = oneshot_runs.iter().map(|r| r.get("oneshot_top5_mean")).collect();
        plots::grouped_bars(
            &cfg.report_dir.join("oneshot_bar.png"),
            "one-shot transfer accuracy (%)",
            &cats,
            &[("top-1".to_string(), top1), ("top-5".to_string(), top5)],
        )?;
    }

    let target_runs: Vec<&RunSummary> = runs
        .iter()
        .filter(|r| r.get("target_ap").is_some())
        .collect();
    if !target_runs.is_empty() {
        let mut cats = plot_labels(&target_runs);
        let mut ap: Vec<Option<f64>> = target_runs.iter().map(|r| r.get("target_ap")).collect();
        let mut auc: Vec<Option<f64>> = target_runs.iter().map(|r| r.get("target_auc")).collect();
        if let Some(p) = target_runs.iter().find_map(|r| r.get("permutation_ap")) {
            cats.push("chance".to_string());
            ap.push(Some(p));
            auc.push(None);
        }
        plots::grouped_bars(
            &cfg.report_dir.join("target_bar.png"),
            "drug-target retrieval",
            &cats,
            &[("ap".to_string(), ap), ("auc".to_string(), auc)],
        )?;
    }

    if let Some(rows) = runs.iter().find_map(|r| r.sweep.as_ref()) {
        let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
        for (seed, family, slack) in rows {
            match series.iter_mut().find(|(name, _)| name == family) {
                Some((_, pts)) => pts.push((*seed as f64, *slack)),
                None => series.push((family.clone(), vec![(*seed as f64, *slack)])),
            }
        }
        plots::sweep_curves(
            &cfg.report_dir.join("bound_sweep.png"),
            "guided-learning bound slack by teacher family",
            &series,
        )?;
    }

    if let Some((labels, embs)) = runs.iter().find_map(|r| r.embedding.as_ref()) {
        let pts: Vec<(f64, f64, usize)> = pca2(embs)
            .into_iter()
            .zip(labels)
            .map(|((x, y), &l)| (x, y, l))
            .collect();
        plots::scatter_2d(
            &cfg.report_dir.join("embedding_scatter.png"),
            "held-out drug embeddings (pca)",
            &pts,
        )?;
    }

    write_echo(&cfg.report_dir, "report", cfg)?;
    println!(
        "report: {} run(s) merged -> {}",
        runs.len(),
        cfg.report_dir.display()
    );
    Ok(())
}
