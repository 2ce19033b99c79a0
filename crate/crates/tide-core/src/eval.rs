//! Evaluation protocols over plain embedding matrices: kNN checkpoint
//! selection, one-shot transfer with a frozen encoder, well-level
//! aggregation, PCA-CS batch alignment, and drug-gene retrieval metrics.
//! Everything here is a pure function of (arrays, seed).

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TideError};
use crate::nn::{sgd_step, ParamStore, Tape};
use crate::rng::derive;
use crate::synthworld::GroundTruthAssoc;

const TAG_EVAL: u64 = 0x40;

fn l2_normalize_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt().max(1e-12);
        row.mapv_inplace(|v| v / n);
    }
    out
}

/// Leave-query-out cosine kNN majority vote. Vote ties break by smaller
/// mean distance within the neighbor set, then by smaller class index.
pub fn knn_select(embeddings: &Array2<f64>, labels: &[usize], k: usize) -> Result<f64> {
    let n = embeddings.nrows();
    if labels.len() != n {
        return Err(TideError::config("knn: one label per embedding required"));
    }
    if k == 0 || k >= n {
        return Err(TideError::config(format!(
            "knn needs 0 < k < n, got k={k} with {n} points"
        )));
    }
    let z = l2_normalize_rows(embeddings);
    let mut correct = 0usize;
    for q in 0..n {
        let mut dist: Vec<(f64, usize)> = (0..n)
            .filter(|&r| r != q)
            .map(|r| (1.0 - z.row(q).dot(&z.row(r)), r))
            .collect();
        dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let neighbors = &dist[..k];
        let mut votes: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
        for &(d, r) in neighbors {
            let e = votes.entry(labels[r]).or_insert((0, 0.0));
            e.0 += 1;
            e.1 += d;
        }
        let winner = votes
            .iter()
            .map(|(&cls, &(count, dsum))| (count, dsum / count as f64, cls))
            .max_by(|a, b| {
                a.0.cmp(&b.0)
                    .then(b.1.total_cmp(&a.1))
                    .then(b.2.cmp(&a.2))
            })
            .map(|(_, _, cls)| cls)
            .expect("k >= 1 neighbor");
        if winner == labels[q] {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OneShotConfig {
    pub n_runs: usize,
    pub head_steps: usize,
    pub head_lr: f64,
    pub temperature: f64,
    /// Fit the head on half the queries and score the other half.
    pub holdout_queries: bool,
    pub seed: u64,
}

impl Default for OneShotConfig {
    fn default() -> Self {
        OneShotConfig {
            n_runs: 50,
            head_steps: 100,
            head_lr: 0.1,
            temperature: 0.07,
            holdout_queries: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OneShotReport {
    pub top1_mean: f64,
    pub top1_sd: f64,
    pub top5_mean: f64,
    pub top5_sd: f64,
    pub n_runs: usize,
    pub per_run: Vec<(f64, f64)>,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One-shot transfer: per run, one support example per class initializes
/// a prototype matrix, which plain gradient descent then fits with
/// cross-entropy on the query embeddings (the encoder stays frozen;
/// only the head moves). Reports mean +- sd of Top-1/Top-5 over runs.
pub fn oneshot_transfer(
    embeddings: &Array2<f64>,
    labels: &[usize],
    n_classes: usize,
    cfg: &OneShotConfig,
) -> Result<OneShotReport> {
    let n = embeddings.nrows();
    if labels.len() != n {
        return Err(TideError::config("oneshot: one label per embedding required"));
    }
    if n_classes < 2 {
        return Err(TideError::config("oneshot needs at least two classes"));
    }
    if cfg.n_runs < 1 {
        return Err(TideError::config("oneshot needs n_runs >= 1"));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= n_classes {
            return Err(TideError::config(format!("label {l} outside {n_classes} classes")));
        }
        by_class[l].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            return Err(TideError::data(format!("class {c} has no support candidate")));
        }
    }
    let z = l2_normalize_rows(embeddings);
    let d = z.ncols();

    let mut per_run = Vec::with_capacity(cfg.n_runs);
    for run in 0..cfg.n_runs {
        let mut rng = derive(cfg.seed, &[TAG_EVAL, 0, run as u64]);
        let mut support = Vec::with_capacity(n_classes);
        for members in &by_class {
            support.push(members[rng.random_range(0..members.len())]);
        }
        let mut queries: Vec<usize> = (0..n).filter(|i| !support.contains(i)).collect();
        if queries.is_empty() {
            return Err(TideError::data("oneshot has no query samples"));
        }
        let (fit_queries, eval_queries) = if cfg.holdout_queries && queries.len() >= 2 {
            for i in (1..queries.len()).rev() {
                let j = rng.random_range(0..=i);
                queries.swap(i, j);
            }
            let half = queries.len() / 2;
            (queries[..half].to_vec(), queries[half..].to_vec())
        } else {
            (queries.clone(), queries)
        };

        let mut w0 = Array2::zeros((n_classes, d));
        for (c, &s) in support.iter().enumerate() {
            w0.row_mut(c).assign(&z.row(s));
        }
        let mut store = ParamStore::new();
        let w = store.add("oneshot.prototypes", w0, true);
        let gather = |idx: &[usize]| {
            let mut q = Array2::zeros((idx.len(), d));
            let mut y = Vec::with_capacity(idx.len());
            for (r, &i) in idx.iter().enumerate() {
                q.row_mut(r).assign(&z.row(i));
                y.push(labels[i]);
            }
            (q, y)
        };
        let (fit_q, fit_y) = gather(&fit_queries);
        for _ in 0..cfg.head_steps {
            let mut tape = Tape::new();
            let q = tape.constant(fit_q.clone());
            let wv = tape.param(&store, w);
            let wn = tape.row_l2_normalize(wv);
            let sim = tape.matmul_nt(q, wn);
            let logits = tape.scale(sim, 1.0 / cfg.temperature);
            let logp = tape.log_softmax_rows(logits);
            let picked = tape.pick(logp, &fit_y);
            let m = tape.mean_all(picked);
            let loss = tape.scale(m, -1.0);
            let grads = tape.backward(loss, store.len());
            sgd_step(&mut store, &grads, &[w], cfg.head_lr);
        }

        let protos = l2_normalize_rows(store.get(w));
        let (eval_q, eval_y) = gather(&eval_queries);
        let scores = eval_q.dot(&protos.t());
        let mut hit1 = 0usize;
        let mut hit5 = 0usize;
        for (r, &y) in eval_y.iter().enumerate() {
            let row = scores.row(r);
            let mut order: Vec<usize> = (0..n_classes).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            if order[0] == y {
                hit1 += 1;
            }
            if order.iter().take(5).any(|&c| c == y) {
                hit5 += 1;
            }
        }
        let m = eval_y.len() as f64;
        per_run.push((hit1 as f64 / m * 100.0, hit5 as f64 / m * 100.0));
    }
    let (top1_mean, top1_sd) = mean_sd(&per_run.iter().map(|p| p.0).collect::<Vec<_>>());
    let (top5_mean, top5_sd) = mean_sd(&per_run.iter().map(|p| p.1).collect::<Vec<_>>());
    Ok(OneShotReport {
        top1_mean,
        top1_sd,
        top5_mean,
        top5_sd,
        n_runs: cfg.n_runs,
        per_run,
    })
}

/// Mean embedding per well, rows ordered by sorted well id.
pub fn aggregate_wells(
    embeddings: &Array2<f64>,
    well_ids: &[String],
) -> Result<(Array2<f64>, Vec<String>)> {
    if embeddings.nrows() != well_ids.len() {
        return Err(TideError::config("aggregate_wells: one well id per row required"));
    }
    if well_ids.is_empty() {
        return Err(TideError::data("aggregate_wells: empty input"));
    }
    let d = embeddings.ncols();
    let mut groups: BTreeMap<&str, (Array1<f64>, usize)> = BTreeMap::new();
    for (row, id) in embeddings.rows().into_iter().zip(well_ids.iter()) {
        let e = groups
            .entry(id.as_str())
            .or_insert_with(|| (Array1::zeros(d), 0));
        e.0 += &row;
        e.1 += 1;
    }
    let mut out = Array2::zeros((groups.len(), d));
    let mut order = Vec::with_capacity(groups.len());
    for (i, (id, (sum, count))) in groups.into_iter().enumerate() {
        out.row_mut(i).assign(&(&sum / count as f64));
        order.push(id.to_string());
    }
    Ok((out, order))
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, eigenvectors as columns) sorted by descending value,
/// with each eigenvector's largest-magnitude entry made positive.
pub fn jacobi_eigh(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "jacobi needs a square matrix");
    let mut m = a.clone();
    let mut v: Array2<f64> = Array2::eye(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[[p, q]] * m[[p, q]];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let mip = m[[i, p]];
                    let miq = m[[i, q]];
                    m[[i, p]] = c * mip - s * miq;
                    m[[i, q]] = s * mip + c * miq;
                }
                for j in 0..n {
                    let mpj = m[[p, j]];
                    let mqj = m[[q, j]];
                    m[[p, j]] = c * mpj - s * mqj;
                    m[[q, j]] = s * mpj + c * mqj;
                }
                for i in 0..n {
                    let vip = v[[i, p]];
                    let viq = v[[i, q]];
                    v[[i, p]] = c * vip - s * viq;
                    v[[i, q]] = s * vip + c * viq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[j, j]].total_cmp(&m[[i, i]]).then(i.cmp(&j)));
    let mut vals = Array1::zeros(n);
    let mut vecs = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        vals[dst] = m[[src, src]];
        let col = v.column(src);
        let lead = col
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap();
        let sign = if col[lead] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            vecs[[i, dst]] = sign * col[i];
        }
    }
    (vals, vecs)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AlignInfo {
    /// Retained PCA components; < d when controls were too few.
    pub rank: usize,
    pub warnings: Vec<String>,
}

/// PCA-CS alignment: fit full-rank PCA on all control embeddings, rotate
/// everything into that basis, then center and scale each batch by its
/// own controls' statistics (sd floor 1e-8).
pub fn pca_cs_align(
    embeddings: &Array2<f64>,
    control_mask: &[bool],
    batch_ids: &[String],
) -> Result<(Array2<f64>, AlignInfo)> {
    let n = embeddings.nrows();
    let d = embeddings.ncols();
    if control_mask.len() != n || batch_ids.len() != n {
        return Err(TideError::config(
            "pca_cs_align: control mask and batch ids must cover every row",
        ));
    }
    let mut batches: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, b) in batch_ids.iter().enumerate() {
        batches.entry(b.as_str()).or_default().push(i);
    }
    for (batch, rows) in &batches {
        let n_ctrl = rows.iter().filter(|&&i| control_mask[i]).count();
        if n_ctrl < 2 {
            return Err(TideError::data(format!(
                "batch {batch} has {n_ctrl} control(s); PCA-CS needs at least 2"
            )));
        }
    }
    let ctrl_rows: Vec<usize> = (0..n).filter(|&i| control_mask[i]).collect();
    let n_ctrl = ctrl_rows.len();
    let mut warnings = Vec::new();

    let mut mean = Array1::<f64>::zeros(d);
    for &i in &ctrl_rows {
        mean += &embeddings.row(i);
    }
    mean /= n_ctrl as f64;
    let mut centered = Array2::zeros((n_ctrl, d));
    for (r, &i) in ctrl_rows.iter().enumerate() {
        centered.row_mut(r).assign(&(&embeddings.row(i) - &mean));
    }
    let cov = centered.t().dot(&centered) / (n_ctrl as f64 - 1.0).max(1.0);
    let (vals, vecs) = jacobi_eigh(&cov);
    let max_val = vals.iter().cloned().fold(0.0f64, f64::max);
    let rank = vals
        .iter()
        .filter(|&&v| v > 1e-10 * max_val.max(1e-300))
        .count()
        .max(1);
    if rank < d {
        warnings.push(format!(
            "control covariance rank {rank} < dim {d}; output shrunk to {rank} components"
        ));
    }
    let basis = vecs.slice(ndarray::s![.., ..rank]).to_owned();

    let mut rotated = Array2::zeros((n, rank));
    for i in 0..n {
        let row = &embeddings.row(i) - &mean;
        rotated.row_mut(i).assign(&row.dot(&basis));
    }

    for rows in batches.values() {
        let ctrl: Vec<usize> = rows.iter().cloned().filter(|&i| control_mask[i]).collect();
        let m = ctrl.len() as f64;
        let mut bmean = Array1::<f64>::zeros(rank);
        for &i in &ctrl {
            bmean += &rotated.row(i);
        }
        bmean /= m;
        let mut bvar = Array1::<f64>::zeros(rank);
        for &i in &ctrl {
            let dev = &rotated.row(i) - &bmean;
            bvar += &dev.mapv(|x| x * x);
        }
        bvar /= m - 1.0;
        let bsd = bvar.mapv(|x| x.sqrt().max(1e-8));
        for &i in rows {
            let scaled = (&rotated.row(i) - &bmean) / &bsd;
            rotated.row_mut(i).assign(&scaled);
        }
    }
    Ok((rotated, AlignInfo { rank, warnings }))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub ap: f64,
    pub auc: f64,
    pub hit_at_1: f64,
    pub hit_at_5: f64,
}

/// Average precision of a ranked list: precision at each positive,
/// averaged. Ties in score break by index for determinism.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(TideError::config("ap: scores and labels must align"));
    }
    let n_pos = positives.iter().filter(|&&p| p).count();
    if n_pos == 0 || n_pos == scores.len() {
        return Err(TideError::data(
            "average precision undefined without both positives and negatives",
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut seen_pos = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] {
            seen_pos += 1;
            sum += seen_pos as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / n_pos as f64)
}

/// Mann-Whitney AUC with ties counted half.
pub fn auc_score(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(TideError::config("auc: scores and labels must align"));
    }
    let pos: Vec<f64> = scores
        .iter()
        .zip(positives)
        .filter(|(_, &p)| p)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(positives)
        .filter(|(_, &p)| !p)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(TideError::data(
            "auc undefined without both positives and negatives",
        ));
    }
    let mut u = 0.0;
    for &p in &pos {
        for &q in &neg {
            u += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(u / (pos.len() as f64 * neg.len() as f64))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DoseMetrics {
    pub dose: f64,
    pub metrics: RetrievalMetrics,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TargetReport {
    pub per_dose: Vec<DoseMetrics>,
    pub dose_avg: RetrievalMetrics,
    pub n_seeds: usize,
}

fn cosine(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt().max(1e-12);
    let nb = b.dot(&b).sqrt().max(1e-12);
    a.dot(&b) / (na * nb)
}

/// Score one dose slice: cosine similarity of every (drug, gene) pair,
/// pooled AP/AUC over all pairs, Hit@k per drug.
pub fn score_dose_slice(
    drug_embs: &Array2<f64>,
    drug_ids: &[String],
    gene_embs: &Array2<f64>,
    truth: &GroundTruthAssoc,
) -> Result<RetrievalMetrics> {
    if drug_embs.nrows() != drug_ids.len() {
        return Err(TideError::config("score: one id per drug row required"));
    }
    if drug_embs.ncols() != gene_embs.ncols() {
        return Err(TideError::config(format!(
            "score: drug dim {} vs gene dim {}",
            drug_embs.ncols(),
            gene_embs.ncols()
        )));
    }
    let n_genes = gene_embs.nrows();
    let mut scores = Vec::with_capacity(drug_ids.len() * n_genes);
    let mut labels = Vec::with_capacity(drug_ids.len() * n_genes);
    let mut hit1 = 0.0;
    let mut hit5 = 0.0;
    for (r, id) in drug_ids.iter().enumerate() {
        let positives = truth.positives_of(id);
        if positives.is_empty() {
            return Err(TideError::data(format!("drug {id} has no ground-truth target")));
        }
        let row: Vec<f64> = (0..n_genes)
            .map(|g| cosine(drug_embs.row(r), gene_embs.row(g)))
            .collect();
        let mut order: Vec<usize> = (0..n_genes).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        if positives.contains(&order[0]) {
            hit1 += 1.0;
        }
        if order.iter().take(5).any(|g| positives.contains(g)) {
            hit5 += 1.0;
        }
        for g in 0..n_genes {
            scores.push(row[g]);
            labels.push(positives.contains(&g));
        }
    }
    let ap = average_precision(&scores, &labels)?;
    let auc = auc_score(&scores, &labels)?;
    let n_drugs = drug_ids.len() as f64;
    Ok(RetrievalMetrics {
        ap,
        auc,
        hit_at_1: hit1 / n_drugs,
        hit_at_5: hit5 / n_drugs,
    })
}

/// Assemble the per-dose and dose-averaged target-discovery report.
pub fn score_and_rank(
    per_dose: &[(f64, Array2<f64>, Vec<String>)],
    gene_embs: &Array2<f64>,
    truth: &GroundTruthAssoc,
) -> Result<TargetReport> {
    if per_dose.is_empty() {
        return Err(TideError::data("score_and_rank: no dose slices"));
    }
    let mut rows = Vec::with_capacity(per_dose.len());
    for (dose, embs, ids) in per_dose {
        rows.push(DoseMetrics {
            dose: *dose,
            metrics: score_dose_slice(embs, ids, gene_embs, truth)?,
        });
    }
    let avg = |f: fn(&RetrievalMetrics) -> f64| {
        rows.iter().map(|r| f(&r.metrics)).sum::<f64>() / rows.len() as f64
    };
    let dose_avg = RetrievalMetrics {
        ap: avg(|m| m.ap),
        auc: avg(|m| m.auc),
        hit_at_1: avg(|m| m.hit_at_1),
        hit_at_5: avg(|m| m.hit_at_5),
    };
    Ok(TargetReport {
        per_dose: rows,
        dose_avg,
        n_seeds: 1,
    })
}

/// Mean AP of the same label multiset under random rankings; the
/// chance-level reference for the retrieval task.
pub fn permutation_ap(labels: &[bool], n_seeds: usize, seed: u64) -> Result<f64> {
    let n = labels.len();
    let mut sum = 0.0;
    for s in 0..n_seeds {
        let mut rng = derive(seed, &[TAG_EVAL, 1, s as u64]);
        let mut shuffled = labels.to_vec();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            shuffled.swap(i, j);
        }
        let scores: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
        sum += average_precision(&scores, &shuffled)?;
    }
    Ok(sum / n_seeds as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn one_hot_embeddings(per_class: usize, n_classes: usize) -> (Array2<f64>, Vec<usize>) {
        let n = per_class * n_classes;
        let mut x = Array2::zeros((n, n_classes));
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % n_classes;
            x[[i, c]] = 1.0;
            y.push(c);
        }
        (x, y)
    }

    #[test]
    fn knn_perfectly_separable() {
        let (x, y) = one_hot_embeddings(10, 3);
        assert_eq!(knn_select(&x, &y, 5).unwrap(), 1.0);
    }

    #[test]
    fn knn_duplicate_ranks_first() {
        let mut rng = derive(2, &[0]);
        let mut x = Array2::from_shape_fn((10, 4), |_| rng.random_range(-1.0..1.0));
        let dup = x.row(0).to_owned();
        x.row_mut(5).assign(&dup);
        let mut y = vec![0usize; 10];
        for (i, v) in y.iter_mut().enumerate() {
            *v = i % 2;
        }
        y[0] = 1;
        y[5] = 1;
        assert_eq!(knn_select(&x, &y, 1).unwrap() >= 0.2, true);
        // With k=1 the duplicate pair classify each other correctly.
        let acc = knn_select(&x, &y, 1).unwrap();
        assert!(acc * 10.0 >= 2.0);
    }

    #[test]
    fn knn_shuffled_labels_near_chance() {
        let mut accs = Vec::new();
        for seed in 0..20u64 {
            let mut rng = derive(seed, &[3]);
            let x = Array2::from_shape_fn((400, 8), |_| rng.random_range(-1.0..1.0));
            let mut y: Vec<usize> = (0..400).map(|i| i % 2).collect();
            for i in (1..y.len()).rev() {
                let j = rng.random_range(0..=i);
                y.swap(i, j);
            }
            accs.push(knn_select(&x, &y, 20).unwrap());
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((0.4..=0.6).contains(&mean), "chance-level mean {mean}");
    }

    #[test]
    fn knn_rejects_bad_k() {
        let (x, y) = one_hot_embeddings(2, 2);
        assert!(matches!(knn_select(&x, &y, 4), Err(TideError::Config(_))));
        assert!(matches!(knn_select(&x, &y, 0), Err(TideError::Config(_))));
    }

    #[test]
    fn oneshot_oracle_embeddings_are_perfect() {
        let (x, y) = one_hot_embeddings(8, 6);
        let cfg = OneShotConfig {
            n_runs: 5,
            head_steps: 20,
            ..OneShotConfig::default()
        };
        let r = oneshot_transfer(&x, &y, 6, &cfg).unwrap();
        assert_eq!(r.top1_mean, 100.0);
        assert_eq!(r.top5_mean, 100.0);
        assert_eq!(r.top1_sd, 0.0);
        assert_eq!(r.per_run.len(), 5);
    }

    #[test]
    fn oneshot_constant_encoder_is_chance_level() {
        let n_classes = 5;
        let n = 100;
        let x = Array2::from_elem((n, 8), 0.3);
        let y: Vec<usize> = (0..n).map(|i| i % n_classes).collect();
        let cfg = OneShotConfig {
            n_runs: 20,
            head_steps: 10,
            ..OneShotConfig::default()
        };
        let r = oneshot_transfer(&x, &y, n_classes, &cfg).unwrap();
        let chance = 100.0 / n_classes as f64;
        assert!(
            (r.top1_mean - chance).abs() <= 10.0,
            "top1 {} vs chance {chance}",
            r.top1_mean
        );
    }

    #[test]
    fn oneshot_top5_at_least_top1() {
        let mut rng = derive(9, &[1]);
        let x = Array2::from_shape_fn((80, 6), |_| rng.random_range(-1.0..1.0));
        let y: Vec<usize> = (0..80).map(|i| i % 8).collect();
        let cfg = OneShotConfig {
            n_runs: 10,
            head_steps: 30,
            ..OneShotConfig::default()
        };
        let r = oneshot_transfer(&x, &y, 8, &cfg).unwrap();
        for (t1, t5) in &r.per_run {
            assert!(t5 >= t1);
        }
    }

    #[test]
    fn oneshot_missing_class_is_data_error() {
        let (x, mut y) = one_hot_embeddings(4, 3);
        for l in y.iter_mut() {
            if *l == 2 {
                *l = 0;
            }
        }
        let err = oneshot_transfer(&x, &y, 3, &OneShotConfig::default()).unwrap_err();
        assert!(matches!(err, TideError::Data(_)));
    }

    #[test]
    fn oneshot_holdout_variant_runs() {
        let (x, y) = one_hot_embeddings(10, 4);
        let cfg = OneShotConfig {
            n_runs: 3,
            head_steps: 10,
            holdout_queries: true,
            ..OneShotConfig::default()
        };
        let r = oneshot_transfer(&x, &y, 4, &cfg).unwrap();
        assert_eq!(r.top1_mean, 100.0);
    }

    #[test]
    fn aggregate_wells_contract() {
        let x = Array2::from_shape_vec((4, 2), vec![1.0, 0.0, -1.0, 0.0, 2.0, 2.0, 4.0, 0.0])
            .unwrap();
        let ids: Vec<String> = ["w1", "w1", "w2", "w2"].iter().map(|s| s.to_string()).collect();
        let (agg, order) = aggregate_wells(&x, &ids).unwrap();
        assert_eq!(order, vec!["w1".to_string(), "w2".to_string()]);
        assert_eq!(agg[[0, 0]], 0.0);
        assert_eq!(agg[[0, 1]], 0.0);
        assert_eq!(agg[[1, 0]], 3.0);
        assert_eq!(agg[[1, 1]], 1.0);

        let perm_ids: Vec<String> =
            ["w2", "w1", "w2", "w1"].iter().map(|s| s.to_string()).collect();
        let xp = Array2::from_shape_vec((4, 2), vec![2.0, 2.0, 1.0, 0.0, 4.0, 0.0, -1.0, 0.0])
            .unwrap();
        let (agg2, order2) = aggregate_wells(&xp, &perm_ids).unwrap();
        assert_eq!(order, order2);
        assert_eq!(agg, agg2);

        let singles: Vec<String> = (0..4).map(|i| format!("s{i}")).collect();
        let (agg3, _) = aggregate_wells(&x, &singles).unwrap();
        assert_eq!(agg3, x);
    }

    #[test]
    fn jacobi_recovers_known_spectrum() {
        // Symmetric matrix with known eigenvalues 3 and 1 (basis rotated 45 degrees).
        let a = Array2::from_shape_vec((2, 2), vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let (vals, vecs) = jacobi_eigh(&a);
        assert!((vals[0] - 3.0).abs() <= 1e-10);
        assert!((vals[1] - 1.0).abs() <= 1e-10);
        let recon = vecs.dot(&Array2::from_diag(&vals)).dot(&vecs.t());
        for (x, y) in recon.iter().zip(a.iter()) {
            assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn jacobi_diagonalizes_random_symmetric() {
        let mut rng = derive(4, &[4]);
        let b = Array2::from_shape_fn((8, 8), |_| rng.random_range(-1.0..1.0));
        let a = &b + &b.t();
        let (vals, vecs) = jacobi_eigh(&a);
        let recon = vecs.dot(&Array2::from_diag(&vals)).dot(&vecs.t());
        for (x, y) in recon.iter().zip(a.iter()) {
            assert!((x - y).abs() <= 1e-8);
        }
        let gram = vecs.t().dot(&vecs);
        for ((i, j), &g) in gram.indexed_iter() {
            let expect = if i == j { 1.0 } else { 0.0 };
            assert!((g - expect).abs() <= 1e-8);
        }
    }

    fn batch_shifted_embeddings() -> (Array2<f64>, Vec<bool>, Vec<String>) {
        let mut rng = derive(11, &[0]);
        let n_per = 40;
        let d = 6;
        let mut x = Array2::zeros((2 * n_per, d));
        let mut mask = Vec::new();
        let mut batches = Vec::new();
        for b in 0..2 {
            for i in 0..n_per {
                for j in 0..d {
                    x[[b * n_per + i, j]] = rng.random_range(-1.0..1.0)
                        + if j == 0 { (b as f64) * 6.0 - 3.0 } else { 0.0 };
                }
                mask.push(i < n_per / 2);
                batches.push(format!("batch{b}"));
            }
        }
        (x, mask, batches)
    }

    #[test]
    fn pca_cs_normalizes_controls_per_batch() {
        let (x, mask, batches) = batch_shifted_embeddings();
        let (aligned, info) = pca_cs_align(&x, &mask, &batches).unwrap();
        assert_eq!(info.rank, 6);
        for b in ["batch0", "batch1"] {
            let rows: Vec<usize> = (0..x.nrows())
                .filter(|&i| batches[i] == b && mask[i])
                .collect();
            let m = rows.len() as f64;
            for j in 0..info.rank {
                let mean = rows.iter().map(|&i| aligned[[i, j]]).sum::<f64>() / m;
                let var = rows
                    .iter()
                    .map(|&i| (aligned[[i, j]] - mean) * (aligned[[i, j]] - mean))
                    .sum::<f64>()
                    / (m - 1.0);
                assert!(mean.abs() <= 1e-6, "batch {b} coord {j} mean {mean}");
                assert!((var.sqrt() - 1.0).abs() <= 1e-6, "batch {b} coord {j} sd");
            }
        }
    }

    #[test]
    fn pca_cs_shrinks_batch_separation() {
        let (x, mask, batches) = batch_shifted_embeddings();
        let centroid = |data: &Array2<f64>, b: &str| {
            let rows: Vec<usize> = (0..data.nrows())
                .filter(|&i| batches[i] == b && mask[i])
                .collect();
            let mut c = Array1::zeros(data.ncols());
            for &i in &rows {
                c += &data.row(i);
            }
            c / rows.len() as f64
        };
        let before = {
            let d = &centroid(&x, "batch0") - &centroid(&x, "batch1");
            d.dot(&d).sqrt()
        };
        let (aligned, _) = pca_cs_align(&x, &mask, &batches).unwrap();
        let after = {
            let d = &centroid(&aligned, "batch0") - &centroid(&aligned, "batch1");
            d.dot(&d).sqrt()
        };
        assert!(
            after * 10.0 <= before,
            "separation {before} only reduced to {after}"
        );
    }

    #[test]
    fn pca_cs_is_idempotent_up_to_axis_sign() {
        // One batch: after alignment the controls are exactly white, so
        // a second fit finds nothing to rotate (up to tied-eigenvalue
        // axis permutation and sign).
        let mut rng = derive(19, &[6]);
        let x = Array2::from_shape_fn((80, 6), |_| rng.random_range(-2.0..2.0));
        let mask: Vec<bool> = (0..80).map(|i| i % 2 == 0).collect();
        let batches: Vec<String> = (0..80).map(|_| "batch0".to_string()).collect();
        let (once, _) = pca_cs_align(&x, &mask, &batches).unwrap();
        let (twice, _) = pca_cs_align(&once, &mask, &batches).unwrap();
        // Canonicalize: compare coordinates up to sign per column.
        for j in 0..once.ncols() {
            let col1: Vec<f64> = (0..once.nrows()).map(|i| once[[i, j]]).collect();
            let mut best = f64::INFINITY;
            for jj in 0..twice.ncols() {
                for sign in [1.0, -1.0] {
                    let diff: f64 = (0..twice.nrows())
                        .map(|i| (twice[[i, jj]] * sign - col1[i]).powi(2))
                        .sum();
                    best = best.min(diff);
                }
            }
            assert!(best <= 1e-12, "column {j} not reproduced, residual {best}");
        }
    }

    #[test]
    fn pca_cs_requires_controls_per_batch() {
        let (x, mut mask, batches) = batch_shifted_embeddings();
        for (i, b) in batches.iter().enumerate() {
            if b == "batch1" {
                mask[i] = false;
            }
        }
        let err = pca_cs_align(&x, &mask, &batches).unwrap_err();
        match err {
            TideError::Data(msg) => assert!(msg.contains("batch1")),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn pca_cs_shrinks_rank_when_controls_scarce() {
        let mut rng = derive(13, &[1]);
        let d = 10;
        let mut x = Array2::from_shape_fn((12, d), |_| rng.random_range(-1.0..1.0));
        for i in 0..12 {
            x[[i, 0]] += if i < 6 { 3.0 } else { -3.0 };
        }
        let mask: Vec<bool> = (0..12).map(|i| i % 6 < 3).collect();
        let batches: Vec<String> = (0..12)
            .map(|i| format!("batch{}", if i < 6 { 0 } else { 1 }))
            .collect();
        let (aligned, info) = pca_cs_align(&x, &mask, &batches).unwrap();
        assert!(info.rank < d);
        assert!(!info.warnings.is_empty());
        assert_eq!(aligned.ncols(), info.rank);
    }

    #[test]
    fn retrieval_perfect_ranking() {
        let scores = vec![0.9, 0.1, 0.2, 0.05, 0.0, -0.3, -0.1, 0.01, 0.03, -0.9];
        let mut labels = vec![false; 10];
        labels[0] = true;
        assert_eq!(average_precision(&scores, &labels).unwrap(), 1.0);
        assert_eq!(auc_score(&scores, &labels).unwrap(), 1.0);
    }

    #[test]
    fn retrieval_monotone_invariance() {
        let mut rng = derive(7, &[2]);
        let scores: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels: Vec<bool> = (0..50).map(|i| i % 7 == 0).collect();
        let warped: Vec<f64> = scores.iter().map(|&s| s.exp()).collect();
        let ap1 = average_precision(&scores, &labels).unwrap();
        let ap2 = average_precision(&warped, &labels).unwrap();
        assert!((ap1 - ap2).abs() <= 1e-12);
        let auc1 = auc_score(&scores, &labels).unwrap();
        let auc2 = auc_score(&warped, &labels).unwrap();
        assert!((auc1 - auc2).abs() <= 1e-12);
    }

    #[test]
    fn retrieval_requires_both_classes() {
        let scores = vec![0.1, 0.2];
        assert!(average_precision(&scores, &[true, true]).is_err());
        assert!(auc_score(&scores, &[false, false]).is_err());
    }

    #[test]
    fn random_scores_match_permutation_baseline() {
        let n = 100;
        let labels: Vec<bool> = (0..n).map(|i| i < 5).collect();
        let mut rng = derive(17, &[3]);
        let mut mean_random = 0.0;
        let trials = 1000;
        for _ in 0..trials {
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            mean_random += average_precision(&scores, &labels).unwrap();
        }
        mean_random /= trials as f64;
        let perm = permutation_ap(&labels, 1000, 23).unwrap();
        assert!(
            (mean_random - perm).abs() <= 0.02,
            "random {mean_random} vs permutation {perm}"
        );
    }

    #[test]
    fn score_and_rank_end_to_end() {
        // Two drugs, four genes; drug embeddings equal their target
        // gene's embedding so retrieval is perfect at every dose.
        let gene_embs = Array2::from_shape_vec(
            (4, 3),
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.5, 0.5, 0.0],
        )
        .unwrap();
        let mut drug_embs = Array2::zeros((2, 3));
        drug_embs.row_mut(0).assign(&gene_embs.row(0));
        drug_embs.row_mut(1).assign(&gene_embs.row(2));
        let ids = vec!["drugA".to_string(), "drugB".to_string()];
        let truth = GroundTruthAssoc {
            pairs: vec![
                ("drugA".into(), 0, true),
                ("drugA".into(), 1, false),
                ("drugA".into(), 2, false),
                ("drugA".into(), 3, false),
                ("drugB".into(), 0, false),
                ("drugB".into(), 1, false),
                ("drugB".into(), 2, true),
                ("drugB".into(), 3, false),
            ],
        };
        let per_dose = vec![
            (0.1, drug_embs.clone(), ids.clone()),
            (1.0, drug_embs.clone(), ids.clone()),
        ];
        let report = score_and_rank(&per_dose, &gene_embs, &truth).unwrap();
        assert_eq!(report.per_dose.len(), 2);
        assert_eq!(report.dose_avg.hit_at_1, 1.0);
        assert_eq!(report.dose_avg.auc, 1.0);
        assert!(report.dose_avg.ap > 0.99);
    }
}
