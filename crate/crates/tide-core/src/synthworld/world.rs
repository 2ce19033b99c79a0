//! The structural causal model: D -> Z -> {R, M} with C conditioning.
//!
//! Every stochastic draw uses a stream derived from (config.seed, tags),
//! so the world and all renders are reproducible and schedule independent.

use ndarray::{Array1, Array2};
use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, TideError};
use crate::rng::derive;

use super::render::Flatfield;
use super::types::{CellTypeSpec, DrugSpec, LatentState, SynthConfig, MORPH_DIM};

const TAG_DRUGS: u64 = 0x01;
const TAG_CELLS: u64 = 0x02;
const TAG_PATHWAY: u64 = 0x03;
const TAG_MORPH: u64 = 0x04;
const TAG_BATCH: u64 = 0x05;

/// How much stronger a drug's own target genes respond than the rest of
/// its pathway block.
const TARGET_BOOST: f64 = 2.5;

/// Expression shift applied by a single-gene perturbation well.
pub const GENE_SHIFT: f64 = 2.0;

#[derive(Clone, Debug)]
pub struct World {
    pub config: SynthConfig,
    pub drugs: Vec<DrugSpec>,
    pub cells: Vec<CellTypeSpec>,
    /// Per-cluster gene response map, G x L, rows zero outside the
    /// cluster's gene block.
    pub pathway_maps: Vec<Array2<f64>>,
    /// Direct engagement -> morphology map, MORPH_DIM x L.
    pub morph_a: Array2<f64>,
    /// Transcriptome -> morphology map, MORPH_DIM x G.
    pub morph_b: Array2<f64>,
    pub flatfields: Vec<Flatfield>,
}

impl World {
    pub fn generate(config: &SynthConfig) -> Result<World> {
        config.validate()?;
        let drugs = generate_drug_library(config)?;
        let cells = generate_cell_types(config);
        let pathway_maps = generate_pathway_maps(config, &drugs);
        let (morph_a, morph_b) = generate_morphology_maps(config);
        let flatfields = (0..config.n_batches)
            .map(|b| {
                let mut rng = derive(config.seed, &[TAG_BATCH, b as u64]);
                Flatfield::random(&mut rng)
            })
            .collect();
        Ok(World {
            config: config.clone(),
            drugs,
            cells,
            pathway_maps,
            morph_a,
            morph_b,
            flatfields,
        })
    }

    pub fn drug(&self, drug_id: &str) -> Result<&DrugSpec> {
        self.drugs
            .iter()
            .find(|d| d.drug_id == drug_id)
            .ok_or_else(|| TideError::data(format!("unknown drug: {drug_id}")))
    }

    pub fn cell(&self, cell_id: &str) -> Result<&CellTypeSpec> {
        self.cells
            .iter()
            .find(|c| c.cell_id == cell_id)
            .ok_or_else(|| TideError::data(format!("unknown cell type: {cell_id}")))
    }

    /// Gene index range owned by a mechanism cluster.
    pub fn cluster_block(&self, cluster: usize) -> std::ops::Range<usize> {
        let block = self.config.n_genes / self.config.n_mech_clusters;
        cluster * block..(cluster + 1) * block
    }

    /// Z = gain(cell, cluster) * dose/(dose + dose_half) * profile.
    pub fn sample_latent_state(
        &self,
        drug: &DrugSpec,
        cell: &CellTypeSpec,
        dose: f64,
    ) -> Result<LatentState> {
        if dose < 0.0 {
            return Err(TideError::domain(format!("negative dose {dose}")));
        }
        let gain = cell.engagement_gain[drug.mech_cluster];
        let sat = if dose == 0.0 { 0.0 } else { dose / (dose + drug.dose_half) };
        let z = &drug.engagement_profile * (gain * sat);
        Ok(LatentState {
            z,
            drug_id: drug.drug_id.clone(),
            cell_id: cell.cell_id.clone(),
            dose,
        })
    }

    /// R = basal + pathway effect (target rows boosted) + N(0, sigma_r^2
    /// * basal_cov_scale^2) per gene. Zero z and zero noise reproduce the
    /// basal profile exactly.
    pub fn render_transcriptome(
        &self,
        state: &LatentState,
        cell: &CellTypeSpec,
        sigma_r: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Array1<f64>> {
        let drug = self.drug(&state.drug_id)?;
        let mut r = cell.basal_mean.clone();
        if state.z.iter().any(|&v| v != 0.0) {
            let effect = self.pathway_maps[drug.mech_cluster].dot(&state.z);
            for g in 0..self.config.n_genes {
                let boost = if drug.target_genes.contains(&g) { TARGET_BOOST } else { 1.0 };
                r[g] += boost * effect[g];
            }
        }
        if sigma_r > 0.0 {
            let sd = sigma_r * cell.basal_cov_scale;
            for g in 0..self.config.n_genes {
                let eps: f64 = StandardNormal.sample(rng);
                r[g] += sd * eps;
            }
        }
        Ok(r)
    }

    /// Unperturbed transcriptome: basal mean plus measurement noise.
    pub fn control_transcriptome(
        &self,
        cell: &CellTypeSpec,
        sigma_r: f64,
        rng: &mut ChaCha8Rng,
    ) -> Array1<f64> {
        let mut r = cell.basal_mean.clone();
        if sigma_r > 0.0 {
            let sd = sigma_r * cell.basal_cov_scale;
            for g in 0..self.config.n_genes {
                let eps: f64 = StandardNormal.sample(rng);
                r[g] += sd * eps;
            }
        }
        r
    }

    /// Basal transcriptome shifted on one gene: the reference profile for
    /// gene-embedding wells. Shares the drugs' direction of effect so
    /// cosine scoring is meaningful.
    pub fn gene_perturbed_transcriptome(
        &self,
        cell: &CellTypeSpec,
        gene: usize,
        sigma_r: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Array1<f64>> {
        if gene >= self.config.n_genes {
            return Err(TideError::domain(format!("gene index {gene} out of range")));
        }
        let mut r = cell.basal_mean.clone();
        r[gene] += GENE_SHIFT;
        if sigma_r > 0.0 {
            let sd = sigma_r * cell.basal_cov_scale;
            for g in 0..self.config.n_genes {
                let eps: f64 = StandardNormal.sample(rng);
                r[g] += sd * eps;
            }
        }
        Ok(r)
    }

    /// M = morph_bias + A z + B rna + N(0, sigma_m^2).
    pub fn compute_morphology(
        &self,
        z: &Array1<f64>,
        rna: &Array1<f64>,
        cell: &CellTypeSpec,
        sigma_m: f64,
        rng: &mut ChaCha8Rng,
    ) -> Array1<f64> {
        let mut m = &cell.morph_bias + &self.morph_a.dot(z) + &self.morph_b.dot(rna);
        if sigma_m > 0.0 {
            for v in m.iter_mut() {
                let eps: f64 = StandardNormal.sample(rng);
                *v += sigma_m * eps;
            }
        }
        m
    }
}

/// K drugs in n_mech_clusters clusters. Fingerprints are cluster
/// centroids with independent bit flips (p = 0.1); every drug carries its
/// cluster's anchor gene, so same-cluster drugs always share >= 1 target.
pub fn generate_drug_library(config: &SynthConfig) -> Result<Vec<DrugSpec>> {
    config.validate()?;
    generate_drug_library_with_flip(config, 0.1)
}

/// Exposed flip-rate variant for degenerate-rate tests.
pub fn generate_drug_library_with_flip(
    config: &SynthConfig,
    p_flip: f64,
) -> Result<Vec<DrugSpec>> {
    let (k, n_clusters) = (config.n_drugs, config.n_mech_clusters);
    if k < n_clusters {
        return Err(TideError::config("fewer drugs than mechanism clusters"));
    }
    let block = config.n_genes / n_clusters;
    let mut centroids = Vec::with_capacity(n_clusters);
    let mut directions = Vec::with_capacity(n_clusters);
    let mut anchors = Vec::with_capacity(n_clusters);
    for cl in 0..n_clusters {
        let mut rng = derive(config.seed, &[TAG_DRUGS, 0, cl as u64]);
        let centroid: Vec<bool> = (0..config.fingerprint_len).map(|_| rng.random::<bool>()).collect();
        let mut dir = Array1::from_shape_fn(config.latent_dim, |_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v
        });
        let norm = dir.dot(&dir).sqrt().max(1e-9);
        dir /= norm;
        let anchor = cl * block + rng.random_range(0..block);
        centroids.push(centroid);
        directions.push(dir);
        anchors.push(anchor);
    }

    let mut drugs = Vec::with_capacity(k);
    for idx in 0..k {
        let cl = idx % n_clusters;
        let mut rng = derive(config.seed, &[TAG_DRUGS, 1, idx as u64]);
        let fingerprint = Array1::from_shape_fn(config.fingerprint_len, |f| {
            let bit = centroids[cl][f] ^ (rng.random::<f64>() < p_flip);
            if bit { 1.0 } else { 0.0 }
        });
        let jitter = Array1::from_shape_fn(config.latent_dim, |_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v * 0.15
        });
        let engagement_profile = &directions[cl] + &jitter;
        let n_extra = rng.random_range(0..=2usize);
        let block_range = cl * block..(cl + 1) * block;
        let candidates: Vec<usize> = block_range.filter(|&g| g != anchors[cl]).collect();
        let mut target_genes = vec![anchors[cl]];
        if n_extra > 0 && !candidates.is_empty() {
            let picks = index_sample(&mut rng, candidates.len(), n_extra.min(candidates.len()));
            target_genes.extend(picks.iter().map(|i| candidates[i]));
        }
        target_genes.sort_unstable();
        let dose_half = rng.random_range(0.2..2.0);
        drugs.push(DrugSpec {
            drug_id: format!("drug{idx:02}"),
            fingerprint,
            mech_cluster: cl,
            target_genes,
            engagement_profile,
            dose_half,
        });
    }
    Ok(drugs)
}

fn generate_cell_types(config: &SynthConfig) -> Vec<CellTypeSpec> {
    (0..config.n_cell_types)
        .map(|c| {
            let mut rng = derive(config.seed, &[TAG_CELLS, c as u64]);
            let basal_mean = Array1::from_shape_fn(config.n_genes, |_| rng.random_range(0.5..2.5));
            let morph_bias = Array1::from_shape_fn(MORPH_DIM, |_| rng.random_range(-0.3..0.3));
            let engagement_gain = (0..config.n_mech_clusters)
                .map(|_| rng.random_range(0.8..1.6))
                .collect();
            CellTypeSpec {
                cell_id: format!("cell{c}"),
                basal_mean,
                basal_cov_scale: 1.0,
                morph_bias,
                engagement_gain,
            }
        })
        .collect()
}

/// One G x L map per cluster, supported exactly on the cluster's gene
/// block; with the target boost this makes each drug's strongest expected
/// responders its own targets.
fn generate_pathway_maps(config: &SynthConfig, _drugs: &[DrugSpec]) -> Vec<Array2<f64>> {
    let block = config.n_genes / config.n_mech_clusters;
    (0..config.n_mech_clusters)
        .map(|cl| {
            let mut rng = derive(config.seed, &[TAG_PATHWAY, cl as u64]);
            let mut w = Array2::zeros((config.n_genes, config.latent_dim));
            for g in cl * block..(cl + 1) * block {
                for l in 0..config.latent_dim {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    w[[g, l]] = 0.4 * v;
                }
            }
            w
        })
        .collect()
}

fn generate_morphology_maps(config: &SynthConfig) -> (Array2<f64>, Array2<f64>) {
    let mut rng = derive(config.seed, &[TAG_MORPH]);
    let a_scale = 0.6 / (config.latent_dim as f64).sqrt();
    let morph_a = Array2::from_shape_fn((MORPH_DIM, config.latent_dim), |_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        a_scale * v
    });
    let b_scale = 0.35 / (config.n_genes as f64).sqrt();
    let morph_b = Array2::from_shape_fn((MORPH_DIM, config.n_genes), |_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        b_scale * v
    });
    (morph_a, morph_b)
}
