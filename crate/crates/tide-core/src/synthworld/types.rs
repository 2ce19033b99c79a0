//! Domain types for the synthetic world.

use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TideError};

/// Drug id used by vehicle-control samples.
pub const CONTROL_ID: &str = "CONTROL";

/// Morphology feature layout: per channel (count, radius, intensity),
/// channels-major: [count_0..2, radius_0..2, intensity_0..2].
pub const MORPH_DIM: usize = 9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// K, number of distinct compounds.
    pub n_drugs: usize,
    pub n_mech_clusters: usize,
    pub n_cell_types: usize,
    /// G, desk-scale analog of the landmark gene panel.
    pub n_genes: usize,
    /// (channels, height, width).
    pub image_shape: (usize, usize, usize),
    pub n_batches: usize,
    /// Micromolar doses, strictly positive and sorted ascending.
    pub dose_grid: Vec<f64>,
    pub sigma_r: f64,
    pub sigma_m: f64,
    pub sigma_i: f64,
    /// Fraction of treated image wells that also carry a transcriptome.
    pub pair_fraction: f64,
    pub seed: u64,
    /// F, binary fingerprint length.
    pub fingerprint_len: usize,
    /// Dimension of the latent engagement state z.
    pub latent_dim: usize,
    pub wells_per_drug: usize,
    pub images_per_well: usize,
    /// DMSO control wells per (batch, cell type).
    pub controls_per_batch_cell: usize,
    /// Wells per single-gene perturbation (gene-embedding references for
    /// target discovery); 0 disables them.
    pub gene_wells_per_gene: usize,
    pub n_val_drugs: usize,
    pub n_test_drugs: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_drugs: 30,
            n_mech_clusters: 5,
            n_cell_types: 2,
            n_genes: 64,
            image_shape: (3, 32, 32),
            n_batches: 4,
            dose_grid: vec![0.1, 0.3, 1.0, 3.0],
            sigma_r: 0.1,
            sigma_m: 0.05,
            sigma_i: 0.02,
            pair_fraction: 0.5,
            seed: 0,
            fingerprint_len: 128,
            latent_dim: 8,
            wells_per_drug: 8,
            images_per_well: 2,
            controls_per_batch_cell: 5,
            gene_wells_per_gene: 2,
            n_val_drugs: 4,
            n_test_drugs: 10,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mech_clusters < 1 || self.n_drugs < self.n_mech_clusters {
            return Err(TideError::config(format!(
                "need n_drugs >= n_mech_clusters >= 1, got {} / {}",
                self.n_drugs, self.n_mech_clusters
            )));
        }
        if self.n_genes < 1 {
            return Err(TideError::config("n_genes must be >= 1"));
        }
        if self.n_genes < self.n_mech_clusters {
            return Err(TideError::config("need at least one gene per mechanism cluster"));
        }
        if !(0.0..=1.0).contains(&self.pair_fraction) {
            return Err(TideError::config("pair_fraction must lie in [0,1]"));
        }
        for (name, s) in [("sigma_r", self.sigma_r), ("sigma_m", self.sigma_m), ("sigma_i", self.sigma_i)] {
            if !(s >= 0.0) {
                return Err(TideError::config(format!("{name} must be >= 0")));
            }
        }
        if self.dose_grid.is_empty() && self.pair_fraction > 0.0 {
            return Err(TideError::config("pair_fraction > 0 requires a dose grid"));
        }
        if self.dose_grid.iter().any(|&d| !(d > 0.0)) {
            return Err(TideError::config("dose grid entries must be > 0"));
        }
        if self.dose_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TideError::config("dose grid must be strictly ascending"));
        }
        if self.n_cell_types < 1 || self.n_batches < 1 {
            return Err(TideError::config("need >= 1 cell type and >= 1 batch"));
        }
        if self.image_shape.0 < 1 || self.image_shape.1 < 4 || self.image_shape.2 < 4 {
            return Err(TideError::config("image shape too small to render"));
        }
        if self.n_val_drugs + self.n_test_drugs >= self.n_drugs {
            return Err(TideError::config(
                "val + test drugs must leave at least one training drug",
            ));
        }
        Ok(())
    }

    pub fn max_dose(&self) -> f64 {
        self.dose_grid.last().copied().unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DrugSpec {
    pub drug_id: String,
    /// Binary entries stored as 0.0/1.0 for direct matrix use.
    pub fingerprint: Array1<f64>,
    pub mech_cluster: usize,
    pub target_genes: Vec<usize>,
    /// Latent mechanism direction driving z.
    pub engagement_profile: Array1<f64>,
    /// Half-saturation dose of the response curve, fixed per drug.
    pub dose_half: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellTypeSpec {
    pub cell_id: String,
    pub basal_mean: Array1<f64>,
    pub basal_cov_scale: f64,
    pub morph_bias: Array1<f64>,
    /// Per-mechanism-cluster engagement gain, all > 0.
    pub engagement_gain: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct LatentState {
    pub z: Array1<f64>,
    pub drug_id: String,
    pub cell_id: String,
    pub dose: f64,
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub sample_id: String,
    /// Preprocessed image, entries in [0,1], shape (channels, h, w).
    pub image: Array3<f64>,
    /// Present on controls and on paired treated samples.
    pub rna: Option<Array1<f64>>,
    pub cell_id: String,
    /// None encodes CONTROL.
    pub drug_id: Option<String>,
    pub dose_image: Option<f64>,
    pub dose_rna: Option<f64>,
    pub batch_id: String,
    pub well_id: String,
    pub is_control: bool,
    /// Treated sample carrying a transcriptome (weak pairing).
    pub is_paired: bool,
}

impl Sample {
    pub fn drug_or_control(&self) -> &str {
        self.drug_id.as_deref().unwrap_or(CONTROL_ID)
    }
}

/// Exhaustive drug x gene label table; positives are exactly the union of
/// each drug's target genes.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct GroundTruthAssoc {
    pub pairs: Vec<(String, usize, bool)>,
}

impl GroundTruthAssoc {
    pub fn from_drugs(drugs: &[DrugSpec], n_genes: usize) -> Self {
        let mut pairs = Vec::with_capacity(drugs.len() * n_genes);
        for drug in drugs {
            for g in 0..n_genes {
                pairs.push((drug.drug_id.clone(), g, drug.target_genes.contains(&g)));
            }
        }
        GroundTruthAssoc { pairs }
    }

    pub fn positives_of(&self, drug_id: &str) -> Vec<usize> {
        self.pairs
            .iter()
            .filter(|(d, _, pos)| *pos && d == drug_id)
            .map(|(_, g, _)| *g)
            .collect()
    }
}
