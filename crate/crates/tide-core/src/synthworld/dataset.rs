//! Dataset assembly: wells, weak pairing, controls, gene-perturbation
//! references, ground truth, and drug-level splits.
//!
//! A treated well is imaged at dose_image; when it is paired, its stored
//! transcriptome comes from an independently dosed RNA well of the same
//! drug and cell (dose_rna), which is what makes the pairing weak. The
//! image itself is always rendered from the expression state at the
//! imaged dose, so the causal chain inside each well stays intact.

use ndarray::Array3;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rng::derive;

use super::render::{preprocess_image, render_sample_image};
use super::types::{GroundTruthAssoc, Sample, SynthConfig};
use super::world::World;

const TAG_WELL: u64 = 0x10;
const TAG_RNA: u64 = 0x11;
const TAG_IMG: u64 = 0x12;
const TAG_SPLIT: u64 = 0x13;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train_drugs: Vec<String>,
    pub val_drugs: Vec<String>,
    pub test_drugs: Vec<String>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl SplitManifest {
    pub fn split_of(&self, drug_id: &str) -> Option<Split> {
        if self.train_drugs.iter().any(|d| d == drug_id) {
            Some(Split::Train)
        } else if self.val_drugs.iter().any(|d| d == drug_id) {
            Some(Split::Val)
        } else if self.test_drugs.iter().any(|d| d == drug_id) {
            Some(Split::Test)
        } else {
            None
        }
    }
}

/// Single-gene perturbation image used as the gene-side reference in
/// target discovery.
#[derive(Clone, Debug)]
pub struct GenePerturbSample {
    pub sample_id: String,
    pub image: Array3<f64>,
    pub gene: usize,
    pub cell_id: String,
    pub batch_id: String,
    pub well_id: String,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: SynthConfig,
    pub world: World,
    pub samples: Vec<Sample>,
    pub gene_samples: Vec<GenePerturbSample>,
    pub truth: GroundTruthAssoc,
    pub splits: SplitManifest,
}

impl Dataset {
    pub fn treated(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| !s.is_control)
    }

    pub fn controls(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.is_control)
    }

    pub fn paired(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.is_paired)
    }

    /// Treated sample indices whose drug belongs to the given split.
    pub fn split_sample_indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| {
                s.drug_id
                    .as_deref()
                    .and_then(|d| self.splits.split_of(d))
                    == Some(split)
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Stable class index over training drugs (codebook row order).
    pub fn train_class_of(&self, drug_id: &str) -> Option<usize> {
        self.splits.train_drugs.iter().position(|d| d == drug_id)
    }
}

enum WellKind {
    Treated {
        drug_idx: usize,
        dose_image: f64,
        dose_rna: Option<f64>,
    },
    Control,
    Gene {
        gene: usize,
    },
}

struct WellPlan {
    kind: WellKind,
    cell_idx: usize,
    batch_idx: usize,
}

fn plan_wells(world: &World) -> Vec<WellPlan> {
    let cfg = &world.config;
    let mut plans = Vec::new();
    for drug_idx in 0..cfg.n_drugs {
        for w in 0..cfg.wells_per_drug {
            let mut rng = derive(cfg.seed, &[TAG_WELL, 0, drug_idx as u64, w as u64]);
            let cell_idx = rng.random_range(0..cfg.n_cell_types);
            let batch_idx = rng.random_range(0..cfg.n_batches);
            let dose_image = cfg.dose_grid[rng.random_range(0..cfg.dose_grid.len())];
            let paired = rng.random::<f64>() < cfg.pair_fraction;
            let dose_rna = if paired {
                Some(cfg.dose_grid[rng.random_range(0..cfg.dose_grid.len())])
            } else {
                None
            };
            plans.push(WellPlan {
                kind: WellKind::Treated { drug_idx, dose_image, dose_rna },
                cell_idx,
                batch_idx,
            });
        }
    }
    for batch_idx in 0..cfg.n_batches {
        for cell_idx in 0..cfg.n_cell_types {
            for _ in 0..cfg.controls_per_batch_cell {
                plans.push(WellPlan {
                    kind: WellKind::Control,
                    cell_idx,
                    batch_idx,
                });
            }
        }
    }
    for gene in 0..cfg.n_genes {
        for k in 0..cfg.gene_wells_per_gene {
            let mut rng = derive(cfg.seed, &[TAG_WELL, 1, gene as u64, k as u64]);
            let cell_idx = rng.random_range(0..cfg.n_cell_types);
            let batch_idx = rng.random_range(0..cfg.n_batches);
            plans.push(WellPlan {
                kind: WellKind::Gene { gene },
                cell_idx,
                batch_idx,
            });
        }
    }
    plans
}

enum Rendered {
    Samples(Vec<Sample>),
    Genes(Vec<GenePerturbSample>),
}

/// All randomness is derived from (seed, well index, image index), so the
/// output is identical whether wells render serially or in parallel.
fn render_well(world: &World, plan: &WellPlan, well_idx: usize) -> Result<Rendered> {
    let cfg = &world.config;
    let cell = &world.cells[plan.cell_idx];
    let well_id = format!("w{well_idx:04}");
    let batch_id = format!("batch{}", plan.batch_idx);
    let mut rna_rng = derive(cfg.seed, &[TAG_RNA, well_idx as u64]);

    match &plan.kind {
        WellKind::Treated { drug_idx, dose_image, dose_rna } => {
            let drug = &world.drugs[*drug_idx];
            // Stored transcriptome: an independent RNA well at its own dose.
            let well_rna = match dose_rna {
                Some(dr) => {
                    let state = world.sample_latent_state(drug, cell, *dr)?;
                    Some(world.render_transcriptome(&state, cell, cfg.sigma_r, &mut rna_rng)?)
                }
                None => None,
            };
            let state_img = world.sample_latent_state(drug, cell, *dose_image)?;
            let mut samples = Vec::with_capacity(cfg.images_per_well);
            for img_idx in 0..cfg.images_per_well {
                let mut img_rng = derive(cfg.seed, &[TAG_IMG, well_idx as u64, img_idx as u64]);
                // Expression actually present in the imaged well.
                let rna_img =
                    world.render_transcriptome(&state_img, cell, cfg.sigma_r, &mut img_rng)?;
                let raw = render_sample_image(
                    world,
                    &state_img.z,
                    &rna_img,
                    cell,
                    plan.batch_idx,
                    cfg.sigma_m,
                    cfg.sigma_i,
                    &mut img_rng,
                )?;
                samples.push(Sample {
                    sample_id: format!("s{well_idx:04}_{img_idx}"),
                    image: preprocess_image(&raw)?,
                    rna: well_rna.clone(),
                    cell_id: cell.cell_id.clone(),
                    drug_id: Some(drug.drug_id.clone()),
                    dose_image: Some(*dose_image),
                    dose_rna: *dose_rna,
                    batch_id: batch_id.clone(),
                    well_id: well_id.clone(),
                    is_control: false,
                    is_paired: well_rna.is_some(),
                });
            }
            Ok(Rendered::Samples(samples))
        }
        WellKind::Control => {
            let well_rna = world.control_transcriptome(cell, cfg.sigma_r, &mut rna_rng);
            let z = ndarray::Array1::zeros(cfg.latent_dim);
            let mut samples = Vec::with_capacity(cfg.images_per_well);
            for img_idx in 0..cfg.images_per_well {
                let mut img_rng = derive(cfg.seed, &[TAG_IMG, well_idx as u64, img_idx as u64]);
                let rna_img = world.control_transcriptome(cell, cfg.sigma_r, &mut img_rng);
                let raw = render_sample_image(
                    world,
                    &z,
                    &rna_img,
                    cell,
                    plan.batch_idx,
                    cfg.sigma_m,
                    cfg.sigma_i,
                    &mut img_rng,
                )?;
                samples.push(Sample {
                    sample_id: format!("s{well_idx:04}_{img_idx}"),
                    image: preprocess_image(&raw)?,
                    rna: Some(well_rna.clone()),
                    cell_id: cell.cell_id.clone(),
                    drug_id: None,
                    dose_image: Some(0.0),
                    dose_rna: Some(0.0),
                    batch_id: batch_id.clone(),
                    well_id: well_id.clone(),
                    is_control: true,
                    is_paired: false,
                });
            }
            Ok(Rendered::Samples(samples))
        }
        WellKind::Gene { gene } => {
            let z = ndarray::Array1::zeros(cfg.latent_dim);
            let mut samples = Vec::with_capacity(cfg.images_per_well);
            for img_idx in 0..cfg.images_per_well {
                let mut img_rng = derive(cfg.seed, &[TAG_IMG, well_idx as u64, img_idx as u64]);
                let rna_img =
                    world.gene_perturbed_transcriptome(cell, *gene, cfg.sigma_r, &mut img_rng)?;
                let raw = render_sample_image(
                    world,
                    &z,
                    &rna_img,
                    cell,
                    plan.batch_idx,
                    cfg.sigma_m,
                    cfg.sigma_i,
                    &mut img_rng,
                )?;
                samples.push(GenePerturbSample {
                    sample_id: format!("g{well_idx:04}_{img_idx}"),
                    image: preprocess_image(&raw)?,
                    gene: *gene,
                    cell_id: cell.cell_id.clone(),
                    batch_id: batch_id.clone(),
                    well_id: well_id.clone(),
                });
            }
            Ok(Rendered::Genes(samples))
        }
    }
}

/// Drug-level split, stratified over mechanism clusters so every split
/// sees every mechanism where counts allow.
fn split_drugs(world: &World) -> SplitManifest {
    let cfg = &world.config;
    let mut per_cluster: Vec<Vec<String>> = vec![Vec::new(); cfg.n_mech_clusters];
    for drug in &world.drugs {
        per_cluster[drug.mech_cluster].push(drug.drug_id.clone());
    }
    for (cl, members) in per_cluster.iter_mut().enumerate() {
        let mut rng = derive(cfg.seed, &[TAG_SPLIT, cl as u64]);
        // Fisher-Yates shuffle.
        for i in (1..members.len()).rev() {
            let j = rng.random_range(0..=i);
            members.swap(i, j);
        }
    }
    let mut manifest = SplitManifest::default();
    let take_round_robin = |count: usize, pools: &mut Vec<Vec<String>>| -> Vec<String> {
        let mut taken = Vec::with_capacity(count);
        let mut cl = 0;
        while taken.len() < count {
            let n_pools = pools.len();
            if pools.iter().all(|p| p.is_empty()) {
                break;
            }
            if let Some(d) = pools[cl % n_pools].pop() {
                taken.push(d);
            }
            cl += 1;
        }
        taken
    };
    manifest.test_drugs = take_round_robin(cfg.n_test_drugs, &mut per_cluster);
    manifest.val_drugs = take_round_robin(cfg.n_val_drugs, &mut per_cluster);
    manifest.train_drugs = per_cluster.into_iter().flatten().collect();
    manifest.train_drugs.sort();
    manifest.val_drugs.sort();
    manifest.test_drugs.sort();
    manifest
}

pub fn generate_dataset(config: &SynthConfig) -> Result<Dataset> {
    let world = World::generate(config)?;
    let plans = plan_wells(&world);
    let rendered: Vec<Rendered> = plans
        .par_iter()
        .enumerate()
        .map(|(idx, plan)| render_well(&world, plan, idx))
        .collect::<Result<_>>()?;
    let mut samples = Vec::new();
    let mut gene_samples = Vec::new();
    for r in rendered {
        match r {
            Rendered::Samples(mut s) => samples.append(&mut s),
            Rendered::Genes(mut g) => gene_samples.append(&mut g),
        }
    }
    let truth = GroundTruthAssoc::from_drugs(&world.drugs, config.n_genes);
    let splits = split_drugs(&world);
    Ok(Dataset {
        config: config.clone(),
        world,
        samples,
        gene_samples,
        truth,
        splits,
    })
}
