//! Synthetic causal world: drug -> engagement state -> {transcriptome,
//! morphology} -> image, conditioned on cell type, with weak image/RNA
//! pairing, DMSO controls, batch flatfields, and ground-truth targets.

pub mod dataset;
pub mod render;
pub mod types;
pub mod world;

pub use dataset::{generate_dataset, Dataset, GenePerturbSample, Split, SplitManifest};
pub use render::{paint_image, preprocess_image, Flatfield};
pub use types::{
    CellTypeSpec, DrugSpec, GroundTruthAssoc, LatentState, Sample, SynthConfig, CONTROL_ID,
    MORPH_DIM,
};
pub use world::World;
