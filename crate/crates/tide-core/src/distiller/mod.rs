//! Teacher-student distillation over weakly paired batches.
//!
//! The teacher fuses post-FiLM image features, dose-conditioned RNA
//! features, and the frozen surrogate's cell encoding into h_t, scored
//! against the codebook at temperature tau. The student sees only the
//! raw image encoding and matches the teacher's distributions through a
//! stop-gradient KL. A simplified DINO-style SSL term covers unpaired
//! images, and contrastive InfoNCE baselines reuse the same encoder.

mod augment;
mod losses;
mod model;
mod ssl;
mod train;

pub use augment::augment_image;
pub use losses::{
    distill_loss_value, info_nce_symmetric, kl_distill, mean_cross_entropy, teacher_loss_value,
};
pub use model::{patchify, Model, ModelDims, FILM_HIDDEN};
pub use ssl::{softmax_centered, ssl_cross_terms, SslState};
pub use train::{
    load_model, train, train_baseline, DistillerManifest, EpochRow, TrainOutcome,
};

use serde::{Deserialize, Serialize};

use crate::codebook::CodebookMode;
use crate::error::{Result, TideError};

/// RNG tag for every distiller stream; subtags pick the purpose.
pub const TAG_DISTILL: u64 = 0x50;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// The full distillation objective.
    Tide,
    SslOnly,
    /// Contrastive alignment of images to drug fingerprints, CL(D).
    ClDrug,
    /// Contrastive alignment of images to paired transcriptomes, CL(R).
    ClRna,
}

impl BaselineKind {
    pub fn label(self) -> &'static str {
        match self {
            BaselineKind::Tide => "tide",
            BaselineKind::SslOnly => "ssl_only",
            BaselineKind::ClDrug => "cl_drug",
            BaselineKind::ClRna => "cl_rna",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Shared embedding width d (encoder output, codebook rows).
    pub d: usize,
    /// Patch side length for the image encoder.
    pub patch: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Teacher cross-entropy weight alpha.
    pub alpha: f64,
    /// SSL weight beta (also the SSL weight of the hybrid baselines).
    pub beta: f64,
    /// Student auxiliary cross-entropy weight.
    pub lambda_aux: f64,
    /// Teacher softmax temperature.
    pub tau: f64,
    /// Student softmax temperature.
    pub tau_s: f64,
    /// Dropout rate inside the fusion head.
    pub dropout: f64,
    pub ema_momentum: f64,
    pub center_momentum: f64,
    pub ssl_target_temp: f64,
    pub ssl_online_temp: f64,
    /// Output width of the SSL projection head.
    pub ssl_out_dim: usize,
    /// InfoNCE projection width for the contrastive baselines.
    pub proj_dim: usize,
    pub info_nce_temp: f64,
    /// k for checkpoint-selection kNN; clamped to n-1 on tiny val sets.
    pub knn_k: usize,
    /// Validation images per class for the kNN probe.
    pub knn_per_class: usize,
    pub baseline: BaselineKind,
    /// Ablation: force FiLM to identity and zero the RNA dose embedding.
    pub no_dose: bool,
    /// Ablation: stop teacher losses from updating the shared encoder.
    pub detach_teacher_encoder: bool,
    pub codebook_mode: CodebookMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d: 64,
            patch: 8,
            epochs: 50,
            batch_size: 32,
            lr: 1e-3,
            alpha: 1.0,
            beta: 0.2,
            lambda_aux: 0.3,
            tau: 0.2,
            tau_s: 0.07,
            dropout: 0.1,
            ema_momentum: 0.996,
            center_momentum: 0.9,
            ssl_target_temp: 0.07,
            ssl_online_temp: 0.1,
            ssl_out_dim: 64,
            proj_dim: 128,
            info_nce_temp: 0.07,
            knn_k: 20,
            knn_per_class: 10,
            baseline: BaselineKind::Tide,
            no_dose: false,
            detach_teacher_encoder: false,
            codebook_mode: CodebookMode::Learned,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d", self.d),
            ("patch", self.patch),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("ssl_out_dim", self.ssl_out_dim),
            ("proj_dim", self.proj_dim),
            ("knn_k", self.knn_k),
            ("knn_per_class", self.knn_per_class),
        ] {
            if v < 1 {
                return Err(TideError::config(format!("train config: {name} must be >= 1")));
            }
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda_aux", self.lambda_aux)]
        {
            if !(v >= 0.0) {
                return Err(TideError::config(format!(
                    "train config: {name} must be >= 0, got {v}"
                )));
            }
        }
        for (name, v) in [
            ("lr", self.lr),
            ("tau", self.tau),
            ("tau_s", self.tau_s),
            ("ssl_target_temp", self.ssl_target_temp),
            ("ssl_online_temp", self.ssl_online_temp),
            ("info_nce_temp", self.info_nce_temp),
        ] {
            if !(v > 0.0) {
                return Err(TideError::config(format!(
                    "train config: {name} must be positive, got {v}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TideError::config("train config: dropout must be in [0,1)"));
        }
        for (name, v) in [
            ("ema_momentum", self.ema_momentum),
            ("center_momentum", self.center_momentum),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(TideError::config(format!(
                    "train config: {name} must be in [0,1], got {v}"
                )));
            }
        }
        Ok(())
    }
}
