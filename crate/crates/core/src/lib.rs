//! RoI-focused multi-task MR-to-CT translation.
//!
//! Image containers and HU region partition ([`image`]), the weighted-focus
//! losses ([`losses`]), a full-resolution dilated multi-head network
//! ([`network`]), the Nadam training loop ([`trainer`]), a paired head
//! phantom generator ([`phantom`]) and region-wise evaluation ([`eval`]).

pub mod error;
pub mod eval;
pub mod image;
pub mod losses;
pub mod network;
pub mod phantom;
pub mod trainer;
pub mod sample;
pub mod variant;

pub use error::{Error, Result};
pub use eval::{aggregate_sct, evaluate_case, summarize, CaseMetrics, Report, ReportFormat};
pub use image::{
    binarize, derive_body_mask, partition_regions, z_score_normalize, BinaryMask, HuImage,
    Image2D, MrImage, ProbMap, RegionPartition,
};
pub use losses::{LossBreakdown, LossWeights, Objective};
pub use network::{Model, ModelConfig, TaskOutputs};
pub use phantom::{generate_dataset, generate_phantom, PhantomParams};
pub use trainer::{train, TrainConfig, TrainHistory, TrainOutcome};
pub use sample::{read_cases, read_sample, write_sample, Case, Meta, PhantomSample, Prediction};
pub use variant::{make_variant, Variant};
