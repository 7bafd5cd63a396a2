//! Audio-conditioned diffusion over per-frame head expression codes, with
//! the dataset tooling around it: expression fitting against point clouds,
//! template registration, mesh extraction and sequence metrics.
//!
//! Numerical code is generic over [`scalar::Real`]; the aliases below fix
//! it to `f64`.

pub mod condstream;
pub mod denoiser;
pub mod error;
pub mod evalkit;
pub mod headfield;
pub mod mesher;
pub mod optim;
pub mod rigidfit;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod schedule;
pub mod seqfile;
pub mod seqfit;
pub mod synth;
pub mod trainer;
pub mod vec3;

pub use error::{Error, Result};

pub type NoiseSchedule = schedule::NoiseSchedule<f64>;
pub type DenoiserParams = denoiser::DenoiserParams<f64>;
pub type HeadField = headfield::HeadField<f64>;
pub type Mesh = mesher::Mesh<f64>;
pub type ScalarGrid = mesher::ScalarGrid<f64>;
pub type PairedDataset = trainer::PairedDataset<f64>;
pub type SequenceFile = seqfile::SequenceFile<f64>;
pub type SequenceFit = seqfit::SequenceFit<f64>;
pub type TemplateModel = rigidfit::TemplateModel<f64>;
pub type TemplateFit = rigidfit::TemplateFit<f64>;
pub type Similarity = rigidfit::Similarity<f64>;
