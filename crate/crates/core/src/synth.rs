//! Synthetic paired data: scripted expression trajectories, audio whose
//! band energies track the same latent signals, and point clouds sampled
//! from the head field.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::condstream::{write_wav, Waveform, EXPRESSION_FPS, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::headfield::{BoundField, FieldSpec, SurfaceRegion};
use crate::rng;
use crate::scalar::Real;
use crate::seqfile::SequenceFile;
use crate::seqfit::PointCloudFrame;
use crate::trainer::{Manifest, ManifestRecord};

/// Tone frequencies, one per latent channel.
pub const TONES_HZ: [f64; 4] = [250.0, 500.0, 1000.0, 2000.0];
const TONE_LEVEL: f64 = 0.08;
const TONE_GAIN: f64 = 0.8;
const NOISE_LEVEL: f64 = 1e-3;
const BASIS_SAMPLES: usize = 1500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub records: usize,
    pub frames: usize,
    /// Number of observable expression directions the codes move along.
    pub rank: usize,
    /// Typical code norm.
    pub amplitude: f64,
    pub field: FieldSpec,
    pub seed: u64,
    /// Points per frame in emitted point clouds; zero skips them.
    pub cloud_points: usize,
    /// Noise added to every point-cloud coordinate.
    pub cloud_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            records: 4,
            frames: 96,
            rank: 8,
            amplitude: 0.5,
            field: FieldSpec::default(),
            seed: rng::DEFAULT_SEED,
            cloud_points: 0,
            cloud_jitter: 0.0,
        }
    }
}

/// Slow latent signals in `[-1, 1]`, one column per tone, sampled at
/// `rate` Hz.
pub fn latent_signals(samples: usize, rate: f64, seed: u64, record: u64) -> Array2<f64> {
    let mut r = rng::keyed(seed, &[rng::stream::SYNTH, 1, record]);
    let params: Vec<[f64; 4]> = (0..TONES_HZ.len())
        .map(|_| {
            [
                r.random_range(0.4..1.5),
                r.random_range(0.0..TAU),
                r.random_range(0.4..1.5),
                r.random_range(0.0..TAU),
            ]
        })
        .collect();
    Array2::from_shape_fn((samples, TONES_HZ.len()), |(i, k)| {
        let t = i as f64 / rate;
        let [f1, p1, f2, p2] = params[k];
        0.6 * (TAU * f1 * t + p1).sin() + 0.4 * (TAU * f2 * t + p2).sin()
    })
}

/// Orthonormal observable directions of the neutral face.
pub fn expression_basis<T: Real>(field: &BoundField<T>, rank: usize, seed: u64) -> Result<Array2<T>> {
    let mut r = rng::keyed(seed, &[rng::stream::SYNTH, 2]);
    let points = field.surface_samples(&field.zero_deformer(), BASIS_SAMPLES, SurfaceRegion::Face, &mut r);
    field.observable_basis(rank, &points)
}

/// Linear map from latent signals to codes: `codes = latents * mixing * basis`.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeGenerator<T> {
    pub basis: Array2<T>,
    /// `latents x rank`.
    pub mixing: Array2<T>,
}

impl<T: Real> CodeGenerator<T> {
    pub fn new(field: &BoundField<T>, rank: usize, amplitude: f64, seed: u64) -> Result<Self> {
        let basis = expression_basis(field, rank, seed)?;
        let mut r = rng::keyed(seed, &[rng::stream::SYNTH, 3]);
        let scale = amplitude / (TONES_HZ.len() as f64 * 0.5).sqrt();
        let mixing = Array2::from_shape_simple_fn((TONES_HZ.len(), rank), || {
            T::lit(scale * rng::normal(&mut r) / (rank as f64).sqrt())
        });
        Ok(Self { basis, mixing })
    }

    pub fn codes(&self, latents: &Array2<f64>) -> Array2<T> {
        latents.mapv(T::lit).dot(&self.mixing).dot(&self.basis)
    }
}

/// Tones whose amplitudes follow `exp(gain * latent)`, plus a faint noise
/// floor, so every tone band's log energy is affine in its latent.
pub fn latent_audio(duration: f64, seed: u64, record: u64) -> Waveform<f64> {
    let n = (duration * SAMPLE_RATE as f64).round() as usize;
    let z = latent_signals(n, SAMPLE_RATE as f64, seed, record);
    let mut r = rng::keyed(seed, &[rng::stream::SYNTH, 4, record]);
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            let tones: f64 = TONES_HZ
                .iter()
                .enumerate()
                .map(|(k, f)| TONE_LEVEL * (TONE_GAIN * z[[i, k]]).exp() * (TAU * f * t).sin())
                .sum();
            tones + NOISE_LEVEL * r.random_range(-1.0..1.0)
        })
        .collect();
    Waveform::new(samples)
}

/// Paired codes and audio for one record.
pub fn synthetic_record<T: Real>(generator: &CodeGenerator<T>, frames: usize, seed: u64, record: u64) -> (Array2<T>, Waveform<f64>) {
    let z = latent_signals(frames, EXPRESSION_FPS, seed, record);
    let codes = generator.codes(&z);
    let audio = latent_audio(frames as f64 / EXPRESSION_FPS, seed, record);
    (codes, audio)
}

/// Facial surface samples of every frame's deformed head, each coordinate
/// perturbed by Gaussian noise of standard deviation `jitter`.
pub fn synthetic_point_clouds<T: Real>(
    field: &BoundField<T>,
    codes: &Array2<T>,
    points: usize,
    jitter: f64,
    seed: u64,
    record: u64,
) -> Result<Vec<PointCloudFrame<T>>> {
    (0..codes.nrows())
        .into_par_iter()
        .map(|i| {
            let deformer = field.deformer(codes.row(i))?;
            let mut r = rng::keyed(seed, &[rng::stream::SYNTH, 5, record, i as u64]);
            let mut points = field.surface_samples(&deformer, points, SurfaceRegion::Face, &mut r);
            if jitter > 0.0 {
                for p in &mut points {
                    for v in p.iter_mut() {
                        *v += T::lit(jitter * rng::normal(&mut r));
                    }
                }
            }
            Ok(PointCloudFrame { points })
        })
        .collect()
}

/// Write a complete dataset (sequences, WAVs, optional point clouds and a
/// manifest) into `dir`; returns the manifest path.
pub fn write_dataset(dir: impl AsRef<Path>, config: &SynthConfig) -> Result<PathBuf> {
    let dir = dir.as_ref();
    if config.records == 0 || config.frames < 2 {
        return Err(Error::InvalidConfig("need at least one record of two frames".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let field = config.field.bind::<f64>()?;
    let generator = CodeGenerator::new(&field, config.rank, config.amplitude, config.seed)?;
    let mut records = Vec::new();
    for rec in 0..config.records {
        let id = format!("clip{rec:03}");
        let (codes, audio) = synthetic_record(&generator, config.frames, config.seed, rec as u64);
        let seq = PathBuf::from(format!("{id}.ftsq"));
        let wav = PathBuf::from(format!("{id}.wav"));
        SequenceFile::new(codes.mapv(|v| v as f32)).write(dir.join(&seq))?;
        write_wav(dir.join(&wav), &audio)?;
        if config.cloud_points > 0 {
            let clouds = synthetic_point_clouds(&field, &codes, config.cloud_points, config.cloud_jitter, config.seed, rec as u64)?;
            crate::seqfit::write_point_clouds(dir.join(format!("{id}.cloud")), &clouds)?;
        }
        records.push(ManifestRecord {
            id,
            identity: "synthetic".into(),
            sequence: seq,
            audio: wav,
        });
    }
    let manifest = Manifest {
        fps: EXPRESSION_FPS,
        field: config.field,
        records,
    };
    let path = dir.join("manifest.json");
    manifest.write(&path)?;
    Ok(path)
}
