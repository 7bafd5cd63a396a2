//! Diffusion training: clip sampling, augmentation, conditioning dropout and
//! Adam updates.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayView1};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::condstream::{audio_stream, null_stream, read_wav, ConditioningStream, FilterbankConfig};
use crate::denoiser::{loss_gradients, DenoiserParams};
use crate::error::{Error, Result};
use crate::headfield::FieldSpec;
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::scalar::Real;
use crate::schedule::{forward_noise, NoiseSchedule};
use crate::seqfile::SequenceFile;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub clip_frames: usize,
    /// Probability of replacing the conditioning with the null stream.
    pub cfg_drop_prob: f64,
    /// Range of the per-clip expression scale.
    pub aug_bounds: [f64; 2],
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            clip_frames: 48,
            cfg_drop_prob: 0.25,
            aug_bounds: [0.7, 1.3],
            learning_rate: 1e-4,
            adam: AdamConfig::default(),
            steps: 1000,
            batch_size: 8,
            seed: rng::DEFAULT_SEED,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cfg_drop_prob) {
            return Err(Error::InvalidConfig(format!(
                "cfg_drop_prob {} outside [0, 1]",
                self.cfg_drop_prob
            )));
        }
        let [a, b] = self.aug_bounds;
        if !(a > 0.0 && a <= b && b.is_finite()) {
            return Err(Error::InvalidConfig(format!("augmentation bounds [{a}, {b}] must satisfy 0 < a <= b")));
        }
        if self.clip_frames == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("clip_frames and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedRecord<T> {
    pub id: String,
    pub identity: String,
    pub codes: Array2<T>,
    pub cond: ConditioningStream<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset<T> {
    pub records: Vec<PairedRecord<T>>,
}

impl<T: Real> PairedDataset<T> {
    pub fn new(records: Vec<PairedRecord<T>>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InsufficientInput("dataset has no records".into()));
        }
        let width = records[0].cond.width();
        for r in &records {
            if r.cond.len() != r.codes.nrows() {
                return Err(Error::Dimension(format!(
                    "record {}: {} code frames but {} conditioning frames",
                    r.id,
                    r.codes.nrows(),
                    r.cond.len()
                )));
            }
            if r.cond.width() != width {
                return Err(Error::Dimension(format!(
                    "record {}: conditioning width {} differs from {width}",
                    r.id,
                    r.cond.width()
                )));
            }
        }
        Ok(Self { records })
    }

    pub fn cond_width(&self) -> usize {
        self.records[0].cond.width()
    }

    /// Variance of every code entry pooled over all records.
    pub fn code_variance(&self) -> f64 {
        let values: Vec<f64> = self
            .records
            .iter()
            .flat_map(|r| r.codes.iter().map(|v| v.as_f64()))
            .collect();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
    }
}

/// JSON dataset manifest; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub fps: f64,
    #[serde(default)]
    pub field: FieldSpec,
    pub records: Vec<ManifestRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    #[serde(default)]
    pub identity: String,
    pub sequence: PathBuf,
    pub audio: PathBuf,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Load every record of a manifest and featurize its audio once.
pub fn load_dataset<T: Real + rustfft::FftNum>(
    manifest_path: impl AsRef<Path>,
    filterbank: &FilterbankConfig,
) -> Result<(PairedDataset<T>, Manifest)> {
    let manifest_path = manifest_path.as_ref();
    let manifest = Manifest::read(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let records = manifest
        .records
        .iter()
        .map(|r| {
            let seq = SequenceFile::<T>::read(root.join(&r.sequence))?;
            let wav = read_wav::<T>(root.join(&r.audio))?;
            let cond = audio_stream(&wav, filterbank, Some(seq.codes.nrows()))?;
            Ok(PairedRecord {
                id: r.id.clone(),
                identity: r.identity.clone(),
                codes: seq.codes,
                cond,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((PairedDataset::new(records)?, manifest))
}

/// Multiply every code by `r`.
pub fn augment_expressions<T: Real>(seq: &Array2<T>, r: f64) -> Result<Array2<T>> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::InvalidConfig(format!("augmentation scale {r} must be positive")));
    }
    Ok(seq * T::lit(r))
}

/// Uniform draw from `[a, b]`.
pub fn sample_scale<R: Rng + ?Sized>(rng: &mut R, bounds: [f64; 2]) -> f64 {
    let [a, b] = bounds;
    if a == b {
        a
    } else {
        rng.random_range(a..=b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingItem<T> {
    pub record: usize,
    pub start: usize,
    pub scale: f64,
    pub t: usize,
    pub null: bool,
    pub x0: Array2<T>,
    pub noisy: Array2<T>,
    pub cond: ConditioningStream<T>,
}

impl<T> TrainingItem<T> {
    fn key(&self) -> (usize, usize, usize, u64, bool) {
        (self.record, self.start, self.t, self.scale.to_bits(), self.null)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub items: Vec<TrainingItem<T>>,
    /// Records too short to yield a clip.
    pub skipped: usize,
}

/// Draw the batch for optimizer step `step`. Every item is keyed by
/// `(seed, step, item)`, so batches do not depend on evaluation order.
pub fn make_training_batch<T: Real>(
    dataset: &PairedDataset<T>,
    step: u64,
    config: &TrainConfig,
    sched: &NoiseSchedule<T>,
    null_token: ArrayView1<T>,
) -> Result<Batch<T>> {
    let clip = config.clip_frames;
    let eligible: Vec<usize> = (0..dataset.records.len())
        .filter(|&i| dataset.records[i].codes.nrows() >= clip)
        .collect();
    let skipped = dataset.records.len() - eligible.len();
    if eligible.is_empty() {
        return Err(Error::InsufficientInput(format!(
            "no record has at least {clip} frames"
        )));
    }
    let items = (0..config.batch_size)
        .map(|b| {
            let mut r = rng::keyed(config.seed, &[rng::stream::BATCH, step, b as u64]);
            let record = eligible[r.random_range(0..eligible.len())];
            let rec = &dataset.records[record];
            let start = r.random_range(0..=rec.codes.nrows() - clip);
            let scale = sample_scale(&mut r, config.aug_bounds);
            let t = r.random_range(0..=sched.steps());
            let null = r.random::<f64>() < config.cfg_drop_prob;
            let eps = rng::normal_matrix(&mut r, clip, rec.codes.ncols());
            let window = rec.codes.slice(s![start..start + clip, ..]).to_owned();
            let x0 = augment_expressions(&window, scale)?;
            let noisy = forward_noise(&x0, t, &eps, sched)?.values;
            let cond = if null {
                null_stream(clip, null_token)?
            } else {
                rec.cond.window(start, clip)
            };
            Ok(TrainingItem {
                record,
                start,
                scale,
                t,
                null,
                x0,
                noisy,
                cond,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if skipped > 0 {
        log::warn!("{skipped} records shorter than {clip} frames were skipped");
    }
    Ok(Batch { items, skipped })
}

/// Mean loss and gradient over a batch. Items are evaluated in parallel and
/// reduced in a canonical order, so the result is independent of both the
/// thread count and the item order.
pub fn batch_gradients<T: Real>(
    params: &DenoiserParams<T>,
    items: &[TrainingItem<T>],
    ids: &(dyn Fn(usize) -> String + Sync),
) -> Result<(T, DenoiserParams<T>)> {
    let results: Vec<Result<_>> = items
        .par_iter()
        .map(|it| {
            loss_gradients(params, &it.x0, &it.noisy, &it.cond, it.t).map_err(|e| {
                Error::Numerical(format!("t {}, record {}: {e}", it.t, ids(it.record)))
            })
        })
        .collect();
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by_key(|&i| items[i].key());
    let mut loss = T::zero();
    let mut grads = params.zeros_like();
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    for i in order {
        loss += results[i].loss;
        grads.scaled_add(T::one(), &results[i].grads);
    }
    let inv = T::one() / T::from_count(items.len());
    let mut mean = params.zeros_like();
    mean.scaled_add(inv, &grads);
    Ok((loss * inv, mean))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: DenoiserParams<T>,
    /// Mean batch loss at every step.
    pub losses: Vec<f64>,
    pub skipped: usize,
}

/// Run `config.steps` Adam updates starting from `params`.
pub fn train<T: Real>(
    dataset: &PairedDataset<T>,
    mut params: DenoiserParams<T>,
    config: &TrainConfig,
    sched: &NoiseSchedule<T>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if dataset.cond_width() != params.config.d_cond {
        return Err(Error::InvalidConfig(format!(
            "dataset conditioning width {} differs from the model's {}",
            dataset.cond_width(),
            params.config.d_cond
        )));
    }
    let sizes: Vec<usize> = params.tensors().iter().map(|(_, _, d)| d.len()).collect();
    let mut adam = Adam::new(config.adam, sizes);
    let mut losses = Vec::with_capacity(config.steps);
    let mut skipped = 0;
    let ids = |i: usize| dataset.records[i].id.clone();
    for step in 0..config.steps {
        let batch = make_training_batch(dataset, step as u64, config, sched, params.null_token.view())?;
        skipped = batch.skipped;
        let (loss, grads) = batch_gradients(&params, &batch.items, &ids)
            .map_err(|e| Error::Numerical(format!("step {step}, {e}")))?;
        let g: Vec<&[T]> = grads.tensors().into_iter().map(|(_, _, d)| d).collect();
        adam.step(config.learning_rate, params.tensors_mut(), g);
        losses.push(loss.as_f64());
        if step % 100 == 0 {
            log::info!("step {step}: loss {:.6}", loss.as_f64());
        }
    }
    if let Some(name) = params.first_non_finite() {
        return Err(Error::Numerical(format!("parameter {name} became non-finite")));
    }
    Ok(TrainOutcome { params, losses, skipped })
}

/// Trailing moving average with the given window.
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..losses.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            let slice = &losses[lo..=i];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect()
}
