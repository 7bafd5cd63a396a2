//! Sequence-level evaluation: sample diversity, adjacent-frame jitter and
//! temporal autocorrelation, plus CSV/JSON reporting.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Mean pairwise L2 distance between flattened sequences generated for the
/// same input, over ordered pairs, normalized by the number of sets and the
/// set size.
pub fn diversity<T: Real>(sets: &[Vec<Array2<T>>]) -> Result<T> {
    if sets.is_empty() {
        return Err(Error::InsufficientInput("no sample sets".into()));
    }
    let k = sets[0].len();
    for (i, set) in sets.iter().enumerate() {
        if set.len() < 2 {
            return Err(Error::InsufficientInput(format!("set {i} has {} samples, need at least 2", set.len())));
        }
        if set.len() != k {
            return Err(Error::Dimension(format!("set {i} has {} samples, set 0 has {k}", set.len())));
        }
        if let Some(j) = set.iter().position(|s| s.dim() != set[0].dim()) {
            return Err(Error::Dimension(format!(
                "set {i} sample {j} is {:?}, sample 0 is {:?}",
                set[j].dim(),
                set[0].dim()
            )));
        }
    }
    let per_set: Vec<T> = sets
        .par_iter()
        .map(|set| {
            let mut sum = T::zero();
            for (j, a) in set.iter().enumerate() {
                for (l, b) in set.iter().enumerate() {
                    if j != l {
                        let sq = a.iter().zip(b).fold(T::zero(), |s, (x, y)| s + (*x - *y) * (*x - *y));
                        sum += sq.sqrt();
                    }
                }
            }
            sum
        })
        .collect();
    let total = per_set.into_iter().fold(T::zero(), |a, b| a + b);
    Ok(total / (T::from_count(sets.len()) * T::from_count(k)))
}

/// Mean absolute and root-mean-square frame-to-frame difference over all
/// coordinates.
pub fn adjacent_mae_rmse<T: Real>(seq: ArrayView2<T>) -> Result<(T, T)> {
    let n = seq.nrows();
    if n < 2 {
        return Err(Error::InsufficientInput(format!("{n} frames, need at least 2")));
    }
    let diff = &seq.slice(ndarray::s![1.., ..]) - &seq.slice(ndarray::s![..-1, ..]);
    let count = T::from_count(diff.len());
    let abs = diff.iter().fold(T::zero(), |s, d| s + d.abs());
    let sq = diff.iter().fold(T::zero(), |s, d| s + *d * *d);
    Ok((abs / count, (sq / count).sqrt()))
}

fn pearson<T: Real>(a: impl Iterator<Item = T> + Clone, b: impl Iterator<Item = T> + Clone) -> Option<T> {
    let n = T::from_count(a.clone().count());
    let ma = a.clone().fold(T::zero(), |s, x| s + x) / n;
    let mb = b.clone().fold(T::zero(), |s, x| s + x) / n;
    let (mut sab, mut saa, mut sbb) = (T::zero(), T::zero(), T::zero());
    for (x, y) in a.zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if !(saa > T::zero() && sbb > T::zero()) {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).max(-T::one()).min(T::one()))
}

fn check_lag<T>(seq: &ArrayView2<T>, lag: usize) -> Result<()> {
    if seq.nrows() <= lag {
        return Err(Error::InsufficientInput(format!("{} frames for lag {lag}", seq.nrows())));
    }
    Ok(())
}

/// Pearson correlation between the sequence and its copy shifted by `lag`
/// frames, pooling all coordinates into one sample.
pub fn autocorrelation<T: Real>(seq: ArrayView2<T>, lag: usize) -> Result<T> {
    check_lag(&seq, lag)?;
    let n = seq.nrows();
    let head = seq.slice(ndarray::s![..n - lag, ..]);
    let tail = seq.slice(ndarray::s![lag.., ..]);
    pearson(head.iter().copied(), tail.iter().copied())
        .ok_or_else(|| Error::Degenerate(format!("zero variance at lag {lag}")))
}

/// Lag correlation of each coordinate separately.
pub fn autocorrelation_per_coordinate<T: Real>(seq: ArrayView2<T>, lag: usize) -> Result<Vec<T>> {
    check_lag(&seq, lag)?;
    let n = seq.nrows();
    seq.axis_iter(Axis(1))
        .enumerate()
        .map(|(c, col)| {
            pearson(col.iter().take(n - lag).copied(), col.iter().skip(lag).copied())
                .ok_or_else(|| Error::Degenerate(format!("coordinate {c} has zero variance at lag {lag}")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SequenceMetrics {
    pub name: String,
    pub frames: usize,
    pub mae: f64,
    pub rmse: f64,
    /// Lag-1 pooled autocorrelation; absent for constant sequences.
    pub autocorrelation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// Absent when fewer than two samples were given per input.
    pub diversity: Option<f64>,
    pub sequences: Vec<SequenceMetrics>,
}

impl EvalReport {
    /// Per-sequence metrics for every sample, and diversity over the sets
    /// when each has at least two samples.
    pub fn compute<T: Real>(sets: &[Vec<(String, Array2<T>)>]) -> Result<Self> {
        let mut sequences = Vec::new();
        for (name, seq) in sets.iter().flatten() {
            let (mae, rmse) = adjacent_mae_rmse(seq.view())?;
            let autocorrelation = match autocorrelation(seq.view(), 1) {
                Ok(r) => Some(r.as_f64()),
                Err(Error::Degenerate(_)) => None,
                Err(e) => return Err(e),
            };
            sequences.push(SequenceMetrics {
                name: name.clone(),
                frames: seq.nrows(),
                mae: mae.as_f64(),
                rmse: rmse.as_f64(),
                autocorrelation,
            });
        }
        let diversity = if !sets.is_empty() && sets.iter().all(|s| s.len() >= 2) {
            let codes: Vec<Vec<Array2<T>>> = sets.iter().map(|s| s.iter().map(|(_, a)| a.clone()).collect()).collect();
            Some(diversity(&codes)?.as_f64())
        } else {
            None
        };
        Ok(Self { diversity, sequences })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Long format: `metric,sequence,value`, diversity first with an empty
    /// sequence column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,sequence,value\n");
        if let Some(d) = self.diversity {
            let _ = writeln!(out, "diversity,,{d}");
        }
        for s in &self.sequences {
            let _ = writeln!(out, "mae,{},{}", s.name, s.mae);
            let _ = writeln!(out, "rmse,{},{}", s.name, s.rmse);
            if let Some(r) = s.autocorrelation {
                let _ = writeln!(out, "autocorrelation,{},{r}", s.name);
            }
        }
        out
    }

    /// Writes `<stem>.json` and `<stem>.csv`.
    pub fn write(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        for (ext, text) in [("json", self.to_json()), ("csv", self.to_csv())] {
            let path = stem.with_extension(ext);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}
