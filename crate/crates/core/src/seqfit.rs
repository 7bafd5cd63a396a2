//! Per-frame expression fitting against point-cloud sequences in
//! overlapping windows.

use std::fs;
use std::ops::Range;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::headfield::{BoundField, EXPRESSION_DIM, RBF_COUNT};
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::scalar::Real;
use crate::vec3::{self, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub iters: usize,
    pub window: usize,
    pub overlap: usize,
    pub learning_rate: f64,
    /// Step size after `lr_drop_after` iterations.
    pub late_learning_rate: f64,
    pub lr_drop_after: usize,
    pub lambda_sdf: f64,
    pub lambda_temp: f64,
    pub lambda_reg: f64,
    pub huber_delta: f64,
    /// Points drawn per frame and iteration.
    pub samples: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iters: 500,
            window: 10,
            overlap: 2,
            learning_rate: 1e-3,
            late_learning_rate: 1e-4,
            lr_drop_after: 300,
            lambda_sdf: 10.0,
            lambda_temp: 0.1,
            lambda_reg: 0.0025,
            huber_delta: 1.0,
            samples: 5000,
            adam: AdamConfig::default(),
            seed: rng::DEFAULT_SEED,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.overlap >= self.window {
            return Err(Error::InvalidConfig(format!(
                "overlap {} must be smaller than window {}",
                self.overlap, self.window
            )));
        }
        let lambdas = [self.lambda_sdf, self.lambda_temp, self.lambda_reg];
        if lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::InvalidConfig(format!("loss weights {lambdas:?} must be non-negative")));
        }
        if !(self.huber_delta > 0.0) || self.samples == 0 {
            return Err(Error::InvalidConfig("huber delta and sample count must be positive".into()));
        }
        Ok(())
    }

    fn weights(&self) -> LossWeights {
        LossWeights {
            sdf: self.lambda_sdf,
            temp: self.lambda_temp,
            reg: self.lambda_reg,
            huber_delta: self.huber_delta,
        }
    }

    fn lr(&self, iter: usize) -> f64 {
        if iter <= self.lr_drop_after {
            self.learning_rate
        } else {
            self.late_learning_rate
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub sdf: f64,
    pub temp: f64,
    pub reg: f64,
    pub huber_delta: f64,
}

/// Unweighted terms and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sdf: f64,
    pub temp: f64,
    pub reg: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudFrame<T> {
    pub points: Vec<Vec3<T>>,
}

/// Uniform subset of `count` distinct points.
pub fn sample_points<T: Real, R: Rng + ?Sized>(
    frame: &PointCloudFrame<T>,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Vec3<T>>> {
    let k = frame.points.len();
    if k < count {
        return Err(Error::InsufficientInput(format!(
            "frame has {k} points, {count} requested"
        )));
    }
    Ok(rand::seq::index::sample(rng, k, count)
        .into_iter()
        .map(|i| frame.points[i])
        .collect())
}

fn huber(d: f64, delta: f64) -> f64 {
    if d.abs() <= delta {
        0.5 * d * d
    } else {
        delta * (d.abs() - 0.5 * delta)
    }
}

fn huber_grad(d: f64, delta: f64) -> f64 {
    d.clamp(-delta, delta)
}

/// Mean `|sdf|` over one frame's points and its gradient with respect to
/// that frame's code.
fn frame_sdf_term<T: Real>(field: &BoundField<T>, code: ArrayView1<T>, points: &[Vec3<T>]) -> Result<(f64, Array1<T>)> {
    let deformer = field.deformer(code)?;
    let mut sum = 0.0;
    // Per-RBF accumulation of sign(s) * B_j * grad, mapped through W_j^T at the end.
    let mut acc = [[T::zero(); 3]; RBF_COUNT];
    for &p in points {
        let b = field.rbf(p);
        let d = field.displacement(p, &deformer);
        let (s, g) = field.base_sdf_grad(vec3::add(p, d));
        sum += s.abs().as_f64();
        let sign = if s > T::zero() {
            T::one()
        } else if s < T::zero() {
            -T::one()
        } else {
            T::zero()
        };
        for (a, bj) in acc.iter_mut().zip(b) {
            *a = vec3::add(*a, vec3::scale(g, sign * bj));
        }
    }
    let inv = T::one() / T::from_count(points.len());
    let mut grad = Array1::zeros(EXPRESSION_DIM);
    for (a, w) in acc.iter().zip(field.weights()) {
        for k in 0..3 {
            grad.scaled_add(a[k] * inv, &w.row(k));
        }
    }
    Ok((sum / points.len() as f64, grad))
}

/// `sdf * sum_i mean_k |s_ik| + temp * sum_i huber(c_{i+1} - c_i) + reg * sum_i |c_i|`
/// and its gradient with respect to the codes.
pub fn window_loss_gradient<T: Real>(
    field: &BoundField<T>,
    codes: &Array2<T>,
    samples: &[Vec<Vec3<T>>],
    weights: &LossWeights,
) -> Result<(LossBreakdown, Array2<T>)> {
    let n = codes.nrows();
    if samples.len() != n || codes.ncols() != EXPRESSION_DIM {
        return Err(Error::Dimension(format!(
            "{:?} codes for {} sampled frames",
            codes.dim(),
            samples.len()
        )));
    }
    if samples.iter().any(Vec::is_empty) {
        return Err(Error::InsufficientInput("a frame has no sampled points".into()));
    }
    let per_frame: Vec<(f64, Array1<T>)> = (0..n)
        .into_par_iter()
        .map(|i| frame_sdf_term(field, codes.row(i), &samples[i]))
        .collect::<Result<_>>()?;
    let mut grad = Array2::<T>::zeros(codes.dim());
    let mut out = LossBreakdown::default();
    let ws = T::lit(weights.sdf);
    for (i, (s, g)) in per_frame.iter().enumerate() {
        out.sdf += s;
        grad.row_mut(i).scaled_add(ws, g);
    }
    let wt = weights.temp;
    for i in 0..n.saturating_sub(1) {
        for k in 0..EXPRESSION_DIM {
            let d = (codes[[i + 1, k]] - codes[[i, k]]).as_f64();
            out.temp += huber(d, weights.huber_delta);
            let g = T::lit(wt * huber_grad(d, weights.huber_delta));
            grad[[i + 1, k]] += g;
            grad[[i, k]] -= g;
        }
    }
    for (i, row) in codes.rows().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        out.reg += norm.as_f64();
        if norm > T::zero() {
            grad.row_mut(i).scaled_add(T::lit(weights.reg) / norm, &row);
        }
    }
    out.total = weights.sdf * out.sdf + weights.temp * out.temp + weights.reg * out.reg;
    Ok((out, grad))
}

pub fn window_loss<T: Real>(
    field: &BoundField<T>,
    codes: &Array2<T>,
    samples: &[Vec<Vec3<T>>],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    window_loss_gradient(field, codes, samples, weights).map(|(l, _)| l)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowFit<T> {
    pub codes: Array2<T>,
    /// Loss at the last iteration.
    pub loss: LossBreakdown,
    pub history: Vec<f64>,
}

/// Adam on the window loss, redrawing every frame's point subset at every
/// iteration from a stream keyed by `(seed, window, iteration, frame)`.
pub fn fit_window<T: Real>(
    field: &BoundField<T>,
    frames: &[PointCloudFrame<T>],
    init: &Array2<T>,
    config: &FitConfig,
    window_index: usize,
) -> Result<WindowFit<T>> {
    config.validate()?;
    if init.dim() != (frames.len(), EXPRESSION_DIM) {
        return Err(Error::Dimension(format!(
            "initial codes {:?} for {} frames",
            init.dim(),
            frames.len()
        )));
    }
    let weights = config.weights();
    let mut codes = init.clone();
    let mut adam = Adam::new(config.adam, [codes.len()]);
    let mut history = Vec::with_capacity(config.iters);
    let mut loss = LossBreakdown::default();
    for iter in 1..=config.iters {
        let samples = (0..frames.len())
            .into_par_iter()
            .map(|f| {
                let mut r = rng::keyed(
                    config.seed,
                    &[rng::stream::FIT_POINTS, window_index as u64, iter as u64, f as u64],
                );
                sample_points(&frames[f], config.samples, &mut r)
            })
            .collect::<Result<Vec<_>>>()?;
        let (l, grad) = window_loss_gradient(field, &codes, &samples, &weights)?;
        if !l.total.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite fitting loss in window {window_index} at iteration {iter}"
            )));
        }
        loss = l;
        history.push(l.total);
        let g = grad.as_slice().expect("standard layout");
        adam.step(config.lr(iter), [codes.as_slice_mut().expect("standard layout")], [g]);
    }
    Ok(WindowFit { codes, loss, history })
}

/// Frame ranges of the sliding windows: starts advance by `window - overlap`
/// and the last window is cut at `n`.
pub fn window_ranges(n: usize, window: usize, overlap: usize) -> Vec<Range<usize>> {
    if n == 0 {
        return Vec::new();
    }
    let stride = window - overlap;
    let count = if n <= window { 1 } else { 1 + (n - window).div_ceil(stride) };
    (0..count)
        .map(|w| {
            let start = w * stride;
            start..(start + window).min(n)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceFit<T> {
    pub codes: Array2<T>,
    pub windows: Vec<LossBreakdown>,
}

/// Fit every frame. Each window starts from the previous window's optimized
/// codes on the overlap and from the latest known code elsewhere; later
/// windows overwrite overlapped frames.
pub fn fit_sequence<T: Real>(
    field: &BoundField<T>,
    frames: &[PointCloudFrame<T>],
    config: &FitConfig,
) -> Result<SequenceFit<T>> {
    config.validate()?;
    let n = frames.len();
    if n == 0 {
        return Err(Error::InsufficientInput("no frames to fit".into()));
    }
    let mut codes = Array2::<T>::zeros((n, EXPRESSION_DIM));
    let mut windows = Vec::new();
    let mut fitted_until = 0;
    for (w, range) in window_ranges(n, config.window, config.overlap).into_iter().enumerate() {
        let mut init = Array2::<T>::zeros((range.len(), EXPRESSION_DIM));
        for (local, f) in range.clone().enumerate() {
            let source = if f < fitted_until {
                Some(f)
            } else if fitted_until > 0 {
                Some(fitted_until - 1)
            } else {
                None
            };
            if let Some(s) = source {
                init.row_mut(local).assign(&codes.row(s));
            }
        }
        let fit = fit_window(field, &frames[range.clone()], &init, config, w)?;
        log::info!("window {w} ({range:?}): loss {:.6}", fit.loss.total);
        codes.slice_mut(ndarray::s![range.clone(), ..]).assign(&fit.codes);
        fitted_until = range.end;
        windows.push(fit.loss);
    }
    Ok(SequenceFit { codes, windows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CloudSidecar {
    frames: usize,
    points_per_frame: Vec<usize>,
}

/// Raw little-endian `f32` xyz triples plus a JSON sidecar listing the
/// point count of each frame.
pub fn write_point_clouds<T: Real>(path: impl AsRef<Path>, frames: &[PointCloudFrame<T>]) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    for f in frames {
        for p in &f.points {
            for v in p {
                bytes.extend_from_slice(&v.to_f32_bits().to_le_bytes());
            }
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = CloudSidecar {
        frames: frames.len(),
        points_per_frame: frames.iter().map(|f| f.points.len()).collect(),
    };
    let sidecar = path.with_extension("json");
    fs::write(&sidecar, serde_json::to_string_pretty(&side).expect("json")).map_err(|e| Error::io(&sidecar, e))
}

pub fn read_point_clouds<T: Real>(path: impl AsRef<Path>) -> Result<Vec<PointCloudFrame<T>>> {
    let path = path.as_ref();
    let sidecar = path.with_extension("json");
    let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let side: CloudSidecar = serde_json::from_str(&text).map_err(|e| Error::format(&sidecar, e.to_string()))?;
    if side.points_per_frame.len() != side.frames {
        return Err(Error::format(&sidecar, "frame count disagrees with point counts"));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let total: usize = side.points_per_frame.iter().sum();
    if bytes.len() != total * 12 {
        return Err(Error::format(
            path,
            format!("{} bytes for {total} points", bytes.len()),
        ));
    }
    let values: Vec<T> = bytes
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
        .collect();
    let mut offset = 0;
    Ok(side
        .points_per_frame
        .iter()
        .map(|&k| {
            let points = (0..k)
                .map(|i| {
                    let j = 3 * (offset + i);
                    [values[j], values[j + 1], values[j + 2]]
                })
                .collect();
            offset += k;
            PointCloudFrame { points }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::headfield::{FieldSpec, SurfaceRegion};

    fn field() -> BoundField<f64> {
        FieldSpec::default().bind().unwrap()
    }

    #[test]
    fn sampling_examples() {
        let frame = PointCloudFrame {
            points: (0..20).map(|i| [i as f64, 0.0, 0.0]).collect(),
        };
        let mut all = sample_points(&frame, 20, &mut rng::keyed(1, &[])).unwrap();
        all.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(all, frame.points);
        let a = sample_points(&frame, 7, &mut rng::keyed(2, &[])).unwrap();
        let b = sample_points(&frame, 7, &mut rng::keyed(2, &[])).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|p| frame.points.contains(p)));
        assert!(sample_points(&frame, 21, &mut rng::keyed(2, &[])).is_err());
    }

    #[test]
    fn window_arithmetic() {
        assert_eq!(window_ranges(10, 10, 2), vec![0..10]);
        assert_eq!(window_ranges(26, 10, 2), vec![0..10, 8..18, 16..26]);
        assert_eq!(window_ranges(4, 10, 2), vec![0..4]);
        assert_eq!(window_ranges(11, 10, 2), vec![0..10, 8..11]);
        for n in 1..60 {
            let w = window_ranges(n, 10, 2);
            let expect = if n <= 10 { 1 } else { 1 + (n - 10).div_ceil(8) };
            assert_eq!(w.len(), expect);
            assert_eq!(w.last().unwrap().end, n);
        }
    }

    #[test]
    fn loss_terms_vanish_where_expected() {
        let f = field();
        let code = Array1::from_shape_fn(EXPRESSION_DIM, |k| ((k % 5) as f64 - 2.0) * 0.01);
        let d = f.deformer(code.view()).unwrap();
        let pts = f.surface_samples(&d, 30, SurfaceRegion::Face, &mut rng::keyed(3, &[]));
        let codes = Array2::from_shape_fn((3, EXPRESSION_DIM), |(_, k)| code[k]);
        let w = LossWeights {
            sdf: 10.0,
            temp: 0.1,
            reg: 0.0025,
            huber_delta: 1.0,
        };
        let l = window_loss(&f, &codes, &vec![pts; 3], &w).unwrap();
        assert!(l.sdf < 1e-4);
        assert_eq!(l.temp, 0.0);
    }

    #[test]
    fn regularizer_alone_pulls_codes_to_zero() {
        let f = field();
        let pts = vec![vec![[0.0, 0.0, 0.6]]; 2];
        let w = LossWeights {
            sdf: 0.0,
            temp: 0.0,
            reg: 1.0,
            huber_delta: 1.0,
        };
        let mut codes = Array2::from_elem((2, EXPRESSION_DIM), 0.05);
        for _ in 0..200 {
            let (_, g) = window_loss_gradient(&f, &codes, &pts, &w).unwrap();
            codes.scaled_add(-0.005, &g);
        }
        assert!(codes.iter().all(|v| v.abs() < 0.01));
    }

    #[test]
    fn huber_pieces() {
        assert_eq!(huber(0.5, 1.0), 0.125);
        assert_eq!(huber(3.0, 1.0), 2.5);
        assert_eq!(huber_grad(-3.0, 1.0), -1.0);
    }

    #[test]
    fn point_cloud_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clouds.bin");
        let frames = vec![
            PointCloudFrame {
                points: vec![[0.25f32, -0.5, 1.0], [0.0, 0.0, 0.0]],
            },
            PointCloudFrame {
                points: vec![[1.5, 2.5, -3.5]],
            },
        ];
        write_point_clouds(&path, &frames).unwrap();
        assert_eq!(read_point_clouds::<f32>(&path).unwrap(), frames);
    }
}
