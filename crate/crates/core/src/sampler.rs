//! Ancestral sampling with classifier-free guidance, and head generation.

use ndarray::{Array2, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::condstream::ConditioningStream;
use crate::denoiser::Denoise;
use crate::error::{Error, Result};
use crate::headfield::{BoundField, SmoothingKernel, EXPRESSION_DIM};
use crate::mesher::{evaluate_grid, grid_smoothing_weights, marching_cubes, GridSpec, Mesh};
use crate::rng;
use crate::scalar::Real;
use crate::schedule::{posterior_step, NoiseSchedule, NoisySequence};

/// Which predictions feed each reverse step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Guidance {
    /// `w * conditional + (1 - w) * unconditional`.
    Weighted(f64),
    /// Conditional prediction only; the unconditional pass is skipped.
    ConditionalOnly,
    /// Unconditional prediction only.
    UnconditionalOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub guidance: Guidance,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            guidance: Guidance::Weighted(1.0),
            seed: rng::DEFAULT_SEED,
        }
    }
}

/// `w * x_c + (1 - w) * x_u`; `w = 1` and `w = 0` return the corresponding
/// input unchanged.
pub fn cfg_combine<T: Real>(x_c: &Array2<T>, x_u: &Array2<T>, w: f64) -> Result<Array2<T>> {
    if x_c.dim() != x_u.dim() {
        return Err(Error::Dimension(format!(
            "conditional {:?} vs unconditional {:?}",
            x_c.dim(),
            x_u.dim()
        )));
    }
    if w == 1.0 {
        return Ok(x_c.clone());
    }
    if w == 0.0 {
        return Ok(x_u.clone());
    }
    let (wc, wu) = (T::lit(w), T::lit(1.0 - w));
    let mut out = Array2::zeros(x_c.dim());
    Zip::from(&mut out)
        .and(x_c)
        .and(x_u)
        .for_each(|o, &c, &u| *o = wc * c + wu * u);
    Ok(out)
}

/// Generate one code sequence as long as `cond`.
pub fn sample<T: Real, D: Denoise<T> + ?Sized>(
    model: &D,
    cond: &ConditioningStream<T>,
    config: &SampleConfig,
    sched: &NoiseSchedule<T>,
) -> Result<Array2<T>> {
    let n = cond.len();
    if n == 0 {
        return Err(Error::InvalidConfig("conditioning has no frames".into()));
    }
    if let Guidance::Weighted(w) = config.guidance {
        if !w.is_finite() {
            return Err(Error::InvalidConfig(format!("guidance weight {w} is not finite")));
        }
    }
    let guidance = match config.guidance {
        Guidance::Weighted(w) if w == 1.0 => Guidance::ConditionalOnly,
        g => g,
    };
    let null = model.null_stream(n)?;
    let mut start = rng::keyed(config.seed, &[rng::stream::SAMPLE_START]);
    let mut x = NoisySequence {
        values: rng::normal_matrix(&mut start, n, EXPRESSION_DIM),
        t: sched.steps(),
    };
    while x.t > 0 {
        let t = x.t;
        let x0_hat = match guidance {
            Guidance::ConditionalOnly => model.predict(&x.values, cond, t)?,
            Guidance::UnconditionalOnly => model.predict(&x.values, &null, t)?,
            Guidance::Weighted(w) => {
                let (c, u) = rayon::join(
                    || model.predict(&x.values, cond, t),
                    || model.predict(&x.values, &null, t),
                );
                cfg_combine(&c?, &u?, w)?
            }
        };
        let mut step_rng = rng::keyed(config.seed, &[rng::stream::SAMPLE_STEP, t as u64]);
        let noise = rng::normal_matrix(&mut step_rng, n, EXPRESSION_DIM);
        x = posterior_step(&x, &x0_hat, &noise, sched)?;
        if x.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite sample after step {t}")));
        }
    }
    Ok(x.values)
}

/// One mesh per code row. Smoothing weights are computed once for the grid
/// and shared by every frame.
pub fn meshes_for_codes<T: Real>(
    field: &BoundField<T>,
    codes: &Array2<T>,
    grid: &GridSpec,
    kernel: Option<&SmoothingKernel>,
) -> Result<Vec<Mesh<T>>> {
    let weights = kernel.map(|k| grid_smoothing_weights::<T>(k, grid)).transpose()?;
    (0..codes.nrows())
        .into_par_iter()
        .map(|i| {
            let values = evaluate_grid(field, codes.row(i), grid, weights.as_deref())?;
            marching_cubes(&values, T::zero())
        })
        .collect()
}

/// Sample codes for `cond` and mesh every frame.
#[allow(clippy::too_many_arguments)]
pub fn generate_heads<T: Real, D: Denoise<T> + ?Sized>(
    model: &D,
    cond: &ConditioningStream<T>,
    config: &SampleConfig,
    sched: &NoiseSchedule<T>,
    field: &BoundField<T>,
    grid: &GridSpec,
    kernel: Option<&SmoothingKernel>,
) -> Result<(Array2<T>, Vec<Mesh<T>>)> {
    let codes = sample(model, cond, config, sched)?;
    let meshes = meshes_for_codes(field, &codes, grid, kernel)?;
    Ok((codes, meshes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condstream::null_stream;
    use ndarray::Array1;

    /// Always predicts the same clean sequence.
    struct Constant(Array2<f64>);

    impl Denoise<f64> for Constant {
        fn predict(&self, _: &Array2<f64>, _: &ConditioningStream<f64>, _: usize) -> Result<Array2<f64>> {
            Ok(self.0.clone())
        }

        fn null_stream(&self, n: usize) -> Result<ConditioningStream<f64>> {
            null_stream(n, Array1::zeros(2).view())
        }
    }

    /// Conditional branch returns `a`, unconditional branch returns `b`.
    struct Split(f64, f64);

    impl Denoise<f64> for Split {
        fn predict(&self, x: &Array2<f64>, c: &ConditioningStream<f64>, _: usize) -> Result<Array2<f64>> {
            let v = if c.is_null() { self.1 } else { self.0 };
            Ok(Array2::from_elem(x.dim(), v))
        }

        fn null_stream(&self, n: usize) -> Result<ConditioningStream<f64>> {
            null_stream(n, Array1::zeros(2).view())
        }
    }

    fn cond(n: usize) -> ConditioningStream<f64> {
        ConditioningStream::audio(Array2::ones((n, 2)))
    }

    #[test]
    fn cfg_combine_examples() {
        let c = Array2::from_elem((2, 3), 1.0);
        let u = Array2::from_elem((2, 3), 0.0);
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
        assert!(cfg_combine(&c, &u, 2.0).unwrap().iter().all(|&v| v == 2.0));
        assert!(cfg_combine(&c, &Array2::zeros((3, 3)), 0.5).is_err());
    }

    #[test]
    fn constant_oracle_is_reproduced() {
        let target = Array2::from_shape_fn((6, EXPRESSION_DIM), |(i, j)| ((i * 7 + j) % 11) as f64 * 0.1 - 0.5);
        let sched = NoiseSchedule::default_cosine();
        let out = sample(&Constant(target.clone()), &cond(6), &SampleConfig::default(), &sched).unwrap();
        assert_eq!(out, target);
    }

    #[test]
    fn guidance_one_ignores_unconditional_branch() {
        let sched = NoiseSchedule::<f64>::cosine(50, 0.008).unwrap();
        let a = SampleConfig {
            guidance: Guidance::Weighted(1.0),
            seed: 4,
        };
        let b = SampleConfig {
            guidance: Guidance::ConditionalOnly,
            seed: 4,
        };
        let x = sample(&Split(0.3, f64::NAN), &cond(5), &a, &sched).unwrap();
        let y = sample(&Split(0.3, -7.0), &cond(5), &b, &sched).unwrap();
        assert_eq!(x, y);
        let w2 = SampleConfig {
            guidance: Guidance::Weighted(2.0),
            seed: 4,
        };
        let z = sample(&Split(1.0, 0.0), &cond(5), &w2, &sched).unwrap();
        assert!(z.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn output_length_follows_conditioning() {
        let sched = NoiseSchedule::<f64>::cosine(10, 0.008).unwrap();
        let out = sample(&Split(0.0, 0.0), &cond(120), &SampleConfig::default(), &sched).unwrap();
        assert_eq!(out.dim(), (120, EXPRESSION_DIM));
    }
}
