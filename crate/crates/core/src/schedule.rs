//! Cosine noise schedule, forward noising and the ancestral reverse step.

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Offset used by the default cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Number of diffusion steps used for training and sampling.
pub const DEFAULT_STEPS: usize = 1000;

/// Cumulative signal coefficients `alpha_bar[0..=T]` and the per-step
/// quantities derived from them.
#[derive(Debug, Clone)]
pub struct NoiseSchedule<T> {
    alpha_bar: Vec<T>,
    alpha: Vec<T>,
    beta: Vec<T>,
    posterior_variance: Vec<T>,
    coef_x0: Vec<T>,
    coef_xt: Vec<T>,
}

impl<T: Real> NoiseSchedule<T> {
    /// `alpha_bar[t] = f(t) / f(0)` with `f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2)`.
    pub fn cosine(steps: usize, offset: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidConfig("schedule needs at least one step".into()));
        }
        if !(offset > 0.0) || !offset.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "cosine offset must be positive, got {offset}"
            )));
        }
        let f = |t: usize| {
            let x = ((t as f64 / steps as f64 + offset) / (1.0 + offset)) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let f0 = f(0);
        let alpha_bar: Vec<f64> = (0..=steps)
            .map(|t| if t == 0 { 1.0 } else { f(t) / f0 })
            .collect();
        Self::from_alpha_bar(&alpha_bar)
    }

    pub fn default_cosine() -> Self {
        Self::cosine(DEFAULT_STEPS, COSINE_OFFSET).expect("default schedule is valid")
    }

    fn from_alpha_bar(alpha_bar: &[f64]) -> Result<Self> {
        let steps = alpha_bar.len() - 1;
        let mut alpha = vec![1.0; steps + 1];
        let mut beta = vec![0.0; steps + 1];
        let mut post_var = vec![0.0; steps + 1];
        let mut coef_x0 = vec![1.0; steps + 1];
        let mut coef_xt = vec![0.0; steps + 1];
        for t in 1..=steps {
            let a = alpha_bar[t] / alpha_bar[t - 1];
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::Numerical(format!("alpha_{t} = {a} outside (0, 1)")));
            }
            alpha[t] = a;
            beta[t] = 1.0 - a;
            let denom = 1.0 - alpha_bar[t];
            coef_x0[t] = alpha_bar[t - 1].sqrt() * beta[t] / denom;
            coef_xt[t] = a.sqrt() * (1.0 - alpha_bar[t - 1]) / denom;
            post_var[t] = if t == 1 {
                0.0
            } else {
                beta[t] * (1.0 - alpha_bar[t - 1]) / denom
            };
        }
        let cast = |v: Vec<f64>| v.into_iter().map(T::lit).collect::<Vec<T>>();
        Ok(Self {
            alpha_bar: cast(alpha_bar.to_vec()),
            alpha: cast(alpha),
            beta: cast(beta),
            posterior_variance: cast(post_var),
            coef_x0: cast(coef_x0),
            coef_xt: cast(coef_xt),
        })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bars(&self) -> &[T] {
        &self.alpha_bar
    }

    pub fn alpha_bar(&self, t: usize) -> T {
        self.alpha_bar[t]
    }

    pub fn alpha(&self, t: usize) -> T {
        self.alpha[t]
    }

    pub fn beta(&self, t: usize) -> T {
        self.beta[t]
    }

    /// `beta_t (1 - alpha_bar[t-1]) / (1 - alpha_bar[t])`, zero at `t = 1`.
    pub fn posterior_variance(&self, t: usize) -> T {
        self.posterior_variance[t]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::InvalidStep {
                step: t,
                steps: self.steps(),
            });
        }
        Ok(())
    }
}

/// A code sequence together with the diffusion step it was noised to.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisySequence<T> {
    pub values: Array2<T>,
    pub t: usize,
}

fn same_shape<T>(a: &Array2<T>, b: &Array2<T>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!(
            "{what}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Sample `q(x_t | x_0)`: `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_noise<T: Real>(
    x0: &Array2<T>,
    t: usize,
    eps: &Array2<T>,
    sched: &NoiseSchedule<T>,
) -> Result<NoisySequence<T>> {
    same_shape(x0, eps, "forward_noise")?;
    sched.check_step(t)?;
    if t == 0 {
        return Ok(NoisySequence {
            values: x0.clone(),
            t,
        });
    }
    let ab = sched.alpha_bar(t);
    let (signal, noise) = (ab.sqrt(), (T::one() - ab).sqrt());
    let mut values = Array2::zeros(x0.dim());
    Zip::from(&mut values)
        .and(x0)
        .and(eps)
        .for_each(|v, &x, &e| *v = signal * x + noise * e);
    Ok(NoisySequence { values, t })
}

/// Mean squared error over every entry.
pub fn diffusion_loss<T: Real>(x0: &Array2<T>, x0_hat: &Array2<T>) -> Result<T> {
    same_shape(x0, x0_hat, "diffusion_loss")?;
    let n = x0.len();
    if n == 0 {
        return Ok(T::zero());
    }
    let sum: T = x0
        .iter()
        .zip(x0_hat.iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(sum / T::from_count(n))
}

/// One ancestral step `x_t -> x_{t-1}` of the posterior `q(x_{t-1} | x_t, x0_hat)`.
pub fn posterior_step<T: Real>(
    x_t: &NoisySequence<T>,
    x0_hat: &Array2<T>,
    noise: &Array2<T>,
    sched: &NoiseSchedule<T>,
) -> Result<NoisySequence<T>> {
    let t = x_t.t;
    if t == 0 {
        return Err(Error::InvalidStep {
            step: 0,
            steps: sched.steps(),
        });
    }
    sched.check_step(t)?;
    same_shape(&x_t.values, x0_hat, "posterior_step")?;
    same_shape(&x_t.values, noise, "posterior_step noise")?;
    if t == 1 {
        // alpha_bar_0 = 1 collapses the posterior onto x0_hat with zero variance.
        return Ok(NoisySequence {
            values: x0_hat.clone(),
            t: 0,
        });
    }
    let (c0, ct) = (sched.coef_x0[t], sched.coef_xt[t]);
    let sigma = sched.posterior_variance(t).sqrt();
    let mut values = Array2::zeros(x0_hat.dim());
    Zip::from(&mut values)
        .and(x0_hat)
        .and(&x_t.values)
        .and(noise)
        .for_each(|v, &x0, &xt, &z| *v = c0 * x0 + ct * xt + sigma * z);
    Ok(NoisySequence { values, t: t - 1 })
}

/// Posterior mean only (the `noise = 0` case of [`posterior_step`]).
pub fn posterior_mean<T: Real>(
    x_t: &NoisySequence<T>,
    x0_hat: &Array2<T>,
    sched: &NoiseSchedule<T>,
) -> Result<Array2<T>> {
    let zeros = Array2::zeros(x0_hat.dim());
    posterior_step(x_t, x0_hat, &zeros, sched).map(|s| s.values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::Array2;

    #[test]
    fn rejects_bad_configuration() {
        assert!(NoiseSchedule::<f64>::cosine(0, 0.008).is_err());
        assert!(NoiseSchedule::<f64>::cosine(10, 0.0).is_err());
        assert!(NoiseSchedule::<f64>::cosine(10, -1.0).is_err());
    }

    #[test]
    fn cosine_endpoints_and_monotonicity() {
        let s = NoiseSchedule::<f64>::cosine(1000, COSINE_OFFSET).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.alpha_bar(1000) <= 1e-3);
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1), "not decreasing at {t}");
            assert!(s.alpha(t) > 0.0 && s.alpha(t) < 1.0);
        }
        assert_eq!(NoiseSchedule::<f32>::cosine(2, 0.3).unwrap().alpha_bars().len(), 3);
    }

    #[test]
    fn cosine_matches_closed_form() {
        let s = NoiseSchedule::<f64>::cosine(50, 0.008).unwrap();
        let f = |t: f64| (((t / 50.0 + 0.008) / 1.008) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        for t in 0..=50 {
            assert!((s.alpha_bar(t) - f(t as f64) / f(0.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_noise_endpoints() {
        let s = NoiseSchedule::<f64>::default_cosine();
        let mut r = rng::keyed(1, &[]);
        let x0 = rng::normal_matrix::<f64, _>(&mut r, 4, 6);
        let eps = rng::normal_matrix::<f64, _>(&mut r, 4, 6);
        assert_eq!(forward_noise(&x0, 0, &eps, &s).unwrap().values, x0);
        let zero = Array2::zeros((4, 6));
        let xt = forward_noise(&zero, 1000, &eps, &s).unwrap();
        let k = (1.0 - s.alpha_bar(1000)).sqrt();
        for (a, e) in xt.values.iter().zip(eps.iter()) {
            assert_eq!(*a, k * e);
        }
        assert!(forward_noise(&x0, 1001, &eps, &s).is_err());
        assert!(forward_noise(&x0, 3, &Array2::zeros((4, 5)), &s).is_err());
    }

    #[test]
    fn forward_noise_is_affine() {
        let s = NoiseSchedule::<f64>::default_cosine();
        let mut r = rng::keyed(2, &[]);
        let (x1, x2) = (rng::normal_matrix::<f64, _>(&mut r, 3, 5), rng::normal_matrix::<f64, _>(&mut r, 3, 5));
        let (e1, e2) = (rng::normal_matrix::<f64, _>(&mut r, 3, 5), rng::normal_matrix::<f64, _>(&mut r, 3, 5));
        let t = 321;
        let a = forward_noise(&x1, t, &e1, &s).unwrap().values;
        let b = forward_noise(&x2, t, &e2, &s).unwrap().values;
        let mix = forward_noise(&(&x1 * 0.3 + &x2 * 0.7), t, &(&e1 * 0.3 + &e2 * 0.7), &s).unwrap().values;
        let expect = &a * 0.3 + &b * 0.7;
        for (m, e) in mix.iter().zip(expect.iter()) {
            assert!((m - e).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_values() {
        let x = Array2::<f64>::zeros((2, 200));
        assert_eq!(diffusion_loss(&x, &x).unwrap(), 0.0);
        assert_eq!(diffusion_loss(&x, &Array2::ones((2, 200))).unwrap(), 1.0);
        let mut r = rng::keyed(3, &[]);
        let a = rng::normal_matrix::<f64, _>(&mut r, 3, 200);
        let b = rng::normal_matrix::<f64, _>(&mut r, 3, 200);
        let mut brute = 0.0;
        for i in 0..3 {
            for j in 0..200 {
                brute += (a[[i, j]] - b[[i, j]]).powi(2);
            }
        }
        assert!((diffusion_loss(&a, &b).unwrap() - brute / 600.0).abs() < 1e-12);
        assert!(diffusion_loss(&a, &Array2::zeros((3, 199))).is_err());
    }

    #[test]
    fn posterior_step_final_and_mean() {
        let s = NoiseSchedule::<f64>::default_cosine();
        let mut r = rng::keyed(4, &[]);
        let xt = rng::normal_matrix::<f64, _>(&mut r, 3, 7);
        let x0 = rng::normal_matrix::<f64, _>(&mut r, 3, 7);
        let z = rng::normal_matrix::<f64, _>(&mut r, 3, 7);
        let out = posterior_step(&NoisySequence { values: xt.clone(), t: 1 }, &x0, &z, &s).unwrap();
        assert_eq!(out.t, 0);
        assert_eq!(out.values, x0);

        let t = 400;
        let noisy = NoisySequence { values: xt.clone(), t };
        let mean = posterior_mean(&noisy, &x0, &s).unwrap();
        let ab_prev = s.alpha_bar(t - 1);
        let ab = s.alpha_bar(t);
        let c0 = ab_prev.sqrt() * s.beta(t) / (1.0 - ab);
        let ct = s.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        for ((m, a), b) in mean.iter().zip(x0.iter()).zip(xt.iter()) {
            assert!((m - (c0 * a + ct * b)).abs() < 1e-12);
        }
        assert!(posterior_step(&NoisySequence { values: xt, t: 0 }, &x0, &z, &s).is_err());
    }

    #[test]
    fn constant_prediction_reverse_loop_lands_on_target() {
        let s = NoiseSchedule::<f64>::default_cosine();
        let mut r = rng::keyed(5, &[]);
        let target = rng::normal_matrix::<f64, _>(&mut r, 4, 10);
        let mut x = NoisySequence {
            values: rng::normal_matrix::<f64, _>(&mut r, 4, 10),
            t: s.steps(),
        };
        while x.t > 0 {
            let z = rng::normal_matrix::<f64, _>(&mut r, 4, 10);
            x = posterior_step(&x, &target, &z, &s).unwrap();
        }
        // The last step has zero variance, so the floor is exactly zero.
        let floor = 3.0 * s.posterior_variance(1).sqrt();
        for (a, b) in x.values.iter().zip(target.iter()) {
            assert!((a - b).abs() <= floor);
        }
    }
}
