//! Diffusion noise schedule and the closed-form DDPM / DDIM transitions.
//!
//! Steps are indexed `t = 1..=T` with the convention `alpha_bar(0) = 1`.
//! All state transitions work elementwise on flat `f64` slices, so a batch
//! of views is just the concatenation of their pixel buffers.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    /// Length `T + 1`; index 0 holds 1.
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas interpolated linearly from `beta_start` to `beta_end` over `steps`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::param("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::param(format!(
                "beta range must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::param("schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::param(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product up to `t`; `t = 0` gives 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Signal-to-noise ratio `alpha_bar / (1 - alpha_bar)` at step `t`.
    pub fn snr(&self, t: usize) -> f64 {
        let ab = self.alpha_bar(t);
        if ab >= 1.0 {
            f64::INFINITY
        } else {
            ab / (1.0 - ab)
        }
    }

    /// Variance of `x_{t-1} | x_t, x_0`; zero at `t = 1`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_variance_between(t, t - 1)
    }

    /// Posterior variance for a jump `t -> t_prev`, treating the skipped
    /// steps as one step with `alpha = alpha_bar(t) / alpha_bar(t_prev)`.
    pub fn posterior_variance_between(&self, t: usize, t_prev: usize) -> f64 {
        let ab_t = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t_prev);
        let beta = 1.0 - ab_t / ab_prev;
        ((1.0 - ab_prev) / (1.0 - ab_t) * beta).max(0.0)
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            return Err(Error::Step {
                t,
                max: self.num_steps(),
            });
        }
        Ok(())
    }

    /// Uniformly strided reverse timesteps, largest first.
    ///
    /// `T = 1000, steps = 50` gives `1000, 980, ..., 20`; the final jump is
    /// to `t = 0`.
    pub fn strided_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let total = self.num_steps();
        if steps == 0 || steps > total {
            return Err(Error::param(format!(
                "reverse step count {steps} must be in 1..={total}"
            )));
        }
        Ok((0..steps).map(|k| (steps - k) * total / steps).collect())
    }
}

fn check_shapes(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::param(format!(
            "shape mismatch: {} vs {} values",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn forward_diffuse(x0: &[f64], eps: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    check_shapes(x0, eps)?;
    let ab = sched.alpha_bar(t);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| s * x + n * e).collect())
}

/// One-step clean estimate, the algebraic inverse of [`forward_diffuse`].
pub fn one_step_x0(xt: &[f64], eps_hat: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    check_shapes(xt, eps_hat)?;
    let ab = sched.alpha_bar(t);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(xt.iter().zip(eps_hat).map(|(x, e)| (x - n * e) / s).collect())
}

/// Noise implied by a clean estimate: the inverse of [`one_step_x0`] in `eps`.
pub fn implied_noise(xt: &[f64], x0_est: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    check_shapes(xt, x0_est)?;
    let ab = sched.alpha_bar(t);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(xt.iter().zip(x0_est).map(|(x, x0)| (x - s * x0) / n).collect())
}

/// Coefficients `(c_xt, c_x0)` of the posterior mean for the jump `t -> t_prev`.
pub fn posterior_coefficients(sched: &NoiseSchedule, t: usize, t_prev: usize) -> (f64, f64) {
    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t_prev);
    let alpha = ab_t / ab_prev;
    let beta = 1.0 - alpha;
    let denom = 1.0 - ab_t;
    (
        alpha.sqrt() * (1.0 - ab_prev) / denom,
        ab_prev.sqrt() * beta / denom,
    )
}

/// Mean of `q(x_{t-1} | x_t, x_0)` with `x_0` replaced by an estimate.
pub fn posterior_mean(xt: &[f64], x0_est: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    posterior_mean_between(xt, x0_est, t, t - 1, sched)
}

/// Posterior mean for a strided jump `t -> t_prev` (reduces to
/// [`posterior_mean`] for `t_prev = t - 1`).
pub fn posterior_mean_between(
    xt: &[f64],
    x0_est: &[f64],
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    if t_prev >= t {
        return Err(Error::param(format!("t_prev {t_prev} must be below t {t}")));
    }
    check_shapes(xt, x0_est)?;
    let (cx, c0) = posterior_coefficients(sched, t, t_prev);
    Ok(xt.iter().zip(x0_est).map(|(x, x0)| cx * x + c0 * x0).collect())
}

/// Ancestral DDPM step `t -> t - 1`.
pub fn ddpm_step<R: Rng + ?Sized>(
    xt: &[f64],
    x0_est: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    ddpm_step_between(xt, x0_est, t, t - 1, sched, rng)
}

/// Ancestral DDPM step over a strided jump.
pub fn ddpm_step_between<R: Rng + ?Sized>(
    xt: &[f64],
    x0_est: &[f64],
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut mean = posterior_mean_between(xt, x0_est, t, t_prev, sched)?;
    let var = sched.posterior_variance_between(t, t_prev);
    if var > 0.0 {
        let sd = var.sqrt();
        for m in &mut mean {
            let z: f64 = rng.sample(StandardNormal);
            *m += sd * z;
        }
    }
    Ok(mean)
}

/// Deterministic DDIM update (`eta = 0`) from `t` to `t_prev`.
pub fn ddim_step(
    xt: &[f64],
    x0_est: &[f64],
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    if t_prev >= t {
        return Err(Error::param(format!("t_prev {t_prev} must be below t {t}")));
    }
    check_shapes(xt, x0_est)?;
    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t_prev);
    let (s_t, n_t) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (s_p, n_p) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    Ok(xt
        .iter()
        .zip(x0_est)
        .map(|(x, x0)| {
            let eps = (x - s_t * x0) / n_t;
            s_p * x0 + n_p * eps
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn default_schedule() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn linear_schedule_endpoints() {
        let s = default_schedule();
        assert_eq!(s.num_steps(), 1000);
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
        // Cumulative product evaluated with 50-digit arithmetic: 4.0358e-5.
        assert!((s.alpha_bar(1000) - 4.035_829_765e-5).abs() < 1e-12);
        let single = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(single.betas(), &[0.5]);
        assert_eq!(single.alpha_bar(1), 0.5);
    }

    #[test]
    fn invalid_ranges_rejected() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn schedule_invariants() {
        let s = default_schedule();
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=s.num_steps() {
            assert_eq!(s.alpha(t), 1.0 - s.beta(t));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(s.alpha_bar(1000) > 0.0);
        assert_eq!(s.posterior_variance(1), 0.0);
        for t in 2..=s.num_steps() {
            assert!(s.posterior_variance(t) > 0.0);
        }
    }

    #[test]
    fn out_of_range_step() {
        let s = default_schedule();
        let x = vec![0.0; 4];
        assert!(matches!(
            forward_diffuse(&x, &x, 0, &s),
            Err(Error::Step { t: 0, max: 1000 })
        ));
        assert!(forward_diffuse(&x, &x, 1001, &s).is_err());
        assert!(forward_diffuse(&x, &x[..3], 5, &s).is_err());
    }

    #[test]
    fn forward_special_cases() {
        let s = default_schedule();
        let x0 = vec![0.3, -0.7, 1.0];
        let zero = vec![0.0; 3];
        let t = 400;
        let sq = s.alpha_bar(t).sqrt();
        let out = forward_diffuse(&x0, &zero, t, &s).unwrap();
        for (o, x) in out.iter().zip(&x0) {
            assert_eq!(*o, sq * x);
        }
        let eps = vec![1.0, 2.0, -1.0];
        let out = forward_diffuse(&zero, &eps, t, &s).unwrap();
        let nq = (1.0 - s.alpha_bar(t)).sqrt();
        for (o, e) in out.iter().zip(&eps) {
            assert_eq!(*o, nq * e);
        }
    }

    #[test]
    fn forward_at_quarter_alpha_bar() {
        // Two steps with alpha = 0.5 give alpha_bar = 0.25.
        let s = NoiseSchedule::from_betas(vec![0.5, 0.5]).unwrap();
        assert_eq!(s.alpha_bar(2), 0.25);
        let out = forward_diffuse(&[1.0; 4], &[1.0; 4], 2, &s).unwrap();
        for v in out {
            assert!((v - (0.5 + 0.75f64.sqrt())).abs() < 1e-15);
        }
    }

    #[test]
    fn one_step_inverse() {
        let s = default_schedule();
        let x0 = vec![0.25, -0.5, 0.9];
        let eps = vec![0.1, -1.3, 2.2];
        let xt = forward_diffuse(&x0, &eps, 700, &s).unwrap();
        let back = one_step_x0(&xt, &eps, 700, &s).unwrap();
        for (a, b) in back.iter().zip(&x0) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
        let zero = vec![0.0; 3];
        let plain = one_step_x0(&xt, &zero, 700, &s).unwrap();
        let sq = s.alpha_bar(700).sqrt();
        for (p, x) in plain.iter().zip(&xt) {
            assert_eq!(*p, x / sq);
        }
    }

    #[test]
    fn posterior_mean_noise_free_identity() {
        let s = default_schedule();
        let x0 = vec![0.5, -0.25];
        for t in [2usize, 10, 500, 1000] {
            let sq = s.alpha_bar(t).sqrt();
            let xt: Vec<f64> = x0.iter().map(|v| sq * v).collect();
            let m = posterior_mean(&xt, &x0, t, &s).unwrap();
            let expect = s.alpha_bar(t - 1).sqrt();
            for (mi, xi) in m.iter().zip(&x0) {
                assert!((mi - expect * xi).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn posterior_mean_at_first_step_is_estimate() {
        let s = default_schedule();
        let xt = vec![3.0, -2.0];
        let x0 = vec![0.1, 0.2];
        let m = posterior_mean(&xt, &x0, 1, &s).unwrap();
        assert_eq!(m, x0);
    }

    #[test]
    fn posterior_mean_matches_direct_formula() {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let t = rng.random_range(2..=1000usize);
            let xt: f64 = rng.random_range(-3.0..3.0);
            let x0: f64 = rng.random_range(-1.0..1.0);
            let a = 1.0 - s.betas()[t - 1];
            let ab: f64 = s.betas()[..t].iter().map(|b| 1.0 - b).product();
            let ab_prev = ab / a;
            let direct = a.sqrt() * (1.0 - ab_prev) / (1.0 - ab) * xt
                + ab_prev.sqrt() * (1.0 - a) / (1.0 - ab) * x0;
            let got = posterior_mean(&[xt], &[x0], t, &s).unwrap()[0];
            assert!((got - direct).abs() < 1e-12 * direct.abs().max(1.0), "t={t}");
        }
    }

    #[test]
    fn ddpm_first_step_is_deterministic_mean() {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let out = ddpm_step(&[1.0, 2.0], &[0.3, 0.4], 1, &s, &mut rng).unwrap();
        assert_eq!(out, vec![0.3, 0.4]);
    }

    #[test]
    fn ddpm_seeded_reproducible() {
        let s = default_schedule();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            ddpm_step(&[0.5; 8], &[0.1; 8], 300, &s, &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn ddpm_empirical_variance() {
        let s = default_schedule();
        let t = 250;
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xt = vec![0.4; n];
        let x0 = vec![-0.2; n];
        let draws = ddpm_step(&xt, &x0, t, &s, &mut rng).unwrap();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let expect = s.posterior_variance(t);
        assert!((var / expect - 1.0).abs() < 0.05, "var {var} vs {expect}");
    }

    #[test]
    fn ddim_limits() {
        let s = default_schedule();
        let xt = vec![0.7, -1.2];
        let x0 = vec![0.1, 0.3];
        assert_eq!(ddim_step(&xt, &x0, 500, 0, &s).unwrap(), x0);
        assert!(ddim_step(&xt, &x0, 500, 500, &s).is_err());

        // On a noise-free trajectory with the true noise the update stays on it.
        let eps = vec![0.5, -0.8];
        let x500 = forward_diffuse(&x0, &eps, 500, &s).unwrap();
        let x480 = ddim_step(&x500, &x0, 500, 480, &s).unwrap();
        let expect = forward_diffuse(&x0, &eps, 480, &s).unwrap();
        for (a, b) in x480.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_matches_independent_formula() {
        let s = default_schedule();
        let (t, tp) = (600usize, 599usize);
        let (xt, x0) = (0.8f64, -0.3f64);
        let ab_t = s.alpha_bar(t);
        let ab_p = s.alpha_bar(tp);
        // Rearranged: x_prev = c1 * xt + c2 * x0.
        let c1 = ((1.0 - ab_p) / (1.0 - ab_t)).sqrt();
        let c2 = ab_p.sqrt() - c1 * ab_t.sqrt();
        let got = ddim_step(&[xt], &[x0], t, tp, &s).unwrap()[0];
        assert!((got - (c1 * xt + c2 * x0)).abs() < 1e-12);
    }

    #[test]
    fn strided_timesteps_fifty_of_thousand() {
        let s = default_schedule();
        let ts = s.strided_timesteps(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 1000);
        assert_eq!(ts[1], 980);
        assert_eq!(*ts.last().unwrap(), 20);
        assert!(ts.windows(2).all(|w| w[0] - w[1] == 20));
        assert_eq!(s.strided_timesteps(1).unwrap(), vec![1000]);
        assert!(s.strided_timesteps(0).is_err());
        assert!(s.strided_timesteps(1001).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_identity(x0 in -1.0f64..1.0, eps in -4.0f64..4.0, t in 1usize..=1000) {
            let s = default_schedule();
            let xt = forward_diffuse(&[x0], &[eps], t, &s).unwrap();
            let back = one_step_x0(&xt, &[eps], t, &s).unwrap()[0];
            prop_assert!((back - x0).abs() <= 1e-9 * x0.abs().max(1e-3) + 1e-12);
        }
    }
}
