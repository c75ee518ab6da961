//! Noise schedules and the closed-form DDPM identities: forward noising,
//! clean-sample estimation and the Gaussian posterior `q(x_{t-1} | x_t, x_0)`.
//!
//! Steps are indexed `1..=T`. `alpha_bar(0)` is defined as 1 so the `t = 1`
//! posterior collapses to a point mass on the clean estimate.

use crate::error::{Error, Result};
use crate::field::Field;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit variances, in step order `1..=T`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::param("T", format!("need at least 2 steps, got {}", betas.len())));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::param("beta", format!("{b} is outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
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

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product of `alpha` up to `t`; 1 at `t = 0`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepRange {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    /// Posterior variance `(1 - abar_{t-1}) / (1 - abar_t) * beta_t`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }

    /// The two posterior-mean coefficients, on the clean estimate and on `x_t`.
    pub fn posterior_coefficients(&self, t: usize) -> (f64, f64) {
        if t == 1 {
            // 1 - alpha_bar_1 and beta_1 differ by rounding; the exact limit is (1, 0).
            return (1.0, 0.0);
        }
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let denom = 1.0 - ab;
        (
            ab_prev.sqrt() * self.beta(t) / denom,
            self.alpha(t).sqrt() * (1.0 - ab_prev) / denom,
        )
    }
}

/// Betas rising linearly from `beta_1` at step 1 to `beta_t` at step `steps`.
pub fn linear_schedule(steps: usize, beta_1: f64, beta_t: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::param("T", format!("need T >= 2, got {steps}")));
    }
    if !(beta_1 > 0.0) {
        return Err(Error::param("beta_1", format!("{beta_1} must be > 0")));
    }
    if !(beta_t < 1.0) {
        return Err(Error::param("beta_T", format!("{beta_t} must be < 1")));
    }
    if beta_1 > beta_t {
        return Err(Error::param(
            "beta_1",
            format!("{beta_1} exceeds beta_T = {beta_t}"),
        ));
    }
    let span = (beta_t - beta_1) / (steps - 1) as f64;
    let betas = (0..steps).map(|i| beta_1 + i as f64 * span).collect();
    NoiseSchedule::from_betas(betas)
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise`. Step 0 returns `x0`.
pub fn forward_sample(schedule: &NoiseSchedule, x0: &Field, t: usize, noise: &Field) -> Result<Field> {
    if t > schedule.steps() {
        return Err(Error::StepRange {
            t,
            max: schedule.steps(),
        });
    }
    x0.check_same_shape(noise)?;
    let ab = schedule.alpha_bar(t);
    Ok(x0.lin_comb(ab.sqrt(), noise, (1.0 - ab).sqrt()))
}

/// Inverts the forward map given a noise estimate.
pub fn estimate_x0(schedule: &NoiseSchedule, x_t: &Field, t: usize, eps_hat: &Field) -> Result<Field> {
    schedule.check_step(t)?;
    x_t.check_same_shape(eps_hat)?;
    let sab = schedule.alpha_bar(t).sqrt();
    let s1m = (1.0 - schedule.alpha_bar(t)).sqrt();
    Ok(x_t.lin_comb(1.0 / sab, eps_hat, -s1m / sab))
}

/// Mean and variance of `q(x_{t-1} | x_t, x_0 = x_tilde0)`.
pub fn posterior_stats(
    schedule: &NoiseSchedule,
    x_tilde0: &Field,
    x_t: &Field,
    t: usize,
) -> Result<(Field, f64)> {
    schedule.check_step(t)?;
    x_tilde0.check_same_shape(x_t)?;
    let (c0, ct) = schedule.posterior_coefficients(t);
    Ok((x_tilde0.lin_comb(c0, x_t, ct), schedule.posterior_variance(t)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Units;
    use crate::rng::{normal_field, seeded};

    fn paper_schedule() -> NoiseSchedule {
        linear_schedule(1000, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn linear_endpoints() {
        let s = paper_schedule();
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
        assert!(s.betas().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn two_step_constant() {
        let s = linear_schedule(2, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(2), 0.25);
    }

    #[test]
    fn alpha_bar_matches_separate_product() {
        let s = linear_schedule(10, 1e-4, 0.02).unwrap();
        let mut prod = 1.0;
        for i in 0..10 {
            let beta = 1e-4 + i as f64 * (0.02 - 1e-4) / 9.0;
            prod *= 1.0 - beta;
        }
        assert!((s.alpha_bar(10) - prod).abs() <= 1e-15 * prod.abs().max(1.0));
    }

    #[test]
    fn schedule_invariants() {
        let s = paper_schedule();
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=s.steps() {
            let rel = (s.alpha(t) * s.alpha_bar(t - 1) - s.alpha_bar(t)).abs() / s.alpha_bar(t);
            assert!(rel <= 1e-12);
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.posterior_variance(t) <= s.beta(t));
        }
        assert_eq!(s.posterior_variance(1), 0.0);
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(matches!(
            linear_schedule(1, 1e-4, 0.02),
            Err(Error::Parameter { name: "T", .. })
        ));
        assert!(matches!(
            linear_schedule(10, 0.0, 0.02),
            Err(Error::Parameter { name: "beta_1", .. })
        ));
        assert!(matches!(
            linear_schedule(10, 1e-4, 1.0),
            Err(Error::Parameter { name: "beta_T", .. })
        ));
        assert!(matches!(
            linear_schedule(10, 0.1, 0.01),
            Err(Error::Parameter { name: "beta_1", .. })
        ));
    }

    #[test]
    fn step_zero_is_identity_and_zero_signal_is_scaled_noise() {
        let s = paper_schedule();
        let mut rng = seeded(1);
        let x0 = normal_field(&mut rng, 4, 4, Units::Model);
        let noise = normal_field(&mut rng, 4, 4, Units::Model);
        assert_eq!(forward_sample(&s, &x0, 0, &noise).unwrap(), x0);

        let zero = Field::zeros(4, 4, Units::Model);
        let xt = forward_sample(&s, &zero, 500, &noise).unwrap();
        let k = (1.0 - s.alpha_bar(500)).sqrt();
        for (a, b) in xt.values().iter().zip(noise.values()) {
            assert_eq!(*a, k * b);
        }
        assert!(matches!(
            forward_sample(&s, &x0, 1001, &noise),
            Err(Error::StepRange { t: 1001, max: 1000 })
        ));
    }

    #[test]
    fn forward_then_estimate_recovers_x0() {
        let s = paper_schedule();
        let mut rng = seeded(2);
        let x0 = normal_field(&mut rng, 8, 8, Units::Model).clamp(-1.0, 1.0);
        for t in [1, 10, 250, 999, 1000] {
            let noise = normal_field(&mut rng, 8, 8, Units::Model);
            let xt = forward_sample(&s, &x0, t, &noise).unwrap();
            let back = estimate_x0(&s, &xt, t, &noise).unwrap();
            assert!(back.max_abs_diff(&x0) <= 1e-6, "t={t}");
        }
    }

    #[test]
    fn zero_noise_estimate_divides_by_root_alpha_bar() {
        let s = paper_schedule();
        let mut rng = seeded(3);
        let xt = normal_field(&mut rng, 3, 3, Units::Model);
        let zero = Field::zeros(3, 3, Units::Model);
        let est = estimate_x0(&s, &xt, 700, &zero).unwrap();
        let sab = s.alpha_bar(700).sqrt();
        for (a, b) in est.values().iter().zip(xt.values()) {
            assert!((a - b / sab).abs() <= 1e-12 * (b / sab).abs().max(1.0));
        }
    }

    #[test]
    fn recomposition_oracle() {
        let s = paper_schedule();
        let mut rng = seeded(4);
        for t in [1, 77, 500, 1000] {
            let xt = normal_field(&mut rng, 6, 6, Units::Model);
            let eps = normal_field(&mut rng, 6, 6, Units::Model);
            let x0 = estimate_x0(&s, &xt, t, &eps).unwrap();
            let ab = s.alpha_bar(t);
            let re = x0.lin_comb(ab.sqrt(), &eps, (1.0 - ab).sqrt());
            assert!(re.max_abs_diff(&xt) <= 1e-10, "t={t}");
        }
    }

    #[test]
    fn posterior_is_degenerate_at_step_one() {
        let s = paper_schedule();
        let mut rng = seeded(5);
        let x0 = normal_field(&mut rng, 4, 4, Units::Model);
        let xt = normal_field(&mut rng, 4, 4, Units::Model);
        let (mean, var) = posterior_stats(&s, &x0, &xt, 1).unwrap();
        assert_eq!(var, 0.0);
        assert_eq!(mean, x0);
    }

    /// Brute-force Bayes: integrate `q(x_t | x_{t-1}) q(x_{t-1} | x_0)` on a fine grid.
    fn quadrature_posterior(s: &NoiseSchedule, x0: f64, xt: f64, t: usize) -> (f64, f64) {
        let gauss = |x: f64, m: f64, v: f64| (-(x - m) * (x - m) / (2.0 * v)).exp();
        let (lo, hi, n) = (-12.0, 12.0, 240_001);
        let dx = (hi - lo) / (n - 1) as f64;
        let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let x = lo + i as f64 * dx;
            let w = gauss(xt, s.alpha(t).sqrt() * x, s.beta(t))
                * gauss(x, s.alpha_bar(t - 1).sqrt() * x0, 1.0 - s.alpha_bar(t - 1));
            z += w;
            m1 += w * x;
            m2 += w * x * x;
        }
        let mean = m1 / z;
        (mean, m2 / z - mean * mean)
    }

    #[test]
    fn posterior_matches_quadrature() {
        let s = linear_schedule(3, 0.1, 0.5).unwrap();
        for &(x0, xt) in &[(0.3, -0.7), (-1.0, 1.5), (0.0, 0.2)] {
            for t in 2..=3 {
                let f0 = Field::filled(1, 1, x0, Units::Model);
                let ft = Field::filled(1, 1, xt, Units::Model);
                let (mean, var) = posterior_stats(&s, &f0, &ft, t).unwrap();
                let (qm, qv) = quadrature_posterior(&s, x0, xt, t);
                assert!((mean.values()[0] - qm).abs() <= 1e-4, "mean t={t}");
                assert!((var - qv).abs() <= 1e-4, "var t={t}");
            }
        }
    }

    #[test]
    fn coefficient_identity() {
        let s = paper_schedule();
        for t in 1..=s.steps() {
            let (c0, ct) = s.posterior_coefficients(t);
            assert!(c0 >= 0.0 && ct >= 0.0);
            let ab = s.alpha_bar(t);
            let ab_prev = s.alpha_bar(t - 1);
            let summed = (ab_prev.sqrt() * s.beta(t) + s.alpha(t).sqrt() * (1.0 - ab_prev)) / (1.0 - ab);
            assert!((c0 + ct - summed).abs() <= 1e-10);

            let c = 0.37;
            let f = Field::filled(1, 1, c, Units::Model);
            let (mean, _) = posterior_stats(&s, &f, &f, t).unwrap();
            assert!((mean.values()[0] - c * summed).abs() <= 1e-9);
        }
    }

    #[test]
    fn forward_moments_match_stepwise_chain() {
        let s = linear_schedule(5, 0.05, 0.2).unwrap();
        let mut rng = seeded(6);
        let n = 100_000;
        let x0 = Field::filled(1, n, 0.8, Units::Model);
        let direct = forward_sample(&s, &x0, 5, &normal_field(&mut rng, 1, n, Units::Model)).unwrap();

        let mut chain = x0.clone();
        for t in 1..=5 {
            let z = normal_field(&mut rng, 1, n, Units::Model);
            chain = chain.lin_comb(s.alpha(t).sqrt(), &z, s.beta(t).sqrt());
        }

        let want_mean = s.alpha_bar(5).sqrt() * 0.8;
        let want_var = 1.0 - s.alpha_bar(5);
        for f in [&direct, &chain] {
            let mean = f.mean();
            let var = f.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            assert!((mean - want_mean).abs() / want_mean < 0.01, "mean {mean} vs {want_mean}");
            assert!((var - want_var).abs() / want_var < 0.01, "var {var} vs {want_var}");
        }
    }
}
