use std::path::Path;

use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Denoiser;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::field::{Field, Units};

/// One isotropic Gaussian over flattened fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub std: f64,
}

/// Mixture prior `p(x0) = sum_i w_i N(m_i, s_i^2 I)` over model-unit fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureModel {
    height: usize,
    width: usize,
    components: Vec<GmmComponent>,
}

impl GaussianMixtureModel {
    pub fn new(height: usize, width: usize, components: Vec<GmmComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::param("components", "mixture needs at least one component"));
        }
        let p = height * width;
        let mut total = 0.0;
        for (i, c) in components.iter().enumerate() {
            if c.mean.len() != p {
                return Err(Error::param(
                    "components",
                    format!("component {i} mean has {} values, expected {p}", c.mean.len()),
                ));
            }
            if !(c.std > 0.0) || !c.std.is_finite() {
                return Err(Error::param("std", format!("component {i} std {} must be > 0", c.std)));
            }
            if !(c.weight >= 0.0) {
                return Err(Error::param("weight", format!("component {i} weight {} < 0", c.weight)));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::param("weight", format!("weights sum to {total}, not 1")));
        }
        Ok(Self {
            height,
            width,
            components,
        })
    }

    /// Single isotropic Gaussian with a constant mean.
    pub fn isotropic(height: usize, width: usize, mean: f64, std: f64) -> Result<Self> {
        Self::new(
            height,
            width,
            vec![GmmComponent {
                weight: 1.0,
                mean: vec![mean; height * width],
                std,
            }],
        )
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    /// `E[x0 | x_t]` under the mixture, with responsibilities normalized in log space.
    pub fn posterior_mean(&self, x_t: &Field, t: usize, schedule: &NoiseSchedule) -> Result<Field> {
        schedule.check_step(t)?;
        if x_t.shape() != self.shape() {
            return Err(Error::Shape {
                expected: self.shape(),
                actual: x_t.shape(),
            });
        }
        let ab = schedule.alpha_bar(t);
        let sab = ab.sqrt();
        let p = x_t.len() as f64;
        let x = x_t.values();

        let log_resp: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                if c.weight == 0.0 {
                    return f64::NEG_INFINITY;
                }
                let var = ab * c.std * c.std + (1.0 - ab);
                let d2: f64 = x
                    .iter()
                    .zip(&c.mean)
                    .map(|(xv, m)| {
                        let d = xv - sab * m;
                        d * d
                    })
                    .sum();
                c.weight.ln() - 0.5 * (p * var.ln() + d2 / var)
            })
            .collect();
        let max = log_resp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let unnorm: Vec<f64> = log_resp.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = unnorm.iter().sum();

        let mut out = vec![0.0; x.len()];
        for (c, u) in self.components.iter().zip(&unnorm) {
            let r = u / z;
            if r == 0.0 {
                continue;
            }
            let var = ab * c.std * c.std + (1.0 - ab);
            let gain = sab * c.std * c.std / var;
            for ((o, xv), m) in out.iter_mut().zip(x).zip(&c.mean) {
                *o += r * (m + gain * (xv - sab * m));
            }
        }
        Ok(Field::from_parts(self.height, self.width, out, Units::Model))
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Field {
        let idx = if self.components.len() == 1 {
            0
        } else {
            WeightedIndex::new(self.components.iter().map(|c| c.weight))
                .expect("validated weights")
                .sample(rng)
        };
        let c = &self.components[idx];
        let values = c
            .mean
            .iter()
            .map(|m| {
                let z: f64 = rng.sample(StandardNormal);
                m + c.std * z
            })
            .collect();
        Field::from_parts(self.height, self.width, values, Units::Model)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: GaussianMixtureModel = serde_json::from_str(&text)?;
        Self::new(raw.height, raw.width, raw.components)
    }
}

impl Denoiser for GaussianMixtureModel {
    fn predict_noise(&self, x_t: &Field, t: usize, schedule: &NoiseSchedule) -> Result<Field> {
        let mean = self.posterior_mean(x_t, t, schedule)?;
        let ab = schedule.alpha_bar(t);
        Ok(x_t.lin_comb(1.0, &mean, -ab.sqrt()).scale(1.0 / (1.0 - ab).sqrt()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::linear_schedule;
    use crate::rng::{normal_field, seeded};

    #[test]
    fn standard_normal_prior_matches_closed_form() {
        let s = linear_schedule(1000, 1e-4, 0.02).unwrap();
        let gmm = GaussianMixtureModel::isotropic(4, 4, 0.0, 1.0).unwrap();
        let mut rng = seeded(1);
        for t in [1, 100, 500, 1000] {
            let xt = normal_field(&mut rng, 4, 4, Units::Model);
            let eps = gmm.predict_noise(&xt, t, &s).unwrap();
            let k = (1.0 - s.alpha_bar(t)).sqrt();
            for (e, x) in eps.values().iter().zip(xt.values()) {
                assert!((e - k * x).abs() <= 1e-6, "t={t}");
            }
        }
    }

    #[test]
    fn narrow_prior_returns_its_mean() {
        let s = linear_schedule(1000, 1e-4, 0.02).unwrap();
        let gmm = GaussianMixtureModel::isotropic(3, 3, 0.25, 1e-6).unwrap();
        let xt = normal_field(&mut seeded(2), 3, 3, Units::Model);
        let m = gmm.posterior_mean(&xt, 300, &s).unwrap();
        assert!(m.values().iter().all(|v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn symmetric_pair_gives_zero_at_origin() {
        let s = linear_schedule(1000, 1e-4, 0.02).unwrap();
        let comp = |m: f64| GmmComponent {
            weight: 0.5,
            mean: vec![m; 4],
            std: 0.3,
        };
        let gmm = GaussianMixtureModel::new(2, 2, vec![comp(0.7), comp(-0.7)]).unwrap();
        let zero = Field::zeros(2, 2, Units::Model);
        for t in [1, 50, 999] {
            let m = gmm.posterior_mean(&zero, t, &s).unwrap();
            assert!(m.values().iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn extreme_distances_stay_finite() {
        let s = linear_schedule(1000, 1e-4, 0.02).unwrap();
        let comp = |m: f64| GmmComponent {
            weight: 0.5,
            mean: vec![m; 64],
            std: 0.01,
        };
        let gmm = GaussianMixtureModel::new(8, 8, vec![comp(1.0), comp(-1.0)]).unwrap();
        let far = Field::filled(8, 8, 50.0, Units::Model);
        for t in [1, 2, 1000] {
            assert!(gmm.predict_noise(&far, t, &s).unwrap().is_finite());
        }
    }

    #[test]
    fn validation() {
        assert!(GaussianMixtureModel::isotropic(2, 2, 0.0, 0.0).is_err());
        let c = GmmComponent {
            weight: 0.4,
            mean: vec![0.0; 4],
            std: 1.0,
        };
        assert!(GaussianMixtureModel::new(2, 2, vec![c]).is_err());
        let s = linear_schedule(10, 1e-4, 0.02).unwrap();
        let gmm = GaussianMixtureModel::isotropic(2, 2, 0.0, 1.0).unwrap();
        assert!(matches!(
            gmm.predict_noise(&Field::zeros(2, 2, Units::Model), 0, &s),
            Err(Error::StepRange { .. })
        ));
    }
}
