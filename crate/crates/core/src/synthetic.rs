//! Radar-like synthetic fields, planted blur pairs, and the mixture prior fit.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::denoiser::{GaussianMixtureModel, GmmComponent};
use crate::error::{Error, Result};
use crate::field::{Field, Units};
use crate::kernel::{convolve, BlurKernel};
use crate::rng::{derived, seeded};

/// Parameters of the storm-cell field model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub height: usize,
    pub width: usize,
    /// Poisson mean of the number of cells per field.
    pub cells_mean: f64,
    pub amplitude_min: f64,
    pub amplitude_max: f64,
    /// Range of the per-axis standard deviation of each cell, in pixels.
    pub spread_min: f64,
    pub spread_max: f64,
    pub background_noise: f64,
    pub seed: u64,
}

impl Default for FieldSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            cells_mean: 4.0,
            amplitude_min: 0.3,
            amplitude_max: 1.0,
            spread_min: 2.0,
            spread_max: 6.0,
            background_noise: 0.01,
            seed: 0,
        }
    }
}

impl FieldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::param("grid", format!("zero-size grid {}x{}", self.height, self.width)));
        }
        if !(self.cells_mean > 0.0) {
            return Err(Error::param("cells_mean", "must be > 0"));
        }
        if !(0.0 < self.amplitude_min && self.amplitude_min <= self.amplitude_max && self.amplitude_max <= 1.0) {
            return Err(Error::param("amplitude", "need 0 < min <= max <= 1"));
        }
        if !(0.0 < self.spread_min && self.spread_min <= self.spread_max) {
            return Err(Error::param("spread", "need 0 < min <= max"));
        }
        if !(self.background_noise >= 0.0) {
            return Err(Error::param("background_noise", "must be >= 0"));
        }
        Ok(())
    }
}

fn one_field(spec: &FieldSpec, rng: &mut impl Rng) -> Field {
    let (h, w) = (spec.height, spec.width);
    // At least one cell so every field carries an event.
    let n_cells = (Poisson::new(spec.cells_mean).unwrap().sample(rng) as usize).max(1);
    struct Cell {
        row: f64,
        col: f64,
        amp: f64,
        // Inverse covariance entries.
        a: f64,
        b: f64,
        c: f64,
    }
    let cells: Vec<Cell> = (0..n_cells)
        .map(|_| {
            let s1 = rng.random_range(spec.spread_min..=spec.spread_max);
            let s2 = rng.random_range(spec.spread_min..=spec.spread_max);
            let theta = rng.random_range(0.0..PI);
            let (sin, cos) = theta.sin_cos();
            let (i1, i2) = (1.0 / (s1 * s1), 1.0 / (s2 * s2));
            Cell {
                row: rng.random_range(0.0..h as f64),
                col: rng.random_range(0.0..w as f64),
                amp: rng.random_range(spec.amplitude_min..=spec.amplitude_max),
                a: cos * cos * i1 + sin * sin * i2,
                b: sin * cos * (i1 - i2),
                c: sin * sin * i1 + cos * cos * i2,
            }
        })
        .collect();
    let noise = (spec.background_noise > 0.0).then(|| Normal::new(0.0, spec.background_noise).unwrap());
    Field::from_fn(h, w, Units::Data, |r, col| {
        let mut v = 0.0;
        for cell in &cells {
            let dy = r as f64 - cell.row;
            let dx = col as f64 - cell.col;
            let q = cell.a * dy * dy + 2.0 * cell.b * dy * dx + cell.c * dx * dx;
            v += cell.amp * (-0.5 * q).exp();
        }
        if let Some(n) = &noise {
            v += n.sample(rng);
        }
        v.clamp(0.0, 1.0)
    })
}

/// `count` fields in data units; field `i` depends only on `(spec.seed, i)`.
pub fn generate_fields(spec: &FieldSpec, count: usize) -> Result<Vec<Field>> {
    spec.validate()?;
    Ok((0..count)
        .map(|i| one_field(spec, &mut derived(spec.seed, i as u64)))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlurFamily {
    Gaussian,
    Motion,
    Mixed,
}

impl FromStr for BlurFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "motion" => Ok(Self::Motion),
            "mixed" => Ok(Self::Mixed),
            other => Err(Error::Domain(format!("unknown blur family `{other}`"))),
        }
    }
}

impl fmt::Display for BlurFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gaussian => "gaussian",
            Self::Motion => "motion",
            Self::Mixed => "mixed",
        })
    }
}

/// Shape of a planted kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub family: BlurFamily,
    /// Lead-time index; 0 means no blur.
    pub severity: usize,
    pub size: usize,
    /// Sum of the planted kernel entries.
    pub gain: f64,
    /// Streak direction for motion blur, in degrees.
    pub motion_angle_deg: f64,
}

impl PlantSpec {
    pub fn new(family: BlurFamily, severity: usize) -> Self {
        Self {
            family,
            severity,
            size: 9,
            gain: 1.0,
            motion_angle_deg: 30.0,
        }
    }
}

/// Gaussian width per severity step, in pixels.
const GAUSS_SIGMA_PER_LEVEL: f64 = 1.0;
/// Motion streak growth per severity step, in pixels.
const STREAK_PER_LEVEL: f64 = 2.5;

fn gaussian_weights(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let mut w = vec![0.0; size * size];
    for r in 0..size {
        for col in 0..size {
            let d2 = (r as f64 - c).powi(2) + (col as f64 - c).powi(2);
            w[r * size + col] = (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
    w
}

fn motion_weights(size: usize, length: f64, angle_deg: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let half = (length / 2.0).min(c);
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let samples = 64;
    let mut w = vec![0.0; size * size];
    for i in 0..=samples {
        let u = -half + 2.0 * half * i as f64 / samples as f64;
        let (y, x) = (c - u * sin, c + u * cos);
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
            for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                let (r, col) = ((y0 + dy) as usize, (x0 + dx) as usize);
                if r < size && col < size {
                    w[r * size + col] += wy * wx;
                }
            }
        }
    }
    w
}

/// Builds the planted kernel, normalized to `spec.gain`.
pub fn planted_kernel(spec: &PlantSpec) -> Result<BlurKernel> {
    if spec.severity == 0 {
        return BlurKernel::delta(spec.size)?.normalized_to(spec.gain);
    }
    let sev = spec.severity as f64;
    let norm = |w: Vec<f64>| {
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect::<Vec<_>>()
    };
    let gauss = || norm(gaussian_weights(spec.size, GAUSS_SIGMA_PER_LEVEL * sev));
    let motion = || norm(motion_weights(spec.size, STREAK_PER_LEVEL * sev, spec.motion_angle_deg));
    let weights = match spec.family {
        BlurFamily::Gaussian => gauss(),
        BlurFamily::Motion => motion(),
        BlurFamily::Mixed => gauss().iter().zip(motion()).map(|(a, b)| 0.5 * a + 0.5 * b).collect(),
    };
    BlurKernel::from_params(spec.size, weights)?.normalized_to(spec.gain)
}

/// A clean field, its blurred counterpart and the kernel that links them.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedPair {
    pub clean: Field,
    pub blurry: Field,
    pub kernel_true: BlurKernel,
    pub family: BlurFamily,
    pub lead_index: usize,
}

pub fn plant_blur(clean: &Field, spec: &PlantSpec) -> Result<PlantedPair> {
    let kernel_true = planted_kernel(spec)?;
    Ok(PlantedPair {
        blurry: convolve(&kernel_true, clean),
        clean: clean.clone(),
        kernel_true,
        family: spec.family,
        lead_index: spec.severity,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Stop once the per-field log-likelihood gain drops below this.
    pub tol: f64,
    pub kmeans_iter: usize,
    /// Lower bound on component standard deviations.
    pub min_std: f64,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-6,
            kmeans_iter: 20,
            min_std: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PriorFit {
    pub model: GaussianMixtureModel,
    /// Total data log-likelihood after each EM iteration.
    pub log_likelihood: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp(data: &[Vec<f64>], k: usize, iters: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![data[rng.random_range(0..data.len())].clone()];
    while centers.len() < k {
        let d: Vec<f64> = data
            .iter()
            .map(|x| centers.iter().map(|c| sq_dist(x, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            d.iter()
                .position(|&v| {
                    target -= v;
                    target <= 0.0
                })
                .unwrap_or(data.len() - 1)
        } else {
            rng.random_range(0..data.len())
        };
        centers.push(data[idx].clone());
    }
    let dim = data[0].len();
    for _ in 0..iters {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for x in data {
            let j = (0..k)
                .min_by(|&a, &b| sq_dist(x, &centers[a]).total_cmp(&sq_dist(x, &centers[b])))
                .unwrap();
            counts[j] += 1;
            sums[j].iter_mut().zip(x).for_each(|(s, v)| *s += v);
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }
    centers
}

/// Fits an isotropic-component mixture to `fields` (any units; fit in model units)
/// with k-means++ initialization followed by EM.
pub fn fit_gmm_prior(fields: &[Field], k: usize, config: &EmConfig) -> Result<PriorFit> {
    if k == 0 {
        return Err(Error::param("k", "need at least one component"));
    }
    if fields.len() < k {
        return Err(Error::Data(format!("{} fields cannot support {k} components", fields.len())));
    }
    let (h, w) = fields[0].shape();
    if fields.iter().any(|f| f.shape() != (h, w)) {
        return Err(Error::Data("prior fields differ in shape".into()));
    }
    let data: Vec<Vec<f64>> = fields.iter().map(|f| f.to_model().into_values()).collect();
    let n = data.len();
    let dim = (h * w) as f64;
    let min_var = config.min_std * config.min_std;

    let mut rng = seeded(config.seed);
    let mut means = kmeans_pp(&data, k, config.kmeans_iter, &mut rng);
    // Start from hard assignments to the k-means centers.
    let mut resp = vec![vec![0.0; k]; n];
    for (x, r) in data.iter().zip(resp.iter_mut()) {
        let j = (0..k)
            .min_by(|&a, &b| sq_dist(x, &means[a]).total_cmp(&sq_dist(x, &means[b])))
            .unwrap();
        r[j] = 1.0;
    }
    let mut weights = vec![1.0 / k as f64; k];
    let mut vars = vec![1.0; k];

    let mut trace = Vec::new();
    for _ in 0..config.max_iter.max(1) {
        // M step.
        for j in 0..k {
            let nk: f64 = resp.iter().map(|r| r[j]).sum();
            weights[j] = nk / n as f64;
            if nk <= f64::MIN_POSITIVE {
                continue;
            }
            let mut m = vec![0.0; data[0].len()];
            for (x, r) in data.iter().zip(&resp) {
                if r[j] > 0.0 {
                    m.iter_mut().zip(x).for_each(|(a, v)| *a += r[j] * v);
                }
            }
            m.iter_mut().for_each(|a| *a /= nk);
            let ss: f64 = data.iter().zip(&resp).map(|(x, r)| r[j] * sq_dist(x, &m)).sum();
            vars[j] = (ss / (dim * nk)).max(min_var);
            means[j] = m;
        }
        let wsum: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|v| *v /= wsum);

        // E step, accumulating the log-likelihood of the parameters just fitted.
        let mut ll = 0.0;
        for (x, r) in data.iter().zip(resp.iter_mut()) {
            let logs: Vec<f64> = (0..k)
                .map(|j| {
                    if weights[j] == 0.0 {
                        f64::NEG_INFINITY
                    } else {
                        weights[j].ln()
                            - 0.5 * dim * (2.0 * PI * vars[j]).ln()
                            - sq_dist(x, &means[j]) / (2.0 * vars[j])
                    }
                })
                .collect();
            let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logs.iter().map(|l| (l - max).exp()).sum();
            ll += max + z.ln();
            for j in 0..k {
                r[j] = (logs[j] - max).exp() / z;
            }
        }
        let converged = trace.last().is_some_and(|prev: &f64| (ll - prev).abs() / n as f64 <= config.tol);
        trace.push(ll);
        if converged {
            break;
        }
    }

    let components = (0..k)
        .map(|j| GmmComponent {
            weight: weights[j],
            mean: means[j].clone(),
            std: vars[j].sqrt(),
        })
        .collect();
    Ok(PriorFit {
        model: GaussianMixtureModel::new(h, w, components)?,
        log_likelihood: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::distance;
    use crate::metrics::quantile_threshold;

    fn small_spec(seed: u64) -> FieldSpec {
        FieldSpec {
            height: 24,
            width: 24,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn empty_and_deterministic() {
        let spec = small_spec(3);
        assert!(generate_fields(&spec, 0).unwrap().is_empty());
        let a = generate_fields(&spec, 5).unwrap();
        let b = generate_fields(&spec, 5).unwrap();
        assert_eq!(a, b);
        // Prefix stability: field i does not depend on the batch size.
        assert_eq!(generate_fields(&spec, 2).unwrap()[..], a[..2]);
        assert!(a.iter().all(|f| f.min() >= 0.0 && f.max() <= 1.0));
        assert!(generate_fields(&FieldSpec { height: 0, ..spec }, 1).is_err());
    }

    #[test]
    fn extreme_fraction_near_one_percent() {
        let fields = generate_fields(&FieldSpec::default(), 1000).unwrap();
        let tau = quantile_threshold(&fields, 0.99).unwrap();
        let total: usize = fields.iter().map(Field::len).sum();
        let above: usize = fields.iter().map(|f| f.values().iter().filter(|&&v| v >= tau).count()).sum();
        let frac = above as f64 / total as f64;
        assert!((0.005..=0.02).contains(&frac), "fraction {frac}");
    }

    #[test]
    fn zero_severity_is_identity() {
        let clean = generate_fields(&small_spec(1), 1).unwrap().remove(0);
        for family in [BlurFamily::Gaussian, BlurFamily::Motion, BlurFamily::Mixed] {
            let pair = plant_blur(&clean, &PlantSpec::new(family, 0)).unwrap();
            assert_eq!(pair.blurry, clean);
        }
    }

    #[test]
    fn planted_kernels_sum_to_gain() {
        for family in [BlurFamily::Gaussian, BlurFamily::Motion, BlurFamily::Mixed] {
            for sev in 1..5 {
                let mut spec = PlantSpec::new(family, sev);
                spec.gain = 1.5;
                let k = planted_kernel(&spec).unwrap();
                assert!((k.sum() - 1.5).abs() < 1e-12);
                assert!(k.params().iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn pair_is_exact_convolution() {
        let clean = generate_fields(&small_spec(2), 1).unwrap().remove(0);
        let pair = plant_blur(&clean, &PlantSpec::new(BlurFamily::Mixed, 3)).unwrap();
        assert_eq!(pair.blurry, convolve(&pair.kernel_true, &clean));
        assert_eq!(pair.lead_index, 3);
    }

    #[test]
    fn stronger_blur_removes_more_high_frequency_energy() {
        for clean in generate_fields(&small_spec(4), 5).unwrap() {
            let e = |s| {
                plant_blur(&clean, &PlantSpec::new(BlurFamily::Gaussian, s))
                    .unwrap()
                    .blurry
                    .laplacian_energy()
            };
            assert!(e(2) < e(1) && e(3) < e(2) && e(4) < e(3));
        }
    }

    #[test]
    fn known_kernel_inverse_recovers_clean() {
        let clean = generate_fields(&small_spec(5), 1).unwrap().remove(0).to_model();
        let pair = plant_blur(&clean, &PlantSpec::new(BlurFamily::Gaussian, 2)).unwrap();
        let k = &pair.kernel_true;
        // Plain gradient descent on the distance from the blurry start.
        let mut x = pair.blurry.clone();
        let lr = 0.45 * x.len() as f64;
        for _ in 0..500 {
            let g = crate::kernel::grad_wrt_field(k, &x, &pair.blurry).unwrap();
            x = x.lin_comb(1.0, &g, -lr);
        }
        let rel = x.sub(&clean).norm_sq().sqrt() / clean.norm_sq().sqrt();
        assert!(rel < 0.05, "relative error {rel}");
        assert!(distance(k, &x, &pair.blurry).unwrap() < 1e-6);
    }

    #[test]
    fn single_component_is_sample_moments() {
        let fields = generate_fields(&small_spec(6), 12).unwrap();
        let fit = fit_gmm_prior(&fields, 1, &EmConfig::default()).unwrap();
        let c = &fit.model.components()[0];
        let model: Vec<Field> = fields.iter().map(Field::to_model).collect();
        let p = model[0].len();
        let mean: Vec<f64> = (0..p).map(|i| model.iter().map(|f| f.values()[i]).sum::<f64>() / 12.0).collect();
        for (a, b) in c.mean.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
        let ss: f64 = model.iter().map(|f| sq_dist(f.values(), &mean)).sum();
        assert!((c.std - (ss / (12.0 * p as f64)).sqrt()).abs() < 1e-12);
        assert_eq!(c.weight, 1.0);
    }

    #[test]
    fn em_log_likelihood_is_monotone() {
        let fields = generate_fields(&small_spec(7), 40).unwrap();
        let fit = fit_gmm_prior(&fields, 4, &EmConfig { tol: 0.0, max_iter: 30, ..Default::default() }).unwrap();
        assert!(fit.log_likelihood.len() > 1);
        for w in fit.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "{w:?}");
        }
    }

    #[test]
    fn fit_is_seed_deterministic_and_validated() {
        let fields = generate_fields(&small_spec(8), 20).unwrap();
        let cfg = EmConfig { seed: 9, ..Default::default() };
        let a = fit_gmm_prior(&fields, 3, &cfg).unwrap();
        let b = fit_gmm_prior(&fields, 3, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert!(matches!(fit_gmm_prior(&fields[..2], 3, &cfg), Err(Error::Data(_))));
        assert!(fit_gmm_prior(&fields, 0, &cfg).is_err());
    }
}
