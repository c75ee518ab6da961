//! The optimizable blur kernel and its distance metric.
//!
//! Convolution here is cross-correlation with replicate (edge-clamp) padding:
//! `out[p] = sum_q phi[q] * field[clamp(p + q - c)]` with `c` the kernel
//! center. The distance is the mean squared residual between the reblurred
//! estimate and the blurry target. Both gradients are exact adjoints of that
//! forward map, padding included.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::field::Field;

pub const DEFAULT_KERNEL_SIZE: usize = 9;
pub const DEFAULT_INIT_MEAN: f64 = 0.6;
pub const DEFAULT_INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BlurKernel {
    size: usize,
    params: Vec<f64>,
}

impl BlurKernel {
    pub fn from_params(size: usize, params: Vec<f64>) -> Result<Self> {
        check_size(size)?;
        if params.len() != size * size {
            return Err(Error::param(
                "params",
                format!("{size}x{size} kernel needs {} entries, got {}", size * size, params.len()),
            ));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::param("params", "non-finite kernel entry"));
        }
        Ok(Self { size, params })
    }

    /// Unit impulse at the center.
    pub fn delta(size: usize) -> Result<Self> {
        check_size(size)?;
        let mut params = vec![0.0; size * size];
        params[size * size / 2] = 1.0;
        Ok(Self { size, params })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn center(&self) -> usize {
        self.size / 2
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.params[row * self.size + col]
    }

    pub fn sum(&self) -> f64 {
        self.params.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.params.len() as f64
    }

    /// Rescales entries so they sum to `gain`.
    pub fn normalized_to(&self, gain: f64) -> Result<Self> {
        let s = self.sum();
        if s.abs() < f64::MIN_POSITIVE {
            return Err(Error::param("kernel", "cannot normalize a zero-sum kernel"));
        }
        Self::from_params(self.size, self.params.iter().map(|p| p * gain / s).collect())
    }

    /// Plain gradient step `phi <- phi - lr * grad`.
    pub fn descend(&mut self, grad: &[f64], lr: f64) {
        debug_assert_eq!(grad.len(), self.params.len());
        for (p, g) in self.params.iter_mut().zip(grad) {
            *p -= lr * g;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}

fn check_size(size: usize) -> Result<()> {
    if size == 0 || size.is_multiple_of(2) {
        return Err(Error::param("size", format!("kernel size must be odd and >= 1, got {size}")));
    }
    Ok(())
}

/// Draws every entry i.i.d. from `Normal(mean, std^2)`.
pub fn init_kernel(size: usize, mean: f64, std: f64, rng: &mut impl Rng) -> Result<BlurKernel> {
    check_size(size)?;
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::param("init_std", format!("{std} must be finite and >= 0")));
    }
    if !mean.is_finite() {
        return Err(Error::param("init_mean", "must be finite"));
    }
    let params = if std == 0.0 {
        vec![mean; size * size]
    } else {
        let dist = Normal::new(mean, std).expect("validated std");
        (0..size * size).map(|_| dist.sample(rng)).collect()
    };
    Ok(BlurKernel { size, params })
}

/// Copy of `field` with a replicated border of width `pad`.
fn pad_replicate(field: &Field, pad: usize) -> (Vec<f64>, usize) {
    let (h, w) = field.shape();
    let pw = w + 2 * pad;
    let ph = h + 2 * pad;
    let src = field.values();
    let mut out = Vec::with_capacity(ph * pw);
    for r in 0..ph {
        let sr = r.saturating_sub(pad).min(h - 1);
        let row = &src[sr * w..(sr + 1) * w];
        out.extend(std::iter::repeat_n(row[0], pad));
        out.extend_from_slice(row);
        out.extend(std::iter::repeat_n(row[w - 1], pad));
    }
    (out, pw)
}

/// Same-size cross-correlation with replicate padding.
pub fn convolve(kernel: &BlurKernel, field: &Field) -> Field {
    let (h, w) = field.shape();
    let n = kernel.size();
    let (padded, pw) = pad_replicate(field, kernel.center());
    let mut out = vec![0.0; h * w];
    for a in 0..n {
        for b in 0..n {
            let k = kernel.get(a, b);
            if k == 0.0 {
                continue;
            }
            for r in 0..h {
                let src = &padded[(r + a) * pw + b..(r + a) * pw + b + w];
                let dst = &mut out[r * w..(r + 1) * w];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += k * s;
                }
            }
        }
    }
    Field::from_parts(h, w, out, field.units())
}

/// `K * x_tilde0 - y_prime`.
pub fn residual(kernel: &BlurKernel, x_tilde0: &Field, y_prime: &Field) -> Result<Field> {
    x_tilde0.check_same_shape(y_prime)?;
    Ok(convolve(kernel, x_tilde0).sub(y_prime))
}

/// Mean over pixels of the squared reblur residual.
pub fn distance(kernel: &BlurKernel, x_tilde0: &Field, y_prime: &Field) -> Result<f64> {
    let r = residual(kernel, x_tilde0, y_prime)?;
    Ok(r.norm_sq() / r.len() as f64)
}

/// Gradient of the distance with respect to the kernel entries, given the residual.
pub fn kernel_grad_from_residual(size: usize, x_tilde0: &Field, residual: &Field) -> Vec<f64> {
    let (h, w) = x_tilde0.shape();
    let (padded, pw) = pad_replicate(x_tilde0, size / 2);
    let scale = 2.0 / (h * w) as f64;
    let r = residual.values();
    let mut grad = vec![0.0; size * size];
    for a in 0..size {
        for b in 0..size {
            let mut acc = 0.0;
            for row in 0..h {
                let src = &padded[(row + a) * pw + b..(row + a) * pw + b + w];
                let res = &r[row * w..(row + 1) * w];
                acc += src.iter().zip(res).map(|(x, e)| x * e).sum::<f64>();
            }
            grad[a * size + b] = scale * acc;
        }
    }
    grad
}

/// Adjoint of [`convolve`] applied to `weights`: correlation with the flipped
/// kernel, with padded contributions folded back onto the clamped pixels.
pub fn convolve_adjoint(kernel: &BlurKernel, weights: &Field) -> Field {
    let (h, w) = weights.shape();
    let n = kernel.size();
    let c = kernel.center();
    let pw = w + 2 * c;
    let ph = h + 2 * c;
    let mut padded = vec![0.0; ph * pw];
    let v = weights.values();
    for a in 0..n {
        for b in 0..n {
            let k = kernel.get(a, b);
            if k == 0.0 {
                continue;
            }
            for r in 0..h {
                let dst = &mut padded[(r + a) * pw + b..(r + a) * pw + b + w];
                for (d, s) in dst.iter_mut().zip(&v[r * w..(r + 1) * w]) {
                    *d += k * s;
                }
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for pr in 0..ph {
        let r = pr.saturating_sub(c).min(h - 1);
        for pc in 0..pw {
            let col = pc.saturating_sub(c).min(w - 1);
            out[r * w + col] += padded[pr * pw + pc];
        }
    }
    Field::from_parts(h, w, out, weights.units())
}

pub fn grad_wrt_kernel(kernel: &BlurKernel, x_tilde0: &Field, y_prime: &Field) -> Result<Vec<f64>> {
    let r = residual(kernel, x_tilde0, y_prime)?;
    Ok(kernel_grad_from_residual(kernel.size(), x_tilde0, &r))
}

pub fn grad_wrt_field(kernel: &BlurKernel, x_tilde0: &Field, y_prime: &Field) -> Result<Field> {
    let r = residual(kernel, x_tilde0, y_prime)?;
    let scale = 2.0 / r.len() as f64;
    Ok(convolve_adjoint(kernel, &r.scale(scale)))
}

/// Distance plus both gradients from a single residual evaluation.
#[derive(Debug, Clone)]
pub struct DistanceEval {
    pub loss: f64,
    pub grad_field: Field,
    pub grad_kernel: Vec<f64>,
}

pub fn evaluate(kernel: &BlurKernel, x_tilde0: &Field, y_prime: &Field) -> Result<DistanceEval> {
    let r = residual(kernel, x_tilde0, y_prime)?;
    let p = r.len() as f64;
    Ok(DistanceEval {
        loss: r.norm_sq() / p,
        grad_field: convolve_adjoint(kernel, &r.scale(2.0 / p)),
        grad_kernel: kernel_grad_from_residual(kernel.size(), x_tilde0, &r),
    })
}

/// Kernel as CSV: `size` rows of `size` comma-separated values.
pub fn kernel_to_csv(kernel: &BlurKernel) -> String {
    let mut out = String::new();
    for r in 0..kernel.size() {
        let row: Vec<String> = (0..kernel.size()).map(|c| format!("{}", kernel.get(r, c))).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn kernel_from_csv(text: &str) -> Result<BlurKernel> {
    let mut params = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Csv(format!("line {}: {e}", i + 1)))?;
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(Error::Csv(format!("line {}: expected {c} columns, got {}", i + 1, row.len())))
            }
            _ => {}
        }
        params.extend(row);
        rows += 1;
    }
    if cols != Some(rows) {
        return Err(Error::Csv(format!("kernel must be square, got {rows} rows x {cols:?} columns")));
    }
    BlurKernel::from_params(rows, params)
}
