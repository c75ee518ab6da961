//! Two-dimensional scalar grids.
//!
//! A [`Field`] carries its unit regime explicitly. Storage and metrics work in
//! data units (`[0, 1]`); the diffusion sampler works in model units
//! (`[-1, 1]`). The two are related by the affine map `model = 2 * data - 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    /// Normalized physical range `[0, 1]`.
    Data,
    /// Diffusion range `[-1, 1]`.
    Model,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    height: usize,
    width: usize,
    values: Vec<f64>,
    units: Units,
}

impl Field {
    pub fn new(height: usize, width: usize, values: Vec<f64>, units: Units) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::param("shape", format!("empty grid {height}x{width}")));
        }
        let expected = height
            .checked_mul(width)
            .ok_or(Error::DimensionOverflow {
                height: height as u64,
                width: width as u64,
            })?;
        if values.len() != expected {
            return Err(Error::Data(format!(
                "{height}x{width} grid needs {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value at index {i}")));
        }
        Ok(Self {
            height,
            width,
            values,
            units,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64, units: Units) -> Self {
        assert!(height > 0 && width > 0, "empty grid");
        Self {
            height,
            width,
            values: vec![value; height * width],
            units,
        }
    }

    pub fn zeros(height: usize, width: usize, units: Units) -> Self {
        Self::filled(height, width, 0.0, units)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        units: Units,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Self {
        assert!(height > 0 && width > 0, "empty grid");
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            values,
            units,
        }
    }

    /// Builds a field from raw parts without the finiteness scan. Shape is still checked.
    pub(crate) fn from_parts(height: usize, width: usize, values: Vec<f64>, units: Units) -> Self {
        debug_assert_eq!(values.len(), height * width);
        Self {
            height,
            width,
            values,
            units,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn units(&self) -> Units {
        self.units
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.values[row * self.width + col] = value;
    }

    pub fn check_same_shape(&self, other: &Field) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                expected: self.shape(),
                actual: other.shape(),
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Relabels the unit regime without touching values.
    pub fn with_units(mut self, units: Units) -> Self {
        self.units = units;
        self
    }

    /// Maps to model units. A no-op when already there.
    pub fn to_model(&self) -> Field {
        match self.units {
            Units::Model => self.clone(),
            Units::Data => self.map_with_units(Units::Model, |v| 2.0 * v - 1.0),
        }
    }

    /// Maps to data units. A no-op when already there.
    pub fn to_data(&self) -> Field {
        match self.units {
            Units::Data => self.clone(),
            Units::Model => self.map_with_units(Units::Data, |v| (v + 1.0) * 0.5),
        }
    }

    pub fn map(&self, f: impl FnMut(f64) -> f64) -> Field {
        self.map_with_units(self.units, f)
    }

    fn map_with_units(&self, units: Units, mut f: impl FnMut(f64) -> f64) -> Field {
        Field::from_parts(
            self.height,
            self.width,
            self.values.iter().map(|&v| f(v)).collect(),
            units,
        )
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Field {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Elementwise `a * self + b * other`.
    pub fn lin_comb(&self, a: f64, other: &Field, b: f64) -> Field {
        debug_assert_eq!(self.shape(), other.shape());
        Field::from_parts(
            self.height,
            self.width,
            self.values
                .iter()
                .zip(&other.values)
                .map(|(x, y)| a * x + b * y)
                .collect(),
            self.units,
        )
    }

    pub fn sub(&self, other: &Field) -> Field {
        self.lin_comb(1.0, other, -1.0)
    }

    pub fn scale(&self, k: f64) -> Field {
        self.map(|v| k * v)
    }

    pub fn dot(&self, other: &Field) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn max_abs_diff(&self, other: &Field) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Mean squared discrete Laplacian with edge clamping; a proxy for high-frequency energy.
    pub fn laplacian_energy(&self) -> f64 {
        let (h, w) = self.shape();
        let at = |r: isize, c: isize| {
            let r = r.clamp(0, h as isize - 1) as usize;
            let c = c.clamp(0, w as isize - 1) as usize;
            self.get(r, c)
        };
        let mut acc = 0.0;
        for r in 0..h as isize {
            for c in 0..w as isize {
                let lap = at(r - 1, c) + at(r + 1, c) + at(r, c - 1) + at(r, c + 1) - 4.0 * at(r, c);
                acc += lap * lap;
            }
        }
        acc / self.len() as f64
    }
}
