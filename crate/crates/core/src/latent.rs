//! Flat row-major arrays of 64-bit reals with explicit shapes.
//!
//! A [`Latent`] is the single value type every engine operation consumes and
//! produces: trajectory points, predicted noises, injected noises and their
//! residuals all share it. Only elementwise same-shape arithmetic is
//! supported; there is no broadcasting.

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Latent {
    /// Builds a latent from a shape and row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(CoreError::DegenerateShape);
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::ShapeMismatch {
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(CoreError::DegenerateShape);
        }
        let numel: usize = shape.iter().product();
        Ok(Self {
            shape,
            data: vec![0.0; numel],
        })
    }

    /// Constant field broadcast over a shape.
    pub fn splat(shape: Vec<usize>, value: f64) -> Result<Self> {
        let mut out = Self::zeros(shape)?;
        out.data.fill(value);
        Ok(out)
    }

    /// Scalar latent of shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Latent) -> Result<()> {
        if self.shape != other.shape {
            return Err(CoreError::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Latent {
        Latent {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Latent) -> Result<Latent> {
        self.same_shape(other)?;
        Ok(Latent {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &Latent) -> Result<Latent> {
        self.same_shape(other)?;
        Ok(Latent {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn scale(&self, c: f64) -> Latent {
        self.map(|v| c * v)
    }

    /// `self + c * other`, elementwise.
    pub fn add_scaled(&self, other: &Latent, c: f64) -> Result<Latent> {
        self.same_shape(other)?;
        Ok(Latent {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + c * b)
                .collect(),
        })
    }

    /// In-place `self += c * other`.
    pub fn axpy(&mut self, other: &Latent, c: f64) -> Result<()> {
        self.same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Latent) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn linf_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Latent) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Mean squared difference over all elements.
    pub fn mean_squared_diff(&self, other: &Latent) -> Result<f64> {
        self.same_shape(other)?;
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sum / self.data.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_degenerate_shapes() {
        assert!(matches!(
            Latent::new(vec![], vec![]),
            Err(CoreError::DegenerateShape)
        ));
        assert!(matches!(
            Latent::zeros(vec![2, 0]),
            Err(CoreError::DegenerateShape)
        ));
    }

    #[test]
    fn rejects_length_mismatch() {
        assert!(Latent::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn elementwise_ops() {
        let a = Latent::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Latent::new(vec![2], vec![0.5, -0.5]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[1.5, 1.5]);
        assert_eq!(a.sub(&b).unwrap().data(), &[0.5, 2.5]);
        assert_eq!(a.scale(2.0).data(), &[2.0, 4.0]);
        assert_eq!(a.add_scaled(&b, 2.0).unwrap().data(), &[2.0, 1.0]);
        assert_eq!(a.dot(&b).unwrap(), -0.5);
    }

    #[test]
    fn shape_mismatch_errors() {
        let a = Latent::zeros(vec![2]).unwrap();
        let b = Latent::zeros(vec![3]).unwrap();
        assert!(a.add(&b).is_err());
        assert!(a.dot(&b).is_err());
    }

    #[test]
    fn norms() {
        let a = Latent::new(vec![2], vec![3.0, -4.0]).unwrap();
        assert_eq!(a.l2_norm(), 5.0);
        assert_eq!(a.linf_norm(), 4.0);
    }
}
