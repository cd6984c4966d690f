//! Dense complex-valued tensors.
//!
//! The single value type flowing through the whole pipeline: images,
//! k-spaces, network features, parameters and scalars are all `CTensor`s.
//! Data is stored flat in row-major order, double precision internally.

use crate::error::{Error, Result};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, PartialEq)]
pub struct CTensor {
    shape: Vec<usize>,
    data: Vec<Complex64>,
}

impl CTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        CTensor {
            shape: shape.to_vec(),
            data: vec![Complex64::new(0.0, 0.0); n],
        }
    }

    pub fn from_data(shape: &[usize], data: Vec<Complex64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Invalid(format!(
                "element count {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(CTensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(v: Complex64) -> Self {
        CTensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn scalar_re(v: f64) -> Self {
        Self::scalar(Complex64::new(v, 0.0))
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> Complex64) -> Self {
        let mut t = CTensor::zeros(shape);
        let mut idx = vec![0usize; shape.len()];
        for i in 0..t.data.len() {
            t.data[i] = f(&idx);
            // advance multi-index
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        t
    }

    /// Standard complex normal entries (re, im independent N(0, 0.5)) scaled by `std`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let s = std / std::f64::consts::SQRT_2;
        let data = (0..n)
            .map(|_| {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                Complex64::new(re * s, im * s)
            })
            .collect();
        CTensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> Complex64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1usize; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.shape[i + 1];
        }
        s
    }

    pub fn at(&self, idx: &[usize]) -> Complex64 {
        let strides = self.strides();
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[off]
    }

    pub fn set(&mut self, idx: &[usize], v: Complex64) {
        let strides = self.strides();
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[off] = v;
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(CTensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape == other.shape
    }

    pub fn check_same_shape(&self, other: &Self, context: &str) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::shape(context, &self.shape, &other.shape));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(Complex64) -> Complex64) -> Self {
        CTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&z| f(z)).collect(),
        }
    }

    pub fn zip(&self, other: &Self, f: impl Fn(Complex64, Complex64) -> Complex64) -> Self {
        debug_assert!(self.same_shape(other));
        CTensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, c: Complex64) -> Self {
        self.map(|z| z * c)
    }

    pub fn scale_re(&self, c: f64) -> Self {
        self.map(|z| z * c)
    }

    pub fn conj(&self) -> Self {
        self.map(|z| z.conj())
    }

    pub fn neg(&self) -> Self {
        self.map(|z| -z)
    }

    /// In-place accumulate, used by gradient accumulation on the tape.
    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// ⟨self, other⟩ = Σ conj(self) · other
    pub fn inner(&self, other: &Self) -> Complex64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    /// Round-trip through single precision, the on-disk representation.
    pub fn to_f32_round_trip(&self) -> Self {
        self.map(|z| Complex64::new(z.re as f32 as f64, z.im as f32 as f64))
    }
}
