use crate::{AutodiffError, Result};

/// Dense row-major array of `f64`.
///
/// Entries are finite except where a value is deliberately masked to `-inf`.
#[derive(Clone, Debug, PartialEq)]
pub struct NArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl NArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::BadLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Size of the last axis (1 for a scalar).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when the array is viewed as `[len / last_dim, last_dim]`.
    pub fn outer_len(&self) -> usize {
        self.data.len().checked_div(self.last_dim()).unwrap_or(0)
    }

    /// The single value of a one-element array.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(AutodiffError::NotScalar(self.shape.clone()))
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.last_dim();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.last_dim() + c]
    }

    pub fn is_finite_or_masked(&self) -> bool {
        self.data
            .iter()
            .all(|v| v.is_finite() || *v == f64::NEG_INFINITY)
    }
}

/// Overflow-safe `ln(sum(exp(xs)))`. Returns `-inf` when every entry is `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// `ln(exp(a) + exp(b))` for two values.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}
