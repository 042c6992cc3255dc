//! Dense real-valued `channels x M x N` arrays used for clean data, noisy
//! latents and noise predictions.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;

/// Error raised by grid constructors and elementwise combinators.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GridError {
    /// Two grids that must agree in shape do not.
    ShapeMismatch {
        left: (usize, usize, usize),
        right: (usize, usize, usize),
    },
    /// A dimension was zero or the backing buffer has the wrong length.
    BadDimensions,
    /// A non-finite value was found where finiteness is required.
    NonFinite,
}

impl fmt::Display for GridError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GridError::ShapeMismatch { left, right } => {
                write!(f, "grid shape mismatch: {left:?} vs {right:?}")
            }
            GridError::BadDimensions => write!(f, "grid dimensions must be positive and consistent"),
            GridError::NonFinite => write!(f, "grid contains a non-finite value"),
        }
    }
}

impl core::error::Error for GridError {}

/// A real `channels x M x N` array stored channel-major.
///
/// Index layout: element `(c, i, j)` lives at `((c * m) + i) * n + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    channels: usize,
    m: usize,
    n: usize,
    data: Vec<f64>,
}

impl LatentGrid {
    /// All-zero grid.
    pub fn zeros(channels: usize, m: usize, n: usize) -> Self {
        Self {
            channels,
            m,
            n,
            data: vec![0.0; channels * m * n],
        }
    }

    /// Grid filled with a constant.
    pub fn filled(channels: usize, m: usize, n: usize, value: f64) -> Self {
        Self {
            channels,
            m,
            n,
            data: vec![value; channels * m * n],
        }
    }

    /// Wraps an existing channel-major buffer.
    pub fn from_vec(channels: usize, m: usize, n: usize, data: Vec<f64>) -> Result<Self, GridError> {
        if channels == 0 || m == 0 || n == 0 || data.len() != channels * m * n {
            return Err(GridError::BadDimensions);
        }
        Ok(Self { channels, m, n, data })
    }

    /// Grid of i.i.d. standard Gaussian draws from `rng`, in row-major
    /// channel order so the draw sequence is reproducible.
    pub fn standard_normal<R: Rng>(channels: usize, m: usize, n: usize, rng: &mut R) -> Self {
        let data = (0..channels * m * n)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        Self { channels, m, n, data }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn rows(&self) -> usize {
        self.m
    }

    pub fn cols(&self) -> usize {
        self.n
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.m, self.n)
    }

    /// Total element count.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.m + i) * self.n + j]
    }

    pub fn set(&mut self, c: usize, i: usize, j: usize, value: f64) {
        self.data[(c * self.m + i) * self.n + j] = value;
    }

    /// Contiguous `M x N` slice for one channel.
    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.m * self.n;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let plane = self.m * self.n;
        &mut self.data[c * plane..(c + 1) * plane]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &Self) -> Result<(), GridError> {
        if self.shape() != other.shape() {
            Err(GridError::ShapeMismatch {
                left: self.shape(),
                right: other.shape(),
            })
        } else {
            Ok(())
        }
    }

    /// `alpha * self + beta * other`, elementwise.
    pub fn affine_combine(&self, alpha: f64, other: &Self, beta: f64) -> Result<Self, GridError> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        Ok(Self {
            channels: self.channels,
            m: self.m,
            n: self.n,
            data,
        })
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let data = self.data.iter().map(|v| alpha * v).collect();
        Self {
            channels: self.channels,
            m: self.m,
            n: self.n,
            data,
        }
    }

    pub fn sub(&self, other: &Self) -> Result<Self, GridError> {
        self.affine_combine(1.0, other, -1.0)
    }

    pub fn add(&self, other: &Self) -> Result<Self, GridError> {
        self.affine_combine(1.0, other, 1.0)
    }

    /// Euclidean norm over all elements.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Root-mean-square over all elements ("per-dimension" norm).
    pub fn rms(&self) -> f64 {
        (self.data.iter().map(|v| v * v).sum::<f64>() / self.data.len() as f64).sqrt()
    }

    /// Mean absolute difference against `other`.
    pub fn mean_abs_diff(&self, other: &Self) -> Result<f64, GridError> {
        self.check_same_shape(other)?;
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64, GridError> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn from_vec_rejects_bad_lengths() {
        assert_eq!(
            LatentGrid::from_vec(1, 2, 2, vec![0.0; 3]).unwrap_err(),
            GridError::BadDimensions
        );
        assert_eq!(
            LatentGrid::from_vec(0, 2, 2, vec![]).unwrap_err(),
            GridError::BadDimensions
        );
    }

    #[test]
    fn indexing_is_channel_major() {
        let mut g = LatentGrid::zeros(2, 3, 4);
        g.set(1, 2, 3, 7.5);
        assert_eq!(g.get(1, 2, 3), 7.5);
        assert_eq!(g.channel(1)[2 * 4 + 3], 7.5);
        assert_eq!(g.as_slice()[(1 * 3 + 2) * 4 + 3], 7.5);
    }

    #[test]
    fn affine_combine_checks_shapes() {
        let a = LatentGrid::zeros(1, 2, 2);
        let b = LatentGrid::zeros(1, 2, 3);
        assert!(matches!(
            a.affine_combine(1.0, &b, 1.0),
            Err(GridError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn gaussian_fill_is_seed_deterministic() {
        let mut r1 = ChaCha12Rng::seed_from_u64(11);
        let mut r2 = ChaCha12Rng::seed_from_u64(11);
        let a = LatentGrid::standard_normal(3, 4, 4, &mut r1);
        let b = LatentGrid::standard_normal(3, 4, 4, &mut r2);
        assert_eq!(a, b);
        assert!(a.is_finite());
    }
}
