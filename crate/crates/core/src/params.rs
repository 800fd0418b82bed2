//! Flat parameter vectors partitioned between the two players.
//!
//! A [`ParamVector`] stores `x = (θ, φ)` as one contiguous buffer: the first
//! `p` entries belong to the generator (θ), the remaining `q` entries to the
//! discriminator (φ).

use crate::error::{Error, Result};

/// Which block(s) of a [`ParamVector`] an operation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Player {
    /// The minimizing player θ (generator).
    Theta,
    /// The second player φ (discriminator).
    Phi,
    /// Both blocks, concatenated as `(θ, φ)`.
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    data: Vec<f64>,
    p: usize,
}

impl ParamVector {
    /// Builds a vector whose first `p` entries form θ. Fails when `p > data.len()`.
    pub fn new(data: Vec<f64>, p: usize) -> Result<Self> {
        if p > data.len() {
            return Err(Error::DimensionMismatch(format!(
                "theta length {p} exceeds total length {}",
                data.len()
            )));
        }
        Ok(Self { data, p })
    }

    pub fn zeros(p: usize, q: usize) -> Self {
        Self {
            data: vec![0.0; p + q],
            p,
        }
    }

    /// Concatenates θ and φ. Inverse of [`ParamVector::split`].
    pub fn join(theta: &[f64], phi: &[f64]) -> Self {
        let mut data = Vec::with_capacity(theta.len() + phi.len());
        data.extend_from_slice(theta);
        data.extend_from_slice(phi);
        Self {
            data,
            p: theta.len(),
        }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.data.len() - self.p
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn partition(&self) -> (usize, usize) {
        (self.p, self.q())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn theta(&self) -> &[f64] {
        &self.data[..self.p]
    }

    pub fn phi(&self) -> &[f64] {
        &self.data[self.p..]
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.data[..self.p]
    }

    pub fn phi_mut(&mut self) -> &mut [f64] {
        let p = self.p;
        &mut self.data[p..]
    }

    /// The block selected by `player`.
    pub fn block(&self, player: Player) -> &[f64] {
        match player {
            Player::Theta => self.theta(),
            Player::Phi => self.phi(),
            Player::All => &self.data,
        }
    }

    pub fn block_mut(&mut self, player: Player) -> &mut [f64] {
        match player {
            Player::Theta => self.theta_mut(),
            Player::Phi => self.phi_mut(),
            Player::All => &mut self.data,
        }
    }

    /// Copies out `(θ, φ)`.
    pub fn split(&self) -> (Vec<f64>, Vec<f64>) {
        (self.theta().to_vec(), self.phi().to_vec())
    }

    /// Same data under a new vector with the partition of `self`.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        if data.len() != self.data.len() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} entries, got {}",
                self.data.len(),
                data.len()
            )));
        }
        Ok(Self { data, p: self.p })
    }

    pub fn check_same_partition(&self, other: &Self) -> Result<()> {
        if self.partition() != other.partition() {
            return Err(Error::DimensionMismatch(format!(
                "partition {:?} vs {:?}",
                self.partition(),
                other.partition()
            )));
        }
        Ok(())
    }

    /// Elementwise `a·x + b·y`.
    pub fn lincomb(a: f64, x: &Self, b: f64, y: &Self) -> Result<Self> {
        x.check_same_partition(y)?;
        let data = x
            .data
            .iter()
            .zip(&y.data)
            .map(|(xi, yi)| a * xi + b * yi)
            .collect();
        Ok(Self { data, p: x.p })
    }

    /// In-place `self += a·y`.
    pub fn axpy(&mut self, a: f64, y: &Self) -> Result<()> {
        self.check_same_partition(y)?;
        for (s, yi) in self.data.iter_mut().zip(&y.data) {
            *s += a * yi;
        }
        Ok(())
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            data: self.data.iter().map(|v| a * v).collect(),
            p: self.p,
        }
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_same_partition(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm2(&self) -> f64 {
        norm2(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Euclidean norm of a slice.
pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
