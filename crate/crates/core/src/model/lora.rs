use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Low-rank update `ΔW = (alpha / r) · B · A` for one linear layer.
///
/// `A` is `r × C_in` and starts Gaussian with variance `1/r`; `B` is
/// `C_out × r` and starts at zero, so a fresh adapter leaves the layer
/// unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub a: Tensor,
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn new(c_in: usize, c_out: usize, rank: usize, alpha: f64, rng: &mut impl Rng) -> Result<Self> {
        if rank == 0 {
            return Err(Error::invalid("LoRA rank must be at least 1"));
        }
        let normal = Normal::new(0.0, (1.0 / rank as f64).sqrt()).expect("positive std");
        let a = (0..rank * c_in).map(|_| normal.sample(rng)).collect();
        Ok(LoraAdapter {
            a: Tensor::matrix(rank, c_in, a)?,
            b: Tensor::zeros(&[c_out, rank]),
            rank,
            alpha,
        })
    }

    pub fn from_factors(a: Tensor, b: Tensor, alpha: f64) -> Result<Self> {
        if a.rank() != 2 || b.rank() != 2 || a.rows() != b.cols() {
            return Err(Error::Shape {
                op: "lora",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let rank = a.rows();
        Ok(LoraAdapter { a, b, rank, alpha })
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn c_in(&self) -> usize {
        self.a.cols()
    }

    pub fn c_out(&self) -> usize {
        self.b.rows()
    }

    /// The dense update `(alpha / r) · B · A`, shaped `C_out × C_in`.
    pub fn effective_delta(&self) -> Tensor {
        self.b
            .matmul(&self.a)
            .expect("factor shapes checked at construction")
            .scaled(self.scaling())
    }
}

/// Free-function form of [`LoraAdapter::effective_delta`].
pub fn effective_delta(adapter: &LoraAdapter) -> Tensor {
    adapter.effective_delta()
}
