use crate::error::Result;

/// A differentiable scalar function of a latent.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn value(&self, z: &[f64]) -> Result<f64>;
    fn gradient(&self, z: &[f64]) -> Result<Vec<f64>>;
}
