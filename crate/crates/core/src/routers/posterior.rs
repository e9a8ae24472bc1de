use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

use super::kl::{kl_fc, kl_mf, validate_cholesky};

#[derive(Clone, Debug, PartialEq)]
pub enum PosteriorScale {
    Diagonal(Vec<f64>),
    Cholesky(Tensor),
}

/// Gaussian over routing logits, centred on the deterministic logits plus a
/// learned residual `delta_mu`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub delta_mu: Vec<f64>,
    pub scale: PosteriorScale,
}

impl GaussianPosterior {
    pub fn diagonal(delta_mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if sigma.len() != delta_mu.len() {
            return Err(Error::shape("posterior", format!("{} means, {} scales", delta_mu.len(), sigma.len())));
        }
        if sigma.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("posterior scales must be strictly positive"));
        }
        Ok(Self { delta_mu, scale: PosteriorScale::Diagonal(sigma) })
    }

    pub fn cholesky(delta_mu: Vec<f64>, l: Tensor) -> Result<Self> {
        validate_cholesky(&l, delta_mu.len())?;
        Ok(Self { delta_mu, scale: PosteriorScale::Cholesky(l) })
    }

    pub fn n(&self) -> usize {
        self.delta_mu.len()
    }

    /// KL to the centred prior `N(l_det, I)`.
    pub fn kl(&self) -> Result<f64> {
        match &self.scale {
            PosteriorScale::Diagonal(s) => kl_mf(&self.delta_mu, s),
            PosteriorScale::Cholesky(l) => kl_fc(&self.delta_mu, l),
        }
    }

    /// Trace of the posterior covariance.
    pub fn trace(&self) -> f64 {
        match &self.scale {
            PosteriorScale::Diagonal(s) => s.iter().map(|x| x * x).sum(),
            PosteriorScale::Cholesky(l) => l.frobenius_sq(),
        }
    }

    /// `l_det + Δμ + scale · eps`.
    pub fn sample(&self, l_det: &[f64], eps: &[f64]) -> Vec<f64> {
        let n = self.n();
        let noise: Vec<f64> = match &self.scale {
            PosteriorScale::Diagonal(s) => s.iter().zip(eps).map(|(s, e)| s * e).collect(),
            PosteriorScale::Cholesky(l) => (0..n).map(|i| (0..=i).map(|j| l.get2(i, j) * eps[j]).sum()).collect(),
        };
        (0..n).map(|i| l_det[i] + self.delta_mu[i] + noise[i]).collect()
    }
}
