//! Closed-form regularisers for the variational routers.

use crate::error::{Error, Result};
use crate::numerics::graph::{fill_cholesky, tril_side};
use crate::numerics::tensor::{softplus, Tensor};

use super::select::check_simplex;

/// Floor added to the temperature network output.
pub const MIN_TEMPERATURE: f64 = 1e-6;

/// `KL(N(Δμ, diag σ²) ‖ N(0, I))`.
pub fn kl_mf(delta_mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if delta_mu.len() != sigma.len() {
        return Err(Error::shape("kl_mf", format!("{} vs {}", delta_mu.len(), sigma.len())));
    }
    if sigma.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::invalid("kl_mf: sigma must be strictly positive"));
    }
    let total: f64 = delta_mu.iter().zip(sigma).map(|(&m, &s)| m * m + s * s - 2.0 * s.ln() - 1.0).sum();
    Ok(0.5 * total)
}

/// `KL(N(Δμ, LLᵀ) ‖ N(0, I))` for a lower-triangular `L` with positive diagonal.
pub fn kl_fc(delta_mu: &[f64], l: &Tensor) -> Result<f64> {
    let n = delta_mu.len();
    validate_cholesky(l, n)?;
    let mean_sq: f64 = delta_mu.iter().map(|m| m * m).sum();
    let log_diag: f64 = (0..n).map(|i| l.get2(i, i).ln()).sum();
    Ok(0.5 * (mean_sq + l.frobenius_sq() - 2.0 * log_diag - n as f64))
}

pub fn validate_cholesky(l: &Tensor, n: usize) -> Result<()> {
    if l.shape() != [n, n] {
        return Err(Error::shape("cholesky factor", format!("{:?}, expected [{n}, {n}]", l.shape())));
    }
    for r in 0..n {
        if !(l.get2(r, r) > 0.0) {
            return Err(Error::invalid("cholesky factor needs a strictly positive diagonal"));
        }
        if (r + 1..n).any(|c| l.get2(r, c) != 0.0) {
            return Err(Error::invalid("cholesky factor must be lower triangular"));
        }
    }
    Ok(())
}

/// Lower-triangular factor from `N(N+1)/2` values in row-major tril order,
/// with the diagonal exponentiated.
pub fn build_cholesky(flat: &[f64]) -> Result<Tensor> {
    let n = tril_side(flat.len())
        .ok_or_else(|| Error::shape("build_cholesky", format!("{} is not N(N+1)/2", flat.len())))?;
    let mut out = vec![0.0; n * n];
    fill_cholesky(flat, n, &mut out);
    Tensor::matrix(n, n, out)
}

/// `KL(q ‖ Uniform(N)) = Σ q log q + log N`, with `0 log 0 = 0`.
pub fn kl_vtsr(q: &[f64]) -> Result<f64> {
    check_simplex(q)?;
    let neg_entropy: f64 = q.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum();
    Ok(neg_entropy + (q.len() as f64).ln())
}

/// `-log T`, the entropy proxy for the learned temperature.
pub fn temp_reg_loss(t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::invalid("temperature must be > 0"));
    }
    Ok(-t.ln())
}

/// `softplus(raw) + 1e-6`.
pub fn temperature_from_raw(raw: f64) -> f64 {
    softplus(raw) + MIN_TEMPERATURE
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_mf_prior_is_zero() {
        assert_eq!(kl_mf(&[0.0; 5], &[1.0; 5]).unwrap(), 0.0);
        assert_eq!(kl_mf(&[1.0], &[1.0]).unwrap(), 0.5);
        assert!(kl_mf(&[0.0], &[0.0]).is_err());
    }

    #[test]
    fn kl_fc_identity_is_zero() {
        assert_eq!(kl_fc(&[0.0; 4], &Tensor::identity(4)).unwrap(), 0.0);
    }

    #[test]
    fn kl_fc_rejects_bad_factor() {
        let upper = Tensor::matrix(2, 2, vec![1.0, 0.5, 0.0, 1.0]).unwrap();
        assert!(kl_fc(&[0.0, 0.0], &upper).is_err());
        let neg = Tensor::matrix(2, 2, vec![-1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(kl_fc(&[0.0, 0.0], &neg).is_err());
    }

    #[test]
    fn kl_fc_diagonal_matches_mf() {
        let mu = [0.3, -1.1, 0.7];
        let sigma = [0.5, 1.7, 0.9];
        let mut l = Tensor::zeros(&[3, 3]);
        for (i, s) in sigma.iter().enumerate() {
            l.data_mut()[i * 3 + i] = *s;
        }
        let a = kl_fc(&mu, &l).unwrap();
        let b = kl_mf(&mu, &sigma).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn cholesky_from_flat() {
        assert_eq!(build_cholesky(&[0.0; 3]).unwrap(), Tensor::identity(2));
        let (a, b, c) = (0.4, -0.3, 1.2);
        let l = build_cholesky(&[a, b, c]).unwrap();
        assert_eq!(l.data(), &[a.exp(), 0.0, b, c.exp()]);
        assert!(build_cholesky(&[0.0; 4]).is_err());
    }

    #[test]
    fn kl_vtsr_extremes() {
        assert!(kl_vtsr(&[0.25; 4]).unwrap().abs() < 1e-15);
        let mut one_hot = vec![0.0; 40];
        one_hot[7] = 1.0;
        assert!((kl_vtsr(&one_hot).unwrap() - 3.688879454113936).abs() < 1e-12);
        assert!(kl_vtsr(&[0.5, 0.6]).is_err());
    }

    #[test]
    fn temperature_values() {
        assert_eq!(temp_reg_loss(1.0).unwrap(), 0.0);
        assert!((temp_reg_loss(std::f64::consts::E).unwrap() + 1.0).abs() < 1e-15);
        assert!((temp_reg_loss(0.5).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(temp_reg_loss(0.0).is_err());
        assert!((temperature_from_raw(0.0) - 0.693148).abs() < 1e-6);
        assert!((temperature_from_raw(3.0) - 3.048588).abs() < 1e-6);
        assert!(temperature_from_raw(-1e4) >= MIN_TEMPERATURE);
    }
}
