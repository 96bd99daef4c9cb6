//! Channel specifications: forward-noise and feedback-noise covariances,
//! block length and power budget.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::numerics::{eigh, spd_inverse, Cholesky, SymMatrix};

/// Forward noise `W_i = U_i + alpha * U_{i-1}` with unit-variance white `U`.
///
/// Only `|alpha| < 1` is accepted.
pub fn ma1_covariance(alpha: f64, n: usize) -> Result<SymMatrix> {
    if !alpha.is_finite() || alpha.abs() >= 1.0 {
        return Err(Error::InvalidParameter(format!("MA(1) parameter must satisfy |alpha| < 1, got {alpha}")));
    }
    check_order(n)?;
    let mut autocov = vec![0.0; n];
    autocov[0] = 1.0 + alpha * alpha;
    if n > 1 {
        autocov[1] = alpha;
    }
    Ok(toeplitz_unchecked(&autocov))
}

/// `sigma * I_n`. `sigma` is a variance.
pub fn white_covariance(sigma: f64, n: usize) -> Result<SymMatrix> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter(format!("white noise variance must be positive, got {sigma}")));
    }
    check_order(n)?;
    Ok(SymMatrix::scaled_identity(n, sigma))
}

/// Symmetric Toeplitz covariance with `entries[i][j] = autocov[|i - j|]`.
/// Fails unless the result is strictly positive definite.
pub fn toeplitz_covariance(autocov: &[f64]) -> Result<SymMatrix> {
    check_order(autocov.len())?;
    if autocov.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("autocovariance has non-finite entries".into()));
    }
    let m = toeplitz_unchecked(autocov);
    let min = eigh(&m)?.values[0];
    if !(min > 0.0) {
        return Err(Error::NotPositiveDefinite(format!("Toeplitz covariance has minimum eigenvalue {min:.6e}")));
    }
    Ok(m)
}

fn toeplitz_unchecked(autocov: &[f64]) -> SymMatrix {
    let n = autocov.len();
    SymMatrix::symmetrized(nalgebra::DMatrix::from_fn(n, n, |i, j| autocov[i.abs_diff(j)]))
}

fn check_order(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidParameter("block length must be at least 1".into()));
    }
    Ok(())
}

/// Block length, per-use power budget and the two noise covariances.
///
/// Ideal feedback (`K_v = 0`) is not representable here; it has its own bound.
#[derive(Clone, Debug)]
pub struct ChannelSpec {
    n: usize,
    power: f64,
    k_w: SymMatrix,
    k_v: SymMatrix,
    cache: Derived,
}

#[derive(Clone, Debug, Default)]
struct Derived {
    k_w_inv: OnceLock<SymMatrix>,
    k_v_inv: OnceLock<SymMatrix>,
    k_wv: OnceLock<SymMatrix>,
}

impl ChannelSpec {
    pub fn new(power: f64, k_w: SymMatrix, k_v: SymMatrix) -> Result<Self> {
        if !(power > 0.0) || !power.is_finite() {
            return Err(Error::InvalidParameter(format!("power must be positive, got {power}")));
        }
        let n = k_w.order();
        if k_v.order() != n {
            return Err(Error::DimensionMismatch(format!(
                "K_w has order {n} but K_v has order {}",
                k_v.order()
            )));
        }
        Cholesky::new(&k_w).map_err(|e| Error::NotPositiveDefinite(format!("K_w: {e}")))?;
        Cholesky::new(&k_v).map_err(|e| Error::NotPositiveDefinite(format!("K_v: {e}")))?;
        Ok(ChannelSpec { n, power, k_w, k_v, cache: Derived::default() })
    }

    /// MA(1) forward noise with white feedback noise of variance `sigma`.
    pub fn ma1_white(n: usize, power: f64, alpha: f64, sigma: f64) -> Result<Self> {
        Self::new(power, ma1_covariance(alpha, n)?, white_covariance(sigma, n)?)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn power(&self) -> f64 {
        self.power
    }

    /// Total block budget `n * P`.
    pub fn block_budget(&self) -> f64 {
        self.n as f64 * self.power
    }

    pub fn k_w(&self) -> &SymMatrix {
        &self.k_w
    }

    pub fn k_v(&self) -> &SymMatrix {
        &self.k_v
    }

    pub fn k_w_inv(&self) -> &SymMatrix {
        self.cache.k_w_inv.get_or_init(|| spd_inverse(&self.k_w).expect("validated at construction"))
    }

    pub fn k_v_inv(&self) -> &SymMatrix {
        self.cache.k_v_inv.get_or_init(|| spd_inverse(&self.k_v).expect("validated at construction"))
    }

    /// `K_w + K_v`.
    pub fn k_wv(&self) -> &SymMatrix {
        self.cache.k_wv.get_or_init(|| self.k_w.add(&self.k_v))
    }

    /// Same forward noise and budget with a different feedback noise.
    pub fn with_feedback_noise(&self, k_v: SymMatrix) -> Result<Self> {
        Self::new(self.power, self.k_w.clone(), k_v)
    }
}
