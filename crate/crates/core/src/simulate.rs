//! Monte Carlo cross-validation of the closed-form measures.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`), a portable generator whose
//! output stream is fixed by its seed. Standard normals use the basic
//! Box-Muller transform on pairs of uniforms; the second value of each pair is
//! cached for the next draw.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::channel::ChannelSpec;
use crate::error::{Error, Result};
use crate::info::{
    achievable_rate, conditional_directed_info_rate, directed_info_rate, message_rate, mutual_info_rate, power_usage,
    CodingScheme,
};
use crate::numerics::{chol_logdet2, eigh, pd_floor, Cholesky, StrictLowerTri, SymMatrix};

/// Seeded uniform and Gaussian source.
#[derive(Clone, Debug)]
pub struct GaussianRng {
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl GaussianRng {
    pub fn seed_from_u64(seed: u64) -> Self {
        GaussianRng { inner: ChaCha8Rng::seed_from_u64(seed), spare: None }
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - U lies in (0, 1], keeping the log finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * PI * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }

    fn normal_vector(&mut self, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| self.standard_normal())
    }
}

/// A lower factor `L` with `L L^T = k`. Cholesky when `k` is PD; the zero
/// matrix gives a zero factor and a PSD but singular `k` gets the symmetric
/// square root.
fn covariance_factor(k: &SymMatrix) -> Result<DMatrix<f64>> {
    let n = k.order();
    if k.as_matrix().iter().all(|&v| v == 0.0) {
        return Ok(DMatrix::zeros(n, n));
    }
    if let Ok(c) = Cholesky::with_floor(k.as_matrix(), pd_floor(k.as_matrix())) {
        return Ok(c.l().clone());
    }
    let eig = eigh(k)?;
    let tol = 1e-9 * k.trace().abs() / n as f64;
    if eig.values[0] < -tol {
        return Err(Error::NotPositiveDefinite(format!("covariance has eigenvalue {:.3e}", eig.values[0])));
    }
    let roots = DVector::from_iterator(n, eig.values.iter().map(|v| v.max(0.0).sqrt()));
    Ok(&eig.vectors * DMatrix::from_diagonal(&roots))
}

/// One block of the model: sources `s, w, v` and the derived `x, y`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSample {
    pub s: DVector<f64>,
    pub w: DVector<f64>,
    pub v: DVector<f64>,
    pub x: DVector<f64>,
    pub y: DVector<f64>,
}

/// Pre-factored sampler for one `(scheme, channel)` pair.
#[derive(Clone, Debug)]
pub struct BlockSampler {
    n: usize,
    l_s: DMatrix<f64>,
    l_w: DMatrix<f64>,
    l_v: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl BlockSampler {
    pub fn new(scheme: &CodingScheme, chan: &ChannelSpec) -> Result<Self> {
        if scheme.order() != chan.n() {
            return Err(Error::DimensionMismatch("scheme and channel orders differ".into()));
        }
        Ok(BlockSampler {
            n: chan.n(),
            l_s: covariance_factor(scheme.k_s())?,
            l_w: covariance_factor(chan.k_w())?,
            l_v: covariance_factor(chan.k_v())?,
            b: scheme.b().to_matrix(),
        })
    }

    pub fn sample(&self, rng: &mut GaussianRng) -> BlockSample {
        let s = &self.l_s * rng.normal_vector(self.n);
        let w = &self.l_w * rng.normal_vector(self.n);
        let v = &self.l_v * rng.normal_vector(self.n);
        let x = &s + &self.b * (&w + &v);
        let y = &x + &w;
        BlockSample { s, w, v, x, y }
    }
}

pub fn sample_block(scheme: &CodingScheme, chan: &ChannelSpec, rng: &mut GaussianRng) -> Result<BlockSample> {
    Ok(BlockSampler::new(scheme, chan)?.sample(rng))
}

#[derive(Clone, Debug)]
pub struct McEstimate {
    pub rate_estimate: f64,
    /// Closed-form rate for the same scheme.
    pub analytic: f64,
    pub num_samples: usize,
    pub seed: u64,
    /// Condition number of the empirical output covariance.
    pub plugin_cov_condition: f64,
}

/// Running mean and scatter for sample covariance estimation.
struct CovAccumulator {
    count: usize,
    mean: DVector<f64>,
    scatter: DMatrix<f64>,
}

impl CovAccumulator {
    fn new(n: usize) -> Self {
        CovAccumulator { count: 0, mean: DVector::zeros(n), scatter: DMatrix::zeros(n, n) }
    }

    fn push(&mut self, x: &DVector<f64>) {
        self.count += 1;
        let delta = x - &self.mean;
        self.mean += &delta / self.count as f64;
        let delta2 = x - &self.mean;
        self.scatter += &delta * delta2.transpose();
    }

    fn covariance(&self) -> SymMatrix {
        SymMatrix::symmetrized(&self.scatter / (self.count as f64 - 1.0))
    }
}

/// Plug-in estimate of `(1/n) [h(Y) - h(Y | S)]` from `num_samples` blocks.
///
/// Given `s`, the conditional mean of `y` is `s` itself, so `h(Y | S)` is
/// estimated from the empirical covariance of `y - s`.
pub fn mc_rate(scheme: &CodingScheme, chan: &ChannelSpec, num_samples: usize, seed: u64) -> Result<McEstimate> {
    let n = chan.n();
    if num_samples < 10 * n {
        return Err(Error::InvalidParameter(format!("need at least {} samples for block length {n}, got {num_samples}", 10 * n)));
    }
    let sampler = BlockSampler::new(scheme, chan)?;
    let mut rng = GaussianRng::seed_from_u64(seed);
    let mut acc_y = CovAccumulator::new(n);
    let mut acc_r = CovAccumulator::new(n);
    for _ in 0..num_samples {
        let blk = sampler.sample(&mut rng);
        acc_r.push(&(&blk.y - &blk.s));
        acc_y.push(&blk.y);
    }
    let cov_y = acc_y.covariance();
    let cov_r = acc_r.covariance();
    let rank = |e: Error| Error::RankDeficiency(e.to_string());
    let ld_y = chol_logdet2(&cov_y).map_err(rank)?;
    let ld_r = chol_logdet2(&cov_r).map_err(rank)?;
    let ev = eigh(&cov_y)?.values;
    Ok(McEstimate {
        rate_estimate: (ld_y - ld_r) / (2.0 * n as f64),
        analytic: achievable_rate(scheme, chan)?,
        num_samples,
        seed,
        plugin_cov_condition: ev[n - 1] / ev[0],
    })
}

/// The four quantities `I(M;Y^n) <= I(X^n->Y^n|V^n) <= I(X^n->Y^n) <= I(X^n;Y^n)`,
/// per use.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LemmaChain {
    pub message: f64,
    pub conditional_directed: f64,
    pub directed: f64,
    pub mutual: f64,
    pub pass: bool,
}

pub const CHAIN_SLACK: f64 = 1e-9;

pub fn lemma_chain_check(scheme: &CodingScheme, chan: &ChannelSpec) -> Result<LemmaChain> {
    let message = message_rate(scheme, chan)?;
    let conditional_directed = conditional_directed_info_rate(scheme, chan)?;
    let directed = directed_info_rate(scheme, chan)?;
    let mutual = mutual_info_rate(scheme, chan)?;
    let pass = message <= conditional_directed + CHAIN_SLACK
        && conditional_directed <= directed + CHAIN_SLACK
        && directed <= mutual + CHAIN_SLACK;
    Ok(LemmaChain { message, conditional_directed, directed, mutual, pass })
}

/// Random scheme using exactly 90% of the power budget: `B` entries uniform
/// in `[-0.5, 0.5]`, `K_s = A A^T + 1e-6 I` with Gaussian `A`, then `(K_s, B)`
/// rescaled jointly.
pub fn random_feasible_scheme(chan: &ChannelSpec, rng: &mut GaussianRng) -> CodingScheme {
    let n = chan.n();
    let free = (0..StrictLowerTri::free_len(n)).map(|_| rng.uniform_range(-0.5, 0.5)).collect();
    let b = StrictLowerTri::from_free(n, free).expect("length matches");
    let a = DMatrix::from_fn(n, n, |_, _| rng.standard_normal());
    let k_s = SymMatrix::symmetrized(&a * a.transpose() + DMatrix::identity(n, n) * 1e-6);
    let raw = CodingScheme::new(b, k_s).expect("A A^T + eps I is PD");
    let used = power_usage(&raw, chan).expect("orders match");
    raw.scaled_power((0.9 * chan.power() / used).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn n2_fixture() -> (CodingScheme, ChannelSpec) {
        let chan = ChannelSpec::ma1_white(2, 10.0, 0.5, 0.5).unwrap();
        let scheme = CodingScheme::new(
            StrictLowerTri::from_free(2, vec![0.8]).unwrap(),
            SymMatrix::from_rows(&[&[4.0, 1.0], &[1.0, 3.0]]).unwrap(),
        )
        .unwrap();
        (scheme, chan)
    }

    #[test]
    fn gaussian_source_is_deterministic_and_standard() {
        let mut a = GaussianRng::seed_from_u64(7);
        let mut b = GaussianRng::seed_from_u64(7);
        let xs: Vec<f64> = (0..1000).map(|_| a.standard_normal()).collect();
        let ys: Vec<f64> = (0..1000).map(|_| b.standard_normal()).collect();
        assert_eq!(xs, ys);
        let mut r = GaussianRng::seed_from_u64(1);
        let n = 200_000;
        let draws: Vec<f64> = (0..n).map(|_| r.standard_normal()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 0.02);
    }

    #[test]
    fn zero_message_gives_noise_only_output() {
        let chan = ChannelSpec::ma1_white(3, 1.0, 0.5, 1e-9).unwrap();
        let scheme = CodingScheme::open_loop(SymMatrix::zeros(3)).unwrap();
        let blk = sample_block(&scheme, &chan, &mut GaussianRng::seed_from_u64(3)).unwrap();
        assert_eq!(blk.s, DVector::zeros(3));
        assert_eq!(blk.y, blk.w);
    }

    #[test]
    fn fixed_seed_gives_identical_blocks() {
        let (scheme, chan) = n2_fixture();
        let a = sample_block(&scheme, &chan, &mut GaussianRng::seed_from_u64(11)).unwrap();
        let b = sample_block(&scheme, &chan, &mut GaussianRng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn output_mean_is_centered() {
        let (scheme, chan) = n2_fixture();
        let sampler = BlockSampler::new(&scheme, &chan).unwrap();
        let mut rng = GaussianRng::seed_from_u64(5);
        let m = 100_000;
        let mut sum = DVector::zeros(2);
        for _ in 0..m {
            sum += sampler.sample(&mut rng).y;
        }
        let cov_y = crate::info::stacked_covariance(&scheme, &chan).unwrap().cov_of(crate::info::Signal::Y);
        for i in 0..2 {
            let bound = 4.0 * (cov_y[(i, i)] / m as f64).sqrt();
            assert!((sum[i] / m as f64).abs() <= bound);
        }
    }

    #[test]
    fn sampled_forward_noise_matches_covariance() {
        let chan = ChannelSpec::ma1_white(5, 1.0, 0.5, 1.0).unwrap();
        let scheme = CodingScheme::open_loop(SymMatrix::identity(5)).unwrap();
        let sampler = BlockSampler::new(&scheme, &chan).unwrap();
        let mut rng = GaussianRng::seed_from_u64(9);
        let mut acc = CovAccumulator::new(5);
        for _ in 0..100_000 {
            acc.push(&sampler.sample(&mut rng).w);
        }
        assert!(acc.covariance().rel_frobenius_err(chan.k_w()) < 0.05);
    }

    #[test]
    fn singular_psd_message_covariance_is_sampled() {
        let chan = ChannelSpec::ma1_white(2, 1.0, 0.5, 1.0).unwrap();
        let rank_one = SymMatrix::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]).unwrap();
        let scheme = CodingScheme::open_loop(rank_one).unwrap();
        let blk = sample_block(&scheme, &chan, &mut GaussianRng::seed_from_u64(2)).unwrap();
        assert_abs_diff_eq!(blk.s[1], 2.0 * blk.s[0], epsilon = 1e-12);
    }

    #[test]
    fn mc_rate_examples() {
        let chan = ChannelSpec::new(10.0, SymMatrix::identity(1), SymMatrix::identity(1)).unwrap();
        let scheme = CodingScheme::open_loop(SymMatrix::from_diagonal(&[10.0]).unwrap()).unwrap();
        let est = mc_rate(&scheme, &chan, 100_000, 42).unwrap();
        assert!((est.rate_estimate - 0.5 * 11f64.log2()).abs() < 0.02, "{}", est.rate_estimate);

        let zero = CodingScheme::open_loop(SymMatrix::zeros(1)).unwrap();
        assert!(mc_rate(&zero, &chan, 100_000, 42).unwrap().rate_estimate <= 0.01);

        let (scheme, chan) = n2_fixture();
        let est = mc_rate(&scheme, &chan, 100_000, 42).unwrap();
        assert!((est.rate_estimate - est.analytic).abs() < 0.05);
        assert!(est.plugin_cov_condition >= 1.0);
    }

    #[test]
    fn mc_rate_requires_enough_samples() {
        let (scheme, chan) = n2_fixture();
        assert!(matches!(mc_rate(&scheme, &chan, 19, 1), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn random_scheme_properties() {
        let chan = ChannelSpec::ma1_white(4, 10.0, 0.5, 0.3).unwrap();
        let a = random_feasible_scheme(&chan, &mut GaussianRng::seed_from_u64(1));
        let b = random_feasible_scheme(&chan, &mut GaussianRng::seed_from_u64(1));
        assert_eq!(a, b);
        assert_abs_diff_eq!(power_usage(&a, &chan).unwrap(), 9.0, epsilon = 1e-9);
        assert!(CodingScheme::new(a.b().clone(), a.k_s().clone()).is_ok());
    }

    #[test]
    fn chain_examples() {
        let chan = ChannelSpec::new(10.0, SymMatrix::identity(1), SymMatrix::identity(1)).unwrap();
        let scheme = CodingScheme::open_loop(SymMatrix::from_diagonal(&[10.0]).unwrap()).unwrap();
        let c = lemma_chain_check(&scheme, &chan).unwrap();
        assert!(c.pass);
        for v in [c.conditional_directed, c.directed, c.mutual] {
            assert_abs_diff_eq!(c.message, v, epsilon = 1e-13);
        }

        let chan = ChannelSpec::ma1_white(3, 10.0, 0.7, 0.5).unwrap();
        let ks = SymMatrix::from_rows(&[&[2.0, 0.5, 0.2], &[0.5, 3.0, 0.4], &[0.2, 0.4, 1.0]]).unwrap();
        let c = lemma_chain_check(&CodingScheme::open_loop(ks).unwrap(), &chan).unwrap();
        assert!(c.pass);
        assert_abs_diff_eq!(c.message, c.mutual, epsilon = 1e-12);
    }
}
