//! Closed-form Gaussian information quantities for a linear feedback coding
//! scheme on a [`ChannelSpec`].
//!
//! The signal model is
//!
//! ```text
//! x = s + B (w + v)
//! y = x + w = s + (I + B) w + B v
//! ```
//!
//! with `s ~ N(0, K_s)`, `w ~ N(0, K_w)`, `v ~ N(0, K_v)` independent. All
//! rates are in bits per channel use and carry the `1/2` of the Gaussian
//! entropy formula.

use nalgebra::DMatrix;

use crate::channel::ChannelSpec;
use crate::error::{Error, Result};
use crate::numerics::{chol_logdet2, min_eig_psd_check, pd_floor, schur_complement, Cholesky, StrictLowerTri, SymMatrix};

/// Feedback encoding matrix and message covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct CodingScheme {
    b: StrictLowerTri,
    k_s: SymMatrix,
}

impl CodingScheme {
    /// Validates orders and `K_s >= 0` up to `1e-9 * trace / n`.
    pub fn new(b: StrictLowerTri, k_s: SymMatrix) -> Result<Self> {
        if b.order() != k_s.order() {
            return Err(Error::DimensionMismatch(format!(
                "B has order {} but K_s has order {}",
                b.order(),
                k_s.order()
            )));
        }
        let tol = 1e-9 * k_s.trace().abs() / k_s.order() as f64;
        if !min_eig_psd_check(&k_s, tol) {
            return Err(Error::NotPositiveDefinite("message covariance K_s is not PSD".into()));
        }
        Ok(CodingScheme { b, k_s })
    }

    /// Open-loop scheme: `B = 0`.
    pub fn open_loop(k_s: SymMatrix) -> Result<Self> {
        let n = k_s.order();
        Self::new(StrictLowerTri::zeros(n), k_s)
    }

    pub fn order(&self) -> usize {
        self.k_s.order()
    }

    pub fn b(&self) -> &StrictLowerTri {
        &self.b
    }

    pub fn k_s(&self) -> &SymMatrix {
        &self.k_s
    }

    /// Scales `K_s` by `c^2` and `B` by `c`, which scales the input power by `c^2`.
    pub fn scaled_power(&self, c: f64) -> CodingScheme {
        CodingScheme { b: self.b.scale(c), k_s: self.k_s.scale(c * c) }
    }
}

fn check_orders(scheme: &CodingScheme, chan: &ChannelSpec) -> Result<()> {
    if scheme.order() != chan.n() {
        return Err(Error::DimensionMismatch(format!(
            "scheme has order {} but channel has block length {}",
            scheme.order(),
            chan.n()
        )));
    }
    Ok(())
}

/// Which Gaussian vector of the model a row refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Signal {
    S,
    W,
    V,
    X,
    Y,
}

/// Joint law of `(S, W, V, X, Y)`: the block-diagonal covariance of the
/// independent sources plus the linear maps producing `X` and `Y`.
#[derive(Clone, Debug)]
pub struct JointCov {
    n: usize,
    base: DMatrix<f64>,
    b: DMatrix<f64>,
}

pub fn stacked_covariance(scheme: &CodingScheme, chan: &ChannelSpec) -> Result<JointCov> {
    check_orders(scheme, chan)?;
    let n = chan.n();
    let mut base = DMatrix::zeros(3 * n, 3 * n);
    base.view_mut((0, 0), (n, n)).copy_from(scheme.k_s().as_matrix());
    base.view_mut((n, n), (n, n)).copy_from(chan.k_w().as_matrix());
    base.view_mut((2 * n, 2 * n), (n, n)).copy_from(chan.k_v().as_matrix());
    Ok(JointCov { n, base, b: scheme.b().to_matrix() })
}

impl JointCov {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Row of the transfer map from `(s, w, v)` to the `i`-th entry of `sig`.
    fn transfer_row(&self, sig: Signal, i: usize) -> Vec<f64> {
        let n = self.n;
        let mut row = vec![0.0; 3 * n];
        match sig {
            Signal::S => row[i] = 1.0,
            Signal::W => row[n + i] = 1.0,
            Signal::V => row[2 * n + i] = 1.0,
            Signal::X | Signal::Y => {
                row[i] = 1.0;
                for j in 0..i {
                    row[n + j] = self.b[(i, j)];
                    row[2 * n + j] = self.b[(i, j)];
                }
                if sig == Signal::Y {
                    row[n + i] += 1.0;
                }
            }
        }
        row
    }

    /// Covariance of the sub-vector listed in `rows`, as `T * base * T^T`.
    pub fn covariance(&self, rows: &[(Signal, usize)]) -> DMatrix<f64> {
        let m = rows.len();
        let t = DMatrix::from_fn(m, 3 * self.n, |r, c| {
            let (sig, i) = rows[r];
            self.transfer_row(sig, i)[c]
        });
        let c = &t * &self.base * t.transpose();
        (&c + c.transpose()) * 0.5
    }

    pub fn signal_rows(sig: Signal, n: usize) -> Vec<(Signal, usize)> {
        (0..n).map(|i| (sig, i)).collect()
    }

    pub fn cov_of(&self, sig: Signal) -> DMatrix<f64> {
        self.covariance(&Self::signal_rows(sig, self.n))
    }
}

/// `(I + B) K (I + B)^T`.
fn through_feedback(b: &DMatrix<f64>, k: &SymMatrix) -> SymMatrix {
    let n = b.nrows();
    k.congruence(&(DMatrix::identity(n, n) + b))
}

/// `R_n = (1/2n) [log det(A + K_s) - log det A]` with
/// `A = (I+B) K_w (I+B)^T + B K_v B^T`, i.e. `(1/n) I(M; Y^n)`.
pub fn achievable_rate(scheme: &CodingScheme, chan: &ChannelSpec) -> Result<f64> {
    check_orders(scheme, chan)?;
    let b = scheme.b().to_matrix();
    let noise = through_feedback(&b, chan.k_w()).add(&chan.k_v().congruence(&b));
    let total = noise.add(scheme.k_s());
    Ok((chol_logdet2(&total)? - chol_logdet2(&noise)?) / (2.0 * chan.n() as f64))
}

/// `I(M; Y^n) / n`; the same number as [`achievable_rate`].
pub fn message_rate(scheme: &CodingScheme, chan: &ChannelSpec) -> Result<f64> {
    achievable_rate(scheme, chan)
}

/// Average input power per use `(1/n) tr(K_s + B (K_w + K_v) B^T)`.
pub fn power_usage(scheme: &CodingScheme, chan: &ChannelSpec) -> Result<f64> {
    check_orders(scheme, chan)?;
    Ok(power_with_noise(scheme, chan.k_wv()))
}

/// `(1/n) tr(K_s + B K B^T)` for an arbitrary feedback-path noise `K`.
pub(crate) fn power_with_noise(scheme: &CodingScheme, k: &SymMatrix) -> f64 {
    let b = scheme.b().to_matrix();
    (scheme.k_s().trace() + k.congruence(&b).trace()) / scheme.order() as f64
}

/// `I(X^n -> Y^n | V^n) / n = (1/2n) log det((I+B) K_w (I+B)^T + K_s) / det K_w`.
/// Does not depend on `K_v`.
pub fn conditional_directed_info_rate(scheme: &CodingScheme, chan: &ChannelSpec) -> Result<f64> {
    check_orders(scheme, chan)?;
    let b = scheme.b().to_matrix();
    let num = through_feedback(&b, chan.k_w()).add(scheme.k_s());
    Ok((chol_logdet2(&num)? - chol_logdet2(chan.k_w())?) / (2.0 * chan.n() as f64))
}

/// `I(X^n -> Y^n) / n = (1/n) sum_i [h(Y_i | Y^{i-1}) - h(Y_i | Y^{i-1}, X^i)]`.
///
/// Each conditional variance is a Schur complement of a sub-covariance of the
/// joint law. Both families fall out of one Cholesky factorization each: the
/// pivots of `cov(Y_1, ..., Y_n)` are `var(Y_i | Y^{i-1})`, and the `Y` pivots
/// of `cov(X_1, Y_1, X_2, Y_2, ...)` are `var(Y_i | X^i, Y^{i-1})`.
pub fn directed_info_rate(scheme: &CodingScheme, chan: &ChannelSpec) -> Result<f64> {
    let joint = stacked_covariance(scheme, chan)?;
    let n = chan.n();
    let cov_y = joint.cov_of(Signal::Y);
    let marginal = Cholesky::with_floor(&cov_y, pd_floor(&cov_y))?.pivots();
    let interleaved_rows: Vec<(Signal, usize)> = (0..n).flat_map(|i| [(Signal::X, i), (Signal::Y, i)]).collect();
    let cov_xy = joint.covariance(&interleaved_rows);
    let conditional = Cholesky::with_floor(&cov_xy, pd_floor(&cov_xy))?.pivots();
    let total: f64 = (0..n).map(|i| (marginal[i] / conditional[2 * i + 1]).log2()).sum();
    Ok(total / (2.0 * n as f64))
}

/// `I(X^n; Y^n) / n = (1/2n) [log det cov(Y) - log det cov(Y | X)]`.
///
/// A singular `cov(X)` is reported, not regularized.
pub fn mutual_info_rate(scheme: &CodingScheme, chan: &ChannelSpec) -> Result<f64> {
    let joint = stacked_covariance(scheme, chan)?;
    let n = chan.n();
    let rows: Vec<(Signal, usize)> =
        JointCov::signal_rows(Signal::Y, n).into_iter().chain(JointCov::signal_rows(Signal::X, n)).collect();
    let cov = SymMatrix::symmetrized(joint.covariance(&rows));
    let y_given_x = schur_complement(&cov, n)?;
    let cov_y = SymMatrix::symmetrized(joint.cov_of(Signal::Y));
    Ok((chol_logdet2(&cov_y)? - chol_logdet2(&y_given_x)?) / (2.0 * n as f64))
}
