//! The four rate programs on a channel: the conditional-directed-information
//! upper bound, the modified-channel lower bound, the ideal-feedback capacity
//! and the open-loop capacity.

use std::fmt;

use nalgebra::DMatrix;

use crate::channel::ChannelSpec;
use crate::error::{Error, Result};
use crate::info::{achievable_rate, conditional_directed_info_rate, power_with_noise, CodingScheme};
use crate::maxdet::{self, AffineMatrixMap, MaxDetInstance, SolveOptions, SolveReport, SolveStatus, VarLayout};
use crate::numerics::{assemble_blocks, chol_logdet2, eigh, StrictLowerTri, SymMatrix};

/// Recovered `K_s` eigenvalues in `[-CLIP_REL * trace/n, 0)` are zeroed.
pub const CLIP_REL: f64 = 1e-7;
/// Largest accepted `|rate - cross_check|`, bits per use.
pub const CROSS_CHECK_TOL: f64 = 1e-5;
/// Relative power overshoot tolerated on a recovered scheme.
pub const POWER_RTOL: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BoundKind {
    Upper,
    Lower,
    IdealFeedback,
    OpenLoop,
}

impl fmt::Display for BoundKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoundKind::Upper => "upper",
            BoundKind::Lower => "lower",
            BoundKind::IdealFeedback => "idealfb",
            BoundKind::OpenLoop => "openloop",
        })
    }
}

#[derive(Clone, Debug)]
pub struct BoundResult {
    pub kind: BoundKind,
    pub rate: f64,
    pub scheme: CodingScheme,
    /// Absent for the closed-form open-loop capacity.
    pub report: Option<SolveReport>,
    /// Rate recomputed from the recovered scheme.
    pub cross_check: f64,
}

fn ident(n: usize) -> DMatrix<f64> {
    DMatrix::identity(n, n)
}

fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(&b.transpose()).sum()
}

fn start_point(layout: &VarLayout, k_base: &SymMatrix, power: f64) -> Vec<f64> {
    let n = layout.n();
    let h = k_base.as_matrix() + ident(n) * (power / 2.0);
    layout.pack(&h, &DMatrix::zeros(n, n))
}

/// Upper bound program:
///
/// ```text
/// maximize  (1/2n) log det [[K_v^-1, B^T], [B, H]] - (1/2n) log det(K_v^-1 K_w)
/// s.t.      tr(H - K_w B^T - B K_w - K_w) <= nP
///           [[H, I+B, B], [(I+B)^T, K_w^-1, 0], [B^T, 0, K_v^-1]] >= 0
/// ```
///
/// The LMI is oriented so that its Schur complement is exactly
/// `K_s = H - (I+B) K_w (I+B)^T - B K_v B^T`.
pub fn upper_bound_instance(chan: &ChannelSpec) -> MaxDetInstance {
    upper_bound_instance_with_layout(chan, VarLayout::new(chan.n()))
}

pub fn upper_bound_instance_with_layout(chan: &ChannelSpec, layout: VarLayout) -> MaxDetInstance {
    let n = chan.n();
    let k_w = chan.k_w().as_matrix().clone();
    let k_w_inv = chan.k_w_inv().as_matrix().clone();
    let k_v_inv = chan.k_v_inv().as_matrix().clone();
    let tr_kw = k_w.trace();

    let l = layout.clone();
    let kvi = k_v_inv.clone();
    let objective = AffineMatrixMap::new(2 * n, move |th| {
        let (h, b) = (l.h_matrix(th), l.b_matrix(th));
        assemble_blocks(&[vec![kvi.clone(), b.transpose()], vec![b, h]])
    });

    let l = layout.clone();
    let kw = k_w.clone();
    let power = move |th: &[f64]| {
        let (h, b) = (l.h_matrix(th), l.b_matrix(th));
        h.trace() - 2.0 * trace_product(&b, &kw) - tr_kw
    };

    let l = layout.clone();
    let lmi = AffineMatrixMap::new(3 * n, move |th| {
        let (h, b) = (l.h_matrix(th), l.b_matrix(th));
        let z = DMatrix::zeros(n, n);
        let ib = ident(n) + &b;
        assemble_blocks(&[
            vec![h, ib.clone(), b.clone()],
            vec![ib.transpose(), k_w_inv.clone(), z.clone()],
            vec![b.transpose(), z, k_v_inv.clone()],
        ])
    });

    let offset = (chol_logdet2(chan.k_w()).expect("K_w is PD") - chol_logdet2(chan.k_v()).expect("K_v is PD")) / (2.0 * n as f64);
    MaxDetInstance {
        start_hint: Some(start_point(&layout, chan.k_w(), chan.power())),
        layout,
        objective,
        objective_offset: offset,
        power: std::sync::Arc::new(power),
        power_budget: chan.block_budget(),
        lmis: vec![lmi],
    }
}

/// Modified-channel program with effective feedback-path noise `k`:
///
/// ```text
/// maximize  (1/2n) log det H - (1/2n) log det K
/// s.t.      tr(H - K B^T - B K - K) <= nP
///           [[H, I+B], [(I+B)^T, K^-1]] >= 0
/// ```
fn modified_channel_instance(k: &SymMatrix, power: f64, layout: VarLayout) -> Result<MaxDetInstance> {
    let n = k.order();
    let k_mat = k.as_matrix().clone();
    let k_inv = crate::numerics::spd_inverse(k)?.into_matrix();
    let tr_k = k_mat.trace();

    let l = layout.clone();
    let objective = AffineMatrixMap::new(n, move |th| l.h_matrix(th));

    let l = layout.clone();
    let power_fn = move |th: &[f64]| {
        let (h, b) = (l.h_matrix(th), l.b_matrix(th));
        h.trace() - 2.0 * trace_product(&b, &k_mat) - tr_k
    };

    let l = layout.clone();
    let lmi = AffineMatrixMap::new(2 * n, move |th| {
        let (h, b) = (l.h_matrix(th), l.b_matrix(th));
        let ib = ident(n) + b;
        assemble_blocks(&[vec![h, ib.clone()], vec![ib.transpose(), k_inv.clone()]])
    });

    Ok(MaxDetInstance {
        start_hint: Some(start_point(&layout, k, power)),
        layout,
        objective,
        objective_offset: chol_logdet2(k)? / (2.0 * n as f64),
        power: std::sync::Arc::new(power_fn),
        power_budget: n as f64 * power,
        lmis: vec![lmi],
    })
}

/// Lower bound: the modified channel with `K_wv = K_w + K_v`.
pub fn lower_bound_instance(chan: &ChannelSpec) -> MaxDetInstance {
    modified_channel_instance(chan.k_wv(), chan.power(), VarLayout::new(chan.n())).expect("K_wv is PD")
}

/// Ideal-feedback capacity: the lower-bound recipe with `K_wv` replaced by `K_w`.
pub fn ideal_fb_instance(chan: &ChannelSpec) -> MaxDetInstance {
    modified_channel_instance(chan.k_w(), chan.power(), VarLayout::new(chan.n())).expect("K_w is PD")
}

/// The ideal-feedback recipe with `B` frozen at zero: open-loop capacity as a
/// max-det program.
pub fn no_feedback_instance(chan: &ChannelSpec) -> MaxDetInstance {
    modified_channel_instance(chan.k_w(), chan.power(), VarLayout::b_frozen(chan.n())).expect("K_w is PD")
}

/// Open-loop capacity by water-filling over the eigenvalues of `K_w`.
pub fn open_loop_capacity(chan: &ChannelSpec) -> Result<BoundResult> {
    let n = chan.n();
    let eig = eigh(chan.k_w())?;
    let powers = water_fill(&eig.values, chan.block_budget());
    let rate = eig.values.iter().zip(&powers).map(|(l, p)| (1.0 + p / l).log2()).sum::<f64>() / (2.0 * n as f64);
    let q = &eig.vectors;
    let k_s = SymMatrix::new(q * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(powers)) * q.transpose())?;
    let scheme = CodingScheme::open_loop(k_s)?;
    let cross_check = achievable_rate(&scheme, chan)?;
    if (rate - cross_check).abs() > CROSS_CHECK_TOL {
        return Err(Error::CrossCheckFailure { rate, recomputed: cross_check });
    }
    Ok(BoundResult { kind: BoundKind::OpenLoop, rate, scheme, report: None, cross_check })
}

/// Powers `max(0, mu - lambda_i)` summing to `total`, for `noise` ascending.
pub fn water_fill(noise: &[f64], total: f64) -> Vec<f64> {
    let n = noise.len();
    let mut level = noise[0] + total;
    let mut prefix = 0.0;
    for k in 1..=n {
        prefix += noise[k - 1];
        let mu = (total + prefix) / k as f64;
        // Adding direction k-1 is consistent when the level covers it.
        if mu > noise[k - 1] {
            level = mu;
        } else {
            break;
        }
    }
    noise.iter().map(|l| (level - l).max(0.0)).collect()
}

/// Recovers `(B, K_s)` from solver variables:
///
/// * `Upper`: `K_s = H - (I+B) K_w (I+B)^T - B K_v B^T`
/// * `Lower`: `K_s = H - (I+B) K_wv (I+B)^T`
/// * `IdealFeedback`: `K_s = H - (I+B) K_w (I+B)^T`
///
/// Small negative eigenvalues from boundary iterates are clipped to zero.
pub fn recover_scheme(kind: BoundKind, chan: &ChannelSpec, h: &SymMatrix, b: &StrictLowerTri) -> Result<CodingScheme> {
    let n = chan.n();
    if h.order() != n || b.order() != n {
        return Err(Error::DimensionMismatch("solver variables do not match the channel".into()));
    }
    let bm = b.to_matrix();
    let ib = ident(n) + &bm;
    let k_s = match kind {
        BoundKind::Upper => h.sub(&chan.k_w().congruence(&ib)).sub(&chan.k_v().congruence(&bm)),
        BoundKind::Lower => h.sub(&chan.k_wv().congruence(&ib)),
        BoundKind::IdealFeedback => h.sub(&chan.k_w().congruence(&ib)),
        BoundKind::OpenLoop => h.sub(chan.k_w()),
    };
    let clipped = clip_psd(&k_s)?;
    CodingScheme::new(b.clone(), clipped)
}

fn clip_psd(k: &SymMatrix) -> Result<SymMatrix> {
    let n = k.order();
    let eig = eigh(k)?;
    let scale = (eig.values.iter().map(|v| v.abs()).sum::<f64>() / n as f64).max(f64::MIN_POSITIVE);
    let thresh = CLIP_REL * scale;
    if eig.values[0] < -thresh {
        return Err(Error::RecoveryFailure(format!(
            "recovered K_s has eigenvalue {:.3e} below -{thresh:.3e}",
            eig.values[0]
        )));
    }
    if eig.values[0] >= 0.0 {
        return Ok(k.clone());
    }
    let vals = nalgebra::DVector::from_iterator(n, eig.values.iter().map(|v| v.max(0.0)));
    let q = &eig.vectors;
    Ok(SymMatrix::symmetrized(q * DMatrix::from_diagonal(&vals) * q.transpose()))
}

/// `(1/2n) log2 det((I+B) K (I+B)^T + K_s) / det K`: the rate of the modified
/// channel with feedback-path noise `K`.
pub fn modified_channel_rate(scheme: &CodingScheme, k: &SymMatrix) -> Result<f64> {
    let n = scheme.order();
    let ib = ident(n) + scheme.b().to_matrix();
    let num = k.congruence(&ib).add(scheme.k_s());
    Ok((chol_logdet2(&num)? - chol_logdet2(k)?) / (2.0 * n as f64))
}

pub fn instance_for(kind: BoundKind, chan: &ChannelSpec) -> Option<MaxDetInstance> {
    match kind {
        BoundKind::Upper => Some(upper_bound_instance(chan)),
        BoundKind::Lower => Some(lower_bound_instance(chan)),
        BoundKind::IdealFeedback => Some(ideal_fb_instance(chan)),
        BoundKind::OpenLoop => None,
    }
}

/// Builds, solves, recovers and cross-checks one bound.
pub fn compute_bound(kind: BoundKind, chan: &ChannelSpec, opts: &SolveOptions) -> Result<BoundResult> {
    let Some(inst) = instance_for(kind, chan) else {
        return open_loop_capacity(chan);
    };
    let report = maxdet::solve(&inst, opts)?;
    if report.status != SolveStatus::Optimal {
        return Err(Error::SolverStopped { status: report.status.to_string(), detail: report.detail.clone() });
    }
    let scheme = recover_scheme(kind, chan, &report.h_opt, &report.b_opt)?;
    let (cross_check, power) = match kind {
        BoundKind::Upper => (conditional_directed_info_rate(&scheme, chan)?, power_with_noise(&scheme, chan.k_wv())),
        BoundKind::Lower => (modified_channel_rate(&scheme, chan.k_wv())?, power_with_noise(&scheme, chan.k_wv())),
        // No feedback noise on the ideal link.
        _ => (modified_channel_rate(&scheme, chan.k_w())?, power_with_noise(&scheme, chan.k_w())),
    };
    if (report.rate - cross_check).abs() > CROSS_CHECK_TOL {
        return Err(Error::CrossCheckFailure { rate: report.rate, recomputed: cross_check });
    }
    if power > chan.power() * (1.0 + POWER_RTOL) {
        return Err(Error::RecoveryFailure(format!("recovered scheme uses power {power} above budget {}", chan.power())));
    }
    Ok(BoundResult { kind, rate: report.rate, scheme, report: Some(report), cross_check })
}
