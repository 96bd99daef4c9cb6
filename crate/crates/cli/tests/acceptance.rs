//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use fbbounds::bounds::{no_feedback_instance, upper_bound_instance};
use fbbounds::info::{achievable_rate, conditional_directed_info_rate, power_usage};
use fbbounds::maxdet::{solve, VarLayout};
use fbbounds::numerics::{chol_logdet2, eigh};
use fbbounds::simulate::{lemma_chain_check, mc_rate, random_feasible_scheme, GaussianRng};
use fbbounds::{compute_bound, open_loop_capacity, BoundKind, ChannelSpec, CodingScheme, SolveOptions, SolveStatus, StrictLowerTri, SymMatrix};
use fbbounds_cli::{run_sweep, SigmaGrid, Spacing, SweepConfig};
use nalgebra::DMatrix;

type Recovered = Vec<(String, CodingScheme, ChannelSpec)>;

struct Check {
    pass: bool,
    detail: String,
}

impl Check {
    fn new(pass: bool, detail: impl Into<String>) -> Check {
        Check { pass, detail: detail.into() }
    }
}

fn half_log2(x: f64) -> f64 {
    0.5 * x.log2()
}

fn tight() -> SolveOptions {
    SolveOptions { tol_gap: 1e-8, ..SolveOptions::default() }
}

fn optimal(kind: BoundKind, chan: &ChannelSpec, opts: &SolveOptions) -> fbbounds::BoundResult {
    let r = compute_bound(kind, chan, opts).unwrap_or_else(|e| panic!("{kind}: {e}"));
    if let Some(rep) = &r.report {
        assert_eq!(rep.status, SolveStatus::Optimal, "{kind}");
    }
    r
}

fn random_spd(n: usize, rng: &mut GaussianRng, ridge: f64) -> SymMatrix {
    let a = DMatrix::from_fn(n, n, |_, _| rng.standard_normal());
    SymMatrix::new(&a * a.transpose() + DMatrix::identity(n, n) * ridge).unwrap()
}

/// Rate of the best power allocation over noise eigenvalues `noise` with
/// `total` power to spend, as `sum log2(max(level, noise_i))`.
fn water_filled_logdet2(noise: &[f64], total: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, noise.iter().cloned().fold(0.0, f64::max) + total);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let used: f64 = noise.iter().map(|&l| (mid - l).max(0.0)).sum();
        if used > total {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    noise.iter().map(|&l| l.max(lo).log2()).sum()
}

fn criterion_1(_: &mut Recovered) -> Check {
    let opts = SolveOptions::default();
    let chan = ChannelSpec::ma1_white(1, 10.0, 0.0, 1.0).unwrap();
    let expect = half_log2(11.0);
    let upper = optimal(BoundKind::Upper, &chan, &opts).rate;
    let ideal = optimal(BoundKind::IdealFeedback, &chan, &opts).rate;
    let open = open_loop_capacity(&chan).unwrap().rate;
    let lower = optimal(BoundKind::Lower, &chan, &opts).rate;
    let err = [upper, ideal, open].iter().map(|r| (r - expect).abs()).fold(0.0, f64::max);
    let lower_err = (lower - half_log2(6.0)).abs();
    Check::new(
        err <= 1e-5 && lower_err <= 1e-5,
        format!("upper {upper:.8} idealfb {ideal:.8} openloop {open:.8} vs {expect:.8}; lower {lower:.8} vs {:.8}", half_log2(6.0)),
    )
}

fn criterion_2(_: &mut Recovered) -> Check {
    let opts = SolveOptions::default();
    let mut worst: f64 = 0.0;
    let mut notes = Vec::new();
    let diag = ChannelSpec::new(2.0, SymMatrix::from_diagonal(&[1.0, 3.0]).unwrap(), SymMatrix::identity(2)).unwrap();
    let ma1 = ChannelSpec::ma1_white(10, 10.0, 0.5, 1.0).unwrap();
    for (name, chan) in [("diag(1,3)", &diag), ("ma1", &ma1)] {
        let n = chan.n();
        let rep = solve(&no_feedback_instance(chan), &opts).unwrap();
        let noise = eigh(chan.k_w()).unwrap().values;
        let oracle = (water_filled_logdet2(&noise, n as f64 * chan.power()) - chol_logdet2(chan.k_w()).unwrap()) / (2.0 * n as f64);
        worst = worst.max((rep.rate - oracle).abs());
        if rep.status != SolveStatus::Optimal {
            worst = f64::INFINITY;
        }
        notes.push(format!("{name}: program {:.8} water-fill {oracle:.8}", rep.rate));
        if name == "diag(1,3)" {
            worst = worst.max((rep.rate - 0.60376).abs());
        }
    }
    Check::new(worst <= 1e-5, notes.join("; "))
}

fn criterion_3(found: &mut Recovered) -> Check {
    let opts = SolveOptions::default();
    let chan = ChannelSpec::ma1_white(5, 10.0, 0.5, 1e-8).unwrap();
    let ideal = optimal(BoundKind::IdealFeedback, &chan, &opts);
    let upper = optimal(BoundKind::Upper, &chan, &opts);
    let lower = optimal(BoundKind::Lower, &chan, &opts);
    let du = (upper.rate - ideal.rate).abs();
    let dl = (lower.rate - ideal.rate).abs();
    for r in [upper, lower, ideal] {
        found.push((format!("c3 {}", r.kind), r.scheme, chan.clone()));
    }
    Check::new(du <= 1e-3 && dl <= 1e-3, format!("|upper - idealfb| {du:.2e}, |lower - idealfb| {dl:.2e}"))
}

fn criterion_4(found: &mut Recovered) -> Check {
    let chan = ChannelSpec::ma1_white(5, 10.0, 0.5, 1e6).unwrap();
    let open = open_loop_capacity(&chan).unwrap().rate;
    let upper = optimal(BoundKind::Upper, &chan, &tight());
    let gain = upper.rate - open;
    let b_norm = upper.scheme.b().frobenius_norm();
    found.push(("c4 upper".into(), upper.scheme, chan));
    Check::new((0.0..=1e-3).contains(&gain) && b_norm <= 1e-2, format!("upper - openloop {gain:.3e}, |B*|_F {b_norm:.3e}"))
}

fn criterion_5(found: &mut Recovered) -> Check {
    let opts = SolveOptions::default();
    let sigmas: Vec<f64> = (0..12).map(|i| 10f64.powf(-3.0 + 5.0 * i as f64 / 11.0)).collect();
    let mut failures = Vec::new();
    for alpha in [0.1, 0.5, 0.9] {
        let mut prev: Option<(f64, f64)> = None;
        for &sigma in &sigmas {
            let chan = ChannelSpec::ma1_white(10, 10.0, alpha, sigma).unwrap();
            let upper = optimal(BoundKind::Upper, &chan, &opts);
            let lower = optimal(BoundKind::Lower, &chan, &opts);
            if lower.rate > upper.rate + 2e-6 {
                failures.push(format!("alpha {alpha} sigma {sigma:.3e}: lower above upper"));
            }
            if let Some((pu, pl)) = prev {
                if upper.rate > pu + 2e-6 || lower.rate > pl + 2e-6 {
                    failures.push(format!("alpha {alpha} sigma {sigma:.3e}: increase"));
                }
            }
            prev = Some((upper.rate, lower.rate));
            found.push((format!("c5 upper {alpha} {sigma:.1e}"), upper.scheme, chan.clone()));
            found.push((format!("c5 lower {alpha} {sigma:.1e}"), lower.scheme, chan));
        }
    }
    let detail = if failures.is_empty() { "72 solves bracketed and monotone".to_string() } else { failures.join("; ") };
    Check::new(failures.is_empty(), detail)
}

fn criterion_6(found: &mut Recovered) -> Check {
    let mut rng = GaussianRng::seed_from_u64(2024);
    let mut failures = Vec::new();
    for i in 0..100 {
        let n = [2, 3, 5][i % 3];
        let alpha = rng.uniform_range(-0.95, 0.95);
        let sigma = 10f64.powf(rng.uniform_range(-4.0, 2.0));
        let chan = ChannelSpec::ma1_white(n, rng.uniform_range(0.5, 20.0), alpha, sigma).unwrap();
        let scheme = random_feasible_scheme(&chan, &mut rng);
        let chain = lemma_chain_check(&scheme, &chan).unwrap();
        if !chain.pass {
            failures.push(format!("random #{i}: {chain:?}"));
        }
    }
    for (label, scheme, chan) in found.iter() {
        match lemma_chain_check(scheme, chan) {
            Ok(chain) if chain.pass => {}
            other => failures.push(format!("{label}: {other:?}")),
        }
    }
    let detail = if failures.is_empty() {
        format!("100 random schemes and {} recovered schemes", found.len())
    } else {
        failures.join("; ")
    };
    Check::new(failures.is_empty(), detail)
}

/// Best upper objective for a fixed feedback gain `b` at position (1,0): the
/// remaining `K_s` is water-filled against `(I+B) K_w (I+B)^T` with what is
/// left of the budget after `B (K_w + K_v) B^T`.
fn upper_at_b(chan: &ChannelSpec, b: f64) -> f64 {
    let kwv = chan.k_wv().as_matrix();
    let left = 2.0 * chan.power() - b * b * kwv[(0, 0)];
    if left < 0.0 {
        return f64::NEG_INFINITY;
    }
    let ib = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, b, 1.0]);
    let fwd = SymMatrix::new(&ib * chan.k_w().as_matrix() * ib.transpose()).unwrap();
    let noise = eigh(&fwd).unwrap().values;
    (water_filled_logdet2(&noise, left) - chol_logdet2(chan.k_w()).unwrap()) / 4.0
}

fn grid_oracle(chan: &ChannelSpec) -> f64 {
    let b_max = (2.0 * chan.power() / chan.k_wv().as_matrix()[(0, 0)]).sqrt();
    let steps = 4000;
    let grid: Vec<f64> = (0..=steps).map(|i| -b_max + 2.0 * b_max * i as f64 / steps as f64).collect();
    let best = (0..grid.len()).max_by(|&i, &j| upper_at_b(chan, grid[i]).total_cmp(&upper_at_b(chan, grid[j]))).unwrap();
    let (mut lo, mut hi) = (grid[best.saturating_sub(1)], grid[(best + 1).min(steps)]);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..100 {
        let (x1, x2) = (hi - phi * (hi - lo), lo + phi * (hi - lo));
        if upper_at_b(chan, x1) < upper_at_b(chan, x2) {
            lo = x1;
        } else {
            hi = x2;
        }
    }
    upper_at_b(chan, 0.5 * (lo + hi)).max(upper_at_b(chan, grid[best]))
}

/// Upper objective at a raw point `(l11, l21, l22, b)`: `K_s = L L^T`, and
/// `(L, b)` is rescaled jointly so the power budget is met exactly.
fn upper_direct(chan: &ChannelSpec, x: &[f64]) -> f64 {
    let l = DMatrix::from_row_slice(2, 2, &[x[0], 0.0, x[1], x[2]]);
    let k_s = &l * l.transpose() + DMatrix::identity(2, 2) * 1e-12;
    let raw = CodingScheme::new(StrictLowerTri::from_free(2, vec![x[3]]).unwrap(), SymMatrix::new(k_s).unwrap()).unwrap();
    let used = power_usage(&raw, chan).unwrap();
    let scheme = raw.scaled_power((chan.power() / used).sqrt());
    conditional_directed_info_rate(&scheme, chan).unwrap_or(f64::NEG_INFINITY)
}

/// Plain Nelder-Mead maximization.
fn nelder_mead(f: impl Fn(&[f64]) -> f64, start: &[f64], scale: f64, iters: usize) -> f64 {
    let d = start.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = (0..=d)
        .map(|i| {
            let mut p = start.to_vec();
            if i > 0 {
                p[i - 1] += scale;
            }
            let v = f(&p);
            (p, v)
        })
        .collect();
    for _ in 0..iters {
        simplex.sort_by(|a, b| b.1.total_cmp(&a.1));
        let centroid: Vec<f64> = (0..d).map(|k| simplex[..d].iter().map(|p| p.0[k]).sum::<f64>() / d as f64).collect();
        let toward = |t: f64| -> Vec<f64> { centroid.iter().zip(&simplex[d].0).map(|(c, w)| c + t * (w - c)).collect() };
        let refl = toward(-1.0);
        let fr = f(&refl);
        if fr > simplex[0].1 {
            let exp = toward(-2.0);
            let fe = f(&exp);
            simplex[d] = if fe > fr { (exp, fe) } else { (refl, fr) };
        } else if fr > simplex[d - 1].1 {
            simplex[d] = (refl, fr);
        } else {
            let con = toward(0.5);
            let fc = f(&con);
            if fc > simplex[d].1 {
                simplex[d] = (con, fc);
            } else {
                let best = simplex[0].0.clone();
                for p in simplex.iter_mut().skip(1) {
                    p.0 = best.iter().zip(&p.0).map(|(b, x)| b + 0.5 * (x - b)).collect();
                    p.1 = f(&p.0);
                }
            }
        }
    }
    simplex.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max)
}

fn criterion_7(_: &mut Recovered) -> Check {
    let mut rng = GaussianRng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    let mut notes = Vec::new();
    for _ in 0..3 {
        let k_w = random_spd(2, &mut rng, 0.1);
        let k_v = random_spd(2, &mut rng, 0.05).scale(10f64.powf(rng.uniform_range(-2.0, 1.0)));
        let chan = ChannelSpec::new(rng.uniform_range(1.0, 10.0), k_w, k_v).unwrap();
        let solver = optimal(BoundKind::Upper, &chan, &SolveOptions::default()).rate;
        let grid = grid_oracle(&chan);
        let direct = (0..6)
            .map(|_| {
                let start: Vec<f64> = (0..4).map(|_| rng.standard_normal()).collect();
                nelder_mead(|x| upper_direct(&chan, x), &start, 0.5, 3000)
            })
            .fold(f64::NEG_INFINITY, f64::max);
        worst = worst.max((solver - grid).abs()).max((solver - direct).abs());
        notes.push(format!("solver {solver:.6} grid {grid:.6} direct {direct:.6}"));
    }
    Check::new(worst <= 1e-3, notes.join("; "))
}

fn criterion_8(_: &mut Recovered) -> Check {
    let chan = ChannelSpec::ma1_white(2, 10.0, 0.5, 0.5).unwrap();
    let scheme = CodingScheme::new(
        StrictLowerTri::from_free(2, vec![0.8]).unwrap(),
        SymMatrix::from_rows(&[&[4.0, 1.0], &[1.0, 3.0]]).unwrap(),
    )
    .unwrap();
    let a = mc_rate(&scheme, &chan, 100_000, 11).unwrap();
    let b = mc_rate(&scheme, &chan, 100_000, 11).unwrap();
    let analytic = achievable_rate(&scheme, &chan).unwrap();
    let err = (a.rate_estimate - analytic).abs();
    let same = a.rate_estimate.to_bits() == b.rate_estimate.to_bits();
    Check::new(err <= 0.05 && same, format!("mc {:.5} analytic {analytic:.5} error {err:.2e} deterministic {same}", a.rate_estimate))
}

fn criterion_9(_: &mut Recovered) -> Check {
    let mut rng = GaussianRng::seed_from_u64(9);
    let (mut det_err, mut pow_err): (f64, f64) = (0.0, 0.0);
    for i in 0..20 {
        let n = 1 + i % 5;
        let chan = ChannelSpec::ma1_white(n, rng.uniform_range(0.5, 20.0), rng.uniform_range(-0.95, 0.95), 10f64.powf(rng.uniform_range(-3.0, 1.0))).unwrap();
        let scheme = random_feasible_scheme(&chan, &mut rng);
        let b = scheme.b().to_matrix();
        let ib = DMatrix::identity(n, n) + &b;
        let h = scheme.k_s().as_matrix() + &ib * chan.k_w().as_matrix() * ib.transpose() + &b * chan.k_v().as_matrix() * b.transpose();
        let inst = upper_bound_instance(&chan);
        let theta = VarLayout::new(n).pack(&h, &b);
        let program = inst.objective_value(&theta).unwrap();
        det_err = det_err.max((program - conditional_directed_info_rate(&scheme, &chan).unwrap()).abs());
        let rewritten = (inst.power)(&theta) / n as f64;
        pow_err = pow_err.max((rewritten - power_usage(&scheme, &chan).unwrap()).abs() / chan.power());
    }
    Check::new(det_err <= 1e-8 && pow_err <= 1e-8, format!("determinant identity {det_err:.2e}, power identity {pow_err:.2e}"))
}

fn criterion_10(_: &mut Recovered) -> Check {
    let n = 30;
    let mut failures = Vec::new();
    let cfg = SweepConfig {
        n,
        alpha: vec![0.5],
        sigma_grid: SigmaGrid { start: 1e-8, stop: 1e3, points: 10, spacing: Spacing::Log },
        bounds: vec![BoundKind::Upper, BoundKind::Lower, BoundKind::OpenLoop, BoundKind::IdealFeedback],
        tol_gap: 1e-8,
        ..SweepConfig::default()
    };
    let sweep = run_sweep(&cfg).unwrap();
    let mut slowest: f64 = 0.0;
    for r in &sweep.rows {
        for s in [&r.status_upper, &r.status_lower] {
            if s.as_deref() != Some("Optimal") {
                failures.push(format!("sigma {:.2e}: status {s:?}", r.sigma));
            }
        }
        slowest = slowest.max(r.wall_ms_upper.unwrap_or(f64::INFINITY)).max(r.wall_ms_lower.unwrap_or(f64::INFINITY));
    }
    if slowest > 120e3 {
        failures.push(format!("slowest solve {slowest:.0} ms"));
    }
    let (first, last) = (&sweep.rows[0], &sweep.rows[sweep.rows.len() - 1]);
    let ideal = first.idealfb_bits.unwrap();
    let (du, dl) = ((first.upper_bits.unwrap() - ideal).abs(), (first.lower_bits.unwrap() - ideal).abs());
    if du > 1e-3 || dl > 1e-3 {
        failures.push(format!("sigma 1e-8: |upper - idealfb| {du:.2e}, |lower - idealfb| {dl:.2e}"));
    }
    let gain = last.upper_bits.unwrap() - last.openloop_bits.unwrap();
    let far = ChannelSpec::ma1_white(n, 10.0, 0.5, 1e3).unwrap();
    let b_norm = optimal(BoundKind::Upper, &far, &tight()).scheme.b().frobenius_norm();
    if !(0.0..=1e-3).contains(&gain) || b_norm > 1e-2 {
        failures.push(format!("sigma 1e3: gain {gain:.3e}, |B*|_F {b_norm:.3e}"));
    }

    // Feedback loses less of its gain at sigma = 0.1 when the noise is more correlated.
    let opts = SolveOptions::default();
    let drops: Vec<f64> = [0.1, 0.5, 0.9]
        .iter()
        .map(|&alpha| {
            let clean = ChannelSpec::ma1_white(n, 10.0, alpha, 1e-8).unwrap();
            let probe = ChannelSpec::ma1_white(n, 10.0, alpha, 0.1).unwrap();
            let open = open_loop_capacity(&clean).unwrap().rate;
            let ideal = optimal(BoundKind::IdealFeedback, &clean, &opts).rate;
            let top = optimal(BoundKind::Upper, &clean, &opts).rate;
            let at_probe = optimal(BoundKind::Upper, &probe, &opts).rate;
            (top - at_probe) / (ideal - open)
        })
        .collect();
    if !(drops[0] > drops[1] && drops[1] > drops[2]) {
        failures.push(format!("normalized drops {drops:?} not decreasing in alpha"));
    }
    let detail = if failures.is_empty() {
        format!(
            "10 points Optimal, slowest solve {:.1} s; endpoints {du:.1e}/{dl:.1e} and gain {gain:.1e}, |B*|_F {b_norm:.1e}; drops {:.3} > {:.3} > {:.3}",
            slowest / 1e3,
            drops[0],
            drops[1],
            drops[2]
        )
    } else {
        failures.join("; ")
    };
    Check::new(failures.is_empty(), detail)
}

fn main() {
    let criteria: [fn(&mut Recovered) -> Check; 10] = [
        criterion_1,
        criterion_2,
        criterion_3,
        criterion_4,
        criterion_5,
        criterion_6,
        criterion_7,
        criterion_8,
        criterion_9,
        criterion_10,
    ];
    // Wall-clock budgets in seconds; criterion 10 bounds each solve instead.
    let budgets = [1.0, 10.0, 30.0, f64::INFINITY, 600.0, 60.0, 300.0, f64::INFINITY, f64::INFINITY, f64::INFINITY];
    let mut found = Recovered::new();
    let mut failed = 0;
    for (i, run) in criteria.iter().enumerate() {
        let start = Instant::now();
        let mut check = catch_unwind(AssertUnwindSafe(|| run(&mut found))).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Check::new(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        let took: Duration = start.elapsed();
        if took.as_secs_f64() > budgets[i] {
            check.pass = false;
            check.detail = format!("over the {} s budget; {}", budgets[i], check.detail);
        }
        if !check.pass {
            failed += 1;
        }
        println!(
            "criterion {:>2}: {} ({:.2} s) {}",
            i + 1,
            if check.pass { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            check.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
