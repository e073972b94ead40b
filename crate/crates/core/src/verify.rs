//! Self-check suites run by `attnstages verify`. Each check recomputes a
//! property from independent ingredients and reports pass/fail with the
//! measured quantity.

use serde::Serialize;

use crate::analysis::{condensation, pca_trajectory};
use crate::critical::{
    attention_rate, find_degenerate_point, find_kappa1, focus_along_ray, linearize, linearize_at, origin, FdOrder,
};
use crate::error::{invalid, Result};
use crate::flow::{integrate_flow, stage_times, FlowConfig, Integrator, StageLabel, StageThresholds};
use crate::linalg::{self, Mat};
use crate::markov::{build_stationary, build_transition, sample_dataset, MarkovSpec, StationaryDistribution};
use crate::model::{empirical_loss, empirical_loss_grad, init_params, ModelParams};
use crate::perturbation::{ls_decompose, ls_sweep};
use crate::population::{param_gradient_population, population_forward, population_loss};
use crate::reduced::{conservation_quantity, integrate_reduced, q_growth_rate, RankOneState};
use crate::rng;

pub const SUITES: [&str; 8] = ["markov", "population", "critical", "reduced", "perturbation", "flow", "analysis", "all"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(suite: &'static str, name: &'static str, passed: bool, detail: String) -> CheckResult {
    CheckResult { suite, name, passed, detail }
}

/// Errors inside a check count as a failure of that check.
fn guarded(suite: &'static str, name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((ok, detail)) => check(suite, name, ok, detail),
        Err(e) => check(suite, name, false, format!("error: {e}")),
    }
}

fn synthetic_spec() -> Result<MarkovSpec> {
    build_transition(StationaryDistribution::from_probs(&[0.75, 0.19, 0.05, 0.01])?, 0.8)
}

fn markov_suite() -> Vec<CheckResult> {
    let s = "markov";
    vec![
        guarded(s, "stationarity", || {
            let mut worst: f64 = 0.0;
            for (d, pi1) in [(2, 0.6), (3, 0.75), (6, 0.4)] {
                for lam in [0.1, 0.5, 0.9] {
                    let spec = build_transition(build_stationary(d, pi1, &vec![0.0; d - 1], 0.0)?, lam)?;
                    worst = worst.max(spec.stationarity_residual());
                }
            }
            Ok((worst < 1e-12, format!("max ‖πᵀP − πᵀ‖ = {worst:e}")))
        }),
        guarded(s, "sampler frequencies", || {
            let spec = build_transition(StationaryDistribution::from_probs(&[0.6, 0.3, 0.1])?, 0.5)?;
            // x₁ is uniform; a long context keeps the burn-in bias ≈ 1/((1−λ)s) small
            let data = sample_dataset(&spec, 200, 2000, 3)?;
            let f = crate::markov::empirical_frequencies(&data);
            let err = f.iter().zip(spec.pi()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            Ok((err < 0.01, format!("max |freq − π| = {err:.2e}")))
        }),
        guarded(s, "sampler determinism", || {
            let spec = synthetic_spec()?;
            let a = sample_dataset(&spec, 300, 20, 11)?;
            let b = sample_dataset(&spec, 300, 20, 11)?;
            Ok((a == b, "same seed gives identical datasets".into()))
        }),
    ]
}

fn random_params(d: usize, m: usize, scale: f64, seed: u64) -> Result<ModelParams> {
    init_params(d, m, scale, seed)
}

fn fd_check(p: &ModelParams, loss: &dyn Fn(&ModelParams) -> Result<f64>, grad: &[f64]) -> Result<f64> {
    let x = p.to_flat();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..x.len() {
        let mut e = vec![0.0; x.len()];
        e[k] = 1.0;
        let fd = (loss(&p.offset(h, &e))? - loss(&p.offset(-h, &e))?) / (2.0 * h);
        worst = worst.max((fd - grad[k]).abs() / (1e-6f64).max(1e-4 * grad[k].abs()));
    }
    Ok(worst)
}

fn population_suite() -> Vec<CheckResult> {
    let s = "population";
    vec![
        guarded(s, "origin gradient identity", || {
            let mut worst: f64 = 0.0;
            let mut g = rng::stream(101, 0);
            for k in 0..10 {
                let d = 2 + k % 4;
                let u = rng::gaussian_vec(&mut g, d + 1, 1.0);
                let mut w: Vec<f64> = u[..d].iter().map(|x| x.exp()).collect();
                w.sort_by(|a, b| b.total_cmp(a));
                let tot: f64 = w.iter().sum();
                let pi: Vec<f64> = w.iter().map(|x| x / tot).collect();
                let lam = 0.05 + 0.9 / (1.0 + (-u[d]).exp());
                let spec = build_transition(StationaryDistribution::from_probs(&pi)?, lam)?;
                let st = population_forward(&ModelParams::zeros(d, 3), &spec)?;
                for i in 0..d {
                    for j in 0..d {
                        let want = -pi[i] * (pi[j] - 1.0 / d as f64);
                        worst = worst.max((st.g_m[(i, j)] - want).abs()).max(st.g_phi[(i, j)].abs());
                    }
                }
            }
            Ok((worst < 1e-12, format!("max entry error {worst:e}")))
        }),
        guarded(s, "population gradient vs finite differences", || {
            let spec = synthetic_spec()?;
            let p = random_params(4, 3, 0.7, 5)?;
            let g = param_gradient_population(&p, &spec)?.to_flat();
            let w = fd_check(&p, &|q| population_loss(q, &spec), &g)?;
            Ok((w <= 1.0, format!("max normalised error {w:.3}")))
        }),
        guarded(s, "empirical gradient vs finite differences", || {
            let spec = synthetic_spec()?;
            let data = sample_dataset(&spec, 40, 6, 2)?;
            let p = random_params(4, 3, 0.7, 6)?;
            let g = empirical_loss_grad(&p, &data)?.1.to_flat();
            let w = fd_check(&p, &|q| empirical_loss(q, &data), &g)?;
            Ok((w <= 1.0, format!("max normalised error {w:.3}")))
        }),
    ]
}

fn critical_suite() -> Vec<CheckResult> {
    let s = "critical";
    let mut out = vec![guarded(s, "origin is stationary", || {
        let spec = synthetic_spec()?;
        let o = origin(&spec, 4)?;
        Ok((o.grad_norm == 0.0, format!("‖∇L‖ = {:e}", o.grad_norm)))
    })];
    for d in [2usize, 3, 4] {
        out.push(guarded(s, "second critical point", move || {
            let spec = build_transition(StationaryDistribution::two_group(d, 0.75)?, 0.8)?;
            let cp = find_kappa1(&spec, 4, None)?;
            let st = population_forward(&cp.params, &spec)?;
            let dev = (0..d * d).map(|k| (st.pm[(k / d, k % d)] - spec.pi()[k % d]).abs()).fold(0.0, f64::max);
            let lin = linearize(&cp, &spec, None)?;
            let c = attention_rate(&spec, cp.kappa1.unwrap_or(0.0));
            let rel = (lin.mu - c).abs() / c;
            let cross = lin.cross_block_max(d, 4);
            let focus = focus_along_ray(&cp, &spec, 40.0)?;
            let ok = dev < 1e-10
                && cp.grad_norm < 1e-9
                && rel < 1e-3
                && cross < 1e-7
                && focus.min_first_entry > 0.99
                && focus.phi_cosine > 1.0 - 1e-6;
            Ok((
                ok,
                format!(
                    "d={d} κ₁={:.6} ‖ℙ−𝟙πᵀ‖∞={dev:.1e} ‖∇L‖={:.1e} μ/c−1={rel:.1e} cross={cross:.1e} focus={:.4}",
                    cp.kappa1.unwrap_or(f64::NAN),
                    cp.grad_norm,
                    focus.min_first_entry
                ),
            ))
        }));
    }
    out.push(guarded(s, "degenerate point", || {
        let spec = build_transition(StationaryDistribution::two_group(3, 0.6)?, 0.6)?;
        let dp = find_degenerate_point(&spec, 4, None)?;
        let lin = linearize_at(&dp.params, &spec, Some(1e-4), FdOrder::Fourth)?;
        let kernel = lin.eigenvalues.iter().filter(|e| e.abs() <= 1e-8).count();
        let ok = dp.grad_norm < 1e-9 && lin.mu <= 1e-8 && kernel >= 3;
        Ok((ok, format!("‖∇L‖={:.1e} λmax={:.1e} kernel={kernel}", dp.grad_norm, lin.mu)))
    }));
    out
}

fn reduced_suite() -> Vec<CheckResult> {
    let s = "reduced";
    vec![
        guarded(s, "manifold invariance", || {
            let spec = build_transition(StationaryDistribution::two_group(4, 0.7)?, 0.7)?;
            let st = RankOneState::balanced(vec![0.8, -0.3, -0.3, -0.3], vec![0.5, -0.2, -0.2, -0.2], 0.4, 5)?;
            let cfg = FlowConfig { step_size: 0.05, max_time: 40.0, record_every: 10, ..Default::default() };
            let tr = integrate_flow(&st.lift(), &spec, &cfg)?;
            let md = tr.metrics.iter().map(|m| m.manifold_distance).fold(0.0, f64::max);
            let spread = tr
                .snapshots
                .iter()
                .map(|p| RankOneState::project(p, &st.alpha1, &st.alpha1_tilde).map(|r| r.low_spread()))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .fold(0.0, f64::max);
            Ok((md < 1e-8 && spread < 1e-10, format!("max distance {md:.1e}, low spread {spread:.1e}")))
        }),
        guarded(s, "mass redistribution rate", || {
            let spec = build_transition(StationaryDistribution::two_group(3, 0.75)?, 0.8)?;
            let cp = find_kappa1(&spec, 4, None)?;
            let mut st = cp.state.clone().ok_or_else(|| invalid("state", "missing"))?;
            let q0 = conservation_quantity(&st, &spec);
            st.lam_q = 1e-3;
            st.lam_k = 1e-3;
            let mu = attention_rate(&spec, cp.kappa1.unwrap_or(0.0));
            let tr = integrate_reduced(&st, &spec, 0.01, 40.0 / mu, 10)?;
            let (slope, r2, _) = q_growth_rate(&tr, &spec).ok_or_else(|| invalid("Q", "no growth window"))?;
            let rel = (slope - 2.0 * mu).abs() / (2.0 * mu);
            Ok((q0.abs() < 1e-15 && rel < 0.05, format!("Q(t₀)={q0:.1e} slope={slope:.5} η-rate={:.5} r²={r2:.6}", 2.0 * mu)))
        }),
    ]
}

fn perturbation_suite() -> Vec<CheckResult> {
    let s = "perturbation";
    vec![guarded(s, "Lyapunov-Schmidt scales", || {
        let spec = build_transition(StationaryDistribution::two_group(3, 0.6)?, 0.6)?;
        let dp = find_degenerate_point(&spec, 4, None)?;
        let ls = ls_decompose(&dp, &spec)?;
        let r = ls_sweep(&ls, &[1e-2, 1e-3, 1e-4])?;
        let tangential_ok = match r.tangential_slope {
            Some(sl) => sl >= 1.8,
            None => r.rows.iter().all(|row| row.tangential_max_eig <= row.delta * row.delta),
        };
        let h1 = r.h1_kernel_ratio < 1e-6;
        let ok = (r.grad_slope - 3.0).abs() <= 0.3 && (r.transverse_slope - 1.0).abs() <= 0.2 && tangential_ok && h1;
        Ok((
            ok,
            format!(
                "grad slope {:.3}, transverse {:.3}, tangential {:?}, ‖Q_KᵀH₁Q_K‖/‖H₁‖ {:.1e}",
                r.grad_slope, r.transverse_slope, r.tangential_slope, r.h1_kernel_ratio
            ),
        ))
    })]
}

fn flow_suite() -> Vec<CheckResult> {
    let s = "flow";
    vec![guarded(s, "four stages on the synthetic chain", || {
        let spec = synthetic_spec()?;
        let p = init_params(4, 16, 1e-3, 1)?;
        let cfg = FlowConfig {
            step_size: 0.05,
            max_time: 200.0,
            integrator: Integrator::Rk4,
            record_every: 20,
            adaptive: false,
            snapshot_every: 0,
        };
        let tr = integrate_flow(&p, &spec, &cfg)?;
        let st = stage_times(&tr, &StageThresholds::default())?;
        let labels: Vec<StageLabel> = st.iter().map(|x| x.label).collect();
        let ok = labels == [StageLabel::I, StageLabel::II, StageLabel::III, StageLabel::IV];
        Ok((ok, format!("{st:?}")))
    })]
}

fn analysis_suite() -> Vec<CheckResult> {
    let s = "analysis";
    vec![
        guarded(s, "condensation is scale invariant", || {
            let mut g = rng::stream(7, 0);
            let w = Mat::from_row_slice(5, 4, &rng::gaussian_vec(&mut g, 20, 1.0));
            let scales = rng::gaussian_vec(&mut g, 5, 1.0);
            let ws = Mat::from_fn(5, 4, |i, j| w[(i, j)] * (scales[i].abs() + 0.1));
            let err = (condensation(&w).c - condensation(&ws).c).amax();
            Ok((err < 1e-12, format!("max change {err:.1e}")))
        }),
        guarded(s, "pca is rotation equivariant", || {
            let mut g = rng::stream(8, 0);
            let snaps: Vec<Mat> = (0..4).map(|_| Mat::from_row_slice(3, 4, &rng::gaussian_vec(&mut g, 12, 1.0))).collect();
            let q = Mat::from_row_slice(4, 4, &rng::gaussian_vec(&mut g, 16, 1.0)).qr().q();
            let rotated: Vec<Mat> = snaps.iter().map(|s| s * &q).collect();
            let (a, b) = (pca_trajectory(&snaps)?, pca_trajectory(&rotated)?);
            let flat = |p: &crate::analysis::PcaTrajectory| p.points.iter().flatten().cloned().collect::<Vec<_>>();
            let (fa, fb) = (flat(&a), flat(&b));
            let mut err: f64 = 0.0;
            for i in 0..fa.len() {
                for j in 0..fa.len() {
                    let da = ((fa[i][0] - fa[j][0]).powi(2) + (fa[i][1] - fa[j][1]).powi(2)).sqrt();
                    let db = ((fb[i][0] - fb[j][0]).powi(2) + (fb[i][1] - fb[j][1]).powi(2)).sqrt();
                    err = err.max((da - db).abs());
                }
            }
            Ok((err < 1e-10, format!("max distance change {err:.1e}")))
        }),
        guarded(s, "entropy is permutation invariant", || {
            let a = Mat::from_row_slice(2, 3, &[0.2, 0.5, 0.3, 0.0, 0.1, 0.9]);
            let b = Mat::from_row_slice(2, 3, &[0.5, 0.3, 0.2, 0.9, 0.0, 0.1]);
            let (ha, hb) = (crate::analysis::attention_entropy(&a)?, crate::analysis::attention_entropy(&b)?);
            let err = linalg::norm(&ha.iter().zip(&hb).map(|(x, y)| x - y).collect::<Vec<_>>());
            Ok((err < 1e-15, format!("difference {err:.1e}")))
        }),
    ]
}

/// Run a named suite (`all` runs every suite).
pub fn run_suite(name: &str) -> Result<Vec<CheckResult>> {
    let one = |n: &str| -> Option<Vec<CheckResult>> {
        Some(match n {
            "markov" => markov_suite(),
            "population" => population_suite(),
            "critical" => critical_suite(),
            "reduced" => reduced_suite(),
            "perturbation" => perturbation_suite(),
            "flow" => flow_suite(),
            "analysis" => analysis_suite(),
            _ => return None,
        })
    };
    if name == "all" {
        return Ok(SUITES[..SUITES.len() - 1].iter().flat_map(|n| one(n).unwrap_or_default()).collect());
    }
    one(name).ok_or_else(|| invalid("suite", format!("unknown suite `{name}`; expected one of {SUITES:?}")))
}
