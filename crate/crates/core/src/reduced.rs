//! Dynamics on the rank-one manifold
//! `W0 = γα₁ᵀ, W1 = α₁βᵀ, WQ = λ_Q α₁α̃ᵀ, WK = λ_K α₁α̃ᵀ`
//! and its two-group specialisation for symmetric low-frequency tokens.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use crate::error::{invalid, Error, Result};
use crate::flow::rk4_step;
use crate::linalg::{self, Mat};
use crate::markov::MarkovSpec;
use crate::model::ModelParams;
use crate::population::{population_from_mphi, PopulationState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankOneState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub lam_q: f64,
    pub lam_k: f64,
    pub alpha1: Vec<f64>,
    pub alpha1_tilde: Vec<f64>,
}

fn check_unit(v: &[f64], field: &'static str) -> Result<()> {
    let n = linalg::norm(v);
    if (n - 1.0).abs() > 1e-12 {
        return Err(invalid(field, format!("must be a unit vector, norm is {n}")));
    }
    Ok(())
}

/// e₁ in the embedding space.
pub fn basis(m: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; m];
    v[k] = 1.0;
    v
}

impl RankOneState {
    pub fn new(
        gamma: Vec<f64>,
        beta: Vec<f64>,
        lam_q: f64,
        lam_k: f64,
        alpha1: Vec<f64>,
        alpha1_tilde: Vec<f64>,
    ) -> Result<Self> {
        if gamma.len() != beta.len() || gamma.len() < 2 {
            return Err(Error::Dimension(format!(
                "γ has length {}, β has length {}",
                gamma.len(),
                beta.len()
            )));
        }
        if alpha1.len() != alpha1_tilde.len() || alpha1.is_empty() {
            return Err(Error::Dimension("α₁ and α̃₁ lengths differ".into()));
        }
        check_unit(&alpha1, "alpha1")?;
        check_unit(&alpha1_tilde, "alpha1_tilde")?;
        Ok(RankOneState { gamma, beta, lam_q, lam_k, alpha1, alpha1_tilde })
    }

    /// Balanced state with `λ_Q = λ_K = sqrt|η|` (sign of η carried by λ_K).
    pub fn balanced(gamma: Vec<f64>, beta: Vec<f64>, eta: f64, m: usize) -> Result<Self> {
        let r = eta.abs().sqrt();
        Self::new(gamma, beta, r, eta.signum() * r, basis(m, 0), basis(m, m.min(2) - 1))
    }

    pub fn d(&self) -> usize {
        self.gamma.len()
    }

    pub fn m(&self) -> usize {
        self.alpha1.len()
    }

    pub fn eta(&self) -> f64 {
        self.lam_q * self.lam_k
    }

    pub fn lift(&self) -> ModelParams {
        let a = linalg::Vec64::from_column_slice(&self.alpha1);
        let at = linalg::Vec64::from_column_slice(&self.alpha1_tilde);
        let g = linalg::Vec64::from_column_slice(&self.gamma);
        let b = linalg::Vec64::from_column_slice(&self.beta);
        let outer = &a * at.transpose();
        ModelParams {
            d: self.d(),
            m: self.m(),
            w0: &g * a.transpose(),
            w1: &a * b.transpose(),
            wq: &outer * self.lam_q,
            wk: &outer * self.lam_k,
        }
    }

    /// Coordinates `(γ, β, λ_Q, λ_K)` of `p` along fixed unit directions.
    pub fn project(p: &ModelParams, alpha1: &[f64], alpha1_tilde: &[f64]) -> Result<Self> {
        let a = linalg::Vec64::from_column_slice(alpha1);
        let at = linalg::Vec64::from_column_slice(alpha1_tilde);
        let gamma = (&p.w0 * &a).iter().cloned().collect();
        let beta = (p.w1.transpose() * &a).iter().cloned().collect();
        let lam_q = (a.transpose() * &p.wq * &at)[(0, 0)];
        let lam_k = (a.transpose() * &p.wk * &at)[(0, 0)];
        Self::new(gamma, beta, lam_q, lam_k, alpha1.to_vec(), alpha1_tilde.to_vec())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.gamma.clone();
        v.extend_from_slice(&self.beta);
        v.push(self.lam_q);
        v.push(self.lam_k);
        v
    }

    pub fn with_flat(&self, v: &[f64]) -> Self {
        let d = self.d();
        RankOneState {
            gamma: v[..d].to_vec(),
            beta: v[d..2 * d].to_vec(),
            lam_q: v[2 * d],
            lam_k: v[2 * d + 1],
            alpha1: self.alpha1.clone(),
            alpha1_tilde: self.alpha1_tilde.clone(),
        }
    }

    /// Population objects at the lifted point, from `M = γβᵀ`, `Φ = ηγγᵀ`.
    pub fn population(&self, spec: &MarkovSpec) -> Result<PopulationState> {
        if spec.d() != self.d() {
            return Err(Error::Dimension(format!("state d={} vs spec d={}", self.d(), spec.d())));
        }
        let g = linalg::Vec64::from_column_slice(&self.gamma);
        let b = linalg::Vec64::from_column_slice(&self.beta);
        let mm = &g * b.transpose();
        let phi = (&g * g.transpose()) * self.eta();
        Ok(population_from_mphi(&mm, &phi, spec))
    }

    /// Largest |x_i − x_j| over low-frequency entries of γ and β.
    pub fn low_spread(&self) -> f64 {
        let spread = |v: &[f64]| {
            let lo = v[1..].iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v[1..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            hi - lo
        };
        spread(&self.gamma).max(spread(&self.beta))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankOneDeriv {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub lam_q: f64,
    pub lam_k: f64,
    pub eta: f64,
}

impl RankOneDeriv {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.gamma.clone();
        v.extend_from_slice(&self.beta);
        v.push(self.lam_q);
        v.push(self.lam_k);
        v
    }
}

/// `γ̇ = −gM β − η(G+Gᵀ)γ`, `β̇ = −gMᵀγ`, `λ̇_Q = −λ_K γᵀGγ`, `λ̇_K = −λ_Q γᵀGγ`,
/// hence `η̇ = −(λ_Q² + λ_K²) γᵀGγ`, which is `−2η γᵀGγ` on balanced states.
pub fn reduced_rhs(state: &RankOneState, spec: &MarkovSpec) -> Result<RankOneDeriv> {
    let st = state.population(spec)?;
    let d = state.d();
    let eta = state.eta();
    let g = linalg::Vec64::from_column_slice(&state.gamma);
    let b = linalg::Vec64::from_column_slice(&state.beta);
    let sym = &st.g_phi + st.g_phi.transpose();
    let dg = -(&st.g_m * &b) - (&sym * &g) * eta;
    let db = -(st.g_m.transpose() * &g);
    let ggg = (g.transpose() * &st.g_phi * &g)[(0, 0)];
    let dq = -state.lam_k * ggg;
    let dk = -state.lam_q * ggg;
    debug_assert_eq!(dg.len(), d);
    Ok(RankOneDeriv {
        gamma: dg.iter().cloned().collect(),
        beta: db.iter().cloned().collect(),
        lam_q: dq,
        lam_k: dk,
        eta: -(state.lam_q * state.lam_q + state.lam_k * state.lam_k) * ggg,
    })
}

/// `Q = (1−π₁)γ₁ − (d−1)π₁ γ̄_low`, with γ̄_low the mean low-frequency coordinate.
pub fn conservation_quantity(state: &RankOneState, spec: &MarkovSpec) -> f64 {
    let pi1 = spec.pi()[0];
    let low: f64 = state.gamma[1..].iter().sum();
    (1.0 - pi1) * state.gamma[0] - pi1 * low
}

/// Two-group coordinates: `γ = (g1, g2, …, g2)`, `β = (b1, b2, …, b2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoGroupState {
    pub g1: f64,
    pub g2: f64,
    pub b1: f64,
    pub b2: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TwoGroupDerived {
    pub dgamma: f64,
    pub dbeta: f64,
    pub xi1: f64,
    pub xi2: f64,
    pub m1: f64,
    pub m2: f64,
    pub p1: f64,
    pub p2: f64,
    pub r1: f64,
    pub r2: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// π₁e^a / (π₁e^a + (1−π₁)e^b), evaluated without overflow.
fn two_point_weight(pi1: f64, a: f64, b: f64) -> f64 {
    sigmoid(a - b + (pi1 / (1.0 - pi1)).ln())
}

impl TwoGroupState {
    pub fn derived(&self, spec: &MarkovSpec) -> TwoGroupDerived {
        let d = spec.d() as f64;
        let pi1 = spec.pi()[0];
        let (g1, g2, eta) = (self.g1, self.g2, self.eta);
        let dgamma = g1 - g2;
        let dbeta = self.b1 - self.b2;
        let xi1 = two_point_weight(pi1, eta * g1 * g1, eta * g1 * g2);
        let xi2 = two_point_weight(pi1, eta * g1 * g2, eta * g2 * g2);
        let m1 = g2 + xi1 * dgamma;
        let m2 = g2 + xi2 * dgamma;
        let p1 = sigmoid(m1 * dbeta - (d - 1.0).ln());
        let p2 = sigmoid(m2 * dbeta - (d - 1.0).ln());
        TwoGroupDerived {
            dgamma,
            dbeta,
            xi1,
            xi2,
            m1,
            m2,
            p1,
            p2,
            r1: spec.p[(0, 0)] - p1,
            r2: spec.p[(1, 0)] - p2,
        }
    }

    pub fn to_rank_one(&self, d: usize, m: usize) -> Result<RankOneState> {
        let mut gamma = vec![self.g2; d];
        gamma[0] = self.g1;
        let mut beta = vec![self.b2; d];
        beta[0] = self.b1;
        RankOneState::balanced(gamma, beta, self.eta, m)
    }

    pub fn from_rank_one(s: &RankOneState) -> Self {
        let n = (s.d() - 1) as f64;
        TwoGroupState {
            g1: s.gamma[0],
            g2: s.gamma[1..].iter().sum::<f64>() / n,
            b1: s.beta[0],
            b2: s.beta[1..].iter().sum::<f64>() / n,
            eta: s.eta(),
        }
    }

    pub fn to_flat(&self) -> [f64; 5] {
        [self.g1, self.g2, self.b1, self.b2, self.eta]
    }

    pub fn from_flat(v: &[f64]) -> Self {
        TwoGroupState { g1: v[0], g2: v[1], b1: v[2], b2: v[3], eta: v[4] }
    }

    pub fn conservation(&self, spec: &MarkovSpec) -> f64 {
        let pi1 = spec.pi()[0];
        (1.0 - pi1) * self.g1 - (spec.d() as f64 - 1.0) * pi1 * self.g2
    }
}

/// Explicit scalar ODEs of the two-group system on balanced states
/// (`λ_Q = ±λ_K`). Then `λ_Q² + λ_K² = 2|η|`, so `η̇ = −2|η| γᵀGγ`; the
/// familiar `−2η γᵀGγ` is the `η ≥ 0` branch.
pub fn two_group_rhs(s: &TwoGroupState, spec: &MarkovSpec) -> Result<TwoGroupState> {
    if spec.d() < 2 {
        return Err(invalid("d", "two-group system needs d ≥ 2"));
    }
    let pi1 = spec.pi()[0];
    let n = spec.d() as f64 - 1.0;
    let q = s.derived(spec);
    let (g1, g2, eta) = (s.g1, s.g2, s.eta);
    let (dg, db) = (q.dgamma, q.dbeta);
    let v1 = q.xi1 * (1.0 - q.xi1);
    let v2 = q.xi2 * (1.0 - q.xi2);
    let a = pi1 * q.r1;
    let c = (1.0 - pi1) * q.r2;

    let g1_m = db * (a * q.xi1 + c * q.xi2);
    let g2_m = db / n * (a * (1.0 - q.xi1) + c * (1.0 - q.xi2));
    let g1_phi = eta * db * (a * v1 * (dg * dg + g1 * dg) + c * g2 * v2 * dg);
    let g2_phi = eta * db / n * (-a * g1 * v1 * dg + c * v2 * (dg * dg - g2 * dg));
    let b1 = a * q.m1 + c * q.m2;
    let ggg = -db * dg * dg * (a * g1 * v1 + c * g2 * v2);
    Ok(TwoGroupState {
        g1: g1_m + g1_phi,
        g2: g2_m + g2_phi,
        b1,
        b2: -b1 / n,
        eta: -2.0 * eta.abs() * ggg,
    })
}

/// Combined relative rank-one residual of `[W0ᵀ | W1 | WQ | WK]` (shared α₁)
/// and `[WQ; WK]` (shared α̃₁).
pub fn manifold_distance(p: &ModelParams) -> f64 {
    let (d, m) = (p.d, p.m);
    let s = Mat::from_fn(m, 2 * d + 2 * m, |i, j| {
        if j < d {
            p.w0[(j, i)]
        } else if j < 2 * d {
            p.w1[(i, j - d)]
        } else if j < 2 * d + m {
            p.wq[(i, j - 2 * d)]
        } else {
            p.wk[(i, j - 2 * d - m)]
        }
    });
    let t = Mat::from_fn(2 * m, m, |i, j| if i < m { p.wq[(i, j)] } else { p.wk[(i - m, j)] });
    let r1 = linalg::rank_one_residual(&s);
    let r2 = linalg::rank_one_residual(&t);
    (r1 * r1 + r2 * r2).sqrt()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReducedTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<RankOneState>,
}

pub const REDUCED_CSV_HEADER: &str = "t,g1,g2,b1,b2,eta,xi1,xi2,r1,r2,Q";

impl ReducedTrajectory {
    pub fn conservation(&self, spec: &MarkovSpec) -> Vec<f64> {
        self.states.iter().map(|s| conservation_quantity(s, spec)).collect()
    }

    pub fn csv(&self, spec: &MarkovSpec) -> String {
        let mut out = String::from(REDUCED_CSV_HEADER);
        out.push('\n');
        for (t, s) in self.times.iter().zip(&self.states) {
            let tg = TwoGroupState::from_rank_one(s);
            let q = tg.derived(spec);
            let _ = writeln!(
                out,
                "{t},{},{},{},{},{},{},{},{},{},{}",
                tg.g1,
                tg.g2,
                tg.b1,
                tg.b2,
                tg.eta,
                q.xi1,
                q.xi2,
                q.r1,
                q.r2,
                conservation_quantity(s, spec)
            );
        }
        out
    }
}

/// RK4 in reduced coordinates `(γ, β, λ_Q, λ_K)`.
pub fn integrate_reduced(
    start: &RankOneState,
    spec: &MarkovSpec,
    h: f64,
    t_max: f64,
    record_every: usize,
) -> Result<ReducedTrajectory> {
    if !(h > 0.0 && t_max > 0.0) || record_every == 0 {
        return Err(invalid("h/t_max/record_every", "must be positive"));
    }
    let steps = (t_max / h).round() as usize;
    let mut y = start.to_flat();
    let mut out = ReducedTrajectory::default();
    out.times.push(0.0);
    out.states.push(start.clone());
    let f = |v: &[f64]| -> Result<Vec<f64>> { Ok(reduced_rhs(&start.with_flat(v), spec)?.to_flat()) };
    for k in 1..=steps {
        y = rk4_step(&f, &y, h)?;
        if y.iter().any(|x| !x.is_finite()) {
            return Err(Error::Integration { t: k as f64 * h, reason: "non-finite reduced state".into() });
        }
        if k % record_every == 0 || k == steps {
            out.times.push(k as f64 * h);
            out.states.push(start.with_flat(&y));
        }
    }
    Ok(out)
}

/// Growth rate of |y(t)| fitted on the points with `lo ≤ |y| ≤ hi` inside the
/// first maximal run where |y| increases monotonically. Returns (slope, r², n).
pub fn fit_growth_rate(times: &[f64], y: &[f64], lo: f64, hi: f64) -> Option<(f64, f64, usize)> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    for (&t, &v) in times.iter().zip(y) {
        let a = v.abs();
        if a > hi {
            break;
        }
        if a < prev {
            if xs.is_empty() {
                prev = a;
                continue;
            }
            break;
        }
        prev = a;
        if a >= lo {
            xs.push(t);
            ys.push(a.ln());
        }
    }
    if xs.len() < 3 {
        return None;
    }
    let (_, slope, r2) = linalg::linear_fit(&xs, &ys);
    Some((slope, r2, xs.len()))
}

/// Growth rate of |Q(t)| over the linear window: the monotone run where
/// `1e-4·‖γ(t₀)‖ ≤ |Q| ≤ 1e-2·‖γ(t₀)‖`. The lower cut skips the start-up
/// transient of a quantity that is driven from exactly zero.
pub fn q_growth_rate(traj: &ReducedTrajectory, spec: &MarkovSpec) -> Option<(f64, f64, usize)> {
    let g0 = linalg::norm(&traj.states.first()?.gamma);
    fit_growth_rate(&traj.times, &traj.conservation(spec), 1e-4 * g0, 1e-2 * g0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov::{build_transition, StationaryDistribution};

    fn spec(d: usize) -> MarkovSpec {
        build_transition(StationaryDistribution::two_group(d, 0.7).unwrap(), 0.6).unwrap()
    }

    #[test]
    fn lift_project_roundtrip() {
        let s = RankOneState::balanced(vec![0.3, -0.1, 0.2], vec![1.0, 0.5, -0.4], 0.2, 4).unwrap();
        let back = RankOneState::project(&s.lift(), &s.alpha1, &s.alpha1_tilde).unwrap();
        for (a, b) in s.to_flat().iter().zip(back.to_flat()) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(manifold_distance(&s.lift()) < 1e-14);
    }

    #[test]
    fn zero_gamma_lifts_to_zero_w0() {
        let s = RankOneState::balanced(vec![0.0; 3], vec![1.0, 0.5, -0.4], 0.0, 2).unwrap();
        assert_eq!(s.lift().w0.norm(), 0.0);
    }

    #[test]
    fn non_unit_alpha_rejected() {
        assert!(RankOneState::new(vec![0.0; 2], vec![0.0; 2], 0.0, 0.0, vec![2.0], vec![1.0]).is_err());
    }

    #[test]
    fn xi_at_zero_eta_is_pi1() {
        let s = TwoGroupState { g1: 0.4, g2: -0.3, b1: 1.0, b2: 0.0, eta: 0.0 };
        let q = s.derived(&spec(3));
        assert!((q.xi1 - 0.7).abs() < 1e-15 && (q.xi2 - 0.7).abs() < 1e-15);
    }

    #[test]
    fn q_vanishes_along_pi_and_grows_with_g1() {
        let sp = spec(4);
        let pi = sp.pi().to_vec();
        let s = RankOneState::balanced(pi.clone(), vec![0.0; 4], 0.0, 2).unwrap();
        assert!(conservation_quantity(&s, &sp).abs() < 1e-15);
        let mut g = pi;
        g[0] += 0.1;
        let s2 = RankOneState::balanced(g, vec![0.0; 4], 0.0, 2).unwrap();
        assert!(conservation_quantity(&s2, &sp) > 0.0);
    }

    #[test]
    fn two_group_matches_reduced() {
        let sp = spec(4);
        let tg = TwoGroupState { g1: 0.8, g2: -0.3, b1: 1.1, b2: -0.2, eta: 0.7 };
        let fast = two_group_rhs(&tg, &sp).unwrap();
        let full = reduced_rhs(&tg.to_rank_one(4, 3).unwrap(), &sp).unwrap();
        assert!((fast.g1 - full.gamma[0]).abs() < 1e-12);
        assert!((fast.g2 - full.gamma[2]).abs() < 1e-12);
        assert!((fast.b1 - full.beta[0]).abs() < 1e-12);
        assert!((fast.b2 - full.beta[3]).abs() < 1e-12);
        assert!((fast.eta - full.eta).abs() < 1e-12);
    }
}
