//! Stationary points of the population flow (origin, second critical point
//! θ_c¹, degenerate rank-one point) and finite-difference linearizations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::flow::{integrate_flow, FlowConfig, Integrator};
use crate::linalg::{self, Mat, Vec64};
use crate::markov::MarkovSpec;
use crate::model::ModelParams;
use crate::population::{flow_rhs, param_gradient_population, population_forward, proxy_attention};
use crate::reduced::{basis, RankOneState};

/// Default certification tolerance on ‖∇L‖.
pub const CERT_TOL: f64 = 1e-9;

/// Saturation target for the degenerate point: η·min(|γ₁|,|γ_low|)·Δγ.
const DEGENERATE_SATURATION: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CriticalKind {
    Origin,
    Second,
    Degenerate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticalPoint {
    pub params: ModelParams,
    pub kind: CriticalKind,
    pub kappa1: Option<f64>,
    pub grad_norm: f64,
    pub alpha1: Vec<f64>,
    /// Reduced coordinates, for points on the rank-one manifold.
    pub state: Option<RankOneState>,
}

impl CriticalPoint {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": self.kind,
            "kappa1": self.kappa1,
            "grad_norm": self.grad_norm,
            "alpha1": self.alpha1,
            "params": self.params.to_json(0),
        })
    }
}

fn certify(params: ModelParams, spec: &MarkovSpec, kind: CriticalKind) -> Result<(ModelParams, f64)> {
    let g = param_gradient_population(&params, spec)?.norm();
    if !(g < CERT_TOL) {
        return Err(Error::Certification(format!("{kind:?} point has ‖∇L‖ = {g:e} ≥ {CERT_TOL:e}")));
    }
    Ok((params, g))
}

pub fn origin(spec: &MarkovSpec, m: usize) -> Result<CriticalPoint> {
    let (params, g) = certify(ModelParams::zeros(spec.d(), m), spec, CriticalKind::Origin)?;
    Ok(CriticalPoint { params, kind: CriticalKind::Origin, kappa1: None, grad_norm: g, alpha1: basis(m, 0), state: None })
}

fn pi_minus_uniform(pi: &[f64]) -> Vec<f64> {
    let d = pi.len() as f64;
    pi.iter().map(|p| p - 1.0 / d).collect()
}

/// `c_π = ‖π‖ (π₁ − π₂) / ‖π − 𝟙/d‖`.
pub fn c_pi(pi: &[f64]) -> f64 {
    linalg::norm(pi) * (pi[0] - pi[1]) / linalg::norm(&pi_minus_uniform(pi))
}

/// Closed form `κ₁² = log((d−1)π₁/(1−π₁)) / c_π`.
pub fn kappa1_closed_form(pi: &[f64]) -> f64 {
    let d = pi.len() as f64;
    (((d - 1.0) * pi[0] / (1.0 - pi[0])).ln() / c_pi(pi)).sqrt()
}

/// Point `W0 = κ q α₁ᵀ`, `W1 = κ α₁ uᵀ`, `WQ = WK = 0` with `q = π/‖π‖`,
/// `u = (π − 𝟙/d)/‖π − 𝟙/d‖`.
pub fn second_ray_state(pi: &[f64], kappa: f64, alpha1: &[f64]) -> Result<RankOneState> {
    let m = alpha1.len();
    let pn = linalg::norm(pi);
    let v = pi_minus_uniform(pi);
    let vn = linalg::norm(&v);
    let gamma = pi.iter().map(|p| kappa * p / pn).collect();
    let beta = v.iter().map(|x| kappa * x / vn).collect();
    let tilde = if m > 1 { basis(m, if alpha1[1].abs() < 0.5 { 1 } else { 0 }) } else { alpha1.to_vec() };
    let tilde = orthonormal_to(&tilde, alpha1);
    RankOneState::new(gamma, beta, 0.0, 0.0, alpha1.to_vec(), tilde)
}

fn orthonormal_to(v: &[f64], a: &[f64]) -> Vec<f64> {
    if v.len() == 1 {
        return v.to_vec();
    }
    let c = linalg::dot(v, a);
    let w: Vec<f64> = v.iter().zip(a).map(|(x, y)| x - c * y).collect();
    let n = linalg::norm(&w);
    w.iter().map(|x| x / n).collect()
}

/// First entry of `ℙ_i` on the second-critical ray, as a function of z = κ².
fn ray_p1(pi: &[f64], z: f64) -> f64 {
    let pn = linalg::norm(pi);
    let v = pi_minus_uniform(pi);
    let vn = linalg::norm(&v);
    let logits: Vec<f64> = v.iter().map(|x| z * pn * x / vn).collect();
    linalg::softmax(&logits)[0]
}

/// Bisection for κ₁ on `ℙ_{i,1}(κ) = π₁` followed by gradient certification.
pub fn find_kappa1(spec: &MarkovSpec, m: usize, alpha1: Option<&[f64]>) -> Result<CriticalPoint> {
    let pi = spec.pi();
    let d = pi.len();
    if m == 0 {
        return Err(invalid("m", "embedding dimension must be ≥ 1"));
    }
    if !(pi[0] > 1.0 / d as f64 + 1e-12) {
        return Err(Error::NoRoot(format!("π₁ = {} ≤ 1/d: ℙ is already uniform at κ=0", pi[0])));
    }
    if !spec.dist.is_low_symmetric() {
        return Err(invalid("pi", "second critical point requires symmetric low-frequency tokens"));
    }
    let alpha1 = alpha1.map(|a| a.to_vec()).unwrap_or_else(|| basis(m, 0));
    if alpha1.len() != m {
        return Err(Error::Dimension(format!("α₁ has length {}, m = {m}", alpha1.len())));
    }
    let f = |z: f64| ray_p1(pi, z) - pi[0];
    let mut lo = 0.0;
    let mut hi = 1e-6;
    while f(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::NoRoot("no sign change of ℙ_{i,1}(κ) − π₁".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    let z = 0.5 * (lo + hi);
    if f(z).abs() >= 1e-12 {
        return Err(Error::Certification(format!("|ℙ_{{i,1}} − π₁| = {:e}", f(z).abs())));
    }
    let kappa = z.sqrt();
    let state = second_ray_state(pi, kappa, &alpha1)?;
    let (params, g) = certify(state.lift(), spec, CriticalKind::Second)?;
    Ok(CriticalPoint {
        params,
        kind: CriticalKind::Second,
        kappa1: Some(kappa),
        grad_norm: g,
        alpha1,
        state: Some(state),
    })
}

/// `c = λκ₁⁴ (πᵀVar(π)π)² / (‖π − 𝟙/d‖ ‖π‖³)`: growth rate of the attention block at θ_c¹.
pub fn attention_rate(spec: &MarkovSpec, kappa1: f64) -> f64 {
    let pi = spec.pi();
    let v = linalg::var_matrix(pi);
    let p = Vec64::from_column_slice(pi);
    let quad = (p.transpose() * &v * &p)[(0, 0)];
    spec.lambda * kappa1.powi(4) * quad * quad / (linalg::norm(&pi_minus_uniform(pi)) * linalg::norm(pi).powi(3))
}

/// `∂L/∂Φ` at θ_c¹ in closed form: `−λκ₁² Var(π) u qᵀ Var(π)`.
pub fn gphi_second_closed_form(spec: &MarkovSpec, kappa1: f64) -> Mat {
    let pi = spec.pi();
    let v = linalg::var_matrix(pi);
    let w = pi_minus_uniform(pi);
    let u = Vec64::from_column_slice(&w) / linalg::norm(&w);
    let q = Vec64::from_column_slice(pi) / linalg::norm(pi);
    -(&v * u * q.transpose() * &v) * (spec.lambda * kappa1 * kappa1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FdOrder {
    /// (f(x+h) − f(x−h)) / 2h
    Second,
    /// (−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h
    Fourth,
}

/// Column-by-column finite-difference Jacobian of `f` at `x`; columns are
/// evaluated in parallel and assembled in index order.
pub fn fd_jacobian<F>(f: &F, x: &[f64], h: f64, order: FdOrder) -> Result<Mat>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    let n = x.len();
    let cols: Vec<Result<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|k| {
            let at = |s: f64| {
                let mut y = x.to_vec();
                y[k] += s;
                f(&y)
            };
            let (p1, m1) = (at(h)?, at(-h)?);
            Ok(match order {
                FdOrder::Second => p1.iter().zip(&m1).map(|(a, b)| (a - b) / (2.0 * h)).collect(),
                FdOrder::Fourth => {
                    let (p2, m2) = (at(2.0 * h)?, at(-2.0 * h)?);
                    (0..p1.len())
                        .map(|i| (-p2[i] + 8.0 * p1[i] - 8.0 * m1[i] + m2[i]) / (12.0 * h))
                        .collect()
                }
            })
        })
        .collect();
    let cols = cols.into_iter().collect::<Result<Vec<_>>>()?;
    let rows = cols.first().map_or(0, |c| c.len());
    Ok(Mat::from_fn(rows, n, |i, j| cols[j][i]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    /// Symmetrized Jacobian of `−∇L`.
    pub j: Mat,
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Mat,
    pub mu: f64,
    pub gap: f64,
    /// max |J − Jᵀ| before symmetrization.
    pub asymmetry: f64,
}

impl Linearization {
    pub fn from_jacobian(raw: Mat) -> Linearization {
        let asym = (&raw - raw.transpose()).amax();
        let j = (&raw + raw.transpose()) * 0.5;
        let (eigenvalues, eigenvectors) = linalg::sym_eig_desc(&j);
        let mu = eigenvalues[0];
        let gap = if eigenvalues.len() > 1 { mu - eigenvalues[1] } else { 0.0 };
        Linearization { j, eigenvalues, eigenvectors, mu, gap, asymmetry: asym }
    }

    pub fn top_vector(&self) -> Vec<f64> {
        self.eigenvectors.column(0).iter().cloned().collect()
    }

    /// Largest |J_ab| with a in the (W0, W1) block and b in the (WQ, WK) block.
    pub fn cross_block_max(&self, d: usize, m: usize) -> f64 {
        let split = 2 * d * m;
        let p = self.j.nrows();
        let mut mx: f64 = 0.0;
        for a in 0..split {
            for b in split..p {
                mx = mx.max(self.j[(a, b)].abs());
            }
        }
        mx
    }

    /// Eigenvalues of the (WQ, WK) diagonal block, descending.
    pub fn attention_block_eigenvalues(&self, d: usize, m: usize) -> Vec<f64> {
        let split = 2 * d * m;
        let n = self.j.nrows() - split;
        linalg::sym_eig_desc(&self.j.view((split, split), (n, n)).into_owned()).0
    }

    /// Eigenvalues of the (W0, W1) diagonal block, descending.
    pub fn output_block_eigenvalues(&self, d: usize, m: usize) -> Vec<f64> {
        let split = 2 * d * m;
        linalg::sym_eig_desc(&self.j.view((0, 0), (split, split)).into_owned()).0
    }

    pub fn to_json(&self, top_k: usize) -> serde_json::Value {
        let k = top_k.min(self.eigenvalues.len());
        let vecs: Vec<Vec<f64>> = (0..k).map(|c| self.eigenvectors.column(c).iter().cloned().collect()).collect();
        serde_json::json!({
            "eigenvalues": self.eigenvalues,
            "mu": self.mu,
            "gap": self.gap,
            "asymmetry": self.asymmetry,
            "top_eigenvectors": vecs,
        })
    }
}

/// Default finite-difference step `1e-5·max(1, ‖θ‖)`.
pub fn default_fd_step(p: &ModelParams) -> f64 {
    1e-5 * p.norm().max(1.0)
}

/// Finite-difference Jacobian of the population flow at `params`.
pub fn linearize_at(params: &ModelParams, spec: &MarkovSpec, fd_step: Option<f64>, order: FdOrder) -> Result<Linearization> {
    let (d, m) = (params.d, params.m);
    let h = fd_step.unwrap_or_else(|| default_fd_step(params));
    if !(h > 0.0) {
        return Err(invalid("fd_step", "must be > 0"));
    }
    let f = |v: &[f64]| flow_rhs(&ModelParams::from_flat(d, m, v)?, spec);
    Ok(Linearization::from_jacobian(fd_jacobian(&f, &params.to_flat(), h, order)?))
}

pub fn linearize(point: &CriticalPoint, spec: &MarkovSpec, fd_step: Option<f64>) -> Result<Linearization> {
    linearize_at(&point.params, spec, fd_step, FdOrder::Second)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnstableReport {
    pub eigenvalue: f64,
    pub rank1_residual_q: f64,
    pub rank1_residual_k: f64,
    /// Principal angle (rad) between the right factors of the WQ and WK blocks.
    pub tilde_angle: f64,
    /// |cos| between the left factor of the WQ block and α₁.
    pub left_alignment: f64,
    /// Cosine between the induced Φ direction and ππᵀ.
    pub phi_cosine: f64,
}

/// Shape of the top eigenvector of `lin` at θ_c¹.
pub fn unstable_direction_check(point: &CriticalPoint, spec: &MarkovSpec, lin: &Linearization) -> Result<UnstableReport> {
    if point.kind != CriticalKind::Second {
        return Err(invalid("point", "unstable-direction check applies to θ_c¹"));
    }
    let (d, m) = (point.params.d, point.params.m);
    let v = lin.top_vector();
    let dir = ModelParams::from_flat(d, m, &v)?;
    let (sq, uq, vq) = linalg::top_singular(&dir.wq);
    let (sk, _, vk) = linalg::top_singular(&dir.wk);
    if sq == 0.0 || sk == 0.0 {
        return Err(Error::Certification("top eigenvector has no attention component".into()));
    }
    let c = linalg::dot(vq.as_slice(), vk.as_slice()).abs().min(1.0);
    let w0q = &point.params.w0 * &dir.wq;
    let w0k = &point.params.w0 * &dir.wk;
    let dphi = w0q * w0k.transpose();
    let pi = spec.pi();
    let ppt: Vec<f64> = (0..d * d).map(|k| pi[k / d] * pi[k % d]).collect();
    let dphi_flat: Vec<f64> = (0..d * d).map(|k| dphi[(k / d, k % d)]).collect();
    Ok(UnstableReport {
        eigenvalue: lin.mu,
        rank1_residual_q: linalg::rank_one_residual(&dir.wq),
        rank1_residual_k: linalg::rank_one_residual(&dir.wk),
        tilde_angle: c.acos(),
        left_alignment: linalg::dot(uq.as_slice(), &point.alpha1).abs(),
        phi_cosine: linalg::cosine(&dphi_flat, &ppt).abs(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FocusReport {
    pub focus_level: f64,
    pub min_first_entry: f64,
    pub phi_cosine: f64,
}

/// Move along the unstable ray from θ_c¹ (`WQ = WK = ρ α₁α̃ᵀ`) until
/// `Φ = s ππᵀ` with `s‖π‖²π₁ = focus_level`, and report the proxy attention.
pub fn focus_along_ray(point: &CriticalPoint, spec: &MarkovSpec, focus_level: f64) -> Result<FocusReport> {
    let kappa = point.kappa1.ok_or_else(|| invalid("point", "needs κ₁"))?;
    let st = point.state.as_ref().ok_or_else(|| invalid("point", "needs reduced coordinates"))?;
    let pi = spec.pi();
    let rho = (focus_level / (kappa * kappa * pi[0])).sqrt();
    let mut s = st.clone();
    s.lam_q = rho;
    s.lam_k = rho;
    let p = s.lift();
    let a = proxy_attention(&p, spec)?;
    let d = spec.d();
    let phi = p.phi();
    let phi_flat: Vec<f64> = (0..d * d).map(|k| phi[(k / d, k % d)]).collect();
    let ppt: Vec<f64> = (0..d * d).map(|k| pi[k / d] * pi[k % d]).collect();
    let level = phi_flat[0] / (pi[0] * pi[0]) * linalg::dot(pi, pi) * pi[0];
    Ok(FocusReport {
        focus_level: level,
        min_first_entry: (0..d).map(|i| a[(i, 0)]).fold(f64::INFINITY, f64::min),
        phi_cosine: linalg::cosine(&phi_flat, &ppt),
    })
}

/// Rank-one point with saturated attention (`𝔸₁ ≈ e₁`, `𝔸_{i≠1} ≈ (0,½,½)`)
/// matching `ℙ₁ = P₁` and `ℙ_{i≠1} = ½(P₂ + P₃)`, normalised to `‖γ‖ = ‖β‖`,
/// `βᵀ𝟙 = 0`.
pub fn find_degenerate_point(spec: &MarkovSpec, m: usize, eta_large: Option<f64>) -> Result<CriticalPoint> {
    if spec.d() != 3 {
        return Err(invalid("d", "the degenerate point is constructed for d = 3"));
    }
    if !spec.dist.is_low_symmetric() {
        return Err(invalid("pi", "needs symmetric low-frequency tokens (δ = 0)"));
    }
    if m < 2 {
        return Err(invalid("m", "needs m ≥ 2"));
    }
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let l1 = logit(spec.p[(0, 0)]) + 2f64.ln();
    let l2 = logit(spec.p[(1, 0)]) + 2f64.ln();
    if !(l1 > 0.0 && l2 < 0.0) {
        return Err(Error::NoRoot(format!(
            "need P₁₁ > 1/3 > P₂₁ for γ₁ > 0 > γ_low (P₁₁={}, P₂₁={})",
            spec.p[(0, 0)],
            spec.p[(1, 0)]
        )));
    }
    let dbeta = (1.5 * (l1 * l1 + 2.0 * l2 * l2)).powf(0.25);
    let (g1, g2) = (l1 / dbeta, l2 / dbeta);
    let need = DEGENERATE_SATURATION / (g1.abs().min(g2.abs()) * (g1 - g2));
    let eta = eta_large.unwrap_or(need).max(need);
    if !eta.is_finite() || eta * g1 * g1 > 700.0 {
        return Err(Error::NoRoot("required attention logits leave the representable range".into()));
    }
    let state = RankOneState::balanced(
        vec![g1, g2, g2],
        vec![2.0 * dbeta / 3.0, -dbeta / 3.0, -dbeta / 3.0],
        eta,
        m,
    )?;
    let (params, g) = certify(state.lift(), spec, CriticalKind::Degenerate)?;
    Ok(CriticalPoint {
        params,
        kind: CriticalKind::Degenerate,
        kappa1: None,
        grad_norm: g,
        alpha1: state.alpha1.clone(),
        state: Some(state),
    })
}

/// Largest deviation |ℙ_ij − target_ij| where rows i ≥ 2 target ½(P₂ + P₃).
pub fn degenerate_row_residual(point: &CriticalPoint, spec: &MarkovSpec) -> Result<f64> {
    let st = population_forward(&point.params, spec)?;
    let mut r: f64 = 0.0;
    for j in 0..3 {
        r = r.max((st.pm[(0, j)] - spec.p[(0, j)]).abs());
        let avg = 0.5 * (spec.p[(1, j)] + spec.p[(2, j)]);
        r = r.max((st.pm[(1, j)] - avg).abs()).max((st.pm[(2, j)] - avg).abs());
    }
    Ok(r)
}

/// Distance between the nonlinear flow from `base + eps·dir` at time `t` and
/// its linear prediction `base + e^{Jt}·eps·dir`.
pub fn linearization_deviation(
    base: &ModelParams,
    spec: &MarkovSpec,
    lin: &Linearization,
    dir: &[f64],
    eps: f64,
    t: f64,
    h: f64,
) -> Result<(f64, Vec<f64>)> {
    let v = &lin.eigenvectors;
    let x0 = Vec64::from_column_slice(dir) * eps;
    let coeff = v.transpose() * &x0;
    let scaled = Vec64::from_iterator(coeff.len(), coeff.iter().zip(&lin.eigenvalues).map(|(c, l)| c * (l * t).exp()));
    let pred = v * scaled;
    let cfg = FlowConfig {
        step_size: h,
        max_time: t,
        integrator: Integrator::Rk4,
        record_every: usize::MAX,
        adaptive: false,
        snapshot_every: 0,
    };
    let start = base.offset(eps, dir);
    let traj = integrate_flow(&start, spec, &cfg)?;
    let end = traj.snapshots.last().expect("final snapshot").to_flat();
    let delta: Vec<f64> = end.iter().zip(base.to_flat()).map(|(a, b)| a - b).collect();
    let err: Vec<f64> = delta.iter().zip(pred.iter()).map(|(a, b)| a - b).collect();
    Ok((linalg::norm(&err), delta))
}
