//! Symmetry breaking at the degenerate point for d = 3: kernel and range of
//! the chart Jacobian J₀, the first-order forcing f₁, the corrected point θ(δ)
//! and the eigenvalue scales it produces under the δ-perturbed chain.

use rayon::prelude::*;
use serde::Serialize;

use crate::critical::{fd_jacobian, linearize_at, CriticalKind, CriticalPoint, FdOrder};
use crate::error::{invalid, Error, Result};
use crate::flow::{integrate_flow, FlowConfig};
use crate::linalg::{self, Mat, Vec64};
use crate::markov::{build_stationary, build_transition, MarkovSpec};
use crate::model::ModelParams;
use crate::population::param_gradient_population;
use crate::reduced::{reduced_rhs, RankOneState};
use crate::rng;
use crate::trajectory::Trajectory;

/// Chart dimension: (γ, β) ∈ ℝ³ × ℝ³.
pub const CHART_DIM: usize = 6;

/// Step for finite differences in δ.
pub const DELTA_FD_STEP: f64 = 1e-5;

/// Scaled step for second-order finite-difference oracles in the chart.
pub const CHART_FD_STEP: f64 = 1e-4;

/// Step in δ for the second derivative of the range solution.
pub const ZETA_FD_STEP: f64 = 1e-3;

/// Direction of the asymmetry: π₂ = (1−π₁)/2 + δ, π₃ = (1−π₁)/2 − δ.
pub const ASYMMETRY: [f64; 2] = [1.0, -1.0];

pub fn perturbed_spec(spec: &MarkovSpec, delta: f64) -> Result<MarkovSpec> {
    if spec.d() != 3 {
        return Err(invalid("d", "perturbation analysis is restricted to d = 3"));
    }
    build_transition(build_stationary(3, spec.dist.pi1, &ASYMMETRY, delta)?, spec.lambda)
}

/// `−∇L` restricted to the (γ, β) chart at frozen `λ_Q, λ_K`.
pub fn chart_rhs(base: &RankOneState, x: &[f64], spec: &MarkovSpec) -> Result<Vec<f64>> {
    let mut s = base.clone();
    s.gamma = x[..3].to_vec();
    s.beta = x[3..6].to_vec();
    let r = reduced_rhs(&s, spec)?;
    let mut v = r.gamma;
    v.extend(r.beta);
    Ok(v)
}

fn chart_point(s: &RankOneState) -> Vec<f64> {
    let mut x = s.gamma.clone();
    x.extend_from_slice(&s.beta);
    x
}

fn unit(v: [f64; 6]) -> [f64; 6] {
    let n = linalg::norm(&v);
    v.map(|x| x / n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LSDecomposition {
    pub state: RankOneState,
    pub spec: MarkovSpec,
    pub qk: Mat,
    pub qr: Mat,
    pub j0: Mat,
    /// Finite-difference chart Jacobian, kept for the oracle comparison.
    pub j0_fd: Mat,
    pub lambda_r: Mat,
    pub c1: f64,
    /// max ‖J₀k_i‖.
    pub kernel_residual: f64,
    /// Second δ-derivative of the range solution at δ = 0.
    pub zeta_dd: Vec<f64>,
}

/// Rescale along the (−γ, β) symmetry so that ‖γ‖ = ‖β‖.
pub fn gauge_normalize(s: &RankOneState) -> Result<RankOneState> {
    let sum: f64 = s.beta.iter().sum();
    let bn = linalg::norm(&s.beta);
    if sum.abs() > 1e-10 * bn.max(1.0) {
        return Err(invalid("beta", format!("gauge requires βᵀ𝟙 = 0, got {sum:e}")));
    }
    let a = (bn / linalg::norm(&s.gamma)).sqrt();
    let mut out = s.clone();
    out.gamma.iter_mut().for_each(|g| *g *= a);
    out.beta.iter_mut().for_each(|b| *b /= a);
    // keep Φ = ηγγᵀ unchanged
    out.lam_q /= a;
    out.lam_k /= a;
    Ok(out)
}

/// `J₀ = −[[c₁,0,0,v₁],[0,c₂,c₂,v₂],[0,c₂,c₂,v₂],[v₁ᵀ,v₂ᵀ,v₂ᵀ,C]]` from the
/// output laws ℙ₁ and ℙ₂ at a saturated point.
fn analytic_j0(s: &RankOneState, spec: &MarkovSpec) -> Result<(Mat, Mat)> {
    let st = s.population(spec)?;
    let pi1 = spec.pi()[0];
    let (g1, g2) = (s.gamma[0], s.gamma[1]);
    let b = Vec64::from_column_slice(&s.beta);
    let v1m = linalg::var_matrix(&linalg::row(&st.pm, 0));
    let v2m = linalg::var_matrix(&linalg::row(&st.pm, 1));
    let c1 = pi1 * (b.transpose() * &v1m * &b)[(0, 0)];
    let c2 = 0.25 * (1.0 - pi1) * (b.transpose() * &v2m * &b)[(0, 0)];
    let v1 = (b.transpose() * &v1m) * (pi1 * g1);
    let v2 = (b.transpose() * &v2m) * (0.5 * (1.0 - pi1) * g2);
    let cc = &v1m * (pi1 * g1 * g1) + &v2m * ((1.0 - pi1) * g2 * g2);
    let mut j = Mat::zeros(6, 6);
    j[(0, 0)] = c1;
    for a in 1..3 {
        for bb in 1..3 {
            j[(a, bb)] = c2;
        }
    }
    for k in 0..3 {
        j[(0, 3 + k)] = v1[k];
        j[(3 + k, 0)] = v1[k];
        for a in 1..3 {
            j[(a, 3 + k)] = v2[k];
            j[(3 + k, a)] = v2[k];
        }
        for l in 0..3 {
            j[(3 + k, 3 + l)] = cc[(k, l)];
        }
    }
    Ok((-j, st.pm))
}

pub fn ls_decompose(point: &CriticalPoint, spec: &MarkovSpec) -> Result<LSDecomposition> {
    if point.kind != CriticalKind::Degenerate || spec.d() != 3 {
        return Err(invalid("point", "LS decomposition needs a degenerate point with d = 3"));
    }
    let raw = point.state.as_ref().ok_or_else(|| invalid("point", "missing reduced coordinates"))?;
    let s = gauge_normalize(raw)?;
    let (g, b) = (&s.gamma, &s.beta);
    let r2 = std::f64::consts::FRAC_1_SQRT_2;
    let r3 = 1.0 / 3f64.sqrt();
    let k = [
        [0.0, r2, -r2, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, r3, r3, r3],
        unit([-g[0], -g[1], -g[2], b[0], b[1], b[2]]),
    ];
    let q = [
        unit([-2.0 * g[1], g[0], g[0], 0.0, 0.0, 0.0]),
        [0.0, 0.0, 0.0, 0.0, r2, -r2],
        unit([g[0], g[1], g[2], b[0], b[1], b[2]]),
    ];
    let qk = Mat::from_fn(6, 3, |i, j| k[j][i]);
    let qr = Mat::from_fn(6, 3, |i, j| q[j][i]);
    let (j0, pm) = analytic_j0(&s, spec)?;
    let x0 = chart_point(&s);
    let f = |x: &[f64]| chart_rhs(&s, x, spec);
    let j0_fd = fd_jacobian(&f, &x0, CHART_FD_STEP * linalg::norm(&x0).max(1.0), FdOrder::Fourth)?;
    let lambda_r = qr.transpose() * &j0 * &qr;
    let c1 = spec.pi()[0] * g[0] * g[0] * pm[(0, 1)] + (1.0 - spec.pi()[0]) * g[1] * g[1] * pm[(1, 1)];
    let kernel_residual = (0..3).map(|c| (&j0 * qk.column(c)).norm()).fold(0.0, f64::max);
    let mut ls = LSDecomposition {
        state: s,
        spec: spec.clone(),
        qk,
        qr,
        j0,
        j0_fd,
        lambda_r,
        c1,
        kernel_residual,
        zeta_dd: vec![0.0; 3],
    };
    // ζ(0) = 0, so the even part of ζ(±h) isolates ζ''(0).
    let h = ZETA_FD_STEP;
    let (up, dn) = (ls.solve_range(h)?, ls.solve_range(-h)?);
    ls.zeta_dd = up.iter().zip(&dn).map(|(a, b)| (a + b) / (h * h)).collect();
    Ok(ls)
}

impl LSDecomposition {
    /// `s = λγ₂ + (1−λ)(π₁γ₁ + (1−π₁)γ₂)`.
    pub fn forcing_scale(&self) -> f64 {
        let (lam, pi1) = (self.spec.lambda, self.spec.pi()[0]);
        let (g1, g2) = (self.state.gamma[0], self.state.gamma[1]);
        lam * g2 + (1.0 - lam) * (pi1 * g1 + (1.0 - pi1) * g2)
    }

    pub fn f1(&self) -> Vec<f64> {
        let s = self.forcing_scale();
        vec![0.0, 0.0, 0.0, 0.0, s, -s]
    }

    /// Central difference of the chart `−∇L` in δ at fixed θ.
    pub fn f1_fd(&self) -> Result<Vec<f64>> {
        let x0 = chart_point(&self.state);
        let h = DELTA_FD_STEP;
        let up = chart_rhs(&self.state, &x0, &perturbed_spec(&self.spec, h)?)?;
        let dn = chart_rhs(&self.state, &x0, &perturbed_spec(&self.spec, -h).or_else(|_| self.mirrored(h))?)?;
        Ok(up.iter().zip(&dn).map(|(a, b)| (a - b) / (2.0 * h)).collect())
    }

    /// δ < 0 is the same chain with tokens 2 and 3 swapped.
    fn mirrored(&self, h: f64) -> Result<MarkovSpec> {
        build_transition(build_stationary(3, self.spec.dist.pi1, &[-1.0, 1.0], h)?, self.spec.lambda)
    }

    fn spec_at(&self, delta: f64) -> Result<MarkovSpec> {
        if delta >= 0.0 {
            perturbed_spec(&self.spec, delta)
        } else {
            self.mirrored(-delta)
        }
    }

    /// `ζ₂ = √2·s·δ / c₁`.
    pub fn zeta2(&self, delta: f64) -> f64 {
        std::f64::consts::SQRT_2 * self.forcing_scale() * delta / self.c1
    }

    /// Chart Jacobian at `x` under the chain with asymmetry `delta`.
    fn chart_jacobian(&self, base: &RankOneState, delta: f64) -> Result<Mat> {
        let spec = self.spec_at(delta)?;
        let x0 = chart_point(base);
        let f = |x: &[f64]| chart_rhs(base, x, &spec);
        fd_jacobian(&f, &x0, CHART_FD_STEP * linalg::norm(&x0).max(1.0), FdOrder::Fourth)
    }

    /// `H₁ = ∂_δ J` at fixed θ, by central differences in δ.
    pub fn h1(&self) -> Result<Mat> {
        let h = 1e-4;
        Ok((self.chart_jacobian(&self.state, h)? - self.chart_jacobian(&self.state, -h)?) / (2.0 * h))
    }

    /// `J₁ = d/dδ J(θ(δ), δ)` along the corrected branch.
    pub fn j1(&self) -> Result<Mat> {
        let h = 1e-4;
        let up = self.chart_jacobian(&self.range_state(&self.zeta_expansion(h)), h)?;
        let dn = self.chart_jacobian(&self.range_state(&self.zeta_expansion(-h)), -h)?;
        Ok((up - dn) / (2.0 * h))
    }

    /// ‖Q_KᵀXQ_K‖ / ‖X‖.
    pub fn kernel_projection_ratio(&self, x: &Mat) -> f64 {
        (self.qk.transpose() * x * &self.qk).norm() / x.norm()
    }

    /// Appendix quantity `c_ζ(1−π₁)γ₂ℙ₂₂ − (λ + (1−π₁)(1−λ))` with `c_ζ = s/c₁`;
    /// the transverse Θ(δ) eigenvalue needs it to be nonzero.
    pub fn nondegeneracy(&self) -> Result<f64> {
        let pm = self.state.population(&self.spec)?.pm;
        let (lam, pi1) = (self.spec.lambda, self.spec.pi()[0]);
        let cz = self.forcing_scale() / self.c1;
        Ok(cz * (1.0 - pi1) * self.state.gamma[1] * pm[(1, 1)] - (lam + (1.0 - pi1) * (1.0 - lam)))
    }

    fn range_state(&self, y: &[f64]) -> RankOneState {
        let step = &self.qr * Vec64::from_column_slice(y);
        let mut s = self.state.clone();
        for i in 0..3 {
            s.gamma[i] += step[i];
            s.beta[i] += step[3 + i];
        }
        s
    }

    /// Solve the range equation `Q_Rᵀ(−∇L)(θ* + Q_R y, δ) = 0` by Newton's
    /// method, starting from the first-order solution `y = (0, ζ₂(δ), 0)`.
    pub fn solve_range(&self, delta: f64) -> Result<Vec<f64>> {
        let spec = self.spec_at(delta)?;
        let g = |y: &[f64]| -> Result<Vec<f64>> {
            let s = self.range_state(y);
            let r = Vec64::from_vec(chart_rhs(&s, &chart_point(&s), &spec)?);
            Ok((self.qr.transpose() * r).iter().cloned().collect())
        };
        let mut y = vec![0.0, self.zeta2(delta), 0.0];
        let mut res = linalg::norm(&g(&y)?);
        for _ in 0..30 {
            if res < 1e-15 {
                break;
            }
            let jac = fd_jacobian(&g, &y, 1e-6, FdOrder::Fourth)?;
            let rhs = -Vec64::from_vec(g(&y)?);
            let step = jac
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::Certification("range Jacobian Λ_R is singular".into()))?;
            let trial: Vec<f64> = y.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let r = linalg::norm(&g(&trial)?);
            if !(r < res) {
                break;
            }
            y = trial;
            res = r;
        }
        Ok(y)
    }

    /// Range coordinates to second order: `δ(0, ζ₂', 0) + ½δ²ζ''`.
    pub fn zeta_expansion(&self, delta: f64) -> Vec<f64> {
        let mut y: Vec<f64> = self.zeta_dd.iter().map(|z| 0.5 * delta * delta * z).collect();
        y[1] += self.zeta2(delta);
        y
    }

    /// θ(δ) from the second-order range expansion, with the first-order and
    /// Newton-exact variants evaluated alongside.
    pub fn build_perturbed_point(&self, delta: f64) -> Result<PerturbedPoint> {
        if !(delta >= 0.0) {
            return Err(invalid("delta", "must be ≥ 0"));
        }
        let spec = perturbed_spec(&self.spec, delta)?;
        let grad = |y: &[f64]| -> Result<f64> { Ok(param_gradient_population(&self.range_state(y).lift(), &spec)?.norm()) };
        let zeta = self.zeta_expansion(delta);
        let exact = self.solve_range(delta)?;
        let state = self.range_state(&zeta);
        let theta = state.lift();
        let grad_norm = grad(&zeta)?;
        let x = chart_point(&state);
        let rhs = Vec64::from_vec(chart_rhs(&state, &x, &spec)?);
        let range_residual = (self.qr.transpose() * rhs).norm();
        Ok(PerturbedPoint {
            delta,
            theta,
            state,
            zeta2: zeta[1],
            zeta2_first_order: self.zeta2(delta),
            grad_norm_first_order: grad(&[0.0, self.zeta2(delta), 0.0])?,
            grad_norm_exact: grad(&exact)?,
            base_grad_norm: grad(&[0.0; 3])?,
            zeta,
            zeta_exact: exact,
            grad_norm,
            range_residual,
            spec,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedPoint {
    pub delta: f64,
    pub theta: ModelParams,
    pub state: RankOneState,
    pub spec: MarkovSpec,
    /// Range coordinates of θ(δ) (second-order expansion).
    pub zeta: Vec<f64>,
    /// Newton solution of the range equation.
    pub zeta_exact: Vec<f64>,
    pub zeta2: f64,
    /// `√2·s·δ / c₁`.
    pub zeta2_first_order: f64,
    pub grad_norm: f64,
    pub grad_norm_first_order: f64,
    pub grad_norm_exact: f64,
    /// ‖∇L‖ of the uncorrected degenerate point under the same δ.
    pub base_grad_norm: f64,
    /// ‖Q_Rᵀ ∇L‖ in the chart.
    pub range_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EigenSplit {
    /// Largest positive eigenvalue among eigenvectors lying in the rank-one tangent space (0 if none).
    pub tangential_max: f64,
    /// Largest positive eigenvalue among the remaining eigenvectors (0 if none).
    pub transverse_max: f64,
    pub transverse_vector: Vec<f64>,
    /// 10·max|J − Jᵀ| of the raw difference Jacobian; eigenvalues below it count as zero.
    pub noise_floor: f64,
}

/// Orthonormal basis of the tangent space of the rank-one manifold at `s`
/// with fixed α₁, α̃₁: the W0 column, the W1 row, and the WQ, WK scales.
pub fn tangent_basis(s: &RankOneState) -> Mat {
    let (d, m) = (s.d(), s.m());
    let p = 2 * d * m + 2 * m * m;
    let mut cols = Vec::new();
    for k in 0..d {
        let mut w0 = vec![0.0; p];
        let mut w1 = vec![0.0; p];
        for j in 0..m {
            w0[k * m + j] = s.alpha1[j];
            w1[d * m + j * d + k] = s.alpha1[j];
        }
        cols.push(w0);
        cols.push(w1);
    }
    for off in [2 * d * m, 2 * d * m + m * m] {
        let mut v = vec![0.0; p];
        for a in 0..m {
            for b in 0..m {
                v[off + a * m + b] = s.alpha1[a] * s.alpha1_tilde[b];
            }
        }
        cols.push(v);
    }
    Mat::from_fn(p, cols.len(), |i, j| cols[j][i])
}

/// Full-space finite-difference Jacobian at θ(δ), eigenvectors split by
/// overlap (> 0.9) with the rank-one tangent space.
pub fn scale_split_eigen(pp: &PerturbedPoint) -> Result<EigenSplit> {
    let lin = linearize_at(&pp.theta, &pp.spec, None, FdOrder::Fourth)?;
    let t = tangent_basis(&pp.state);
    let noise_floor = 10.0 * lin.asymmetry;
    let mut out = EigenSplit { tangential_max: 0.0, transverse_max: 0.0, transverse_vector: Vec::new(), noise_floor };
    for (k, &ev) in lin.eigenvalues.iter().enumerate() {
        let v = lin.eigenvectors.column(k);
        let overlap = (t.transpose() * v).norm();
        if ev <= noise_floor {
            continue;
        }
        if overlap > 0.9 {
            out.tangential_max = out.tangential_max.max(ev);
        } else if ev > out.transverse_max {
            out.transverse_max = ev;
            out.transverse_vector = v.iter().cloned().collect();
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LsRow {
    pub delta: f64,
    pub grad_norm: f64,
    pub grad_norm_first_order: f64,
    pub grad_norm_exact: f64,
    pub base_grad_norm: f64,
    pub range_residual: f64,
    pub zeta2: f64,
    pub zeta2_first_order: f64,
    pub transverse_max_eig: f64,
    pub tangential_max_eig: f64,
    pub noise_floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LsReport {
    pub rows: Vec<LsRow>,
    pub grad_slope: f64,
    pub transverse_slope: f64,
    /// Fitted over the δ values whose tangential eigenvalue clears the noise
    /// floor; `None` when fewer than two do.
    pub tangential_slope: Option<f64>,
    pub range_slope: f64,
    pub nondegeneracy: f64,
    pub c1: f64,
    pub kernel_residual: f64,
    pub j0_fd_error: f64,
    pub f1: Vec<f64>,
    pub f1_fd: Vec<f64>,
    pub h1_kernel_ratio: f64,
    pub j1_kernel_ratio: f64,
}

impl LsReport {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "sweep": self.rows.iter().map(|r| serde_json::json!({
                "delta": r.delta,
                "grad_norm": r.grad_norm,
                "transverse_max_eig": r.transverse_max_eig,
                "tangential_max_eig": r.tangential_max_eig,
            })).collect::<Vec<_>>(),
            "slopes": {
                "grad_norm": self.grad_slope,
                "transverse_max_eig": self.transverse_slope,
                "tangential_max_eig": self.tangential_slope,
                "range_residual": self.range_slope,
            },
            "detail": self,
        })
    }
}

/// δ-sweep over the corrected points; sweep entries run in parallel.
pub fn ls_sweep(ls: &LSDecomposition, deltas: &[f64]) -> Result<LsReport> {
    if deltas.len() < 3 || deltas.iter().any(|&d| !(d > 0.0)) {
        return Err(invalid("deltas", "need ≥ 3 positive values"));
    }
    let rows = deltas
        .par_iter()
        .map(|&delta| {
            let pp = ls.build_perturbed_point(delta)?;
            let split = scale_split_eigen(&pp)?;
            Ok(LsRow {
                delta,
                grad_norm: pp.grad_norm,
                grad_norm_first_order: pp.grad_norm_first_order,
                grad_norm_exact: pp.grad_norm_exact,
                base_grad_norm: pp.base_grad_norm,
                range_residual: pp.range_residual,
                zeta2: pp.zeta2,
                zeta2_first_order: pp.zeta2_first_order,
                transverse_max_eig: split.transverse_max,
                tangential_max_eig: split.tangential_max,
                noise_floor: split.noise_floor,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ds: Vec<f64> = rows.iter().map(|r| r.delta).collect();
    let col = |f: fn(&LsRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let (td, tv): (Vec<f64>, Vec<f64>) =
        rows.iter().filter(|r| r.tangential_max_eig > 0.0).map(|r| (r.delta, r.tangential_max_eig)).unzip();
    let tangential_slope = (td.len() >= 2).then(|| linalg::loglog_slope(&td, &tv));
    let f1 = ls.f1();
    let f1_fd = ls.f1_fd()?;
    Ok(LsReport {
        grad_slope: linalg::loglog_slope(&ds, &col(|r| r.grad_norm)),
        transverse_slope: linalg::loglog_slope(&ds, &col(|r| r.transverse_max_eig)),
        tangential_slope,
        range_slope: linalg::loglog_slope(&ds, &col(|r| r.range_residual)),
        rows,
        nondegeneracy: ls.nondegeneracy()?,
        c1: ls.c1,
        kernel_residual: ls.kernel_residual,
        j0_fd_error: (&ls.j0 - &ls.j0_fd).amax(),
        f1,
        f1_fd,
        h1_kernel_ratio: ls.kernel_projection_ratio(&ls.h1()?),
        j1_kernel_ratio: ls.kernel_projection_ratio(&ls.j1()?),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EscapeReport {
    pub trajectory: Trajectory,
    /// Fitted exponential rate of the manifold distance over its growth window.
    pub rate: Option<f64>,
    pub max_manifold_distance: f64,
    /// Fitted exponential rate of the orthogonal low-token embedding component.
    pub orth_rate: Option<f64>,
    /// Final ‖𝔸₂ − 𝔸₃‖.
    pub row_split: f64,
    /// Final ‖W0[2,:] − W0[3,:]‖.
    pub embedding_split: f64,
}

/// Full flow from θ(δ) plus a random kick of norm `kick` (stream `seed`).
pub fn escape_experiment(pp: &PerturbedPoint, cfg: &FlowConfig, kick: f64, seed: u64) -> Result<EscapeReport> {
    cfg.validate()?;
    let p = pp.theta.num_params();
    let dir = rng::unit_vec(&mut rng::stream(seed, 0), p);
    let start = pp.theta.offset(kick, &dir);
    let trajectory = integrate_flow(&start, &pp.spec, cfg)?;
    let md: Vec<f64> = trajectory.metrics.iter().map(|m| m.manifold_distance).collect();
    let max_md = md.iter().cloned().fold(0.0, f64::max);
    let rate = growth_window_rate(&trajectory.times, &md);
    let orth: Vec<f64> = trajectory.metrics.iter().map(|m| m.orth_norm).collect();
    let orth_rate = growth_window_rate(&trajectory.times, &orth);
    let last = trajectory.snapshots.last().ok_or_else(|| Error::Integration {
        t: cfg.max_time,
        reason: "no snapshot recorded".into(),
    })?;
    let a = crate::population::proxy_attention(last, &pp.spec)?;
    let row_split = (a.row(1) - a.row(2)).norm();
    let embedding_split = (last.w0.row(1) - last.w0.row(2)).norm();
    Ok(EscapeReport { trajectory, rate, max_manifold_distance: max_md, orth_rate, row_split, embedding_split })
}

/// Rate of `y` fitted where it lies between 100× its initial value and 1e-3.
fn growth_window_rate(t: &[f64], y: &[f64]) -> Option<f64> {
    let lo = 100.0 * y.first()?.abs().max(1e-300);
    crate::reduced::fit_growth_rate(t, y, lo, 1e-3).map(|f| f.0)
}
