//! Long-context, infinite-sample limit of the loss: the token-level proxy
//! attention `𝔸`, the output law `ℙ_i = softmax(𝔸_i M)`, the population loss
//! and its exact gradients with respect to `M` and `Φ`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::markov::{sample_dataset, MarkovSpec};
use crate::model::{assemble_param_gradient, empirical_loss_grad, ModelParams, ParamGradient};
use crate::serde_mat;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PopulationState {
    #[serde(rename = "A", with = "serde_mat")]
    pub a: Mat,
    #[serde(rename = "P_model", with = "serde_mat")]
    pub pm: Mat,
    pub loss: f64,
    #[serde(rename = "gM", with = "serde_mat")]
    pub g_m: Mat,
    #[serde(rename = "gPhi", with = "serde_mat")]
    pub g_phi: Mat,
}

/// Row i is the π-weighted softmax of row i of Φ.
pub fn proxy_attention_phi(phi: &Mat, pi: &[f64]) -> Mat {
    let d = pi.len();
    let mut a = Mat::zeros(d, d);
    for i in 0..d {
        let row = linalg::weighted_softmax(pi, &linalg::row(phi, i));
        for j in 0..d {
            a[(i, j)] = row[j];
        }
    }
    a
}

fn check_dims(p: &ModelParams, spec: &MarkovSpec) -> Result<()> {
    if p.d != spec.d() {
        return Err(Error::Dimension(format!("params d={} vs spec d={}", p.d, spec.d())));
    }
    Ok(())
}

pub fn proxy_attention(p: &ModelParams, spec: &MarkovSpec) -> Result<Mat> {
    check_dims(p, spec)?;
    Ok(proxy_attention_phi(&p.phi(), spec.pi()))
}

/// Population state as a function of the products `(M, Φ)`.
pub fn population_from_mphi(mm: &Mat, phi: &Mat, spec: &MarkovSpec) -> PopulationState {
    let d = spec.d();
    let pi = spec.pi();
    let a = proxy_attention_phi(phi, pi);
    let z = &a * mm;
    let mut pm = Mat::zeros(d, d);
    let mut loss = 0.0;
    let mut g_m = Mat::zeros(d, d);
    let mut g_phi = Mat::zeros(d, d);
    for i in 0..d {
        let zi = linalg::row(&z, i);
        let pi_row = linalg::softmax(&zi);
        let zmax = zi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = zmax + zi.iter().map(|v| (v - zmax).exp()).sum::<f64>().ln();
        // residual r = P_i − ℙ_i
        let r: Vec<f64> = (0..d).map(|j| spec.p[(i, j)] - pi_row[j]).collect();
        for j in 0..d {
            pm[(i, j)] = pi_row[j];
            if spec.p[(i, j)] > 0.0 {
                loss -= pi[i] * spec.p[(i, j)] * (zi[j] - lse);
            }
        }
        for k in 0..d {
            for j in 0..d {
                g_m[(k, j)] -= pi[i] * a[(i, k)] * r[j];
            }
        }
        // w = r Mᵀ, then row i of gΦ is −π_i w Var(𝔸_i)
        let w: Vec<f64> = (0..d).map(|k| (0..d).map(|j| r[j] * mm[(k, j)]).sum()).collect();
        let arow = linalg::row(&a, i);
        let wbar = linalg::dot(&w, &arow);
        for l in 0..d {
            g_phi[(i, l)] = -pi[i] * arow[l] * (w[l] - wbar);
        }
    }
    PopulationState { a, pm, loss, g_m, g_phi }
}

pub fn population_forward(p: &ModelParams, spec: &MarkovSpec) -> Result<PopulationState> {
    check_dims(p, spec)?;
    Ok(population_from_mphi(&p.m_mat(), &p.phi(), spec))
}

pub fn population_loss(p: &ModelParams, spec: &MarkovSpec) -> Result<f64> {
    Ok(population_forward(p, spec)?.loss)
}

/// `+∇L` of the population loss with respect to the four weight matrices.
pub fn param_gradient_population(p: &ModelParams, spec: &MarkovSpec) -> Result<ParamGradient> {
    let st = population_forward(p, spec)?;
    Ok(assemble_param_gradient(p, &st.g_m, &st.g_phi))
}

/// Right-hand side of the gradient flow, `−∇L`, as a flat vector.
pub fn flow_rhs(p: &ModelParams, spec: &MarkovSpec) -> Result<Vec<f64>> {
    Ok(param_gradient_population(p, spec)?
        .to_flat()
        .into_iter()
        .map(|g| -g)
        .collect())
}

/// Lower bound Σ_i π_i H(P_i) of the population loss.
pub fn entropy_floor(spec: &MarkovSpec) -> f64 {
    (0..spec.d())
        .map(|i| spec.pi()[i] * linalg::entropy(&linalg::row(&spec.p, i)))
        .sum()
}

/// Relative Frobenius error between the empirical gradient on a fresh sample
/// and the population gradient.
pub fn monte_carlo_agreement(p: &ModelParams, spec: &MarkovSpec, n: usize, s: usize, seed: u64) -> Result<f64> {
    let data = sample_dataset(spec, n, s, seed)?;
    let (_, ge) = empirical_loss_grad(p, &data)?;
    let gp = param_gradient_population(p, spec)?;
    let diff: Vec<f64> = ge.to_flat().iter().zip(gp.to_flat()).map(|(a, b)| a - b).collect();
    let denom = gp.norm();
    if denom == 0.0 {
        return Err(Error::Certification("population gradient vanishes; relative error undefined".into()));
    }
    Ok(linalg::norm(&diff) / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov::{build_transition, StationaryDistribution};

    fn spec2() -> MarkovSpec {
        build_transition(StationaryDistribution::from_probs(&[0.75, 0.25]).unwrap(), 0.8).unwrap()
    }

    #[test]
    fn zero_phi_rows_equal_pi() {
        let a = proxy_attention_phi(&Mat::zeros(3, 3), &[0.5, 0.3, 0.2]);
        for i in 0..3 {
            for (j, &pj) in [0.5, 0.3, 0.2].iter().enumerate() {
                assert!((a[(i, j)] - pj).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn scalar_proxy_attention() {
        let phi = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let a = proxy_attention_phi(&phi, &[0.75, 0.25]);
        let e = std::f64::consts::E;
        let want = 0.75 * e / (0.75 * e + 0.25);
        assert!((a[(0, 0)] - want).abs() < 1e-15);
        assert!((a[(0, 0)] - 0.8907).abs() < 1e-4);
    }

    #[test]
    fn origin_loss_is_log_d() {
        let st = population_forward(&ModelParams::zeros(2, 3), &spec2()).unwrap();
        assert!((st.loss - 2f64.ln()).abs() < 1e-15);
        assert!(st.loss >= entropy_floor(&spec2()));
    }

    #[test]
    fn gphi_vanishes_for_zero_m() {
        let phi = Mat::from_row_slice(2, 2, &[0.3, -1.0, 2.0, 0.1]);
        let st = population_from_mphi(&Mat::zeros(2, 2), &phi, &spec2());
        assert!(st.g_phi.norm() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        assert!(population_forward(&ModelParams::zeros(3, 2), &spec2()).is_err());
    }
}
