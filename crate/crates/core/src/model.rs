//! The one-layer transformer `f(X) = softmax(E W0 WQ WKᵀ W0ᵀ Eᵀ) E W0 W1`,
//! its last-position cross-entropy loss and analytic gradients.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{self, Mat};
use crate::markov::{empirical_frequencies, Dataset};
use crate::rng;
use crate::serde_mat;
use crate::trajectory::{Metrics, Trajectory};

/// Per-example work is reduced in fixed chunks of this many sequences so the
/// floating-point summation order does not depend on the thread count.
const CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub d: usize,
    pub m: usize,
    /// d × m
    pub w0: Mat,
    /// m × d
    pub w1: Mat,
    /// m × m
    pub wq: Mat,
    /// m × m
    pub wk: Mat,
}

impl ModelParams {
    pub fn zeros(d: usize, m: usize) -> Self {
        ModelParams {
            d,
            m,
            w0: Mat::zeros(d, m),
            w1: Mat::zeros(m, d),
            wq: Mat::zeros(m, m),
            wk: Mat::zeros(m, m),
        }
    }

    pub fn from_matrices(w0: Mat, w1: Mat, wq: Mat, wk: Mat) -> Result<Self> {
        let (d, m) = w0.shape();
        if w1.shape() != (m, d) || wq.shape() != (m, m) || wk.shape() != (m, m) {
            return Err(Error::Dimension(format!(
                "W0 {:?}, W1 {:?}, WQ {:?}, WK {:?}",
                w0.shape(),
                w1.shape(),
                wq.shape(),
                wk.shape()
            )));
        }
        let p = ModelParams { d, m, w0, w1, wq, wk };
        if !p.is_finite() {
            return Err(invalid("params", "non-finite entry"));
        }
        Ok(p)
    }

    /// Attention logits between tokens, `Φ = W0 WQ WKᵀ W0ᵀ`.
    pub fn phi(&self) -> Mat {
        let a = &self.w0 * &self.wq;
        let b = &self.w0 * &self.wk;
        a * b.transpose()
    }

    /// Token-to-logit map `M = W0 W1`.
    pub fn m_mat(&self) -> Mat {
        &self.w0 * &self.w1
    }

    pub fn num_params(&self) -> usize {
        2 * self.d * self.m + 2 * self.m * self.m
    }

    pub fn is_finite(&self) -> bool {
        [&self.w0, &self.w1, &self.wq, &self.wk]
            .iter()
            .all(|w| w.iter().all(|x| x.is_finite()))
    }

    /// Flat vector in the order W0, W1, WQ, WK, each row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for w in [&self.w0, &self.w1, &self.wq, &self.wk] {
            push_row_major(w, &mut v);
        }
        v
    }

    pub fn from_flat(d: usize, m: usize, v: &[f64]) -> Result<Self> {
        let mut p = ModelParams::zeros(d, m);
        if v.len() != p.num_params() {
            return Err(Error::Dimension(format!(
                "flat vector of length {} for d={d}, m={m}",
                v.len()
            )));
        }
        let mut off = 0;
        for w in [&mut p.w0, &mut p.w1, &mut p.wq, &mut p.wk] {
            off = fill_row_major(w, v, off);
        }
        Ok(p)
    }

    pub fn norm(&self) -> f64 {
        linalg::norm(&self.to_flat())
    }

    /// `self + a·dir` for a flat direction.
    pub fn offset(&self, a: f64, dir: &[f64]) -> ModelParams {
        let v: Vec<f64> = self.to_flat().iter().zip(dir).map(|(x, y)| x + a * y).collect();
        ModelParams::from_flat(self.d, self.m, &v).expect("same layout")
    }

    pub fn to_json(&self, step: usize) -> serde_json::Value {
        serde_json::json!({
            "d": self.d, "m": self.m, "step": step,
            "W0": serde_mat::to_rows(&self.w0),
            "W1": serde_mat::to_rows(&self.w1),
            "WQ": serde_mat::to_rows(&self.wq),
            "WK": serde_mat::to_rows(&self.wk),
        })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<(Self, usize)> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            d: usize,
            m: usize,
            step: usize,
            #[serde(rename = "W0")]
            w0: Vec<Vec<f64>>,
            #[serde(rename = "W1")]
            w1: Vec<Vec<f64>>,
            #[serde(rename = "WQ")]
            wq: Vec<Vec<f64>>,
            #[serde(rename = "WK")]
            wk: Vec<Vec<f64>>,
        }
        let r: Raw = serde_json::from_value(v.clone())?;
        let conv = |rows: &[Vec<f64>], c: usize| serde_mat::from_rows(rows, c).map_err(Error::Format);
        let p = ModelParams::from_matrices(
            conv(&r.w0, r.m)?,
            conv(&r.w1, r.d)?,
            conv(&r.wq, r.m)?,
            conv(&r.wk, r.m)?,
        )?;
        if p.d != r.d || p.m != r.m {
            return Err(Error::Dimension("snapshot header disagrees with matrices".into()));
        }
        Ok((p, r.step))
    }
}

fn push_row_major(w: &Mat, v: &mut Vec<f64>) {
    for i in 0..w.nrows() {
        for j in 0..w.ncols() {
            v.push(w[(i, j)]);
        }
    }
}

fn fill_row_major(w: &mut Mat, v: &[f64], mut off: usize) -> usize {
    for i in 0..w.nrows() {
        for j in 0..w.ncols() {
            w[(i, j)] = v[off];
            off += 1;
        }
    }
    off
}

/// Gradient of a loss with respect to the four weight matrices (`+∇L`).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub gw0: Mat,
    pub gw1: Mat,
    pub gwq: Mat,
    pub gwk: Mat,
}

impl ParamGradient {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for w in [&self.gw0, &self.gw1, &self.gwq, &self.gwk] {
            push_row_major(w, &mut v);
        }
        v
    }

    pub fn norm(&self) -> f64 {
        linalg::norm(&self.to_flat())
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|x| x.is_finite())
    }
}

/// Chain rule from `(∂L/∂M, ∂L/∂Φ)` to the weights, with `W_QK = WQ WKᵀ`:
/// `gW0 = gM W1ᵀ + gΦ W0 W_QKᵀ + gΦᵀ W0 W_QK`, `gW1 = W0ᵀ gM`,
/// `gWQ = W0ᵀ gΦ W0 WK`, `gWK = W0ᵀ gΦᵀ W0 WQ`.
pub fn assemble_param_gradient(p: &ModelParams, g_m: &Mat, g_phi: &Mat) -> ParamGradient {
    let a = &p.w0 * &p.wq; // W0 WQ
    let b = &p.w0 * &p.wk; // W0 WK
    // gΦ W0 W_QKᵀ = gΦ (W0 WK) WQᵀ, gΦᵀ W0 W_QK = gΦᵀ (W0 WQ) WKᵀ
    let gw0 = g_m * p.w1.transpose() + g_phi * &b * p.wq.transpose() + g_phi.transpose() * &a * p.wk.transpose();
    let gw1 = p.w0.transpose() * g_m;
    let gwq = p.w0.transpose() * g_phi * &b;
    let gwk = p.w0.transpose() * g_phi.transpose() * &a;
    ParamGradient { gw0, gw1, gwq, gwk }
}

/// i.i.d. N(0, eps²) entries; matrix k uses ChaCha stream k of `seed`.
pub fn init_params(d: usize, m: usize, eps: f64, seed: u64) -> Result<ModelParams> {
    if d < 2 || m < 1 {
        return Err(invalid("d/m", format!("need d ≥ 2 and m ≥ 1, got d={d}, m={m}")));
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(invalid("eps", format!("must be ≥ 0, got {eps}")));
    }
    let gen = |k: u64, r: usize, c: usize| {
        let mut g = rng::stream(seed, k);
        Mat::from_row_slice(r, c, &rng::gaussian_vec(&mut g, r * c, eps))
    };
    Ok(ModelParams {
        d,
        m,
        w0: gen(0, d, m),
        w1: gen(1, m, d),
        wq: gen(2, m, m),
        wk: gen(3, m, m),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// s × d
    pub logits: Mat,
    /// s × s, row-stochastic
    pub attn_weights: Mat,
    pub last_row_probs: Vec<f64>,
}

fn check_tokens(d: usize, x: &[u32]) -> Result<()> {
    if x.is_empty() {
        return Err(invalid("x", "empty sequence"));
    }
    match x.iter().find(|&&t| t as usize >= d) {
        Some(&t) => Err(Error::InvalidToken { token: t as usize + 1, d }),
        None => Ok(()),
    }
}

/// Full forward pass on a 0-based token sequence (no causal mask).
pub fn forward(p: &ModelParams, x: &[u32]) -> Result<ForwardTrace> {
    check_tokens(p.d, x)?;
    let s = x.len();
    let phi = p.phi();
    let mm = p.m_mat();
    let mut attn = Mat::zeros(s, s);
    let mut buf = vec![0.0; s];
    for l in 0..s {
        let z: Vec<f64> = x.iter().map(|&k| phi[(x[l] as usize, k as usize)]).collect();
        linalg::softmax_into(&z, &mut buf);
        for k in 0..s {
            attn[(l, k)] = buf[k];
        }
    }
    let ex_m = Mat::from_fn(s, p.d, |k, j| mm[(x[k] as usize, j)]);
    let logits = &attn * ex_m;
    let last: Vec<f64> = logits.row(s - 1).iter().cloned().collect();
    Ok(ForwardTrace {
        logits,
        attn_weights: attn,
        last_row_probs: linalg::softmax(&last),
    })
}

/// Loss and `(∂L/∂M, ∂L/∂Φ)` summed (not averaged) over a block of examples.
fn block_loss_grad(data: &Dataset, range: std::ops::Range<usize>, phi: &Mat, mm: &Mat) -> (f64, Mat, Mat) {
    let d = data.d;
    let mut loss = 0.0;
    let mut g_m = Mat::zeros(d, d);
    let mut g_phi = Mat::zeros(d, d);
    let mut a = vec![0.0; data.s];
    let mut w = vec![0.0; d];
    for i in range {
        let x = data.sequence(i);
        let y = data.labels[i] as usize;
        let q = x[x.len() - 1] as usize;
        let z: Vec<f64> = x.iter().map(|&k| phi[(q, k as usize)]).collect();
        linalg::softmax_into(&z, &mut a);
        // Aggregate position weights per token; everything below is d-dimensional.
        w.iter_mut().for_each(|v| *v = 0.0);
        for (&k, &al) in x.iter().zip(&a) {
            w[k as usize] += al;
        }
        let logits: Vec<f64> = (0..d).map(|j| (0..d).map(|k| w[k] * mm[(k, j)]).sum()).collect();
        let p = linalg::softmax(&logits);
        loss -= p[y].ln();
        let mut dz = p;
        dz[y] -= 1.0;
        let u: Vec<f64> = (0..d).map(|k| (0..d).map(|j| mm[(k, j)] * dz[j]).sum()).collect();
        let ubar: f64 = (0..d).map(|k| w[k] * u[k]).sum();
        for k in 0..d {
            if w[k] == 0.0 {
                continue;
            }
            for j in 0..d {
                g_m[(k, j)] += w[k] * dz[j];
            }
            g_phi[(q, k)] += w[k] * (u[k] - ubar);
        }
    }
    (loss, g_m, g_phi)
}

/// Mean last-position loss and the empirical `(∂L/∂M, ∂L/∂Φ)`.
pub fn empirical_mphi_grad(p: &ModelParams, data: &Dataset) -> Result<(f64, Mat, Mat)> {
    if data.d != p.d {
        return Err(Error::Dimension(format!("data d={} vs params d={}", data.d, p.d)));
    }
    if data.n == 0 {
        return Err(invalid("data", "empty dataset"));
    }
    let phi = p.phi();
    let mm = p.m_mat();
    let nchunks = data.n.div_ceil(CHUNK);
    let parts: Vec<(f64, Mat, Mat)> = (0..nchunks)
        .into_par_iter()
        .map(|c| block_loss_grad(data, c * CHUNK..((c + 1) * CHUNK).min(data.n), &phi, &mm))
        .collect();
    let mut loss = 0.0;
    let mut g_m = Mat::zeros(p.d, p.d);
    let mut g_phi = Mat::zeros(p.d, p.d);
    for (l, a, b) in parts {
        loss += l;
        g_m += a;
        g_phi += b;
    }
    let n = data.n as f64;
    Ok((loss / n, g_m / n, g_phi / n))
}

pub fn empirical_loss(p: &ModelParams, data: &Dataset) -> Result<f64> {
    Ok(empirical_mphi_grad(p, data)?.0)
}

pub fn empirical_loss_grad(p: &ModelParams, data: &Dataset) -> Result<(f64, ParamGradient)> {
    let (loss, g_m, g_phi) = empirical_mphi_grad(p, data)?;
    Ok((loss, assemble_param_gradient(p, &g_m, &g_phi)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Gd,
    Adam,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Full-batch training. Metrics are recorded at step 0 and every
/// `record_every` steps (and at the final step); diagnostics that need a
/// stationary law use the empirical token frequencies of `data`.
pub fn train(
    params: &ModelParams,
    data: &Dataset,
    optimizer: Optimizer,
    lr: f64,
    steps: usize,
    record_every: usize,
) -> Result<Trajectory> {
    if !(lr > 0.0) {
        return Err(invalid("lr", format!("must be > 0, got {lr}")));
    }
    if steps == 0 {
        return Err(invalid("steps", "must be ≥ 1"));
    }
    if record_every == 0 {
        return Err(invalid("record_every", "must be ≥ 1"));
    }
    let pi = empirical_frequencies(data);
    let limit = 10.0 * (params.d as f64).ln();
    let mut theta = params.to_flat();
    let n = theta.len();
    let (mut m1, mut m2) = (vec![0.0; n], vec![0.0; n]);
    let mut traj = Trajectory::default();
    let mut cur = params.clone();
    for step in 0..=steps {
        let (loss, g) = empirical_loss_grad(&cur, data)?;
        if !loss.is_finite() || loss > limit {
            return Err(Error::Diverged { step, loss });
        }
        if step % record_every == 0 || step == steps {
            traj.push(step as f64, Metrics::compute(step as f64, &cur, &pi, loss), Some(cur.clone()));
        }
        if step == steps {
            break;
        }
        let g = g.to_flat();
        match optimizer {
            Optimizer::Gd => {
                for (t, gi) in theta.iter_mut().zip(&g) {
                    *t -= lr * gi;
                }
            }
            Optimizer::Adam => {
                let k = (step + 1) as i32;
                let c1 = 1.0 - ADAM_B1.powi(k);
                let c2 = 1.0 - ADAM_B2.powi(k);
                for i in 0..n {
                    m1[i] = ADAM_B1 * m1[i] + (1.0 - ADAM_B1) * g[i];
                    m2[i] = ADAM_B2 * m2[i] + (1.0 - ADAM_B2) * g[i] * g[i];
                    theta[i] -= lr * (m1[i] / c1) / ((m2[i] / c2).sqrt() + ADAM_EPS);
                }
            }
        }
        cur = ModelParams::from_flat(params.d, params.m, &theta)?;
    }
    Ok(traj)
}
