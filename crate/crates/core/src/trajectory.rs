//! Time series of parameters and scalar diagnostics shared by training and flow.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;
use crate::linalg::{self, Mat};
use crate::model::ModelParams;
use crate::population::proxy_attention_phi;
use crate::reduced::manifold_distance;

/// Header of the metrics CSV. Entropies use the natural log.
pub const CSV_HEADER: &str =
    "t,loss,norm_W0,norm_W1,norm_WQ,norm_WK,cond_cos,attn_entropy_min,attn_entropy_max,conservation_Q,orth_norm";

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub t: f64,
    pub loss: f64,
    pub norm_w0: f64,
    pub norm_w1: f64,
    pub norm_wq: f64,
    pub norm_wk: f64,
    /// ‖π̂π̂ᵀW0‖_F / ‖W0‖_F: share of the embedding lying along π.
    pub cond_cos: f64,
    pub attn_entropy_min: f64,
    pub attn_entropy_max: f64,
    /// (1−π₁)γ₁ − π₁ Σ_{i≥2} γ_i with γ the leading rank-one factor of W0.
    pub conservation_q: f64,
    /// ‖(rows 2..d of W0) ⟂ row 1‖_F
    pub orth_norm: f64,
    /// Proxy-attention entropy of each query token.
    pub attn_entropy: Vec<f64>,
    /// Mean proxy-attention entropy over the rows i ≥ 2.
    pub entropy_low: f64,
    /// ‖W0[i,:]‖ per token.
    pub token_norms: Vec<f64>,
    pub manifold_distance: f64,
}

/// Norm of every row i ≥ 2 of `w0` after removing its projection on row 1.
pub fn orthogonal_row_norms(w0: &Mat) -> Vec<f64> {
    let r1 = linalg::row(w0, 0);
    let n1 = linalg::dot(&r1, &r1);
    (1..w0.nrows())
        .map(|i| {
            let ri = linalg::row(w0, i);
            let c = if n1 > 0.0 { linalg::dot(&ri, &r1) / n1 } else { 0.0 };
            let perp: Vec<f64> = ri.iter().zip(&r1).map(|(a, b)| a - c * b).collect();
            linalg::norm(&perp)
        })
        .collect()
}

/// Leading left factor γ = σ u of `w0` and the conservation contrast built from it.
pub fn conservation_from_w0(w0: &Mat, pi: &[f64]) -> f64 {
    if w0.norm() == 0.0 {
        return 0.0;
    }
    let (sigma, u, _) = linalg::top_singular(w0);
    let pi1 = pi[0];
    let low: f64 = u.iter().skip(1).sum();
    sigma * ((1.0 - pi1) * u[0] - pi1 * low)
}

impl Metrics {
    pub fn compute(t: f64, p: &ModelParams, pi: &[f64], loss: f64) -> Metrics {
        let w0n = p.w0.norm();
        let pin = linalg::norm(pi);
        let cond_cos = if w0n > 0.0 {
            let proj = p.w0.transpose() * linalg::Vec64::from_column_slice(pi);
            proj.norm() / pin / w0n
        } else {
            0.0
        };
        let a = proxy_attention_phi(&p.phi(), pi);
        let ent: Vec<f64> = (0..p.d).map(|i| linalg::entropy(&linalg::row(&a, i))).collect();
        let emin = ent.iter().cloned().fold(f64::INFINITY, f64::min);
        let emax = ent.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let entropy_low = ent[1..].iter().sum::<f64>() / (p.d - 1) as f64;
        let orth = linalg::norm(&orthogonal_row_norms(&p.w0));
        Metrics {
            t,
            loss,
            norm_w0: w0n,
            norm_w1: p.w1.norm(),
            norm_wq: p.wq.norm(),
            norm_wk: p.wk.norm(),
            cond_cos,
            attn_entropy_min: emin,
            attn_entropy_max: emax,
            conservation_q: conservation_from_w0(&p.w0, pi),
            orth_norm: orth,
            attn_entropy: ent,
            entropy_low,
            token_norms: (0..p.d).map(|i| p.w0.row(i).norm()).collect(),
            manifold_distance: manifold_distance(p),
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.t,
            self.loss,
            self.norm_w0,
            self.norm_w1,
            self.norm_wq,
            self.norm_wk,
            self.cond_cos,
            self.attn_entropy_min,
            self.attn_entropy_max,
            self.conservation_q,
            self.orth_norm
        )
    }
}

/// Recorded run. `snapshots[k]` was taken at `snapshot_times[k]`, a subset of `times`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub metrics: Vec<Metrics>,
    pub snapshot_times: Vec<f64>,
    pub snapshots: Vec<ModelParams>,
}

impl Trajectory {
    pub fn push(&mut self, t: f64, m: Metrics, snap: Option<ModelParams>) {
        self.times.push(t);
        self.metrics.push(m);
        if let Some(s) = snap {
            self.snapshot_times.push(t);
            self.snapshots.push(s);
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for m in &self.metrics {
            let _ = writeln!(s, "{}", m.csv_row());
        }
        s
    }

    pub fn write_metrics_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.metrics_csv())?;
        Ok(())
    }

    /// One `snap_{t:.6}.json` per stored snapshot.
    pub fn write_snapshots(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (k, (t, p)) in self.snapshot_times.iter().zip(&self.snapshots).enumerate() {
            let path = dir.join(format!("snap_{t:.6}.json"));
            std::fs::write(path, serde_json::to_string(&p.to_json(k))?)?;
        }
        Ok(())
    }
}
