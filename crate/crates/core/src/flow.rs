//! Gradient flow `θ̇ = −∇L(θ)` of the population loss, stage segmentation and
//! the ε-sweep of stage-exit times.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg;
use crate::markov::MarkovSpec;
use crate::model::{init_params, ModelParams};
use crate::population::{flow_rhs, population_loss};
use crate::trajectory::{Metrics, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    Euler,
    Rk4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub step_size: f64,
    pub max_time: f64,
    pub integrator: Integrator,
    /// Record metrics every this many accepted steps.
    pub record_every: usize,
    /// Retry a step at half size while it increases the loss.
    pub adaptive: bool,
    /// Keep a parameter snapshot every this many records (0: first and last only).
    #[serde(default)]
    pub snapshot_every: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            step_size: 0.05,
            max_time: 100.0,
            integrator: Integrator::Rk4,
            record_every: 10,
            adaptive: false,
            snapshot_every: 1,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(invalid("step_size", format!("must be > 0, got {}", self.step_size)));
        }
        if !(self.max_time > 0.0 && self.max_time.is_finite()) {
            return Err(invalid("max_time", format!("must be > 0, got {}", self.max_time)));
        }
        if self.record_every == 0 {
            return Err(invalid("record_every", "must be ≥ 1"));
        }
        Ok(())
    }
}

const MAX_HALVINGS: usize = 40;
const LOSS_SLACK: f64 = 1e-12;

pub fn euler_step<F>(f: &F, y: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let k = f(y)?;
    Ok(y.iter().zip(&k).map(|(a, b)| a + h * b).collect())
}

pub fn rk4_step<F>(f: &F, y: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let axpy = |a: &[f64], s: f64, b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + s * y).collect() };
    let k1 = f(y)?;
    let k2 = f(&axpy(y, 0.5 * h, &k1))?;
    let k3 = f(&axpy(y, 0.5 * h, &k2))?;
    let k4 = f(&axpy(y, h, &k3))?;
    Ok((0..y.len())
        .map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

/// Integrate the population flow from `params`.
pub fn integrate_flow(params: &ModelParams, spec: &MarkovSpec, cfg: &FlowConfig) -> Result<Trajectory> {
    cfg.validate()?;
    if params.d != spec.d() {
        return Err(Error::Dimension(format!("params d={} vs spec d={}", params.d, spec.d())));
    }
    let (d, m) = (params.d, params.m);
    let pi = spec.pi().to_vec();
    let f = |v: &[f64]| -> Result<Vec<f64>> { flow_rhs(&ModelParams::from_flat(d, m, v)?, spec) };
    let step = |y: &[f64], h: f64| match cfg.integrator {
        Integrator::Euler => euler_step(&f, y, h),
        Integrator::Rk4 => rk4_step(&f, y, h),
    };
    let mut y = params.to_flat();
    let mut t = 0.0;
    let mut loss = population_loss(params, spec)?;
    let mut traj = Trajectory::default();
    let mut records = 0usize;
    let snap_due = |records: usize| cfg.snapshot_every > 0 && records % cfg.snapshot_every == 0;
    traj.push(0.0, Metrics::compute(0.0, params, &pi, loss), Some(params.clone()));
    records += 1;
    let mut accepted = 0usize;
    let tol = 1e-9 * cfg.step_size;
    while t < cfg.max_time - tol {
        let mut h = cfg.step_size.min(cfg.max_time - t);
        let mut halvings = 0;
        let (ny, nloss) = loop {
            let ny = step(&y, h)?;
            let p = ModelParams::from_flat(d, m, &ny)?;
            let nl = population_loss(&p, spec)?;
            let bad = !nl.is_finite() || ny.iter().any(|x| !x.is_finite());
            if !cfg.adaptive {
                if bad {
                    return Err(Error::Integration { t, reason: "non-finite state".into() });
                }
                break (ny, nl);
            }
            if !bad && nl <= loss + LOSS_SLACK {
                break (ny, nl);
            }
            halvings += 1;
            if halvings > MAX_HALVINGS {
                return Err(Error::Integration {
                    t,
                    reason: format!("loss increased after {MAX_HALVINGS} halvings (h={h:e}); gradient inconsistent"),
                });
            }
            h *= 0.5;
        };
        y = ny;
        loss = nloss;
        accepted += 1;
        // Fixed steps land exactly on the grid k·h.
        t = if cfg.adaptive { t + h } else { (accepted as f64 * cfg.step_size).min(cfg.max_time) };
        let last = t >= cfg.max_time - tol;
        if accepted % cfg.record_every == 0 || last {
            let p = ModelParams::from_flat(d, m, &y)?;
            let snap = if snap_due(records) || last { Some(p.clone()) } else { None };
            traj.push(t, Metrics::compute(t, &p, &pi, loss), snap);
            records += 1;
        }
    }
    Ok(traj)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageThresholds {
    /// Condensation is reached once `cond_cos` exceeds this.
    pub cond_cos: f64,
    /// A norm is growing exponentially where its 3-point log-slope exceeds
    /// this fraction of the maximal slope.
    pub slope_frac: f64,
    /// Orthogonal-component level relative to ‖W0‖.
    pub orth_frac: f64,
    /// Records a condition must hold to count as sustained.
    pub sustain: usize,
    /// Minimal entropy rise (nats) of rows i ≥ 2 that counts as dilution.
    pub entropy_rise: f64,
}

impl Default for StageThresholds {
    fn default() -> Self {
        StageThresholds {
            cond_cos: 0.99,
            slope_frac: 0.5,
            orth_frac: 1e-2,
            sustain: 3,
            entropy_rise: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageLabel {
    I,
    II,
    III,
    IV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub label: StageLabel,
    pub t_start: f64,
    pub t_end: f64,
}

/// Centered log-slope of a positive series.
fn log_slopes(t: &[f64], y: &[f64]) -> Vec<f64> {
    let n = t.len();
    (0..n)
        .map(|k| {
            let (a, b) = (k.saturating_sub(1), (k + 1).min(n - 1));
            if a == b || y[a] <= 0.0 || y[b] <= 0.0 {
                0.0
            } else {
                (y[b].ln() - y[a].ln()) / (t[b] - t[a])
            }
        })
        .collect()
}

/// End of an exponential-growth episode of `y` starting at index `from`:
/// the first index after the slope peak where the slope falls below
/// `frac·peak`. Returns (start of growth, end of growth, peak slope).
fn growth_episode(t: &[f64], y: &[f64], from: usize, frac: f64) -> Option<(usize, usize, f64)> {
    let s = log_slopes(t, y);
    let (kpk, &peak) = s[from..]
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())?;
    let kpk = kpk + from;
    if peak <= 0.0 {
        return None;
    }
    let start = (from..=kpk).find(|&k| s[k] > frac * peak).unwrap_or(kpk);
    let end = (kpk..s.len()).find(|&k| s[k] < frac * peak)?;
    Some((start, end, peak))
}

fn is_constant(traj: &Trajectory) -> bool {
    let m0 = &traj.metrics[0];
    traj.metrics.iter().all(|m| {
        m.loss == m0.loss && m.norm_w0 == m0.norm_w0 && m.norm_wq == m0.norm_wq && m.norm_w1 == m0.norm_w1
    })
}

/// Segment a trajectory into the condensation (I), attention-growth (II),
/// dilution (III) and new-direction (IV) stages.
///
/// * I ends once `cond_cos ≥ cond_cos` and the exponential growth of ‖W0‖ has
///   saturated (log-slope back below `slope_frac` of its peak).
/// * II starts with the exponential growth of ‖WQ‖; it ends at the first
///   minimum of the mean attention entropy of rows i ≥ 2 that is followed by
///   a rise of at least `entropy_rise`.
/// * III ends when `orth_norm/‖W0‖` exceeds `orth_frac` (and twice its value
///   at the start of III) for `sustain` consecutive records.
/// * IV runs to the end of the trajectory.
///
/// A stage is only reported once its end is detected, except IV.
pub fn stage_times(traj: &Trajectory, th: &StageThresholds) -> Result<Vec<Stage>> {
    let n = traj.len();
    if n < 10 {
        return Err(invalid("trajectory", format!("need ≥ 10 records, got {n}")));
    }
    if is_constant(traj) {
        return Ok(Vec::new());
    }
    let t = &traj.times;
    let ms = &traj.metrics;
    let mut out = Vec::new();
    let w0: Vec<f64> = ms.iter().map(|m| m.norm_w0).collect();
    let Some((_, g_end, _)) = growth_episode(t, &w0, 0, th.slope_frac) else {
        return Ok(out);
    };
    let Some(i1) = (g_end..n).find(|&k| ms[k].cond_cos >= th.cond_cos) else {
        return Ok(out);
    };
    out.push(Stage { label: StageLabel::I, t_start: t[0], t_end: t[i1] });

    let wq: Vec<f64> = ms.iter().map(|m| m.norm_wq).collect();
    let Some((q_start, _, _)) = growth_episode(t, &wq, i1, th.slope_frac) else {
        return Ok(out);
    };
    let ent: Vec<f64> = ms.iter().map(|m| m.entropy_low).collect();
    // First local minimum: scan until the entropy climbs `entropy_rise` above its running minimum.
    let mut i2 = q_start;
    let mut rose = false;
    for k in q_start..n {
        if ent[k] < ent[i2] {
            i2 = k;
        } else if ent[k] > ent[i2] + th.entropy_rise {
            rose = true;
            break;
        }
    }
    if !rose {
        return Ok(out);
    }
    out.push(Stage { label: StageLabel::II, t_start: t[i1], t_end: t[i2] });

    let ratio: Vec<f64> = ms.iter().map(|m| if m.norm_w0 > 0.0 { m.orth_norm / m.norm_w0 } else { 0.0 }).collect();
    let level = th.orth_frac.max(2.0 * ratio[i2]);
    let i3 = (i2..n).find(|&k| k + th.sustain <= n && (k..k + th.sustain).all(|j| ratio[j] > level));
    let Some(i3) = i3 else {
        return Ok(out);
    };
    out.push(Stage { label: StageLabel::III, t_start: t[i2], t_end: t[i3] });
    out.push(Stage { label: StageLabel::IV, t_start: t[i3], t_end: t[n - 1] });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRow {
    pub eps: f64,
    pub mean_exit: f64,
    pub exits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingTable {
    pub rows: Vec<TimingRow>,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Stage-I exit time of ε-scale initializations, fitted against log(1/ε).
pub fn timing_scaling(
    spec: &MarkovSpec,
    m: usize,
    eps_list: &[f64],
    seeds: &[u64],
    cfg: &FlowConfig,
    th: &StageThresholds,
) -> Result<TimingTable> {
    if eps_list.len() < 3 {
        return Err(invalid("eps_list", "need at least three values of ε"));
    }
    let lo = eps_list.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = eps_list.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(lo > 0.0) || hi / lo < 100.0 {
        return Err(invalid("eps_list", "ε values must be positive and span at least two decades"));
    }
    if seeds.is_empty() {
        return Err(invalid("seeds", "need at least one seed"));
    }
    let jobs: Vec<(usize, u64)> = (0..eps_list.len()).flat_map(|i| seeds.iter().map(move |&s| (i, s))).collect();
    let exits: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let p = init_params(spec.d(), m, eps_list[i], seed)?;
            let traj = integrate_flow(&p, spec, cfg)?;
            let stages = stage_times(&traj, th)?;
            stages
                .first()
                .map(|s| s.t_end)
                .ok_or_else(|| Error::Certification(format!("no Stage-I exit for ε={} seed={seed}", eps_list[i])))
        })
        .collect();
    let exits = exits.into_iter().collect::<Result<Vec<f64>>>()?;
    let mut rows = Vec::new();
    for (i, &eps) in eps_list.iter().enumerate() {
        let e: Vec<f64> = exits[i * seeds.len()..(i + 1) * seeds.len()].to_vec();
        rows.push(TimingRow { eps, mean_exit: e.iter().sum::<f64>() / e.len() as f64, exits: e });
    }
    let x: Vec<f64> = rows.iter().map(|r| (1.0 / r.eps).ln()).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.mean_exit).collect();
    let (intercept, slope, r2) = linalg::linear_fit(&x, &y);
    Ok(TimingTable { rows, slope, intercept, r2 })
}
