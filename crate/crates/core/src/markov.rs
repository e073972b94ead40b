//! Markov data: stationary distributions with a symmetry-breaking perturbation,
//! the lazy transition matrix `P = λI + (1-λ)1πᵀ`, and sequence sampling.
//!
//! Tokens are 0-based in memory. The JSON and binary dataset formats store
//! 1-based tokens.

use std::io::{Read, Write};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::Mat;
use crate::rng;

const TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryDistribution {
    pub d: usize,
    pub pi1: f64,
    /// Perturbation coefficients for tokens 2..d.
    pub c: Vec<f64>,
    pub delta: f64,
    pub pi: Vec<f64>,
}

impl StationaryDistribution {
    /// Recover the (pi1, c, delta=1) form from an explicit probability vector.
    pub fn from_probs(pi: &[f64]) -> Result<Self> {
        let d = pi.len();
        if d < 2 {
            return Err(invalid("pi", "need at least two tokens"));
        }
        let pi1 = pi[0];
        let base = (1.0 - pi1) / (d as f64 - 1.0);
        let c: Vec<f64> = pi[1..].iter().map(|p| p - base).collect();
        let delta = if c.iter().all(|x| x.abs() < TOL) { 0.0 } else { 1.0 };
        let c = if delta == 0.0 { vec![0.0; d - 1] } else { c };
        build_stationary(d, pi1, &c, delta)
    }

    /// The two-group distribution (π₁, (1-π₁)/(d-1), ...).
    pub fn two_group(d: usize, pi1: f64) -> Result<Self> {
        build_stationary(d, pi1, &vec![0.0; d.saturating_sub(1)], 0.0)
    }

    /// Geometric profile (1/2, 1/4, ..., 1/2^d) normalised to sum one.
    pub fn geometric(d: usize) -> Result<Self> {
        let raw: Vec<f64> = (1..=d).map(|k| 0.5f64.powi(k as i32)).collect();
        let s: f64 = raw.iter().sum();
        let pi: Vec<f64> = raw.iter().map(|x| x / s).collect();
        Self::from_probs(&pi)
    }

    /// Same profile with a different perturbation magnitude.
    pub fn with_delta(&self, delta: f64) -> Result<Self> {
        build_stationary(self.d, self.pi1, &self.c, delta)
    }

    pub fn is_low_symmetric(&self) -> bool {
        self.pi[1..].iter().all(|p| (p - self.pi[1]).abs() < TOL)
    }
}

/// π_1 = pi1, π_i = (1-pi1)/(d-1) + c_{i-1}·delta for i ≥ 2.
pub fn build_stationary(d: usize, pi1: f64, c: &[f64], delta: f64) -> Result<StationaryDistribution> {
    if d < 2 {
        return Err(invalid("d", format!("vocabulary size must be ≥ 2, got {d}")));
    }
    if c.len() != d - 1 {
        return Err(invalid("c", format!("expected {} coefficients, got {}", d - 1, c.len())));
    }
    let base = (1.0 - pi1) / (d as f64 - 1.0);
    if !(base < pi1 && pi1 < 1.0) {
        return Err(invalid(
            "pi1",
            format!("need (1-pi1)/(d-1) < pi1 < 1, got pi1={pi1} (lower bound {base})"),
        ));
    }
    if !(delta >= 0.0) {
        return Err(invalid("delta", format!("must be ≥ 0, got {delta}")));
    }
    let csum: f64 = c.iter().sum();
    if csum.abs() > TOL {
        return Err(invalid("c", format!("coefficients must sum to 0, got {csum}")));
    }
    let mut pi = Vec::with_capacity(d);
    pi.push(pi1);
    for (i, ci) in c.iter().enumerate() {
        let p = base + ci * delta;
        if p < 0.0 {
            return Err(invalid(
                "delta",
                format!("pi[{}] = {p} < 0; perturbation too large", i + 2),
            ));
        }
        pi.push(p);
    }
    Ok(StationaryDistribution {
        d,
        pi1,
        c: c.to_vec(),
        delta,
        pi,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovSpec {
    pub dist: StationaryDistribution,
    pub lambda: f64,
    #[serde(with = "crate::serde_mat")]
    pub p: Mat,
}

impl MarkovSpec {
    pub fn d(&self) -> usize {
        self.dist.d
    }

    pub fn pi(&self) -> &[f64] {
        &self.dist.pi
    }

    /// Rebuild with a new perturbation magnitude, keeping λ and the profile.
    pub fn with_delta(&self, delta: f64) -> Result<Self> {
        build_transition(self.dist.with_delta(delta)?, self.lambda)
    }

    pub fn stationarity_residual(&self) -> f64 {
        let d = self.d();
        (0..d)
            .map(|j| {
                let s: f64 = (0..d).map(|i| self.dist.pi[i] * self.p[(i, j)]).sum();
                (s - self.dist.pi[j]).abs()
            })
            .fold(0.0, f64::max)
    }
}

pub fn build_transition(dist: StationaryDistribution, lambda: f64) -> Result<MarkovSpec> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(invalid("lambda", format!("must lie in (0,1), got {lambda}")));
    }
    let d = dist.d;
    let p = Mat::from_fn(d, d, |i, j| {
        let diag = if i == j { lambda } else { 0.0 };
        diag + (1.0 - lambda) * dist.pi[j]
    });
    let spec = MarkovSpec { dist, lambda, p };
    let res = spec.stationarity_residual();
    if res > TOL {
        return Err(Error::Certification(format!("πᵀP ≠ πᵀ (residual {res})")));
    }
    for i in 0..d {
        let s: f64 = spec.p.row(i).sum();
        if (s - 1.0).abs() > TOL {
            return Err(Error::Certification(format!("row {i} of P sums to {s}")));
        }
    }
    Ok(spec)
}

/// `N` sequences of length `s` plus the next-token label, tokens 0-based.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub d: usize,
    pub n: usize,
    pub s: usize,
    pub seed: u64,
    /// Row-major `n × s`.
    pub sequences: Vec<u32>,
    pub labels: Vec<u32>,
}

impl Dataset {
    pub fn sequence(&self, i: usize) -> &[u32] {
        &self.sequences[i * self.s..(i + 1) * self.s]
    }

    /// Build from explicit 0-based data, validating token ranges.
    pub fn from_parts(d: usize, s: usize, seed: u64, sequences: Vec<u32>, labels: Vec<u32>) -> Result<Self> {
        let n = labels.len();
        if s == 0 || sequences.len() != n * s {
            return Err(Error::Dimension(format!(
                "{} sequence tokens for N={n}, s={s}",
                sequences.len()
            )));
        }
        if let Some(&t) = sequences.iter().chain(&labels).find(|&&t| t as usize >= d) {
            return Err(Error::InvalidToken { token: t as usize + 1, d });
        }
        Ok(Dataset { d, n, s, seed, sequences, labels })
    }

    pub fn to_json(&self) -> serde_json::Value {
        let seqs: Vec<Vec<u32>> = (0..self.n)
            .map(|i| self.sequence(i).iter().map(|t| t + 1).collect())
            .collect();
        let labels: Vec<u32> = self.labels.iter().map(|t| t + 1).collect();
        serde_json::json!({
            "d": self.d, "s": self.s, "N": self.n, "seed": self.seed,
            "sequences": seqs, "labels": labels,
        })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            d: usize,
            s: usize,
            #[serde(rename = "N")]
            n: usize,
            seed: u64,
            sequences: Vec<Vec<u32>>,
            labels: Vec<u32>,
        }
        let raw: Raw = serde_json::from_value(v.clone())?;
        if raw.sequences.len() != raw.n || raw.labels.len() != raw.n {
            return Err(Error::Format("N does not match sequence/label counts".into()));
        }
        let mut flat = Vec::with_capacity(raw.n * raw.s);
        for seq in &raw.sequences {
            if seq.len() != raw.s {
                return Err(Error::Format("sequence length differs from s".into()));
            }
            flat.extend_from_slice(seq);
        }
        let dec = |t: u32| -> Result<u32> {
            if t == 0 || t as usize > raw.d {
                Err(Error::InvalidToken { token: t as usize, d: raw.d })
            } else {
                Ok(t - 1)
            }
        };
        let flat = flat.into_iter().map(dec).collect::<Result<Vec<_>>>()?;
        let labels = raw.labels.into_iter().map(dec).collect::<Result<Vec<_>>>()?;
        Dataset::from_parts(raw.d, raw.s, raw.seed, flat, labels)
    }

    /// Binary layout (little-endian): b"MKV1", d: u32, N: u64, s: u32, seed: u64,
    /// then N·s sequence tokens and N labels as 1-based u32.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"MKV1")?;
        w.write_all(&(self.d as u32).to_le_bytes())?;
        w.write_all(&(self.n as u64).to_le_bytes())?;
        w.write_all(&(self.s as u32).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        for t in self.sequences.iter().chain(&self.labels) {
            w.write_all(&(t + 1).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"MKV1" {
            return Err(Error::Format("bad magic, expected MKV1".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let d = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b8)?;
        let n = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b4)?;
        let s = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b8)?;
        let seed = u64::from_le_bytes(b8);
        let mut buf = vec![0u8; 4 * n * (s + 1)];
        r.read_exact(&mut buf)?;
        let mut toks = Vec::with_capacity(n * (s + 1));
        for ch in buf.chunks_exact(4) {
            let t = u32::from_le_bytes([ch[0], ch[1], ch[2], ch[3]]);
            if t == 0 || t as usize > d {
                return Err(Error::InvalidToken { token: t as usize, d });
            }
            toks.push(t - 1);
        }
        let labels = toks.split_off(n * s);
        Dataset::from_parts(d, s, seed, toks, labels)
    }
}

fn sample_row(p: &Mat, from: usize, u: f64) -> u32 {
    let d = p.ncols();
    let mut acc = 0.0;
    for j in 0..d {
        acc += p[(from, j)];
        if u < acc {
            return j as u32;
        }
    }
    (d - 1) as u32
}

/// Sequence `i` is drawn from ChaCha20 stream `i` of `seed`: x₁ uniform, then
/// s further transitions, the last of which is the label.
pub fn sample_dataset(spec: &MarkovSpec, n: usize, s: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(invalid("N", "need at least one sequence"));
    }
    if s == 0 {
        return Err(invalid("s", "context length must be ≥ 1"));
    }
    let d = spec.d();
    let rows: Vec<(Vec<u32>, u32)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, i as u64);
            let mut seq = Vec::with_capacity(s);
            let mut x = r.random_range(0..d) as u32;
            seq.push(x);
            for _ in 1..s {
                x = sample_row(&spec.p, x as usize, r.random::<f64>());
                seq.push(x);
            }
            let y = sample_row(&spec.p, x as usize, r.random::<f64>());
            (seq, y)
        })
        .collect();
    let mut sequences = Vec::with_capacity(n * s);
    let mut labels = Vec::with_capacity(n);
    for (seq, y) in rows {
        sequences.extend(seq);
        labels.push(y);
    }
    Ok(Dataset { d, n, s, seed, sequences, labels })
}

/// Token frequencies over every context position of every sequence.
pub fn empirical_frequencies(data: &Dataset) -> Vec<f64> {
    let mut counts = vec![0usize; data.d];
    for &t in &data.sequences {
        counts[t as usize] += 1;
    }
    let total = data.sequences.len() as f64;
    counts.into_iter().map(|c| c as f64 / total).collect()
}

/// Token frequencies at a single 0-based context position.
pub fn position_frequencies(data: &Dataset, pos: usize) -> Vec<f64> {
    let mut counts = vec![0usize; data.d];
    for i in 0..data.n {
        counts[data.sequence(i)[pos] as usize] += 1;
    }
    counts.into_iter().map(|c| c as f64 / data.n as f64).collect()
}
