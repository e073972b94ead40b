//! Diagnostics on weights and trajectories: condensation cosine matrices,
//! PCA of embedding snapshots, attention entropy, orthogonal components and
//! plain-text SVG figures.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::flow::{stage_times, Stage, StageThresholds};
use crate::linalg::{self, Mat};
use crate::serde_mat;
use crate::trajectory::{orthogonal_row_norms, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CondensationMatrix {
    #[serde(with = "serde_mat")]
    pub c: Mat,
    /// Display order of the rows.
    pub ordering: Vec<usize>,
    /// Rows with zero norm (their similarities are set to 0).
    pub zero_rows: Vec<usize>,
}

impl CondensationMatrix {
    /// `C` with rows and columns permuted into display order.
    pub fn ordered(&self) -> Mat {
        let o = &self.ordering;
        Mat::from_fn(o.len(), o.len(), |i, j| self.c[(o[i], o[j])])
    }

    /// Smallest |C(i,j)| over nonzero rows.
    pub fn min_abs(&self) -> f64 {
        let n = self.c.nrows();
        let mut mn = f64::INFINITY;
        for i in 0..n {
            for j in 0..n {
                if !self.zero_rows.contains(&i) && !self.zero_rows.contains(&j) {
                    mn = mn.min(self.c[(i, j)].abs());
                }
            }
        }
        mn
    }
}

/// Scores of the rows of `w` on the first principal direction of the centred rows.
fn pc1_scores(w: &Mat) -> Vec<f64> {
    let n = w.nrows();
    if n < 2 {
        return vec![0.0; n];
    }
    let mean = w.row_mean();
    let centred = Mat::from_fn(n, w.ncols(), |i, j| w[(i, j)] - mean[j]);
    if centred.norm() == 0.0 {
        return vec![0.0; n];
    }
    let (_, _, v) = linalg::top_singular(&centred);
    (0..n).map(|i| centred.row(i).iter().zip(v.iter()).map(|(a, b)| a * b).sum()).collect()
}

pub fn condensation(w: &Mat) -> CondensationMatrix {
    let n = w.nrows();
    let norms: Vec<f64> = (0..n).map(|i| w.row(i).norm()).collect();
    let zero_rows: Vec<usize> = (0..n).filter(|&i| norms[i] == 0.0).collect();
    let c = Mat::from_fn(n, n, |i, j| {
        if norms[i] == 0.0 || norms[j] == 0.0 {
            0.0
        } else if i == j {
            1.0
        } else {
            (w.row(i).dot(&w.row(j)) / (norms[i] * norms[j])).clamp(-1.0, 1.0)
        }
    });
    let scores = pc1_scores(w);
    let mut ordering: Vec<usize> = (0..n).collect();
    // negative scores first, then by magnitude within each sign
    ordering.sort_by(|&a, &b| {
        let key = |k: usize| (scores[k] >= 0.0, scores[k].abs());
        let (sa, ma) = key(a);
        let (sb, mb) = key(b);
        sa.cmp(&sb).then(ma.total_cmp(&mb)).then(a.cmp(&b))
    });
    CondensationMatrix { c, ordering, zero_rows }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PcaTrajectory {
    /// `points[k][i]` is token i at snapshot k.
    pub points: Vec<Vec<[f64; 2]>>,
    /// Variance shares of the first two principal directions.
    pub variance_share: [f64; 2],
}

pub fn pca_trajectory(snapshots: &[Mat]) -> Result<PcaTrajectory> {
    if snapshots.len() < 2 {
        return Err(invalid("snapshots", "need at least 2 snapshots"));
    }
    let (d, m) = (snapshots[0].nrows(), snapshots[0].ncols());
    if snapshots.iter().any(|s| s.shape() != (d, m)) {
        return Err(Error::Dimension("snapshots differ in shape".into()));
    }
    let rows = snapshots.len() * d;
    let stack = Mat::from_fn(rows, m, |r, j| snapshots[r / d][(r % d, j)]);
    let mean = stack.row_mean();
    let centred = Mat::from_fn(rows, m, |i, j| stack[(i, j)] - mean[j]);
    let total = centred.norm_squared();
    if !(total > 0.0) {
        return Err(Error::Certification("stacked snapshots have zero variance".into()));
    }
    let svd = centred.clone().svd(false, true);
    let vt = svd.v_t.expect("right singular vectors requested");
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let dir = |k: usize| -> Vec<f64> {
        match idx.get(k) {
            Some(&c) => {
                let mut v: Vec<f64> = vt.row(c).iter().cloned().collect();
                // fix the sign: largest-magnitude entry positive
                let big = v.iter().cloned().fold(0.0, |a: f64, b| if b.abs() > a.abs() { b } else { a });
                if big < 0.0 {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
                v
            }
            None => vec![0.0; m],
        }
    };
    let (d1, d2) = (dir(0), dir(1));
    let share = |k: usize| idx.get(k).map_or(0.0, |&c| svd.singular_values[c].powi(2) / total);
    let points = (0..snapshots.len())
        .map(|k| {
            (0..d)
                .map(|i| {
                    let r: Vec<f64> = centred.row(k * d + i).iter().cloned().collect();
                    [linalg::dot(&r, &d1), linalg::dot(&r, &d2)]
                })
                .collect()
        })
        .collect();
    Ok(PcaTrajectory { points, variance_share: [share(0), share(1)] })
}

/// Natural-log Shannon entropy of each row, with 0·log 0 = 0.
pub fn attention_entropy(a: &Mat) -> Result<Vec<f64>> {
    if a.iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(invalid("A", "entries must be finite and non-negative"));
    }
    for i in 0..a.nrows() {
        let s: f64 = a.row(i).sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(invalid("A", format!("row {} sums to {s}", i + 1)));
        }
    }
    Ok((0..a.nrows()).map(|i| linalg::entropy(&linalg::row(a, i))).collect())
}

/// Norm of W0[i,:] orthogonal to W0[1,:] for every i ≥ 2.
pub fn orthogonal_components(w0: &Mat) -> Result<Vec<f64>> {
    if w0.nrows() == 0 || w0.row(0).norm() == 0.0 {
        return Err(invalid("W0", "first row must be nonzero"));
    }
    Ok(orthogonal_row_norms(w0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub stages: Vec<Stage>,
    pub times: Vec<f64>,
    /// `entropy[k][i]`: proxy-attention entropy of query token i at record k.
    pub entropy: Vec<Vec<f64>>,
    pub token_norms: Vec<Vec<f64>>,
    /// Orthogonal components of tokens 2..d.
    pub orth: Vec<Vec<f64>>,
}

pub fn stage_report(traj: &Trajectory, th: &StageThresholds) -> Result<StageReport> {
    let stages = stage_times(traj, th)?;
    Ok(StageReport {
        stages,
        times: traj.times.clone(),
        entropy: traj.metrics.iter().map(|m| m.attn_entropy.clone()).collect(),
        token_norms: traj.metrics.iter().map(|m| m.token_norms.clone()).collect(),
        orth: traj.snapshots.iter().map(|s| orthogonal_row_norms(&s.w0)).collect(),
    })
}

/// CSV with a `t` column followed by `prefix1..prefixN`.
pub fn series_csv(times: &[f64], rows: &[Vec<f64>], prefix: &str, first_index: usize) -> String {
    let n = rows.first().map_or(0, |r| r.len());
    let mut s = String::from("t");
    for k in 0..n {
        let _ = write!(s, ",{prefix}{}", k + first_index);
    }
    s.push('\n');
    for (t, r) in times.iter().zip(rows) {
        let _ = write!(s, "{t}");
        for v in r {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn svg_open(w: f64, h: f64, title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\">"
    );
    let _ = writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"{:.1}\" y=\"18\" font-size=\"14\" text-anchor=\"middle\">{}</text>", w / 2.0, escape(title));
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Blue (−1) / white (0) / red (+1) colour for a value clamped to [−1, 1].
fn diverging(v: f64) -> String {
    let v = v.clamp(-1.0, 1.0);
    let (r, g, b) = if v >= 0.0 {
        (255.0, 255.0 * (1.0 - v), 255.0 * (1.0 - v))
    } else {
        (255.0 * (1.0 + v), 255.0 * (1.0 + v), 255.0)
    };
    format!("#{:02x}{:02x}{:02x}", r.round() as u8, g.round() as u8, b.round() as u8)
}

pub fn heatmap_svg(c: &Mat, title: &str) -> String {
    let n = c.nrows().max(1);
    let cell = (480.0 / n as f64).clamp(4.0, 60.0);
    let (ox, oy) = (40.0, 30.0);
    let mut s = svg_open(ox * 2.0 + cell * n as f64, oy + 20.0 + cell * n as f64, title);
    for i in 0..c.nrows() {
        for j in 0..c.ncols() {
            let _ = writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{cell:.2}\" height=\"{cell:.2}\" fill=\"{}\"><title>{:.4}</title></rect>",
                ox + j as f64 * cell,
                oy + i as f64 * cell,
                diverging(c[(i, j)]),
                c[(i, j)]
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    const W: f64 = 560.0;
    const H: f64 = 360.0;
    const PAD: f64 = 50.0;

    fn fit(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Frame {
        let lo = |it: &mut dyn Iterator<Item = f64>| it.filter(|v| v.is_finite()).fold(f64::INFINITY, f64::min);
        let hi = |it: &mut dyn Iterator<Item = f64>| it.filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
        let widen = |a: f64, b: f64| {
            if !(a.is_finite() && b.is_finite()) {
                (0.0, 1.0)
            } else if b - a < 1e-300 {
                (a - 0.5, b + 0.5)
            } else {
                (a, b)
            }
        };
        let (x0, x1) = widen(lo(&mut xs.clone()), hi(&mut xs.clone()));
        let (y0, y1) = widen(lo(&mut ys.clone()), hi(&mut ys.clone()));
        Frame { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        Self::PAD + (x - self.x0) / (self.x1 - self.x0) * (Self::W - 2.0 * Self::PAD)
    }

    fn py(&self, y: f64) -> f64 {
        Self::H - Self::PAD - (y - self.y0) / (self.y1 - self.y0) * (Self::H - 2.0 * Self::PAD)
    }

    fn axes(&self, s: &mut String, xlabel: &str, ylabel: &str) {
        let (l, r, t, b) = (Self::PAD, Self::W - Self::PAD, Self::PAD, Self::H - Self::PAD);
        let _ = writeln!(s, "<rect x=\"{l}\" y=\"{t}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>", r - l, b - t);
        let _ = writeln!(s, "<text x=\"{l}\" y=\"{}\" font-size=\"10\">{:.3e}</text>", b + 14.0, self.x0);
        let _ = writeln!(s, "<text x=\"{r}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">{:.3e}</text>", b + 14.0, self.x1);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{b}\" font-size=\"10\" text-anchor=\"end\">{:.3e}</text>", l - 4.0, self.y0);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">{:.3e}</text>", l - 4.0, t + 8.0, self.y1);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{}</text>", (l + r) / 2.0, b + 30.0, escape(xlabel));
        let _ = writeln!(
            s,
            "<text x=\"14\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.1})\">{}</text>",
            (t + b) / 2.0,
            (t + b) / 2.0,
            escape(ylabel)
        );
    }
}

fn polyline(s: &mut String, f: &Frame, pts: impl Iterator<Item = (f64, f64)>, color: &str) {
    let coords: Vec<String> = pts
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .map(|(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y)))
        .collect();
    let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>", coords.join(" "));
}

fn legend(s: &mut String, labels: &[String]) {
    for (k, l) in labels.iter().enumerate() {
        let y = Frame::PAD + 12.0 + 14.0 * k as f64;
        let x = Frame::W - Frame::PAD - 90.0;
        let _ = writeln!(s, "<rect x=\"{x}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/>", y - 9.0, PALETTE[k % PALETTE.len()]);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{y}\" font-size=\"11\">{}</text>", x + 14.0, escape(l));
    }
}

/// One curve per entry of `series` against the shared `t`.
pub fn line_svg(t: &[f64], series: &[(String, Vec<f64>)], title: &str, ylabel: &str) -> String {
    let frame = Frame::fit(t.iter().cloned(), series.iter().flat_map(|(_, v)| v.iter().cloned()));
    let mut s = svg_open(Frame::W, Frame::H, title);
    frame.axes(&mut s, "t", ylabel);
    for (k, (_, v)) in series.iter().enumerate() {
        polyline(&mut s, &frame, t.iter().cloned().zip(v.iter().cloned()), PALETTE[k % PALETTE.len()]);
    }
    legend(&mut s, &series.iter().map(|(l, _)| l.clone()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Token trajectories in the PCA plane; the final position of each token is marked.
pub fn pca_svg(pca: &PcaTrajectory, title: &str) -> String {
    let all = pca.points.iter().flatten();
    let frame = Frame::fit(all.clone().map(|p| p[0]), all.map(|p| p[1]));
    let mut s = svg_open(Frame::W, Frame::H, title);
    frame.axes(
        &mut s,
        &format!("PC1 ({:.1}%)", 100.0 * pca.variance_share[0]),
        &format!("PC2 ({:.1}%)", 100.0 * pca.variance_share[1]),
    );
    let d = pca.points.first().map_or(0, |p| p.len());
    for i in 0..d {
        let color = PALETTE[i % PALETTE.len()];
        polyline(&mut s, &frame, pca.points.iter().map(|p| (p[i][0], p[i][1])), color);
        if let Some(last) = pca.points.last() {
            let _ = writeln!(
                s,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>",
                frame.px(last[i][0]),
                frame.py(last[i][1])
            );
        }
    }
    legend(&mut s, &(1..=d).map(|i| format!("token {i}")).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Write the standard figure set and per-metric CSVs for a trajectory into `dir`.
pub fn write_figures(traj: &Trajectory, th: &StageThresholds, dir: &Path) -> Result<StageReport> {
    std::fs::create_dir_all(dir)?;
    let rep = stage_report(traj, th)?;
    let d = rep.entropy.first().map_or(0, |r| r.len());
    let col = |rows: &[Vec<f64>], i: usize| rows.iter().map(|r| r[i]).collect::<Vec<_>>();
    let ent: Vec<(String, Vec<f64>)> = (0..d).map(|i| (format!("row {}", i + 1), col(&rep.entropy, i))).collect();
    std::fs::write(dir.join("attention_entropy.svg"), line_svg(&rep.times, &ent, "Proxy attention entropy (nats)", "entropy"))?;
    let norms: Vec<(String, Vec<f64>)> = (0..d).map(|i| (format!("token {}", i + 1), col(&rep.token_norms, i))).collect();
    std::fs::write(dir.join("token_norms.svg"), line_svg(&rep.times, &norms, "Embedding norms", "‖W0[i,:]‖"))?;
    std::fs::write(dir.join("attention_entropy.csv"), series_csv(&rep.times, &rep.entropy, "H", 1))?;
    std::fs::write(dir.join("token_norms.csv"), series_csv(&rep.times, &rep.token_norms, "norm", 1))?;
    if !traj.snapshots.is_empty() {
        std::fs::write(dir.join("orth_components.csv"), series_csv(&traj.snapshot_times, &rep.orth, "orth", 2))?;
        let last = traj.snapshots.last().expect("nonempty");
        let cm = condensation(&last.w0);
        std::fs::write(dir.join("condensation_W0.svg"), heatmap_svg(&cm.ordered(), "Cosine similarity of W0 rows"))?;
        let w0s: Vec<Mat> = traj.snapshots.iter().map(|s| s.w0.clone()).collect();
        if let Ok(pca) = pca_trajectory(&w0s) {
            std::fs::write(dir.join("pca_W0.svg"), pca_svg(&pca, "Embedding trajectories (PCA)"))?;
        }
    }
    std::fs::write(dir.join("stages.json"), serde_json::to_string_pretty(&rep.stages)?)?;
    Ok(rep)
}
