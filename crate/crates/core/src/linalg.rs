//! Small dense helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub type Mat = DMatrix<f64>;
pub type Vec64 = DVector<f64>;

/// Stable softmax of a slice, written into `out`.
pub fn softmax_into(z: &[f64], out: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    softmax_into(z, &mut out);
    out
}

/// Softmax of `z` with prior weights: out_j ∝ w_j exp(z_j).
pub fn weighted_softmax(weights: &[f64], z: &[f64]) -> Vec<f64> {
    let max = z
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z
        .iter()
        .zip(weights)
        .map(|(&v, &w)| if w > 0.0 { w * (v - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = out.iter().sum();
    for o in out.iter_mut() {
        *o /= sum;
    }
    out
}

/// `diag(a) - a aᵀ`.
pub fn var_matrix(a: &[f64]) -> Mat {
    let n = a.len();
    Mat::from_fn(n, n, |i, j| {
        let outer = a[i] * a[j];
        if i == j {
            a[i] - outer
        } else {
            -outer
        }
    })
}

pub fn row(m: &Mat, i: usize) -> Vec<f64> {
    m.row(i).iter().cloned().collect()
}

/// Symmetric eigendecomposition, eigenvalues sorted descending with matching columns.
pub fn sym_eig_desc(a: &Mat) -> (Vec<f64>, Mat) {
    let n = a.nrows();
    let eig = SymmetricEigen::new(a.clone());
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
    let vals = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = Mat::from_fn(n, n, |r, c| eig.eigenvectors[(r, idx[c])]);
    (vals, vecs)
}

/// Singular values in descending order.
pub fn singular_values(a: &Mat) -> Vec<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = a.clone().svd(false, false).singular_values.iter().cloned().collect();
    s.sort_by(|x, y| y.partial_cmp(x).unwrap());
    s
}

/// Leading singular triple (σ, u, v) with the sign fixed so that the largest |u_i| is positive.
pub fn top_singular(a: &Mat) -> (f64, Vec64, Vec64) {
    let svd = a.clone().svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let (k, &sigma) = svd
        .singular_values
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
        .unwrap();
    let mut uu: Vec64 = u.column(k).into_owned();
    let mut vv: Vec64 = vt.row(k).transpose().into_owned();
    let imax = uu.iamax();
    if uu[imax] < 0.0 {
        uu = -uu;
        vv = -vv;
    }
    (sigma, uu, vv)
}

/// Relative rank-one residual sqrt(Σ_{k≥2} σ_k²) / ‖A‖_F, zero for the zero matrix.
pub fn rank_one_residual(a: &Mat) -> f64 {
    let s = singular_values(a);
    let total: f64 = s.iter().map(|x| x * x).sum();
    if total == 0.0 {
        return 0.0;
    }
    let tail: f64 = s.iter().skip(1).map(|x| x * x).sum();
    (tail / total).sqrt()
}

pub fn frob(a: &Mat) -> f64 {
    a.norm()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Shannon entropy with natural log; 0·log 0 = 0.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.ln())
        .sum()
}

/// Ordinary least squares fit y = a + b x. Returns (intercept, slope, r²).
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (intercept, slope, r2)
}

/// Slope of log(y) against log(x).
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.abs().ln()).collect();
    linear_fit(&lx, &ly).1
}
