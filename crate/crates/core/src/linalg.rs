//! Small dense helpers shared by the models.

use nalgebra::DMatrix;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `J J^T` and `J r` for `rows` row-major rows of length `len`, blocked over
/// columns so the working set stays in cache.
pub fn gram_and_rhs(jac: &[f64], rows: usize, len: usize, r: &[f64]) -> (DMatrix<f64>, Vec<f64>) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
        // SAFETY: the required features were detected at runtime.
        return unsafe { gram_avx2(jac, rows, len, r) };
    }
    gram_generic(jac, rows, len, r)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn gram_avx2(jac: &[f64], rows: usize, len: usize, r: &[f64]) -> (DMatrix<f64>, Vec<f64>) {
    gram_generic(jac, rows, len, r)
}

#[inline(always)]
fn gram_generic(jac: &[f64], rows: usize, len: usize, r: &[f64]) -> (DMatrix<f64>, Vec<f64>) {
    const BLOCK: usize = 512;
    let mut h = DMatrix::<f64>::zeros(rows, rows);
    let mut g = vec![0.0; rows];
    let mut start = 0;
    while start < len {
        let end = (start + BLOCK).min(len);
        for i in 0..rows {
            let a = &jac[i * len + start..i * len + end];
            for j in 0..=i {
                h[(i, j)] += dot_lanes(a, &jac[j * len + start..j * len + end]);
            }
            g[i] += dot_lanes(a, &r[start..end]);
        }
        start = end;
    }
    for i in 0..rows {
        for j in 0..i {
            h[(j, i)] = h[(i, j)];
        }
    }
    (h, g)
}

/// Dot product with independent accumulators so it vectorizes.
#[inline(always)]
fn dot_lanes(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().sum::<f64>() + dot(ra, rb)
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Orthonormalizes the columns of `m` by thin QR, flipping signs so that the
/// triangular factor has a positive diagonal (each output column keeps the
/// orientation of the input column it came from).
pub fn orthonormalize_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let qr = m.clone().qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..q.ncols() {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Principal angles, in degrees and ascending order, between the column
/// spaces of `a` and `b`.
pub fn principal_angles_deg(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    assert_eq!(a.nrows(), b.nrows(), "row mismatch");
    let qa = orthonormalize_columns(a);
    let qb = orthonormalize_columns(b);
    let m = qa.transpose() * qb;
    let sv = m.svd(false, false).singular_values;
    let mut angles: Vec<f64> = sv
        .iter()
        .map(|s| s.clamp(-1.0, 1.0).acos().to_degrees())
        .collect();
    angles.sort_by(|x, y| x.partial_cmp(y).unwrap());
    angles
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Linear-interpolated empirical quantile, `q` in [0, 1].
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = pos - lo as f64;
    v[lo] * (1.0 - t) + v[hi] * t
}
