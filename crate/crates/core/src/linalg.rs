//! Small dense kernels on row-major `f64` slices.
//!
//! The mixed-model engine works on many tiny blocks and one moderately sized
//! dense trailing block, so these are written for contiguous row-major
//! storage rather than going through `nalgebra` types.

use nalgebra::DMatrix;

/// In-place lower Cholesky of the symmetric `n × n` matrix in `a` (only the
/// lower triangle is read). The strict upper triangle is zeroed. On failure
/// returns the index of the first non-positive pivot.
pub fn cholesky_in_place(a: &mut [f64], n: usize) -> Result<(), usize> {
    debug_assert_eq!(a.len(), n * n);
    for i in 0..n {
        let (head, tail) = a.split_at_mut(i * n);
        let row_i = &mut tail[..n];
        for j in 0..i {
            let row_j = &head[j * n..j * n + j + 1];
            let s: f64 = row_i[..j].iter().zip(&row_j[..j]).map(|(x, y)| x * y).sum();
            row_i[j] = (row_i[j] - s) / row_j[j];
        }
        let d = row_i[i] - row_i[..i].iter().map(|x| x * x).sum::<f64>();
        if !(d > 0.0 && d.is_finite()) {
            return Err(i);
        }
        row_i[i] = d.sqrt();
        for v in &mut row_i[i + 1..] {
            *v = 0.0;
        }
    }
    Ok(())
}

/// Solves `L x = b` in place.
pub fn forward_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let row = &l[i * n..i * n + i];
        let s: f64 = row.iter().zip(&b[..i]).map(|(a, x)| a * x).sum();
        b[i] = (b[i] - s) / l[i * n + i];
    }
}

/// Solves `Lᵀ x = b` in place.
pub fn back_solve_t(l: &[f64], n: usize, b: &mut [f64]) {
    for i in (0..n).rev() {
        let xi = b[i] / l[i * n + i];
        b[i] = xi;
        for k in 0..i {
            b[k] -= l[i * n + k] * xi;
        }
    }
}

/// Inverse of a lower-triangular matrix (result lower-triangular).
pub fn lower_inverse(l: &[f64], n: usize) -> Vec<f64> {
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0 / l[i * n + i];
        for j in 0..i {
            let mut s = 0.0;
            for k in j..i {
                s += l[i * n + k] * inv[k * n + j];
            }
            inv[i * n + j] = -s / l[i * n + i];
        }
    }
    inv
}

/// `(L Lᵀ)⁻¹` as a full symmetric matrix, from the lower factor.
pub fn inverse_from_cholesky(l: &[f64], n: usize) -> Vec<f64> {
    let li = lower_inverse(l, n);
    // S = Liᵀ Li; S[a][b] = Σ_{k ≥ max(a,b)} Li[k][a] Li[k][b]
    let mut s = vec![0.0; n * n];
    for k in 0..n {
        let row = &li[k * n..k * n + k + 1];
        for a in 0..=k {
            let ra = row[a];
            if ra == 0.0 {
                continue;
            }
            let sa = &mut s[a * n..a * n + a + 1];
            for (b, v) in sa.iter_mut().enumerate() {
                *v += ra * row[b];
            }
        }
    }
    for a in 0..n {
        for b in 0..a {
            s[b * n + a] = s[a * n + b];
        }
    }
    s
}

/// Lower factor `L` with `L Lᵀ = G` for a symmetric positive semi-definite
/// `G`. Pivots at or below `tol × max diag` are treated as exact zeros, so a
/// zero matrix yields a zero factor.
pub fn psd_factor(g: &DMatrix<f64>) -> DMatrix<f64> {
    let n = g.nrows();
    let scale = (0..n).map(|i| g[(i, i)].abs()).fold(0.0, f64::max);
    let tol = 1e-13 * scale.max(f64::MIN_POSITIVE);
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = g[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= tol {
            continue;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = g[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    l
}

/// Symmetrizes and clips eigenvalues below zero; fails if any eigenvalue is
/// below `-tol`.
pub fn clip_psd(g: &DMatrix<f64>, tol: f64) -> Option<DMatrix<f64>> {
    let sym = (g + g.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|&v| v < -tol) {
        return None;
    }
    if eig.eigenvalues.iter().all(|&v| v >= 0.0) {
        return Some(sym);
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    Some(&eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose())
}
