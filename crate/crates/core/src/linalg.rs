//! Small dense linear-algebra helpers shared across the crate.

use nalgebra::{DMatrix, DVector};

/// Relative eigenvalue tolerance used to decide structural rank.
pub const RANK_TOL: f64 = 1e-10;

/// Symmetric eigendecomposition with eigenvalues sorted descending.
/// Returns (eigenvalues, eigenvectors as columns in matching order).
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let sym = symmetrize(m);
    let eig = sym.symmetric_eigen();
    let k = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(k, k);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// (M + Mᵀ)/2.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > tol * scale {
                return false;
            }
        }
    }
    true
}

/// Orthonormal basis of the nullspace of `c` (rows = constraints), computed from
/// the spectral decomposition of cᵀc. Returns (nullspace basis, rank of c).
pub fn nullspace_basis(c: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    nullspace_basis_with_floor(c, 0.0)
}

/// Like `nullspace_basis`, but singular values below `floor` count as zero;
/// needed when `c` may be numerically zero relative to an external scale
/// (e.g. a constraint matrix built from centered covariates).
pub fn nullspace_basis_with_floor(c: &DMatrix<f64>, floor: f64) -> (DMatrix<f64>, usize) {
    let k = c.ncols();
    let gram = c.transpose() * c;
    let (vals, vecs) = sym_eigen_desc(&gram);
    let max = vals.first().copied().unwrap_or(0.0).max(0.0);
    let tol = (RANK_TOL * max.max(f64::MIN_POSITIVE)).max(floor * floor);
    let rank = vals.iter().filter(|&&v| v > tol).count();
    let mut z = DMatrix::zeros(k, k - rank);
    for j in rank..k {
        z.set_column(j - rank, &vecs.column(j));
    }
    (z, rank)
}

/// Result of a symmetric positive-(semi)definite solve.
pub struct SpdSolve {
    pub solution: DVector<f64>,
    /// log |H| over the identified subspace (full log-determinant when H is PD).
    pub log_det: f64,
    /// Directions pinned to zero by the minimum-norm policy (empty when H is PD).
    pub null_directions: Vec<DVector<f64>>,
    /// Inverse restricted to the identified subspace (pseudo-inverse when deficient).
    pub inverse: DMatrix<f64>,
}

/// Solve H x = b for symmetric positive-semidefinite H. Uses Cholesky when H is
/// PD; otherwise falls back to a spectral pseudo-inverse that pins unidentified
/// directions to zero (minimum-norm solution) and reports them.
pub fn solve_spd(h: &DMatrix<f64>, b: &DVector<f64>) -> crate::error::Result<SpdSolve> {
    if h.iter().any(|v| !v.is_finite()) || b.iter().any(|v| !v.is_finite()) {
        return Err(crate::error::FammError::InvalidValue {
            context: "penalized system".into(),
        });
    }
    if let Some(chol) = h.clone().cholesky() {
        if chol_well_conditioned(&chol) {
            let solution = chol.solve(b);
            let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            if log_det.is_finite() && solution.iter().all(|v| v.is_finite()) {
                return Ok(SpdSolve {
                    solution,
                    log_det,
                    null_directions: Vec::new(),
                    inverse: chol.inverse(),
                });
            }
        }
    }
    let (vals, vecs) = sym_eigen_desc(h);
    let max = vals.first().copied().unwrap_or(0.0);
    if max <= 0.0 {
        return Err(crate::error::FammError::RankDeficient {
            null_dims: h.nrows(),
        });
    }
    let tol = RANK_TOL * max;
    let mut log_det = 0.0;
    let mut inv_vals = vec![0.0; vals.len()];
    let mut null_directions = Vec::new();
    for (i, &v) in vals.iter().enumerate() {
        if v > tol {
            log_det += v.ln();
            inv_vals[i] = 1.0 / v;
        } else {
            null_directions.push(vecs.column(i).into_owned());
        }
    }
    let vt_b = vecs.transpose() * b;
    let scaled = DVector::from_iterator(
        vals.len(),
        vt_b.iter().zip(&inv_vals).map(|(x, iv)| x * iv),
    );
    let solution = &vecs * scaled;
    let inverse = &vecs * DMatrix::from_diagonal(&DVector::from_vec(inv_vals)) * vecs.transpose();
    Ok(SpdSolve {
        solution,
        log_det,
        null_directions,
        inverse,
    })
}

/// A Cholesky factor counts as trustworthy when its pivot ratio stays clear of
/// roundoff level; near-singular matrices can sneak through with tiny pivots.
pub fn chol_well_conditioned(chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> bool {
    let diag = chol.l_dirty().diagonal();
    let mut min = f64::INFINITY;
    let mut max = 0.0f64;
    for &d in diag.iter() {
        min = min.min(d);
        max = max.max(d);
    }
    min > 0.0 && (min / max) * (min / max) > 1e-12
}

/// Symmetric square root factor R (r×k, rows) with RᵀR = M for PSD M.
pub fn psd_root_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen_desc(m);
    let max = vals.first().copied().unwrap_or(0.0).max(0.0);
    let tol = RANK_TOL * max.max(f64::MIN_POSITIVE);
    let kept: Vec<usize> = (0..vals.len()).filter(|&i| vals[i] > tol).collect();
    let mut root = DMatrix::zeros(kept.len(), m.ncols());
    for (r, &i) in kept.iter().enumerate() {
        let row = vecs.column(i).transpose() * vals[i].sqrt();
        root.set_row(r, &row);
    }
    root
}

/// AᵀA for a column-major dense matrix, upper triangle computed in parallel.
pub fn ata(m: &DMatrix<f64>) -> DMatrix<f64> {
    use rayon::prelude::*;
    let (n, k) = m.shape();
    let data = m.as_slice();
    let mut out = DMatrix::zeros(k, k);
    let entries: Vec<(usize, usize, f64)> = (0..k)
        .into_par_iter()
        .flat_map_iter(|j| {
            let cj = &data[j * n..(j + 1) * n];
            (0..=j).map(move |i| {
                let ci = &data[i * n..(i + 1) * n];
                let dot = ci.iter().zip(cj).map(|(a, b)| a * b).sum::<f64>();
                (i, j, dot)
            })
        })
        .collect();
    for (i, j, v) in entries {
        out[(i, j)] = v;
        out[(j, i)] = v;
    }
    out
}

/// Aᵀb.
pub fn atb(m: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let (n, k) = m.shape();
    let data = m.as_slice();
    DVector::from_iterator(
        k,
        (0..k).map(|j| {
            data[j * n..(j + 1) * n]
                .iter()
                .zip(b.iter())
                .map(|(a, y)| a * y)
                .sum::<f64>()
        }),
    )
}

/// Column means of a matrix.
pub fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows() as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

/// Sample standard deviation of a slice (denominator n−1; 0 for n < 2).
pub fn sd(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    (ss / (n as f64 - 1.0)).sqrt()
}
