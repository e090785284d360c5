//! Functional principal component analysis: covariance estimation with
//! diagonal removal and penalized tensor-product smoothing, quadrature-weighted
//! eigendecomposition with truncation, conditional-expectation scores, and
//! curve reconstruction. Missing values are NaN entries in the curve matrix.

use nalgebra::{DMatrix, DVector};

use crate::basis::{bspline_basis, kronecker_sum_penalty, row_tensor, trapezoid_weights};
use crate::error::{FammError, Result};
use crate::linalg;
use crate::solver::{assemble_raw, optimize_reml, RemlOptions};

/// How many eigenpairs to keep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TruncationRule {
    /// Smallest K whose eigenvalues account for at least this share.
    Threshold(f64),
    Fixed(usize),
}

/// Karhunen-Loève objects of one FPCA run.
#[derive(Debug, Clone)]
pub struct FpcaResult {
    pub grid: Vec<f64>,
    /// T×K, columns orthonormal with respect to the quadrature inner product.
    pub eigenfunctions: DMatrix<f64>,
    /// Decreasing and positive.
    pub eigenvalues: Vec<f64>,
    /// n×K conditional-expectation scores.
    pub scores: DMatrix<f64>,
    pub noise_variance: f64,
    pub smoothed_covariance: DMatrix<f64>,
    /// Stored when the pipeline centered the input curves.
    pub mean_curve: Option<DVector<f64>>,
}

/// Basis size per direction of the covariance smoother.
const COV_SMOOTH_K: usize = 10;

/// Pool raw cross-products over available pairs, smooth them (diagonal
/// excluded) with a penalized tensor-product surface whose λ are REML-selected,
/// and estimate the noise variance from the diagonal gap.
/// Input curves are used as-is; center beforehand when a mean is present.
pub fn estimate_covariance(
    curve_matrix: &DMatrix<f64>,
    grid: &[f64],
) -> Result<(DMatrix<f64>, f64)> {
    let n = curve_matrix.nrows();
    let t_len = curve_matrix.ncols();
    if n < 2 {
        return Err(FammError::TooFewCurves { n });
    }
    if t_len != grid.len() {
        return Err(FammError::DimensionMismatch {
            context: "curve matrix columns vs grid".into(),
        });
    }
    let mut raw = DMatrix::from_element(t_len, t_len, f64::NAN);
    for l in 0..t_len {
        for m in l..t_len {
            let mut acc = 0.0;
            let mut count = 0usize;
            for i in 0..n {
                let a = curve_matrix[(i, l)];
                let b = curve_matrix[(i, m)];
                if a.is_finite() && b.is_finite() {
                    acc += a * b;
                    count += 1;
                }
            }
            if count > 0 {
                raw[(l, m)] = acc / count as f64;
                raw[(m, l)] = raw[(l, m)];
            }
        }
    }
    // Off-diagonal entries feed the smoother.
    let mut pts = Vec::new();
    for l in 0..t_len {
        for m in 0..t_len {
            if l != m && raw[(l, m)].is_finite() {
                pts.push((grid[l], grid[m], raw[(l, m)]));
            }
        }
    }
    if pts.is_empty() {
        return Err(FammError::DegenerateCovariance);
    }
    let t1: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let t2: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let z = DVector::from_iterator(pts.len(), pts.iter().map(|p| p.2));
    let (b1, basis) = bspline_basis(grid, COV_SMOOTH_K, 3, 2)?;
    let e1 = basis.evaluate(&t1)?;
    let e2 = basis.evaluate(&t2)?;
    let design = row_tensor(&e1, &e2)?;
    let (px, pt) = kronecker_sum_penalty(&basis.penalty, &basis.penalty)?;
    let k2 = COV_SMOOTH_K * COV_SMOOTH_K;
    let system = assemble_raw(design, z, vec![(0..k2, px.matrix), (0..k2, pt.matrix)])?;
    let mut opts = RemlOptions::default();
    opts.multistarts = 3;
    let fit = optimize_reml(&system, None, &opts)?;
    // Evaluate the fitted surface on the full grid and symmetrize.
    let theta = DMatrix::from_iterator(
        COV_SMOOTH_K,
        COV_SMOOTH_K,
        fit.theta_hat.iter().cloned(),
    )
    .transpose();
    let smooth = &b1 * theta * b1.transpose();
    let smooth = linalg::symmetrize(&smooth);
    // Noise variance: mean gap between raw and smoothed diagonal, clipped at 0.
    let mut gap = 0.0;
    let mut count = 0usize;
    for l in 0..t_len {
        if raw[(l, l)].is_finite() {
            gap += raw[(l, l)] - smooth[(l, l)];
            count += 1;
        }
    }
    let mut noise = if count > 0 { gap / count as f64 } else { 0.0 };
    if noise < 0.0 {
        if noise < -1e-8 {
            eprintln!("warning: negative noise variance estimate {noise:.3e} clipped to 0");
        }
        noise = 0.0;
    }
    Ok((smooth, noise))
}

/// Eigenpairs of the quadrature-weighted covariance operator, truncated.
/// Eigenfunctions are scaled to ∫η² = 1 and signed so the largest-magnitude
/// element is positive; negative eigenvalues are discarded.
pub fn eigen_truncate(
    covariance: &DMatrix<f64>,
    grid: &[f64],
    rule: TruncationRule,
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    if covariance.nrows() != covariance.ncols() || covariance.nrows() != grid.len() {
        return Err(FammError::DimensionMismatch {
            context: "covariance shape vs grid".into(),
        });
    }
    if !linalg::is_symmetric(covariance, 1e-8) {
        return Err(FammError::InvalidPenalty {
            context: "covariance is not symmetric".into(),
        });
    }
    let w = trapezoid_weights(grid)?;
    let sqrt_w = w.map(|v| v.sqrt());
    let t_len = grid.len();
    let mut weighted = covariance.clone();
    for l in 0..t_len {
        for m in 0..t_len {
            weighted[(l, m)] *= sqrt_w[l] * sqrt_w[m];
        }
    }
    let (vals, vecs) = linalg::sym_eigen_desc(&weighted);
    let positive: Vec<(f64, usize)> = vals
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(i, &v)| (v, i))
        .collect();
    if positive.is_empty() {
        return Err(FammError::DegenerateCovariance);
    }
    let total: f64 = positive.iter().map(|(v, _)| v).sum();
    let k = match rule {
        TruncationRule::Fixed(k) => k.min(positive.len()).max(1),
        TruncationRule::Threshold(p) => {
            let mut cum = 0.0;
            let mut k = positive.len();
            for (idx, (v, _)) in positive.iter().enumerate() {
                cum += v;
                if cum / total >= p - 1e-12 {
                    k = idx + 1;
                    break;
                }
            }
            k
        }
    };
    let mut eigenfunctions = DMatrix::zeros(t_len, k);
    let mut eigenvalues = Vec::with_capacity(k);
    for (j, (val, idx)) in positive.iter().take(k).enumerate() {
        let mut eta = DVector::zeros(t_len);
        for l in 0..t_len {
            eta[l] = vecs[(l, *idx)] / sqrt_w[l];
        }
        // Sign convention: largest-magnitude element positive.
        let mut max_abs = 0.0;
        let mut max_val = 0.0;
        for &v in eta.iter() {
            if v.abs() > max_abs {
                max_abs = v.abs();
                max_val = v;
            }
        }
        if max_val < 0.0 {
            eta = -eta;
        }
        eigenfunctions.set_column(j, &eta);
        eigenvalues.push(*val);
    }
    Ok((eigenfunctions, eigenvalues))
}

/// Conditional-expectation scores ξ̂_i = Λ Hᵢᵀ (HᵢΛHᵢᵀ + σ̂²I)⁻¹ yᵢ with Hᵢ the
/// eigenfunction rows at curve i's observed points. With σ̂² = 0 this reduces
/// to quadrature-weighted least squares (exact projection on full grids).
pub fn estimate_scores(curves: &DMatrix<f64>, fpca: &FpcaResult) -> Result<DMatrix<f64>> {
    let n = curves.nrows();
    let t_len = fpca.grid.len();
    if curves.ncols() != t_len {
        return Err(FammError::DimensionMismatch {
            context: "curves vs fpca grid".into(),
        });
    }
    let k = fpca.eigenvalues.len();
    for &v in &fpca.eigenvalues {
        if v <= 0.0 {
            return Err(FammError::DegenerateEigenvalue { value: v });
        }
    }
    let w = trapezoid_weights(&fpca.grid)?;
    let mut scores = DMatrix::zeros(n, k);
    for i in 0..n {
        let obs: Vec<usize> = (0..t_len).filter(|&l| curves[(i, l)].is_finite()).collect();
        if obs.is_empty() {
            return Err(FammError::EmptyCurve { curve_id: i as u64 });
        }
        let mut y = DVector::from_iterator(obs.len(), obs.iter().map(|&l| curves[(i, l)]));
        if let Some(mean) = &fpca.mean_curve {
            for (r, &l) in obs.iter().enumerate() {
                y[r] -= mean[l];
            }
        }
        let mut h = DMatrix::zeros(obs.len(), k);
        for (r, &l) in obs.iter().enumerate() {
            for j in 0..k {
                h[(r, j)] = fpca.eigenfunctions[(l, j)];
            }
        }
        let xi = if fpca.noise_variance <= 1e-12 {
            // Quadrature-weighted least squares.
            let mut hw = h.clone();
            for (r, &l) in obs.iter().enumerate() {
                for j in 0..k {
                    hw[(r, j)] *= w[l];
                }
            }
            let gram = h.transpose() * &hw;
            let rhs = hw.transpose() * &y;
            linalg::solve_spd(&linalg::symmetrize(&gram), &rhs)?.solution
        } else {
            let lambda = DMatrix::from_diagonal(&DVector::from_vec(fpca.eigenvalues.clone()));
            let mut sigma = &h * &lambda * h.transpose();
            for r in 0..obs.len() {
                sigma[(r, r)] += fpca.noise_variance;
            }
            let weights = linalg::solve_spd(&sigma, &y)?.solution;
            &lambda * h.transpose() * weights
        };
        for j in 0..k {
            scores[(i, j)] = xi[j];
        }
    }
    Ok(scores)
}

/// Dense reconstruction: row i = Σ_k score_ik η_k (+ stored mean curve).
pub fn reconstruct(fpca: &FpcaResult, scores: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if scores.ncols() != fpca.eigenvalues.len() {
        return Err(FammError::DimensionMismatch {
            context: "score columns vs eigenvalue count".into(),
        });
    }
    let mut out = scores * fpca.eigenfunctions.transpose();
    if let Some(mean) = &fpca.mean_curve {
        for mut row in out.row_iter_mut() {
            for (l, v) in row.iter_mut().enumerate() {
                *v += mean[l];
            }
        }
    }
    Ok(out)
}

/// Full FPCA pipeline on a curve matrix: optional pointwise centering,
/// covariance smoothing, truncation and score estimation.
pub fn fpca_of_matrix(
    matrix: &DMatrix<f64>,
    grid: &[f64],
    rule: TruncationRule,
    already_centered: bool,
) -> Result<FpcaResult> {
    let (centered, mean_curve) = if already_centered {
        (matrix.clone(), None)
    } else {
        let t_len = matrix.ncols();
        let mut mean = DVector::zeros(t_len);
        for l in 0..t_len {
            let mut acc = 0.0;
            let mut count = 0usize;
            for i in 0..matrix.nrows() {
                let v = matrix[(i, l)];
                if v.is_finite() {
                    acc += v;
                    count += 1;
                }
            }
            mean[l] = if count > 0 { acc / count as f64 } else { 0.0 };
        }
        let mut c = matrix.clone();
        for mut row in c.row_iter_mut() {
            for (l, v) in row.iter_mut().enumerate() {
                if v.is_finite() {
                    *v -= mean[l];
                }
            }
        }
        (c, Some(mean))
    };
    let (smoothed, noise) = estimate_covariance(&centered, grid)?;
    let (eigenfunctions, eigenvalues) = eigen_truncate(&smoothed, grid, rule)?;
    let mut result = FpcaResult {
        grid: grid.to_vec(),
        eigenfunctions,
        eigenvalues,
        scores: DMatrix::zeros(0, 0),
        noise_variance: noise,
        smoothed_covariance: smoothed,
        mean_curve,
    };
    result.scores = estimate_scores(matrix, &result)?;
    Ok(result)
}
