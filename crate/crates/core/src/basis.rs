//! Marginal bases, difference penalties, row tensor products, Kronecker-sum
//! penalty assembly and quadrature weights — the algebra every design block is
//! built from.

use nalgebra::{DMatrix, DVector};

use crate::error::{FammError, Result};
use crate::linalg;

/// What a marginal design dimension is made of.
#[derive(Debug, Clone, PartialEq)]
pub enum BasisKind {
    BSpline {
        degree: usize,
        penalty_order: usize,
        knots: Vec<f64>,
    },
    LinearColumn,
    ConstantColumn,
    Incidence,
    CustomColumns,
}

/// A marginal basis: dimension, penalty and enough metadata to re-evaluate it.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalBasis {
    pub kind: BasisKind,
    pub k: usize,
    pub penalty: DMatrix<f64>,
    pub nullspace_dim: usize,
}

impl MarginalBasis {
    pub fn constant() -> Self {
        Self {
            kind: BasisKind::ConstantColumn,
            k: 1,
            penalty: DMatrix::zeros(1, 1),
            nullspace_dim: 1,
        }
    }

    pub fn linear_column() -> Self {
        Self {
            kind: BasisKind::LinearColumn,
            k: 1,
            penalty: DMatrix::zeros(1, 1),
            nullspace_dim: 1,
        }
    }

    /// Incidence marginal over `m` levels; the penalty is a precision matrix
    /// (identity when levels are independent).
    pub fn incidence(m: usize, precision: Option<DMatrix<f64>>) -> Result<Self> {
        let penalty = match precision {
            Some(p) => {
                if p.nrows() != m || p.ncols() != m {
                    return Err(FammError::DimensionMismatch {
                        context: format!("precision is {}x{}, expected {m}x{m}", p.nrows(), p.ncols()),
                    });
                }
                check_psd(&p, "incidence precision")?
            }
            None => DMatrix::identity(m, m),
        };
        let nullspace_dim = m - psd_rank(&penalty);
        Ok(Self {
            kind: BasisKind::Incidence,
            k: m,
            penalty,
            nullspace_dim,
        })
    }

    /// Custom columns with a given penalty (e.g. FPC eigenfunctions with an
    /// inverse-eigenvalue penalty).
    pub fn custom(k: usize, penalty: DMatrix<f64>) -> Result<Self> {
        if penalty.nrows() != k || penalty.ncols() != k {
            return Err(FammError::DimensionMismatch {
                context: "custom penalty size".into(),
            });
        }
        let penalty = check_psd(&penalty, "custom penalty")?;
        let nullspace_dim = k - psd_rank(&penalty);
        Ok(Self {
            kind: BasisKind::CustomColumns,
            k,
            penalty,
            nullspace_dim,
        })
    }

    /// B-spline marginal over `[lo, hi]` with equidistant knots and a
    /// difference penalty of the given order.
    pub fn bspline(lo: f64, hi: f64, k: usize, degree: usize, penalty_order: usize) -> Result<Self> {
        if k < degree + 1 {
            return Err(FammError::InvalidBasisSize { k, degree });
        }
        if !(lo < hi) {
            return Err(FammError::InvalidValue {
                context: "basis range".into(),
            });
        }
        let segments = k - degree;
        let h = (hi - lo) / segments as f64;
        let knots: Vec<f64> = (0..=(k + degree))
            .map(|j| lo + (j as f64 - degree as f64) * h)
            .collect();
        let penalty = difference_penalty(k, penalty_order)?;
        Ok(Self {
            kind: BasisKind::BSpline {
                degree,
                penalty_order,
                knots,
            },
            k,
            penalty,
            nullspace_dim: penalty_order,
        })
    }

    /// Domain covered by a B-spline marginal.
    pub fn range(&self) -> Option<(f64, f64)> {
        match &self.kind {
            BasisKind::BSpline { degree, knots, .. } => {
                Some((knots[*degree], knots[knots.len() - 1 - degree]))
            }
            _ => None,
        }
    }

    /// Evaluate the basis at arbitrary points (B-spline marginals only).
    pub fn evaluate(&self, points: &[f64]) -> Result<DMatrix<f64>> {
        match &self.kind {
            BasisKind::BSpline { degree, knots, .. } => {
                bspline_eval(points, self.k, *degree, knots)
            }
            BasisKind::ConstantColumn => Ok(DMatrix::from_element(points.len(), 1, 1.0)),
            _ => Err(FammError::InvalidValue {
                context: "basis kind is not evaluable at arbitrary points".into(),
            }),
        }
    }
}

/// How a penalty block factors over the tensor-product coefficient layout.
/// Coefficients are x-major: index = k_x * K_t + k_t.
#[derive(Debug, Clone, PartialEq)]
pub enum PenaltyStructure {
    /// P ⊗ I: penalizes the outer (covariate) direction.
    KroneckerLeft {
        marginal: DMatrix<f64>,
        right_dim: usize,
    },
    /// I ⊗ P: penalizes the inner (t) direction.
    KroneckerRight {
        left_dim: usize,
        marginal: DMatrix<f64>,
    },
    General,
}

/// One quadratic penalty with its own smoothing parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyBlock {
    pub matrix: DMatrix<f64>,
    /// Term-local ordinal; the global index 1..V is assigned at assembly.
    pub smoothing_index: usize,
    /// λ placeholder multiplier; 1 unless a block is pre-scaled.
    pub scale: f64,
    pub structure: PenaltyStructure,
}

impl PenaltyBlock {
    pub fn new(matrix: DMatrix<f64>, smoothing_index: usize) -> Result<Self> {
        let matrix = check_psd(&matrix, "penalty block")?;
        Ok(Self {
            matrix,
            smoothing_index,
            scale: 1.0,
            structure: PenaltyStructure::General,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Evaluate a B-spline basis on a grid. Knots are equidistant over the grid
/// range with degree-many equally spaced extension knots on each side, so the
/// evaluation rows form a partition of unity over the whole range.
pub fn bspline_basis(
    grid: &[f64],
    k: usize,
    degree: usize,
    penalty_order: usize,
) -> Result<(DMatrix<f64>, MarginalBasis)> {
    if grid.is_empty() {
        return Err(FammError::GridTooSmall { h: 0 });
    }
    let lo = grid.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(FammError::InvalidValue {
            context: "basis grid".into(),
        });
    }
    let (lo, hi) = if lo == hi { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
    let basis = MarginalBasis::bspline(lo, hi, k, degree, penalty_order)?;
    let eval = basis.evaluate(grid)?;
    Ok((eval, basis))
}

fn bspline_eval(points: &[f64], k: usize, degree: usize, knots: &[f64]) -> Result<DMatrix<f64>> {
    let lo = knots[degree];
    let hi = knots[knots.len() - 1 - degree];
    let span_tol = 1e-10 * (hi - lo).abs().max(1.0);
    let mut out = DMatrix::zeros(points.len(), k);
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    let mut n = vec![0.0; degree + 1];
    for (row, &x) in points.iter().enumerate() {
        if x < lo - span_tol || x > hi + span_tol {
            return Err(FammError::BasisRangeError { value: x, lo, hi });
        }
        let x = x.clamp(lo, hi);
        // Knot span index mu with knots[mu] <= x < knots[mu+1], clamped so
        // the right endpoint falls in the last interior span.
        let h = knots[1] - knots[0];
        let mut mu = degree + ((x - lo) / h).floor() as usize;
        mu = mu.min(k - 1);
        while mu > degree && x < knots[mu] {
            mu -= 1;
        }
        n[0] = 1.0;
        for j in 1..=degree {
            left[j] = x - knots[mu + 1 - j];
            right[j] = knots[mu + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        for (j, &v) in n.iter().enumerate() {
            out[(row, mu - degree + j)] = v;
        }
    }
    Ok(out)
}

/// DᵀD where D is the order-th difference operator; rank K − order.
pub fn difference_penalty(k: usize, order: usize) -> Result<DMatrix<f64>> {
    if order == 0 || order >= k {
        return Err(FammError::InvalidPenaltyOrder { order, k });
    }
    let mut d: DMatrix<f64> = DMatrix::identity(k, k);
    for step in 0..order {
        let rows = k - step - 1;
        let mut next = DMatrix::zeros(rows, k);
        for i in 0..rows {
            for j in 0..k {
                next[(i, j)] = d[(i + 1, j)] - d[(i, j)];
            }
        }
        d = next;
    }
    Ok(d.transpose() * d)
}

/// Row tensor product: result[i, j·b + l] = A[i,j]·B[i,l].
pub fn row_tensor(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() != b.nrows() {
        return Err(FammError::DimensionMismatch {
            context: format!("row tensor: {} vs {} rows", a.nrows(), b.nrows()),
        });
    }
    let (m, ka, kb) = (a.nrows(), a.ncols(), b.ncols());
    let mut out = DMatrix::zeros(m, ka * kb);
    for i in 0..m {
        for j in 0..ka {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            for l in 0..kb {
                out[(i, j * kb + l)] = aij * b[(i, l)];
            }
        }
    }
    Ok(out)
}

/// The two Kronecker-sum penalty blocks for an x-major tensor-product
/// coefficient: (P_x ⊗ I_{K_t}, I_{K_x} ⊗ P_t), each with its own λ.
pub fn kronecker_sum_penalty(
    p_x: &DMatrix<f64>,
    p_t: &DMatrix<f64>,
) -> Result<(PenaltyBlock, PenaltyBlock)> {
    for (name, p) in [("P_x", p_x), ("P_t", p_t)] {
        if !linalg::is_symmetric(p, 1e-10) {
            return Err(FammError::InvalidPenalty {
                context: format!("{name} is not symmetric"),
            });
        }
    }
    let p_x = check_psd(p_x, "P_x")?;
    let p_t = check_psd(p_t, "P_t")?;
    let (kx, kt) = (p_x.nrows(), p_t.nrows());
    let block_x = PenaltyBlock {
        matrix: p_x.kronecker(&DMatrix::identity(kt, kt)),
        smoothing_index: 0,
        scale: 1.0,
        structure: PenaltyStructure::KroneckerLeft {
            marginal: p_x,
            right_dim: kt,
        },
    };
    let block_t = PenaltyBlock {
        matrix: DMatrix::identity(kx, kx).kronecker(&p_t),
        smoothing_index: 1,
        scale: 1.0,
        structure: PenaltyStructure::KroneckerRight {
            left_dim: kx,
            marginal: p_t,
        },
    };
    Ok((block_x, block_t))
}

/// Trapezoid quadrature weights on a strictly increasing grid; Σw spans the range.
pub fn trapezoid_weights(s_grid: &[f64]) -> Result<DVector<f64>> {
    let h = s_grid.len();
    if h < 2 {
        return Err(FammError::GridTooSmall { h });
    }
    if s_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(FammError::InvalidValue {
            context: "quadrature grid must be strictly increasing".into(),
        });
    }
    let mut w = vec![0.0; h];
    w[0] = (s_grid[1] - s_grid[0]) / 2.0;
    w[h - 1] = (s_grid[h - 1] - s_grid[h - 2]) / 2.0;
    for i in 1..h - 1 {
        w[i] = (s_grid[i + 1] - s_grid[i - 1]) / 2.0;
    }
    Ok(DVector::from_vec(w))
}

/// Trapezoid weights restricted to the window [lo, hi]: each grid point keeps
/// the length of its midpoint cell intersected with the window, so boundary
/// weights shrink by the half-interval overlap and the full window reproduces
/// `trapezoid_weights` exactly.
pub fn windowed_trapezoid_weights(s_grid: &[f64], lo: f64, hi: f64) -> Result<DVector<f64>> {
    let h = s_grid.len();
    if h < 2 {
        return Err(FammError::GridTooSmall { h });
    }
    if lo <= s_grid[0] && hi >= s_grid[h - 1] {
        return trapezoid_weights(s_grid);
    }
    let mut w = vec![0.0; h];
    for i in 0..h {
        let cell_lo = if i == 0 {
            s_grid[0]
        } else {
            (s_grid[i - 1] + s_grid[i]) / 2.0
        };
        let cell_hi = if i == h - 1 {
            s_grid[h - 1]
        } else {
            (s_grid[i] + s_grid[i + 1]) / 2.0
        };
        w[i] = (cell_hi.min(hi) - cell_lo.max(lo)).max(0.0);
    }
    Ok(DVector::from_vec(w))
}

/// Validate symmetric PSD within tolerance, clipping slightly negative
/// eigenvalues to zero. Eigenvalues below −1e-9 relative are an error.
pub fn check_psd(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    if !linalg::is_symmetric(m, 1e-10) {
        return Err(FammError::InvalidPenalty {
            context: format!("{context} is not symmetric"),
        });
    }
    let sym = linalg::symmetrize(m);
    let (vals, vecs) = linalg::sym_eigen_desc(&sym);
    let max = vals.first().copied().unwrap_or(0.0).max(0.0);
    let floor = -1e-9 * max.max(f64::MIN_POSITIVE);
    if let Some(&worst) = vals.last() {
        if worst < floor {
            return Err(FammError::InvalidPenalty {
                context: format!("{context} has eigenvalue {worst} below tolerance"),
            });
        }
        if worst < 0.0 {
            let clipped: Vec<f64> = vals.iter().map(|&v| v.max(0.0)).collect();
            let d = DMatrix::from_diagonal(&DVector::from_vec(clipped));
            return Ok(linalg::symmetrize(&(&vecs * d * vecs.transpose())));
        }
    }
    Ok(sym)
}

fn psd_rank(m: &DMatrix<f64>) -> usize {
    let (vals, _) = linalg::sym_eigen_desc(m);
    let max = vals.first().copied().unwrap_or(0.0).max(0.0);
    let tol = linalg::RANK_TOL * max.max(f64::MIN_POSITIVE);
    vals.iter().filter(|&&v| v > tol).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn degree_zero_indicator_basis() {
        let (eval, _) = bspline_basis(&[0.0, 0.25, 0.75, 1.0], 2, 0, 1).unwrap();
        assert_eq!(eval.row(1).iter().cloned().collect::<Vec<_>>(), vec![1.0, 0.0]);
        assert_eq!(eval.row(2).iter().cloned().collect::<Vec<_>>(), vec![0.0, 1.0]);
    }

    #[test]
    fn partition_of_unity_and_local_support() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut grid: Vec<f64> = (0..50).map(|_| rng.random::<f64>()).collect();
        grid.push(0.0);
        grid.push(1.0);
        let (eval, _) = bspline_basis(&grid, 10, 3, 1).unwrap();
        for i in 0..eval.nrows() {
            let sum: f64 = eval.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-10, "row sum {sum}");
            let nonzeros = eval.row(i).iter().filter(|v| v.abs() > 0.0).count();
            assert!(nonzeros <= 4, "bandwidth {nonzeros}");
        }
    }

    #[test]
    fn basis_too_small_rejected() {
        assert!(matches!(
            bspline_basis(&[0.0, 1.0], 3, 3, 1),
            Err(FammError::InvalidBasisSize { .. })
        ));
    }

    #[test]
    fn evaluation_outside_range_rejected() {
        let basis = MarginalBasis::bspline(0.0, 1.0, 8, 3, 1).unwrap();
        assert!(matches!(
            basis.evaluate(&[1.5]),
            Err(FammError::BasisRangeError { .. })
        ));
    }

    #[test]
    fn first_order_difference_penalty_k3() {
        let p = difference_penalty(3, 1).unwrap();
        let expected =
            DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]);
        assert!((p - expected).amax() < 1e-12);
    }

    #[test]
    fn second_order_penalty_nullspace_is_polynomial() {
        let p = difference_penalty(4, 2).unwrap();
        assert_eq!(psd_rank(&p), 2);
        let constant = DVector::from_vec(vec![1.0, 1.0, 1.0, 1.0]);
        let linear = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        assert!((&p * constant).amax() < 1e-12);
        assert!((&p * linear).amax() < 1e-12);
    }

    #[test]
    fn differences_annihilate_constants() {
        for order in 1..5 {
            let p = difference_penalty(6, order).unwrap();
            let ones = DVector::from_element(6, 1.0);
            let q = (ones.transpose() * &p * ones)[(0, 0)];
            assert!(q.abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_penalty_order_rejected() {
        assert!(matches!(
            difference_penalty(3, 3),
            Err(FammError::InvalidPenaltyOrder { .. })
        ));
    }

    #[test]
    fn row_tensor_definition() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let b = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        let r = row_tensor(&a, &b).unwrap();
        assert_eq!(r, DMatrix::from_row_slice(1, 4, &[3.0, 4.0, 6.0, 8.0]));
    }

    #[test]
    fn row_tensor_mismatch_rejected() {
        let a = DMatrix::zeros(2, 2);
        let b = DMatrix::zeros(3, 2);
        assert!(matches!(
            row_tensor(&a, &b),
            Err(FammError::DimensionMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn row_tensor_with_ones_column_is_identity(rows in 1usize..6, cols in 1usize..5, seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = DMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>() - 0.5);
            let ones = DMatrix::from_element(rows, 1, 1.0);
            prop_assert!((row_tensor(&a, &ones).unwrap() - &a).amax() < 1e-15);
            prop_assert!((row_tensor(&ones, &a).unwrap() - &a).amax() < 1e-15);
        }
    }

    #[test]
    fn row_tensor_matches_kronecker_expansion() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let a = DMatrix::from_fn(5, 3, |_, _| rng.random::<f64>() - 0.5);
        let b = DMatrix::from_fn(5, 4, |_, _| rng.random::<f64>() - 0.5);
        let r = row_tensor(&a, &b).unwrap();
        // (A ⊗ 1ᵀ_4) .* (1ᵀ_3 ⊗ B) row by row.
        let ones_b = DMatrix::from_element(1, 4, 1.0);
        let ones_a = DMatrix::from_element(1, 3, 1.0);
        for i in 0..5 {
            let left = a.row(i).kronecker(&ones_b);
            let right = ones_a.kronecker(&b.row(i));
            for j in 0..12 {
                assert!((r[(i, j)] - left[(0, j)] * right[(0, j)]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn kronecker_sum_rank_and_nullspace() {
        let p_x = difference_penalty(5, 2).unwrap();
        let p_t = difference_penalty(4, 1).unwrap();
        let (bx, bt) = kronecker_sum_penalty(&p_x, &p_t).unwrap();
        let total = &bx.matrix * 0.7 + &bt.matrix * 1.3;
        assert_eq!(psd_rank(&total), 18);
        // Coefficient in both marginal nullspaces is unpenalized.
        let theta_x = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let theta_t = DVector::from_element(4, 1.0);
        let theta = theta_x.kronecker(&theta_t);
        let pen = (theta.transpose() * &total * &theta)[(0, 0)];
        assert!(pen.abs() < 1e-10);
    }

    #[test]
    fn zero_marginal_propagates() {
        let p_x = DMatrix::zeros(3, 3);
        let p_t = difference_penalty(4, 1).unwrap();
        let (bx, _) = kronecker_sum_penalty(&p_x, &p_t).unwrap();
        assert!(bx.matrix.amax() == 0.0);
    }

    #[test]
    fn asymmetric_penalty_rejected() {
        let mut p = DMatrix::zeros(2, 2);
        p[(0, 1)] = 1.0;
        assert!(matches!(
            kronecker_sum_penalty(&p, &DMatrix::zeros(2, 2)),
            Err(FammError::InvalidPenalty { .. })
        ));
    }

    #[test]
    fn kronecker_sum_matches_brute_force_quadratic_form() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let p_x = difference_penalty(4, 2).unwrap();
        let p_t = difference_penalty(3, 1).unwrap();
        let (bx, bt) = kronecker_sum_penalty(&p_x, &p_t).unwrap();
        let (l1, l2) = (0.7, 2.3);
        let theta = DVector::from_fn(12, |_, _| rng.random::<f64>() - 0.5);
        let fast = l1 * (theta.transpose() * &bx.matrix * &theta)[(0, 0)]
            + l2 * (theta.transpose() * &bt.matrix * &theta)[(0, 0)];
        // Brute force over the x-major layout Θ[kx][kt] = θ[kx*Kt + kt]:
        // λ1·Σ_kt θ_·ktᵀ P_x θ_·kt + λ2·Σ_kx θ_kx·ᵀ P_t θ_kx·.
        let mut slow = 0.0;
        for kt in 0..3 {
            for i in 0..4 {
                for j in 0..4 {
                    slow += l1 * theta[i * 3 + kt] * p_x[(i, j)] * theta[j * 3 + kt];
                }
            }
        }
        for kx in 0..4 {
            for i in 0..3 {
                for j in 0..3 {
                    slow += l2 * theta[kx * 3 + i] * p_t[(i, j)] * theta[kx * 3 + j];
                }
            }
        }
        assert!((fast - slow).abs() < 1e-10);
    }

    #[test]
    fn trapezoid_weights_basics() {
        let w = trapezoid_weights(&[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(w.as_slice(), &[0.25, 0.5, 0.25]);
        // Exact for constants.
        assert!((w.sum() - 1.0).abs() < 1e-15);
        assert!(matches!(
            trapezoid_weights(&[0.0]),
            Err(FammError::GridTooSmall { h: 1 })
        ));
    }

    #[test]
    fn trapezoid_quadrature_of_square() {
        let grid: Vec<f64> = (0..101).map(|i| i as f64 / 100.0).collect();
        let w = trapezoid_weights(&grid).unwrap();
        let integral: f64 = grid.iter().zip(w.iter()).map(|(s, wi)| s * s * wi).sum();
        assert!((integral - 1.0 / 3.0).abs() < 1e-4);
    }

    #[test]
    fn windowed_weights_reduce_to_full_weights() {
        let grid: Vec<f64> = (0..11).map(|i| i as f64 / 10.0).collect();
        let full = trapezoid_weights(&grid).unwrap();
        let windowed = windowed_trapezoid_weights(&grid, 0.0, 1.0).unwrap();
        assert!((full - &windowed).amax() < 1e-15);
        // Degenerate window has zero mass.
        let degenerate = windowed_trapezoid_weights(&grid, 0.0, 0.0).unwrap();
        assert!(degenerate.sum() == 0.0);
    }

    #[test]
    fn penalties_are_symmetric_psd() {
        for (k, order) in [(4, 1), (6, 2), (9, 3)] {
            let p = difference_penalty(k, order).unwrap();
            assert!(linalg::is_symmetric(&p, 1e-12));
            let (vals, _) = linalg::sym_eigen_desc(&p);
            let max = vals[0];
            assert!(vals.iter().all(|&v| v >= -1e-9 * max));
        }
    }
}
