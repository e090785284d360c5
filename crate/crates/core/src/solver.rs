//! Global system assembly, penalized least squares, the REML criterion of the
//! mixed-model representation with σ² profiled out, smoothing-parameter
//! optimization by a multistart simplex search, the model-fit pipeline, and the
//! iterative FPC random-intercept procedure.

use std::collections::HashMap;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::basis::{PenaltyBlock, PenaltyStructure};
use crate::constraints::absorb_sum_to_zero_per_t;
use crate::data::FunctionalDataset;
use crate::error::{FammError, Result};
use crate::fpca::{self, FpcaResult, TruncationRule};
use crate::linalg;
use crate::terms::{build_term, FpcBasisInput, TensorTerm, TermAux, TermKind, TermSpec};

/// One penalty in global coordinates: a local block confined to a term's slice.
#[derive(Debug, Clone)]
pub struct GlobalPenalty {
    pub term_index: usize,
    pub slice: Range<usize>,
    pub block: PenaltyBlock,
    /// Global smoothing-parameter index, 0..V.
    pub v: usize,
}

impl GlobalPenalty {
    /// The K×K zero-padded penalty matrix P̃_v.
    pub fn padded(&self, k_total: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(k_total, k_total);
        let w = self.block.matrix.nrows();
        for i in 0..w {
            for j in 0..w {
                out[(self.slice.start + i, self.slice.start + j)] = self.block.matrix[(i, j)];
            }
        }
        out
    }
}

/// Per-term machinery for the generalized log-determinant of S_λ.
#[derive(Debug, Clone)]
enum TermPdet {
    Unpenalized {
        width: usize,
    },
    /// Blocks of the form λ_L (A ⊗ I) + λ_R (I ⊗ B): the marginal spectra give
    /// the joint spectrum λ_L a_i + λ_R b_j directly.
    Kron {
        left_eigs: Vec<f64>,
        right_eigs: Vec<f64>,
        v_left: Option<usize>,
        v_right: Option<usize>,
        nullity: usize,
    },
    /// General blocks: project onto the range space of Σ_v P_v once, then a
    /// Cholesky per evaluation.
    General {
        projected: Vec<(usize, DMatrix<f64>)>,
        rank: usize,
        width: usize,
    },
}

impl TermPdet {
    fn nullity(&self) -> usize {
        match self {
            TermPdet::Unpenalized { width } => *width,
            TermPdet::Kron { nullity, .. } => *nullity,
            TermPdet::General { rank, width, .. } => width - rank,
        }
    }

    fn log_pdet(&self, lambda: &[f64]) -> f64 {
        match self {
            TermPdet::Unpenalized { .. } => 0.0,
            TermPdet::Kron {
                left_eigs,
                right_eigs,
                v_left,
                v_right,
                ..
            } => {
                let ll = v_left.map(|v| lambda[v]).unwrap_or(0.0);
                let lr = v_right.map(|v| lambda[v]).unwrap_or(0.0);
                let tol_a = structural_tol(left_eigs);
                let tol_b = structural_tol(right_eigs);
                let mut acc = 0.0;
                for &a in left_eigs {
                    for &b in right_eigs {
                        if a > tol_a || b > tol_b {
                            acc += (ll * a + lr * b).max(f64::MIN_POSITIVE).ln();
                        }
                    }
                }
                acc
            }
            TermPdet::General { projected, rank, .. } => {
                if *rank == 0 {
                    return 0.0;
                }
                let mut s = DMatrix::zeros(*rank, *rank);
                for (v, p) in projected {
                    s += p * lambda[*v];
                }
                match s.clone().cholesky() {
                    Some(chol) => {
                        2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
                    }
                    None => {
                        let (vals, _) = linalg::sym_eigen_desc(&s);
                        vals.iter()
                            .filter(|&&v| v > 0.0)
                            .map(|v| v.ln())
                            .sum::<f64>()
                    }
                }
            }
        }
    }
}

fn structural_tol(eigs: &[f64]) -> f64 {
    let max = eigs.iter().cloned().fold(0.0f64, f64::max);
    linalg::RANK_TOL * max.max(f64::MIN_POSITIVE)
}

/// The assembled penalized system: stacked response, concatenated design,
/// zero-padded penalties and the smoothing-parameter index map.
#[derive(Debug, Clone)]
pub struct DesignSystem {
    pub y: DVector<f64>,
    pub design: DMatrix<f64>,
    pub penalties: Vec<GlobalPenalty>,
    pub term_slices: Vec<Range<usize>>,
    pub term_labels: Vec<String>,
    /// Dimension M_p of the nullspace of Σ_v λ_v P̃_v (constant over λ > 0).
    pub total_nullspace_dim: usize,
    ata: DMatrix<f64>,
    aty: DVector<f64>,
    pdets: Vec<TermPdet>,
}

impl DesignSystem {
    pub fn n_obs(&self) -> usize {
        self.design.nrows()
    }

    pub fn n_coefficients(&self) -> usize {
        self.design.ncols()
    }

    /// Number of smoothing parameters V.
    pub fn n_smoothing(&self) -> usize {
        self.penalties.len()
    }

    pub fn padded_penalty(&self, v: usize) -> DMatrix<f64> {
        self.penalties[v].padded(self.n_coefficients())
    }

    /// Σ_v λ_v P̃_v as a dense K×K matrix.
    pub fn penalty_sum(&self, lambda: &[f64]) -> DMatrix<f64> {
        let k = self.n_coefficients();
        let mut s = DMatrix::zeros(k, k);
        for gp in &self.penalties {
            let l = lambda[gp.v];
            let w = gp.block.matrix.nrows();
            for i in 0..w {
                for j in 0..w {
                    s[(gp.slice.start + i, gp.slice.start + j)] += l * gp.block.matrix[(i, j)];
                }
            }
        }
        s
    }

    fn normal_matrix(&self, lambda: &[f64]) -> DMatrix<f64> {
        let mut h = self.ata.clone();
        for gp in &self.penalties {
            let l = lambda[gp.v];
            let w = gp.block.matrix.nrows();
            for i in 0..w {
                for j in 0..w {
                    h[(gp.slice.start + i, gp.slice.start + j)] += l * gp.block.matrix[(i, j)];
                }
            }
        }
        h
    }

    fn penalty_quadratic(&self, theta: &DVector<f64>, lambda: &[f64]) -> f64 {
        let mut acc = 0.0;
        for gp in &self.penalties {
            let slice = theta.rows(gp.slice.start, gp.slice.len());
            let q = (slice.transpose() * &gp.block.matrix * slice)[(0, 0)];
            acc += lambda[gp.v] * q;
        }
        acc
    }

    fn log_pdet_penalty(&self, lambda: &[f64]) -> f64 {
        self.pdets.iter().map(|p| p.log_pdet(lambda)).sum()
    }
}

/// Concatenate term designs, assign coefficient slices and global smoothing
/// indices, and precompute the REML machinery. Term design blocks are moved
/// into the global design; per-term rows are available as column slices.
pub fn assemble_model(terms: &mut [TensorTerm], y: DVector<f64>) -> Result<DesignSystem> {
    if terms.is_empty() {
        return Err(FammError::InvalidValue {
            context: "no terms".into(),
        });
    }
    let n = terms[0].design.nrows();
    if y.len() != n {
        return Err(FammError::DimensionMismatch {
            context: format!("response has {} rows, design has {n}", y.len()),
        });
    }
    for t in terms.iter() {
        if t.design.nrows() != n {
            return Err(FammError::DimensionMismatch {
                context: format!("term `{}` has {} rows, expected {n}", t.label, t.design.nrows()),
            });
        }
    }
    let k_total: usize = terms.iter().map(|t| t.width()).sum();
    let mut design = DMatrix::zeros(n, k_total);
    let mut term_slices = Vec::with_capacity(terms.len());
    let mut term_labels = Vec::with_capacity(terms.len());
    let mut penalties = Vec::new();
    let mut pdets = Vec::with_capacity(terms.len());
    let mut offset = 0;
    let mut v = 0;
    for (ti, term) in terms.iter_mut().enumerate() {
        let w = term.width();
        let slice = offset..offset + w;
        design.view_mut((0, offset), (n, w)).copy_from(&term.design);
        term.design = DMatrix::zeros(0, 0);
        term.coef_slice = slice.clone();
        let mut local_vs = Vec::new();
        for block in &term.penalties {
            let mut block = block.clone();
            if block.scale != 1.0 {
                block.matrix *= block.scale;
            }
            penalties.push(GlobalPenalty {
                term_index: ti,
                slice: slice.clone(),
                block,
                v,
            });
            local_vs.push(v);
            v += 1;
        }
        pdets.push(build_term_pdet(term, &local_vs, w));
        term_slices.push(slice);
        term_labels.push(term.label.clone());
        offset += w;
    }
    let total_nullspace_dim = pdets.iter().map(|p| p.nullity()).sum();
    let ata = linalg::ata(&design);
    let aty = linalg::atb(&design, &y);
    Ok(DesignSystem {
        y,
        design,
        penalties,
        term_slices,
        term_labels,
        total_nullspace_dim,
        ata,
        aty,
        pdets,
    })
}

/// Build a system directly from a design, response and (slice, penalty) blocks;
/// blocks sharing a slice belong to one term. Used by oracles and internal
/// smoothers that do not go through the term builders.
pub fn assemble_raw(
    design: DMatrix<f64>,
    y: DVector<f64>,
    blocks: Vec<(Range<usize>, DMatrix<f64>)>,
) -> Result<DesignSystem> {
    let k_total = design.ncols();
    if y.len() != design.nrows() {
        return Err(FammError::DimensionMismatch {
            context: "response length".into(),
        });
    }
    // Group blocks by slice, preserving order of first appearance.
    let mut slices: Vec<Range<usize>> = Vec::new();
    for (s, m) in &blocks {
        if s.end > k_total || m.nrows() != s.len() || m.ncols() != s.len() {
            return Err(FammError::DimensionMismatch {
                context: "penalty block shape".into(),
            });
        }
        if !slices.iter().any(|x| x == s) {
            slices.push(s.clone());
        }
    }
    // Cover unpenalized columns with gap terms.
    let mut covered: Vec<(usize, usize)> = slices.iter().map(|s| (s.start, s.end)).collect();
    covered.sort_unstable();
    let mut term_slices = Vec::new();
    let mut cursor = 0;
    for (s, e) in covered {
        if s > cursor {
            term_slices.push(cursor..s);
        }
        term_slices.push(s..e);
        cursor = e;
    }
    if cursor < k_total {
        term_slices.push(cursor..k_total);
    }
    let mut penalties = Vec::new();
    let mut pdets = Vec::new();
    let mut v = 0;
    for (ti, slice) in term_slices.iter().enumerate() {
        let mut local = Vec::new();
        for (s, m) in &blocks {
            if s == slice {
                penalties.push(GlobalPenalty {
                    term_index: ti,
                    slice: slice.clone(),
                    block: PenaltyBlock {
                        matrix: m.clone(),
                        smoothing_index: local.len(),
                        scale: 1.0,
                        structure: PenaltyStructure::General,
                    },
                    v,
                });
                local.push((v, m.clone()));
                v += 1;
            }
        }
        pdets.push(general_pdet(&local, slice.len()));
    }
    let total_nullspace_dim = pdets.iter().map(|p| p.nullity()).sum();
    let ata = linalg::ata(&design);
    let aty = linalg::atb(&design, &y);
    Ok(DesignSystem {
        term_labels: term_slices.iter().map(|s| format!("block{}..{}", s.start, s.end)).collect(),
        y,
        design,
        penalties,
        term_slices,
        total_nullspace_dim,
        ata,
        aty,
        pdets,
    })
}

fn build_term_pdet(term: &TensorTerm, local_vs: &[usize], width: usize) -> TermPdet {
    if term.penalties.is_empty() {
        return TermPdet::Unpenalized { width };
    }
    // Try the Kronecker fast path: at most one left and one right block.
    let mut left: Option<(usize, &DMatrix<f64>, usize)> = None;
    let mut right: Option<(usize, usize, &DMatrix<f64>)> = None;
    let mut kron_ok = true;
    for (bi, block) in term.penalties.iter().enumerate() {
        match &block.structure {
            PenaltyStructure::KroneckerLeft { marginal, right_dim } if left.is_none() => {
                left = Some((local_vs[bi], marginal, *right_dim));
            }
            PenaltyStructure::KroneckerRight { left_dim, marginal } if right.is_none() => {
                right = Some((local_vs[bi], *left_dim, marginal));
            }
            _ => kron_ok = false,
        }
    }
    if kron_ok && (left.is_some() || right.is_some()) {
        let (kx, kt) = match (&left, &right) {
            (Some((_, m, rd)), _) => (m.nrows(), *rd),
            (None, Some((_, ld, m))) => (*ld, m.nrows()),
            (None, None) => unreachable!(),
        };
        let dims_consistent = kx * kt == width
            && right.as_ref().map(|(_, ld, _)| *ld == kx).unwrap_or(true)
            && left.as_ref().map(|(_, _, rd)| *rd == kt).unwrap_or(true);
        if dims_consistent {
            let left_eigs = match &left {
                Some((_, m, _)) => linalg::sym_eigen_desc(m).0,
                None => vec![0.0; kx],
            };
            let right_eigs = match &right {
                Some((_, _, m)) => linalg::sym_eigen_desc(m).0,
                None => vec![0.0; kt],
            };
            let tol_a = structural_tol(&left_eigs);
            let tol_b = structural_tol(&right_eigs);
            let nullity = left_eigs
                .iter()
                .map(|&a| {
                    right_eigs
                        .iter()
                        .filter(|&&b| a <= tol_a && b <= tol_b)
                        .count()
                })
                .sum();
            return TermPdet::Kron {
                left_eigs,
                right_eigs,
                v_left: left.map(|(v, _, _)| v),
                v_right: right.map(|(v, _, _)| v),
                nullity,
            };
        }
    }
    let local: Vec<(usize, DMatrix<f64>)> = term
        .penalties
        .iter()
        .enumerate()
        .map(|(bi, b)| (local_vs[bi], b.matrix.clone()))
        .collect();
    general_pdet(&local, width)
}

fn general_pdet(blocks: &[(usize, DMatrix<f64>)], width: usize) -> TermPdet {
    if blocks.is_empty() {
        return TermPdet::Unpenalized { width };
    }
    let mut sum = DMatrix::zeros(width, width);
    for (_, m) in blocks {
        sum += m;
    }
    let (vals, vecs) = linalg::sym_eigen_desc(&sum);
    let max = vals.first().copied().unwrap_or(0.0).max(0.0);
    let tol = linalg::RANK_TOL * max.max(f64::MIN_POSITIVE);
    let rank = vals.iter().filter(|&&v| v > tol).count();
    let basis = vecs.columns(0, rank).into_owned();
    let projected = blocks
        .iter()
        .map(|(v, m)| (*v, basis.transpose() * m * &basis))
        .collect();
    TermPdet::General {
        projected,
        rank,
        width,
    }
}

/// Result of a penalized least-squares solve at fixed λ.
#[derive(Debug, Clone)]
pub struct PenalizedFit {
    pub theta_hat: DVector<f64>,
    pub hat_diagonal: DVector<f64>,
    pub sigma2_hat: f64,
    pub edf_total: f64,
    pub edf_per_term: Vec<f64>,
    pub rss: f64,
    pub h_inverse: DMatrix<f64>,
    pub null_directions: Vec<DVector<f64>>,
}

/// Minimize ‖y − Φθ‖² + Σ_v λ_v θᵀP̃_vθ. Unpenalized directions that are also
/// unidentified in the design are pinned to zero (minimum-norm policy) and
/// reported. σ̂² = RSS/(N − Σedf) with edf the influence-matrix trace.
pub fn fit_penalized(system: &DesignSystem, lambda: &[f64]) -> Result<PenalizedFit> {
    if lambda.len() != system.n_smoothing() {
        return Err(FammError::DimensionMismatch {
            context: format!(
                "{} smoothing parameters supplied, system has {}",
                lambda.len(),
                system.n_smoothing()
            ),
        });
    }
    if lambda.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
        return Err(FammError::InvalidValue {
            context: "smoothing parameters must be positive and finite".into(),
        });
    }
    let h = system.normal_matrix(lambda);
    let solve = linalg::solve_spd(&h, &system.aty)?;
    let theta = solve.solution;
    let hinv = solve.inverse;
    // edf per term: trace of H⁻¹ΦᵀΦ restricted to each coefficient slice.
    let b = &hinv * &system.ata;
    let mut edf_per_term = Vec::with_capacity(system.term_slices.len());
    for slice in &system.term_slices {
        let mut acc = 0.0;
        for j in slice.clone() {
            acc += b[(j, j)];
        }
        edf_per_term.push(acc);
    }
    let edf_total: f64 = edf_per_term.iter().sum();
    let residual = &system.y - &system.design * &theta;
    let rss = residual.norm_squared();
    let n = system.n_obs() as f64;
    let denom = (n - edf_total).max(1e-8);
    let sigma2_hat = (rss / denom).max(f64::MIN_POSITIVE);
    let hat_diagonal = hat_diagonal(&system.design, &hinv);
    Ok(PenalizedFit {
        theta_hat: theta,
        hat_diagonal,
        sigma2_hat,
        edf_total,
        edf_per_term,
        rss,
        h_inverse: hinv,
        null_directions: solve.null_directions,
    })
}

fn hat_diagonal(design: &DMatrix<f64>, hinv: &DMatrix<f64>) -> DVector<f64> {
    use rayon::prelude::*;
    let (n, k) = design.shape();
    let diag: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut row = vec![0.0; k];
            for j in 0..k {
                row[j] = design[(i, j)];
            }
            let mut acc = 0.0;
            for a in 0..k {
                let ra = row[a];
                if ra == 0.0 {
                    continue;
                }
                let col = hinv.column(a);
                let mut inner = 0.0;
                for b in 0..k {
                    inner += col[b] * row[b];
                }
                acc += ra * inner;
            }
            acc
        })
        .collect();
    DVector::from_vec(diag)
}

/// Negative restricted log-likelihood (up to constants) with σ² profiled out:
/// (N − M_p)·log D_λ + log|ΦᵀΦ + S_λ| − log pdet S_λ, where D_λ is the
/// penalized residual sum of squares and pdet is taken over the range space of
/// S_λ. Finite for all finite log λ.
pub fn reml_criterion(system: &DesignSystem, log_lambda: &[f64]) -> f64 {
    let lambda: Vec<f64> = log_lambda.iter().map(|l| l.exp()).collect();
    let h = system.normal_matrix(&lambda);
    let fast = h.clone().cholesky().filter(linalg::chol_well_conditioned);
    let (theta, log_det_h) = match fast {
        Some(chol) => {
            let theta = chol.solve(&system.aty);
            let ld = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            (theta, ld)
        }
        None => match linalg::solve_spd(&h, &system.aty) {
            Ok(s) => (s.solution, s.log_det),
            Err(_) => return f64::INFINITY,
        },
    };
    let residual = &system.y - &system.design * &theta;
    let d = residual.norm_squared() + system.penalty_quadratic(&theta, &lambda);
    let n_eff = system.n_obs() as f64 - system.total_nullspace_dim as f64;
    n_eff * d.max(1e-290).ln() + log_det_h - system.log_pdet_penalty(&lambda)
}

/// Options for the REML optimizer.
#[derive(Debug, Clone)]
pub struct RemlOptions {
    /// Number of random simplex starts.
    pub multistarts: usize,
    /// Evaluation budget per start.
    pub max_evals: usize,
    pub tol_criterion: f64,
    pub tol_param: f64,
    /// Random starts are drawn uniformly from this log-λ box.
    pub start_box: (f64, f64),
    /// Internal seed; fixed so fits are reproducible.
    pub seed: u64,
}

impl Default for RemlOptions {
    fn default() -> Self {
        Self {
            multistarts: 5,
            max_evals: 500,
            tol_criterion: 1e-7,
            tol_param: 1e-5,
            start_box: (-3.0, 3.0),
            seed: 0x5EED,
        }
    }
}

const LOG_LAMBDA_CLAMP: f64 = 16.0;

/// REML estimate of all hyperparameters plus the final penalized fit.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub theta_hat: DVector<f64>,
    pub lambda: Vec<f64>,
    pub sigma2_eps: f64,
    /// Empirical-Bayes posterior covariance σ̂²(ΦᵀΦ + Σλ̂_vP̃_v)⁻¹.
    pub coef_covariance: DMatrix<f64>,
    /// Effective degrees of freedom per term (assembly order).
    pub edf: Vec<f64>,
    pub edf_total: f64,
    pub reml_value: f64,
    pub converged: bool,
    pub iterations: usize,
    pub hat_diagonal: DVector<f64>,
    pub rss: f64,
}

/// Minimize the REML criterion over log λ with a derivative-free simplex
/// search and random multistarts, then refit at the optimum.
pub fn optimize_reml(system: &DesignSystem, init: Option<&[f64]>, opts: &RemlOptions) -> Result<FittedModel> {
    let v = system.n_smoothing();
    if v == 0 {
        let fit = fit_penalized(system, &[])?;
        let reml_value = reml_criterion(system, &[]);
        let cov = &fit.h_inverse * fit.sigma2_hat;
        return Ok(FittedModel {
            theta_hat: fit.theta_hat,
            lambda: vec![],
            sigma2_eps: fit.sigma2_hat,
            coef_covariance: cov,
            edf: fit.edf_per_term,
            edf_total: fit.edf_total,
            reml_value,
            converged: true,
            iterations: 0,
            hat_diagonal: fit.hat_diagonal,
            rss: fit.rss,
        });
    }
    let clamp = |x: &[f64]| -> Vec<f64> {
        x.iter()
            .map(|&l| l.clamp(-LOG_LAMBDA_CLAMP, LOG_LAMBDA_CLAMP))
            .collect()
    };
    let mut evals = 0usize;
    let mut objective = |x: &[f64]| {
        evals += 1;
        reml_criterion(system, &clamp(x))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut starts: Vec<Vec<f64>> = Vec::new();
    if let Some(x0) = init {
        starts.push(x0.to_vec());
    }
    while starts.len() < opts.multistarts.max(1) {
        starts.push(
            (0..v)
                .map(|_| rng.random_range(opts.start_box.0..opts.start_box.1))
                .collect(),
        );
    }
    let mut best: Option<(Vec<f64>, f64, bool)> = None;
    for start in &starts {
        let (x, f, conv) = nelder_mead(
            &mut objective,
            start,
            1.0,
            opts.max_evals,
            opts.tol_criterion,
            opts.tol_param,
        );
        if best.as_ref().map(|(_, bf, _)| f < *bf).unwrap_or(true) {
            best = Some((x, f, conv));
        }
    }
    let (mut best_x, mut best_f, mut nm_converged) = best.unwrap();
    // Local-minimum check: the criterion must not decrease for ±0.1 moves in
    // each coordinate; re-polish from any improving perturbation.
    let mut local_min = true;
    for _round in 0..3 {
        local_min = true;
        for dim in 0..v {
            for delta in [-0.1, 0.1] {
                let mut probe = best_x.clone();
                probe[dim] += delta;
                let f = objective(&probe);
                if f < best_f - opts.tol_criterion.max(1e-9) * (1.0 + best_f.abs()) {
                    local_min = false;
                    let (x, fx, conv) = nelder_mead(
                        &mut objective,
                        &probe,
                        0.5,
                        opts.max_evals,
                        opts.tol_criterion,
                        opts.tol_param,
                    );
                    if fx < best_f {
                        best_x = x;
                        best_f = fx;
                        nm_converged = conv;
                    }
                }
            }
        }
        if local_min {
            break;
        }
    }
    let best_log = clamp(&best_x);
    let lambda: Vec<f64> = best_log.iter().map(|l| l.exp()).collect();
    let fit = fit_penalized(system, &lambda)?;
    let cov = &fit.h_inverse * fit.sigma2_hat;
    Ok(FittedModel {
        theta_hat: fit.theta_hat,
        lambda,
        sigma2_eps: fit.sigma2_hat,
        coef_covariance: cov,
        edf: fit.edf_per_term,
        edf_total: fit.edf_total,
        reml_value: best_f,
        converged: nm_converged && local_min,
        iterations: evals,
        hat_diagonal: fit.hat_diagonal,
        rss: fit.rss,
    })
}

/// Standard Nelder-Mead on R^dim. Returns (best point, best value, converged).
fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    f: &mut F,
    start: &[f64],
    step: f64,
    max_evals: usize,
    tol_f: f64,
    tol_x: f64,
) -> (Vec<f64>, f64, bool) {
    let dim = start.len();
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    simplex.push((start.to_vec(), f(start)));
    for i in 0..dim {
        let mut p = start.to_vec();
        p[i] += step;
        let fp = f(&p);
        simplex.push((p, fp));
    }
    let mut evals = dim + 1;
    let mut converged = false;
    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
        let f_spread = simplex[dim].1 - simplex[0].1;
        let x_spread = (0..dim)
            .map(|j| {
                let lo = simplex.iter().map(|(p, _)| p[j]).fold(f64::INFINITY, f64::min);
                let hi = simplex.iter().map(|(p, _)| p[j]).fold(f64::NEG_INFINITY, f64::max);
                hi - lo
            })
            .fold(0.0f64, f64::max);
        if f_spread.abs() < tol_f * (1.0 + simplex[0].1.abs()) && x_spread < tol_x {
            converged = true;
            break;
        }
        let centroid: Vec<f64> = (0..dim)
            .map(|j| simplex[..dim].iter().map(|(p, _)| p[j]).sum::<f64>() / dim as f64)
            .collect();
        let worst = simplex[dim].clone();
        let reflect: Vec<f64> = (0..dim)
            .map(|j| centroid[j] + alpha * (centroid[j] - worst.0[j]))
            .collect();
        let f_reflect = f(&reflect);
        evals += 1;
        if f_reflect < simplex[0].1 {
            let expand: Vec<f64> = (0..dim)
                .map(|j| centroid[j] + gamma * (reflect[j] - centroid[j]))
                .collect();
            let f_expand = f(&expand);
            evals += 1;
            simplex[dim] = if f_expand < f_reflect {
                (expand, f_expand)
            } else {
                (reflect, f_reflect)
            };
        } else if f_reflect < simplex[dim - 1].1 {
            simplex[dim] = (reflect, f_reflect);
        } else {
            let contract: Vec<f64> = (0..dim)
                .map(|j| centroid[j] + rho * (worst.0[j] - centroid[j]))
                .collect();
            let f_contract = f(&contract);
            evals += 1;
            if f_contract < worst.1 {
                simplex[dim] = (contract, f_contract);
            } else {
                let best = simplex[0].0.clone();
                for entry in simplex.iter_mut().skip(1) {
                    let p: Vec<f64> = (0..dim)
                        .map(|j| best[j] + sigma * (entry.0[j] - best[j]))
                        .collect();
                    entry.1 = f(&p);
                    entry.0 = p;
                    evals += 1;
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
    (simplex[0].0.clone(), simplex[0].1, converged)
}

/// Constraint policy and FPC options for the fit pipeline.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub reml: RemlOptions,
    /// Master switch for sum-to-zero-per-t absorption.
    pub apply_constraints: bool,
    /// Also constrain random-effect terms (off by default).
    pub constrain_random_effects: bool,
    /// Eigenvalue-share threshold for FPC truncation.
    pub fpc_threshold: f64,
    /// Fixed number of FPCs, overriding the threshold rule.
    pub fpc_k_override: Option<usize>,
    /// Passes of the FPC random-intercept procedure.
    pub fpc_repeats: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            reml: RemlOptions::default(),
            apply_constraints: true,
            constrain_random_effects: false,
            fpc_threshold: 0.995,
            fpc_k_override: None,
            fpc_repeats: 1,
        }
    }
}

/// A complete fitted model: the centered dataset, resolved terms, assembled
/// system and REML fit, plus any FPC analyses used to build terms.
#[derive(Debug, Clone)]
pub struct ModelFit {
    pub dataset: FunctionalDataset,
    pub terms: Vec<TensorTerm>,
    pub system: DesignSystem,
    pub fitted: FittedModel,
    /// FPCA results backing FPC-based covariate terms, keyed by term label.
    pub ffpc_fpca: HashMap<String, FpcaResult>,
    /// FPCA of the random-intercept covariance from the iterative procedure.
    pub random_intercept_fpca: Option<FpcaResult>,
}

impl ModelFit {
    pub fn term_index(&self, label: &str) -> Result<usize> {
        self.system
            .term_labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| FammError::UnknownTerm { label: label.into() })
    }
}

fn truncation_rule(options: &FitOptions) -> TruncationRule {
    match options.fpc_k_override {
        Some(k) => TruncationRule::Fixed(k),
        None => TruncationRule::Threshold(options.fpc_threshold),
    }
}

/// Fit a model described by term specs: center functional covariates, run any
/// FPC preprocessing, build and constrain terms, assemble and optimize.
/// Specs containing an `fpc_random_intercept` term are routed through the
/// iterative procedure.
pub fn fit_model(ds: &FunctionalDataset, specs: &[TermSpec], options: &FitOptions) -> Result<ModelFit> {
    if specs
        .iter()
        .any(|s| matches!(s.kind, TermKind::FpcRandomIntercept { .. }))
    {
        return fit_fpc_random_intercept_loop(ds, specs, options);
    }
    fit_model_inner(ds, specs, options, &TermAux::default(), None)
}

fn fit_model_inner(
    ds: &FunctionalDataset,
    specs: &[TermSpec],
    options: &FitOptions,
    extra_aux: &TermAux,
    random_intercept_fpca: Option<FpcaResult>,
) -> Result<ModelFit> {
    let ds = ds.clone().center_all_functionals();
    let mut aux = extra_aux.clone();
    let mut ffpc_fpca = HashMap::new();
    for spec in specs {
        let label = spec.label_or_default();
        match &spec.kind {
            TermKind::FfpcLinear { x } | TermKind::FfpcSmooth { x } => {
                if aux.scores.contains_key(&label) {
                    continue;
                }
                let cov = ds.functional(x)?;
                let res = fpca::fpca_of_matrix(
                    &cov.values,
                    &cov.s_grid,
                    truncation_rule(options),
                    false,
                )?;
                aux.scores.insert(label.clone(), res.scores.clone());
                ffpc_fpca.insert(label, res);
            }
            _ => {}
        }
    }
    let mut terms = Vec::with_capacity(specs.len());
    for spec in specs {
        let term = build_term(&ds, spec, &aux)?;
        let constrain = options.apply_constraints
            && spec.wants_constraint()
            && (options.constrain_random_effects
                || !matches!(
                    spec.kind,
                    TermKind::RandomIntercept { .. }
                        | TermKind::RandomSlope { .. }
                        | TermKind::FpcRandomIntercept { .. }
                ));
        terms.push(if constrain {
            absorb_sum_to_zero_per_t(term, &ds)?
        } else {
            term
        });
    }
    let y = ds.stacked_y();
    let system = assemble_model(&mut terms, y)?;
    let fitted = optimize_reml(&system, None, &options.reml)?;
    Ok(ModelFit {
        dataset: ds,
        terms,
        system,
        fitted,
        ffpc_fpca,
        random_intercept_fpca,
    })
}

/// The iterative FPC random-intercept procedure: (1) fit without the random
/// intercept to obtain working residuals, (2) average residual curves per
/// group, (3) estimate the random-intercept covariance by smoothing the group
/// mean cross-products without the diagonal, eigen-truncate, rebuild and refit.
/// Falls back to the step-1 fit (with a warning) when no positive eigenvalues
/// survive truncation.
pub fn fit_fpc_random_intercept_loop(
    ds: &FunctionalDataset,
    specs: &[TermSpec],
    options: &FitOptions,
) -> Result<ModelFit> {
    let grid = ds.common_grid().ok_or(FammError::GridMismatch)?;
    let fpc_specs: Vec<&TermSpec> = specs
        .iter()
        .filter(|s| matches!(s.kind, TermKind::FpcRandomIntercept { .. }))
        .collect();
    if fpc_specs.len() != 1 {
        return Err(FammError::ConflictError {
            message: format!(
                "the FPC random-intercept procedure needs exactly one fpc_random_intercept term, found {}",
                fpc_specs.len()
            ),
        });
    }
    let fpc_spec = fpc_specs[0];
    let g_name = match &fpc_spec.kind {
        TermKind::FpcRandomIntercept { g } => g.clone(),
        _ => unreachable!(),
    };
    let base_specs: Vec<TermSpec> = specs
        .iter()
        .filter(|s| !matches!(s.kind, TermKind::FpcRandomIntercept { .. }))
        .cloned()
        .collect();
    let mut current = fit_model_inner(ds, &base_specs, options, &TermAux::default(), None)?;
    for _pass in 0..options.fpc_repeats.max(1) {
        let residuals = residual_matrix(&current, &grid)?;
        let g = current.dataset.grouping(&g_name)?.clone();
        let m = g.m;
        let t_len = grid.len();
        // Group-level means of residual curves: Ē = ΔᵀE.
        let mut counts = vec![0.0; m];
        for &lev in &g.levels {
            counts[lev - 1] += 1.0;
        }
        let mut ebar = DMatrix::zeros(m, t_len);
        for (i, &lev) in g.levels.iter().enumerate() {
            for l in 0..t_len {
                ebar[(lev - 1, l)] += residuals[(i, l)] / counts[lev - 1];
            }
        }
        let (smoothed, _noise) = match fpca::estimate_covariance(&ebar, &grid) {
            Ok(r) => r,
            Err(_) => {
                eprintln!("warning: random-intercept covariance estimation failed; keeping the independence fit");
                return Ok(current);
            }
        };
        let eig = match fpca::eigen_truncate(&smoothed, &grid, truncation_rule(options)) {
            Ok(e) => e,
            Err(_) => {
                eprintln!("warning: no random structure found; keeping the independence fit");
                return Ok(current);
            }
        };
        let scores = {
            let res = FpcaResult {
                grid: grid.clone(),
                eigenfunctions: eig.0.clone(),
                eigenvalues: eig.1.clone(),
                scores: DMatrix::zeros(0, 0),
                noise_variance: 0.0,
                smoothed_covariance: smoothed.clone(),
                mean_curve: None,
            };
            fpca::estimate_scores(&ebar, &res)?
        };
        let fpca_result = FpcaResult {
            grid: grid.clone(),
            eigenfunctions: eig.0.clone(),
            eigenvalues: eig.1.clone(),
            scores,
            noise_variance: 0.0,
            smoothed_covariance: smoothed,
            mean_curve: None,
        };
        let mut aux = TermAux::default();
        aux.fpc_bases.insert(
            fpc_spec.label_or_default(),
            FpcBasisInput {
                grid: grid.clone(),
                eigenfunctions: eig.0,
                eigenvalues: eig.1,
            },
        );
        let mut full_specs = base_specs.clone();
        full_specs.push(fpc_spec.clone());
        current = fit_model_inner(ds, &full_specs, options, &aux, Some(fpca_result))?;
    }
    Ok(current)
}

/// Residuals arranged as an n×T matrix on a common grid.
fn residual_matrix(fit: &ModelFit, grid: &[f64]) -> Result<DMatrix<f64>> {
    let n = fit.dataset.n_curves();
    let t_len = grid.len();
    let fitted = &fit.system.design * &fit.fitted.theta_hat;
    let mut out = DMatrix::zeros(n, t_len);
    let mut r = 0;
    for (i, curve) in fit.dataset.curves.iter().enumerate() {
        if curve.len() != t_len {
            return Err(FammError::GridMismatch);
        }
        for l in 0..t_len {
            out[(i, l)] = curve.y[l] - fitted[r];
            r += 1;
        }
    }
    Ok(out)
}


// nalgebra's LU solve needs an owned RHS; tiny helper for the test above.
#[cfg(test)]
trait SolveWorkaround {
    fn solve_mut_workaround(&self, rhs: &DMatrix<f64>) -> DMatrix<f64>;
}

#[cfg(test)]
impl SolveWorkaround for nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn> {
    fn solve_mut_workaround(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.solve(rhs).expect("solvable")
    }
}
