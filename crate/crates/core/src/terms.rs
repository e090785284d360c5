//! Construction of the per-term design blocks Φ_r and their marginal penalties,
//! in stacked row order matching the response vector (curves by id, t increasing
//! within curve). Coefficients are laid out x-major: index = k_x·K_t + k_t.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::basis::{
    kronecker_sum_penalty, trapezoid_weights, windowed_trapezoid_weights, MarginalBasis,
    PenaltyBlock, PenaltyStructure,
};
use crate::constraints::ConstraintTransform;
use crate::data::FunctionalDataset;
use crate::error::{FammError, Result};

/// Integration-limit rule for function-on-function terms.
#[derive(Clone, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IntegrationLimits {
    #[default]
    Full,
    /// l_i(t) = min(s), u_i(t) = t; assumes s and t share a domain.
    Historical,
    /// Per-(curve id, t) window, returned as (lower, upper).
    #[serde(skip)]
    Custom(Arc<dyn Fn(u64, f64) -> (f64, f64) + Send + Sync>),
}

impl fmt::Debug for IntegrationLimits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Full => write!(f, "Full"),
            Self::Historical => write!(f, "Historical"),
            Self::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

/// Which additive term to build.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TermKind {
    InterceptConst,
    InterceptT,
    ScalarLinearConst { z: String },
    ScalarLinearT { z: String },
    ScalarSmooth { z: String },
    ScalarSmoothT { z: String },
    VaryingCoefT { z1: String, z2: String },
    FunctionalLinear {
        x: String,
        #[serde(default)]
        limits: IntegrationLimits,
    },
    FunctionalSmooth { x: String },
    FfpcLinear { x: String },
    FfpcSmooth { x: String },
    RandomIntercept { g: String },
    RandomSlope { g: String, z: String },
    FpcRandomIntercept { g: String },
}

/// Declarative description of one term; unset basis settings fall back to the
/// defaults (K_t = 20 with a first-order penalty for the functional intercept,
/// five marginal functions per tensor direction, first-order penalties in t and
/// s, second order in scalar-covariate directions).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermSpec {
    #[serde(default)]
    pub label: String,
    #[serde(flatten)]
    pub kind: TermKind,
    pub k_x: Option<usize>,
    pub k_t: Option<usize>,
    #[serde(default = "default_degree")]
    pub degree: usize,
    pub penalty_order_x: Option<usize>,
    pub penalty_order_t: Option<usize>,
    /// Optional 0/1 indicator column multiplying the covariate marginal,
    /// turning the effect into a group-specific interaction.
    #[serde(default)]
    pub by: Option<String>,
    /// Precision matrix over grouping levels for random-effect terms.
    #[serde(skip)]
    pub group_precision: Option<DMatrix<f64>>,
    /// Override the default sum-to-zero-per-t constraint policy.
    #[serde(default)]
    pub constrained: Option<bool>,
}

fn default_degree() -> usize {
    3
}

impl TermSpec {
    pub fn new(label: impl Into<String>, kind: TermKind) -> Self {
        Self {
            label: label.into(),
            kind,
            k_x: None,
            k_t: None,
            degree: 3,
            penalty_order_x: None,
            penalty_order_t: None,
            by: None,
            group_precision: None,
            constrained: None,
        }
    }

    pub fn label_or_default(&self) -> String {
        if !self.label.is_empty() {
            return self.label.clone();
        }
        match &self.kind {
            TermKind::InterceptConst => "intercept".into(),
            TermKind::InterceptT => "intercept_t".into(),
            TermKind::ScalarLinearConst { z } => format!("linear({z})"),
            TermKind::ScalarLinearT { z } => format!("linear_t({z})"),
            TermKind::ScalarSmooth { z } => format!("smooth({z})"),
            TermKind::ScalarSmoothT { z } => format!("smooth_t({z})"),
            TermKind::VaryingCoefT { z1, z2 } => format!("varying({z1},{z2})"),
            TermKind::FunctionalLinear { x, .. } => format!("ff({x})"),
            TermKind::FunctionalSmooth { x } => format!("sff({x})"),
            TermKind::FfpcLinear { x } => format!("ffpc({x})"),
            TermKind::FfpcSmooth { x } => format!("sffpc({x})"),
            TermKind::RandomIntercept { g } => format!("ri({g})"),
            TermKind::RandomSlope { g, z } => format!("rs({g},{z})"),
            TermKind::FpcRandomIntercept { g } => format!("pcre({g})"),
        }
    }

    /// Default constraint policy: sum-to-zero per t is absorbed into
    /// fixed-effect smooth terms that depend on covariates; random-effect and
    /// parametric terms opt in via `constrained = true`.
    pub fn constrained_by_default(&self) -> bool {
        matches!(
            self.kind,
            TermKind::ScalarSmooth { .. }
                | TermKind::ScalarSmoothT { .. }
                | TermKind::VaryingCoefT { .. }
                | TermKind::FunctionalLinear { .. }
                | TermKind::FunctionalSmooth { .. }
                | TermKind::FfpcLinear { .. }
                | TermKind::FfpcSmooth { .. }
        )
    }

    pub fn wants_constraint(&self) -> bool {
        self.constrained.unwrap_or_else(|| self.constrained_by_default())
    }
}

/// Marginal design in the covariate direction, with enough metadata to rebuild
/// rows for new data and to evaluate the coefficient function on grids.
#[derive(Debug, Clone)]
pub enum XPart {
    Constant,
    ScalarLinear {
        name: String,
    },
    ScalarSmooth {
        name: String,
        basis: MarginalBasis,
        multiplier: Option<String>,
    },
    FunctionalLinear {
        name: String,
        s_basis: MarginalBasis,
        s_grid: Vec<f64>,
        limits: IntegrationLimits,
    },
    FunctionalSmooth {
        name: String,
        x_basis: MarginalBasis,
        s_basis: MarginalBasis,
        s_grid: Vec<f64>,
    },
    FfpcLinear {
        covariate: String,
        scores: DMatrix<f64>,
    },
    FfpcSmooth {
        covariate: String,
        scores: DMatrix<f64>,
        score_basis: MarginalBasis,
    },
    RandomEffect {
        grouping: String,
        m: usize,
        slope: Option<String>,
    },
    /// Direct design rows (one per curve); used by internal smoothers.
    Custom {
        rows: DMatrix<f64>,
    },
}

/// Marginal design in the t direction.
#[derive(Debug, Clone)]
pub enum TPart {
    Constant,
    Basis(MarginalBasis),
    /// FPC eigenfunctions evaluated on a fixed response grid.
    Eigenfunctions { grid: Vec<f64>, values: DMatrix<f64> },
}

impl TPart {
    pub fn k(&self) -> usize {
        match self {
            TPart::Constant => 1,
            TPart::Basis(b) => b.k,
            TPart::Eigenfunctions { values, .. } => values.ncols(),
        }
    }

    pub fn eval_row(&self, t: f64) -> Result<RowDVector<f64>> {
        match self {
            TPart::Constant => Ok(RowDVector::from_element(1, 1.0)),
            TPart::Basis(b) => Ok(b.evaluate(&[t])?.row(0).into_owned()),
            TPart::Eigenfunctions { grid, values } => {
                let idx = grid
                    .iter()
                    .position(|&g| (g - t).abs() < 1e-9)
                    .ok_or(FammError::GridMismatch)?;
                Ok(values.row(idx).into_owned())
            }
        }
    }
}

/// One additive term: final design block, its penalties, and the metadata
/// needed to re-evaluate it on new data or on coefficient grids.
#[derive(Debug, Clone)]
pub struct TensorTerm {
    pub label: String,
    /// Stacked design, post-constraint when a transform is present.
    pub design: DMatrix<f64>,
    /// Local penalty blocks (post-constraint when a transform is present).
    pub penalties: Vec<PenaltyBlock>,
    pub constraint_transform: Option<ConstraintTransform>,
    /// Index range into the global coefficient vector; set at assembly.
    pub coef_slice: std::ops::Range<usize>,
    pub x_part: XPart,
    pub t_part: TPart,
    /// Coefficient count before constraint absorption (K_x · K_t).
    pub pre_width: usize,
    /// Optional 0/1 indicator column multiplying the covariate marginal.
    pub by_name: Option<String>,
}

impl TensorTerm {
    pub fn width(&self) -> usize {
        self.design.ncols()
    }

    pub fn k_t(&self) -> usize {
        self.t_part.k()
    }

    pub fn k_x(&self) -> usize {
        self.pre_width / self.t_part.k()
    }

    pub fn varies_over_t(&self) -> bool {
        !matches!(self.t_part, TPart::Constant)
    }

    /// True when the covariate marginal row does not depend on t.
    pub fn is_separable(&self) -> bool {
        match &self.x_part {
            XPart::FunctionalLinear { limits, .. } => matches!(limits, IntegrationLimits::Full),
            _ => true,
        }
    }

    /// Pre-constraint covariate-marginal row for one curve at index t
    /// (t only matters for limit-dependent functional terms).
    pub fn x_row(&self, ds: &FunctionalDataset, i: usize, t: f64) -> Result<RowDVector<f64>> {
        match &self.x_part {
            XPart::Constant => Ok(RowDVector::from_element(1, 1.0)),
            XPart::ScalarLinear { name } => {
                Ok(RowDVector::from_element(1, ds.scalar(name)?[i]))
            }
            XPart::ScalarSmooth {
                name,
                basis,
                multiplier,
            } => {
                let z = ds.scalar(name)?[i];
                let mut row = basis.evaluate(&[z])?.row(0).into_owned();
                if let Some(mult) = multiplier {
                    row *= ds.scalar(mult)?[i];
                }
                Ok(row)
            }
            XPart::FunctionalLinear {
                name,
                s_basis,
                s_grid,
                limits,
            } => {
                let x = ds.functional(name)?;
                let w = integration_weights(s_grid, limits, ds.curves[i].curve_id, t)?;
                let phi_s = s_basis.evaluate(s_grid)?;
                let mut row = RowDVector::zeros(s_basis.k);
                for h in 0..s_grid.len() {
                    let c = x.values[(i, h)] * w[h];
                    if c != 0.0 {
                        row += phi_s.row(h) * c;
                    }
                }
                Ok(row)
            }
            XPart::FunctionalSmooth {
                name,
                x_basis,
                s_basis,
                s_grid,
            } => {
                let x = ds.functional(name)?;
                let w = trapezoid_weights(s_grid)?;
                let phi_s = s_basis.evaluate(s_grid)?;
                let mut row = RowDVector::zeros(x_basis.k * s_basis.k);
                for h in 0..s_grid.len() {
                    let bx = x_basis.evaluate(&[x.values[(i, h)]])?;
                    let bs = phi_s.row(h);
                    for j in 0..x_basis.k {
                        for l in 0..s_basis.k {
                            row[j * s_basis.k + l] += w[h] * bx[(0, j)] * bs[l];
                        }
                    }
                }
                Ok(row)
            }
            XPart::FfpcLinear { scores, .. } => Ok(scores.row(i).into_owned()),
            XPart::FfpcSmooth {
                scores, score_basis, ..
            } => {
                let kp = scores.ncols();
                let a = score_basis.k;
                let mut row = RowDVector::zeros(kp * a);
                for k in 0..kp {
                    let b = score_basis.evaluate(&[scores[(i, k)]])?;
                    for j in 0..a {
                        row[k * a + j] = b[(0, j)];
                    }
                }
                Ok(row)
            }
            XPart::RandomEffect {
                grouping, m, slope, ..
            } => {
                let g = ds.grouping(grouping)?;
                let mut row = RowDVector::zeros(*m);
                let mut v = 1.0;
                if let Some(z) = slope {
                    v = ds.scalar(z)?[i];
                }
                row[g.levels[i] - 1] = v;
                Ok(row)
            }
            XPart::Custom { rows } => Ok(rows.row(i).into_owned()),
        }
    }

    /// Pre-constraint design row for observation (curve i, t).
    pub fn raw_design_row(&self, ds: &FunctionalDataset, i: usize, t: f64) -> Result<RowDVector<f64>> {
        let x = self.x_row(ds, i, t)?;
        let tr = self.t_part.eval_row(t)?;
        let mut by = 1.0;
        if let Some(b) = self.by_column() {
            by = ds.scalar(&b)?[i];
        }
        let kt = tr.len();
        let mut out = RowDVector::zeros(x.len() * kt);
        for (j, &xv) in x.iter().enumerate() {
            for (l, &tv) in tr.iter().enumerate() {
                out[j * kt + l] = by * xv * tv;
            }
        }
        Ok(out)
    }

    /// Final design row (constraint transform applied when present).
    pub fn design_row(&self, ds: &FunctionalDataset, i: usize, t: f64) -> Result<RowDVector<f64>> {
        let raw = self.raw_design_row(ds, i, t)?;
        match &self.constraint_transform {
            Some(ct) => Ok(raw * &ct.z),
            None => Ok(raw),
        }
    }

    fn by_column(&self) -> Option<String> {
        self.by_name.clone()
    }

    /// Per-observation contribution of this term for a coefficient sub-vector.
    pub fn contribution(&self, theta_slice: &DVector<f64>) -> DVector<f64> {
        &self.design * theta_slice
    }
}

// `by_name` lives outside the enums so every kind supports it uniformly.
#[derive(Debug, Clone)]
pub struct TensorTermParts {
    pub label: String,
    pub x_part: XPart,
    pub t_part: TPart,
    pub by_name: Option<String>,
    pub penalties: Vec<PenaltyBlock>,
}

impl TensorTerm {
    fn from_parts(ds: &FunctionalDataset, parts: TensorTermParts) -> Result<Self> {
        let mut term = TensorTerm {
            label: parts.label,
            design: DMatrix::zeros(0, 0),
            penalties: parts.penalties,
            constraint_transform: None,
            coef_slice: 0..0,
            x_part: parts.x_part,
            t_part: parts.t_part,
            pre_width: 0,
            by_name: parts.by_name,
        };
        term.pre_width = term_pre_width(&term);
        term.design = build_stacked_design(ds, &term)?;
        for p in &term.penalties {
            if p.dim() != term.pre_width {
                return Err(FammError::DimensionMismatch {
                    context: format!(
                        "penalty block is {} but term `{}` has {} coefficients",
                        p.dim(),
                        term.label,
                        term.pre_width
                    ),
                });
            }
        }
        Ok(term)
    }
}

fn term_pre_width(term: &TensorTerm) -> usize {
    let kx = match &term.x_part {
        XPart::Constant | XPart::ScalarLinear { .. } => 1,
        XPart::ScalarSmooth { basis, .. } => basis.k,
        XPart::FunctionalLinear { s_basis, .. } => s_basis.k,
        XPart::FunctionalSmooth {
            x_basis, s_basis, ..
        } => x_basis.k * s_basis.k,
        XPart::FfpcLinear { scores, .. } => scores.ncols(),
        XPart::FfpcSmooth {
            scores, score_basis, ..
        } => scores.ncols() * score_basis.k,
        XPart::RandomEffect { m, .. } => *m,
        XPart::Custom { rows } => rows.ncols(),
    };
    kx * term.t_part.k()
}

fn build_stacked_design(ds: &FunctionalDataset, term: &TensorTerm) -> Result<DMatrix<f64>> {
    let n_obs = ds.total_obs();
    let mut design = DMatrix::zeros(n_obs, term.pre_width);
    let mut row_idx = 0;
    if term.is_separable() {
        // One x-row per curve, expanded over that curve's grid.
        for (i, curve) in ds.curves.iter().enumerate() {
            let x = term.x_row(ds, i, curve.t[0])?;
            let mut by = 1.0;
            if let Some(b) = &term.by_name {
                by = ds.scalar(b)?[i];
            }
            for &t in &curve.t {
                let tr = term.t_part.eval_row(t)?;
                let kt = tr.len();
                for (j, &xv) in x.iter().enumerate() {
                    let scaled = xv * by;
                    if scaled != 0.0 {
                        for l in 0..kt {
                            design[(row_idx, j * kt + l)] = scaled * tr[l];
                        }
                    }
                }
                row_idx += 1;
            }
        }
    } else {
        for (i, curve) in ds.curves.iter().enumerate() {
            for &t in &curve.t {
                let row = term.raw_design_row(ds, i, t)?;
                design.set_row(row_idx, &row);
                row_idx += 1;
            }
        }
    }
    Ok(design)
}

fn integration_weights(
    s_grid: &[f64],
    limits: &IntegrationLimits,
    curve_id: u64,
    t: f64,
) -> Result<DVector<f64>> {
    let lo_grid = s_grid[0];
    let hi_grid = *s_grid.last().unwrap();
    match limits {
        IntegrationLimits::Full => trapezoid_weights(s_grid),
        IntegrationLimits::Historical => {
            let hi = t.clamp(lo_grid, hi_grid);
            windowed_trapezoid_weights(s_grid, lo_grid, hi)
        }
        IntegrationLimits::Custom(f) => {
            let (lo, hi) = f(curve_id, t);
            if hi < lo {
                return Err(FammError::EmptyWindow {
                    curve_id,
                    lo,
                    hi,
                });
            }
            windowed_trapezoid_weights(s_grid, lo.max(lo_grid), hi.min(hi_grid))
        }
    }
}

/// Functional intercept α(t): a single ones column times the t basis.
pub fn build_intercept_term(ds: &FunctionalDataset, t_basis: &MarginalBasis) -> Result<TensorTerm> {
    let penalties = t_only_penalty(1, t_basis);
    TensorTerm::from_parts(
        ds,
        TensorTermParts {
            label: "intercept_t".into(),
            x_part: XPart::Constant,
            t_part: TPart::Basis(t_basis.clone()),
            by_name: None,
            penalties,
        },
    )
}

/// Scalar intercept α (constant over t).
pub fn build_scalar_intercept_term(ds: &FunctionalDataset) -> Result<TensorTerm> {
    TensorTerm::from_parts(
        ds,
        TensorTermParts {
            label: "intercept".into(),
            x_part: XPart::Constant,
            t_part: TPart::Constant,
            by_name: None,
            penalties: vec![],
        },
    )
}

/// z·δ or z·δ(t): linear in a scalar covariate, unpenalized in the covariate
/// direction.
pub fn build_scalar_linear_term(
    ds: &FunctionalDataset,
    z_name: &str,
    t_basis: Option<&MarginalBasis>,
    constant_over_t: bool,
) -> Result<TensorTerm> {
    ds.scalar(z_name)?;
    let (t_part, penalties) = if constant_over_t {
        (TPart::Constant, vec![])
    } else {
        let b = t_basis.ok_or(FammError::MissingBasis)?;
        (TPart::Basis(b.clone()), t_only_penalty(1, b))
    };
    TensorTerm::from_parts(
        ds,
        TensorTermParts {
            label: format!("linear({z_name})"),
            x_part: XPart::ScalarLinear { name: z_name.into() },
            t_part,
            by_name: None,
            penalties,
        },
    )
}

/// γ(z), γ(z,t) or z₂·δ(z₁,t): spline in the scalar covariate, optionally
/// multiplied columnwise by another covariate.
pub fn build_scalar_smooth_term(
    ds: &FunctionalDataset,
    z_name: &str,
    z_basis: &MarginalBasis,
    t_basis: Option<&MarginalBasis>,
    multiplier: Option<&str>,
) -> Result<TensorTerm> {
    let z = ds.scalar(z_name)?;
    if let Some((lo, hi)) = z_basis.range() {
        for &v in z {
            if v < lo - 1e-9 || v > hi + 1e-9 {
                return Err(FammError::BasisRangeError { value: v, lo, hi });
            }
        }
    }
    if let Some(m) = multiplier {
        ds.scalar(m)?;
    }
    let (t_part, penalties) = match t_basis {
        Some(b) => {
            let (px, pt) = kronecker_sum_penalty(&z_basis.penalty, &b.penalty)?;
            (TPart::Basis(b.clone()), vec![px, pt])
        }
        None => {
            let block = PenaltyBlock {
                matrix: z_basis.penalty.clone(),
                smoothing_index: 0,
                scale: 1.0,
                structure: PenaltyStructure::KroneckerLeft {
                    marginal: z_basis.penalty.clone(),
                    right_dim: 1,
                },
            };
            (TPart::Constant, vec![block])
        }
    };
    TensorTerm::from_parts(
        ds,
        TensorTermParts {
            label: format!("smooth({z_name})"),
            x_part: XPart::ScalarSmooth {
                name: z_name.into(),
                basis: z_basis.clone(),
                multiplier: multiplier.map(|s| s.to_string()),
            },
            t_part,
            by_name: None,
            penalties,
        },
    )
}

/// ∫ x(s) β(s,t) ds, discretized with trapezoid weights; observation-specific
/// integration limits zero out weights outside [l_i(t), u_i(t)].
pub fn build_functional_linear_term(
    ds: &FunctionalDataset,
    x_name: &str,
    s_basis: &MarginalBasis,
    t_basis: &MarginalBasis,
    limits: IntegrationLimits,
) -> Result<TensorTerm> {
    let x = ds.functional(x_name)?;
    if !x.centered {
        eprintln!("warning: functional covariate `{x_name}` is not centered");
    }
    let (px, pt) = kronecker_sum_penalty(&s_basis.penalty, &t_basis.penalty)?;
    TensorTerm::from_parts(
        ds,
        TensorTermParts {
            label: format!("ff({x_name})"),
            x_part: XPart::FunctionalLinear {
                name: x_name.into(),
                s_basis: s_basis.clone(),
                s_grid: x.s_grid.clone(),
                limits,
            },
            t_part: TPart::Basis(t_basis.clone()),
            by_name: None,
            penalties: vec![px, pt],
        },
    )
}

/// ∫ F(x(s), s, t) ds: bivariate tensor-product basis in (x, s) integrated over
/// s. The (x, s) coefficient carries a single Kronecker-sum penalty block so
/// the term keeps at most two smoothing parameters.
pub fn build_functional_smooth_term(
    ds: &FunctionalDataset,
    x_name: &str,
    x_basis: &MarginalBasis,
    s_basis: &MarginalBasis,
    t_basis: &MarginalBasis,
) -> Result<TensorTerm> {
    let x = ds.functional(x_name)?;
    if let Some((lo, hi)) = x_basis.range() {
        for v in x.values.iter() {
            if *v < lo - 1e-9 || *v > hi + 1e-9 {
                return Err(FammError::BasisRangeError { value: *v, lo, hi });
            }
        }
    }
    let (kx, ks, kt) = (x_basis.k, s_basis.k, t_basis.k);
    let p_xs = x_basis.penalty.kronecker(&DMatrix::identity(ks, ks))
        + DMatrix::identity(kx, kx).kronecker(&s_basis.penalty);
    let block_xs = PenaltyBlock {
        matrix: p_xs.kronecker(&DMatrix::identity(kt, kt)),
        smoothing_index: 0,
        scale: 1.0,
        structure: PenaltyStructure::KroneckerLeft {
            marginal: p_xs,
            right_dim: kt,
        },
    };
    let block_t = PenaltyBlock {
        matrix: DMatrix::identity(kx * ks, kx * ks).kronecker(&t_basis.penalty),
        smoothing_index: 1,
        scale: 1.0,
        structure: PenaltyStructure::KroneckerRight {
            left_dim: kx * ks,
            marginal: t_basis.penalty.clone(),
        },
    };
    TensorTerm::from_parts(
        ds,
        TensorTermParts {
            label: format!("sff({x_name})"),
            x_part: XPart::FunctionalSmooth {
                name: x_name.into(),
                x_basis: x_basis.clone(),
                s_basis: s_basis.clone(),
                s_grid: x.s_grid.clone(),
            },
            t_part: TPart::Basis(t_basis.clone()),
            by_name: None,
            penalties: vec![block_xs, block_t],
        },
    )
}

/// FPC-based function-on-function term. Linear: Σ_k ξ̂_ik β̃_k(t) where all
/// β̃_k(t) share one t smoothing parameter. Smooth: Σ_k F_k(ξ̂_ik, t) with an
/// I ⊗ P_ξ covariate penalty.
pub fn build_ffpc_term(
    ds: &FunctionalDataset,
    covariate: &str,
    scores: &DMatrix<f64>,
    t_basis: &MarginalBasis,
    smooth: bool,
    score_basis: Option<&MarginalBasis>,
) -> Result<TensorTerm> {
    if scores.nrows() != ds.n_curves() {
        return Err(FammError::DimensionMismatch {
            context: format!(
                "scores have {} rows, dataset has {} curves",
                scores.nrows(),
                ds.n_curves()
            ),
        });
    }
    let kt = t_basis.k;
    if smooth {
        let sb = score_basis.ok_or(FammError::MissingBasis)?;
        let kp = scores.ncols();
        let p_x = DMatrix::identity(kp, kp).kronecker(&sb.penalty);
        let (mut px, pt) = kronecker_sum_penalty(&p_x, &t_basis.penalty)?;
        px.structure = PenaltyStructure::KroneckerLeft {
            marginal: p_x,
            right_dim: kt,
        };
        TensorTerm::from_parts(
            ds,
            TensorTermParts {
                label: format!("sffpc({covariate})"),
                x_part: XPart::FfpcSmooth {
                    covariate: covariate.into(),
                    scores: scores.clone(),
                    score_basis: sb.clone(),
                },
                t_part: TPart::Basis(t_basis.clone()),
                by_name: None,
                penalties: vec![px, pt],
            },
        )
    } else {
        let penalties = t_only_penalty(scores.ncols(), t_basis);
        TensorTerm::from_parts(
            ds,
            TensorTermParts {
                label: format!("ffpc({covariate})"),
                x_part: XPart::FfpcLinear {
                    covariate: covariate.into(),
                    scores: scores.clone(),
                },
                t_part: TPart::Basis(t_basis.clone()),
                by_name: None,
                penalties,
            },
        )
    }
}

/// Functional random intercept or slope: incidence marginal over grouping
/// levels with a precision penalty (identity when levels are independent).
/// λ_x controls inter-unit variability, λ_t the common roughness.
pub fn build_random_effect_term(
    ds: &FunctionalDataset,
    g_name: &str,
    slope_name: Option<&str>,
    t_basis: &MarginalBasis,
    precision: Option<DMatrix<f64>>,
) -> Result<TensorTerm> {
    let g = ds.grouping(g_name)?;
    let m = g.m;
    if let Some(p) = &precision {
        if p.nrows() != m || p.ncols() != m {
            return Err(FammError::DimensionMismatch {
                context: format!("precision is {}x{}, grouping has {m} levels", p.nrows(), p.ncols()),
            });
        }
    }
    if let Some(z) = slope_name {
        ds.scalar(z)?;
    }
    let incidence = MarginalBasis::incidence(m, precision)?;
    let (px, pt) = kronecker_sum_penalty(&incidence.penalty, &t_basis.penalty)?;
    let label = match slope_name {
        Some(z) => format!("rs({g_name},{z})"),
        None => format!("ri({g_name})"),
    };
    TensorTerm::from_parts(
        ds,
        TensorTermParts {
            label,
            x_part: XPart::RandomEffect {
                grouping: g_name.into(),
                m,
                slope: slope_name.map(|s| s.to_string()),
            },
            t_part: TPart::Basis(t_basis.clone()),
            by_name: None,
            penalties: vec![px, pt],
        },
    )
}

/// FPC-based functional random intercept: eigenfunction columns in t with a
/// diag(κ̂)⁻¹ penalty, incidence marginal over levels with identity penalty.
pub fn build_fpc_random_intercept_term(
    ds: &FunctionalDataset,
    g_name: &str,
    grid: &[f64],
    eigenfunctions: &DMatrix<f64>,
    eigenvalues: &[f64],
) -> Result<TensorTerm> {
    let g = ds.grouping(g_name)?;
    let common = ds.common_grid().ok_or(FammError::GridMismatch)?;
    if common.len() != grid.len()
        || common.iter().zip(grid).any(|(a, b)| (a - b).abs() > 1e-9)
    {
        return Err(FammError::GridMismatch);
    }
    for &k in eigenvalues {
        if k <= 0.0 {
            return Err(FammError::DegenerateEigenvalue { value: k });
        }
    }
    if eigenfunctions.ncols() != eigenvalues.len() || eigenfunctions.nrows() != grid.len() {
        return Err(FammError::DimensionMismatch {
            context: "eigenfunction matrix shape".into(),
        });
    }
    let m = g.m;
    let p_t = DMatrix::from_diagonal(&DVector::from_iterator(
        eigenvalues.len(),
        eigenvalues.iter().map(|k| 1.0 / k),
    ));
    let (px, pt) = kronecker_sum_penalty(&DMatrix::identity(m, m), &p_t)?;
    TensorTerm::from_parts(
        ds,
        TensorTermParts {
            label: format!("pcre({g_name})"),
            x_part: XPart::RandomEffect {
                grouping: g_name.into(),
                m,
                slope: None,
            },
            t_part: TPart::Eigenfunctions {
                grid: grid.to_vec(),
                values: eigenfunctions.clone(),
            },
            by_name: None,
            penalties: vec![px, pt],
        },
    )
}

/// Internal: a term built directly from design rows (per curve) and penalties;
/// used by the covariance smoother.
pub fn build_custom_term(
    ds: &FunctionalDataset,
    label: &str,
    rows_per_curve: DMatrix<f64>,
    t_part: TPart,
    penalties: Vec<PenaltyBlock>,
) -> Result<TensorTerm> {
    TensorTerm::from_parts(
        ds,
        TensorTermParts {
            label: label.into(),
            x_part: XPart::Custom { rows: rows_per_curve },
            t_part,
            by_name: None,
            penalties,
        },
    )
}

fn t_only_penalty(k_x: usize, t_basis: &MarginalBasis) -> Vec<PenaltyBlock> {
    if t_basis.penalty.amax() == 0.0 {
        return vec![];
    }
    vec![PenaltyBlock {
        matrix: DMatrix::identity(k_x, k_x).kronecker(&t_basis.penalty),
        smoothing_index: 0,
        scale: 1.0,
        structure: PenaltyStructure::KroneckerRight {
            left_dim: k_x,
            marginal: t_basis.penalty.clone(),
        },
    }]
}

/// Auxiliary FPC inputs keyed by term label, prepared by the fit pipeline.
#[derive(Debug, Clone, Default)]
pub struct TermAux {
    pub scores: HashMap<String, DMatrix<f64>>,
    pub fpc_bases: HashMap<String, FpcBasisInput>,
}

#[derive(Debug, Clone)]
pub struct FpcBasisInput {
    pub grid: Vec<f64>,
    pub eigenfunctions: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
}

/// Resolve a `TermSpec` against a dataset, building bases with the defaults.
pub fn build_term(ds: &FunctionalDataset, spec: &TermSpec, aux: &TermAux) -> Result<TensorTerm> {
    let label = spec.label_or_default();
    let order_t = spec.penalty_order_t.unwrap_or(1);
    let order_x = spec.penalty_order_x.unwrap_or(2);
    let (t_lo, t_hi) = ds.t_range();
    let t_basis = |k: usize| MarginalBasis::bspline(t_lo, t_hi, k, spec.degree, order_t);
    let scalar_basis = |name: &str, k: usize| -> Result<MarginalBasis> {
        let z = ds.scalar(name)?;
        let lo = z.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if lo == hi { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
        MarginalBasis::bspline(lo, hi, k, spec.degree.min(k.saturating_sub(1)), order_x.min(k - 1))
    };
    let mut term = match &spec.kind {
        TermKind::InterceptConst => build_scalar_intercept_term(ds),
        TermKind::InterceptT => build_intercept_term(ds, &t_basis(spec.k_t.unwrap_or(20))?),
        TermKind::ScalarLinearConst { z } => build_scalar_linear_term(ds, z, None, true),
        TermKind::ScalarLinearT { z } => {
            build_scalar_linear_term(ds, z, Some(&t_basis(spec.k_t.unwrap_or(5))?), false)
        }
        TermKind::ScalarSmooth { z } => {
            let zb = scalar_basis(z, spec.k_x.unwrap_or(5))?;
            build_scalar_smooth_term(ds, z, &zb, None, None)
        }
        TermKind::ScalarSmoothT { z } => {
            let zb = scalar_basis(z, spec.k_x.unwrap_or(5))?;
            build_scalar_smooth_term(ds, z, &zb, Some(&t_basis(spec.k_t.unwrap_or(5))?), None)
        }
        TermKind::VaryingCoefT { z1, z2 } => {
            let zb = scalar_basis(z2, spec.k_x.unwrap_or(5))?;
            build_scalar_smooth_term(ds, z2, &zb, Some(&t_basis(spec.k_t.unwrap_or(5))?), Some(z1))
        }
        TermKind::FunctionalLinear { x, limits } => {
            let cov = ds.functional(x)?;
            let s_lo = cov.s_grid[0];
            let s_hi = *cov.s_grid.last().unwrap();
            let s_basis = MarginalBasis::bspline(s_lo, s_hi, spec.k_x.unwrap_or(5), spec.degree, 1)?;
            build_functional_linear_term(
                ds,
                x,
                &s_basis,
                &t_basis(spec.k_t.unwrap_or(5))?,
                limits.clone(),
            )
        }
        TermKind::FunctionalSmooth { x } => {
            let cov = ds.functional(x)?;
            let s_lo = cov.s_grid[0];
            let s_hi = *cov.s_grid.last().unwrap();
            let mut v_lo = f64::INFINITY;
            let mut v_hi = f64::NEG_INFINITY;
            for v in cov.values.iter() {
                v_lo = v_lo.min(*v);
                v_hi = v_hi.max(*v);
            }
            let k = spec.k_x.unwrap_or(5);
            let x_basis = MarginalBasis::bspline(v_lo, v_hi, k, spec.degree, order_x.min(k - 1))?;
            let s_basis = MarginalBasis::bspline(s_lo, s_hi, k, spec.degree, 1)?;
            build_functional_smooth_term(ds, x, &x_basis, &s_basis, &t_basis(spec.k_t.unwrap_or(5))?)
        }
        TermKind::FfpcLinear { x } => {
            let scores = aux.scores.get(&label).ok_or(FammError::MissingBasis)?;
            build_ffpc_term(ds, x, scores, &t_basis(spec.k_t.unwrap_or(5))?, false, None)
        }
        TermKind::FfpcSmooth { x } => {
            let scores = aux.scores.get(&label).ok_or(FammError::MissingBasis)?;
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for v in scores.iter() {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
            let (lo, hi) = if lo == hi { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
            let k = spec.k_x.unwrap_or(5);
            let sb = MarginalBasis::bspline(lo, hi, k, spec.degree, order_x.min(k - 1))?;
            build_ffpc_term(ds, x, scores, &t_basis(spec.k_t.unwrap_or(5))?, true, Some(&sb))
        }
        TermKind::RandomIntercept { g } => build_random_effect_term(
            ds,
            g,
            None,
            &t_basis(spec.k_t.unwrap_or(5))?,
            spec.group_precision.clone(),
        ),
        TermKind::RandomSlope { g, z } => build_random_effect_term(
            ds,
            g,
            Some(z),
            &t_basis(spec.k_t.unwrap_or(5))?,
            spec.group_precision.clone(),
        ),
        TermKind::FpcRandomIntercept { g } => {
            let input = aux.fpc_bases.get(&label).ok_or(FammError::MissingBasis)?;
            build_fpc_random_intercept_term(
                ds,
                g,
                &input.grid,
                &input.eigenfunctions,
                &input.eigenvalues,
            )
        }
    }?;
    term.label = label;
    term.by_name = spec.by.clone();
    if spec.by.is_some() {
        // Rebuild with the indicator applied.
        term.design = build_stacked_design(ds, &term)?;
    }
    Ok(term)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisKind;
    use crate::data::{build_dataset, FunctionalTable, GroupingColumn, ScalarColumn};

    fn grid_records(n: usize, t: &[f64]) -> Vec<(u64, f64, f64)> {
        let mut rec = Vec::new();
        for i in 0..n {
            for &tv in t {
                rec.push(((i + 1) as u64, tv, 0.0));
            }
        }
        rec
    }

    #[test]
    fn intercept_term_dimensions_and_partition_of_unity() {
        let records = vec![
            (1, 0.0, 1.0),
            (1, 1.0, 2.0),
            (2, 0.5, 3.0),
        ];
        let ds = build_dataset(&records, vec![], vec![], vec![]).unwrap();
        let tb = MarginalBasis::bspline(0.0, 1.0, 3, 1, 1).unwrap();
        let term = build_intercept_term(&ds, &tb).unwrap();
        assert_eq!(term.design.shape(), (3, 3));
        // Constant coefficient vector gives a flat fitted intercept.
        let theta = DVector::from_element(3, 2.5);
        let fitted = term.contribution(&theta);
        assert!(fitted.iter().all(|v| (v - 2.5).abs() < 1e-12));
        // Order-1 penalty vanishes for constants.
        let pen = (theta.transpose() * &term.penalties[0].matrix * &theta)[(0, 0)];
        assert!(pen.abs() < 1e-12);
    }

    #[test]
    fn scalar_linear_constant_column() {
        let records = grid_records(2, &[0.0, 1.0]);
        let scalars = vec![ScalarColumn {
            name: "z".into(),
            values: vec![(1, 2.0), (2, 3.0)],
        }];
        let ds = build_dataset(&records, scalars, vec![], vec![]).unwrap();
        let term = build_scalar_linear_term(&ds, "z", None, true).unwrap();
        assert_eq!(term.design.as_slice(), &[2.0, 2.0, 3.0, 3.0]);
        assert!(term.penalties.is_empty());
    }

    #[test]
    fn scalar_linear_zero_covariate_annihilates() {
        let records = grid_records(2, &[0.0, 1.0]);
        let scalars = vec![ScalarColumn {
            name: "z".into(),
            values: vec![(1, 0.0), (2, 0.0)],
        }];
        let ds = build_dataset(&records, scalars, vec![], vec![]).unwrap();
        let tb = MarginalBasis::bspline(0.0, 1.0, 4, 1, 1).unwrap();
        let term = build_scalar_linear_term(&ds, "z", Some(&tb), false).unwrap();
        assert!(term.design.amax() == 0.0);
    }

    #[test]
    fn scalar_linear_with_linear_delta() {
        // δ(t) = t represented exactly in a degree-1 basis via Greville points.
        let records = grid_records(2, &[0.0, 0.5, 1.0]);
        let scalars = vec![ScalarColumn {
            name: "z".into(),
            values: vec![(1, 1.0), (2, -1.0)],
        }];
        let ds = build_dataset(&records, scalars, vec![], vec![]).unwrap();
        let tb = MarginalBasis::bspline(0.0, 1.0, 3, 1, 1).unwrap();
        let term = build_scalar_linear_term(&ds, "z", Some(&tb), false).unwrap();
        let theta = DVector::from_vec(vec![0.0, 0.5, 1.0]);
        let fitted = term.contribution(&theta);
        // Middle grid point t = 0.5: contribution z_i * 0.5.
        assert!((fitted[1] - 0.5).abs() < 1e-12);
        assert!((fitted[4] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn missing_covariate_rejected() {
        let ds = build_dataset(&grid_records(2, &[0.0, 1.0]), vec![], vec![], vec![]).unwrap();
        assert!(matches!(
            build_scalar_linear_term(&ds, "nope", None, true),
            Err(FammError::MissingCovariate { .. })
        ));
    }

    #[test]
    fn smooth_term_with_unit_multiplier_matches_plain() {
        let records = grid_records(4, &[0.0, 0.5, 1.0]);
        let scalars = vec![
            ScalarColumn {
                name: "z".into(),
                values: vec![(1, 0.1), (2, 0.4), (3, 0.7), (4, 1.0)],
            },
            ScalarColumn {
                name: "one".into(),
                values: vec![(1, 1.0), (2, 1.0), (3, 1.0), (4, 1.0)],
            },
        ];
        let ds = build_dataset(&records, scalars, vec![], vec![]).unwrap();
        let zb = MarginalBasis::bspline(0.0, 1.0, 4, 2, 2).unwrap();
        let tb = MarginalBasis::bspline(0.0, 1.0, 4, 1, 1).unwrap();
        let plain = build_scalar_smooth_term(&ds, "z", &zb, Some(&tb), None).unwrap();
        let multiplied = build_scalar_smooth_term(&ds, "z", &zb, Some(&tb), Some("one")).unwrap();
        assert!((plain.design.clone() - multiplied.design).amax() < 1e-15);
        // Zero coefficients give zero contribution.
        let zero = DVector::zeros(plain.width());
        assert!(plain.contribution(&zero).amax() == 0.0);
    }

    fn functional_ds(xs: Vec<Vec<f64>>, s_grid: Vec<f64>, t: &[f64]) -> FunctionalDataset {
        let n = xs.len();
        let records = grid_records(n, t);
        let tables = vec![FunctionalTable {
            name: "x".into(),
            s_grid,
            rows: xs
                .into_iter()
                .enumerate()
                .map(|(i, row)| ((i + 1) as u64, row))
                .collect(),
        }];
        build_dataset(&records, vec![], tables, vec![]).unwrap()
    }

    #[test]
    fn functional_linear_constant_kernel_integrates_to_one() {
        // x ≡ 1 on [0,1], single constant s-basis column: entry = ∫ 1·1 ds = 1.
        let ds = functional_ds(vec![vec![1.0; 11]], (0..11).map(|i| i as f64 / 10.0).collect(), &[0.0]);
        let s_basis = MarginalBasis::bspline(0.0, 1.0, 1, 0, 1);
        // K=1 has no valid difference penalty; build the marginal by hand.
        let s_basis = match s_basis {
            Ok(b) => b,
            Err(_) => MarginalBasis {
                kind: BasisKind::BSpline {
                    degree: 0,
                    penalty_order: 0,
                    knots: vec![0.0, 1.0],
                },
                k: 1,
                penalty: DMatrix::zeros(1, 1),
                nullspace_dim: 1,
            },
        };
        let tb = MarginalBasis::bspline(0.0, 1.0, 2, 0, 1).unwrap();
        let term = build_functional_linear_term(&ds, "x", &s_basis, &tb, IntegrationLimits::Full).unwrap();
        // x-row = ∫ x Φ_s ds = 1; with the degree-0 t-basis at t=0 the first
        // design entry is exactly the integral.
        assert!((term.design[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn historical_window_at_origin_is_degenerate() {
        let s_grid: Vec<f64> = (0..11).map(|i| i as f64 / 10.0).collect();
        let ds = functional_ds(vec![vec![1.0; 11]], s_grid.clone(), &[0.0, 0.5]);
        let w0 = integration_weights(&s_grid, &IntegrationLimits::Historical, 1, 0.0).unwrap();
        let nonzeros = w0.iter().filter(|v| **v != 0.0).count();
        assert!(nonzeros <= 1);
        // At t = 0.5 the window covers half the domain.
        let w5 = integration_weights(&s_grid, &IntegrationLimits::Historical, 1, 0.5).unwrap();
        assert!((w5.sum() - 0.5).abs() < 1e-12);
        drop(ds);
    }

    #[test]
    fn functional_linear_unit_surface_recovers_integral() {
        let h = 101;
        let s_grid: Vec<f64> = (0..h).map(|i| i as f64 / (h - 1) as f64).collect();
        let x_row: Vec<f64> = s_grid.clone();
        let ds = functional_ds(vec![x_row], s_grid, &[0.0, 0.5, 1.0]);
        let s_basis = MarginalBasis::bspline(0.0, 1.0, 5, 3, 1).unwrap();
        let tb = MarginalBasis::bspline(0.0, 1.0, 5, 3, 1).unwrap();
        let term = build_functional_linear_term(&ds, "x", &s_basis, &tb, IntegrationLimits::Full).unwrap();
        // β(s,t) ≡ 1 is the all-ones coefficient by partition of unity.
        let theta = DVector::from_element(term.width(), 1.0);
        let fitted = term.contribution(&theta);
        for v in fitted.iter() {
            assert!((v - 0.5).abs() < 1e-3, "term value {v}");
        }
    }

    #[test]
    fn full_limits_match_explicit_window() {
        let s_grid: Vec<f64> = (0..21).map(|i| i as f64 / 20.0).collect();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let xs: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..21).map(|_| rng.random::<f64>() - 0.5).collect())
            .collect();
        let ds = functional_ds(xs, s_grid, &[0.0, 0.5, 1.0]);
        let s_basis = MarginalBasis::bspline(0.0, 1.0, 5, 3, 1).unwrap();
        let tb = MarginalBasis::bspline(0.0, 1.0, 4, 1, 1).unwrap();
        let full = build_functional_linear_term(&ds, "x", &s_basis, &tb, IntegrationLimits::Full).unwrap();
        let custom = build_functional_linear_term(
            &ds,
            "x",
            &s_basis,
            &tb,
            IntegrationLimits::Custom(Arc::new(|_, _| (0.0, 1.0))),
        )
        .unwrap();
        assert_eq!(full.design, custom.design);
    }

    #[test]
    fn empty_custom_window_rejected() {
        let s_grid: Vec<f64> = (0..5).map(|i| i as f64 / 4.0).collect();
        let ds = functional_ds(vec![vec![1.0; 5]], s_grid, &[0.0]);
        let s_basis = MarginalBasis::bspline(0.0, 1.0, 4, 3, 1).unwrap();
        let tb = MarginalBasis::bspline(0.0, 1.0, 4, 1, 1).unwrap();
        let res = build_functional_linear_term(
            &ds,
            "x",
            &s_basis,
            &tb,
            IntegrationLimits::Custom(Arc::new(|_, _| (0.8, 0.2))),
        );
        assert!(matches!(res, Err(FammError::EmptyWindow { .. })));
    }

    #[test]
    fn functional_smooth_linear_in_x_reduces_to_integral() {
        let h = 41;
        let s_grid: Vec<f64> = (0..h).map(|i| i as f64 / (h - 1) as f64).collect();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let xs: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..h).map(|_| rng.random::<f64>()).collect())
            .collect();
        let ds = functional_ds(xs.clone(), s_grid.clone(), &[0.0, 1.0]);
        // Degree-1 basis in the x direction represents F(x) = x exactly with
        // Greville coefficients; flat in s and t via partition of unity.
        let x_basis = MarginalBasis::bspline(0.0, 1.0, 3, 1, 1).unwrap();
        let s_basis = MarginalBasis::bspline(0.0, 1.0, 4, 3, 1).unwrap();
        let tb = MarginalBasis::bspline(0.0, 1.0, 3, 1, 1).unwrap();
        let term = build_functional_smooth_term(&ds, "x", &x_basis, &s_basis, &tb).unwrap();
        let greville = [0.0, 0.5, 1.0];
        let mut theta = DVector::zeros(term.width());
        let (ks, kt) = (4, 3);
        for (ix, &g) in greville.iter().enumerate() {
            for is in 0..ks {
                for it in 0..kt {
                    theta[(ix * ks + is) * kt + it] = g;
                }
            }
        }
        let fitted = term.contribution(&theta);
        let w = trapezoid_weights(&s_grid).unwrap();
        for (i, x_row) in xs.iter().enumerate() {
            let integral: f64 = x_row.iter().zip(w.iter()).map(|(x, wi)| x * wi).sum();
            for l in 0..2 {
                assert!((fitted[i * 2 + l] - integral).abs() < 1e-6);
            }
        }
        // Identical covariate curves produce identical design rows.
        let ds2 = functional_ds(vec![xs[0].clone(), xs[0].clone()], s_grid, &[0.0, 1.0]);
        let term2 = build_functional_smooth_term(&ds2, "x", &x_basis, &s_basis, &tb).unwrap();
        assert_eq!(
            term2.design.row(0).iter().cloned().collect::<Vec<_>>(),
            term2.design.row(2).iter().cloned().collect::<Vec<_>>()
        );
    }

    #[test]
    fn ffpc_with_unit_scores_clones_intercept() {
        let records = grid_records(3, &[0.0, 0.5, 1.0]);
        let ds = build_dataset(&records, vec![], vec![], vec![]).unwrap();
        let tb = MarginalBasis::bspline(0.0, 1.0, 4, 1, 1).unwrap();
        let scores = DMatrix::from_element(3, 1, 1.0);
        let term = build_ffpc_term(&ds, "x", &scores, &tb, false, None).unwrap();
        let intercept = build_intercept_term(&ds, &tb).unwrap();
        assert_eq!(term.design, intercept.design);
        // Zero score column contributes nothing.
        let scores2 = DMatrix::from_columns(&[
            DVector::from_element(3, 1.0),
            DVector::zeros(3),
        ]);
        let term2 = build_ffpc_term(&ds, "x", &scores2, &tb, false, None).unwrap();
        for r in 0..term2.design.nrows() {
            for c in 4..8 {
                assert_eq!(term2.design[(r, c)], 0.0);
            }
        }
        // Smooth variant without a score basis is rejected.
        assert!(matches!(
            build_ffpc_term(&ds, "x", &scores, &tb, true, None),
            Err(FammError::MissingBasis)
        ));
    }

    fn grouped_ds(labels: &[i64], t: &[f64]) -> FunctionalDataset {
        let records = grid_records(labels.len(), t);
        let groupings = vec![GroupingColumn {
            name: "g".into(),
            labels: labels
                .iter()
                .enumerate()
                .map(|(i, &l)| ((i + 1) as u64, l))
                .collect(),
        }];
        build_dataset(&records, vec![], vec![], groupings).unwrap()
    }

    #[test]
    fn random_intercept_incidence_rows() {
        let ds = grouped_ds(&[1, 1, 2], &[0.0]);
        let tb = MarginalBasis::bspline(0.0, 1.0, 2, 0, 1).unwrap();
        let term = build_random_effect_term(&ds, "g", None, &tb, None).unwrap();
        // With a degree-0 t basis at t=0 only the first t column is active.
        assert_eq!(term.k_x(), 2);
        let x0 = term.x_row(&ds, 0, 0.0).unwrap();
        let x2 = term.x_row(&ds, 2, 0.0).unwrap();
        assert_eq!(x0.as_slice(), &[1.0, 0.0]);
        assert_eq!(x2.as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn curve_level_grouping_is_block_diagonal() {
        let ds = grouped_ds(&[1, 2, 3], &[0.0, 1.0]);
        let tb = MarginalBasis::bspline(0.0, 1.0, 3, 1, 1).unwrap();
        let term = build_random_effect_term(&ds, "g", None, &tb, None).unwrap();
        for (r, (i, _)) in ds.row_index().iter().enumerate() {
            for c in 0..term.width() {
                let owner = c / 3;
                if owner != *i {
                    assert_eq!(term.design[(r, c)], 0.0);
                }
            }
        }
    }

    #[test]
    fn precision_size_mismatch_rejected() {
        let ds = grouped_ds(&[1, 1, 2], &[0.0]);
        let tb = MarginalBasis::bspline(0.0, 1.0, 2, 0, 1).unwrap();
        let res = build_random_effect_term(&ds, "g", None, &tb, Some(DMatrix::identity(3, 3)));
        assert!(matches!(res, Err(FammError::DimensionMismatch { .. })));
    }

    #[test]
    fn fpc_random_intercept_penalty_is_reciprocal() {
        let ds = grouped_ds(&[1, 2, 1], &[0.0, 0.5, 1.0]);
        let eta = DMatrix::from_row_slice(3, 2, &[1.0, 0.1, 1.0, -0.2, 1.0, 0.1]);
        let term =
            build_fpc_random_intercept_term(&ds, "g", &[0.0, 0.5, 1.0], &eta, &[4.0, 1.0]).unwrap();
        // Second penalty block is I_M ⊗ diag(1/4, 1).
        let pt = &term.penalties[1].matrix;
        assert!((pt[(0, 0)] - 0.25).abs() < 1e-12);
        assert!((pt[(1, 1)] - 1.0).abs() < 1e-12);
        // Non-positive eigenvalue rejected.
        assert!(matches!(
            build_fpc_random_intercept_term(&ds, "g", &[0.0, 0.5, 1.0], &eta, &[1.0, 0.0]),
            Err(FammError::DegenerateEigenvalue { .. })
        ));
    }

    #[test]
    fn fpc_random_intercept_constant_mode_is_group_shift() {
        let ds = grouped_ds(&[1, 2, 1], &[0.0, 0.5, 1.0]);
        let c = 1.0 / (3f64).sqrt();
        let eta = DMatrix::from_element(3, 1, c);
        let term =
            build_fpc_random_intercept_term(&ds, "g", &[0.0, 0.5, 1.0], &eta, &[1.0]).unwrap();
        let theta = DVector::from_vec(vec![1.0, -1.0]);
        let fitted = term.contribution(&theta);
        // Curves 1 and 3 (group 1) get +c, curve 2 (group 2) gets −c, flat in t.
        for l in 0..3 {
            assert!((fitted[l] - c).abs() < 1e-12);
            assert!((fitted[3 + l] + c).abs() < 1e-12);
            assert!((fitted[6 + l] - c).abs() < 1e-12);
        }
    }

    #[test]
    fn fpc_random_intercept_requires_common_grid() {
        let records = vec![(1, 0.0, 0.0), (1, 1.0, 0.0), (2, 0.5, 0.0)];
        let groupings = vec![GroupingColumn {
            name: "g".into(),
            labels: vec![(1, 1), (2, 2)],
        }];
        let ds = build_dataset(&records, vec![], vec![], groupings).unwrap();
        let eta = DMatrix::from_element(2, 1, 1.0);
        assert!(matches!(
            build_fpc_random_intercept_term(&ds, "g", &[0.0, 1.0], &eta, &[1.0]),
            Err(FammError::GridMismatch)
        ));
    }

    #[test]
    fn design_matches_double_loop_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let records = grid_records(3, &[0.0, 0.3, 0.7, 1.0]);
        let scalars = vec![ScalarColumn {
            name: "z".into(),
            values: vec![(1, 0.2), (2, 0.5), (3, 0.9)],
        }];
        let ds = build_dataset(&records, scalars, vec![], vec![]).unwrap();
        let zb = MarginalBasis::bspline(0.0, 1.0, 3, 2, 1).unwrap();
        let tb = MarginalBasis::bspline(0.0, 1.0, 3, 2, 1).unwrap();
        let term = build_scalar_smooth_term(&ds, "z", &zb, Some(&tb), None).unwrap();
        let theta = DVector::from_fn(9, |_, _| rng.random::<f64>() - 0.5);
        let fast = term.contribution(&theta);
        let z = ds.scalar("z").unwrap().to_vec();
        let mut r = 0;
        for (i, curve) in ds.curves.iter().enumerate() {
            let zx = zb.evaluate(&[z[i]]).unwrap();
            for &t in &curve.t {
                let tt = tb.evaluate(&[t]).unwrap();
                let mut acc = 0.0;
                for ks in 0..3 {
                    for kt in 0..3 {
                        acc += zx[(0, ks)] * tt[(0, kt)] * theta[ks * 3 + kt];
                    }
                }
                assert!((fast[r] - acc).abs() < 1e-12);
                r += 1;
            }
        }
    }

    #[test]
    fn relabeling_curves_permutes_design_rows() {
        let t = [0.0, 0.5, 1.0];
        let make = |ids: [u64; 3], z: [(u64, f64); 3]| {
            let mut records = Vec::new();
            for &id in &ids {
                for &tv in &t {
                    records.push((id, tv, 0.0));
                }
            }
            let scalars = vec![ScalarColumn {
                name: "z".into(),
                values: z.to_vec(),
            }];
            build_dataset(&records, scalars, vec![], vec![]).unwrap()
        };
        let ds1 = make([1, 2, 3], [(1, 0.1), (2, 0.5), (3, 0.9)]);
        // Same curves, relabeled: curve 1 becomes 3.
        let ds2 = make([3, 1, 2], [(3, 0.1), (1, 0.5), (2, 0.9)]);
        let zb = MarginalBasis::bspline(0.0, 1.0, 4, 2, 2).unwrap();
        let tb = MarginalBasis::bspline(0.0, 1.0, 4, 1, 1).unwrap();
        let t1 = build_scalar_smooth_term(&ds1, "z", &zb, Some(&tb), None).unwrap();
        let t2 = build_scalar_smooth_term(&ds2, "z", &zb, Some(&tb), None).unwrap();
        // ds2 sorted order is (1 -> z=0.5, 2 -> z=0.9, 3 -> z=0.1), i.e. the
        // rows of ds1 permuted by (1 2 0).
        let perm = [1usize, 2, 0];
        for (new_block, &old_block) in perm.iter().enumerate() {
            for l in 0..3 {
                let a = t2.design.row(new_block * 3 + l);
                let b = t1.design.row(old_block * 3 + l);
                assert!((a - b).amax() < 1e-14);
            }
        }
    }

    #[test]
    fn by_indicator_zeroes_other_group() {
        let records = grid_records(2, &[0.0, 1.0]);
        let scalars = vec![
            ScalarColumn {
                name: "z".into(),
                values: vec![(1, 0.3), (2, 0.8)],
            },
            ScalarColumn {
                name: "is_case".into(),
                values: vec![(1, 0.0), (2, 1.0)],
            },
        ];
        let ds = build_dataset(&records, scalars, vec![], vec![]).unwrap();
        let mut spec = TermSpec::new("case_smooth", TermKind::ScalarSmoothT { z: "z".into() });
        spec.k_x = Some(4);
        spec.k_t = Some(4);
        spec.by = Some("is_case".into());
        let term = build_term(&ds, &spec, &TermAux::default()).unwrap();
        assert!(term.design.rows(0, 2).amax() == 0.0);
        assert!(term.design.rows(2, 2).amax() > 0.0);
    }
}
