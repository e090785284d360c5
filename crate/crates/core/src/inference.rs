//! Post-fit quantities: fitted curves and their pointwise empirical-Bayes
//! standard errors, per-term evaluations on coefficient grids with confidence
//! bands (covariance propagated through the constraint transform), residual
//! curves and residual covariance summaries.

use nalgebra::{DMatrix, DVector, RowDVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::FunctionalDataset;
use crate::error::{FammError, Result};
use crate::fpca;
use crate::solver::ModelFit;
use crate::terms::{TPart, XPart};

/// Standard-normal quantile for a two-sided interval at `level`.
pub fn normal_quantile(level: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    normal.inverse_cdf(0.5 + level / 2.0)
}

/// A term's estimate on an evaluation grid with pointwise confidence bands.
#[derive(Debug, Clone)]
pub struct TermEstimate {
    pub label: String,
    /// Names of the grid coordinates, e.g. ["s", "t"]; t varies fastest.
    pub grid_names: Vec<String>,
    /// One coordinate tuple per evaluated point.
    pub grid: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub se: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub level: f64,
}

/// Fitted values on the training data: exactly Φθ̂.
pub fn predict(fit: &ModelFit) -> DVector<f64> {
    &fit.system.design * &fit.fitted.theta_hat
}

/// Pointwise standard errors of the fitted curve, from the empirical-Bayes
/// posterior covariance: se_i² = φ_i V_θ φ_iᵀ = σ̂²·hat_ii.
pub fn predict_se(fit: &ModelFit) -> DVector<f64> {
    fit.fitted
        .hat_diagonal
        .map(|h| (h.max(0.0) * fit.fitted.sigma2_eps).sqrt())
}

/// Contribution of one term to every training observation.
pub fn term_contribution(fit: &ModelFit, term_index: usize) -> DVector<f64> {
    let slice = &fit.system.term_slices[term_index];
    let cols = fit.system.design.columns(slice.start, slice.len());
    let theta = fit.fitted.theta_hat.rows(slice.start, slice.len());
    cols * theta
}

/// Pointwise standard errors of one term's contribution (slice covariance).
pub fn term_contribution_se(fit: &ModelFit, term_index: usize) -> DVector<f64> {
    let slice = &fit.system.term_slices[term_index];
    let cols = fit.system.design.columns(slice.start, slice.len());
    let v = fit
        .fitted
        .coef_covariance
        .view((slice.start, slice.start), (slice.len(), slice.len()));
    let xv = cols * v;
    DVector::from_iterator(
        cols.nrows(),
        (0..cols.nrows()).map(|i| {
            let mut acc = 0.0;
            for j in 0..slice.len() {
                acc += xv[(i, j)] * cols[(i, j)];
            }
            acc.max(0.0).sqrt()
        }),
    )
}

/// Predict on new data by rebuilding every term's design rows; FPC-based
/// terms estimate scores for the new curves from the stored FPCA.
pub fn predict_newdata(fit: &ModelFit, newdata: &FunctionalDataset) -> Result<DVector<f64>> {
    let mut ds = newdata.clone();
    // Center functional covariates with the training means.
    for (name, cov) in fit.dataset.functional_covariates.iter() {
        if let Some(mean) = &cov.mean_curve {
            if let Some(new_cov) = ds.functional_covariates.get_mut(name) {
                if !new_cov.centered {
                    if new_cov.s_grid.len() != cov.s_grid.len() {
                        return Err(FammError::GridMismatch);
                    }
                    for mut row in new_cov.values.row_iter_mut() {
                        for (j, v) in row.iter_mut().enumerate() {
                            *v -= mean[j];
                        }
                    }
                    new_cov.centered = true;
                    new_cov.mean_curve = Some(mean.clone());
                }
            }
        }
    }
    let n_obs = ds.total_obs();
    let mut yhat = DVector::zeros(n_obs);
    for term in &fit.terms {
        let mut term = term.clone();
        // Swap in scores for the new curves where needed.
        match &term.x_part {
            XPart::FfpcLinear { covariate, .. } | XPart::FfpcSmooth { covariate, .. } => {
                let res = fit
                    .ffpc_fpca
                    .get(&term.label)
                    .ok_or_else(|| FammError::UnknownTerm {
                        label: term.label.clone(),
                    })?;
                let cov = ds.functional(covariate)?;
                let new_scores = fpca::estimate_scores(&cov.values, res)?;
                match &mut term.x_part {
                    XPart::FfpcLinear { scores, .. } | XPart::FfpcSmooth { scores, .. } => {
                        *scores = new_scores;
                    }
                    _ => unreachable!(),
                }
            }
            _ => {}
        }
        let slice = term.coef_slice.clone();
        let theta = fit.fitted.theta_hat.rows(slice.start, slice.len());
        let mut r = 0;
        for (i, curve) in ds.curves.iter().enumerate() {
            for &t in &curve.t {
                let row = term.design_row(&ds, i, t)?;
                yhat[r] += (row * theta)[(0, 0)];
                r += 1;
            }
        }
    }
    Ok(yhat)
}

/// Evaluate a term's coefficient function on a grid with pointwise
/// empirical-Bayes confidence bands. `resolution` controls the number of
/// points per continuous direction; t varies fastest in the output.
pub fn coef_with_ci(
    fit: &ModelFit,
    term_label: &str,
    resolution: usize,
    level: f64,
) -> Result<TermEstimate> {
    let index = fit.term_index(term_label)?;
    let term = &fit.terms[index];
    let resolution = resolution.max(2);
    let (t_name, t_points): (&str, Vec<f64>) = match &term.t_part {
        TPart::Constant => ("", vec![f64::NAN]),
        TPart::Basis(b) => {
            let (lo, hi) = b.range().unwrap_or((0.0, 1.0));
            ("t", linspace(lo, hi, resolution))
        }
        TPart::Eigenfunctions { grid, .. } => ("t", grid.clone()),
    };
    // Coefficient-space evaluation points in the covariate direction: pairs of
    // (coordinates, marginal evaluation row).
    let x_points: Vec<(Vec<f64>, RowDVector<f64>)> = match &term.x_part {
        XPart::Constant | XPart::ScalarLinear { .. } => {
            vec![(vec![], RowDVector::from_element(1, 1.0))]
        }
        XPart::ScalarSmooth { basis, .. } => {
            let (lo, hi) = basis.range().unwrap_or((0.0, 1.0));
            linspace(lo, hi, resolution)
                .into_iter()
                .map(|z| Ok((vec![z], basis.evaluate(&[z])?.row(0).into_owned())))
                .collect::<Result<_>>()?
        }
        XPart::FunctionalLinear { s_basis, .. } => {
            let (lo, hi) = s_basis.range().unwrap_or((0.0, 1.0));
            linspace(lo, hi, resolution)
                .into_iter()
                .map(|s| Ok((vec![s], s_basis.evaluate(&[s])?.row(0).into_owned())))
                .collect::<Result<_>>()?
        }
        XPart::FunctionalSmooth {
            x_basis, s_basis, ..
        } => {
            let (xlo, xhi) = x_basis.range().unwrap_or((0.0, 1.0));
            let (slo, shi) = s_basis.range().unwrap_or((0.0, 1.0));
            let mut pts = Vec::new();
            for x in linspace(xlo, xhi, resolution) {
                let bx = x_basis.evaluate(&[x])?;
                for s in linspace(slo, shi, resolution) {
                    let bs = s_basis.evaluate(&[s])?;
                    let mut row = RowDVector::zeros(x_basis.k * s_basis.k);
                    for a in 0..x_basis.k {
                        for b in 0..s_basis.k {
                            row[a * s_basis.k + b] = bx[(0, a)] * bs[(0, b)];
                        }
                    }
                    pts.push((vec![x, s], row));
                }
            }
            pts
        }
        XPart::FfpcLinear { scores, .. } => (0..scores.ncols())
            .map(|k| {
                let mut row = RowDVector::zeros(scores.ncols());
                row[k] = 1.0;
                (vec![(k + 1) as f64], row)
            })
            .collect(),
        XPart::FfpcSmooth {
            scores, score_basis, ..
        } => {
            let (lo, hi) = score_basis.range().unwrap_or((0.0, 1.0));
            let mut pts = Vec::new();
            for k in 0..scores.ncols() {
                for xi in linspace(lo, hi, resolution) {
                    let b = score_basis.evaluate(&[xi])?;
                    let mut row = RowDVector::zeros(scores.ncols() * score_basis.k);
                    for a in 0..score_basis.k {
                        row[k * score_basis.k + a] = b[(0, a)];
                    }
                    pts.push((vec![(k + 1) as f64, xi], row));
                }
            }
            pts
        }
        XPart::RandomEffect { m, .. } => (0..*m)
            .map(|lev| {
                let mut row = RowDVector::zeros(*m);
                row[lev] = 1.0;
                (vec![(lev + 1) as f64], row)
            })
            .collect(),
        XPart::Custom { .. } => {
            return Err(FammError::UnknownTerm {
                label: term_label.into(),
            })
        }
    };
    let x_names: Vec<String> = match &term.x_part {
        XPart::Constant | XPart::ScalarLinear { .. } => vec![],
        XPart::ScalarSmooth { name, .. } => vec![name.clone()],
        XPart::FunctionalLinear { .. } => vec!["s".into()],
        XPart::FunctionalSmooth { .. } => vec!["x".into(), "s".into()],
        XPart::FfpcLinear { .. } => vec!["component".into()],
        XPart::FfpcSmooth { .. } => vec!["component".into(), "score".into()],
        XPart::RandomEffect { .. } => vec!["level".into()],
        XPart::Custom { .. } => vec![],
    };
    let slice = term.coef_slice.clone();
    let theta = fit.fitted.theta_hat.rows(slice.start, slice.len()).into_owned();
    let v = fit
        .fitted
        .coef_covariance
        .view((slice.start, slice.start), (slice.len(), slice.len()))
        .into_owned();
    let z_mult = normal_quantile(level);
    let kt = term.k_t();
    let mut grid_names = x_names;
    if !t_name.is_empty() {
        grid_names.push(t_name.into());
    }
    let mut out = TermEstimate {
        label: term_label.into(),
        grid_names,
        grid: Vec::new(),
        values: Vec::new(),
        se: Vec::new(),
        ci_lower: Vec::new(),
        ci_upper: Vec::new(),
        level,
    };
    for (coords, xrow) in &x_points {
        for &t in &t_points {
            let trow = if t.is_nan() {
                RowDVector::from_element(1, 1.0)
            } else {
                term.t_part.eval_row(t)?
            };
            let mut raw = RowDVector::zeros(xrow.len() * kt);
            for (a, &xv) in xrow.iter().enumerate() {
                for (b, &tv) in trow.iter().enumerate() {
                    raw[a * kt + b] = xv * tv;
                }
            }
            // Constraint correction: rows map through Z into the constrained
            // parameterization where the covariance lives.
            let row = match &term.constraint_transform {
                Some(ct) => raw * &ct.z,
                None => raw,
            };
            let est = (&row * &theta)[(0, 0)];
            let var = (&row * &v * row.transpose())[(0, 0)];
            let se = var.max(0.0).sqrt();
            let mut point = coords.clone();
            if !t.is_nan() {
                point.push(t);
            }
            out.grid.push(point);
            out.values.push(est);
            out.se.push(se);
            out.ci_lower.push(est - z_mult * se);
            out.ci_upper.push(est + z_mult * se);
        }
    }
    Ok(out)
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Residual curves plus, on a common grid, their empirical covariance and
/// correlation matrices.
#[derive(Debug, Clone)]
pub struct ResidualSummary {
    pub residuals: Vec<Vec<f64>>,
    pub covariance: Option<DMatrix<f64>>,
    pub correlation: Option<DMatrix<f64>>,
}

pub fn residual_curves(fit: &ModelFit) -> ResidualSummary {
    let fitted = predict(fit);
    let mut residuals = Vec::with_capacity(fit.dataset.n_curves());
    let mut r = 0;
    for curve in &fit.dataset.curves {
        let mut e = Vec::with_capacity(curve.len());
        for l in 0..curve.len() {
            e.push(curve.y[l] - fitted[r]);
            r += 1;
        }
        residuals.push(e);
    }
    let (covariance, correlation) = match fit.dataset.common_grid() {
        Some(grid) => {
            let n = residuals.len();
            let t_len = grid.len();
            let mut mean = vec![0.0; t_len];
            for e in &residuals {
                for (l, v) in e.iter().enumerate() {
                    mean[l] += v / n as f64;
                }
            }
            let denom = (n as f64 - 1.0).max(1.0);
            let mut cov: DMatrix<f64> = DMatrix::zeros(t_len, t_len);
            for e in &residuals {
                for l in 0..t_len {
                    for m in l..t_len {
                        let v = (e[l] - mean[l]) * (e[m] - mean[m]) / denom;
                        cov[(l, m)] += v;
                        if m != l {
                            cov[(m, l)] += v;
                        }
                    }
                }
            }
            let mut cor: DMatrix<f64> = DMatrix::zeros(t_len, t_len);
            for l in 0..t_len {
                for m in 0..t_len {
                    let d: f64 = (cov[(l, l)] * cov[(m, m)]).sqrt();
                    cor[(l, m)] = if d > 0.0 { cov[(l, m)] / d } else { 0.0 };
                }
            }
            (Some(cov), Some(cor))
        }
        None => (None, None),
    };
    ResidualSummary {
        residuals,
        covariance,
        correlation,
    }
}

/// Proportion of pointwise intervals estimate ± z·se covering the truth.
pub fn pointwise_coverage(values: &[f64], se: &[f64], truth: &[f64], level: f64) -> f64 {
    let z = normal_quantile(level);
    let mut covered = 0usize;
    for ((v, s), t) in values.iter().zip(se).zip(truth) {
        if (v - z * s) <= *t && *t <= (v + z * s) {
            covered += 1;
        }
    }
    covered as f64 / values.len().max(1) as f64
}
