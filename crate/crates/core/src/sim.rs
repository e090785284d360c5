//! Simulation harness: generators for the four repeated-measures scenarios
//! with configurable group counts, observations per group, grid size and
//! signal-to-noise ratios; rIMSE and coverage metrics; and a reproducible
//! study runner with a documented seed-splitting rule.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{bspline_basis, trapezoid_weights};
use crate::data::{build_dataset, FunctionalDataset, FunctionalTable, GroupingColumn, ScalarColumn};
use crate::error::{FammError, Result};
use crate::inference;
use crate::linalg::sd;
use crate::solver::{fit_model, FitOptions, ModelFit};
use crate::terms::{IntegrationLimits, TermKind, TermSpec};

/// One cell of the simulation design.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    /// Scenario 1..4.
    pub scenario: u32,
    /// Number of groups M.
    pub m: usize,
    /// Mean number of curves per group n_i.
    pub n_per_group: usize,
    /// Response grid size T.
    pub t_len: usize,
    /// sd(fixed predictor) / sd(each random-effect component).
    pub snr_b: f64,
    /// sd(predictor) / sd(noise).
    pub snr_eps: f64,
    pub replications: usize,
    pub seed: u64,
    /// Use the FPC-based random intercept instead of the spline-based one.
    #[serde(default)]
    pub fpc_intercept: bool,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.scenario) {
            return Err(FammError::UnknownScenario {
                scenario: self.scenario,
            });
        }
        if self.m == 0
            || self.n_per_group == 0
            || self.t_len < 2
            || !(self.snr_b > 0.0)
            || !(self.snr_eps > 0.0)
        {
            return Err(FammError::InvalidValue {
                context: "simulation configuration".into(),
            });
        }
        Ok(())
    }
}

/// True per-term evaluations on the response rows, in the same (constrained)
/// parameterization the fit estimates.
#[derive(Debug, Clone)]
pub struct SimTruth {
    pub components: Vec<(String, DVector<f64>)>,
    /// Full additive predictor including random effects.
    pub predictor: DVector<f64>,
    pub sigma_eps: f64,
}

impl SimTruth {
    pub fn component(&self, label: &str) -> Option<&DVector<f64>> {
        self.components
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, v)| v)
    }
}

/// Multinomial subject-label probabilities ∝ √(level index).
pub fn subject_probabilities(m: usize) -> Vec<f64> {
    let weights: Vec<f64> = (1..=m).map(|i| (i as f64).sqrt()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

fn draw_labels(rng: &mut ChaCha8Rng, m: usize, n_curves: usize) -> Vec<usize> {
    let probs = subject_probabilities(m);
    let mut cum = Vec::with_capacity(m);
    let mut acc = 0.0;
    for p in &probs {
        acc += p;
        cum.push(acc);
    }
    let mut labels: Vec<usize> = (0..n_curves)
        .map(|_| {
            let u: f64 = rng.random();
            cum.iter().position(|&c| u <= c).unwrap_or(m - 1)
        })
        .collect();
    // Every level must appear at least once: reassign curves from the most
    // populated levels to the missing ones.
    loop {
        let mut counts = vec![0usize; m];
        for &l in labels.iter() {
            counts[l] += 1;
        }
        let missing = match counts.iter().position(|&c| c == 0) {
            Some(i) => i,
            None => break,
        };
        let donor = counts
            .iter()
            .enumerate()
            .max_by_key(|(_, &c)| c)
            .map(|(i, _)| i)
            .unwrap();
        let victim = labels.iter().position(|&l| l == donor).unwrap();
        labels[victim] = missing;
    }
    labels
}

/// Five-mode random B-spline curves on a grid: Σ_k c_k B_k with c ~ N(0, 1).
fn spline_process(
    rng: &mut ChaCha8Rng,
    basis_eval: &DMatrix<f64>,
    n_draws: usize,
) -> Vec<DVector<f64>> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let k = basis_eval.ncols();
    (0..n_draws)
        .map(|_| {
            let coefs = DVector::from_fn(k, |_, _| normal.sample(rng));
            basis_eval * coefs
        })
        .collect()
}

const FUNCTIONAL_GRID_LEN: usize = 40;
const PROCESS_MODES: usize = 5;

struct ScenarioParts {
    fixed: Vec<(String, DVector<f64>)>,
    random: Vec<(String, DVector<f64>)>,
}

/// Generate one dataset plus truth for a scenario. All randomness is drawn in
/// a fixed order so datasets with equal seeds agree except for the SNR scale
/// factors.
pub fn generate_scenario(cfg: &SimConfig) -> Result<(FunctionalDataset, SimTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let m = cfg.m;
    let n_curves = m * cfg.n_per_group;
    let t_grid: Vec<f64> = (0..cfg.t_len)
        .map(|l| l as f64 / (cfg.t_len - 1) as f64)
        .collect();
    let s_grid: Vec<f64> = (0..FUNCTIONAL_GRID_LEN)
        .map(|h| h as f64 / (FUNCTIONAL_GRID_LEN - 1) as f64)
        .collect();
    let labels = draw_labels(&mut rng, m, n_curves);
    // Scalar covariates (drawn for every scenario to keep the stream stable).
    let u: Vec<f64> = (0..n_curves).map(|_| rng.random_range(-1.0..1.0)).collect();
    let z1: Vec<f64> = (0..n_curves).map(|_| rng.random_range(-1.0..1.0)).collect();
    let z2: Vec<f64> = (0..n_curves).map(|_| rng.random_range(-1.0..1.0)).collect();
    // Functional covariates.
    let (s_basis_eval, _) = bspline_basis(&s_grid, PROCESS_MODES, 3, 1)?;
    let x1_raw = spline_process(&mut rng, &s_basis_eval, n_curves);
    let x2_raw = spline_process(&mut rng, &s_basis_eval, n_curves);
    // Random-effect curves per group.
    let (t_basis_eval, _) = bspline_basis(&t_grid, PROCESS_MODES, 3, 1)?;
    let b0_curves = spline_process(&mut rng, &t_basis_eval, m);
    let b1_curves = spline_process(&mut rng, &t_basis_eval, m);
    // Noise draws, scaled later.
    let n_obs = n_curves * cfg.t_len;
    let noise: Vec<f64> = (0..n_obs).map(|_| normal.sample(&mut rng)).collect();

    let center = |rows: &[DVector<f64>]| -> Vec<DVector<f64>> {
        let mut mean = DVector::zeros(FUNCTIONAL_GRID_LEN);
        for r in rows {
            mean += r;
        }
        mean /= rows.len() as f64;
        rows.iter().map(|r| r - &mean).collect()
    };
    let x1 = center(&x1_raw);
    let x2 = center(&x2_raw);
    let w_s = trapezoid_weights(&s_grid)?;

    let stack = |f: &dyn Fn(usize, f64) -> f64| -> DVector<f64> {
        let mut v = DVector::zeros(n_obs);
        let mut r = 0;
        for i in 0..n_curves {
            for &t in &t_grid {
                v[r] = f(i, t);
                r += 1;
            }
        }
        v
    };

    let pi = std::f64::consts::PI;
    let alpha = stack(&|_, t| (2.0 * pi * t).sin() + 1.0);
    let beta1_fn = |i: usize, t: f64| -> f64 {
        let mut acc = 0.0;
        for h in 0..FUNCTIONAL_GRID_LEN {
            acc += w_s[h] * x1[i][h] * (2.0 * pi * s_grid[h]).cos() * (pi * t).sin();
        }
        acc
    };
    let beta2_fn = |i: usize, t: f64| -> f64 {
        let mut acc = 0.0;
        for h in 0..FUNCTIONAL_GRID_LEN {
            acc += w_s[h] * x2[i][h] * s_grid[h] * t;
        }
        acc
    };

    let mut parts = ScenarioParts {
        fixed: vec![("alpha".into(), alpha)],
        random: Vec::new(),
    };
    match cfg.scenario {
        1 => {
            parts.random.push(("b0".into(), stack(&|i, t| eval_on_grid(&b0_curves[labels[i]], &t_grid, t))));
            parts.random.push((
                "b1".into(),
                stack(&|i, t| u[i] * eval_on_grid(&b1_curves[labels[i]], &t_grid, t)),
            ));
        }
        2 => {
            parts.fixed.push(("beta1".into(), stack(&beta1_fn)));
            parts.random.push(("b0".into(), stack(&|i, t| eval_on_grid(&b0_curves[labels[i]], &t_grid, t))));
        }
        3 => {
            parts.fixed.push(("beta1".into(), stack(&beta1_fn)));
            parts.fixed.push(("beta2".into(), stack(&beta2_fn)));
            parts.random.push(("b0".into(), stack(&|i, t| eval_on_grid(&b0_curves[labels[i]], &t_grid, t))));
        }
        4 => {
            parts.fixed.push(("beta1".into(), stack(&beta1_fn)));
            parts.fixed.push(("gamma1".into(), stack(&|i, t| (pi * z1[i]).cos() * t)));
            parts.fixed.push(("delta2".into(), stack(&|i, t| (1.0 + t * t) * z2[i])));
            parts.random.push(("b0".into(), stack(&|i, t| eval_on_grid(&b0_curves[labels[i]], &t_grid, t))));
        }
        s => return Err(FammError::UnknownScenario { scenario: s }),
    }

    // Scale every random-effect component to the SNR_B target.
    let fixed_total: DVector<f64> = parts
        .fixed
        .iter()
        .fold(DVector::zeros(n_obs), |acc, (_, v)| acc + v);
    let fixed_sd = sd(fixed_total.as_slice()).max(1e-12);
    for (_, v) in parts.random.iter_mut() {
        let raw_sd = sd(v.as_slice());
        if raw_sd > 0.0 {
            *v *= fixed_sd / (cfg.snr_b * raw_sd);
        }
    }
    let mut predictor = fixed_total.clone();
    for (_, v) in &parts.random {
        predictor += v;
    }
    let sigma_eps = sd(predictor.as_slice()).max(1e-12) / cfg.snr_eps;

    // Adjust truths to the constrained parameterization the fit estimates:
    // per-t means of constrained fixed terms move into the intercept.
    let constrained = ["beta1", "beta2", "gamma1"];
    let mut components = parts.fixed;
    for idx in 0..components.len() {
        if !constrained.contains(&components[idx].0.as_str()) {
            continue;
        }
        let mut per_t_mean = vec![0.0; cfg.t_len];
        for i in 0..n_curves {
            for l in 0..cfg.t_len {
                per_t_mean[l] += components[idx].1[i * cfg.t_len + l] / n_curves as f64;
            }
        }
        for i in 0..n_curves {
            for l in 0..cfg.t_len {
                components[idx].1[i * cfg.t_len + l] -= per_t_mean[l];
            }
        }
        let alpha_ref = &mut components[0].1;
        for i in 0..n_curves {
            for l in 0..cfg.t_len {
                alpha_ref[i * cfg.t_len + l] += per_t_mean[l];
            }
        }
    }
    components.extend(parts.random);

    // Assemble the dataset.
    let mut records = Vec::with_capacity(n_obs);
    let mut r = 0;
    for i in 0..n_curves {
        for &t in &t_grid {
            records.push(((i + 1) as u64, t, predictor[r] + sigma_eps * noise[r]));
            r += 1;
        }
    }
    let mut scalar_cols = Vec::new();
    let mut functional_tables = Vec::new();
    let groupings = vec![GroupingColumn {
        name: "subject".into(),
        labels: (0..n_curves)
            .map(|i| ((i + 1) as u64, (labels[i] + 1) as i64))
            .collect(),
    }];
    match cfg.scenario {
        1 => {
            scalar_cols.push(column("u", &u));
        }
        2 => {
            functional_tables.push(table("x1", &s_grid, &x1));
        }
        3 => {
            functional_tables.push(table("x1", &s_grid, &x1));
            functional_tables.push(table("x2", &s_grid, &x2));
        }
        4 => {
            functional_tables.push(table("x1", &s_grid, &x1));
            scalar_cols.push(column("z1", &z1));
            scalar_cols.push(column("z2", &z2));
        }
        _ => unreachable!(),
    }
    let ds = build_dataset(&records, scalar_cols, functional_tables, groupings)?;
    Ok((
        ds,
        SimTruth {
            components,
            predictor,
            sigma_eps,
        },
    ))
}

fn eval_on_grid(curve: &DVector<f64>, grid: &[f64], t: f64) -> f64 {
    // Generated curves live exactly on the response grid.
    let idx = ((t * (grid.len() - 1) as f64).round() as usize).min(grid.len() - 1);
    curve[idx]
}

fn column(name: &str, values: &[f64]) -> ScalarColumn {
    ScalarColumn {
        name: name.into(),
        values: values
            .iter()
            .enumerate()
            .map(|(i, &v)| ((i + 1) as u64, v))
            .collect(),
    }
}

fn table(name: &str, s_grid: &[f64], rows: &[DVector<f64>]) -> FunctionalTable {
    FunctionalTable {
        name: name.into(),
        s_grid: s_grid.to_vec(),
        rows: rows
            .iter()
            .enumerate()
            .map(|(i, r)| ((i + 1) as u64, r.iter().cloned().collect()))
            .collect(),
    }
}

/// Term specs matching a scenario's data-generating process, with the default
/// basis settings. `fpc_intercept` swaps the spline random intercept for the
/// FPC-based variant estimated by the iterative procedure.
pub fn scenario_term_specs(scenario: u32, fpc_intercept: bool) -> Result<Vec<TermSpec>> {
    let b0 = if fpc_intercept {
        TermSpec::new("b0", TermKind::FpcRandomIntercept { g: "subject".into() })
    } else {
        TermSpec::new("b0", TermKind::RandomIntercept { g: "subject".into() })
    };
    let specs = match scenario {
        1 => vec![
            TermSpec::new("alpha", TermKind::InterceptT),
            b0,
            TermSpec::new(
                "b1",
                TermKind::RandomSlope {
                    g: "subject".into(),
                    z: "u".into(),
                },
            ),
        ],
        2 => vec![
            TermSpec::new("alpha", TermKind::InterceptT),
            TermSpec::new(
                "beta1",
                TermKind::FunctionalLinear {
                    x: "x1".into(),
                    limits: IntegrationLimits::Full,
                },
            ),
            b0,
        ],
        3 => vec![
            TermSpec::new("alpha", TermKind::InterceptT),
            TermSpec::new(
                "beta1",
                TermKind::FunctionalLinear {
                    x: "x1".into(),
                    limits: IntegrationLimits::Full,
                },
            ),
            TermSpec::new(
                "beta2",
                TermKind::FunctionalLinear {
                    x: "x2".into(),
                    limits: IntegrationLimits::Full,
                },
            ),
            b0,
        ],
        4 => vec![
            TermSpec::new("alpha", TermKind::InterceptT),
            TermSpec::new(
                "beta1",
                TermKind::FunctionalLinear {
                    x: "x1".into(),
                    limits: IntegrationLimits::Full,
                },
            ),
            TermSpec::new("gamma1", TermKind::ScalarSmoothT { z: "z1".into() }),
            TermSpec::new("delta2", TermKind::ScalarLinearT { z: "z2".into() }),
            b0,
        ],
        s => return Err(FammError::UnknownScenario { scenario: s }),
    };
    Ok(specs)
}

/// Relative integrated mean squared error on stacked per-observation values:
/// n⁻¹ Σ_i ∫(f̂_i − f_i)² dt / ∫f_i² dt with trapezoid integration per curve.
/// Curves with (numerically) zero truth are excluded with a warning.
pub fn rimse(estimated: &DVector<f64>, truth: &DVector<f64>, ds: &FunctionalDataset) -> Result<f64> {
    if estimated.len() != truth.len() || estimated.len() != ds.total_obs() {
        return Err(FammError::DimensionMismatch {
            context: "rimse input lengths".into(),
        });
    }
    let mut acc = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    let mut offset = 0;
    for curve in &ds.curves {
        let t_len = curve.len();
        let w = if t_len >= 2 {
            trapezoid_weights(&curve.t)?
        } else {
            DVector::from_element(1, 1.0)
        };
        let mut num = 0.0;
        let mut den = 0.0;
        for l in 0..t_len {
            let e = estimated[offset + l];
            let f = truth[offset + l];
            num += w[l] * (e - f) * (e - f);
            den += w[l] * f * f;
        }
        offset += t_len;
        if den > 1e-14 {
            acc += num / den;
            used += 1;
        } else {
            skipped += 1;
        }
    }
    if skipped > 0 {
        eprintln!("warning: {skipped} zero-truth curves excluded from rIMSE");
    }
    if used == 0 {
        return Err(FammError::InvalidValue {
            context: "all rIMSE denominators are zero".into(),
        });
    }
    Ok(acc / used as f64)
}

/// One result row of a study: a (config, replicate, component) triple.
#[derive(Debug, Clone, Serialize)]
pub struct StudyRow {
    pub scenario: u32,
    pub m: usize,
    pub ni: usize,
    pub t_len: usize,
    pub snr_b: f64,
    pub snr_eps: f64,
    pub rep: usize,
    pub component: String,
    pub rimse: f64,
    pub coverage: f64,
    pub seconds: f64,
    pub converged: bool,
}

/// Replicate seeds come from splitmix64 over (base seed, config index,
/// replicate index); results are identical for any worker count.
pub fn derive_seed(base: u64, config_index: usize, rep: usize) -> u64 {
    splitmix64(
        base ^ splitmix64(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(config_index as u64 + 1))
            ^ (rep as u64).wrapping_shl(32),
    )
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fit one generated replicate and score every component.
pub fn run_replicate(cfg: &SimConfig, options: &FitOptions) -> Result<(ModelFit, SimTruth, Vec<(String, f64, f64)>)> {
    let (ds, truth) = generate_scenario(cfg)?;
    let specs = scenario_term_specs(cfg.scenario, cfg.fpc_intercept)?;
    let fit = fit_model(&ds, &specs, options)?;
    let scores = score_fit(&fit, &truth)?;
    Ok((fit, truth, scores))
}

/// Per-component (label, rimse, coverage) including the fitted response.
pub fn score_fit(fit: &ModelFit, truth: &SimTruth) -> Result<Vec<(String, f64, f64)>> {
    let mut out = Vec::new();
    let yhat = inference::predict(fit);
    let yse = inference::predict_se(fit);
    let r = rimse(&yhat, &truth.predictor, &fit.dataset)?;
    let c = inference::pointwise_coverage(
        yhat.as_slice(),
        yse.as_slice(),
        truth.predictor.as_slice(),
        0.95,
    );
    out.push(("yhat".into(), r, c));
    for (label, component_truth) in &truth.components {
        let Ok(idx) = fit.term_index(label) else {
            continue;
        };
        let est = inference::term_contribution(fit, idx);
        let se = inference::term_contribution_se(fit, idx);
        let r = rimse(&est, component_truth, &fit.dataset)?;
        let c = inference::pointwise_coverage(
            est.as_slice(),
            se.as_slice(),
            component_truth.as_slice(),
            0.95,
        );
        out.push((label.clone(), r, c));
    }
    Ok(out)
}

/// Run every (config, replicate) cell in parallel; failures become rows with
/// NaN metrics rather than aborting the study. Output order is deterministic.
pub fn run_study(configs: &[SimConfig], options: &FitOptions) -> Vec<StudyRow> {
    let mut tasks = Vec::new();
    for (ci, cfg) in configs.iter().enumerate() {
        for rep in 0..cfg.replications.max(1) {
            tasks.push((ci, rep));
        }
    }
    let rows: Vec<Vec<StudyRow>> = tasks
        .par_iter()
        .map(|&(ci, rep)| {
            let base = &configs[ci];
            let mut cfg = base.clone();
            cfg.seed = derive_seed(base.seed, ci, rep);
            let start = std::time::Instant::now();
            let result = run_replicate(&cfg, options);
            let seconds = start.elapsed().as_secs_f64();
            let mk = |component: &str, rimse: f64, coverage: f64, converged: bool| StudyRow {
                scenario: base.scenario,
                m: base.m,
                ni: base.n_per_group,
                t_len: base.t_len,
                snr_b: base.snr_b,
                snr_eps: base.snr_eps,
                rep,
                component: component.into(),
                rimse,
                coverage,
                seconds,
                converged,
            };
            match result {
                Ok((fit, _truth, scores)) => scores
                    .into_iter()
                    .map(|(label, r, c)| mk(&label, r, c, fit.fitted.converged))
                    .collect(),
                Err(err) => {
                    eprintln!("warning: replicate (config {ci}, rep {rep}) failed: {err}");
                    vec![mk("error", f64::NAN, f64::NAN, false)]
                }
            }
        })
        .collect();
    rows.into_iter().flatten().collect()
}
