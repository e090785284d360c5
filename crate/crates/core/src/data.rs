//! In-memory representation of functional responses, covariates and grouping
//! factors. Response curves may live on irregular per-curve grids; missing
//! response values are simply absent from the long records, so the stacked
//! model has fewer rows.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};

use crate::error::{FammError, Result};

/// One functional response curve observed at `t` with values `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRecord {
    pub curve_id: u64,
    pub t: Vec<f64>,
    pub y: Vec<f64>,
}

impl CurveRecord {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// A functional covariate on a common dense grid: row i holds x_i(s).
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalCovariate {
    pub s_grid: Vec<f64>,
    pub values: DMatrix<f64>,
    pub mean_curve: Option<DVector<f64>>,
    pub centered: bool,
}

impl FunctionalCovariate {
    pub fn new(s_grid: Vec<f64>, values: DMatrix<f64>) -> Result<Self> {
        if values.ncols() != s_grid.len() {
            return Err(FammError::DimensionMismatch {
                context: format!(
                    "functional covariate has {} columns but grid has {} points",
                    values.ncols(),
                    s_grid.len()
                ),
            });
        }
        if s_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(FammError::InvalidValue {
                context: "functional covariate grid must be strictly increasing".into(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FammError::InvalidValue {
                context: "functional covariate values".into(),
            });
        }
        Ok(Self {
            s_grid,
            values,
            mean_curve: None,
            centered: false,
        })
    }

    pub fn n_curves(&self) -> usize {
        self.values.nrows()
    }
}

/// Grouping factor with levels re-encoded to a contiguous 1..=M range.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupingFactor {
    /// Level per curve, values in 1..=m.
    pub levels: Vec<usize>,
    pub m: usize,
    /// Original label for each re-encoded level (index 0 = level 1).
    pub original_labels: Vec<i64>,
}

/// Long-format scalar column keyed by curve id.
#[derive(Debug, Clone)]
pub struct ScalarColumn {
    pub name: String,
    pub values: Vec<(u64, f64)>,
}

/// Grouping column keyed by curve id; labels are arbitrary integers.
#[derive(Debug, Clone)]
pub struct GroupingColumn {
    pub name: String,
    pub labels: Vec<(u64, i64)>,
}

/// Functional covariate table: a common grid plus one row of evaluations per curve.
#[derive(Debug, Clone)]
pub struct FunctionalTable {
    pub name: String,
    pub s_grid: Vec<f64>,
    pub rows: Vec<(u64, Vec<f64>)>,
}

/// Immutable container for responses, covariates and grouping factors.
/// Safe to share read-only across concurrent fits.
#[derive(Debug, Clone)]
pub struct FunctionalDataset {
    pub curves: Vec<CurveRecord>,
    pub scalar_covariates: BTreeMap<String, Vec<f64>>,
    pub functional_covariates: BTreeMap<String, FunctionalCovariate>,
    pub groupings: BTreeMap<String, GroupingFactor>,
}

/// Validate and assemble a dataset from long-format records and covariate tables.
///
/// Curves are sorted by curve id and by t within a curve; grouping levels are
/// re-encoded to 1..=M in increasing label order.
pub fn build_dataset(
    long_records: &[(u64, f64, f64)],
    scalar_table: Vec<ScalarColumn>,
    functional_tables: Vec<FunctionalTable>,
    grouping_table: Vec<GroupingColumn>,
) -> Result<FunctionalDataset> {
    if long_records.is_empty() {
        return Err(FammError::InvalidValue {
            context: "empty long-record list".into(),
        });
    }
    let mut per_curve: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
    for &(id, t, y) in long_records {
        if !t.is_finite() || !y.is_finite() {
            return Err(FammError::InvalidValue {
                context: format!("record for curve {id}"),
            });
        }
        per_curve.entry(id).or_default().push((t, y));
    }
    let mut curves = Vec::with_capacity(per_curve.len());
    for (id, mut obs) in per_curve {
        obs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for w in obs.windows(2) {
            if w[1].0 == w[0].0 {
                return Err(FammError::DuplicateObservation {
                    curve_id: id,
                    t: w[0].0,
                });
            }
        }
        curves.push(CurveRecord {
            curve_id: id,
            t: obs.iter().map(|o| o.0).collect(),
            y: obs.iter().map(|o| o.1).collect(),
        });
    }
    let ids: Vec<u64> = curves.iter().map(|c| c.curve_id).collect();
    let id_set: HashMap<u64, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();

    let mut scalar_covariates = BTreeMap::new();
    for col in scalar_table {
        let lut = check_table_ids(&col.name, col.values.iter().map(|v| v.0), &id_set)?;
        let mut values = Vec::with_capacity(ids.len());
        for &id in &ids {
            let &idx = lut.get(&id).ok_or_else(|| FammError::MissingCovariate {
                name: col.name.clone(),
                curve_id: id,
            })?;
            let v = col.values[idx].1;
            if !v.is_finite() {
                return Err(FammError::InvalidValue {
                    context: format!("scalar covariate `{}` for curve {id}", col.name),
                });
            }
            values.push(v);
        }
        scalar_covariates.insert(col.name, values);
    }

    let mut functional_covariates = BTreeMap::new();
    for table in functional_tables {
        let lut = check_table_ids(&table.name, table.rows.iter().map(|r| r.0), &id_set)?;
        let h = table.s_grid.len();
        let mut values = DMatrix::zeros(ids.len(), h);
        for (i, &id) in ids.iter().enumerate() {
            let &idx = lut.get(&id).ok_or_else(|| FammError::MissingCovariate {
                name: table.name.clone(),
                curve_id: id,
            })?;
            let row = &table.rows[idx].1;
            if row.len() != h {
                return Err(FammError::DimensionMismatch {
                    context: format!(
                        "functional covariate `{}` row for curve {id} has {} values, grid has {h}",
                        table.name,
                        row.len()
                    ),
                });
            }
            for (j, &v) in row.iter().enumerate() {
                values[(i, j)] = v;
            }
        }
        functional_covariates.insert(table.name, FunctionalCovariate::new(table.s_grid, values)?);
    }

    let mut groupings = BTreeMap::new();
    for col in grouping_table {
        let lut = check_table_ids(&col.name, col.labels.iter().map(|l| l.0), &id_set)?;
        let mut raw = Vec::with_capacity(ids.len());
        for &id in &ids {
            let &idx = lut.get(&id).ok_or_else(|| FammError::MissingCovariate {
                name: col.name.clone(),
                curve_id: id,
            })?;
            raw.push(col.labels[idx].1);
        }
        let mut distinct: Vec<i64> = raw.clone();
        distinct.sort_unstable();
        distinct.dedup();
        let encode: HashMap<i64, usize> = distinct
            .iter()
            .enumerate()
            .map(|(i, &lab)| (lab, i + 1))
            .collect();
        groupings.insert(
            col.name,
            GroupingFactor {
                levels: raw.iter().map(|lab| encode[lab]).collect(),
                m: distinct.len(),
                original_labels: distinct,
            },
        );
    }

    Ok(FunctionalDataset {
        curves,
        scalar_covariates,
        functional_covariates,
        groupings,
    })
}

fn check_table_ids(
    name: &str,
    table_ids: impl Iterator<Item = u64>,
    known: &HashMap<u64, usize>,
) -> Result<HashMap<u64, usize>> {
    let mut lut = HashMap::new();
    for (idx, id) in table_ids.enumerate() {
        if !known.contains_key(&id) {
            return Err(FammError::ParseError {
                location: format!("covariate table `{name}`"),
                message: format!("curve id {id} does not appear in the response records"),
            });
        }
        if lut.insert(id, idx).is_some() {
            return Err(FammError::ParseError {
                location: format!("covariate table `{name}`"),
                message: format!("duplicate row for curve id {id}"),
            });
        }
    }
    Ok(lut)
}

/// Subtract the cross-curve mean function from every row.
pub fn center_functional_covariate(x: &FunctionalCovariate) -> Result<FunctionalCovariate> {
    if x.centered {
        return Err(FammError::AlreadyCentered);
    }
    let mean = crate::linalg::column_means(&x.values);
    let mut values = x.values.clone();
    for mut row in values.row_iter_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v -= mean[j];
        }
    }
    Ok(FunctionalCovariate {
        s_grid: x.s_grid.clone(),
        values,
        mean_curve: Some(mean),
        centered: true,
    })
}

impl FunctionalDataset {
    pub fn n_curves(&self) -> usize {
        self.curves.len()
    }

    /// Total number of stacked observations Σ T_i.
    pub fn total_obs(&self) -> usize {
        self.curves.iter().map(|c| c.len()).sum()
    }

    /// Stacked response vector, curves in id order, t increasing within a curve.
    pub fn stacked_y(&self) -> DVector<f64> {
        let mut y = Vec::with_capacity(self.total_obs());
        for c in &self.curves {
            y.extend_from_slice(&c.y);
        }
        DVector::from_vec(y)
    }

    /// (curve index, within-curve index) for every stacked row.
    pub fn row_index(&self) -> Vec<(usize, usize)> {
        let mut idx = Vec::with_capacity(self.total_obs());
        for (i, c) in self.curves.iter().enumerate() {
            for l in 0..c.len() {
                idx.push((i, l));
            }
        }
        idx
    }

    /// The shared t grid when all curves are observed on identical grids.
    pub fn common_grid(&self) -> Option<Vec<f64>> {
        let first = &self.curves.first()?.t;
        for c in &self.curves[1..] {
            if c.t.len() != first.len()
                || c.t.iter().zip(first).any(|(a, b)| (a - b).abs() > 1e-12)
            {
                return None;
            }
        }
        Some(first.clone())
    }

    pub fn t_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for c in &self.curves {
            lo = lo.min(*c.t.first().unwrap());
            hi = hi.max(*c.t.last().unwrap());
        }
        (lo, hi)
    }

    pub fn scalar(&self, name: &str) -> Result<&[f64]> {
        self.scalar_covariates
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| FammError::MissingCovariate {
                name: name.into(),
                curve_id: 0,
            })
    }

    pub fn functional(&self, name: &str) -> Result<&FunctionalCovariate> {
        self.functional_covariates
            .get(name)
            .ok_or_else(|| FammError::MissingCovariate {
                name: name.into(),
                curve_id: 0,
            })
    }

    pub fn grouping(&self, name: &str) -> Result<&GroupingFactor> {
        self.groupings
            .get(name)
            .ok_or_else(|| FammError::MissingCovariate {
                name: name.into(),
                curve_id: 0,
            })
    }

    /// Center every not-yet-centered functional covariate, returning a new dataset.
    pub fn center_all_functionals(mut self) -> Self {
        let names: Vec<String> = self.functional_covariates.keys().cloned().collect();
        for name in names {
            let cov = &self.functional_covariates[&name];
            if !cov.centered {
                let centered = center_functional_covariate(cov).expect("not centered");
                self.functional_covariates.insert(name, centered);
            }
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_records() -> Vec<(u64, f64, f64)> {
        vec![(1, 0.0, 1.0), (1, 1.0, 2.0), (2, 0.0, 3.0)]
    }

    #[test]
    fn builds_two_curves_with_lengths() {
        let ds = build_dataset(&toy_records(), vec![], vec![], vec![]).unwrap();
        assert_eq!(ds.n_curves(), 2);
        assert_eq!(ds.curves[0].len(), 2);
        assert_eq!(ds.curves[1].len(), 1);
        assert_eq!(ds.total_obs(), 3);
        assert_eq!(ds.stacked_y().as_slice(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn grouping_levels_reencoded_contiguously() {
        let records = vec![(1, 0.0, 0.0), (2, 0.0, 0.0), (3, 0.0, 0.0)];
        let groupings = vec![GroupingColumn {
            name: "g".into(),
            labels: vec![(1, 7), (2, 7), (3, 9)],
        }];
        let ds = build_dataset(&records, vec![], vec![], groupings).unwrap();
        let g = ds.grouping("g").unwrap();
        assert_eq!(g.levels, vec![1, 1, 2]);
        assert_eq!(g.m, 2);
        assert_eq!(g.original_labels, vec![7, 9]);
    }

    #[test]
    fn duplicate_observation_rejected() {
        let records = vec![(1, 0.0, 1.0), (1, 0.0, 2.0)];
        let err = build_dataset(&records, vec![], vec![], vec![]).unwrap_err();
        assert!(matches!(err, FammError::DuplicateObservation { curve_id: 1, .. }));
    }

    #[test]
    fn missing_scalar_covariate_rejected() {
        let scalars = vec![ScalarColumn {
            name: "z".into(),
            values: vec![(1, 0.5)],
        }];
        let err = build_dataset(&toy_records(), scalars, vec![], vec![]).unwrap_err();
        assert!(matches!(err, FammError::MissingCovariate { .. }));
    }

    #[test]
    fn centering_small_example() {
        let x = FunctionalCovariate::new(
            vec![0.0, 1.0],
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 3.0, 3.0]),
        )
        .unwrap();
        let c = center_functional_covariate(&x).unwrap();
        assert_eq!(c.values, DMatrix::from_row_slice(2, 2, &[-1.0, -1.0, 1.0, 1.0]));
        assert_eq!(c.mean_curve.as_ref().unwrap().as_slice(), &[2.0, 2.0]);
        assert!(c.centered);
        assert!(matches!(
            center_functional_covariate(&c),
            Err(FammError::AlreadyCentered)
        ));
    }

    #[test]
    fn centering_single_row_gives_zeros() {
        let x = FunctionalCovariate::new(
            vec![0.0, 1.0, 2.0],
            DMatrix::from_row_slice(1, 3, &[4.0, 5.0, 6.0]),
        )
        .unwrap();
        let c = center_functional_covariate(&x).unwrap();
        assert!(c.values.amax() == 0.0);
        assert_eq!(c.mean_curve.as_ref().unwrap().as_slice(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn centered_column_means_vanish_and_uncentering_roundtrips() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let values = DMatrix::from_fn(20, 10, |_, _| rng.random::<f64>() * 4.0 - 2.0);
        let grid: Vec<f64> = (0..10).map(|j| j as f64).collect();
        let x = FunctionalCovariate::new(grid, values.clone()).unwrap();
        let c = center_functional_covariate(&x).unwrap();
        let means = crate::linalg::column_means(&c.values);
        assert!(means.amax() < 1e-12);
        // Un-centering reproduces the original values.
        let mean = c.mean_curve.as_ref().unwrap();
        let mut restored = c.values.clone();
        for mut row in restored.row_iter_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += mean[j];
            }
        }
        assert!((restored - values).amax() < 1e-12);
    }

    #[test]
    fn build_is_idempotent_on_its_own_output() {
        let ds = build_dataset(&toy_records(), vec![], vec![], vec![]).unwrap();
        let rebuilt_records: Vec<(u64, f64, f64)> = ds
            .curves
            .iter()
            .flat_map(|c| c.t.iter().zip(&c.y).map(|(&t, &y)| (c.curve_id, t, y)))
            .collect();
        let ds2 = build_dataset(&rebuilt_records, vec![], vec![], vec![]).unwrap();
        assert_eq!(ds.curves, ds2.curves);
    }
}
