//! Delimited-text data files.
//!
//! Whitespace-separated columns with a header line. The first three columns
//! must be `area_id`, `y`, `offset`; a `trials` column follows for binomial
//! data; any remaining columns are covariates, identified by their header
//! names. Lines starting with `#` are ignored, so exported files can carry
//! provenance headers.

use std::path::Path;

use super::{Family, FamilyKind, ModelSpec};
use crate::error::{Error, Result};

/// Parsed contents of a data file, one row per area, ordered by `area_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    pub y: Vec<f64>,
    pub offset: Vec<f64>,
    pub trials: Option<Vec<f64>>,
    pub covariate_names: Vec<String>,
    /// Column-major: `covariates[c][k]` is covariate `c` in area `k`.
    pub covariates: Vec<Vec<f64>>,
}

impl DataSet {
    pub fn n_areas(&self) -> usize {
        self.y.len()
    }

    /// Reads a data file. Area ids must be exactly `0..n-1`, in any order;
    /// rows are sorted into id order.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

        let (header_no, header) = lines
            .next()
            .ok_or_else(|| Error::parse(path, 0, "empty data file"))?;
        let cols: Vec<&str> = header.split_whitespace().collect();
        if cols.len() < 3 || cols[0] != "area_id" || cols[1] != "y" || cols[2] != "offset" {
            return Err(Error::parse(
                path,
                header_no,
                "header must start with 'area_id y offset'",
            ));
        }
        let has_trials = cols.get(3) == Some(&"trials");
        let cov_start = if has_trials { 4 } else { 3 };
        let covariate_names: Vec<String> = cols[cov_start..].iter().map(|s| s.to_string()).collect();
        let n_cols = cols.len();

        let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
        for (no, line) in lines {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != n_cols {
                return Err(Error::parse(
                    path,
                    no,
                    format!("expected {n_cols} columns, found {}", fields.len()),
                ));
            }
            let id: usize = fields[0]
                .parse()
                .map_err(|_| Error::parse(path, no, format!("bad area_id '{}'", fields[0])))?;
            let mut values = Vec::with_capacity(n_cols - 1);
            for (c, field) in fields[1..].iter().enumerate() {
                let v: f64 = field.parse().map_err(|_| {
                    Error::parse(path, no, format!("bad value '{field}' in column '{}'", cols[c + 1]))
                })?;
                if !v.is_finite() {
                    return Err(Error::parse(
                        path,
                        no,
                        format!("non-finite value in column '{}'", cols[c + 1]),
                    ));
                }
                values.push(v);
            }
            rows.push((id, values));
        }
        if rows.is_empty() {
            return Err(Error::parse(path, header_no, "no data rows"));
        }

        let n = rows.len();
        rows.sort_by_key(|(id, _)| *id);
        for (k, (id, _)) in rows.iter().enumerate() {
            if *id != k {
                return Err(Error::parse(
                    path,
                    0,
                    format!("area ids must cover 0..{} exactly; problem near id {id}", n - 1),
                ));
            }
        }

        let col = |c: usize| -> Vec<f64> { rows.iter().map(|(_, v)| v[c]).collect() };
        let n_cov = covariate_names.len();
        Ok(Self {
            y: col(0),
            offset: col(1),
            trials: has_trials.then(|| col(2)),
            covariate_names,
            covariates: (0..n_cov).map(|c| col(cov_start - 1 + c)).collect(),
        })
    }

    /// Renders in the same format `read` accepts.
    pub fn write_string(&self) -> String {
        let mut out = String::from("area_id y offset");
        if self.trials.is_some() {
            out.push_str(" trials");
        }
        for name in &self.covariate_names {
            out.push(' ');
            out.push_str(name);
        }
        out.push('\n');
        for k in 0..self.n_areas() {
            out.push_str(&format!("{k} {} {}", self.y[k], self.offset[k]));
            if let Some(t) = &self.trials {
                out.push_str(&format!(" {}", t[k]));
            }
            for c in &self.covariates {
                out.push_str(&format!(" {}", c[k]));
            }
            out.push('\n');
        }
        out
    }

    /// Builds a model from the parsed columns. Binomial data must carry a
    /// trials column; the other families must not.
    pub fn into_spec(self, family: FamilyKind) -> Result<ModelSpec> {
        let family = match (family, self.trials) {
            (FamilyKind::Binomial, Some(trials)) => Family::Binomial { trials },
            (FamilyKind::Binomial, None) => {
                return Err(Error::Model(
                    "binomial family requires a trials column".into(),
                ))
            }
            (FamilyKind::Poisson, None) => Family::Poisson,
            (FamilyKind::Gaussian, None) => Family::Gaussian,
            (kind, Some(_)) => {
                return Err(Error::Model(format!(
                    "{} family does not take a trials column",
                    kind.name()
                )))
            }
        };
        ModelSpec::new(family, self.y, Some(self.offset), &self.covariates)
    }
}
