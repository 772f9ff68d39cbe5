//! Distances between fingerprints and the matrices built from them.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::{solve_assignment, solve_transport};
use crate::probe::Fingerprint;

/// Squared costs below this are treated as exact zeros.
pub const COST_FLOOR: f64 = 1e-18;
/// Allowed asymmetry of a raw distance matrix.
pub const SYMMETRY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum MetricError {
    #[error("dimension mismatch: {0} vs {1} categories")]
    DimensionMismatch(usize, usize),
    #[error("fingerprint for `{0}` is empty")]
    Empty(String),
    #[error("column `{0}` has zero distance to every base model")]
    DegenerateColumn(String),
    #[error("matrices disagree on shape or model ids")]
    ShapeMismatch,
    #[error("no matrices to average")]
    NoMatrices,
    #[error("base model `{0}` is not in the matrix")]
    UnknownBase(String),
    #[error("invalid distance matrix: {0}")]
    InvalidMatrix(String),
    #[error("cannot write matrix: {0}")]
    Io(String),
}

/// Which fingerprint distance to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    W2,
    Jsd,
}

impl Metric {
    pub fn distance(self, a: &Fingerprint, b: &Fingerprint) -> Result<f64, MetricError> {
        match self {
            Metric::W2 => wasserstein2(a, b),
            Metric::Jsd => jsd(a, b),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::W2 => "w2",
            Metric::Jsd => "jsd",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "w2" | "wasserstein" => Ok(Metric::W2),
            "jsd" => Ok(Metric::Jsd),
            other => Err(format!("unknown metric `{other}` (expected w2 or jsd)")),
        }
    }
}

fn check_pair(a: &Fingerprint, b: &Fingerprint) -> Result<(), MetricError> {
    if a.is_empty() {
        return Err(MetricError::Empty(a.prompt_id.clone()));
    }
    if b.is_empty() {
        return Err(MetricError::Empty(b.prompt_id.clone()));
    }
    if a.dim() != b.dim() {
        return Err(MetricError::DimensionMismatch(a.dim(), b.dim()));
    }
    Ok(())
}

fn squared_costs(a: &Fingerprint, b: &Fingerprint) -> Vec<f64> {
    let mut cost = Vec::with_capacity(a.len() * b.len());
    for x in &a.samples {
        for y in &b.samples {
            let d: f64 = x
                .probs()
                .iter()
                .zip(y.probs())
                .map(|(p, q)| (p - q) * (p - q))
                .sum();
            cost.push(if d < COST_FLOOR { 0.0 } else { d });
        }
    }
    cost
}

/// W2 value plus how it was obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct W2Result {
    pub distance: f64,
    /// False when the two sample counts differed and the transportation solver was used.
    pub equal_sizes: bool,
}

/// Exact 2-Wasserstein distance between the uniform empirical measures of two fingerprints.
pub fn wasserstein2(a: &Fingerprint, b: &Fingerprint) -> Result<f64, MetricError> {
    wasserstein2_detailed(a, b).map(|r| r.distance)
}

pub fn wasserstein2_detailed(a: &Fingerprint, b: &Fingerprint) -> Result<W2Result, MetricError> {
    check_pair(a, b)?;
    let (n, m) = (a.len(), b.len());
    let cost = squared_costs(a, b);
    if n == m {
        let (_, total) = solve_assignment(&cost, n);
        Ok(W2Result {
            distance: (total / n as f64).max(0.0).sqrt(),
            equal_sizes: true,
        })
    } else {
        // Uniform weights 1/n and 1/m scaled to integers m/g and n/g.
        let g = gcd(n as u64, m as u64);
        let supply = vec![m as u64 / g; n];
        let demand = vec![n as u64 / g; m];
        let total = solve_transport(&supply, &demand, &cost);
        let mass = (n as u64 * m as u64 / g) as f64;
        Ok(W2Result {
            distance: (total / mass).max(0.0).sqrt(),
            equal_sizes: false,
        })
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn kl2(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).log2())
        .sum()
}

/// Jensen-Shannon divergence (base 2) between the mean distributions of two fingerprints.
pub fn jsd(a: &Fingerprint, b: &Fingerprint) -> Result<f64, MetricError> {
    check_pair(a, b)?;
    let p = a.mean();
    let q = b.mean();
    if p == q {
        return Ok(0.0);
    }
    let mid: Vec<f64> = p.iter().zip(&q).map(|(x, y)| 0.5 * (x + y)).collect();
    let value = 0.5 * kl2(&p, &mid) + 0.5 * kl2(&q, &mid);
    Ok(value.clamp(0.0, 1.0))
}

/// Square matrix of distances between models, rows and columns in `ids` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    ids: Vec<String>,
    values: Vec<Vec<f64>>,
}

impl DistanceMatrix {
    /// A raw distance matrix: zero diagonal, symmetric, finite and non-negative.
    pub fn new(ids: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self, MetricError> {
        let n = ids.len();
        if values.len() != n || values.iter().any(|r| r.len() != n) {
            return Err(MetricError::InvalidMatrix(format!(
                "expected {n} x {n} values"
            )));
        }
        for i in 0..n {
            if values[i][i] != 0.0 {
                return Err(MetricError::InvalidMatrix(format!(
                    "non-zero diagonal at {}",
                    ids[i]
                )));
            }
            for (j, &v) in values[i].iter().enumerate() {
                if !v.is_finite() || v < 0.0 {
                    return Err(MetricError::InvalidMatrix(format!(
                        "bad entry {v} at ({i}, {j})"
                    )));
                }
                if (v - values[j][i]).abs() > SYMMETRY_TOLERANCE {
                    return Err(MetricError::InvalidMatrix(format!(
                        "asymmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self { ids, values })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row][col]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Base model with the smallest entry in `col` (first in `base_ids` order on ties).
    pub fn argmin_in_column<'a>(&self, col: usize, base_ids: &'a [String]) -> Option<&'a str> {
        let mut best: Option<(&str, f64)> = None;
        for id in base_ids {
            let row = self.index_of(id)?;
            let v = self.values[row][col];
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((id.as_str(), v));
            }
        }
        best.map(|(id, _)| id)
    }

    /// CSV with a header row and a leading id column; values at 6 decimals.
    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["model".to_string()];
        header.extend(self.ids.iter().cloned());
        w.write_record(&header).expect("in-memory write");
        for (id, row) in self.ids.iter().zip(&self.values) {
            let mut record = vec![id.clone()];
            record.extend(row.iter().map(|v| format!("{v:.6}")));
            w.write_record(&record).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    /// Long-form `row,column,value` records at full precision, for plotting tools.
    pub fn to_heatmap_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["row", "column", "value"])
            .expect("in-memory write");
        for (r, row) in self.ids.iter().zip(&self.values) {
            for (c, v) in self.ids.iter().zip(row) {
                w.write_record([r.as_str(), c.as_str(), &format!("{v:e}")])
                    .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("matrix serializes")
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), MetricError> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| MetricError::Io(e.to_string()))
    }
}

/// Pairwise distance matrix over fingerprints of one prompt, one per model.
pub fn distance_matrix(
    fps: &[&Fingerprint],
    metric: Metric,
) -> Result<DistanceMatrix, MetricError> {
    let n = fps.len();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();
    let dists = pairs
        .par_iter()
        .map(|&(i, j)| metric.distance(fps[i], fps[j]))
        .collect::<Result<Vec<_>, _>>()?;
    let mut values = vec![vec![0.0; n]; n];
    for (&(i, j), d) in pairs.iter().zip(dists) {
        values[i][j] = d;
        values[j][i] = d;
    }
    DistanceMatrix::new(fps.iter().map(|f| f.model_id.clone()).collect(), values)
}

/// Divides each column by its largest distance to any base model.
///
/// The result is generally neither symmetric nor bounded by 1 outside the base rows.
pub fn normalize_columns(
    mat: &DistanceMatrix,
    base_ids: &[String],
) -> Result<DistanceMatrix, MetricError> {
    let base_rows = base_ids
        .iter()
        .map(|id| {
            mat.index_of(id)
                .ok_or_else(|| MetricError::UnknownBase(id.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let n = mat.len();
    let mut values = mat.values.clone();
    for col in 0..n {
        let norm = base_rows
            .iter()
            .map(|&r| mat.values[r][col])
            .fold(0.0f64, f64::max);
        if norm <= 0.0 {
            return Err(MetricError::DegenerateColumn(mat.ids[col].clone()));
        }
        for row in values.iter_mut() {
            row[col] /= norm;
        }
    }
    Ok(DistanceMatrix {
        ids: mat.ids.clone(),
        values,
    })
}

/// Element-wise mean of matrices over the same ids.
pub fn average_matrices(mats: &[DistanceMatrix]) -> Result<DistanceMatrix, MetricError> {
    let first = mats.first().ok_or(MetricError::NoMatrices)?;
    if mats.iter().any(|m| m.ids != first.ids) {
        return Err(MetricError::ShapeMismatch);
    }
    let n = first.len();
    let mut values = vec![vec![0.0; n]; n];
    for m in mats {
        for (acc, row) in values.iter_mut().zip(&m.values) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
    }
    let count = mats.len() as f64;
    values.iter_mut().flatten().for_each(|v| *v /= count);
    Ok(DistanceMatrix {
        ids: first.ids.clone(),
        values,
    })
}
