//! Principal components by power iteration with deflation, and the squared
//! prediction error (SPE) of a row against the retained subspace.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{DetectorId, DetectorVote};

const TOLERANCE: f64 = 1e-9;
const MAX_ITERATIONS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PcaParams {
    pub components: usize,
    pub spe_threshold: f64,
    /// Per-service SPE thresholds overriding `spe_threshold`.
    pub spe_thresholds: std::collections::BTreeMap<String, f64>,
}

impl Default for PcaParams {
    fn default() -> Self {
        PcaParams { components: 2, spe_threshold: 100.0, spe_thresholds: Default::default() }
    }
}

impl PcaParams {
    pub fn threshold_for(&self, service: &str) -> f64 {
        self.spe_thresholds.get(service).copied().unwrap_or(self.spe_threshold)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PcaError {
    #[error("need at least 2 columns, got {0}")]
    TooFewColumns(usize),
    #[error("need at least as many rows as columns ({cols}), got {rows}")]
    TooFewRows { rows: usize, cols: usize },
    #[error("row {0} has the wrong width")]
    Ragged(usize),
    #[error("components must be in 1..={max}, got {got}")]
    Components { got: usize, max: usize },
}

#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit eigenvectors, in decreasing eigenvalue order.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub total_variance: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

/// Population covariance of the column-centered rows.
#[allow(clippy::needless_range_loop)]
pub fn covariance(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = rows.len() as f64;
    let d = rows.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![vec![0.0; d]; d];
    for r in rows {
        for i in 0..d {
            let di = r[i] - mean[i];
            for j in i..d {
                cov[i][j] += di * (r[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i][j] /= n;
            cov[j][i] = cov[i][j];
        }
    }
    (mean, cov)
}

impl Pca {
    pub fn fit(rows: &[Vec<f64>], k: usize) -> Result<Self, PcaError> {
        let d = rows.first().map_or(0, Vec::len);
        if d < 2 {
            return Err(PcaError::TooFewColumns(d));
        }
        if rows.len() < d {
            return Err(PcaError::TooFewRows { rows: rows.len(), cols: d });
        }
        if let Some(i) = rows.iter().position(|r| r.len() != d) {
            return Err(PcaError::Ragged(i));
        }
        if k == 0 || k > d {
            return Err(PcaError::Components { got: k, max: d });
        }

        let (mean, cov) = covariance(rows);
        let total_variance: f64 = (0..d).map(|i| cov[i][i]).sum();
        let negligible = 1e-12 * total_variance.max(1.0);

        let mut deflated = cov.clone();
        let mut components: Vec<Vec<f64>> = Vec::new();
        let mut eigenvalues = Vec::new();
        for _ in 0..k {
            let mut v: Vec<f64> = (0..d).map(|i| ((i + 2) as f64).sqrt()).collect();
            orthogonalize(&mut v, &components);
            let n0 = norm(&v);
            if n0 < 1e-12 {
                break;
            }
            v.iter_mut().for_each(|x| *x /= n0);

            let mut converged_to_zero = false;
            for _ in 0..MAX_ITERATIONS {
                let mut w = mat_vec(&deflated, &v);
                orthogonalize(&mut w, &components);
                let nw = norm(&w);
                if nw < negligible {
                    converged_to_zero = true;
                    break;
                }
                w.iter_mut().for_each(|x| *x /= nw);
                let delta = w.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let flipped = w.iter().zip(&v).map(|(a, b)| (a + b).powi(2)).sum::<f64>().sqrt();
                v = w;
                if delta.min(flipped) < TOLERANCE {
                    break;
                }
            }
            if converged_to_zero {
                break;
            }
            let lambda = dot(&v, &mat_vec(&cov, &v));
            if lambda <= negligible {
                break;
            }
            for i in 0..d {
                for j in 0..d {
                    deflated[i][j] -= lambda * v[i] * v[j];
                }
            }
            eigenvalues.push(lambda);
            components.push(v);
        }

        Ok(Pca { mean, components, eigenvalues, total_variance })
    }

    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        if self.total_variance <= 0.0 {
            return vec![0.0; self.eigenvalues.len()];
        }
        self.eigenvalues.iter().map(|l| l / self.total_variance).collect()
    }

    /// Squared distance from `row` to its projection onto the components.
    pub fn spe(&self, row: &[f64]) -> f64 {
        let centered: Vec<f64> = row.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        let mut residual = centered.clone();
        for c in &self.components {
            let p = dot(&centered, c);
            residual.iter_mut().zip(c).for_each(|(r, ci)| *r -= p * ci);
        }
        dot(&residual, &residual).max(0.0)
    }
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let p = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, bi)| *x -= p * bi);
    }
}

/// Fits on the whole matrix and scores its most recent (last) row.
pub fn detect_pca(rows: &[Vec<f64>], k: usize, spe_threshold: f64) -> Result<DetectorVote, PcaError> {
    let model = Pca::fit(rows, k)?;
    let spe = model.spe(rows.last().expect("fit checked rows"));
    Ok(DetectorVote { detector_id: DetectorId::Pca, anomalous: spe > spe_threshold, score: spe })
}
