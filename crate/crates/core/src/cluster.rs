//! Affinity propagation over a per-image similarity matrix.
//!
//! Exemplars emerge from damped responsibility/availability message passing;
//! the preference (the diagonal self-similarity) controls how many clusters
//! form, without a preset count.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Symmetric similarity matrix with the preference on the diagonal.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub s: Array2<f64>,
}

impl SimilarityMatrix {
    /// Assemble from a raw pair scorer: off-diagonal entries are the
    /// symmetrized scores (s(i,j) + s(j,i)) / 2, the diagonal is the
    /// preference. Non-finite scores are an error naming the pair.
    pub fn build<F>(n: usize, mut scorer: F, preference: f64) -> Result<Self>
    where
        F: FnMut(usize, usize) -> Result<f64>,
    {
        let mut s = Array2::zeros((n, n));
        for i in 0..n {
            s[(i, i)] = preference;
            for j in (i + 1)..n {
                let ij = scorer(i, j)?;
                let ji = scorer(j, i)?;
                if !ij.is_finite() || !ji.is_finite() {
                    return Err(Error::invalid(format!(
                        "non-finite similarity for pair ({i}, {j})"
                    )));
                }
                let v = 0.5 * (ij + ji);
                s[(i, j)] = v;
                s[(j, i)] = v;
            }
        }
        Ok(SimilarityMatrix { s })
    }

    /// Wrap an existing symmetric matrix, resetting the diagonal.
    pub fn from_matrix(mut s: Array2<f64>, preference: f64) -> Result<Self> {
        if s.nrows() != s.ncols() {
            return Err(Error::Dimension("similarity matrix must be square".into()));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("similarity matrix has non-finite entries"));
        }
        for i in 0..s.nrows() {
            s[(i, i)] = preference;
        }
        Ok(SimilarityMatrix { s })
    }

    pub fn n(&self) -> usize {
        self.s.nrows()
    }

    pub fn set_preference(&mut self, preference: f64) {
        for i in 0..self.n() {
            self.s[(i, i)] = preference;
        }
    }

    /// Off-diagonal values in row-major order (for preference bounds).
    pub fn off_diagonal(&self) -> Vec<f64> {
        let n = self.n();
        let mut out = Vec::with_capacity(n * n.saturating_sub(1));
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    out.push(self.s[(i, j)]);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct APConfig {
    /// Damping factor in [0, 1).
    pub damping: f64,
    pub max_iterations: usize,
    /// Iterations the exemplar set must stay unchanged to declare
    /// convergence.
    pub convergence_window: usize,
}

impl Default for APConfig {
    fn default() -> Self {
        APConfig {
            damping: 0.5,
            max_iterations: 200,
            convergence_window: 15,
        }
    }
}

/// Exemplar-based partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clustering {
    /// Exemplar index assigned to each point.
    pub exemplar_of: Vec<usize>,
    /// Clusters as member index lists, ordered by exemplar index.
    pub clusters: Vec<Vec<usize>>,
    pub iterations: usize,
    pub converged: bool,
}

impl Clustering {
    pub fn n_points(&self) -> usize {
        self.exemplar_of.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Cluster label per point, in cluster order.
    pub fn labels(&self) -> Vec<usize> {
        let mut labels = vec![0usize; self.exemplar_of.len()];
        for (c, members) in self.clusters.iter().enumerate() {
            for &m in members {
                labels[m] = c;
            }
        }
        labels
    }
}

/// Responsibility and availability messages.
#[derive(Debug, Clone)]
pub struct APState {
    pub r: Array2<f64>,
    pub a: Array2<f64>,
    pub iteration: usize,
}

impl APState {
    pub fn new(n: usize) -> Self {
        APState {
            r: Array2::zeros((n, n)),
            a: Array2::zeros((n, n)),
            iteration: 0,
        }
    }

    /// Damped update r(i,j) = s(i,j) - max_{j' != j} (a(i,j') + s(i,j')).
    pub fn update_responsibilities(&mut self, s: &Array2<f64>, lambda: f64) {
        let n = s.nrows();
        for i in 0..n {
            let (mut top1, mut top2, mut top1_idx) = (f64::NEG_INFINITY, f64::NEG_INFINITY, 0);
            for j in 0..n {
                let v = self.a[(i, j)] + s[(i, j)];
                if v > top1 {
                    top2 = top1;
                    top1 = v;
                    top1_idx = j;
                } else if v > top2 {
                    top2 = v;
                }
            }
            for j in 0..n {
                let competing = if j == top1_idx { top2 } else { top1 };
                let new = s[(i, j)] - competing;
                self.r[(i, j)] = (1.0 - lambda) * new + lambda * self.r[(i, j)];
            }
        }
    }

    /// Damped update a(i,j) = min(0, r(j,j) + Σ_{i' not in {i,j}}
    /// max(0, r(i',j))), with self-availability a(j,j) =
    /// Σ_{i' != j} max(0, r(i',j)).
    pub fn update_availabilities(&mut self, lambda: f64) {
        let n = self.r.nrows();
        for j in 0..n {
            let mut col_pos = 0.0;
            for i in 0..n {
                if i != j {
                    col_pos += self.r[(i, j)].max(0.0);
                }
            }
            for i in 0..n {
                let new = if i == j {
                    col_pos
                } else {
                    (self.r[(j, j)] + col_pos - self.r[(i, j)].max(0.0)).min(0.0)
                };
                self.a[(i, j)] = (1.0 - lambda) * new + lambda * self.a[(i, j)];
            }
        }
    }

    /// Points whose self-messages are positive.
    pub fn exemplars(&self) -> Vec<usize> {
        (0..self.r.nrows())
            .filter(|&k| self.r[(k, k)] + self.a[(k, k)] > 0.0)
            .collect()
    }
}

/// Run affinity propagation.
///
/// Exemplars are points with positive self-message; every point joins its
/// most similar exemplar (ties to the smaller index). Terminates when the
/// exemplar set is non-empty and stable for the convergence window, or at
/// max_iterations. If no exemplar emerges, all points form one cluster
/// around the point with the maximal self-message.
pub fn affinity_propagation(sim: &SimilarityMatrix, cfg: &APConfig) -> Result<Clustering> {
    if !(0.0..1.0).contains(&cfg.damping) {
        return Err(Error::invalid("damping must be in [0, 1)"));
    }
    if cfg.max_iterations == 0 || cfg.convergence_window == 0 {
        return Err(Error::invalid("iteration counts must be positive"));
    }
    let n = sim.n();
    if n == 0 {
        return Ok(Clustering {
            exemplar_of: vec![],
            clusters: vec![],
            iterations: 0,
            converged: true,
        });
    }
    if n == 1 {
        return Ok(Clustering {
            exemplar_of: vec![0],
            clusters: vec![vec![0]],
            iterations: 0,
            converged: true,
        });
    }

    let s = &sim.s;
    let mut state = APState::new(n);
    let mut exemplars: Vec<usize> = Vec::new();
    let mut stable = 0usize;
    let mut converged = false;

    for it in 1..=cfg.max_iterations {
        state.iteration = it;
        state.update_responsibilities(s, cfg.damping);
        state.update_availabilities(cfg.damping);

        let current = state.exemplars();
        if current == exemplars {
            stable += 1;
        } else {
            exemplars = current;
            stable = 1;
        }
        if stable >= cfg.convergence_window && !exemplars.is_empty() {
            converged = true;
            break;
        }
    }

    if exemplars.is_empty() {
        // degenerate: one cluster around the strongest self-message
        let mut best = 0;
        for k in 1..n {
            if state.r[(k, k)] + state.a[(k, k)] > state.r[(best, best)] + state.a[(best, best)] {
                best = k;
            }
        }
        return Ok(Clustering {
            exemplar_of: vec![best; n],
            clusters: vec![(0..n).collect()],
            iterations: state.iteration,
            converged: false,
        });
    }

    let mut exemplar_of = vec![0usize; n];
    for i in 0..n {
        let mut best = exemplars[0];
        for &k in &exemplars {
            if s[(i, k)] > s[(i, best)] {
                best = k;
            }
        }
        exemplar_of[i] = best;
    }
    for &k in &exemplars {
        exemplar_of[k] = k;
    }
    let mut clusters: Vec<Vec<usize>> = Vec::with_capacity(exemplars.len());
    for &k in &exemplars {
        clusters.push((0..n).filter(|&i| exemplar_of[i] == k).collect());
    }
    Ok(Clustering {
        exemplar_of,
        clusters,
        iterations: state.iteration,
        converged,
    })
}

/// Median of a slice (midpoint of the two central order statistics).
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let m = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[m]
    } else {
        0.5 * (sorted[m - 1] + sorted[m])
    }
}
