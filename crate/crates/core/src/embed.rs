//! Fixed-length entity feature vectors.
//!
//! Two families: the mean of the per-token word vectors (WEA), and Fisher
//! vectors of the token set under a diagonal Gaussian mixture fitted to the
//! word-vector sample, optionally PCA-reduced. Presets mirror the usual
//! 300-dimensional word vectors with 30 mixture components (Fisher dimension
//! 300 * 30 * 2 = 18000) reduced to 4096.

use std::collections::HashMap;
use std::io::BufRead;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Entity;
use crate::error::{Error, Result};

/// Minimum allowed mixture scale (standard deviation).
pub const SCALE_FLOOR: f64 = 1e-4;

/// Vector kinds produced along the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VectorKind {
    Wea,
    Fv,
    FvPca,
    Cca,
}

/// An entity's feature vector.
#[derive(Debug, Clone)]
pub struct EntityVector {
    /// Within-image entity key (see [`Entity::key`]).
    pub key: String,
    pub kind: VectorKind,
    pub values: Array1<f64>,
    /// True when no token had a vector and the result is the zero vector.
    pub oov: bool,
}

/// Token to vector lookup with a fixed dimension.
#[derive(Debug, Clone)]
pub struct WordVectorTable {
    dim: usize,
    tokens: Vec<String>,
    vectors: Vec<Array1<f64>>,
    index: HashMap<String, usize>,
}

impl WordVectorTable {
    /// Load text lines `<token> <f1> ... <fD>`. The first line fixes D;
    /// duplicate tokens keep their first occurrence.
    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self> {
        let mut table = WordVectorTable {
            dim: 0,
            tokens: Vec::new(),
            vectors: Vec::new(),
            index: HashMap::new(),
        };
        for (idx, line) in reader.lines().enumerate() {
            let lineno = idx + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let token = parts
                .next()
                .ok_or_else(|| Error::parse(lineno, "missing token"))?
                .to_lowercase();
            let values: Vec<f64> = parts
                .map(|p| {
                    p.parse::<f64>()
                        .map_err(|_| Error::parse(lineno, format!("non-numeric field '{p}'")))
                })
                .collect::<Result<_>>()?;
            if values.is_empty() {
                return Err(Error::parse(lineno, "no vector components"));
            }
            if table.dim == 0 {
                table.dim = values.len();
            } else if values.len() != table.dim {
                return Err(Error::parse(
                    lineno,
                    format!("expected {} components, got {}", table.dim, values.len()),
                ));
            }
            if !table.index.contains_key(&token) {
                table.index.insert(token.clone(), table.vectors.len());
                table.tokens.push(token);
                table.vectors.push(Array1::from_vec(values));
            }
        }
        if table.vectors.is_empty() {
            return Err(Error::invalid("word vector table is empty"));
        }
        Ok(table)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Case-folded lookup.
    pub fn get(&self, token: &str) -> Option<ArrayView1<'_, f64>> {
        self.index
            .get(&token.to_lowercase())
            .map(|&i| self.vectors[i].view())
    }

    /// Tokens in file order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Vectors of an entity's normalized tokens that are in vocabulary.
    pub fn entity_token_vectors(&self, e: &Entity) -> Vec<ArrayView1<'_, f64>> {
        e.normalized_tokens
            .iter()
            .filter_map(|t| self.get(t))
            .collect()
    }
}

/// Mean of the in-vocabulary token vectors; zero vector with the OOV flag
/// when nothing is found.
pub fn embed_average(e: &Entity, table: &WordVectorTable) -> EntityVector {
    let found = table.entity_token_vectors(e);
    let mut values = Array1::zeros(table.dim());
    let oov = found.is_empty();
    if !oov {
        for v in &found {
            values += v;
        }
        values /= found.len() as f64;
    }
    EntityVector {
        key: e.key(),
        kind: VectorKind::Wea,
        values,
        oov,
    }
}

/// Diagonal Gaussian mixture over word vectors.
#[derive(Debug, Clone)]
pub struct MixtureModel {
    /// Component weights, positive, summing to one.
    pub weights: Array1<f64>,
    /// K x D component locations.
    pub means: Array2<f64>,
    /// K x D per-dimension standard deviations, floored at [`SCALE_FLOOR`].
    pub scales: Array2<f64>,
    /// Training log-likelihood after each EM iteration.
    pub log_likelihoods: Vec<f64>,
}

impl MixtureModel {
    pub fn k(&self) -> usize {
        self.means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// Log density of each component at `x` plus the log weight.
    fn weighted_log_densities(&self, x: &ArrayView1<f64>) -> Array1<f64> {
        let d = self.dim() as f64;
        let mut out = Array1::zeros(self.k());
        for k in 0..self.k() {
            let mut log_det = 0.0;
            let mut quad = 0.0;
            for j in 0..self.dim() {
                let s = self.scales[(k, j)];
                let z = (x[j] - self.means[(k, j)]) / s;
                log_det += s.ln();
                quad += z * z;
            }
            out[k] = self.weights[k].ln()
                - log_det
                - 0.5 * quad
                - 0.5 * d * (2.0 * std::f64::consts::PI).ln();
        }
        out
    }

    /// Posterior responsibilities and the log density at `x`.
    pub fn posteriors(&self, x: &ArrayView1<f64>) -> (Array1<f64>, f64) {
        let logs = self.weighted_log_densities(x);
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs = logs.mapv(|l| (l - m).exp());
        let z: f64 = probs.sum();
        probs /= z;
        (probs, m + z.ln())
    }
}

/// Fit a diagonal Gaussian mixture by EM from k-means++-style seeding.
///
/// Runs until the relative log-likelihood improvement drops below 1e-6 or
/// 200 iterations. Scales that underflow are floored at [`SCALE_FLOOR`]
/// with a warning.
pub fn fit_mixture(sample: &Array2<f64>, k: usize, seed: u64) -> Result<MixtureModel> {
    let n = sample.nrows();
    let d = sample.ncols();
    if k == 0 {
        return Err(Error::invalid("mixture needs at least one component"));
    }
    if n < k {
        return Err(Error::invalid(format!(
            "sample size {n} is below component count {k}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = kmeanspp_centers(sample, k, &mut rng);

    // global per-dimension variance as the initial scale
    let mean = sample.mean_axis(Axis(0)).unwrap();
    let mut global_var = Array1::<f64>::zeros(d);
    for row in sample.rows() {
        for j in 0..d {
            let diff = row[j] - mean[j];
            global_var[j] += diff * diff;
        }
    }
    global_var /= n as f64;
    let init_scale = global_var.mapv(|v| v.sqrt().max(SCALE_FLOOR));

    let mut model = MixtureModel {
        weights: Array1::from_elem(k, 1.0 / k as f64),
        means: {
            let mut m = Array2::zeros((k, d));
            for (i, &c) in centers.iter().enumerate() {
                m.row_mut(i).assign(&sample.row(c));
            }
            m
        },
        scales: {
            let mut s = Array2::zeros((k, d));
            for i in 0..k {
                s.row_mut(i).assign(&init_scale);
            }
            s
        },
        log_likelihoods: Vec::new(),
    };

    let mut prev_ll = f64::NEG_INFINITY;
    for _ in 0..200 {
        // E-step
        let mut resp = Array2::<f64>::zeros((n, k));
        let mut ll = 0.0;
        for (i, row) in sample.rows().into_iter().enumerate() {
            let (post, log_density) = model.posteriors(&row);
            resp.row_mut(i).assign(&post);
            ll += log_density;
        }
        model.log_likelihoods.push(ll);

        // M-step
        let nk = resp.sum_axis(Axis(0));
        for c in 0..k {
            let total = nk[c].max(1e-300);
            model.weights[c] = nk[c] / n as f64;
            let mut mu = Array1::<f64>::zeros(d);
            for (i, row) in sample.rows().into_iter().enumerate() {
                mu.scaled_add(resp[(i, c)], &row);
            }
            mu /= total;
            let mut var = Array1::<f64>::zeros(d);
            for (i, row) in sample.rows().into_iter().enumerate() {
                for j in 0..d {
                    let diff = row[j] - mu[j];
                    var[j] += resp[(i, c)] * diff * diff;
                }
            }
            var /= total;
            for j in 0..d {
                let mut s = var[j].sqrt();
                if s < SCALE_FLOOR {
                    log::warn!("mixture component {c} dim {j}: scale underflow, flooring");
                    s = SCALE_FLOOR;
                }
                model.scales[(c, j)] = s;
                model.means[(c, j)] = mu[j];
            }
        }
        // guard against weight drift
        let wsum: f64 = model.weights.sum();
        model.weights /= wsum;

        if prev_ll.is_finite() {
            let rel = (ll - prev_ll) / prev_ll.abs().max(1e-12);
            if rel.abs() < 1e-6 {
                break;
            }
        }
        prev_ll = ll;
    }
    Ok(model)
}

fn kmeanspp_centers(sample: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = sample.nrows();
    let mut centers = vec![rng.gen_range(0..n)];
    let mut dist2 = vec![f64::INFINITY; n];
    while centers.len() < k {
        let last = *centers.last().unwrap();
        for i in 0..n {
            let d2: f64 = sample
                .row(i)
                .iter()
                .zip(sample.row(last).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dist2[i] = dist2[i].min(d2);
        }
        let total: f64 = dist2.iter().sum();
        let next = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d2) in dist2.iter().enumerate() {
                target -= d2;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centers.push(next);
    }
    centers
}

/// Fisher-vector encode a set of token vectors under a fitted mixture.
///
/// Concatenates the normalized location and scale gradients (length
/// 2 * K * D), then applies signed square root and L2 normalization.
pub fn encode_fisher(
    token_vectors: &[ArrayView1<f64>],
    model: &MixtureModel,
) -> Result<Array1<f64>> {
    if token_vectors.is_empty() {
        return Err(Error::invalid("no token vectors to encode"));
    }
    let k = model.k();
    let d = model.dim();
    for v in token_vectors {
        if v.len() != d {
            return Err(Error::Dimension(format!(
                "token vector has length {}, mixture dimension is {d}",
                v.len()
            )));
        }
    }
    let t = token_vectors.len() as f64;
    let mut g_mean = Array2::<f64>::zeros((k, d));
    let mut g_scale = Array2::<f64>::zeros((k, d));
    for x in token_vectors {
        let (post, _) = model.posteriors(x);
        for c in 0..k {
            let gamma = post[c];
            for j in 0..d {
                let z = (x[j] - model.means[(c, j)]) / model.scales[(c, j)];
                g_mean[(c, j)] += gamma * z;
                g_scale[(c, j)] += gamma * (z * z - 1.0);
            }
        }
    }
    let mut out = Array1::<f64>::zeros(2 * k * d);
    for c in 0..k {
        let w = model.weights[c];
        for j in 0..d {
            out[c * d + j] = g_mean[(c, j)] / (t * w.sqrt());
            out[k * d + c * d + j] = g_scale[(c, j)] / (t * (2.0 * w).sqrt());
        }
    }
    // signed square root, then L2
    out.mapv_inplace(|v| v.signum() * v.abs().sqrt());
    let norm = out.dot(&out).sqrt();
    if norm > 1e-12 {
        out /= norm;
    }
    Ok(out)
}

/// Orthonormal projection onto the top principal components.
#[derive(Debug, Clone)]
pub struct PCAProjection {
    pub mean: Array1<f64>,
    /// out_dim x D, rows orthonormal.
    pub components: Array2<f64>,
    /// Variance captured by each kept component, descending.
    pub eigenvalues: Array1<f64>,
}

impl PCAProjection {
    pub fn out_dim(&self) -> usize {
        self.components.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.components.ncols()
    }
}

/// Fit PCA on sample rows via the covariance (or Gram, when n < D)
/// eigendecomposition. Component signs are fixed so the entry of largest
/// magnitude is positive.
pub fn fit_pca(sample: &Array2<f64>, out_dim: usize) -> Result<PCAProjection> {
    let n = sample.nrows();
    let d = sample.ncols();
    if out_dim == 0 || out_dim > n.min(d) {
        return Err(Error::invalid(format!(
            "PCA output dimension {out_dim} must be in 1..=min(samples={n}, dim={d})"
        )));
    }
    let mean = sample.mean_axis(Axis(0)).unwrap();
    let mut centered = sample.clone();
    for mut row in centered.rows_mut() {
        row -= &mean;
    }
    let denom = (n.max(2) - 1) as f64;

    let (eigvals, components) = if d <= n {
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for i in 0..n {
            for a in 0..d {
                for b in a..d {
                    cov[(a, b)] += centered[(i, a)] * centered[(i, b)];
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                let v = cov[(a, b)] / denom;
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
        }
        let eig = cov.symmetric_eigen();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut comps = Array2::<f64>::zeros((out_dim, d));
        let mut vals = Array1::<f64>::zeros(out_dim);
        for (r, &idx) in order.iter().take(out_dim).enumerate() {
            vals[r] = eig.eigenvalues[idx].max(0.0);
            for c in 0..d {
                comps[(r, c)] = eig.eigenvectors[(c, idx)];
            }
        }
        (vals, comps)
    } else {
        // Gram trick: eigenvectors of the n x n Gram matrix
        let x = DMatrix::from_fn(n, d, |i, j| centered[(i, j)]);
        let gram = &x * x.transpose() / denom;
        let eig = gram.symmetric_eigen();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut comps = Array2::<f64>::zeros((out_dim, d));
        let mut vals = Array1::<f64>::zeros(out_dim);
        for (r, &idx) in order.iter().take(out_dim).enumerate() {
            let lambda = eig.eigenvalues[idx].max(0.0);
            vals[r] = lambda;
            // component = X^T u / sqrt(lambda * denom)
            let u = eig.eigenvectors.column(idx);
            let scale = (lambda * denom).sqrt();
            if scale > 1e-300 {
                for c in 0..d {
                    let mut acc = 0.0;
                    for i in 0..n {
                        acc += centered[(i, c)] * u[i];
                    }
                    comps[(r, c)] = acc / scale;
                }
            }
        }
        (vals, comps)
    };

    let mut components = components;
    for mut row in components.rows_mut() {
        let (mut best, mut best_abs) = (0.0, 0.0);
        for &v in row.iter() {
            if v.abs() > best_abs {
                best_abs = v.abs();
                best = v;
            }
        }
        if best < 0.0 {
            row.mapv_inplace(|v| -v);
        }
    }
    Ok(PCAProjection {
        mean,
        components,
        eigenvalues: eigvals,
    })
}

/// Center and project a vector.
pub fn apply_pca(v: &ArrayView1<f64>, proj: &PCAProjection) -> Result<Array1<f64>> {
    if v.len() != proj.input_dim() {
        return Err(Error::Dimension(format!(
            "vector length {} does not match PCA input dim {}",
            v.len(),
            proj.input_dim()
        )));
    }
    let centered = v - &proj.mean;
    Ok(proj.components.dot(&centered))
}

/// Cosine similarity; zero by convention if either vector is zero.
pub fn cosine_similarity(a: &ArrayView1<f64>, b: &ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "cosine over lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(a.dot(b) / (na * nb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{normalize_entity, parse_annotations, StopWordList};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn table(text: &str) -> WordVectorTable {
        WordVectorTable::from_reader(text.as_bytes()).unwrap()
    }

    #[test]
    fn loads_word_vectors() {
        let t = table("red 1.0 0.0\nblue 0.0 1.0\n");
        assert_eq!(t.dim(), 2);
        assert_eq!(t.len(), 2);
        assert_eq!(t.get("red").unwrap().to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn duplicate_token_keeps_first() {
        let t = table("red 1.0 0.0\nred 9.0 9.0\n");
        assert_eq!(t.get("red").unwrap().to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn rejects_inconsistent_dimension() {
        let err = WordVectorTable::from_reader("red 1.0 0.0\nblue 0.5\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn rejects_non_numeric() {
        let err = WordVectorTable::from_reader("red 1.0 oops\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    fn toy_entity(markup: &str) -> Entity {
        let line = format!("img\t0\t{markup}");
        let (_, ents) = parse_annotations(line.as_bytes()).unwrap();
        normalize_entity(&ents[0], &StopWordList::bundled())
    }

    #[test]
    fn average_is_token_mean() {
        let t = table("red 1.0 0.0\njersey 0.0 1.0\n");
        let e = toy_entity("[/EN#1/clothing a red jersey]");
        let v = embed_average(&e, &t);
        assert_eq!(v.values.to_vec(), vec![0.5, 0.5]);
        assert!(!v.oov);
    }

    #[test]
    fn single_token_average_is_identity() {
        let t = table("man 0.25 -0.5\n");
        let e = toy_entity("[/EN#1/people a man]");
        let v = embed_average(&e, &t);
        assert_eq!(v.values.to_vec(), vec![0.25, -0.5]);
    }

    #[test]
    fn all_oov_flags_zero_vector() {
        let t = table("red 1.0 0.0\n");
        let e = toy_entity("[/EN#1/animals a zebra]");
        let v = embed_average(&e, &t);
        assert!(v.oov);
        assert_eq!(v.values.to_vec(), vec![0.0, 0.0]);
    }

    fn two_clouds(seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        for i in 0..60 {
            let base = if i % 2 == 0 { 0.0 } else { 10.0 };
            rows.push([
                base + rng.gen_range(-0.3..0.3),
                base + rng.gen_range(-0.3..0.3),
            ]);
        }
        Array2::from_shape_vec((60, 2), rows.concat()).unwrap()
    }

    #[test]
    fn mixture_finds_planted_clouds() {
        let data = two_clouds(7);
        // oracle: closed-form means of the planted clusters
        let mut lo = [0.0; 2];
        let mut hi = [0.0; 2];
        let (mut nlo, mut nhi) = (0.0, 0.0);
        for row in data.rows() {
            if row[0] < 5.0 {
                lo[0] += row[0];
                lo[1] += row[1];
                nlo += 1.0;
            } else {
                hi[0] += row[0];
                hi[1] += row[1];
                nhi += 1.0;
            }
        }
        let lo = [lo[0] / nlo, lo[1] / nlo];
        let hi = [hi[0] / nhi, hi[1] / nhi];

        let model = fit_mixture(&data, 2, 3).unwrap();
        let mut found_lo = false;
        let mut found_hi = false;
        for c in 0..2 {
            let m = [model.means[(c, 0)], model.means[(c, 1)]];
            if (m[0] - lo[0]).abs() < 0.1 && (m[1] - lo[1]).abs() < 0.1 {
                found_lo = true;
            }
            if (m[0] - hi[0]).abs() < 0.1 && (m[1] - hi[1]).abs() < 0.1 {
                found_hi = true;
            }
        }
        assert!(found_lo && found_hi, "means {:?}", model.means);
    }

    #[test]
    fn single_component_matches_sample_mean() {
        let data = two_clouds(11);
        let model = fit_mixture(&data, 1, 0).unwrap();
        let mean = data.mean_axis(Axis(0)).unwrap();
        for j in 0..2 {
            assert_abs_diff_eq!(model.means[(0, j)], mean[j], epsilon = 1e-9);
        }
    }

    #[test]
    fn mixture_fit_is_deterministic() {
        let data = two_clouds(5);
        let a = fit_mixture(&data, 3, 42).unwrap();
        let b = fit_mixture(&data, 3, 42).unwrap();
        assert_eq!(a.means, b.means);
        assert_eq!(a.scales, b.scales);
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.log_likelihoods, b.log_likelihoods);
    }

    #[test]
    fn mixture_log_likelihood_is_non_decreasing() {
        for seed in 0..5 {
            let data = two_clouds(seed);
            let model = fit_mixture(&data, 3, seed).unwrap();
            for w in model.log_likelihoods.windows(2) {
                assert!(
                    w[1] >= w[0] - 1e-9 * (1.0 + w[0].abs()),
                    "log-likelihood dropped: {} -> {}",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn mixture_rejects_undersized_sample() {
        let data = Array2::<f64>::zeros((2, 2));
        assert!(fit_mixture(&data, 3, 0).is_err());
    }

    #[test]
    fn fisher_length_is_2kd() {
        let data = two_clouds(1);
        let model = fit_mixture(&data, 3, 1).unwrap();
        let toks = [data.row(0), data.row(1)];
        let fv = encode_fisher(&toks, &model).unwrap();
        assert_eq!(fv.len(), 2 * 3 * 2);
        // unit norm for non-degenerate input
        assert_abs_diff_eq!(fv.dot(&fv).sqrt(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn fisher_paper_preset_dimension() {
        // 30 centers of first and second order info over 300-dim vectors
        assert_eq!(2 * 30 * 300, 18000);
    }

    #[test]
    fn fisher_is_token_order_invariant() {
        let data = two_clouds(2);
        let model = fit_mixture(&data, 2, 2).unwrap();
        let fwd = [data.row(0), data.row(1), data.row(2)];
        let rev = [data.row(2), data.row(1), data.row(0)];
        let a = encode_fisher(&fwd, &model).unwrap();
        let b = encode_fisher(&rev, &model).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn pca_recovers_planar_data_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut rows = Vec::new();
        for _ in 0..40 {
            let (a, b) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            // rank-2 data embedded in 4 dims
            rows.push([a, b, a + b, a - b]);
        }
        let data = Array2::from_shape_vec((40, 4), rows.concat()).unwrap();
        let proj = fit_pca(&data, 2).unwrap();
        for i in 0..data.nrows() {
            let z = apply_pca(&data.row(i), &proj).unwrap();
            let recon = proj.components.t().dot(&z) + &proj.mean;
            let err: f64 = (&recon - &data.row(i)).mapv(|v| v * v).sum().sqrt();
            assert!(err < 1e-8, "reconstruction error {err}");
        }
    }

    #[test]
    fn full_dim_pca_preserves_distances() {
        let data = two_clouds(3);
        let proj = fit_pca(&data, 2).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let orig: f64 = (&data.row(i) - &data.row(j)).mapv(|v| v * v).sum().sqrt();
                let zi = apply_pca(&data.row(i), &proj).unwrap();
                let zj = apply_pca(&data.row(j), &proj).unwrap();
                let projd: f64 = (&zi - &zj).mapv(|v| v * v).sum().sqrt();
                assert_abs_diff_eq!(orig, projd, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn pca_planted_spectrum_variance_fraction() {
        // whiten a sample so its covariance is exactly I, then scale to the
        // planted spectrum {9, 1, 0.01}
        let n = 500;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let raw = Array2::from_shape_fn((n, 3), |_| rng.gen_range(-1.0..1.0f64));
        let mean = raw.mean_axis(Axis(0)).unwrap();
        let mut centered = raw.clone();
        for mut r in centered.rows_mut() {
            r -= &mean;
        }
        let cov_m = {
            let x = DMatrix::from_fn(n, 3, |i, j| centered[(i, j)]);
            (x.transpose() * &x) / (n as f64 - 1.0)
        };
        let chol = cov_m.cholesky().unwrap();
        let inv_l = chol.l().try_inverse().unwrap();
        let mut data = Array2::<f64>::zeros((n, 3));
        let sds = [3.0, 1.0, 0.1];
        for i in 0..n {
            for a in 0..3 {
                let mut acc = 0.0;
                for b in 0..3 {
                    acc += inv_l[(a, b)] * centered[(i, b)];
                }
                data[(i, a)] = acc * sds[a];
            }
        }
        let proj = fit_pca(&data, 3).unwrap();
        let total: f64 = proj.eigenvalues.sum();
        let frac = proj.eigenvalues[0] / total;
        assert!(
            frac >= 0.89,
            "first component captures {frac}, expected >= 0.89 (planted 9/10.01)"
        );
        assert_abs_diff_eq!(frac, 9.0 / 10.01, epsilon = 1e-6);
    }

    #[test]
    fn pca_rejects_oversized_out_dim() {
        let data = two_clouds(0);
        assert!(fit_pca(&data, 3).is_err());
    }

    #[test]
    fn pca_rows_are_orthonormal() {
        let data = two_clouds(13);
        let proj = fit_pca(&data, 2).unwrap();
        for a in 0..2 {
            for b in 0..2 {
                let dot = proj.components.row(a).dot(&proj.components.row(b));
                let expect = if a == b { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(dot, expect, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn cosine_examples() {
        let a = array![1.0, 0.0];
        let b = array![1.0, 1.0];
        assert_abs_diff_eq!(
            cosine_similarity(&a.view(), &a.view()).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        let c = array![0.0, 1.0];
        assert_abs_diff_eq!(
            cosine_similarity(&a.view(), &c.view()).unwrap(),
            0.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            cosine_similarity(&a.view(), &b.view()).unwrap(),
            0.70711,
            epsilon = 1e-5
        );
    }

    #[test]
    fn cosine_zero_vector_convention_and_dim_check() {
        let z = array![0.0, 0.0];
        let a = array![1.0, 0.0];
        assert_eq!(cosine_similarity(&z.view(), &a.view()).unwrap(), 0.0);
        let b = array![1.0, 0.0, 0.0];
        assert!(cosine_similarity(&a.view(), &b.view()).is_err());
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric_and_bounded(
            xs in proptest::collection::vec(-5.0f64..5.0, 3),
            ys in proptest::collection::vec(-5.0f64..5.0, 3),
        ) {
            let a = Array1::from_vec(xs);
            let b = Array1::from_vec(ys);
            let ab = cosine_similarity(&a.view(), &b.view()).unwrap();
            let ba = cosine_similarity(&b.view(), &a.view()).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&ab));
        }
    }
}
