//! Supervised pair similarity.
//!
//! Two entity feature vectors are scored either directly by a two-layer MLP
//! (SNN) or after each is fused with an attention-weighted visual context
//! from the image's feature map (SNN+image). The fusion branch transforms
//! the feature-map rows and the entity vector into a shared hidden space,
//! computes softmax attention over the grid positions, pools the raw
//! feature-map rows into a context vector, and projects the concatenation
//! of the normalized context and the transformed entity vector. Both
//! branches of a pair share parameters. Forward and backward passes are
//! written out explicitly; training follows Adam with sigmoid
//! cross-entropy, classic L2 weight decay, and a halving learning-rate
//! schedule.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor;

/// Guard for L2 normalization of near-zero vectors.
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    Snn,
    SnnImage,
}

/// Layer sizes. The reference configuration is d_h = d_y = 512 hidden
/// units, a 128-unit MLP layer, and 196 = 14 x 14 grid positions of
/// 512-dim features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimnetDims {
    /// Entity vector dimension.
    pub d_t: usize,
    /// Feature-map channel dimension.
    pub d_v: usize,
    /// Fusion hidden dimension.
    pub d_h: usize,
    /// Fusion output dimension.
    pub d_y: usize,
    /// MLP hidden layer width.
    pub mlp_hidden: usize,
}

impl SimnetDims {
    pub fn paper(d_t: usize) -> Self {
        SimnetDims {
            d_t,
            d_v: 512,
            d_h: 512,
            d_y: 512,
            mlp_hidden: 128,
        }
    }

    /// MLP input is the concatenation of both branch outputs.
    pub fn mlp_input(&self, mode: ScoreMode) -> usize {
        match mode {
            ScoreMode::Snn => 2 * self.d_t,
            ScoreMode::SnnImage => 2 * self.d_y,
        }
    }
}

/// One image's feature map: N grid positions by d_v channels.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub image_id: String,
    pub v: Array2<f64>,
}

impl FeatureMap {
    pub fn new(image_id: impl Into<String>, v: Array2<f64>) -> Result<Self> {
        let n = v.nrows();
        let side = (n as f64).sqrt().round() as usize;
        if side * side != n {
            return Err(Error::invalid(format!(
                "feature map has {n} positions, not a square grid"
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("feature map has non-finite values"));
        }
        Ok(FeatureMap {
            image_id: image_id.into(),
            v,
        })
    }

    pub fn grid_side(&self) -> usize {
        (self.v.nrows() as f64).sqrt().round() as usize
    }
}

/// Attention-fusion tensors (the W1/b1, W2/b2, w, U, d of the fusion net).
#[derive(Debug, Clone, PartialEq)]
pub struct FusionTensors {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub attn: Array1<f64>,
    pub u: Array2<f64>,
    pub d: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpTensors {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: f64,
}

/// All learnable tensors of one scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub mode: ScoreMode,
    pub dims: SimnetDims,
    /// Present only in SNN+image mode.
    pub fusion: Option<FusionTensors>,
    pub mlp: MlpTensors,
}

impl FusionParams {
    /// Glorot-uniform initialization, biases zero.
    pub fn init(mode: ScoreMode, dims: SimnetDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let glorot_mat = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            let s = (6.0 / (rows + cols) as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-s..s))
        };
        let fusion = match mode {
            ScoreMode::Snn => None,
            ScoreMode::SnnImage => {
                let w1 = glorot_mat(dims.d_h, dims.d_v, &mut rng);
                let w2 = glorot_mat(dims.d_h, dims.d_t, &mut rng);
                let s_attn = (6.0 / (dims.d_h + 1) as f64).sqrt();
                let attn = Array1::from_shape_fn(dims.d_h, |_| rng.gen_range(-s_attn..s_attn));
                let u = glorot_mat(dims.d_y, dims.d_v + dims.d_h, &mut rng);
                Some(FusionTensors {
                    w1,
                    b1: Array1::zeros(dims.d_h),
                    w2,
                    b2: Array1::zeros(dims.d_h),
                    attn,
                    u,
                    d: Array1::zeros(dims.d_y),
                })
            }
        };
        let input = dims.mlp_input(mode);
        let w1 = glorot_mat(dims.mlp_hidden, input, &mut rng);
        let s2 = (6.0 / (dims.mlp_hidden + 1) as f64).sqrt();
        let w2 = Array1::from_shape_fn(dims.mlp_hidden, |_| rng.gen_range(-s2..s2));
        FusionParams {
            mode,
            dims,
            fusion,
            mlp: MlpTensors {
                w1,
                b1: Array1::zeros(dims.mlp_hidden),
                w2,
                b2: 0.0,
            },
        }
    }

    /// Flatten every parameter in a fixed order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(f) = &self.fusion {
            out.extend(f.w1.iter());
            out.extend(f.b1.iter());
            out.extend(f.w2.iter());
            out.extend(f.b2.iter());
            out.extend(f.attn.iter());
            out.extend(f.u.iter());
            out.extend(f.d.iter());
        }
        out.extend(self.mlp.w1.iter());
        out.extend(self.mlp.b1.iter());
        out.extend(self.mlp.w2.iter());
        out.push(self.mlp.b2);
        out
    }

    /// Write back a flat parameter vector (the order of [`Self::flatten`]).
    pub fn assign(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        let fill1 = |a: &mut Array1<f64>, it: &mut dyn Iterator<Item = f64>| {
            for v in a.iter_mut() {
                *v = it.next().expect("flat vector too short");
            }
        };
        let fill2 = |a: &mut Array2<f64>, it: &mut dyn Iterator<Item = f64>| {
            for v in a.iter_mut() {
                *v = it.next().expect("flat vector too short");
            }
        };
        if let Some(f) = &mut self.fusion {
            fill2(&mut f.w1, &mut it);
            fill1(&mut f.b1, &mut it);
            fill2(&mut f.w2, &mut it);
            fill1(&mut f.b2, &mut it);
            fill1(&mut f.attn, &mut it);
            fill2(&mut f.u, &mut it);
            fill1(&mut f.d, &mut it);
        }
        fill2(&mut self.mlp.w1, &mut it);
        fill1(&mut self.mlp.b1, &mut it);
        fill1(&mut self.mlp.w2, &mut it);
        self.mlp.b2 = it.next().expect("flat vector too short");
        assert!(it.next().is_none(), "flat vector too long");
    }

    /// Named tensors with shapes, in flatten order (for checkpoints).
    pub fn tensor_specs(&self) -> Vec<(&'static str, Vec<usize>)> {
        let mut out = Vec::new();
        if let Some(f) = &self.fusion {
            out.push(("fusion_w1", vec![f.w1.nrows(), f.w1.ncols()]));
            out.push(("fusion_b1", vec![f.b1.len()]));
            out.push(("fusion_w2", vec![f.w2.nrows(), f.w2.ncols()]));
            out.push(("fusion_b2", vec![f.b2.len()]));
            out.push(("fusion_attn", vec![f.attn.len()]));
            out.push(("fusion_u", vec![f.u.nrows(), f.u.ncols()]));
            out.push(("fusion_d", vec![f.d.len()]));
        }
        out.push(("mlp_w1", vec![self.mlp.w1.nrows(), self.mlp.w1.ncols()]));
        out.push(("mlp_b1", vec![self.mlp.b1.len()]));
        out.push(("mlp_w2", vec![self.mlp.w2.len()]));
        out.push(("mlp_b2", vec![1]));
        out
    }

    /// Round every parameter through f32, matching checkpoint precision.
    pub fn rounded_f32(&self) -> Self {
        let mut copy = self.clone();
        let flat: Vec<f64> = self.flatten().iter().map(|&v| tensor::round_f32(v)).collect();
        copy.assign(&flat);
        copy
    }
}

/// Intermediate values of one fusion branch.
#[derive(Debug, Clone)]
pub struct FusionActivations {
    /// Pre-normalization W1 v_n + b1 rows.
    pub v_pre: Array2<f64>,
    /// L2-normalized rows.
    pub v_tilde: Array2<f64>,
    pub t_pre: Array1<f64>,
    pub t_tilde: Array1<f64>,
    /// relu(v_tilde_n + t_tilde) rows.
    pub h: Array2<f64>,
    pub energies: Array1<f64>,
    pub attention: Array1<f64>,
    /// Attention-pooled raw feature rows.
    pub context: Array1<f64>,
    pub context_hat: Array1<f64>,
    pub y: Array1<f64>,
}

impl FusionActivations {
    pub fn attention_row_error(&self) -> f64 {
        (self.attention.sum() - 1.0).abs()
    }
}

/// Numerically stable softmax.
pub fn softmax(e: &ArrayView1<f64>) -> Array1<f64> {
    let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = e.mapv(|v| (v - m).exp());
    let z = out.sum();
    out /= z;
    out
}

fn l2_normalize(x: &Array1<f64>) -> (Array1<f64>, f64) {
    let norm = x.dot(x).sqrt().max(NORM_EPS);
    (x / norm, norm)
}

/// Backward through x_hat = x / max(|x|, eps).
fn l2_normalize_backward(x_hat: &Array1<f64>, norm: f64, d_hat: &Array1<f64>) -> Array1<f64> {
    (d_hat - &(x_hat * x_hat.dot(d_hat))) / norm
}

/// One fusion branch: attention over the grid, pooled context, projected
/// output y.
pub fn forward_fusion(
    t: &ArrayView1<f64>,
    map: &FeatureMap,
    params: &FusionParams,
) -> Result<(Array1<f64>, FusionActivations)> {
    let fusion = params
        .fusion
        .as_ref()
        .ok_or_else(|| Error::invalid("fusion tensors absent (SNN mode)"))?;
    let dims = &params.dims;
    if t.len() != dims.d_t {
        return Err(Error::Dimension(format!(
            "entity vector length {} != d_t {}",
            t.len(),
            dims.d_t
        )));
    }
    if map.v.ncols() != dims.d_v {
        return Err(Error::Dimension(format!(
            "feature map channels {} != d_v {}",
            map.v.ncols(),
            dims.d_v
        )));
    }
    let n = map.v.nrows();

    let mut v_pre = Array2::zeros((n, dims.d_h));
    let mut v_tilde = Array2::zeros((n, dims.d_h));
    for i in 0..n {
        let p = fusion.w1.dot(&map.v.row(i)) + &fusion.b1;
        let (hat, _) = l2_normalize(&p);
        v_pre.row_mut(i).assign(&p);
        v_tilde.row_mut(i).assign(&hat);
    }
    let t_pre = fusion.w2.dot(t) + &fusion.b2;
    let (t_tilde, _) = l2_normalize(&t_pre);

    let mut h = Array2::zeros((n, dims.d_h));
    let mut energies = Array1::zeros(n);
    for i in 0..n {
        let hi = (&v_tilde.row(i) + &t_tilde).mapv(|v| v.max(0.0));
        energies[i] = fusion.attn.dot(&hi);
        h.row_mut(i).assign(&hi);
    }
    let attention = softmax(&energies.view());
    let mut context = Array1::zeros(dims.d_v);
    for i in 0..n {
        context.scaled_add(attention[i], &map.v.row(i));
    }
    let (context_hat, _) = l2_normalize(&context);

    let mut cat = Array1::zeros(dims.d_v + dims.d_h);
    cat.slice_mut(ndarray::s![..dims.d_v]).assign(&context_hat);
    cat.slice_mut(ndarray::s![dims.d_v..]).assign(&t_tilde);
    let y = fusion.u.dot(&cat) + &fusion.d;

    let acts = FusionActivations {
        v_pre,
        v_tilde,
        t_pre,
        t_tilde,
        h,
        energies,
        attention,
        context,
        context_hat,
        y: y.clone(),
    };
    Ok((y, acts))
}

/// Gradient accumulator mirroring [`FusionParams`].
#[derive(Debug, Clone)]
struct Gradients {
    params: FusionParams,
}

impl Gradients {
    fn zeros_like(p: &FusionParams) -> Self {
        let mut params = p.clone();
        let flat = vec![0.0; p.flatten().len()];
        params.assign(&flat);
        Gradients { params }
    }

    fn fusion(&mut self) -> &mut FusionTensors {
        self.params.fusion.as_mut().unwrap()
    }
}

/// Backward through one fusion branch, accumulating parameter gradients.
fn backward_fusion(
    t: &ArrayView1<f64>,
    map: &FeatureMap,
    params: &FusionParams,
    acts: &FusionActivations,
    dy: &Array1<f64>,
    grads: &mut Gradients,
) {
    let fusion = params.fusion.as_ref().unwrap();
    let dims = &params.dims;
    let n = map.v.nrows();

    // y = U [c_hat; t_tilde] + d
    let mut cat = Array1::zeros(dims.d_v + dims.d_h);
    cat.slice_mut(ndarray::s![..dims.d_v]).assign(&acts.context_hat);
    cat.slice_mut(ndarray::s![dims.d_v..]).assign(&acts.t_tilde);
    {
        let g = grads.fusion();
        for r in 0..dims.d_y {
            for c in 0..cat.len() {
                g.u[(r, c)] += dy[r] * cat[c];
            }
        }
        g.d += dy;
    }
    let dcat = fusion.u.t().dot(dy);
    let dc_hat = dcat.slice(ndarray::s![..dims.d_v]).to_owned();
    let mut dt_tilde = dcat.slice(ndarray::s![dims.d_v..]).to_owned();

    // c_hat = normalize(c)
    let c_norm = acts.context.dot(&acts.context).sqrt().max(NORM_EPS);
    let dc = l2_normalize_backward(&acts.context_hat, c_norm, &dc_hat);

    // c = sum a_n v_n over raw rows
    let mut da = Array1::zeros(n);
    for i in 0..n {
        da[i] = map.v.row(i).dot(&dc);
    }
    // softmax backward
    let inner = acts.attention.dot(&da);
    let de = &acts.attention * &(&da - inner);

    // e_n = attn . h_n
    let mut dh = Array2::zeros((n, dims.d_h));
    {
        let g = grads.fusion();
        for i in 0..n {
            g.attn.scaled_add(de[i], &acts.h.row(i));
            dh.row_mut(i).assign(&(de[i] * &fusion.attn));
        }
    }

    // h_n = relu(v_tilde_n + t_tilde)
    let mut dv_tilde = Array2::zeros((n, dims.d_h));
    for i in 0..n {
        for j in 0..dims.d_h {
            let active = acts.v_tilde[(i, j)] + acts.t_tilde[j] > 0.0;
            let dpre = if active { dh[(i, j)] } else { 0.0 };
            dv_tilde[(i, j)] = dpre;
            if active {
                dt_tilde[j] += dh[(i, j)];
            }
        }
    }

    // v_tilde_n = normalize(W1 v_n + b1)
    {
        let g = grads.fusion();
        for i in 0..n {
            let norm = acts.v_pre.row(i).dot(&acts.v_pre.row(i)).sqrt().max(NORM_EPS);
            let hat = acts.v_tilde.row(i).to_owned();
            let dhat = dv_tilde.row(i).to_owned();
            let dp = l2_normalize_backward(&hat, norm, &dhat);
            for r in 0..dims.d_h {
                for c in 0..dims.d_v {
                    g.w1[(r, c)] += dp[r] * map.v[(i, c)];
                }
            }
            g.b1 += &dp;
        }
    }

    // t_tilde = normalize(W2 t + b2)
    let t_norm = acts.t_pre.dot(&acts.t_pre).sqrt().max(NORM_EPS);
    let dq = l2_normalize_backward(&acts.t_tilde, t_norm, &dt_tilde);
    {
        let g = grads.fusion();
        for r in 0..dims.d_h {
            for c in 0..dims.d_t {
                g.w2[(r, c)] += dq[r] * t[c];
            }
        }
        g.b2 += &dq;
    }
}

struct MlpCache {
    input: Array1<f64>,
    z1: Array1<f64>,
    r1: Array1<f64>,
}

fn forward_mlp(params: &FusionParams, input: Array1<f64>) -> (f64, MlpCache) {
    let z1 = params.mlp.w1.dot(&input) + &params.mlp.b1;
    let r1 = z1.mapv(|v| v.max(0.0));
    let logit = params.mlp.w2.dot(&r1) + params.mlp.b2;
    (logit, MlpCache { input, z1, r1 })
}

/// Backward through the MLP; returns the gradient w.r.t. the input.
fn backward_mlp(
    params: &FusionParams,
    cache: &MlpCache,
    dlogit: f64,
    grads: &mut Gradients,
) -> Array1<f64> {
    grads.params.mlp.w2.scaled_add(dlogit, &cache.r1);
    grads.params.mlp.b2 += dlogit;
    let dr1 = dlogit * &params.mlp.w2;
    let dz1 = &dr1 * &cache.z1.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    for r in 0..params.mlp.w1.nrows() {
        for c in 0..params.mlp.w1.ncols() {
            grads.params.mlp.w1[(r, c)] += dz1[r] * cache.input[c];
        }
    }
    grads.params.mlp.b1 += &dz1;
    params.mlp.w1.t().dot(&dz1)
}

fn concat(a: &Array1<f64>, b: &Array1<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(a.len() + b.len());
    out.slice_mut(ndarray::s![..a.len()]).assign(a);
    out.slice_mut(ndarray::s![a.len()..]).assign(b);
    out
}

/// Logit of the pair in the (i, j) argument order.
fn pair_logit(
    t_i: &ArrayView1<f64>,
    t_j: &ArrayView1<f64>,
    map: Option<&FeatureMap>,
    params: &FusionParams,
) -> Result<(f64, MlpCache, Option<(FusionActivations, FusionActivations)>)> {
    match params.mode {
        ScoreMode::Snn => {
            let (logit, cache) = forward_mlp(params, concat(&t_i.to_owned(), &t_j.to_owned()));
            Ok((logit, cache, None))
        }
        ScoreMode::SnnImage => {
            let map = map.ok_or_else(|| {
                Error::invalid("SNN+image scoring requires a feature map")
            })?;
            let (y_i, acts_i) = forward_fusion(t_i, map, params)?;
            let (y_j, acts_j) = forward_fusion(t_j, map, params)?;
            let (logit, cache) = forward_mlp(params, concat(&y_i, &y_j));
            Ok((logit, cache, Some((acts_i, acts_j))))
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Similarity of a pair: sigmoid of the mean logit over both argument
/// orders, making the score exactly symmetric.
pub fn score_pair(
    t_i: &ArrayView1<f64>,
    t_j: &ArrayView1<f64>,
    map: Option<&FeatureMap>,
    params: &FusionParams,
) -> Result<f64> {
    let (z_ij, _, _) = pair_logit(t_i, t_j, map, params)?;
    let (z_ji, _, _) = pair_logit(t_j, t_i, map, params)?;
    Ok(sigmoid(0.5 * (z_ij + z_ji)))
}

/// Mean of the two model similarities.
pub fn ensemble_score(s_snn: f64, s_img: f64) -> f64 {
    0.5 * (s_snn + s_img)
}

/// Stable sigmoid cross-entropy: max(z,0) - z*y + ln(1 + exp(-|z|)).
pub fn sigmoid_cross_entropy(logit: f64, label: bool) -> f64 {
    let y = if label { 1.0 } else { 0.0 };
    logit.max(0.0) - logit * y + (1.0 + (-logit.abs()).exp()).ln()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub positive_fraction: f64,
    pub base_learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 300,
            positive_fraction: 0.15,
            base_learning_rate: 0.01,
            weight_decay: 1e-4,
            epochs: 5,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Positives per batch, e.g. round(0.15 * 300) = 45.
    pub fn positives_per_batch(&self) -> usize {
        ((self.batch_size as f64) * self.positive_fraction).round() as usize
    }

    /// Learning rate halves every epoch (0-based index).
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.base_learning_rate * 0.5f64.powi(epoch as i32)
    }
}

/// One labeled training pair.
#[derive(Debug, Clone)]
pub struct PairExample {
    pub image_id: String,
    pub t_i: Array1<f64>,
    pub t_j: Array1<f64>,
    pub label: bool,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: FusionParams,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Largest |sum(attention) - 1| seen across all training steps.
    pub max_attention_row_error: f64,
}

/// Mean sigmoid cross-entropy over a batch plus the L2 weight-decay term
/// 0.5 * wd * |theta|^2.
fn batch_loss(
    params: &FusionParams,
    batch: &[(&PairExample, Option<&FeatureMap>)],
    weight_decay: f64,
) -> Result<f64> {
    let mut loss = 0.0;
    for (ex, map) in batch {
        let (logit, _, _) = pair_logit(&ex.t_i.view(), &ex.t_j.view(), *map, params)?;
        loss += sigmoid_cross_entropy(logit, ex.label);
    }
    loss /= batch.len() as f64;
    if weight_decay > 0.0 {
        let sq: f64 = params.flatten().iter().map(|v| v * v).sum();
        loss += 0.5 * weight_decay * sq;
    }
    Ok(loss)
}

/// Loss plus flattened analytic gradients; also reports the worst
/// attention row-sum error seen in the batch.
fn batch_loss_and_grads(
    params: &FusionParams,
    batch: &[(&PairExample, Option<&FeatureMap>)],
    weight_decay: f64,
) -> Result<(f64, Vec<f64>, f64)> {
    let mut grads = Gradients::zeros_like(params);
    let mut loss = 0.0;
    let mut attn_err = 0.0f64;
    let scale = 1.0 / batch.len() as f64;
    for (ex, map) in batch {
        let (logit, cache, acts) = pair_logit(&ex.t_i.view(), &ex.t_j.view(), *map, params)?;
        loss += sigmoid_cross_entropy(logit, ex.label);
        let y = if ex.label { 1.0 } else { 0.0 };
        let dlogit = (sigmoid(logit) - y) * scale;
        let dinput = backward_mlp(params, &cache, dlogit, &mut grads);
        if let Some((acts_i, acts_j)) = acts {
            attn_err = attn_err
                .max(acts_i.attention_row_error())
                .max(acts_j.attention_row_error());
            let map = map.unwrap();
            let half = dinput.len() / 2;
            let dy_i = dinput.slice(ndarray::s![..half]).to_owned();
            let dy_j = dinput.slice(ndarray::s![half..]).to_owned();
            backward_fusion(&ex.t_i.view(), map, params, &acts_i, &dy_i, &mut grads);
            backward_fusion(&ex.t_j.view(), map, params, &acts_j, &dy_j, &mut grads);
        }
    }
    loss *= scale;
    let mut flat = grads.params.flatten();
    if weight_decay > 0.0 {
        let theta = params.flatten();
        let sq: f64 = theta.iter().map(|v| v * v).sum();
        loss += 0.5 * weight_decay * sq;
        for (g, t) in flat.iter_mut().zip(theta.iter()) {
            *g += weight_decay * t;
        }
    }
    Ok((loss, flat, attn_err))
}

/// Train a scorer with the standard recipe: batches of
/// `positives_per_batch` positives plus uniformly sampled negatives, Adam
/// with the halving schedule, sigmoid cross-entropy, and L2 weight decay.
/// Each pair is presented in one random argument order per occurrence.
pub fn train(
    positives: &[PairExample],
    negatives: &[PairExample],
    maps: &BTreeMap<String, FeatureMap>,
    mode: ScoreMode,
    dims: SimnetDims,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    if positives.is_empty() {
        return Err(Error::invalid("no positive pairs to train on"));
    }
    if negatives.is_empty() {
        return Err(Error::invalid("no negative pairs to sample"));
    }
    let mut params = FusionParams::init(mode, dims, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let n_flat = params.flatten().len();
    let mut m = vec![0.0f64; n_flat];
    let mut v = vec![0.0f64; n_flat];
    let mut step_count = 0u64;

    let pos_per_batch = cfg.positives_per_batch().max(1);
    let neg_ratio = (1.0 - cfg.positive_fraction) / cfg.positive_fraction;

    let resolve = |ex: &PairExample| -> Result<Option<&FeatureMap>> {
        match mode {
            ScoreMode::Snn => Ok(None),
            ScoreMode::SnnImage => maps
                .get(&ex.image_id)
                .map(Some)
                .ok_or_else(|| Error::invalid(format!("no feature map for {}", ex.image_id))),
        }
    };

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut max_attn_err = 0.0f64;
    let mut swapped: Vec<PairExample> = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate(epoch);
        let mut order: Vec<usize> = (0..positives.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let steps = (positives.len() / pos_per_batch).max(1);
        let mut epoch_loss = 0.0;
        for step in 0..steps {
            let lo = step * pos_per_batch;
            let hi = ((step + 1) * pos_per_batch).min(positives.len());
            let pos_count = hi - lo;
            let neg_count = ((pos_count as f64) * neg_ratio).round() as usize;

            swapped.clear();
            for &idx in &order[lo..hi] {
                swapped.push(maybe_swap(&positives[idx], &mut rng));
            }
            for _ in 0..neg_count {
                let idx = rng.gen_range(0..negatives.len());
                swapped.push(maybe_swap(&negatives[idx], &mut rng));
            }
            let batch: Vec<(&PairExample, Option<&FeatureMap>)> = swapped
                .iter()
                .map(|ex| resolve(ex).map(|m| (ex, m)))
                .collect::<Result<_>>()?;

            let (loss, grads, attn_err) =
                batch_loss_and_grads(&params, &batch, cfg.weight_decay)?;
            max_attn_err = max_attn_err.max(attn_err);
            epoch_loss += loss;
            step_count += 1;

            // Adam
            let mut theta = params.flatten();
            let b1 = cfg.adam_beta1;
            let b2 = cfg.adam_beta2;
            let bc1 = 1.0 - b1.powi(step_count as i32);
            let bc2 = 1.0 - b2.powi(step_count as i32);
            for i in 0..n_flat {
                m[i] = b1 * m[i] + (1.0 - b1) * grads[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grads[i] * grads[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_epsilon);
            }
            params.assign(&theta);
        }
        epoch_losses.push(epoch_loss / steps as f64);
    }
    Ok(TrainedModel {
        params,
        epoch_losses,
        max_attention_row_error: max_attn_err,
    })
}

fn maybe_swap(ex: &PairExample, rng: &mut ChaCha8Rng) -> PairExample {
    if rng.gen_bool(0.5) {
        PairExample {
            image_id: ex.image_id.clone(),
            t_i: ex.t_j.clone(),
            t_j: ex.t_i.clone(),
            label: ex.label,
        }
    } else {
        ex.clone()
    }
}

/// Compare analytic gradients of the full batch loss against central
/// finite differences for every parameter; returns the maximum relative
/// error.
pub fn gradient_check(
    params: &FusionParams,
    batch: &[(&PairExample, Option<&FeatureMap>)],
    weight_decay: f64,
    eps: f64,
) -> Result<f64> {
    let (_, analytic, _) = batch_loss_and_grads(params, batch, weight_decay)?;
    let theta = params.flatten();
    let mut probe = params.clone();
    let mut max_rel = 0.0f64;
    for i in 0..theta.len() {
        let mut plus = theta.clone();
        plus[i] += eps;
        probe.assign(&plus);
        let lp = batch_loss(&probe, batch, weight_decay)?;
        let mut minus = theta.clone();
        minus[i] -= eps;
        probe.assign(&minus);
        let lm = batch_loss(&probe, batch, weight_decay)?;
        let numeric = (lp - lm) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-6);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

/// Checkpoint manifest stored next to the tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub mode: ScoreMode,
    pub dims: SimnetDims,
    pub seed: u64,
    pub tensors: BTreeMap<String, Vec<usize>>,
}

/// Write a checkpoint directory: one VGPT tensor per parameter plus
/// `manifest.json`.
pub fn save_checkpoint(params: &FusionParams, seed: u64, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let flat = params.flatten();
    let mut offset = 0usize;
    let mut tensors = BTreeMap::new();
    for (name, shape) in params.tensor_specs() {
        let count: usize = shape.iter().product();
        let data: Vec<f32> = flat[offset..offset + count].iter().map(|&v| v as f32).collect();
        tensor::write_tensor_file(&dir.join(format!("{name}.vgpt")), &shape, &data)?;
        tensors.insert(name.to_string(), shape);
        offset += count;
    }
    let manifest = CheckpointManifest {
        mode: params.mode,
        dims: params.dims,
        seed,
        tensors,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<FusionParams> {
    let manifest: CheckpointManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut params = FusionParams::init(manifest.mode, manifest.dims, 0);
    let mut flat = Vec::new();
    for (name, shape) in params.tensor_specs() {
        let (got_shape, data) = tensor::read_tensor_file(&dir.join(format!("{name}.vgpt")))?;
        if got_shape != shape {
            return Err(Error::Tensor(format!(
                "checkpoint tensor {name} has shape {got_shape:?}, expected {shape:?}"
            )));
        }
        flat.extend(data.into_iter().map(f64::from));
    }
    params.assign(&flat);
    Ok(params)
}
