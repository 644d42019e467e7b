//! Feed-forward embedding encoder with a cosine prototype classifier.
//!
//! `input -> tanh(W1 x + b1) -> tanh(W2 a1 + b2) -> W3 a2 + b3 -> L2 normalize`
//! gives the embedding `e`; the classifier scores `cos(e, p_k)` against unit
//! prototypes. The two hidden activations, concatenated, are the multi-scale
//! features used by the joint transport cost.
//!
//! Gradients are derived by hand. Every loss in the crate reports its
//! gradient with respect to the forward outputs as [`OutputGrads`]; [`backward`]
//! chains that into [`ModelGrads`].

use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::joint_cost::BatchForward;

/// Guard for `acos` in the margin path.
pub const COS_CLAMP_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub input_dim: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
}

impl ModelShape {
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden1: 64,
            hidden2: 64,
            embed_dim: 16,
            num_classes,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.hidden1 + self.hidden2
    }
}

/// Additive angular margin settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginConfig {
    pub scale: f64,
    pub margin: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self {
            scale: 30.0,
            margin: 0.2,
        }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "margin scale must be positive, got {}",
                self.scale
            )));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::InvalidArgument(format!(
                "margin must be in [0, pi/2), got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

/// Per-class unit-norm prototype vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    vectors: Array2<f64>,
}

impl PrototypeSet {
    /// Normalizes each row; zero rows are rejected.
    pub fn new(vectors: Array2<f64>) -> Result<Self> {
        let mut vectors = vectors;
        for mut row in vectors.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::ZeroNorm("prototype"));
            }
            row /= norm;
        }
        Ok(Self { vectors })
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn num_classes(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

/// All trainable tensors of the encoder and classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
    pub prototypes: Array2<f64>,
    pub logit_scale: f64,
    pub seed: u64,
}

/// Gradient bundle congruent with [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
    pub prototypes: Array2<f64>,
}

pub const TENSOR_NAMES: [&str; 7] = ["w1", "b1", "w2", "b2", "w3", "b3", "prototypes"];

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

fn normalize_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
}

impl ModelParams {
    pub fn init(shape: ModelShape, logit_scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w1 = xavier(&mut rng, shape.hidden1, shape.input_dim);
        let w2 = xavier(&mut rng, shape.hidden2, shape.hidden1);
        let w3 = xavier(&mut rng, shape.embed_dim, shape.hidden2);
        let mut prototypes = Array2::from_shape_fn((shape.num_classes, shape.embed_dim), |_| {
            rng.sample::<f64, _>(StandardNormal)
        });
        normalize_rows(&mut prototypes);
        Self {
            w1,
            b1: Array1::zeros(shape.hidden1),
            w2,
            b2: Array1::zeros(shape.hidden2),
            w3,
            b3: Array1::zeros(shape.embed_dim),
            prototypes,
            logit_scale,
            seed,
        }
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            input_dim: self.w1.ncols(),
            hidden1: self.w1.nrows(),
            hidden2: self.w2.nrows(),
            embed_dim: self.w3.nrows(),
            num_classes: self.prototypes.nrows(),
        }
    }

    /// Checks internal shape congruence and finiteness.
    pub fn validate(&self) -> Result<()> {
        let s = self.shape();
        let ok = self.b1.len() == s.hidden1
            && self.w2.ncols() == s.hidden1
            && self.b2.len() == s.hidden2
            && self.w3.ncols() == s.hidden2
            && self.b3.len() == s.embed_dim
            && self.prototypes.ncols() == s.embed_dim;
        if !ok {
            return Err(Error::DimensionMismatch(
                "inconsistent parameter shapes".into(),
            ));
        }
        if self
            .tensors()
            .iter()
            .any(|t| t.iter().any(|v| !v.is_finite()))
            || !self.logit_scale.is_finite()
        {
            return Err(Error::NonFinite("model parameters"));
        }
        Ok(())
    }

    pub fn prototype_set(&self) -> PrototypeSet {
        let mut v = self.prototypes.clone();
        normalize_rows(&mut v);
        PrototypeSet { vectors: v }
    }

    pub fn renormalize_prototypes(&mut self) {
        normalize_rows(&mut self.prototypes);
    }

    pub fn tensors(&self) -> [&[f64]; 7] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
            self.w3.as_slice().expect("standard layout"),
            self.b3.as_slice().expect("standard layout"),
            self.prototypes.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 7] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
            self.w3.as_slice_mut().expect("standard layout"),
            self.b3.as_slice_mut().expect("standard layout"),
            self.prototypes.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Writes a versioned JSON checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            params: self.clone(),
        };
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, &ckpt)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!(
                "unexpected checkpoint format {:?}",
                ckpt.format
            )));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        ckpt.params.validate()?;
        Ok(ckpt.params)
    }
}

const CHECKPOINT_FORMAT: &str = "ot-adapt-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    params: ModelParams,
}

impl ModelGrads {
    pub fn zeros_like(p: &ModelParams) -> Self {
        Self {
            w1: Array2::zeros(p.w1.raw_dim()),
            b1: Array1::zeros(p.b1.raw_dim()),
            w2: Array2::zeros(p.w2.raw_dim()),
            b2: Array1::zeros(p.b2.raw_dim()),
            w3: Array2::zeros(p.w3.raw_dim()),
            b3: Array1::zeros(p.b3.raw_dim()),
            prototypes: Array2::zeros(p.prototypes.raw_dim()),
        }
    }

    pub fn tensors(&self) -> [&[f64]; 7] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
            self.w3.as_slice().expect("standard layout"),
            self.b3.as_slice().expect("standard layout"),
            self.prototypes.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 7] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
            self.w3.as_slice_mut().expect("standard layout"),
            self.b3.as_slice_mut().expect("standard layout"),
            self.prototypes.as_slice_mut().expect("standard layout"),
        ]
    }

    /// `self += weight * other`.
    pub fn add_scaled(&mut self, other: &ModelGrads, weight: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += weight * s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Gradient of a scalar objective with respect to the outputs of [`forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrads {
    pub cosines: Array2<f64>,
    pub embeddings: Array2<f64>,
    pub features: Array2<f64>,
}

impl OutputGrads {
    pub fn zeros_for(fw: &BatchForward) -> Self {
        Self {
            cosines: Array2::zeros(fw.cosines.raw_dim()),
            embeddings: Array2::zeros(fw.embeddings.raw_dim()),
            features: Array2::zeros(fw.features.raw_dim()),
        }
    }

    /// `self += weight * other`.
    pub fn add_scaled(&mut self, other: &OutputGrads, weight: f64) {
        self.cosines.scaled_add(weight, &other.cosines);
        self.embeddings.scaled_add(weight, &other.embeddings);
        self.features.scaled_add(weight, &other.features);
    }
}

/// Intermediate values kept for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Array2<f64>,
    a1: Array2<f64>,
    a2: Array2<f64>,
    z3_norms: Array1<f64>,
    proto_unit: Array2<f64>,
    proto_norms: Array1<f64>,
    pub output: BatchForward,
}

fn row_norms(m: &Array2<f64>) -> Array1<f64> {
    m.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect()
}

fn affine(x: &ArrayView2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    x.dot(&w.t()) + b
}

/// Runs the encoder and classifier on a batch (rows are samples).
pub fn forward(params: &ModelParams, inputs: ArrayView2<f64>) -> Result<ForwardCache> {
    if inputs.ncols() != params.w1.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "model expects {} input features, got {}",
            params.w1.ncols(),
            inputs.ncols()
        )));
    }
    if inputs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("model input"));
    }
    let a1 = affine(&inputs, &params.w1, &params.b1).mapv_into(f64::tanh);
    let a2 = affine(&a1.view(), &params.w2, &params.b2).mapv_into(f64::tanh);
    let z3 = affine(&a2.view(), &params.w3, &params.b3);
    let z3_norms = row_norms(&z3);
    if z3_norms.iter().any(|&n| !(n > 0.0)) {
        return Err(Error::ZeroNorm("embedding"));
    }
    let embeddings = &z3 / &z3_norms.view().insert_axis(Axis(1));
    let proto_norms = row_norms(&params.prototypes);
    if proto_norms.iter().any(|&n| !(n > 0.0)) {
        return Err(Error::ZeroNorm("prototype"));
    }
    let proto_unit = &params.prototypes / &proto_norms.view().insert_axis(Axis(1));
    let cosines = embeddings.dot(&proto_unit.t());
    let logits = &cosines * params.logit_scale;
    let features = concatenate(Axis(1), &[a1.view(), a2.view()]).expect("same row count");
    Ok(ForwardCache {
        inputs: inputs.to_owned(),
        a1,
        a2,
        z3_norms,
        proto_unit,
        proto_norms,
        output: BatchForward {
            logits,
            cosines,
            logit_scale: params.logit_scale,
            embeddings,
            features,
            labels: None,
        },
    })
}

/// Backward pass through `x -> x / |x|` for each row: `(g - u (u . g)) / |x|`.
pub fn normalize_backward(
    unit: &Array2<f64>,
    norms: &Array1<f64>,
    grad_unit: &Array2<f64>,
) -> Array2<f64> {
    let mut out = grad_unit.clone();
    Zip::from(out.rows_mut())
        .and(unit.rows())
        .and(norms)
        .for_each(|mut g, u, &n| {
            let proj = u.dot(&g);
            g.scaled_add(-proj, &u);
            g /= n;
        });
    out
}

/// Chains `upstream` (gradient w.r.t. the forward outputs) into parameter gradients.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    upstream: &OutputGrads,
) -> Result<ModelGrads> {
    let out = &cache.output;
    if upstream.cosines.dim() != out.cosines.dim()
        || upstream.embeddings.dim() != out.embeddings.dim()
        || upstream.features.dim() != out.features.dim()
    {
        return Err(Error::DimensionMismatch(
            "upstream gradient does not match forward outputs".into(),
        ));
    }
    let h1 = params.w1.nrows();

    let d_emb = &upstream.embeddings + &upstream.cosines.dot(&cache.proto_unit);
    let d_proto_unit = upstream.cosines.t().dot(&out.embeddings);
    let d_proto = normalize_backward(&cache.proto_unit, &cache.proto_norms, &d_proto_unit);

    let d_z3 = normalize_backward(&out.embeddings, &cache.z3_norms, &d_emb);
    let d_w3 = d_z3.t().dot(&cache.a2);
    let d_b3 = d_z3.sum_axis(Axis(0));

    let mut d_a2 = d_z3.dot(&params.w3);
    d_a2 += &upstream.features.slice(s![.., h1..]);
    let d_z2 = d_a2 * cache.a2.mapv(|a| 1.0 - a * a);
    let d_w2 = d_z2.t().dot(&cache.a1);
    let d_b2 = d_z2.sum_axis(Axis(0));

    let mut d_a1 = d_z2.dot(&params.w2);
    d_a1 += &upstream.features.slice(s![.., ..h1]);
    let d_z1 = d_a1 * cache.a1.mapv(|a| 1.0 - a * a);
    let d_w1 = d_z1.t().dot(&cache.inputs);
    let d_b1 = d_z1.sum_axis(Axis(0));

    Ok(ModelGrads {
        w1: d_w1,
        b1: d_b1,
        w2: d_w2,
        b2: d_b2,
        w3: d_w3,
        b3: d_b3,
        prototypes: d_proto,
    })
}

/// Numerically stable `log(sum(exp(x)))` over a slice.
pub(crate) fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {n} samples",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: k,
        });
    }
    Ok(())
}

/// Additive angular margin softmax loss, mean over the batch.
pub fn aam_loss(fw: &BatchForward, labels: &[usize], cfg: &MarginConfig) -> Result<f64> {
    aam_loss_with_grad(fw, labels, cfg).map(|(l, _)| l)
}

/// [`aam_loss`] and its gradient with respect to the cosines.
pub fn aam_loss_with_grad(
    fw: &BatchForward,
    labels: &[usize],
    cfg: &MarginConfig,
) -> Result<(f64, OutputGrads)> {
    cfg.validate()?;
    let (n, k) = fw.cosines.dim();
    if n == 0 {
        return Err(Error::Empty("batch"));
    }
    check_labels(labels, n, k)?;
    let (sin_m, cos_m) = cfg.margin.sin_cos();
    let mut grads = OutputGrads::zeros_for(fw);
    let mut total = 0.0;
    let mut logits = vec![0.0; k];
    for (i, &y) in labels.iter().enumerate() {
        let cos_row = fw.cosines.row(i);
        for (j, l) in logits.iter_mut().enumerate() {
            *l = cfg.scale * cos_row[j];
        }
        // True-class logit s * cos(theta + m) and its derivative in cos(theta).
        let (target, dtarget) = if cfg.margin == 0.0 {
            (cos_row[y], 1.0)
        } else {
            let raw = cos_row[y];
            let c = raw.clamp(-1.0 + COS_CLAMP_EPS, 1.0 - COS_CLAMP_EPS);
            let sin_t = (1.0 - c * c).sqrt();
            let value = c * cos_m - sin_t * sin_m;
            let slope = if raw == c {
                cos_m + sin_m * c / sin_t
            } else {
                0.0
            };
            (value, slope)
        };
        logits[y] = cfg.scale * target;
        let lse = logsumexp(logits.iter().copied());
        total += lse - logits[y];
        let mut g = grads.cosines.row_mut(i);
        for j in 0..k {
            let p = (logits[j] - lse).exp();
            let dl = if j == y { p - 1.0 } else { p };
            let dc = if j == y { dtarget } else { 1.0 };
            g[j] = dl * cfg.scale * dc / n as f64;
        }
    }
    Ok((total / n as f64, grads))
}

/// Stateful momentum SGD.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Option<ModelGrads>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: None,
        })
    }

    /// `v = momentum * v + g; p -= lr * v`, then prototypes back to unit norm.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelGrads) {
        let velocity = self
            .velocity
            .get_or_insert_with(|| ModelGrads::zeros_like(params));
        for ((p, v), g) in params
            .tensors_mut()
            .into_iter()
            .zip(velocity.tensors_mut())
            .zip(grads.tensors())
        {
            for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = self.momentum * *v + g;
                *p -= self.lr * *v;
            }
        }
        params.renormalize_prototypes();
    }
}

/// One plain momentum step without carried state.
pub fn sgd_step(
    params: &ModelParams,
    grads: &ModelGrads,
    lr: f64,
    momentum: f64,
) -> Result<ModelParams> {
    let mut out = params.clone();
    Sgd::new(lr, momentum)?.step(&mut out, grads);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn small_params(seed: u64) -> ModelParams {
        let shape = ModelShape {
            input_dim: 5,
            hidden1: 4,
            hidden2: 3,
            embed_dim: 3,
            num_classes: 4,
        };
        ModelParams::init(shape, 30.0, seed)
    }

    fn inputs(seed: u64, n: usize, d: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal))
    }

    fn fw_from_cos(cos: Array2<f64>) -> BatchForward {
        let n = cos.nrows();
        BatchForward {
            logits: cos.clone(),
            cosines: cos,
            logit_scale: 1.0,
            embeddings: Array2::ones((n, 1)),
            features: Array2::ones((n, 1)),
            labels: None,
        }
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let p = small_params(1);
        let c = forward(&p, inputs(2, 6, 5).view()).unwrap();
        for r in c.output.embeddings.rows() {
            assert_abs_diff_eq!(r.dot(&r), 1.0, epsilon = 1e-12);
        }
        assert_eq!(c.output.features.ncols(), 7);
    }

    #[test]
    fn zero_weights_give_constant_embeddings() {
        let mut p = small_params(1);
        p.w1.fill(0.0);
        p.w2.fill(0.0);
        p.w3.fill(0.0);
        p.b3 = array![1.0, 2.0, 2.0];
        let c = forward(&p, inputs(3, 4, 5).view()).unwrap();
        for r in c.output.embeddings.rows() {
            assert_abs_diff_eq!(
                r,
                array![1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0].view(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn logits_match_scalar_recomputation() {
        let p = small_params(7);
        let x = inputs(8, 3, 5);
        let c = forward(&p, x.view()).unwrap();
        for i in 0..3 {
            let layer = |w: &Array2<f64>, b: &Array1<f64>, v: &[f64], act: bool| -> Vec<f64> {
                (0..w.nrows())
                    .map(|r| {
                        let mut acc = b[r];
                        for (c, vc) in v.iter().enumerate() {
                            acc += w[[r, c]] * vc;
                        }
                        if act {
                            acc.tanh()
                        } else {
                            acc
                        }
                    })
                    .collect()
            };
            let xi: Vec<f64> = x.row(i).to_vec();
            let a1 = layer(&p.w1, &p.b1, &xi, true);
            let a2 = layer(&p.w2, &p.b2, &a1, true);
            let z = layer(&p.w3, &p.b3, &a2, false);
            let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            for k in 0..4 {
                let pk = p.prototypes.row(k);
                let pn = pk.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 = z.iter().zip(pk.iter()).map(|(a, b)| a * b).sum();
                let logit = 30.0 * dot / (zn * pn);
                assert_abs_diff_eq!(c.output.logits[[i, k]], logit, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn prototype_direction_input_wins() {
        // Identity-like model: embedding equals the input direction.
        let shape = ModelShape {
            input_dim: 3,
            hidden1: 3,
            hidden2: 3,
            embed_dim: 3,
            num_classes: 3,
        };
        let mut p = ModelParams::init(shape, 30.0, 0);
        p.w1 = Array2::eye(3) * 0.1;
        p.w2 = Array2::eye(3);
        p.w3 = Array2::eye(3);
        p.prototypes = Array2::eye(3);
        let c = forward(&p, array![[0.0, 1.0, 0.0]].view()).unwrap();
        assert_eq!(crate::ot_core::argmax(c.output.logits.row(0)).0, 1);
    }

    #[test]
    fn forward_rejects_bad_input() {
        let p = small_params(1);
        assert!(forward(&p, Array2::zeros((2, 4)).view()).is_err());
        let mut x = inputs(1, 2, 5);
        x[[0, 0]] = f64::NAN;
        assert!(matches!(forward(&p, x.view()), Err(Error::NonFinite(_))));
    }

    #[test]
    fn forward_is_batch_order_equivariant() {
        let p = small_params(4);
        let x = inputs(5, 6, 5);
        let perm = [4, 2, 0, 5, 1, 3];
        let px = Array2::from_shape_fn((6, 5), |(i, j)| x[[perm[i], j]]);
        let a = forward(&p, x.view()).unwrap().output;
        let b = forward(&p, px.view()).unwrap().output;
        for (i, &src) in perm.iter().enumerate() {
            assert_abs_diff_eq!(b.logits.row(i), a.logits.row(src), epsilon = 1e-12);
            assert_abs_diff_eq!(b.features.row(i), a.features.row(src), epsilon = 1e-12);
        }
    }

    #[test]
    fn aam_examples() {
        let fw = fw_from_cos(array![[1.0, 0.0]]);
        let plain = MarginConfig {
            scale: 1.0,
            margin: 0.0,
        };
        assert_abs_diff_eq!(aam_loss(&fw, &[0], &plain).unwrap(), 0.3133, epsilon = 1e-4);
        let uniform = fw_from_cos(Array2::from_elem((3, 5), 0.3));
        assert_abs_diff_eq!(
            aam_loss(&uniform, &[0, 2, 4], &plain).unwrap(),
            5f64.ln(),
            epsilon = 1e-12
        );
        let fw = fw_from_cos(array![[0.7, 0.1, -0.2], [0.2, 0.5, 0.4]]);
        let with_margin = MarginConfig {
            scale: 30.0,
            margin: 0.2,
        };
        let without = MarginConfig {
            scale: 30.0,
            margin: 0.0,
        };
        assert!(
            aam_loss(&fw, &[0, 1], &with_margin).unwrap()
                >= aam_loss(&fw, &[0, 1], &without).unwrap()
        );
    }

    #[test]
    fn aam_rejects_bad_labels_and_config() {
        let fw = fw_from_cos(array![[1.0, 0.0]]);
        assert!(matches!(
            aam_loss(&fw, &[2], &MarginConfig::default()),
            Err(Error::LabelOutOfRange {
                label: 2,
                classes: 2
            })
        ));
        assert!(aam_loss(
            &fw,
            &[0],
            &MarginConfig {
                scale: 0.0,
                margin: 0.1
            }
        )
        .is_err());
        assert!(aam_loss(
            &fw,
            &[0],
            &MarginConfig {
                scale: 1.0,
                margin: 2.0
            }
        )
        .is_err());
    }

    #[test]
    fn aam_clamps_at_unit_cosine() {
        let fw = fw_from_cos(array![[1.0, -1.0]]);
        let (l, g) = aam_loss_with_grad(&fw, &[0], &MarginConfig::default()).unwrap();
        assert!(l.is_finite());
        assert!(g.cosines.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn normalization_gradient_is_orthogonal() {
        let p = small_params(3);
        let c = forward(&p, inputs(4, 5, 5).view()).unwrap();
        let g = inputs(9, 5, 3);
        let back = normalize_backward(&c.output.embeddings, &c.z3_norms, &g);
        for (b, e) in back.rows().into_iter().zip(c.output.embeddings.rows()) {
            assert_abs_diff_eq!(b.dot(&e), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let p = small_params(3);
        let c = forward(&p, inputs(4, 5, 5).view()).unwrap();
        let g = backward(&p, &c, &OutputGrads::zeros_for(&c.output)).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn sgd_zero_grads_leave_params() {
        let p = small_params(3);
        let next = sgd_step(&p, &ModelGrads::zeros_like(&p), 0.1, 0.9).unwrap();
        assert_eq!(next.w1, p.w1);
        assert_abs_diff_eq!(next.prototypes, p.prototypes, epsilon = 1e-15);
    }

    #[test]
    fn sgd_without_momentum_is_gradient_descent() {
        let p = small_params(3);
        let mut g = ModelGrads::zeros_like(&p);
        g.w2.fill(0.5);
        let next = sgd_step(&p, &g, 0.1, 0.0).unwrap();
        assert_abs_diff_eq!(next.w2, &p.w2 - 0.05, epsilon = 1e-15);
        assert!(Sgd::new(0.0, 0.0).is_err());
    }

    #[test]
    fn sgd_step_decreases_loss() {
        let p = small_params(11);
        let x = inputs(12, 8, 5);
        let labels = [0, 1, 2, 3, 0, 1, 2, 3];
        let cfg = MarginConfig::default();
        let c = forward(&p, x.view()).unwrap();
        let (before, og) = aam_loss_with_grad(&c.output, &labels, &cfg).unwrap();
        let g = backward(&p, &c, &og).unwrap();
        let next = sgd_step(&p, &g, 1e-3, 0.0).unwrap();
        let after = aam_loss(&forward(&next, x.view()).unwrap().output, &labels, &cfg).unwrap();
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = small_params(21);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        p.save(&path).unwrap();
        let q = ModelParams::load(&path).unwrap();
        assert_eq!(p, q);
        let x = inputs(2, 4, 5);
        let a = forward(&p, x.view()).unwrap().output;
        let b = forward(&q, x.view()).unwrap().output;
        assert!(a
            .logits
            .iter()
            .zip(b.logits.iter())
            .all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn malformed_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{\"format\": \"something\"}").unwrap();
        assert!(ModelParams::load(&path).is_err());
    }
}
