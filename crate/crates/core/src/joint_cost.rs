//! Joint partial transport cost between a labeled source batch and an
//! unlabeled target batch, and the alignment loss built on it.
//!
//! The raw cost of a pair mixes three terms: the cross-entropy of the target
//! prediction against the source label, the squared distance between the
//! (unit) embeddings, and the squared distance between the length-normalized
//! multi-scale features. A scaled, biased sigmoid squashes the raw cost into
//! `(0, 1)`, so distant pairs saturate and stop contributing gradient.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::{logsumexp, normalize_backward, OutputGrads};
use crate::ot_core::{self, CostMatrix, DomainTag, Marginal, SinkhornConfig, TransportPlan};

/// Outputs of the model on one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchForward {
    /// `logit_scale * cosines`.
    pub logits: Array2<f64>,
    pub cosines: Array2<f64>,
    pub logit_scale: f64,
    /// Unit-norm embeddings.
    pub embeddings: Array2<f64>,
    /// Concatenated hidden activations.
    pub features: Array2<f64>,
    pub labels: Option<Vec<usize>>,
}

impl BatchForward {
    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.logits.ncols()
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Self {
        self.labels = Some(labels);
        self
    }
}

/// Sigmoid offset.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Bias {
    Fixed(f64),
    /// Mean of the raw joint cost over the current batch pair.
    #[default]
    BatchMean,
}

const BATCH_MEAN: &str = "batch-mean";

impl Serialize for Bias {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Bias::Fixed(v) => s.serialize_f64(*v),
            Bias::BatchMean => s.serialize_str(BATCH_MEAN),
        }
    }
}

impl<'de> Deserialize<'de> for Bias {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Tag(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Bias::Fixed(v)),
            Raw::Tag(t) if t == BATCH_MEAN => Ok(Bias::BatchMean),
            Raw::Tag(t) => Err(serde::de::Error::custom(format!(
                "bias_b must be a number or \"{BATCH_MEAN}\", got {t:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointCostConfig {
    /// Weight of the embedding distance.
    pub alpha1: f64,
    /// Weight of the feature distance.
    pub alpha2: f64,
    pub scale_s: f64,
    pub bias_b: Bias,
}

impl Default for JointCostConfig {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 1.0,
            scale_s: 1.0,
            bias_b: Bias::BatchMean,
        }
    }
}

impl JointCostConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha1 >= 0.0 && self.alpha2 >= 0.0) {
            return Err(Error::InvalidArgument(
                "alpha1 and alpha2 must be nonnegative".into(),
            ));
        }
        if !(self.scale_s > 0.0) {
            return Err(Error::InvalidArgument("scale_s must be positive".into()));
        }
        if let Bias::Fixed(b) = self.bias_b {
            if !b.is_finite() {
                return Err(Error::NonFinite("bias_b"));
            }
        }
        Ok(())
    }
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let lse = logsumexp(row.iter().copied());
        row.mapv_inplace(|v| (v - lse).exp());
    }
    out
}

/// Cross-entropy of each target prediction against each source label.
pub fn label_cost(source_labels: &[usize], target_logits: &Array2<f64>) -> Result<CostMatrix> {
    let k = target_logits.ncols();
    if let Some(&bad) = source_labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: k,
        });
    }
    if target_logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("target logits"));
    }
    let lse: Vec<f64> = target_logits
        .rows()
        .into_iter()
        .map(|r| logsumexp(r.iter().copied()))
        .collect();
    let values = Array2::from_shape_fn((source_labels.len(), target_logits.nrows()), |(i, j)| {
        (lse[j] - target_logits[[j, source_labels[i]]]).max(0.0)
    });
    CostMatrix::with_domains(values, DomainTag::Source, DomainTag::Target)
}

/// `‖a_i − b_j‖²` for every pair of rows.
pub fn pairwise_sq_euclidean(a: &Array2<f64>, b: &Array2<f64>) -> Result<CostMatrix> {
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "row dimensions {} and {} differ",
            a.ncols(),
            b.ncols()
        )));
    }
    let values = Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| {
        a.row(i)
            .iter()
            .zip(b.row(j))
            .map(|(x, y)| (x - y) * (x - y))
            .sum()
    });
    CostMatrix::new(values)
}

fn unit_rows(m: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms: Array1<f64> = m.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if norms.iter().any(|&n| !(n > 0.0)) {
        return Err(Error::ZeroNorm("feature row"));
    }
    Ok((m / &norms.view().insert_axis(Axis(1)), norms))
}

/// Sigmoid kept strictly inside `(0, 1)`.
fn sigmoid(x: f64) -> f64 {
    let v = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    v.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn sigmoid_slope(x: f64) -> f64 {
    let e = (-x.abs()).exp();
    e / ((1.0 + e) * (1.0 + e))
}

/// Components of the joint cost, kept for gradients and diagnostics.
#[derive(Debug, Clone)]
pub struct JointCost {
    pub label: CostMatrix,
    pub embedding: CostMatrix,
    pub feature: CostMatrix,
    /// `label + alpha1 * embedding + alpha2 * feature`.
    pub raw: CostMatrix,
    pub bias: f64,
    /// Sigmoid-squashed cost.
    pub cost: CostMatrix,
    src_features: (Array2<f64>, Array1<f64>),
    tgt_features: (Array2<f64>, Array1<f64>),
}

/// Builds the raw and squashed joint costs for a source/target pair.
pub fn build_joint_cost(
    source: &BatchForward,
    target: &BatchForward,
    cfg: &JointCostConfig,
) -> Result<JointCost> {
    cfg.validate()?;
    let labels = source
        .labels
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("source batch has no labels".into()))?;
    if labels.len() != source.len() {
        return Err(Error::DimensionMismatch("source labels vs rows".into()));
    }
    if source.is_empty() || target.is_empty() {
        return Err(Error::Empty("batch"));
    }
    for fw in [source, target] {
        if fw
            .embeddings
            .iter()
            .chain(fw.features.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("batch forward"));
        }
    }
    let label = label_cost(labels, &target.logits)?;
    let embedding = pairwise_sq_euclidean(&source.embeddings, &target.embeddings)?;
    let src_features = unit_rows(&source.features)?;
    let tgt_features = unit_rows(&target.features)?;
    let feature = pairwise_sq_euclidean(&src_features.0, &tgt_features.0)?;
    let raw_values =
        label.values() + &(embedding.values() * cfg.alpha1) + &(feature.values() * cfg.alpha2);
    let bias = match cfg.bias_b {
        Bias::Fixed(b) => b,
        Bias::BatchMean => raw_values.mean().expect("nonempty"),
    };
    let squashed = raw_values.mapv(|r| sigmoid(cfg.scale_s * (r - bias)));
    Ok(JointCost {
        label,
        embedding,
        feature,
        raw: CostMatrix::with_domains(raw_values, DomainTag::Source, DomainTag::Target)?,
        bias,
        cost: CostMatrix::with_domains(squashed, DomainTag::Source, DomainTag::Target)?,
        src_features,
        tgt_features,
    })
}

/// `σ(s · (C_label + α1 C_emb + α2 C_feat − b))` for every source/target pair.
pub fn joint_partial_cost(
    source: &BatchForward,
    target: &BatchForward,
    cfg: &JointCostConfig,
) -> Result<CostMatrix> {
    build_joint_cost(source, target, cfg).map(|j| j.cost)
}

/// Alignment value, plan, and gradients for both batches.
#[derive(Debug, Clone)]
pub struct AlignmentTerm {
    pub loss: f64,
    pub plan: TransportPlan,
    pub joint: JointCost,
    pub source_grads: OutputGrads,
    pub target_grads: OutputGrads,
}

/// `<C′, γ>` with `γ` the entropic plan between uniform marginals.
pub fn alignment_loss(
    source: &BatchForward,
    target: &BatchForward,
    cfg: &JointCostConfig,
    lambda: f64,
) -> Result<(f64, TransportPlan)> {
    let joint = build_joint_cost(source, target, cfg)?;
    let plan = uniform_plan(&joint.cost, lambda)?;
    let loss = ot_core::transport_cost(&plan, &joint.cost)?;
    Ok((loss, plan))
}

fn uniform_plan(cost: &CostMatrix, lambda: f64) -> Result<TransportPlan> {
    let (n, m) = cost.dim();
    SinkhornConfig::with_lambda(lambda).solve(cost, &Marginal::uniform(n)?, &Marginal::uniform(m)?)
}

/// [`alignment_loss`] with gradients; the plan is held fixed.
pub fn alignment_loss_with_grad(
    source: &BatchForward,
    target: &BatchForward,
    cfg: &JointCostConfig,
    lambda: f64,
) -> Result<AlignmentTerm> {
    let joint = build_joint_cost(source, target, cfg)?;
    let plan = uniform_plan(&joint.cost, lambda)?;
    let (source_grads, target_grads) =
        joint_cost_grads(source, target, cfg, &joint, &plan.coupling)?;
    let loss = ot_core::transport_cost(&plan, &joint.cost)?;
    Ok(AlignmentTerm {
        loss,
        plan,
        joint,
        source_grads,
        target_grads,
    })
}

/// Gradient of `Σ weights ⊙ C′` with respect to both forward outputs.
pub fn joint_cost_grads(
    source: &BatchForward,
    target: &BatchForward,
    cfg: &JointCostConfig,
    joint: &JointCost,
    weights: &Array2<f64>,
) -> Result<(OutputGrads, OutputGrads)> {
    let (n, m) = joint.cost.dim();
    if weights.dim() != (n, m) {
        return Err(Error::DimensionMismatch("weights vs joint cost".into()));
    }
    let raw = joint.raw.values();
    // dL/dR, including the dependence of a batch-mean bias on R.
    let mut g_raw = Array2::from_shape_fn((n, m), |(i, j)| {
        weights[[i, j]] * cfg.scale_s * sigmoid_slope(cfg.scale_s * (raw[[i, j]] - joint.bias))
    });
    if cfg.bias_b == Bias::BatchMean {
        let mean = g_raw.sum() / (n * m) as f64;
        g_raw -= mean;
    }
    let row_sum = g_raw.sum_axis(Axis(1));
    let col_sum = g_raw.sum_axis(Axis(0));

    let mut src = OutputGrads::zeros_for(source);
    let mut tgt = OutputGrads::zeros_for(target);

    // Label term: R_ij depends on target logits j through lse(l_j) − l_j[y_i].
    let labels = source.labels.as_ref().expect("checked in build_joint_cost");
    let probs = softmax_rows(&target.logits);
    let mut d_logits = &probs * &col_sum.view().insert_axis(Axis(1));
    for (i, &y) in labels.iter().enumerate() {
        for j in 0..m {
            d_logits[[j, y]] -= g_raw[[i, j]];
        }
    }
    tgt.cosines = d_logits * target.logit_scale;

    // Squared distance terms: d/da_i = 2 Σ_j g_ij (a_i − b_j), d/db_j = 2 Σ_i g_ij (b_j − a_i).
    let pair_grads = |a: &Array2<f64>, b: &Array2<f64>, w: f64| -> (Array2<f64>, Array2<f64>) {
        let ga = (a * &row_sum.view().insert_axis(Axis(1)) - g_raw.dot(b)) * (2.0 * w);
        let gb = (b * &col_sum.view().insert_axis(Axis(1)) - g_raw.t().dot(a)) * (2.0 * w);
        (ga, gb)
    };
    if cfg.alpha1 != 0.0 {
        let (ga, gb) = pair_grads(&source.embeddings, &target.embeddings, cfg.alpha1);
        src.embeddings = ga;
        tgt.embeddings = gb;
    }
    if cfg.alpha2 != 0.0 {
        let (su, sn) = &joint.src_features;
        let (tu, tn) = &joint.tgt_features;
        let (ga, gb) = pair_grads(su, tu, cfg.alpha2);
        src.features = normalize_backward(su, sn, &ga);
        tgt.features = normalize_backward(tu, tn, &gb);
    }
    Ok((src, tgt))
}
