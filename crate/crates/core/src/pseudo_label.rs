//! Pseudo labels for unlabeled target samples from a transport plan between
//! the samples and the class prototypes.
//!
//! Both marginals are uniform, so every prototype receives the same share of
//! mass. The label of a sample is the column holding its largest plan entry;
//! a sample is kept when that entry reaches the batch mean of row maxima.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::joint_cost::BatchForward;
use crate::model::{logsumexp, OutputGrads, PrototypeSet};
use crate::ot_core::{
    self, argmax, CostMatrix, DomainTag, Marginal, PlanSolver, SinkhornConfig, TransportPlan,
    MAX_ORACLE_N, SURROGATE_LAMBDA,
};

pub const DEFAULT_TAU: f64 = 0.1;

/// Source of the pseudo labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// Argmax of the classifier scores.
    Logits,
    /// Unregularized transport plan.
    Ot,
    /// Entropic transport plan.
    Rot,
    /// Entropic transport plan plus confidence selection.
    Prot,
}

impl MetricKind {
    pub const ALL: [MetricKind; 4] = [
        MetricKind::Logits,
        MetricKind::Ot,
        MetricKind::Rot,
        MetricKind::Prot,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MetricKind::Logits => "logits",
            MetricKind::Ot => "ot",
            MetricKind::Rot => "rot",
            MetricKind::Prot => "prot",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logits" => Ok(MetricKind::Logits),
            "ot" => Ok(MetricKind::Ot),
            "rot" => Ok(MetricKind::Rot),
            "prot" => Ok(MetricKind::Prot),
            other => Err(Error::InvalidArgument(format!(
                "unknown pseudo-label metric {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelBatch {
    pub labels: Vec<usize>,
    pub selected: Vec<bool>,
    /// Largest plan entry in each row; the top softmax probability for
    /// [`MetricKind::Logits`].
    pub plan_row_max: Vec<f64>,
    pub metric_kind: MetricKind,
    /// Per-sample class scores the labels were read from, for top-k audits.
    pub scores: Array2<f64>,
}

impl PseudoLabelBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_selected(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }
}

/// `1 − cos(e_i, p_k)`, in `[0, 2]`.
pub fn prototype_cost(embeddings: &Array2<f64>, prototypes: &PrototypeSet) -> Result<CostMatrix> {
    if embeddings.ncols() != prototypes.dim() {
        return Err(Error::DimensionMismatch(format!(
            "embeddings have {} columns, prototypes {}",
            embeddings.ncols(),
            prototypes.dim()
        )));
    }
    let mut cos = embeddings.dot(&prototypes.vectors().t());
    for (mut row, e) in cos.rows_mut().into_iter().zip(embeddings.rows()) {
        let norm = e.dot(&e).sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::ZeroNorm("embedding"));
        }
        row /= norm;
    }
    let values = cos.mapv(|c| (1.0 - c).clamp(0.0, 2.0));
    CostMatrix::with_domains(values, DomainTag::Target, DomainTag::Prototype)
}

/// Plan between `n` samples and `K` prototypes under uniform marginals.
///
/// `lambda = 0` asks for the unregularized plan: exact by enumeration when
/// `n = K ≤ 8`, exact by slot assignment when `lcm(n, K)` is at most
/// [`ot_core::MAX_ASSIGNMENT_SLOTS`], otherwise Sinkhorn at [`SURROGATE_LAMBDA`]. The
/// path taken is recorded in [`TransportPlan::solver`].
pub fn pseudo_plan(cost: &CostMatrix, lambda: f64) -> Result<TransportPlan> {
    let (n, k) = cost.dim();
    let rows = Marginal::uniform(n)?;
    let cols = Marginal::uniform(k)?;
    if lambda > 0.0 {
        return SinkhornConfig::with_lambda(lambda).solve(cost, &rows, &cols);
    }
    if lambda != 0.0 {
        return Err(Error::InvalidArgument(format!(
            "lambda must be nonnegative, got {lambda}"
        )));
    }
    if n == k && n <= MAX_ORACLE_N {
        let (_, perm) = ot_core::exact_ot_oracle(cost)?;
        return Ok(ot_core::permutation_plan(&perm));
    }
    match ot_core::exact_uniform_plan(cost) {
        Err(Error::TooLarge { .. }) => {}
        other => return other,
    }
    let mut plan = SinkhornConfig::with_lambda(SURROGATE_LAMBDA).solve(cost, &rows, &cols)?;
    plan.solver = PlanSolver::SmallLambdaSurrogate;
    Ok(plan)
}

fn labels_from_scores(scores: &Array2<f64>, kind: MetricKind) -> PseudoLabelBatch {
    let (labels, plan_row_max): (Vec<usize>, Vec<f64>) =
        scores.rows().into_iter().map(argmax).unzip();
    PseudoLabelBatch {
        selected: vec![false; labels.len()],
        labels,
        plan_row_max,
        metric_kind: kind,
        scores: scores.clone(),
    }
}

/// Row-wise argmax of the plan; ties go to the lowest class index.
/// `selected` is left all false.
pub fn assign_labels(plan: &TransportPlan) -> PseudoLabelBatch {
    let kind = if plan.lambda > 0.0 && plan.solver == PlanSolver::Sinkhorn {
        MetricKind::Rot
    } else {
        MetricKind::Ot
    };
    labels_from_scores(&plan.coupling, kind)
}

/// Keeps samples whose row maximum reaches the batch mean of row maxima.
pub fn select_confident(mut batch: PseudoLabelBatch) -> Result<PseudoLabelBatch> {
    let n = batch.plan_row_max.len();
    if n == 0 {
        return Err(Error::Empty("pseudo-label batch"));
    }
    let mean = batch.plan_row_max.iter().sum::<f64>() / n as f64;
    let max = batch
        .plan_row_max
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    // Rounding in the mean must not exclude the maximal rows.
    let threshold = mean.min(max);
    batch.selected = batch.plan_row_max.iter().map(|&v| v >= threshold).collect();
    if batch.metric_kind == MetricKind::Rot {
        batch.metric_kind = MetricKind::Prot;
    }
    Ok(batch)
}

/// Temperature cross-entropy over selected samples, from precomputed cosines.
/// Returns the loss and its gradient with respect to the cosines.
pub fn pseudo_ce_from_cosines(
    cosines: &Array2<f64>,
    batch: &PseudoLabelBatch,
    tau: f64,
) -> Result<(f64, Array2<f64>)> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tau must be positive, got {tau}"
        )));
    }
    let (n, k) = cosines.dim();
    if batch.len() != n || batch.selected.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} pseudo labels for {n} samples",
            batch.len()
        )));
    }
    if let Some(&bad) = batch.labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: k,
        });
    }
    let count = batch.num_selected();
    if count == 0 {
        return Err(Error::Empty("selected pseudo labels"));
    }
    let mut grad = Array2::zeros((n, k));
    let mut total = 0.0;
    for i in (0..n).filter(|&i| batch.selected[i]) {
        let row = cosines.row(i);
        let lse = logsumexp(row.iter().map(|c| c / tau));
        let y = batch.labels[i];
        total += lse - row[y] / tau;
        for j in 0..k {
            let p = (row[j] / tau - lse).exp();
            let d = if j == y { p - 1.0 } else { p };
            grad[[i, j]] = d / (tau * count as f64);
        }
    }
    Ok((total / count as f64, grad))
}

/// Mean over selected samples of `−log softmax(cos(e_i, ·) / τ)[ŷ_i]`.
pub fn pseudo_ce_loss(
    embeddings: &Array2<f64>,
    prototypes: &PrototypeSet,
    batch: &PseudoLabelBatch,
    tau: f64,
) -> Result<f64> {
    let cos = prototype_cost(embeddings, prototypes)?
        .values()
        .mapv(|c| 1.0 - c);
    pseudo_ce_from_cosines(&cos, batch, tau).map(|(l, _)| l)
}

/// [`pseudo_ce_loss`] on a forward batch, with gradients for backprop.
pub fn pseudo_ce_with_grad(
    fw: &BatchForward,
    batch: &PseudoLabelBatch,
    tau: f64,
) -> Result<(f64, OutputGrads)> {
    let (loss, dcos) = pseudo_ce_from_cosines(&fw.cosines, batch, tau)?;
    let mut grads = OutputGrads::zeros_for(fw);
    grads.cosines = dcos;
    Ok((loss, grads))
}

/// Pseudo labels for a target batch under one of the four metrics.
pub fn label_with_metric(
    target: &BatchForward,
    prototypes: &PrototypeSet,
    kind: MetricKind,
    lambda: f64,
) -> Result<PseudoLabelBatch> {
    if target.is_empty() {
        return Err(Error::Empty("target batch"));
    }
    match kind {
        MetricKind::Logits => {
            let mut batch = labels_from_scores(&target.logits, MetricKind::Logits);
            for (m, row) in batch.plan_row_max.iter_mut().zip(target.logits.rows()) {
                *m = (*m - logsumexp(row.iter().copied())).exp();
            }
            batch.selected.fill(true);
            Ok(batch)
        }
        MetricKind::Ot => {
            let plan = pseudo_plan(&prototype_cost(&target.embeddings, prototypes)?, 0.0)?;
            let mut batch = labels_from_scores(&plan.coupling, MetricKind::Ot);
            batch.selected.fill(true);
            Ok(batch)
        }
        MetricKind::Rot | MetricKind::Prot => {
            if !(lambda > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{kind} needs lambda > 0, got {lambda}"
                )));
            }
            let plan = pseudo_plan(&prototype_cost(&target.embeddings, prototypes)?, lambda)?;
            let mut batch = labels_from_scores(&plan.coupling, MetricKind::Rot);
            if kind == MetricKind::Prot {
                batch = select_confident(batch)?;
            } else {
                batch.selected.fill(true);
            }
            Ok(batch)
        }
    }
}
