//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use ndarray::Array2;
use ot_adapt::joint_cost::{alignment_loss_with_grad, joint_cost_grads, build_joint_cost, JointCostConfig};
use ot_adapt::model::{aam_loss_with_grad, backward, forward, MarginConfig, ModelGrads, ModelParams, ModelShape};
use ot_adapt::pseudo_label::{label_with_metric, pseudo_ce_with_grad, MetricKind, PseudoLabelBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Denominator floor for the relative error, so entries that are zero up to
/// rounding are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-6;

pub fn tiny_model(seed: u64) -> ModelParams {
    let shape = ModelShape {
        input_dim: 6,
        hidden1: 5,
        hidden2: 4,
        embed_dim: 3,
        num_classes: 4,
    };
    let mut p = ModelParams::init(shape, MarginConfig::default().scale, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for b in [&mut p.b1, &mut p.b2, &mut p.b3] {
        b.mapv_inplace(|_| 0.3 * rng.sample::<f64, _>(StandardNormal));
    }
    p
}

pub fn random_inputs(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal))
}

/// Worst entrywise relative error between `analytic` and central differences of `loss`.
pub fn fd_max_rel_error(params: &ModelParams, analytic: &ModelGrads, loss: impl Fn(&ModelParams) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    let grads = analytic.tensors();
    for (t, g) in grads.iter().enumerate() {
        for idx in 0..g.len() {
            let mut plus = params.clone();
            plus.tensors_mut()[t][idx] += FD_STEP;
            let mut minus = params.clone();
            minus.tensors_mut()[t][idx] -= FD_STEP;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP);
            let a = g[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}

pub struct GradCase {
    pub params: ModelParams,
    pub source_x: Array2<f64>,
    pub source_y: Vec<usize>,
    pub target_x: Array2<f64>,
}

impl GradCase {
    pub fn new(seed: u64) -> Self {
        let params = tiny_model(seed);
        let source_x = random_inputs(7, 6, seed + 1);
        let target_x = random_inputs(5, 6, seed + 2);
        let source_y = (0..7).map(|i| (i * 3 + seed as usize) % 4).collect();
        Self {
            params,
            source_x,
            source_y,
            target_x,
        }
    }

    pub fn ce(&self, p: &ModelParams) -> (f64, ModelGrads) {
        let cache = forward(p, self.source_x.view()).unwrap();
        let (l, up) = aam_loss_with_grad(&cache.output, &self.source_y, &MarginConfig::default()).unwrap();
        (l, backward(p, &cache, &up).unwrap())
    }

    /// Pseudo labels and selection taken at the unperturbed parameters.
    pub fn frozen_labels(&self, lambda: f64) -> PseudoLabelBatch {
        let cache = forward(&self.params, self.target_x.view()).unwrap();
        label_with_metric(&cache.output, &self.params.prototype_set(), MetricKind::Prot, lambda).unwrap()
    }

    pub fn pl(&self, p: &ModelParams, labels: &PseudoLabelBatch, tau: f64) -> (f64, ModelGrads) {
        let cache = forward(p, self.target_x.view()).unwrap();
        let (l, up) = pseudo_ce_with_grad(&cache.output, labels, tau).unwrap();
        (l, backward(p, &cache, &up).unwrap())
    }

    /// Plan solved at the unperturbed parameters.
    pub fn frozen_plan(&self, cfg: &JointCostConfig, lambda: f64) -> Array2<f64> {
        let s = forward(&self.params, self.source_x.view()).unwrap();
        let t = forward(&self.params, self.target_x.view()).unwrap();
        let src = s.output.with_labels(self.source_y.clone());
        alignment_loss_with_grad(&src, &t.output, cfg, lambda).unwrap().plan.coupling
    }

    /// `<C′(p), plan>` and its gradient through both batches.
    pub fn ot(&self, p: &ModelParams, cfg: &JointCostConfig, plan: &Array2<f64>) -> (f64, ModelGrads) {
        let s = forward(p, self.source_x.view()).unwrap();
        let t = forward(p, self.target_x.view()).unwrap();
        let src = s.output.clone().with_labels(self.source_y.clone());
        let joint = build_joint_cost(&src, &t.output, cfg).unwrap();
        let loss = (joint.cost.values() * plan).sum();
        let (gs, gt) = joint_cost_grads(&src, &t.output, cfg, &joint, plan).unwrap();
        let mut g = backward(p, &s, &gs).unwrap();
        g.add_scaled(&backward(p, &t, &gt).unwrap(), 1.0);
        (loss, g)
    }
}
