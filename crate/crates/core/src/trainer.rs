//! Source pretraining and adaptation with `L = L_ce + η L_ot + β L_pl`.
//!
//! Source batches come from one seeded stream and target batches from
//! another, so a run with `η = β = 0` and no baseline walks exactly the same
//! parameter trajectory as plain source training from the same start.

use std::io::Write;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baseline::{baseline_loss_with_grad, Baseline};
use crate::error::{Error, Result};
use crate::evaluate::{compute_eer, metric_audit, score_trials};
use crate::joint_cost::{alignment_loss_with_grad, BatchForward, JointCostConfig};
use crate::model::{
    aam_loss_with_grad, backward, forward, MarginConfig, ModelParams, ModelShape, Sgd,
};
use crate::pseudo_label::{label_with_metric, pseudo_ce_with_grad, MetricKind, DEFAULT_TAU};
use crate::synth::{Dataset, TrialSet};

const STREAM_SOURCE_BATCHES: u64 = 11;
const STREAM_TARGET_BATCHES: u64 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub margin: MarginConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 0.01,
            momentum: 0.9,
            margin: MarginConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_optim(self.batch_size, self.lr, self.momentum)?;
        self.margin.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    /// Weight of the alignment (or baseline) term.
    pub eta: f64,
    /// Weight of the pseudo-label term.
    pub beta: f64,
    pub lambda_align: f64,
    pub lambda_pl: f64,
    pub joint: JointCostConfig,
    pub tau: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub margin: MarginConfig,
    /// Replaces the transport alignment term when not `none`.
    pub baseline: Baseline,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            beta: 0.1,
            lambda_align: 0.1,
            lambda_pl: 0.1,
            joint: JointCostConfig::default(),
            tau: DEFAULT_TAU,
            batch_size: 64,
            epochs: 20,
            lr: 0.01,
            momentum: 0.9,
            margin: MarginConfig::default(),
            baseline: Baseline::None,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.beta >= 0.0) || !self.eta.is_finite() || !self.beta.is_finite()
        {
            return Err(Error::InvalidArgument(
                "eta and beta must be finite and nonnegative".into(),
            ));
        }
        if !(self.lambda_align > 0.0 && self.lambda_pl > 0.0) {
            return Err(Error::InvalidArgument(
                "lambda_align and lambda_pl must be positive".into(),
            ));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidArgument("tau must be positive".into()));
        }
        self.joint.validate()?;
        self.margin.validate()?;
        check_optim(self.batch_size, self.lr, self.momentum)
    }

    /// Source training settings that share this config's optimizer and
    /// batching, for the reduction identity.
    pub fn as_pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            margin: self.margin,
        }
    }

    fn uses_target(&self) -> bool {
        self.eta > 0.0 || self.beta > 0.0
    }
}

fn check_optim(batch_size: usize, lr: f64, momentum: f64) -> Result<()> {
    if batch_size < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch_size must be at least 2, got {batch_size}"
        )));
    }
    Sgd::new(lr, momentum).map(|_| ())
}

/// Epoch-shuffled batches without replacement; the tail shorter than a full
/// batch is dropped.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64, stream: u64) -> Result<Self> {
        if batch_size == 0 || n < batch_size {
            return Err(Error::InvalidArgument(format!(
                "cannot draw batches of {batch_size} from {n} samples"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Ok(Self {
            rng,
            order: (0..n).collect(),
            batch_size,
            pos: n,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.order.len() / self.batch_size
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let b = self.order[self.pos..self.pos + self.batch_size].to_vec();
        self.pos += self.batch_size;
        b
    }
}

/// Rows `idx` of a forward pass, labels included.
pub fn select_rows(fw: &BatchForward, idx: &[usize]) -> BatchForward {
    BatchForward {
        logits: fw.logits.select(Axis(0), idx),
        cosines: fw.cosines.select(Axis(0), idx),
        logit_scale: fw.logit_scale,
        embeddings: fw.embeddings.select(Axis(0), idx),
        features: fw.features.select(Axis(0), idx),
        labels: fw
            .labels
            .as_ref()
            .map(|l| idx.iter().map(|&i| l[i]).collect()),
    }
}

/// Losses of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub l_ce: f64,
    pub l_ot: f64,
    pub l_pl: f64,
    pub total: f64,
    pub selected: usize,
    pub pl_skipped: bool,
}

/// Held-out data for between-epoch evaluation.
#[derive(Debug, Clone, Copy)]
pub struct EvalSets<'a> {
    pub source_test: &'a Dataset,
    pub source_trials: &'a TrialSet,
    pub target_test: &'a Dataset,
    pub target_trials: &'a TrialSet,
    /// Labeled adaptation split, used only to score pseudo labels.
    pub target_audit: Option<&'a Dataset>,
}

/// Evaluation metrics of one parameter snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub source_eer: f64,
    pub target_eer: f64,
    pub pl_top1_full: f64,
    pub pl_top5_full: f64,
    pub pl_top1_selected: f64,
    pub pl_top5_selected: f64,
}

/// Per-epoch summary; epoch 0 is the state before any step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub l_ce: f64,
    pub l_ot: f64,
    pub l_pl: f64,
    pub total: f64,
    pub selected_fraction: f64,
    pub pl_skipped_steps: usize,
    pub source_eer: f64,
    pub target_eer: f64,
    pub pl_top1_full: f64,
    pub pl_top5_full: f64,
    pub pl_top1_selected: f64,
    pub pl_top5_selected: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

pub const REPORT_COLUMNS: [&str; 14] = [
    "epoch",
    "steps",
    "l_ce",
    "l_ot",
    "l_pl",
    "total",
    "selected_fraction",
    "pl_skipped_steps",
    "source_eer",
    "target_eer",
    "pl_top1_full",
    "pl_top5_full",
    "pl_top1_selected",
    "pl_top5_selected",
];

impl RunReport {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// One row per epoch, after a `#` comment naming the columns.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "# columns: {}", REPORT_COLUMNS.join(", "))?;
        writeln!(
            out,
            "# epoch 0 is evaluated before training; losses are epoch means"
        )?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(REPORT_COLUMNS)?;
        for e in &self.epochs {
            let f = |v: f64| format!("{v:.10e}");
            w.write_record([
                e.epoch.to_string(),
                e.steps.to_string(),
                f(e.l_ce),
                f(e.l_ot),
                f(e.l_pl),
                f(e.total),
                f(e.selected_fraction),
                e.pl_skipped_steps.to_string(),
                f(e.source_eer),
                f(e.target_eer),
                f(e.pl_top1_full),
                f(e.pl_top5_full),
                f(e.pl_top1_selected),
                f(e.pl_top5_selected),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Forward pass over a whole dataset.
pub fn embed(params: &ModelParams, data: &Dataset) -> Result<BatchForward> {
    Ok(forward(params, data.features.view())?
        .output
        .with_labels(data.labels.clone()))
}

/// EER on a trial list over the embeddings of `data`.
pub fn dataset_eer(params: &ModelParams, data: &Dataset, trials: &TrialSet) -> Result<f64> {
    let fw = forward(params, data.features.view())?.output;
    Ok(compute_eer(&score_trials(&fw.embeddings, trials)?)?.eer)
}

/// Evaluates a parameter snapshot. Pseudo-label accuracy uses the
/// confidence-selected entropic plan at `lambda_pl`.
pub fn snapshot(
    params: &ModelParams,
    eval: &EvalSets<'_>,
    lambda_pl: f64,
    batch_size: usize,
) -> Result<Snapshot> {
    let source_eer = dataset_eer(params, eval.source_test, eval.source_trials)?;
    let target_eer = dataset_eer(params, eval.target_test, eval.target_trials)?;
    let mut s = Snapshot {
        source_eer,
        target_eer,
        pl_top1_full: 0.0,
        pl_top5_full: 0.0,
        pl_top1_selected: 0.0,
        pl_top5_selected: 0.0,
    };
    if let Some(audit) = eval.target_audit {
        let fw = forward(params, audit.features.view())?.output;
        let rows = metric_audit(
            &fw,
            &audit.labels,
            &params.prototype_set(),
            &[lambda_pl],
            batch_size,
            0,
        )?;
        let prot = rows
            .iter()
            .find(|r| r.metric == MetricKind::Prot)
            .expect("audit always reports prot");
        s.pl_top1_full = prot.top1_full;
        s.pl_top5_full = prot.top5_full;
        s.pl_top1_selected = prot.top1_selected;
        s.pl_top5_selected = prot.top5_selected;
    }
    Ok(s)
}

fn batch_inputs(data: &Dataset, idx: &[usize]) -> (Array2<f64>, Vec<usize>) {
    (
        data.features.select(Axis(0), idx),
        idx.iter().map(|&i| data.labels[i]).collect(),
    )
}

fn check_data(params: &ModelParams, data: &Dataset, what: &str) -> Result<()> {
    if data.dim() != params.shape().input_dim {
        return Err(Error::DimensionMismatch(format!(
            "{what} has {} features, model expects {}",
            data.dim(),
            params.shape().input_dim
        )));
    }
    if let Some(&bad) = data
        .labels
        .iter()
        .find(|&&l| l >= params.shape().num_classes)
    {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: params.shape().num_classes,
        });
    }
    Ok(())
}

/// Trains from `params` on the source alone with the margin loss.
pub fn train_source(
    params: ModelParams,
    cfg: &PretrainConfig,
    source: &Dataset,
    seed: u64,
) -> Result<(ModelParams, Vec<StepRecord>)> {
    cfg.validate()?;
    check_data(&params, source, "source")?;
    let mut params = params;
    let mut sampler = BatchSampler::new(source.len(), cfg.batch_size, seed, STREAM_SOURCE_BATCHES)?;
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum)?;
    let mut steps = Vec::new();
    for epoch in 1..=cfg.epochs {
        for step in 0..sampler.steps_per_epoch() {
            let (x, y) = batch_inputs(source, &sampler.next_batch());
            let cache = forward(&params, x.view())?;
            let (l_ce, g) = aam_loss_with_grad(&cache.output, &y, &cfg.margin)?;
            let grads = backward(&params, &cache, &g)?;
            if !l_ce.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            sgd.step(&mut params, &grads);
            steps.push(StepRecord {
                l_ce,
                l_ot: 0.0,
                l_pl: 0.0,
                total: l_ce,
                selected: 0,
                pl_skipped: false,
            });
        }
    }
    Ok((params, steps))
}

/// Fresh model trained on the labeled source.
pub fn pretrain_source(
    cfg: &PretrainConfig,
    source: &Dataset,
    num_classes: usize,
    seed: u64,
) -> Result<ModelParams> {
    let shape = ModelShape::new(source.dim(), num_classes);
    let init = ModelParams::init(shape, cfg.margin.scale, seed);
    train_source(init, cfg, source, seed).map(|(p, _)| p)
}

/// Fraction of `data` whose top logit is the true label.
pub fn accuracy(params: &ModelParams, data: &Dataset) -> Result<f64> {
    let fw = forward(params, data.features.view())?.output;
    let hits = fw
        .logits
        .rows()
        .into_iter()
        .zip(&data.labels)
        .filter(|(row, &y)| crate::ot_core::argmax(*row).0 == y)
        .count();
    Ok(hits as f64 / data.len().max(1) as f64)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Adapts pretrained parameters to the unlabeled target split.
///
/// Steps with no confidently labeled target sample skip the pseudo-label
/// term and are counted in the report.
pub fn adapt(
    cfg: &AdaptConfig,
    params: ModelParams,
    source: &Dataset,
    target: &Dataset,
    seed: u64,
    eval: Option<&EvalSets<'_>>,
) -> Result<(ModelParams, RunReport)> {
    cfg.validate()?;
    check_data(&params, source, "source")?;
    if target.dim() != params.shape().input_dim {
        return Err(Error::DimensionMismatch("target feature width".into()));
    }
    let mut params = params;
    let mut src_sampler =
        BatchSampler::new(source.len(), cfg.batch_size, seed, STREAM_SOURCE_BATCHES)?;
    let mut tgt_sampler =
        BatchSampler::new(target.len(), cfg.batch_size, seed, STREAM_TARGET_BATCHES)?;
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum)?;
    let mut report = RunReport {
        epochs: Vec::new(),
        steps: Vec::new(),
    };
    let record =
        |epoch: usize, steps: &[StepRecord], params: &ModelParams| -> Result<EpochRecord> {
            let snap = match eval {
                Some(e) => snapshot(params, e, cfg.lambda_pl, cfg.batch_size)?,
                None => Snapshot {
                    source_eer: 0.0,
                    target_eer: 0.0,
                    pl_top1_full: 0.0,
                    pl_top5_full: 0.0,
                    pl_top1_selected: 0.0,
                    pl_top5_selected: 0.0,
                },
            };
            let labeled = steps.iter().filter(|s| !s.pl_skipped).count();
            Ok(EpochRecord {
                epoch,
                steps: steps.len(),
                l_ce: mean(steps.iter().map(|s| s.l_ce)),
                l_ot: mean(steps.iter().map(|s| s.l_ot)),
                l_pl: mean(steps.iter().map(|s| s.l_pl)),
                total: mean(steps.iter().map(|s| s.total)),
                selected_fraction: if cfg.beta > 0.0 && !steps.is_empty() {
                    steps.iter().map(|s| s.selected).sum::<usize>() as f64
                        / (steps.len() * cfg.batch_size) as f64
                } else {
                    0.0
                },
                pl_skipped_steps: if cfg.beta > 0.0 {
                    steps.len() - labeled
                } else {
                    0
                },
                source_eer: snap.source_eer,
                target_eer: snap.target_eer,
                pl_top1_full: snap.pl_top1_full,
                pl_top5_full: snap.pl_top5_full,
                pl_top1_selected: snap.pl_top1_selected,
                pl_top5_selected: snap.pl_top5_selected,
            })
        };
    report.epochs.push(record(0, &[], &params)?);

    for epoch in 1..=cfg.epochs {
        let first = report.steps.len();
        for step in 0..src_sampler.steps_per_epoch() {
            let (xs, ys) = batch_inputs(source, &src_sampler.next_batch());
            let rec = adapt_step(cfg, &mut params, &mut sgd, &xs, &ys, || {
                target.features.select(Axis(0), &tgt_sampler.next_batch())
            })
            .map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { epoch, step },
                other => other,
            })?;
            report.steps.push(rec);
        }
        let rec = record(epoch, &report.steps[first..], &params)?;
        report.epochs.push(rec);
    }
    Ok((params, report))
}

fn adapt_step(
    cfg: &AdaptConfig,
    params: &mut ModelParams,
    sgd: &mut Sgd,
    xs: &Array2<f64>,
    ys: &[usize],
    next_target: impl FnOnce() -> Array2<f64>,
) -> Result<StepRecord> {
    let src = forward(params, xs.view())?;
    let (l_ce, mut gs) = aam_loss_with_grad(&src.output, ys, &cfg.margin)?;
    let mut rec = StepRecord {
        l_ce,
        l_ot: 0.0,
        l_pl: 0.0,
        total: 0.0,
        selected: 0,
        pl_skipped: false,
    };
    let grads = if cfg.uses_target() {
        let xt = next_target();
        let tgt = forward(params, xt.view())?;
        let mut gt = crate::model::OutputGrads::zeros_for(&tgt.output);
        if cfg.eta > 0.0 {
            let (l_ot, a, b) = if cfg.baseline == Baseline::None {
                let s = src.output.clone().with_labels(ys.to_vec());
                let term = alignment_loss_with_grad(&s, &tgt.output, &cfg.joint, cfg.lambda_align)?;
                (term.loss, term.source_grads, term.target_grads)
            } else {
                baseline_loss_with_grad(cfg.baseline, &src.output, &tgt.output)?
            };
            rec.l_ot = l_ot;
            gs.add_scaled(&a, cfg.eta);
            gt.add_scaled(&b, cfg.eta);
        }
        if cfg.beta > 0.0 {
            let labels = label_with_metric(
                &tgt.output,
                &params.prototype_set(),
                MetricKind::Prot,
                cfg.lambda_pl,
            )?;
            rec.selected = labels.num_selected();
            if rec.selected == 0 {
                rec.pl_skipped = true;
            } else {
                let (l_pl, g) = pseudo_ce_with_grad(&tgt.output, &labels, cfg.tau)?;
                rec.l_pl = l_pl;
                gt.add_scaled(&g, cfg.beta);
            }
        }
        let mut grads = backward(params, &src, &gs)?;
        grads.add_scaled(&backward(params, &tgt, &gt)?, 1.0);
        grads
    } else {
        backward(params, &src, &gs)?
    };
    rec.total = rec.l_ce + cfg.eta * rec.l_ot + cfg.beta * rec.l_pl;
    if !rec.total.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite("adaptation step"));
    }
    sgd.step(params, &grads);
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, make_trials, DomainSpec};

    fn tiny_spec() -> DomainSpec {
        DomainSpec {
            num_speakers: 6,
            samples_per_speaker: 12,
            test_samples_per_speaker: 5,
            input_dim: 8,
            speaker_dim: 3,
            target_speaker_subset: 3,
            ..DomainSpec::default()
        }
    }

    fn tiny_pretrain() -> PretrainConfig {
        PretrainConfig {
            epochs: 3,
            batch_size: 8,
            ..PretrainConfig::default()
        }
    }

    #[test]
    fn sampler_covers_epoch_without_repeats() {
        let mut s = BatchSampler::new(10, 3, 1, 0).unwrap();
        assert_eq!(s.steps_per_epoch(), 3);
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert!(BatchSampler::new(2, 3, 1, 0).is_err());
    }

    #[test]
    fn select_rows_keeps_labels() {
        let d = generate(&tiny_spec()).unwrap();
        let p = ModelParams::init(ModelShape::new(8, 6), 30.0, 0);
        let fw = embed(&p, &d.source_test).unwrap();
        let sub = select_rows(&fw, &[3, 0]);
        assert_eq!(
            sub.labels.as_ref().unwrap(),
            &vec![d.source_test.labels[3], d.source_test.labels[0]]
        );
        assert_eq!(sub.embeddings.row(1), fw.embeddings.row(0));
    }

    #[test]
    fn single_speaker_loss_vanishes() {
        let spec = DomainSpec {
            num_speakers: 1,
            target_speaker_subset: 1,
            ..tiny_spec()
        };
        let d = generate(&spec).unwrap();
        let cfg = PretrainConfig {
            epochs: 5,
            batch_size: 4,
            ..PretrainConfig::default()
        };
        let p = ModelParams::init(ModelShape::new(8, 1), 30.0, 0);
        let (_, steps) = train_source(p, &cfg, &d.source_train, 0).unwrap();
        assert!(steps.last().unwrap().l_ce < 1e-9);
    }

    #[test]
    fn pretraining_is_deterministic() {
        let d = generate(&tiny_spec()).unwrap();
        let a = pretrain_source(&tiny_pretrain(), &d.source_train, 6, 4).unwrap();
        let b = pretrain_source(&tiny_pretrain(), &d.source_train, 6, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_weights_reduce_to_source_training() {
        let d = generate(&tiny_spec()).unwrap();
        let p0 = pretrain_source(&tiny_pretrain(), &d.source_train, 6, 4).unwrap();
        let cfg = AdaptConfig {
            eta: 0.0,
            beta: 0.0,
            epochs: 2,
            batch_size: 8,
            ..AdaptConfig::default()
        };
        let (adapted, report) =
            adapt(&cfg, p0.clone(), &d.source_train, &d.target_adapt, 9, None).unwrap();
        let (continued, steps) = train_source(p0, &cfg.as_pretrain(), &d.source_train, 9).unwrap();
        assert_eq!(adapted, continued);
        assert_eq!(report.steps, steps);
    }

    #[test]
    fn total_loss_bookkeeping() {
        let d = generate(&tiny_spec()).unwrap();
        let p0 = pretrain_source(&tiny_pretrain(), &d.source_train, 6, 1).unwrap();
        let cfg = AdaptConfig {
            epochs: 2,
            batch_size: 8,
            eta: 0.7,
            beta: 0.3,
            ..AdaptConfig::default()
        };
        let (_, report) = adapt(&cfg, p0, &d.source_train, &d.target_adapt, 2, None).unwrap();
        assert_eq!(report.epochs.len(), 3);
        for s in &report.steps {
            assert!((s.total - (s.l_ce + 0.7 * s.l_ot + 0.3 * s.l_pl)).abs() <= 1e-12);
            assert!(s.l_ot > 0.0);
            assert!(s.pl_skipped || s.selected > 0);
        }
    }

    #[test]
    fn baselines_route_through_adapt() {
        let d = generate(&tiny_spec()).unwrap();
        let p0 = pretrain_source(&tiny_pretrain(), &d.source_train, 6, 1).unwrap();
        for baseline in [Baseline::Coral, Baseline::Mmd] {
            let cfg = AdaptConfig {
                epochs: 1,
                batch_size: 8,
                beta: 0.0,
                baseline,
                ..AdaptConfig::default()
            };
            let (p, report) =
                adapt(&cfg, p0.clone(), &d.source_train, &d.target_adapt, 2, None).unwrap();
            assert_ne!(p, p0);
            assert!(report
                .steps
                .iter()
                .all(|s| s.l_ot.is_finite() && s.l_pl == 0.0));
        }
    }

    #[test]
    fn report_csv_has_header_comment_and_rows() {
        let d = generate(&tiny_spec()).unwrap();
        let trials_s = make_trials(&d.source_test.labels, 20, 0).unwrap();
        let trials_t = make_trials(&d.target_test.labels, 10, 0).unwrap();
        let eval = EvalSets {
            source_test: &d.source_test,
            source_trials: &trials_s,
            target_test: &d.target_test,
            target_trials: &trials_t,
            target_audit: Some(&d.target_adapt),
        };
        let p0 = pretrain_source(&tiny_pretrain(), &d.source_train, 6, 1).unwrap();
        let cfg = AdaptConfig {
            epochs: 1,
            batch_size: 8,
            ..AdaptConfig::default()
        };
        let (_, report) =
            adapt(&cfg, p0, &d.source_train, &d.target_adapt, 2, Some(&eval)).unwrap();
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# columns: epoch, steps"));
        assert_eq!(text.lines().count(), 2 + 1 + 2);
        for e in &report.epochs {
            assert!(e.source_eer.is_finite() && e.target_eer.is_finite());
            assert!((0.0..=1.0).contains(&e.pl_top1_full));
        }
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(AdaptConfig {
            batch_size: 1,
            ..AdaptConfig::default()
        }
        .validate()
        .is_err());
        assert!(AdaptConfig {
            eta: -1.0,
            ..AdaptConfig::default()
        }
        .validate()
        .is_err());
        assert!(PretrainConfig {
            lr: 0.0,
            ..PretrainConfig::default()
        }
        .validate()
        .is_err());
        let json = r#"{"eta": 1.0, "bogus": 2}"#;
        assert!(serde_json::from_str::<AdaptConfig>(json).is_err());
    }
}
