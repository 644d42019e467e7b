//! Seeded end-to-end runs: generate, pretrain, adapt, evaluate.
//!
//! Each seed is a self-contained single-threaded pipeline; seeds run in
//! parallel on a rayon pool capped by `OT_ADAPT_THREADS`.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::Baseline;
use crate::error::{Error, Result};
use crate::evaluate::{metric_audit, AuditRow};
use crate::model::ModelParams;
use crate::synth::{generate, make_trials, DomainSpec, Domains, TrialSet};
use crate::trainer::{
    accuracy, adapt, embed, pretrain_source, AdaptConfig, EvalSets, PretrainConfig, RunReport,
};

pub const THREADS_ENV: &str = "OT_ADAPT_THREADS";

/// One `(η, β)` setting of an ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepCell {
    pub eta: f64,
    pub beta: f64,
    #[serde(default)]
    pub baseline: Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub domain: DomainSpec,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    /// Each seed drives data generation, initialization and batching.
    pub seeds: Vec<u64>,
    pub source_pairs_per_class: usize,
    pub target_pairs_per_class: usize,
    /// Entropic weights for the pseudo-label audit table.
    pub audit_lambdas: Vec<f64>,
    /// Ablation grid; empty means the single setting in `adapt`.
    pub sweep: Vec<SweepCell>,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            domain: DomainSpec::default(),
            pretrain: PretrainConfig::default(),
            adapt: AdaptConfig::default(),
            seeds: vec![0, 1, 2],
            source_pairs_per_class: 2000,
            target_pairs_per_class: 500,
            audit_lambdas: vec![0.1],
            sweep: Vec::new(),
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        self.pretrain.validate()?;
        self.adapt.validate()?;
        for cell in self.cells() {
            self.adapt_for(&cell).validate()?;
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument(
                "at least one seed is required".into(),
            ));
        }
        if self.audit_lambdas.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::InvalidArgument(
                "audit lambdas must be positive".into(),
            ));
        }
        let d = &self.domain;
        let count = |speakers: usize, per: usize| {
            let same = speakers * per * per.saturating_sub(1) / 2;
            let n = speakers * per;
            (same, n * n.saturating_sub(1) / 2 - same)
        };
        let (s_same, s_diff) = count(d.num_speakers, d.test_samples_per_speaker);
        let (t_same, t_diff) = count(d.target_speaker_subset, d.test_samples_per_speaker);
        if self.source_pairs_per_class > s_same.min(s_diff)
            || self.target_pairs_per_class > t_same.min(t_diff)
        {
            return Err(Error::InvalidArgument(format!(
                "trial counts too large: source allows {}, target {}",
                s_same.min(s_diff),
                t_same.min(t_diff)
            )));
        }
        if self.adapt.batch_size > d.target_speaker_subset * d.samples_per_speaker {
            return Err(Error::InvalidArgument(
                "adapt batch_size exceeds the target split".into(),
            ));
        }
        Ok(())
    }

    /// Grid cells to run, in order.
    pub fn cells(&self) -> Vec<SweepCell> {
        if self.sweep.is_empty() {
            vec![SweepCell {
                eta: self.adapt.eta,
                beta: self.adapt.beta,
                baseline: self.adapt.baseline,
            }]
        } else {
            self.sweep.clone()
        }
    }

    pub fn adapt_for(&self, cell: &SweepCell) -> AdaptConfig {
        AdaptConfig {
            eta: cell.eta,
            beta: cell.beta,
            baseline: cell.baseline,
            ..self.adapt
        }
    }
}

/// Data and trials of one seed.
#[derive(Debug, Clone)]
pub struct SeedData {
    pub seed: u64,
    pub domains: Domains,
    pub source_trials: TrialSet,
    pub target_trials: TrialSet,
}

impl SeedData {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let domains = generate(&DomainSpec { seed, ..cfg.domain })?;
        let source_trials = make_trials(
            &domains.source_test.labels,
            cfg.source_pairs_per_class,
            seed,
        )?;
        let target_trials = make_trials(
            &domains.target_test.labels,
            cfg.target_pairs_per_class,
            seed,
        )?;
        Ok(Self {
            seed,
            domains,
            source_trials,
            target_trials,
        })
    }

    pub fn eval_sets(&self) -> EvalSets<'_> {
        EvalSets {
            source_test: &self.domains.source_test,
            source_trials: &self.source_trials,
            target_test: &self.domains.target_test,
            target_trials: &self.target_trials,
            target_audit: Some(&self.domains.target_adapt),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CellRun {
    pub cell: SweepCell,
    pub params: ModelParams,
    pub report: RunReport,
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub pretrained: ModelParams,
    pub source_train_accuracy: f64,
    /// Pseudo-label audit of the pretrained model on the target split.
    pub target_audit: Vec<AuditRow>,
    /// Logits audit on the held-out source split.
    pub source_audit: Vec<AuditRow>,
    pub runs: Vec<CellRun>,
}

/// Pretrains on the seed's source split.
pub fn pretrain_seed(cfg: &ExperimentConfig, data: &SeedData) -> Result<ModelParams> {
    pretrain_source(
        &cfg.pretrain,
        &data.domains.source_train,
        cfg.domain.num_speakers,
        data.seed,
    )
}

/// Full pipeline for one seed.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome> {
    let data = SeedData::new(cfg, seed)?;
    let pretrained = pretrain_seed(cfg, &data)?;
    let d = &data.domains;
    let protos = pretrained.prototype_set();
    let bs = cfg.adapt.batch_size;
    let target_audit = metric_audit(
        &embed(&pretrained, &d.target_adapt)?,
        &d.target_adapt.labels,
        &protos,
        &cfg.audit_lambdas,
        bs,
        seed,
    )?;
    let source_audit = metric_audit(
        &embed(&pretrained, &d.source_test)?,
        &d.source_test.labels,
        &protos,
        &cfg.audit_lambdas,
        bs,
        seed,
    )?;
    let eval = data.eval_sets();
    let runs = cfg
        .cells()
        .into_iter()
        .map(|cell| {
            let (params, report) = adapt(
                &cfg.adapt_for(&cell),
                pretrained.clone(),
                &d.source_train,
                &d.target_adapt,
                seed,
                Some(&eval),
            )?;
            Ok(CellRun {
                cell,
                params,
                report,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SeedOutcome {
        seed,
        source_train_accuracy: accuracy(&pretrained, &d.source_train)?,
        pretrained,
        target_audit,
        source_audit,
        runs,
    })
}

/// Worker count from `OT_ADAPT_THREADS`, or `None` for rayon's default.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "{THREADS_ENV} must be a positive integer, got {v:?}"
                ))
            }),
        Err(_) => Ok(None),
    }
}

/// Runs `f` over `items` in parallel, keeping input order in the output.
pub fn par_map<T: Sync, U: Send>(
    items: &[T],
    f: impl Fn(&T) -> Result<U> + Sync + Send,
) -> Result<Vec<U>> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap()? {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

/// Runs every seed of the config.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<SeedOutcome>> {
    cfg.validate()?;
    par_map(&cfg.seeds, |&seed| run_seed(cfg, seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

/// Seed-averaged summary of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: SweepCell,
    pub source_eer_before: MeanStd,
    pub source_eer_after: MeanStd,
    pub target_eer_before: MeanStd,
    pub target_eer_after: MeanStd,
    pub pl_top1_selected_after: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seeds: Vec<u64>,
    pub source_train_accuracy: MeanStd,
    pub cells: Vec<CellSummary>,
    pub config: ExperimentConfig,
}

pub fn summarize(cfg: &ExperimentConfig, outcomes: &[SeedOutcome]) -> Summary {
    let stat =
        |f: &dyn Fn(&SeedOutcome) -> f64| MeanStd::of(&outcomes.iter().map(f).collect::<Vec<_>>());
    let cells = cfg
        .cells()
        .iter()
        .enumerate()
        .map(|(ci, &cell)| {
            let first = |o: &SeedOutcome| *o.runs[ci].report.epochs.first().expect("epoch 0");
            let last = |o: &SeedOutcome| *o.runs[ci].report.epochs.last().expect("epoch 0");
            CellSummary {
                cell,
                source_eer_before: stat(&|o| first(o).source_eer),
                source_eer_after: stat(&|o| last(o).source_eer),
                target_eer_before: stat(&|o| first(o).target_eer),
                target_eer_after: stat(&|o| last(o).target_eer),
                pl_top1_selected_after: stat(&|o| last(o).pl_top1_selected),
            }
        })
        .collect();
    Summary {
        seeds: outcomes.iter().map(|o| o.seed).collect(),
        source_train_accuracy: stat(&|o| o.source_train_accuracy),
        cells,
        config: cfg.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[1.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert_eq!(m.std, 1.0);
    }

    #[test]
    fn default_config_is_valid_and_rejects_unknown_keys() {
        ExperimentConfig::default().validate().unwrap();
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"seeds": [1], "nope": 0}"#).is_err());
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"seeds": [4], "sweep": [{"eta": 0, "beta": 0.1}]}"#).unwrap();
        assert_eq!(cfg.cells().len(), 1);
        assert_eq!(cfg.adapt_for(&cfg.cells()[0]).eta, 0.0);
    }

    #[test]
    fn oversized_trial_request_is_rejected() {
        let cfg = ExperimentConfig {
            target_pairs_per_class: 100_000,
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn par_map_keeps_order() {
        let out = par_map(&[3u64, 1, 2], |&x| Ok(x * 10)).unwrap();
        assert_eq!(out, vec![30, 10, 20]);
    }
}
