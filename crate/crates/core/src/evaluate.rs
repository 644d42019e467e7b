//! Verification scoring, equal error rate, and pseudo-label accuracy audits.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::joint_cost::BatchForward;
use crate::model::PrototypeSet;
use crate::pseudo_label::{label_with_metric, MetricKind, PseudoLabelBatch};
use crate::synth::TrialSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredTrial {
    pub score: f64,
    pub same_speaker: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoredTrials {
    pub trials: Vec<ScoredTrial>,
}

impl ScoredTrials {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (f64, bool)>) -> Self {
        Self {
            trials: pairs
                .into_iter()
                .map(|(score, same_speaker)| ScoredTrial {
                    score,
                    same_speaker,
                })
                .collect(),
        }
    }

    /// Writes `score,label` rows (label 1 = same speaker).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["score", "label"])?;
        for t in &self.trials {
            w.write_record([
                format!("{:.16e}", t.score),
                u8::from(t.same_speaker).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if !(na > 0.0) || !(nb > 0.0) {
        return Err(Error::ZeroNorm("trial embedding"));
    }
    Ok((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine score for every trial.
pub fn score_trials(embeddings: &Array2<f64>, trials: &TrialSet) -> Result<ScoredTrials> {
    let n = embeddings.nrows();
    let mut out = Vec::with_capacity(trials.len());
    for t in &trials.trials {
        if t.index_a >= n || t.index_b >= n {
            return Err(Error::InvalidArgument(format!(
                "trial ({}, {}) out of range for {n} embeddings",
                t.index_a, t.index_b
            )));
        }
        let score = cosine(embeddings.row(t.index_a), embeddings.row(t.index_b))?;
        out.push(ScoredTrial {
            score,
            same_speaker: t.same_speaker,
        });
    }
    Ok(ScoredTrials { trials: out })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eer {
    pub eer: f64,
    pub threshold: f64,
}

/// Equal error rate by a threshold sweep over the sorted unique scores.
///
/// At threshold `t`, false acceptances are different-speaker trials scoring
/// `≥ t` and false rejections are same-speaker trials scoring `< t`, each as a
/// fraction of its class. The EER is where the two rates cross, linearly
/// interpolated between the adjacent operating points that straddle it.
pub fn compute_eer(scored: &ScoredTrials) -> Result<Eer> {
    let n_same = scored.trials.iter().filter(|t| t.same_speaker).count();
    let n_diff = scored.trials.len() - n_same;
    if n_same == 0 || n_diff == 0 {
        return Err(Error::InvalidArgument(
            "EER needs both same- and different-speaker trials".into(),
        ));
    }
    if scored.trials.iter().any(|t| !t.score.is_finite()) {
        return Err(Error::NonFinite("trial scores"));
    }
    let mut sorted: Vec<ScoredTrial> = scored.trials.clone();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));

    // Operating points at each unique score, then one past the top.
    let mut points: Vec<(f64, f64, f64)> = Vec::new(); // (threshold, far, frr)
    let mut same_below = 0usize;
    let mut diff_below = 0usize;
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].score;
        let far = (n_diff - diff_below) as f64 / n_diff as f64;
        let frr = same_below as f64 / n_same as f64;
        points.push((t, far, frr));
        while i < sorted.len() && sorted[i].score == t {
            if sorted[i].same_speaker {
                same_below += 1;
            } else {
                diff_below += 1;
            }
            i += 1;
        }
    }
    let top = sorted.last().expect("nonempty").score;
    points.push((top, 0.0, 1.0));

    let gap = |p: &(f64, f64, f64)| p.1 - p.2;
    let k = points
        .iter()
        .position(|p| gap(p) <= 0.0)
        .expect("last point has far < frr");
    if gap(&points[k]) == 0.0 || k == 0 {
        return Ok(Eer {
            eer: points[k].1,
            threshold: points[k].0,
        });
    }
    let (prev, cur) = (points[k - 1], points[k]);
    let alpha = gap(&prev) / (gap(&prev) - gap(&cur));
    Ok(Eer {
        eer: prev.1 + alpha * (cur.1 - prev.1),
        threshold: prev.0 + alpha * (cur.0 - prev.0),
    })
}

/// Class indices of one score row ordered best first (ties: lower index first).
pub fn ranking(row: ArrayView1<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx
}

fn in_top_k(row: ArrayView1<f64>, label: usize, k: usize) -> bool {
    // Rank of `label` = entries strictly better, plus equal entries with lower index.
    let v = row[label];
    let better = row
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > v || (x == v && j < label))
        .count();
    better < k
}

/// Fraction of rows whose true label is among the top `k` scores.
pub fn topk_accuracy(scores: &Array2<f64>, labels: &[usize], k: usize) -> Result<f64> {
    topk_accuracy_masked(scores, labels, k, None)
}

fn topk_accuracy_masked(
    scores: &Array2<f64>,
    labels: &[usize],
    k: usize,
    mask: Option<&[bool]>,
) -> Result<f64> {
    let classes = scores.ncols();
    if k == 0 || k > classes {
        return Err(Error::InvalidArgument(format!(
            "top-k needs 1 <= k <= {classes}, got {k}"
        )));
    }
    if labels.len() != scores.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} rows",
            labels.len(),
            scores.nrows()
        )));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        total += 1;
        if in_top_k(scores.row(i), y, k) {
            hits += 1;
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    })
}

/// One row of the pseudo-label audit table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub metric: MetricKind,
    /// Entropic weight for `rot` / `prot`; absent otherwise.
    pub lambda: Option<f64>,
    pub top1_full: f64,
    pub top5_full: f64,
    pub top1_selected: f64,
    pub top5_selected: f64,
    pub selected_fraction: f64,
}

#[derive(Debug, Clone, Default)]
struct Tally {
    top1: usize,
    top5: usize,
    top1_sel: usize,
    top5_sel: usize,
    selected: usize,
    total: usize,
}

impl Tally {
    fn add(&mut self, batch: &PseudoLabelBatch, labels: &[usize]) {
        let k5 = 5.min(batch.scores.ncols());
        for (i, &y) in labels.iter().enumerate() {
            let row = batch.scores.row(i);
            let h1 = batch.labels[i] == y;
            let h5 = in_top_k(row, y, k5);
            self.total += 1;
            self.top1 += usize::from(h1);
            self.top5 += usize::from(h5);
            if batch.selected[i] {
                self.selected += 1;
                self.top1_sel += usize::from(h1);
                self.top5_sel += usize::from(h5);
            }
        }
    }

    fn row(&self, metric: MetricKind, lambda: Option<f64>) -> AuditRow {
        let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        AuditRow {
            metric,
            lambda,
            top1_full: frac(self.top1, self.total),
            top5_full: frac(self.top5, self.total),
            top1_selected: frac(self.top1_sel, self.selected),
            top5_selected: frac(self.top5_sel, self.selected),
            selected_fraction: frac(self.selected, self.total),
        }
    }
}

/// Compares the four pseudo-label metrics on a labeled set.
///
/// The set is shuffled with `seed` and cut into batches of `batch_size`
/// (the plan-based metrics are defined per batch). Labels are used only for
/// scoring. Logits and OT rows appear once; ROT and PROT once per lambda.
pub fn metric_audit(
    forward: &BatchForward,
    labels: &[usize],
    prototypes: &PrototypeSet,
    lambdas: &[f64],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<AuditRow>> {
    let n = forward.len();
    if labels.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {n} samples",
            labels.len()
        )));
    }
    if batch_size == 0 || n == 0 {
        return Err(Error::Empty("audit set"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut logits = Tally::default();
    let mut ot = Tally::default();
    let mut rot = vec![Tally::default(); lambdas.len()];
    let mut prot = vec![Tally::default(); lambdas.len()];
    for chunk in order.chunks(batch_size) {
        let batch = crate::trainer::select_rows(forward, chunk);
        let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        logits.add(
            &label_with_metric(&batch, prototypes, MetricKind::Logits, 0.0)?,
            &y,
        );
        ot.add(
            &label_with_metric(&batch, prototypes, MetricKind::Ot, 0.0)?,
            &y,
        );
        for (li, &lambda) in lambdas.iter().enumerate() {
            let p = label_with_metric(&batch, prototypes, MetricKind::Prot, lambda)?;
            prot[li].add(&p, &y);
            let mut r = p;
            r.selected.fill(true);
            rot[li].add(&r, &y);
        }
    }
    let mut rows = vec![
        logits.row(MetricKind::Logits, None),
        ot.row(MetricKind::Ot, None),
    ];
    for (li, &lambda) in lambdas.iter().enumerate() {
        rows.push(rot[li].row(MetricKind::Rot, Some(lambda)));
    }
    for (li, &lambda) in lambdas.iter().enumerate() {
        rows.push(prot[li].row(MetricKind::Prot, Some(lambda)));
    }
    Ok(rows)
}

/// Writes the audit table as CSV.
pub fn write_audit_csv(rows: &[AuditRow], out: &mut impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "metric",
        "lambda",
        "top1_full",
        "top5_full",
        "top1_selected",
        "top5_selected",
        "selected_fraction",
    ])?;
    for r in rows {
        w.write_record([
            r.metric.name().to_string(),
            r.lambda.map(|l| format!("{l}")).unwrap_or_default(),
            format!("{:.6}", r.top1_full),
            format!("{:.6}", r.top5_full),
            format!("{:.6}", r.top1_selected),
            format!("{:.6}", r.top5_selected),
            format!("{:.6}", r.selected_fraction),
        ])?;
    }
    w.flush()?;
    Ok(())
}
