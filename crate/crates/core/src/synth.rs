//! Synthetic "speakers under a channel" benchmark.
//!
//! Each speaker is a cluster mean in a low-dimensional subspace of the input
//! space; samples add isotropic Gaussian scatter. The target domain passes
//! clean samples of a speaker subset through a fixed channel: the top
//! coordinates are zeroed (band limiting), the rest mixed by a random
//! near-orthogonal matrix, and white noise scaled by the noise level is added.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainSpec {
    pub num_speakers: usize,
    /// Clean training samples per speaker; also the target adaptation count.
    pub samples_per_speaker: usize,
    /// Held-out samples per speaker for verification trials.
    pub test_samples_per_speaker: usize,
    pub input_dim: usize,
    /// Rank of the subspace holding the speaker means.
    pub speaker_dim: usize,
    /// Root-mean-square size of a speaker mean, per input coordinate.
    pub speaker_spread: f64,
    /// Standard deviation of the within-speaker scatter, per coordinate.
    pub within_scatter: f64,
    pub target_speaker_subset: usize,
    /// Standard deviation of the additive target noise, per coordinate.
    pub channel_noise_level: f64,
    /// Fraction of input coordinates that pass the channel.
    pub bandwidth_fraction: f64,
    /// Strength of the random channel mixing; 0 is the identity.
    pub channel_mixing: f64,
    pub seed: u64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            num_speakers: 64,
            samples_per_speaker: 50,
            test_samples_per_speaker: 10,
            input_dim: 40,
            speaker_dim: 8,
            speaker_spread: 1.0,
            within_scatter: 0.5,
            target_speaker_subset: 16,
            channel_noise_level: 1.0,
            bandwidth_fraction: 0.5,
            channel_mixing: 0.5,
            seed: 0,
        }
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.num_speakers == 0 || self.input_dim == 0 || self.speaker_dim == 0 {
            return bad("num_speakers, input_dim and speaker_dim must be positive");
        }
        if self.samples_per_speaker == 0 || self.test_samples_per_speaker == 0 {
            return bad("sample counts must be positive");
        }
        if self.target_speaker_subset == 0 || self.target_speaker_subset > self.num_speakers {
            return bad("target_speaker_subset must be in 1..=num_speakers");
        }
        if !(self.speaker_spread > 0.0 && self.speaker_spread.is_finite()) {
            return bad("speaker_spread must be finite and positive");
        }
        if !(self.within_scatter >= 0.0 && self.within_scatter.is_finite()) {
            return bad("within_scatter must be finite and nonnegative");
        }
        if !(self.channel_noise_level >= 0.0 && self.channel_noise_level.is_finite()) {
            return bad("channel_noise_level must be finite and nonnegative");
        }
        if !(self.bandwidth_fraction > 0.0 && self.bandwidth_fraction <= 1.0) {
            return bad("bandwidth_fraction must be in (0, 1]");
        }
        if !(self.channel_mixing >= 0.0 && self.channel_mixing.is_finite()) {
            return bad("channel_mixing must be finite and nonnegative");
        }
        Ok(())
    }

    /// Number of leading coordinates kept by the channel.
    pub fn passband(&self) -> usize {
        let cut = ((1.0 - self.bandwidth_fraction) * self.input_dim as f64).floor() as usize;
        (self.input_dim - cut).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Adapt,
}

impl Domain {
    pub fn name(&self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Adapt => "adapt",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            _ => Err(Error::Format(format!("unknown domain {s:?}"))),
        }
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "adapt" => Ok(Split::Adapt),
            _ => Err(Error::Format(format!("unknown split {s:?}"))),
        }
    }
}

/// Feature rows with speaker ids. Adaptation splits carry labels too, but
/// training code never reads them; they exist for audits.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub domain: Domain,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Distinct speaker ids, ascending.
    pub fn speakers(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.labels.clone();
        s.sort_unstable();
        s.dedup();
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Domains {
    pub source_train: Dataset,
    pub source_test: Dataset,
    pub target_adapt: Dataset,
    pub target_test: Dataset,
    /// Speakers present in the target domain, ascending.
    pub target_speakers: Vec<usize>,
}

impl Domains {
    pub fn all(&self) -> [&Dataset; 4] {
        [
            &self.source_train,
            &self.source_test,
            &self.target_adapt,
            &self.target_test,
        ]
    }
}

const STREAM_MEANS: u64 = 0;
const STREAM_SOURCE_TRAIN: u64 = 1;
const STREAM_SOURCE_TEST: u64 = 2;
const STREAM_CHANNEL: u64 = 3;
const STREAM_SUBSET: u64 = 4;
const STREAM_TARGET_CLEAN: u64 = 5;
const STREAM_NOISE_ADAPT: u64 = 6;
const STREAM_NOISE_TEST: u64 = 7;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        scale * rng.sample::<f64, _>(StandardNormal)
    })
}

fn speaker_means(spec: &DomainSpec) -> Array2<f64> {
    let mut rng = stream(spec.seed, STREAM_MEANS);
    let basis = gaussian(
        &mut rng,
        spec.input_dim,
        spec.speaker_dim,
        (1.0 / spec.speaker_dim as f64).sqrt(),
    );
    let latent = gaussian(&mut rng, spec.num_speakers, spec.speaker_dim, spec.speaker_spread);
    latent.dot(&basis.t())
}

fn clean_samples(
    means: &Array2<f64>,
    speakers: &[usize],
    per_speaker: usize,
    scatter: f64,
    rng: &mut ChaCha8Rng,
) -> (Array2<f64>, Vec<usize>) {
    let d = means.ncols();
    let labels: Vec<usize> = speakers
        .iter()
        .flat_map(|&k| std::iter::repeat(k).take(per_speaker))
        .collect();
    let mut x = gaussian(rng, labels.len(), d, scatter);
    for (mut row, &k) in x.rows_mut().into_iter().zip(&labels) {
        row += &means.row(k);
    }
    (x, labels)
}

/// Gram-Schmidt orthonormalization of `I + mixing * G`, column by column.
pub fn channel_matrix(spec: &DomainSpec) -> Array2<f64> {
    let d = spec.input_dim;
    let mut m = Array2::eye(d);
    if spec.channel_mixing == 0.0 {
        return m;
    }
    let mut rng = stream(spec.seed, STREAM_CHANNEL);
    m += &gaussian(&mut rng, d, d, spec.channel_mixing / (d as f64).sqrt());
    for j in 0..d {
        let mut v: Array1<f64> = m.column(j).to_owned();
        for i in 0..j {
            let q = m.column(i);
            let proj = q.dot(&v);
            v.scaled_add(-proj, &q);
        }
        let norm = v.dot(&v).sqrt();
        m.column_mut(j).assign(&(v / norm));
    }
    m
}

fn apply_channel(
    spec: &DomainSpec,
    channel: &Array2<f64>,
    clean: &Array2<f64>,
    noise: &mut ChaCha8Rng,
) -> Array2<f64> {
    let mut x = clean.clone();
    let pass = spec.passband();
    x.columns_mut()
        .into_iter()
        .skip(pass)
        .for_each(|mut c| c.fill(0.0));
    let mut out = x.dot(&channel.t());
    // Noise is drawn even at level zero so the stream position never depends
    // on the level.
    let eps = gaussian(noise, out.nrows(), out.ncols(), 1.0);
    out.scaled_add(spec.channel_noise_level, &eps);
    out
}

/// Builds all four splits described by a [`DomainSpec`].
pub fn generate(spec: &DomainSpec) -> Result<Domains> {
    spec.validate()?;
    let means = speaker_means(spec);
    let all: Vec<usize> = (0..spec.num_speakers).collect();
    let (x_train, y_train) = clean_samples(
        &means,
        &all,
        spec.samples_per_speaker,
        spec.within_scatter,
        &mut stream(spec.seed, STREAM_SOURCE_TRAIN),
    );
    let (x_test, y_test) = clean_samples(
        &means,
        &all,
        spec.test_samples_per_speaker,
        spec.within_scatter,
        &mut stream(spec.seed, STREAM_SOURCE_TEST),
    );

    let mut subset = all.clone();
    subset.shuffle(&mut stream(spec.seed, STREAM_SUBSET));
    subset.truncate(spec.target_speaker_subset);
    subset.sort_unstable();

    let channel = channel_matrix(spec);
    let (clean_adapt, y_adapt) = clean_samples(
        &means,
        &subset,
        spec.samples_per_speaker,
        spec.within_scatter,
        &mut stream(spec.seed, STREAM_TARGET_CLEAN),
    );
    let x_adapt = apply_channel(
        spec,
        &channel,
        &clean_adapt,
        &mut stream(spec.seed, STREAM_NOISE_ADAPT),
    );

    // The target test split is the channel applied to the held-out source
    // samples of the subset speakers.
    let in_subset: HashSet<usize> = subset.iter().copied().collect();
    let rows: Vec<usize> = (0..y_test.len())
        .filter(|&i| in_subset.contains(&y_test[i]))
        .collect();
    let clean_test = x_test.select(ndarray::Axis(0), &rows);
    let y_target_test: Vec<usize> = rows.iter().map(|&i| y_test[i]).collect();
    let x_target_test = apply_channel(
        spec,
        &channel,
        &clean_test,
        &mut stream(spec.seed, STREAM_NOISE_TEST),
    );

    Ok(Domains {
        source_train: Dataset {
            features: x_train,
            labels: y_train,
            domain: Domain::Source,
            split: Split::Train,
        },
        source_test: Dataset {
            features: x_test,
            labels: y_test,
            domain: Domain::Source,
            split: Split::Test,
        },
        target_adapt: Dataset {
            features: x_adapt,
            labels: y_adapt,
            domain: Domain::Target,
            split: Split::Adapt,
        },
        target_test: Dataset {
            features: x_target_test,
            labels: y_target_test,
            domain: Domain::Target,
            split: Split::Test,
        },
        target_speakers: subset,
    })
}

/// Writes datasets to one CSV: `speaker_id,domain,split,f0,...`.
/// Floats carry 17 significant digits, which round-trips every `f64`.
pub fn write_datasets(sets: &[&Dataset], out: impl Write) -> Result<()> {
    let d = sets.first().map(|s| s.dim()).unwrap_or(0);
    if sets.iter().any(|s| s.dim() != d) {
        return Err(Error::DimensionMismatch(
            "datasets differ in feature dimension".into(),
        ));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["speaker_id".to_string(), "domain".into(), "split".into()];
    header.extend((0..d).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    for s in sets {
        for (row, &y) in s.features.rows().into_iter().zip(&s.labels) {
            let mut rec = vec![y.to_string(), s.domain.to_string(), s.split.to_string()];
            rec.extend(row.iter().map(|v| format!("{v:.16e}")));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a file written by [`write_datasets`]; consecutive rows with the same
/// domain and split form one dataset.
pub fn read_datasets(input: impl Read) -> Result<Vec<Dataset>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.len() < 4
        || &header[0] != "speaker_id"
        || &header[1] != "domain"
        || &header[2] != "split"
    {
        return Err(Error::Format(
            "expected header speaker_id,domain,split,f0,...".into(),
        ));
    }
    let d = header.len() - 3;
    let mut out: Vec<(Domain, Split, Vec<f64>, Vec<usize>)> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let domain: Domain = rec[1].parse()?;
        let split: Split = rec[2].parse()?;
        let label: usize = rec[0]
            .parse()
            .map_err(|_| Error::Format(format!("bad speaker id {:?}", &rec[0])))?;
        if !matches!(out.last(), Some((dm, sp, _, _)) if *dm == domain && *sp == split) {
            out.push((domain, split, Vec::new(), Vec::new()));
        }
        let cur = out.last_mut().expect("pushed above");
        for field in rec.iter().skip(3) {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Format(format!("bad feature {field:?}")))?;
            cur.2.push(v);
        }
        cur.3.push(label);
    }
    out.into_iter()
        .map(|(domain, split, values, labels)| {
            let features = Array2::from_shape_vec((labels.len(), d), values)
                .map_err(|e| Error::Format(format!("ragged feature rows: {e}")))?;
            Ok(Dataset {
                features,
                labels,
                domain,
                split,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Trial {
    pub index_a: usize,
    pub index_b: usize,
    pub same_speaker: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrialSet {
    pub trials: Vec<Trial>,
}

impl TrialSet {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["index_a", "index_b", "label"])?;
        for t in &self.trials {
            w.write_record([
                t.index_a.to_string(),
                t.index_b.to_string(),
                u8::from(t.same_speaker).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(input: impl Read) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut trials = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != 3 {
                return Err(Error::Format(
                    "trial rows need index_a,index_b,label".into(),
                ));
            }
            let num = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad trial field {s:?}")))
            };
            let same_speaker = match &rec[2] {
                "1" => true,
                "0" => false,
                other => {
                    return Err(Error::Format(format!(
                        "trial label must be 0 or 1, got {other:?}"
                    )))
                }
            };
            trials.push(Trial {
                index_a: num(&rec[0])?,
                index_b: num(&rec[1])?,
                same_speaker,
            });
        }
        Ok(Self { trials })
    }
}

/// Balanced verification trials: `pairs_per_class` same-speaker and as many
/// different-speaker pairs, no unordered pair repeated.
pub fn make_trials(labels: &[usize], pairs_per_class: usize, seed: u64) -> Result<TrialSet> {
    let n = labels.len();
    let mut same = Vec::new();
    let mut diff_available = 0usize;
    for a in 0..n {
        for b in a + 1..n {
            if labels[a] == labels[b] {
                same.push((a, b));
            } else {
                diff_available += 1;
            }
        }
    }
    if same.is_empty() || diff_available == 0 {
        return Err(Error::InvalidArgument(
            "trials need at least two speakers and a speaker with two samples".into(),
        ));
    }
    if pairs_per_class == 0 || same.len() < pairs_per_class || diff_available < pairs_per_class {
        return Err(Error::InvalidArgument(format!(
            "asked for {pairs_per_class} pairs per class; {} same and {diff_available} different pairs exist",
            same.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    same.shuffle(&mut rng);
    same.truncate(pairs_per_class);

    let mut diff = Vec::with_capacity(pairs_per_class);
    let mut seen = HashSet::new();
    if diff_available <= 4 * pairs_per_class {
        // Dense request: enumerate and shuffle instead of rejection sampling.
        let mut all: Vec<(usize, usize)> = (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .filter(|&(a, b)| labels[a] != labels[b])
            .collect();
        all.shuffle(&mut rng);
        diff.extend(all.into_iter().take(pairs_per_class));
    } else {
        while diff.len() < pairs_per_class {
            let a = rng.gen_range(0..n);
            let b = rng.gen_range(0..n);
            if labels[a] == labels[b] {
                continue;
            }
            let key = (a.min(b), a.max(b));
            if seen.insert(key) {
                diff.push(key);
            }
        }
    }
    let mut trials: Vec<Trial> = same
        .into_iter()
        .map(|(a, b)| Trial {
            index_a: a,
            index_b: b,
            same_speaker: true,
        })
        .chain(diff.into_iter().map(|(a, b)| Trial {
            index_a: a,
            index_b: b,
            same_speaker: false,
        }))
        .collect();
    trials.shuffle(&mut rng);
    Ok(TrialSet { trials })
}
