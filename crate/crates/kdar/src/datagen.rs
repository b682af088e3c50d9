//! Synthetic biased benchmark generator.
//!
//! Each question type owns a disjoint block of answers. Training draws each
//! block's answer from a power-law prior rank^(-skew); the out-of-distribution
//! test split inverts the rank order (or flattens it), while the
//! in-distribution split redraws from the training prior. The question
//! feature exposes only the question type; the visual feature is a noisy
//! per-answer prototype, so the true answer is always recoverable from the
//! visual channel alone.
//!
//! All randomness comes from a ChaCha8 stream seeded by `SyntheticSpec::seed`,
//! so generation is fully deterministic for this implementation. Noise draws
//! are consumed even when `noise_sigma` is zero, which keeps the qtype/answer
//! sequence and the prototypes identical across noise levels at a fixed seed.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FeaturePair;
use crate::util::{format_f64_full, sha256_hex};

/// Scale of the per-answer prototype vectors relative to unit feature noise.
/// Calibrated against `noise_sigma`'s default so the visual channel stays
/// decodable while classes overlap enough for the answer prior to matter at
/// the boundaries.
pub const PROTOTYPE_SCALE: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMode {
    /// Test prior reverses each block's rank order.
    Inverted,
    /// Test prior is uniform over each block.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    TestOod,
    TestIid,
}

impl std::fmt::Display for SplitTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SplitTag::Train => write!(f, "train"),
            SplitTag::TestOod => write!(f, "test_ood"),
            SplitTag::TestIid => write!(f, "test_iid"),
        }
    }
}

/// Everything that determines a generated benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_qtypes: usize,
    pub n_answers_per_type: usize,
    /// Power-law exponent of the training prior; 1 means flat.
    pub skew: f64,
    pub shift_mode: ShiftMode,
    pub d_v: usize,
    pub d_q: usize,
    pub noise_sigma: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub annotator_count_max: u32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_qtypes: 4,
            n_answers_per_type: 5,
            skew: 3.0,
            shift_mode: ShiftMode::Inverted,
            d_v: 16,
            d_q: 16,
            noise_sigma: 0.3,
            n_train: 20_000,
            n_test: 4_000,
            annotator_count_max: 10,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn n_classes(&self) -> usize {
        self.n_qtypes * self.n_answers_per_type
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_qtypes == 0 {
            return Err(Error::Config("n_qtypes must be >= 1".into()));
        }
        if self.n_answers_per_type == 0 {
            return Err(Error::Config("n_answers_per_type must be >= 1".into()));
        }
        if self.skew < 1.0 || !self.skew.is_finite() {
            return Err(Error::Config(format!("skew must be >= 1, got {}", self.skew)));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!(
                "noise_sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        if self.d_v == 0 {
            return Err(Error::Config("d_v must be >= 1".into()));
        }
        if self.d_q < self.n_qtypes {
            return Err(Error::Config(format!(
                "d_q must be >= n_qtypes to embed the question type one-hot, got d_q={} < n_qtypes={}",
                self.d_q, self.n_qtypes
            )));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("n_train and n_test must be >= 1".into()));
        }
        if self.annotator_count_max == 0 {
            return Err(Error::Config("annotator_count_max must be >= 1".into()));
        }
        Ok(())
    }
}

/// One synthetic question-answer instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub qtype: u32,
    #[serde(flatten)]
    pub features: FeaturePair,
    pub answer: u32,
    pub agreement: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub split: SplitTag,
    pub samples: Vec<Sample>,
    pub fingerprint: String,
}

/// The three splits generated from one spec.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub spec: SyntheticSpec,
    pub train: Dataset,
    pub test_ood: Dataset,
    pub test_iid: Dataset,
}

/// SHA-256 of the canonical JSON encoding of the spec.
pub fn spec_fingerprint(spec: &SyntheticSpec) -> String {
    sha256_hex(serde_json::to_string(spec).expect("spec serializes").as_bytes())
}

/// Normalized power-law weights rank^(-skew) for ranks 1..=n.
pub fn power_law_weights(n: usize, skew: f64) -> Vec<f64> {
    let mut w: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-skew)).collect();
    let z: f64 = w.iter().sum();
    for v in &mut w {
        *v /= z;
    }
    w
}

fn split_prior(spec: &SyntheticSpec, split: SplitTag) -> Vec<f64> {
    let train = power_law_weights(spec.n_answers_per_type, spec.skew);
    match (split, spec.shift_mode) {
        (SplitTag::Train | SplitTag::TestIid, _) => train,
        (SplitTag::TestOod, ShiftMode::Inverted) => train.into_iter().rev().collect(),
        (SplitTag::TestOod, ShiftMode::Uniform) => {
            vec![1.0 / spec.n_answers_per_type as f64; spec.n_answers_per_type]
        }
    }
}

fn sample_categorical(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// agreement = max(1, round(annotator_count_max * (0.6 + 0.4 * prior))),
/// where `prior` is the answer's frequency within its question type under
/// the generating split's prior. Common answers thus collect more simulated
/// annotator votes on average.
fn agreement_for(prior: f64, annotator_count_max: u32) -> u32 {
    let raw = (annotator_count_max as f64 * (0.6 + 0.4 * prior)).round() as i64;
    raw.max(1) as u32
}

fn generate_split(
    spec: &SyntheticSpec,
    split: SplitTag,
    n: usize,
    prototypes: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
    fingerprint: &str,
) -> Dataset {
    let prior = split_prior(spec, split);
    let a = spec.n_answers_per_type;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let qtype = rng.gen_range(0..spec.n_qtypes);
        let within = sample_categorical(rng, &prior);
        let answer = qtype * a + within;
        let mut visual = prototypes[answer].clone();
        for v in &mut visual {
            let noise: f64 = rng.sample(StandardNormal);
            *v += spec.noise_sigma * noise;
        }
        let mut question = vec![0.0; spec.d_q];
        question[qtype] = 1.0;
        for v in &mut question {
            let noise: f64 = rng.sample(StandardNormal);
            *v += spec.noise_sigma * noise;
        }
        samples.push(Sample {
            qtype: qtype as u32,
            features: FeaturePair { visual, question },
            answer: answer as u32,
            agreement: agreement_for(prior[within], spec.annotator_count_max),
        });
    }
    Dataset { spec: spec.clone(), split, samples, fingerprint: fingerprint.to_string() }
}

/// Generate the train / test_ood / test_iid splits for a spec.
pub fn generate(spec: &SyntheticSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let fingerprint = spec_fingerprint(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // Prototypes are drawn first, so they depend only on the seed.
    let prototypes: Vec<Vec<f64>> = (0..spec.n_classes())
        .map(|_| {
            (0..spec.d_v)
                .map(|_| {
                    let n: f64 = rng.sample(StandardNormal);
                    PROTOTYPE_SCALE * n
                })
                .collect()
        })
        .collect();
    let train = generate_split(spec, SplitTag::Train, spec.n_train, &prototypes, &mut rng, &fingerprint);
    let test_ood =
        generate_split(spec, SplitTag::TestOod, spec.n_test, &prototypes, &mut rng, &fingerprint);
    let test_iid =
        generate_split(spec, SplitTag::TestIid, spec.n_test, &prototypes, &mut rng, &fingerprint);
    Ok(DatasetBundle { spec: spec.clone(), train, test_ood, test_iid })
}

/// Per-question-type answer frequency table; rows sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorTable {
    rows: BTreeMap<u32, BTreeMap<u32, f64>>,
}

impl PriorTable {
    pub fn freq(&self, qtype: u32, answer: u32) -> Option<f64> {
        self.rows.get(&qtype).and_then(|row| row.get(&answer)).copied()
    }

    pub fn row(&self, qtype: u32) -> Option<&BTreeMap<u32, f64>> {
        self.rows.get(&qtype)
    }

    pub fn qtypes(&self) -> impl Iterator<Item = u32> + '_ {
        self.rows.keys().copied()
    }

    /// Most frequent answer of a question type; ties break toward the lowest
    /// answer index.
    pub fn head_answer(&self, qtype: u32) -> Option<u32> {
        let row = self.rows.get(&qtype)?;
        let mut best: Option<(u32, f64)> = None;
        for (&answer, &freq) in row {
            match best {
                Some((_, best_freq)) if freq <= best_freq => {}
                _ => best = Some((answer, freq)),
            }
        }
        best.map(|(answer, _)| answer)
    }
}

/// Empirical per-qtype answer frequencies of a dataset.
pub fn prior_histogram(ds: &Dataset) -> Result<PriorTable> {
    if ds.samples.is_empty() {
        return Err(Error::Domain("prior_histogram of an empty dataset".into()));
    }
    let mut counts: BTreeMap<u32, BTreeMap<u32, usize>> = BTreeMap::new();
    for s in &ds.samples {
        *counts.entry(s.qtype).or_default().entry(s.answer).or_default() += 1;
    }
    let rows = counts
        .into_iter()
        .map(|(qtype, row)| {
            let total: usize = row.values().sum();
            let normalized =
                row.into_iter().map(|(a, c)| (a, c as f64 / total as f64)).collect();
            (qtype, normalized)
        })
        .collect();
    Ok(PriorTable { rows })
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: SyntheticSpec,
    fingerprint: String,
    split: SplitTag,
}

fn format_floats(values: &[f64]) -> String {
    values.iter().map(|&v| format_f64_full(v)).collect::<Vec<_>>().join(",")
}

/// Write a dataset as JSONL: a header line carrying the spec, fingerprint and
/// split tag, then one sample object per line with floats at full precision.
pub fn save_jsonl(ds: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header = Header {
        spec: ds.spec.clone(),
        fingerprint: ds.fingerprint.clone(),
        split: ds.split,
    };
    let header_line = serde_json::to_string(&header)
        .map_err(|e| Error::Parse { line: 1, msg: format!("header serialization failed: {e}") })?;
    let mut write = |line: &str| -> Result<()> {
        out.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))
    };
    write(&header_line)?;
    for s in &ds.samples {
        let line = format!(
            "{{\"qtype\":{},\"visual\":[{}],\"question\":[{}],\"answer\":{},\"agreement\":{}}}",
            s.qtype,
            format_floats(&s.features.visual),
            format_floats(&s.features.question),
            s.answer,
            s.agreement
        );
        write(&line)?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Parse one JSONL record into a sample; `line_no` is 1-based and only used
/// for error reporting.
pub fn parse_sample_line(line: &str, line_no: usize) -> Result<Sample> {
    serde_json::from_str(line).map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })
}

/// Read a dataset written by [`save_jsonl`]. A fingerprint that does not
/// match the embedded spec is reported as a warning, not a failure.
pub fn load_jsonl(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let (_, header_line) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, msg: "empty file, expected header line".into() })?;
    let header_line = header_line.map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&header_line)
        .map_err(|e| Error::Parse { line: 1, msg: format!("bad header: {e}") })?;
    if spec_fingerprint(&header.spec) != header.fingerprint {
        log::warn!(
            "dataset {} fingerprint does not match its embedded spec",
            path.display()
        );
    }
    let mut samples = Vec::new();
    for (idx, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        samples.push(parse_sample_line(&line, idx + 1)?);
    }
    if samples.is_empty() {
        return Err(Error::Domain(format!("dataset {} has no samples", path.display())));
    }
    Ok(Dataset {
        spec: header.spec,
        split: header.split,
        samples,
        fingerprint: header.fingerprint,
    })
}
