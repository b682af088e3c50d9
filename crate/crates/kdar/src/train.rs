//! Two-phase training pipeline: fit a debiased surrogate teacher with
//! inverse-frequency sample reweighting, freeze it, then train a student
//! against the selected objective using the teacher's tempered outputs.
//!
//! Batch order is a seeded shuffle per epoch drawn from a ChaCha8 stream, so
//! a (seed, data, config) triple reproduces runs bit-for-bit.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{prior_histogram, DatasetBundle, PriorTable, Sample};
use crate::error::{Error, Result};
use crate::eval::{argmax_lowest, consensus_accuracy, evaluate};
use crate::losses::{apt_loss, bce_loss, kd_loss, total_loss, KdarConfig, LossOutput};
use crate::model::{
    backward_into, forward, forward_logits, init_params, optimizer_step, MlpParams, ModelDims,
    OptimizerState, ParamTensors, DEFAULT_HIDDEN,
};
use crate::numerics::ProbVector;

pub use crate::model::{load_checkpoint, save_checkpoint};

/// Which objective the student minimizes. Mirrors the ablation rows:
/// baseline BCE, each term alone, and the full combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    BceOnly,
    KdOnly,
    AptOnly,
    Kdar,
}

impl LossMode {
    pub fn needs_teacher(self) -> bool {
        !matches!(self, LossMode::BceOnly)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::BceOnly => "bce_only",
            LossMode::KdOnly => "kd_only",
            LossMode::AptOnly => "apt_only",
            LossMode::Kdar => "kdar",
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub kdar: KdarConfig,
    /// Multiply each teacher-phase sample loss by the inverse frequency of
    /// its answer within its question type, normalized to mean one.
    pub teacher_reweight: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 128,
            learning_rate: 1e-3,
            seed: 0,
            loss_mode: LossMode::Kdar,
            kdar: KdarConfig::default(),
            teacher_reweight: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        self.kdar.validate()
    }
}

/// One completed epoch: mean loss and diagnostics over the training samples,
/// accuracies on all three splits, wall time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub diagnostics: BTreeMap<String, f64>,
    pub acc_train: f64,
    pub acc_iid: f64,
    pub acc_ood: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub records: Vec<EpochRecord>,
}

/// Stable history CSV schema. The wall-time column is the only field that is
/// not reproducible across runs.
pub const HISTORY_COLUMNS: &str =
    "epoch,loss_total,loss_bce,loss_kd_ce,loss_kd_kl,apt_weight_mean,acc_train,acc_iid,acc_ood,seconds";

impl RunHistory {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(HISTORY_COLUMNS);
        out.push('\n');
        for r in &self.records {
            let diag = |key: &str| -> String {
                r.diagnostics.get(key).map(|v| format!("{v:.9}")).unwrap_or_default()
            };
            out.push_str(&format!(
                "{},{:.9},{},{},{},{},{:.6},{:.6},{:.6},{:.3}\n",
                r.epoch,
                r.loss_total,
                diag(crate::losses::diag::BCE),
                diag(crate::losses::diag::KD_CE),
                diag(crate::losses::diag::KD_KL),
                diag(crate::losses::diag::APT_WEIGHT),
                r.acc_train,
                r.acc_iid,
                r.acc_ood,
                r.seconds
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::util::write_file(path, &self.to_csv())
    }
}

fn model_dims(bundle: &DatasetBundle) -> ModelDims {
    ModelDims {
        d_v: bundle.spec.d_v,
        d_q: bundle.spec.d_q,
        hidden: DEFAULT_HIDDEN,
        n_classes: bundle.spec.n_classes(),
    }
}

/// Per-class targets: the ground-truth class scaled by the consensus credit
/// min(1, agreement / 3), so BCE sees a soft positive exactly when the
/// simulated annotators disagree.
fn bce_targets(sample: &Sample, n_classes: usize) -> Vec<f64> {
    let mut t = vec![0.0; n_classes];
    t[sample.answer as usize] = (sample.agreement as f64 / 3.0).min(1.0);
    t
}

/// Inverse-frequency weights, normalized to mean one over the train set.
fn inverse_frequency_weights(samples: &[Sample], prior: &PriorTable) -> Result<Vec<f64>> {
    let mut raw = Vec::with_capacity(samples.len());
    for s in samples {
        let freq = prior.freq(s.qtype, s.answer).ok_or_else(|| {
            Error::Domain(format!("answer {} of qtype {} missing from prior", s.answer, s.qtype))
        })?;
        raw.push(1.0 / freq);
    }
    let mean: f64 = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(raw.into_iter().map(|w| w / mean).collect())
}

struct SampleLoss {
    out: LossOutput,
    weight: f64,
}

fn run_training(
    bundle: &DatasetBundle,
    cfg: &TrainConfig,
    teacher: Option<&MlpParams>,
    sample_weights: Option<&[f64]>,
) -> Result<(MlpParams, RunHistory)> {
    cfg.validate()?;
    if bundle.train.samples.is_empty() {
        return Err(Error::Domain("training dataset is empty".into()));
    }
    let dims = model_dims(bundle);
    if let Some(t) = teacher {
        if t.dims != dims {
            return Err(Error::Config(format!(
                "teacher dims {} do not match student dims {}",
                t.dims, dims
            )));
        }
    }
    let n_classes = dims.n_classes;
    let prior = prior_histogram(&bundle.train)?;
    let mut params = init_params(cfg.seed, &dims)?;
    let mut opt = OptimizerState::new(&dims, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..bundle.train.samples.len()).collect();
    let mut history = RunHistory::default();

    let per_sample = |params: &MlpParams, s: &Sample, idx: usize| -> Result<(SampleLoss, f64, crate::model::ForwardCache)> {
        let (logits, cache) = forward(params, &s.features)?;
        let train_score = consensus_accuracy(argmax_lowest(logits.as_slice()) as u32, s);
        let targets = bce_targets(s, n_classes);
        let out = match cfg.loss_mode {
            LossMode::BceOnly => bce_loss(&logits, &targets, &cfg.kdar)?,
            mode => {
                let teacher = teacher.expect("teacher presence validated");
                let teacher_logits = forward_logits(teacher, &s.features)?;
                let gt = s.answer as usize;
                match mode {
                    LossMode::KdOnly => {
                        let hard = ProbVector::one_hot(n_classes, gt)?;
                        kd_loss(&logits, &teacher_logits, &hard, &cfg.kdar)?
                    }
                    LossMode::AptOnly => apt_loss(&logits, &teacher_logits, &targets, gt, &cfg.kdar)?,
                    LossMode::Kdar => {
                        let hard = ProbVector::one_hot(n_classes, gt)?;
                        total_loss(&logits, &teacher_logits, &targets, &hard, gt, &cfg.kdar)?
                    }
                    LossMode::BceOnly => unreachable!(),
                }
            }
        };
        let weight = sample_weights.map(|w| w[idx]).unwrap_or(1.0);
        Ok((SampleLoss { out, weight }, train_score, cache))
    };

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut diag_sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut train_score_sum = 0.0;
        let mut grads = ParamTensors::zeros(&dims);

        for batch in order.chunks(cfg.batch_size) {
            for s in grads.slices_mut() {
                s.fill(0.0);
            }
            let inv_batch = 1.0 / batch.len() as f64;
            for &idx in batch {
                let sample = &bundle.train.samples[idx];
                let (loss, train_score, cache) = per_sample(&params, sample, idx)?;
                train_score_sum += train_score;
                loss_sum += loss.weight * loss.out.value;
                for (k, v) in &loss.out.diagnostics {
                    *diag_sums.entry(k.clone()).or_default() += loss.weight * v;
                }
                let scale = loss.weight * inv_batch;
                let scaled: Vec<f64> =
                    loss.out.grad_student_logits.iter().map(|g| g * scale).collect();
                backward_into(&params, &cache, &scaled, &mut grads)?;
            }
            optimizer_step(&mut params, &grads, &mut opt)?;
        }

        let n = bundle.train.samples.len() as f64;
        let diagnostics: BTreeMap<String, f64> =
            diag_sums.into_iter().map(|(k, v)| (k, v / n)).collect();
        let loss_total = loss_sum / n;
        let iid = evaluate(&params, &bundle.test_iid, &prior)?;
        let ood = evaluate(&params, &bundle.test_ood, &prior)?;
        let record = EpochRecord {
            epoch,
            loss_total,
            diagnostics,
            acc_train: train_score_sum / n,
            acc_iid: iid.overall,
            acc_ood: ood.overall,
            seconds: started.elapsed().as_secs_f64(),
        };
        if !record.loss_total.is_finite()
            || !record.diagnostics.values().all(|v| v.is_finite())
        {
            return Err(Error::Numerical(format!(
                "non-finite loss or diagnostic at epoch {epoch}"
            )));
        }
        history.records.push(record);
    }
    Ok((params, history))
}

/// Phase one: fit the surrogate teacher with plain BCE, optionally debiased
/// by inverse-frequency reweighting.
pub fn train_teacher(bundle: &DatasetBundle, cfg: &TrainConfig) -> Result<(MlpParams, RunHistory)> {
    if cfg.loss_mode != LossMode::BceOnly {
        return Err(Error::Config(format!(
            "the teacher phase trains with bce_only, got {}",
            cfg.loss_mode
        )));
    }
    if bundle.train.samples.is_empty() {
        return Err(Error::Domain("training dataset is empty".into()));
    }
    let weights = if cfg.teacher_reweight {
        let prior = prior_histogram(&bundle.train)?;
        Some(inverse_frequency_weights(&bundle.train.samples, &prior)?)
    } else {
        None
    };
    run_training(bundle, cfg, None, weights.as_deref())
}

/// Phase two: train the student against the configured objective. The
/// teacher, when given, is only ever read; modes other than `bce_only`
/// require it.
pub fn train_student(
    bundle: &DatasetBundle,
    teacher: Option<&MlpParams>,
    cfg: &TrainConfig,
) -> Result<(MlpParams, RunHistory)> {
    if cfg.loss_mode.needs_teacher() && teacher.is_none() {
        return Err(Error::Config(format!(
            "loss mode {} requires a teacher checkpoint",
            cfg.loss_mode
        )));
    }
    let teacher = if cfg.loss_mode.needs_teacher() { teacher } else { None };
    run_training(bundle, cfg, teacher, None)
}
