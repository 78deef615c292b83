//! GMM-UBM speaker verification and equal error rate.

mod gmm;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use log::info;

use crate::dsp::{FeatureKind, FeatureMatrix};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub use gmm::{
    llr_score, map_adapt, train_ubm, GaussianMixtureModel, UbmConfig, UbmTraining, MIN_VARIANCE, MIN_WEIGHT,
    VARIANCE_FLOOR_RATIO,
};

/// Which data feed background training, enrollment and testing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    /// Clean training, enrollment and testing.
    Ccc,
    /// Clean training and enrollment, reverberant testing.
    Ccr,
    /// Reverberant training, enrollment and testing.
    Rrr,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Ccc, Condition::Ccr, Condition::Rrr];

    pub fn reverberant_training(self) -> bool {
        self == Condition::Rrr
    }

    pub fn reverberant_enrollment(self) -> bool {
        self == Condition::Rrr
    }

    pub fn reverberant_test(self) -> bool {
        self != Condition::Ccc
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::Ccc => "CCC",
            Condition::Ccr => "CCR",
            Condition::Rrr => "RRR",
        })
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CCC" => Ok(Condition::Ccc),
            "CCR" => Ok(Condition::Ccr),
            "RRR" => Ok(Condition::Rrr),
            _ => Err(Error::invalid(format!("unknown condition '{s}' (expected CCC, CCR or RRR)"))),
        }
    }
}

/// Same-speaker and different-speaker trial scores.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrialScores {
    pub target: Vec<f64>,
    pub nontarget: Vec<f64>,
}

impl TrialScores {
    pub fn new(target: Vec<f64>, nontarget: Vec<f64>) -> Self {
        TrialScores { target, nontarget }
    }

    pub fn from_trials(trials: &[Trial]) -> Self {
        let mut s = TrialScores::default();
        for t in trials {
            if t.is_target() {
                s.target.push(t.score);
            } else {
                s.nontarget.push(t.score);
            }
        }
        s
    }

    /// Equal error rate; see [`compute_eer`].
    pub fn eer(&self) -> Result<f64> {
        compute_eer(self)
    }
}

/// False acceptance and false rejection rates at threshold `theta`.
pub fn error_rates(scores: &TrialScores, theta: f64) -> (f64, f64) {
    let far = scores.nontarget.iter().filter(|s| **s >= theta).count() as f64 / scores.nontarget.len() as f64;
    let frr = scores.target.iter().filter(|s| **s < theta).count() as f64 / scores.target.len() as f64;
    (far, frr)
}

/// Equal error rate from a sweep over every observed score plus +inf.
///
/// A trial is accepted when its score is at least the threshold. The rate is
/// read where FAR - FRR changes sign, interpolating linearly between the two
/// neighbouring thresholds.
pub fn compute_eer(scores: &TrialScores) -> Result<f64> {
    if scores.target.is_empty() || scores.nontarget.is_empty() {
        return Err(Error::invalid("EER needs both target and nontarget scores"));
    }
    if scores.target.iter().chain(&scores.nontarget).any(|s| s.is_nan()) {
        return Err(Error::invalid("scores contain NaN"));
    }
    let mut tgt = scores.target.clone();
    let mut non = scores.nontarget.clone();
    tgt.sort_by(f64::total_cmp);
    non.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = tgt.iter().chain(&non).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);

    let (nt, nn) = (tgt.len() as f64, non.len() as f64);
    let rates = |theta: f64| {
        let below_t = tgt.partition_point(|s| *s < theta) as f64;
        let below_n = non.partition_point(|s| *s < theta) as f64;
        ((nn - below_n) / nn, below_t / nt)
    };
    let mut prev: Option<(f64, f64)> = None;
    for &theta in &thresholds {
        let (far, frr) = rates(theta);
        let diff = far - frr;
        if diff <= 0.0 {
            return Ok(match prev {
                Some((pfar, pfrr)) if diff < 0.0 => {
                    let pdiff = pfar - pfrr;
                    let alpha = pdiff / (pdiff - diff);
                    pfar + alpha * (far - pfar)
                }
                _ => 0.5 * (far + frr),
            });
        }
        prev = Some((far, frr));
    }
    unreachable!("FAR - FRR is -1 at the +inf threshold")
}

/// One scored trial.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub test_utt_id: String,
    pub claimed_speaker: String,
    pub true_speaker: String,
    pub score: f64,
}

impl Trial {
    pub fn is_target(&self) -> bool {
        self.claimed_speaker == self.true_speaker
    }
}

pub fn write_scores_csv(trials: &[Trial], out: &mut impl Write) -> Result<()> {
    writeln!(out, "test_utt_id,claimed_speaker,true_speaker,score")?;
    for t in trials {
        writeln!(out, "{},{},{},{:?}", t.test_utt_id, t.claimed_speaker, t.true_speaker, t.score)?;
    }
    Ok(())
}

pub fn read_scores_csv(input: impl BufRead) -> Result<Vec<Trial>> {
    let mut trials = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("test_utt_id")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [utt, claimed, truth, score] = fields[..] else {
            return Err(Error::format(format!("score line {} has {} fields, expected 4", i + 1, fields.len())));
        };
        let score: f64 = score
            .parse()
            .map_err(|_| Error::format(format!("score line {}: bad score '{score}'", i + 1)))?;
        trials.push(Trial {
            test_utt_id: utt.to_string(),
            claimed_speaker: claimed.to_string(),
            true_speaker: truth.to_string(),
            score,
        });
    }
    Ok(trials)
}

/// Verification features of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatures {
    pub utt_id: String,
    pub speaker_id: String,
    pub features: FeatureMatrix,
}

/// Backend settings shared by every condition.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationConfig {
    pub ubm: UbmConfig,
    pub relevance: f64,
}

impl Default for VerificationConfig {
    fn default() -> Self {
        VerificationConfig {
            ubm: UbmConfig::default(),
            relevance: 16.0,
        }
    }
}

/// Scores and equal error rate of one condition.
#[derive(Debug, Clone)]
pub struct ConditionResult {
    pub eer: f64,
    pub trials: Vec<Trial>,
    pub scores: TrialScores,
    pub ubm_log_likelihoods: Vec<f64>,
}

fn speakers(set: &[LabeledFeatures]) -> BTreeSet<&str> {
    set.iter().map(|u| u.speaker_id.as_str()).collect()
}

/// Pools the frames of every utterance in `set`.
pub fn stack_frames(set: &[LabeledFeatures]) -> Matrix {
    let d = set.first().map_or(0, |u| u.features.dim());
    let mut data = Vec::new();
    for u in set {
        data.extend_from_slice(u.features.data().as_slice());
    }
    Matrix::from_vec(data.len() / d.max(1), d, data)
}

/// Rejects empty partitions, mixed feature kinds, speakers shared between
/// background training and evaluation, and unenrolled test speakers.
pub fn check_partitions(train: &[LabeledFeatures], enroll: &[LabeledFeatures], test: &[LabeledFeatures]) -> Result<()> {
    if train.is_empty() || enroll.is_empty() || test.is_empty() {
        return Err(Error::invalid("training, enrollment and test sets must be non-empty"));
    }
    let kind = train[0].features.kind();
    if train.iter().chain(enroll).chain(test).any(|u| u.features.kind() != kind) {
        return Err(Error::invalid("all utterances must share one feature kind"));
    }
    if kind == FeatureKind::Pitch1 {
        return Err(Error::invalid("pitch tracks are not verification features"));
    }
    let train_spk = speakers(train);
    let eval_spk: BTreeSet<&str> = speakers(enroll).union(&speakers(test)).copied().collect();
    if let Some(s) = train_spk.intersection(&eval_spk).next() {
        return Err(Error::invalid(format!(
            "speaker {s} appears in both background training and evaluation"
        )));
    }
    let enrolled = speakers(enroll);
    if let Some(u) = test.iter().find(|u| !enrolled.contains(u.speaker_id.as_str())) {
        return Err(Error::invalid(format!("test speaker {} was never enrolled", u.speaker_id)));
    }
    Ok(())
}

/// One MAP-adapted model per enrolled speaker, keyed by speaker id.
pub fn enroll_speakers(
    ubm: &GaussianMixtureModel,
    enroll: &[LabeledFeatures],
    relevance: f64,
) -> Result<BTreeMap<String, GaussianMixtureModel>> {
    let mut models = BTreeMap::new();
    for spk in speakers(enroll) {
        let utts: Vec<LabeledFeatures> = enroll.iter().filter(|u| u.speaker_id == spk).cloned().collect();
        models.insert(spk.to_string(), map_adapt(ubm, &stack_frames(&utts), relevance)?);
    }
    Ok(models)
}

/// Scores every test utterance against every enrolled model.
pub fn score_trials(
    ubm: &GaussianMixtureModel,
    models: &BTreeMap<String, GaussianMixtureModel>,
    test: &[LabeledFeatures],
) -> Result<Vec<Trial>> {
    let mut trials = Vec::with_capacity(test.len() * models.len());
    for u in test {
        for (spk, model) in models {
            trials.push(Trial {
                test_utt_id: u.utt_id.clone(),
                claimed_speaker: spk.clone(),
                true_speaker: u.speaker_id.clone(),
                score: llr_score(u.features.data(), model, ubm)?,
            });
        }
    }
    Ok(trials)
}

/// Trains a background model on `train`, enrolls one MAP-adapted model per
/// speaker in `enroll` and scores every test utterance against every model.
pub fn run_condition(
    train: &[LabeledFeatures],
    enroll: &[LabeledFeatures],
    test: &[LabeledFeatures],
    cfg: &VerificationConfig,
) -> Result<ConditionResult> {
    check_partitions(train, enroll, test)?;
    let training = train_ubm(&stack_frames(train), &cfg.ubm)?;
    let models = enroll_speakers(&training.model, enroll, cfg.relevance)?;
    let trials = score_trials(&training.model, &models, test)?;
    let scores = TrialScores::from_trials(&trials);
    let eer = compute_eer(&scores)?;
    info!(
        "{} target / {} nontarget trials, EER {:.4}",
        scores.target.len(),
        scores.nontarget.len(),
        eer
    );
    Ok(ConditionResult {
        eer,
        trials,
        scores,
        ubm_log_likelihoods: training.log_likelihoods,
    })
}
