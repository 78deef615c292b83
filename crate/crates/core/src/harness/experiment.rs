use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use log::{info, warn};
use serde::Serialize;

use super::config::KeyValues;
use super::corpus::{build_corpus, load_record, mix_seed, CorpusConfig, ExperimentManifest, UtteranceRecord, MANIFEST_FILE};
use crate::dsp::{analyze, extract_mfb, mel_energies, mfcc39, spec100, FeatureMatrix, FrameParams};
use crate::error::{Error, Result};
use crate::nnet::{enhance, train, Checkpoint, NetworkConfig, SecondaryTarget, TrainingPair};
use crate::pitch::{track, PitchConfig};
use crate::sv::{
    check_partitions, compute_eer, enroll_speakers, GaussianMixtureModel, score_trials, stack_frames, train_ubm, Condition, LabeledFeatures,
    TrialScores, UbmConfig, VerificationConfig,
};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// A row of the EER grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum System {
    /// MFCCs of unprocessed features.
    Baseline,
    /// Network with the clean log-Mel target only.
    OneLabel,
    DualPitch,
    DualSpec,
    /// Secondary target identical to the primary one.
    DualMfb,
}

impl System {
    pub fn secondary(self) -> Option<SecondaryTarget> {
        match self {
            System::Baseline => None,
            System::OneLabel => Some(SecondaryTarget::None),
            System::DualPitch => Some(SecondaryTarget::Pitch1),
            System::DualSpec => Some(SecondaryTarget::Spec100),
            System::DualMfb => Some(SecondaryTarget::Mfb31),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            System::Baseline => "baseline",
            System::OneLabel => "one-label",
            System::DualPitch => "dual-pitch",
            System::DualSpec => "dual-spec",
            System::DualMfb => "dual-mfb",
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [System::Baseline, System::OneLabel, System::DualPitch, System::DualSpec, System::DualMfb]
            .into_iter()
            .find(|sys| sys.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown system '{s}'")))
    }
}

/// Network hyperparameters shared by every network row.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSettings {
    pub n_layers: usize,
    pub cells: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weights of dual-target rows; one-label rows always use (1, 0).
    pub loss_weights: (f64, f64),
    pub spec_hidden: Vec<usize>,
}

impl Default for NetworkSettings {
    fn default() -> Self {
        let tiny = NetworkConfig::tiny(SecondaryTarget::Spec100);
        NetworkSettings {
            n_layers: tiny.n_layers,
            cells: tiny.cells,
            epochs: tiny.epochs,
            batch_size: tiny.batch_size,
            learning_rate: tiny.learning_rate,
            loss_weights: (0.5, 0.5),
            spec_hidden: tiny.secondary_hidden_dims,
        }
    }
}

impl NetworkSettings {
    pub fn config_for(&self, secondary: SecondaryTarget) -> NetworkConfig {
        let mut c = NetworkConfig::tiny(secondary);
        c.n_layers = self.n_layers;
        c.cells = self.cells;
        c.epochs = self.epochs;
        c.batch_size = self.batch_size;
        c.learning_rate = self.learning_rate;
        c.loss_weights = if secondary == SecondaryTarget::None { (1.0, 0.0) } else { self.loss_weights };
        c.secondary_hidden_dims = if secondary == SecondaryTarget::Spec100 { self.spec_hidden.clone() } else { Vec::new() };
        c
    }
}

/// Everything `run_experiment` needs, parsed from key=value text.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub seeds: Vec<u64>,
    pub systems: Vec<System>,
    pub network: NetworkSettings,
    pub ubm_components: usize,
    pub em_iterations: usize,
    pub relevance: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: CorpusConfig::default(),
            seeds: vec![1, 2, 3],
            systems: vec![System::Baseline, System::OneLabel, System::DualPitch, System::DualSpec],
            network: NetworkSettings::default(),
            ubm_components: 64,
            em_iterations: 20,
            relevance: 16.0,
        }
    }
}

const EXPERIMENT_KEYS: &[&str] = &[
    "n_speakers",
    "utts_per_speaker",
    "duration",
    "t60",
    "train_fraction",
    "enroll_per_speaker",
    "test_per_speaker",
    "seeds",
    "systems",
    "layers",
    "cells",
    "epochs",
    "batch_size",
    "learning_rate",
    "loss_weights",
    "spec_hidden",
    "ubm_components",
    "em_iterations",
    "relevance",
];

fn join<T: fmt::Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn keys() -> &'static [&'static str] {
        EXPERIMENT_KEYS
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.check_known(EXPERIMENT_KEYS)?;
        let d = ExperimentConfig::default();
        let c = &d.corpus;
        let n = &d.network;
        let loss_weights = match kv.get_list::<f64>("loss_weights")? {
            None => n.loss_weights,
            Some(w) if w.len() == 2 => (w[0], w[1]),
            Some(_) => return Err(Error::invalid("loss_weights needs two values")),
        };
        let cfg = ExperimentConfig {
            corpus: CorpusConfig {
                n_speakers: kv.get_or("n_speakers", c.n_speakers)?,
                utts_per_speaker: kv.get_or("utts_per_speaker", c.utts_per_speaker)?,
                duration: kv.get_or("duration", c.duration)?,
                t60: kv.get_or("t60", c.t60)?,
                train_fraction: kv.get_or("train_fraction", c.train_fraction)?,
                enroll_per_speaker: kv.get_or("enroll_per_speaker", c.enroll_per_speaker)?,
                test_per_speaker: kv.get_or("test_per_speaker", c.test_per_speaker)?,
            },
            seeds: kv.get_list("seeds")?.unwrap_or(d.seeds),
            systems: kv.get_list("systems")?.unwrap_or(d.systems),
            network: NetworkSettings {
                n_layers: kv.get_or("layers", n.n_layers)?,
                cells: kv.get_or("cells", n.cells)?,
                epochs: kv.get_or("epochs", n.epochs)?,
                batch_size: kv.get_or("batch_size", n.batch_size)?,
                learning_rate: kv.get_or("learning_rate", n.learning_rate)?,
                loss_weights,
                spec_hidden: kv.get_list("spec_hidden")?.unwrap_or_else(|| n.spec_hidden.clone()),
            },
            ubm_components: kv.get_or("ubm_components", d.ubm_components)?,
            em_iterations: kv.get_or("em_iterations", d.em_iterations)?,
            relevance: kv.get_or("relevance", d.relevance)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        if self.seeds.is_empty() || self.systems.is_empty() {
            return Err(Error::invalid("experiment needs at least one seed and one system"));
        }
        if !self.systems.contains(&System::Baseline) {
            return Err(Error::invalid("the baseline system is required"));
        }
        for s in &self.systems {
            if let Some(sec) = s.secondary() {
                self.network.config_for(sec).validate()?;
            }
        }
        if self.ubm_components == 0 || !(self.relevance >= 0.0) {
            return Err(Error::invalid("ubm_components must be positive and relevance non-negative"));
        }
        Ok(())
    }

    /// Every setting, defaults included, in canonical form.
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        let c = &self.corpus;
        kv.set("n_speakers", c.n_speakers);
        kv.set("utts_per_speaker", c.utts_per_speaker);
        kv.set("duration", format!("{:?}", c.duration));
        kv.set("t60", format!("{:?}", c.t60));
        kv.set("train_fraction", format!("{:?}", c.train_fraction));
        kv.set("enroll_per_speaker", c.enroll_per_speaker);
        kv.set("test_per_speaker", c.test_per_speaker);
        kv.set("seeds", join(&self.seeds));
        kv.set("systems", join(&self.systems));
        let n = &self.network;
        kv.set("layers", n.n_layers);
        kv.set("cells", n.cells);
        kv.set("epochs", n.epochs);
        kv.set("batch_size", n.batch_size);
        kv.set("learning_rate", format!("{:?}", n.learning_rate));
        kv.set("loss_weights", format!("{:?},{:?}", n.loss_weights.0, n.loss_weights.1));
        kv.set("spec_hidden", join(&n.spec_hidden));
        kv.set("ubm_components", self.ubm_components);
        kv.set("em_iterations", self.em_iterations);
        kv.set("relevance", format!("{:?}", self.relevance));
        kv
    }

    fn verification(&self, seed: u64) -> VerificationConfig {
        VerificationConfig {
            ubm: UbmConfig {
                components: self.ubm_components,
                em_iterations: self.em_iterations,
                seed: mix_seed(seed, 2, 0),
            },
            relevance: self.relevance,
        }
    }
}

/// EERs in percent for the three conditions and their mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub struct EerRow {
    pub ccc: f64,
    pub ccr: f64,
    pub rrr: f64,
    pub avg: f64,
}

impl EerRow {
    fn new(ccc: f64, ccr: f64, rrr: f64) -> Self {
        EerRow {
            ccc,
            ccr,
            rrr,
            avg: (ccc + ccr + rrr) / 3.0,
        }
    }

    pub fn get(&self, c: Condition) -> f64 {
        match c {
            Condition::Ccc => self.ccc,
            Condition::Ccr => self.ccr,
            Condition::Rrr => self.rrr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrialCounts {
    pub target: usize,
    pub nontarget: usize,
}

/// Log-Mel mean squared error against the clean features on the held-out
/// (enrollment and test) utterances.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MseSummary {
    pub utterances: usize,
    pub reverberant: f64,
    pub enhanced: BTreeMap<String, f64>,
    /// Percent reduction of the enhanced error relative to the reverberant one.
    pub reduction_percent: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossSummary {
    pub initial: f64,
    pub final_train: f64,
    pub final_val: Option<f64>,
}

/// Results of one seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedRun {
    pub seed: u64,
    pub rir_t60_estimate: f64,
    pub trials: TrialCounts,
    pub eer: BTreeMap<String, EerRow>,
    /// Systems without results and why.
    pub absent: BTreeMap<String, String>,
    pub mfb_mse: MseSummary,
    pub training_loss: BTreeMap<String, LossSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reduction {
    pub system: String,
    pub relative_to: String,
    pub from_avg: f64,
    pub to_avg: f64,
    pub percent: f64,
}

/// The published comparison grid, kept so the report can show how its
/// stated relative reductions follow from its own averages.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceResults {
    pub eer_avg: BTreeMap<String, f64>,
    pub stated_reduction_percent: BTreeMap<String, f64>,
    pub recomputed_reduction_percent: BTreeMap<String, f64>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub config_hash: String,
    pub config: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    pub systems: Vec<String>,
    pub conditions: Vec<String>,
    pub runs: Vec<SeedRun>,
    /// Mean over the seeds in which the system has results.
    pub mean_eer: BTreeMap<String, EerRow>,
    pub relative_reductions: Vec<Reduction>,
    pub reference: ReferenceResults,
    pub deviations: Vec<String>,
}

const REDUCTION_PAIRS: [(System, System); 4] = [
    (System::OneLabel, System::Baseline),
    (System::DualPitch, System::Baseline),
    (System::DualSpec, System::Baseline),
    (System::DualPitch, System::DualSpec),
];

fn reduction_key(sys: System, base: System) -> String {
    format!("{sys} vs {base}")
}

pub fn relative_reduction(from: f64, to: f64) -> f64 {
    (from - to) / from * 100.0
}

fn reference_results() -> ReferenceResults {
    let avg: BTreeMap<String, f64> = [
        (System::Baseline, 7.0),
        (System::OneLabel, 5.97),
        (System::DualPitch, 5.41),
        (System::DualSpec, 5.68),
    ]
    .into_iter()
    .map(|(s, v)| (s.to_string(), v))
    .collect();
    let stated: BTreeMap<String, f64> = REDUCTION_PAIRS
        .iter()
        .zip([14.7, 24.8, 18.9, 4.8])
        .map(|((s, b), v)| (reduction_key(*s, *b), v))
        .collect();
    let recomputed = REDUCTION_PAIRS
        .iter()
        .map(|(s, b)| {
            let v = relative_reduction(avg[b.name()], avg[s.name()]);
            (reduction_key(*s, *b), (v * 10.0).round() / 10.0)
        })
        .collect();
    ReferenceResults {
        eer_avg: avg,
        stated_reduction_percent: stated,
        recomputed_reduction_percent: recomputed,
        note: "reductions are (AVG_reference - AVG_system) / AVG_reference * 100; the stated dual-pitch \
               reduction (24.8%) does not follow from the reference averages, which give 22.7%"
            .to_string(),
    }
}

fn deviations(cfg: &ExperimentConfig) -> Vec<String> {
    let c = &cfg.corpus;
    let n = &cfg.network;
    vec![
        format!(
            "verification backend is a {}-component diagonal GMM-UBM with mean-only MAP (r = {}) and average \
             log-likelihood-ratio scoring in place of i-vectors with PLDA",
            cfg.ubm_components, cfg.relevance
        ),
        format!(
            "corpus is synthetic: {} formant-synthesis speakers x {} utterances of {} s, one synthetic impulse \
             response with T60 {} s",
            c.n_speakers, c.utts_per_speaker, c.duration, c.t60
        ),
        format!(
            "networks use {} BLSTM layers of {} cells per direction trained for {} epochs",
            n.n_layers, n.cells, n.epochs
        ),
        "verification MFCCs are computed from (enhanced) log-Mel features by DCT, with c0 replaced by the \
         log of the summed Mel energies"
            .to_string(),
        "the pitch target comes from an NCCF tracker with Viterbi smoothing".to_string(),
    ]
}

/// Per-utterance features used by the experiment.
struct UttFeatures {
    record: UtteranceRecord,
    clean: FeatureMatrix,
    reverb: FeatureMatrix,
    pitch: Option<FeatureMatrix>,
    spec: Option<FeatureMatrix>,
}

fn mfcc_of(mfb: &FeatureMatrix) -> Result<FeatureMatrix> {
    mfcc39(mfb, &mel_energies(mfb))
}

fn labeled(utts: &[&UttFeatures], pick: impl Fn(&UttFeatures) -> Result<FeatureMatrix>) -> Result<Vec<LabeledFeatures>> {
    utts.iter()
        .map(|u| {
            Ok(LabeledFeatures {
                utt_id: u.record.utt_id.clone(),
                speaker_id: u.record.speaker_id.clone(),
                features: mfcc_of(&pick(u)?)?,
            })
        })
        .collect()
}

/// MFCC sets of the three partitions for one feature source.
struct Partitions {
    train: Vec<LabeledFeatures>,
    enroll: Vec<LabeledFeatures>,
    test: Vec<LabeledFeatures>,
}

struct Scorer {
    vcfg: VerificationConfig,
    ubms: BTreeMap<String, GaussianMixtureModel>,
    counts: Option<TrialCounts>,
}

impl Scorer {
    /// EER in percent; background models are cached by `train_key`.
    fn eer(
        &mut self,
        train_key: &str,
        train: &[LabeledFeatures],
        enroll: &[LabeledFeatures],
        test: &[LabeledFeatures],
    ) -> Result<f64> {
        check_partitions(train, enroll, test)?;
        if !self.ubms.contains_key(train_key) {
            let t = train_ubm(&stack_frames(train), &self.vcfg.ubm)?;
            self.ubms.insert(train_key.to_string(), t.model);
        }
        let ubm = &self.ubms[train_key];
        let models = enroll_speakers(ubm, enroll, self.vcfg.relevance)?;
        let trials = score_trials(ubm, &models, test)?;
        let scores = TrialScores::from_trials(&trials);
        self.counts = Some(TrialCounts {
            target: scores.target.len(),
            nontarget: scores.nontarget.len(),
        });
        Ok(compute_eer(&scores)? * 100.0)
    }
}

fn mean_mse(pairs: impl Iterator<Item = (FeatureMatrix, FeatureMatrix)>) -> f64 {
    let v: Vec<f64> = pairs.map(|(a, b)| a.data().mean_squared_diff(b.data())).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Trains and evaluates every configured system on one stored corpus.
/// Checkpoints are written next to the manifest when `save_checkpoints` is set.
pub fn run_seed(manifest_path: &Path, cfg: &ExperimentConfig, save_checkpoints: bool) -> Result<SeedRun> {
    let (manifest, root) = ExperimentManifest::load(manifest_path)?;
    let seed = manifest.seed;
    let fp = FrameParams::default();
    let pcfg = PitchConfig::default();
    let need_pitch = cfg.systems.contains(&System::DualPitch);
    let need_spec = cfg.systems.contains(&System::DualSpec);

    let load = |r: &UtteranceRecord, targets: bool| -> Result<UttFeatures> {
        let (clean_w, reverb_w) = load_record(&root, r)?;
        let pitch = if targets && need_pitch {
            Some(track(&clean_w, &fp, &pcfg)?.to_feature_matrix())
        } else {
            None
        };
        let spec = if targets && need_spec { Some(spec100(&analyze(&clean_w, &fp)?, &fp)?) } else { None };
        Ok(UttFeatures {
            record: r.clone(),
            clean: extract_mfb(&clean_w, &fp)?,
            reverb: extract_mfb(&reverb_w, &fp)?,
            pitch,
            spec,
        })
    };
    let train_utts: Vec<UttFeatures> = manifest.train_pairs.iter().map(|r| load(r, true)).collect::<Result<_>>()?;
    let enroll_utts: Vec<UttFeatures> = manifest.enroll.iter().map(|r| load(r, false)).collect::<Result<_>>()?;
    let test_utts: Vec<UttFeatures> = manifest.test.iter().map(|r| load(r, false)).collect::<Result<_>>()?;
    let tr: Vec<&UttFeatures> = train_utts.iter().collect();
    let en: Vec<&UttFeatures> = enroll_utts.iter().collect();
    let te: Vec<&UttFeatures> = test_utts.iter().collect();
    let held_out: Vec<&UttFeatures> = en.iter().chain(&te).copied().collect();

    let partitions = |pick: &dyn Fn(&UttFeatures) -> Result<FeatureMatrix>| -> Result<Partitions> {
        Ok(Partitions {
            train: labeled(&tr, pick)?,
            enroll: labeled(&en, pick)?,
            test: labeled(&te, pick)?,
        })
    };
    let clean = partitions(&|u| Ok(u.clean.clone()))?;
    let reverb = partitions(&|u| Ok(u.reverb.clone()))?;

    let mut scorer = Scorer {
        vcfg: cfg.verification(seed),
        ubms: BTreeMap::new(),
        counts: None,
    };
    let ccc = scorer.eer("clean", &clean.train, &clean.enroll, &clean.test)?;
    let base = EerRow::new(
        ccc,
        scorer.eer("clean", &clean.train, &clean.enroll, &reverb.test)?,
        scorer.eer("reverb", &reverb.train, &reverb.enroll, &reverb.test)?,
    );
    info!("seed {seed} baseline EER: {base:?}");
    let mut eer = BTreeMap::from([(System::Baseline.to_string(), base)]);
    let mut absent = BTreeMap::new();
    let mut training_loss = BTreeMap::new();
    let mut mse = MseSummary {
        utterances: held_out.len(),
        reverberant: mean_mse(held_out.iter().map(|u| (u.reverb.clone(), u.clean.clone()))),
        enhanced: BTreeMap::new(),
        reduction_percent: BTreeMap::new(),
    };

    for (idx, sys) in cfg.systems.iter().enumerate() {
        let Some(secondary) = sys.secondary() else { continue };
        let net_cfg = cfg.network.config_for(secondary);
        let pairs: Vec<TrainingPair> = train_utts
            .iter()
            .map(|u| {
                let t2 = match secondary {
                    SecondaryTarget::None => None,
                    SecondaryTarget::Pitch1 => u.pitch.clone(),
                    SecondaryTarget::Spec100 => u.spec.clone(),
                    SecondaryTarget::Mfb31 => Some(u.clean.clone()),
                };
                TrainingPair::new(u.reverb.clone(), u.clean.clone(), t2)
            })
            .collect::<Result<_>>()?;
        info!("seed {seed}: training {sys} on {} pairs", pairs.len());
        let ckpt: Checkpoint = match train(&pairs, &net_cfg, mix_seed(seed, 1, idx as u64)) {
            Ok(c) => c,
            Err(e) if e.is_numerical() => {
                warn!("seed {seed}: {sys} training failed: {e}");
                absent.insert(sys.to_string(), e.to_string());
                continue;
            }
            Err(e) => return Err(e),
        };
        if save_checkpoints {
            if let Some(dir) = manifest_path.parent() {
                ckpt.save(&dir.join(format!("{sys}.ckpt")))?;
            }
        }
        let first = ckpt.history.first().expect("history starts at epoch 0");
        let last = ckpt.history.last().expect("history starts at epoch 0");
        training_loss.insert(
            sys.to_string(),
            LossSummary {
                initial: first.train_loss,
                final_train: last.train_loss,
                final_val: last.val_loss,
            },
        );
        let net = &ckpt.network;
        let enhanced_mse = mean_mse(
            held_out
                .iter()
                .map(|u| Ok((enhance(&u.reverb, net)?, u.clean.clone())))
                .collect::<Result<Vec<_>>>()?
                .into_iter(),
        );
        mse.enhanced.insert(sys.to_string(), enhanced_mse);
        mse.reduction_percent
            .insert(sys.to_string(), relative_reduction(mse.reverberant, enhanced_mse));
        let enh = partitions(&|u| enhance(&u.reverb, net))?;
        let row = EerRow::new(
            ccc,
            scorer.eer("clean", &clean.train, &clean.enroll, &enh.test)?,
            scorer.eer(&format!("enhanced-{sys}"), &enh.train, &enh.enroll, &enh.test)?,
        );
        info!("seed {seed} {sys} EER: {row:?}");
        eer.insert(sys.to_string(), row);
    }
    Ok(SeedRun {
        seed,
        rir_t60_estimate: manifest.rir_t60_estimate,
        trials: scorer.counts.expect("at least one condition scored"),
        eer,
        absent,
        mfb_mse: mse,
        training_loss,
    })
}

/// Builds one corpus per seed under `work_dir`, runs every system on each
/// and aggregates the report.
pub fn run_experiment(cfg: &ExperimentConfig, work_dir: &Path) -> Result<Report> {
    cfg.validate()?;
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let dir = work_dir.join(format!("seed-{seed}"));
        build_corpus(&dir, &cfg.corpus, seed)?;
        runs.push(run_seed(&dir.join(MANIFEST_FILE), cfg, true)?);
    }
    Ok(assemble_report(cfg, runs))
}

/// Averages per-seed runs into the final report.
pub fn assemble_report(cfg: &ExperimentConfig, runs: Vec<SeedRun>) -> Report {
    let kv = cfg.to_kv();
    let mut mean_eer = BTreeMap::new();
    for sys in &cfg.systems {
        let rows: Vec<&EerRow> = runs.iter().filter_map(|r| r.eer.get(sys.name())).collect();
        if rows.is_empty() {
            continue;
        }
        let m = |f: fn(&EerRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64;
        mean_eer.insert(sys.to_string(), EerRow::new(m(|r| r.ccc), m(|r| r.ccr), m(|r| r.rrr)));
    }
    let relative_reductions = REDUCTION_PAIRS
        .iter()
        .filter_map(|(s, b)| {
            let (to, from) = (mean_eer.get(s.name())?, mean_eer.get(b.name())?);
            Some(Reduction {
                system: s.to_string(),
                relative_to: b.to_string(),
                from_avg: from.avg,
                to_avg: to.avg,
                percent: relative_reduction(from.avg, to.avg),
            })
        })
        .collect();
    Report {
        schema_version: REPORT_SCHEMA_VERSION,
        config_hash: kv.hash(),
        config: kv.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        seeds: cfg.seeds.clone(),
        systems: cfg.systems.iter().map(ToString::to_string).collect(),
        conditions: Condition::ALL.iter().map(ToString::to_string).collect(),
        runs,
        mean_eer,
        relative_reductions,
        reference: reference_results(),
        deviations: deviations(cfg),
    }
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Human-readable table of the same content.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let seeds = join(&self.seeds);
        let _ = writeln!(out, "EER (%), mean over seeds {seeds}");
        let _ = writeln!(out, "{:<12} {:>8} {:>8} {:>8} {:>8}", "system", "CCC", "CCR", "RRR", "AVG");
        for sys in &self.systems {
            match self.mean_eer.get(sys) {
                Some(r) => {
                    let _ = writeln!(
                        out,
                        "{sys:<12} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
                        r.ccc, r.ccr, r.rrr, r.avg
                    );
                }
                None => {
                    let _ = writeln!(out, "{sys:<12} {:>8}", "absent");
                }
            }
        }
        if !self.relative_reductions.is_empty() {
            let _ = writeln!(out, "\nrelative EER reduction on AVG:");
            for r in &self.relative_reductions {
                let _ = writeln!(
                    out,
                    "  {} vs {}: ({:.2} - {:.2}) / {:.2} * 100 = {:.1}%",
                    r.system, r.relative_to, r.from_avg, r.to_avg, r.from_avg, r.percent
                );
            }
        }
        for run in &self.runs {
            let _ = writeln!(
                out,
                "\nseed {}: {} target / {} nontarget trials, RIR T60 estimate {:.3} s",
                run.seed, run.trials.target, run.trials.nontarget, run.rir_t60_estimate
            );
            let m = &run.mfb_mse;
            let _ = writeln!(out, "  held-out log-Mel MSE: reverberant {:.4}", m.reverberant);
            for (sys, v) in &m.enhanced {
                let _ = writeln!(out, "    {sys}: {v:.4} ({:.1}% lower)", m.reduction_percent[sys]);
            }
            for (sys, why) in &run.absent {
                let _ = writeln!(out, "  {sys} absent: {why}");
            }
        }
        let _ = writeln!(out, "\nreference comparison: {}", self.reference.note);
        let _ = writeln!(out, "\ndeviations:");
        for d in &self.deviations {
            let _ = writeln!(out, "  - {d}");
        }
        let _ = writeln!(out, "\nconfig hash: {}", self.config_hash);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_and_hash() {
        let kv = KeyValues::parse("n_speakers=6\nseeds=4,5\nsystems=baseline,dual-pitch\nloss_weights=0.7,0.3\n").unwrap();
        let cfg = ExperimentConfig::from_kv(&kv).unwrap();
        assert_eq!(cfg.seeds, vec![4, 5]);
        assert_eq!(cfg.systems, vec![System::Baseline, System::DualPitch]);
        let again = ExperimentConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_kv().hash(), cfg.to_kv().hash());
        assert!(ExperimentConfig::from_kv(&KeyValues::parse("bogus=1").unwrap()).is_err());
        assert!(ExperimentConfig::from_kv(&KeyValues::parse("systems=one-label").unwrap()).is_err());
        assert!(ExperimentConfig::from_kv(&KeyValues::parse("loss_weights=0.7,0.7").unwrap()).is_err());
    }

    #[test]
    fn reference_arithmetic() {
        let r = reference_results();
        assert_eq!(r.recomputed_reduction_percent["one-label vs baseline"], 14.7);
        assert_eq!(r.recomputed_reduction_percent["dual-pitch vs baseline"], 22.7);
        assert_eq!(r.recomputed_reduction_percent["dual-spec vs baseline"], 18.9);
        assert_eq!(r.recomputed_reduction_percent["dual-pitch vs dual-spec"], 4.8);
        assert_eq!(r.stated_reduction_percent["dual-pitch vs baseline"], 24.8);
        assert!((relative_reduction(7.0, 5.41) - 22.714285714285715).abs() < 1e-12);
    }

    #[test]
    fn one_label_rows_ignore_dual_weights() {
        let n = NetworkSettings::default();
        assert_eq!(n.config_for(SecondaryTarget::None).loss_weights, (1.0, 0.0));
        assert_eq!(n.config_for(SecondaryTarget::Pitch1).loss_weights, (0.5, 0.5));
        assert!(n.config_for(SecondaryTarget::Pitch1).secondary_hidden_dims.is_empty());
    }
}
