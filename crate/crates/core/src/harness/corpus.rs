use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::synth::{synth_utterance, SyntheticSpeakerProfile};
use crate::dsp::{apply_vad, energy_vad, read_wav, write_wav, FrameParams, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::reverb::{convolve, estimate_t60, synth_rir, RoomImpulseResponse};
use crate::sv::Condition;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const RIR_FILE: &str = "rir.bin";
const DIRECT_DELAY: f64 = 0.005;

/// Size and shape of a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    /// Seconds per utterance before VAD.
    pub duration: f64,
    /// Seconds.
    pub t60: f64,
    /// Fraction of speakers whose utterances become training pairs.
    pub train_fraction: f64,
    pub enroll_per_speaker: usize,
    pub test_per_speaker: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_speakers: 20,
            utts_per_speaker: 12,
            duration: 3.0,
            t60: 0.7,
            train_fraction: 0.6,
            enroll_per_speaker: 10,
            test_per_speaker: 1,
        }
    }
}

impl CorpusConfig {
    pub fn train_speakers(&self) -> usize {
        (self.train_fraction * self.n_speakers as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_speakers < 4 {
            return Err(Error::invalid(format!("need at least 4 speakers, got {}", self.n_speakers)));
        }
        let train = self.train_speakers();
        if train == 0 || self.n_speakers - train < 2 {
            return Err(Error::invalid(format!(
                "train fraction {} leaves {train} training and {} evaluation speakers",
                self.train_fraction,
                self.n_speakers - train
            )));
        }
        if self.enroll_per_speaker == 0 || self.test_per_speaker == 0 {
            return Err(Error::invalid("each evaluation speaker needs enrollment and test utterances"));
        }
        let need = self.enroll_per_speaker + self.test_per_speaker;
        if self.utts_per_speaker < need {
            return Err(Error::invalid(format!(
                "{} utterances per speaker cannot cover {} enrollment + {} test",
                self.utts_per_speaker, self.enroll_per_speaker, self.test_per_speaker
            )));
        }
        if !(self.duration > 0.0) || !(self.t60 > 0.0) {
            return Err(Error::invalid("duration and t60 must be positive"));
        }
        Ok(())
    }
}

/// One stored utterance. Paths are relative to the manifest directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub utt_id: String,
    pub speaker_id: String,
    pub clean_path: String,
    pub reverb_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub sample_rate: u32,
    pub corpus: CorpusConfig,
    pub rir_path: String,
    pub rir_t60_estimate: f64,
    pub conditions: Vec<String>,
    pub speakers: Vec<SyntheticSpeakerProfile>,
    pub train_pairs: Vec<UtteranceRecord>,
    pub enroll: Vec<UtteranceRecord>,
    pub test: Vec<UtteranceRecord>,
}

impl ExperimentManifest {
    /// Speaker-disjointness of training against enrollment and test, and
    /// that every tested speaker is enrolled.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::format(format!("unsupported manifest schema {}", self.schema_version)));
        }
        if self.train_pairs.is_empty() || self.enroll.is_empty() || self.test.is_empty() {
            return Err(Error::invalid("manifest has an empty partition"));
        }
        let spk = |r: &[UtteranceRecord]| r.iter().map(|u| u.speaker_id.clone()).collect::<BTreeSet<_>>();
        let train = spk(&self.train_pairs);
        let enroll = spk(&self.enroll);
        let test = spk(&self.test);
        if let Some(s) = train.intersection(&enroll.union(&test).cloned().collect()).next() {
            return Err(Error::invalid(format!("speaker {s} is in both training and evaluation partitions")));
        }
        if let Some(s) = test.difference(&enroll).next() {
            return Err(Error::invalid(format!("test speaker {s} has no enrollment utterances")));
        }
        let ids: Vec<&str> = self.all_records().map(|r| r.utt_id.as_str()).collect();
        if ids.iter().collect::<BTreeSet<_>>().len() != ids.len() {
            return Err(Error::invalid("duplicate utterance ids in manifest"));
        }
        Ok(())
    }

    pub fn all_records(&self) -> impl Iterator<Item = &UtteranceRecord> {
        self.train_pairs.iter().chain(&self.enroll).chain(&self.test)
    }

    /// Reads a manifest and checks it, including that every file exists.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("cannot read manifest {}: {e}", path.display())))?;
        let m: ExperimentManifest = serde_json::from_str(&text)?;
        m.validate()?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for r in m.all_records() {
            for p in [&r.clean_path, &r.reverb_path] {
                if !root.join(p).is_file() {
                    return Err(Error::invalid(format!("manifest file {p} is missing")));
                }
            }
        }
        if !root.join(&m.rir_path).is_file() {
            return Err(Error::invalid(format!("manifest file {} is missing", m.rir_path)));
        }
        Ok((m, root))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}

/// Decorrelates per-item seeds derived from one corpus seed.
pub(crate) fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Clean utterance with non-speech frames removed, and its reverberant copy.
pub fn render_utterance(
    profile: &SyntheticSpeakerProfile,
    duration: f64,
    seed: u64,
    rir: &RoomImpulseResponse,
) -> Result<(Waveform, Waveform)> {
    let raw = synth_utterance(profile, duration, seed)?;
    let p = FrameParams::default();
    let clean = apply_vad(&raw, &energy_vad(&raw, &p), &p);
    if clean.is_empty() {
        return Err(Error::numerical(format!("VAD removed all of an utterance of {}", profile.speaker_id)));
    }
    let reverb = convolve(&clean, rir)?;
    Ok((clean, reverb))
}

/// Writes clean and reverberant WAV files, the shared impulse response and
/// `manifest.json` under `dir`. Speakers are split in id order: the first
/// `train_fraction` supply training pairs, the rest enrollment and test.
pub fn build_corpus(dir: &Path, cfg: &CorpusConfig, seed: u64) -> Result<ExperimentManifest> {
    cfg.validate()?;
    fs::create_dir_all(dir.join("clean"))?;
    fs::create_dir_all(dir.join("reverb"))?;
    let rir = synth_rir(cfg.t60, SAMPLE_RATE, DIRECT_DELAY, mix_seed(seed, 0, u64::MAX))?;
    rir.save(dir.join(RIR_FILE))?;
    let t60_estimate = estimate_t60(&rir)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speakers: Vec<SyntheticSpeakerProfile> = (0..cfg.n_speakers)
        .map(|s| SyntheticSpeakerProfile::random(format!("spk{s:03}"), &mut rng))
        .collect();
    let n_train = cfg.train_speakers();
    let mut manifest = ExperimentManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        seed,
        sample_rate: SAMPLE_RATE,
        corpus: cfg.clone(),
        rir_path: RIR_FILE.to_string(),
        rir_t60_estimate: t60_estimate,
        conditions: Condition::ALL.iter().map(ToString::to_string).collect(),
        speakers: speakers.clone(),
        train_pairs: Vec::new(),
        enroll: Vec::new(),
        test: Vec::new(),
    };
    for (s, profile) in speakers.iter().enumerate() {
        for u in 0..cfg.utts_per_speaker {
            let is_train = s < n_train;
            if !is_train && u >= cfg.enroll_per_speaker + cfg.test_per_speaker {
                continue;
            }
            let utt_id = format!("{}_u{u:02}", profile.speaker_id);
            let (clean, reverb) = render_utterance(profile, cfg.duration, mix_seed(seed, s as u64, u as u64), &rir)?;
            let record = UtteranceRecord {
                clean_path: format!("clean/{utt_id}.wav"),
                reverb_path: format!("reverb/{utt_id}.wav"),
                speaker_id: profile.speaker_id.clone(),
                utt_id,
            };
            write_wav(dir.join(&record.clean_path), &clean)?;
            write_wav(dir.join(&record.reverb_path), &reverb)?;
            if is_train {
                manifest.train_pairs.push(record);
            } else if u < cfg.enroll_per_speaker {
                manifest.enroll.push(record);
            } else {
                manifest.test.push(record);
            }
        }
    }
    manifest.validate()?;
    manifest.save(&dir.join(MANIFEST_FILE))?;
    info!(
        "corpus: {} training, {} enrollment, {} test utterances; RIR T60 estimate {:.3} s",
        manifest.train_pairs.len(),
        manifest.enroll.len(),
        manifest.test.len(),
        t60_estimate
    );
    Ok(manifest)
}

/// Loads the clean and reverberant waveforms of a record.
pub fn load_record(root: &Path, r: &UtteranceRecord) -> Result<(Waveform, Waveform)> {
    Ok((read_wav(root.join(&r.clean_path))?, read_wav(root.join(&r.reverb_path))?))
}
