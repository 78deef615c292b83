//! `dereverb`: command-line access to every stage of the dereverberation
//! and speaker-verification pipeline.
//!
//! Each subcommand reads optional `key=value` settings from `--config` and
//! lets flags override individual keys.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use dereverb_core::dsp::{
    analyze, extract_mfb, mel_energies, mfcc39, read_feature_matrix, read_wav, spec100, write_feature_csv,
    write_feature_matrix, write_wav,
};
use dereverb_core::harness::{build_corpus, load_record, run_experiment, CorpusConfig, ExperimentConfig, ExperimentManifest, KeyValues, UtteranceRecord};
use dereverb_core::nnet::{enhance, grad_check, train, TrainingPair};
use dereverb_core::pitch::track;
use dereverb_core::reverb::{convolve, estimate_t60, synth_rir_with, RirParams};
use dereverb_core::sv::{
    compute_eer, enroll_speakers, read_scores_csv, score_trials, stack_frames, train_ubm, write_scores_csv,
    LabeledFeatures, TrialScores, UbmConfig,
};
use dereverb_core::{
    Checkpoint, DualLabelNetwork, Error, FeatureKind, FeatureMatrix, FrameParams, GaussianMixtureModel, NetworkConfig,
    PitchConfig, Result, RoomImpulseResponse, SecondaryTarget, Waveform,
};

#[derive(Parser)]
#[command(name = "dereverb", version, about = "Feature-domain dereverberation for speaker verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigFile {
    /// `key=value` settings file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic clean/reverberant corpus and its manifest.
    SynthCorpus {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_speakers: Option<usize>,
        #[arg(long)]
        utts_per_speaker: Option<usize>,
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        t60: Option<f64>,
        #[arg(long)]
        train_fraction: Option<f64>,
        #[arg(long)]
        enroll_per_speaker: Option<usize>,
        #[arg(long)]
        test_per_speaker: Option<usize>,
        #[command(flatten)]
        config: ConfigFile,
    },
    /// Synthesize a room impulse response (`.wav` or binary by extension).
    MakeRir {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        t60: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        sample_rate: Option<u32>,
        #[arg(long)]
        direct_delay: Option<f64>,
        #[arg(long)]
        drr_db: Option<f64>,
        #[command(flatten)]
        config: ConfigFile,
    },
    /// Convolve a waveform with an impulse response.
    Reverb {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        rir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigFile,
    },
    /// Extract one feature view from a waveform (`.csv` output writes text).
    Featurize {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// mfb31, spec100, mfcc39 or pitch1.
        #[arg(long)]
        kind: Option<String>,
        #[command(flatten)]
        config: ConfigFile,
    },
    /// Track f0 and write `frame_index,f0_hz` CSV.
    Pitch {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        f0_min: Option<f64>,
        #[arg(long)]
        f0_max: Option<f64>,
        #[arg(long)]
        nccf_threshold: Option<f64>,
        #[command(flatten)]
        config: ConfigFile,
    },
    /// Train a dereverberation network on a manifest's training pairs.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// none, pitch, spec or mfb.
        #[arg(long)]
        secondary: Option<String>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        cells: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Two comma-separated weights.
        #[arg(long)]
        loss_weights: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Optional per-epoch loss CSV.
        #[arg(long)]
        history: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigFile,
    },
    /// Map reverberant MFB features (or a `.wav`) through a trained network.
    Enhance {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigFile,
    },
    /// Train a background GMM on the manifest's training partition.
    TrainUbm {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        components: Option<usize>,
        #[arg(long)]
        em_iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigFile,
    },
    /// MAP-adapt one model per enrollment speaker into a directory.
    Enroll {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        ubm: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        relevance: Option<f64>,
        #[command(flatten)]
        config: ConfigFile,
    },
    /// Score every test utterance against every enrolled model.
    Score {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        ubm: Option<PathBuf>,
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        config: ConfigFile,
    },
    /// Equal error rate of a score CSV, printed as a fraction.
    Eer {
        #[arg(long)]
        scores: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigFile,
    },
    /// Run the full clean/reverberant experiment and write the report.
    Experiment {
        #[arg(long)]
        work_dir: Option<PathBuf>,
        /// Report JSON path; the text table goes next to it with `.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        systems: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        config: ConfigFile,
    },
    /// Compare analytic and finite-difference gradients.
    GradCheck {
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigFile,
    },
}

/// Where verification features come from.
#[derive(Args)]
struct Source {
    /// clean, reverb or enhanced.
    #[arg(long)]
    source: Option<String>,
    /// Network used when the source is `enhanced`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

/// Settings of one invocation: config-file entries with flag overrides.
struct Settings {
    kv: KeyValues,
}

impl Settings {
    fn new(config: &ConfigFile, known: &[&str], flags: &[(&str, Option<String>)]) -> Result<Self> {
        let mut kv = match &config.config {
            Some(path) => KeyValues::load(path)?,
            None => KeyValues::default(),
        };
        for (key, value) in flags {
            if let Some(v) = value {
                kv.set(key, v);
            }
        }
        kv.check_known(known)?;
        Ok(Settings { kv })
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        self.kv.get_or(key, default)
    }

    fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.kv.get(key)
    }

    fn path(&self, key: &str) -> Result<PathBuf> {
        self.kv
            .raw(key)
            .map(PathBuf::from)
            .ok_or_else(|| Error::Invalid(format!("missing required setting '{key}'")))
    }
}

fn s<T: Display>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(|v| v.to_string())
}

fn p(v: &Option<PathBuf>) -> Option<String> {
    v.as_ref().map(|v| v.display().to_string())
}

fn has_extension(path: &Path, ext: &str) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

fn write_features(path: &Path, m: &FeatureMatrix) -> Result<()> {
    if has_extension(path, "csv") {
        write_feature_csv(path, m)
    } else {
        write_feature_matrix(path, m)
    }
}

fn load_rir(path: &Path) -> Result<RoomImpulseResponse> {
    if has_extension(path, "wav") {
        let w = read_wav(path)?;
        RoomImpulseResponse::new(w.samples().to_vec(), w.sample_rate(), 0.0)
    } else {
        RoomImpulseResponse::load(path)
    }
}

/// MFB features of a `.wav`, or a stored MFB feature file.
fn load_mfb(path: &Path) -> Result<FeatureMatrix> {
    if has_extension(path, "wav") {
        return extract_mfb(&read_wav(path)?, &FrameParams::default());
    }
    let m = read_feature_matrix(path)?;
    if m.kind() != FeatureKind::Mfb31 {
        return Err(Error::Invalid(format!("{} holds {} features, expected mfb31", path.display(), m.kind())));
    }
    Ok(m)
}

fn featurize(w: &Waveform, kind: FeatureKind) -> Result<FeatureMatrix> {
    let fp = FrameParams::default();
    match kind {
        FeatureKind::Mfb31 => extract_mfb(w, &fp),
        FeatureKind::Spec100 => spec100(&analyze(w, &fp)?, &fp),
        FeatureKind::Mfcc39 => {
            let mfb = extract_mfb(w, &fp)?;
            mfcc39(&mfb, &mel_energies(&mfb))
        }
        FeatureKind::Pitch1 => Ok(track(w, &fp, &PitchConfig::default())?.to_feature_matrix()),
    }
}

/// MFCC features of manifest records from one of the three sources.
struct FeatureSource {
    root: PathBuf,
    reverberant: bool,
    network: Option<DualLabelNetwork>,
}

impl FeatureSource {
    fn new(root: PathBuf, settings: &Settings) -> Result<Self> {
        let name: String = settings.or("source", "clean".to_string())?;
        let (reverberant, network) = match name.as_str() {
            "clean" => (false, None),
            "reverb" => (true, None),
            "enhanced" => (true, Some(Checkpoint::load(&settings.path("checkpoint")?)?.network)),
            other => return Err(Error::Invalid(format!("unknown source '{other}', expected clean, reverb or enhanced"))),
        };
        Ok(FeatureSource { root, reverberant, network })
    }

    fn labeled(&self, records: &[UtteranceRecord]) -> Result<Vec<LabeledFeatures>> {
        let fp = FrameParams::default();
        records
            .iter()
            .map(|r| {
                let (clean, reverb) = load_record(&self.root, r)?;
                let mut mfb = extract_mfb(if self.reverberant { &reverb } else { &clean }, &fp)?;
                if let Some(net) = &self.network {
                    mfb = enhance(&mfb, net)?;
                }
                Ok(LabeledFeatures {
                    utt_id: r.utt_id.clone(),
                    speaker_id: r.speaker_id.clone(),
                    features: mfcc39(&mfb, &mel_energies(&mfb))?,
                })
            })
            .collect()
    }
}

const SOURCE_KEYS: [&str; 2] = ["source", "checkpoint"];

fn source_flags(src: &Source) -> [(&'static str, Option<String>); 2] {
    [("source", s(&src.source)), ("checkpoint", p(&src.checkpoint))]
}

fn with_source(keys: &[&'static str]) -> Vec<&'static str> {
    keys.iter().chain(&SOURCE_KEYS).copied().collect()
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::SynthCorpus {
            out,
            seed,
            n_speakers,
            utts_per_speaker,
            duration,
            t60,
            train_fraction,
            enroll_per_speaker,
            test_per_speaker,
            config,
        } => {
            let keys = [
                "out",
                "seed",
                "n_speakers",
                "utts_per_speaker",
                "duration",
                "t60",
                "train_fraction",
                "enroll_per_speaker",
                "test_per_speaker",
            ];
            let st = Settings::new(
                &config,
                &keys,
                &[
                    ("out", p(&out)),
                    ("seed", s(&seed)),
                    ("n_speakers", s(&n_speakers)),
                    ("utts_per_speaker", s(&utts_per_speaker)),
                    ("duration", s(&duration)),
                    ("t60", s(&t60)),
                    ("train_fraction", s(&train_fraction)),
                    ("enroll_per_speaker", s(&enroll_per_speaker)),
                    ("test_per_speaker", s(&test_per_speaker)),
                ],
            )?;
            let d = CorpusConfig::default();
            let cfg = CorpusConfig {
                n_speakers: st.or("n_speakers", d.n_speakers)?,
                utts_per_speaker: st.or("utts_per_speaker", d.utts_per_speaker)?,
                duration: st.or("duration", d.duration)?,
                t60: st.or("t60", d.t60)?,
                train_fraction: st.or("train_fraction", d.train_fraction)?,
                enroll_per_speaker: st.or("enroll_per_speaker", d.enroll_per_speaker)?,
                test_per_speaker: st.or("test_per_speaker", d.test_per_speaker)?,
            };
            let dir = st.path("out")?;
            let m = build_corpus(&dir, &cfg, st.or("seed", 1)?)?;
            println!(
                "wrote {} utterances and manifest to {} (impulse response T60 estimate {:.3} s)",
                m.all_records().count(),
                dir.display(),
                m.rir_t60_estimate
            );
        }
        Command::MakeRir {
            out,
            t60,
            seed,
            sample_rate,
            direct_delay,
            drr_db,
            config,
        } => {
            let keys = ["out", "t60", "seed", "sample_rate", "direct_delay", "drr_db"];
            let st = Settings::new(
                &config,
                &keys,
                &[
                    ("out", p(&out)),
                    ("t60", s(&t60)),
                    ("seed", s(&seed)),
                    ("sample_rate", s(&sample_rate)),
                    ("direct_delay", s(&direct_delay)),
                    ("drr_db", s(&drr_db)),
                ],
            )?;
            let params = RirParams {
                t60: st.or("t60", 0.7)?,
                sample_rate: st.or("sample_rate", 16_000)?,
                direct_delay: st.or("direct_delay", 0.0)?,
                drr_db: st.or("drr_db", 0.0)?,
            };
            let rir = synth_rir_with(&params, st.or("seed", 0)?)?;
            let path = st.path("out")?;
            if has_extension(&path, "wav") {
                write_wav(&path, &rir.to_waveform())?;
            } else {
                rir.save(&path)?;
            }
            println!("{} taps, estimated T60 {:.3} s", rir.len(), estimate_t60(&rir)?);
        }
        Command::Reverb { input, rir, out, config } => {
            let st = Settings::new(
                &config,
                &["input", "rir", "out"],
                &[("input", p(&input)), ("rir", p(&rir)), ("out", p(&out))],
            )?;
            let w = read_wav(st.path("input")?)?;
            let y = convolve(&w, &load_rir(&st.path("rir")?)?)?;
            write_wav(st.path("out")?, &y)?;
        }
        Command::Featurize { input, out, kind, config } => {
            let st = Settings::new(
                &config,
                &["input", "out", "kind"],
                &[("input", p(&input)), ("out", p(&out)), ("kind", kind)],
            )?;
            let kind: FeatureKind = st.or("kind", FeatureKind::Mfb31)?;
            let m = featurize(&read_wav(st.path("input")?)?, kind)?;
            write_features(&st.path("out")?, &m)?;
            println!("{} frames of {kind}", m.frames());
        }
        Command::Pitch {
            input,
            out,
            f0_min,
            f0_max,
            nccf_threshold,
            config,
        } => {
            let st = Settings::new(
                &config,
                &["input", "out", "f0_min", "f0_max", "nccf_threshold"],
                &[
                    ("input", p(&input)),
                    ("out", p(&out)),
                    ("f0_min", s(&f0_min)),
                    ("f0_max", s(&f0_max)),
                    ("nccf_threshold", s(&nccf_threshold)),
                ],
            )?;
            let d = PitchConfig::default();
            let pcfg = PitchConfig {
                f0_min: st.or("f0_min", d.f0_min)?,
                f0_max: st.or("f0_max", d.f0_max)?,
                nccf_threshold: st.or("nccf_threshold", d.nccf_threshold)?,
                ..d
            };
            let t = track(&read_wav(st.path("input")?)?, &FrameParams::default(), &pcfg)?;
            write_feature_csv(st.path("out")?, &t.to_feature_matrix())?;
            println!("{} frames, {:.1}% voiced", t.len(), 100.0 * t.voiced_fraction());
        }
        Command::Train {
            manifest,
            out,
            secondary,
            layers,
            cells,
            epochs,
            batch_size,
            learning_rate,
            loss_weights,
            seed,
            history,
            config,
        } => {
            let keys = [
                "manifest",
                "out",
                "secondary",
                "layers",
                "cells",
                "epochs",
                "batch_size",
                "learning_rate",
                "loss_weights",
                "seed",
                "history",
            ];
            let st = Settings::new(
                &config,
                &keys,
                &[
                    ("manifest", p(&manifest)),
                    ("out", p(&out)),
                    ("secondary", secondary),
                    ("layers", s(&layers)),
                    ("cells", s(&cells)),
                    ("epochs", s(&epochs)),
                    ("batch_size", s(&batch_size)),
                    ("learning_rate", s(&learning_rate)),
                    ("loss_weights", loss_weights),
                    ("seed", s(&seed)),
                    ("history", p(&history)),
                ],
            )?;
            let secondary: SecondaryTarget = st.or("secondary", SecondaryTarget::None)?;
            let mut cfg = NetworkConfig::tiny(secondary);
            cfg.n_layers = st.or("layers", cfg.n_layers)?;
            cfg.cells = st.or("cells", cfg.cells)?;
            cfg.epochs = st.or("epochs", cfg.epochs)?;
            cfg.batch_size = st.or("batch_size", cfg.batch_size)?;
            cfg.learning_rate = st.or("learning_rate", cfg.learning_rate)?;
            if let Some(w) = st.kv.get_list::<f64>("loss_weights")? {
                let [w1, w2] = w[..] else {
                    return Err(Error::Invalid("loss_weights needs two values".into()));
                };
                cfg.loss_weights = (w1, w2);
            }
            let pairs = training_pairs(&st.path("manifest")?, secondary)?;
            let ckpt = train(&pairs, &cfg, st.or("seed", 0)?)?;
            ckpt.save(&st.path("out")?)?;
            if let Some(path) = st.opt::<PathBuf>("history")? {
                let mut f = BufWriter::new(fs::File::create(path)?);
                ckpt.write_history_csv(&mut f)?;
                f.flush()?;
            }
            let last = ckpt.history.last().expect("history has the untrained entry");
            println!("trained {} epochs, final training loss {:.6}", cfg.epochs, last.train_loss);
        }
        Command::Enhance {
            checkpoint,
            input,
            out,
            config,
        } => {
            let st = Settings::new(
                &config,
                &["checkpoint", "input", "out"],
                &[("checkpoint", p(&checkpoint)), ("input", p(&input)), ("out", p(&out))],
            )?;
            let ckpt = Checkpoint::load(&st.path("checkpoint")?)?;
            let y = enhance(&load_mfb(&st.path("input")?)?, &ckpt.network)?;
            write_features(&st.path("out")?, &y)?;
        }
        Command::TrainUbm {
            manifest,
            out,
            source,
            components,
            em_iterations,
            seed,
            config,
        } => {
            let mut flags = vec![
                ("manifest", p(&manifest)),
                ("out", p(&out)),
                ("components", s(&components)),
                ("em_iterations", s(&em_iterations)),
                ("seed", s(&seed)),
            ];
            flags.extend(source_flags(&source));
            let keys = with_source(&["manifest", "out", "components", "em_iterations", "seed"]);
            let st = Settings::new(&config, &keys, &flags)?;
            let (m, root) = ExperimentManifest::load(&st.path("manifest")?)?;
            let train_set = FeatureSource::new(root, &st)?.labeled(&m.train_pairs)?;
            let d = UbmConfig::default();
            let cfg = UbmConfig {
                components: st.or("components", d.components)?,
                em_iterations: st.or("em_iterations", d.em_iterations)?,
                seed: st.or("seed", d.seed)?,
            };
            let t = train_ubm(&stack_frames(&train_set), &cfg)?;
            t.model.save(&st.path("out")?)?;
            println!(
                "{} components, mean log-likelihood {:.4}",
                t.model.components(),
                t.log_likelihoods.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Enroll {
            manifest,
            ubm,
            out,
            source,
            relevance,
            config,
        } => {
            let mut flags = vec![
                ("manifest", p(&manifest)),
                ("ubm", p(&ubm)),
                ("out", p(&out)),
                ("relevance", s(&relevance)),
            ];
            flags.extend(source_flags(&source));
            let st = Settings::new(&config, &with_source(&["manifest", "ubm", "out", "relevance"]), &flags)?;
            let (m, root) = ExperimentManifest::load(&st.path("manifest")?)?;
            let enroll = FeatureSource::new(root, &st)?.labeled(&m.enroll)?;
            let ubm = GaussianMixtureModel::load(&st.path("ubm")?)?;
            let models = enroll_speakers(&ubm, &enroll, st.or("relevance", 16.0)?)?;
            let dir = st.path("out")?;
            fs::create_dir_all(&dir)?;
            for (spk, model) in &models {
                model.save(&dir.join(format!("{spk}.gmm")))?;
            }
            println!("enrolled {} speakers into {}", models.len(), dir.display());
        }
        Command::Score {
            manifest,
            ubm,
            models,
            out,
            source,
            config,
        } => {
            let mut flags = vec![
                ("manifest", p(&manifest)),
                ("ubm", p(&ubm)),
                ("models", p(&models)),
                ("out", p(&out)),
            ];
            flags.extend(source_flags(&source));
            let st = Settings::new(&config, &with_source(&["manifest", "ubm", "models", "out"]), &flags)?;
            let (m, root) = ExperimentManifest::load(&st.path("manifest")?)?;
            let test = FeatureSource::new(root, &st)?.labeled(&m.test)?;
            let ubm = GaussianMixtureModel::load(&st.path("ubm")?)?;
            let models = load_models(&st.path("models")?)?;
            let trials = score_trials(&ubm, &models, &test)?;
            let mut f = BufWriter::new(fs::File::create(st.path("out")?)?);
            write_scores_csv(&trials, &mut f)?;
            f.flush()?;
            println!("{} trials", trials.len());
        }
        Command::Eer { scores, config } => {
            let st = Settings::new(&config, &["scores"], &[("scores", p(&scores))])?;
            let trials = read_scores_csv(BufReader::new(fs::File::open(st.path("scores")?)?))?;
            println!("{:.3}", compute_eer(&TrialScores::from_trials(&trials))?);
        }
        Command::Experiment {
            work_dir,
            out,
            seeds,
            systems,
            epochs,
            config,
        } => {
            let mut kv = match &config.config {
                Some(path) => KeyValues::load(path)?,
                None => KeyValues::default(),
            };
            for (key, value) in [("seeds", seeds), ("systems", systems), ("epochs", s(&epochs))] {
                if let Some(v) = value {
                    kv.set(key, v);
                }
            }
            let cfg = ExperimentConfig::from_kv(&kv)?;
            let work_dir = work_dir.unwrap_or_else(|| PathBuf::from("work"));
            let report = run_experiment(&cfg, &work_dir)?;
            let out = out.unwrap_or_else(|| work_dir.join("report.json"));
            fs::write(&out, report.to_json()?)?;
            let text = report.render_text();
            fs::write(out.with_extension("txt"), &text)?;
            print!("{text}");
        }
        Command::GradCheck { seed, config } => {
            let st = Settings::new(&config, &["seed"], &[("seed", s(&seed))])?;
            let report = grad_check(st.or("seed", 7)?)?;
            println!(
                "max relative error {:.3e} ({}) over {} parameters",
                report.max_rel_error, report.worst_tensor, report.parameters_checked
            );
            if !report.passed() {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Every `*.gmm` file in `dir`, keyed by file stem.
fn load_models(dir: &Path) -> Result<BTreeMap<String, GaussianMixtureModel>> {
    let mut models = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if has_extension(&path, "gmm") {
            let stem = path.file_stem().expect("file has an extension").to_string_lossy().into_owned();
            models.insert(stem, GaussianMixtureModel::load(&path)?);
        }
    }
    if models.is_empty() {
        return Err(Error::Invalid(format!("no .gmm models in {}", dir.display())));
    }
    Ok(models)
}

/// Reverberant inputs with clean targets for every training record.
fn training_pairs(manifest: &Path, secondary: SecondaryTarget) -> Result<Vec<TrainingPair>> {
    let (m, root) = ExperimentManifest::load(manifest)?;
    let fp = FrameParams::default();
    m.train_pairs
        .iter()
        .map(|r| {
            let (clean, reverb) = load_record(&root, r)?;
            let target2 = match secondary.kind() {
                Some(kind) => Some(featurize(&clean, kind)?),
                None => None,
            };
            TrainingPair::new(extract_mfb(&reverb, &fp)?, extract_mfb(&clean, &fp)?, target2)
        })
        .collect()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for numerical failures, 1 for everything else.
fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        2
    } else {
        1
    }
}
