//! Deterministic inputs shared by the pipeline benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dereverb_core::dsp::{analyze, extract_mfb, spec100};
use dereverb_core::nnet::{train, TrainingPair};
use dereverb_core::pitch::track;
use dereverb_core::reverb::{convolve, synth_rir};
use dereverb_core::PitchConfig;

pub use dereverb_core::harness::{synth_utterance, SyntheticSpeakerProfile};
pub use dereverb_core::{
    DualLabelNetwork, FeatureMatrix, FrameParams, Matrix, NetworkConfig, SecondaryTarget, TrialScores, Waveform,
};

/// A synthetic utterance of `seconds` from a random speaker.
pub fn utterance(seconds: f64, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let profile = SyntheticSpeakerProfile::random("bench", &mut rng);
    synth_utterance(&profile, seconds, seed).expect("valid profile")
}

/// Tiny-architecture network trained for one epoch on two short
/// reverberant utterances, so batch norm has running statistics.
pub fn tiny_network(secondary: SecondaryTarget, seed: u64) -> DualLabelNetwork {
    let fp = FrameParams::default();
    let rir = synth_rir(0.7, 16_000, 0.0, seed).expect("valid T60");
    let pairs: Vec<TrainingPair> = (0..2)
        .map(|i| {
            let clean = utterance(1.0, seed + i);
            let reverb = convolve(&clean, &rir).expect("matching rates");
            let target2 = match secondary {
                SecondaryTarget::None => None,
                SecondaryTarget::Pitch1 => Some(track(&clean, &fp, &PitchConfig::default()).unwrap().to_feature_matrix()),
                SecondaryTarget::Spec100 => Some(spec100(&analyze(&clean, &fp).unwrap(), &fp).unwrap()),
                SecondaryTarget::Mfb31 => Some(extract_mfb(&clean, &fp).unwrap()),
            };
            TrainingPair::new(extract_mfb(&reverb, &fp).unwrap(), extract_mfb(&clean, &fp).unwrap(), target2).unwrap()
        })
        .collect();
    let mut cfg = NetworkConfig::tiny(secondary);
    cfg.epochs = 1;
    train(&pairs, &cfg, seed).expect("short training run").network
}

/// `n` rows of Gaussian-ish frames with `dim` columns.
pub fn random_frames(n: usize, dim: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_vec(n, dim, (0..n * dim).map(|_| rng.gen_range(-1.0..1.0) + rng.gen_range(-1.0..1.0)).collect())
}

/// Overlapping target and nontarget score sets.
pub fn score_sets(n_target: usize, n_nontarget: usize, seed: u64) -> TrialScores {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TrialScores::new(
        (0..n_target).map(|_| rng.gen_range(0.0..3.0)).collect(),
        (0..n_nontarget).map(|_| rng.gen_range(-2.0..1.0)).collect(),
    )
}
