use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Formant multipliers of the five vowels, applied to a speaker's neutral
/// formant frequencies.
pub const VOWELS: [[f64; 3]; 5] = [
    [1.40, 0.80, 1.00],
    [0.90, 1.15, 1.04],
    [0.60, 1.35, 1.10],
    [1.00, 0.55, 0.95],
    [0.65, 0.50, 0.93],
];

const PEAK: f64 = 0.5;
const NOISE_FLOOR: f64 = 1e-4;

/// Stable voice parameters of one synthetic speaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpeakerProfile {
    pub speaker_id: String,
    /// Hz.
    pub base_f0: f64,
    /// Relative standard deviation of each pitch period.
    pub f0_jitter: f64,
    /// Neutral formant centres in Hz, ascending.
    pub formants: [f64; 3],
    /// Formant bandwidths in Hz.
    pub bandwidths: [f64; 3],
}

impl SyntheticSpeakerProfile {
    /// Draws a profile: f0 in 90-250 Hz, formants from fixed per-formant ranges.
    pub fn random(speaker_id: impl Into<String>, rng: &mut impl Rng) -> Self {
        SyntheticSpeakerProfile {
            speaker_id: speaker_id.into(),
            base_f0: rng.gen_range(90.0..250.0),
            f0_jitter: rng.gen_range(0.005..0.015),
            formants: [
                rng.gen_range(400.0..650.0),
                rng.gen_range(1300.0..1800.0),
                rng.gen_range(2500.0..3100.0),
            ],
            bandwidths: [
                rng.gen_range(60.0..100.0),
                rng.gen_range(80.0..140.0),
                rng.gen_range(120.0..200.0),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = SAMPLE_RATE as f64 / 2.0;
        let f = self.formants;
        if !(f[0] > 0.0 && f[0] < f[1] && f[1] < f[2] && f[2] < nyquist) {
            return Err(Error::invalid(format!("formants {f:?} must ascend below {nyquist} Hz")));
        }
        if !(60.0..=400.0).contains(&self.base_f0) {
            return Err(Error::invalid(format!("base f0 {} outside the trackable range", self.base_f0)));
        }
        if self.bandwidths.iter().any(|b| *b <= 0.0) || !(0.0..0.2).contains(&self.f0_jitter) {
            return Err(Error::invalid("bandwidths must be positive and jitter below 0.2"));
        }
        Ok(())
    }
}

/// Two-pole resonator with unit gain at its centre frequency.
struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bandwidth: f64, sr: f64) -> Self {
        let r = (-PI * bandwidth / sr).exp();
        let theta = 2.0 * PI * freq / sr;
        let a1 = 2.0 * r * theta.cos();
        let a2 = -r * r;
        // |1 - a1 e^{-jw} - a2 e^{-2jw}| at w = theta
        let (c1, s1) = (theta.cos(), theta.sin());
        let (c2, s2) = ((2.0 * theta).cos(), (2.0 * theta).sin());
        let re = 1.0 - a1 * c1 - a2 * c2;
        let im = a1 * s1 + a2 * s2;
        Resonator {
            a1,
            a2,
            gain: (re * re + im * im).sqrt(),
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

enum Segment {
    Voiced { vowel: usize, len: usize, level: f64 },
    Burst { centre: f64, len: usize, level: f64 },
    Pause { len: usize },
}

fn schedule(n: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<Segment> {
    let ms = |lo: f64, hi: f64, rng: &mut ChaCha8Rng| (rng.gen_range(lo..hi) * sr / 1000.0) as usize;
    let mut out = Vec::new();
    let mut total = 0;
    while total < n {
        let len = ms(120.0, 300.0, rng);
        total += len;
        out.push(Segment::Voiced {
            vowel: rng.gen_range(0..VOWELS.len()),
            len,
            level: rng.gen_range(0.6..1.0),
        });
        if rng.gen_bool(0.3) {
            let len = ms(40.0, 80.0, rng);
            total += len;
            out.push(Segment::Burst {
                centre: rng.gen_range(3500.0..5000.0),
                len,
                level: rng.gen_range(0.05..0.1),
            });
        }
        if rng.gen_bool(0.3) {
            let len = ms(40.0, 120.0, rng);
            total += len;
            out.push(Segment::Pause { len });
        }
    }
    out
}

/// Raised-cosine fade of `ramp` samples at both ends.
fn envelope(i: usize, len: usize, ramp: usize) -> f64 {
    let edge = i.min(len - 1 - i);
    if edge >= ramp {
        1.0
    } else {
        0.5 - 0.5 * (PI * edge as f64 / ramp as f64).cos()
    }
}

/// A synthetic utterance of `duration` seconds at 16 kHz.
///
/// Voiced stretches are jittered glottal pulse trains shaped by the
/// speaker's formants for a random vowel; they alternate with short noise
/// bursts and pauses. Output peak is 0.5. The same profile and seed always
/// give the same samples.
pub fn synth_utterance(profile: &SyntheticSpeakerProfile, duration: f64, seed: u64) -> Result<Waveform> {
    if !(duration > 0.0) || !duration.is_finite() {
        return Err(Error::invalid(format!("duration must be positive, got {duration}")));
    }
    profile.validate()?;
    let sr = SAMPLE_RATE as f64;
    let n = (duration * sr).round() as usize;
    if n == 0 {
        return Err(Error::invalid("duration is shorter than one sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let drift_phase = rng.gen_range(0.0..2.0 * PI);
    let drift_rate = rng.gen_range(0.4..1.0);
    let mut out = Vec::with_capacity(n);
    let mut next_pulse = 0.0f64;
    // glottal shaping: two leaky integrators then a first difference
    let (mut g1, mut g2, mut prev) = (0.0, 0.0, 0.0);
    for seg in schedule(n, sr, &mut rng) {
        match seg {
            Segment::Voiced { vowel, len, level } => {
                let m = VOWELS[vowel];
                let mut bank: Vec<Resonator> = (0..3)
                    .map(|k| Resonator::new(profile.formants[k] * m[k], profile.bandwidths[k], sr))
                    .collect();
                let start = out.len() as f64;
                next_pulse = next_pulse.max(start);
                for i in 0..len {
                    let t = start + i as f64;
                    let mut src = 0.0;
                    if t >= next_pulse {
                        src = 1.0;
                        let f0 = profile.base_f0 * (1.0 + 0.03 * (2.0 * PI * drift_rate * t / sr + drift_phase).sin());
                        let jitter: f64 = rng.sample(StandardNormal);
                        next_pulse += sr / f0 * (1.0 + profile.f0_jitter * jitter);
                    }
                    g1 = 0.97 * g1 + src;
                    g2 = 0.97 * g2 + g1;
                    let radiated = g2 - prev;
                    prev = g2;
                    let y = bank.iter_mut().fold(radiated, |acc, r| r.step(acc));
                    out.push(level * envelope(i, len, 240) * y);
                }
            }
            Segment::Burst { centre, len, level } => {
                let mut r = Resonator::new(centre, 1500.0, sr);
                for i in 0..len {
                    let x: f64 = rng.sample(StandardNormal);
                    out.push(level * envelope(i, len, 80) * r.step(x));
                }
            }
            Segment::Pause { len } => out.extend(std::iter::repeat_n(0.0, len)),
        }
    }
    out.truncate(n);
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let scale = (PEAK - NOISE_FLOOR * 5.0) / peak;
        out.iter_mut().for_each(|v| *v *= scale);
    }
    let floor = rand_distr::Normal::new(0.0, NOISE_FLOOR).expect("valid noise level");
    for v in &mut out {
        *v = (*v + floor.sample(&mut rng)).clamp(-PEAK, PEAK);
    }
    Waveform::new(out, SAMPLE_RATE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{extract_mfb, mel_energies, mfcc39, FrameParams};
    use crate::pitch::{track, PitchConfig};

    fn profile(seed: u64) -> SyntheticSpeakerProfile {
        SyntheticSpeakerProfile::random(format!("spk{seed}"), &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn profiles_are_valid() {
        for s in 0..50 {
            profile(s).validate().unwrap();
        }
        let mut bad = profile(0);
        bad.formants.swap(0, 1);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn deterministic_and_bounded() {
        let p = profile(3);
        let a = synth_utterance(&p, 1.0, 11).unwrap();
        let b = synth_utterance(&p, 1.0, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 16000);
        assert!(a.peak() <= 0.99);
        assert_ne!(a, synth_utterance(&p, 1.0, 12).unwrap());
        assert!(synth_utterance(&p, 0.0, 1).is_err());
    }

    #[test]
    fn tracked_pitch_matches_profile() {
        for s in 0..4 {
            let p = profile(s);
            let w = synth_utterance(&p, 3.0, s + 100).unwrap();
            let tr = track(&w, &FrameParams::default(), &PitchConfig::default()).unwrap();
            let mut voiced: Vec<f64> = tr.f0.iter().copied().filter(|f| *f > 0.0).collect();
            assert!(voiced.len() * 2 >= tr.len(), "speaker {s}: {} of {} voiced", voiced.len(), tr.len());
            voiced.sort_by(f64::total_cmp);
            let median = voiced[voiced.len() / 2];
            assert!((median / p.base_f0 - 1.0).abs() <= 0.05, "speaker {s}: {median} vs {}", p.base_f0);
        }
    }

    #[test]
    fn profiles_separate_in_mfcc_space() {
        let fp = FrameParams::default();
        let mean_mfcc = |p: &SyntheticSpeakerProfile, seed: u64| -> Vec<f64> {
            let w = synth_utterance(p, 2.0, seed).unwrap();
            let mfb = extract_mfb(&w, &fp).unwrap();
            let m = mfcc39(&mfb, &mel_energies(&mfb)).unwrap();
            let mut mean = [0.0; 13];
            for row in m.data().iter_rows() {
                mean.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
            mean.iter().map(|v| v / m.frames() as f64).collect()
        };
        let (a, b) = (profile(21), profile(22));
        let total: f64 = (0..10)
            .map(|s| {
                let (x, y) = (mean_mfcc(&a, s), mean_mfcc(&b, s + 1000));
                x.iter().zip(&y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
            })
            .sum();
        assert!(total / 10.0 >= 1.0, "{}", total / 10.0);
    }
}
