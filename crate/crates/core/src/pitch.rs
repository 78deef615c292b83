//! Fundamental-frequency tracking for the one-dimensional training target.
//!
//! Candidates come from the normalized cross-correlation function (NCCF) of a
//! 40 ms window centred on each analysis frame. A Viterbi pass over the
//! candidates plus an explicit unvoiced state picks the smoothest path.

use crate::dsp::{FeatureKind, FeatureMatrix, FrameParams, Waveform};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct PitchConfig {
    /// Hz.
    pub f0_min: f64,
    /// Hz.
    pub f0_max: f64,
    /// Minimum NCCF peak height for a candidate; also the cost of the unvoiced state.
    pub nccf_threshold: f64,
    /// Cost per octave of f0 change between consecutive voiced frames.
    pub dp_transition_cost: f64,
    /// Cost of switching between voiced and unvoiced.
    pub voicing_switch_cost: f64,
    /// Extra local cost growing linearly with lag, zero at lag 0 and this
    /// value at the longest lag. Breaks the tie between a period and its
    /// multiples on strictly periodic input.
    pub octave_bias: f64,
    /// Correlation window in seconds.
    pub window: f64,
    pub max_candidates: usize,
}

impl Default for PitchConfig {
    fn default() -> Self {
        PitchConfig {
            f0_min: 60.0,
            f0_max: 400.0,
            nccf_threshold: 0.3,
            dp_transition_cost: 1.0,
            voicing_switch_cost: 0.2,
            octave_bias: 0.1,
            window: 0.040,
            max_candidates: 5,
        }
    }
}

impl PitchConfig {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        if !(self.f0_min > 0.0 && self.f0_min < self.f0_max && self.f0_max < nyquist) {
            return Err(Error::invalid(format!(
                "pitch range [{}, {}] Hz must satisfy 0 < min < max < {nyquist}",
                self.f0_min, self.f0_max
            )));
        }
        if self.window <= 0.0 || self.max_candidates == 0 {
            return Err(Error::invalid("pitch window and candidate count must be positive"));
        }
        Ok(())
    }

    /// Inclusive lag range in samples.
    pub fn lag_range(&self, sample_rate: u32) -> (usize, usize) {
        let sr = sample_rate as f64;
        (
            (sr / self.f0_max).round().max(2.0) as usize,
            (sr / self.f0_min).round() as usize,
        )
    }

    pub fn window_samples(&self, sample_rate: u32) -> usize {
        (self.window * sample_rate as f64).round() as usize
    }
}

/// One NCCF peak.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    /// Integer lag of the peak in samples.
    pub lag: usize,
    /// Peak-interpolated frequency in Hz, clamped to the configured range.
    pub f0: f64,
    pub correlation: f64,
}

/// Per-frame f0 in Hz, 0 for unvoiced frames.
#[derive(Debug, Clone, PartialEq)]
pub struct PitchTrack {
    pub f0: Vec<f64>,
    pub frame_shift: f64,
}

impl PitchTrack {
    pub fn len(&self) -> usize {
        self.f0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0.is_empty()
    }

    pub fn voiced_fraction(&self) -> f64 {
        if self.f0.is_empty() {
            return 0.0;
        }
        self.f0.iter().filter(|f| **f > 0.0).count() as f64 / self.f0.len() as f64
    }

    pub fn to_feature_matrix(&self) -> FeatureMatrix {
        FeatureMatrix::new(
            FeatureKind::Pitch1,
            Matrix::from_vec(self.f0.len(), 1, self.f0.clone()),
            self.frame_shift,
        )
        .expect("pitch values are finite")
    }
}

/// `NCCF(lag) = sum x[n] x[n+lag] / sqrt(sum x[n]^2 * sum x[n+lag]^2)` over
/// `n < window`. `segment` must hold at least `window + lag` samples.
pub fn nccf(segment: &[f64], window: usize, lag: usize) -> f64 {
    let a = &segment[..window];
    let b = &segment[lag..lag + window];
    let (mut cross, mut ea, mut eb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cross += x * y;
        ea += x * x;
        eb += y * y;
    }
    let denom = (ea * eb).sqrt();
    if denom > 0.0 {
        cross / denom
    } else {
        0.0
    }
}

/// NCCF peaks above threshold, strongest first, at most `max_candidates`.
///
/// `segment` starts at the analysis window; it is zero-extended as needed to
/// cover the longest lag.
pub fn nccf_candidates(segment: &[f64], sample_rate: u32, cfg: &PitchConfig) -> Vec<Candidate> {
    let window = cfg.window_samples(sample_rate);
    let (lag_min, lag_max) = cfg.lag_range(sample_rate);
    let needed = window + lag_max + 2;
    let mut buf = segment[..segment.len().min(needed)].to_vec();
    buf.resize(needed, 0.0);

    let e0: f64 = buf[..window].iter().map(|v| v * v).sum();
    if e0 == 0.0 {
        return Vec::new();
    }
    // r[i] holds NCCF at lag (lag_min - 1 + i)
    let first = lag_min - 1;
    let r: Vec<f64> = (first..=lag_max + 1).map(|lag| nccf(&buf, window, lag)).collect();
    let sr = sample_rate as f64;
    let mut cands: Vec<Candidate> = (1..r.len() - 1)
        .filter(|&i| r[i] > cfg.nccf_threshold && r[i] > r[i - 1] && r[i] >= r[i + 1])
        .map(|i| {
            let (a, b, c) = (r[i - 1], r[i], r[i + 1]);
            let curv = a - 2.0 * b + c;
            let shift = if curv < 0.0 { (0.5 * (a - c) / curv).clamp(-0.5, 0.5) } else { 0.0 };
            let lag = first + i;
            Candidate {
                lag,
                f0: (sr / (lag as f64 + shift)).clamp(cfg.f0_min, cfg.f0_max),
                correlation: b,
            }
        })
        .collect();
    cands.sort_by(|x, y| y.correlation.total_cmp(&x.correlation).then(x.lag.cmp(&y.lag)));
    cands.truncate(cfg.max_candidates);
    cands
}

/// Candidate lists for every analysis frame of `w`.
pub fn frame_candidates(w: &Waveform, p: &FrameParams, cfg: &PitchConfig) -> Result<Vec<Vec<Candidate>>> {
    let sr = w.sample_rate();
    p.validate(sr)?;
    cfg.validate(sr)?;
    let frames = p.frame_count(w.len(), sr);
    let len = p.frame_samples(sr);
    let shift = p.shift_samples(sr);
    let window = cfg.window_samples(sr);
    let (_, lag_max) = cfg.lag_range(sr);
    let span = window + lag_max + 2;
    let x = w.samples();
    let mut seg = vec![0.0; span];
    Ok((0..frames)
        .map(|t| {
            let start = (t * shift + len / 2) as isize - (window / 2) as isize;
            for (i, s) in seg.iter_mut().enumerate() {
                let n = start + i as isize;
                *s = if n >= 0 && (n as usize) < x.len() { x[n as usize] } else { 0.0 };
            }
            nccf_candidates(&seg, sr, cfg)
        })
        .collect())
}

/// Minimum-cost voiced/unvoiced path over per-frame candidates.
pub fn viterbi(cands: &[Vec<Candidate>], lag_max: usize, cfg: &PitchConfig) -> Vec<f64> {
    if cands.is_empty() {
        return Vec::new();
    }
    let local = |c: &Candidate| 1.0 - c.correlation + cfg.octave_bias * c.lag as f64 / lag_max as f64;
    // state 0 is unvoiced, state j+1 is candidate j
    let mut cost: Vec<f64> = std::iter::once(cfg.nccf_threshold)
        .chain(cands[0].iter().map(local))
        .collect();
    let mut back: Vec<Vec<usize>> = vec![vec![0; cost.len()]];
    for t in 1..cands.len() {
        let prev = &cands[t - 1];
        let cur = &cands[t];
        let mut next = Vec::with_capacity(cur.len() + 1);
        let mut ptr = Vec::with_capacity(cur.len() + 1);
        for s in 0..=cur.len() {
            let mut best = (f64::INFINITY, 0usize);
            for (q, &c) in cost.iter().enumerate() {
                let trans = match (q, s) {
                    (0, 0) => 0.0,
                    (0, _) | (_, 0) => cfg.voicing_switch_cost,
                    (q, s) => cfg.dp_transition_cost * (cur[s - 1].f0 / prev[q - 1].f0).log2().abs(),
                };
                let total = c + trans;
                if total < best.0 {
                    best = (total, q);
                }
            }
            let here = if s == 0 { cfg.nccf_threshold } else { local(&cur[s - 1]) };
            next.push(best.0 + here);
            ptr.push(best.1);
        }
        cost = next;
        back.push(ptr);
    }
    let mut state = cost
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut f0 = vec![0.0; cands.len()];
    for t in (0..cands.len()).rev() {
        if state > 0 {
            f0[t] = cands[t][state - 1].f0;
        }
        state = back[t][state];
    }
    f0
}

/// Pitch track aligned with the feature frame grid of `p`.
pub fn track(w: &Waveform, p: &FrameParams, cfg: &PitchConfig) -> Result<PitchTrack> {
    let cands = frame_candidates(w, p, cfg)?;
    let (_, lag_max) = cfg.lag_range(w.sample_rate());
    Ok(PitchTrack {
        f0: viterbi(&cands, lag_max, cfg),
        frame_shift: p.frame_shift,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::SAMPLE_RATE;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};
    use std::f64::consts::PI;

    fn harmonic(f0: f64, seconds: f64) -> Vec<f64> {
        let n = (seconds * SAMPLE_RATE as f64) as usize;
        (0..n)
            .map(|i| {
                let t = i as f64 / SAMPLE_RATE as f64;
                0.3 * (1..=10).map(|h| (2.0 * PI * h as f64 * f0 * t).sin() / h as f64).sum::<f64>()
            })
            .collect()
    }

    fn interior(track: &PitchTrack) -> &[f64] {
        &track.f0[3..track.len() - 3]
    }

    #[test]
    fn periodic_signal_peaks_at_period() {
        let cfg = PitchConfig::default();
        let period = 100;
        let x: Vec<f64> = (0..2000)
            .map(|n| ((2.0 * PI * (n % period) as f64 / period as f64).sin()).powi(3) + 0.2 * (4.0 * PI * n as f64 / period as f64).cos())
            .collect();
        let c = nccf_candidates(&x, SAMPLE_RATE, &cfg);
        assert_eq!(c[0].lag, period);
        assert!((c[0].correlation - 1.0).abs() < 1e-9);
        assert!(c.len() <= cfg.max_candidates);
        assert!(c.windows(2).all(|w| w[0].correlation >= w[1].correlation));
    }

    #[test]
    fn silent_window_has_no_candidates() {
        assert!(nccf_candidates(&[0.0; 1200], SAMPLE_RATE, &PitchConfig::default()).is_empty());
    }

    #[test]
    fn white_noise_rarely_correlates() {
        let cfg = PitchConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut quiet = 0;
        for _ in 0..200 {
            let x: Vec<f64> = (0..1000).map(|_| StandardNormal.sample(&mut rng)).collect();
            if nccf_candidates(&x, SAMPLE_RATE, &cfg).iter().all(|c| c.correlation < 0.3) {
                quiet += 1;
            }
        }
        assert!(quiet >= 190, "{quiet}/200 noise windows below threshold");
    }

    #[test]
    fn tracks_120_hz() {
        let p = FrameParams::default();
        let cfg = PitchConfig::default();
        let w = Waveform::new(harmonic(120.0, 1.0), SAMPLE_RATE).unwrap();
        let tr = track(&w, &p, &cfg).unwrap();
        assert_eq!(tr.len(), p.frame_count(w.len(), SAMPLE_RATE));
        let inner = interior(&tr);
        let good = inner.iter().filter(|f| (**f - 120.0).abs() <= 3.0).count();
        assert!(good as f64 >= 0.9 * inner.len() as f64, "{good}/{}", inner.len());
        let voiced: Vec<f64> = tr.f0.iter().copied().filter(|f| *f > 0.0).collect();
        let off = voiced.iter().filter(|f| **f < 80.0 || **f > 180.0).count();
        assert!((off as f64) < 0.05 * voiced.len() as f64);
        for f in &tr.f0 {
            assert!(*f == 0.0 || (cfg.f0_min..=cfg.f0_max).contains(f));
        }
    }

    #[test]
    fn silence_is_unvoiced() {
        let w = Waveform::silence(16000, SAMPLE_RATE);
        let tr = track(&w, &FrameParams::default(), &PitchConfig::default()).unwrap();
        assert!(tr.f0.iter().all(|f| *f == 0.0));
        assert_eq!(tr.voiced_fraction(), 0.0);
    }

    #[test]
    fn gap_does_not_cause_octave_jump() {
        let p = FrameParams::default();
        let mut x = harmonic(120.0, 1.0);
        let gap = 8000..8000 + 480;
        x[gap.clone()].iter_mut().for_each(|v| *v = 0.0);
        let w = Waveform::new(x, SAMPLE_RATE).unwrap();
        let tr = track(&w, &p, &PitchConfig::default()).unwrap();
        let gap_frame = gap.start / 160;
        let before = &tr.f0[3..gap_frame - 3];
        let after = &tr.f0[gap_frame + 6..tr.len() - 3];
        for f in before.iter().chain(after) {
            if *f > 0.0 {
                assert!((f - 120.0).abs() <= 3.0, "f0 {f}");
            }
        }
        assert!(before.iter().filter(|f| **f > 0.0).count() > before.len() * 9 / 10);
        assert!(after.iter().filter(|f| **f > 0.0).count() > after.len() * 9 / 10);
    }

    #[test]
    fn track_is_deterministic() {
        let w = Waveform::new(harmonic(200.0, 0.5), SAMPLE_RATE).unwrap();
        let p = FrameParams::default();
        let cfg = PitchConfig::default();
        assert_eq!(track(&w, &p, &cfg).unwrap(), track(&w, &p, &cfg).unwrap());
    }

    #[test]
    fn rejects_bad_range() {
        let cfg = PitchConfig { f0_min: 500.0, f0_max: 400.0, ..Default::default() };
        assert!(cfg.validate(SAMPLE_RATE).is_err());
    }
}
