//! Frame-level feature extraction.
//!
//! Pipeline: pre-emphasis, Hamming-windowed framing, magnitude STFT, then one
//! of the feature views (31-band log-Mel, 100-bin log spectrogram, 39-dim
//! MFCC). Every function here is pure.

mod io;

pub use io::{
    read_feature_matrix, read_wav, write_feature_csv, write_feature_matrix, write_wav,
};

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Processing sample rate. WAV files at other rates are rejected.
pub const SAMPLE_RATE: u32 = 16_000;

/// Floor applied before every logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

/// Mono PCM signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Waveform {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    #[inline]
    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    #[inline]
    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Analysis framing and filterbank parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameParams {
    /// Seconds.
    pub frame_length: f64,
    /// Seconds.
    pub frame_shift: f64,
    pub preemphasis: f64,
    pub n_mel: usize,
    pub fft_size: usize,
    pub spec_bins: usize,
}

impl Default for FrameParams {
    fn default() -> Self {
        FrameParams {
            frame_length: 0.025,
            frame_shift: 0.010,
            preemphasis: 0.97,
            n_mel: 31,
            fft_size: 512,
            spec_bins: 100,
        }
    }
}

impl FrameParams {
    pub fn frame_samples(&self, sample_rate: u32) -> usize {
        (self.frame_length * sample_rate as f64).round() as usize
    }

    pub fn shift_samples(&self, sample_rate: u32) -> usize {
        (self.frame_shift * sample_rate as f64).round() as usize
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if !(self.frame_shift > 0.0 && self.frame_shift <= self.frame_length) {
            return Err(Error::invalid(format!(
                "frame shift {} must lie in (0, frame length {}]",
                self.frame_shift, self.frame_length
            )));
        }
        if !(0.0..1.0).contains(&self.preemphasis) {
            return Err(Error::invalid(format!(
                "pre-emphasis {} outside [0, 1)",
                self.preemphasis
            )));
        }
        if self.shift_samples(sample_rate) == 0 {
            return Err(Error::invalid("frame shift rounds to zero samples"));
        }
        if self.fft_size < self.frame_samples(sample_rate) {
            return Err(Error::invalid(format!(
                "fft size {} shorter than frame ({} samples)",
                self.fft_size,
                self.frame_samples(sample_rate)
            )));
        }
        if self.n_mel == 0 || self.spec_bins == 0 {
            return Err(Error::invalid("filter and bin counts must be positive"));
        }
        Ok(())
    }

    /// Number of complete frames in `n` samples.
    pub fn frame_count(&self, n: usize, sample_rate: u32) -> usize {
        frame_count(
            n,
            self.frame_samples(sample_rate),
            self.shift_samples(sample_rate),
        )
    }
}

/// `max(0, floor((n - len) / shift) + 1)`; partial trailing frames are dropped.
pub fn frame_count(n: usize, len: usize, shift: usize) -> usize {
    if n < len || shift == 0 {
        0
    } else {
        (n - len) / shift + 1
    }
}

/// Feature view stored in a [`FeatureMatrix`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureKind {
    Mfb31,
    Spec100,
    Mfcc39,
    Pitch1,
}

impl FeatureKind {
    pub fn dim(self) -> usize {
        match self {
            FeatureKind::Mfb31 => 31,
            FeatureKind::Spec100 => 100,
            FeatureKind::Mfcc39 => 39,
            FeatureKind::Pitch1 => 1,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            FeatureKind::Mfb31 => 1,
            FeatureKind::Spec100 => 2,
            FeatureKind::Mfcc39 => 3,
            FeatureKind::Pitch1 => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(FeatureKind::Mfb31),
            2 => Some(FeatureKind::Spec100),
            3 => Some(FeatureKind::Mfcc39),
            4 => Some(FeatureKind::Pitch1),
            _ => None,
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureKind::Mfb31 => "mfb31",
            FeatureKind::Spec100 => "spec100",
            FeatureKind::Mfcc39 => "mfcc39",
            FeatureKind::Pitch1 => "pitch1",
        })
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mfb31" | "mfb" => Ok(FeatureKind::Mfb31),
            "spec100" | "spec" => Ok(FeatureKind::Spec100),
            "mfcc39" | "mfcc" => Ok(FeatureKind::Mfcc39),
            "pitch1" | "pitch" => Ok(FeatureKind::Pitch1),
            other => Err(Error::invalid(format!("unknown feature kind '{other}'"))),
        }
    }
}

/// T frames by D dims, D fixed by the kind.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    kind: FeatureKind,
    data: Matrix,
    frame_shift: f64,
}

impl FeatureMatrix {
    pub fn new(kind: FeatureKind, data: Matrix, frame_shift: f64) -> Result<Self> {
        if data.cols() != kind.dim() && data.rows() > 0 {
            return Err(Error::invalid(format!(
                "{kind} features need {} columns, got {}",
                kind.dim(),
                data.cols()
            )));
        }
        if !data.is_finite() {
            return Err(Error::invalid(format!("{kind} features contain non-finite values")));
        }
        let data = if data.rows() == 0 {
            Matrix::zeros(0, kind.dim())
        } else {
            data
        };
        Ok(FeatureMatrix {
            kind,
            data,
            frame_shift,
        })
    }

    #[inline]
    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    #[inline]
    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn into_data(self) -> Matrix {
        self.data
    }

    pub fn frames(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.kind.dim()
    }

    pub fn frame_shift(&self) -> f64 {
        self.frame_shift
    }

    pub fn select_frames(&self, keep: &[bool]) -> FeatureMatrix {
        FeatureMatrix {
            kind: self.kind,
            data: self.data.select_rows(keep),
            frame_shift: self.frame_shift,
        }
    }
}

/// `y[0] = x[0]`, `y[n] = x[n] - coeff * x[n-1]`.
pub fn pre_emphasize(w: &Waveform, coeff: f64) -> Result<Waveform> {
    if !(0.0..1.0).contains(&coeff) {
        return Err(Error::invalid(format!("pre-emphasis {coeff} outside [0, 1)")));
    }
    let x = w.samples();
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite sample at index {i}")));
    }
    let mut y = Vec::with_capacity(x.len());
    if let Some(&first) = x.first() {
        y.push(first);
    }
    y.extend(x.windows(2).map(|p| p[1] - coeff * p[0]));
    Ok(Waveform {
        samples: y,
        sample_rate: w.sample_rate(),
    })
}

pub fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    let m = (len - 1) as f64;
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / m).cos())
        .collect()
}

/// Splits into Hamming-windowed frames.
pub fn frame_signal(w: &Waveform, p: &FrameParams) -> Result<Vec<Vec<f64>>> {
    p.validate(w.sample_rate())?;
    let len = p.frame_samples(w.sample_rate());
    let shift = p.shift_samples(w.sample_rate());
    let window = hamming(len);
    let count = frame_count(w.len(), len, shift);
    let x = w.samples();
    Ok((0..count)
        .map(|t| {
            x[t * shift..t * shift + len]
                .iter()
                .zip(&window)
                .map(|(s, h)| s * h)
                .collect()
        })
        .collect())
}

/// Unwindowed frame energies `sum x^2` over the same frame grid as [`frame_signal`].
pub fn frame_energies(w: &Waveform, p: &FrameParams) -> Vec<f64> {
    let len = p.frame_samples(w.sample_rate());
    let shift = p.shift_samples(w.sample_rate());
    let x = w.samples();
    (0..frame_count(w.len(), len, shift))
        .map(|t| x[t * shift..t * shift + len].iter().map(|v| v * v).sum())
        .collect()
}

/// `|DFT_k(frame)|` for `k = 0..=fft_size/2`, frames zero-padded to `fft_size`.
pub fn stft_magnitude(frames: &[Vec<f64>], fft_size: usize) -> Result<Matrix> {
    if !fft_size.is_power_of_two() {
        return Err(Error::invalid(format!("fft size {fft_size} is not a power of two")));
    }
    let bins = fft_size / 2 + 1;
    let mut out = Matrix::zeros(frames.len(), bins);
    if frames.is_empty() {
        return Ok(out);
    }
    let fft = FftPlanner::<f64>::new().plan_fft_forward(fft_size);
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    for (t, frame) in frames.iter().enumerate() {
        if frame.len() > fft_size {
            return Err(Error::invalid(format!(
                "frame of {} samples exceeds fft size {fft_size}",
                frame.len()
            )));
        }
        for (slot, v) in buf.iter_mut().zip(frame.iter().chain(std::iter::repeat(&0.0))) {
            *slot = Complex::new(*v, 0.0);
        }
        fft.process(&mut buf);
        for (o, c) in out.row_mut(t).iter_mut().zip(&buf[..bins]) {
            *o = c.norm();
        }
    }
    Ok(out)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular unit-peak filters with edges equally spaced in mel from 0 Hz to
/// Nyquist. Rows are filters, columns are FFT bins `0..=fft_size/2`.
pub fn mel_filterbank(n_mel: usize, fft_size: usize, sample_rate: u32) -> Matrix {
    let bins = fft_size / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mel + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mel + 1) as f64))
        .collect();
    let mut fb = Matrix::zeros(n_mel, bins);
    for m in 0..n_mel {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * sample_rate as f64 / fft_size as f64;
            let h = if f > lo && f <= center {
                (f - lo) / (center - lo)
            } else if f > center && f < hi {
                (hi - f) / (hi - center)
            } else {
                0.0
            };
            fb[(m, k)] = h;
        }
    }
    fb
}

fn check_bins(spec: &Matrix, p: &FrameParams) -> Result<()> {
    let bins = p.fft_size / 2 + 1;
    if spec.cols() != bins && spec.rows() > 0 {
        return Err(Error::invalid(format!(
            "spectrum has {} bins, expected {bins}",
            spec.cols()
        )));
    }
    Ok(())
}

/// Log-Mel filterbank energies from a magnitude spectrogram:
/// `ln(max(sum_k H_m(k) |X_k|^2, 1e-10))`.
pub fn log_mel(spec: &Matrix, p: &FrameParams, sample_rate: u32) -> Result<FeatureMatrix> {
    check_bins(spec, p)?;
    if p.n_mel != FeatureKind::Mfb31.dim() {
        return Err(Error::invalid(format!(
            "log-Mel features are {}-band, configured {}",
            FeatureKind::Mfb31.dim(),
            p.n_mel
        )));
    }
    let fb = mel_filterbank(p.n_mel, p.fft_size, sample_rate);
    let mut out = Matrix::zeros(spec.rows(), p.n_mel);
    let mut power = vec![0.0; spec.cols()];
    for t in 0..spec.rows() {
        for (pw, m) in power.iter_mut().zip(spec.row(t)) {
            *pw = m * m;
        }
        for m in 0..p.n_mel {
            let e: f64 = fb.row(m).iter().zip(&power).map(|(h, pw)| h * pw).sum();
            out[(t, m)] = e.max(LOG_FLOOR).ln();
        }
    }
    FeatureMatrix::new(FeatureKind::Mfb31, out, p.frame_shift)
}

/// Log magnitude linearly resampled from `fft_size/2+1` bins to `spec_bins`
/// bins spanning DC to Nyquist.
pub fn spec100(spec: &Matrix, p: &FrameParams) -> Result<FeatureMatrix> {
    check_bins(spec, p)?;
    if p.spec_bins != FeatureKind::Spec100.dim() {
        return Err(Error::invalid(format!(
            "spectrogram target is {}-bin, configured {}",
            FeatureKind::Spec100.dim(),
            p.spec_bins
        )));
    }
    let src = p.fft_size / 2 + 1;
    let mut out = Matrix::zeros(spec.rows(), p.spec_bins);
    let mut logmag = vec![0.0; src];
    for t in 0..spec.rows() {
        for (l, m) in logmag.iter_mut().zip(spec.row(t)) {
            *l = m.max(LOG_FLOOR).ln();
        }
        for j in 0..p.spec_bins {
            out[(t, j)] = resample_point(&logmag, j, p.spec_bins);
        }
    }
    FeatureMatrix::new(FeatureKind::Spec100, out, p.frame_shift)
}

fn resample_point(src: &[f64], j: usize, n_out: usize) -> f64 {
    if n_out == 1 || src.len() == 1 {
        return src[0];
    }
    let pos = j as f64 * (src.len() - 1) as f64 / (n_out - 1) as f64;
    let lo = (pos.floor() as usize).min(src.len() - 2);
    let frac = pos - lo as f64;
    src[lo] * (1.0 - frac) + src[lo + 1] * frac
}

/// Orthonormal DCT-II of one vector, first `n_out` coefficients.
pub fn dct2(x: &[f64], n_out: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (0..n_out)
        .map(|k| {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            scale
                * x.iter()
                    .enumerate()
                    .map(|(m, v)| v * (PI * k as f64 * (m as f64 + 0.5) / n).cos())
                    .sum::<f64>()
        })
        .collect()
}

/// Regression deltas over a +/-2 frame window, edges replicated.
pub fn deltas(m: &Matrix) -> Matrix {
    const WIDTH: isize = 2;
    let t_len = m.rows() as isize;
    let mut out = Matrix::zeros(m.rows(), m.cols());
    if t_len == 0 {
        return out;
    }
    let norm: f64 = 2.0 * (1..=WIDTH).map(|k| (k * k) as f64).sum::<f64>();
    let clamp = |t: isize| t.clamp(0, t_len - 1) as usize;
    for t in 0..t_len {
        for d in 0..m.cols() {
            let mut acc = 0.0;
            for k in 1..=WIDTH {
                acc += k as f64 * (m[(clamp(t + k), d)] - m[(clamp(t - k), d)]);
            }
            out[(t as usize, d)] = acc / norm;
        }
    }
    out
}

/// 13 cepstra (c0 replaced by log frame energy), deltas and delta-deltas.
pub fn mfcc39(logmel: &FeatureMatrix, energies: &[f64]) -> Result<FeatureMatrix> {
    if logmel.kind() != FeatureKind::Mfb31 {
        return Err(Error::invalid(format!(
            "MFCCs are computed from mfb31 features, got {}",
            logmel.kind()
        )));
    }
    if energies.len() != logmel.frames() {
        return Err(Error::invalid(format!(
            "{} frame energies for {} frames",
            energies.len(),
            logmel.frames()
        )));
    }
    const N_CEP: usize = 13;
    let t_len = logmel.frames();
    let mut stat = Matrix::zeros(t_len, N_CEP);
    for t in 0..t_len {
        let c = dct2(logmel.data().row(t), N_CEP);
        let row = stat.row_mut(t);
        row.copy_from_slice(&c);
        row[0] = energies[t].max(LOG_FLOOR).ln();
    }
    let d1 = deltas(&stat);
    let d2 = deltas(&d1);
    let mut out = Matrix::zeros(t_len, 3 * N_CEP);
    for t in 0..t_len {
        let row = out.row_mut(t);
        row[..N_CEP].copy_from_slice(stat.row(t));
        row[N_CEP..2 * N_CEP].copy_from_slice(d1.row(t));
        row[2 * N_CEP..].copy_from_slice(d2.row(t));
    }
    FeatureMatrix::new(FeatureKind::Mfcc39, out, logmel.frame_shift())
}

/// Frame energy recovered from log-Mel values: `sum_m exp(mfb_m)`.
///
/// Lets MFCCs be computed for feature matrices that have no waveform behind
/// them, such as network-enhanced log-Mel frames.
pub fn mel_energies(logmel: &FeatureMatrix) -> Vec<f64> {
    logmel
        .data()
        .iter_rows()
        .map(|r| r.iter().map(|v| v.exp()).sum())
        .collect()
}

/// `(a - min) / (max - min)` over a slice.
pub fn minmax(values: &[f64]) -> Result<Vec<f64>> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::invalid(
            "min-max normalization of a constant (or empty) matrix is undefined",
        ));
    }
    Ok(values.iter().map(|v| (v - lo) / (hi - lo)).collect())
}

/// Min-max scaling with one global minimum and maximum.
pub fn minmax_normalize(m: &FeatureMatrix) -> Result<FeatureMatrix> {
    let scaled = minmax(m.data().as_slice())?;
    let data = Matrix::from_vec(m.frames(), m.dim(), scaled);
    FeatureMatrix::new(m.kind(), data, m.frame_shift())
}

/// Decibel log energy of each frame, floored at -100 dB.
pub fn frame_log_energies(w: &Waveform, p: &FrameParams) -> Vec<f64> {
    frame_energies(w, p)
        .into_iter()
        .map(|e| 10.0 * e.max(LOG_FLOOR).log10())
        .collect()
}

const VAD_PERCENTILE: f64 = 0.30;
const VAD_MARGIN_DB: f64 = 3.0;
const VAD_HANGOVER: usize = 5;

/// Energy voice-activity mask.
///
/// Threshold is the 30th-percentile frame energy plus 3 dB, capped at 3 dB
/// below the loudest frame so that constant-level input counts as speech. Frames at the
/// -100 dB floor are never speech. Each speech run is extended by 5 frames.
pub fn energy_vad(w: &Waveform, p: &FrameParams) -> Vec<bool> {
    let energies = frame_log_energies(w, p);
    if energies.is_empty() {
        return Vec::new();
    }
    let floor_db = 10.0 * LOG_FLOOR.log10();
    let mut sorted = energies.clone();
    sorted.sort_by(f64::total_cmp);
    let idx = (VAD_PERCENTILE * (sorted.len() - 1) as f64).floor() as usize;
    let loudest = sorted[sorted.len() - 1];
    let threshold = (sorted[idx] + VAD_MARGIN_DB).min(loudest - VAD_MARGIN_DB);
    let raw: Vec<bool> = energies
        .iter()
        .map(|&e| e >= threshold && e > floor_db)
        .collect();
    let mut mask = raw.clone();
    let mut since_speech = usize::MAX;
    for (m, &r) in mask.iter_mut().zip(&raw) {
        if r {
            since_speech = 0;
        } else if since_speech < VAD_HANGOVER {
            since_speech += 1;
            *m = true;
        } else {
            since_speech = since_speech.saturating_add(1);
        }
    }
    mask
}

/// Drops the samples of non-speech frames.
///
/// Sample `n` belongs to the frame whose hop segment contains it; samples past
/// the last frame follow the last frame's decision.
pub fn apply_vad(w: &Waveform, mask: &[bool], p: &FrameParams) -> Waveform {
    let shift = p.shift_samples(w.sample_rate());
    if mask.is_empty() {
        return Waveform::silence(0, w.sample_rate());
    }
    let samples = w
        .samples()
        .iter()
        .enumerate()
        .filter(|(n, _)| mask[(n / shift).min(mask.len() - 1)])
        .map(|(_, &v)| v)
        .collect();
    Waveform {
        samples,
        sample_rate: w.sample_rate(),
    }
}

/// Magnitude STFT of a pre-emphasized, windowed waveform.
pub fn analyze(w: &Waveform, p: &FrameParams) -> Result<Matrix> {
    let emphasized = pre_emphasize(w, p.preemphasis)?;
    let frames = frame_signal(&emphasized, p)?;
    stft_magnitude(&frames, p.fft_size)
}

/// MFB-31 features straight from a waveform.
pub fn extract_mfb(w: &Waveform, p: &FrameParams) -> Result<FeatureMatrix> {
    log_mel(&analyze(w, p)?, p, w.sample_rate())
}
