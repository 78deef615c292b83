//! Statistical room impulse responses and reverberant convolution.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::dsp::Waveform;
use crate::error::{Error, Result};

const RIR_MAGIC: &[u8; 4] = b"DRVR";
const RIR_VERSION: u32 = 1;

/// Accepted deviation of the Schroeder estimate from the requested T60.
pub const T60_TOLERANCE: f64 = 0.10;

#[derive(Debug, Clone, PartialEq)]
pub struct RoomImpulseResponse {
    taps: Vec<f64>,
    sample_rate: u32,
    nominal_t60: f64,
}

impl RoomImpulseResponse {
    pub fn new(taps: Vec<f64>, sample_rate: u32, nominal_t60: f64) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::invalid("impulse response has no taps"));
        }
        if sample_rate == 0 || taps.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("impulse response needs a positive rate and finite taps"));
        }
        Ok(RoomImpulseResponse {
            taps,
            sample_rate,
            nominal_t60,
        })
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn nominal_t60(&self) -> f64 {
        self.nominal_t60
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn to_waveform(&self) -> Waveform {
        Waveform::new(self.taps.clone(), self.sample_rate).expect("taps are finite")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(RIR_MAGIC)?;
        out.write_all(&RIR_VERSION.to_le_bytes())?;
        out.write_all(&self.sample_rate.to_le_bytes())?;
        out.write_all(&self.nominal_t60.to_le_bytes())?;
        out.write_all(&(self.taps.len() as u32).to_le_bytes())?;
        for t in &self.taps {
            out.write_all(&t.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        if &b4 != RIR_MAGIC {
            return Err(Error::format("not an impulse response file (bad magic)"));
        }
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != RIR_VERSION {
            return Err(Error::format(format!("unsupported impulse response version {version}")));
        }
        r.read_exact(&mut b4)?;
        let sample_rate = u32::from_le_bytes(b4);
        r.read_exact(&mut b8)?;
        let t60 = f64::from_le_bytes(b8);
        r.read_exact(&mut b4)?;
        let n = u32::from_le_bytes(b4) as usize;
        let mut taps = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b8)?;
            taps.push(f64::from_le_bytes(b8));
        }
        RoomImpulseResponse::new(taps, sample_rate, t60)
    }
}

/// Options for [`synth_rir_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RirParams {
    pub t60: f64,
    pub sample_rate: u32,
    /// Seconds before the direct-path tap.
    pub direct_delay: f64,
    /// Direct-to-reverberant energy ratio of the generated response.
    pub drr_db: f64,
}

/// Exponentially decaying Gaussian noise after a unit direct tap, 0 dB DRR.
pub fn synth_rir(t60: f64, sample_rate: u32, direct_delay: f64, seed: u64) -> Result<RoomImpulseResponse> {
    synth_rir_with(
        &RirParams {
            t60,
            sample_rate,
            direct_delay,
            drr_db: 0.0,
        },
        seed,
    )
}

/// Tail `g[n] exp(-3 ln(10) n / (t60 sr))`, length `1.25 t60` after the
/// direct tap, scaled so the tail energy sits `drr_db` below the direct tap.
pub fn synth_rir_with(p: &RirParams, seed: u64) -> Result<RoomImpulseResponse> {
    if !(p.t60 > 0.0 && p.t60.is_finite()) {
        return Err(Error::invalid(format!("T60 must be positive, got {}", p.t60)));
    }
    if !(0.0..0.1).contains(&p.direct_delay) {
        return Err(Error::invalid(format!(
            "direct-path delay {} s outside [0, 0.1)",
            p.direct_delay
        )));
    }
    if p.sample_rate == 0 || !p.drr_db.is_finite() {
        return Err(Error::invalid("sample rate must be positive and DRR finite"));
    }
    let sr = p.sample_rate as f64;
    let delay = (p.direct_delay * sr).round() as usize;
    let body = (1.25 * p.t60 * sr).round().max(1.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let decay = -3.0 * std::f64::consts::LN_10 / (p.t60 * sr);
    let mut taps = vec![0.0; delay + body];
    taps[delay] = 1.0;
    for m in 1..body {
        let g: f64 = StandardNormal.sample(&mut rng);
        taps[delay + m] = g * (decay * m as f64).exp();
    }
    let tail: f64 = taps[delay + 1..].iter().map(|v| v * v).sum();
    if tail > 0.0 {
        let target = 10f64.powf(-p.drr_db / 10.0);
        let scale = (target / tail).sqrt();
        taps[delay + 1..].iter_mut().for_each(|v| *v *= scale);
    }
    let rir = RoomImpulseResponse::new(taps, p.sample_rate, p.t60)?;
    let est = estimate_t60(&rir)?;
    if (est - p.t60).abs() > T60_TOLERANCE * p.t60 {
        return Err(Error::numerical(format!(
            "generated response decays with T60 {est:.3} s, requested {:.3} s",
            p.t60
        )));
    }
    Ok(rir)
}

/// Schroeder energy decay curve in dB, 0 at the first tap.
pub fn energy_decay_curve(taps: &[f64]) -> Vec<f64> {
    let total: f64 = taps.iter().map(|v| v * v).sum();
    let mut acc = 0.0;
    let mut edc = vec![0.0; taps.len()];
    for (i, v) in taps.iter().enumerate().rev() {
        acc += v * v;
        edc[i] = if acc > 0.0 { 10.0 * (acc / total).log10() } else { f64::NEG_INFINITY };
    }
    edc
}

/// T60 from a least-squares line through the -5..-25 dB span of the decay
/// curve. Responses whose curve skips that span (a bare impulse) fall back
/// to extrapolating the first sample below -25 dB.
pub fn estimate_t60(rir: &RoomImpulseResponse) -> Result<f64> {
    let taps = rir.taps();
    if taps.iter().all(|v| *v == 0.0) {
        return Err(Error::invalid("cannot estimate T60 of an all-zero response"));
    }
    let sr = rir.sample_rate() as f64;
    let edc = energy_decay_curve(taps);
    let pts: Vec<(f64, f64)> = edc
        .iter()
        .enumerate()
        .filter(|(_, &e)| (-25.0..=-5.0).contains(&e))
        .map(|(i, &e)| (i as f64 / sr, e))
        .collect();
    if pts.len() < 2 {
        let idx = edc.iter().position(|e| *e < -25.0).unwrap_or(edc.len());
        return Ok(60.0 / 25.0 * idx as f64 / sr);
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let slope = sxy / sxx;
    if !(slope < 0.0) {
        return Err(Error::numerical("energy decay curve does not decay"));
    }
    Ok(60.0 / slope.abs())
}

const DIRECT_LIMIT: usize = 1 << 16;

/// Full linear convolution, in the time domain for small products and via
/// FFT otherwise.
pub fn convolve_full(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return Vec::new();
    }
    let out_len = x.len() + h.len() - 1;
    if x.len() * h.len() <= DIRECT_LIMIT {
        let mut y = vec![0.0; out_len];
        for (i, a) in x.iter().enumerate() {
            for (j, b) in h.iter().enumerate() {
                y[i + j] += a * b;
            }
        }
        return y;
    }
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let pad = |v: &[f64]| {
        let mut b: Vec<Complex<f64>> = v.iter().map(|&s| Complex::new(s, 0.0)).collect();
        b.resize(n, Complex::new(0.0, 0.0));
        b
    };
    let mut a = pad(x);
    let mut b = pad(h);
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (u, v) in a.iter_mut().zip(&b) {
        *u *= v;
    }
    inv.process(&mut a);
    let scale = 1.0 / n as f64;
    a[..out_len].iter().map(|c| c.re * scale).collect()
}

/// Linear convolution truncated to the input length.
pub fn convolve_raw(w: &Waveform, rir: &RoomImpulseResponse) -> Result<Vec<f64>> {
    if w.sample_rate() != rir.sample_rate() {
        return Err(Error::invalid(format!(
            "waveform at {} Hz, impulse response at {} Hz",
            w.sample_rate(),
            rir.sample_rate()
        )));
    }
    let mut y = convolve_full(w.samples(), rir.taps());
    y.resize(w.len(), 0.0);
    Ok(y)
}

/// Reverberant copy of `w`, same length, rescaled to a 0.99 peak if any
/// sample would exceed full scale.
pub fn convolve(w: &Waveform, rir: &RoomImpulseResponse) -> Result<Waveform> {
    let mut y = convolve_raw(w, rir)?;
    let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 1.0 {
        let g = 0.99 / peak;
        y.iter_mut().for_each(|v| *v *= g);
    }
    Waveform::new(y, w.sample_rate())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::SAMPLE_RATE;
    use rand::Rng;

    fn rir(taps: Vec<f64>) -> RoomImpulseResponse {
        RoomImpulseResponse::new(taps, SAMPLE_RATE, 0.0).unwrap()
    }

    #[test]
    fn seven_tenths_room_t60() {
        let r = synth_rir(0.7, SAMPLE_RATE, 0.0, 1).unwrap();
        let est = estimate_t60(&r).unwrap();
        assert!((0.63..=0.77).contains(&est), "{est}");
    }

    #[test]
    fn length_and_determinism() {
        let r = synth_rir(0.05, SAMPLE_RATE, 0.0, 4).unwrap();
        assert_eq!(r.len(), 1000);
        assert_eq!(r.taps()[0], 1.0);
        let again = synth_rir(0.05, SAMPLE_RATE, 0.0, 4).unwrap();
        assert_eq!(r, again);
        let delayed = synth_rir(0.05, SAMPLE_RATE, 0.01, 4).unwrap();
        assert_eq!(delayed.taps()[160], 1.0);
        assert!(delayed.taps()[..160].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn drr_is_zero_db() {
        let r = synth_rir(0.4, SAMPLE_RATE, 0.0, 2).unwrap();
        let tail: f64 = r.taps()[1..].iter().map(|v| v * v).sum();
        assert!((tail - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(synth_rir(0.0, SAMPLE_RATE, 0.0, 1).is_err());
        assert!(synth_rir(-1.0, SAMPLE_RATE, 0.0, 1).is_err());
        assert!(synth_rir(0.5, SAMPLE_RATE, 0.2, 1).is_err());
        assert!(estimate_t60(&rir(vec![0.0; 10])).is_err());
    }

    #[test]
    fn ideal_exponential_inverts_estimator() {
        let sr = SAMPLE_RATE as f64;
        let taps: Vec<f64> = (0..16000)
            .map(|n| (-3.0 * std::f64::consts::LN_10 * n as f64 / (0.5 * sr)).exp())
            .collect();
        let est = estimate_t60(&rir(taps)).unwrap();
        assert!((est - 0.5).abs() < 0.005, "{est}");
    }

    #[test]
    fn unit_impulse_is_degenerate() {
        let mut taps = vec![0.0; 100];
        taps[0] = 1.0;
        assert!(estimate_t60(&rir(taps)).unwrap() < 0.01);
    }

    #[test]
    fn t60_over_seeds_and_rooms() {
        for &t in &[0.2, 0.4, 0.7, 1.0] {
            let mut sum = 0.0;
            for seed in 1..=20 {
                let est = estimate_t60(&synth_rir(t, SAMPLE_RATE, 0.0, seed).unwrap()).unwrap();
                assert!(est >= 0.9 * t && est <= 1.1 * t, "t60 {t} seed {seed}: {est}");
                sum += est;
            }
            if t == 0.7 {
                let mean = sum / 20.0;
                assert!((0.65..=0.75).contains(&mean), "{mean}");
            }
        }
    }

    #[test]
    fn identity_and_delay() {
        let x = Waveform::new(vec![0.1, -0.2, 0.3, 0.4, -0.5], SAMPLE_RATE).unwrap();
        assert_eq!(convolve(&x, &rir(vec![1.0])).unwrap(), x);
        let y = convolve(&x, &rir(vec![0.0, 0.0, 1.0])).unwrap();
        assert_eq!(y.samples(), &[0.0, 0.0, 0.1, -0.2, 0.3]);
        let other = RoomImpulseResponse::new(vec![1.0], 8000, 0.0).unwrap();
        assert!(convolve(&x, &other).is_err());
    }

    #[test]
    fn fft_path_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x: Vec<f64> = (0..1000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..100).map(|_| rng.gen_range(-1.0..1.0)).collect();
        assert!(x.len() * h.len() > DIRECT_LIMIT);
        let w = Waveform::new(x.clone(), SAMPLE_RATE).unwrap();
        let y = convolve_raw(&w, &rir(h.clone())).unwrap();
        assert_eq!(y.len(), x.len());
        for (n, v) in y.iter().enumerate() {
            let direct: f64 = (0..h.len()).filter(|&k| k <= n).map(|k| h[k] * x[n - k]).sum();
            assert!((v - direct).abs() < 1e-12, "sample {n}");
        }
    }

    #[test]
    fn linear_without_clipping() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..4000).map(|_| rng.gen_range(-0.01..0.01)).collect();
        let r = synth_rir(0.3, SAMPLE_RATE, 0.0, 3).unwrap();
        let a = convolve(&Waveform::new(x.clone(), SAMPLE_RATE).unwrap(), &r).unwrap();
        let scaled: Vec<f64> = x.iter().map(|v| 0.5 * v).collect();
        let b = convolve(&Waveform::new(scaled, SAMPLE_RATE).unwrap(), &r).unwrap();
        for (u, v) in a.samples().iter().zip(b.samples()) {
            assert!((0.5 * u - v).abs() < 1e-15);
        }
    }

    #[test]
    fn clipping_output_is_normalized() {
        let x = Waveform::new(vec![0.9; 100], SAMPLE_RATE).unwrap();
        let y = convolve(&x, &rir(vec![1.0, 1.0])).unwrap();
        assert!((y.peak() - 0.99).abs() < 1e-12);
        assert_eq!(y.len(), 100);
    }

    #[test]
    fn container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("room.rir");
        let r = synth_rir(0.3, SAMPLE_RATE, 0.002, 9).unwrap();
        r.save(&path).unwrap();
        assert_eq!(RoomImpulseResponse::load(&path).unwrap(), r);
    }
}
