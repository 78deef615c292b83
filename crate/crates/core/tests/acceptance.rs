//! Acceptance suite: one test per criterion, each printing a single
//! `PASS`/`FAIL` line with the measured value and its tolerance.
//!
//! The experiment-scale criteria (6 and 7) share one set of runs on the
//! default 20-speaker corpus; run with `--nocapture` to see the lines.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use dereverb_core::dsp::{mel_filterbank, minmax, stft_magnitude, SAMPLE_RATE};
use dereverb_core::harness::{build_corpus, run_experiment, run_seed, ExperimentConfig, SeedRun, System, MANIFEST_FILE};
use dereverb_core::nnet::{grad_check, loss_dual};
use dereverb_core::pitch::track;
use dereverb_core::reverb::{convolve_full, estimate_t60, synth_rir};
use dereverb_core::sv::compute_eer;
use dereverb_core::{FrameParams, Matrix, PitchConfig, TrialScores, Waveform};

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "acceptance {id} [{name}]: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

#[test]
fn criterion_1_gradient_oracle() {
    let start = Instant::now();
    let report = grad_check(7).unwrap();
    let elapsed = start.elapsed();
    let pass = report.max_rel_error < 1e-4 && elapsed < Duration::from_secs(30);
    verdict(
        1,
        "gradient check",
        pass,
        &format!(
            "max relative error {:.3e} < 1e-4 over {} parameters, worst {}, {:.2?} < 30 s",
            report.max_rel_error, report.parameters_checked, report.worst_tensor, elapsed
        ),
    );
}

/// Mean of squared differences over masked-in frames and every dimension.
fn reference_mse(pred: &[Matrix], tgt: &[Matrix], masks: &[Vec<bool>]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((p, y), m) in pred.iter().zip(tgt).zip(masks) {
        for t in 0..p.rows() {
            if m[t] {
                for d in 0..p.cols() {
                    sum += (p[(t, d)] - y[(t, d)]).powi(2);
                    count += 1;
                }
            }
        }
    }
    sum / count as f64
}

#[test]
fn criterion_2_weighted_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for case in 0..20 {
        let w1 = if case == 0 { 0.5 } else { rng.gen_range(0.0..=1.0) };
        let weights = (w1, 1.0 - w1);
        let batch = rng.gen_range(1..=4);
        let dim2 = [1, 31, 100][rng.gen_range(0..3)];
        let mut mats = |rows: usize, cols: usize| {
            Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-3.0..3.0)).collect())
        };
        let lens: Vec<usize> = (0..batch).map(|_| 1 + case % 7 + batch).collect();
        let p1: Vec<Matrix> = lens.iter().map(|&t| mats(t, 31)).collect();
        let y1: Vec<Matrix> = lens.iter().map(|&t| mats(t, 31)).collect();
        let p2: Vec<Matrix> = lens.iter().map(|&t| mats(t, dim2)).collect();
        let y2: Vec<Matrix> = lens.iter().map(|&t| mats(t, dim2)).collect();
        let masks: Vec<Vec<bool>> = lens
            .iter()
            .map(|&t| (0..t).map(|i| i == 0 || rng.gen_bool(0.7)).collect())
            .collect();
        let got = loss_dual(&p1, &y1, Some((&p2, &y2)), &masks, weights).unwrap();
        let want = weights.0 * reference_mse(&p1, &y1, &masks) + weights.1 * reference_mse(&p2, &y2, &masks);
        worst = worst.max((got - want).abs());
    }
    verdict(
        2,
        "weighted dual loss",
        worst <= 1e-12,
        &format!("max |loss - (w1 MSE1 + w2 MSE2)| {worst:.2e} <= 1e-12 over 20 cases incl. (0.5, 0.5)"),
    );
}

fn direct_dft_magnitude(x: &[f64], n: usize) -> Vec<f64> {
    (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, v) in x.iter().enumerate() {
                let ang = -2.0 * PI * (k * i) as f64 / n as f64;
                re += v * ang.cos();
                im += v * ang.sin();
            }
            re.hypot(im)
        })
        .collect()
}

/// Threshold sweep on an even grid; the rate is read where |FAR - FRR| is
/// smallest.
fn dense_sweep_eer(s: &TrialScores, steps: usize) -> f64 {
    let mut tgt = s.target.clone();
    let mut non = s.nontarget.clone();
    tgt.sort_by(f64::total_cmp);
    non.sort_by(f64::total_cmp);
    let lo = tgt[0].min(non[0]) - 1e-9;
    let hi = tgt[tgt.len() - 1].max(non[non.len() - 1]) + 1e-9;
    let mut best = (f64::INFINITY, 0.0);
    for i in 0..=steps {
        let theta = lo + (hi - lo) * i as f64 / steps as f64;
        let far = (non.len() - non.partition_point(|x| *x < theta)) as f64 / non.len() as f64;
        let frr = tgt.partition_point(|x| *x < theta) as f64 / tgt.len() as f64;
        if (far - frr).abs() < best.0 {
            best = ((far - frr).abs(), 0.5 * (far + frr));
        }
    }
    best.1
}

/// Triangles rebuilt from the mel scale as the minimum of the two slopes.
fn filter_table(n_mel: usize, fft: usize, sr: f64) -> Vec<Vec<f64>> {
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let step = mel(sr / 2.0) / (n_mel as f64 + 1.0);
    let hz: Vec<f64> = (0..n_mel + 2)
        .map(|i| 700.0 * (10f64.powf(i as f64 * step / 2595.0) - 1.0))
        .collect();
    (0..n_mel)
        .map(|m| {
            (0..=fft / 2)
                .map(|k| {
                    let f = k as f64 * sr / fft as f64;
                    let up = (f - hz[m]) / (hz[m + 1] - hz[m]);
                    let down = (hz[m + 2] - f) / (hz[m + 2] - hz[m + 1]);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

#[test]
fn criterion_3_dsp_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    let mut stft_err = 0.0f64;
    for _ in 0..50 {
        let frame: Vec<f64> = (0..400).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fast = stft_magnitude(std::slice::from_ref(&frame), 512).unwrap();
        let slow = direct_dft_magnitude(&frame, 512);
        let scale = slow.iter().fold(0.0f64, |m, v| m.max(*v));
        for (a, b) in fast.row(0).iter().zip(&slow) {
            stft_err = stft_err.max((a - b).abs() / scale);
        }
    }

    let x: Vec<f64> = (0..3000).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let h: Vec<f64> = (0..400).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y = convolve_full(&x, &h);
    let mut conv_err = 0.0f64;
    for (n, v) in y.iter().enumerate() {
        let lo = n.saturating_sub(x.len() - 1);
        let direct: f64 = (lo..h.len().min(n + 1)).map(|k| h[k] * x[n - k]).sum();
        conv_err = conv_err.max((v - direct).abs());
    }

    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut eer_err = 0.0f64;
    for seed in 0..3 {
        let mut r = ChaCha8Rng::seed_from_u64(100 + seed);
        let scores = TrialScores::new(
            (0..1000).map(|_| normal.sample(&mut r) + 1.5).collect(),
            (0..1000).map(|_| normal.sample(&mut r)).collect(),
        );
        eer_err = eer_err.max((compute_eer(&scores).unwrap() - dense_sweep_eer(&scores, 200_000)).abs());
    }

    let fb = mel_filterbank(31, 512, SAMPLE_RATE);
    let table = filter_table(31, 512, SAMPLE_RATE as f64);
    let mut mel_err = 0.0f64;
    for (m, row) in table.iter().enumerate() {
        for (k, v) in row.iter().enumerate() {
            mel_err = mel_err.max((fb[(m, k)] - v).abs());
        }
    }

    let scaled = minmax(&[0.0, 5.0, 10.0]).unwrap();
    let minmax_ok = scaled == [0.0, 0.5, 1.0];

    let pass = stft_err < 1e-9 && conv_err < 1e-12 && eer_err < 5e-3 && mel_err < 1e-10 && minmax_ok;
    verdict(
        3,
        "signal processing oracles",
        pass,
        &format!(
            "stft rel {stft_err:.1e} < 1e-9, convolution {conv_err:.1e} < 1e-12, EER {eer_err:.1e} < 5e-3, \
             filterbank {mel_err:.1e} < 1e-10, min-max [0,5,10] -> {scaled:?}"
        ),
    );
}

#[test]
fn criterion_4_impulse_response_t60() {
    let start = Instant::now();
    let estimates: Vec<f64> = (0..20)
        .map(|seed| estimate_t60(&synth_rir(0.7, SAMPLE_RATE, 0.0, seed).unwrap()).unwrap())
        .collect();
    let elapsed = start.elapsed();
    let lo = estimates.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = estimates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pass = lo >= 0.63 && hi <= 0.77 && elapsed < Duration::from_secs(10);
    verdict(
        4,
        "impulse response T60",
        pass,
        &format!("20 seeds estimate [{lo:.4}, {hi:.4}] within [0.63, 0.77], {elapsed:.2?} < 10 s"),
    );
}

#[test]
fn criterion_5_pitch_accuracy() {
    let p = FrameParams::default();
    let cfg = PitchConfig::default();
    let n = SAMPLE_RATE as usize;
    let tone: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            0.3 * (1..=10).map(|h| (2.0 * PI * h as f64 * 120.0 * t).sin() / h as f64).sum::<f64>()
        })
        .collect();
    let tr = track(&Waveform::new(tone, SAMPLE_RATE).unwrap(), &p, &cfg).unwrap();
    let interior = &tr.f0[3..tr.len() - 3];
    let hits = interior.iter().filter(|f| (**f - 120.0).abs() <= 3.0).count();
    let fraction = hits as f64 / interior.len() as f64;
    let silent = track(&Waveform::silence(n, SAMPLE_RATE), &p, &cfg).unwrap();
    let pass = fraction >= 0.9 && silent.voiced_fraction() == 0.0;
    verdict(
        5,
        "pitch accuracy",
        pass,
        &format!(
            "120 Hz: {:.1}% of interior frames within 3 Hz (>= 90%), silence: {:.1}% voiced (= 0%)",
            100.0 * fraction,
            100.0 * silent.voiced_fraction()
        ),
    );
}

struct ExperimentRuns {
    runs: Vec<SeedRun>,
    /// Wall time of the first seed, which trains every network system.
    first_seed_time: Duration,
}

/// Seed 1 with every system, seeds 2 and 3 with the baseline and the
/// one-label network, all on the default corpus and network schedule.
fn experiment_runs() -> &'static ExperimentRuns {
    static RUNS: OnceLock<ExperimentRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let full = ExperimentConfig::default();
        let reduced = ExperimentConfig {
            systems: vec![System::Baseline, System::OneLabel],
            ..ExperimentConfig::default()
        };
        let mut runs = Vec::new();
        let mut first_seed_time = Duration::ZERO;
        for seed in [1u64, 2, 3] {
            let start = Instant::now();
            let cfg = if seed == 1 { &full } else { &reduced };
            let corpus = dir.path().join(format!("seed-{seed}"));
            build_corpus(&corpus, &cfg.corpus, seed).unwrap();
            runs.push(run_seed(&corpus.join(MANIFEST_FILE), cfg, false).unwrap());
            if seed == 1 {
                first_seed_time = start.elapsed();
            }
        }
        ExperimentRuns { runs, first_seed_time }
    })
}

#[test]
fn criterion_6_enhancement_reduces_mse() {
    let runs = experiment_runs();
    let mse = &runs.runs[0].mfb_mse;
    let mut pass = runs.first_seed_time < Duration::from_secs(15 * 60);
    let mut parts = Vec::new();
    for system in [System::OneLabel, System::DualPitch, System::DualSpec] {
        let name = system.to_string();
        match mse.reduction_percent.get(&name) {
            Some(r) => {
                pass &= *r >= 20.0;
                parts.push(format!("{name} {:.3} ({r:.1}% lower)", mse.enhanced[&name]));
            }
            None => {
                pass = false;
                parts.push(format!("{name} absent"));
            }
        }
    }
    verdict(
        6,
        "enhancement lowers log-Mel error",
        pass,
        &format!(
            "held-out MSE over {} utterances: reverberant {:.3}, {}; each >= 20% lower; {:.1?} < 15 min",
            mse.utterances,
            mse.reverberant,
            parts.join(", "),
            runs.first_seed_time
        ),
    );
}

#[test]
fn criterion_7_condition_ordering() {
    let runs = &experiment_runs().runs;
    let row = |r: &SeedRun, s: System| r.eer.get(&s.to_string()).copied();
    let base: Vec<_> = runs.iter().map(|r| row(r, System::Baseline).unwrap()).collect();
    let n = base.len() as f64;
    let mean = |f: fn(&dereverb_core::harness::EerRow) -> f64| base.iter().map(f).sum::<f64>() / n;
    let (ccc, ccr, rrr) = (mean(|e| e.ccc), mean(|e| e.ccr), mean(|e| e.rrr));
    let one_label_ccr: Vec<Option<f64>> = runs.iter().map(|r| row(r, System::OneLabel).map(|e| e.ccr)).collect();
    let improved = one_label_ccr
        .iter()
        .zip(&base)
        .filter(|(e, b)| e.is_some_and(|v| v < b.ccr))
        .count();
    let a = ccr > ccc;
    let b = improved >= 2;
    let c = rrr <= ccr;
    let per_seed: Vec<String> = one_label_ccr
        .iter()
        .zip(&base)
        .zip(runs)
        .map(|((e, b), r)| match e {
            Some(v) => format!("seed {}: {v:.2} vs {:.2}", r.seed, b.ccr),
            None => format!("seed {}: absent", r.seed),
        })
        .collect();
    if let (Some(one), Some(pitch), Some(spec)) = (
        row(&runs[0], System::OneLabel),
        row(&runs[0], System::DualPitch),
        row(&runs[0], System::DualSpec),
    ) {
        println!(
            "acceptance 7 [informational]: seed 1 AVG EER one-label {:.2}, dual-pitch {:.2}, dual-spec {:.2}",
            one.avg, pitch.avg, spec.avg
        );
    }
    verdict(
        7,
        "condition ordering",
        a && b && c,
        &format!(
            "(a) baseline CCR {ccr:.2}% > CCC {ccc:.2}%: {a}; (b) one-label CCR below baseline on {improved}/3 seeds \
             (need 2) [{}]: {b}; (c) baseline RRR {rrr:.2}% <= CCR {ccr:.2}%: {c}",
            per_seed.join("; ")
        ),
    );
}

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.corpus.n_speakers = 6;
    cfg.corpus.utts_per_speaker = 4;
    cfg.corpus.enroll_per_speaker = 3;
    cfg.corpus.train_fraction = 0.5;
    cfg.corpus.duration = 1.0;
    cfg.seeds = vec![1, 2];
    cfg.network.n_layers = 1;
    cfg.network.cells = 8;
    cfg.network.epochs = 2;
    cfg.network.spec_hidden = vec![8];
    cfg.ubm_components = 8;
    cfg.em_iterations = 3;
    cfg
}

fn report_bytes(cfg: &ExperimentConfig, dir: &Path) -> Vec<u8> {
    run_experiment(cfg, dir).unwrap().to_json().unwrap().into_bytes()
}

#[test]
fn criterion_8_deterministic_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let first = report_bytes(&cfg, &dir.path().join("a"));
    let second = report_bytes(&cfg, &dir.path().join("b"));
    verdict(
        8,
        "deterministic report",
        first == second,
        &format!(
            "two runs with seeds {:?} and systems {:?}: {} and {} bytes, identical: {}",
            cfg.seeds,
            cfg.systems.iter().map(ToString::to_string).collect::<Vec<_>>(),
            first.len(),
            second.len(),
            first == second
        ),
    );
}
