use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dereverb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dereverb"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn arg(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn write_separated_scores(path: &Path) {
    let mut text = String::from("test_utt_id,claimed_speaker,true_speaker,score\n");
    for i in 0..4 {
        for j in 0..4 {
            let score = if i == j { 5.0 + i as f64 } else { -1.0 - j as f64 };
            text += &format!("u{i},s{j},s{i},{score}\n");
        }
    }
    fs::write(path, text).unwrap();
}

#[test]
fn grad_check_seven_passes() {
    let o = dereverb(&["grad-check", "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("max relative error"));
}

#[test]
fn eer_of_separated_scores_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("scores.csv");
    write_separated_scores(&scores);
    let o = dereverb(&["eer", "--scores", arg(&scores)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "0.000");
}

#[test]
fn eer_reads_settings_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("scores.csv");
    write_separated_scores(&scores);
    let cfg = dir.path().join("eer.cfg");
    fs::write(&cfg, format!("# scoring\nscores = {}\n", scores.display())).unwrap();
    let o = dereverb(&["eer", "--config", arg(&cfg)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "0.000");
}

#[test]
fn flag_overrides_config_value() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("scores.csv");
    write_separated_scores(&scores);
    let cfg = dir.path().join("eer.cfg");
    fs::write(&cfg, "scores = /nonexistent/scores.csv\n").unwrap();
    let o = dereverb(&["eer", "--config", arg(&cfg), "--scores", arg(&scores)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn unknown_flag_exits_one_with_usage() {
    let o = dereverb(&["eer", "--bogus", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn unknown_config_key_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "sedd = 7\n").unwrap();
    let o = dereverb(&["grad-check", "--config", arg(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("sedd"));
}

#[test]
fn missing_input_exits_one() {
    let o = dereverb(&["eer"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("scores"));
}

#[test]
fn malformed_scores_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("scores.csv");
    fs::write(&scores, "test_utt_id,claimed_speaker,true_speaker,score\nu0,s0,s0\n").unwrap();
    let o = dereverb(&["eer", "--scores", arg(&scores)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let o = dereverb(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    for cmd in [
        "synth-corpus",
        "make-rir",
        "reverb",
        "featurize",
        "pitch",
        "train",
        "enhance",
        "train-ubm",
        "enroll",
        "score",
        "eer",
        "experiment",
        "grad-check",
    ] {
        assert!(stdout(&o).contains(cmd), "help lacks {cmd}");
    }
}

#[test]
fn signal_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = d.join("corpus");
    let o = dereverb(&[
        "synth-corpus",
        "--out",
        arg(&corpus),
        "--seed",
        "3",
        "--n-speakers",
        "4",
        "--utts-per-speaker",
        "2",
        "--enroll-per-speaker",
        "1",
        "--train-fraction",
        "0.5",
        "--duration",
        "1.0",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let clean = corpus.join("clean/spk000_u00.wav");
    assert!(clean.is_file());

    let rir = d.join("rir.bin");
    let o = dereverb(&["make-rir", "--out", arg(&rir), "--t60", "0.4", "--seed", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let t60: f64 = stdout(&o).split("T60 ").nth(1).unwrap().split(' ').next().unwrap().parse().unwrap();
    assert!((0.36..=0.44).contains(&t60), "{t60}");

    let wet = d.join("wet.wav");
    let o = dereverb(&["reverb", "--input", arg(&clean), "--rir", arg(&rir), "--out", arg(&wet)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    for kind in ["mfb31", "spec100", "mfcc39", "pitch1"] {
        let out = d.join(format!("{kind}.feat"));
        let o = dereverb(&["featurize", "--input", arg(&wet), "--out", arg(&out), "--kind", kind]);
        assert_eq!(o.status.code(), Some(0), "{kind}: {}", stderr(&o));
        assert!(out.is_file());
    }

    let f0 = d.join("f0.csv");
    let o = dereverb(&["pitch", "--input", arg(&clean), "--out", arg(&f0)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(fs::read_to_string(&f0).unwrap().starts_with("frame_index,f0_hz"));

    let o = dereverb(&["featurize", "--input", arg(&wet), "--out", arg(&f0), "--kind", "cepstrum"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn verification_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = d.join("corpus");
    let o = dereverb(&[
        "synth-corpus",
        "--out",
        arg(&corpus),
        "--seed",
        "5",
        "--n-speakers",
        "4",
        "--utts-per-speaker",
        "3",
        "--enroll-per-speaker",
        "2",
        "--train-fraction",
        "0.5",
        "--duration",
        "1.0",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let manifest = corpus.join("manifest.json");

    let ckpt = d.join("net.ckpt");
    let history = d.join("history.csv");
    let net_cfg = d.join("net.cfg");
    fs::write(&net_cfg, "layers = 1\ncells = 4\nepochs = 2\nsecondary = pitch\n").unwrap();
    let o = dereverb(&[
        "train",
        "--config",
        arg(&net_cfg),
        "--manifest",
        arg(&manifest),
        "--out",
        arg(&ckpt),
        "--history",
        arg(&history),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&history).unwrap().lines().count(), 4);

    let enhanced = d.join("enhanced.feat");
    let wet = corpus.join("reverb/spk000_u00.wav");
    let o = dereverb(&["enhance", "--checkpoint", arg(&ckpt), "--input", arg(&wet), "--out", arg(&enhanced)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let ubm = d.join("ubm.gmm");
    let models = d.join("models");
    let scores = d.join("scores.csv");
    for source in ["clean", "enhanced"] {
        let src = ["--source", source, "--checkpoint", arg(&ckpt)];
        let mut args = vec!["train-ubm", "--manifest", arg(&manifest), "--out", arg(&ubm)];
        args.extend(["--components", "4", "--em-iterations", "3", "--seed", "1"]);
        args.extend(src);
        let o = dereverb(&args);
        assert_eq!(o.status.code(), Some(0), "{source}: {}", stderr(&o));

        let mut args = vec!["enroll", "--manifest", arg(&manifest), "--ubm", arg(&ubm), "--out", arg(&models)];
        args.extend(src);
        let o = dereverb(&args);
        assert_eq!(o.status.code(), Some(0), "{source}: {}", stderr(&o));
        assert!(models.join("spk002.gmm").is_file());

        let mut args = vec!["score", "--manifest", arg(&manifest), "--ubm", arg(&ubm)];
        args.extend(["--models", arg(&models), "--out", arg(&scores)]);
        args.extend(src);
        let o = dereverb(&args);
        assert_eq!(o.status.code(), Some(0), "{source}: {}", stderr(&o));
        assert_eq!(fs::read_to_string(&scores).unwrap().lines().count(), 1 + 2 * 2);

        let o = dereverb(&["eer", "--scores", arg(&scores)]);
        assert_eq!(o.status.code(), Some(0), "{source}: {}", stderr(&o));
        let eer: f64 = stdout(&o).trim().parse().unwrap();
        assert!((0.0..=1.0).contains(&eer));
    }

    let o = dereverb(&["train-ubm", "--manifest", arg(&manifest), "--out", arg(&ubm), "--source", "telephone"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn experiment_report_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("exp.cfg");
    fs::write(
        &cfg,
        "n_speakers = 4\nutts_per_speaker = 3\nenroll_per_speaker = 2\ntrain_fraction = 0.5\nduration = 1.0\n\
         layers = 1\ncells = 4\nepochs = 1\nubm_components = 4\nem_iterations = 2\n",
    )
    .unwrap();
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let work = d.join(run);
        let out = d.join(format!("{run}.json"));
        let o = dereverb(&[
            "experiment",
            "--config",
            arg(&cfg),
            "--work-dir",
            arg(&work),
            "--out",
            arg(&out),
            "--seeds",
            "1",
            "--systems",
            "baseline,one-label",
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(stdout(&o).contains("baseline"));
        assert!(out.with_extension("txt").is_file());
        reports.push(fs::read(&out).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}
