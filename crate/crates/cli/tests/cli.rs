use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use scorealign::audio::{read_wav, write_wav};
use scorealign::dataset::export_csv;
use scorealign::experiments::{render_performance, SyntheticSpec, TempoWarp};
use scorealign::models::{write_model, LinearModel};
use scorealign::score::{encode_midi, Instrument};
use scorealign::{AudioBuffer, FeatureKind, LabelRecord, LabelSet, Model, SampleFormat, Score};
use tempfile::TempDir;

fn scorealign(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scorealign"))
        .args(["--threads", "1"])
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout_value(out: &Output, key: &str) -> f64 {
    let text = String::from_utf8_lossy(&out.stdout);
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("{key} missing from output:\n{text}"))
        .split_whitespace()
        .next()
        .unwrap()
        .parse()
        .unwrap()
}

fn melody() -> Score {
    let notes: Vec<(u8, Instrument, f64, f64)> = [60u8, 64, 67, 72, 67, 64, 62, 65, 69, 71, 60, 55]
        .iter()
        .enumerate()
        .map(|(i, &n)| (n, Instrument::Program(0), i as f64, 1.0))
        .collect();
    Score::from_beats(120.0, &notes).unwrap()
}

fn setup() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("score.mid"), encode_midi(&melody())).unwrap();
    dir
}

#[test]
fn synth_covers_every_note() {
    let dir = setup();
    let out = scorealign(dir.path(), &["synth", "score.mid", "perf.wav"]);
    assert!(out.status.success());
    let audio = read_wav(dir.path().join("perf.wav")).unwrap();
    assert!(audio.duration_s() >= melody().end_seconds());
}

#[test]
fn empty_midi_gives_empty_wav() {
    let dir = tempfile::tempdir().unwrap();
    let empty = Score::from_beats(120.0, &[]).unwrap();
    fs::write(dir.path().join("empty.mid"), encode_midi(&empty)).unwrap();
    let out = scorealign(dir.path(), &["synth", "empty.mid", "empty.wav"]);
    assert_eq!(out.status.code(), Some(0));
    let bytes = fs::read(dir.path().join("empty.wav")).unwrap();
    assert_eq!(&bytes[36..40], b"data");
    assert_eq!(u32::from_le_bytes(bytes[40..44].try_into().unwrap()), 0);
}

#[test]
fn corrupt_midi_is_a_format_error() {
    let dir = setup();
    let mut bytes = fs::read(dir.path().join("score.mid")).unwrap();
    bytes.truncate(30);
    fs::write(dir.path().join("bad.mid"), bytes).unwrap();
    let out = scorealign(dir.path(), &["synth", "bad.mid", "x.wav"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("offset"));
}

#[test]
fn missing_input_is_an_io_error() {
    let dir = setup();
    let out = scorealign(dir.path(), &["align", "missing.wav", "score.mid", "labels.csv"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn bad_config_key_is_a_format_error() {
    let dir = setup();
    let out = scorealign(dir.path(), &["--set", "align.windw=1024", "export", "score.mid", "l.csv"]);
    assert_eq!(out.status.code(), Some(2));
    fs::write(dir.path().join("run.toml"), "[synth]\nharmonics = \"many\"\n").unwrap();
    let out = scorealign(dir.path(), &["--config", "run.toml", "export", "score.mid", "l.csv"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn self_alignment_lands_on_score_times() {
    let dir = setup();
    assert!(scorealign(dir.path(), &["synth", "score.mid", "perf.wav"]).status.success());
    let out = scorealign(dir.path(), &["align", "perf.wav", "score.mid", "labels.csv", "--report", "path.csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout_value(&out, "median_onset_shift_s") < 0.012);
    assert!(stdout_value(&out, "total_cost").is_finite());
    let report = fs::read_to_string(dir.path().join("path.csv")).unwrap();
    assert!(report.starts_with("score_frame,performance_frame,cost"));
    assert!(report.contains("# total_cost,"));
}

#[test]
fn half_tempo_performance_reports_ratio_two() {
    let dir = setup();
    let spec = SyntheticSpec {
        tempo_warp: TempoWarp::Constant { ratio: 2.0 },
        ..SyntheticSpec::default()
    };
    let perf = render_performance(&melody(), &spec).unwrap();
    write_wav(&perf.audio, dir.path().join("slow.wav"), SampleFormat::Float32).unwrap();
    let out = scorealign(dir.path(), &["align", "slow.wav", "score.mid", "labels.csv"]);
    assert!(out.status.success());
    let ratio = stdout_value(&out, "mean_tempo_ratio");
    assert!((1.9..=2.1).contains(&ratio), "{ratio}");
}

#[test]
fn validate_with_no_labels_copies_audio() {
    let dir = setup();
    assert!(scorealign(dir.path(), &["synth", "score.mid", "perf.wav"]).status.success());
    export_csv(&LabelSet::default(), dir.path().join("none.csv")).unwrap();
    let out = scorealign(dir.path(), &["validate", "perf.wav", "none.csv", "mixed.wav"]);
    assert!(out.status.success());
    assert_eq!(stdout_value(&out, "clipped_samples"), 0.0);
    assert_eq!(
        fs::read(dir.path().join("perf.wav")).unwrap(),
        fs::read(dir.path().join("mixed.wav")).unwrap()
    );
}

#[test]
fn validate_reports_every_saturated_sample() {
    let dir = setup();
    assert!(scorealign(dir.path(), &["synth", "score.mid", "perf.wav"]).status.success());
    assert!(scorealign(dir.path(), &["export", "score.mid", "labels.csv"]).status.success());
    let out = scorealign(dir.path(), &["--set", "validate.gain=0.8", "validate", "perf.wav", "labels.csv", "mixed.wav"]);
    assert!(out.status.success());
    let input = read_wav(dir.path().join("perf.wav")).unwrap();
    let mixed = read_wav(dir.path().join("mixed.wav")).unwrap();
    assert_eq!(mixed.len(), input.len());
    let saturated = mixed.samples().iter().filter(|s| s.abs() == 1.0).count();
    assert!(saturated > 0);
    assert_eq!(stdout_value(&out, "clipped_samples"), saturated as f64);
}

#[test]
fn featurize_and_segments_write_their_files() {
    let dir = setup();
    assert!(scorealign(dir.path(), &["synth", "score.mid", "perf.wav"]).status.success());
    assert!(scorealign(dir.path(), &["export", "score.mid", "labels.csv"]).status.success());
    let out = scorealign(dir.path(), &["featurize", "perf.wav", "f.bin", "--kind", "relugram", "--window", "1024"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_value(&out, "dims"), 513.0);
    let out = scorealign(dir.path(), &["segments", "perf.wav", "labels.csv", "seg.csv"]);
    assert!(out.status.success());
    let rows = fs::read_to_string(dir.path().join("seg.csv")).unwrap().lines().count() - 1;
    assert_eq!(rows as f64, stdout_value(&out, "segments"));
    assert!(rows > 100);
}

#[test]
fn training_writes_model_and_per_epoch_trace() {
    let dir = setup();
    assert!(scorealign(dir.path(), &["synth", "score.mid", "perf.wav"]).status.success());
    assert!(scorealign(dir.path(), &["export", "score.mid", "labels.csv"]).status.success());
    let out = scorealign(
        dir.path(),
        &["--set", "train.epochs=4", "--set", "train.learning_rate=0.5", "train", "perf.wav", "labels.csv", "m.nmdl"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trace = fs::read_to_string(dir.path().join("m.nmdl.loss.csv")).unwrap();
    assert_eq!(trace.lines().count(), 5);
    let out = scorealign(dir.path(), &["eval", "m.nmdl", "perf.wav", "labels.csv", "report.csv", "--poly", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = String::from_utf8_lossy(&out.stdout);
    assert!(summary.contains("subset: mono"));
    for key in ["mirex_acc", "mirex_e_tot", "mirex_e_sub", "mirex_e_miss", "mirex_e_fa"] {
        assert!(summary.contains(key), "{key}");
    }
    assert!(dir.path().join("report.csv.pr.txt").exists());
}

#[test]
fn divergent_learning_rate_exits_numerical() {
    let dir = setup();
    assert!(scorealign(dir.path(), &["synth", "score.mid", "perf.wav"]).status.success());
    assert!(scorealign(dir.path(), &["export", "score.mid", "labels.csv"]).status.success());
    let out = scorealign(
        dir.path(),
        &["--set", "train.learning_rate=1e6", "--set", "model.normalize_lr=false", "train", "perf.wav", "labels.csv", "m.nmdl"],
    );
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("loss trace"));
    assert!(dir.path().join("m.nmdl.loss.csv").exists());
}

#[test]
fn perfect_model_scores_full_average_precision() {
    // a DC block marks where note 60 sounds; a window-mean detector ranks
    // every positive above every negative
    let dir = tempfile::tempdir().unwrap();
    let sr = 44_100;
    let mut samples = vec![0.0; 6 * sr];
    for s in &mut samples[2 * sr..4 * sr] {
        *s = 0.5;
    }
    write_wav(&AudioBuffer::new(samples, sr as u32).unwrap(), dir.path().join("dc.wav"), SampleFormat::Float32).unwrap();
    let labels = LabelSet::new(vec![LabelRecord::new(2.0, 4.0, "Piano", 60, 1, 1.0, "Whole").unwrap()]);
    export_csv(&labels, dir.path().join("dc.csv")).unwrap();
    let mut m = LinearModel::new(FeatureKind::Raw, 512);
    m.weights.column_mut(60).fill(1.0 / 512.0);
    write_model(&Model::Linear(m), Some(0.2), dir.path().join("dc.nmdl")).unwrap();
    let out = scorealign(dir.path(), &["eval", "dc.nmdl", "dc.wav", "dc.csv", "r.csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_value(&out, "average_precision"), 1.0);
}

#[test]
fn experiment_runs_under_hashed_directory() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["--set", "experiment.spec.duration_s=6", "experiment", "alignment", "--out-dir", "runs"];
    let out = scorealign(dir.path(), &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let runs: Vec<_> = fs::read_dir(dir.path().join("runs")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 1);
    let run = &runs[0];
    assert!(run.file_name().unwrap().to_string_lossy().starts_with("alignment-"));
    let first = fs::read(run.join("results.csv")).unwrap();
    assert!(fs::read_to_string(run.join("manifest.txt")).unwrap().contains("config_hash"));

    // same config, same directory and results; a new seed gets its own
    assert!(scorealign(dir.path(), &args).status.success());
    assert_eq!(fs::read(run.join("results.csv")).unwrap(), first);
    let mut reseeded = vec!["--set", "seed=1"];
    reseeded.extend(args);
    assert!(scorealign(dir.path(), &reseeded).status.success());
    assert_eq!(fs::read_dir(dir.path().join("runs")).unwrap().count(), 2);
}
