//! One function per subcommand. Each reads its inputs, runs one pipeline
//! stage and writes its outputs; human-readable results go to stdout.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use scorealign::align::{align, transfer_events, transfer_labels, write_report};
use scorealign::audio::{read_wav, write_wav};
use scorealign::dataset::{export_csv, import_csv, make_segments, score_labels};
use scorealign::dsp::{featurize, write_features};
use scorealign::eval::evaluate;
use scorealign::experiments::{
    readout_energy, run_alignment_experiment, run_learning_experiment, write_alignment_results,
    write_learning_results,
};
use scorealign::models::{build_examples, read_model, select_threshold, train, write_model};
use scorealign::score::read_midi;
use scorealign::synth::{mix_validation, synthesize};
use scorealign::{Error, FeatureKind, LearningConfig, Model, Result, Subset, SyntheticSpec};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Creates `path` and hands a buffered writer to `body`.
fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let file = File::create(path).map_err(|e| io_error(path, e))?;
    let mut w = BufWriter::new(file);
    body(&mut w).and_then(|_| w.flush()).map_err(|e| io_error(path, e))
}

/// `path` with `suffix` appended to its file name.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

pub fn cmd_synth(score_path: &Path, out: &Path, cfg: &RunConfig) -> Result<()> {
    let score = read_midi(score_path)?;
    for w in score.warnings() {
        warn!("{}: {w}", score_path.display());
    }
    let audio = synthesize(&score, cfg.sample_rate, &cfg.synth)?;
    write_wav(&audio, out, cfg.wav_format.into())?;
    println!("events: {}", score.events().len());
    println!("duration_s: {:.6}", audio.duration_s());
    Ok(())
}

pub fn cmd_align(perf_path: &Path, score_path: &Path, out: &Path, report: Option<&Path>, cfg: &RunConfig) -> Result<()> {
    let perf = read_wav(perf_path)?;
    let score = read_midi(score_path)?;
    let alignment = align(&perf, &score, &cfg.align, &cfg.synth)?;
    let labels = transfer_labels(&alignment.path, &score, perf.sample_rate(), &cfg.align)?;
    export_csv(&labels, out)?;
    if let Some(r) = report {
        write_file(r, |w| write_report(&alignment, w))?;
    }

    // Distance of each aligned onset from its score time; near zero when the
    // performance is a rendering of the score itself.
    let times = transfer_events(&alignment.path, &score, perf.sample_rate(), &cfg.align)?;
    let mut shifts: Vec<f64> = score
        .events()
        .iter()
        .zip(&times)
        .map(|(e, t)| (t.0 - e.onset_seconds).abs())
        .collect();
    shifts.sort_by(f64::total_cmp);

    println!("total_cost: {}", alignment.path.total_cost);
    println!("mean_tempo_ratio: {:.6}", alignment.mean_tempo_ratio);
    println!("median_tempo_ratio: {:.6}", alignment.median_tempo_ratio);
    println!("labels: {}", labels.len());
    if !shifts.is_empty() {
        println!("median_onset_shift_s: {:.6}", shifts[shifts.len() / 2]);
    }
    Ok(())
}

pub fn cmd_validate(perf_path: &Path, labels_path: &Path, out: &Path, cfg: &RunConfig) -> Result<()> {
    let perf = read_wav(perf_path)?;
    let labels = import_csv(labels_path)?;
    let mix = mix_validation(&perf, &labels, cfg.validate.tone_s, cfg.validate.gain)?;
    if mix.clipped > 0 {
        warn!("{} samples clipped while mixing", mix.clipped);
    }
    write_wav(&mix.audio, out, cfg.wav_format.into())?;
    println!("clipped_samples: {}", mix.clipped);
    Ok(())
}

pub fn cmd_featurize(
    audio_path: &Path,
    out: &Path,
    kind: Option<FeatureKind>,
    window: Option<usize>,
    stride: Option<usize>,
    cfg: &RunConfig,
) -> Result<()> {
    let audio = read_wav(audio_path)?;
    let m = featurize(
        &audio,
        kind.unwrap_or(cfg.align.feature_kind),
        window.unwrap_or(cfg.align.window),
        stride.unwrap_or(cfg.align.stride),
    )?;
    write_features(&m, out)?;
    println!("frames: {}", m.frames());
    println!("dims: {}", m.dims());
    Ok(())
}

pub fn cmd_segments(audio_path: &Path, labels_path: &Path, out: &Path, cfg: &RunConfig) -> Result<()> {
    let audio = read_wav(audio_path)?;
    let labels = import_csv(labels_path)?;
    let segments = make_segments(&audio, &labels, &cfg.segments)?;
    write_file(out, |w| {
        writeln!(w, "start_sample,center_sample,midpoint_s,notes")?;
        for s in &segments {
            let notes: Vec<String> = s.labels.notes().map(|n| n.to_string()).collect();
            writeln!(w, "{},{},{},{}", s.start_sample, s.center_sample, s.midpoint_s, notes.join(" "))?;
        }
        Ok(())
    })?;
    println!("segments: {}", segments.len());
    Ok(())
}

fn learning_config(cfg: &RunConfig) -> LearningConfig {
    LearningConfig {
        model: cfg.model.kind,
        feature_kind: cfg.model.feature_kind,
        window: cfg.model.window,
        hidden: cfg.model.hidden,
        conv: cfg.model.conv,
        train: cfg.train.clone(),
        normalize_lr: cfg.model.normalize_lr,
        threshold_points: cfg.model.threshold_points,
        ..LearningConfig::default()
    }
}

fn load_examples(model: &Model, audio_path: &Path, labels_path: &Path, cfg: &RunConfig) -> Result<scorealign::Examples> {
    let audio = read_wav(audio_path)?;
    let labels = import_csv(labels_path)?;
    let segments = make_segments(&audio, &labels, &cfg.segments)?;
    build_examples(model, &audio, &segments)
}

pub fn cmd_train(audio_path: &Path, labels_path: &Path, out: &Path, trace: Option<&Path>, cfg: &RunConfig) -> Result<()> {
    let lc = learning_config(cfg);
    let mut model = lc.build_model()?;
    let data = load_examples(&model, audio_path, labels_path, cfg)?;
    info!("{} training examples of dimension {}", data.len(), data.inputs.ncols());

    let mut train_cfg = cfg.train.clone();
    if lc.normalize_lr {
        let energy = readout_energy(&model, &data)?;
        if energy > 0.0 {
            train_cfg.learning_rate /= energy;
        }
    }
    let trace_path = trace.map(Path::to_path_buf).unwrap_or_else(|| sibling(out, ".loss.csv"));
    let report = match train(&mut model, &data, None, &train_cfg) {
        Ok(r) => r,
        Err(e @ Error::Divergence { .. }) => {
            if let Error::Divergence { trace, .. } = &e {
                eprintln!("loss trace before divergence:");
                for (i, l) in trace.iter().enumerate() {
                    eprintln!("  {i}: {l}");
                }
                write_file(&trace_path, |w| {
                    writeln!(w, "batch,loss")?;
                    for (i, l) in trace.iter().enumerate() {
                        writeln!(w, "{i},{l}")?;
                    }
                    Ok(())
                })?;
            }
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    write_file(&trace_path, |w| report.write_csv(w))?;

    let n = data.len();
    let k = lc.threshold_points.clamp(1, n);
    let pick: Vec<usize> = (0..k).map(|i| i * n / k).collect();
    let sample = data.select(&pick);
    let scores = model.forward_batch(sample.inputs.view())?;
    let threshold = select_threshold(scores.view(), &sample.labels, cfg.train.threshold_grid_size)?;
    write_model(&model, Some(threshold), out)?;

    println!("examples: {n}");
    println!("learning_rate: {}", train_cfg.learning_rate);
    println!("final_loss: {}", report.train_loss.last().copied().unwrap_or(f64::NAN));
    println!("threshold: {threshold}");
    Ok(())
}

pub fn cmd_eval(
    model_path: &Path,
    audio_path: &Path,
    labels_path: &Path,
    out: &Path,
    poly: Option<usize>,
    threshold: Option<f64>,
    cfg: &RunConfig,
) -> Result<()> {
    let (model, stored) = read_model(model_path)?;
    let threshold = threshold.or(stored).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "{} carries no decision threshold; pass --threshold",
            model_path.display()
        ))
    })?;
    let data = load_examples(&model, audio_path, labels_path, cfg)?;
    let scores = model.forward_batch(data.inputs.view())?;
    let subset = poly.map_or(Subset::All, Subset::Polyphony);
    let report = evaluate(scores.view(), &data.labels, threshold, cfg.eval.pr_grid_size, subset)?;
    write_file(out, |w| report.write_csv(w))?;
    write_file(&sibling(out, ".pr.txt"), |w| report.write_pr_curve(w))?;
    write_file(&sibling(out, ".summary.txt"), |w| report.write_summary(w))?;
    let stdout = std::io::stdout();
    report
        .write_summary(stdout.lock())
        .map_err(|e| io_error(Path::new("<stdout>"), e))
}

pub fn cmd_export(score_path: &Path, out: &Path) -> Result<()> {
    let score = read_midi(score_path)?;
    let labels = score_labels(&score)?;
    export_csv(&labels, out)?;
    println!("labels: {}", labels.len());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Alignment,
    Learning,
}

impl ExperimentKind {
    fn name(self) -> &'static str {
        match self {
            ExperimentKind::Alignment => "alignment",
            ExperimentKind::Learning => "learning",
        }
    }
}

/// Hex digest of everything that determines an experiment's results.
pub fn config_hash(kind: ExperimentKind, cfg: &RunConfig) -> String {
    let keyed = RunConfig {
        threads: 0,
        ..cfg.clone()
    };
    let digest = Sha256::digest(format!("{}\n{}", kind.name(), keyed.to_toml()).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Runs `experiment.pieces` synthetic pieces under `root/<kind>-<hash>` and
/// returns that directory.
pub fn cmd_experiment(kind: ExperimentKind, root: &Path, cfg: &RunConfig) -> Result<PathBuf> {
    let hash = config_hash(kind, cfg);
    let dir = root.join(format!("{}-{}", kind.name(), &hash[..16]));
    fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    write_file(&dir.join("manifest.txt"), |w| {
        writeln!(w, "# experiment: {}", kind.name())?;
        writeln!(w, "# config_hash: {hash}")?;
        w.write_all(cfg.to_toml().as_bytes())
    })?;

    let specs: Vec<SyntheticSpec> = (0..cfg.experiment.pieces as u64)
        .map(|i| SyntheticSpec {
            seed: cfg.seed.wrapping_add(i),
            ..cfg.experiment.spec.clone()
        })
        .collect();
    let results = dir.join("results.csv");
    match kind {
        ExperimentKind::Alignment => {
            let outcomes = specs
                .par_iter()
                .map(|s| run_alignment_experiment(s, &cfg.align, &cfg.synth))
                .collect::<Result<Vec<_>>>()?;
            let rows: Vec<(String, _)> = outcomes.iter().enumerate().map(|(i, o)| (format!("piece-{i}"), o)).collect();
            write_file(&results, |w| write_alignment_results(&rows, w))?;
            for (name, o) in &rows {
                println!("{name}: median_error_s {:.6} p90_error_s {:.6} mean_tempo_ratio {:.4}", o.median_error_s, o.p90_error_s, o.mean_tempo_ratio);
            }
        }
        ExperimentKind::Learning => {
            let learning = &cfg.experiment.learning;
            let outcomes = specs
                .par_iter()
                .map(|s| run_learning_experiment(s, learning))
                .collect::<Result<Vec<_>>>()?;
            let rows: Vec<(String, _)> = outcomes.iter().enumerate().map(|(i, o)| (format!("piece-{i}"), o)).collect();
            write_file(&results, |w| write_learning_results(&rows, w))?;
            for (name, o) in &rows {
                write_file(&dir.join(format!("{name}.pr.txt")), |w| o.report.write_pr_curve(w))?;
                write_file(&dir.join(format!("{name}.loss.csv")), |w| o.training.write_csv(w))?;
                println!("{name}: average_precision {:.6} f1 {:.6}", o.report.average_precision, o.report.f1);
            }
        }
    }
    println!("run_dir: {}", dir.display());
    Ok(dir)
}
