//! Synthetic end-to-end runs with known ground truth.
//!
//! A random score is rendered as a "performance" whose timing is warped by
//! a known map and optionally buried in white noise. Because the warp is
//! known, every label time is exact, which makes onset errors of the aligner
//! and the accuracy of trained models directly measurable.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::align::{align, median, transfer_events, transfer_labels, AlignConfig};
use crate::audio::{AudioBuffer, CANONICAL_RATE};
use crate::dataset::{make_segments, LabelRecord, LabelSet, SegmentSpec};
use crate::dsp::FeatureKind;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, Subset};
use crate::models::{
    build_examples, select_threshold, train, ConvModel, ConvShape, Examples, LinearModel, MlpModel, Model,
    ModelKind, TrainConfig, TrainReport,
};
use crate::score::{Instrument, Score};
use crate::synth::{normalize_peak, render_tones, score_tones, SynthConfig, Tone};

/// Time map applied to the score when rendering a performance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TempoWarp {
    None,
    /// Performance time is `ratio` times score time.
    Constant { ratio: f64 },
    /// Piecewise-constant tempo: every `segment_s` of score time gets a ratio
    /// drawn log-uniformly from `[min_ratio, max_ratio]`.
    PiecewiseRandom {
        seed: u64,
        min_ratio: f64,
        max_ratio: f64,
        segment_s: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Lowest and highest MIDI note, inclusive.
    pub note_low: u8,
    pub note_high: u8,
    /// Maximum number of simultaneous notes.
    pub polyphony: usize,
    pub duration_s: f64,
    pub tempo_bpm: f64,
    /// Probability that a slot in a voice is left silent.
    pub rest_probability: f64,
    pub tempo_warp: TempoWarp,
    pub noise_snr_db: Option<f64>,
    /// Silence before the first note of the performance.
    pub lead_silence_s: f64,
    /// Synthesizer used for the performance itself.
    pub synth: SynthConfig,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            note_low: 57,
            note_high: 81,
            polyphony: 1,
            duration_s: 20.0,
            tempo_bpm: 120.0,
            rest_probability: 0.1,
            tempo_warp: TempoWarp::None,
            noise_snr_db: None,
            lead_silence_s: 0.0,
            synth: SynthConfig::default(),
            sample_rate: CANONICAL_RATE,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.note_low > self.note_high || self.note_high > 127 {
            return Err(Error::invalid("note range must satisfy note_low <= note_high <= 127"));
        }
        if !(self.duration_s > 0.0) || !(self.tempo_bpm > 0.0) {
            return Err(Error::invalid("duration_s and tempo_bpm must be positive"));
        }
        if self.polyphony == 0 {
            return Err(Error::invalid("polyphony must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.rest_probability) {
            return Err(Error::invalid("rest_probability must be in [0, 1)"));
        }
        if !(self.lead_silence_s >= 0.0) || self.sample_rate == 0 {
            return Err(Error::invalid("lead_silence_s must be nonnegative and sample_rate positive"));
        }
        match self.tempo_warp {
            TempoWarp::None => {}
            TempoWarp::Constant { ratio } => {
                if !(ratio > 0.0 && ratio.is_finite()) {
                    return Err(Error::invalid("warp ratio must be positive"));
                }
            }
            TempoWarp::PiecewiseRandom { min_ratio, max_ratio, segment_s, .. } => {
                if !(min_ratio > 0.0 && max_ratio >= min_ratio && segment_s > 0.0) {
                    return Err(Error::invalid("piecewise warp needs 0 < min_ratio <= max_ratio and segment_s > 0"));
                }
            }
        }
        self.synth.validate()
    }
}

// Note values a generated voice draws from, in beats.
const DURATIONS: [f64; 5] = [0.5, 1.0, 1.0, 1.5, 2.0];

/// A random score of `spec.polyphony` independent voices. No two voices
/// sound the same pitch at once.
pub fn generate_score(spec: &SyntheticSpec) -> Result<Score> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total_beats = spec.duration_s * spec.tempo_bpm / 60.0;
    let mut notes: Vec<(u8, Instrument, f64, f64)> = Vec::new();
    for _ in 0..spec.polyphony {
        let mut t = 0.0;
        loop {
            let dur = DURATIONS[rng.random_range(0..DURATIONS.len())];
            if t + dur > total_beats {
                break;
            }
            if !rng.random_bool(spec.rest_probability) {
                let clashes = |p: u8| notes.iter().any(|n| n.0 == p && n.2 < t + dur && t < n.2 + n.3);
                for _ in 0..16 {
                    let p = rng.random_range(spec.note_low..=spec.note_high);
                    if !clashes(p) {
                        notes.push((p, Instrument::Program(0), t, dur));
                        break;
                    }
                }
            }
            t += dur;
        }
    }
    Score::from_beats(spec.tempo_bpm, &notes)
}

/// Monotone map from score seconds to performance seconds.
#[derive(Debug, Clone)]
pub struct TimeMap {
    lead: f64,
    kind: MapKind,
}

#[derive(Debug, Clone)]
enum MapKind {
    Scale(f64),
    /// Knots `(score_s, performance_s)`; beyond the last knot the last slope continues.
    Knots(Vec<(f64, f64)>, f64),
}

impl TimeMap {
    fn new(warp: &TempoWarp, lead: f64, horizon: f64) -> TimeMap {
        let kind = match *warp {
            TempoWarp::None => MapKind::Scale(1.0),
            TempoWarp::Constant { ratio } => MapKind::Scale(ratio),
            TempoWarp::PiecewiseRandom { seed, min_ratio, max_ratio, segment_s } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (lo, hi) = (min_ratio.ln(), max_ratio.ln());
                let mut knots = vec![(0.0, 0.0)];
                let mut slope = 1.0;
                while knots.last().unwrap().0 <= horizon {
                    let (s, p) = *knots.last().unwrap();
                    slope = if hi > lo { rng.random_range(lo..=hi).exp() } else { min_ratio };
                    knots.push((s + segment_s, p + segment_s * slope));
                }
                MapKind::Knots(knots, slope)
            }
        };
        TimeMap { lead, kind }
    }

    pub fn map(&self, t: f64) -> f64 {
        self.lead
            + match &self.kind {
                MapKind::Scale(r) => r * t,
                MapKind::Knots(knots, last_slope) => {
                    let k = knots.partition_point(|&(s, _)| s <= t);
                    if k == knots.len() {
                        let (s, p) = knots[k - 1];
                        p + (t - s) * last_slope
                    } else {
                        let ((s0, p0), (s1, p1)) = (knots[k - 1], knots[k]);
                        p0 + (t - s0) * (p1 - p0) / (s1 - s0)
                    }
                }
            }
    }
}

/// A rendered performance with its exact labels.
#[derive(Debug, Clone)]
pub struct Performance {
    pub audio: AudioBuffer,
    pub labels: LabelSet,
    /// Performance `(start, end)` of every score event, in score event order.
    pub event_times: Vec<(f64, f64)>,
    pub time_map: TimeMap,
}

/// Renders `score` with the warp, lead silence and noise of `spec`.
pub fn render_performance(score: &Score, spec: &SyntheticSpec) -> Result<Performance> {
    spec.validate()?;
    let sr = spec.sample_rate;
    let time_map = TimeMap::new(&spec.tempo_warp, spec.lead_silence_s, score.end_seconds() + 1.0);
    let event_times: Vec<(f64, f64)> = score
        .events()
        .iter()
        .map(|e| (time_map.map(e.onset_seconds), time_map.map(e.offset_seconds())))
        .collect();
    let tones: Vec<Tone> = score_tones(score)
        .into_iter()
        .zip(&event_times)
        .map(|(t, &(a, b))| Tone { onset_s: a, duration_s: b - a, ..t })
        .collect();
    let end = event_times.iter().map(|t| t.1).fold(spec.lead_silence_s, f64::max);
    let len = ((end + spec.synth.tail_s) * sr as f64).ceil() as usize;
    let mut samples = render_tones(&tones, len, sr, &spec.synth);
    normalize_peak(&mut samples, spec.synth.peak);
    if let Some(snr) = spec.noise_snr_db {
        add_noise(&mut samples, snr, spec.seed ^ 0x6e6f_6973_6521);
        let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        if peak > 0.99 {
            normalize_peak(&mut samples, 0.99);
        }
    }
    let records = score
        .events()
        .iter()
        .zip(&event_times)
        .map(|(e, &(a, b))| LabelRecord::new(a, b, e.instrument.name(), e.midi_note, e.measure, e.beat, e.note_value.to_string()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Performance {
        audio: AudioBuffer::new(samples, sr)?,
        labels: LabelSet::new(records),
        event_times,
        time_map,
    })
}

/// Adds white Gaussian noise at `snr_db` below the signal's mean power.
pub fn add_noise(samples: &mut [f64], snr_db: f64, seed: u64) {
    let power = samples.iter().map(|s| s * s).sum::<f64>() / samples.len().max(1) as f64;
    let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in samples {
        *s += sigma * rng.sample::<f64, _>(StandardNormal);
    }
}

fn percentile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = (q * (v.len() - 1) as f64).round() as usize;
    v[rank]
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentOutcome {
    /// Absolute onset error per score event, seconds.
    pub onset_errors: Vec<f64>,
    pub median_error_s: f64,
    pub p90_error_s: f64,
    pub mean_tempo_ratio: f64,
    pub median_tempo_ratio: f64,
    pub total_cost: f64,
}

/// Generates, renders and aligns one synthetic piece, and measures how far
/// transferred onsets land from the truth.
pub fn run_alignment_experiment(spec: &SyntheticSpec, config: &AlignConfig, synth: &SynthConfig) -> Result<AlignmentOutcome> {
    let score = generate_score(spec)?;
    let perf = render_performance(&score, spec)?;
    align_against_truth(&score, &perf, config, synth)
}

/// Aligns `score` to a performance whose event times are known.
pub fn align_against_truth(score: &Score, perf: &Performance, config: &AlignConfig, synth: &SynthConfig) -> Result<AlignmentOutcome> {
    let alignment = align(&perf.audio, score, config, synth)?;
    let times = transfer_events(&alignment.path, score, perf.audio.sample_rate(), config)?;
    let onset_errors: Vec<f64> = times
        .iter()
        .zip(&perf.event_times)
        .map(|(got, want)| (got.0 - want.0).abs())
        .collect();
    Ok(AlignmentOutcome {
        median_error_s: median(&onset_errors),
        p90_error_s: percentile(&onset_errors, 0.9),
        onset_errors,
        mean_tempo_ratio: alignment.mean_tempo_ratio,
        median_tempo_ratio: alignment.median_tempo_ratio,
        total_cost: alignment.path.total_cost,
    })
}

/// Where training labels come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelSource {
    /// Exact labels known from the render.
    GroundTruth,
    /// Labels produced by aligning the score to the rendered performance.
    Aligned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningConfig {
    pub model: ModelKind,
    /// Features of the linear model.
    pub feature_kind: FeatureKind,
    /// Samples per example for linear and MLP models.
    pub window: usize,
    pub hidden: usize,
    pub conv: ConvShape,
    pub hop: usize,
    pub train: TrainConfig,
    /// Divide the learning rate by the mean squared norm of the readout's inputs.
    pub normalize_lr: bool,
    /// Synthesizer of the held-out recording; differs from the training one.
    pub test_synth: SynthConfig,
    /// Duration of the held-out recording.
    pub test_duration_s: f64,
    pub label_source: LabelSource,
    pub align: AlignConfig,
    /// Points used to pick the decision threshold.
    pub threshold_points: usize,
    pub pr_grid_size: usize,
}

impl Default for LearningConfig {
    fn default() -> Self {
        LearningConfig {
            model: ModelKind::Linear,
            feature_kind: FeatureKind::LogSpectrogram,
            window: 2048,
            hidden: 500,
            conv: ConvShape::default(),
            hop: 512,
            train: TrainConfig::default(),
            normalize_lr: true,
            test_synth: SynthConfig {
                rolloff: 1.3,
                ..SynthConfig::default()
            },
            test_duration_s: 20.0,
            label_source: LabelSource::GroundTruth,
            align: AlignConfig::default(),
            threshold_points: 2000,
            pr_grid_size: 512,
        }
    }
}

impl LearningConfig {
    /// A freshly initialized model of the configured kind.
    pub fn build_model(&self) -> Result<Model> {
        Ok(match self.model {
            ModelKind::Linear => Model::Linear(LinearModel::new(self.feature_kind, self.window)),
            ModelKind::Mlp => Model::Mlp(MlpModel::new(self.window, self.hidden, self.train.seed)),
            ModelKind::Conv => Model::Conv(ConvModel::new(self.conv, self.hidden, self.train.seed)?),
        })
    }
}

#[derive(Debug, Clone)]
pub struct LearningOutcome {
    pub report: EvalReport,
    pub threshold: f64,
    pub training: TrainReport,
    pub model: Model,
    pub train_points: usize,
    pub test_points: usize,
    /// Learning rate after normalization.
    pub learning_rate: f64,
}

/// Examples cut from one rendered recording, every window fully inside it.
pub fn recording_examples(model: &Model, score: &Score, spec: &SyntheticSpec, config: &LearningConfig) -> Result<Examples> {
    let perf = render_performance(score, spec)?;
    let labels = match config.label_source {
        LabelSource::GroundTruth => perf.labels.clone(),
        LabelSource::Aligned => {
            let a = align(&perf.audio, score, &config.align, &SynthConfig::default())?;
            transfer_labels(&a.path, score, spec.sample_rate, &config.align)?
        }
    };
    let sr = spec.sample_rate as f64;
    let window = model.window();
    let seg_spec = SegmentSpec {
        window,
        hop: config.hop,
        start_s: (window / 2) as f64 / sr,
        end_s: perf.audio.duration_s(),
    };
    let segments = make_segments(&perf.audio, &labels, &seg_spec)?;
    build_examples(model, &perf.audio, &segments)
}

/// Mean squared norm of what the output layer sees at initialization.
pub fn readout_energy(model: &Model, data: &Examples) -> Result<f64> {
    let rows = data.len().min(512);
    let x = data.inputs.slice(ndarray::s![..rows, ..]);
    let feats = match model {
        Model::Linear(_) => x.to_owned(),
        Model::Mlp(m) => {
            let a = x.dot(&m.hidden_weights.t());
            a.mapv(|v| m.activation.apply(v))
        }
        Model::Conv(_) => x.to_owned(),
    };
    Ok(feats.iter().map(|v| v * v).sum::<f64>() / rows as f64)
}

/// Trains on one synthetic recording and evaluates on a held-out one
/// rendered from a different seed and synthesizer.
pub fn run_learning_experiment(spec: &SyntheticSpec, config: &LearningConfig) -> Result<LearningOutcome> {
    let mut model = config.build_model()?;
    let train_score = generate_score(spec)?;
    let train_data = recording_examples(&model, &train_score, spec, config)?;

    let test_spec = SyntheticSpec {
        seed: spec.seed.wrapping_add(0x9e37_79b9),
        duration_s: config.test_duration_s,
        synth: config.test_synth.clone(),
        ..spec.clone()
    };
    let test_score = generate_score(&test_spec)?;
    let test_data = recording_examples(&model, &test_score, &test_spec, &LearningConfig {
        label_source: LabelSource::GroundTruth,
        ..config.clone()
    })?;

    let mut train_cfg = config.train.clone();
    if config.normalize_lr {
        let energy = readout_energy(&model, &train_data)?;
        if energy > 0.0 {
            train_cfg.learning_rate /= energy;
        }
    }
    let training = train(&mut model, &train_data, None, &train_cfg)?;

    let pick: Vec<usize> = {
        let n = train_data.len();
        let k = config.threshold_points.min(n).max(1);
        (0..k).map(|i| i * n / k).collect()
    };
    let sample = train_data.select(&pick);
    let threshold = select_threshold(
        model.forward_batch(sample.inputs.view())?.view(),
        &sample.labels,
        config.train.threshold_grid_size,
    )?;
    let scores = model.forward_batch(test_data.inputs.view())?;
    let report = evaluate(scores.view(), &test_data.labels, threshold, config.pr_grid_size, Subset::All)?;
    Ok(LearningOutcome {
        report,
        threshold,
        training,
        model,
        train_points: train_data.len(),
        test_points: test_data.len(),
        learning_rate: train_cfg.learning_rate,
    })
}

/// Writes one results row per learning outcome.
pub fn write_learning_results<W: Write>(rows: &[(String, &LearningOutcome)], mut w: W) -> std::io::Result<()> {
    writeln!(w, "name,model,train_points,test_points,threshold,precision,recall,f1,average_precision,mirex_acc,final_loss")?;
    for (name, o) in rows {
        let r = &o.report;
        writeln!(
            w,
            "{name},{:?},{},{},{},{},{},{},{},{},{}",
            o.model.kind(),
            o.train_points,
            o.test_points,
            o.threshold,
            r.precision,
            r.recall,
            r.f1,
            r.average_precision,
            r.mirex.acc,
            o.training.train_loss.last().copied().unwrap_or(f64::NAN)
        )?;
    }
    Ok(())
}

/// Writes one results row per alignment outcome.
pub fn write_alignment_results<W: Write>(rows: &[(String, &AlignmentOutcome)], mut w: W) -> std::io::Result<()> {
    writeln!(w, "name,events,median_error_s,p90_error_s,mean_tempo_ratio,median_tempo_ratio,total_cost")?;
    for (name, o) in rows {
        writeln!(
            w,
            "{name},{},{},{},{},{},{}",
            o.onset_errors.len(),
            o.median_error_s,
            o.p90_error_s,
            o.mean_tempo_ratio,
            o.median_tempo_ratio,
            o.total_cost
        )?;
    }
    Ok(())
}
