//! Additive synthesis of scores, and the sine-tone validation mix.

use std::f64::consts::PI;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::dataset::LabelSet;
use crate::error::{Error, Result};
use crate::score::{frequency_of, Score};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Partials per note, including the fundamental.
    pub harmonics: u32,
    /// Partial `h` has amplitude `1 / h^rolloff`.
    pub rolloff: f64,
    pub attack_s: f64,
    pub release_s: f64,
    /// Target peak after normalization.
    pub peak: f64,
    /// Silence appended after the last note.
    pub tail_s: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            harmonics: 8,
            rolloff: 1.0,
            attack_s: 0.01,
            release_s: 0.05,
            peak: 0.9,
            tail_s: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.harmonics == 0 {
            return Err(Error::invalid("synth.harmonics must be positive"));
        }
        if !(self.peak > 0.0 && self.peak <= 1.0) {
            return Err(Error::invalid("synth.peak must be in (0, 1]"));
        }
        if self.attack_s < 0.0 || self.release_s < 0.0 || self.tail_s < 0.0 || !self.rolloff.is_finite() {
            return Err(Error::invalid("synth envelope times must be nonnegative"));
        }
        Ok(())
    }
}

/// One note to render, in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tone {
    pub midi_note: u8,
    pub onset_s: f64,
    pub duration_s: f64,
}

impl Tone {
    pub fn end_s(&self) -> f64 {
        self.onset_s + self.duration_s
    }
}

pub fn score_tones(score: &Score) -> Vec<Tone> {
    score
        .events()
        .iter()
        .map(|e| Tone {
            midi_note: e.midi_note,
            onset_s: e.onset_seconds,
            duration_s: e.duration_seconds,
        })
        .collect()
}

/// Adds one tone into `out`, without normalization.
///
/// Partials at or above Nyquist are dropped. The envelope ramps linearly
/// up over `attack_s` and down over the final `release_s`; when the two
/// overlap the lower ramp wins.
fn add_tone(out: &mut [f64], tone: &Tone, sample_rate: u32, config: &SynthConfig) {
    let sr = sample_rate as f64;
    let f0 = frequency_of(tone.midi_note);
    let nyquist = sr / 2.0;
    let amps: Vec<f64> = (1..=config.harmonics)
        .take_while(|&h| h as f64 * f0 < nyquist)
        .map(|h| 1.0 / (h as f64).powf(config.rolloff))
        .collect();
    if amps.is_empty() {
        return;
    }
    let start = (tone.onset_s * sr).round().max(0.0) as usize;
    let end = ((tone.end_s() * sr).round().max(0.0) as usize).min(out.len());
    let len_s = (end.saturating_sub(start)) as f64 / sr;
    for (s, slot) in out.iter_mut().enumerate().take(end).skip(start) {
        let t = (s - start) as f64 / sr;
        let mut env: f64 = 1.0;
        if config.attack_s > 0.0 {
            env = env.min(t / config.attack_s);
        }
        if config.release_s > 0.0 {
            env = env.min((len_s - t) / config.release_s);
        }
        if env <= 0.0 {
            continue;
        }
        // every note starts at phase zero, so a delayed note is a shifted copy
        let theta = 2.0 * PI * (f0 * (s - start) as f64 / sr).fract();
        let (sin1, cos1) = theta.sin_cos();
        // sin(h theta) by the Chebyshev recurrence
        let mut prev = 0.0;
        let mut cur = sin1;
        let mut acc = 0.0;
        for &a in &amps {
            acc += a * cur;
            let next = 2.0 * cos1 * cur - prev;
            prev = cur;
            cur = next;
        }
        *slot += env * acc;
    }
}

/// Renders tones into a buffer of `len` samples without normalization.
pub fn render_tones(tones: &[Tone], len: usize, sample_rate: u32, config: &SynthConfig) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for tone in tones {
        add_tone(&mut out, tone, sample_rate, config);
    }
    out
}

/// Number of samples needed to hold every tone plus the configured tail.
pub fn rendered_len(tones: &[Tone], sample_rate: u32, config: &SynthConfig) -> usize {
    let end = tones.iter().map(Tone::end_s).fold(0.0, f64::max);
    if tones.is_empty() {
        return 0;
    }
    ((end + config.tail_s) * sample_rate as f64).ceil() as usize
}

/// Scales samples so the peak magnitude equals `peak`. Silence is left alone.
pub fn normalize_peak(samples: &mut [f64], peak: f64) {
    let max = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if max > 0.0 {
        let g = peak / max;
        for s in samples {
            *s *= g;
        }
    }
}

/// Renders a score: a sum of `1/h^rolloff` harmonic partials per note,
/// peak-normalized to `config.peak`. An empty score renders as an empty buffer.
pub fn synthesize(score: &Score, sample_rate: u32, config: &SynthConfig) -> Result<AudioBuffer> {
    config.validate()?;
    let tones = score_tones(score);
    let mut samples = render_tones(&tones, rendered_len(&tones, sample_rate, config), sample_rate, config);
    normalize_peak(&mut samples, config.peak);
    AudioBuffer::new(samples, sample_rate)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationMix {
    pub audio: AudioBuffer,
    /// Samples that left [-1, 1] and were saturated.
    pub clipped: usize,
}

const FADE_S: f64 = 0.005;

/// Mixes a short sine at each label's pitch into the performance, starting
/// at the label's start time. Listening to the result reveals misaligned
/// labels as dissonance.
pub fn mix_validation(
    performance: &AudioBuffer,
    labels: &LabelSet,
    tone_s: f64,
    tone_gain: f64,
) -> Result<ValidationMix> {
    let sr = performance.sample_rate() as f64;
    let duration = performance.duration_s();
    let mut out = performance.samples().to_vec();
    for r in labels.records() {
        if r.start_s >= duration {
            return Err(Error::invalid(format!(
                "label {} at {:.3} s is beyond the end of the audio ({duration:.3} s)",
                r.note_name, r.start_s
            )));
        }
        let f = frequency_of(r.midi_note);
        let start = (r.start_s * sr).round() as usize;
        let len = (tone_s * sr).round() as usize;
        let fade = FADE_S * sr;
        for i in 0..len {
            let Some(slot) = out.get_mut(start + i) else { break };
            let ramp = ((i as f64 + 0.5) / fade).min((len as f64 - i as f64 - 0.5) / fade).min(1.0);
            let phase = 2.0 * PI * (f * i as f64 / sr).fract();
            *slot += tone_gain * ramp * phase.sin();
        }
    }
    let mut clipped = 0;
    for s in &mut out {
        if s.abs() > 1.0 {
            *s = s.clamp(-1.0, 1.0);
            clipped += 1;
        }
    }
    if clipped > 0 {
        warn!("validation mix saturated {clipped} samples");
    }
    Ok(ValidationMix {
        audio: AudioBuffer::new(out, performance.sample_rate())?,
        clipped,
    })
}
