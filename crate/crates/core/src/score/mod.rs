//! The symbolic score: note events with beat and wall-clock timing.

mod gm;
mod midi;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub use midi::{encode_midi, parse_midi, read_midi};

/// Tempo used when a file carries no tempo event (120 bpm).
pub const DEFAULT_TEMPO_US: u32 = 500_000;

/// Rhythmic value of a note, assigned from its length in beats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NoteValue {
    Whole,
    DottedHalf,
    Half,
    DottedQuarter,
    Quarter,
    DottedEighth,
    Eighth,
    Sixteenth,
    Triplet,
    Other,
}

/// Beat lengths in ascending order, so the first best match is the shorter value.
const NOTE_VALUE_TABLE: [(f64, NoteValue); 9] = [
    (0.25, NoteValue::Sixteenth),
    (1.0 / 3.0, NoteValue::Triplet),
    (0.5, NoteValue::Eighth),
    (0.75, NoteValue::DottedEighth),
    (1.0, NoteValue::Quarter),
    (1.5, NoteValue::DottedQuarter),
    (2.0, NoteValue::Half),
    (3.0, NoteValue::DottedHalf),
    (4.0, NoteValue::Whole),
];

impl NoteValue {
    /// Nearest entry of the note-value table; ties resolve to the shorter value.
    pub fn from_beats(beats: f64) -> NoteValue {
        let mut best = NOTE_VALUE_TABLE[0];
        let mut best_dist = (beats - best.0).abs();
        for &(len, value) in &NOTE_VALUE_TABLE[1..] {
            let dist = (beats - len).abs();
            if dist < best_dist - 1e-12 {
                best = (len, value);
                best_dist = dist;
            }
        }
        best.1
    }

    /// Nominal length in beats, `None` for [`NoteValue::Other`].
    pub fn beats(self) -> Option<f64> {
        NOTE_VALUE_TABLE
            .iter()
            .find(|(_, v)| *v == self)
            .map(|(len, _)| *len)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NoteValue::Whole => "Whole",
            NoteValue::DottedHalf => "Dotted Half",
            NoteValue::Half => "Half",
            NoteValue::DottedQuarter => "Dotted Quarter",
            NoteValue::Quarter => "Quarter",
            NoteValue::DottedEighth => "Dotted Eighth",
            NoteValue::Eighth => "Eighth",
            NoteValue::Sixteenth => "Sixteenth",
            NoteValue::Triplet => "Triplet",
            NoteValue::Other => "Other",
        }
    }
}

impl fmt::Display for NoteValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoteValue {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let all = [
            NoteValue::Whole,
            NoteValue::DottedHalf,
            NoteValue::Half,
            NoteValue::DottedQuarter,
            NoteValue::Quarter,
            NoteValue::DottedEighth,
            NoteValue::Eighth,
            NoteValue::Sixteenth,
            NoteValue::Triplet,
            NoteValue::Other,
        ];
        all.into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown note value {s:?}")))
    }
}

/// Who plays a note: the MIDI program, or the track when no program change was seen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Instrument {
    Program(u8),
    Track(usize),
}

impl Instrument {
    pub fn name(&self) -> String {
        match *self {
            Instrument::Program(p) => gm::program_name(p).to_string(),
            Instrument::Track(t) => format!("Track {t}"),
        }
    }

    /// Inverse of [`Instrument::name`].
    pub fn from_name(name: &str) -> Option<Instrument> {
        if let Some(t) = name.strip_prefix("Track ") {
            return t.parse().ok().map(Instrument::Track);
        }
        gm::program_for_name(name).map(Instrument::Program)
    }
}

/// A note as it sits in the score, before timing is derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawNote {
    pub midi_note: u8,
    pub instrument: Instrument,
    pub onset_tick: u64,
    pub duration_ticks: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoteEvent {
    pub midi_note: u8,
    pub instrument: Instrument,
    pub onset_tick: u64,
    pub duration_ticks: u64,
    pub onset_beats: f64,
    pub duration_beats: f64,
    pub onset_seconds: f64,
    pub duration_seconds: f64,
    pub measure: u32,
    pub beat: f64,
    pub note_value: NoteValue,
}

impl NoteEvent {
    pub fn offset_seconds(&self) -> f64 {
        self.onset_seconds + self.duration_seconds
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TempoChange {
    pub tick: u64,
    pub us_per_beat: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeSignature {
    pub tick: u64,
    pub numerator: u8,
    pub denominator: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Score {
    events: Vec<NoteEvent>,
    tempo_map: Vec<TempoChange>,
    ticks_per_beat: u16,
    time_signatures: Vec<TimeSignature>,
    warnings: Vec<String>,
}

impl Score {
    /// Builds a score, deriving seconds, measure/beat and note values.
    ///
    /// The tempo map is sorted and gets a 120 bpm entry at tick 0 if none
    /// exists there; time signatures default to 4/4.
    pub fn new(
        ticks_per_beat: u16,
        mut tempo_map: Vec<TempoChange>,
        mut time_signatures: Vec<TimeSignature>,
        notes: Vec<RawNote>,
    ) -> Result<Score> {
        if ticks_per_beat == 0 {
            return Err(Error::invalid("ticks per beat must be positive"));
        }
        tempo_map.sort_by_key(|t| t.tick);
        // later entries at the same tick win
        tempo_map.reverse();
        tempo_map.dedup_by_key(|t| t.tick);
        tempo_map.reverse();
        if tempo_map.first().is_none_or(|t| t.tick != 0) {
            tempo_map.insert(
                0,
                TempoChange {
                    tick: 0,
                    us_per_beat: DEFAULT_TEMPO_US,
                },
            );
        }
        if let Some(t) = tempo_map.iter().find(|t| t.us_per_beat == 0) {
            return Err(Error::invalid(format!("zero tempo at tick {}", t.tick)));
        }
        time_signatures.sort_by_key(|t| t.tick);
        time_signatures.reverse();
        time_signatures.dedup_by_key(|t| t.tick);
        time_signatures.reverse();
        if time_signatures.first().is_none_or(|t| t.tick != 0) {
            time_signatures.insert(
                0,
                TimeSignature {
                    tick: 0,
                    numerator: 4,
                    denominator: 4,
                },
            );
        }

        let mut score = Score {
            events: Vec::with_capacity(notes.len()),
            tempo_map,
            ticks_per_beat,
            time_signatures,
            warnings: Vec::new(),
        };
        let tpb = ticks_per_beat as f64;
        for n in notes {
            if n.midi_note > 127 {
                return Err(Error::invalid(format!("MIDI note {} out of range", n.midi_note)));
            }
            if n.duration_ticks == 0 {
                return Err(Error::invalid(format!(
                    "note {} at tick {} has zero duration",
                    n.midi_note, n.onset_tick
                )));
            }
            let onset_seconds = score.tick_to_seconds(n.onset_tick);
            let end_seconds = score.tick_to_seconds(n.onset_tick + n.duration_ticks);
            let (measure, beat) = score.measure_beat(n.onset_tick);
            let duration_beats = n.duration_ticks as f64 / tpb;
            score.events.push(NoteEvent {
                midi_note: n.midi_note,
                instrument: n.instrument,
                onset_tick: n.onset_tick,
                duration_ticks: n.duration_ticks,
                onset_beats: n.onset_tick as f64 / tpb,
                duration_beats,
                onset_seconds,
                duration_seconds: end_seconds - onset_seconds,
                measure,
                beat,
                note_value: NoteValue::from_beats(duration_beats),
            });
        }
        score
            .events
            .sort_by_key(|a| (a.onset_tick, a.midi_note, a.instrument));
        Ok(score)
    }

    /// Builds a score from notes given in beats at a constant tempo.
    pub fn from_beats(tempo_bpm: f64, notes: &[(u8, Instrument, f64, f64)]) -> Result<Score> {
        const TPB: u16 = 960;
        if !(tempo_bpm > 0.0) {
            return Err(Error::invalid("tempo must be positive"));
        }
        let raw = notes
            .iter()
            .map(|&(midi_note, instrument, onset, dur)| RawNote {
                midi_note,
                instrument,
                onset_tick: (onset * TPB as f64).round() as u64,
                duration_ticks: (dur * TPB as f64).round() as u64,
            })
            .collect();
        let tempo = TempoChange {
            tick: 0,
            us_per_beat: (60_000_000.0 / tempo_bpm).round() as u32,
        };
        Score::new(TPB, vec![tempo], Vec::new(), raw)
    }

    pub fn events(&self) -> &[NoteEvent] {
        &self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn tempo_map(&self) -> &[TempoChange] {
        &self.tempo_map
    }

    pub fn ticks_per_beat(&self) -> u16 {
        self.ticks_per_beat
    }

    pub fn time_signatures(&self) -> &[TimeSignature] {
        &self.time_signatures
    }

    /// Non-fatal problems found while parsing, such as notes closed at end of track.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub(crate) fn push_warnings(&mut self, w: impl IntoIterator<Item = String>) {
        self.warnings.extend(w);
    }

    /// Offset of the last note in seconds, 0 for an empty score.
    pub fn end_seconds(&self) -> f64 {
        self.events
            .iter()
            .map(NoteEvent::offset_seconds)
            .fold(0.0, f64::max)
    }

    /// Integrates the piecewise-constant tempo map up to `tick`.
    pub fn tick_to_seconds(&self, tick: u64) -> f64 {
        let tpb = self.ticks_per_beat as f64;
        let mut seconds = 0.0;
        for (i, seg) in self.tempo_map.iter().enumerate() {
            if seg.tick >= tick {
                break;
            }
            let seg_end = self
                .tempo_map
                .get(i + 1)
                .map_or(tick, |next| next.tick.min(tick));
            seconds += (seg_end - seg.tick) as f64 / tpb * seg.us_per_beat as f64 * 1e-6;
        }
        seconds
    }

    /// Measure (from 1 at tick 0) and beat (from 1, in units of the
    /// signature denominator) of a tick.
    pub fn measure_beat(&self, tick: u64) -> (u32, f64) {
        let tpb = self.ticks_per_beat as f64;
        let mut measure_base = 1u32;
        for (i, sig) in self.time_signatures.iter().enumerate() {
            let beat_ticks = tpb * 4.0 / sig.denominator.max(1) as f64;
            let measure_ticks = beat_ticks * sig.numerator.max(1) as f64;
            let next = self.time_signatures.get(i + 1).map(|s| s.tick);
            if next.is_some_and(|n| n <= tick) {
                let span = (next.unwrap() - sig.tick) as f64;
                measure_base += (span / measure_ticks).ceil() as u32;
                continue;
            }
            let into = (tick - sig.tick) as f64;
            let whole = (into / measure_ticks).floor();
            let beat = 1.0 + (into - whole * measure_ticks) / beat_ticks;
            return (measure_base + whole as u32, beat);
        }
        (measure_base, 1.0)
    }
}

const NOTE_NAMES: [&str; 12] = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"];

/// Scientific pitch name with middle C (MIDI 60) as C4, sharps only.
pub fn note_name(midi_note: u8) -> Result<String> {
    if midi_note > 127 {
        return Err(Error::invalid(format!("MIDI note {midi_note} out of range")));
    }
    let octave = midi_note as i32 / 12 - 1;
    Ok(format!("{}{}", NOTE_NAMES[midi_note as usize % 12], octave))
}

/// Inverse of [`note_name`]; also accepts flats.
pub fn parse_note_name(name: &str) -> Result<u8> {
    let bad = || Error::invalid(format!("bad note name {name:?}"));
    let mut chars = name.chars();
    let letter = chars.next().ok_or_else(bad)?;
    let base: i32 = match letter.to_ascii_uppercase() {
        'C' => 0,
        'D' => 2,
        'E' => 4,
        'F' => 5,
        'G' => 7,
        'A' => 9,
        'B' => 11,
        _ => return Err(bad()),
    };
    let rest = chars.as_str();
    let (accidental, octave) = if let Some(r) = rest.strip_prefix('#') {
        (1, r)
    } else if let Some(r) = rest.strip_prefix('b') {
        (-1, r)
    } else {
        (0, rest)
    };
    let octave: i32 = octave.parse().map_err(|_| bad())?;
    let n = (octave + 1) * 12 + base + accidental;
    u8::try_from(n).ok().filter(|&n| n <= 127).ok_or_else(bad)
}

/// Equal-tempered frequency with A4 = 440 Hz.
pub fn note_frequency(midi_note: u8) -> Result<f64> {
    if midi_note > 127 {
        return Err(Error::invalid(format!("MIDI note {midi_note} out of range")));
    }
    Ok(frequency_of(midi_note))
}

pub(crate) fn frequency_of(midi_note: u8) -> f64 {
    440.0 * 2f64.powf((midi_note as f64 - 69.0) / 12.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn note_names() {
        assert_eq!(note_name(60).unwrap(), "C4");
        assert_eq!(note_name(79).unwrap(), "G5");
        assert_eq!(note_name(58).unwrap(), "A#3");
        assert_eq!(note_name(0).unwrap(), "C-1");
        assert_eq!(note_name(127).unwrap(), "G9");
        assert!(note_name(128).is_err());
        for n in 0..=127u8 {
            assert_eq!(parse_note_name(&note_name(n).unwrap()).unwrap(), n);
        }
        assert_eq!(parse_note_name("Bb3").unwrap(), 58);
        assert!(parse_note_name("H2").is_err());
    }

    #[test]
    fn frequencies() {
        assert_eq!(note_frequency(69).unwrap(), 440.0);
        assert!((note_frequency(57).unwrap() - 220.0).abs() < 1e-12);
        // 440 * 2^(-9/12)
        let c4 = 440.0 * (-9.0f64 / 12.0).exp2();
        assert!((note_frequency(60).unwrap() - c4).abs() < 1e-12);
        assert!((note_frequency(60).unwrap() - 261.6256).abs() < 1e-3);
        assert!(note_frequency(200).is_err());
    }

    #[test]
    fn frequency_monotone_and_octaves() {
        for n in 0..127u8 {
            assert!(frequency_of(n + 1) > frequency_of(n));
            if n + 12 <= 127 {
                let ratio = frequency_of(n + 12) / frequency_of(n);
                assert!((ratio - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn note_value_table() {
        assert_eq!(NoteValue::from_beats(0.5), NoteValue::Eighth);
        assert_eq!(NoteValue::from_beats(3.0), NoteValue::DottedHalf);
        assert_eq!(NoteValue::from_beats(1.0 / 3.0), NoteValue::Triplet);
        assert_eq!(NoteValue::from_beats(10.0), NoteValue::Whole);
        // halfway between 2 and 3 resolves to the shorter value
        assert_eq!(NoteValue::from_beats(2.5), NoteValue::Half);
        assert_eq!(NoteValue::from_beats(0.875), NoteValue::DottedEighth);
        assert_eq!("Dotted Half".parse::<NoteValue>().unwrap(), NoteValue::DottedHalf);
    }

    #[test]
    fn tempo_integration_with_change() {
        // 120 bpm until beat 2, then 60 bpm
        let tempo = vec![
            TempoChange { tick: 0, us_per_beat: 500_000 },
            TempoChange { tick: 960, us_per_beat: 1_000_000 },
        ];
        let note = RawNote {
            midi_note: 60,
            instrument: Instrument::Track(0),
            onset_tick: 1440,
            duration_ticks: 480,
        };
        let score = Score::new(480, tempo, vec![], vec![note]).unwrap();
        let ev = &score.events()[0];
        assert!((ev.onset_seconds - 2.0).abs() < 1e-12);
        assert!((ev.duration_seconds - 1.0).abs() < 1e-12);

        // independent tick-by-tick accumulation
        let mut t = 0.0;
        for tick in 0..1440u64 {
            let us = if tick < 960 { 500_000.0 } else { 1_000_000.0 };
            t += us * 1e-6 / 480.0;
        }
        assert!((ev.onset_seconds - t).abs() < 1e-9);
    }

    #[test]
    fn measures_and_beats() {
        let sigs = vec![
            TimeSignature { tick: 0, numerator: 3, denominator: 4 },
            TimeSignature { tick: 480 * 6, numerator: 6, denominator: 8 },
        ];
        let score = Score::new(480, vec![], sigs, vec![]).unwrap();
        assert_eq!(score.measure_beat(0), (1, 1.0));
        assert_eq!(score.measure_beat(480), (1, 2.0));
        assert_eq!(score.measure_beat(480 * 3 + 240), (2, 1.5));
        // 6/8 begins at measure 3, beats counted in eighths
        assert_eq!(score.measure_beat(480 * 6), (3, 1.0));
        assert_eq!(score.measure_beat(480 * 6 + 240 * 7), (4, 2.0));
    }

    #[test]
    fn table_row_shape() {
        // an eighth note G5 on a violin in measure 21, beat 3 (4/4)
        let onset = 20.0 * 4.0 + 2.0;
        let s = Score::from_beats(120.0, &[(79, Instrument::Program(40), onset, 0.5)]).unwrap();
        let e = &s.events()[0];
        assert_eq!(e.instrument.name(), "Violin");
        assert_eq!(note_name(e.midi_note).unwrap(), "G5");
        assert_eq!((e.measure, e.beat), (21, 3.0));
        assert_eq!(e.note_value, NoteValue::Eighth);
    }

    proptest! {
        #[test]
        fn tempo_integration_is_additive(
            changes in prop::collection::vec((1u64..5000, 200_000u32..2_000_000), 0..6),
            a in 0u64..20_000,
            b in 0u64..20_000,
        ) {
            let mut tick = 0;
            let tempo: Vec<TempoChange> = changes.iter().map(|&(dt, us)| {
                tick += dt;
                TempoChange { tick, us_per_beat: us }
            }).collect();
            let score = Score::new(480, tempo, vec![], vec![]).unwrap();
            let (lo, hi) = (a.min(b), a.max(b));
            // span(lo -> hi) integrated with tick resolution
            let mut span = 0.0;
            for t in lo..hi {
                let us = score.tempo_map().iter().rev().find(|c| c.tick <= t).unwrap().us_per_beat;
                span += us as f64 * 1e-6 / 480.0;
            }
            let lhs = score.tick_to_seconds(lo) + span;
            prop_assert!((lhs - score.tick_to_seconds(hi)).abs() < 1e-6);
            if lo < hi {
                prop_assert!(score.tick_to_seconds(hi) > score.tick_to_seconds(lo));
            }
        }
    }
}
