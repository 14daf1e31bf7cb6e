//! Standard MIDI File (type 0 and 1) reading and writing.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::path::Path;

use log::warn;

use super::{Instrument, RawNote, Score, TempoChange, TimeSignature};
use crate::error::{Error, Result};

fn midi_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Midi {
        offset,
        message: message.into(),
    }
}

pub fn read_midi(path: impl AsRef<Path>) -> Result<Score> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_midi(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    end: usize,
}

impl<'a> Reader<'a> {
    fn u8(&mut self) -> Result<u8> {
        if self.pos >= self.end {
            return Err(midi_err(self.pos, "unexpected end of track"));
        }
        let b = self.bytes[self.pos];
        self.pos += 1;
        Ok(b)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.end - self.pos < n {
            return Err(midi_err(self.pos, format!("need {n} bytes, track ends first")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn varlen(&mut self) -> Result<u32> {
        let start = self.pos;
        let mut v: u32 = 0;
        for _ in 0..4 {
            let b = self.u8()?;
            v = (v << 7) | (b & 0x7f) as u32;
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(midi_err(start, "variable-length quantity longer than 4 bytes"))
    }
}

fn be_u32(b: &[u8]) -> u32 {
    u32::from_be_bytes([b[0], b[1], b[2], b[3]])
}

/// Parses an SMF type 0 or 1 file.
///
/// Note-ons are paired with note-offs first-in first-out per
/// (track, channel, pitch). A note-on with velocity 0 is a note-off. Notes
/// still sounding at end of track are closed there with a warning.
pub fn parse_midi(bytes: &[u8]) -> Result<Score> {
    if bytes.len() < 14 || &bytes[0..4] != b"MThd" {
        return Err(midi_err(0, "missing MThd header"));
    }
    let header_len = be_u32(&bytes[4..8]) as usize;
    if header_len < 6 || 8 + header_len > bytes.len() {
        return Err(midi_err(4, "bad header length"));
    }
    let format = u16::from_be_bytes([bytes[8], bytes[9]]);
    let ntracks = u16::from_be_bytes([bytes[10], bytes[11]]);
    let division = u16::from_be_bytes([bytes[12], bytes[13]]);
    match format {
        0 | 1 => {}
        2 => return Err(midi_err(8, "SMF type 2 is not supported")),
        f => return Err(midi_err(8, format!("unknown SMF type {f}"))),
    }
    if division & 0x8000 != 0 {
        return Err(midi_err(12, "SMPTE time division is not supported"));
    }
    if division == 0 {
        return Err(midi_err(12, "zero ticks per beat"));
    }

    let mut tempo = Vec::new();
    let mut sigs = Vec::new();
    let mut notes = Vec::new();
    let mut warnings = Vec::new();

    let mut pos = 8 + header_len;
    let mut track_index = 0usize;
    while track_index < ntracks as usize {
        if pos + 8 > bytes.len() {
            return Err(midi_err(pos, format!("truncated file: track {track_index} missing")));
        }
        let id = &bytes[pos..pos + 4];
        let len = be_u32(&bytes[pos + 4..pos + 8]) as usize;
        let body = pos + 8;
        let end = body
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| midi_err(pos, "truncated track chunk"))?;
        if id == b"MTrk" {
            parse_track(
                &mut Reader { bytes, pos: body, end },
                track_index,
                &mut tempo,
                &mut sigs,
                &mut notes,
                &mut warnings,
            )?;
            track_index += 1;
        }
        pos = end;
    }

    for w in &warnings {
        warn!("{w}");
    }
    let mut score = Score::new(division, tempo, sigs, notes)?;
    score.push_warnings(warnings);
    Ok(score)
}

fn parse_track(
    r: &mut Reader<'_>,
    track: usize,
    tempo: &mut Vec<TempoChange>,
    sigs: &mut Vec<TimeSignature>,
    notes: &mut Vec<RawNote>,
    warnings: &mut Vec<String>,
) -> Result<()> {
    let mut tick: u64 = 0;
    let mut running: Option<u8> = None;
    let mut programs: HashMap<u8, u8> = HashMap::new();
    // (channel, pitch) -> queue of (onset tick, instrument)
    let mut open: BTreeMap<(u8, u8), VecDeque<(u64, Instrument)>> = BTreeMap::new();
    let mut ended = false;

    while r.pos < r.end && !ended {
        tick += r.varlen()? as u64;
        let status_pos = r.pos;
        let first = r.u8()?;
        let status = if first & 0x80 != 0 {
            first
        } else {
            r.pos -= 1;
            running.ok_or_else(|| midi_err(status_pos, "data byte without running status"))?
        };
        match status {
            0xFF => {
                running = None;
                let kind = r.u8()?;
                let len = r.varlen()? as usize;
                let data = r.take(len)?;
                match kind {
                    0x51 if len == 3 => tempo.push(TempoChange {
                        tick,
                        us_per_beat: u32::from_be_bytes([0, data[0], data[1], data[2]]),
                    }),
                    0x58 if len >= 2 => sigs.push(TimeSignature {
                        tick,
                        numerator: data[0],
                        denominator: 1u8.checked_shl(data[1] as u32).unwrap_or(0),
                    }),
                    0x2F => ended = true,
                    _ => {}
                }
            }
            0xF0 | 0xF7 => {
                running = None;
                let len = r.varlen()? as usize;
                r.take(len)?;
            }
            0x80..=0xEF => {
                running = Some(status);
                let channel = status & 0x0f;
                let data_pos = r.pos;
                match status & 0xf0 {
                    0x80 | 0x90 => {
                        let pitch = r.u8()?;
                        let velocity = r.u8()?;
                        if pitch > 127 || velocity > 127 {
                            return Err(midi_err(data_pos, "data byte has high bit set"));
                        }
                        if status & 0xf0 == 0x90 && velocity > 0 {
                            let instrument = programs
                                .get(&channel)
                                .map_or(Instrument::Track(track), |&p| Instrument::Program(p));
                            open.entry((channel, pitch)).or_default().push_back((tick, instrument));
                        } else if let Some((onset, instrument)) =
                            open.get_mut(&(channel, pitch)).and_then(VecDeque::pop_front)
                        {
                            push_note(notes, warnings, pitch, instrument, onset, tick);
                        }
                    }
                    0xC0 => {
                        programs.insert(channel, r.u8()? & 0x7f);
                    }
                    0xD0 => {
                        r.u8()?;
                    }
                    _ => {
                        r.take(2)?;
                    }
                }
            }
            _ => return Err(midi_err(status_pos, format!("unexpected status byte {status:#04x}"))),
        }
    }

    for ((channel, pitch), queue) in open {
        for (onset, instrument) in queue {
            warnings.push(format!(
                "track {track}: note {pitch} on channel {channel} from tick {onset} never released; closed at end of track (tick {tick})"
            ));
            push_note(notes, warnings, pitch, instrument, onset, tick);
        }
    }
    Ok(())
}

fn push_note(
    notes: &mut Vec<RawNote>,
    warnings: &mut Vec<String>,
    pitch: u8,
    instrument: Instrument,
    onset: u64,
    off: u64,
) {
    if off <= onset {
        warnings.push(format!("dropped zero-length note {pitch} at tick {onset}"));
        return;
    }
    notes.push(RawNote {
        midi_note: pitch,
        instrument,
        onset_tick: onset,
        duration_ticks: off - onset,
    });
}

fn push_varlen(out: &mut Vec<u8>, mut v: u32) {
    let mut buf = [0u8; 4];
    let mut n = 0;
    loop {
        buf[n] = (v & 0x7f) as u8;
        n += 1;
        v >>= 7;
        if v == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(if i > 0 { buf[i] | 0x80 } else { buf[i] });
    }
}

/// Writes a score as a single-track SMF type 0 file.
///
/// Each distinct program gets its own channel (skipping the percussion
/// channel). Track-identified instruments are written without a program
/// change and share channel 0 unless it is taken.
pub fn encode_midi(score: &Score) -> Vec<u8> {
    let mut channels: BTreeMap<Instrument, u8> = BTreeMap::new();
    let mut next = 0u8;
    for e in score.events() {
        if let std::collections::btree_map::Entry::Vacant(e) = channels.entry(e.instrument) {
            if next == 9 {
                next += 1;
            }
            e.insert(next.min(15));
            next += 1;
        }
    }

    // (tick, order, bytes): offs sort before ons at equal ticks
    let mut events: Vec<(u64, u8, Vec<u8>)> = Vec::new();
    for t in score.tempo_map() {
        let us = t.us_per_beat.to_be_bytes();
        events.push((t.tick, 0, vec![0xFF, 0x51, 3, us[1], us[2], us[3]]));
    }
    for s in score.time_signatures() {
        let log2 = s.denominator.max(1).trailing_zeros() as u8;
        events.push((s.tick, 0, vec![0xFF, 0x58, 4, s.numerator, log2, 24, 8]));
    }
    for (instrument, &ch) in &channels {
        if let Instrument::Program(p) = instrument {
            events.push((0, 1, vec![0xC0 | ch, *p]));
        }
    }
    for e in score.events() {
        let ch = channels[&e.instrument];
        events.push((e.onset_tick, 3, vec![0x90 | ch, e.midi_note, 64]));
        events.push((e.onset_tick + e.duration_ticks, 2, vec![0x80 | ch, e.midi_note, 0]));
    }
    events.sort_by_key(|(tick, order, _)| (*tick, *order));

    let mut track = Vec::new();
    let mut last = 0u64;
    for (tick, _, bytes) in events {
        push_varlen(&mut track, (tick - last) as u32);
        track.extend_from_slice(&bytes);
        last = tick;
    }
    track.extend_from_slice(&[0x00, 0xFF, 0x2F, 0x00]);

    let mut out = Vec::with_capacity(22 + track.len());
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&score.ticks_per_beat().to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::NoteValue;

    fn smf(tracks: &[Vec<u8>], format: u16, tpb: u16) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"MThd");
        out.extend_from_slice(&6u32.to_be_bytes());
        out.extend_from_slice(&format.to_be_bytes());
        out.extend_from_slice(&(tracks.len() as u16).to_be_bytes());
        out.extend_from_slice(&tpb.to_be_bytes());
        for t in tracks {
            out.extend_from_slice(b"MTrk");
            out.extend_from_slice(&(t.len() as u32).to_be_bytes());
            out.extend_from_slice(t);
        }
        out
    }

    const EOT: [u8; 4] = [0x00, 0xFF, 0x2F, 0x00];

    #[test]
    fn single_quarter_note_default_tempo() {
        let mut t = vec![0x00, 0x90, 60, 64, 0x83, 0x60, 0x80, 60, 0];
        t.extend_from_slice(&EOT);
        let score = parse_midi(&smf(&[t], 0, 480)).unwrap();
        assert_eq!(score.events().len(), 1);
        let e = &score.events()[0];
        assert_eq!(e.midi_note, 60);
        assert_eq!(e.onset_seconds, 0.0);
        assert!((e.duration_seconds - 0.5).abs() < 1e-12);
        assert_eq!(e.note_value, NoteValue::Quarter);
        assert_eq!(e.instrument, Instrument::Track(0));
    }

    #[test]
    fn velocity_zero_is_note_off() {
        let mut explicit = vec![0x00, 0x90, 60, 64, 0x83, 0x60, 0x80, 60, 0];
        explicit.extend_from_slice(&EOT);
        // running status on the second message
        let mut zero = vec![0x00, 0x90, 60, 64, 0x83, 0x60, 60, 0];
        zero.extend_from_slice(&EOT);
        let a = parse_midi(&smf(&[explicit], 0, 480)).unwrap();
        let b = parse_midi(&smf(&[zero], 0, 480)).unwrap();
        assert_eq!(a.events(), b.events());
    }

    #[test]
    fn tempo_change_in_conductor_track() {
        // type 1: tempo 120 -> 60 bpm at beat 2, note at beat 3
        let mut conductor = vec![0x00, 0xFF, 0x51, 3, 0x07, 0xA1, 0x20];
        conductor.extend_from_slice(&[0x87, 0x40, 0xFF, 0x51, 3, 0x0F, 0x42, 0x40]);
        conductor.extend_from_slice(&EOT);
        let mut notes = vec![0x00, 0xC0, 42, 0x8B, 0x20, 0x90, 48, 80, 0x83, 0x60, 0x80, 48, 0];
        notes.extend_from_slice(&EOT);
        let score = parse_midi(&smf(&[conductor, notes], 1, 480)).unwrap();
        let e = &score.events()[0];
        assert!((e.onset_seconds - 2.0).abs() < 1e-12);
        assert!((e.duration_seconds - 1.0).abs() < 1e-12);
        assert_eq!(e.instrument, Instrument::Program(42));
        assert_eq!(e.instrument.name(), "Cello");
    }

    #[test]
    fn fifo_matching_of_overlapping_notes() {
        // on@0, on@100, off@200, off@400 for the same pitch
        let mut t = vec![0x00, 0x90, 60, 64, 0x64, 0x90, 60, 64, 0x64, 0x80, 60, 0, 0x81, 0x48, 0x80, 60, 0];
        t.extend_from_slice(&EOT);
        let score = parse_midi(&smf(&[t], 0, 100)).unwrap();
        let spans: Vec<(u64, u64)> = score.events().iter().map(|e| (e.onset_tick, e.duration_ticks)).collect();
        assert_eq!(spans, vec![(0, 200), (100, 300)]);
    }

    #[test]
    fn unmatched_note_closed_at_track_end() {
        let mut t = vec![0x00, 0x90, 64, 64, 0x83, 0x60, 0xFF, 0x2F, 0x00];
        t.truncate(9);
        let score = parse_midi(&smf(&[t], 0, 480)).unwrap();
        assert_eq!(score.events().len(), 1);
        assert_eq!(score.events()[0].duration_ticks, 480);
        assert_eq!(score.warnings().len(), 1);
    }

    #[test]
    fn errors_name_offsets() {
        assert!(matches!(parse_midi(b"MThX\0\0\0\x06\0\0\0\x01\x01\xe0"), Err(Error::Midi { offset: 0, .. })));
        let type2 = smf(&[], 2, 480);
        let err = parse_midi(&type2).unwrap_err();
        assert!(err.to_string().contains("type 2"));
        // track claims more bytes than exist
        let mut bad = smf(&[vec![0x00, 0x90, 60, 64]], 0, 480);
        bad.truncate(bad.len() - 2);
        assert!(matches!(parse_midi(&bad), Err(Error::Midi { .. })));
        // message cut off inside the track
        let cut = smf(&[vec![0x00, 0x90, 60]], 0, 480);
        let err = parse_midi(&cut).unwrap_err();
        assert!(matches!(err, Error::Midi { offset: 25, .. }), "{err}");
        // missing track
        let mut missing = smf(&[], 0, 480);
        missing[11] = 1;
        assert!(parse_midi(&missing).is_err());
    }

    #[test]
    fn encode_parse_round_trip() {
        let score = Score::from_beats(
            90.0,
            &[
                (60, Instrument::Program(40), 0.0, 1.0),
                (64, Instrument::Program(41), 0.5, 1.5),
                (67, Instrument::Program(40), 1.0, 0.25),
                (48, Instrument::Program(0), 2.0, 4.0),
            ],
        )
        .unwrap();
        let back = parse_midi(&encode_midi(&score)).unwrap();
        assert_eq!(back.events(), score.events());
        assert!(back.warnings().is_empty());
    }

    #[test]
    fn pair_count_matches_event_count() {
        let notes: Vec<(u8, Instrument, f64, f64)> = (0..40)
            .map(|i| (50 + (i % 7) as u8, Instrument::Program(0), i as f64 * 0.25, 0.5))
            .collect();
        let score = Score::from_beats(120.0, &notes).unwrap();
        let bytes = encode_midi(&score);
        let ons = bytes.windows(3).filter(|w| w[0] == 0x90 && w[2] == 64).count();
        let back = parse_midi(&bytes).unwrap();
        assert_eq!(back.events().len(), ons);
        assert!(back.events().iter().all(|e| e.duration_seconds > 0.0));
    }
}
