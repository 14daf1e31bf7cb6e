//! Note labels, point-in-time note queries and labeled audio segments.

use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};
use crate::score::{note_name, parse_note_name, Score};

/// One timestamped note: start and end in seconds plus score metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRecord {
    pub start_s: f64,
    pub end_s: f64,
    pub instrument: String,
    pub midi_note: u8,
    pub note_name: String,
    pub measure: u32,
    pub beat: f64,
    pub note_value: String,
}

impl LabelRecord {
    pub fn new(
        start_s: f64,
        end_s: f64,
        instrument: impl Into<String>,
        midi_note: u8,
        measure: u32,
        beat: f64,
        note_value: impl Into<String>,
    ) -> Result<Self> {
        if !(start_s >= 0.0 && end_s > start_s) {
            return Err(Error::invalid(format!(
                "label interval [{start_s}, {end_s}) is empty or negative"
            )));
        }
        Ok(LabelRecord {
            start_s,
            end_s,
            instrument: instrument.into(),
            midi_note,
            note_name: note_name(midi_note)?,
            measure,
            beat,
            note_value: note_value.into(),
        })
    }

    /// Half-open sounding interval test.
    pub fn sounds_at(&self, t: f64) -> bool {
        self.start_s <= t && t < self.end_s
    }
}

/// Label records kept sorted by start time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelSet {
    records: Vec<LabelRecord>,
    max_len: f64,
}

impl LabelSet {
    pub fn new(mut records: Vec<LabelRecord>) -> Self {
        records.sort_by(|a, b| {
            a.start_s
                .total_cmp(&b.start_s)
                .then(a.midi_note.cmp(&b.midi_note))
                .then(a.end_s.total_cmp(&b.end_s))
        });
        let max_len = records.iter().map(|r| r.end_s - r.start_s).fold(0.0, f64::max);
        LabelSet { records, max_len }
    }

    pub fn records(&self) -> &[LabelRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Notes sounding at time `t`, collapsed across instruments.
    pub fn notes_at(&self, t: f64) -> LabelVector {
        // records starting after t cannot sound; those starting before
        // t - max_len have ended
        let hi = self.records.partition_point(|r| r.start_s <= t);
        let lo = self.records[..hi].partition_point(|r| r.start_s < t - self.max_len);
        let mut v = LabelVector::default();
        for r in &self.records[lo..hi] {
            if r.sounds_at(t) {
                v.set(r.midi_note);
            }
        }
        v
    }
}

/// Free-function form of [`LabelSet::notes_at`].
pub fn notes_at(labels: &LabelSet, t: f64) -> LabelVector {
    labels.notes_at(t)
}

/// Labels at the score's own times, before any alignment.
pub fn score_labels(score: &Score) -> Result<LabelSet> {
    let records = score
        .events()
        .iter()
        .map(|e| {
            LabelRecord::new(
                e.onset_seconds,
                e.offset_seconds(),
                e.instrument.name(),
                e.midi_note,
                e.measure,
                e.beat,
                e.note_value.to_string(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabelSet::new(records))
}

/// 128-bit note indicator, bit `n` for MIDI note `n`.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct LabelVector(pub u128);

impl LabelVector {
    pub fn from_notes(notes: impl IntoIterator<Item = u8>) -> Self {
        let mut v = LabelVector::default();
        for n in notes {
            v.set(n);
        }
        v
    }

    pub fn set(&mut self, note: u8) {
        self.0 |= 1u128 << (note & 0x7f);
    }

    pub fn contains(&self, note: u8) -> bool {
        note < 128 && self.0 >> note & 1 == 1
    }

    pub fn count(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn intersection(&self, other: &LabelVector) -> LabelVector {
        LabelVector(self.0 & other.0)
    }

    pub fn notes(&self) -> impl Iterator<Item = u8> + '_ {
        (0..128u8).filter(|&n| self.contains(n))
    }

    /// 0/1 encoding as 128 reals.
    pub fn to_dense(&self) -> [f64; 128] {
        let mut out = [0.0; 128];
        for n in self.notes() {
            out[n as usize] = 1.0;
        }
        out
    }
}

impl fmt::Debug for LabelVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.notes()).finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentSpec {
    pub window: usize,
    pub hop: usize,
    pub start_s: f64,
    pub end_s: f64,
}

impl Default for SegmentSpec {
    fn default() -> Self {
        SegmentSpec {
            window: 2048,
            hop: 512,
            start_s: 1.0,
            end_s: 91.0,
        }
    }
}

/// A labeled window of a recording. The samples stay in the source buffer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    /// First sample of the window.
    pub start_sample: usize,
    pub center_sample: usize,
    pub midpoint_s: f64,
    pub labels: LabelVector,
}

impl Segment {
    pub fn window<'a>(&self, audio: &'a AudioBuffer, window: usize) -> &'a [f64] {
        &audio.samples()[self.start_sample..self.start_sample + window]
    }
}

/// Cuts hop-spaced windows centred between `spec.start_s` and `spec.end_s`,
/// each labeled with the notes sounding at its centre.
///
/// Centres whose window would start before the audio are skipped; cutting
/// stops at the first centre past `end_s` or whose window overruns the audio.
pub fn make_segments(audio: &AudioBuffer, labels: &LabelSet, spec: &SegmentSpec) -> Result<Vec<Segment>> {
    if spec.window == 0 || spec.hop == 0 || !(spec.start_s < spec.end_s) || spec.start_s < 0.0 {
        return Err(Error::invalid(format!("invalid segment spec {spec:?}")));
    }
    let sr = audio.sample_rate() as f64;
    let half = spec.window / 2;
    let first = (spec.start_s * sr).round() as usize;
    let mut out = Vec::new();
    let mut center = first;
    loop {
        if center as f64 / sr > spec.end_s || center + (spec.window - half) > audio.len() {
            break;
        }
        if center >= half {
            let midpoint_s = center as f64 / sr;
            out.push(Segment {
                start_sample: center - half,
                center_sample: center,
                midpoint_s,
                labels: labels.notes_at(midpoint_s),
            });
        }
        center += spec.hop;
    }
    if out.is_empty() {
        return Err(Error::EmptySegments(format!(
            "{:.2} s of audio holds no {}-sample window centred in [{}, {}] s",
            audio.duration_s(),
            spec.window,
            spec.start_s,
            spec.end_s
        )));
    }
    Ok(out)
}

const CSV_HEADER: [&str; 7] = ["start", "end", "instrument", "note", "measure", "beat", "note_value"];
const CSV_EXACT: [&str; 2] = ["start_exact", "end_exact"];

/// Writes labels as CSV. Times are shown with two decimals; when `exact`
/// is set the full-precision times follow in two extra columns.
pub fn write_csv<W: Write>(labels: &LabelSet, writer: W, exact: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let map = |e: csv::Error| Error::Csv {
        line: 0,
        message: e.to_string(),
    };
    let mut header: Vec<&str> = CSV_HEADER.to_vec();
    if exact {
        header.extend(CSV_EXACT);
    }
    w.write_record(&header).map_err(map)?;
    for r in labels.records() {
        let mut row = vec![
            format!("{:.2}", r.start_s),
            format!("{:.2}", r.end_s),
            r.instrument.clone(),
            r.note_name.clone(),
            r.measure.to_string(),
            r.beat.to_string(),
            r.note_value.clone(),
        ];
        if exact {
            row.push(r.start_s.to_string());
            row.push(r.end_s.to_string());
        }
        w.write_record(&row).map_err(map)?;
    }
    w.flush().map_err(|e| Error::Csv {
        line: 0,
        message: e.to_string(),
    })
}

/// Reads labels written by [`write_csv`], preferring the exact columns when present.
pub fn read_csv<R: Read>(reader: R) -> Result<LabelSet> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Csv { line: 1, message: e.to_string() })?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < CSV_HEADER.len() || cols[..CSV_HEADER.len()] != CSV_HEADER {
        return Err(Error::Csv {
            line: 1,
            message: format!("expected header {}", CSV_HEADER.join(",")),
        });
    }
    let has_exact = cols.len() >= 9 && cols[7..9] == CSV_EXACT;
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Csv {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let bad = |message: String| Error::Csv { line, message };
        let num = |i: usize, what: &str| -> Result<f64> {
            row.get(i)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(format!("non-numeric {what}: {:?}", row.get(i).unwrap_or(""))))
        };
        let (start, end) = if has_exact {
            (num(7, "start_exact")?, num(8, "end_exact")?)
        } else {
            (num(0, "start")?, num(1, "end")?)
        };
        let note = parse_note_name(row.get(3).unwrap_or("")).map_err(|e| bad(e.to_string()))?;
        let measure = row
            .get(4)
            .and_then(|s| s.trim().parse::<u32>().ok())
            .ok_or_else(|| bad(format!("bad measure {:?}", row.get(4).unwrap_or(""))))?;
        let beat = num(5, "beat")?;
        let record = LabelRecord::new(start, end, row.get(2).unwrap_or(""), note, measure, beat, row.get(6).unwrap_or(""))
            .map_err(|e| bad(e.to_string()))?;
        records.push(record);
    }
    Ok(LabelSet::new(records))
}

pub fn export_csv(labels: &LabelSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(labels, file, true)
}

pub fn import_csv(path: impl AsRef<Path>) -> Result<LabelSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn score_labels_follow_score_time() {
        use crate::score::Instrument;
        let score = Score::from_beats(60.0, &[(60, Instrument::Program(0), 0.0, 1.0), (64, Instrument::Program(40), 2.0, 0.5)]).unwrap();
        let labels = score_labels(&score).unwrap();
        assert_eq!(labels.len(), 2);
        let r = &labels.records()[1];
        assert_eq!((r.start_s, r.end_s, r.midi_note), (2.0, 2.5, 64));
        assert_eq!(labels.notes_at(0.5), LabelVector::from_notes([60]));
    }

    fn table_rows() -> LabelSet {
        LabelSet::new(vec![
            LabelRecord::new(45.29, 45.49, "Violin", 79, 21, 3.0, "Eighth").unwrap(),
            LabelRecord::new(48.99, 50.13, "Cello", 58, 24, 2.0, "Dotted Half").unwrap(),
            LabelRecord::new(82.91, 83.12, "Viola", 72, 51, 2.5, "Eighth").unwrap(),
        ])
    }

    #[test]
    fn point_queries() {
        let labels = table_rows();
        assert_eq!(labels.notes_at(45.3), LabelVector::from_notes([79]));
        assert!(labels.notes_at(10.0).is_empty());
        assert!(labels.notes_at(45.49).is_empty());
        assert_eq!(labels.notes_at(45.29), LabelVector::from_notes([79]));
    }

    #[test]
    fn same_pitch_on_two_instruments_sets_one_bit() {
        let labels = LabelSet::new(vec![
            LabelRecord::new(0.0, 1.0, "Violin", 67, 1, 1.0, "Half").unwrap(),
            LabelRecord::new(0.5, 1.5, "Viola", 67, 1, 2.0, "Half").unwrap(),
            LabelRecord::new(0.5, 1.5, "Viola", 60, 1, 2.0, "Half").unwrap(),
        ]);
        assert_eq!(labels.notes_at(0.75).count(), 2);
    }

    #[test]
    fn csv_rendering_matches_table_style() {
        let mut buf = Vec::new();
        write_csv(&table_rows(), &mut buf, false).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "start,end,instrument,note,measure,beat,note_value");
        assert_eq!(lines[2], "48.99,50.13,Cello,A#3,24,2,Dotted Half");
        assert_eq!(lines[3], "82.91,83.12,Viola,C5,51,2.5,Eighth");
    }

    #[test]
    fn empty_set_writes_header_only() {
        let mut buf = Vec::new();
        write_csv(&LabelSet::default(), &mut buf, true).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "start,end,instrument,note,measure,beat,note_value,start_exact,end_exact\n"
        );
    }

    #[test]
    fn malformed_rows_report_line() {
        let text = "start,end,instrument,note,measure,beat,note_value\n1.0,2.0,Piano,C4,1,1,Quarter\n1.5,abc,Piano,C4,1,1,Quarter\n";
        match read_csv(text.as_bytes()) {
            Err(Error::Csv { line: 3, message }) => assert!(message.contains("abc")),
            other => panic!("{other:?}"),
        }
        assert!(read_csv("a,b\n".as_bytes()).is_err());
        let short = "start,end,instrument,note,measure,beat,note_value\n1.0,2.0\n";
        assert!(read_csv(short.as_bytes()).is_err());
    }

    #[test]
    fn rounded_columns_are_used_without_exact() {
        let text = "start,end,instrument,note,measure,beat,note_value\n45.29,45.49,Violin,G5,21,3,Eighth\n";
        let labels = read_csv(text.as_bytes()).unwrap();
        assert_eq!(labels.records()[0], table_rows().records()[0]);
    }

    #[test]
    fn segment_count_for_ninety_seconds() {
        let audio = AudioBuffer::silence(92 * 44_100, 44_100);
        let segs = make_segments(&audio, &LabelSet::default(), &SegmentSpec::default()).unwrap();
        assert_eq!(segs.len(), 1 + (90.0 * 44_100.0 / 512.0) as usize);
        assert_eq!(segs.len(), 7752);
        for pair in segs.windows(2) {
            assert_eq!(pair[1].center_sample - pair[0].center_sample, 512);
        }
        let s = segs[0];
        assert_eq!((s.start_sample, s.center_sample), (44_100 - 1024, 44_100));
        assert_eq!(s.window(&audio, 2048).len(), 2048);
        assert!(segs.iter().all(|s| s.labels.is_empty()));
    }

    #[test]
    fn segments_stop_at_audio_end() {
        let audio = AudioBuffer::silence(3 * 44_100, 44_100);
        let segs = make_segments(&audio, &LabelSet::default(), &SegmentSpec::default()).unwrap();
        let last = segs.last().unwrap();
        assert!(last.start_sample + 2048 <= audio.len());
        assert!(last.start_sample + 2048 + 512 > audio.len());
        let tiny = AudioBuffer::silence(1000, 44_100);
        assert!(matches!(
            make_segments(&tiny, &LabelSet::default(), &SegmentSpec::default()),
            Err(Error::EmptySegments(_))
        ));
    }

    #[test]
    fn segments_label_from_midpoint() {
        let audio = AudioBuffer::silence(3 * 44_100, 44_100);
        let labels = LabelSet::new(vec![LabelRecord::new(1.2, 1.4, "Piano", 60, 1, 1.0, "Eighth").unwrap()]);
        let spec = SegmentSpec { end_s: 2.0, ..Default::default() };
        for s in make_segments(&audio, &labels, &spec).unwrap() {
            assert_eq!(s.labels.contains(60), (1.2..1.4).contains(&s.midpoint_s));
        }
    }

    fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> LabelSet {
        LabelSet::new(
            (0..n)
                .map(|_| {
                    let start = rng.random_range(0.0..60.0);
                    let len = rng.random_range(0.01..3.0);
                    let note = rng.random_range(21..109u8);
                    let measure = rng.random_range(1..100u32);
                    let beat = rng.random_range(1..8u32) as f64 / 2.0;
                    LabelRecord::new(start, start + len, "Piano", note, measure, beat, "Quarter").unwrap()
                })
                .collect(),
        )
    }

    #[test]
    fn point_queries_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let n = rng.random_range(0..30);
            let labels = random_labels(&mut rng, n);
            let t = rng.random_range(0.0..65.0);
            let brute = LabelVector::from_notes(
                labels.records().iter().filter(|r| r.start_s <= t && t < r.end_s).map(|r| r.midi_note),
            );
            assert_eq!(labels.notes_at(t), brute);
        }
    }

    proptest! {
        #[test]
        fn csv_round_trip(seed in any::<u64>(), n in 0usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels = random_labels(&mut rng, n);
            let mut buf = Vec::new();
            write_csv(&labels, &mut buf, true).unwrap();
            prop_assert_eq!(read_csv(buf.as_slice()).unwrap(), labels);
        }
    }
}
