//! Score-to-performance alignment by dynamic time warping.
//!
//! The score is rendered with [`crate::synth`], both recordings are
//! featurized, and each (synthesis frame, performance frame) pair is scored
//! by a norm of the difference of their low-frequency bins. DTW then finds
//! the monotone frame correspondence of least total cost, and score events
//! are carried through it onto performance time.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::dataset::{LabelRecord, LabelSet};
use crate::dsp::{featurize, FeatureKind, FeatureMatrix};
use crate::error::{Error, Result};
use crate::score::{note_name, Score};
use crate::synth::{normalize_peak, render_tones, score_tones, SynthConfig, Tone};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L1,
    L2,
    Linf,
}

/// How label end times are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OffsetMode {
    /// Map the score offset through the warping path, like the onset.
    Path,
    /// Scale the score duration by the local tempo ratio at the onset.
    ScaledDuration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub window: usize,
    pub stride: usize,
    /// Only bins `0..cutoff_dims` enter the frame cost.
    pub cutoff_dims: usize,
    pub feature_kind: FeatureKind,
    pub norm: Norm,
    /// Sakoe-Chiba band half-width in performance frames; `None` searches the full grid.
    pub band_radius: Option<usize>,
    /// Upper bound on DTW working memory.
    pub memory_budget_mb: u64,
    /// Silence placed before and after the synthesized score.
    pub lead_in_s: f64,
    pub offset_mode: OffsetMode,
    /// Half-width, in score frames, of the slope estimate behind the tempo ratio.
    pub tempo_window: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            window: 2048,
            stride: 512,
            cutoff_dims: 50,
            feature_kind: FeatureKind::LogSpectrogram,
            norm: Norm::L2,
            band_radius: None,
            memory_budget_mb: 2048,
            lead_in_s: 0.1,
            offset_mode: OffsetMode::Path,
            tempo_window: 16,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::invalid("align.stride must be positive"));
        }
        if self.cutoff_dims == 0 || self.cutoff_dims > self.feature_kind.dims(self.window) {
            return Err(Error::invalid(format!(
                "align.cutoff_dims {} must be in 1..={}",
                self.cutoff_dims,
                self.feature_kind.dims(self.window)
            )));
        }
        if !(self.lead_in_s >= 0.0) {
            return Err(Error::invalid("align.lead_in_s must be nonnegative"));
        }
        Ok(())
    }
}

/// Distance between a performance frame and a synthesized frame over the
/// first `cutoff_dims` coordinates.
pub fn frame_cost(x: &[f64], y: &[f64], config: &AlignConfig) -> Result<f64> {
    let d = config.cutoff_dims;
    for len in [x.len(), y.len()] {
        if len < d {
            return Err(Error::DimensionMismatch { expected: d, actual: len });
        }
    }
    Ok(norm_of_difference(&x[..d], &y[..d], config.norm))
}

fn norm_of_difference(x: &[f64], y: &[f64], norm: Norm) -> f64 {
    let diffs = x.iter().zip(y).map(|(a, b)| (a - b).abs());
    match norm {
        Norm::L1 => diffs.sum(),
        Norm::L2 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
        Norm::Linf => diffs.fold(0.0, f64::max),
    }
}

/// Dense row-major matrix of local costs, rows indexed by score frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged cost matrix"));
        }
        CostMatrix::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn transpose(&self) -> CostMatrix {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self.get(i, j));
            }
        }
        CostMatrix {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }
}

/// Monotone correspondence from score frames to performance frames.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpPath {
    /// `(score_frame, performance_frame)` from `(0, 0)` to `(n - 1, m - 1)`.
    pub pairs: Vec<(usize, usize)>,
    /// Local cost of each pair.
    pub costs: Vec<f64>,
    pub total_cost: f64,
}

impl WarpPath {
    /// First performance frame paired with each score frame.
    pub fn first_match(&self) -> Vec<usize> {
        let rows = self.pairs.last().map_or(0, |p| p.0 + 1);
        let mut out = vec![usize::MAX; rows];
        for &(i, j) in &self.pairs {
            if out[i] == usize::MAX {
                out[i] = j;
            }
        }
        out
    }
}

/// Per-row inclusive column ranges of the searched region.
struct Band {
    cols: usize,
    ranges: Vec<(usize, usize)>,
    offsets: Vec<usize>,
}

impl Band {
    fn full(rows: usize, cols: usize) -> Band {
        Band::from_ranges(cols, vec![(0, cols - 1); rows])
    }

    /// Band of half-width `radius` around the straight line joining the corners.
    /// The radius is widened to the line's slope so consecutive rows stay connected.
    fn sakoe_chiba(rows: usize, cols: usize, radius: usize) -> Band {
        if rows == 1 {
            return Band::full(rows, cols);
        }
        let slope = (cols - 1) as f64 / (rows - 1) as f64;
        let r = radius.max(slope.ceil() as usize);
        let ranges = (0..rows)
            .map(|i| {
                let c = i as f64 * slope;
                let lo = (c.floor() as usize).saturating_sub(r);
                let hi = ((c.ceil() as usize) + r).min(cols - 1);
                (lo, hi)
            })
            .collect();
        Band::from_ranges(cols, ranges)
    }

    fn from_ranges(cols: usize, ranges: Vec<(usize, usize)>) -> Band {
        let mut offsets = Vec::with_capacity(ranges.len() + 1);
        let mut acc = 0;
        for &(lo, hi) in &ranges {
            offsets.push(acc);
            acc += hi - lo + 1;
        }
        offsets.push(acc);
        Band { cols, ranges, offsets }
    }

    fn cells(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    fn index(&self, i: usize, j: usize) -> Option<usize> {
        let (lo, hi) = *self.ranges.get(i)?;
        (lo..=hi).contains(&j).then(|| self.offsets[i] + j - lo)
    }
}

fn check_budget(rows: usize, cols: usize, cells: usize, budget_mb: u64) -> Result<()> {
    // local costs plus accumulated costs
    let required_bytes = cells as u64 * 16;
    let budget_bytes = budget_mb.saturating_mul(1 << 20);
    if required_bytes > budget_bytes {
        return Err(Error::MemoryBudget {
            rows,
            cols,
            required_bytes,
            budget_bytes,
        });
    }
    Ok(())
}

/// Minimum-cost monotone path through the whole cost matrix.
///
/// Steps are `(1, 0)`, `(0, 1)` and `(1, 1)`. When backtracking, ties
/// prefer the diagonal, then a performance-only step, then a score-only step.
pub fn dtw(cost: &CostMatrix) -> Result<WarpPath> {
    if cost.rows == 0 || cost.cols == 0 {
        return Err(Error::invalid("empty cost matrix"));
    }
    if let Some(pos) = cost.data.iter().position(|c| !c.is_finite() || *c < 0.0) {
        return Err(Error::invalid(format!(
            "cost entry ({}, {}) is {}; entries must be finite and nonnegative",
            pos / cost.cols,
            pos % cost.cols,
            cost.data[pos]
        )));
    }
    let band = Band::full(cost.rows, cost.cols);
    solve(&band, &cost.data)
}

/// DTW restricted to a Sakoe-Chiba band, computing costs on demand.
pub fn dtw_banded<F>(rows: usize, cols: usize, radius: usize, cost: F) -> Result<WarpPath>
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("empty cost matrix"));
    }
    let band = Band::sakoe_chiba(rows, cols, radius);
    let local = fill_band(&band, &cost);
    if let Some(c) = local.iter().find(|c| !c.is_finite() || **c < 0.0) {
        return Err(Error::invalid(format!("cost entry {c} is not finite and nonnegative")));
    }
    solve(&band, &local)
}

fn fill_band<F>(band: &Band, cost: &F) -> Vec<f64>
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    let mut local = vec![0.0; band.cells()];
    let mut rows: Vec<&mut [f64]> = Vec::with_capacity(band.ranges.len());
    let mut rest = local.as_mut_slice();
    for &(lo, hi) in &band.ranges {
        let (row, tail) = rest.split_at_mut(hi - lo + 1);
        rows.push(row);
        rest = tail;
    }
    rows.into_par_iter().enumerate().for_each(|(i, row)| {
        let lo = band.ranges[i].0;
        for (k, slot) in row.iter_mut().enumerate() {
            *slot = cost(i, lo + k);
        }
    });
    local
}

fn solve(band: &Band, local: &[f64]) -> Result<WarpPath> {
    let rows = band.ranges.len();
    let mut acc = vec![f64::INFINITY; local.len()];
    let at = |acc: &[f64], i: usize, j: usize| band.index(i, j).map_or(f64::INFINITY, |k| acc[k]);
    for i in 0..rows {
        let (lo, hi) = band.ranges[i];
        for j in lo..=hi {
            let k = band.offsets[i] + j - lo;
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let mut m = f64::INFINITY;
                if i > 0 && j > 0 {
                    m = m.min(at(&acc, i - 1, j - 1));
                }
                if j > lo {
                    m = m.min(acc[k - 1]);
                }
                if i > 0 {
                    m = m.min(at(&acc, i - 1, j));
                }
                m
            };
            acc[k] = best + local[k];
        }
    }

    let (mut i, mut j) = (rows - 1, band.cols - 1);
    let end = band
        .index(i, j)
        .ok_or_else(|| Error::invalid("band does not reach the final cell"))?;
    let total_cost = acc[end];
    if !total_cost.is_finite() {
        return Err(Error::invalid("no admissible path through the band"));
    }
    let mut pairs = vec![(i, j)];
    let mut costs = vec![local[end]];
    while (i, j) != (0, 0) {
        let mut best: Option<((usize, usize), f64)> = None;
        let mut consider = |cand: (usize, usize)| {
            let v = at(&acc, cand.0, cand.1);
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((cand, v));
            }
        };
        if i > 0 && j > 0 {
            consider((i - 1, j - 1));
        }
        if j > 0 {
            consider((i, j - 1));
        }
        if i > 0 {
            consider((i - 1, j));
        }
        let ((ni, nj), _) = best.expect("a non-origin cell has a predecessor");
        i = ni;
        j = nj;
        pairs.push((i, j));
        costs.push(local[band.index(i, j).unwrap()]);
    }
    pairs.reverse();
    costs.reverse();
    Ok(WarpPath {
        pairs,
        costs,
        total_cost,
    })
}

/// Local costs between every synthesized frame (rows) and performance frame (columns).
pub fn cost_matrix(score: &FeatureMatrix, performance: &FeatureMatrix, config: &AlignConfig) -> Result<CostMatrix> {
    let d = config.cutoff_dims;
    for dims in [score.dims(), performance.dims()] {
        if dims < d {
            return Err(Error::DimensionMismatch { expected: d, actual: dims });
        }
    }
    let (n, m) = (score.frames(), performance.frames());
    let mut data = vec![0.0; n * m];
    data.par_chunks_mut(m.max(1)).enumerate().for_each(|(i, row)| {
        let y = &score.row(i)[..d];
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = norm_of_difference(&performance.row(j)[..d], y, config.norm);
        }
    });
    CostMatrix::new(n, m, data)
}

/// Output of [`align`].
#[derive(Debug, Clone)]
pub struct Alignment {
    pub path: WarpPath,
    pub score_frames: usize,
    pub performance_frames: usize,
    /// Local slope of the path per score frame: performance frames per score frame.
    pub tempo_ratio: Vec<f64>,
    pub mean_tempo_ratio: f64,
    pub median_tempo_ratio: f64,
}

/// Renders the score the way [`align`] does: tones delayed by the lead-in,
/// with the same amount of silence after the last note.
pub fn synthesize_for_alignment(score: &Score, sample_rate: u32, config: &AlignConfig, synth: &SynthConfig) -> Result<AudioBuffer> {
    synth.validate()?;
    let lead = config.lead_in_s;
    let tones: Vec<Tone> = score_tones(score)
        .into_iter()
        .map(|t| Tone {
            onset_s: t.onset_s + lead,
            ..t
        })
        .collect();
    let end = score.end_seconds() + 2.0 * lead;
    let len = ((end * sample_rate as f64).ceil() as usize).max(config.window);
    let mut samples = render_tones(&tones, len, sample_rate, synth);
    normalize_peak(&mut samples, synth.peak);
    AudioBuffer::new(samples, sample_rate)
}

/// Aligns a performance to a score: synthesize, featurize both, build the
/// cost matrix and run DTW.
pub fn align(performance: &AudioBuffer, score: &Score, config: &AlignConfig, synth: &SynthConfig) -> Result<Alignment> {
    config.validate()?;
    if score.is_empty() {
        return Err(Error::invalid("cannot align an empty score"));
    }
    let rendered = synthesize_for_alignment(score, performance.sample_rate(), config, synth)?;
    let synth_feats = featurize(&rendered, config.feature_kind, config.window, config.stride)?;
    let perf_feats = featurize(performance, config.feature_kind, config.window, config.stride)?;
    let (n, m) = (synth_feats.frames(), perf_feats.frames());

    let path = match config.band_radius {
        None => {
            check_budget(n, m, n * m, config.memory_budget_mb)?;
            dtw(&cost_matrix(&synth_feats, &perf_feats, config)?)?
        }
        Some(radius) => {
            let band = Band::sakoe_chiba(n, m, radius);
            check_budget(n, m, band.cells(), config.memory_budget_mb)?;
            let d = config.cutoff_dims;
            dtw_banded(n, m, radius, |i, j| {
                norm_of_difference(&perf_feats.row(j)[..d], &synth_feats.row(i)[..d], config.norm)
            })?
        }
    };
    let tempo_ratio = tempo_ratios(&path, config.tempo_window);
    // summary statistics skip the padding silence around the rendered score
    let sr = performance.sample_rate() as f64;
    let music = config.lead_in_s..=config.lead_in_s + score.end_seconds();
    let inside: Vec<f64> = tempo_ratio
        .iter()
        .enumerate()
        .filter(|(i, _)| music.contains(&((i * config.stride) as f64 / sr + config.window as f64 / (2.0 * sr))))
        .map(|(_, &r)| r)
        .collect();
    let summary = if inside.is_empty() { &tempo_ratio } else { &inside };
    let mean_tempo_ratio = summary.iter().sum::<f64>() / summary.len() as f64;
    let median_tempo_ratio = median(summary);
    Ok(Alignment {
        path,
        score_frames: n,
        performance_frames: m,
        tempo_ratio,
        mean_tempo_ratio,
        median_tempo_ratio,
    })
}

/// Slope of the path around each score frame, estimated over `half_width`
/// frames on either side.
pub fn tempo_ratios(path: &WarpPath, half_width: usize) -> Vec<f64> {
    let first = path.first_match();
    let n = first.len();
    if n < 2 {
        return vec![1.0; n];
    }
    let w = half_width.max(1);
    (0..n)
        .map(|i| {
            let a = i.saturating_sub(w);
            let b = (i + w).min(n - 1);
            (first[b] as f64 - first[a] as f64) / (b - a) as f64
        })
        .collect()
}

pub(crate) fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    }
}

/// Performance-time `(start, end)` of every score event, in score event order.
///
/// A score time is placed on its nearest synthesis frame, carried to the
/// first performance frame paired with that frame, and keeps its offset from
/// the frame centre.
pub fn transfer_events(path: &WarpPath, score: &Score, sample_rate: u32, config: &AlignConfig) -> Result<Vec<(f64, f64)>> {
    let first = path.first_match();
    let n = first.len();
    if n == 0 {
        return Err(Error::invalid("empty warping path"));
    }
    let sr = sample_rate as f64;
    let hop_s = config.stride as f64 / sr;
    let center = |frame: usize| frame as f64 * hop_s + config.window as f64 / (2.0 * sr);
    let synth_end = center(n - 1) + config.window as f64 / (2.0 * sr);
    let ratios = tempo_ratios(path, config.tempo_window);

    let map = |t: f64| -> Result<(f64, usize)> {
        let ts = t + config.lead_in_s;
        if ts > synth_end + 1e-9 {
            return Err(Error::invalid(format!(
                "score time {t:.3} s lies outside the aligned region"
            )));
        }
        let i = ((ts - center(0)) / hop_s).round().clamp(0.0, (n - 1) as f64) as usize;
        Ok(((center(first[i]) + ts - center(i)).max(0.0), i))
    };

    score
        .events()
        .iter()
        .map(|e| {
            let (start, row) = map(e.onset_seconds)?;
            let end = match config.offset_mode {
                OffsetMode::Path => map(e.offset_seconds())?.0,
                OffsetMode::ScaledDuration => start + e.duration_seconds * ratios[row],
            };
            Ok((start, end.max(start + hop_s)))
        })
        .collect()
}

/// Labels for the performance: every score event at its aligned time.
pub fn transfer_labels(path: &WarpPath, score: &Score, sample_rate: u32, config: &AlignConfig) -> Result<LabelSet> {
    let times = transfer_events(path, score, sample_rate, config)?;
    let records = score
        .events()
        .iter()
        .zip(times)
        .map(|(e, (start, end))| {
            Ok(LabelRecord {
                start_s: start,
                end_s: end,
                instrument: e.instrument.name(),
                midi_note: e.midi_note,
                note_name: note_name(e.midi_note)?,
                measure: e.measure,
                beat: e.beat,
                note_value: e.note_value.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabelSet::new(records))
}

/// Writes `score_frame,performance_frame,cost` rows followed by a summary.
pub fn write_report<W: Write>(alignment: &Alignment, mut w: W) -> std::io::Result<()> {
    writeln!(w, "score_frame,performance_frame,cost")?;
    for (&(i, j), c) in alignment.path.pairs.iter().zip(&alignment.path.costs) {
        writeln!(w, "{i},{j},{c}")?;
    }
    writeln!(w, "# total_cost,{}", alignment.path.total_cost)?;
    writeln!(w, "# mean_tempo_ratio,{}", alignment.mean_tempo_ratio)?;
    writeln!(w, "# median_tempo_ratio,{}", alignment.median_tempo_ratio)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive minimum over all monotone step paths.
    fn brute_force(c: &CostMatrix) -> f64 {
        fn go(c: &CostMatrix, i: usize, j: usize) -> f64 {
            let here = c.get(i, j);
            if i == c.rows() - 1 && j == c.cols() - 1 {
                return here;
            }
            let mut best = f64::INFINITY;
            if i + 1 < c.rows() {
                best = best.min(go(c, i + 1, j));
            }
            if j + 1 < c.cols() {
                best = best.min(go(c, i, j + 1));
            }
            if i + 1 < c.rows() && j + 1 < c.cols() {
                best = best.min(go(c, i + 1, j + 1));
            }
            here + best
        }
        go(c, 0, 0)
    }

    fn check_path_shape(p: &WarpPath, n: usize, m: usize) {
        assert_eq!(p.pairs[0], (0, 0));
        assert_eq!(*p.pairs.last().unwrap(), (n - 1, m - 1));
        for w in p.pairs.windows(2) {
            let (di, dj) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
            assert!(matches!((di, dj), (1, 0) | (0, 1) | (1, 1)));
        }
        let sum: f64 = p.costs.iter().sum();
        assert!((sum - p.total_cost).abs() < 1e-9);
    }

    #[test]
    fn frame_cost_cutoff() {
        let cfg = AlignConfig { cutoff_dims: 2, ..Default::default() };
        assert_eq!(frame_cost(&[3.0, 4.0, 99.0], &[0.0, 0.0, 0.0], &cfg).unwrap(), 5.0);
        assert_eq!(frame_cost(&[1.0, 2.0], &[1.0, 2.0], &cfg).unwrap(), 0.0);
        assert!(frame_cost(&[1.0], &[1.0, 2.0], &cfg).is_err());
        let l1 = AlignConfig { norm: Norm::L1, ..cfg.clone() };
        assert_eq!(frame_cost(&[3.0, -4.0], &[0.0, 0.0], &l1).unwrap(), 7.0);
        let linf = AlignConfig { norm: Norm::Linf, ..cfg };
        assert_eq!(frame_cost(&[3.0, -4.0], &[0.0, 0.0], &linf).unwrap(), 4.0);
    }

    #[test]
    fn frame_cost_matches_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..1025).map(|_| rng.random_range(0.0..10.0)).collect();
        let y: Vec<f64> = (0..1025).map(|_| rng.random_range(0.0..10.0)).collect();
        let mut s = 0.0;
        for k in 0..50 {
            s += (x[k] - y[k]) * (x[k] - y[k]);
        }
        let got = frame_cost(&x, &y, &AlignConfig::default()).unwrap();
        assert!((got - s.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn one_by_one() {
        let p = dtw(&CostMatrix::from_rows(&[vec![2.5]]).unwrap()).unwrap();
        assert_eq!(p.pairs, vec![(0, 0)]);
        assert_eq!(p.total_cost, 2.5);
    }

    #[test]
    fn zero_diagonal_is_followed() {
        let n = 6;
        let rows: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 0.0 } else { 1.0 + (i + j) as f64 }).collect()).collect();
        let p = dtw(&CostMatrix::from_rows(&rows).unwrap()).unwrap();
        assert_eq!(p.pairs, (0..n).map(|i| (i, i)).collect::<Vec<_>>());
        assert_eq!(p.total_cost, 0.0);
    }

    #[test]
    fn ties_prefer_diagonal_then_performance_step() {
        let p = dtw(&CostMatrix::from_rows(&vec![vec![0.0; 3]; 3]).unwrap()).unwrap();
        assert_eq!(p.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        let p = dtw(&CostMatrix::from_rows(&vec![vec![0.0; 3]; 2]).unwrap()).unwrap();
        // backtracking from (1,2): diagonal to (0,1), then the performance step to (0,0)
        assert_eq!(p.pairs, vec![(0, 0), (0, 1), (1, 2)]);
    }

    #[test]
    fn rejects_bad_matrices() {
        assert!(dtw(&CostMatrix::new(0, 0, vec![]).unwrap()).is_err());
        assert!(dtw(&CostMatrix::from_rows(&[vec![0.0, f64::NAN]]).unwrap()).is_err());
        assert!(dtw(&CostMatrix::from_rows(&[vec![0.0, -1.0]]).unwrap()).is_err());
    }

    #[test]
    fn random_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..6).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
            let c = CostMatrix::from_rows(&rows).unwrap();
            let p = dtw(&c).unwrap();
            check_path_shape(&p, 4, 6);
            assert!((p.total_cost - brute_force(&c)).abs() < 1e-12);
        }
    }

    #[test]
    fn every_small_ternary_matrix() {
        // all 3x3 matrices over {0, 0.5, 1}
        let vals = [0.0, 0.5, 1.0];
        for code in 0..3usize.pow(9) {
            let mut c = code;
            let data: Vec<f64> = (0..9)
                .map(|_| {
                    let v = vals[c % 3];
                    c /= 3;
                    v
                })
                .collect();
            let m = CostMatrix::new(3, 3, data).unwrap();
            let p = dtw(&m).unwrap();
            assert_eq!(p.total_cost, brute_force(&m));
            assert_eq!(dtw(&m.transpose()).unwrap().total_cost, p.total_cost);
        }
    }

    #[test]
    fn wide_band_equals_full_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<f64>> = (0..15).map(|_| (0..40).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let c = CostMatrix::from_rows(&rows).unwrap();
        let full = dtw(&c).unwrap();
        let banded = dtw_banded(15, 40, 40, |i, j| c.get(i, j)).unwrap();
        assert_eq!(full, banded);
        let narrow = dtw_banded(15, 40, 1, |i, j| c.get(i, j)).unwrap();
        check_path_shape(&narrow, 15, 40);
        assert!(narrow.total_cost >= full.total_cost);
    }

    #[test]
    fn memory_budget_is_reported() {
        let err = check_budget(100_000, 100_000, 100_000 * 100_000, 1024).unwrap_err();
        match err {
            Error::MemoryBudget { required_bytes, .. } => assert_eq!(required_bytes, 160_000_000_000),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn tempo_ratio_of_straight_paths() {
        let pairs: Vec<(usize, usize)> = (0..50).flat_map(|i| [(i, 2 * i), (i, 2 * i + 1)]).collect();
        let p = WarpPath { costs: vec![0.0; pairs.len()], pairs, total_cost: 0.0 };
        let r = tempo_ratios(&p, 4);
        assert!(r.iter().all(|&v| (v - 2.0).abs() < 1e-12));
    }

    proptest! {
        #[test]
        fn cost_invariants(
            n in 1usize..6,
            m in 1usize..6,
            seed in any::<u64>(),
            shift in 0.0f64..3.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..n * m).map(|_| [0.0, 0.5, 1.0][rng.random_range(0..3)]).collect();
            let c = CostMatrix::new(n, m, data.clone()).unwrap();
            let p = dtw(&c).unwrap();
            check_path_shape(&p, n, m);
            prop_assert_eq!(p.total_cost, brute_force(&c));
            prop_assert_eq!(dtw(&c.transpose()).unwrap().total_cost, p.total_cost);
            let len = p.pairs.len();
            prop_assert!(len >= n.max(m) && len < n + m);
            // shifting every entry by a constant adds shift * (path length)
            let shifted = CostMatrix::new(n, m, data.iter().map(|v| v + shift).collect()).unwrap();
            let ps = dtw(&shifted).unwrap();
            let expected = p.total_cost + shift * len as f64;
            prop_assert!(ps.total_cost <= expected + 1e-9);
        }
    }
}
