//! Frame-level spectral features: spectrogram, log-spectrogram and ReLUgram.
//!
//! For a window `x` of even length `t`, bin `k` (for `k` in `0..=t/2`) uses
//! the cosine and sine projections
//!
//! ```text
//! c_k = sum_s cos(2 pi k s / t) x_s        s_k = sum_s sin(2 pi k s / t) x_s
//! ```
//!
//! The spectrogram is `c_k^2 + s_k^2` and the ReLUgram is `|c_k| + |s_k|`.
//! No window function is applied. The log kinds apply `y -> ln(1 + y)`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};

/// Window lengths accepted by [`featurize`].
pub const FEATURE_WINDOWS: [usize; 6] = [512, 1024, 2048, 4096, 8192, 16384];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    Spectrogram,
    LogSpectrogram,
    Relugram,
    LogRelugram,
    Raw,
}

impl FeatureKind {
    pub(crate) fn code(self) -> u32 {
        match self {
            FeatureKind::Spectrogram => 1,
            FeatureKind::LogSpectrogram => 2,
            FeatureKind::Relugram => 3,
            FeatureKind::LogRelugram => 4,
            FeatureKind::Raw => 5,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        Some(match code {
            1 => FeatureKind::Spectrogram,
            2 => FeatureKind::LogSpectrogram,
            3 => FeatureKind::Relugram,
            4 => FeatureKind::LogRelugram,
            5 => FeatureKind::Raw,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Spectrogram => "spectrogram",
            FeatureKind::LogSpectrogram => "log-spectrogram",
            FeatureKind::Relugram => "relugram",
            FeatureKind::LogRelugram => "log-relugram",
            FeatureKind::Raw => "raw",
        }
    }

    /// Feature dimensionality for a window of `window` samples.
    pub fn dims(self, window: usize) -> usize {
        match self {
            FeatureKind::Raw => window,
            _ => window / 2 + 1,
        }
    }

    fn is_log(self) -> bool {
        matches!(self, FeatureKind::LogSpectrogram | FeatureKind::LogRelugram)
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            FeatureKind::Spectrogram,
            FeatureKind::LogSpectrogram,
            FeatureKind::Relugram,
            FeatureKind::LogRelugram,
            FeatureKind::Raw,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
        .ok_or_else(|| Error::invalid(format!("unknown feature kind {s:?}")))
    }
}

/// Frames x dims matrix of features, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f64>,
    frames: usize,
    dims: usize,
    pub kind: FeatureKind,
    pub window: usize,
    pub stride: usize,
    pub sample_rate: u32,
}

impl FeatureMatrix {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn row(&self, frame: usize) -> &[f64] {
        &self.data[frame * self.dims..(frame + 1) * self.dims]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dims.max(1))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Time in seconds of the centre of `frame`.
    pub fn frame_center_s(&self, frame: usize) -> f64 {
        (frame * self.stride) as f64 / self.sample_rate as f64
            + self.window as f64 / (2.0 * self.sample_rate as f64)
    }
}

fn check_window(t: usize) -> Result<()> {
    if t < 2 || !t.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "window length must be even and at least 2, got {t}"
        )));
    }
    Ok(())
}

/// FFT-backed evaluator of the per-bin cosine and sine projections.
pub struct Projector {
    fft: Arc<dyn Fft<f64>>,
    buf: Vec<Complex<f64>>,
    scratch: Vec<Complex<f64>>,
}

impl Projector {
    pub fn new(window: usize) -> Result<Self> {
        check_window(window)?;
        let fft = FftPlanner::new().plan_fft_forward(window);
        let scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];
        Ok(Projector {
            fft,
            buf: vec![Complex::default(); window],
            scratch,
        })
    }

    pub fn window(&self) -> usize {
        self.buf.len()
    }

    /// Computes `(c_k, s_k)` for `k = 0..=t/2` and hands each pair to `out`.
    fn project(&mut self, x: &[f64], mut out: impl FnMut(usize, f64, f64)) -> Result<()> {
        if x.len() != self.buf.len() {
            return Err(Error::DimensionMismatch {
                expected: self.buf.len(),
                actual: x.len(),
            });
        }
        for (b, &v) in self.buf.iter_mut().zip(x) {
            *b = Complex::new(v, 0.0);
        }
        self.fft.process_with_scratch(&mut self.buf, &mut self.scratch);
        // X_k = c_k - i s_k
        for (k, z) in self.buf[..=x.len() / 2].iter().enumerate() {
            out(k, z.re, -z.im);
        }
        Ok(())
    }

    pub fn spectrogram_into(&mut self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.project(x, |k, c, s| out[k] = c * c + s * s)
    }

    pub fn relugram_into(&mut self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.project(x, |k, c, s| out[k] = c.abs() + s.abs())
    }
}

/// Spectrogram of one window: `t/2 + 1` nonnegative bins.
pub fn spec_window(x: &[f64]) -> Result<Vec<f64>> {
    check_window(x.len())?;
    let mut out = vec![0.0; x.len() / 2 + 1];
    Projector::new(x.len())?.spectrogram_into(x, &mut out)?;
    Ok(out)
}

/// ReLUgram of one window: `|c_k| + |s_k|` per bin.
pub fn relugram_window(x: &[f64]) -> Result<Vec<f64>> {
    check_window(x.len())?;
    let mut out = vec![0.0; x.len() / 2 + 1];
    Projector::new(x.len())?.relugram_into(x, &mut out)?;
    Ok(out)
}

/// Centre frequency in Hz of bin `k`.
pub fn bin_frequency(k: usize, window: usize, sample_rate: u32) -> Result<f64> {
    if window == 0 || k > window / 2 {
        return Err(Error::invalid(format!(
            "bin {k} out of range for window {window}"
        )));
    }
    Ok(k as f64 * sample_rate as f64 / window as f64)
}

/// Number of frames a signal of `len` samples yields.
pub fn frame_count(len: usize, window: usize, stride: usize) -> usize {
    if len < window || stride == 0 {
        0
    } else {
        (len - window) / stride + 1
    }
}

/// Featurizes a window of samples with a caller-owned projector.
pub fn featurize_window(
    projector: &mut Projector,
    kind: FeatureKind,
    x: &[f64],
    out: &mut [f64],
) -> Result<()> {
    match kind {
        FeatureKind::Raw => out.copy_from_slice(x),
        FeatureKind::Spectrogram | FeatureKind::LogSpectrogram => projector.spectrogram_into(x, out)?,
        FeatureKind::Relugram | FeatureKind::LogRelugram => projector.relugram_into(x, out)?,
    }
    if kind.is_log() {
        for v in out.iter_mut() {
            *v = v.ln_1p();
        }
    }
    Ok(())
}

/// Slides a rectangular window over the signal. Frame `f` covers samples
/// `[f * stride, f * stride + window)`.
pub fn featurize(
    audio: &AudioBuffer,
    kind: FeatureKind,
    window: usize,
    stride: usize,
) -> Result<FeatureMatrix> {
    if !FEATURE_WINDOWS.contains(&window) {
        return Err(Error::invalid(format!(
            "window {window} not in {FEATURE_WINDOWS:?}"
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    if audio.len() < window {
        return Err(Error::invalid(format!(
            "audio has {} samples, shorter than the {window}-sample window",
            audio.len()
        )));
    }
    let frames = frame_count(audio.len(), window, stride);
    let dims = kind.dims(window);
    let samples = audio.samples();
    let mut data = vec![0.0; frames * dims];
    data.par_chunks_mut(dims)
        .enumerate()
        .try_for_each_init(
            || Projector::new(window),
            |proj, (f, row)| {
                let proj = proj.as_mut().map_err(|e| Error::invalid(e.to_string()))?;
                let start = f * stride;
                featurize_window(proj, kind, &samples[start..start + window], row)
            },
        )?;
    Ok(FeatureMatrix {
        data,
        frames,
        dims,
        kind,
        window,
        stride,
        sample_rate: audio.sample_rate(),
    })
}

const FMAT_MAGIC: &[u8; 4] = b"FMAT";
const FMAT_VERSION: u32 = 1;

/// Serializes to the FMAT layout: magic, then version, kind, window, stride,
/// sample rate, frames and dims as little-endian u32, then row-major f32.
pub fn encode_features(m: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + m.data.len() * 4);
    out.extend_from_slice(FMAT_MAGIC);
    for v in [
        FMAT_VERSION,
        m.kind.code(),
        m.window as u32,
        m.stride as u32,
        m.sample_rate,
        m.frames as u32,
        m.dims as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in &m.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureMatrix> {
    let bad = |message: String| Error::Format {
        format: "FMAT",
        message,
    };
    if bytes.len() < 32 || &bytes[0..4] != FMAT_MAGIC {
        return Err(bad("missing FMAT header".into()));
    }
    let field = |i: usize| {
        let at = 4 + 4 * i;
        u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
    };
    if field(0) != FMAT_VERSION {
        return Err(bad(format!("unsupported version {}", field(0))));
    }
    let kind = FeatureKind::from_code(field(1)).ok_or_else(|| bad(format!("unknown kind {}", field(1))))?;
    let (frames, dims) = (field(5) as usize, field(6) as usize);
    let expected = frames
        .checked_mul(dims)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| bad("shape overflows".into()))?;
    if bytes.len() - 32 != expected {
        return Err(bad(format!(
            "expected {expected} data bytes, found {}",
            bytes.len() - 32
        )));
    }
    let data = bytes[32..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(FeatureMatrix {
        data,
        frames,
        dims,
        kind,
        window: field(2) as usize,
        stride: field(3) as usize,
        sample_rate: field(4),
    })
}

pub fn write_features(m: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_features(m)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    decode_features(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
