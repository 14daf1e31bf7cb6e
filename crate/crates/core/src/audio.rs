//! WAV reading and writing, and the canonical in-memory signal.
//!
//! Only the two sample encodings the toolkit needs are supported: 16-bit
//! PCM (format code 1) and 32-bit IEEE float (format code 3). Stereo input
//! is mixed down to mono by averaging the channels.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Sample rate every pipeline stage assumes.
pub const CANONICAL_RATE: u32 = 44_100;

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;

/// A mono signal with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
}

/// Sample encoding used by [`write_wav`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

impl AudioBuffer {
    /// Builds a buffer, rejecting non-finite samples and a zero rate.
    ///
    /// Samples outside `[-1, 1]` are accepted here; they are rejected when
    /// the buffer is written.
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("sample {i} is not finite")));
        }
        Ok(AudioBuffer {
            samples,
            sample_rate,
        })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        AudioBuffer {
            samples: vec![0.0; len],
            sample_rate: sample_rate.max(1),
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }
}

/// Returns the buffer unchanged if it is at `rate`, otherwise a mismatch error.
pub fn require_rate(buffer: AudioBuffer, rate: u32) -> Result<AudioBuffer> {
    if buffer.sample_rate == rate {
        Ok(buffer)
    } else {
        Err(Error::RateMismatch {
            actual: buffer.sample_rate,
            required: rate,
        })
    }
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes)
}

pub fn write_wav(buffer: &AudioBuffer, path: impl AsRef<Path>, format: SampleFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_wav(buffer, format)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn wav_err(msg: impl Into<String>) -> Error {
    Error::Wav(msg.into())
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

struct FmtChunk {
    format: u16,
    channels: u16,
    sample_rate: u32,
    bits: u16,
}

/// Decodes an in-memory RIFF/WAVE file.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioBuffer> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(wav_err("missing RIFF/WAVE header"));
    }
    let mut fmt: Option<FmtChunk> = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| wav_err(format!("chunk at offset {pos} runs past end of file")))?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(wav_err("fmt chunk shorter than 16 bytes"));
                }
                fmt = Some(FmtChunk {
                    format: u16_at(body, 0),
                    channels: u16_at(body, 2),
                    sample_rate: u32_at(body, 4),
                    bits: u16_at(body, 14),
                });
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // chunks are word aligned
        pos = body_end + (size & 1);
    }
    let fmt = fmt.ok_or_else(|| wav_err("no fmt chunk"))?;
    let data = data.ok_or_else(|| wav_err("no data chunk"))?;

    let width = match (fmt.format, fmt.bits) {
        (FORMAT_PCM, 16) => 2,
        (FORMAT_FLOAT, 32) => 4,
        (f, b) => {
            return Err(wav_err(format!(
                "unsupported encoding: format code {f}, {b} bits per sample"
            )))
        }
    };
    if fmt.channels != 1 && fmt.channels != 2 {
        return Err(wav_err(format!("unsupported channel count {}", fmt.channels)));
    }
    if fmt.sample_rate == 0 {
        return Err(wav_err("sample rate is zero"));
    }
    if data.is_empty() {
        return Err(wav_err("data chunk is empty"));
    }
    let channels = fmt.channels as usize;
    let frame_bytes = width * channels;
    let frames = data.len() / frame_bytes;

    let decode = |at: usize| -> f64 {
        if width == 2 {
            i16::from_le_bytes([data[at], data[at + 1]]) as f64 / 32768.0
        } else {
            f32::from_le_bytes([data[at], data[at + 1], data[at + 2], data[at + 3]]) as f64
        }
    };
    let samples: Vec<f64> = (0..frames)
        .map(|f| {
            let base = f * frame_bytes;
            if channels == 1 {
                decode(base)
            } else {
                (decode(base) + decode(base + width)) / 2.0
            }
        })
        .collect();
    AudioBuffer::new(samples, fmt.sample_rate).map_err(|e| wav_err(e.to_string()))
}

/// Encodes a mono buffer with the canonical 44-byte header.
pub fn encode_wav(buffer: &AudioBuffer, format: SampleFormat) -> Result<Vec<u8>> {
    if let Some((index, &value)) = buffer
        .samples
        .iter()
        .enumerate()
        .find(|(_, s)| !(-1.0..=1.0).contains(*s))
    {
        return Err(Error::SampleOutOfRange { index, value });
    }
    let (code, bits) = match format {
        SampleFormat::Pcm16 => (FORMAT_PCM, 16u16),
        SampleFormat::Float32 => (FORMAT_FLOAT, 32u16),
    };
    let block_align = bits / 8;
    let data_len = buffer.samples.len() * block_align as usize;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&code.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&buffer.sample_rate.to_le_bytes());
    out.extend_from_slice(&(buffer.sample_rate * block_align as u32).to_le_bytes());
    out.extend_from_slice(&block_align.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    match format {
        SampleFormat::Pcm16 => {
            for &s in &buffer.samples {
                let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        SampleFormat::Float32 => {
            for &s in &buffer.samples {
                out.extend_from_slice(&(s as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}
