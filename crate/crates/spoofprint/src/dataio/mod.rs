//! Raw IQ capture files, feature caches and the dataset registry.
//!
//! Capture layout is fully described by [`IqFormat`]: integer or float
//! components, I/Q or Q/I interleave, either endianness, and a scale from
//! raw counts to unit amplitude. The `texbat` preset (int16, I/Q,
//! little-endian, 25 MHz, scale 2^-15) is a configurable convention, not
//! asserted ground truth — validate it against the repository documentation
//! of whatever recording you ingest.

mod cache;
mod registry;

pub use cache::{cache_features, load_features, CacheInfo};
pub use registry::{DatasetRecord, FeatureItem, FeatureSet, Registry, RegistryFile};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleType {
    Int16,
    Int8,
    Float32,
}

impl SampleType {
    fn bytes(&self) -> usize {
        match self {
            SampleType::Int16 => 2,
            SampleType::Int8 => 1,
            SampleType::Float32 => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Interleave {
    /// In-phase component first.
    Iq,
    /// Quadrature component first.
    Qi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Endianness {
    Little,
    Big,
}

/// Binary layout of an interleaved IQ capture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IqFormat {
    pub sample_type: SampleType,
    pub interleave: Interleave,
    pub endianness: Endianness,
    pub sample_rate_hz: f64,
    /// Multiplied into raw counts on read; divided out on write.
    pub scale: f64,
}

impl IqFormat {
    /// The conventional TEXBAT-style layout.
    pub fn texbat() -> Self {
        Self {
            sample_type: SampleType::Int16,
            interleave: Interleave::Iq,
            endianness: Endianness::Little,
            sample_rate_hz: 25e6,
            scale: 1.0 / 32768.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return Err(Error::validation("format.sample_rate_hz", "must be positive"));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::validation("format.scale", "must be positive"));
        }
        Ok(())
    }

    fn frame_bytes(&self) -> usize {
        2 * self.sample_type.bytes()
    }

    fn decode(&self, bytes: &[u8]) -> f64 {
        let raw = match (self.sample_type, self.endianness) {
            (SampleType::Int16, Endianness::Little) => {
                i16::from_le_bytes([bytes[0], bytes[1]]) as f64
            }
            (SampleType::Int16, Endianness::Big) => {
                i16::from_be_bytes([bytes[0], bytes[1]]) as f64
            }
            (SampleType::Int8, _) => bytes[0] as i8 as f64,
            (SampleType::Float32, Endianness::Little) => {
                f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as f64
            }
            (SampleType::Float32, Endianness::Big) => {
                f32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as f64
            }
        };
        raw * self.scale
    }

    fn encode(&self, value: f64, index: usize, out: &mut Vec<u8>) -> Result<()> {
        let raw = value / self.scale;
        match self.sample_type {
            SampleType::Int16 => {
                let r = raw.round();
                if !(i16::MIN as f64..=i16::MAX as f64).contains(&r) {
                    return Err(Error::validation(
                        "samples",
                        format!("sample {index} ({value}) exceeds the int16 range after scaling"),
                    ));
                }
                let v = r as i16;
                out.extend_from_slice(&match self.endianness {
                    Endianness::Little => v.to_le_bytes(),
                    Endianness::Big => v.to_be_bytes(),
                });
            }
            SampleType::Int8 => {
                let r = raw.round();
                if !(i8::MIN as f64..=i8::MAX as f64).contains(&r) {
                    return Err(Error::validation(
                        "samples",
                        format!("sample {index} ({value}) exceeds the int8 range after scaling"),
                    ));
                }
                out.push((r as i8) as u8);
            }
            SampleType::Float32 => {
                if !raw.is_finite() {
                    return Err(Error::validation(
                        "samples",
                        format!("sample {index} is not finite after scaling"),
                    ));
                }
                let v = raw as f32;
                out.extend_from_slice(&match self.endianness {
                    Endianness::Little => v.to_le_bytes(),
                    Endianness::Big => v.to_be_bytes(),
                });
            }
        }
        Ok(())
    }
}

/// Reads a time window from an interleaved IQ capture.
pub fn read_iq_capture(
    path: &Path,
    fmt: &IqFormat,
    offset_s: f64,
    duration_s: f64,
) -> Result<Vec<Complex64>> {
    fmt.validate()?;
    if !(offset_s >= 0.0) {
        return Err(Error::validation("offset_s", "must be non-negative"));
    }
    let count = (duration_s * fmt.sample_rate_hz).round() as usize;
    if count == 0 {
        return Err(Error::validation("duration_s", "zero-length window"));
    }
    let start = (offset_s * fmt.sample_rate_hz).round() as usize;
    let frame = fmt.frame_bytes();
    let mut file = std::fs::File::open(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let file_len = file
        .metadata()
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
        .len() as usize;
    let need = (start + count) * frame;
    if file_len < need {
        return Err(Error::data(format!(
            "{}: {file_len} bytes, but the requested window needs {need}",
            path.display()
        )));
    }
    file.seek(SeekFrom::Start((start * frame) as u64))?;
    let mut bytes = vec![0u8; count * frame];
    file.read_exact(&mut bytes)?;

    let comp = fmt.sample_type.bytes();
    let mut samples = Vec::with_capacity(count);
    for chunk in bytes.chunks_exact(frame) {
        let first = fmt.decode(&chunk[..comp]);
        let second = fmt.decode(&chunk[comp..]);
        samples.push(match fmt.interleave {
            Interleave::Iq => Complex64::new(first, second),
            Interleave::Qi => Complex64::new(second, first),
        });
    }
    Ok(samples)
}

/// Writes samples in the exact bit layout of `fmt`. Values that would clip
/// after scaling are an error, not silent saturation.
pub fn write_iq_capture(path: &Path, samples: &[Complex64], fmt: &IqFormat) -> Result<()> {
    fmt.validate()?;
    let mut bytes = Vec::with_capacity(samples.len() * fmt.frame_bytes());
    for (i, s) in samples.iter().enumerate() {
        if !s.re.is_finite() || !s.im.is_finite() {
            return Err(Error::validation("samples", format!("sample {i} is not finite")));
        }
        let (first, second) = match fmt.interleave {
            Interleave::Iq => (s.re, s.im),
            Interleave::Qi => (s.im, s.re),
        };
        fmt.encode(first, i, &mut bytes)?;
        fmt.encode(second, i, &mut bytes)?;
    }
    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    file.write_all(&bytes)?;
    Ok(())
}
