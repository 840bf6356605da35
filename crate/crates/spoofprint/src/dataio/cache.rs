//! Binary feature cache.
//!
//! Layout: magic `SPLC`, version u32, then a header (tag, source hash, item
//! count, spectrogram dims + STFT config + normalization, post-correlation
//! epoch count), then per-item records (label byte, spectrogram f64s,
//! presence byte and five epoch sequences when post-correlation features
//! exist), then a trailing CRC32 of every preceding byte. All integers are
//! little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::registry::{FeatureItem, FeatureSet};
use crate::error::{Error, Result};
use crate::features::{Normalization, Spectrogram, StftConfig, Window};
use crate::sigmodel::Label;
use crate::tracking::{PostCorrFeatures, PostCorrField};

const MAGIC: &[u8; 4] = b"SPLC";
const VERSION: u32 = 1;

/// Header summary returned alongside loaded features.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheInfo {
    pub version: u32,
    pub source_hash: u64,
    pub count: usize,
}

fn window_code(w: Window) -> u8 {
    match w {
        Window::Hann => 0,
        Window::Hamming => 1,
        Window::Rect => 2,
    }
}

fn window_from(code: u8) -> Result<Window> {
    match code {
        0 => Ok(Window::Hann),
        1 => Ok(Window::Hamming),
        2 => Ok(Window::Rect),
        other => Err(Error::data(format!("bad window code {other}"))),
    }
}

fn norm_code(n: Normalization) -> u8 {
    match n {
        Normalization::Raw => 0,
        Normalization::LogStd => 1,
        Normalization::FrameRatio => 2,
    }
}

fn norm_from(code: u8) -> Result<Normalization> {
    match code {
        0 => Ok(Normalization::Raw),
        1 => Ok(Normalization::LogStd),
        2 => Ok(Normalization::FrameRatio),
        other => Err(Error::data(format!("bad normalization code {other}"))),
    }
}

/// Serializes a feature set. `source_hash` fingerprints the inputs that
/// produced it, so callers can detect stale caches.
pub fn cache_features(path: &Path, set: &FeatureSet, source_hash: u64) -> Result<()> {
    set.validate()?;
    let (rows, cols) = (set.items[0].spectrogram.rows, set.items[0].spectrogram.cols);
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(set.tag.len() as u32).to_le_bytes());
    buf.extend_from_slice(set.tag.as_bytes());
    buf.extend_from_slice(&source_hash.to_le_bytes());
    buf.extend_from_slice(&(set.items.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    buf.extend_from_slice(&(set.stft.fft_size as u32).to_le_bytes());
    buf.extend_from_slice(&(set.stft.hop as u32).to_le_bytes());
    buf.push(window_code(set.stft.window));
    buf.push(norm_code(set.normalization));
    buf.extend_from_slice(&(set.postcorr_epochs as u32).to_le_bytes());
    for item in &set.items {
        buf.push(match item.label {
            Label::Clean => 0,
            Label::Spoofed => 1,
        });
        for &v in &item.spectrogram.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        match &item.postcorr {
            Some(pc) => {
                buf.push(1);
                for field in PostCorrField::ALL {
                    for &v in pc.field(field) {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
            None => buf.push(0),
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    file.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    body: &'a [u8],
    off: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.off + n > self.body.len() {
            return Err(Error::data("truncated feature cache".to_string()));
        }
        let r = &self.body[self.off..self.off + n];
        self.off += n;
        Ok(r)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Verifies the CRC and decodes a cache. When `expect` is given, the cached
/// STFT config and normalization must match it.
pub fn load_features(
    path: &Path,
    expect: Option<(&StftConfig, Normalization)>,
) -> Result<(FeatureSet, CacheInfo)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(Error::data(format!("{}: too short for a cache", path.display())));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::data(format!(
            "{}: CRC mismatch (stored {stored:#010x}, computed {computed:#010x})",
            path.display()
        )));
    }
    let mut cur = Cursor { body, off: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::data(format!("{}: bad magic bytes", path.display())));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::data(format!(
            "{}: cache version {version}, this build reads {VERSION}",
            path.display()
        )));
    }
    let tag_len = cur.u32()? as usize;
    let tag = String::from_utf8(cur.take(tag_len)?.to_vec())
        .map_err(|_| Error::data("cache tag is not UTF-8"))?;
    let source_hash = cur.u64()?;
    let count = cur.u64()? as usize;
    let rows = cur.u32()? as usize;
    let cols = cur.u32()? as usize;
    let stft = StftConfig {
        fft_size: cur.u32()? as usize,
        hop: cur.u32()? as usize,
        window: window_from(cur.u8()?)?,
    };
    let normalization = norm_from(cur.u8()?)?;
    let postcorr_epochs = cur.u32()? as usize;
    if let Some((want_stft, want_norm)) = expect {
        if stft != *want_stft || normalization != want_norm {
            return Err(Error::data(format!(
                "{}: cached features use fft_size={} hop={} window={:?} norm={}, \
                 current config wants fft_size={} hop={} window={:?} norm={}",
                path.display(),
                stft.fft_size,
                stft.hop,
                stft.window,
                normalization.name(),
                want_stft.fft_size,
                want_stft.hop,
                want_stft.window,
                want_norm.name(),
            )));
        }
    }
    let mut items = Vec::with_capacity(count);
    for _ in 0..count {
        let label = match cur.u8()? {
            0 => Label::Clean,
            1 => Label::Spoofed,
            other => return Err(Error::data(format!("bad label byte {other}"))),
        };
        let data = cur.f64s(rows * cols)?;
        let postcorr = match cur.u8()? {
            0 => None,
            1 => {
                let mut pc = PostCorrFeatures::new();
                let cp = cur.f64s(postcorr_epochs)?;
                let dll = cur.f64s(postcorr_epochs)?;
                let dop = cur.f64s(postcorr_epochs)?;
                let fll = cur.f64s(postcorr_epochs)?;
                let pll = cur.f64s(postcorr_epochs)?;
                for e in 0..postcorr_epochs {
                    pc.push_epoch(cp[e], dll[e], dop[e], fll[e], pll[e]);
                }
                Some(pc)
            }
            other => return Err(Error::data(format!("bad presence byte {other}"))),
        };
        items.push(FeatureItem {
            spectrogram: Spectrogram {
                rows,
                cols,
                data,
                config: stft,
                normalization,
            },
            postcorr,
            label,
        });
    }
    if cur.off != body.len() {
        return Err(Error::data(format!(
            "{}: {} trailing bytes after the last record",
            path.display(),
            body.len() - cur.off
        )));
    }
    let set = FeatureSet { tag, stft, normalization, postcorr_epochs, items };
    set.validate()?;
    Ok((set, CacheInfo { version, source_hash, count }))
}
