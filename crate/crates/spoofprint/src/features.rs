//! Pre-correlation features: windowed-frame STFT magnitude spectrograms.
//!
//! The STFT convention is the standard DFT kernel per frame:
//! `R[bin, frame] = sum_q s[frame*hop + q] w[q] exp(-j 2 pi bin q / N)`.
//! Frames are laid out as the columns of an N x K matrix.
//!
//! Three normalizations are offered. `Raw` keeps plain magnitudes. `LogStd`
//! standardizes `log(|R| + 1e-12)` per frequency bin, removing static
//! per-bin scale. `FrameRatio` divides each frame by its predecessor, which
//! cancels any channel response that is constant across frames — a static
//! channel enters the STFT as a per-entry multiplicative factor, so the
//! ratio of consecutive frames divides it out.

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::sigmodel::{IqSegment, Label};

/// Spectral window applied to each frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Window {
    Hann,
    Hamming,
    Rect,
}

impl Window {
    /// Periodic window samples of length `n`.
    pub fn samples(&self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|q| {
                let phase = 2.0 * PI * q as f64 / n as f64;
                match self {
                    Window::Hann => 0.5 - 0.5 * phase.cos(),
                    Window::Hamming => 0.54 - 0.46 * phase.cos(),
                    Window::Rect => 1.0,
                }
            })
            .collect()
    }
}

/// STFT geometry: FFT size `N`, hop `L`, window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub window: Window,
}

impl StftConfig {
    pub fn new(fft_size: usize, hop: usize, window: Window) -> Result<Self> {
        let cfg = Self { fft_size, hop, window };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.fft_size.is_power_of_two() || self.fft_size == 0 {
            return Err(Error::validation(
                "stft.fft_size",
                format!("{} is not a power of two", self.fft_size),
            ));
        }
        if self.hop == 0 || self.hop > self.fft_size {
            return Err(Error::validation(
                "stft.hop",
                format!("hop {} must satisfy 0 < hop <= fft_size {}", self.hop, self.fft_size),
            ));
        }
        Ok(())
    }

    /// Frame count for a segment of `q` samples: floor((q - N) / L) + 1.
    pub fn num_frames(&self, q: usize) -> Result<usize> {
        if q < self.fft_size {
            return Err(Error::validation(
                "stft",
                format!("segment of {q} samples shorter than fft_size {}", self.fft_size),
            ));
        }
        Ok((q - self.fft_size) / self.hop + 1)
    }
}

impl Default for StftConfig {
    fn default() -> Self {
        Self { fft_size: 256, hop: 128, window: Window::Hann }
    }
}

/// Dense complex matrix, row-major; rows = frequency bins, cols = frames.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Complex64>,
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![Complex64::new(0.0, 0.0); rows * cols] }
    }

    pub fn at(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: Complex64) {
        self.data[r * self.cols + c] = v;
    }
}

/// Magnitude-domain normalization applied after the STFT.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Normalization {
    Raw,
    LogStd,
    FrameRatio,
}

impl Normalization {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "raw" => Ok(Normalization::Raw),
            "logstd" => Ok(Normalization::LogStd),
            "frameratio" => Ok(Normalization::FrameRatio),
            other => Err(Error::validation(
                "norm",
                format!("unknown normalization {other:?} (raw|logstd|frameratio)"),
            )),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Normalization::Raw => "raw",
            Normalization::LogStd => "logstd",
            Normalization::FrameRatio => "frameratio",
        }
    }
}

const LOG_FLOOR: f64 = 1e-12;

/// A normalized magnitude spectrogram; the pre-correlation feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub config: StftConfig,
    pub normalization: Normalization,
}

impl Spectrogram {
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Windowed-frame STFT of `samples`; returns an N x K complex matrix.
pub fn stft(samples: &[Complex64], cfg: &StftConfig) -> Result<ComplexMatrix> {
    cfg.validate()?;
    let n = cfg.fft_size;
    let frames = cfg.num_frames(samples.len())?;
    let window = cfg.window.samples(n);
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut out = ComplexMatrix::zeros(n, frames);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for k in 0..frames {
        let start = k * cfg.hop;
        for q in 0..n {
            buf[q] = samples[start + q] * window[q];
        }
        fft.process(&mut buf);
        for (bin, v) in buf.iter().enumerate() {
            out.set(bin, k, *v);
        }
    }
    Ok(out)
}

/// STFT magnitudes under the chosen normalization.
pub fn magnitude_spectrogram(
    samples: &[Complex64],
    cfg: &StftConfig,
    normalization: Normalization,
) -> Result<Spectrogram> {
    let r = stft(samples, cfg)?;
    let mags: Vec<f64> = r.data.iter().map(|v| v.norm()).collect();
    let (rows, cols) = (r.rows, r.cols);
    let (data, cols) = match normalization {
        Normalization::Raw => (mags, cols),
        Normalization::LogStd => {
            let mut logm: Vec<f64> = mags.iter().map(|&m| (m + LOG_FLOOR).ln()).collect();
            for row in logm.chunks_exact_mut(cols) {
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let std = var.sqrt();
                if std > 1e-12 {
                    for v in row.iter_mut() {
                        *v = (*v - mean) / std;
                    }
                } else {
                    for v in row.iter_mut() {
                        *v = 0.0;
                    }
                }
            }
            (logm, cols)
        }
        Normalization::FrameRatio => {
            if cols < 2 {
                return Err(Error::validation(
                    "frameratio",
                    "needs at least two frames",
                ));
            }
            let mut ratio = vec![0.0; rows * (cols - 1)];
            for bin in 0..rows {
                for k in 1..cols {
                    ratio[bin * (cols - 1) + (k - 1)] = (mags[bin * cols + k] + LOG_FLOOR)
                        / (mags[bin * cols + k - 1] + LOG_FLOOR);
                }
            }
            (ratio, cols - 1)
        }
    };
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("spectrogram contains a non-finite value"));
    }
    Ok(Spectrogram { rows, cols, data, config: *cfg, normalization })
}

/// Elementwise (Hadamard) product of two equally shaped complex matrices.
pub fn hadamard_apply(h: &ComplexMatrix, fx: &ComplexMatrix) -> Result<ComplexMatrix> {
    if h.rows != fx.rows || h.cols != fx.cols {
        return Err(Error::validation(
            "hadamard_apply",
            format!("shape mismatch: {}x{} vs {}x{}", h.rows, h.cols, fx.rows, fx.cols),
        ));
    }
    let data = h.data.iter().zip(&fx.data).map(|(a, b)| a * b).collect();
    Ok(ComplexMatrix { rows: h.rows, cols: h.cols, data })
}

/// Splits a capture into consecutive non-overlapping fixed-duration segments;
/// the trailing remainder is dropped.
pub fn segment_capture(
    capture: &[Complex64],
    sample_rate_hz: f64,
    segment_duration_s: f64,
    label: Label,
    source_tag: &str,
) -> Result<Vec<IqSegment>> {
    if capture.is_empty() {
        return Err(Error::validation("capture", "empty capture"));
    }
    if !(sample_rate_hz > 0.0) || !(segment_duration_s > 0.0) {
        return Err(Error::validation(
            "segment_capture",
            "sample rate and segment duration must be positive",
        ));
    }
    let seg_samples = (segment_duration_s * sample_rate_hz).round() as usize;
    if seg_samples == 0 || capture.len() < seg_samples {
        return Err(Error::validation(
            "capture",
            format!(
                "capture of {} samples shorter than one {segment_duration_s} s segment ({seg_samples} samples)",
                capture.len()
            ),
        ));
    }
    let count = capture.len() / seg_samples;
    let mut segments = Vec::with_capacity(count);
    for i in 0..count {
        segments.push(IqSegment {
            samples: capture[i * seg_samples..(i + 1) * seg_samples].to_vec(),
            sample_rate_hz,
            start_time_s: i as f64 * segment_duration_s,
            label,
            source_tag: source_tag.to_string(),
        });
    }
    Ok(segments)
}

/// Keeps every `factor`-th sample. Factor 1 is a copy. Used to bound the
/// spectrogram size of wideband captures before the STFT.
pub fn decimate(samples: &[Complex64], factor: usize) -> Result<Vec<Complex64>> {
    if factor == 0 {
        return Err(Error::validation("decimation", "factor must be >= 1"));
    }
    Ok(samples.iter().step_by(factor).cloned().collect())
}

/// The default 4 ms segment duration.
pub const SEGMENT_DURATION_S: f64 = 0.004;

/// How to turn raw segments into feature items: optional decimation before
/// the STFT (tracking always sees the full-rate samples), and an optional
/// tracking pass for the post-correlation branch.
#[derive(Debug, Clone)]
pub struct FeaturizeOptions {
    pub decimation: usize,
    pub stft: StftConfig,
    pub normalization: Normalization,
    pub tracking: Option<TrackRequest>,
}

/// Tracking parameters for featurization.
#[derive(Debug, Clone)]
pub struct TrackRequest {
    pub prn_id: u8,
    pub init: crate::tracking::TrackInit,
    pub config: crate::tracking::TrackConfig,
}

/// Featurizes segments into (spectrogram, optional post-correlation) items.
/// Returns the items plus the per-segment epoch count (0 without tracking).
pub fn featurize_segments(
    segments: &[crate::sigmodel::IqSegment],
    opts: &FeaturizeOptions,
) -> crate::error::Result<(Vec<crate::dataio::FeatureItem>, usize)> {
    if segments.is_empty() {
        return Err(Error::validation("segments", "nothing to featurize"));
    }
    let code = match &opts.tracking {
        Some(req) => Some(crate::tracking::gold_code(req.prn_id)?),
        None => None,
    };
    let mut items = Vec::with_capacity(segments.len());
    let mut epochs = 0usize;
    for (i, seg) in segments.iter().enumerate() {
        let decimated = decimate(&seg.samples, opts.decimation)?;
        let spectrogram = magnitude_spectrogram(&decimated, &opts.stft, opts.normalization)?;
        let postcorr = match (&opts.tracking, &code) {
            (Some(req), Some(code)) => {
                let feats = crate::tracking::track_segment(seg, code, req.init, &req.config)
                    .map_err(|e| match e {
                        Error::Numeric(m) => Error::numeric(format!("segment {i}: {m}")),
                        other => other,
                    })?;
                if epochs == 0 {
                    epochs = feats.epochs();
                }
                Some(feats)
            }
            _ => None,
        };
        items.push(crate::dataio::FeatureItem {
            spectrogram,
            postcorr,
            label: seg.label,
        });
    }
    Ok((items, epochs))
}
