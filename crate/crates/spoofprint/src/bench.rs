//! The synthetic fingerprint-family benchmark.
//!
//! Three families of transmitter hardware are defined. Within a family the
//! clean scene carries one genuine satellite and the spoofed scene adds a
//! second emitter on the same PRN with its own impairments, a fractional-chip
//! code offset and a distinct carrier offset. Families differ in every
//! impairment value, so a detector that meta-trains on two families and
//! still separates the third has learned the presence of the overlapping
//! counterfeit replica rather than any one family's hardware signature.
//!
//! Scale is deliberately small: 4 samples per chip, sub-second captures,
//! log-standardized 64x30 spectrograms after decimation. Everything derives
//! deterministically from the benchmark seed.

use crate::dataio::{FeatureSet, Registry};
use crate::error::{Error, Result};
use crate::features::{
    featurize_segments, segment_capture, FeaturizeOptions, Normalization, StftConfig, TrackRequest,
    Window, SEGMENT_DURATION_S,
};
use crate::mix_seed;
use crate::sigmodel::{
    synthesize_scene, ChannelSpec, FingerprintSpec, Label, PathSpec, Role, SceneSpec,
    TransmitterSpec,
};
use crate::tracking::{TrackConfig, TrackInit, CHIP_RATE_HZ};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Benchmark geometry and scale. Each (family, label) pair is realized as
/// several short captures whose nuisance parameters (exact carrier offsets,
/// spoofer geometry, noise) are jittered per capture inside the family's
/// band, so one recording session's incidental values cannot be memorized.
#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub sample_rate_hz: f64,
    pub captures_per_label: usize,
    pub capture_duration_s: f64,
    pub noise_std: f64,
    pub decimation: usize,
    pub stft: StftConfig,
    pub normalization: Normalization,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 4.092e6, // 4 samples per chip
            captures_per_label: 6,
            capture_duration_s: 0.052, // 13 segments per capture
            noise_std: 1.0,
            decimation: 16,
            stft: StftConfig { fft_size: 32, hop: 32, window: Window::Hann },
            normalization: Normalization::LogStd,
            seed: 0,
        }
    }
}

/// Per-family hardware personality: the genuine transmitter's impairments
/// and the spoofer's impairments and geometry.
#[derive(Debug, Clone, Copy)]
pub struct Family {
    pub tag: &'static str,
    genuine_cfo_hz: f64,
    genuine_phase_noise: f64,
    genuine_cn0_dbhz: f64,
    spoofer_cfo_hz: f64,
    spoofer_phase_noise: f64,
    spoofer_gain: f64,
    spoofer_delay_chips: f64,
    spoofer_iq_gain: f64,
    spoofer_cubic: f64,
}

/// The three benchmark families. `fam_a` and `fam_b` are the usual
/// meta-training pair; `fam_c` is held out for cross-testing.
pub const FAMILIES: [Family; 3] = [
    Family {
        tag: "fam_a",
        genuine_cfo_hz: 50.0,
        genuine_phase_noise: 1e-3,
        genuine_cn0_dbhz: 62.0,
        spoofer_cfo_hz: 430.0,
        spoofer_phase_noise: 3e-3,
        spoofer_gain: 0.8,
        spoofer_delay_chips: 0.30,
        spoofer_iq_gain: 1.15,
        spoofer_cubic: -0.08,
    },
    Family {
        tag: "fam_b",
        genuine_cfo_hz: -80.0,
        genuine_phase_noise: 2e-3,
        genuine_cn0_dbhz: 63.0,
        spoofer_cfo_hz: 270.0,
        spoofer_phase_noise: 4e-3,
        spoofer_gain: 0.9,
        spoofer_delay_chips: 0.45,
        spoofer_iq_gain: 0.90,
        spoofer_cubic: 0.06,
    },
    Family {
        tag: "fam_c",
        genuine_cfo_hz: 120.0,
        genuine_phase_noise: 1.5e-3,
        genuine_cn0_dbhz: 62.5,
        spoofer_cfo_hz: -190.0,
        spoofer_phase_noise: 5e-3,
        spoofer_gain: 0.85,
        spoofer_delay_chips: 0.60,
        spoofer_iq_gain: 1.08,
        spoofer_cubic: -0.05,
    },
];

pub fn family(tag: &str) -> Result<&'static Family> {
    FAMILIES
        .iter()
        .find(|f| f.tag == tag)
        .ok_or_else(|| Error::validation("family", format!("unknown family {tag:?}")))
}

/// The benchmark PRN shared by genuine transmitter and spoofer.
pub const BENCH_PRN: u8 = 1;

/// Scene spec for one family, label and capture session. `session 0` is the
/// family's nominal parameter set; higher sessions jitter the nuisance
/// values inside the family band.
pub fn family_scene(fam: &Family, label: Label, cfg: &BenchConfig, session: usize) -> SceneSpec {
    let scene_seed = mix_seed(
        cfg.seed,
        mix_seed(label as u64, mix_seed(session as u64, fnv(fam.tag))),
    );
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(mix_seed(scene_seed, 0x6a69_7474));
    let mut jitter = |span: f64| -> f64 {
        if session == 0 {
            0.0
        } else {
            jitter_rng.gen_range(-span..span)
        }
    };
    let genuine = TransmitterSpec {
        prn_id: BENCH_PRN,
        fingerprint: FingerprintSpec {
            carrier_freq_offset_hz: fam.genuine_cfo_hz + jitter(30.0),
            phase_noise_std: (fam.genuine_phase_noise * (1.0 + jitter(0.3))).max(0.0),
            ..FingerprintSpec::identity()
        },
        channel: ChannelSpec::direct(),
        carrier_to_noise_density_dbhz: fam.genuine_cn0_dbhz + jitter(1.0),
        role: Role::Genuine,
    };
    let spoofers = match label {
        Label::Clean => vec![],
        Label::Spoofed => vec![TransmitterSpec {
            prn_id: BENCH_PRN,
            fingerprint: FingerprintSpec {
                carrier_freq_offset_hz: fam.spoofer_cfo_hz + jitter(30.0),
                phase_noise_std: (fam.spoofer_phase_noise * (1.0 + jitter(0.3))).max(0.0),
                iq_gain_imbalance: fam.spoofer_iq_gain,
                cubic_nonlinearity: fam.spoofer_cubic,
                ..FingerprintSpec::identity()
            },
            channel: ChannelSpec {
                paths: vec![PathSpec {
                    gain: fam.spoofer_gain + jitter(0.05),
                    delay_s: (fam.spoofer_delay_chips + jitter(0.08)) / CHIP_RATE_HZ,
                }],
            },
            carrier_to_noise_density_dbhz: fam.genuine_cn0_dbhz + jitter(1.0),
            role: Role::Spoofer,
        }],
    };
    SceneSpec {
        genuine: vec![genuine],
        spoofers,
        noise_std: cfg.noise_std,
        sample_rate_hz: cfg.sample_rate_hz,
        duration_s: cfg.capture_duration_s,
        rng_seed: scene_seed,
    }
}

fn fnv(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

/// Featurization settings matching the benchmark scale.
pub fn featurize_options(cfg: &BenchConfig) -> FeaturizeOptions {
    FeaturizeOptions {
        decimation: cfg.decimation,
        stft: cfg.stft,
        normalization: cfg.normalization,
        tracking: Some(TrackRequest {
            prn_id: BENCH_PRN,
            init: TrackInit::default(),
            config: TrackConfig::default(),
        }),
    }
}

/// Synthesizes and featurizes one family into a feature set, pooling all
/// capture sessions of both labels.
pub fn build_family_set(fam: &Family, cfg: &BenchConfig) -> Result<FeatureSet> {
    let mut items = Vec::new();
    let mut postcorr_epochs = 0;
    for label in [Label::Clean, Label::Spoofed] {
        for session in 0..cfg.captures_per_label {
            let scene = family_scene(fam, label, cfg, session);
            let capture = synthesize_scene(&scene)?;
            let segments = segment_capture(
                &capture.samples,
                scene.sample_rate_hz,
                SEGMENT_DURATION_S,
                capture.label,
                fam.tag,
            )?;
            let (mut feats, epochs) = featurize_segments(&segments, &featurize_options(cfg))?;
            postcorr_epochs = epochs;
            items.append(&mut feats);
        }
    }
    Ok(FeatureSet {
        tag: fam.tag.to_string(),
        stft: cfg.stft,
        normalization: cfg.normalization,
        postcorr_epochs,
        items,
    })
}

/// Builds the full three-family registry.
pub fn build_benchmark_registry(cfg: &BenchConfig) -> Result<Registry> {
    let mut registry = Registry::new();
    for fam in &FAMILIES {
        registry.register(build_family_set(fam, cfg)?)?;
    }
    Ok(registry)
}

/// The standard meta-training pair and held-out target.
pub fn default_combo() -> Vec<String> {
    vec!["fam_a".to_string(), "fam_b".to_string()]
}

/// Meta-training hyperparameters sized for the benchmark: one batch per
/// epoch means the epoch count is the meta-step count, so the desk-scale
/// runs use more, cheaper steps than the full-scale defaults.
pub fn bench_meta_config(seed: u64) -> crate::metalearn::MetaConfig {
    crate::metalearn::MetaConfig {
        epochs: 150,
        outer_lr: 0.003,
        query_size: 32,
        seed,
        ..crate::metalearn::MetaConfig::default()
    }
}

pub const HELD_OUT_FAMILY: &str = "fam_c";

/// Mean power of a capture; handy when validating scene scaling in tests.
pub fn mean_power(samples: &[Complex64]) -> f64 {
    samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / samples.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn family_sets_have_both_labels_and_postcorr() {
        let cfg = BenchConfig {
            captures_per_label: 2,
            capture_duration_s: 0.02, // 5 segments per capture
            ..BenchConfig::default()
        };
        let set = build_family_set(family("fam_a").unwrap(), &cfg).unwrap();
        assert_eq!(set.items.len(), 20);
        assert_eq!(set.postcorr_epochs, 4);
        let clean = set.indices_by_label(Label::Clean).len();
        assert_eq!(clean, 10);
        let (rows, cols) = (set.items[0].spectrogram.rows, set.items[0].spectrogram.cols);
        assert_eq!((rows, cols), (32, 31));
        set.validate().unwrap();
    }

    #[test]
    fn benchmark_is_deterministic() {
        let cfg = BenchConfig {
            captures_per_label: 2,
            capture_duration_s: 0.02,
            ..BenchConfig::default()
        };
        let a = build_family_set(family("fam_b").unwrap(), &cfg).unwrap();
        let b = build_family_set(family("fam_b").unwrap(), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_family_is_an_error() {
        assert!(family("fam_z").is_err());
    }
}
