//! Simplified single-channel code/carrier tracking.
//!
//! One feature epoch per 1 ms code period. The code loop is a first-order
//! DLL on the normalized early-late power discriminator; the carrier loop is
//! a second-order Costas PLL with a first-order FLL assist driven by the
//! prompt cross-product, which gives a +/-500 Hz pull-in range at the 1 ms
//! update rate. Lock detectors:
//!
//! * PLL: narrowband-difference over narrowband-power, `((sum I)^2 - (sum Q)^2)
//!   / ((sum I)^2 + (sum Q)^2)` over a sliding prompt window — approximately
//!   cos(2 phase error), in [-1, 1].
//! * FLL: normalized prompt cross-product, `sum(dot) / sum(|P1||P2|)` over
//!   consecutive prompt pairs — approximately cos(epoch-to-epoch carrier
//!   rotation), in [-1, 1].
//!
//! Code phase is the delay of the code start relative to the segment start,
//! in chips. The discriminator is positive when the received code leads the
//! replica estimate (the estimate is late and must decrease).

use num_complex::Complex64;
use std::collections::VecDeque;
use std::f64::consts::PI;

use super::{PostCorrFeatures, PrnCode, CHIP_RATE_HZ, CODE_PERIOD_S};
use crate::error::{Error, Result};
use crate::sigmodel::IqSegment;

/// Loop constants. Defaults are ordinary textbook values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackConfig {
    /// Early-late spacing in chips.
    pub spacing_chips: f64,
    pub dll_bandwidth_hz: f64,
    pub pll_bandwidth_hz: f64,
    pub fll_bandwidth_hz: f64,
    /// Sliding window (epochs) for the lock detectors.
    pub lock_window: usize,
    /// Loss-of-lock threshold: prompt power as a fraction of the power a
    /// fully coherent correlation of the whole epoch would produce.
    pub power_threshold: f64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            spacing_chips: 0.5,
            dll_bandwidth_hz: 2.0,
            pll_bandwidth_hz: 15.0,
            fll_bandwidth_hz: 15.0,
            lock_window: 10,
            power_threshold: 1e-3,
        }
    }
}

/// Acquisition hand-off: starting estimates for the loop.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrackInit {
    pub code_phase_chips: f64,
    pub doppler_hz: f64,
}

/// Correlates `n` samples starting at global index `start` against a replica
/// at the given code phase, with carrier wipe-off at `doppler_hz` from the
/// running phase `carrier_phase`.
fn correlate(
    samples: &[Complex64],
    sample_rate_hz: f64,
    code: &PrnCode,
    start: usize,
    n: usize,
    code_phase_chips: f64,
    carrier_phase: f64,
    doppler_hz: f64,
) -> Complex64 {
    let chips_per_sample = CHIP_RATE_HZ / sample_rate_hz;
    let phase_step = 2.0 * PI * doppler_hz / sample_rate_hz;
    let mut acc = Complex64::new(0.0, 0.0);
    for i in 0..n {
        let g = start + i;
        let chip_idx = (g as f64 * chips_per_sample - code_phase_chips).floor() as i64;
        let chip = code.chip_at(chip_idx);
        let ph = carrier_phase + phase_step * i as f64;
        acc += samples[g] * chip * Complex64::from_polar(1.0, -ph);
    }
    acc
}

fn samples_per_epoch(sample_rate_hz: f64) -> usize {
    (sample_rate_hz * CODE_PERIOD_S).round() as usize
}

/// Normalized early-minus-late power over the first code period of `segment`.
pub fn early_late_discriminator(
    segment: &IqSegment,
    code: &PrnCode,
    code_phase_hat: f64,
    doppler_hat: f64,
    spacing: f64,
) -> Result<f64> {
    if !(spacing > 0.0 && spacing < 1.0) {
        return Err(Error::validation(
            "spacing",
            format!("{spacing} chips outside (0, 1)"),
        ));
    }
    let spe = samples_per_epoch(segment.sample_rate_hz);
    if segment.samples.len() < spe {
        return Err(Error::validation(
            "segment",
            format!("{} samples, need one code period ({spe})", segment.samples.len()),
        ));
    }
    let half = spacing / 2.0;
    let early = correlate(
        &segment.samples,
        segment.sample_rate_hz,
        code,
        0,
        spe,
        code_phase_hat - half,
        0.0,
        doppler_hat,
    );
    let late = correlate(
        &segment.samples,
        segment.sample_rate_hz,
        code,
        0,
        spe,
        code_phase_hat + half,
        0.0,
        doppler_hat,
    );
    let (pe, pl) = (early.norm_sqr(), late.norm_sqr());
    if pe + pl == 0.0 {
        return Err(Error::numeric(
            "loss of lock: early and late correlators are both zero",
        ));
    }
    Ok((pe - pl) / (pe + pl))
}

/// Runs the DLL/PLL/FLL chain over a segment, emitting one feature epoch per
/// code period. `init` must be within about half a chip and 500 Hz of truth.
pub fn track_segment(
    segment: &IqSegment,
    code: &PrnCode,
    init: TrackInit,
    cfg: &TrackConfig,
) -> Result<PostCorrFeatures> {
    let fs = segment.sample_rate_hz;
    let spe = samples_per_epoch(fs);
    let epochs = segment.samples.len() / spe;
    if epochs == 0 {
        return Err(Error::validation(
            "segment",
            format!("{} samples, need one code period ({spe})", segment.samples.len()),
        ));
    }
    let t = CODE_PERIOD_S;
    // second-order PLL constants (damping 1/sqrt(2))
    let zeta = std::f64::consts::FRAC_1_SQRT_2;
    let omega_p = 8.0 * zeta * cfg.pll_bandwidth_hz / (4.0 * zeta * zeta + 1.0);
    let kp_pll = 2.0 * zeta * omega_p * t;
    let ki_pll = (omega_p * t) * (omega_p * t);
    let k_fll = 4.0 * cfg.fll_bandwidth_hz * t;
    // early-late power discriminator slope is 4/(2 - s) per chip in the
    // linear region; fold its inverse into the DLL gain
    let s = cfg.spacing_chips;
    let discr_slope = 4.0 / (2.0 - s);
    let k_dll = 4.0 * cfg.dll_bandwidth_hz * t / discr_slope;

    let mut code_phase = init.code_phase_chips;
    let mut freq_acc = 2.0 * PI * init.doppler_hz * t; // rad per epoch
    let mut carrier_phase = 0.0f64;
    let mut prompts: VecDeque<Complex64> = VecDeque::with_capacity(cfg.lock_window + 1);
    let mut weak_epochs = 0usize;

    let segment_power: f64 =
        segment.samples.iter().map(|v| v.norm_sqr()).sum::<f64>() / segment.samples.len() as f64;
    let coherent_ref = segment_power * (spe as f64) * (spe as f64);

    let mut features = PostCorrFeatures::new();
    for e in 0..epochs {
        let start = e * spe;
        let doppler_hz = freq_acc / (2.0 * PI * t);
        let half = cfg.spacing_chips / 2.0;
        let early = correlate(&segment.samples, fs, code, start, spe, code_phase - half, carrier_phase, doppler_hz);
        let prompt = correlate(&segment.samples, fs, code, start, spe, code_phase, carrier_phase, doppler_hz);
        let late = correlate(&segment.samples, fs, code, start, spe, code_phase + half, carrier_phase, doppler_hz);

        let (pe, pl) = (early.norm_sqr(), late.norm_sqr());
        if pe + pl == 0.0 {
            return Err(Error::numeric(format!(
                "loss of lock at epoch {e}: early and late correlators are both zero"
            )));
        }
        let dll = (pe - pl) / (pe + pl);

        if coherent_ref > 0.0 && prompt.norm_sqr() < cfg.power_threshold * coherent_ref {
            weak_epochs += 1;
            if weak_epochs >= 3 {
                return Err(Error::numeric(format!(
                    "loss of lock at epoch {e}: prompt power below threshold for 3 epochs"
                )));
            }
        } else {
            weak_epochs = 0;
        }

        // Costas phase error, insensitive to chip polarity
        let phase_err = if prompt.re == 0.0 {
            if prompt.im == 0.0 {
                0.0
            } else {
                (std::f64::consts::FRAC_PI_2).copysign(prompt.im)
            }
        } else {
            (prompt.im / prompt.re).atan()
        };
        // FLL cross-product error from the previous prompt
        let freq_err_hz = match prompts.back() {
            Some(prev) => {
                let cross = prev.re * prompt.im - prev.im * prompt.re;
                let dot = prev.re * prompt.re + prev.im * prompt.im;
                if cross == 0.0 && dot == 0.0 {
                    0.0
                } else {
                    cross.atan2(dot) / (2.0 * PI * t)
                }
            }
            None => 0.0,
        };

        prompts.push_back(prompt);
        if prompts.len() > cfg.lock_window {
            prompts.pop_front();
        }
        let (mut si, mut sq) = (0.0, 0.0);
        for p in &prompts {
            si += p.re;
            sq += p.im;
        }
        let nbp = si * si + sq * sq;
        let pll_lock = if nbp == 0.0 {
            0.0
        } else {
            ((si * si - sq * sq) / nbp).clamp(-1.0, 1.0)
        };
        let (mut dots, mut mags) = (0.0, 0.0);
        for pair in prompts.iter().zip(prompts.iter().skip(1)) {
            dots += pair.0.re * pair.1.re + pair.0.im * pair.1.im;
            mags += pair.0.norm() * pair.1.norm();
        }
        let fll_lock = if mags == 0.0 { 1.0 } else { (dots / mags).clamp(-1.0, 1.0) };

        features.push_epoch(code_phase, dll, doppler_hz, fll_lock, pll_lock);

        // loop updates
        code_phase -= k_dll * dll;
        freq_acc += ki_pll * phase_err + 2.0 * PI * t * k_fll * freq_err_hz;
        carrier_phase += freq_acc + kp_pll * phase_err;
    }
    features.validate()?;
    Ok(features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sigmodel::{
        synthesize_scene, ChannelSpec, FingerprintSpec, Label, PathSpec, Role, SceneSpec,
        TransmitterSpec,
    };
    use crate::tracking::gold_code;

    const FS: f64 = 4.092e6; // 4 samples per chip

    fn scene_tx(prn: u8, cfo_hz: f64, gain: f64, delay_chips: f64, role: Role) -> TransmitterSpec {
        TransmitterSpec {
            prn_id: prn,
            fingerprint: FingerprintSpec {
                carrier_freq_offset_hz: cfo_hz,
                ..FingerprintSpec::identity()
            },
            channel: ChannelSpec {
                paths: vec![PathSpec { gain, delay_s: delay_chips / CHIP_RATE_HZ }],
            },
            carrier_to_noise_density_dbhz: 62.0,
            role,
        }
    }

    fn segment_from_scene(scene: &SceneSpec) -> IqSegment {
        let capture = synthesize_scene(scene).unwrap();
        IqSegment {
            samples: capture.samples,
            sample_rate_hz: scene.sample_rate_hz,
            start_time_s: 0.0,
            label: capture.label,
            source_tag: "test".to_string(),
        }
    }

    fn noiseless_segment(duration_s: f64, cfo_hz: f64) -> IqSegment {
        let scene = SceneSpec {
            genuine: vec![scene_tx(1, cfo_hz, 1.0, 0.0, Role::Genuine)],
            spoofers: vec![],
            noise_std: 0.0,
            sample_rate_hz: FS,
            duration_s,
            rng_seed: 1,
        };
        segment_from_scene(&scene)
    }

    #[test]
    fn aligned_discriminator_is_null() {
        let seg = noiseless_segment(0.004, 0.0);
        let code = gold_code(1).unwrap();
        let d = early_late_discriminator(&seg, &code, 0.0, 0.0, 0.5).unwrap();
        assert!(d.abs() < 1e-9, "discriminator {d}");
    }

    /// Correlation-curve oracle: the envelope at a replica offset u follows
    /// the code autocorrelation triangle, so the early lobe must exceed the
    /// late lobe exactly when the received code leads the estimate.
    #[test]
    fn discriminator_sign_and_odd_symmetry() {
        let seg = noiseless_segment(0.004, 0.0);
        let code = gold_code(1).unwrap();
        let spe = (FS * CODE_PERIOD_S).round() as usize;

        // dense-lag scan of the correlation envelope
        let corr_at = |u: f64| -> f64 {
            correlate(&seg.samples, FS, &code, 0, spe, u, 0.0, 0.0).norm()
        };
        let d_plus = early_late_discriminator(&seg, &code, 0.25, 0.0, 0.5).unwrap();
        let d_minus = early_late_discriminator(&seg, &code, -0.25, 0.0, 0.5).unwrap();
        // oracle: estimate late by +0.25 -> early replica (at 0.0) sits on the
        // peak, late replica (at +0.5) down the slope
        assert!(corr_at(0.25 - 0.25) > corr_at(0.25 + 0.25));
        assert!(d_plus > 0.0, "true code leads, discriminator must be positive");
        assert!(d_minus < 0.0);
        assert!((d_plus + d_minus).abs() < 1e-9, "{d_plus} vs {d_minus}");
    }

    #[test]
    fn noiseless_aligned_tracking_locks() {
        let seg = noiseless_segment(0.02, 0.0);
        let code = gold_code(1).unwrap();
        let f = track_segment(&seg, &code, TrackInit::default(), &TrackConfig::default()).unwrap();
        assert_eq!(f.epochs(), 20);
        for e in 0..f.epochs() {
            assert!(f.doppler_hz[e].abs() < 1.0, "epoch {e}: doppler {}", f.doppler_hz[e]);
            assert!(f.pll_lock[e] >= 0.99, "epoch {e}: pll lock {}", f.pll_lock[e]);
        }
        let drift = (f.code_phase[f.epochs() - 1] - f.code_phase[0]).abs();
        assert!(drift < 0.01, "code drift {drift} chips");
    }

    /// Frequency oracle: dense scan of |sum_e p_e exp(-j 2 pi f e T)| over the
    /// open-loop prompt sequence recovers the injected CFO independently.
    #[test]
    fn injected_cfo_is_recovered() {
        let cfo = 100.0;
        let seg = noiseless_segment(0.1, cfo);
        let code = gold_code(1).unwrap();
        let spe = (FS * CODE_PERIOD_S).round() as usize;
        let epochs = seg.samples.len() / spe;

        let prompts: Vec<Complex64> = (0..epochs)
            .map(|e| correlate(&seg.samples, FS, &code, e * spe, spe, 0.0, 0.0, 0.0))
            .collect();
        let mut best = (0.0f64, f64::MIN);
        let mut f = -200.0;
        while f <= 200.0 {
            let mag = prompts
                .iter()
                .enumerate()
                .map(|(e, p)| p * Complex64::from_polar(1.0, -2.0 * PI * f * e as f64 * CODE_PERIOD_S))
                .sum::<Complex64>()
                .norm();
            if mag > best.1 {
                best = (f, mag);
            }
            f += 0.25;
        }
        assert!((best.0 - cfo).abs() < 2.0, "oracle found {} Hz", best.0);

        let feats =
            track_segment(&seg, &code, TrackInit::default(), &TrackConfig::default()).unwrap();
        let steady = &feats.doppler_hz[epochs - 10..];
        for d in steady {
            assert!((d - cfo).abs() < 5.0, "steady-state doppler {d}");
        }
    }

    #[test]
    fn spoofed_composite_distorts_the_discriminator() {
        let code = gold_code(1).unwrap();
        let mut clean_mean = 0.0;
        let mut spoofed_mean = 0.0;
        let trials = 20;
        for seed in 0..trials {
            let clean = SceneSpec {
                genuine: vec![scene_tx(1, 0.0, 1.0, 0.0, Role::Genuine)],
                spoofers: vec![],
                noise_std: 0.05,
                sample_rate_hz: FS,
                duration_s: 0.004,
                rng_seed: 1000 + seed,
            };
            let mut spoofed = clean.clone();
            spoofed.spoofers = vec![scene_tx(1, 0.0, 0.9, 0.3, Role::Spoofer)];
            let cf = track_segment(
                &segment_from_scene(&clean),
                &code,
                TrackInit::default(),
                &TrackConfig::default(),
            )
            .unwrap();
            let sf = track_segment(
                &segment_from_scene(&spoofed),
                &code,
                TrackInit::default(),
                &TrackConfig::default(),
            )
            .unwrap();
            clean_mean += cf.dll_discr.iter().map(|d| d.abs()).sum::<f64>() / cf.epochs() as f64;
            spoofed_mean += sf.dll_discr.iter().map(|d| d.abs()).sum::<f64>() / sf.epochs() as f64;
        }
        clean_mean /= trials as f64;
        spoofed_mean /= trials as f64;
        assert!(
            spoofed_mean > clean_mean,
            "spoofed {spoofed_mean} vs clean {clean_mean}"
        );
    }

    #[test]
    fn epoch_count_is_floor_of_periods() {
        let code = gold_code(1).unwrap();
        let seg = noiseless_segment(0.0035, 0.0);
        let f = track_segment(&seg, &code, TrackInit::default(), &TrackConfig::default()).unwrap();
        assert_eq!(f.epochs(), 3);

        let short = IqSegment {
            samples: seg.samples[..100].to_vec(),
            ..seg.clone()
        };
        assert!(track_segment(&short, &code, TrackInit::default(), &TrackConfig::default()).is_err());
    }

    #[test]
    fn tracking_is_deterministic() {
        let seg = noiseless_segment(0.008, 55.0);
        let code = gold_code(1).unwrap();
        let a = track_segment(&seg, &code, TrackInit::default(), &TrackConfig::default()).unwrap();
        let b = track_segment(&seg, &code, TrackInit::default(), &TrackConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_only_loses_lock() {
        let scene = SceneSpec {
            genuine: vec![],
            spoofers: vec![],
            noise_std: 1.0,
            sample_rate_hz: FS,
            duration_s: 0.008,
            rng_seed: 5,
        };
        let seg = segment_from_scene(&scene);
        let seg = IqSegment { label: Label::Clean, ..seg };
        let code = gold_code(1).unwrap();
        let err = track_segment(&seg, &code, TrackInit::default(), &TrackConfig::default())
            .unwrap_err();
        assert!(err.to_string().contains("loss of lock"), "{err}");
    }
}
