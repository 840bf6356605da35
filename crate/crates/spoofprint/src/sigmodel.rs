//! Synthetic GNSS-like baseband scenes.
//!
//! A scene is a set of genuine transmitters and a set of spoofers. Every
//! transmitter emits a BPSK-spread C/A Gold-code waveform, gets its own
//! hardware impairments applied ([`apply_fingerprint`]), passes through a
//! sparse multipath channel, and the results are summed with circular
//! complex Gaussian receiver noise.
//!
//! Everything is a pure function of the scene spec: the same spec (including
//! `rng_seed`) always reproduces the same capture, and per-transmitter noise
//! streams are derived from the transmitter's own content so that a scene
//! splits exactly into the sum of its single-set sub-scenes.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mix_seed;
use crate::tracking::{gold_code, PrnCode, CHIP_RATE_HZ};

/// One multipath component: amplitude gain and delay in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathSpec {
    pub gain: f64,
    pub delay_s: f64,
}

/// Sparse multipath channel for one transmitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub paths: Vec<PathSpec>,
}

impl ChannelSpec {
    /// Single unit-gain zero-delay path.
    pub fn direct() -> Self {
        ChannelSpec {
            paths: vec![PathSpec { gain: 1.0, delay_s: 0.0 }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.paths.is_empty() {
            return Err(Error::validation("channel.paths", "at least one path required"));
        }
        let mut prev = f64::NEG_INFINITY;
        for (i, p) in self.paths.iter().enumerate() {
            if !p.gain.is_finite() {
                return Err(Error::validation(
                    "channel.paths",
                    format!("path {i} gain is not finite"),
                ));
            }
            if !p.delay_s.is_finite() || p.delay_s < 0.0 {
                return Err(Error::validation(
                    "channel.paths",
                    format!("path {i} delay must be finite and non-negative"),
                ));
            }
            if p.delay_s <= prev {
                return Err(Error::validation(
                    "channel.paths",
                    format!("path {i} delay must be strictly increasing"),
                ));
            }
            prev = p.delay_s;
        }
        Ok(())
    }
}

/// Transmitter hardware impairments. The all-identity spec
/// (gain 1, everything else 0) is a fixed point of [`apply_fingerprint`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FingerprintSpec {
    /// I/Q amplitude imbalance ratio; 1.0 means none.
    pub iq_gain_imbalance: f64,
    /// I/Q phase imbalance in radians.
    pub iq_phase_imbalance: f64,
    /// Additive DC bias.
    pub dc_offset: Complex64,
    /// Carrier frequency offset in Hz.
    pub carrier_freq_offset_hz: f64,
    /// Std of the per-sample phase random-walk increment, radians.
    pub phase_noise_std: f64,
    /// Memoryless odd-order term: y = x (1 + c |x|^2).
    pub cubic_nonlinearity: f64,
}

impl FingerprintSpec {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn is_identity(&self) -> bool {
        self == &Self::identity()
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.iq_gain_imbalance.is_finite()
            && self.iq_phase_imbalance.is_finite()
            && self.dc_offset.re.is_finite()
            && self.dc_offset.im.is_finite()
            && self.carrier_freq_offset_hz.is_finite()
            && self.phase_noise_std.is_finite()
            && self.cubic_nonlinearity.is_finite();
        if !finite {
            return Err(Error::validation("fingerprint", "all fields must be finite"));
        }
        if self.iq_gain_imbalance <= 0.0 {
            return Err(Error::validation(
                "fingerprint.iq_gain_imbalance",
                "must be positive",
            ));
        }
        if self.phase_noise_std < 0.0 {
            return Err(Error::validation(
                "fingerprint.phase_noise_std",
                "must be non-negative",
            ));
        }
        Ok(())
    }
}

impl Default for FingerprintSpec {
    fn default() -> Self {
        Self {
            iq_gain_imbalance: 1.0,
            iq_phase_imbalance: 0.0,
            dc_offset: Complex64::new(0.0, 0.0),
            carrier_freq_offset_hz: 0.0,
            phase_noise_std: 0.0,
            cubic_nonlinearity: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Genuine,
    Spoofer,
}

/// One emitter in a scene. Spoofers may reuse a genuine PRN — that is the
/// attack being modeled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmitterSpec {
    pub prn_id: u8,
    #[serde(default = "FingerprintSpec::identity")]
    pub fingerprint: FingerprintSpec,
    pub channel: ChannelSpec,
    /// C/N0 in dB-Hz; sets the waveform amplitude relative to scene noise.
    /// With zero scene noise the waveform is emitted at unit amplitude.
    pub carrier_to_noise_density_dbhz: f64,
    pub role: Role,
}

impl TransmitterSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=37).contains(&self.prn_id) {
            return Err(Error::validation(
                "transmitter.prn_id",
                format!("{} outside 1..=37", self.prn_id),
            ));
        }
        if !self.carrier_to_noise_density_dbhz.is_finite() {
            return Err(Error::validation(
                "transmitter.carrier_to_noise_density_dbhz",
                "must be finite",
            ));
        }
        self.fingerprint.validate()?;
        self.channel.validate()
    }

    /// Stable content hash, excluding the role, so relabeling a spoofer as
    /// genuine reproduces the same per-transmitter random streams.
    fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        };
        eat(&[self.prn_id]);
        let fp = &self.fingerprint;
        for v in [
            fp.iq_gain_imbalance,
            fp.iq_phase_imbalance,
            fp.dc_offset.re,
            fp.dc_offset.im,
            fp.carrier_freq_offset_hz,
            fp.phase_noise_std,
            fp.cubic_nonlinearity,
            self.carrier_to_noise_density_dbhz,
        ] {
            eat(&v.to_bits().to_le_bytes());
        }
        for p in &self.channel.paths {
            eat(&p.gain.to_bits().to_le_bytes());
            eat(&p.delay_s.to_bits().to_le_bytes());
        }
        h
    }
}

/// Full scene description; the unit of synthesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    #[serde(default)]
    pub genuine: Vec<TransmitterSpec>,
    #[serde(default)]
    pub spoofers: Vec<TransmitterSpec>,
    pub noise_std: f64,
    pub sample_rate_hz: f64,
    pub duration_s: f64,
    pub rng_seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return Err(Error::validation("scene.sample_rate_hz", "must be positive"));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(Error::validation("scene.duration_s", "must be positive"));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::validation("scene.noise_std", "must be non-negative"));
        }
        for tx in self.genuine.iter().chain(&self.spoofers) {
            tx.validate()?;
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        (self.duration_s * self.sample_rate_hz).round() as usize
    }

    /// Parses a scene from its TOML config representation.
    pub fn from_toml_str(text: &str) -> Result<SceneSpec> {
        let scene: SceneSpec =
            toml::from_str(text).map_err(|e| Error::validation("scene config", e.to_string()))?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn load(path: &Path) -> Result<SceneSpec> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::data(e.to_string()))
    }
}

/// Capture label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Clean,
    Spoofed,
}

impl Label {
    pub fn name(&self) -> &'static str {
        match self {
            Label::Clean => "clean",
            Label::Spoofed => "spoofed",
        }
    }
}

/// A fixed-duration window of complex baseband samples with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct IqSegment {
    pub samples: Vec<Complex64>,
    pub sample_rate_hz: f64,
    pub start_time_s: f64,
    pub label: Label,
    pub source_tag: String,
}

/// A synthesized capture plus its label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCapture {
    pub samples: Vec<Complex64>,
    pub sample_rate_hz: f64,
    pub label: Label,
}

/// Samples the +/-1 chip stream of `code` at `sample_rate_hz`, starting at
/// time zero, chip edges quantized to the sample grid.
pub fn prn_waveform(code: &PrnCode, sample_rate_hz: f64, num_samples: usize) -> Vec<Complex64> {
    let chips_per_sample = CHIP_RATE_HZ / sample_rate_hz;
    (0..num_samples)
        .map(|i| {
            let chip = (i as f64 * chips_per_sample).floor() as i64;
            Complex64::new(code.chip_at(chip), 0.0)
        })
        .collect()
}

/// Applies the transmitter impairments in a fixed order: cubic nonlinearity,
/// I/Q imbalance, DC offset, CFO rotation, phase-noise random walk. Neutral
/// stages are skipped, so the identity spec returns the input bit-exactly.
pub fn apply_fingerprint(
    samples: &[Complex64],
    fp: &FingerprintSpec,
    sample_rate_hz: f64,
    seed: u64,
) -> Result<Vec<Complex64>> {
    fp.validate()?;
    if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
        return Err(Error::validation("sample_rate_hz", "must be positive"));
    }
    let mut out = samples.to_vec();
    if fp.cubic_nonlinearity != 0.0 {
        let c = fp.cubic_nonlinearity;
        for s in out.iter_mut() {
            *s *= 1.0 + c * s.norm_sqr();
        }
    }
    if fp.iq_gain_imbalance != 1.0 || fp.iq_phase_imbalance != 0.0 {
        // y = mu x + nu conj(x); a pure +f tone gains an image at -f with
        // amplitude ratio |nu/mu| = |(1 - g e^{j phi}) / (1 + g e^{j phi})|.
        let ge = fp.iq_gain_imbalance * Complex64::from_polar(1.0, fp.iq_phase_imbalance);
        let mu = (Complex64::new(1.0, 0.0) + ge) * 0.5;
        let nu = (Complex64::new(1.0, 0.0) - ge) * 0.5;
        for s in out.iter_mut() {
            *s = mu * *s + nu * s.conj();
        }
    }
    if fp.dc_offset != Complex64::new(0.0, 0.0) {
        for s in out.iter_mut() {
            *s += fp.dc_offset;
        }
    }
    if fp.carrier_freq_offset_hz != 0.0 {
        let step = 2.0 * PI * fp.carrier_freq_offset_hz / sample_rate_hz;
        for (i, s) in out.iter_mut().enumerate() {
            *s *= Complex64::from_polar(1.0, step * i as f64);
        }
    }
    if fp.phase_noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut walk = 0.0f64;
        for s in out.iter_mut() {
            let incr: f64 = StandardNormal.sample(&mut rng);
            walk += fp.phase_noise_std * incr;
            *s *= Complex64::from_polar(1.0, walk);
        }
    }
    for s in &out {
        if !s.re.is_finite() || !s.im.is_finite() {
            return Err(Error::numeric("fingerprint output is non-finite"));
        }
    }
    Ok(out)
}

/// Waveform amplitude for a transmitter given the scene noise floor.
fn tx_amplitude(cn0_dbhz: f64, noise_std: f64, sample_rate_hz: f64) -> f64 {
    if noise_std == 0.0 {
        1.0
    } else {
        noise_std * 10f64.powf(cn0_dbhz / 20.0) / sample_rate_hz.sqrt()
    }
}

/// Synthesizes one transmitter: scaled waveform -> fingerprint -> channel.
fn synthesize_transmitter(
    tx: &TransmitterSpec,
    scene: &SceneSpec,
    list_index: usize,
    num_samples: usize,
) -> Result<Vec<Complex64>> {
    let code = gold_code(tx.prn_id)?;
    let amp = tx_amplitude(
        tx.carrier_to_noise_density_dbhz,
        scene.noise_std,
        scene.sample_rate_hz,
    );
    let mut waveform = prn_waveform(&code, scene.sample_rate_hz, num_samples);
    if amp != 1.0 {
        for s in waveform.iter_mut() {
            *s *= amp;
        }
    }
    let tx_seed = mix_seed(scene.rng_seed, mix_seed(list_index as u64, tx.content_hash()));
    let shaped = apply_fingerprint(&waveform, &tx.fingerprint, scene.sample_rate_hz, tx_seed)?;
    // Sparse FIR channel, delays quantized to the nearest sample, output
    // truncated to the capture length.
    let mut out = vec![Complex64::new(0.0, 0.0); num_samples];
    for path in &tx.channel.paths {
        let d = (path.delay_s * scene.sample_rate_hz).round() as usize;
        if d >= num_samples {
            continue;
        }
        for i in d..num_samples {
            out[i] += path.gain * shaped[i - d];
        }
    }
    Ok(out)
}

fn synthesize_sum(scene: &SceneSpec, with_noise: bool) -> Result<Vec<Complex64>> {
    scene.validate()?;
    let n = scene.num_samples();
    if n == 0 {
        return Err(Error::validation("scene.duration_s", "zero samples requested"));
    }
    let mut acc = vec![Complex64::new(0.0, 0.0); n];
    for (i, tx) in scene.genuine.iter().enumerate() {
        let y = synthesize_transmitter(tx, scene, i, n)?;
        for (a, v) in acc.iter_mut().zip(&y) {
            *a += v;
        }
    }
    for (i, tx) in scene.spoofers.iter().enumerate() {
        let y = synthesize_transmitter(tx, scene, i, n)?;
        for (a, v) in acc.iter_mut().zip(&y) {
            *a += v;
        }
    }
    if with_noise && scene.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(scene.rng_seed, NOISE_SALT));
        let per_component = scene.noise_std / 2f64.sqrt();
        for a in acc.iter_mut() {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            *a += Complex64::new(re * per_component, im * per_component);
        }
    }
    Ok(acc)
}

const NOISE_SALT: u64 = 0x6e6f_6973_655f_7632;

/// Synthesizes a clean (spoofer-free) scene.
pub fn synthesize_clean(scene: &SceneSpec) -> Result<Vec<Complex64>> {
    if !scene.spoofers.is_empty() {
        return Err(Error::validation(
            "scene.spoofers",
            "synthesize_clean requires an empty spoofer list",
        ));
    }
    synthesize_sum(scene, true)
}

/// Synthesizes the full scene; the label is Spoofed iff any spoofer is present.
pub fn synthesize_scene(scene: &SceneSpec) -> Result<LabeledCapture> {
    let samples = synthesize_sum(scene, true)?;
    Ok(LabeledCapture {
        samples,
        sample_rate_hz: scene.sample_rate_hz,
        label: if scene.spoofers.is_empty() {
            Label::Clean
        } else {
            Label::Spoofed
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_tx(role: Role) -> TransmitterSpec {
        TransmitterSpec {
            prn_id: 1,
            fingerprint: FingerprintSpec::identity(),
            channel: ChannelSpec::direct(),
            carrier_to_noise_density_dbhz: 45.0,
            role,
        }
    }

    fn noiseless_scene(genuine: Vec<TransmitterSpec>, spoofers: Vec<TransmitterSpec>) -> SceneSpec {
        SceneSpec {
            genuine,
            spoofers,
            noise_std: 0.0,
            sample_rate_hz: 2.046e6,
            duration_s: 0.002,
            rng_seed: 11,
        }
    }

    /// O(n^2) reference DFT for the tone-placement oracles.
    fn dft(x: &[Complex64]) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                let mut acc = Complex64::new(0.0, 0.0);
                for (q, v) in x.iter().enumerate() {
                    let ang = -2.0 * PI * (k * q) as f64 / n as f64;
                    acc += v * Complex64::from_polar(1.0, ang);
                }
                acc
            })
            .collect()
    }

    fn peak_bin(spectrum: &[Complex64]) -> usize {
        let mut best = 0;
        for (i, v) in spectrum.iter().enumerate() {
            if v.norm() > spectrum[best].norm() {
                best = i;
            }
        }
        best
    }

    #[test]
    fn pure_noise_variance_matches_noise_std() {
        let scene = SceneSpec {
            genuine: vec![],
            spoofers: vec![],
            noise_std: 1.0,
            sample_rate_hz: 1e5,
            duration_s: 1.0,
            rng_seed: 7,
        };
        let samples = synthesize_clean(&scene).unwrap();
        assert_eq!(samples.len(), 100_000);
        let power: f64 = samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / samples.len() as f64;
        assert!((power - 1.0).abs() < 0.02, "power = {power}");
    }

    #[test]
    fn identity_channel_returns_bare_waveform() {
        let scene = noiseless_scene(vec![one_tx(Role::Genuine)], vec![]);
        let got = synthesize_clean(&scene).unwrap();
        let code = gold_code(1).unwrap();
        let want = prn_waveform(&code, scene.sample_rate_hz, scene.num_samples());
        assert_eq!(got, want);
    }

    #[test]
    fn two_path_channel_matches_convolution_oracle() {
        let fs = 2.046e6;
        let delay_samples = 100usize;
        let mut tx = one_tx(Role::Genuine);
        tx.channel = ChannelSpec {
            paths: vec![
                PathSpec { gain: 1.0, delay_s: 0.0 },
                PathSpec { gain: 0.5, delay_s: delay_samples as f64 / fs },
            ],
        };
        let scene = noiseless_scene(vec![tx], vec![]);
        let got = synthesize_clean(&scene).unwrap();

        // brute-force full convolution with [1, 0 x 99, 0.5], truncated
        let code = gold_code(1).unwrap();
        let w = prn_waveform(&code, fs, scene.num_samples());
        let mut impulse = vec![0.0f64; delay_samples + 1];
        impulse[0] = 1.0;
        impulse[delay_samples] = 0.5;
        let mut want = vec![Complex64::new(0.0, 0.0); scene.num_samples()];
        for (i, sample) in want.iter_mut().enumerate() {
            for (d, &g) in impulse.iter().enumerate() {
                if g != 0.0 && i >= d {
                    *sample += g * w[i - d];
                }
            }
        }
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn identity_fingerprint_is_a_fixed_point() {
        let code = gold_code(3).unwrap();
        let w = prn_waveform(&code, 2.046e6, 4092);
        let out = apply_fingerprint(&w, &FingerprintSpec::identity(), 2.046e6, 1).unwrap();
        assert_eq!(out, w);
    }

    #[test]
    fn cfo_moves_the_tone_peak() {
        let n = 256usize;
        let fs = 256.0;
        // tone at bin 20, CFO of exactly 8 bins
        let tone: Vec<Complex64> = (0..n)
            .map(|i| Complex64::from_polar(1.0, 2.0 * PI * 20.0 * i as f64 / n as f64))
            .collect();
        assert_eq!(peak_bin(&dft(&tone)), 20);
        let fp = FingerprintSpec {
            carrier_freq_offset_hz: 8.0 * fs / n as f64,
            ..FingerprintSpec::identity()
        };
        let shifted = apply_fingerprint(&tone, &fp, fs, 1).unwrap();
        assert_eq!(peak_bin(&dft(&shifted)), 28);
    }

    #[test]
    fn iq_imbalance_image_tone_ratio() {
        let n = 256usize;
        let fs = 256.0;
        let k = 20usize;
        let tone: Vec<Complex64> = (0..n)
            .map(|i| Complex64::from_polar(1.0, 2.0 * PI * k as f64 * i as f64 / n as f64))
            .collect();
        let g = 1.3f64;
        let fp = FingerprintSpec { iq_gain_imbalance: g, ..FingerprintSpec::identity() };
        let out = apply_fingerprint(&tone, &fp, fs, 1).unwrap();
        let spectrum = dft(&out);
        let signal = spectrum[k].norm();
        let image = spectrum[n - k].norm();
        let want = ((g - 1.0) / (g + 1.0)).abs();
        assert!(
            (image / signal - want).abs() < 1e-9,
            "ratio {} want {want}",
            image / signal
        );
    }

    #[test]
    fn scene_superposition_is_exact() {
        let mut genuine = one_tx(Role::Genuine);
        genuine.fingerprint.phase_noise_std = 0.002;
        genuine.fingerprint.carrier_freq_offset_hz = 120.0;
        let mut spoofer = one_tx(Role::Spoofer);
        spoofer.fingerprint.phase_noise_std = 0.004;
        spoofer.fingerprint.cubic_nonlinearity = -0.05;
        spoofer.channel.paths[0].gain = 1.4;

        let combined = noiseless_scene(vec![genuine.clone()], vec![spoofer.clone()]);
        let got = synthesize_scene(&combined).unwrap();
        assert_eq!(got.label, Label::Spoofed);

        let clean_part = synthesize_clean(&noiseless_scene(vec![genuine], vec![])).unwrap();
        let mut spoof_as_genuine = spoofer;
        spoof_as_genuine.role = Role::Genuine;
        let spoof_part =
            synthesize_clean(&noiseless_scene(vec![spoof_as_genuine], vec![])).unwrap();
        for ((c, a), b) in got.samples.iter().zip(&clean_part).zip(&spoof_part) {
            assert_eq!(*c, a + b);
        }
    }

    #[test]
    fn empty_spoofer_scene_reduces_to_clean() {
        let scene = SceneSpec {
            genuine: vec![one_tx(Role::Genuine)],
            spoofers: vec![],
            noise_std: 0.5,
            sample_rate_hz: 2.046e6,
            duration_s: 0.001,
            rng_seed: 3,
        };
        let a = synthesize_scene(&scene).unwrap();
        let b = synthesize_clean(&scene).unwrap();
        assert_eq!(a.label, Label::Clean);
        assert_eq!(a.samples, b);
    }

    #[test]
    fn amplitude_power_square_law() {
        let reference = noiseless_scene(vec![], vec![one_tx(Role::Spoofer)]);
        let mut doubled = reference.clone();
        doubled.spoofers[0].channel.paths[0].gain = 2.0;
        let p_ref: f64 = synthesize_scene(&reference)
            .unwrap()
            .samples
            .iter()
            .map(|s| s.norm_sqr())
            .sum();
        let p_2x: f64 = synthesize_scene(&doubled)
            .unwrap()
            .samples
            .iter()
            .map(|s| s.norm_sqr())
            .sum();
        assert!((p_2x / p_ref - 4.0).abs() < 1e-12);
    }

    #[test]
    fn synthesis_is_deterministic() {
        let mut tx = one_tx(Role::Genuine);
        tx.fingerprint.phase_noise_std = 0.01;
        let scene = SceneSpec {
            genuine: vec![tx],
            spoofers: vec![],
            noise_std: 0.7,
            sample_rate_hz: 2.046e6,
            duration_s: 0.001,
            rng_seed: 99,
        };
        let a = synthesize_clean(&scene).unwrap();
        let b = synthesize_clean(&scene).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.re.to_bits(), y.re.to_bits());
            assert_eq!(x.im.to_bits(), y.im.to_bits());
        }
    }

    #[test]
    fn cfo_composition_adds() {
        let code = gold_code(5).unwrap();
        let w = prn_waveform(&code, 2.046e6, 2046);
        let f1 = 140.0;
        let f2 = -37.5;
        let fp1 = FingerprintSpec { carrier_freq_offset_hz: f1, ..FingerprintSpec::identity() };
        let fp2 = FingerprintSpec { carrier_freq_offset_hz: f2, ..FingerprintSpec::identity() };
        let fp12 = FingerprintSpec {
            carrier_freq_offset_hz: f1 + f2,
            ..FingerprintSpec::identity()
        };
        let a = apply_fingerprint(
            &apply_fingerprint(&w, &fp1, 2.046e6, 1).unwrap(),
            &fp2,
            2.046e6,
            1,
        )
        .unwrap();
        let b = apply_fingerprint(&w, &fp12, 2.046e6, 1).unwrap();
        let num: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).norm_sqr()).sum();
        let den: f64 = b.iter().map(|y| y.norm_sqr()).sum();
        assert!((num / den).sqrt() < 1e-9);
    }

    #[test]
    fn single_path_power_accounting() {
        let mut tx = one_tx(Role::Genuine);
        tx.fingerprint.cubic_nonlinearity = 0.1;
        tx.fingerprint.iq_gain_imbalance = 1.05;
        let scene = noiseless_scene(vec![tx.clone()], vec![]);
        let out = synthesize_clean(&scene).unwrap();
        let code = gold_code(tx.prn_id).unwrap();
        let w = prn_waveform(&code, scene.sample_rate_hz, scene.num_samples());
        let tx_seed = mix_seed(scene.rng_seed, mix_seed(0, tx.content_hash()));
        let shaped = apply_fingerprint(&w, &tx.fingerprint, scene.sample_rate_hz, tx_seed).unwrap();
        let p_out: f64 = out.iter().map(|s| s.norm_sqr()).sum();
        let p_fp: f64 = shaped.iter().map(|s| s.norm_sqr()).sum();
        assert!((p_out / p_fp - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gain_scaling_is_linear() {
        let mut tx = one_tx(Role::Genuine);
        tx.fingerprint.cubic_nonlinearity = 0.2;
        tx.channel = ChannelSpec {
            paths: vec![
                PathSpec { gain: 0.8, delay_s: 0.0 },
                PathSpec { gain: -0.3, delay_s: 5e-5 },
            ],
        };
        let base = noiseless_scene(vec![tx], vec![]);
        let reference = synthesize_clean(&base).unwrap();
        for c in [2.0f64, 0.37, -1.25] {
            let mut scaled = base.clone();
            for p in scaled.genuine[0].channel.paths.iter_mut() {
                p.gain *= c;
            }
            let got = synthesize_clean(&scaled).unwrap();
            for (g, r) in got.iter().zip(&reference) {
                assert!((g - c * r).norm() <= 1e-12 * (c * r).norm().max(1e-12));
            }
        }
    }

    #[test]
    fn validation_names_offending_field() {
        let mut scene = noiseless_scene(vec![one_tx(Role::Genuine)], vec![]);
        scene.sample_rate_hz = -1.0;
        let err = synthesize_clean(&scene).unwrap_err();
        assert!(err.to_string().contains("sample_rate_hz"));

        let mut scene = noiseless_scene(vec![one_tx(Role::Genuine)], vec![]);
        scene.genuine[0].fingerprint.iq_gain_imbalance = 0.0;
        let err = synthesize_clean(&scene).unwrap_err();
        assert!(err.to_string().contains("iq_gain_imbalance"));
    }

    #[test]
    fn scene_toml_round_trip() {
        let scene = SceneSpec {
            genuine: vec![one_tx(Role::Genuine)],
            spoofers: vec![one_tx(Role::Spoofer)],
            noise_std: 1.0,
            sample_rate_hz: 25e6,
            duration_s: 60.0,
            rng_seed: 42,
        };
        let text = scene.to_toml_string().unwrap();
        let back = SceneSpec::from_toml_str(&text).unwrap();
        assert_eq!(scene, back);
    }
}
