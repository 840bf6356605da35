//! Post-correlation feature extraction: Gold codes, a simplified
//! DLL/PLL/FLL tracking chain, and ingestion of external receiver logs.
//!
//! The tracking loop is deliberately minimal — one channel, acquisition
//! assumed, one feature epoch per 1 ms code period — because its job here is
//! to produce the per-segment observables (code phase, DLL discriminator,
//! Doppler, FLL/PLL lock) that feed the classifier, not to run a receiver.

mod ingest;
mod loops;

pub use ingest::{export_postcorr_csv, ingest_postcorr_csv, ColumnMap};
pub use loops::{early_late_discriminator, track_segment, TrackConfig, TrackInit};

use crate::error::{Error, Result};

/// Chips per C/A code period.
pub const CODE_LENGTH: usize = 1023;
/// C/A chipping rate in chips per second.
pub const CHIP_RATE_HZ: f64 = 1.023e6;
/// One code period in seconds.
pub const CODE_PERIOD_S: f64 = CODE_LENGTH as f64 / CHIP_RATE_HZ;

/// G2 output phase taps per PRN (1-based register positions), PRNs 1..=37.
const G2_TAPS: [(usize, usize); 37] = [
    (2, 6),
    (3, 7),
    (4, 8),
    (5, 9),
    (1, 9),
    (2, 10),
    (1, 8),
    (2, 9),
    (3, 10),
    (2, 3),
    (3, 4),
    (5, 6),
    (6, 7),
    (7, 8),
    (8, 9),
    (9, 10),
    (1, 4),
    (2, 5),
    (3, 6),
    (4, 7),
    (5, 8),
    (6, 9),
    (1, 3),
    (4, 6),
    (5, 7),
    (6, 8),
    (7, 9),
    (8, 10),
    (1, 6),
    (2, 7),
    (3, 8),
    (4, 9),
    (5, 10),
    (4, 10),
    (1, 7),
    (2, 8),
    (4, 10),
];

/// A 1023-chip C/A spreading code in +/-1 form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrnCode {
    prn_id: u8,
    chips: Vec<i8>,
}

impl PrnCode {
    pub fn prn_id(&self) -> u8 {
        self.prn_id
    }

    /// Chips as +/-1 values, length 1023.
    pub fn chips(&self) -> &[i8] {
        &self.chips
    }

    /// Chip value at an arbitrary (wrapping) chip index.
    pub fn chip_at(&self, idx: i64) -> f64 {
        let n = CODE_LENGTH as i64;
        self.chips[idx.rem_euclid(n) as usize] as f64
    }

    /// Circular correlation with another code at an integer chip lag.
    pub fn circular_correlation(&self, other: &PrnCode, lag: usize) -> i32 {
        (0..CODE_LENGTH)
            .map(|i| self.chips[i] as i32 * other.chips[(i + lag) % CODE_LENGTH] as i32)
            .sum()
    }
}

/// Generates the C/A Gold code for `prn_id` in 1..=37 from the two-LFSR
/// G1/G2 construction. Register bit 0 → chip +1, bit 1 → chip -1.
pub fn gold_code(prn_id: u8) -> Result<PrnCode> {
    if !(1..=37).contains(&prn_id) {
        return Err(Error::validation(
            "prn_id",
            format!("{prn_id} outside 1..=37"),
        ));
    }
    let (t1, t2) = G2_TAPS[(prn_id - 1) as usize];
    let mut g1 = [1u8; 10];
    let mut g2 = [1u8; 10];
    let mut chips = Vec::with_capacity(CODE_LENGTH);
    for _ in 0..CODE_LENGTH {
        let out = g1[9] ^ g2[t1 - 1] ^ g2[t2 - 1];
        chips.push(if out == 1 { -1 } else { 1 });
        let f1 = g1[2] ^ g1[9];
        let f2 = g2[1] ^ g2[2] ^ g2[5] ^ g2[7] ^ g2[8] ^ g2[9];
        g1.rotate_right(1);
        g2.rotate_right(1);
        g1[0] = f1;
        g2[0] = f2;
    }
    Ok(PrnCode { prn_id, chips })
}

/// Per-epoch tracking observables for one segment. One epoch per code period.
#[derive(Debug, Clone, PartialEq)]
pub struct PostCorrFeatures {
    pub code_phase: Vec<f64>,
    pub dll_discr: Vec<f64>,
    pub doppler_hz: Vec<f64>,
    pub fll_lock: Vec<f64>,
    pub pll_lock: Vec<f64>,
}

/// The five observable kinds, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PostCorrField {
    CodePhase,
    DllDiscr,
    Doppler,
    FllLock,
    PllLock,
}

impl PostCorrField {
    pub const ALL: [PostCorrField; 5] = [
        PostCorrField::CodePhase,
        PostCorrField::DllDiscr,
        PostCorrField::Doppler,
        PostCorrField::FllLock,
        PostCorrField::PllLock,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PostCorrField::CodePhase => "codephase",
            PostCorrField::DllDiscr => "dlldiscr",
            PostCorrField::Doppler => "doppler",
            PostCorrField::FllLock => "flllock",
            PostCorrField::PllLock => "plllock",
        }
    }

    pub fn parse(s: &str) -> Result<PostCorrField> {
        match s.to_ascii_lowercase().as_str() {
            "codephase" | "code_phase" => Ok(PostCorrField::CodePhase),
            "dlldiscr" | "dll_discr" => Ok(PostCorrField::DllDiscr),
            "doppler" | "doppler_hz" => Ok(PostCorrField::Doppler),
            "flllock" | "fll_lock" => Ok(PostCorrField::FllLock),
            "plllock" | "pll_lock" => Ok(PostCorrField::PllLock),
            other => Err(Error::validation(
                "postcorr field",
                format!("unknown feature name {other:?}"),
            )),
        }
    }
}

impl PostCorrFeatures {
    pub fn new() -> Self {
        Self {
            code_phase: Vec::new(),
            dll_discr: Vec::new(),
            doppler_hz: Vec::new(),
            fll_lock: Vec::new(),
            pll_lock: Vec::new(),
        }
    }

    pub fn epochs(&self) -> usize {
        self.code_phase.len()
    }

    pub fn field(&self, f: PostCorrField) -> &[f64] {
        match f {
            PostCorrField::CodePhase => &self.code_phase,
            PostCorrField::DllDiscr => &self.dll_discr,
            PostCorrField::Doppler => &self.doppler_hz,
            PostCorrField::FllLock => &self.fll_lock,
            PostCorrField::PllLock => &self.pll_lock,
        }
    }

    pub fn push_epoch(&mut self, code_phase: f64, dll: f64, doppler: f64, fll: f64, pll: f64) {
        self.code_phase.push(code_phase);
        self.dll_discr.push(dll);
        self.doppler_hz.push(doppler);
        self.fll_lock.push(fll);
        self.pll_lock.push(pll);
    }

    /// All sequences present, equal non-zero length, finite, locks in [-1, 1].
    pub fn validate(&self) -> Result<()> {
        let n = self.epochs();
        if n == 0 {
            return Err(Error::validation("postcorr", "no epochs"));
        }
        for f in PostCorrField::ALL {
            let s = self.field(f);
            if s.len() != n {
                return Err(Error::validation(
                    "postcorr",
                    format!("{} has {} epochs, expected {n}", f.name(), s.len()),
                ));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("{} contains a non-finite value", f.name())));
            }
        }
        for f in [PostCorrField::FllLock, PostCorrField::PllLock] {
            if self.field(f).iter().any(|&v| !(-1.0..=1.0).contains(&v)) {
                return Err(Error::validation(
                    "postcorr",
                    format!("{} outside [-1, 1]", f.name()),
                ));
            }
        }
        Ok(())
    }
}

impl Default for PostCorrFeatures {
    fn default() -> Self {
        Self::new()
    }
}
