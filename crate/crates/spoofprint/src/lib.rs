//! GNSS spoofing detection through meta-learned radio-frequency fingerprints.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! * [`sigmodel`] — synthesize GNSS-like baseband scenes with per-transmitter
//!   hardware impairments and multipath channels, with or without a spoofer.
//! * [`features`] — segment captures and compute channel-normalized STFT
//!   magnitude spectrograms (the pre-correlation feature branch).
//! * [`tracking`] — Gold codes and a simplified DLL/PLL/FLL tracking chain
//!   producing per-epoch observables (the post-correlation feature branch),
//!   plus ingestion of externally produced receiver logs.
//! * [`tensor`] — a dense f64 n-d array with reverse-mode autodiff, SGD and
//!   Adam, and a binary checkpoint format.
//! * [`embedder`] — the dual-branch encoder with prototypical loss and
//!   nearest-prototype / k-NN inference.
//! * [`metalearn`] — episodic task sampling and the meta-training loop with
//!   inner-loop SGD adaptation and ADMM l1 regularization.
//! * [`dataio`] — raw IQ capture reader/writer, feature caches and the
//!   dataset registry.
//! * [`bench`] — the synthetic fingerprint-family benchmark used for
//!   cross-testing experiments without external recordings.

pub mod bench;
pub mod dataio;
pub mod embedder;
pub mod error;
pub mod features;
pub mod metalearn;
pub mod sigmodel;
pub mod tensor;
pub mod tracking;

pub use error::{Error, Result};

/// SplitMix64 step, used to derive independent sub-seeds from one run seed.
pub fn mix_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
