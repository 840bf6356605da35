//! The dataset registry: featurized segments grouped by dataset tag.
//!
//! Tags are kept in a sorted map, so episode sampling order depends only on
//! the tag names and the seed, never on registration order.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::IqFormat;
use crate::error::{Error, Result};
use crate::features::{Normalization, Spectrogram, StftConfig};
use crate::sigmodel::Label;
use crate::tracking::PostCorrFeatures;

/// One featurized segment.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureItem {
    pub spectrogram: Spectrogram,
    pub postcorr: Option<PostCorrFeatures>,
    pub label: Label,
}

/// All featurized segments of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub tag: String,
    pub stft: StftConfig,
    pub normalization: Normalization,
    /// Epochs per segment when post-correlation features are present, else 0.
    pub postcorr_epochs: usize,
    pub items: Vec<FeatureItem>,
}

impl FeatureSet {
    pub fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::validation("feature set", format!("{}: no items", self.tag)));
        }
        let (rows, cols) = (self.items[0].spectrogram.rows, self.items[0].spectrogram.cols);
        for (i, item) in self.items.iter().enumerate() {
            if item.spectrogram.rows != rows || item.spectrogram.cols != cols {
                return Err(Error::validation(
                    "feature set",
                    format!("{}: item {i} spectrogram shape differs", self.tag),
                ));
            }
            if let Some(pc) = &item.postcorr {
                pc.validate()?;
                if pc.epochs() != self.postcorr_epochs {
                    return Err(Error::validation(
                        "feature set",
                        format!(
                            "{}: item {i} has {} epochs, set declares {}",
                            self.tag,
                            pc.epochs(),
                            self.postcorr_epochs
                        ),
                    ));
                }
            } else if self.postcorr_epochs != 0 {
                return Err(Error::validation(
                    "feature set",
                    format!("{}: item {i} is missing post-correlation features", self.tag),
                ));
            }
        }
        Ok(())
    }

    pub fn indices_by_label(&self, label: Label) -> Vec<usize> {
        self.items
            .iter()
            .enumerate()
            .filter(|(_, it)| it.label == label)
            .map(|(i, _)| i)
            .collect()
    }
}

/// In-memory registry of featurized datasets, keyed by tag.
#[derive(Debug, Default, Clone)]
pub struct Registry {
    sets: BTreeMap<String, FeatureSet>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, set: FeatureSet) -> Result<()> {
        set.validate()?;
        if self.sets.contains_key(&set.tag) {
            return Err(Error::validation(
                "registry",
                format!("tag {:?} already registered", set.tag),
            ));
        }
        self.sets.insert(set.tag.clone(), set);
        Ok(())
    }

    pub fn get(&self, tag: &str) -> Result<&FeatureSet> {
        self.sets.get(tag).ok_or_else(|| {
            Error::validation("registry", format!("unknown dataset tag {tag:?}"))
        })
    }

    /// Tags in sorted order.
    pub fn tags(&self) -> Vec<&str> {
        self.sets.keys().map(|s| s.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }
}

/// One dataset's on-disk description inside a registry file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub tag: String,
    pub clean_capture: PathBuf,
    pub spoofed_capture: PathBuf,
    pub format: IqFormat,
    #[serde(default)]
    pub clean_postcorr_csv: Option<PathBuf>,
    #[serde(default)]
    pub spoofed_postcorr_csv: Option<PathBuf>,
}

/// The registry file: a TOML list of [`DatasetRecord`]s.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RegistryFile {
    #[serde(default)]
    pub dataset: Vec<DatasetRecord>,
}

impl RegistryFile {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: RegistryFile =
            toml::from_str(text).map_err(|e| Error::validation("registry file", e.to_string()))?;
        file.validate_tags()?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let file = Self::from_toml_str(&text)?;
        for rec in &file.dataset {
            for p in [&rec.clean_capture, &rec.spoofed_capture] {
                if !p.exists() {
                    return Err(Error::data(format!(
                        "dataset {:?}: capture {} does not exist",
                        rec.tag,
                        p.display()
                    )));
                }
            }
        }
        Ok(file)
    }

    fn validate_tags(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for rec in &self.dataset {
            if !seen.insert(&rec.tag) {
                return Err(Error::validation(
                    "registry file",
                    format!("duplicate tag {:?}", rec.tag),
                ));
            }
        }
        Ok(())
    }

    pub fn get(&self, tag: &str) -> Result<&DatasetRecord> {
        self.dataset
            .iter()
            .find(|r| r.tag == tag)
            .ok_or_else(|| Error::validation("registry file", format!("unknown tag {tag:?}")))
    }
}
