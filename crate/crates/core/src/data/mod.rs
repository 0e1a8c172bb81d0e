//! Cases on disk, cropping, augmentation, pair sampling and the synthetic
//! nodule generator.

mod augment;
mod case;
mod pairs;
mod synth;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use augment::{augment, flip, rot90_xy, AugmentConfig};
pub use case::{crop_patch, Case, Label, IMAGE_FILE, MASK_FILE, META_FILE};
pub use pairs::{crop_all, realize, sample_pair, PairPlan, PairSample, PairSampler, PatchItem};
pub use synth::{surface_to_volume, synth_case};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Case directory, relative to the manifest's directory.
    pub dir: String,
    pub split: String,
}

/// JSON list of case directories with split tags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let entries: Vec<ManifestEntry> = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Format(format!("manifest {}: {e}", path.display())))?;
        let manifest = Manifest {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            entries,
        };
        manifest.check_disjoint()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.check_disjoint()?;
        let json = serde_json::to_string_pretty(&self.entries)?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    /// A case directory may appear in at most one split.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.dir.as_str()) {
                return Err(Error::Format(format!("case {} listed more than once in manifest", e.dir)));
            }
        }
        Ok(())
    }

    pub fn split_dirs(&self, split: &str) -> Vec<PathBuf> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| self.root.join(&e.dir))
            .collect()
    }

    /// Loads every case tagged `split`, verifying ids are unique across the
    /// whole manifest.
    pub fn load_split(&self, split: &str) -> Result<Vec<Case>> {
        let cases = self
            .split_dirs(split)
            .iter()
            .map(|d| Case::load(d))
            .collect::<Result<Vec<_>>>()?;
        let mut ids = HashSet::new();
        for c in &cases {
            if !ids.insert(c.id.as_str()) {
                return Err(Error::Format(format!("duplicate case id {} in split {split}", c.id)));
            }
        }
        Ok(cases)
    }
}

/// Class balance check shared by the pipeline stages.
pub fn require_two_classes(cases: &[Case], what: &str) -> Result<()> {
    let malignant = cases.iter().filter(|c| c.label == Label::Malignant).count();
    if cases.is_empty() || malignant == 0 || malignant == cases.len() {
        return Err(Error::Data(format!("{what} must contain both benign and malignant cases")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest {
            root: dir.path().to_path_buf(),
            entries: vec![
                ManifestEntry { dir: "cases/a".into(), split: "train".into() },
                ManifestEntry { dir: "cases/b".into(), split: "test".into() },
            ],
        };
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        assert_eq!(Manifest::load(&path).unwrap(), m);
        assert_eq!(m.split_dirs("test"), vec![dir.path().join("cases/b")]);

        let dup = r#"[{"dir":"a","split":"train"},{"dir":"a","split":"val"}]"#;
        fs::write(&path, dup).unwrap();
        assert!(matches!(Manifest::load(&path), Err(Error::Format(_))));
    }
}
