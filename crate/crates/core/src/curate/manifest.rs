use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// One labelled case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Stable identifier; defaults to the label file stem.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case_id: Option<String>,
    pub image_path: PathBuf,
    pub label_path: PathBuf,
    pub class_map: BTreeMap<u32, String>,
    pub modality_tag: String,
    pub anatomy_tag: String,
    pub split_tag: Split,
    /// Whether the target classes were seen in training. Absent means seen.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seen: Option<bool>,
}

fn stem(p: &Path) -> String {
    let name = p
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.trim_end_matches(".gz").trim_end_matches(".nii").to_string()
}

impl ManifestEntry {
    pub fn id(&self) -> String {
        self.case_id.clone().unwrap_or_else(|| stem(&self.label_path))
    }

    pub fn is_seen(&self) -> bool {
        self.seen.unwrap_or(true)
    }
}

/// A dataset split description, stored as a JSON array of entries.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        DatasetManifest { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn split(&self, s: Split) -> DatasetManifest {
        DatasetManifest::new(self.entries.iter().filter(|e| e.split_tag == s).cloned().collect())
    }

    /// Reads a manifest; relative paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        let mut m: DatasetManifest = serde_json::from_slice(&raw)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for e in &mut m.entries {
            if e.image_path.is_relative() {
                e.image_path = base.join(&e.image_path);
            }
            if e.label_path.is_relative() {
                e.label_path = base.join(&e.label_path);
            }
        }
        let mut seen = std::collections::HashSet::new();
        for e in &m.entries {
            if !seen.insert(e.id()) {
                return Err(Error::Config(format!("duplicate case id {} in manifest", e.id())));
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        std::fs::write(path, json).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })
    }
}
