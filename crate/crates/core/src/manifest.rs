//! Dataset manifest: subjects, stimuli with their feature files, and EEG
//! recordings. Paths are stored relative to the manifest's directory.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mmts;
use crate::series::TimeSeries;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stimulus {
    pub id: String,
    /// feature name -> MMTS file
    #[serde(default)]
    pub features: BTreeMap<String, String>,
    /// words JSON (with a sibling embedding matrix)
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub words: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recording {
    pub subject_id: u32,
    pub stimulus_id: String,
    /// raw broadband EEG
    pub eeg: String,
    /// preprocessed variants, e.g. "broadband" / "multiband"
    #[serde(default)]
    pub variants: BTreeMap<String, String>,
}

impl Recording {
    pub fn eeg_file(&self, variant: &str) -> Option<&str> {
        match variant {
            "raw" => Some(&self.eeg),
            v => self.variants.get(v).map(String::as_str),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub subjects: Vec<Subject>,
    pub stimuli: Vec<Stimulus>,
    pub recordings: Vec<Recording>,
    /// validation subject ranges suited to this dataset
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fold_defs: Vec<SubjectRange>,
    /// provenance of generated datasets
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<serde_json::Value>,
    #[serde(skip)]
    root: PathBuf,
}

impl DatasetManifest {
    pub fn new(subjects: Vec<Subject>, stimuli: Vec<Stimulus>, recordings: Vec<Recording>) -> Self {
        Self { subjects, stimuli, recordings, fold_defs: Vec::new(), generator: None, root: PathBuf::new() }
    }

    /// Reads `dir/manifest.json` (or a manifest file path) and validates it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&file)
            .map_err(|e| Error::Manifest(format!("cannot read {}: {e}", file.display())))?;
        let mut m: Self = serde_json::from_str(&text)?;
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn set_root(&mut self, root: impl Into<PathBuf>) {
        self.root = root.into();
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn stimulus_index(&self, id: &str) -> Option<usize> {
        self.stimuli.iter().position(|s| s.id == id)
    }

    pub fn subject_ids(&self) -> BTreeSet<u32> {
        self.subjects.iter().map(|s| s.id).collect()
    }

    /// Checks references and that referenced files exist.
    pub fn validate(&self) -> Result<()> {
        let subjects = self.subject_ids();
        if subjects.len() != self.subjects.len() {
            return Err(Error::Manifest("duplicate subject id".into()));
        }
        let mut stim_ids = BTreeSet::new();
        for s in &self.stimuli {
            if !stim_ids.insert(s.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate stimulus id `{}`", s.id)));
            }
            for (name, file) in &s.features {
                self.check_file(file, &format!("stimulus `{}` feature `{name}`", s.id))?;
            }
            if let Some(w) = &s.words {
                self.check_file(w, &format!("stimulus `{}` words", s.id))?;
            }
        }
        for (i, r) in self.recordings.iter().enumerate() {
            if !subjects.contains(&r.subject_id) {
                return Err(Error::Manifest(format!("recording {i} references unknown subject {}", r.subject_id)));
            }
            if !stim_ids.contains(r.stimulus_id.as_str()) {
                return Err(Error::Manifest(format!(
                    "recording {i} (subject {}) references unknown stimulus `{}`",
                    r.subject_id, r.stimulus_id
                )));
            }
            self.check_file(&r.eeg, &format!("recording {i} EEG"))?;
            for (name, file) in &r.variants {
                self.check_file(file, &format!("recording {i} variant `{name}`"))?;
            }
        }
        Ok(())
    }

    fn check_file(&self, rel: &str, what: &str) -> Result<()> {
        if self.root.as_os_str().is_empty() || self.resolve(rel).is_file() {
            Ok(())
        } else {
            Err(Error::Manifest(format!("{what}: file `{rel}` not found")))
        }
    }

    pub fn read_eeg(&self, recording: usize, variant: &str) -> Result<TimeSeries> {
        let r = &self.recordings[recording];
        let file = r.eeg_file(variant).ok_or_else(|| {
            Error::Manifest(format!(
                "recording {recording} (subject {}, stimulus `{}`) has no `{variant}` EEG; run preprocess first",
                r.subject_id, r.stimulus_id
            ))
        })?;
        mmts::read(self.resolve(file))
    }

    pub fn read_feature(&self, stimulus: usize, name: &str) -> Result<TimeSeries> {
        let s = &self.stimuli[stimulus];
        let file = s.features.get(name).ok_or_else(|| Error::MissingFeature(format!("{name} (stimulus `{}`)", s.id)))?;
        mmts::read(self.resolve(file))
    }
}

/// Inclusive range of subject ids, written `"a-b"` or `"a"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubjectRange {
    pub first: u32,
    pub last: u32,
}

impl SubjectRange {
    pub fn contains(&self, id: u32) -> bool {
        (self.first..=self.last).contains(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> {
        self.first..=self.last
    }
}

impl FromStr for SubjectRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse = |v: &str| v.trim().parse::<u32>().map_err(|_| Error::InvalidArgument(format!("bad subject range `{s}`")));
        let (first, last) = match s.split_once('-') {
            Some((a, b)) => (parse(a)?, parse(b)?),
            None => (parse(s)?, parse(s)?),
        };
        if first > last {
            return Err(Error::InvalidArgument(format!("empty subject range `{s}`")));
        }
        Ok(Self { first, last })
    }
}

impl fmt::Display for SubjectRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.first == self.last {
            write!(f, "{}", self.first)
        } else {
            write!(f, "{}-{}", self.first, self.last)
        }
    }
}

impl Serialize for SubjectRange {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SubjectRange {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Validation subject ranges of the five published folds.
pub fn default_fold_defs() -> Vec<SubjectRange> {
    ["1-26", "18-34", "35-51", "52-68", "69-85"].iter().map(|s| s.parse().unwrap()).collect()
}
