//! Surgical phase datasets: vocabularies, per-video 1 fps annotations and
//! train/val/test splits.
//!
//! Phase ids are 1-based at every file boundary and 0-based in memory; the
//! [`Phase`] newtype holds the 0-based index and converts at parse and write
//! time only.

mod ingest;
mod split;
mod synth;

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ingest::{
    downsample_frames, downsample_labels, load_annotations, write_canonical, AnnotationFormat,
    PhaseMapping,
};
pub use split::{make_split, natural_cmp, DatasetSplit, SplitOrdering};
pub use synth::{
    generate_synthetic, write_synthetic, SyntheticDataset, SyntheticSpec, SyntheticVideo,
    TransitionRegime,
};

/// A phase, stored as its 0-based index. Displays as the 1-based id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Phase(u16);

impl Phase {
    pub fn from_index(index: usize) -> Self {
        Phase(u16::try_from(index).expect("phase index fits in u16"))
    }

    /// Converts a 1-based external id; `None` when out of `1..=count`.
    pub fn from_id(id: usize, count: usize) -> Option<Self> {
        (1..=count).contains(&id).then(|| Phase::from_index(id - 1))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn id(self) -> usize {
        self.0 as usize + 1
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.id())
    }
}

pub fn phase_indices(labels: &[Phase]) -> Vec<usize> {
    labels.iter().map(|p| p.index()).collect()
}

/// The ordered phase names of a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseVocabulary {
    names: Vec<String>,
}

impl PhaseVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Invalid("phase vocabulary is empty".into()));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if n.trim().is_empty() {
                return Err(Error::Invalid("phase names must be non-empty".into()));
            }
            if !seen.insert(normalize_name(n)) {
                return Err(Error::Invalid(format!("duplicate phase name `{n}`")));
            }
        }
        Ok(Self { names })
    }

    /// Placeholder names `phase 1` .. `phase P`.
    pub fn numbered(count: usize) -> Self {
        Self {
            names: (1..=count).map(|i| format!("phase {i}")).collect(),
        }
    }

    /// Cholec80's seven phases in dataset order.
    pub fn cholec80() -> Self {
        Self::new(
            [
                "preparation",
                "calot triangle dissection",
                "clipping and cutting",
                "gallbladder dissection",
                "gallbladder packing",
                "cleaning and coagulation",
                "gallbladder retraction",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        )
        .expect("static vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, phase: Phase) -> &str {
        &self.names[phase.index()]
    }

    /// Case-, space- and punctuation-insensitive lookup.
    pub fn lookup(&self, name: &str) -> Option<Phase> {
        let key = normalize_name(name);
        self.names
            .iter()
            .position(|n| normalize_name(n) == key)
            .map(Phase::from_index)
    }

    pub fn phase(&self, id: usize) -> Option<Phase> {
        Phase::from_id(id, self.len())
    }
}

/// Lowercase alphanumerics only, so `CalotTriangleDissection` matches
/// `calot triangle dissection`.
pub(crate) fn normalize_name(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

/// One video's phase labels at 1 fps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoAnnotation {
    pub video_id: String,
    /// Frame rate of the raw annotation before downsampling.
    pub fps_source: f64,
    pub labels: Vec<Phase>,
    pub frame_paths: Option<Vec<PathBuf>>,
}

impl VideoAnnotation {
    pub fn new(
        video_id: impl Into<String>,
        fps_source: f64,
        labels: Vec<Phase>,
        frame_paths: Option<Vec<PathBuf>>,
        phase_count: usize,
    ) -> Result<Self> {
        let video_id = video_id.into();
        if labels.is_empty() {
            return Err(Error::Invalid(format!("video `{video_id}` has no frames")));
        }
        if let Some(bad) = labels.iter().find(|p| p.index() >= phase_count) {
            return Err(Error::Invalid(format!(
                "video `{video_id}`: phase id {bad} outside 1..={phase_count}"
            )));
        }
        if let Some(paths) = &frame_paths {
            if paths.len() != labels.len() {
                return Err(Error::Invalid(format!(
                    "video `{video_id}`: {} frame paths for {} labels",
                    paths.len(),
                    labels.len()
                )));
            }
        }
        Ok(Self {
            video_id,
            fps_source,
            labels,
            frame_paths,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn frame_path(&self, second: usize) -> Option<&Path> {
        self.frame_paths
            .as_ref()
            .and_then(|p| p.get(second))
            .map(PathBuf::as_path)
    }
}

/// Annotations plus vocabulary for one dataset root.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub vocab: PhaseVocabulary,
    pub videos: Vec<VideoAnnotation>,
}

impl Dataset {
    pub fn video(&self, id: &str) -> Option<&VideoAnnotation> {
        self.videos.iter().find(|v| v.video_id == id)
    }

    /// Looks up every id, failing on the first unknown one.
    pub fn videos_for(&self, ids: &[String]) -> Result<Vec<&VideoAnnotation>> {
        ids.iter()
            .map(|id| {
                self.video(id)
                    .ok_or_else(|| Error::data(&self.root, format!("unknown video `{id}`")))
            })
            .collect()
    }

    /// Frame counts per phase over the given videos.
    pub fn label_counts(&self, ids: &[String]) -> Result<Vec<u64>> {
        let mut counts = vec![0u64; self.vocab.len()];
        for v in self.videos_for(ids)? {
            for p in &v.labels {
                counts[p.index()] += 1;
            }
        }
        Ok(counts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholec80_vocabulary_has_seven_phases() {
        let v = PhaseVocabulary::cholec80();
        assert_eq!(v.len(), 7);
        assert!(v.names().iter().any(|n| n == "calot triangle dissection"));
        assert_eq!(v.lookup("CalotTriangleDissection"), Some(Phase::from_index(1)));
    }

    #[test]
    fn vocabulary_rejects_duplicates_and_blanks() {
        assert!(PhaseVocabulary::new(vec!["a".into(), "A".into()]).is_err());
        assert!(PhaseVocabulary::new(vec!["a".into(), " ".into()]).is_err());
        assert!(PhaseVocabulary::new(vec![]).is_err());
    }

    #[test]
    fn phase_ids_are_one_based() {
        assert_eq!(Phase::from_id(1, 7).unwrap().index(), 0);
        assert_eq!(Phase::from_id(7, 7).unwrap().id(), 7);
        assert!(Phase::from_id(0, 7).is_none());
        assert!(Phase::from_id(8, 7).is_none());
    }

    #[test]
    fn annotation_invariants() {
        let p = Phase::from_index;
        assert!(VideoAnnotation::new("v", 1.0, vec![], None, 3).is_err());
        assert!(VideoAnnotation::new("v", 1.0, vec![p(3)], None, 3).is_err());
        assert!(VideoAnnotation::new("v", 1.0, vec![p(0)], Some(vec![]), 3).is_err());
        let ok = VideoAnnotation::new("v", 1.0, vec![p(0)], None, 3).unwrap();
        assert_eq!(ok.len(), 1);
    }
}
