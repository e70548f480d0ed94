//! Annotation ingestion for the supported dataset layouts.
//!
//! Every layout needs a `phases.json` at the dataset root. It is either a
//! list of names, an object mapping `"1".."P"` to names, or
//!
//! ```json
//! { "phases": ["preparation", "..."], "fps": 25, "aliases": { "ClippingCutting": "clipping and cutting" } }
//! ```
//!
//! Raw layouts annotate every video frame; labels are reduced to 1 fps by
//! taking the annotation of frame `floor(t * fps)` for each whole second `t`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{natural_cmp, normalize_name, Dataset, Phase, PhaseVocabulary, VideoAnnotation};
use crate::error::{Error, IoContext, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnnotationFormat {
    /// `phase_annotations/<id>-phase.txt`, `Frame<TAB>PhaseName` per raw frame.
    #[serde(rename = "cholec80-style")]
    Cholec80,
    /// `labels/[label_]<id>.txt`, `Frame<TAB>PhaseId` (or name) per raw frame.
    #[serde(rename = "autolaparo-style")]
    AutoLaparo,
    /// `workflow_video_<id>.txt` under the root or `annotations/`, names per raw frame.
    #[serde(rename = "m2cai16-style")]
    M2cai16,
    /// `annotations/<id>.tsv`, `second<TAB>phase_id`, already at 1 fps.
    #[serde(rename = "canonical-tsv")]
    CanonicalTsv,
}

impl AnnotationFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            AnnotationFormat::Cholec80 => "cholec80-style",
            AnnotationFormat::AutoLaparo => "autolaparo-style",
            AnnotationFormat::M2cai16 => "m2cai16-style",
            AnnotationFormat::CanonicalTsv => "canonical-tsv",
        }
    }

    /// Candidate directories and `(prefix, suffix)` of annotation file names.
    fn layout(self) -> (&'static [&'static str], &'static str, &'static str) {
        match self {
            AnnotationFormat::Cholec80 => (&["phase_annotations", "annotations"], "", "-phase.txt"),
            AnnotationFormat::AutoLaparo => (&["labels", "annotations"], "label_", ".txt"),
            AnnotationFormat::M2cai16 => (
                &["annotations", "train_dataset", "test_dataset", "."],
                "workflow_video_",
                ".txt",
            ),
            AnnotationFormat::CanonicalTsv => (&["annotations"], "", ".tsv"),
        }
    }
}

impl FromStr for AnnotationFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cholec80-style" | "cholec80" => Ok(AnnotationFormat::Cholec80),
            "autolaparo-style" | "autolaparo" => Ok(AnnotationFormat::AutoLaparo),
            "m2cai16-style" | "m2cai16" => Ok(AnnotationFormat::M2cai16),
            "canonical-tsv" | "canonical" => Ok(AnnotationFormat::CanonicalTsv),
            other => Err(Error::Config(format!(
                "unknown annotation format `{other}` (expected cholec80-style, autolaparo-style, m2cai16-style or canonical-tsv)"
            ))),
        }
    }
}

/// Parsed `phases.json`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseMapping {
    pub vocab: PhaseVocabulary,
    pub fps: Option<f64>,
    /// Normalised alias -> phase.
    aliases: BTreeMap<String, Phase>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawMapping {
    List(Vec<String>),
    Full {
        phases: Vec<String>,
        #[serde(default)]
        fps: Option<f64>,
        #[serde(default)]
        aliases: BTreeMap<String, String>,
    },
    ById(BTreeMap<String, String>),
}

impl PhaseMapping {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let raw: RawMapping = serde_json::from_str(&text)
            .map_err(|e| Error::format(path, format!("phase mapping: {e}")))?;
        let (names, fps, raw_aliases) = match raw {
            RawMapping::List(names) => (names, None, BTreeMap::new()),
            RawMapping::Full {
                phases,
                fps,
                aliases,
            } => (phases, fps, aliases),
            RawMapping::ById(by_id) => {
                let mut pairs = Vec::with_capacity(by_id.len());
                for (k, v) in by_id {
                    let id: usize = k
                        .parse()
                        .map_err(|_| Error::format(path, format!("phase id `{k}` is not an integer")))?;
                    pairs.push((id, v));
                }
                pairs.sort_by_key(|(id, _)| *id);
                for (i, (id, _)) in pairs.iter().enumerate() {
                    if *id != i + 1 {
                        return Err(Error::format(path, "phase ids must be exactly 1..P"));
                    }
                }
                (pairs.into_iter().map(|(_, v)| v).collect(), None, BTreeMap::new())
            }
        };
        let vocab = PhaseVocabulary::new(names).map_err(|e| Error::format(path, e.to_string()))?;
        let mut aliases = BTreeMap::new();
        for (alias, target) in raw_aliases {
            let phase = vocab.lookup(&target).ok_or_else(|| {
                Error::format(path, format!("alias `{alias}` targets unknown phase `{target}`"))
            })?;
            aliases.insert(normalize_name(&alias), phase);
        }
        if let Some(f) = fps {
            if !(f.is_finite() && f > 0.0) {
                return Err(Error::format(path, format!("fps must be positive, got {f}")));
            }
        }
        Ok(Self { vocab, fps, aliases })
    }

    /// Resolves a cell that is either a 1-based id or a phase name/alias.
    pub fn resolve(&self, cell: &str) -> Option<Phase> {
        let cell = cell.trim();
        if let Ok(id) = cell.parse::<usize>() {
            return self.vocab.phase(id);
        }
        self.vocab
            .lookup(cell)
            .or_else(|| self.aliases.get(&normalize_name(cell)).copied())
    }
}

/// Reduces per-frame annotations `(frame_index, phase)` to one label per
/// second. Rows must be sorted by frame index; each second takes the latest
/// row at or before frame `floor(t * fps)`.
pub fn downsample_frames(rows: &[(u64, Phase)], fps: f64) -> std::result::Result<Vec<Phase>, String> {
    let Some(&(first, _)) = rows.first() else {
        return Err("no annotated frames".into());
    };
    if first != 0 {
        return Err(format!("annotation starts at frame {first}, expected frame 0"));
    }
    if rows.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err("frame indices must be strictly increasing".into());
    }
    let last = rows.last().unwrap().0;
    let mut out = Vec::new();
    let mut cursor = 0;
    for t in 0u64.. {
        let target = (t as f64 * fps).floor() as u64;
        if target > last {
            break;
        }
        while cursor + 1 < rows.len() && rows[cursor + 1].0 <= target {
            cursor += 1;
        }
        out.push(rows[cursor].1);
    }
    Ok(out)
}

/// [`downsample_frames`] for a dense label-per-frame sequence.
pub fn downsample_labels(labels: &[Phase], fps: f64) -> Vec<Phase> {
    let mut out = Vec::new();
    for t in 0usize.. {
        let idx = (t as f64 * fps).floor() as usize;
        match labels.get(idx) {
            Some(&p) => out.push(p),
            None => break,
        }
    }
    out
}

/// Loads every annotation file under `root` in the given layout.
pub fn load_annotations(root: &Path, format: AnnotationFormat) -> Result<Dataset> {
    let mapping_path = root.join("phases.json");
    if !mapping_path.is_file() {
        return Err(Error::data(&mapping_path, "phase-name mapping file is missing"));
    }
    let mapping = PhaseMapping::load(&mapping_path)?;
    let fps = match format {
        AnnotationFormat::CanonicalTsv => 1.0,
        _ => mapping.fps.ok_or_else(|| {
            Error::data(
                &mapping_path,
                format!("fps metadata is required for {} (add \"fps\" to phases.json)", format.as_str()),
            )
        })?,
    };

    let files = annotation_files(root, format)?;
    if files.is_empty() {
        return Err(Error::data(root, format!("no {} annotation files found", format.as_str())));
    }
    let mut videos = Vec::with_capacity(files.len());
    for (video_id, path) in files {
        let labels = match format {
            AnnotationFormat::CanonicalTsv => parse_canonical(&path, &mapping)?,
            _ => {
                let rows = parse_frame_rows(&path, &mapping)?;
                downsample_frames(&rows, fps).map_err(|m| Error::data(&path, m))?
            }
        };
        let frames_dir = root.join("videos").join(&video_id).join("frames");
        let frame_paths = frames_dir
            .is_dir()
            .then(|| (0..labels.len()).map(|t| frames_dir.join(frame_file_name(t))).collect());
        let ann = VideoAnnotation::new(video_id, fps, labels, frame_paths, mapping.vocab.len())
            .map_err(|e| Error::data(&path, e.to_string()))?;
        videos.push(ann);
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        vocab: mapping.vocab,
        videos,
    })
}

pub(crate) fn frame_file_name(second: usize) -> String {
    format!("{second:06}.png")
}

fn annotation_files(root: &Path, format: AnnotationFormat) -> Result<Vec<(String, PathBuf)>> {
    let (dirs, prefix, suffix) = format.layout();
    let mut found: BTreeMap<String, PathBuf> = BTreeMap::new();
    for dir in dirs {
        let dir = root.join(dir);
        if !dir.is_dir() {
            continue;
        }
        for entry in fs::read_dir(&dir).at(&dir)? {
            let path = entry.at(&dir)?.path();
            if !path.is_file() {
                continue;
            }
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            let Some(stem) = name.strip_suffix(suffix) else {
                continue;
            };
            let id = match format {
                AnnotationFormat::AutoLaparo => stem.strip_prefix(prefix).unwrap_or(stem),
                AnnotationFormat::M2cai16 => match stem.strip_prefix(prefix) {
                    Some(rest) => rest,
                    None => continue,
                },
                _ => stem,
            };
            if id.is_empty() || id.starts_with('.') {
                continue;
            }
            found.entry(id.to_string()).or_insert(path);
        }
    }
    let mut out: Vec<_> = found.into_iter().collect();
    out.sort_by(|a, b| natural_cmp(&a.0, &b.0));
    Ok(out)
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn split_row(line: &str) -> Vec<&str> {
    if line.contains('\t') {
        line.split('\t').map(str::trim).collect()
    } else {
        line.split_whitespace().collect()
    }
}

fn parse_frame_rows(path: &Path, mapping: &PhaseMapping) -> Result<Vec<(u64, Phase)>> {
    let text = fs::read_to_string(path).at(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in data_lines(&text) {
        let cells = split_row(line);
        if cells.len() < 2 {
            return Err(Error::data(path, format!("line {lineno}: expected `frame<TAB>phase`")));
        }
        let Ok(frame) = cells[0].parse::<u64>() else {
            if rows.is_empty() {
                continue; // header
            }
            return Err(Error::data(path, format!("line {lineno}: bad frame index `{}`", cells[0])));
        };
        let phase = mapping.resolve(cells[1]).ok_or_else(|| {
            Error::data(path, format!("line {lineno}: unknown phase `{}`", cells[1]))
        })?;
        rows.push((frame, phase));
    }
    if rows.is_empty() {
        return Err(Error::data(path, "empty video: no annotated frames"));
    }
    Ok(rows)
}

fn parse_canonical(path: &Path, mapping: &PhaseMapping) -> Result<Vec<Phase>> {
    let text = fs::read_to_string(path).at(path)?;
    let mut labels = Vec::new();
    for (lineno, line) in data_lines(&text) {
        let cells = split_row(line);
        if cells.len() < 2 {
            return Err(Error::data(path, format!("line {lineno}: expected `second<TAB>phase_id`")));
        }
        let Ok(second) = cells[0].parse::<usize>() else {
            if labels.is_empty() {
                continue; // header
            }
            return Err(Error::data(path, format!("line {lineno}: bad second `{}`", cells[0])));
        };
        if second != labels.len() {
            return Err(Error::data(
                path,
                format!("line {lineno}: expected second {}, found {second}", labels.len()),
            ));
        }
        let id: usize = cells[1].parse().map_err(|_| {
            Error::data(path, format!("line {lineno}: phase id `{}` is not an integer", cells[1]))
        })?;
        let phase = mapping.vocab.phase(id).ok_or_else(|| {
            Error::data(
                path,
                format!("line {lineno}: unknown phase id {id} (valid 1..={})", mapping.vocab.len()),
            )
        })?;
        labels.push(phase);
    }
    if labels.is_empty() {
        return Err(Error::data(path, "empty video: no annotated seconds"));
    }
    Ok(labels)
}

/// Writes the canonical layout: `phases.json` plus `annotations/<id>.tsv`.
pub fn write_canonical(out: &Path, vocab: &PhaseVocabulary, videos: &[VideoAnnotation]) -> Result<()> {
    let ann_dir = out.join("annotations");
    fs::create_dir_all(&ann_dir).at(&ann_dir)?;
    write_phase_mapping(&out.join("phases.json"), vocab)?;
    for v in videos {
        let mut text = String::from("second\tphase_id\n");
        for (t, p) in v.labels.iter().enumerate() {
            text.push_str(&format!("{t}\t{}\n", p.id()));
        }
        let path = ann_dir.join(format!("{}.tsv", v.video_id));
        fs::write(&path, text).at(&path)?;
    }
    Ok(())
}

/// `{"1": "name", ...}` in id order.
fn write_phase_mapping(path: &Path, vocab: &PhaseVocabulary) -> Result<()> {
    let mut text = String::from("{\n");
    for (i, name) in vocab.names().iter().enumerate() {
        let sep = if i + 1 == vocab.len() { "" } else { "," };
        text.push_str(&format!(
            "  \"{}\": {}{sep}\n",
            i + 1,
            serde_json::to_string(name).expect("string serialises")
        ));
    }
    text.push_str("}\n");
    fs::write(path, text).at(path)
}
