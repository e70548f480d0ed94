//! On-disk cache of per-frame image features, the input of the temporal
//! model.
//!
//! Each video is one binary file:
//!
//! ```text
//! magic    8 bytes  "SPFEAT\0\0"
//! version  u32 LE
//! dtype    u32 LE   (1 = f64, 2 = f32)
//! dim      u64 LE
//! length   u64 LE
//! id_len   u32 LE, then the UTF-8 video id
//! labels   length x u16 LE, 1-based phase ids
//! data     length x dim values, row-major
//! ```
//!
//! `index.json` lists the completed videos.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::data::Phase;
use crate::error::{Error, IoContext, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SPFEAT\0\0";
pub const CACHE_VERSION: u32 = 1;
const INDEX_FILE: &str = "index.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureDtype {
    #[default]
    F64,
    F32,
}

impl FeatureDtype {
    fn code(self) -> u32 {
        match self {
            FeatureDtype::F64 => 1,
            FeatureDtype::F32 => 2,
        }
    }

    fn from_code(c: u32) -> Option<Self> {
        match c {
            1 => Some(FeatureDtype::F64),
            2 => Some(FeatureDtype::F32),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureEntry {
    pub video_id: String,
    /// `[T, d]`.
    pub features: Tensor,
    pub labels: Vec<Phase>,
}

impl FeatureEntry {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub file: String,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheIndex {
    pub version: u32,
    pub dim: usize,
    pub dtype: FeatureDtype,
    pub videos: BTreeMap<String, IndexEntry>,
}

/// A directory of per-video feature files.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    dir: PathBuf,
    index: CacheIndex,
}

impl FeatureCache {
    /// Opens `dir`, creating an empty cache when there is no index yet.
    pub fn create(dir: &Path, dim: usize, dtype: FeatureDtype) -> Result<Self> {
        std::fs::create_dir_all(dir).at(dir)?;
        if dir.join(INDEX_FILE).is_file() {
            let cache = Self::open(dir)?;
            if cache.index.dim != dim || cache.index.dtype != dtype {
                return Err(Error::data(
                    dir,
                    format!(
                        "existing cache holds {}-d {:?} features, requested {dim}-d {dtype:?}",
                        cache.index.dim, cache.index.dtype
                    ),
                ));
            }
            return Ok(cache);
        }
        let cache = Self {
            dir: dir.to_path_buf(),
            index: CacheIndex {
                version: CACHE_VERSION,
                dim,
                dtype,
                videos: BTreeMap::new(),
            },
        };
        cache.write_index()?;
        Ok(cache)
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_FILE);
        if !path.is_file() {
            return Err(Error::data(dir, "not a feature cache (index.json missing)"));
        }
        let text = std::fs::read_to_string(&path).at(&path)?;
        let index: CacheIndex = serde_json::from_str(&text)
            .map_err(|e| Error::format(&path, format!("bad cache index: {e}")))?;
        if index.version != CACHE_VERSION {
            return Err(Error::format(
                &path,
                format!("cache version {} is not supported (expected {CACHE_VERSION})", index.version),
            ));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            index,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn dim(&self) -> usize {
        self.index.dim
    }

    pub fn index(&self) -> &CacheIndex {
        &self.index
    }

    pub fn contains(&self, video_id: &str) -> bool {
        self.index.videos.contains_key(video_id)
    }

    pub fn video_ids(&self) -> impl Iterator<Item = &String> {
        self.index.videos.keys()
    }

    fn file_name(video_id: &str) -> String {
        let safe: String = video_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        format!("{safe}.feat")
    }

    /// Writes one video and records it in the index.
    pub fn insert(&mut self, entry: &FeatureEntry) -> Result<()> {
        if entry.features.ndim() != 2 || entry.features.shape()[1] != self.index.dim {
            return Err(Error::Invalid(format!(
                "features of {} have shape {:?}, cache dimension is {}",
                entry.video_id,
                entry.features.shape(),
                self.index.dim
            )));
        }
        if entry.features.shape()[0] != entry.labels.len() {
            return Err(Error::Invalid(format!(
                "{} has {} feature rows but {} labels",
                entry.video_id,
                entry.features.shape()[0],
                entry.labels.len()
            )));
        }
        let file = Self::file_name(&entry.video_id);
        let path = self.dir.join(&file);
        let tmp = path.with_extension("partial");
        write_entry(&tmp, entry, self.index.dtype)?;
        std::fs::rename(&tmp, &path).at(&path)?;
        self.index.videos.insert(
            entry.video_id.clone(),
            IndexEntry {
                file,
                length: entry.len(),
            },
        );
        self.write_index()
    }

    pub fn load(&self, video_id: &str) -> Result<FeatureEntry> {
        let Some(ie) = self.index.videos.get(video_id) else {
            return Err(Error::data(
                &self.dir,
                format!("feature cache has no entry for video `{video_id}`"),
            ));
        };
        let path = self.dir.join(&ie.file);
        let entry = read_entry(&path)?;
        if entry.video_id != video_id || entry.len() != ie.length || entry.dim() != self.index.dim {
            return Err(Error::format(&path, "feature file does not match the cache index"));
        }
        Ok(entry)
    }

    pub fn load_many(&self, ids: &[String]) -> Result<Vec<FeatureEntry>> {
        ids.iter().map(|id| self.load(id)).collect()
    }

    fn write_index(&self) -> Result<()> {
        let path = self.dir.join(INDEX_FILE);
        let tmp = self.dir.join("index.json.partial");
        let text = serde_json::to_string_pretty(&self.index).expect("index serialises");
        std::fs::write(&tmp, text).at(&tmp)?;
        std::fs::rename(&tmp, &path).at(&path)
    }
}

fn write_entry(path: &Path, entry: &FeatureEntry, dtype: FeatureDtype) -> Result<()> {
    let f = File::create(path).at(path)?;
    let mut w = BufWriter::new(f);
    let res: std::io::Result<()> = (|| {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(CACHE_VERSION)?;
        w.write_u32::<LittleEndian>(dtype.code())?;
        w.write_u64::<LittleEndian>(entry.dim() as u64)?;
        w.write_u64::<LittleEndian>(entry.len() as u64)?;
        let id = entry.video_id.as_bytes();
        w.write_u32::<LittleEndian>(id.len() as u32)?;
        w.write_all(id)?;
        for l in &entry.labels {
            w.write_u16::<LittleEndian>(l.id() as u16)?;
        }
        for &v in entry.features.data() {
            match dtype {
                FeatureDtype::F64 => w.write_f64::<LittleEndian>(v)?,
                FeatureDtype::F32 => w.write_f32::<LittleEndian>(v as f32)?,
            }
        }
        w.flush()
    })();
    res.at(path)
}

/// Reads one feature file, validating its header.
pub fn read_entry(path: &Path) -> Result<FeatureEntry> {
    let f = File::open(path).at(path)?;
    let mut r = BufReader::new(f);
    let corrupt = |m: &str| Error::format(path, format!("corrupt feature file: {m}"));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| corrupt("truncated header"))?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic bytes"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|_| corrupt("truncated header"))?;
    if version != CACHE_VERSION {
        return Err(Error::format(
            path,
            format!("feature file version {version} is not supported (expected {CACHE_VERSION})"),
        ));
    }
    let dtype = r
        .read_u32::<LittleEndian>()
        .ok()
        .and_then(FeatureDtype::from_code)
        .ok_or_else(|| corrupt("unknown dtype"))?;
    let dim = r.read_u64::<LittleEndian>().map_err(|_| corrupt("truncated header"))? as usize;
    let len = r.read_u64::<LittleEndian>().map_err(|_| corrupt("truncated header"))? as usize;
    let id_len = r.read_u32::<LittleEndian>().map_err(|_| corrupt("truncated header"))? as usize;
    if dim == 0 || id_len > 4096 || dim > 1 << 20 || len > 1 << 32 {
        return Err(corrupt("implausible header values"));
    }
    let mut id = vec![0u8; id_len];
    r.read_exact(&mut id).map_err(|_| corrupt("truncated video id"))?;
    let video_id = String::from_utf8(id).map_err(|_| corrupt("video id is not UTF-8"))?;
    let mut labels = Vec::with_capacity(len);
    for _ in 0..len {
        let id = r.read_u16::<LittleEndian>().map_err(|_| corrupt("truncated labels"))?;
        if id == 0 {
            return Err(corrupt("phase id 0"));
        }
        labels.push(Phase::from_index(id as usize - 1));
    }
    let mut data = vec![0.0; len * dim];
    match dtype {
        FeatureDtype::F64 => r.read_f64_into::<LittleEndian>(&mut data),
        FeatureDtype::F32 => {
            let mut tmp = vec![0.0f32; len * dim];
            let res = r.read_f32_into::<LittleEndian>(&mut tmp);
            for (d, s) in data.iter_mut().zip(&tmp) {
                *d = *s as f64;
            }
            res
        }
    }
    .map_err(|_| corrupt("truncated feature data"))?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest).at(path)? != 0 {
        return Err(corrupt("trailing bytes"));
    }
    Ok(FeatureEntry {
        video_id,
        features: Tensor::from_vec([len, dim], data),
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, t: usize, d: usize) -> FeatureEntry {
        FeatureEntry {
            video_id: id.into(),
            features: Tensor::from_vec([t, d], (0..t * d).map(|i| i as f64 * 0.1 - 1.0).collect()),
            labels: (0..t).map(|i| Phase::from_index(i % 3)).collect(),
        }
    }

    #[test]
    fn round_trip_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = FeatureCache::create(dir.path(), 4, FeatureDtype::F64).unwrap();
        c.insert(&entry("video1", 5, 4)).unwrap();
        c.insert(&entry("video 2", 3, 4)).unwrap();
        let c2 = FeatureCache::open(dir.path()).unwrap();
        assert_eq!(c2.load("video1").unwrap(), entry("video1", 5, 4));
        assert_eq!(c2.load("video 2").unwrap(), entry("video 2", 3, 4));
        assert!(matches!(c2.load("video3"), Err(Error::Data { .. })));
        assert!(FeatureCache::create(dir.path(), 8, FeatureDtype::F64).is_err());
    }

    #[test]
    fn f32_storage_rounds_to_single_precision() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = FeatureCache::create(dir.path(), 2, FeatureDtype::F32).unwrap();
        let e = entry("v", 4, 2);
        c.insert(&e).unwrap();
        let back = c.load("v").unwrap();
        assert!(back.features.max_abs_diff(&e.features) < 1e-6);
        assert_eq!(back.labels, e.labels);
    }

    #[test]
    fn corrupt_headers_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = FeatureCache::create(dir.path(), 2, FeatureDtype::F64).unwrap();
        c.insert(&entry("v", 4, 2)).unwrap();
        let path = dir.path().join("v.feat");
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(c.load("v").unwrap_err().to_string().contains("magic"));

        let mut bad = good.clone();
        bad[8] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(c.load("v").unwrap_err().to_string().contains("version 9"));

        std::fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(c.load("v").unwrap_err().to_string().contains("truncated"));
    }
}
