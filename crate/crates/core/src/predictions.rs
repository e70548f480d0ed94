//! Per-video prediction files: a TSV with `second`, `gt_phase` and
//! `pred_phase` columns (1-based phase ids) and an optional binary sidecar
//! holding the raw per-frame logits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::data::Phase;
use crate::data::natural_cmp;
use crate::error::{Error, IoContext, Result};
use crate::tensor::Tensor;

const TSV_HEADER: &str = "second\tgt_phase\tpred_phase";
const LOGITS_MAGIC: &[u8; 8] = b"SPLOGIT\0";

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    pub video_id: String,
    pub gt: Vec<Phase>,
    pub pred: Vec<Phase>,
}

pub fn tsv_path(dir: &Path, video_id: &str) -> PathBuf {
    dir.join(format!("{video_id}.tsv"))
}

pub fn logits_path(dir: &Path, video_id: &str) -> PathBuf {
    dir.join(format!("{video_id}.logits"))
}

pub fn write_prediction_tsv(dir: &Path, rec: &PredictionRecord) -> Result<PathBuf> {
    if rec.gt.len() != rec.pred.len() {
        return Err(Error::Invalid(format!(
            "{}: {} ground-truth labels for {} predictions",
            rec.video_id,
            rec.gt.len(),
            rec.pred.len()
        )));
    }
    std::fs::create_dir_all(dir).at(dir)?;
    let path = tsv_path(dir, &rec.video_id);
    let mut s = String::with_capacity(16 * rec.gt.len() + 32);
    s.push_str(TSV_HEADER);
    s.push('\n');
    for (t, (g, p)) in rec.gt.iter().zip(&rec.pred).enumerate() {
        s.push_str(&format!("{t}\t{}\t{}\n", g.id(), p.id()));
    }
    std::fs::write(&path, s).at(&path)?;
    Ok(path)
}

/// Reads a prediction TSV. The video id is the file stem. Phase ids are
/// checked against `phases`.
pub fn read_prediction_tsv(path: &Path, phases: usize) -> Result<PredictionRecord> {
    if !path.is_file() {
        return Err(Error::data(path, "prediction file not found"));
    }
    let text = std::fs::read_to_string(path).at(path)?;
    let video_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::data(path, "cannot derive a video id from the file name"))?
        .to_string();
    let mut gt = Vec::new();
    let mut pred = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() || (n == 0 && line.starts_with("second")) {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::data(path, format!("line {}: expected 3 tab-separated columns", n + 1)));
        }
        let second: usize = cols[0]
            .trim()
            .parse()
            .map_err(|_| Error::data(path, format!("line {}: bad second `{}`", n + 1, cols[0])))?;
        if second != gt.len() {
            return Err(Error::data(
                path,
                format!("line {}: expected second {}, found {second}", n + 1, gt.len()),
            ));
        }
        let phase = |c: &str| -> Result<Phase> {
            c.trim()
                .parse::<usize>()
                .ok()
                .and_then(|id| Phase::from_id(id, phases))
                .ok_or_else(|| Error::data(path, format!("line {}: phase `{c}` outside 1..={phases}", n + 1)))
        };
        gt.push(phase(cols[1])?);
        pred.push(phase(cols[2])?);
    }
    if gt.is_empty() {
        return Err(Error::data(path, "prediction file has no frames"));
    }
    Ok(PredictionRecord { video_id, gt, pred })
}

/// Every `*.tsv` in `dir`, in natural video-id order.
pub fn read_prediction_dir(dir: &Path, phases: usize) -> Result<Vec<PredictionRecord>> {
    if !dir.is_dir() {
        return Err(Error::data(dir, "prediction directory not found"));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .at(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "tsv"))
        .collect();
    paths.sort_by(|a, b| natural_cmp(&a.to_string_lossy(), &b.to_string_lossy()));
    if paths.is_empty() {
        return Err(Error::data(dir, "no prediction TSV files"));
    }
    paths.iter().map(|p| read_prediction_tsv(p, phases)).collect()
}

/// `[T, P]` logits as `magic, u64 T, u64 P, T*P f64` little-endian.
pub fn write_logits(path: &Path, logits: &Tensor) -> Result<()> {
    assert_eq!(logits.ndim(), 2);
    let f = File::create(path).at(path)?;
    let mut w = BufWriter::new(f);
    let res: std::io::Result<()> = (|| {
        w.write_all(LOGITS_MAGIC)?;
        w.write_u64::<LittleEndian>(logits.shape()[0] as u64)?;
        w.write_u64::<LittleEndian>(logits.shape()[1] as u64)?;
        for &v in logits.data() {
            w.write_f64::<LittleEndian>(v)?;
        }
        w.flush()
    })();
    res.at(path)
}

pub fn read_logits(path: &Path) -> Result<Tensor> {
    let f = File::open(path).at(path)?;
    let mut r = BufReader::new(f);
    let corrupt = || Error::format(path, "corrupt logits file");
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| corrupt())?;
    if &magic != LOGITS_MAGIC {
        return Err(corrupt());
    }
    let t = r.read_u64::<LittleEndian>().map_err(|_| corrupt())? as usize;
    let p = r.read_u64::<LittleEndian>().map_err(|_| corrupt())? as usize;
    if t > 1 << 32 || p > 1 << 16 {
        return Err(corrupt());
    }
    let mut data = vec![0.0; t * p];
    r.read_f64_into::<LittleEndian>(&mut data).map_err(|_| corrupt())?;
    Ok(Tensor::from_vec([t, p], data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ph(ids: &[usize]) -> Vec<Phase> {
        ids.iter().map(|&i| Phase::from_index(i - 1)).collect()
    }

    #[test]
    fn tsv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rec = PredictionRecord {
            video_id: "video3".into(),
            gt: ph(&[1, 1, 2]),
            pred: ph(&[1, 2, 2]),
        };
        let path = write_prediction_tsv(dir.path(), &rec).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "second\tgt_phase\tpred_phase\n0\t1\t1\n1\t1\t2\n2\t2\t2\n");
        assert_eq!(read_prediction_tsv(&path, 2).unwrap(), rec);
        assert!(read_prediction_tsv(&path, 1).is_err());
        assert_eq!(read_prediction_dir(dir.path(), 2).unwrap(), vec![rec]);
    }

    #[test]
    fn logits_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.logits");
        let t = Tensor::from_vec([2, 3], vec![0.5, -1.0, 2.0, 1e-300, 3.0, -0.0]);
        write_logits(&path, &t).unwrap();
        assert_eq!(read_logits(&path).unwrap(), t);
        std::fs::write(&path, b"nope").unwrap();
        assert!(read_logits(&path).is_err());
    }
}
