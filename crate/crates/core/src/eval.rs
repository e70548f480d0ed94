//! Phase-wise video-wise evaluation: accuracy, precision, recall, Jaccard
//! and F1, plus ribbon timelines of predicted phases.
//!
//! Precision, recall and Jaccard are computed per (video, phase) cell,
//! averaged per phase over the videos where the cell is defined, and then
//! summarised as mean and standard deviation over phases. A cell metric is
//! undefined when its denominator is zero and is left out of the averages.
//! No boundary relaxation is applied.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Phase, PhaseVocabulary};
use crate::error::{Error, IoContext, Result};
use crate::predictions::PredictionRecord;

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// `None` for an empty sample.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub per_video: Vec<f64>,
    /// Mean and spread over videos.
    pub video: MeanStd,
    /// All frames pooled.
    pub overall: f64,
}

fn check_record(rec: &PredictionRecord) -> Result<()> {
    if rec.gt.len() != rec.pred.len() {
        return Err(Error::Evaluation(format!(
            "{}: {} ground-truth frames but {} predictions",
            rec.video_id,
            rec.gt.len(),
            rec.pred.len()
        )));
    }
    if rec.gt.is_empty() {
        return Err(Error::Evaluation(format!("{}: no frames", rec.video_id)));
    }
    Ok(())
}

fn check_records(records: &[PredictionRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Evaluation("no videos to evaluate".into()));
    }
    records.iter().try_for_each(check_record)
}

pub fn accuracy(records: &[PredictionRecord]) -> Result<AccuracySummary> {
    check_records(records)?;
    let mut per_video = Vec::with_capacity(records.len());
    let (mut hit, mut total) = (0usize, 0usize);
    for r in records {
        let h = r.gt.iter().zip(&r.pred).filter(|(a, b)| a == b).count();
        per_video.push(h as f64 / r.gt.len() as f64);
        hit += h;
        total += r.gt.len();
    }
    Ok(AccuracySummary {
        video: MeanStd::of(&per_video).expect("non-empty"),
        per_video,
        overall: hit as f64 / total as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub video_id: String,
    /// 1-based phase id.
    pub phase: usize,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub jaccard: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRow {
    pub phase: usize,
    pub name: String,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub jaccard: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseMetrics {
    pub cells: Vec<Cell>,
    pub per_phase: Vec<PhaseRow>,
    pub precision: Option<MeanStd>,
    pub recall: Option<MeanStd>,
    pub jaccard: Option<MeanStd>,
}

fn check_phases(rec: &PredictionRecord, phases: usize) -> Result<()> {
    for p in rec.gt.iter().chain(&rec.pred) {
        if p.index() >= phases {
            return Err(Error::Evaluation(format!(
                "{}: phase {p} outside the vocabulary of {phases}",
                rec.video_id
            )));
        }
    }
    Ok(())
}

pub fn phase_video_metrics(records: &[PredictionRecord], vocab: &PhaseVocabulary) -> Result<PhaseMetrics> {
    check_records(records)?;
    let phases = vocab.len();
    let mut cells = Vec::new();
    let mut sums = vec![[(0.0, 0usize); 3]; phases];
    for r in records {
        check_phases(r, phases)?;
        let mut counts = vec![(0u64, 0u64, 0u64); phases];
        for (g, p) in r.gt.iter().zip(&r.pred) {
            if g == p {
                counts[g.index()].0 += 1;
            } else {
                counts[p.index()].1 += 1;
                counts[g.index()].2 += 1;
            }
        }
        for (k, &(tp, fp, fn_)) in counts.iter().enumerate() {
            if tp + fp + fn_ == 0 {
                continue;
            }
            let cell = Cell {
                video_id: r.video_id.clone(),
                phase: k + 1,
                tp,
                fp,
                fn_,
                precision: ratio(tp, tp + fp),
                recall: ratio(tp, tp + fn_),
                jaccard: ratio(tp, tp + fp + fn_),
            };
            for (slot, v) in sums[k].iter_mut().zip([cell.precision, cell.recall, cell.jaccard]) {
                if let Some(v) = v {
                    slot.0 += v;
                    slot.1 += 1;
                }
            }
            cells.push(cell);
        }
    }
    let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
    let per_phase: Vec<PhaseRow> = sums
        .iter()
        .enumerate()
        .map(|(k, s)| PhaseRow {
            phase: k + 1,
            name: vocab.name(Phase::from_index(k)).to_string(),
            precision: mean(s[0]),
            recall: mean(s[1]),
            jaccard: mean(s[2]),
        })
        .collect();
    let summary = |f: fn(&PhaseRow) -> Option<f64>| {
        let v: Vec<f64> = per_phase.iter().filter_map(f).collect();
        MeanStd::of(&v)
    };
    Ok(PhaseMetrics {
        precision: summary(|r| r.precision),
        recall: summary(|r| r.recall),
        jaccard: summary(|r| r.jaccard),
        cells,
        per_phase,
    })
}

/// Harmonic mean of mean precision and mean recall.
pub fn f1_from_means(precision: f64, recall: f64) -> Result<f64> {
    for (name, v) in [("precision", precision), ("recall", recall)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Evaluation(format!("mean {name} {v} is outside [0, 1]")));
        }
    }
    if precision + recall == 0.0 {
        log::warn!("mean precision and recall are both zero; F1 reported as 0");
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

pub fn count_transitions(labels: &[Phase]) -> usize {
    labels.windows(2).filter(|w| w[0] != w[1]).count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoSummary {
    pub video_id: String,
    pub frames: usize,
    pub accuracy: f64,
    pub gt_transitions: usize,
    pub pred_transitions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub phases: Vec<String>,
    pub accuracy: AccuracySummary,
    pub precision: Option<MeanStd>,
    pub recall: Option<MeanStd>,
    pub jaccard: Option<MeanStd>,
    pub f1: Option<f64>,
    pub per_phase: Vec<PhaseRow>,
    pub videos: Vec<VideoSummary>,
    pub cells: Vec<Cell>,
}

pub fn evaluate(records: &[PredictionRecord], vocab: &PhaseVocabulary) -> Result<EvalReport> {
    let acc = accuracy(records)?;
    let pm = phase_video_metrics(records, vocab)?;
    let f1 = match (pm.precision, pm.recall) {
        (Some(p), Some(r)) => Some(f1_from_means(p.mean, r.mean)?),
        _ => None,
    };
    let videos = records
        .iter()
        .zip(&acc.per_video)
        .map(|(r, &a)| VideoSummary {
            video_id: r.video_id.clone(),
            frames: r.gt.len(),
            accuracy: a,
            gt_transitions: count_transitions(&r.gt),
            pred_transitions: count_transitions(&r.pred),
        })
        .collect();
    Ok(EvalReport {
        phases: vocab.names().to_vec(),
        accuracy: acc,
        precision: pm.precision,
        recall: pm.recall,
        jaccard: pm.jaccard,
        f1,
        per_phase: pm.per_phase,
        videos,
        cells: pm.cells,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{:.2}", 100.0 * v))
}

fn pct_pm(v: Option<MeanStd>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{:.2} ± {:.2}", 100.0 * v.mean, 100.0 * v.std))
}

impl EvalReport {
    /// Summary table in percent with two decimals.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        s.push_str("# Evaluation report\n\n");
        let _ = writeln!(
            s,
            "{} videos, {} frames. Accuracy ± is over videos; the other ± are over phases.\n",
            self.videos.len(),
            self.videos.iter().map(|v| v.frames).sum::<usize>()
        );
        s.push_str("| Accuracy | Precision | Recall | Jaccard | F1 |\n|---|---|---|---|---|\n");
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} |\n",
            pct_pm(Some(self.accuracy.video)),
            pct_pm(self.precision),
            pct_pm(self.recall),
            pct_pm(self.jaccard),
            pct(self.f1)
        );
        s.push_str("## Per phase\n\n| Phase | Name | Precision | Recall | Jaccard |\n|---|---|---|---|---|\n");
        for r in &self.per_phase {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} |",
                r.phase,
                r.name,
                pct(r.precision),
                pct(r.recall),
                pct(r.jaccard)
            );
        }
        s.push_str("\n## Per video\n\n| Video | Frames | Accuracy | GT transitions | Predicted transitions |\n|---|---|---|---|---|\n");
        for v in &self.videos {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} |",
                v.video_id,
                v.frames,
                pct(Some(v.accuracy)),
                v.gt_transitions,
                v.pred_transitions
            );
        }
        s
    }

    /// Writes `report.json` and `report.md` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).at(dir)?;
        let json = dir.join("report.json");
        let md = dir.join("report.md");
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::Evaluation(e.to_string()))?;
        text.push('\n');
        std::fs::write(&json, text).at(&json)?;
        std::fs::write(&md, self.to_markdown()).at(&md)?;
        Ok((json, md))
    }
}

/// One horizontal band of a ribbon plot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RibbonRow {
    pub name: String,
    /// 1-based phase id per second.
    pub phases: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ribbon {
    pub video_id: String,
    pub phase_names: Vec<String>,
    pub colors: Vec<[u8; 3]>,
    pub rows: Vec<RibbonRow>,
}

const PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

/// Colour of the phase with 0-based index `k`.
pub fn phase_color(k: usize) -> [u8; 3] {
    if k < PALETTE.len() {
        return PALETTE[k];
    }
    let h = (k as f64 * 0.618_033_988_75).fract() * 6.0;
    let x = (1.0 - ((h % 2.0) - 1.0).abs()) * 200.0;
    let (r, g, b) = match h as usize {
        0 => (200.0, x, 0.0),
        1 => (x, 200.0, 0.0),
        2 => (0.0, 200.0, x),
        3 => (0.0, x, 200.0),
        4 => (x, 0.0, 200.0),
        _ => (200.0, 0.0, x),
    };
    [r as u8 + 30, g as u8 + 30, b as u8 + 30]
}

pub const ROW_HEIGHT: u32 = 24;
const ROW_GAP: u32 = 6;
const LEGEND_HEIGHT: u32 = 16;
const MIN_WIDTH: usize = 600;

/// Builds the ribbon for one video: ground truth, an optional baseline,
/// then each named method.
pub fn ribbon(
    video_id: &str,
    gt: &[Phase],
    baseline: Option<(&str, &[Phase])>,
    methods: &[(&str, &[Phase])],
    vocab: &PhaseVocabulary,
) -> Result<Ribbon> {
    let mut all = vec![("ground truth", gt)];
    all.extend(baseline);
    all.extend(methods.iter().copied());
    let mut rows = Vec::with_capacity(all.len());
    for (name, labels) in all {
        if labels.len() != gt.len() || labels.is_empty() {
            return Err(Error::Evaluation(format!(
                "{video_id}: ribbon row `{name}` has {} frames, ground truth has {}",
                labels.len(),
                gt.len()
            )));
        }
        if let Some(p) = labels.iter().find(|p| p.index() >= vocab.len()) {
            return Err(Error::Evaluation(format!("{video_id}: phase {p} outside the vocabulary")));
        }
        rows.push(RibbonRow {
            name: name.to_string(),
            phases: labels.iter().map(|p| p.id()).collect(),
        });
    }
    Ok(Ribbon {
        video_id: video_id.to_string(),
        phase_names: vocab.names().to_vec(),
        colors: (0..vocab.len()).map(phase_color).collect(),
        rows,
    })
}

impl Ribbon {
    /// Pixels per second: an integer so every frame maps to whole columns.
    pub fn scale(&self) -> usize {
        let t = self.rows[0].phases.len();
        MIN_WIDTH.div_ceil(t).max(1)
    }

    pub fn band_top(row: usize) -> u32 {
        row as u32 * (ROW_HEIGHT + ROW_GAP)
    }

    pub fn render(&self) -> image::RgbImage {
        let scale = self.scale();
        let t = self.rows[0].phases.len();
        let width = (t * scale) as u32;
        let bands = self.rows.len() as u32 * (ROW_HEIGHT + ROW_GAP);
        let height = bands + LEGEND_HEIGHT;
        let mut img = image::RgbImage::from_pixel(width, height, image::Rgb([255, 255, 255]));
        for (r, row) in self.rows.iter().enumerate() {
            let top = Self::band_top(r);
            for (s, &p) in row.phases.iter().enumerate() {
                let c = image::Rgb(self.colors[p - 1]);
                for x in (s * scale) as u32..((s + 1) * scale) as u32 {
                    for y in top..top + ROW_HEIGHT {
                        img.put_pixel(x, y, c);
                    }
                }
            }
        }
        let p = self.colors.len() as u32;
        for x in 0..width {
            let k = (x as u64 * p as u64 / width as u64) as usize;
            for y in bands..height {
                img.put_pixel(x, y, image::Rgb(self.colors[k]));
            }
        }
        img
    }

    /// Writes `<video>.png` and `<video>.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).at(dir)?;
        let png = dir.join(format!("{}.png", self.video_id));
        let json = dir.join(format!("{}.json", self.video_id));
        self.render()
            .save_with_format(&png, image::ImageFormat::Png)
            .map_err(|e| Error::Evaluation(format!("{}: {e}", png.display())))?;
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Evaluation(e.to_string()))?;
        std::fs::write(&json, text + "\n").at(&json)?;
        Ok((png, json))
    }
}
