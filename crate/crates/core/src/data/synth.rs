//! Procedural surgical-phase videos for desk-scale runs.
//!
//! Each phase has a colour and a stripe pattern; a frame shows its phase's
//! look over per-pixel noise and a grey "instrument" rectangle that moves
//! independently of the phase. With probability `noise_level` a frame is
//! rendered with the look of a different phase while keeping its true label.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ingest::frame_file_name;
use super::{write_canonical, Phase, PhaseVocabulary, VideoAnnotation};
use crate::error::{Error, IoContext, Result};
use crate::imaging::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransitionRegime {
    /// Phases 1..P once each, in order.
    Sequential,
    /// Forward progress with occasional returns to the previous phase.
    Revisiting,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub phases: usize,
    pub videos: usize,
    pub mean_phase_length: f64,
    pub transition_regime: TransitionRegime,
    #[serde(default)]
    pub noise_level: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
}

fn default_image_size() -> usize {
    64
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.phases < 2 {
            return Err(Error::Config("synthetic spec needs at least 2 phases".into()));
        }
        if self.videos == 0 {
            return Err(Error::Config("synthetic spec needs at least 1 video".into()));
        }
        if self.mean_phase_length.is_nan() || self.mean_phase_length < 2.0 {
            return Err(Error::Config("mean_phase_length must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::Config("noise_level must lie in [0, 1]".into()));
        }
        if self.image_size < 8 {
            return Err(Error::Config("image_size must be at least 8".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticVideo {
    pub annotation: VideoAnnotation,
    /// The phase whose look each frame was rendered with.
    pub appearance: Vec<Phase>,
    pub frames: Vec<Image>,
}

impl SyntheticVideo {
    pub fn corrupted_frames(&self) -> usize {
        self.annotation
            .labels
            .iter()
            .zip(&self.appearance)
            .filter(|(a, b)| a != b)
            .count()
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub vocab: PhaseVocabulary,
    pub videos: Vec<SyntheticVideo>,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let vocab = PhaseVocabulary::numbered(spec.phases);
    let width = spec.videos.to_string().len().max(2);
    let mut videos = Vec::with_capacity(spec.videos);
    for v in 0..spec.videos {
        let video_id = format!("video{:0width$}", v + 1);
        let labels = phase_sequence(spec, v as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, 0x5eed_f4a3_0000 + v as u64));
        let mut appearance = Vec::with_capacity(labels.len());
        let mut frames = Vec::with_capacity(labels.len());
        for (t, &label) in labels.iter().enumerate() {
            let look = if rng.random::<f64>() < spec.noise_level {
                let other = rng.random_range(0..spec.phases - 1);
                Phase::from_index(if other >= label.index() { other + 1 } else { other })
            } else {
                label
            };
            appearance.push(look);
            frames.push(render_frame(look, spec.phases, spec.image_size, t, &mut rng));
        }
        let annotation = VideoAnnotation::new(video_id, 1.0, labels, None, spec.phases)?;
        videos.push(SyntheticVideo {
            annotation,
            appearance,
            frames,
        });
    }
    Ok(SyntheticDataset {
        spec: spec.clone(),
        vocab,
        videos,
    })
}

/// Label sequence for one video. Revisiting videos are regenerated with a
/// bumped sub-seed until at least one backwards transition occurs.
fn phase_sequence(spec: &SyntheticSpec, video: u64) -> Vec<Phase> {
    for attempt in 0u64.. {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, video * 1_000_003 + attempt));
        let order = match spec.transition_regime {
            TransitionRegime::Sequential => (0..spec.phases).map(|p| (p, 1.0f64)).collect::<Vec<_>>(),
            TransitionRegime::Revisiting => {
                let mut order = Vec::new();
                for p in 0..spec.phases {
                    order.push((p, 1.0));
                    if p >= 1 && p + 1 < spec.phases && rng.random::<f64>() < 0.35 {
                        order.push((p - 1, 0.5));
                        order.push((p, 0.5));
                    }
                }
                order
            }
        };
        let spread = Normal::new(0.0f64, 0.35).expect("valid normal");
        let mut labels = Vec::new();
        for (p, frac) in order {
            let len = (spec.mean_phase_length * frac * spread.sample(&mut rng).exp()).round();
            let len = (len as usize).max(2);
            labels.extend(std::iter::repeat_n(Phase::from_index(p), len));
        }
        let decreases = labels.windows(2).any(|w| w[1] < w[0]);
        if spec.transition_regime == TransitionRegime::Sequential || decreases {
            return labels;
        }
    }
    unreachable!("unbounded retry loop")
}

fn mix(seed: u64, salt: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn render_frame<R: Rng>(look: Phase, phases: usize, size: usize, t: usize, rng: &mut R) -> Image {
    let p = look.index();
    let base = hsv(p as f64 / phases as f64, 0.75, 0.85);
    let stripe = hsv(p as f64 / phases as f64 + 0.5, 0.5, 0.35);
    let period = 4 + 2 * (p % 4);
    let brightness = 1.0 + rng.random_range(-0.06..0.06);
    let mut img = Image::new(size, size);
    for y in 0..size {
        let on_stripe = (y / period) % 2 == 1;
        for x in 0..size {
            let col = if on_stripe { stripe } else { base };
            for (c, &channel) in col.iter().enumerate() {
                let v = channel * brightness + rng.random_range(-0.08..0.08);
                img.set(c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    // Moving instrument: a grey bar unrelated to the phase.
    let bar_w = size / 6;
    let bar_h = size / 2;
    let x0 = (t * 3 + rng.random_range(0..size / 4)) % (size - bar_w);
    let y0 = rng.random_range(0..size - bar_h);
    for y in y0..y0 + bar_h {
        for x in x0..x0 + bar_w {
            for c in 0..3 {
                img.set(c, y, x, 0.6);
            }
        }
    }
    img
}

/// Writes a synthetic dataset in the canonical layout:
/// `phases.json`, `annotations/<id>.tsv`, `videos/<id>/frames/%06d.png`,
/// plus `synthetic.json` recording the spec and per-frame appearance.
pub fn write_synthetic(ds: &SyntheticDataset, out: &Path) -> Result<()> {
    let annotations: Vec<VideoAnnotation> = ds.videos.iter().map(|v| v.annotation.clone()).collect();
    write_canonical(out, &ds.vocab, &annotations)?;
    for v in &ds.videos {
        let dir = out.join("videos").join(&v.annotation.video_id).join("frames");
        fs::create_dir_all(&dir).at(&dir)?;
        for (t, frame) in v.frames.iter().enumerate() {
            frame.save_png(&dir.join(frame_file_name(t)))?;
        }
    }
    #[derive(Serialize)]
    struct Truth<'a> {
        spec: &'a SyntheticSpec,
        appearance: std::collections::BTreeMap<&'a str, Vec<usize>>,
    }
    let truth = Truth {
        spec: &ds.spec,
        appearance: ds
            .videos
            .iter()
            .map(|v| {
                (
                    v.annotation.video_id.as_str(),
                    v.appearance.iter().map(|p| p.id()).collect(),
                )
            })
            .collect(),
    };
    let path = out.join("synthetic.json");
    let text = serde_json::to_string_pretty(&truth).expect("serialisable");
    fs::write(&path, text).at(&path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(regime: TransitionRegime, noise: f64, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            phases: 7,
            videos: 1,
            mean_phase_length: 10.0,
            transition_regime: regime,
            noise_level: noise,
            seed,
            image_size: 16,
        }
    }

    #[test]
    fn sequential_labels_are_monotone_and_cover_all_phases() {
        let ds = generate_synthetic(&spec(TransitionRegime::Sequential, 0.0, 42)).unwrap();
        let labels = &ds.videos[0].annotation.labels;
        assert!(labels.windows(2).all(|w| w[0] <= w[1]));
        let mut distinct = labels.clone();
        distinct.dedup();
        assert_eq!(distinct.len(), 7);
        assert_eq!(ds.videos[0].corrupted_frames(), 0);
    }

    #[test]
    fn revisiting_labels_go_backwards() {
        let ds = generate_synthetic(&spec(TransitionRegime::Revisiting, 0.0, 7)).unwrap();
        let labels = &ds.videos[0].annotation.labels;
        assert!(labels.windows(2).any(|w| w[1] < w[0]));
        assert_eq!(labels.first().unwrap().index(), 0);
        assert_eq!(labels.last().unwrap().index(), 6);
    }

    #[test]
    fn corruption_rate_concentrates() {
        let mut s = spec(TransitionRegime::Sequential, 0.5, 3);
        s.videos = 20;
        let ds = generate_synthetic(&s).unwrap();
        let total: usize = ds.videos.iter().map(|v| v.annotation.len()).sum();
        let bad: usize = ds.videos.iter().map(SyntheticVideo::corrupted_frames).sum();
        assert!(total >= 1000, "only {total} frames");
        let rate = bad as f64 / total as f64;
        assert!((0.45..=0.55).contains(&rate), "corruption rate {rate}");
    }

    #[test]
    fn generation_is_bit_reproducible() {
        let s = spec(TransitionRegime::Revisiting, 0.3, 11);
        let a = generate_synthetic(&s).unwrap();
        let b = generate_synthetic(&s).unwrap();
        assert_eq!(a.videos[0].annotation, b.videos[0].annotation);
        assert_eq!(a.videos[0].frames, b.videos[0].frames);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = spec(TransitionRegime::Sequential, 0.0, 1);
        s.phases = 1;
        assert!(generate_synthetic(&s).is_err());
        let mut s = spec(TransitionRegime::Sequential, 1.5, 1);
        assert!(generate_synthetic(&s).is_err());
        s.noise_level = 0.0;
        s.mean_phase_length = 1.0;
        assert!(generate_synthetic(&s).is_err());
    }
}
