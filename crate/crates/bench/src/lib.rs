//! Input fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use surgphase_core::data::Phase;
use surgphase_core::predictions::PredictionRecord;
use surgphase_core::Tensor;

pub fn gaussian(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `videos` noisy framewise predictions of blocky ground truth.
pub fn records(videos: usize, frames: usize, phases: usize, seed: u64) -> Vec<PredictionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..videos)
        .map(|v| {
            let gt: Vec<Phase> = (0..frames).map(|t| Phase::from_index(t * phases / frames)).collect();
            let pred = gt
                .iter()
                .map(|&g| {
                    if rng.random::<f64>() < 0.8 {
                        g
                    } else {
                        Phase::from_index(rng.random_range(0..phases))
                    }
                })
                .collect();
            PredictionRecord {
                video_id: format!("video{:02}", v + 1),
                gt,
                pred,
            }
        })
        .collect()
}
