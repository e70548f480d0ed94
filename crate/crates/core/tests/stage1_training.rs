use std::path::Path;

use surgphase_core::data::{
    generate_synthetic, load_annotations, make_split, write_synthetic, AnnotationFormat, Dataset, DatasetSplit,
    SplitOrdering, SyntheticSpec, TransitionRegime,
};
use surgphase_core::encoder::{BackboneSpec, LogitHead, ToyConfig};
use surgphase_core::features::{FeatureCache, FeatureDtype};
use surgphase_core::prompt::PromptBankConfig;
use surgphase_core::stage1::{
    encode_video, extract_features, frame_accuracy, train_stage1, FrameLoader, Stage1Checkpoint, Stage1Config,
    Stage1Model,
};

fn dataset(dir: &Path, videos: usize, seed: u64) -> Dataset {
    let spec = SyntheticSpec {
        phases: 7,
        videos,
        mean_phase_length: 10.0,
        transition_regime: TransitionRegime::Sequential,
        noise_level: 0.0,
        seed,
        image_size: 32,
    };
    write_synthetic(&generate_synthetic(&spec).unwrap(), dir).unwrap();
    load_annotations(dir, AnnotationFormat::CanonicalTsv).unwrap()
}

fn backbone() -> BackboneSpec {
    BackboneSpec {
        toy: ToyConfig {
            seed: 5,
            ..ToyConfig::default()
        },
        ..BackboneSpec::default()
    }
}

fn model(ordinal: bool) -> Stage1Model {
    let prompt = if ordinal {
        PromptBankConfig::ordinal(7, 4, 32, 3).unwrap()
    } else {
        PromptBankConfig::independent(7, 4, 32)
    };
    Stage1Model::init(&backbone(), prompt, LogitHead::default(), 5).unwrap()
}

fn config(epochs: usize) -> Stage1Config {
    Stage1Config {
        epochs,
        learning_rate: 5e-4,
        batch_size: 32,
        seed: 5,
        ..Stage1Config::default()
    }
}

fn split(ds: &Dataset, counts: (usize, usize, usize)) -> DatasetSplit {
    make_split(&ds.videos, counts, SplitOrdering::NaturalId).unwrap()
}

#[test]
fn toy_stack_learns_noise_free_phases() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 14, 11);
    let sp = split(&ds, (10, 4, 0));
    let ck = train_stage1(&ds, &sp, model(true), &backbone(), &config(5)).unwrap();
    assert!(ck.val_accuracy >= 0.95, "validation accuracy {}", ck.val_accuracy);
    assert_eq!(ck.val_history.len(), 5);
    let best = ck.val_history.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(ck.val_accuracy, best);
}

#[test]
fn seeded_training_is_reproducible_and_reloads_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 6, 3);
    let sp = split(&ds, (4, 2, 0));
    let a = train_stage1(&ds, &sp, model(false), &backbone(), &config(2)).unwrap();
    let b = train_stage1(&ds, &sp, model(false), &backbone(), &config(2)).unwrap();
    assert_eq!(a.image_params, b.image_params);
    assert_eq!(a.prompt, b.prompt);
    assert_eq!(a.loss_history, b.loss_history);

    let path = dir.path().join("stage1.safetensors");
    a.save(&path).unwrap();
    let back = Stage1Checkpoint::load(&path).unwrap();
    assert_eq!(back.image_params, a.image_params);
    assert_eq!(back.epoch, a.epoch);
    let m = back.model().unwrap();
    let val = ds.videos_for(&sp.val).unwrap();
    let acc = frame_accuracy(&m, &val, &mut FrameLoader::new(false), 5).unwrap();
    assert_eq!(acc, a.val_accuracy);
}

#[test]
fn extraction_is_batch_independent_and_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(&dir.path().join("data"), 3, 8);
    let m = model(true);
    let videos: Vec<_> = ds.videos.iter().collect();
    let cache_dir = dir.path().join("features");
    let cache = extract_features(&m, &videos, &cache_dir, 7, FeatureDtype::F64).unwrap();
    for v in &videos {
        let single = encode_video(&m, v, &mut FrameLoader::new(false), 1).unwrap();
        let entry = cache.load(&v.video_id).unwrap();
        assert_eq!(entry.features, single);
        assert_eq!(entry.labels, v.labels);
    }
    let index = std::fs::read(cache_dir.join("index.json")).unwrap();
    let again = extract_features(&m, &videos, &cache_dir, 3, FeatureDtype::F64).unwrap();
    assert_eq!(std::fs::read(cache_dir.join("index.json")).unwrap(), index);
    assert_eq!(again.video_ids().count(), 3);
    assert_eq!(FeatureCache::open(&cache_dir).unwrap().dim(), 64);
}
