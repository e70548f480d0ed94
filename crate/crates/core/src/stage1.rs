//! Stage 1: fine-tune the image encoder, the prompt bank and the logit scale
//! against frame labels with a class-weighted cross-entropy, then export
//! per-frame features for the temporal model.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::archive::{read_archive, write_archive};
use crate::autograd::{Graph, Var};
use crate::data::{Dataset, DatasetSplit, Phase, VideoAnnotation};
use crate::encoder::{
    attach_backbone, compute_logits, BackboneSpec, EncoderMode, EncoderPair, LogitHead, IMAGE_PREFIX,
    LOGIT_SCALE_PARAM,
};
use crate::error::{Error, Result};
use crate::features::{FeatureCache, FeatureDtype, FeatureEntry};
use crate::imaging::{eval_transform, load_rgb8, to_batch, AugmentConfig, Image};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::params::{digest_bytes, ParamStore};
use crate::prompt::{PromptBank, PromptBankConfig, PromptVariant, PARAM_PREFIX};
use crate::seed::{derive_seed, hash_str};
use crate::tensor::Tensor;

/// Learning-rate range searched on validation data.
pub const LR_RANGE: (f64, f64) = (5e-6, 5e-4);

/// `count` log-spaced rates spanning [`LR_RANGE`].
pub fn log_spaced_grid(count: usize) -> Vec<f64> {
    let (lo, hi) = LR_RANGE;
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..count)
            .map(|i| {
                if i == count - 1 {
                    hi
                } else {
                    lo * (hi / lo).powf(i as f64 / (count - 1) as f64)
                }
            })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub epochs: usize,
    pub learning_rate: f64,
    pub lr_grid: Vec<f64>,
    /// Epochs per candidate during the learning-rate search.
    pub lr_search_epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Training augmentation; derived from the encoder input size when absent.
    pub augment: Option<AugmentConfig>,
    /// Keep decoded frames in memory between epochs.
    pub cache_frames: bool,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 5e-5,
            lr_grid: log_spaced_grid(5),
            lr_search_epochs: 5,
            batch_size: 64,
            eval_batch_size: 64,
            optimizer: AdamWConfig::default(),
            augment: None,
            cache_frames: true,
            seed: 0,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("stage1.epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("stage1.learning_rate must be positive".into()));
        }
        validate_grid(&self.lr_grid)?;
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }

    fn augment_for(&self, input_size: usize) -> Result<AugmentConfig> {
        let a = self.augment.clone().unwrap_or_else(|| AugmentConfig::for_crop(input_size));
        if a.crop != input_size {
            return Err(Error::Config(format!(
                "augmentation crop {} differs from the encoder input size {input_size}",
                a.crop
            )));
        }
        a.validate()?;
        Ok(a)
    }
}

pub fn validate_grid(grid: &[f64]) -> Result<()> {
    let (lo, hi) = LR_RANGE;
    let tol = 1e-12;
    if let Some(bad) = grid
        .iter()
        .find(|&&r| !(r >= lo * (1.0 - tol) && r <= hi * (1.0 + tol)))
    {
        return Err(Error::Config(format!(
            "learning rate {bad} lies outside the search range [{lo:e}, {hi:e}]"
        )));
    }
    Ok(())
}

/// Per-phase loss weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(phases: usize) -> Self {
        Self {
            weights: vec![1.0; phases],
        }
    }
}

/// Median frequency balancing: `w_c = median(freq) / freq_c` over phases that
/// occur; absent phases get weight 0.
///
/// Frequencies share the total count, so the weight is evaluated as
/// `median(count) / count_c`.
pub fn median_frequency_weights(counts: &[u64]) -> Result<ClassWeights> {
    let mut present: Vec<u64> = counts.iter().copied().filter(|&c| c > 0).collect();
    if present.is_empty() {
        return Err(Error::Invalid("median frequency balancing needs at least one labelled frame".into()));
    }
    present.sort_unstable();
    let n = present.len();
    // Twice the median, kept integral.
    let twice_median = if n % 2 == 1 {
        2 * present[n / 2] as u128
    } else {
        present[n / 2 - 1] as u128 + present[n / 2] as u128
    };
    let mut weights = Vec::with_capacity(counts.len());
    for (i, &c) in counts.iter().enumerate() {
        if c == 0 {
            log::warn!("phase {} has no training frames; its loss weight is 0", i + 1);
            weights.push(0.0);
        } else {
            weights.push(twice_median as f64 / (2 * c as u128) as f64);
        }
    }
    Ok(ClassWeights { weights })
}

/// Weighted mean of per-frame negative log-likelihoods, normalised by the
/// summed weights of the batch.
pub fn weighted_cross_entropy(logits: &Tensor, targets: &[Phase], weights: &ClassWeights) -> Result<f64> {
    check_logits(logits, targets, weights)?;
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let idx: Vec<usize> = targets.iter().map(|p| p.index()).collect();
    let loss = g.weighted_cross_entropy(l, &idx, &weights.weights);
    Ok(g.value(loss).data()[0])
}

fn check_logits(logits: &Tensor, targets: &[Phase], weights: &ClassWeights) -> Result<()> {
    if logits.ndim() != 2 || logits.shape()[0] != targets.len() {
        return Err(Error::Invalid(format!(
            "logits of shape {:?} for {} targets",
            logits.shape(),
            targets.len()
        )));
    }
    let p = logits.shape()[1];
    if weights.weights.len() != p {
        return Err(Error::Invalid(format!("{} class weights for {p} phases", weights.weights.len())));
    }
    if let Some(t) = targets.iter().find(|t| t.index() >= p) {
        return Err(Error::Invalid(format!("target phase {t} outside 1..={p}")));
    }
    if !logits.is_finite() {
        return Err(Error::Invalid("logits contain non-finite values".into()));
    }
    Ok(())
}

/// Image encoder, prompts and head: everything needed to score a frame.
pub struct Stage1Model {
    pub pair: EncoderPair,
    pub bank: PromptBank,
    pub head: LogitHead,
}

impl std::fmt::Debug for Stage1Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stage1Model")
            .field("pair", &self.pair)
            .field("prompt", &self.bank.cfg)
            .field("head", &self.head)
            .finish()
    }
}

impl Stage1Model {
    /// Builds the encoders for `backbone` and a freshly initialised bank.
    /// First tokens start from the text encoder's digit embeddings when it
    /// has a tokenizer.
    pub fn init(backbone: &BackboneSpec, prompt: PromptBankConfig, head: LogitHead, seed: u64) -> Result<Self> {
        Self::with_pair(attach_backbone(backbone)?, prompt, head, seed)
    }

    /// As [`Stage1Model::init`] with encoders that are already attached.
    pub fn with_pair(pair: EncoderPair, prompt: PromptBankConfig, head: LogitHead, seed: u64) -> Result<Self> {
        if prompt.token_dim != pair.text.token_dim() {
            return Err(Error::Config(format!(
                "prompt token width {} differs from the text encoder input width {}",
                prompt.token_dim,
                pair.text.token_dim()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[hash_str("prompt-init")]));
        let text = &pair.text;
        let bank = PromptBank::init(prompt, &mut rng, &|id| text.phase_token_embedding(id))?;
        Ok(Self { pair, bank, head })
    }

    pub fn phases(&self) -> usize {
        self.bank.phases()
    }

    /// Builds `[B, P]` logits in `g`.
    pub fn logits(&self, g: &mut Graph, images: Var, train: bool) -> Result<Var> {
        let img = self.pair.image.forward(g, images, train);
        let prompts = self.bank.materialize_all(g, train);
        let txt = self.pair.text.encode_tokens(g, &prompts);
        self.head.forward(g, img, txt, train)
    }

    /// Text features of all phases, `[P, d]`.
    pub fn text_features(&self) -> Tensor {
        let mut g = Graph::new();
        let prompts = self.bank.materialize_all(&mut g, false);
        let t = self.pair.text.encode_tokens(&mut g, &prompts);
        g.value(t).clone()
    }

    /// Phase predictions for precomputed image features.
    pub fn classify_features(&self, features: &Tensor, text: &Tensor) -> Result<Vec<Phase>> {
        let logits = compute_logits(features, text, &self.head)?;
        Ok(logits.argmax_rows().into_iter().map(Phase::from_index).collect())
    }
}

/// Loads frames from disk, optionally keeping the decoded pixels.
#[derive(Default)]
pub struct FrameLoader {
    cache: Option<HashMap<PathBuf, image::RgbImage>>,
}

impl FrameLoader {
    pub fn new(cache: bool) -> Self {
        Self {
            cache: cache.then(HashMap::new),
        }
    }

    pub fn frame(&mut self, video: &VideoAnnotation, second: usize) -> Result<Image> {
        let path = video.frame_path(second).ok_or_else(|| {
            Error::Invalid(format!("video `{}` has no frame image for second {second}", video.video_id))
        })?;
        match &mut self.cache {
            None => Ok(Image::from_rgb8(&load_rgb8(path)?)),
            Some(cache) => {
                if let Some(img) = cache.get(path) {
                    return Ok(Image::from_rgb8(img));
                }
                let raw = load_rgb8(path)?;
                let img = Image::from_rgb8(&raw);
                cache.insert(path.to_path_buf(), raw);
                Ok(img)
            }
        }
    }
}

fn require_frames(v: &VideoAnnotation) -> Result<()> {
    if v.frame_paths.is_none() {
        return Err(Error::Invalid(format!(
            "video `{}` has no frame images (expected videos/{}/frames)",
            v.video_id, v.video_id
        )));
    }
    Ok(())
}

/// Optimizer state of the three parameter groups.
#[derive(Clone, Debug)]
pub struct Stage1Optimizers {
    pub image: AdamW,
    pub prompt: AdamW,
    pub head: AdamW,
}

impl Stage1Optimizers {
    pub fn new(cfg: &AdamWConfig) -> Self {
        Self {
            image: AdamW::new(cfg.clone()),
            prompt: AdamW::new(cfg.clone()),
            head: AdamW::new(AdamWConfig {
                weight_decay: 0.0,
                ..cfg.clone()
            }),
        }
    }
}

/// One optimisation step at a time over a [`Stage1Model`].
pub struct Stage1Trainer {
    pub model: Stage1Model,
    pub weights: ClassWeights,
    pub optim: Stage1Optimizers,
}

impl Stage1Trainer {
    pub fn new(mut model: Stage1Model, weights: ClassWeights, optimizer: &AdamWConfig) -> Self {
        model.pair.image.set_mode(EncoderMode::Trainable);
        Self {
            model,
            weights,
            optim: Stage1Optimizers::new(optimizer),
        }
    }

    /// Forward, backward and update on one batch. Returns the loss, or an
    /// error without touching the parameters when logits or loss are not
    /// finite.
    pub fn train_step(&mut self, images: &Tensor, targets: &[Phase], lr: f64) -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let logits = self.model.logits(&mut g, x, true)?;
        check_logits(g.value(logits), targets, &self.weights)?;
        let idx: Vec<usize> = targets.iter().map(|p| p.index()).collect();
        let loss = g.weighted_cross_entropy(logits, &idx, &self.weights.weights);
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Invalid("non-finite loss".into()));
        }
        let grads = g.backward(loss);
        let named = g.named_grads(&grads);
        self.optim
            .image
            .update(self.model.pair.image.params_mut(), IMAGE_PREFIX, &named, lr);
        self.optim.prompt.update(&mut self.model.bank.params, PARAM_PREFIX, &named, lr);
        if let Some(gs) = named.get(LOGIT_SCALE_PARAM) {
            let mut store = ParamStore::new();
            store.insert("logit_scale", Tensor::scalar(self.model.head.logit_scale));
            let mut one = std::collections::BTreeMap::new();
            one.insert("head.logit_scale".to_string(), gs.clone());
            self.optim.head.update(&mut store, "head.", &one, lr);
            self.model.head.logit_scale = store.get("logit_scale").data()[0];
            self.model.head.clamp();
        }
        Ok(value)
    }
}

/// Evaluation-mode encoding of whole videos, `[T, d]` each.
pub fn encode_video(
    model: &Stage1Model,
    video: &VideoAnnotation,
    loader: &mut FrameLoader,
    batch_size: usize,
) -> Result<Tensor> {
    require_frames(video)?;
    let enc = &model.pair.image;
    let side = enc.input_size();
    let d = enc.output_dim();
    let mut out = Vec::with_capacity(video.len() * d);
    let mut second = 0;
    while second < video.len() {
        let end = (second + batch_size).min(video.len());
        let imgs = (second..end)
            .map(|s| Ok(eval_transform(&loader.frame(video, s)?, side)))
            .collect::<Result<Vec<_>>>()?;
        let f = enc.encode(&to_batch(&imgs, enc.channel_norm()));
        out.extend_from_slice(f.data());
        second = end;
    }
    Ok(Tensor::from_vec([video.len(), d], out))
}

/// Fraction of frames of `videos` whose argmax phase matches the label.
pub fn frame_accuracy(
    model: &Stage1Model,
    videos: &[&VideoAnnotation],
    loader: &mut FrameLoader,
    batch_size: usize,
) -> Result<f64> {
    let text = model.text_features();
    let (mut hit, mut total) = (0usize, 0usize);
    for v in videos {
        let f = encode_video(model, v, loader, batch_size)?;
        let pred = model.classify_features(&f, &text)?;
        hit += pred.iter().zip(&v.labels).filter(|(a, b)| a == b).count();
        total += v.len();
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// Stage-1 state at the selected epoch plus the training history.
#[derive(Clone, Debug)]
pub struct Stage1Checkpoint {
    pub backbone: BackboneSpec,
    pub image_params: ParamStore,
    pub prompt: PromptBank,
    pub head: LogitHead,
    pub optim: Stage1Optimizers,
    pub class_weights: ClassWeights,
    /// 1-based epoch the parameters come from.
    pub epoch: usize,
    pub val_accuracy: f64,
    pub val_history: Vec<f64>,
    pub loss_history: Vec<f64>,
    pub learning_rate: f64,
    pub seed: u64,
    pub config_digest: String,
    pub text_checksum: String,
    pub phase_names: Vec<String>,
}

const CHECKPOINT_FORMAT: &str = "surgphase-stage1";
const CHECKPOINT_VERSION: u64 = 1;

impl Stage1Checkpoint {
    /// Rebuilds the model. The text encoder must match the one used in
    /// training.
    pub fn model(&self) -> Result<Stage1Model> {
        let mut pair = attach_backbone(&self.backbone)?;
        pair.image.load_params(self.image_params.clone())?;
        let checksum = pair.text.params().checksum();
        if checksum != self.text_checksum {
            return Err(Error::Config(format!(
                "text encoder weights (checksum {checksum}) differ from those used in training ({})",
                self.text_checksum
            )));
        }
        Ok(Stage1Model {
            pair,
            bank: self.prompt.clone(),
            head: self.head.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut t = ParamStore::new();
        t.extend_prefixed(IMAGE_PREFIX, &self.image_params);
        t.extend_prefixed(PARAM_PREFIX, &self.prompt.params);
        t.insert(LOGIT_SCALE_PARAM, Tensor::scalar(self.head.logit_scale));
        for (group, opt) in [
            ("image", &self.optim.image),
            ("prompt", &self.optim.prompt),
            ("head", &self.optim.head),
        ] {
            t.extend_prefixed(&format!("optim.{group}.m."), &opt.first_moment);
            t.extend_prefixed(&format!("optim.{group}.v."), &opt.second_moment);
        }
        let p = &self.prompt.cfg;
        let manifest = json!({
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "backbone": self.backbone,
            "prompt.variant": p.variant,
            "prompt.m": p.context_tokens,
            "prompt.n": p.reference_indices.len(),
            "prompt.reference_indices": p.reference_indices,
            "prompt.phases": p.phases,
            "prompt.token_dim": p.token_dim,
            "prompt.shared_context": p.shared_context,
            "head.normalize": self.head.normalize,
            "head.learnable": self.head.learnable,
            "optimizer": {
                "image": {"config": self.optim.image.cfg, "step": self.optim.image.step},
                "prompt": {"config": self.optim.prompt.cfg, "step": self.optim.prompt.step},
                "head": {"config": self.optim.head.cfg, "step": self.optim.head.step},
            },
            "class_weights": self.class_weights.weights,
            "epoch": self.epoch,
            "val_accuracy": self.val_accuracy,
            "val_history": self.val_history,
            "loss_history": self.loss_history,
            "learning_rate": self.learning_rate,
            "seed": self.seed,
            "config_digest": self.config_digest,
            "text_checksum": self.text_checksum,
            "phase_names": self.phase_names,
        });
        write_archive(path, &t, &manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a = read_archive(path)?;
        let m = &a.manifest;
        if m.get("format").and_then(Value::as_str) != Some(CHECKPOINT_FORMAT) {
            return Err(Error::format(path, "not a stage-1 checkpoint"));
        }
        if m.get("version").and_then(Value::as_u64) != Some(CHECKPOINT_VERSION) {
            return Err(Error::format(path, "unsupported stage-1 checkpoint version"));
        }
        let bad = |k: &str| Error::format(path, format!("checkpoint manifest field `{k}` is missing or invalid"));
        let get = |k: &str| m.get(k).cloned().ok_or_else(|| bad(k));
        fn de<T: serde::de::DeserializeOwned>(v: Value, e: Error) -> Result<T> {
            serde_json::from_value(v).map_err(|_| e)
        }
        let prompt_cfg = PromptBankConfig {
            phases: de(get("prompt.phases")?, bad("prompt.phases"))?,
            context_tokens: de(get("prompt.m")?, bad("prompt.m"))?,
            token_dim: de(get("prompt.token_dim")?, bad("prompt.token_dim"))?,
            variant: de::<PromptVariant>(get("prompt.variant")?, bad("prompt.variant"))?,
            reference_indices: de(get("prompt.reference_indices")?, bad("prompt.reference_indices"))?,
            shared_context: de(get("prompt.shared_context")?, bad("prompt.shared_context"))?,
        };
        let prompt = PromptBank::from_params(prompt_cfg, a.tensors.strip_prefix(PARAM_PREFIX))?;
        let scale = a
            .tensors
            .try_get(LOGIT_SCALE_PARAM)
            .ok_or_else(|| bad(LOGIT_SCALE_PARAM))?
            .data()[0];
        let head = LogitHead {
            normalize: de(get("head.normalize")?, bad("head.normalize"))?,
            learnable: de(get("head.learnable")?, bad("head.learnable"))?,
            logit_scale: scale,
        };
        let opt = get("optimizer")?;
        let restore = |group: &str| -> Result<AdamW> {
            let o = opt.get(group).ok_or_else(|| bad("optimizer"))?;
            let mut adam = AdamW::new(de(o["config"].clone(), bad("optimizer"))?);
            adam.step = o["step"].as_u64().ok_or_else(|| bad("optimizer"))?;
            adam.first_moment = a.tensors.strip_prefix(&format!("optim.{group}.m."));
            adam.second_moment = a.tensors.strip_prefix(&format!("optim.{group}.v."));
            Ok(adam)
        };
        Ok(Self {
            backbone: de(get("backbone")?, bad("backbone"))?,
            image_params: a.tensors.strip_prefix(IMAGE_PREFIX),
            prompt,
            head,
            optim: Stage1Optimizers {
                image: restore("image")?,
                prompt: restore("prompt")?,
                head: restore("head")?,
            },
            class_weights: ClassWeights {
                weights: de(get("class_weights")?, bad("class_weights"))?,
            },
            epoch: de(get("epoch")?, bad("epoch"))?,
            val_accuracy: de(get("val_accuracy")?, bad("val_accuracy"))?,
            val_history: de(get("val_history")?, bad("val_history"))?,
            loss_history: de(get("loss_history")?, bad("loss_history"))?,
            learning_rate: de(get("learning_rate")?, bad("learning_rate"))?,
            seed: de(get("seed")?, bad("seed"))?,
            config_digest: de(get("config_digest")?, bad("config_digest"))?,
            text_checksum: de(get("text_checksum")?, bad("text_checksum"))?,
            phase_names: de(get("phase_names")?, bad("phase_names"))?,
        })
    }
}

/// Digest of everything that determines a stage-1 run.
pub fn stage1_digest(backbone: &BackboneSpec, prompt: &PromptBankConfig, head: &LogitHead, cfg: &Stage1Config) -> String {
    let v = json!({"backbone": backbone, "prompt": prompt, "head": head, "stage1": cfg});
    digest_bytes(v.to_string().as_bytes())
}

/// Trains for `cfg.epochs` epochs and returns the state of the epoch with
/// the best validation frame accuracy (the last epoch if there is no
/// validation split).
pub fn train_stage1(
    dataset: &Dataset,
    split: &DatasetSplit,
    model: Stage1Model,
    backbone: &BackboneSpec,
    cfg: &Stage1Config,
) -> Result<Stage1Checkpoint> {
    cfg.validate()?;
    split.validate(dataset)?;
    if split.train.is_empty() {
        return Err(Error::Invalid("stage 1 needs at least one training video".into()));
    }
    if model.phases() != dataset.vocab.len() {
        return Err(Error::Config(format!(
            "prompt bank has {} phases, dataset has {}",
            model.phases(),
            dataset.vocab.len()
        )));
    }
    let train = dataset.videos_for(&split.train)?;
    let val = dataset.videos_for(&split.val)?;
    for v in train.iter().chain(&val) {
        require_frames(v)?;
    }
    let augment = cfg.augment_for(model.pair.image.input_size())?;
    let weights = median_frequency_weights(&dataset.label_counts(&split.train)?)?;
    let digest = stage1_digest(backbone, &model.bank.cfg, &model.head, cfg);
    let text_checksum = model.pair.text.params().checksum();
    let norm = model.pair.image.channel_norm();

    let mut trainer = Stage1Trainer::new(model, weights, &cfg.optimizer);
    let mut loader = FrameLoader::new(cfg.cache_frames);
    let samples: Vec<(usize, usize)> = train
        .iter()
        .enumerate()
        .flat_map(|(vi, v)| (0..v.len()).map(move |s| (vi, s)))
        .collect();

    let mut best: Option<Stage1Checkpoint> = None;
    let mut val_history = Vec::with_capacity(cfg.epochs);
    let mut loss_history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.learning_rate, epoch, cfg.epochs);
        let mut order = samples.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[epoch as u64, 0x5f])));
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut imgs = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &(vi, s) in chunk {
                let v = train[vi];
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    cfg.seed,
                    &[epoch as u64, hash_str(&v.video_id), s as u64],
                ));
                imgs.push(augment.apply(&loader.frame(v, s)?, &mut rng));
                targets.push(v.labels[s]);
            }
            let batch = to_batch(&imgs, norm);
            match trainer.train_step(&batch, &targets, lr) {
                Ok(l) => {
                    loss_sum += l;
                    batches += 1;
                }
                Err(Error::Invalid(msg)) => {
                    log::error!("stage 1 diverged in epoch {}: {msg}", epoch + 1);
                    return Err(Error::Diverged {
                        epoch: epoch + 1,
                        last_good: best.map(Box::new),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        let mean_loss = loss_sum / batches.max(1) as f64;
        loss_history.push(mean_loss);
        let acc = if val.is_empty() {
            f64::NAN
        } else {
            frame_accuracy(&trainer.model, &val, &mut loader, cfg.eval_batch_size)?
        };
        val_history.push(acc);
        log::info!(
            "stage1 epoch {}/{} lr {lr:.3e} loss {mean_loss:.5} val acc {acc:.4}",
            epoch + 1,
            cfg.epochs
        );
        let improved = match &best {
            None => true,
            Some(_) if val.is_empty() => true,
            Some(b) => acc > b.val_accuracy,
        };
        if improved {
            best = Some(Stage1Checkpoint {
                backbone: backbone.clone(),
                image_params: trainer.model.pair.image.params().clone(),
                prompt: trainer.model.bank.clone(),
                head: trainer.model.head.clone(),
                optim: trainer.optim.clone(),
                class_weights: trainer.weights.clone(),
                epoch: epoch + 1,
                val_accuracy: acc,
                val_history: Vec::new(),
                loss_history: Vec::new(),
                learning_rate: cfg.learning_rate,
                seed: cfg.seed,
                config_digest: digest.clone(),
                text_checksum: text_checksum.clone(),
                phase_names: dataset.vocab.names().to_vec(),
            });
        }
    }
    if trainer.model.pair.text.params().checksum() != text_checksum {
        return Err(Error::Training("text encoder parameters changed during training".into()));
    }
    let mut best = best.expect("at least one epoch ran");
    best.val_history = val_history;
    best.loss_history = loss_history;
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrCandidate {
    pub learning_rate: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSearch {
    pub candidates: Vec<LrCandidate>,
    pub best: f64,
}

/// Trains every grid rate for `budget` epochs from the same initial model
/// and picks the best validation frame accuracy; ties go to the smaller rate.
pub fn select_learning_rate(
    dataset: &Dataset,
    split: &DatasetSplit,
    make_model: &dyn Fn() -> Result<Stage1Model>,
    backbone: &BackboneSpec,
    cfg: &Stage1Config,
    grid: &[f64],
    budget: usize,
) -> Result<LrSearch> {
    if grid.is_empty() {
        return Err(Error::Config("learning-rate grid is empty".into()));
    }
    if budget == 0 {
        return Err(Error::Config("learning-rate search budget must be at least one epoch".into()));
    }
    validate_grid(grid)?;
    if split.val.is_empty() {
        return Err(Error::Config("learning-rate search needs validation videos".into()));
    }
    let mut rates = grid.to_vec();
    rates.sort_by(f64::total_cmp);
    rates.dedup();
    let mut candidates = Vec::with_capacity(rates.len());
    for &lr in &rates {
        let run_cfg = Stage1Config {
            epochs: budget,
            learning_rate: lr,
            ..cfg.clone()
        };
        let ck = train_stage1(dataset, split, make_model()?, backbone, &run_cfg)?;
        log::info!("lr-search candidate {lr:.3e}: val acc {:.4}", ck.val_accuracy);
        candidates.push(LrCandidate {
            learning_rate: lr,
            val_accuracy: ck.val_accuracy,
        });
    }
    let mut best = &candidates[0];
    for c in &candidates[1..] {
        if c.val_accuracy > best.val_accuracy {
            best = c;
        }
    }
    log::info!("lr-search winner {:.3e}", best.learning_rate);
    Ok(LrSearch {
        best: best.learning_rate,
        candidates,
    })
}

/// Encodes every frame of `videos` in evaluation mode into the cache at
/// `dir`. Videos already present are skipped.
pub fn extract_features(
    model: &Stage1Model,
    videos: &[&VideoAnnotation],
    dir: &Path,
    batch_size: usize,
    dtype: FeatureDtype,
) -> Result<FeatureCache> {
    if batch_size == 0 {
        return Err(Error::Config("extraction batch size must be at least 1".into()));
    }
    let mut cache = FeatureCache::create(dir, model.pair.image.output_dim(), dtype)?;
    let mut loader = FrameLoader::new(false);
    for v in videos {
        if cache.contains(&v.video_id) {
            log::debug!("features for {} already cached", v.video_id);
            continue;
        }
        let features = encode_video(model, v, &mut loader, batch_size)?;
        cache.insert(&FeatureEntry {
            video_id: v.video_id.clone(),
            features,
            labels: v.labels.clone(),
        })?;
        log::info!("cached features for {} ({} frames)", v.video_id, v.len());
    }
    Ok(cache)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;
    use proptest::prelude::*;

    #[test]
    fn median_frequency_examples() {
        assert_eq!(median_frequency_weights(&[10, 10, 10]).unwrap().weights, vec![1.0; 3]);
        assert_eq!(median_frequency_weights(&[1, 2, 4]).unwrap().weights, vec![2.0, 1.0, 0.5]);
        assert_eq!(median_frequency_weights(&[5, 0, 5]).unwrap().weights, vec![1.0, 0.0, 1.0]);
        assert!(median_frequency_weights(&[0, 0]).is_err());
    }

    /// Frequencies and median as exact rationals.
    fn rational_oracle(counts: &[u64]) -> Vec<f64> {
        let total: u128 = counts.iter().map(|&c| c as u128).sum();
        let mut freqs: Vec<Ratio<u128>> = counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| Ratio::new(c as u128, total))
            .collect();
        freqs.sort();
        let n = freqs.len();
        let median = if n % 2 == 1 {
            freqs[n / 2]
        } else {
            (freqs[n / 2 - 1] + freqs[n / 2]) / Ratio::from_integer(2)
        };
        counts
            .iter()
            .map(|&c| {
                if c == 0 {
                    0.0
                } else {
                    let w = median / Ratio::new(c as u128, total);
                    *w.numer() as f64 / *w.denom() as f64
                }
            })
            .collect()
    }

    proptest! {
        #[test]
        fn median_frequency_matches_rational_oracle(
            counts in prop::collection::vec(0u64..5000, 1..10)
        ) {
            prop_assume!(counts.iter().any(|&c| c > 0));
            let got = median_frequency_weights(&counts).unwrap().weights;
            prop_assert_eq!(got, rational_oracle(&counts));
        }
    }

    #[test]
    fn weighted_ce_examples() {
        let w = ClassWeights::uniform(2);
        let loss = weighted_cross_entropy(&Tensor::zeros([1, 2]), &[Phase::from_index(0)], &w).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);

        let confident = Tensor::from_vec([1, 3], vec![0.0, 80.0, 0.0]);
        let l = weighted_cross_entropy(&confident, &[Phase::from_index(1)], &ClassWeights::uniform(3)).unwrap();
        assert!(l < 1e-30);

        let logits = Tensor::from_vec([3, 3], vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.1, -0.2, 0.4, 1.1]);
        let t = [0, 2, 1].map(Phase::from_index);
        let w1 = ClassWeights {
            weights: vec![0.5, 2.0, 1.5],
        };
        let w2 = ClassWeights {
            weights: vec![1.0, 4.0, 3.0],
        };
        let a = weighted_cross_entropy(&logits, &t, &w1).unwrap();
        let b = weighted_cross_entropy(&logits, &t, &w2).unwrap();
        assert!((a - b).abs() < 1e-15);

        let mut bad = logits.clone();
        bad.data_mut()[4] = f64::NAN;
        assert!(weighted_cross_entropy(&bad, &t, &w1).is_err());
        assert!(weighted_cross_entropy(&logits, &[0, 1, 5].map(Phase::from_index), &w1).is_err());
    }

    #[test]
    fn default_grid_spans_the_search_range() {
        let g = log_spaced_grid(5);
        assert_eq!(g.len(), 5);
        assert_eq!(g[0], 5e-6);
        assert_eq!(g[4], 5e-4);
        assert!((g[2] - 5e-5).abs() < 1e-18);
        assert!(validate_grid(&[1e-3]).is_err());
        assert!(Stage1Config::default().validate().is_ok());
        let zero = Stage1Config {
            epochs: 0,
            ..Stage1Config::default()
        };
        assert!(zero.validate().is_err());
    }

    fn toy_model(seed: u64) -> Stage1Model {
        let backbone = BackboneSpec::default();
        let prompt = PromptBankConfig::ordinal(4, 2, backbone.toy.token_dim, 2).unwrap();
        Stage1Model::init(&backbone, prompt, LogitHead::default(), seed).unwrap()
    }

    #[test]
    fn trainer_updates_image_prompt_and_scale_but_not_text() {
        let mut tr = Stage1Trainer::new(toy_model(0), ClassWeights::uniform(4), &AdamWConfig::default());
        let text0 = tr.model.pair.text.params().checksum();
        let img0 = tr.model.pair.image.params().checksum();
        let bank0 = tr.model.bank.params.checksum();
        let scale0 = tr.model.head.logit_scale;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform([4, 3, 32, 32], 1.0, &mut rng);
        let t = [0, 1, 2, 3].map(Phase::from_index);
        for _ in 0..3 {
            tr.train_step(&x, &t, 1e-3).unwrap();
        }
        assert_eq!(tr.model.pair.text.params().checksum(), text0);
        assert_ne!(tr.model.pair.image.params().checksum(), img0);
        assert_ne!(tr.model.bank.params.checksum(), bank0);
        assert_ne!(tr.model.head.logit_scale, scale0);
        assert_eq!(tr.optim.image.step, 3);
    }

    #[test]
    fn non_finite_input_is_rejected_without_update() {
        let mut tr = Stage1Trainer::new(toy_model(0), ClassWeights::uniform(4), &AdamWConfig::default());
        let before = tr.model.pair.image.params().checksum();
        tr.model.head.logit_scale = f64::NAN;
        let x = Tensor::full([1, 3, 32, 32], 0.5);
        assert!(tr.train_step(&x, &[Phase::from_index(0)], 1e-3).is_err());
        assert_eq!(tr.model.pair.image.params().checksum(), before);
    }
}
