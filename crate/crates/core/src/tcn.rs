//! Stage 2: a causal dilated temporal convolutional network over cached
//! frame features.
//!
//! Each stage is a 1x1 input projection, `layers` residual blocks
//! (`x + dropout(W_1x1 * relu(causal_conv_k(x, dilation 2^l)))`) and a 1x1
//! head to P logits. Later stages take the softmax of the previous stage's
//! logits as input, and the training loss is summed over stages.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::archive::{read_archive, write_archive};
use crate::autograd::{Graph, Var};
use crate::data::{DatasetSplit, Phase};
use crate::error::{Error, Result};
use crate::features::{FeatureCache, FeatureEntry};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::params::{digest_bytes, ParamStore};
use crate::seed::{derive_seed, hash_str};
use crate::stage1::{median_frequency_weights, validate_grid, ClassWeights, LrCandidate, LrSearch};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TcnConfig {
    pub stages: usize,
    pub layers: usize,
    pub hidden_dim: usize,
    pub kernel_size: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub lr_grid: Vec<f64>,
    pub lr_search_epochs: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for TcnConfig {
    fn default() -> Self {
        Self {
            stages: 1,
            layers: 8,
            hidden_dim: 256,
            kernel_size: 3,
            dropout: 0.5,
            epochs: 25,
            learning_rate: 5e-4,
            lr_grid: crate::stage1::log_spaced_grid(5),
            lr_search_epochs: 5,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

impl TcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.layers == 0 || self.hidden_dim == 0 || self.kernel_size == 0 {
            return Err(Error::Config("tcn stages, layers, hidden_dim and kernel_size must be positive".into()));
        }
        if self.layers > 30 {
            return Err(Error::Config("tcn layers above 30 overflow the dilation".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("tcn dropout must lie in [0, 1)".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("stage2.epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("stage2.learning_rate must be positive".into()));
        }
        validate_grid(&self.lr_grid)
    }

    /// Frames of history that one output sees in a single stage:
    /// `1 + (k - 1) * (2^layers - 1)`.
    pub fn receptive_field(&self) -> usize {
        1 + (self.kernel_size - 1) * ((1usize << self.layers) - 1)
    }
}

/// Trained network weights plus the dimensions they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct TcnModel {
    pub cfg: TcnConfig,
    pub input_dim: usize,
    pub phases: usize,
    pub params: ParamStore,
}

impl TcnModel {
    pub fn init(cfg: &TcnConfig, input_dim: usize, phases: usize) -> Result<Self> {
        cfg.validate()?;
        if input_dim == 0 || phases == 0 {
            return Err(Error::Config("tcn input and phase counts must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[hash_str("tcn-init")]));
        let mut params = ParamStore::new();
        let h = cfg.hidden_dim;
        let k = cfg.kernel_size;
        let uniform = |shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng| {
            Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
        };
        for s in 0..cfg.stages {
            let cin = if s == 0 { input_dim } else { phases };
            params.insert(format!("stage{s}.in.weight"), uniform(vec![h, cin], cin, &mut rng));
            params.insert(format!("stage{s}.in.bias"), uniform(vec![h], cin, &mut rng));
            for l in 0..cfg.layers {
                let p = format!("stage{s}.layer{l}");
                params.insert(format!("{p}.dilated.weight"), uniform(vec![h, h, k], h * k, &mut rng));
                params.insert(format!("{p}.dilated.bias"), uniform(vec![h], h * k, &mut rng));
                params.insert(format!("{p}.pointwise.weight"), uniform(vec![h, h], h, &mut rng));
                params.insert(format!("{p}.pointwise.bias"), uniform(vec![h], h, &mut rng));
            }
            params.insert(format!("stage{s}.out.weight"), uniform(vec![phases, h], h, &mut rng));
            params.insert(format!("stage{s}.out.bias"), uniform(vec![phases], h, &mut rng));
        }
        Ok(Self {
            cfg: cfg.clone(),
            input_dim,
            phases,
            params,
        })
    }

    pub fn receptive_field(&self) -> usize {
        self.cfg.stages * (self.cfg.receptive_field() - 1) + 1
    }

    fn check_input(&self, features: &Tensor) -> Result<()> {
        if features.ndim() != 2 || features.shape()[0] == 0 {
            return Err(Error::Invalid(format!(
                "tcn input must be a non-empty [T, d] matrix, got {:?}",
                features.shape()
            )));
        }
        if features.shape()[1] != self.input_dim {
            return Err(Error::Invalid(format!(
                "feature dimension {} does not match the trained input projection ({})",
                features.shape()[1],
                self.input_dim
            )));
        }
        Ok(())
    }

    /// Logits of every stage, `[T, P]` each. `dropout_rng` enables dropout.
    pub fn forward(
        &self,
        g: &mut Graph,
        features: Var,
        train: bool,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Vec<Var> {
        let p = |g: &mut Graph, name: &str| g.param(name, self.params.get(name), train);
        let mut x = features;
        let mut outs = Vec::with_capacity(self.cfg.stages);
        for s in 0..self.cfg.stages {
            if s > 0 {
                x = g.softmax_rows(x);
            }
            let (w, b) = (p(g, &format!("stage{s}.in.weight")), p(g, &format!("stage{s}.in.bias")));
            let mut h = g.linear(x, w, Some(b));
            for l in 0..self.cfg.layers {
                let pre = format!("stage{s}.layer{l}");
                let dw = p(g, &format!("{pre}.dilated.weight"));
                let db = p(g, &format!("{pre}.dilated.bias"));
                let pw = p(g, &format!("{pre}.pointwise.weight"));
                let pb = p(g, &format!("{pre}.pointwise.bias"));
                let mut z = g.causal_conv1d(h, dw, Some(db), 1 << l);
                z = g.relu(z);
                z = g.linear(z, pw, Some(pb));
                if let Some(rng) = dropout_rng.as_deref_mut() {
                    if self.cfg.dropout > 0.0 {
                        let keep = 1.0 - self.cfg.dropout;
                        let shape = g.shape(z).to_vec();
                        let n: usize = shape.iter().product();
                        let mask: Vec<f64> = (0..n)
                            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                            .collect();
                        z = g.mul_const(z, Tensor::from_vec(shape, mask));
                    }
                }
                h = g.add(h, z);
            }
            let (w, b) = (p(g, &format!("stage{s}.out.weight")), p(g, &format!("stage{s}.out.bias")));
            let out = g.linear(h, w, Some(b));
            outs.push(out);
            x = out;
        }
        outs
    }

    /// Evaluation-mode logits of the last stage, `[T, P]`.
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        self.check_input(features)?;
        let mut g = Graph::new();
        let x = g.constant(features.clone());
        let outs = self.forward(&mut g, x, false, None);
        Ok(g.value(*outs.last().unwrap()).clone())
    }
}

/// `[T, d]` features to `[T, P]` logits.
pub fn tcn_forward(model: &TcnModel, features: &Tensor) -> Result<Tensor> {
    model.logits(features)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhasePrediction {
    pub video_id: String,
    pub logits: Tensor,
    pub labels: Vec<Phase>,
}

pub fn predict(model: &TcnModel, entries: &[FeatureEntry]) -> Result<Vec<PhasePrediction>> {
    entries
        .iter()
        .map(|e| {
            let logits = model.logits(&e.features)?;
            let labels = logits.argmax_rows().into_iter().map(Phase::from_index).collect();
            Ok(PhasePrediction {
                video_id: e.video_id.clone(),
                logits,
                labels,
            })
        })
        .collect()
}

fn pooled_accuracy(model: &TcnModel, entries: &[FeatureEntry]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for (p, e) in predict(model, entries)?.iter().zip(entries) {
        hit += p.labels.iter().zip(&e.labels).filter(|(a, b)| a == b).count();
        total += e.len();
    }
    Ok(if total == 0 { f64::NAN } else { hit as f64 / total as f64 })
}

#[derive(Clone, Debug)]
pub struct TcnCheckpoint {
    pub model: TcnModel,
    pub optimizer: AdamW,
    pub class_weights: ClassWeights,
    /// 1-based epoch the parameters come from.
    pub epoch: usize,
    pub val_accuracy: f64,
    pub val_history: Vec<f64>,
    pub loss_history: Vec<f64>,
    pub config_digest: String,
}

const TCN_FORMAT: &str = "surgphase-tcn";
const TCN_VERSION: u64 = 1;

impl TcnCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut t = ParamStore::new();
        t.extend_prefixed("tcn.", &self.model.params);
        t.extend_prefixed("optim.m.", &self.optimizer.first_moment);
        t.extend_prefixed("optim.v.", &self.optimizer.second_moment);
        let manifest = json!({
            "format": TCN_FORMAT,
            "version": TCN_VERSION,
            "config": self.model.cfg,
            "input_dim": self.model.input_dim,
            "phases": self.model.phases,
            "optimizer_step": self.optimizer.step,
            "class_weights": self.class_weights.weights,
            "epoch": self.epoch,
            "val_accuracy": self.val_accuracy,
            "val_history": self.val_history,
            "loss_history": self.loss_history,
            "config_digest": self.config_digest,
        });
        write_archive(path, &t, &manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a = read_archive(path)?;
        let m = &a.manifest;
        if m.get("format").and_then(Value::as_str) != Some(TCN_FORMAT) {
            return Err(Error::format(path, "not a temporal-model checkpoint"));
        }
        if m.get("version").and_then(Value::as_u64) != Some(TCN_VERSION) {
            return Err(Error::format(path, "unsupported temporal-model checkpoint version"));
        }
        fn field<T: serde::de::DeserializeOwned>(m: &Value, k: &str, path: &Path) -> Result<T> {
            m.get(k)
                .cloned()
                .and_then(|v| serde_json::from_value(v).ok())
                .ok_or_else(|| Error::format(path, format!("checkpoint manifest field `{k}` is missing or invalid")))
        }
        let cfg: TcnConfig = field(m, "config", path)?;
        let input_dim = field(m, "input_dim", path)?;
        let phases = field(m, "phases", path)?;
        let params = a.tensors.strip_prefix("tcn.");
        let reference = TcnModel::init(&cfg, input_dim, phases)?;
        for (name, t) in reference.params.iter() {
            match params.try_get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => return Err(Error::format(path, format!("tensor `tcn.{name}` is missing or misshapen"))),
            }
        }
        let mut optimizer = AdamW::new(cfg.optimizer.clone());
        optimizer.step = field(m, "optimizer_step", path)?;
        optimizer.first_moment = a.tensors.strip_prefix("optim.m.");
        optimizer.second_moment = a.tensors.strip_prefix("optim.v.");
        Ok(Self {
            model: TcnModel {
                cfg,
                input_dim,
                phases,
                params,
            },
            optimizer,
            class_weights: ClassWeights {
                weights: field(m, "class_weights", path)?,
            },
            epoch: field(m, "epoch", path)?,
            val_accuracy: field(m, "val_accuracy", path)?,
            val_history: field(m, "val_history", path)?,
            loss_history: field(m, "loss_history", path)?,
            config_digest: field(m, "config_digest", path)?,
        })
    }
}

/// Summed weighted cross-entropy of all stages for one video.
pub fn sequence_loss(g: &mut Graph, stage_logits: &[Var], labels: &[Phase], weights: &ClassWeights) -> Var {
    let idx: Vec<usize> = labels.iter().map(|p| p.index()).collect();
    let losses: Vec<Var> = stage_logits
        .iter()
        .map(|&l| g.weighted_cross_entropy(l, &idx, &weights.weights))
        .collect();
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = g.add(total, l);
    }
    total
}

/// Trains on the training videos of `split`, one full video per step, and
/// returns the epoch with the best validation frame accuracy.
pub fn train_stage2(cache: &FeatureCache, split: &DatasetSplit, phases: usize, cfg: &TcnConfig) -> Result<TcnCheckpoint> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::Invalid("stage 2 needs at least one training video".into()));
    }
    let train = cache.load_many(&split.train)?;
    let val = cache.load_many(&split.val)?;
    let mut counts = vec![0u64; phases];
    for e in &train {
        for p in &e.labels {
            if p.index() >= phases {
                return Err(Error::data(cache.dir(), format!("{}: phase {p} outside 1..={phases}", e.video_id)));
            }
            counts[p.index()] += 1;
        }
    }
    let weights = median_frequency_weights(&counts)?;
    let mut model = TcnModel::init(cfg, cache.dim(), phases)?;
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let digest = digest_bytes(json!({"stage2": cfg, "input_dim": cache.dim(), "phases": phases}).to_string().as_bytes());

    let mut best: Option<TcnCheckpoint> = None;
    let mut val_history = Vec::with_capacity(cfg.epochs);
    let mut loss_history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.learning_rate, epoch, cfg.epochs);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[epoch as u64, 0x7c])));
        let mut loss_sum = 0.0;
        for &vi in &order {
            let e = &train[vi];
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[epoch as u64, hash_str(&e.video_id)]));
            let mut g = Graph::new();
            let x = g.constant(e.features.clone());
            let outs = model.forward(&mut g, x, true, Some(&mut rng));
            let loss = sequence_loss(&mut g, &outs, &e.labels, &weights);
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Training(format!(
                    "stage 2 diverged in epoch {} on {} (non-finite loss)",
                    epoch + 1,
                    e.video_id
                )));
            }
            loss_sum += value;
            let grads = g.backward(loss);
            let named: BTreeMap<String, Tensor> = g.named_grads(&grads);
            opt.update(&mut model.params, "", &named, lr);
        }
        let mean_loss = loss_sum / train.len() as f64;
        loss_history.push(mean_loss);
        let acc = if val.is_empty() { f64::NAN } else { pooled_accuracy(&model, &val)? };
        val_history.push(acc);
        log::info!("stage2 epoch {}/{} lr {lr:.3e} loss {mean_loss:.5} val acc {acc:.4}", epoch + 1, cfg.epochs);
        let improved = match &best {
            None => true,
            Some(_) if val.is_empty() => true,
            Some(b) => acc > b.val_accuracy,
        };
        if improved {
            best = Some(TcnCheckpoint {
                model: model.clone(),
                optimizer: opt.clone(),
                class_weights: weights.clone(),
                epoch: epoch + 1,
                val_accuracy: acc,
                val_history: Vec::new(),
                loss_history: Vec::new(),
                config_digest: digest.clone(),
            });
        }
    }
    let mut best = best.expect("at least one epoch ran");
    best.val_history = val_history;
    best.loss_history = loss_history;
    Ok(best)
}

/// Stage-2 counterpart of the stage-1 grid search: every rate trains for
/// `budget` epochs from the same initial weights; ties go to the smaller rate.
pub fn select_stage2_learning_rate(
    cache: &FeatureCache,
    split: &DatasetSplit,
    phases: usize,
    cfg: &TcnConfig,
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
    let mut candidates: Vec<LrCandidate> = Vec::with_capacity(rates.len());
    for &lr in &rates {
        let run = TcnConfig {
            epochs: budget,
            learning_rate: lr,
            ..cfg.clone()
        };
        let ck = train_stage2(cache, split, phases, &run)?;
        log::info!("stage2 lr-search candidate {lr:.3e}: val acc {:.4}", ck.val_accuracy);
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
    Ok(LrSearch {
        best: best.learning_rate,
        candidates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(layers: usize) -> TcnConfig {
        TcnConfig {
            layers,
            hidden_dim: 6,
            ..TcnConfig::default()
        }
    }

    fn features(t: usize, d: usize, seed: u64) -> Tensor {
        Tensor::randn([t, d], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn receptive_field_formula() {
        assert_eq!(TcnConfig::default().receptive_field(), 511);
        assert_eq!(small(1).receptive_field(), 3);
        let two = TcnConfig {
            stages: 2,
            ..small(3)
        };
        assert_eq!(TcnModel::init(&two, 4, 3).unwrap().receptive_field(), 29);
    }

    #[test]
    fn single_frame_and_shape() {
        let m = TcnModel::init(&small(8), 5, 7).unwrap();
        assert_eq!(m.logits(&features(1, 5, 0)).unwrap().shape(), &[1, 7]);
        assert_eq!(m.logits(&features(40, 5, 0)).unwrap().shape(), &[40, 7]);
        assert!(m.logits(&features(4, 6, 0)).is_err());
    }

    #[test]
    fn prefix_predictions_are_identical() {
        let cfg = TcnConfig {
            stages: 2,
            ..small(4)
        };
        let m = TcnModel::init(&cfg, 3, 4).unwrap();
        let f = features(60, 3, 1);
        let full = m.logits(&f).unwrap();
        for t in [1, 17, 59] {
            let prefix = Tensor::from_vec([t, 3], f.data()[..t * 3].to_vec());
            let part = m.logits(&prefix).unwrap();
            assert_eq!(part.data(), &full.data()[..t * 4]);
        }
    }

    #[test]
    fn uniform_weights_equal_plain_cross_entropy() {
        let m = TcnModel::init(&small(2), 3, 4).unwrap();
        let f = features(12, 3, 2);
        let labels: Vec<Phase> = (0..12).map(|i| Phase::from_index(i % 4)).collect();
        let mut g = Graph::new();
        let x = g.constant(f.clone());
        let outs = m.forward(&mut g, x, false, None);
        let loss = sequence_loss(&mut g, &outs, &labels, &ClassWeights::uniform(4));
        let logits = m.logits(&f).unwrap();
        let mut plain = 0.0;
        for (t, l) in labels.iter().enumerate() {
            let row = logits.row(t);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            plain += lse - row[l.index()];
        }
        plain /= 12.0;
        assert!((g.value(loss).data()[0] - plain).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = TcnModel::init(&small(2), 3, 4).unwrap();
        let ck = TcnCheckpoint {
            model: m.clone(),
            optimizer: AdamW::new(AdamWConfig::default()),
            class_weights: ClassWeights::uniform(4),
            epoch: 1,
            val_accuracy: 0.5,
            val_history: vec![0.5],
            loss_history: vec![1.0],
            config_digest: "x".into(),
        };
        let path = dir.path().join("tcn.safetensors");
        ck.save(&path).unwrap();
        let back = TcnCheckpoint::load(&path).unwrap();
        assert_eq!(back.model, m);
        assert_eq!(back.val_history, vec![0.5]);
    }

    #[test]
    fn future_perturbation_leaves_past_untouched() {
        let m = TcnModel::init(&small(5), 3, 4).unwrap();
        let f = features(80, 3, 3);
        let base = m.logits(&f).unwrap();
        for t in [0usize, 30, 78] {
            let mut g = f.clone();
            for v in &mut g.data_mut()[(t + 1) * 3..] {
                *v += 10.0;
            }
            let out = m.logits(&g).unwrap();
            assert_eq!(&out.data()[..(t + 1) * 4], &base.data()[..(t + 1) * 4]);
            assert_ne!(out.data(), base.data());
        }
    }

    #[test]
    fn impulse_reach_matches_receptive_field() {
        let cfg = small(4);
        let m = TcnModel::init(&cfg, 2, 3).unwrap();
        let f = features(50, 2, 4);
        let base = m.logits(&f).unwrap();
        let mut g = f.clone();
        g.data_mut()[5 * 2] += 1.0;
        let out = m.logits(&g).unwrap();
        let touched: Vec<usize> = (0..50).filter(|&t| out.row(t) != base.row(t)).collect();
        assert_eq!(touched.first(), Some(&5));
        assert_eq!(touched.last(), Some(&(5 + cfg.receptive_field() - 1)));
    }

    #[test]
    fn trains_short_and_predicts_long() {
        let dir = tempfile::tempdir().unwrap();
        let mut cache = FeatureCache::create(dir.path(), 2, crate::features::FeatureDtype::F64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut make = |id: &str, t: usize| {
            let labels: Vec<Phase> = (0..t).map(|i| Phase::from_index(i * 3 / t)).collect();
            let mut data = Vec::with_capacity(t * 2);
            for p in &labels {
                data.push(p.index() as f64 + 0.1 * rng.random::<f64>());
                data.push(1.0);
            }
            FeatureEntry {
                video_id: id.into(),
                features: Tensor::from_vec([t, 2], data),
                labels,
            }
        };
        for (id, t) in [("a", 100), ("b", 90), ("c", 1000)] {
            cache.insert(&make(id, t)).unwrap();
        }
        let split = DatasetSplit {
            train: vec!["a".into()],
            val: vec!["b".into()],
            test: vec!["c".into()],
        };
        let cfg = TcnConfig {
            epochs: 3,
            dropout: 0.0,
            learning_rate: 1e-2,
            ..small(3)
        };
        let ck = train_stage2(&cache, &split, 3, &cfg).unwrap();
        assert_eq!(ck.val_history.len(), 3);
        let long = cache.load("c").unwrap();
        let pred = predict(&ck.model, &[long]).unwrap();
        assert_eq!(pred[0].labels.len(), 1000);
        assert!(pred[0].labels.iter().all(|p| p.index() < 3));

        let missing = DatasetSplit {
            train: vec!["zz".into()],
            ..split
        };
        let err = train_stage2(&cache, &missing, 3, &cfg).unwrap_err();
        assert!(err.to_string().contains("zz"), "{err}");
    }
}
