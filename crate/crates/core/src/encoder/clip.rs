//! CLIP ResNet image encoder and transformer text encoder, loaded from a
//! safetensors export of the OpenAI state dict (`visual.*` for the image
//! tower, everything else for the text tower).
//!
//! Hyperparameters are inferred from tensor shapes. Batch normalisation uses
//! the stored running statistics; its affine parameters stay trainable.
//! Prompts are encoded as `[SOT, tokens.., EOT]` with a causal mask, so the
//! sequence can be shorter than the model's context length.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EncoderMode, ImageEncoder, TextEncoder, IMAGE_PREFIX};
use crate::archive::read_tensors;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::imaging::ChannelNorm;
use crate::params::ParamStore;
use crate::tensor::Tensor;

const BN_EPS: f64 = 1e-5;
const LN_EPS: f64 = 1e-5;
/// Vocabulary size of the released BPE tokenizer.
const CLIP_VOCAB: usize = 49408;
/// Token id of `"0</w>"`; digits 1..9 follow it.
const DIGIT_TOKEN_BASE: usize = 271;
const MASKED: f64 = -1e30;

/// Architecture hyperparameters of a CLIP ResNet checkpoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipShape {
    pub vision_layers: [usize; 4],
    pub vision_width: usize,
    pub image_resolution: usize,
    pub embed_dim: usize,
    pub context_length: usize,
    pub vocab_size: usize,
    pub text_width: usize,
    pub text_layers: usize,
}

impl ClipShape {
    /// The released RN50 model.
    pub fn rn50() -> Self {
        Self {
            vision_layers: [3, 4, 6, 3],
            vision_width: 64,
            image_resolution: 224,
            embed_dim: 1024,
            context_length: 77,
            vocab_size: CLIP_VOCAB,
            text_width: 512,
            text_layers: 12,
        }
    }

    pub fn vision_heads(&self) -> usize {
        (self.vision_width * 32 / 64).max(1)
    }

    pub fn text_heads(&self) -> usize {
        (self.text_width / 64).max(1)
    }

    /// Reads the architecture off the tensor shapes of a state dict.
    pub fn infer(sd: &ParamStore, path: &Path) -> Result<Self> {
        let need = |name: &str| {
            sd.try_get(name).ok_or_else(|| {
                Error::format(
                    path,
                    format!("tensor `{name}` is missing; expected an OpenAI CLIP ResNet state dict"),
                )
            })
        };
        if sd.contains("visual.class_embedding") || sd.contains("visual.proj") {
            return Err(Error::format(
                path,
                "weights are a CLIP ViT checkpoint, not a ResNet; `clip-vit-b16` is not implemented",
            ));
        }
        let mut vision_layers = [0; 4];
        for (b, count) in vision_layers.iter_mut().enumerate() {
            let prefix = format!("visual.layer{}.", b + 1);
            let mut blocks: Vec<usize> = sd
                .iter()
                .filter_map(|(k, _)| k.strip_prefix(&prefix)?.split('.').next()?.parse().ok())
                .collect();
            blocks.sort_unstable();
            blocks.dedup();
            *count = blocks.len();
        }
        if vision_layers.contains(&0) {
            return Err(Error::format(path, "ResNet stages layer1..layer4 are incomplete"));
        }
        let vision_width = need("visual.layer1.0.conv1.weight")?.shape()[0];
        let grid = need("visual.attnpool.positional_embedding")?.shape()[0] - 1;
        let side = (grid as f64).sqrt().round() as usize;
        if side * side != grid {
            return Err(Error::format(path, "attention-pool positional embedding is not square"));
        }
        let proj = need("text_projection")?.shape().to_vec();
        let text_layers = {
            let mut ids: Vec<usize> = sd
                .iter()
                .filter_map(|(k, _)| k.strip_prefix("transformer.resblocks.")?.split('.').next()?.parse().ok())
                .collect();
            ids.sort_unstable();
            ids.dedup();
            ids.len()
        };
        let shape = Self {
            vision_layers,
            vision_width,
            image_resolution: side * 32,
            embed_dim: proj[1],
            context_length: need("positional_embedding")?.shape()[0],
            vocab_size: need("token_embedding.weight")?.shape()[0],
            text_width: need("ln_final.weight")?.shape()[0],
            text_layers,
        };
        for (name, expected) in layout(&shape) {
            let t = need(&name)?;
            if t.shape() != expected.as_slice() {
                return Err(Error::format(
                    path,
                    format!("tensor `{name}` has shape {:?}, expected {expected:?}", t.shape()),
                ));
            }
        }
        Ok(shape)
    }
}

/// Every floating-point tensor name and shape of a state dict with `shape`.
pub fn layout(shape: &ClipShape) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut push = |name: String, s: &[usize]| out.push((name, s.to_vec()));
    let bn = |push: &mut dyn FnMut(String, &[usize]), prefix: &str, c: usize| {
        for p in ["weight", "bias", "running_mean", "running_var"] {
            push(format!("{prefix}.{p}"), &[c]);
        }
    };
    let w = shape.vision_width;
    push("visual.conv1.weight".into(), &[w / 2, 3, 3, 3]);
    bn(&mut push, "visual.bn1", w / 2);
    push("visual.conv2.weight".into(), &[w / 2, w / 2, 3, 3]);
    bn(&mut push, "visual.bn2", w / 2);
    push("visual.conv3.weight".into(), &[w, w / 2, 3, 3]);
    bn(&mut push, "visual.bn3", w);
    let mut inplanes = w;
    for (l, &blocks) in shape.vision_layers.iter().enumerate() {
        let planes = w << l;
        for b in 0..blocks {
            let stride = if l > 0 && b == 0 { 2 } else { 1 };
            let p = format!("visual.layer{}.{b}", l + 1);
            push(format!("{p}.conv1.weight"), &[planes, inplanes, 1, 1]);
            bn(&mut push, &format!("{p}.bn1"), planes);
            push(format!("{p}.conv2.weight"), &[planes, planes, 3, 3]);
            bn(&mut push, &format!("{p}.bn2"), planes);
            push(format!("{p}.conv3.weight"), &[planes * 4, planes, 1, 1]);
            bn(&mut push, &format!("{p}.bn3"), planes * 4);
            if stride > 1 || inplanes != planes * 4 {
                push(format!("{p}.downsample.0.weight"), &[planes * 4, inplanes, 1, 1]);
                bn(&mut push, &format!("{p}.downsample.1"), planes * 4);
            }
            inplanes = planes * 4;
        }
    }
    let e = w * 32;
    let side = shape.image_resolution / 32;
    push("visual.attnpool.positional_embedding".into(), &[side * side + 1, e]);
    for n in ["q_proj", "k_proj", "v_proj"] {
        push(format!("visual.attnpool.{n}.weight"), &[e, e]);
        push(format!("visual.attnpool.{n}.bias"), &[e]);
    }
    push("visual.attnpool.c_proj.weight".into(), &[shape.embed_dim, e]);
    push("visual.attnpool.c_proj.bias".into(), &[shape.embed_dim]);

    let tw = shape.text_width;
    push("token_embedding.weight".into(), &[shape.vocab_size, tw]);
    push("positional_embedding".into(), &[shape.context_length, tw]);
    for i in 0..shape.text_layers {
        let p = format!("transformer.resblocks.{i}");
        push(format!("{p}.attn.in_proj_weight"), &[3 * tw, tw]);
        push(format!("{p}.attn.in_proj_bias"), &[3 * tw]);
        push(format!("{p}.attn.out_proj.weight"), &[tw, tw]);
        push(format!("{p}.attn.out_proj.bias"), &[tw]);
        push(format!("{p}.ln_1.weight"), &[tw]);
        push(format!("{p}.ln_1.bias"), &[tw]);
        push(format!("{p}.mlp.c_fc.weight"), &[4 * tw, tw]);
        push(format!("{p}.mlp.c_fc.bias"), &[4 * tw]);
        push(format!("{p}.mlp.c_proj.weight"), &[tw, 4 * tw]);
        push(format!("{p}.mlp.c_proj.bias"), &[tw]);
        push(format!("{p}.ln_2.weight"), &[tw]);
        push(format!("{p}.ln_2.bias"), &[tw]);
    }
    push("ln_final.weight".into(), &[tw]);
    push("ln_final.bias".into(), &[tw]);
    push("text_projection".into(), &[tw, shape.embed_dim]);
    out
}

/// Random weights in the OpenAI layout, for tests and benchmarks.
pub fn random_state_dict(shape: &ClipShape, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sd = ParamStore::new();
    for (name, s) in layout(shape) {
        let n: usize = s.iter().product();
        let data: Vec<f64> = if name.ends_with("running_var") {
            (0..n).map(|_| rng.random_range(0.5..1.5)).collect()
        } else if name.ends_with("ln_1.weight")
            || name.ends_with("ln_2.weight")
            || name.ends_with("ln_final.weight")
            || (name.contains(".bn") || name.contains("downsample.1")) && name.ends_with(".weight")
        {
            (0..n).map(|_| rng.random_range(0.8..1.2)).collect()
        } else {
            let fan_in = if s.len() > 1 { s[1..].iter().product::<usize>() } else { 1 };
            let std = if s.len() > 1 { (1.0 / fan_in as f64).sqrt() } else { 0.05 };
            Tensor::randn(s.clone(), std, &mut rng).into_data()
        };
        sd.insert(name, Tensor::from_vec(s, data));
    }
    sd.insert("logit_scale", Tensor::scalar((1.0f64 / 0.07).ln()));
    sd
}

/// Loads both towers from a safetensors state dict.
pub fn load(path: &Path) -> Result<(ClipImageEncoder, ClipTextEncoder)> {
    let sd = read_tensors(path)?;
    let shape = ClipShape::infer(&sd, path)?;
    if shape.vision_layers != ClipShape::rn50().vision_layers {
        log::warn!(
            "{}: ResNet stage depths {:?} differ from RN50",
            path.display(),
            shape.vision_layers
        );
    }
    Ok(from_state_dict(&sd, shape))
}

pub fn from_state_dict(sd: &ParamStore, shape: ClipShape) -> (ClipImageEncoder, ClipTextEncoder) {
    let image = ClipImageEncoder {
        shape: shape.clone(),
        mode: EncoderMode::Trainable,
        params: sd.strip_prefix("visual."),
    };
    let mut text_params = ParamStore::new();
    for (k, v) in sd.iter() {
        if !k.starts_with("visual.") && k != "logit_scale" {
            text_params.insert(k.clone(), v.clone());
        }
    }
    let emb = text_params.get("token_embedding.weight");
    let sot = Tensor::from_vec([1, shape.text_width], emb.row(shape.vocab_size - 2).to_vec());
    let eot = Tensor::from_vec([1, shape.text_width], emb.row(shape.vocab_size - 1).to_vec());
    let text = ClipTextEncoder {
        shape,
        params: text_params,
        sot,
        eot,
    };
    (image, text)
}

#[derive(Clone, Debug)]
pub struct ClipImageEncoder {
    shape: ClipShape,
    mode: EncoderMode,
    params: ParamStore,
}

struct Binder<'a> {
    params: &'a ParamStore,
    train: bool,
}

impl Binder<'_> {
    fn p(&self, g: &mut Graph, name: &str) -> Var {
        let train = self.train && !name.ends_with("running_mean") && !name.ends_with("running_var");
        g.param(&format!("{IMAGE_PREFIX}{name}"), self.params.get(name), train)
    }

    fn conv_bn(&self, g: &mut Graph, x: Var, conv: &str, bn: &str, stride: usize, pad: usize) -> Var {
        let w = self.p(g, &format!("{conv}.weight"));
        let y = g.conv2d(x, w, stride, pad);
        let gamma = self.p(g, &format!("{bn}.weight"));
        let beta = self.p(g, &format!("{bn}.bias"));
        let mean = self.params.get(&format!("{bn}.running_mean")).data();
        let var = self.params.get(&format!("{bn}.running_var")).data();
        g.batch_norm(y, gamma, beta, mean, var, BN_EPS)
    }

    fn bottleneck(&self, g: &mut Graph, x: Var, prefix: &str, stride: usize) -> Var {
        let mut out = self.conv_bn(g, x, &format!("{prefix}.conv1"), &format!("{prefix}.bn1"), 1, 0);
        out = g.relu(out);
        out = self.conv_bn(g, out, &format!("{prefix}.conv2"), &format!("{prefix}.bn2"), 1, 1);
        out = g.relu(out);
        if stride > 1 {
            out = g.avg_pool2d(out, stride);
        }
        out = self.conv_bn(g, out, &format!("{prefix}.conv3"), &format!("{prefix}.bn3"), 1, 0);
        let identity = if self.params.contains(&format!("{prefix}.downsample.0.weight")) {
            let pooled = if stride > 1 { g.avg_pool2d(x, stride) } else { x };
            self.conv_bn(
                g,
                pooled,
                &format!("{prefix}.downsample.0"),
                &format!("{prefix}.downsample.1"),
                1,
                0,
            )
        } else {
            x
        };
        let sum = g.add(out, identity);
        g.relu(sum)
    }

    /// Single-query multi-head attention over the mean token and the grid.
    fn attention_pool(&self, g: &mut Graph, x: Var, heads: usize) -> Var {
        let s = g.shape(x).to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let flat = g.reshape(x, [n, c * hw]);
        let pos = self.p(g, "attnpool.positional_embedding");
        let q_w = self.p(g, "attnpool.q_proj.weight");
        let q_b = self.p(g, "attnpool.q_proj.bias");
        let k_w = self.p(g, "attnpool.k_proj.weight");
        let k_b = self.p(g, "attnpool.k_proj.bias");
        let v_w = self.p(g, "attnpool.v_proj.weight");
        let v_b = self.p(g, "attnpool.v_proj.bias");
        let c_w = self.p(g, "attnpool.c_proj.weight");
        let c_b = self.p(g, "attnpool.c_proj.bias");
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(n);
        for b in 0..n {
            let row = g.index_rows(flat, &[b]);
            let chw = g.reshape(row, [c, hw]);
            let tokens = g.transpose(chw);
            let mean = g.mean_rows(tokens);
            let seq = g.concat0(&[mean, tokens]);
            let seq = g.add(seq, pos);
            let first = g.index_rows(seq, &[0]);
            let q = g.linear(first, q_w, Some(q_b));
            let k = g.linear(seq, k_w, Some(k_b));
            let v = g.linear(seq, v_w, Some(v_b));
            let head_out: Vec<Var> = (0..heads)
                .map(|h| {
                    let qh = g.slice_cols(q, h * dh, dh);
                    let kh = g.slice_cols(k, h * dh, dh);
                    let vh = g.slice_cols(v, h * dh, dh);
                    let sc = g.matmul_nt(qh, kh);
                    let sc = g.scale(sc, scale);
                    let att = g.softmax_rows(sc);
                    g.matmul(att, vh)
                })
                .collect();
            let joined = g.concat_cols(&head_out);
            outs.push(g.linear(joined, c_w, Some(c_b)));
        }
        g.concat0(&outs)
    }
}

impl ImageEncoder for ClipImageEncoder {
    fn name(&self) -> &str {
        "clip-resnet50"
    }

    fn output_dim(&self) -> usize {
        self.shape.embed_dim
    }

    fn input_size(&self) -> usize {
        self.shape.image_resolution
    }

    fn channel_norm(&self) -> ChannelNorm {
        ChannelNorm::CLIP
    }

    fn mode(&self) -> EncoderMode {
        self.mode
    }

    fn set_mode(&mut self, mode: EncoderMode) {
        self.mode = mode;
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn forward(&self, g: &mut Graph, images: Var, train: bool) -> Var {
        let b = Binder {
            params: &self.params,
            train: train && self.mode == EncoderMode::Trainable,
        };
        let mut x = b.conv_bn(g, images, "conv1", "bn1", 2, 1);
        x = g.relu(x);
        x = b.conv_bn(g, x, "conv2", "bn2", 1, 1);
        x = g.relu(x);
        x = b.conv_bn(g, x, "conv3", "bn3", 1, 1);
        x = g.relu(x);
        x = g.avg_pool2d(x, 2);
        for (l, &blocks) in self.shape.vision_layers.iter().enumerate() {
            for blk in 0..blocks {
                let stride = if l > 0 && blk == 0 { 2 } else { 1 };
                x = b.bottleneck(g, x, &format!("layer{}.{blk}", l + 1), stride);
            }
        }
        b.attention_pool(g, x, self.shape.vision_heads())
    }
}

#[derive(Clone, Debug)]
pub struct ClipTextEncoder {
    shape: ClipShape,
    params: ParamStore,
    sot: Tensor,
    eot: Tensor,
}

impl ClipTextEncoder {
    fn c(&self, g: &mut Graph, name: &str) -> Var {
        g.constant(self.params.get(name).clone())
    }

    fn block(&self, g: &mut Graph, x: Var, i: usize, mask: &Tensor) -> Var {
        let p = format!("transformer.resblocks.{i}");
        let tw = self.shape.text_width;
        let heads = self.shape.text_heads();
        let dh = tw / heads;

        let (g1, b1) = (self.c(g, &format!("{p}.ln_1.weight")), self.c(g, &format!("{p}.ln_1.bias")));
        let h = g.layer_norm(x, g1, b1, LN_EPS);
        let in_w = self.c(g, &format!("{p}.attn.in_proj_weight"));
        let in_b = self.c(g, &format!("{p}.attn.in_proj_bias"));
        let qkv = g.linear(h, in_w, Some(in_b));
        let head_out: Vec<Var> = (0..heads)
            .map(|hd| {
                let q = g.slice_cols(qkv, hd * dh, dh);
                let k = g.slice_cols(qkv, tw + hd * dh, dh);
                let v = g.slice_cols(qkv, 2 * tw + hd * dh, dh);
                let sc = g.matmul_nt(q, k);
                let sc = g.scale(sc, 1.0 / (dh as f64).sqrt());
                let sc = g.add_const(sc, mask);
                let att = g.softmax_rows(sc);
                g.matmul(att, v)
            })
            .collect();
        let joined = g.concat_cols(&head_out);
        let out_w = self.c(g, &format!("{p}.attn.out_proj.weight"));
        let out_b = self.c(g, &format!("{p}.attn.out_proj.bias"));
        let attn = g.linear(joined, out_w, Some(out_b));
        let x = g.add(x, attn);

        let (g2, b2) = (self.c(g, &format!("{p}.ln_2.weight")), self.c(g, &format!("{p}.ln_2.bias")));
        let h = g.layer_norm(x, g2, b2, LN_EPS);
        let fc_w = self.c(g, &format!("{p}.mlp.c_fc.weight"));
        let fc_b = self.c(g, &format!("{p}.mlp.c_fc.bias"));
        let h = g.linear(h, fc_w, Some(fc_b));
        let h = g.quick_gelu(h);
        let pr_w = self.c(g, &format!("{p}.mlp.c_proj.weight"));
        let pr_b = self.c(g, &format!("{p}.mlp.c_proj.bias"));
        let h = g.linear(h, pr_w, Some(pr_b));
        g.add(x, h)
    }

    fn encode_one(&self, g: &mut Graph, prompt: Var) -> Var {
        let len = g.shape(prompt)[0] + 2;
        assert!(
            len <= self.shape.context_length,
            "prompt of {len} tokens exceeds the text context length {}",
            self.shape.context_length
        );
        let sot = g.constant(self.sot.clone());
        let eot = g.constant(self.eot.clone());
        let seq = g.concat0(&[sot, prompt, eot]);
        let pos_all = self.params.get("positional_embedding");
        let tw = self.shape.text_width;
        let pos = Tensor::from_vec([len, tw], pos_all.data()[..len * tw].to_vec());
        let mut x = g.add_const(seq, &pos);
        let mut mask = Tensor::zeros([len, len]);
        for r in 0..len {
            for c in r + 1..len {
                mask.data_mut()[r * len + c] = MASKED;
            }
        }
        for i in 0..self.shape.text_layers {
            x = self.block(g, x, i, &mask);
        }
        let (gf, bf) = (self.c(g, "ln_final.weight"), self.c(g, "ln_final.bias"));
        let x = g.layer_norm(x, gf, bf, LN_EPS);
        let last = g.index_rows(x, &[len - 1]);
        let proj = self.c(g, "text_projection");
        g.matmul(last, proj)
    }
}

impl TextEncoder for ClipTextEncoder {
    fn name(&self) -> &str {
        "clip-resnet50"
    }

    fn output_dim(&self) -> usize {
        self.shape.embed_dim
    }

    fn token_dim(&self) -> usize {
        self.shape.text_width
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn encode_tokens(&self, g: &mut Graph, prompts: &[Var]) -> Var {
        let rows: Vec<Var> = prompts.iter().map(|&p| self.encode_one(g, p)).collect();
        g.concat0(&rows)
    }

    fn phase_token_embedding(&self, phase_id: usize) -> Option<Vec<f64>> {
        if self.shape.vocab_size != CLIP_VOCAB || !(1..=9).contains(&phase_id) {
            return None;
        }
        let emb = self.params.get("token_embedding.weight");
        Some(emb.row(DIGIT_TOKEN_BASE + phase_id).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archive::write_archive;

    fn tiny() -> ClipShape {
        ClipShape {
            vision_layers: [1, 1, 1, 1],
            vision_width: 4,
            image_resolution: 32,
            embed_dim: 12,
            context_length: 16,
            vocab_size: 20,
            text_width: 16,
            text_layers: 2,
        }
    }

    #[test]
    fn rn50_layout_has_the_published_size() {
        let n: usize = layout(&ClipShape::rn50())
            .iter()
            .filter(|(k, _)| !k.contains("running_"))
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        // 102,007,137 parameters in the released model, minus the logit scale.
        assert_eq!(n, 102_007_136);
        assert_eq!(ClipShape::rn50().vision_heads(), 32);
        assert_eq!(ClipShape::rn50().text_heads(), 8);
    }

    #[test]
    fn load_infers_shape_and_encodes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.safetensors");
        let sd = random_state_dict(&tiny(), 5);
        write_archive(&path, &sd, &serde_json::Value::Null).unwrap();
        let (img, txt) = load(&path).unwrap();
        assert_eq!(img.shape, tiny());
        assert_eq!(img.output_dim(), 12);
        assert_eq!(txt.output_dim(), 12);
        assert_eq!(txt.token_dim(), 16);
        assert!(txt.phase_token_embedding(1).is_none());

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::uniform([2, 3, 32, 32], 1.0, &mut rng);
        let f = img.encode(&x);
        assert_eq!(f.shape(), &[2, 12]);
        assert!(f.is_finite());
        let single = img.encode(&Tensor::from_vec([1, 3, 32, 32], x.data()[..3 * 32 * 32].to_vec()));
        assert!(single.max_abs_diff(&Tensor::from_vec([1, 12], f.row(0).to_vec())) < 1e-12);

        let mut g = Graph::new();
        let prompts: Vec<Var> = (0..3)
            .map(|_| g.constant(Tensor::randn([4, 16], 0.02, &mut rng)))
            .collect();
        let t = txt.encode_tokens(&mut g, &prompts);
        assert_eq!(g.shape(t), &[3, 12]);
        assert!(g.value(t).is_finite());
    }

    #[test]
    fn causal_mask_ignores_later_tokens_until_eot() {
        let sd = random_state_dict(&tiny(), 1);
        let (_, txt) = from_state_dict(&sd, tiny());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn([3, 16], 0.1, &mut rng);
        let mut g = Graph::new();
        let va = g.constant(a.clone());
        let full = txt.encode_one(&mut g, va);
        let mut b = a.clone();
        b.data_mut()[2 * 16] += 1.0;
        let vb = g.constant(b);
        let changed = txt.encode_one(&mut g, vb);
        assert!(g.value(full).max_abs_diff(g.value(changed)) > 0.0);
    }

    #[test]
    fn gradients_reach_trainable_image_parameters_only() {
        let sd = random_state_dict(&tiny(), 2);
        let (img, _) = from_state_dict(&sd, tiny());
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([1, 3, 32, 32], 0.3));
        let y = img.forward(&mut g, x, true);
        let loss = g.sum(y);
        let grads = g.backward(loss);
        let named = g.named_grads(&grads);
        assert!(named.contains_key("image.conv1.weight"));
        assert!(named.contains_key("image.bn1.weight"));
        assert!(!named.keys().any(|k| k.contains("running")));
    }

    #[test]
    fn vit_and_truncated_weights_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut sd = random_state_dict(&tiny(), 0);
        sd.insert("visual.class_embedding", Tensor::zeros([8]));
        let vit = dir.path().join("vit.safetensors");
        write_archive(&vit, &sd, &serde_json::Value::Null).unwrap();
        let err = load(&vit).unwrap_err().to_string();
        assert!(err.contains("ViT"), "{err}");

        let sd = random_state_dict(&tiny(), 0);
        let mut broken = ParamStore::new();
        for (k, v) in sd.iter().filter(|(k, _)| k.as_str() != "visual.layer2.0.conv3.weight") {
            broken.insert(k.clone(), v.clone());
        }
        let cut = dir.path().join("cut.safetensors");
        write_archive(&cut, &broken, &serde_json::Value::Null).unwrap();
        let err = load(&cut).unwrap_err().to_string();
        assert!(err.contains("visual.layer2.0.conv3.weight"), "{err}");
    }

    #[test]
    fn digit_tokens_come_from_the_embedding_table() {
        let mut shape = tiny();
        shape.vocab_size = CLIP_VOCAB;
        shape.text_width = 8;
        let mut sd = ParamStore::new();
        let emb = Tensor::from_vec(
            [CLIP_VOCAB, 8],
            (0..CLIP_VOCAB * 8).map(|i| (i / 8) as f64).collect(),
        );
        sd.insert("token_embedding.weight", emb);
        let txt = ClipTextEncoder {
            sot: Tensor::zeros([1, 8]),
            eot: Tensor::zeros([1, 8]),
            shape,
            params: sd,
        };
        assert_eq!(txt.phase_token_embedding(3).unwrap(), vec![274.0; 8]);
        assert!(txt.phase_token_embedding(10).is_none());
    }
}
