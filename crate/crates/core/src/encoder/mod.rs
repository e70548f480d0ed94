//! Image and text encoders and the logit head that scores one image feature
//! against the text features of all P phase prompts.

pub mod clip;
pub mod toy;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::imaging::ChannelNorm;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub use clip::{ClipImageEncoder, ClipShape, ClipTextEncoder};
pub use toy::{ToyConfig, ToyImageEncoder, ToyTextEncoder};

/// Graph name prefix of image-encoder parameters.
pub const IMAGE_PREFIX: &str = "image.";
/// Graph name of the logit-scale parameter.
pub const LOGIT_SCALE_PARAM: &str = "head.logit_scale";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderMode {
    Trainable,
    Frozen,
}

pub trait ImageEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn output_dim(&self) -> usize;
    /// Side length of the square input.
    fn input_size(&self) -> usize;
    fn channel_norm(&self) -> ChannelNorm;
    fn mode(&self) -> EncoderMode;
    fn set_mode(&mut self, mode: EncoderMode);
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;

    /// Maps `[B, 3, S, S]` images to `[B, d]` features. Parameters are bound
    /// under [`IMAGE_PREFIX`]; they receive gradients only when `train` is set
    /// and the encoder is trainable.
    fn forward(&self, g: &mut Graph, images: Var, train: bool) -> Var;

    /// Evaluation-mode encoding outside of any training graph.
    fn encode(&self, images: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let y = self.forward(&mut g, x, false);
        g.value(y).clone()
    }

    /// Replaces the parameters, checking that names and shapes match.
    fn load_params(&mut self, params: ParamStore) -> Result<()> {
        check_same_layout(self.params(), &params)?;
        *self.params_mut() = params;
        Ok(())
    }
}

/// A text encoder is frozen by construction: there is no mutable access to
/// its parameters.
pub trait TextEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn output_dim(&self) -> usize;
    /// Width of one input token embedding.
    fn token_dim(&self) -> usize;
    fn params(&self) -> &ParamStore;

    /// Maps P prompt sequences (each `[L, token_dim]`) to `[P, d]`.
    fn encode_tokens(&self, g: &mut Graph, prompts: &[Var]) -> Var;

    /// Embedding of the phase number written as text, for prompt
    /// initialisation. `None` when no tokenizer is available.
    fn phase_token_embedding(&self, _phase_id: usize) -> Option<Vec<f64>> {
        None
    }
}

fn check_same_layout(have: &ParamStore, new: &ParamStore) -> Result<()> {
    if have.len() != new.len() {
        return Err(Error::Config(format!(
            "encoder expects {} tensors, got {}",
            have.len(),
            new.len()
        )));
    }
    for (name, t) in have.iter() {
        match new.try_get(name) {
            Some(n) if n.shape() == t.shape() => {}
            Some(n) => {
                return Err(Error::Config(format!(
                    "encoder tensor `{name}` has shape {:?}, expected {:?}",
                    n.shape(),
                    t.shape()
                )))
            }
            None => return Err(Error::Config(format!("encoder tensor `{name}` is missing"))),
        }
    }
    Ok(())
}

/// Largest permitted logit scale, `ln 100`.
pub const MAX_LOGIT_SCALE: f64 = 4.605170185988092;

/// `logits[b][p] = exp(logit_scale) * <img_b, txt_p>`, with both feature sets
/// optionally L2-normalised first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogitHead {
    pub normalize: bool,
    /// Log of the multiplier applied to the inner products.
    pub logit_scale: f64,
    pub learnable: bool,
}

impl Default for LogitHead {
    fn default() -> Self {
        Self {
            normalize: true,
            logit_scale: (1.0f64 / 0.07).ln(),
            learnable: true,
        }
    }
}

const NORM_EPS: f64 = 1e-12;

impl LogitHead {
    pub fn scale(&self) -> f64 {
        self.logit_scale.exp()
    }

    pub fn clamp(&mut self) {
        self.logit_scale = self.logit_scale.min(MAX_LOGIT_SCALE);
    }

    /// `[B, d] x [P, d] -> [B, P]`.
    pub fn forward(&self, g: &mut Graph, image: Var, text: Var, train: bool) -> Result<Var> {
        let (si, st) = (g.shape(image).to_vec(), g.shape(text).to_vec());
        if si.len() != 2 || st.len() != 2 || si[1] != st[1] {
            return Err(Error::Invalid(format!(
                "feature dimension mismatch: image features {si:?}, text features {st:?}"
            )));
        }
        let (img, txt) = if self.normalize {
            (
                g.l2_normalize_rows(image, NORM_EPS),
                g.l2_normalize_rows(text, NORM_EPS),
            )
        } else {
            (image, text)
        };
        let sim = g.matmul_nt(img, txt);
        let s = g.param(LOGIT_SCALE_PARAM, &Tensor::scalar(self.logit_scale), train && self.learnable);
        let s = g.exp(s);
        Ok(g.mul_scalar(sim, s))
    }
}

/// Logits for fixed feature matrices.
pub fn compute_logits(image: &Tensor, text: &Tensor, head: &LogitHead) -> Result<Tensor> {
    let mut g = Graph::new();
    let i = g.constant(image.clone());
    let t = g.constant(text.clone());
    let y = head.forward(&mut g, i, t, false)?;
    Ok(g.value(y).clone())
}

/// Which encoder pair to build and where its weights live.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneSpec {
    pub name: String,
    pub weights: Option<PathBuf>,
    pub toy: ToyConfig,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            name: "toy".into(),
            weights: None,
            toy: ToyConfig::default(),
        }
    }
}

pub struct EncoderPair {
    pub image: Box<dyn ImageEncoder>,
    pub text: Box<dyn TextEncoder>,
}

impl std::fmt::Debug for EncoderPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EncoderPair")
            .field("image", &self.image.name())
            .field("text", &self.text.name())
            .field("dim", &self.image.output_dim())
            .finish()
    }
}

/// Builds the encoder pair registered under `spec.name`.
///
/// | name            | weights                                   |
/// |-----------------|-------------------------------------------|
/// | `toy`           | none, initialised from `spec.toy.seed`    |
/// | `clip-resnet50` | safetensors export of the OpenAI RN50 model |
/// | `clip-vit-b16`  | recognised but not implemented            |
pub fn attach_backbone(spec: &BackboneSpec) -> Result<EncoderPair> {
    match spec.name.as_str() {
        "toy" => {
            let (image, text) = toy::build(&spec.toy)?;
            Ok(EncoderPair {
                image: Box::new(image),
                text: Box::new(text),
            })
        }
        "clip-resnet50" => {
            let path = spec.weights.as_deref().ok_or_else(|| {
                Error::Config("backbone clip-resnet50 needs `weights` pointing at a safetensors file".into())
            })?;
            let (image, text) = clip::load(path)?;
            Ok(EncoderPair {
                image: Box::new(image),
                text: Box::new(text),
            })
        }
        "clip-vit-b16" => Err(Error::NotImplemented(spec.name.clone())),
        other => Err(Error::UnsupportedBackbone(other.to_string())),
    }
}
