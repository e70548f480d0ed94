//! Small CPU encoder pair: a strided convolutional image encoder and a fixed
//! random linear text encoder over the mean prompt token.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EncoderMode, ImageEncoder, TextEncoder, IMAGE_PREFIX};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::imaging::ChannelNorm;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub input_size: usize,
    /// Output channels of each stride-2 3x3 convolution.
    pub channels: Vec<usize>,
    pub feature_dim: usize,
    pub token_dim: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            channels: vec![16, 32, 64],
            feature_dim: 64,
            token_dim: 32,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("toy encoder needs a positive input size and channel widths".into()));
        }
        if self.feature_dim == 0 || self.token_dim == 0 {
            return Err(Error::Config("toy encoder dimensions must be positive".into()));
        }
        Ok(())
    }
}

pub fn build(cfg: &ToyConfig) -> Result<(ToyImageEncoder, ToyTextEncoder)> {
    Ok((ToyImageEncoder::new(cfg)?, ToyTextEncoder::new(cfg)?))
}

#[derive(Clone, Debug)]
pub struct ToyImageEncoder {
    cfg: ToyConfig,
    mode: EncoderMode,
    params: ParamStore,
}

impl ToyImageEncoder {
    pub fn new(cfg: &ToyConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamStore::new();
        let mut cin = 3;
        for (i, &cout) in cfg.channels.iter().enumerate() {
            let fan_in = (cin * 9) as f64;
            params.insert(
                format!("conv{i}.weight"),
                Tensor::randn([cout, cin, 3, 3], (2.0 / fan_in).sqrt(), &mut rng),
            );
            params.insert(format!("conv{i}.bias"), Tensor::zeros([cout]));
            cin = cout;
        }
        params.insert(
            "proj.weight",
            Tensor::randn([cfg.feature_dim, cin], (1.0 / cin as f64).sqrt(), &mut rng),
        );
        params.insert("proj.bias", Tensor::zeros([cfg.feature_dim]));
        Ok(Self {
            cfg: cfg.clone(),
            mode: EncoderMode::Trainable,
            params,
        })
    }
}

impl ImageEncoder for ToyImageEncoder {
    fn name(&self) -> &str {
        "toy"
    }

    fn output_dim(&self) -> usize {
        self.cfg.feature_dim
    }

    fn input_size(&self) -> usize {
        self.cfg.input_size
    }

    fn channel_norm(&self) -> ChannelNorm {
        ChannelNorm::IDENTITY
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
        let t = train && self.mode == EncoderMode::Trainable;
        let bind = |g: &mut Graph, name: &str| {
            g.param(&format!("{IMAGE_PREFIX}{name}"), self.params.get(name), t)
        };
        let mut x = images;
        for i in 0..self.cfg.channels.len() {
            let w = bind(g, &format!("conv{i}.weight"));
            let b = bind(g, &format!("conv{i}.bias"));
            x = g.conv2d(x, w, 2, 1);
            x = g.add_channel_bias(x, b);
            x = g.relu(x);
        }
        let pooled = g.spatial_mean(x);
        let w = bind(g, "proj.weight");
        let b = bind(g, "proj.bias");
        g.linear(pooled, w, Some(b))
    }
}

/// `txt_p = W * mean(tokens_p)` with a fixed Gaussian `W`.
#[derive(Clone, Debug)]
pub struct ToyTextEncoder {
    feature_dim: usize,
    token_dim: usize,
    params: ParamStore,
}

impl ToyTextEncoder {
    pub fn new(cfg: &ToyConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7e47_0000_0000_0001);
        let mut params = ParamStore::new();
        params.insert(
            "proj",
            Tensor::randn(
                [cfg.feature_dim, cfg.token_dim],
                (1.0 / cfg.token_dim as f64).sqrt(),
                &mut rng,
            ),
        );
        Ok(Self {
            feature_dim: cfg.feature_dim,
            token_dim: cfg.token_dim,
            params,
        })
    }
}

impl TextEncoder for ToyTextEncoder {
    fn name(&self) -> &str {
        "toy"
    }

    fn output_dim(&self) -> usize {
        self.feature_dim
    }

    fn token_dim(&self) -> usize {
        self.token_dim
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn encode_tokens(&self, g: &mut Graph, prompts: &[Var]) -> Var {
        let means: Vec<Var> = prompts.iter().map(|&p| g.mean_rows(p)).collect();
        let stacked = g.concat0(&means);
        let w = g.constant(self.params.get("proj").clone());
        g.matmul_nt(stacked, w)
    }
}
