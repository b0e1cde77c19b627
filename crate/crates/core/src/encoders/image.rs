use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv2d, Linear, Mode};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEncoderConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels of each `conv → BN → ReLU → max-pool` block.
    pub block_channels: Vec<usize>,
    pub kernel: usize,
    pub d_img: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            height: 32,
            width: 32,
            block_channels: vec![16, 32, 64],
            kernel: 3,
            d_img: 128,
        }
    }
}

/// Small CNN producing `f_I`: conv blocks, global average pooling, then a
/// linear projection to `d_img`.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub config: ImageEncoderConfig,
    pub blocks: Vec<(Conv2d, BatchNorm)>,
    pub projection: Linear,
}

impl ImageEncoder {
    pub fn new<R: Rng>(config: ImageEncoderConfig, ps: &mut ParamStore, rng: &mut R) -> Result<Self> {
        if config.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel size must be odd, got {}", config.kernel)));
        }
        if config.block_channels.is_empty() || config.block_channels.contains(&0) || config.d_img == 0 {
            return Err(Error::Config(format!("invalid image encoder widths: {config:?}")));
        }
        let depth = config.block_channels.len() as u32;
        if config.height >> depth == 0 || config.width >> depth == 0 {
            return Err(Error::Config(format!(
                "{}×{} input cannot be pooled {depth} times",
                config.height, config.width
            )));
        }
        let mut blocks = Vec::new();
        let mut c_in = config.channels;
        for (i, &c_out) in config.block_channels.iter().enumerate() {
            let conv = Conv2d::new(ps, &format!("image.block{i}.conv"), c_in, c_out, config.kernel, rng);
            ps.mark_before_norm(conv.bias);
            let bn = BatchNorm::new(ps, &format!("image.block{i}.bn"), c_out);
            blocks.push((conv, bn));
            c_in = c_out;
        }
        let projection = Linear::new(ps, "image.projection", c_in, config.d_img, rng);
        Ok(Self {
            config,
            blocks,
            projection,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.config.d_img
    }

    /// `B×C×H×W → B×D_I`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let c = &self.config;
        match *g.shape(x) {
            [_, ch, h, w] if ch == c.channels && h == c.height && w == c.width => {}
            _ => {
                return Err(Error::dim(
                    "encode_image",
                    format!(
                        "input {:?} does not match configured {}×{}×{}",
                        g.shape(x),
                        c.channels,
                        c.height,
                        c.width
                    ),
                ))
            }
        }
        let mut h = x;
        for (conv, bn) in &self.blocks {
            h = conv.forward(g, ps, h)?;
            h = bn.forward(g, ps, h, mode)?;
            h = g.relu(h);
            h = g.max_pool2(h)?;
        }
        let pooled = g.global_avg_pool(h)?;
        self.projection.forward(g, ps, pooled)
    }
}
