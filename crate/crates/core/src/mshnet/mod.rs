//! Plain U-Net with a multi-scale prediction head.
//!
//! The encoder has four resolution levels (`H`, `H/2`, `H/4`, `H/8`); the
//! deepest level doubles as the coarsest decoder feature. Decoder feature
//! `x_i` sits at `H / 2^(4−i)`, so `x_1` is the `H/8` map and `x_4` is full
//! size. Each `x_i` feeds a dedicated 1x1 conv + sigmoid head producing
//! `p_i`; the fused prediction `p` is a 3x3 conv + sigmoid over
//! `[up(p1, 8), up(p2, 4), up(p3, 2), p4]`.

mod checkpoint;

pub use checkpoint::{decode as decode_checkpoint, encode as encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{LossError, MultiScaleVars, SoftMask, NUM_SCALES};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("input of shape {actual:?} does not match the configured {expected:?}")]
    InputShape { expected: (usize, usize), actual: Vec<usize> },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {actual:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint checksum mismatch (truncated or corrupt file)")]
    Checksum,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint was written for a different configuration: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    /// `(height, width)`; both must be divisible by 8.
    pub input_size: (usize, usize),
    pub base_channels: usize,
    /// Channel multiplier per encoder level, full resolution first.
    pub channel_multipliers: [usize; NUM_SCALES],
    pub seed: u64,
    /// Per-channel instance normalization after every block convolution.
    pub instance_norm: bool,
    /// Initial output probability of the heads and the fused map; their
    /// biases start at `logit(output_prior)`.
    pub output_prior: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            input_size: (64, 64),
            base_channels: 8,
            channel_multipliers: [1, 2, 4, 8],
            seed: 0,
            instance_norm: true,
            output_prior: 0.01,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(ModelError::InvalidConfig(format!("input size {h}x{w} must be positive and divisible by 8")));
        }
        if self.base_channels == 0 || self.channel_multipliers.contains(&0) {
            return Err(ModelError::InvalidConfig("channel counts must be positive".into()));
        }
        if !(self.output_prior > 0.0 && self.output_prior < 1.0) {
            return Err(ModelError::InvalidConfig(format!("output_prior {} must lie in (0, 1)", self.output_prior)));
        }
        Ok(())
    }

    /// Channels at encoder level `level` (0 = full resolution).
    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    /// Channels `C_i` of decoder feature `x_i` (`i` = 1 coarsest .. 4 full size).
    pub fn scale_channels(&self, scale: usize) -> usize {
        self.level_channels(NUM_SCALES - scale)
    }

    /// Spatial size `(H_i, W_i)` of scale `i`.
    pub fn scale_size(&self, scale: usize) -> (usize, usize) {
        let f = 1 << (NUM_SCALES - scale);
        (self.input_size.0 / f, self.input_size.1 / f)
    }

    /// Every convolution as `(name, in_channels, out_channels, kernel)`.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let c = |l| self.level_channels(l);
        let mut v = Vec::new();
        let mut layer = |name: String, cin, cout, kernel| {
            v.push(LayerSpec {
                name,
                in_channels: cin,
                out_channels: cout,
                kernel,
            })
        };
        for level in 0..NUM_SCALES {
            let cin = if level == 0 { 1 } else { c(level - 1) };
            layer(format!("enc{level}.conv1"), cin, c(level), 3);
            layer(format!("enc{level}.conv2"), c(level), c(level), 3);
        }
        for level in (0..NUM_SCALES - 1).rev() {
            layer(format!("dec{level}.conv1"), c(level + 1) + c(level), c(level), 3);
            layer(format!("dec{level}.conv2"), c(level), c(level), 3);
        }
        for scale in 1..=NUM_SCALES {
            layer(format!("head{scale}"), self.scale_channels(scale), 1, 1);
        }
        layer("fuse".into(), NUM_SCALES, 1, 3);
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().iter().map(LayerSpec::parameter_count).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl LayerSpec {
    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn parameter_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }
}

/// Named parameter tensors, `<layer>.weight` and `<layer>.bias`.
pub type ModelParams = BTreeMap<String, Tensor>;

/// Value-level outputs of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleOutputs {
    /// `p_1 .. p_4`, coarsest first.
    pub heads: [SoftMask; NUM_SCALES],
    pub fused: SoftMask,
}

impl MultiScaleOutputs {
    /// `[p1, p2, p3, p4, p]`.
    pub fn to_vec(&self) -> Vec<SoftMask> {
        self.heads.iter().cloned().chain(std::iter::once(self.fused.clone())).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MshNet {
    config: UNetConfig,
    params: ModelParams,
}

impl MshNet {
    /// He-initialized network (normal weights with std `sqrt(2 / fan_in)`),
    /// deterministic in `config.seed`. Block biases start at zero and output
    /// biases at `logit(output_prior)`.
    pub fn build(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ModelParams::new();
        let prior = config.output_prior;
        let output_bias = (prior / (1.0 - prior)).ln();
        for layer in config.layers() {
            let fan_in = (layer.in_channels * layer.kernel * layer.kernel) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            let shape = layer.weight_shape();
            let weight = Tensor::from_fn(&shape, |_| normal.sample(&mut rng));
            params.insert(format!("{}.weight", layer.name), weight);
            let is_output = layer.name.starts_with("head") || layer.name == "fuse";
            let bias = if is_output { output_bias } else { 0.0 };
            params.insert(format!("{}.bias", layer.name), Tensor::full(&[layer.out_channels], bias));
        }
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking every expected tensor.
    pub fn from_params(config: UNetConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        for layer in config.layers() {
            for (suffix, shape) in [("weight", layer.weight_shape()), ("bias", vec![layer.out_channels])] {
                let name = format!("{}.{suffix}", layer.name);
                let t = params.get(&name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
                if t.shape() != shape.as_slice() {
                    return Err(ModelError::ParamShape {
                        name,
                        expected: shape,
                        actual: t.shape().to_vec(),
                    });
                }
            }
        }
        if params.len() != 2 * config.layers().len() {
            return Err(ModelError::InvalidConfig("unexpected extra parameters".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Registers every parameter on `tape`, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        BoundParams(
            self.params
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
                .collect(),
        )
    }

    fn conv(&self, tape: &mut Tape, p: &BoundParams, layer: &str, x: Var, padding: usize) -> Result<Var> {
        let w = p.get(&format!("{layer}.weight"))?;
        let b = p.get(&format!("{layer}.bias"))?;
        Ok(tape.conv2d(x, w, Some(b), 1, padding)?)
    }

    fn block(&self, tape: &mut Tape, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
        let mut h = x;
        for conv in ["conv1", "conv2"] {
            h = self.conv(tape, p, &format!("{name}.{conv}"), h, 1)?;
            if self.config.instance_norm {
                h = tape.instance_norm(h)?;
            }
            h = tape.relu(h)?;
        }
        Ok(h)
    }

    /// Records a forward pass of a `1 x 1 x H x W` (or `H x W`) image.
    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, image: &Tensor) -> Result<MultiScaleVars> {
        let (h, w) = self.config.input_size;
        let ok = match image.shape() {
            [1, 1, ih, iw] | [ih, iw] => (*ih, *iw) == (h, w),
            _ => false,
        };
        if !ok {
            return Err(ModelError::InputShape {
                expected: (h, w),
                actual: image.shape().to_vec(),
            });
        }
        let x = tape.constant(image.clone().reshape(&[1, 1, h, w])?);

        let mut skips = Vec::with_capacity(NUM_SCALES);
        let mut feat = x;
        for level in 0..NUM_SCALES {
            if level > 0 {
                feat = tape.max_pool2d(feat, 2)?;
            }
            feat = self.block(tape, p, &format!("enc{level}"), feat)?;
            skips.push(feat);
        }

        // decoder[i - 1] is x_i
        let mut decoder = vec![feat];
        for level in (0..NUM_SCALES - 1).rev() {
            let up = tape.upsample_bilinear(feat, 2)?;
            let cat = tape.concat_channels(&[up, skips[level]])?;
            feat = self.block(tape, p, &format!("dec{level}"), cat)?;
            decoder.push(feat);
        }

        let mut heads = [x; NUM_SCALES];
        let mut upsampled = Vec::with_capacity(NUM_SCALES);
        for scale in 1..=NUM_SCALES {
            let logits = self.conv(tape, p, &format!("head{scale}"), decoder[scale - 1], 0)?;
            heads[scale - 1] = tape.sigmoid(logits)?;
            upsampled.push(tape.upsample_bilinear(heads[scale - 1], 1 << (NUM_SCALES - scale))?);
        }
        let cat = tape.concat_channels(&upsampled)?;
        let logits = self.conv(tape, p, "fuse", cat, 1)?;
        let fused = tape.sigmoid(logits)?;
        Ok(MultiScaleVars { heads, fused })
    }

    /// Inference without gradient tracking.
    pub fn predict(&self, image: &Tensor) -> Result<MultiScaleOutputs> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &p, image)?;
        let mask = |v: Var| -> Result<SoftMask> {
            let t = tape.value(v);
            let (h, w) = t.spatial().expect("4-d output");
            Ok(SoftMask::new(t.clone().reshape(&[h, w])?)?)
        };
        Ok(MultiScaleOutputs {
            heads: [mask(out.heads[0])?, mask(out.heads[1])?, mask(out.heads[2])?, mask(out.heads[3])?],
            fused: mask(out.fused)?,
        })
    }
}

/// Parameters registered on a tape, by name.
#[derive(Debug, Clone)]
pub struct BoundParams(BTreeMap<String, Var>);

impl BoundParams {
    /// Binds parameters already placed on a tape, keyed by parameter name.
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Self(vars)
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.0.get(name).copied().ok_or_else(|| ModelError::MissingParam(name.into()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.0.iter()
    }
}
