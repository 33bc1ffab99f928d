//! Time-conditioned networks: the noise predictor, the regression encoder
//! and the segmentation U-Net.
//!
//! All three share one backbone layout. The input passes a 3x3 stem, then
//! one residual block per resolution with a stride-2 convolution between
//! resolutions, then a middle block. The U-Nets mirror this path with skip
//! concatenation and nearest upsampling; the regression encoder instead
//! pools the middle features into a scalar head. Every residual block adds
//! a projection of the time embedding to its feature maps. Output layers
//! start at zero, so a fresh network predicts zeros (noise, scalar) or
//! logits of zero (probability 0.5).

mod layers;

pub use layers::{sinusoidal_features, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffnum::{Array, DiffError, Scalar, Tape, Var};
use layers::{AttnBlock, Conv, Init, Linear, Norm, ResBlock, TimeEmbedding};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error(
        "input shape {got:?} does not match network (expected [n, {channels}, {size}, {size}])"
    )]
    InputShape {
        got: Vec<usize>,
        channels: usize,
        size: usize,
    },
    #[error("{expected} timesteps required, got {got}")]
    Timesteps { expected: usize, got: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

pub type Result<T, E = NetworkError> = std::result::Result<T, E>;

/// Layout shared by all three architectures.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Output channels of the U-Nets; the regression encoder requires 1.
    pub out_channels: usize,
    pub base_channels: usize,
    /// Channel multiplier per resolution; its length is the depth.
    pub channel_mult: Vec<usize>,
    /// Self-attention after the residual block of each resolution.
    pub attention: Vec<bool>,
    pub groups: usize,
    /// Spatial extent of the square inputs.
    pub image_size: usize,
}

impl UNetConfig {
    /// Desk-scale noise predictor: 32x32 grey images, three resolutions.
    pub fn desk(image_size: usize) -> Self {
        Self {
            in_channels: 1,
            out_channels: 1,
            base_channels: 32,
            channel_mult: vec![1, 2, 4],
            attention: vec![false; 3],
            groups: 8,
            image_size,
        }
    }

    pub fn depth(&self) -> usize {
        self.channel_mult.len()
    }

    pub fn time_dim(&self) -> usize {
        4 * self.base_channels
    }

    fn channels(&self) -> Vec<usize> {
        self.channel_mult
            .iter()
            .map(|m| m * self.base_channels)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(NetworkError::Config(m));
        if self.depth() < 2 {
            return fail(format!("depth must be at least 2, got {}", self.depth()));
        }
        if self.attention.len() != self.depth() {
            return fail(format!(
                "attention has {} entries for depth {}",
                self.attention.len(),
                self.depth()
            ));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.base_channels == 0 {
            return fail("channel counts must be positive".into());
        }
        if !self.base_channels.is_multiple_of(2) {
            return fail("base_channels must be even (sinusoidal embedding)".into());
        }
        let factor = 1 << (self.depth() - 1);
        if self.image_size == 0 || !self.image_size.is_multiple_of(factor) {
            return fail(format!(
                "image size {} not divisible by 2^(depth-1) = {factor}",
                self.image_size
            ));
        }
        if self.groups == 0 {
            return fail("groups must be positive".into());
        }
        let chs = self.channels();
        if chs.iter().any(|&c| c == 0 || c % self.groups != 0) {
            return fail(format!(
                "channels {chs:?} not divisible into {} groups",
                self.groups
            ));
        }
        Ok(())
    }
}

/// Kind and layout of a network, as recorded in checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "lowercase")]
pub enum NetworkSpec {
    Epsilon(UNetConfig),
    Regression(UNetConfig),
    Segmentation(UNetConfig),
}

impl NetworkSpec {
    pub fn config(&self) -> &UNetConfig {
        match self {
            NetworkSpec::Epsilon(c) | NetworkSpec::Regression(c) | NetworkSpec::Segmentation(c) => {
                c
            }
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            NetworkSpec::Epsilon(_) => "epsilon",
            NetworkSpec::Regression(_) => "regression",
            NetworkSpec::Segmentation(_) => "segmentation",
        }
    }

    /// Parameter names and shapes a network of this spec owns.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let store = match self {
            NetworkSpec::Epsilon(c) => EpsilonModel::<f32>::new(c.clone(), 0)?.params,
            NetworkSpec::Regression(c) => RegModel::<f32>::new(c.clone(), 0)?.params,
            NetworkSpec::Segmentation(c) => SegModel::<f32>::new(c.clone(), 0)?.params,
        };
        Ok(store
            .iter()
            .map(|(n, a)| (n.to_string(), a.shape().to_vec()))
            .collect())
    }
}

/// Anything with a parameter collection, trainable by [`crate::diffusion::fit`].
pub trait Network<F: Scalar> {
    fn params(&self) -> &ParamStore<F>;
    fn params_mut(&mut self) -> &mut ParamStore<F>;
    /// Layout to record in checkpoints, if the network has one.
    fn spec(&self) -> Option<NetworkSpec> {
        None
    }
}

#[derive(Debug, Clone)]
struct Level {
    block: ResBlock,
    attn: Option<AttnBlock>,
    resample: Option<Conv>,
}

/// Stem, downsampling path and middle block.
#[derive(Debug, Clone)]
struct Encoder {
    time: TimeEmbedding,
    stem: Conv,
    down: Vec<Level>,
    mid: ResBlock,
    mid_attn: Option<AttnBlock>,
}

struct Encoded<'t, F> {
    h: Var<'t, F>,
    skips: Vec<Var<'t, F>>,
    temb: Var<'t, F>,
}

impl Encoder {
    fn new<F: Scalar>(init: &mut Init<'_, F>, cfg: &UNetConfig) -> Self {
        let tdim = cfg.time_dim();
        let time = TimeEmbedding::new(init, cfg.base_channels, tdim);
        let stem = init.conv("stem", cfg.in_channels, cfg.base_channels, 3, 1, false);
        let chs = cfg.channels();
        let mut c = cfg.base_channels;
        let mut down = Vec::new();
        for (i, &ch) in chs.iter().enumerate() {
            let block = ResBlock::new(init, &format!("down.{i}.res"), c, ch, tdim, cfg.groups);
            let attn = cfg.attention[i]
                .then(|| AttnBlock::new(init, &format!("down.{i}.attn"), ch, cfg.groups));
            let resample = (i + 1 < chs.len())
                .then(|| init.conv(&format!("down.{i}.downsample"), ch, ch, 3, 2, false));
            down.push(Level {
                block,
                attn,
                resample,
            });
            c = ch;
        }
        let mid = ResBlock::new(init, "mid.res", c, c, tdim, cfg.groups);
        let mid_attn =
            cfg.attention[chs.len() - 1].then(|| AttnBlock::new(init, "mid.attn", c, cfg.groups));
        Self {
            time,
            stem,
            down,
            mid,
            mid_attn,
        }
    }

    fn forward<'t, F: Scalar>(
        &self,
        p: &[Var<'t, F>],
        x: Var<'t, F>,
        t: &[usize],
    ) -> Result<Encoded<'t, F>> {
        let temb = self.time.forward(p, x.tape(), t)?.silu()?;
        let mut h = self.stem.forward(p, x)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for level in &self.down {
            h = level.block.forward(p, h, temb)?;
            if let Some(a) = &level.attn {
                h = a.forward(p, h)?;
            }
            skips.push(h);
            if let Some(r) = &level.resample {
                h = r.forward(p, h)?;
            }
        }
        h = self.mid.forward(p, h, temb)?;
        if let Some(a) = &self.mid_attn {
            h = a.forward(p, h)?;
        }
        Ok(Encoded { h, skips, temb })
    }
}

/// Encoder plus mirrored upsampling path.
#[derive(Debug, Clone)]
struct UNet {
    encoder: Encoder,
    up: Vec<Level>,
    out_norm: Norm,
    out_conv: Conv,
}

impl UNet {
    fn new<F: Scalar>(init: &mut Init<'_, F>, cfg: &UNetConfig) -> Self {
        let encoder = Encoder::new(init, cfg);
        let tdim = cfg.time_dim();
        let chs = cfg.channels();
        let mut c = *chs.last().expect("validated depth");
        let mut up = Vec::new();
        for (i, &ch) in chs.iter().enumerate().rev() {
            let block = ResBlock::new(init, &format!("up.{i}.res"), c + ch, ch, tdim, cfg.groups);
            let attn = cfg.attention[i]
                .then(|| AttnBlock::new(init, &format!("up.{i}.attn"), ch, cfg.groups));
            let resample =
                (i > 0).then(|| init.conv(&format!("up.{i}.upsample"), ch, ch, 3, 1, false));
            up.push(Level {
                block,
                attn,
                resample,
            });
            c = ch;
        }
        let out_norm = init.norm("out.norm", c, cfg.groups);
        let out_conv = init.conv("out.conv", c, cfg.out_channels, 3, 1, true);
        Self {
            encoder,
            up,
            out_norm,
            out_conv,
        }
    }

    fn forward<'t, F: Scalar>(
        &self,
        p: &[Var<'t, F>],
        x: Var<'t, F>,
        t: &[usize],
    ) -> Result<Var<'t, F>> {
        let Encoded {
            mut h,
            mut skips,
            temb,
        } = self.encoder.forward(p, x, t)?;
        for level in &self.up {
            let skip = skips.pop().expect("one skip per level");
            h = level.block.forward(p, h.concat_channels(skip)?, temb)?;
            if let Some(a) = &level.attn {
                h = a.forward(p, h)?;
            }
            if let Some(r) = &level.resample {
                h = r.forward(p, h.upsample2x()?)?;
            }
        }
        Ok(self
            .out_conv
            .forward(p, self.out_norm.forward(p, h)?.silu()?)?)
    }
}

fn check_input<F: Scalar>(cfg: &UNetConfig, x: &Array<F>, t: &[usize]) -> Result<()> {
    let shape = x.shape();
    if shape.len() != 4
        || shape[1] != cfg.in_channels
        || shape[2] != cfg.image_size
        || shape[3] != cfg.image_size
    {
        return Err(NetworkError::InputShape {
            got: shape.to_vec(),
            channels: cfg.in_channels,
            size: cfg.image_size,
        });
    }
    if t.len() != shape[0] {
        return Err(NetworkError::Timesteps {
            expected: shape[0],
            got: t.len(),
        });
    }
    Ok(())
}

fn initialize<F: Scalar, T>(
    cfg: &UNetConfig,
    seed: u64,
    build: impl FnOnce(&mut Init<'_, F>) -> T,
) -> (T, ParamStore<F>) {
    let mut params = ParamStore::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = build(&mut Init {
        store: &mut params,
        rng: &mut rng,
    });
    debug_assert!(cfg.validate().is_ok());
    (net, params)
}

/// The noise predictor: same output shape as its input.
#[derive(Debug, Clone)]
pub struct EpsilonModel<F> {
    config: UNetConfig,
    net: UNet,
    params: ParamStore<F>,
}

impl<F: Scalar> EpsilonModel<F> {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.out_channels != config.in_channels {
            return Err(NetworkError::Config(format!(
                "noise predictor needs out_channels == in_channels ({} != {})",
                config.out_channels, config.in_channels
            )));
        }
        let (net, params) = initialize(&config, seed, |init| UNet::new(init, &config));
        Ok(Self {
            config,
            net,
            params,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn forward<'t>(&self, p: &[Var<'t, F>], x: Var<'t, F>, t: &[usize]) -> Result<Var<'t, F>> {
        check_input(&self.config, &x.value(), t)?;
        self.net.forward(p, x, t)
    }

    /// Predicted noise for a batch at per-item timesteps.
    pub fn predict(&self, x: &Array<F>, t: &[usize]) -> Result<Array<F>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let out = self.forward(&p, tape.constant(x.clone()), t)?;
        let v = out.value().clone();
        Ok(v)
    }
}

/// Scalar regressor built on the encoder path.
#[derive(Debug, Clone)]
pub struct RegModel<F> {
    config: UNetConfig,
    encoder: Encoder,
    norm: Norm,
    head: Linear,
    params: ParamStore<F>,
}

impl<F: Scalar> RegModel<F> {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.out_channels != 1 {
            return Err(NetworkError::Config(
                "regression head has exactly one output".into(),
            ));
        }
        let c = *config.channels().last().expect("validated depth");
        let ((encoder, norm, head), params) = initialize(&config, seed, |init| {
            let encoder = Encoder::new(init, &config);
            let norm = init.norm("head.norm", c, config.groups);
            let head = init.linear("head.linear", c, 1, true);
            (encoder, norm, head)
        });
        Ok(Self {
            config,
            encoder,
            norm,
            head,
            params,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// One unbounded scalar per batch item, shape `[n]`.
    pub fn forward<'t>(&self, p: &[Var<'t, F>], x: Var<'t, F>, t: &[usize]) -> Result<Var<'t, F>> {
        check_input(&self.config, &x.value(), t)?;
        let enc = self.encoder.forward(p, x, t)?;
        let pooled = self.norm.forward(p, enc.h)?.silu()?.mean_spatial()?;
        Ok(self.head.forward(p, pooled)?.reshape(&[t.len()])?)
    }

    pub fn predict(&self, x: &Array<F>, t: &[usize]) -> Result<Vec<F>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let out = self.forward(&p, tape.constant(x.clone()), t)?;
        let v = out.value().data().to_vec();
        Ok(v)
    }

    /// Predictions and the gradient of their sum with respect to `x`,
    /// which is each item's own input gradient.
    pub fn value_and_input_grad(&self, x: &Array<F>, t: &[usize]) -> Result<(Vec<F>, Array<F>)> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let xv = tape.leaf(x.clone());
        let out = self.forward(&p, xv, t)?;
        let values = out.value().data().to_vec();
        let mut grads = tape.backward(out.sum()?)?;
        Ok((values, grads.take(xv)))
    }
}

/// Binary segmentation U-Net; `forward` returns logits.
#[derive(Debug, Clone)]
pub struct SegModel<F> {
    config: UNetConfig,
    net: UNet,
    params: ParamStore<F>,
}

impl<F: Scalar> SegModel<F> {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.out_channels != 1 {
            return Err(NetworkError::Config(
                "segmentation output is one probability channel".into(),
            ));
        }
        let (net, params) = initialize(&config, seed, |init| UNet::new(init, &config));
        Ok(Self {
            config,
            net,
            params,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Logits, shape `[n, 1, h, w]`.
    pub fn forward<'t>(&self, p: &[Var<'t, F>], x: Var<'t, F>, t: &[usize]) -> Result<Var<'t, F>> {
        check_input(&self.config, &x.value(), t)?;
        self.net.forward(p, x, t)
    }

    /// Per-pixel probabilities in (0, 1).
    pub fn predict(&self, x: &Array<F>, t: &[usize]) -> Result<Array<F>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let out = self.forward(&p, tape.constant(x.clone()), t)?.sigmoid()?;
        let v = out.value().clone();
        Ok(v)
    }

    /// Per-item mean binary cross-entropy against `mask` and its input
    /// gradient.
    pub fn bce_and_input_grad(
        &self,
        x: &Array<F>,
        t: &[usize],
        mask: &Array<F>,
    ) -> Result<(Vec<F>, Array<F>)> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let xv = tape.leaf(x.clone());
        let h = self.forward(&p, xv, t)?.bce_with_logits(mask)?;
        let values = h.value().data().to_vec();
        let mut grads = tape.backward(h.sum()?)?;
        Ok((values, grads.take(xv)))
    }
}

macro_rules! impl_network {
    ($ty:ident, $variant:ident) => {
        impl<F: Scalar> Network<F> for $ty<F> {
            fn params(&self) -> &ParamStore<F> {
                &self.params
            }
            fn params_mut(&mut self) -> &mut ParamStore<F> {
                &mut self.params
            }
            fn spec(&self) -> Option<NetworkSpec> {
                Some(NetworkSpec::$variant(self.config.clone()))
            }
        }
    };
}

impl_network!(EpsilonModel, Epsilon);
impl_network!(RegModel, Regression);
impl_network!(SegModel, Segmentation);
