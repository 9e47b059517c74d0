//! Mapping networks G (VIS→NIR) and F (NIR→VIS): encoder, residual
//! translator and fractional-stride decoder.

use nirgan_tensor::{Binder, Conv2dOptions, Graph, NodeId, ParameterSet, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, FfeConfig, TAP_CHANNELS, TAP_STRIDE};
use crate::error::{Error, Result};
use crate::nn;

/// Which network turns images into translator features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    /// Pretrained face-feature extractor, tapped at stride 4.
    #[default]
    Ffe,
    /// Plain CycleGAN encoder: 7×7 convolution then two stride-2 convolutions.
    Basic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub encoder: EncoderKind,
    pub translator_blocks: usize,
    pub translator_channels: usize,
    /// Output widths of the two ×2 upsampling stages.
    pub decoder_channels: Vec<usize>,
    pub output_channels: usize,
    /// Widths of the 7×7 and first stride-2 layers of the basic encoder.
    pub basic_encoder_channels: Vec<usize>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            encoder: EncoderKind::Ffe,
            translator_blocks: 6,
            translator_channels: TAP_CHANNELS,
            decoder_channels: vec![64, 32],
            output_channels: 3,
            basic_encoder_channels: vec![32, 64],
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("generator: {msg}")));
        // Two ×2 upsampling stages undo the stride-4 encoder exactly.
        if self.decoder_channels.len() != 2 || self.basic_encoder_channels.len() != 2 {
            return bad("decoder_channels and basic_encoder_channels need exactly two entries");
        }
        if self.encoder == EncoderKind::Ffe && self.translator_channels != TAP_CHANNELS {
            return bad("translator_channels must equal the 128-channel encoder tap");
        }
        if self.translator_channels == 0
            || self.output_channels == 0
            || self.decoder_channels.iter().chain(&self.basic_encoder_channels).any(|&c| c == 0)
        {
            return bad("zero channel count");
        }
        Ok(())
    }
}

/// Fresh generator parameters. With the FFE encoder, `ffe.*` entries are
/// randomly initialized; use [`load_pretrained_encoder`] to replace them.
pub fn init_generator_params<T: Scalar>(
    config: &GeneratorConfig,
    ffe: &FfeConfig,
    seed: u64,
) -> Result<ParameterSet<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParameterSet::new();
    match config.encoder {
        EncoderKind::Ffe => {
            let full = backbone::init_ffe_params::<T>(ffe, seed.wrapping_add(1))?;
            p.merge_prefixed("ffe.", backbone::spatial_params(ffe, &full));
        }
        EncoderKind::Basic => {
            let [c0, c1] = [config.basic_encoder_channels[0], config.basic_encoder_channels[1]];
            let c2 = config.translator_channels;
            nn::init_conv(&mut p, "enc.in", [c0, 3, 7, 7], true, &mut rng);
            nn::init_norm(&mut p, "enc.in_norm", c0);
            nn::init_conv(&mut p, "enc.down0", [c1, c0, 3, 3], true, &mut rng);
            nn::init_norm(&mut p, "enc.down0_norm", c1);
            nn::init_conv(&mut p, "enc.down1", [c2, c1, 3, 3], true, &mut rng);
            nn::init_norm(&mut p, "enc.down1_norm", c2);
        }
    }
    let c = config.translator_channels;
    for i in 0..config.translator_blocks {
        nn::init_conv(&mut p, &format!("trans.block{i}.conv1"), [c, c, 3, 3], true, &mut rng);
        nn::init_norm(&mut p, &format!("trans.block{i}.norm"), c);
        nn::init_conv(&mut p, &format!("trans.block{i}.conv2"), [c, c, 3, 3], true, &mut rng);
    }
    let mut cin = c;
    for (i, &cout) in config.decoder_channels.iter().enumerate() {
        nn::init_conv_transpose(&mut p, &format!("dec.up{i}"), cin, cout, 3, &mut rng);
        nn::init_norm(&mut p, &format!("dec.up{i}_norm"), cout);
        cin = cout;
    }
    nn::init_conv(&mut p, "dec.out", [config.output_channels, cin, 7, 7], true, &mut rng);
    Ok(p)
}

/// Copies the spatial part of pretrained extractor weights into `ffe.*`.
pub fn load_pretrained_encoder<T: Scalar>(
    params: &mut ParameterSet<T>,
    ffe: &FfeConfig,
    pretrained: &ParameterSet<T>,
) -> Result<()> {
    for (name, value) in backbone::spatial_params(ffe, pretrained).iter() {
        let key = format!("ffe.{name}");
        match params.get_mut(&key) {
            Some(slot) if slot.shape() == value.shape() => *slot = value.clone(),
            Some(slot) => {
                return Err(Error::Shape(format!(
                    "pretrained {name} has shape {:?}, generator expects {:?}",
                    value.shape(),
                    slot.shape()
                )))
            }
            None => {
                return Err(Error::Config(format!(
                    "pretrained parameter {name} has no slot in a generator without FFE encoder"
                )))
            }
        }
    }
    Ok(())
}

fn check_input<T: Scalar>(x: &Tensor<T>, channels: usize) -> Result<()> {
    let (_, c, h, w) = x.dims4()?;
    if c != channels {
        return Err(Error::Shape(format!("axis 1 (channels) is {c}, expected {channels}")));
    }
    for (axis, name, len) in [(2, "height", h), (3, "width", w)] {
        if len == 0 || len % TAP_STRIDE != 0 {
            return Err(Error::Shape(format!(
                "axis {axis} ({name}) {len} is not divisible by {TAP_STRIDE}"
            )));
        }
    }
    Ok(())
}

fn conv_norm_relu<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Binder<'_, T>,
    name: &str,
    x: NodeId,
    opts: Conv2dOptions,
) -> Result<NodeId> {
    let y = nn::conv(g, p, name, x, opts)?;
    let y = nn::norm(g, p, &format!("{name}_norm"), y)?;
    Ok(g.relu(y))
}

pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Binder<'_, T>,
    prefix: &str,
    config: &GeneratorConfig,
    ffe: &FfeConfig,
    images: NodeId,
) -> Result<NodeId> {
    check_input(g.value(images), 3)?;
    match config.encoder {
        EncoderKind::Ffe => backbone::spatial_features(g, p, &format!("{prefix}ffe."), ffe, images),
        EncoderKind::Basic => {
            let x = g.reflect_pad(images, 3)?;
            let x = conv_norm_relu(g, p, &format!("{prefix}enc.in"), x, Conv2dOptions::default())?;
            let x = conv_norm_relu(g, p, &format!("{prefix}enc.down0"), x, Conv2dOptions::new(2, 1))?;
            conv_norm_relu(g, p, &format!("{prefix}enc.down1"), x, Conv2dOptions::new(2, 1))
        }
    }
}

/// Residual translator: each block maps `x ↦ x + conv2(norm(relu(conv1(x))))`.
pub fn translate<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Binder<'_, T>,
    prefix: &str,
    config: &GeneratorConfig,
    features: NodeId,
) -> Result<NodeId> {
    let (_, c, _, _) = g.value(features).dims4()?;
    if c != config.translator_channels {
        return Err(Error::Shape(format!(
            "axis 1 (channels) is {c}, translator expects {}",
            config.translator_channels
        )));
    }
    let mut x = features;
    for i in 0..config.translator_blocks {
        x = residual_block(g, p, &format!("{prefix}trans.block{i}"), x)?;
    }
    Ok(x)
}

fn residual_block<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Binder<'_, T>,
    name: &str,
    x: NodeId,
) -> Result<NodeId> {
    let y = g.reflect_pad(x, 1)?;
    let y = nn::conv(g, p, &format!("{name}.conv1"), y, Conv2dOptions::default())?;
    let y = g.relu(y);
    let y = nn::norm(g, p, &format!("{name}.norm"), y)?;
    let y = g.reflect_pad(y, 1)?;
    let y = nn::conv(g, p, &format!("{name}.conv2"), y, Conv2dOptions::default())?;
    Ok(g.add(x, y)?)
}

pub fn decode<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Binder<'_, T>,
    prefix: &str,
    config: &GeneratorConfig,
    features: NodeId,
) -> Result<NodeId> {
    let mut x = features;
    for i in 0..config.decoder_channels.len() {
        x = nn::conv_transpose(g, p, &format!("{prefix}dec.up{i}"), x)?;
        x = nn::norm(g, p, &format!("{prefix}dec.up{i}_norm"), x)?;
        x = g.relu(x);
    }
    let x = g.reflect_pad(x, 3)?;
    let x = nn::conv(g, p, &format!("{prefix}dec.out"), x, Conv2dOptions::default())?;
    Ok(g.tanh(x))
}

/// Full mapping on a recorded graph; parameters are looked up under `prefix`.
pub fn generate<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Binder<'_, T>,
    prefix: &str,
    config: &GeneratorConfig,
    ffe: &FfeConfig,
    images: NodeId,
) -> Result<NodeId> {
    let f = encode(g, p, prefix, config, ffe, images)?;
    let f = translate(g, p, prefix, config, f)?;
    decode(g, p, prefix, config, f)
}

/// Translates an image batch; output has the input's shape with values in (-1, 1).
pub fn generator_forward<T: Scalar>(
    images: &Tensor<T>,
    config: &GeneratorConfig,
    ffe: &FfeConfig,
    params: &ParameterSet<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let mut p = Binder::frozen(params);
    let x = g.constant(images.clone());
    let y = generate(&mut g, &mut p, "", config, ffe, x)?;
    Ok(g.value(y).clone())
}

/// Runs only the residual translator on a feature map.
pub fn translate_module<T: Scalar>(
    features: &Tensor<T>,
    config: &GeneratorConfig,
    params: &ParameterSet<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let mut p = Binder::frozen(params);
    let x = g.constant(features.clone());
    let y = translate(&mut g, &mut p, "", config, x)?;
    Ok(g.value(y).clone())
}
