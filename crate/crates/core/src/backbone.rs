//! Lightweight face-feature extractor (FFE) built from inverted-residual
//! bottlenecks, in the MobileFaceNet style.
//!
//! The same parameters serve two roles. In spatial mode the network stops at
//! the configured tap stage and yields a 128-channel stride-4 feature map that
//! a generator translates. In embedding mode it continues through the later
//! stages and a global depthwise convolution to a unit-norm face embedding.

use nirgan_tensor::{Binder, Conv2dOptions, Graph, NodeId, ParameterSet, Scalar, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::optim::{Adam, AdamConfig};

/// Channel count a generator expects from the spatial tap.
pub const TAP_CHANNELS: usize = 128;
/// Spatial stride of the tap relative to the input image.
pub const TAP_STRIDE: usize = 4;

/// One stage of inverted-residual bottlenecks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bottleneck {
    pub expansion: usize,
    pub channels: usize,
    pub repeats: usize,
    pub stride: usize,
}

impl Bottleneck {
    const fn new(expansion: usize, channels: usize, repeats: usize, stride: usize) -> Self {
        Bottleneck {
            expansion,
            channels,
            repeats,
            stride,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FfeConfig {
    /// Square input size for embedding mode.
    pub input_resolution: usize,
    pub stem_channels: usize,
    pub bottleneck_spec: Vec<Bottleneck>,
    /// Width of the pointwise layer feeding the global depthwise convolution.
    pub head_channels: usize,
    pub embedding_dim: usize,
    /// Index into `bottleneck_spec` of the stage whose output is tapped.
    pub spatial_tap_stage: usize,
}

impl Default for FfeConfig {
    fn default() -> Self {
        FfeConfig {
            input_resolution: 112,
            stem_channels: 32,
            bottleneck_spec: vec![
                Bottleneck::new(2, 64, 2, 2),
                Bottleneck::new(2, 128, 1, 1),
                Bottleneck::new(4, 128, 1, 2),
                Bottleneck::new(2, 128, 1, 1),
                Bottleneck::new(4, 128, 1, 2),
                Bottleneck::new(2, 128, 1, 1),
            ],
            head_channels: 256,
            embedding_dim: 128,
            spatial_tap_stage: 1,
        }
    }
}

impl FfeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("ffe: {msg}")));
        if self.bottleneck_spec.is_empty() {
            return bad("bottleneck_spec is empty".into());
        }
        for (i, b) in self.bottleneck_spec.iter().enumerate() {
            if !matches!(b.stride, 1 | 2) {
                return bad(format!("stage {i} stride {} not in {{1, 2}}", b.stride));
            }
            if b.expansion == 0 || b.channels == 0 || b.repeats == 0 {
                return bad(format!("stage {i} has a zero field"));
            }
        }
        if self.spatial_tap_stage >= self.bottleneck_spec.len() {
            return bad(format!(
                "spatial_tap_stage {} beyond {} stages",
                self.spatial_tap_stage,
                self.bottleneck_spec.len()
            ));
        }
        if self.tap_channels() != TAP_CHANNELS {
            return bad(format!("tap stage has {} channels, need {TAP_CHANNELS}", self.tap_channels()));
        }
        if self.tap_stride() != TAP_STRIDE {
            return bad(format!("tap stage has stride {}, need {TAP_STRIDE}", self.tap_stride()));
        }
        if self.stem_channels == 0 || self.head_channels == 0 || self.embedding_dim == 0 {
            return bad("zero-width stem, head or embedding".into());
        }
        self.gdconv_kernel()?;
        Ok(())
    }

    pub fn tap_channels(&self) -> usize {
        self.bottleneck_spec[self.spatial_tap_stage].channels
    }

    pub fn tap_stride(&self) -> usize {
        2 * self.bottleneck_spec[..=self.spatial_tap_stage]
            .iter()
            .map(|b| b.stride)
            .product::<usize>()
    }

    pub fn total_stride(&self) -> usize {
        2 * self.bottleneck_spec.iter().map(|b| b.stride).product::<usize>()
    }

    /// Side of the global depthwise kernel: the final feature map's size.
    pub fn gdconv_kernel(&self) -> Result<usize> {
        let s = self.total_stride();
        if self.input_resolution == 0 || !self.input_resolution.is_multiple_of(s) {
            return Err(Error::Config(format!(
                "ffe: input_resolution {} not divisible by total stride {s}",
                self.input_resolution
            )));
        }
        Ok(self.input_resolution / s)
    }
}

/// Unit-norm face descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    vector: Vec<f64>,
}

impl Embedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Cosine similarity, which for unit vectors is the dot product.
    pub fn cosine(&self, other: &Embedding) -> f64 {
        let dot: f64 = self.vector.iter().zip(&other.vector).map(|(a, b)| a * b).sum();
        (dot / (self.norm() * other.norm())).clamp(-1.0, 1.0)
    }
}

fn stage_name(stage: usize, block: usize) -> String {
    format!("stage{stage}.block{block}")
}

/// True for parameters used only after the tap (embedding mode).
pub fn is_embedding_only(config: &FfeConfig, local_name: &str) -> bool {
    if local_name.starts_with("head.") {
        return true;
    }
    local_name
        .strip_prefix("stage")
        .and_then(|rest| rest.split('.').next())
        .and_then(|idx| idx.parse::<usize>().ok())
        .is_some_and(|stage| stage > config.spatial_tap_stage)
}

/// Subset of a full FFE parameter set needed for spatial mode.
pub fn spatial_params<T: Scalar>(config: &FfeConfig, full: &ParameterSet<T>) -> ParameterSet<T> {
    let mut out = ParameterSet::new();
    for (name, value) in full.iter() {
        if !is_embedding_only(config, name) {
            out.insert(name.clone(), value.clone());
        }
    }
    out
}

/// Fresh parameters for the whole extractor (both modes).
pub fn init_ffe_params<T: Scalar>(config: &FfeConfig, seed: u64) -> Result<ParameterSet<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParameterSet::new();
    let stem = config.stem_channels;
    nn::init_conv(&mut p, "stem", [stem, 3, 3, 3], false, &mut rng);
    nn::init_norm(&mut p, "stem_norm", stem);
    nn::init_prelu(&mut p, "stem_act", stem);
    nn::init_conv(&mut p, "dw", [stem, 1, 3, 3], false, &mut rng);
    nn::init_norm(&mut p, "dw_norm", stem);
    nn::init_prelu(&mut p, "dw_act", stem);
    let mut cin = stem;
    for (s, b) in config.bottleneck_spec.iter().enumerate() {
        for r in 0..b.repeats {
            let name = stage_name(s, r);
            let hidden = cin * b.expansion;
            nn::init_conv(&mut p, &format!("{name}.expand"), [hidden, cin, 1, 1], false, &mut rng);
            nn::init_norm(&mut p, &format!("{name}.expand_norm"), hidden);
            nn::init_prelu(&mut p, &format!("{name}.expand_act"), hidden);
            nn::init_conv(&mut p, &format!("{name}.dw"), [hidden, 1, 3, 3], false, &mut rng);
            nn::init_norm(&mut p, &format!("{name}.dw_norm"), hidden);
            nn::init_prelu(&mut p, &format!("{name}.dw_act"), hidden);
            nn::init_conv(&mut p, &format!("{name}.project"), [b.channels, hidden, 1, 1], false, &mut rng);
            nn::init_norm(&mut p, &format!("{name}.project_norm"), b.channels);
            cin = b.channels;
        }
    }
    let head = config.head_channels;
    let k = config.gdconv_kernel()?;
    nn::init_conv(&mut p, "head.expand", [head, cin, 1, 1], false, &mut rng);
    nn::init_norm(&mut p, "head.expand_norm", head);
    nn::init_prelu(&mut p, "head.expand_act", head);
    nn::init_conv(&mut p, "head.gdconv", [head, 1, k, k], false, &mut rng);
    nn::init_conv(&mut p, "head.linear", [config.embedding_dim, head, 1, 1], true, &mut rng);
    Ok(p)
}

fn check_image_batch<T: Scalar>(images: &Tensor<T>, multiple: usize) -> Result<()> {
    let (_, c, h, w) = images.dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("axis 1 (channels) is {c}, expected 3")));
    }
    if h % multiple != 0 || h == 0 {
        return Err(Error::Shape(format!("axis 2 (height) {h} is not divisible by {multiple}")));
    }
    if w % multiple != 0 || w == 0 {
        return Err(Error::Shape(format!("axis 3 (width) {w} is not divisible by {multiple}")));
    }
    Ok(())
}

fn conv_norm_act<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Binder<'_, T>,
    name: &str,
    x: NodeId,
    opts: Conv2dOptions,
) -> Result<NodeId> {
    let y = nn::conv(g, p, name, x, opts)?;
    let y = nn::norm(g, p, &format!("{name}_norm"), y)?;
    nn::prelu(g, p, &format!("{name}_act"), y)
}

fn bottleneck<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Binder<'_, T>,
    name: &str,
    x: NodeId,
    stride: usize,
) -> Result<NodeId> {
    let cin = g.shape(x)[1];
    let y = conv_norm_act(g, p, &format!("{name}.expand"), x, Conv2dOptions::default())?;
    let hidden = g.shape(y)[1];
    let y = conv_norm_act(g, p, &format!("{name}.dw"), y, Conv2dOptions::new(stride, 1).groups(hidden))?;
    let y = nn::conv(g, p, &format!("{name}.project"), y, Conv2dOptions::default())?;
    let y = nn::norm(g, p, &format!("{name}.project_norm"), y)?;
    if stride == 1 && g.shape(y)[1] == cin {
        Ok(g.add(x, y)?)
    } else {
        Ok(y)
    }
}

/// Runs the stem and bottleneck stages `0..=last_stage`.
fn trunk<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Binder<'_, T>,
    prefix: &str,
    config: &FfeConfig,
    x: NodeId,
    last_stage: usize,
) -> Result<NodeId> {
    let mut y = conv_norm_act(g, p, &format!("{prefix}stem"), x, Conv2dOptions::new(2, 1))?;
    let c = g.shape(y)[1];
    y = conv_norm_act(g, p, &format!("{prefix}dw"), y, Conv2dOptions::new(1, 1).groups(c))?;
    for (s, b) in config.bottleneck_spec.iter().enumerate().take(last_stage + 1) {
        for r in 0..b.repeats {
            let stride = if r == 0 { b.stride } else { 1 };
            y = bottleneck(g, p, &format!("{prefix}{}", stage_name(s, r)), y, stride)?;
        }
    }
    Ok(y)
}

/// Spatial-mode forward on a recorded graph: `(n, 3, h, w)` → `(n, 128, h/4, w/4)`.
pub fn spatial_features<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Binder<'_, T>,
    prefix: &str,
    config: &FfeConfig,
    images: NodeId,
) -> Result<NodeId> {
    check_image_batch(g.value(images), TAP_STRIDE)?;
    trunk(g, p, prefix, config, images, config.spatial_tap_stage)
}

/// Embedding-mode forward up to (not including) normalization: `(n, embedding_dim)`.
pub fn embedding_features<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Binder<'_, T>,
    prefix: &str,
    config: &FfeConfig,
    images: NodeId,
) -> Result<NodeId> {
    let (n, _, h, w) = g.value(images).dims4()?;
    check_image_batch(g.value(images), 1)?;
    let r = config.input_resolution;
    if h != r {
        return Err(Error::Shape(format!("axis 2 (height) is {h}, embedding mode expects {r}")));
    }
    if w != r {
        return Err(Error::Shape(format!("axis 3 (width) is {w}, embedding mode expects {r}")));
    }
    let last = config.bottleneck_spec.len() - 1;
    let y = trunk(g, p, prefix, config, images, last)?;
    let y = conv_norm_act(g, p, &format!("{prefix}head.expand"), y, Conv2dOptions::default())?;
    let c = g.shape(y)[1];
    let y = nn::conv(g, p, &format!("{prefix}head.gdconv"), y, Conv2dOptions::default().groups(c))?;
    let y = nn::conv(g, p, &format!("{prefix}head.linear"), y, Conv2dOptions::default())?;
    Ok(g.reshape(y, vec![n, config.embedding_dim])?)
}

/// Unit-normalizes embedding rows, reporting a zero row as degenerate.
pub fn normalize_embeddings<T: Scalar>(g: &mut Graph<T>, raw: NodeId) -> Result<NodeId> {
    g.l2_normalize(raw).map_err(|e| match e {
        TensorError::Degenerate { detail, .. } => Error::DegenerateEmbedding(detail),
        other => other.into(),
    })
}

/// Spatial feature map for an image batch.
pub fn ffe_forward_spatial<T: Scalar>(
    images: &Tensor<T>,
    config: &FfeConfig,
    params: &ParameterSet<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let mut p = Binder::frozen(params);
    let x = g.constant(images.clone());
    let y = spatial_features(&mut g, &mut p, "", config, x)?;
    Ok(g.value(y).clone())
}

/// One unit-norm embedding per image.
pub fn ffe_forward_embedding<T: Scalar>(
    images: &Tensor<T>,
    config: &FfeConfig,
    params: &ParameterSet<T>,
) -> Result<Vec<Embedding>> {
    let mut g = Graph::new();
    let mut p = Binder::frozen(params);
    let x = g.constant(images.clone());
    let raw = embedding_features(&mut g, &mut p, "", config, x)?;
    let e = normalize_embeddings(&mut g, raw)?;
    let d = config.embedding_dim;
    Ok(g
        .value(e)
        .data()
        .chunks(d)
        .map(|row| Embedding {
            vector: row.iter().map(|v| v.as_f64()).collect(),
        })
        .collect())
}

/// Face images with integer identity labels.
#[derive(Clone, Debug)]
pub struct LabeledFaceSet {
    images: Tensor<f32>,
    labels: Vec<usize>,
    n_classes: usize,
}

impl LabeledFaceSet {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>) -> Result<Self> {
        let (n, ..) = images.dims4()?;
        if n != labels.len() {
            return Err(Error::Shape(format!("{n} images but {} labels", labels.len())));
        }
        let n_classes = labels.iter().max().map_or(0, |m| m + 1);
        Ok(LabeledFaceSet {
            images,
            labels,
            n_classes,
        })
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn check_protocol(&self) -> Result<()> {
        let mut counts = vec![0usize; self.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        let present = counts.iter().filter(|&&c| c > 0).count();
        if present < 2 {
            return Err(Error::Protocol(format!(
                "pretraining needs at least 2 identities, found {present}"
            )));
        }
        if let Some(label) = counts.iter().position(|&c| c == 1) {
            return Err(Error::Protocol(format!("identity {label} has a single image")));
        }
        Ok(())
    }

    fn batch(&self, idx: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let items: Vec<_> = idx
            .iter()
            .map(|&i| self.images.batch_item(i))
            .collect::<Result<_, _>>()?;
        Ok((
            Tensor::concat_batch(&items)?,
            idx.iter().map(|&i| self.labels[i]).collect(),
        ))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    /// Extractor parameters (both modes), unprefixed.
    pub params: ParameterSet<f32>,
    /// Softmax classifier used only during pretraining.
    pub classifier: ParameterSet<f32>,
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
    pub train_accuracy: f64,
}

/// Desk-scale identity pretraining with a softmax classifier on top of the
/// embedding features. Deterministic for a fixed seed.
pub fn pretrain_ffe(
    dataset: &LabeledFaceSet,
    config: &FfeConfig,
    options: &PretrainOptions,
) -> Result<PretrainReport> {
    dataset.check_protocol()?;
    let mut params = init_ffe_params::<f32>(config, options.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ 0x9e37_79b9_7f4a_7c15);
    let k = dataset.n_classes();
    params.insert(
        "cls.weight",
        Tensor::randn(vec![k, config.embedding_dim], 0.01, &mut rng),
    );
    params.insert("cls.bias", Tensor::zeros(vec![k]));
    let mut adam = Adam::new(AdamConfig {
        beta1: 0.9,
        ..AdamConfig::default()
    });
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(options.epochs);
    let batch = options.batch_size.max(1);
    for _ in 0..options.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch) {
            let (images, labels) = dataset.batch(chunk)?;
            let (value, grads) = {
                let mut g = Graph::new();
                let mut p = Binder::trainable(&params);
                let x = g.constant(images);
                let feats = embedding_features(&mut g, &mut p, "", config, x)?;
                let w = p.get(&mut g, "cls.weight")?;
                let b = p.get(&mut g, "cls.bias")?;
                let logits = g.linear(feats, w, Some(b))?;
                let loss = g.softmax_cross_entropy(logits, &labels)?;
                let mut grads = g.backward(loss)?;
                (g.scalar(loss) as f64, p.collect(&mut grads))
            };
            if !value.is_finite() {
                return Err(Error::Divergence {
                    term: "pretrain_cross_entropy".into(),
                    step: adam.steps(),
                });
            }
            adam.step(&mut params, &grads, options.learning_rate);
            total += value;
            batches += 1;
        }
        epoch_losses.push(total / batches.max(1) as f64);
    }
    let (final_loss, train_accuracy) = classify(dataset, config, &params, batch)?;
    let classifier = params.extract_prefix("cls.", "cls.");
    let params = {
        let mut ffe = ParameterSet::new();
        for (name, v) in params.iter().filter(|(n, _)| !n.starts_with("cls.")) {
            ffe.insert(name.clone(), v.clone());
        }
        ffe
    };
    Ok(PretrainReport {
        params,
        classifier,
        epoch_losses,
        final_loss,
        train_accuracy,
    })
}

/// Mean cross-entropy and accuracy of the classifier over the whole set.
fn classify(
    dataset: &LabeledFaceSet,
    config: &FfeConfig,
    params: &ParameterSet<f32>,
    batch: usize,
) -> Result<(f64, f64)> {
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for chunk in idx.chunks(batch) {
        let (images, labels) = dataset.batch(chunk)?;
        let mut g = Graph::new();
        let mut p = Binder::frozen(params);
        let x = g.constant(images);
        let feats = embedding_features(&mut g, &mut p, "", config, x)?;
        let w = p.get(&mut g, "cls.weight")?;
        let b = p.get(&mut g, "cls.bias")?;
        let logits = g.linear(feats, w, Some(b))?;
        let k = g.shape(logits)[1];
        for (row, &label) in g.value(logits).data().chunks(k).zip(&labels) {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc })
                .0;
            correct += usize::from(best == label);
        }
        let loss = g.softmax_cross_entropy(logits, &labels)?;
        loss_sum += g.scalar(loss) as f64 * chunk.len() as f64;
    }
    let n = dataset.len() as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(resolution: usize) -> FfeConfig {
        FfeConfig {
            input_resolution: resolution,
            ..FfeConfig::default()
        }
    }

    fn random_images(n: usize, size: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(vec![n, 3, size, size], -1.0, 1.0, &mut rng)
    }

    #[test]
    fn default_config_is_valid_with_stride4_tap() {
        let c = FfeConfig::default();
        c.validate().unwrap();
        assert_eq!(c.tap_channels(), 128);
        assert_eq!(c.tap_stride(), 4);
        assert_eq!(c.embedding_dim, 128);
        assert_eq!(c.gdconv_kernel().unwrap(), 7);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = FfeConfig::default();
        c.bottleneck_spec[0].stride = 3;
        assert!(c.validate().is_err());
        let mut c = FfeConfig::default();
        c.spatial_tap_stage = 2;
        assert!(c.validate().is_err(), "stride-8 tap must be rejected");
        let c = small_config(100);
        assert!(c.validate().is_err());
    }

    #[test]
    fn spatial_output_shapes() {
        let c = small_config(64);
        let p = init_ffe_params::<f32>(&c, 1).unwrap();
        let y = ffe_forward_spatial(&random_images(1, 64, 2), &c, &p).unwrap();
        assert_eq!(y.shape(), &[1, 128, 16, 16]);
        let err = ffe_forward_spatial(&random_images(1, 63, 2), &c, &p).unwrap_err();
        assert!(err.to_string().contains("axis 2"), "{err}");
    }

    #[test]
    fn spatial_mode_ignores_head_parameters() {
        let c = small_config(64);
        let full = init_ffe_params::<f32>(&c, 1).unwrap();
        let spatial = spatial_params(&c, &full);
        assert!(spatial.len() < full.len());
        assert!(spatial.names().all(|n| !n.starts_with("head.") && !n.starts_with("stage2")));
        let x = random_images(1, 32, 3);
        assert_eq!(
            ffe_forward_spatial(&x, &c, &full).unwrap(),
            ffe_forward_spatial(&x, &c, &spatial).unwrap()
        );
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let c = small_config(64);
        let p = init_ffe_params::<f32>(&c, 5).unwrap();
        let x = random_images(4, 64, 6);
        let e = ffe_forward_embedding(&x, &c, &p).unwrap();
        assert_eq!(e.len(), 4);
        for v in &e {
            assert_eq!(v.dim(), 128);
            assert!((v.norm() - 1.0).abs() < 1e-5);
        }
        let dup = Tensor::concat_batch(&[x.batch_item(0).unwrap(), x.batch_item(0).unwrap()]).unwrap();
        let d = ffe_forward_embedding(&dup, &c, &p).unwrap();
        assert_eq!(d[0], d[1]);
        assert!((d[0].cosine(&d[1]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn embedding_rejects_wrong_resolution() {
        let c = small_config(64);
        let p = init_ffe_params::<f32>(&c, 5).unwrap();
        assert!(ffe_forward_embedding(&random_images(1, 32, 1), &c, &p).is_err());
    }

    #[test]
    fn zero_parameters_give_degenerate_embedding() {
        let c = small_config(64);
        let mut p = init_ffe_params::<f32>(&c, 5).unwrap();
        p.map_values(|_, t| t.data_mut().fill(0.0));
        let err = ffe_forward_embedding(&random_images(2, 64, 1), &c, &p).unwrap_err();
        assert!(matches!(err, Error::DegenerateEmbedding(_)), "{err}");
    }

    #[test]
    fn pretraining_needs_two_identities() {
        let set = LabeledFaceSet::new(random_images(4, 32, 1), vec![0; 4]).unwrap();
        let c = small_config(32);
        let err = pretrain_ffe(&set, &c, &PretrainOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)), "{err}");
        let set = LabeledFaceSet::new(random_images(3, 32, 1), vec![0, 0, 1]).unwrap();
        assert!(matches!(
            pretrain_ffe(&set, &c, &PretrainOptions::default()),
            Err(Error::Protocol(_))
        ));
    }
}
