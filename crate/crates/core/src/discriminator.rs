//! Patch discriminators D_V and D_N: a stack of 4×4 convolutions ending in a
//! one-channel map of raw (unsquashed) realism scores.

use nirgan_tensor::{Binder, Conv2dOptions, Graph, NodeId, ParameterSet, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;

const LEAK: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub layer_channels: Vec<usize>,
    pub kernel: usize,
    /// One stride per hidden layer plus one for the final score layer.
    pub strides: Vec<usize>,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            layer_channels: vec![64, 128, 256, 512],
            kernel: 4,
            strides: vec![2, 2, 2, 1, 1],
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layer_channels.is_empty() || self.strides.len() != self.layer_channels.len() + 1 {
            return Err(Error::Config(
                "discriminator: need one stride per layer plus one for the score layer".into(),
            ));
        }
        if self.kernel == 0 || self.strides.contains(&0) || self.layer_channels.contains(&0) {
            return Err(Error::Config("discriminator: zero kernel, stride or width".into()));
        }
        Ok(())
    }

    /// Score-map side for a square input, from the stride/kernel arithmetic
    /// with padding 1 on every layer.
    pub fn output_size(&self, input: usize) -> Option<usize> {
        self.strides.iter().try_fold(input, |size, &s| {
            (size + 2).checked_sub(self.kernel).map(|span| span / s + 1)
        })
    }
}

pub fn init_discriminator_params<T: Scalar>(
    config: &DiscriminatorConfig,
    seed: u64,
) -> Result<ParameterSet<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParameterSet::new();
    let k = config.kernel;
    let mut cin = 3;
    for (i, &c) in config.layer_channels.iter().enumerate() {
        nn::init_conv(&mut p, &format!("layer{i}"), [c, cin, k, k], true, &mut rng);
        if i > 0 {
            nn::init_norm(&mut p, &format!("layer{i}_norm"), c);
        }
        cin = c;
    }
    nn::init_conv(&mut p, "score", [1, cin, k, k], true, &mut rng);
    Ok(p)
}

pub fn discriminate<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Binder<'_, T>,
    prefix: &str,
    config: &DiscriminatorConfig,
    images: NodeId,
) -> Result<NodeId> {
    let (_, c, _, _) = g.value(images).dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("axis 1 (channels) is {c}, expected 3")));
    }
    let mut x = images;
    for i in 0..config.layer_channels.len() {
        let opts = Conv2dOptions::new(config.strides[i], 1);
        x = nn::conv(g, p, &format!("{prefix}layer{i}"), x, opts)?;
        if i > 0 {
            x = nn::norm(g, p, &format!("{prefix}layer{i}_norm"), x)?;
        }
        x = g.leaky_relu(x, LEAK);
    }
    let opts = Conv2dOptions::new(*config.strides.last().expect("validated"), 1);
    nn::conv(g, p, &format!("{prefix}score"), x, opts)
}

/// Patch score map `(n, 1, h', w')` for an image batch.
pub fn discriminator_forward<T: Scalar>(
    images: &Tensor<T>,
    config: &DiscriminatorConfig,
    params: &ParameterSet<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let mut p = Binder::frozen(params);
    let x = g.constant(images.clone());
    let y = discriminate(&mut g, &mut p, "", config, x)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Receptive-field arithmetic done by hand:
    /// 256 -(k4 s2 p1)-> 128 -> 64 -> 32 -(k4 s1 p1)-> 31 -> 30.
    #[test]
    fn score_map_size_for_256() {
        let cfg = DiscriminatorConfig::default();
        assert_eq!(cfg.output_size(256), Some(30));
        assert_eq!(cfg.output_size(64), Some(6));
        let small = DiscriminatorConfig {
            layer_channels: vec![4, 4, 4, 4],
            ..cfg.clone()
        };
        let p = init_discriminator_params::<f32>(&small, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f32>::uniform(vec![1, 3, 256, 256], -1.0, 1.0, &mut rng);
        assert_eq!(discriminator_forward(&x, &small, &p).unwrap().shape(), &[1, 1, 30, 30]);
    }

    #[test]
    fn zero_weights_score_zero() {
        let cfg = DiscriminatorConfig::default();
        let mut p = init_discriminator_params::<f32>(&cfg, 1).unwrap();
        p.map_values(|_, t| t.data_mut().fill(0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f32>::uniform(vec![2, 3, 64, 64], -1.0, 1.0, &mut rng);
        let y = discriminator_forward(&x, &cfg, &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn distinct_inputs_score_differently() {
        let cfg = DiscriminatorConfig::default();
        let p = init_discriminator_params::<f32>(&cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::<f32>::uniform(vec![1, 3, 64, 64], -1.0, 1.0, &mut rng);
        let b = Tensor::<f32>::uniform(vec![1, 3, 64, 64], -1.0, 1.0, &mut rng);
        let sa = discriminator_forward(&a, &cfg, &p).unwrap();
        let sb = discriminator_forward(&b, &cfg, &p).unwrap();
        assert!(sa.max_abs_diff(&sb).unwrap() > 0.0);
    }

    #[test]
    fn rejects_single_channel_and_tiny_inputs() {
        let cfg = DiscriminatorConfig::default();
        let p = init_discriminator_params::<f32>(&cfg, 1).unwrap();
        assert!(discriminator_forward(&Tensor::<f32>::zeros(vec![1, 1, 64, 64]), &cfg, &p).is_err());
        assert!(discriminator_forward(&Tensor::<f32>::zeros(vec![1, 3, 4, 4]), &cfg, &p).is_err());
    }
}
