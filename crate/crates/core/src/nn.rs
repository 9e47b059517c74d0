//! Parameter initialization and layer helpers shared by the networks.

use nirgan_tensor::{Binder, Conv2dOptions, Graph, NodeId, ParameterSet, Scalar, Tensor};
use rand::Rng;

use crate::error::Result;

/// Standard deviation of the zero-mean normal used for every convolution.
pub const INIT_STD: f64 = 0.02;
pub const NORM_EPS: f64 = 1e-5;

pub(crate) fn init_conv<T: Scalar, R: Rng + ?Sized>(
    params: &mut ParameterSet<T>,
    name: &str,
    shape: [usize; 4],
    bias: bool,
    rng: &mut R,
) {
    params.insert(format!("{name}.weight"), Tensor::randn(shape.to_vec(), INIT_STD, rng));
    if bias {
        params.insert(format!("{name}.bias"), Tensor::zeros(vec![shape[0]]));
    }
}

/// Transposed-convolution weights are laid out `(in, out, k, k)`.
pub(crate) fn init_conv_transpose<T: Scalar, R: Rng + ?Sized>(
    params: &mut ParameterSet<T>,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut R,
) {
    params.insert(format!("{name}.weight"), Tensor::randn(vec![cin, cout, k, k], INIT_STD, rng));
    params.insert(format!("{name}.bias"), Tensor::zeros(vec![cout]));
}

pub(crate) fn init_norm<T: Scalar>(params: &mut ParameterSet<T>, name: &str, channels: usize) {
    params.insert(format!("{name}.gamma"), Tensor::ones(vec![channels]));
    params.insert(format!("{name}.beta"), Tensor::zeros(vec![channels]));
}

pub(crate) fn init_prelu<T: Scalar>(params: &mut ParameterSet<T>, name: &str, channels: usize) {
    params.insert(format!("{name}.alpha"), Tensor::full(vec![channels], T::lit(0.25)));
}

pub(crate) fn conv<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Binder<'_, T>,
    name: &str,
    x: NodeId,
    opts: Conv2dOptions,
) -> Result<NodeId> {
    let w = p.get(g, &format!("{name}.weight"))?;
    let b = p.get_opt(g, &format!("{name}.bias"))?;
    Ok(g.conv2d(x, w, b, opts)?)
}

pub(crate) fn conv_transpose<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Binder<'_, T>,
    name: &str,
    x: NodeId,
) -> Result<NodeId> {
    let w = p.get(g, &format!("{name}.weight"))?;
    let b = p.get_opt(g, &format!("{name}.bias"))?;
    Ok(g.conv_transpose2d(x, w, b, 2, 1, 1)?)
}

pub(crate) fn norm<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Binder<'_, T>,
    name: &str,
    x: NodeId,
) -> Result<NodeId> {
    let gamma = p.get(g, &format!("{name}.gamma"))?;
    let beta = p.get(g, &format!("{name}.beta"))?;
    Ok(g.instance_norm(x, Some(gamma), Some(beta), NORM_EPS)?)
}

pub(crate) fn prelu<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Binder<'_, T>,
    name: &str,
    x: NodeId,
) -> Result<NodeId> {
    let alpha = p.get(g, &format!("{name}.alpha"))?;
    Ok(g.prelu(x, alpha)?)
}
