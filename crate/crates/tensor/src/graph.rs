use crate::conv::{col2im, depthwise_backward, depthwise_forward, im2col, ConvGeom};
use crate::error::{Result, TensorError};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Conv2dOptions {
            stride: 1,
            pad: 0,
            groups: 1,
        }
    }
}

impl Conv2dOptions {
    pub fn new(stride: usize, pad: usize) -> Self {
        Conv2dOptions {
            stride,
            pad,
            groups: 1,
        }
    }

    pub fn groups(self, groups: usize) -> Self {
        Conv2dOptions { groups, ..self }
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
        groups: usize,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    InstanceNorm {
        x: usize,
        gamma: Option<usize>,
        beta: Option<usize>,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(usize),
    LeakyRelu(usize, T),
    PRelu {
        x: usize,
        alpha: usize,
    },
    Tanh(usize),
    Add(usize, usize),
    ReflectPad {
        x: usize,
        pad: usize,
    },
    Reshape(usize),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    L2Normalize {
        x: usize,
        norms: Vec<T>,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    Mean(usize),
    MeanSquaredTo {
        x: usize,
        target: T,
    },
    MeanAbsDiff(usize, usize),
    WeightedSum(Vec<(usize, T)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of recorded operations. Values are computed eagerly as nodes are
/// added; [`Graph::backward`] walks the tape in reverse.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], idx: usize, g: Tensor<T>) {
    match &mut grads[idx] {
        Some(existing) => {
            for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// A value that gradients flow into.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A value treated as fixed data.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> T {
        self.nodes[id.0].value.data()[0]
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        opts: Conv2dOptions,
    ) -> Result<NodeId> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (cout, cin_g, kh, kw) = self.value(w).dims4()?;
        let groups = opts.groups.max(1);
        if cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(TensorError::shape(
                "conv2d",
                format!(
                    "axis 1 (channels): input has {cin}, weight expects {cin_g} per group × {groups} groups"
                ),
            ));
        }
        if let Some(b) = b {
            if self.value(b).numel() != cout {
                return Err(TensorError::shape(
                    "conv2d",
                    format!("bias has {} entries for {cout} output channels", self.value(b).numel()),
                ));
            }
        }
        let geom = ConvGeom::forward(cin_g, h, wd, kh, kw, opts.stride, opts.pad)?;
        let cout_g = cout / groups;
        let grid = geom.grid_len();
        let in_item = cin * h * wd;
        let mut out = vec![T::zero(); n * cout * grid];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let depthwise = cin_g == 1 && cout_g == 1;
            let mut cols = if depthwise {
                Vec::new()
            } else {
                vec![T::zero(); geom.patch_len() * grid]
            };
            for i in 0..n {
                let img = &xv[i * in_item..(i + 1) * in_item];
                let dst = &mut out[i * cout * grid..(i + 1) * cout * grid];
                if depthwise {
                    let g = ConvGeom { channels: cin, ..geom };
                    depthwise_forward(&g, img, wv, dst);
                    continue;
                }
                for grp in 0..groups {
                    im2col(&geom, &img[grp * geom.plane_len()..], &mut cols);
                    let k = geom.patch_len();
                    let wmat = MatRef::new(&wv[grp * cout_g * k..], cout_g, k);
                    gemm(
                        wmat,
                        MatRef::new(&cols, k, grid),
                        T::zero(),
                        &mut dst[grp * cout_g * grid..(grp + 1) * cout_g * grid],
                    );
                }
            }
            if let Some(b) = b {
                add_channel_bias(&mut out, self.value(b).data(), cout, grid);
            }
        }
        let value = Tensor::new(vec![n, cout, geom.out_h, geom.out_w], out)?;
        let mut deps = vec![x.0, w.0];
        deps.extend(b.map(|b| b.0));
        let needs = self.needs(&deps);
        Ok(self.push(
            value,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                geom,
                groups,
            },
            needs,
        ))
    }

    /// Fractionally-strided convolution. Weight layout is
    /// `(in_channels, out_channels, k, k)`.
    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<NodeId> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (wcin, cout, kh, kw) = self.value(w).dims4()?;
        if wcin != cin || kh != kw {
            return Err(TensorError::shape(
                "conv_transpose2d",
                format!("axis 1 (channels): input has {cin}, weight expects {wcin}"),
            ));
        }
        let geom = ConvGeom::transposed(cout, h, wd, kh, stride, pad, output_pad)?;
        let grid = geom.grid_len();
        let plane = geom.plane_len();
        let k = geom.patch_len();
        let mut out = vec![T::zero(); n * plane];
        let mut cols = vec![T::zero(); k * grid];
        {
            let xv = self.value(x).data();
            let wmat = MatRef::new(self.value(w).data(), cin, k);
            for i in 0..n {
                let xi = MatRef::new(&xv[i * cin * grid..], cin, grid);
                gemm(wmat.t(), xi, T::zero(), &mut cols);
                col2im(&geom, &cols, &mut out[i * plane..(i + 1) * plane]);
            }
            if let Some(b) = b {
                add_channel_bias(&mut out, self.value(b).data(), cout, geom.height * geom.width);
            }
        }
        let value = Tensor::new(vec![n, cout, geom.height, geom.width], out)?;
        let mut deps = vec![x.0, w.0];
        deps.extend(b.map(|b| b.0));
        let needs = self.needs(&deps);
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                geom,
            },
            needs,
        ))
    }

    /// Per-sample, per-channel normalization over the spatial axes with an
    /// optional per-channel affine transform.
    pub fn instance_norm(
        &mut self,
        x: NodeId,
        gamma: Option<NodeId>,
        beta: Option<NodeId>,
        eps: f64,
    ) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        for p in [gamma, beta].into_iter().flatten() {
            if self.value(p).numel() != c {
                return Err(TensorError::shape(
                    "instance_norm",
                    format!("affine parameter has {} entries for {c} channels", self.value(p).numel()),
                ));
            }
        }
        let m = h * w;
        let eps = T::lit(eps);
        let inv_m = T::lit(1.0 / m as f64);
        let xv = self.value(x).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); n * c];
        for (plane, (src, dst)) in xv.chunks(m).zip(xhat.chunks_mut(m)).enumerate() {
            let mean = src.iter().copied().sum::<T>() * inv_m;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_m;
            let inv = (var + eps).sqrt().recip();
            inv_std[plane] = inv;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * inv;
            }
        }
        let gv = gamma.map(|g| self.value(g).data());
        let bv = beta.map(|b| self.value(b).data());
        let mut out = xhat.clone();
        for (plane, dst) in out.chunks_mut(m).enumerate() {
            let ch = plane % c;
            let g = gv.map_or(T::one(), |g| g[ch]);
            let b = bv.map_or(T::zero(), |b| b[ch]);
            for v in dst {
                *v = *v * g + b;
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let mut deps = vec![x.0];
        deps.extend(gamma.map(|g| g.0));
        deps.extend(beta.map(|b| b.0));
        let needs = self.needs(&deps);
        Ok(self.push(
            value,
            Op::InstanceNorm {
                x: x.0,
                gamma: gamma.map(|g| g.0),
                beta: beta.map(|b| b.0),
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let needs = self.needs(&[x.0]);
        self.push(value, Op::Relu(x.0), needs)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let s = T::lit(slope);
        let value = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        let needs = self.needs(&[x.0]);
        self.push(value, Op::LeakyRelu(x.0, s), needs)
    }

    /// Leaky rectifier with one learned negative slope per channel.
    pub fn prelu(&mut self, x: NodeId, alpha: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let c = *shape.get(1).ok_or_else(|| {
            TensorError::shape("prelu", format!("input {shape:?} lacks a channel axis"))
        })?;
        if self.value(alpha).numel() != c {
            return Err(TensorError::shape(
                "prelu",
                format!("slope has {} entries for {c} channels", self.value(alpha).numel()),
            ));
        }
        let inner: usize = shape[2..].iter().product();
        let a = self.value(alpha).data();
        let mut out = self.value(x).data().to_vec();
        for (plane, chunk) in out.chunks_mut(inner.max(1)).enumerate() {
            let slope = a[plane % c];
            for v in chunk {
                if *v <= T::zero() {
                    *v *= slope;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let needs = self.needs(&[x.0, alpha.0]);
        Ok(self.push(
            value,
            Op::PRelu {
                x: x.0,
                alpha: alpha.0,
            },
            needs,
        ))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.tanh());
        let needs = self.needs(&[x.0]);
        self.push(value, Op::Tanh(x.0), needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(value, Op::Add(a.0, b.0), needs))
    }

    /// Mirror padding of the two spatial axes (edge pixel not repeated).
    pub fn reflect_pad(&mut self, x: NodeId, pad: usize) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if pad >= h || pad >= w {
            return Err(TensorError::shape(
                "reflect_pad",
                format!("padding {pad} needs spatial axes larger than {h}×{w}"),
            ));
        }
        let (oh, ow) = (h + 2 * pad, w + 2 * pad);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in xv.chunks(h * w) {
            for oy in 0..oh {
                let iy = reflect_index(oy, pad, h);
                for ox in 0..ow {
                    out.push(plane[iy * w + reflect_index(ox, pad, w)]);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let needs = self.needs(&[x.0]);
        Ok(self.push(value, Op::ReflectPad { x: x.0, pad }, needs))
    }

    pub fn reshape(&mut self, x: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let value = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(&[x.0]);
        Ok(self.push(value, Op::Reshape(x.0), needs))
    }

    /// `y = x·wᵀ + b` with `x: (n, d)`, `w: (k, d)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (&[n, d], &[k, wd]) = (&xs[..], &ws[..]) else {
            return Err(TensorError::shape(
                "linear",
                format!("expected rank-2 input and weight, got {xs:?} and {ws:?}"),
            ));
        };
        if d != wd {
            return Err(TensorError::shape(
                "linear",
                format!("axis 1: input width {d} vs weight width {wd}"),
            ));
        }
        let mut out = vec![T::zero(); n * k];
        gemm(
            MatRef::new(self.value(x).data(), n, d),
            MatRef::new(self.value(w).data(), k, d).t(),
            T::zero(),
            &mut out,
        );
        if let Some(b) = b {
            if self.value(b).numel() != k {
                return Err(TensorError::shape("linear", "bias length mismatch"));
            }
            add_channel_bias(&mut out, self.value(b).data(), k, 1);
        }
        let value = Tensor::new(vec![n, k], out)?;
        let mut deps = vec![x.0, w.0];
        deps.extend(b.map(|b| b.0));
        let needs = self.needs(&deps);
        Ok(self.push(
            value,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
            },
            needs,
        ))
    }

    /// Scales each batch row (all axes past 0) to unit Euclidean norm.
    /// A zero or non-finite row is rejected.
    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let src = self.value(x);
        let row = src.item_len();
        let mut norms = Vec::new();
        let mut out = src.data().to_vec();
        for (i, chunk) in out.chunks_mut(row.max(1)).enumerate() {
            let norm = chunk.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(norm > T::zero()) || !norm.is_finite() {
                return Err(TensorError::Degenerate {
                    op: "l2_normalize",
                    detail: format!("row {i} has norm {norm}"),
                });
            }
            for v in chunk.iter_mut() {
                *v = *v / norm;
            }
            norms.push(norm);
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        let needs = self.needs(&[x.0]);
        Ok(self.push(value, Op::L2Normalize { x: x.0, norms }, needs))
    }

    /// Mean softmax cross-entropy of `(n, k)` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let shape = self.shape(logits).to_vec();
        let &[n, k] = &shape[..] else {
            return Err(TensorError::shape(
                "softmax_cross_entropy",
                format!("expected (batch, classes), got {shape:?}"),
            ));
        };
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return Err(TensorError::shape(
                "softmax_cross_entropy",
                format!("{} labels for batch {n} over {k} classes", labels.len()),
            ));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for i in 0..n {
            let row = &lv[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - max).exp() / z;
            }
            loss += z.ln() + max - row[labels[i]];
        }
        let value = Tensor::scalar(loss / T::lit(n as f64));
        let needs = self.needs(&[logits.0]);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                probs,
                labels: labels.to_vec(),
            },
            needs,
        ))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).mean());
        let needs = self.needs(&[x.0]);
        self.push(value, Op::Mean(x.0), needs)
    }

    /// `mean((x - target)²)`.
    pub fn mean_squared_to(&mut self, x: NodeId, target: f64) -> NodeId {
        let t = T::lit(target);
        let src = self.value(x);
        let sum: T = src.data().iter().map(|&v| (v - t) * (v - t)).sum();
        let value = Tensor::scalar(sum / T::lit(src.numel().max(1) as f64));
        let needs = self.needs(&[x.0]);
        self.push(value, Op::MeanSquaredTo { x: x.0, target: t }, needs)
    }

    /// `mean(|a - b|)` over all elements.
    pub fn mean_abs_diff(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let diff = self.value(a).zip_map(self.value(b), |p, q| (p - q).abs())?;
        let value = Tensor::scalar(diff.mean());
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(value, Op::MeanAbsDiff(a.0, b.0), needs))
    }

    /// `Σ weight·term` over single-element nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let mut total = T::zero();
        let mut recorded = Vec::with_capacity(terms.len());
        for &(id, w) in terms {
            if self.value(id).numel() != 1 {
                return Err(TensorError::shape(
                    "weighted_sum",
                    format!("term has shape {:?}, expected a scalar", self.shape(id)),
                ));
            }
            let w = T::lit(w);
            total += w * self.scalar(id);
            recorded.push((id.0, w));
        }
        let ids: Vec<usize> = recorded.iter().map(|r| r.0).collect();
        let needs = self.needs(&ids);
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(recorded), needs))
    }

    /// Reverse-mode sweep from a single-element `root`. Gradients are kept
    /// for leaf nodes only.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        let root_val = self.value(root);
        if root_val.numel() != 1 {
            return Err(TensorError::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(root_val.shape().to_vec()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &gy, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, idx: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let need = |i: usize| self.nodes[i].needs_grad;
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                groups,
            } => {
                let (n, cin, h, wd) = val(*x).dims4().expect("recorded rank-4");
                let cout = val(*w).shape()[0];
                let cout_g = cout / groups;
                let grid = geom.grid_len();
                let k = geom.patch_len();
                let in_item = cin * h * wd;
                let xv = val(*x).data();
                let wv = val(*w).data();
                let gv = gy.data();
                let mut gx = need(*x).then(|| vec![T::zero(); xv.len()]);
                let mut gw = need(*w).then(|| vec![T::zero(); wv.len()]);
                if geom.channels == 1 && cout_g == 1 {
                    let g = ConvGeom {
                        channels: cin,
                        ..*geom
                    };
                    for i in 0..n {
                        depthwise_backward(
                            &g,
                            &xv[i * in_item..(i + 1) * in_item],
                            wv,
                            &gv[i * cout * grid..(i + 1) * cout * grid],
                            gx.as_deref_mut().map(|s| &mut s[i * in_item..(i + 1) * in_item]),
                            gw.as_deref_mut(),
                        );
                    }
                } else {
                    let mut cols = vec![T::zero(); k * grid];
                    let mut dcols = vec![T::zero(); k * grid];
                    for i in 0..n {
                        for grp in 0..*groups {
                            let gyg = MatRef::new(
                                &gv[(i * cout + grp * cout_g) * grid..],
                                cout_g,
                                grid,
                            );
                            let img_off = i * in_item + grp * geom.plane_len();
                            if let Some(gw) = gw.as_deref_mut() {
                                im2col(geom, &xv[img_off..], &mut cols);
                                gemm(
                                    gyg,
                                    MatRef::new(&cols, k, grid).t(),
                                    T::one(),
                                    &mut gw[grp * cout_g * k..(grp + 1) * cout_g * k],
                                );
                            }
                            if let Some(gx) = gx.as_deref_mut() {
                                let wmat = MatRef::new(&wv[grp * cout_g * k..], cout_g, k);
                                gemm(wmat.t(), gyg, T::zero(), &mut dcols);
                                col2im(geom, &dcols, &mut gx[img_off..img_off + geom.plane_len()]);
                            }
                        }
                    }
                }
                if let Some(gx) = gx {
                    accumulate(grads, *x, Tensor::new(val(*x).shape().to_vec(), gx).unwrap());
                }
                if let Some(gw) = gw {
                    accumulate(grads, *w, Tensor::new(val(*w).shape().to_vec(), gw).unwrap());
                }
                if let Some(b) = b.filter(|&b| need(b)) {
                    accumulate(grads, b, channel_sums(gv, cout, grid, val(b).shape()));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (n, cin, _, _) = val(*x).dims4().expect("recorded rank-4");
                let grid = geom.grid_len();
                let plane = geom.plane_len();
                let k = geom.patch_len();
                let xv = val(*x).data();
                let wv = val(*w).data();
                let gv = gy.data();
                let mut gx = need(*x).then(|| vec![T::zero(); xv.len()]);
                let mut gw = need(*w).then(|| vec![T::zero(); wv.len()]);
                let mut cols = vec![T::zero(); k * grid];
                for i in 0..n {
                    im2col(geom, &gv[i * plane..(i + 1) * plane], &mut cols);
                    let cols_m = MatRef::new(&cols, k, grid);
                    if let Some(gx) = gx.as_deref_mut() {
                        gemm(
                            MatRef::new(wv, cin, k),
                            cols_m,
                            T::zero(),
                            &mut gx[i * cin * grid..(i + 1) * cin * grid],
                        );
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        gemm(
                            MatRef::new(&xv[i * cin * grid..], cin, grid),
                            cols_m.t(),
                            T::one(),
                            gw,
                        );
                    }
                }
                if let Some(gx) = gx {
                    accumulate(grads, *x, Tensor::new(val(*x).shape().to_vec(), gx).unwrap());
                }
                if let Some(gw) = gw {
                    accumulate(grads, *w, Tensor::new(val(*w).shape().to_vec(), gw).unwrap());
                }
                if let Some(b) = b.filter(|&b| need(b)) {
                    let cout = geom.channels;
                    accumulate(
                        grads,
                        b,
                        channel_sums(gv, cout, geom.height * geom.width, val(b).shape()),
                    );
                }
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (_, c, h, w) = val(*x).dims4().expect("recorded rank-4");
                let m = h * w;
                let gv = gy.data();
                let gam = gamma.map(|g| val(g).data());
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut gx = need(*x).then(|| vec![T::zero(); gv.len()]);
                let m_t = T::lit(m as f64);
                for plane in 0..gv.len() / m.max(1) {
                    let ch = plane % c;
                    let g_plane = &gv[plane * m..(plane + 1) * m];
                    let xh = &xhat[plane * m..(plane + 1) * m];
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for (&g, &xh) in g_plane.iter().zip(xh) {
                        sum_g += g;
                        sum_gx += g * xh;
                    }
                    dgamma[ch] += sum_gx;
                    dbeta[ch] += sum_g;
                    if let Some(gx) = gx.as_deref_mut() {
                        let scale = gam.map_or(T::one(), |g| g[ch]);
                        let k = scale * inv_std[plane] / m_t;
                        for ((d, &g), &xh) in gx[plane * m..(plane + 1) * m]
                            .iter_mut()
                            .zip(g_plane)
                            .zip(xh)
                        {
                            *d = k * (m_t * g - sum_g - xh * sum_gx);
                        }
                    }
                }
                if let Some(gx) = gx {
                    accumulate(grads, *x, Tensor::new(val(*x).shape().to_vec(), gx).unwrap());
                }
                if let Some(g) = gamma.filter(|&g| need(g)) {
                    accumulate(grads, g, Tensor::new(val(g).shape().to_vec(), dgamma).unwrap());
                }
                if let Some(b) = beta.filter(|&b| need(b)) {
                    accumulate(grads, b, Tensor::new(val(b).shape().to_vec(), dbeta).unwrap());
                }
            }
            Op::Relu(x) => {
                let g = gy
                    .zip_map(val(*x), |g, v| if v > T::zero() { g } else { T::zero() })
                    .unwrap();
                accumulate(grads, *x, g);
            }
            Op::LeakyRelu(x, s) => {
                let s = *s;
                let g = gy
                    .zip_map(val(*x), |g, v| if v > T::zero() { g } else { g * s })
                    .unwrap();
                accumulate(grads, *x, g);
            }
            Op::PRelu { x, alpha } => {
                let shape = val(*x).shape();
                let c = shape[1];
                let inner: usize = shape[2..].iter().product::<usize>().max(1);
                let a = val(*alpha).data();
                let xv = val(*x).data();
                let mut gx = gy.data().to_vec();
                let mut ga = vec![T::zero(); c];
                for (plane, (gchunk, xchunk)) in
                    gx.chunks_mut(inner).zip(xv.chunks(inner)).enumerate()
                {
                    let ch = plane % c;
                    for (g, &v) in gchunk.iter_mut().zip(xchunk) {
                        if v <= T::zero() {
                            ga[ch] += *g * v;
                            *g *= a[ch];
                        }
                    }
                }
                if need(*x) {
                    accumulate(grads, *x, Tensor::new(shape.to_vec(), gx).unwrap());
                }
                if need(*alpha) {
                    accumulate(grads, *alpha, Tensor::new(val(*alpha).shape().to_vec(), ga).unwrap());
                }
            }
            Op::Tanh(x) => {
                let g = gy
                    .zip_map(&node.value, |g, y| g * (T::one() - y * y))
                    .unwrap();
                accumulate(grads, *x, g);
            }
            Op::Add(a, b) => {
                if need(*a) {
                    accumulate(grads, *a, gy.clone());
                }
                if need(*b) {
                    accumulate(grads, *b, gy.clone());
                }
            }
            Op::ReflectPad { x, pad } => {
                let (_, _, h, w) = val(*x).dims4().expect("recorded rank-4");
                let (oh, ow) = (h + 2 * pad, w + 2 * pad);
                let mut gx = vec![T::zero(); val(*x).numel()];
                for (src, dst) in gy.data().chunks(oh * ow).zip(gx.chunks_mut(h * w)) {
                    for oy in 0..oh {
                        let iy = reflect_index(oy, *pad, h);
                        for ox in 0..ow {
                            dst[iy * w + reflect_index(ox, *pad, w)] += src[oy * ow + ox];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(val(*x).shape().to_vec(), gx).unwrap());
            }
            Op::Reshape(x) => {
                let g = gy.clone().reshape(val(*x).shape().to_vec()).unwrap();
                accumulate(grads, *x, g);
            }
            Op::Linear { x, w, b } => {
                let (n, d) = (val(*x).shape()[0], val(*x).shape()[1]);
                let k = val(*w).shape()[0];
                let gym = MatRef::new(gy.data(), n, k);
                if need(*x) {
                    let mut gx = vec![T::zero(); n * d];
                    gemm(gym, MatRef::new(val(*w).data(), k, d), T::zero(), &mut gx);
                    accumulate(grads, *x, Tensor::new(vec![n, d], gx).unwrap());
                }
                if need(*w) {
                    let mut gw = vec![T::zero(); k * d];
                    gemm(gym.t(), MatRef::new(val(*x).data(), n, d), T::zero(), &mut gw);
                    accumulate(grads, *w, Tensor::new(vec![k, d], gw).unwrap());
                }
                if let Some(b) = b.filter(|&b| need(b)) {
                    accumulate(grads, b, channel_sums(gy.data(), k, 1, val(b).shape()));
                }
            }
            Op::L2Normalize { x, norms } => {
                let row = node.value.item_len().max(1);
                let mut gx = vec![T::zero(); gy.numel()];
                for (i, ((d, g), y)) in gx
                    .chunks_mut(row)
                    .zip(gy.data().chunks(row))
                    .zip(node.value.data().chunks(row))
                    .enumerate()
                {
                    let dot: T = g.iter().zip(y).map(|(&a, &b)| a * b).sum();
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                        *d = (g - y * dot) / norms[i];
                    }
                }
                accumulate(grads, *x, Tensor::new(val(*x).shape().to_vec(), gx).unwrap());
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let n = labels.len();
                let k = probs.len() / n.max(1);
                let scale = gy.data()[0] / T::lit(n as f64);
                let mut g: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    g[i * k + l] -= scale;
                }
                accumulate(grads, *logits, Tensor::new(vec![n, k], g).unwrap());
            }
            Op::Mean(x) => {
                let v = val(*x);
                let g = gy.data()[0] / T::lit(v.numel().max(1) as f64);
                accumulate(grads, *x, Tensor::full(v.shape().to_vec(), g));
            }
            Op::MeanSquaredTo { x, target } => {
                let v = val(*x);
                let k = T::lit(2.0) * gy.data()[0] / T::lit(v.numel().max(1) as f64);
                let t = *target;
                accumulate(grads, *x, v.map(|e| k * (e - t)));
            }
            Op::MeanAbsDiff(a, b) => {
                let k = gy.data()[0] / T::lit(val(*a).numel().max(1) as f64);
                let sign = val(*a)
                    .zip_map(val(*b), |p, q| {
                        if p > q {
                            k
                        } else if p < q {
                            -k
                        } else {
                            T::zero()
                        }
                    })
                    .unwrap();
                if need(*b) {
                    accumulate(grads, *b, sign.map(|s| -s));
                }
                if need(*a) {
                    accumulate(grads, *a, sign);
                }
            }
            Op::WeightedSum(terms) => {
                let g = gy.data()[0];
                for &(id, w) in terms {
                    if need(id) {
                        accumulate(grads, id, Tensor::full(val(id).shape().to_vec(), g * w));
                    }
                }
            }
        }
    }
}

fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], channels: usize, inner: usize) {
    for (plane, chunk) in out.chunks_mut(inner.max(1)).enumerate() {
        let b = bias[plane % channels];
        for v in chunk {
            *v += b;
        }
    }
}

fn channel_sums<T: Scalar>(g: &[T], channels: usize, inner: usize, shape: &[usize]) -> Tensor<T> {
    let mut sums = vec![T::zero(); channels];
    for (plane, chunk) in g.chunks(inner.max(1)).enumerate() {
        sums[plane % channels] += chunk.iter().copied().sum::<T>();
    }
    Tensor::new(shape.to_vec(), sums).unwrap()
}

fn reflect_index(padded: usize, pad: usize, len: usize) -> usize {
    let i = padded as isize - pad as isize;
    let last = len as isize - 1;
    let r = if i < 0 {
        -i
    } else if i > last {
        2 * last - i
    } else {
        i
    };
    r as usize
}
