//! Declarative layer stacks.
//!
//! Victims and the perturbation generator are all small feed-forward
//! networks. Describing them as a [`Stack`] of layer specs keeps weight
//! initialization, the forward pass, and checkpoint manifests in one place:
//! an architecture serializes to JSON next to its weights, and loading
//! rebuilds exactly the network that was saved.

use serde::{Deserialize, Serialize};

use crate::error::{MtaError, Result};
use crate::rng::DetRng;
use crate::tensor::{ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(&self, t: Tensor) -> Tensor {
        match self {
            Activation::None => t,
            Activation::Relu => t.relu(),
            Activation::Tanh => t.tanh(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { out_ch: usize, k: usize, stride: usize, pad: usize, act: Activation },
    /// Two same-width k x k convs (stride 1, shape-preserving padding) with a
    /// skip connection: `x + conv2(relu(conv1(x)))`.
    Residual { k: usize },
    Upsample2x,
    Flatten,
    Dense { out_dim: usize, act: Activation },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stack {
    pub layers: Vec<LayerSpec>,
}

/// Feature shape while walking a stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feat {
    Chw(usize, usize, usize),
    Flat(usize),
}

impl Stack {
    pub fn new(layers: Vec<LayerSpec>) -> Self {
        Stack { layers }
    }

    /// Create He-initialized weights for this stack under `prefix` and
    /// return the output feature shape. Parameter names are
    /// `{prefix}l{i}/w` and `{prefix}l{i}/b` (residual blocks add `/c1`,
    /// `/c2` segments).
    pub fn init_params(
        &self,
        in_shape: Feat,
        prefix: &str,
        params: &mut ParamSet,
        rng: &mut DetRng,
    ) -> Result<Feat> {
        let mut shape = in_shape;
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv { out_ch, k, stride, pad, .. } => {
                    let (c, h, w) = expect_chw(shape, "conv layer")?;
                    let std = (2.0 / (c * k * k) as f64).sqrt();
                    params.insert(
                        format!("{prefix}l{i}/w"),
                        Tensor::randn(rng, &[out_ch, c, k, k], std).to_param(),
                    );
                    params.insert(format!("{prefix}l{i}/b"), zero_param(&[out_ch]));
                    let ho = conv_out(h, k, stride, pad)?;
                    let wo = conv_out(w, k, stride, pad)?;
                    shape = Feat::Chw(out_ch, ho, wo);
                }
                LayerSpec::Residual { k } => {
                    let (c, _, _) = expect_chw(shape, "residual block")?;
                    let std = (2.0 / (c * k * k) as f64).sqrt();
                    for seg in ["c1", "c2"] {
                        params.insert(
                            format!("{prefix}l{i}/{seg}/w"),
                            Tensor::randn(rng, &[c, c, k, k], std).to_param(),
                        );
                        params.insert(format!("{prefix}l{i}/{seg}/b"), zero_param(&[c]));
                    }
                }
                LayerSpec::Upsample2x => {
                    let (c, h, w) = expect_chw(shape, "upsample layer")?;
                    shape = Feat::Chw(c, 2 * h, 2 * w);
                }
                LayerSpec::Flatten => {
                    let (c, h, w) = expect_chw(shape, "flatten layer")?;
                    shape = Feat::Flat(c * h * w);
                }
                LayerSpec::Dense { out_dim, .. } => {
                    let d = match shape {
                        Feat::Flat(d) => d,
                        Feat::Chw(..) => {
                            return Err(MtaError::shape(
                                "stack",
                                format!("dense layer {i} needs flattened input"),
                            ))
                        }
                    };
                    let std = (2.0 / d as f64).sqrt();
                    params.insert(
                        format!("{prefix}l{i}/w"),
                        Tensor::randn(rng, &[d, out_dim], std).to_param(),
                    );
                    params.insert(format!("{prefix}l{i}/b"), zero_param(&[out_dim]));
                    shape = Feat::Flat(out_dim);
                }
            }
        }
        Ok(shape)
    }

    /// Forward pass using parameters created by [`Stack::init_params`] with
    /// the same prefix.
    pub fn forward(&self, params: &ParamSet, prefix: &str, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match *layer {
                LayerSpec::Conv { out_ch, k: _, stride, pad, act } => {
                    let w = param(params, &format!("{prefix}l{i}/w"))?;
                    let b = param(params, &format!("{prefix}l{i}/b"))?;
                    let y = cur.conv2d(&w, stride, pad)?;
                    let y = y.add(&b.reshape(&[1, out_ch, 1, 1])?)?;
                    act.apply(y)
                }
                LayerSpec::Residual { k } => {
                    let pad = k / 2;
                    let c = cur.shape()[1];
                    let w1 = param(params, &format!("{prefix}l{i}/c1/w"))?;
                    let b1 = param(params, &format!("{prefix}l{i}/c1/b"))?;
                    let w2 = param(params, &format!("{prefix}l{i}/c2/w"))?;
                    let b2 = param(params, &format!("{prefix}l{i}/c2/b"))?;
                    let h = cur.conv2d(&w1, 1, pad)?.add(&b1.reshape(&[1, c, 1, 1])?)?.relu();
                    let h = h.conv2d(&w2, 1, pad)?.add(&b2.reshape(&[1, c, 1, 1])?)?;
                    cur.add(&h)?
                }
                LayerSpec::Upsample2x => cur.upsample2x_nearest()?,
                LayerSpec::Flatten => {
                    let n = cur.shape()[0];
                    let rest: usize = cur.shape()[1..].iter().product();
                    cur.reshape(&[n, rest])?
                }
                LayerSpec::Dense { act, .. } => {
                    let w = param(params, &format!("{prefix}l{i}/w"))?;
                    let b = param(params, &format!("{prefix}l{i}/b"))?;
                    act.apply(cur.matmul(&w)?.add(&b)?)
                }
            };
        }
        Ok(cur)
    }

    /// Output shape for a given input shape, without creating parameters.
    pub fn out_shape(&self, in_shape: Feat) -> Result<Feat> {
        let mut params = ParamSet::new();
        let mut rng = DetRng::from_seed(0);
        self.init_params(in_shape, "shape-probe/", &mut params, &mut rng)
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if size + 2 * pad < k {
        return Err(MtaError::shape(
            "stack",
            format!("kernel {k} larger than padded input {}", size + 2 * pad),
        ));
    }
    Ok((size + 2 * pad - k) / stride + 1)
}

fn expect_chw(shape: Feat, what: &str) -> Result<(usize, usize, usize)> {
    match shape {
        Feat::Chw(c, h, w) => Ok((c, h, w)),
        Feat::Flat(_) => Err(MtaError::shape("stack", format!("{what} needs image input"))),
    }
}

fn param(params: &ParamSet, name: &str) -> Result<Tensor> {
    params
        .get(name)
        .cloned()
        .ok_or_else(|| MtaError::Graph(format!("missing parameter {name}")))
}

fn zero_param(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::param(vec![0.0; n], shape).expect("zero param")
}

impl Tensor {
    /// Re-tag a constant tensor as a trainable parameter.
    pub fn to_param(&self) -> Tensor {
        Tensor::param(self.data().to_vec(), self.shape()).expect("param from tensor")
    }
}
