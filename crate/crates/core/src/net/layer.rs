use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One stage of a feedforward network.
///
/// Convolutions are valid-padding with stride 1; pooling is a 2×2 window with
/// stride 2 that drops any odd trailing row or column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    Relu,
    Conv2d {
        kernel_h: usize,
        kernel_w: usize,
        in_channels: usize,
        out_channels: usize,
    },
    Maxpool2d,
    Dropout {
        keep: f64,
    },
    Flatten,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu => "relu",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Maxpool2d => "maxpool2d",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Flatten => "flatten",
        }
    }

    /// Output shape for a given input shape, or an error when they don't compose.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |what: &str| {
            Err(Error::Parameter(format!(
                "{} layer cannot take input of shape {input:?}: {what}",
                self.kind()
            )))
        };
        match *self {
            LayerSpec::Dense { in_dim, out_dim } => {
                if input != [in_dim] {
                    return mismatch(&format!("expected [{in_dim}]"));
                }
                Ok(vec![out_dim])
            }
            LayerSpec::Conv2d {
                kernel_h,
                kernel_w,
                in_channels,
                out_channels,
            } => {
                let &[c, h, w] = input else {
                    return mismatch("expected [channels, height, width]");
                };
                if c != in_channels || h < kernel_h || w < kernel_w {
                    return mismatch("channel count or spatial extent does not fit the kernel");
                }
                Ok(vec![out_channels, h - kernel_h + 1, w - kernel_w + 1])
            }
            LayerSpec::Maxpool2d => {
                let &[c, h, w] = input else {
                    return mismatch("expected [channels, height, width]");
                };
                if h < 2 || w < 2 {
                    return mismatch("spatial extent smaller than the 2x2 window");
                }
                Ok(vec![c, h / 2, w / 2])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Dropout { keep } => {
                if !(keep > 0.0 && keep <= 1.0) {
                    return Err(Error::Parameter(format!(
                        "dropout keep-probability must be in (0, 1], got {keep}"
                    )));
                }
                Ok(input.to_vec())
            }
        }
    }

    /// `(weight_len, bias_len)` for parametrized layers, `(0, 0)` otherwise.
    pub fn param_lens(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Dense { in_dim, out_dim } => (in_dim * out_dim, out_dim),
            LayerSpec::Conv2d {
                kernel_h,
                kernel_w,
                in_channels,
                out_channels,
            } => (
                out_channels * in_channels * kernel_h * kernel_w,
                out_channels,
            ),
            _ => (0, 0),
        }
    }

    fn fans(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Dense { in_dim, out_dim } => (in_dim, out_dim),
            LayerSpec::Conv2d {
                kernel_h,
                kernel_w,
                in_channels,
                out_channels,
            } => (
                in_channels * kernel_h * kernel_w,
                out_channels * kernel_h * kernel_w,
            ),
            _ => (0, 0),
        }
    }
}

/// A layer together with its parameters and resolved shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub(crate) spec: LayerSpec,
    pub(crate) weights: Vec<f64>,
    pub(crate) bias: Vec<f64>,
    pub(crate) in_shape: Vec<usize>,
    pub(crate) out_shape: Vec<usize>,
}

/// Per-layer state recorded on the forward pass and consumed by backprop.
#[derive(Debug, Clone)]
pub(crate) enum Aux {
    None,
    Mask(Vec<f64>),
    PoolArgmax(Vec<usize>),
}

impl Layer {
    pub(crate) fn glorot<R: Rng + ?Sized>(
        spec: LayerSpec,
        in_shape: Vec<usize>,
        out_shape: Vec<usize>,
        rng: &mut R,
    ) -> Layer {
        let (wlen, blen) = spec.param_lens();
        let (fan_in, fan_out) = spec.fans();
        let weights = if wlen > 0 {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..wlen).map(|_| rng.random_range(-limit..=limit)).collect()
        } else {
            Vec::new()
        };
        Layer {
            spec,
            weights,
            bias: vec![0.0; blen],
            in_shape,
            out_shape,
        }
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.in_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub(crate) fn forward<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        train_rng: Option<&mut R>,
    ) -> (Vec<f64>, Aux) {
        match self.spec {
            LayerSpec::Dense { in_dim, out_dim } => {
                let mut y = self.bias.clone();
                for (o, yo) in y.iter_mut().enumerate().take(out_dim) {
                    let row = &self.weights[o * in_dim..(o + 1) * in_dim];
                    *yo += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
                }
                (y, Aux::None)
            }
            LayerSpec::Relu => (x.iter().map(|&v| v.max(0.0)).collect(), Aux::None),
            LayerSpec::Conv2d {
                kernel_h,
                kernel_w,
                in_channels,
                out_channels,
            } => {
                let (h, w) = (self.in_shape[1], self.in_shape[2]);
                let (oh, ow) = (self.out_shape[1], self.out_shape[2]);
                let mut y = vec![0.0; out_channels * oh * ow];
                for oc in 0..out_channels {
                    for i in 0..oh {
                        for j in 0..ow {
                            let mut acc = self.bias[oc];
                            for ic in 0..in_channels {
                                for ki in 0..kernel_h {
                                    let xrow = (ic * h + i + ki) * w + j;
                                    let wrow = ((oc * in_channels + ic) * kernel_h + ki) * kernel_w;
                                    for kj in 0..kernel_w {
                                        acc += self.weights[wrow + kj] * x[xrow + kj];
                                    }
                                }
                            }
                            y[(oc * oh + i) * ow + j] = acc;
                        }
                    }
                }
                (y, Aux::None)
            }
            LayerSpec::Maxpool2d => {
                let (c, h, w) = (self.in_shape[0], self.in_shape[1], self.in_shape[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut y = vec![0.0; c * oh * ow];
                let mut arg = vec![0; c * oh * ow];
                for ch in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            let mut best = (ch * h + 2 * i) * w + 2 * j;
                            for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                                let idx = (ch * h + 2 * i + di) * w + 2 * j + dj;
                                if x[idx] > x[best] {
                                    best = idx;
                                }
                            }
                            let o = (ch * oh + i) * ow + j;
                            y[o] = x[best];
                            arg[o] = best;
                        }
                    }
                }
                (y, Aux::PoolArgmax(arg))
            }
            LayerSpec::Dropout { keep } => match train_rng {
                Some(rng) if keep < 1.0 => {
                    let mask: Vec<f64> = x
                        .iter()
                        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    let y = x.iter().zip(&mask).map(|(v, m)| v * m).collect();
                    (y, Aux::Mask(mask))
                }
                _ => (x.to_vec(), Aux::None),
            },
            LayerSpec::Flatten => (x.to_vec(), Aux::None),
        }
    }

    /// Backpropagate `grad_out` through this layer. When `param_grads` is
    /// given, the weight and bias gradients are accumulated into it.
    pub(crate) fn backward(
        &self,
        input: &[f64],
        aux: &Aux,
        grad_out: &[f64],
        param_grads: Option<(&mut [f64], &mut [f64])>,
    ) -> Vec<f64> {
        match self.spec {
            LayerSpec::Dense { in_dim, out_dim } => {
                let mut gx = vec![0.0; in_dim];
                for (row, &g) in self.weights.chunks_exact(in_dim).zip(&grad_out[..out_dim]) {
                    if g == 0.0 {
                        continue;
                    }
                    for (gxi, w) in gx.iter_mut().zip(row) {
                        *gxi += w * g;
                    }
                }
                if let Some((gw, gb)) = param_grads {
                    for o in 0..out_dim {
                        let g = grad_out[o];
                        gb[o] += g;
                        if g == 0.0 {
                            continue;
                        }
                        for (gwi, v) in gw[o * in_dim..(o + 1) * in_dim].iter_mut().zip(input) {
                            *gwi += g * v;
                        }
                    }
                }
                gx
            }
            LayerSpec::Relu => input
                .iter()
                .zip(grad_out)
                .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                .collect(),
            LayerSpec::Conv2d {
                kernel_h,
                kernel_w,
                in_channels,
                out_channels,
            } => {
                let (h, w) = (self.in_shape[1], self.in_shape[2]);
                let (oh, ow) = (self.out_shape[1], self.out_shape[2]);
                let mut gx = vec![0.0; input.len()];
                let mut grads = param_grads;
                for oc in 0..out_channels {
                    for i in 0..oh {
                        for j in 0..ow {
                            let g = grad_out[(oc * oh + i) * ow + j];
                            if g == 0.0 {
                                continue;
                            }
                            if let Some((_, gb)) = grads.as_mut() {
                                gb[oc] += g;
                            }
                            for ic in 0..in_channels {
                                for ki in 0..kernel_h {
                                    let xrow = (ic * h + i + ki) * w + j;
                                    let wrow = ((oc * in_channels + ic) * kernel_h + ki) * kernel_w;
                                    for kj in 0..kernel_w {
                                        gx[xrow + kj] += self.weights[wrow + kj] * g;
                                        if let Some((gw, _)) = grads.as_mut() {
                                            gw[wrow + kj] += input[xrow + kj] * g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                gx
            }
            LayerSpec::Maxpool2d => {
                let Aux::PoolArgmax(arg) = aux else {
                    unreachable!("maxpool forward always records argmax")
                };
                let mut gx = vec![0.0; input.len()];
                for (o, &src) in arg.iter().enumerate() {
                    gx[src] += grad_out[o];
                }
                gx
            }
            LayerSpec::Dropout { .. } => match aux {
                Aux::Mask(mask) => grad_out.iter().zip(mask).map(|(g, m)| g * m).collect(),
                _ => grad_out.to_vec(),
            },
            LayerSpec::Flatten => grad_out.to_vec(),
        }
    }
}
