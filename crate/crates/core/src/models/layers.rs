use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Shape of one input sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputShape {
    Vector(usize),
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl InputShape {
    pub fn numel(self) -> usize {
        match self {
            InputShape::Vector(d) => d,
            InputShape::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }

    /// Batch tensor shape for `n` samples.
    pub fn batch_shape(self, n: usize) -> Vec<usize> {
        match self {
            InputShape::Vector(d) => vec![n, d],
            InputShape::Image {
                channels,
                height,
                width,
            } => vec![n, channels, height, width],
        }
    }
}

/// One layer of a trunk or branch description.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear { out: usize, relu: bool },
    /// Stride-1 "same" convolution; `kernel` must be odd.
    Conv { out_channels: usize, kernel: usize, relu: bool },
    MaxPool2,
    Flatten,
}

impl LayerSpec {
    fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::MaxPool2 => "max_pool2",
            LayerSpec::Flatten => "flatten",
        }
    }

    /// Output sample shape, or a reason why `input` is not accepted.
    pub fn output_shape(&self, input: InputShape) -> std::result::Result<InputShape, String> {
        match (self, input) {
            (LayerSpec::Linear { out, .. }, InputShape::Vector(_)) => {
                if *out == 0 {
                    Err("zero output width".into())
                } else {
                    Ok(InputShape::Vector(*out))
                }
            }
            (LayerSpec::Linear { .. }, InputShape::Image { .. }) => {
                Err("linear layer needs a flattened input".into())
            }
            (
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    ..
                },
                InputShape::Image { height, width, .. },
            ) => {
                if *out_channels == 0 {
                    Err("zero output channels".into())
                } else if kernel % 2 == 0 || *kernel == 0 {
                    Err(format!("kernel {kernel} must be odd"))
                } else {
                    Ok(InputShape::Image {
                        channels: *out_channels,
                        height,
                        width,
                    })
                }
            }
            (LayerSpec::Conv { .. }, InputShape::Vector(_)) => {
                Err("convolution needs an image input".into())
            }
            (
                LayerSpec::MaxPool2,
                InputShape::Image {
                    channels,
                    height,
                    width,
                },
            ) => {
                if height < 2 || width < 2 {
                    Err(format!("cannot pool a {height}x{width} map"))
                } else {
                    Ok(InputShape::Image {
                        channels,
                        height: height / 2,
                        width: width / 2,
                    })
                }
            }
            (LayerSpec::MaxPool2, InputShape::Vector(_)) => {
                Err("pooling needs an image input".into())
            }
            (LayerSpec::Flatten, s) => Ok(InputShape::Vector(s.numel())),
        }
    }
}

/// Walks `specs` from `input`, naming the first offending layer on failure.
pub fn infer_output(input: InputShape, specs: &[LayerSpec], offset: usize) -> Result<InputShape> {
    specs.iter().enumerate().try_fold(input, |shape, (i, spec)| {
        spec.output_shape(shape).map_err(|reason| Error::InvalidLayer {
            index: offset + i,
            kind: spec.kind().into(),
            reason,
        })
    })
}

/// Fan-in scaled uniform init, bound `sqrt(6 / fan_in)`.
pub(crate) fn fan_in_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

#[derive(Clone, Debug)]
pub(crate) enum Layer {
    Linear {
        weight: ParamId,
        bias: ParamId,
        relu: bool,
    },
    Conv {
        weight: ParamId,
        bias: ParamId,
        pad: usize,
        relu: bool,
    },
    MaxPool2,
    Flatten,
}

/// A compiled sequence of layers whose parameters live in a [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub(crate) struct Stack {
    layers: Vec<Layer>,
}

impl Stack {
    pub(crate) fn build(
        specs: &[LayerSpec],
        input: InputShape,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<(Self, InputShape)> {
        let mut shape = input;
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let next = infer_output(shape, std::slice::from_ref(spec), i)?;
            let layer = match (spec, shape) {
                (LayerSpec::Linear { out, relu }, InputShape::Vector(fan_in)) => {
                    let weight = store.add(
                        format!("{prefix}.{i}.weight"),
                        fan_in_uniform(vec![fan_in, *out], fan_in, rng),
                    );
                    let bias = store.add(format!("{prefix}.{i}.bias"), Tensor::zeros(vec![*out]));
                    Layer::Linear {
                        weight,
                        bias,
                        relu: *relu,
                    }
                }
                (
                    LayerSpec::Conv {
                        out_channels,
                        kernel,
                        relu,
                    },
                    InputShape::Image { channels, .. },
                ) => {
                    let fan_in = channels * kernel * kernel;
                    let weight = store.add(
                        format!("{prefix}.{i}.weight"),
                        fan_in_uniform(vec![*out_channels, channels, *kernel, *kernel], fan_in, rng),
                    );
                    let bias = store.add(
                        format!("{prefix}.{i}.bias"),
                        Tensor::zeros(vec![*out_channels]),
                    );
                    Layer::Conv {
                        weight,
                        bias,
                        pad: kernel / 2,
                        relu: *relu,
                    }
                }
                (LayerSpec::MaxPool2, _) => Layer::MaxPool2,
                (LayerSpec::Flatten, _) => Layer::Flatten,
                _ => unreachable!("rejected by infer_output"),
            };
            layers.push(layer);
            shape = next;
        }
        Ok((Self { layers }, shape))
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub(crate) fn param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                Layer::Linear { weight, bias, .. } | Layer::Conv { weight, bias, .. } => {
                    vec![*weight, *bias]
                }
                _ => vec![],
            })
            .collect()
    }

    pub(crate) fn forward(&self, tape: &mut Tape, bound: &Bound, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = match layer {
                Layer::Linear { weight, bias, relu } => {
                    let h = tape.matmul(x, bound.var(*weight))?;
                    let h = tape.bias_add(h, bound.var(*bias))?;
                    if *relu {
                        tape.relu(h)
                    } else {
                        h
                    }
                }
                Layer::Conv {
                    weight,
                    bias,
                    pad,
                    relu,
                } => {
                    let h = tape.conv2d(x, bound.var(*weight), bound.var(*bias), *pad)?;
                    if *relu {
                        tape.relu(h)
                    } else {
                        h
                    }
                }
                Layer::MaxPool2 => tape.max_pool2(x)?,
                Layer::Flatten => tape.flatten(x)?,
            };
        }
        Ok(x)
    }
}
