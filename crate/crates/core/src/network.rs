//! Declarative layer graphs: the structure Lipschitz estimation walks over.

use crate::conv::ConvKernel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Running statistics and affine parameters of an inference-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

impl BatchNormParams {
    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.scale.len();
        if c == 0 {
            return Err(Error::validation(
                "scale",
                "batch norm needs at least one channel",
            ));
        }
        for (name, v) in [
            ("shift", &self.shift),
            ("mean", &self.mean),
            ("var", &self.var),
        ] {
            if v.len() != c {
                return Err(Error::validation(
                    name,
                    format!("has {} entries, scale has {c}", v.len()),
                ));
            }
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::validation(
                "eps",
                format!("must be positive, got {}", self.eps),
            ));
        }
        if let Some(i) = self.var.iter().position(|&v| !(v >= 0.0)) {
            return Err(Error::validation(
                "var",
                format!("channel {i} has negative or NaN variance {}", self.var[i]),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    /// `weight` is (out × in); inputs of any shape are flattened.
    Dense {
        weight: Tensor,
        bias: Option<Vec<f64>>,
    },
    Conv {
        kernel: ConvKernel,
        bias: Option<Vec<f64>>,
    },
    BatchNorm(BatchNormParams),
    Activation {
        lipschitz: f64,
    },
    /// Non-overlapping pooling over `window`-sized tiles in every spatial dim.
    Pool {
        lipschitz: f64,
        window: usize,
    },
    Residual {
        shortcut: Vec<LayerSpec>,
        main: Vec<LayerSpec>,
        inner_lipschitz: f64,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::BatchNorm(_) => "batchnorm",
            LayerSpec::Activation { .. } => "activation",
            LayerSpec::Pool { .. } => "pool",
            LayerSpec::Residual { .. } => "residual",
        }
    }

    pub fn relu() -> Self {
        LayerSpec::Activation { lipschitz: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    /// Shape of one input sample: `[features]` or `(channels, spatial..)`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
}

fn shape_err(layer: &str, reason: impl Into<String>) -> Error {
    Error::Estimation {
        layer: layer.to_string(),
        reason: reason.into(),
    }
}

/// Output shape of `layer` applied to `input`, or an error naming `id`.
pub(crate) fn layer_output_shape(
    id: &str,
    layer: &LayerSpec,
    input: &[usize],
) -> Result<Vec<usize>> {
    match layer {
        LayerSpec::Dense { weight, bias } => {
            let (out, inp) = weight.dims2().map_err(|e| shape_err(id, e.to_string()))?;
            let flat: usize = input.iter().product();
            if flat != inp {
                return Err(shape_err(
                    id,
                    format!("dense layer expects {inp} inputs, previous layer yields {flat} ({input:?})"),
                ));
            }
            if let Some(b) = bias {
                if b.len() != out {
                    return Err(shape_err(
                        id,
                        format!("bias has {} entries, expected {out}", b.len()),
                    ));
                }
            }
            Ok(vec![out])
        }
        LayerSpec::Conv { kernel, bias } => {
            let shape = kernel
                .output_shape(input)
                .map_err(|e| shape_err(id, e.to_string()))?;
            if let Some(b) = bias {
                if b.len() != kernel.c_out() {
                    return Err(shape_err(
                        id,
                        format!("bias has {} entries, expected {}", b.len(), kernel.c_out()),
                    ));
                }
            }
            Ok(shape)
        }
        LayerSpec::BatchNorm(bn) => {
            bn.validate().map_err(|e| shape_err(id, e.to_string()))?;
            let channels = input[0];
            if bn.channels() != channels {
                return Err(shape_err(
                    id,
                    format!(
                        "batch norm has {} channels, input {input:?} has {channels}",
                        bn.channels()
                    ),
                ));
            }
            Ok(input.to_vec())
        }
        LayerSpec::Activation { lipschitz } => {
            if !(*lipschitz > 0.0) || !lipschitz.is_finite() {
                return Err(shape_err(
                    id,
                    format!("Lipschitz constant must be positive, got {lipschitz}"),
                ));
            }
            Ok(input.to_vec())
        }
        LayerSpec::Pool { lipschitz, window } => {
            if !(*lipschitz > 0.0) || !lipschitz.is_finite() {
                return Err(shape_err(
                    id,
                    format!("Lipschitz constant must be positive, got {lipschitz}"),
                ));
            }
            if *window == 0 {
                return Err(shape_err(id, "pool window must be at least 1"));
            }
            if input.len() < 2 {
                return Err(shape_err(
                    id,
                    format!("pooling needs spatial dims, input is {input:?}"),
                ));
            }
            let mut out = vec![input[0]];
            for &s in &input[1..] {
                if s < *window {
                    return Err(shape_err(
                        id,
                        format!("window {window} larger than spatial size {s}"),
                    ));
                }
                out.push(s / window);
            }
            Ok(out)
        }
        LayerSpec::Residual {
            shortcut,
            main,
            inner_lipschitz,
        } => {
            if !(*inner_lipschitz > 0.0) || !inner_lipschitz.is_finite() {
                return Err(shape_err(
                    id,
                    format!("inner Lipschitz constant must be positive, got {inner_lipschitz}"),
                ));
            }
            if main.is_empty() {
                return Err(shape_err(id, "residual block has an empty main path"));
            }
            let s = path_output_shape(&format!("{id}.shortcut"), shortcut, input)?;
            let m = path_output_shape(&format!("{id}.main"), main, input)?;
            if s != m {
                return Err(shape_err(
                    id,
                    format!("shortcut yields {s:?} but main path yields {m:?}"),
                ));
            }
            Ok(m)
        }
    }
}

pub(crate) fn path_output_shape(
    prefix: &str,
    layers: &[LayerSpec],
    input: &[usize],
) -> Result<Vec<usize>> {
    let mut shape = input.to_vec();
    for (i, layer) in layers.iter().enumerate() {
        shape = layer_output_shape(&format!("{prefix}[{i}]"), layer, &shape)?;
    }
    Ok(shape)
}

impl NetworkSpec {
    /// Checks that adjacent layers compose and that the network ends in
    /// `num_classes` logits. Returns the output shape.
    pub fn validate(&self) -> Result<Vec<usize>> {
        if self.layers.is_empty() {
            return Err(Error::validation("layers", "network has no layers"));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::validation(
                "input_shape",
                format!("invalid input shape {:?}", self.input_shape),
            ));
        }
        let out = path_output_shape("layers", &self.layers, &self.input_shape)?;
        let flat: usize = out.iter().product();
        if flat != self.num_classes {
            return Err(Error::validation(
                "num_classes",
                format!(
                    "network outputs {flat} values ({out:?}), expected {}",
                    self.num_classes
                ),
            ));
        }
        Ok(out)
    }

    /// Number of weight-bearing layers along the longest path.
    pub fn depth(&self) -> usize {
        fn path_depth(layers: &[LayerSpec]) -> usize {
            layers
                .iter()
                .map(|l| match l {
                    LayerSpec::Dense { .. } | LayerSpec::Conv { .. } => 1,
                    LayerSpec::Residual { shortcut, main, .. } => {
                        path_depth(shortcut).max(path_depth(main))
                    }
                    _ => 0,
                })
                .sum()
        }
        path_depth(&self.layers)
    }
}
