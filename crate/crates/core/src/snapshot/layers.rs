//! Network directories: `layers.json` describing the layer sequence, with
//! weight tensors either inline or in MTEN files next to it.
//!
//! ```json
//! {"input_shape": [1, 16], "num_classes": 3, "layers": [
//!   {"kind": "conv", "weight": "conv0.mten", "stride": 1, "padding": [1]},
//!   {"kind": "batchnorm", "scale": [1.0], "shift": [0.0], "mean": [0.0], "var": [1.0]},
//!   {"kind": "relu"},
//!   {"kind": "dense", "weight": {"shape": [3, 16], "data": [...]}}
//! ]}
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conv::ConvKernel;
use crate::error::{Error, Result};
use crate::network::{BatchNormParams, LayerSpec, NetworkSpec};
use crate::tensor::Tensor;

use super::mten::{read_tensor, write_tensor};

pub const LAYERS_FILE: &str = "layers.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum TensorRef {
    File(String),
    Inline { shape: Vec<usize>, data: Vec<f64> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum VectorRef {
    File(String),
    Inline(Vec<f64>),
}

fn one() -> usize {
    1
}

fn unit() -> f64 {
    1.0
}

fn default_eps() -> f64 {
    1e-5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerEntry {
    Dense {
        weight: TensorRef,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<VectorRef>,
    },
    Conv {
        weight: TensorRef,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        padding: Option<Vec<usize>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<VectorRef>,
    },
    #[serde(rename = "batchnorm")]
    BatchNorm {
        scale: VectorRef,
        shift: VectorRef,
        mean: VectorRef,
        var: VectorRef,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    Relu,
    Activation {
        #[serde(default = "unit")]
        lipschitz: f64,
    },
    Pool {
        #[serde(default = "unit")]
        lipschitz: f64,
        window: usize,
    },
    Residual {
        #[serde(default)]
        shortcut: Vec<LayerEntry>,
        main: Vec<LayerEntry>,
        #[serde(default = "unit")]
        inner_lipschitz: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayersFile {
    input_shape: Vec<usize>,
    num_classes: usize,
    layers: Vec<LayerEntry>,
}

struct Loader<'a> {
    dir: &'a Path,
}

impl Loader<'_> {
    fn tensor(&self, field: &str, r: &TensorRef) -> Result<Tensor> {
        match r {
            TensorRef::File(name) => {
                let path = self.dir.join(name);
                if !path.is_file() {
                    return Err(Error::validation(
                        field,
                        format!("tensor file `{name}` not found"),
                    ));
                }
                read_tensor(&path)
            }
            TensorRef::Inline { shape, data } => Tensor::new(shape.clone(), data.clone())
                .map_err(|e| Error::validation(field, e.to_string())),
        }
    }

    fn vector(&self, field: &str, r: &VectorRef) -> Result<Vec<f64>> {
        match r {
            VectorRef::Inline(v) => Ok(v.clone()),
            VectorRef::File(_) => {
                let file = match r {
                    VectorRef::File(f) => TensorRef::File(f.clone()),
                    VectorRef::Inline(_) => unreachable!(),
                };
                let t = self.tensor(field, &file)?;
                if t.ndim() != 1 {
                    return Err(Error::validation(
                        field,
                        format!("expected a vector, got shape {:?}", t.shape()),
                    ));
                }
                Ok(t.into_data())
            }
        }
    }

    fn layers(&self, prefix: &str, entries: &[LayerEntry]) -> Result<Vec<LayerSpec>> {
        entries
            .iter()
            .enumerate()
            .map(|(i, e)| self.layer(&format!("{prefix}[{i}]"), e))
            .collect()
    }

    fn layer(&self, id: &str, e: &LayerEntry) -> Result<LayerSpec> {
        let opt_vec = |name: &str, v: &Option<VectorRef>| {
            v.as_ref()
                .map(|v| self.vector(&format!("{id}.{name}"), v))
                .transpose()
        };
        Ok(match e {
            LayerEntry::Dense { weight, bias } => {
                let weight = self.tensor(&format!("{id}.weight"), weight)?;
                if weight.ndim() != 2 {
                    return Err(Error::validation(
                        format!("{id}.weight"),
                        format!("dense weight must be 2-D, got shape {:?}", weight.shape()),
                    ));
                }
                LayerSpec::Dense {
                    weight,
                    bias: opt_vec("bias", bias)?,
                }
            }
            LayerEntry::Conv {
                weight,
                stride,
                padding,
                bias,
            } => {
                let w = self.tensor(&format!("{id}.weight"), weight)?;
                let spatial = w.ndim().saturating_sub(2);
                let padding = padding.clone().unwrap_or_else(|| vec![0; spatial]);
                let kernel = ConvKernel::new(w, *stride, padding)
                    .map_err(|err| Error::validation(format!("{id}.weight"), err.to_string()))?;
                LayerSpec::Conv {
                    kernel,
                    bias: opt_vec("bias", bias)?,
                }
            }
            LayerEntry::BatchNorm {
                scale,
                shift,
                mean,
                var,
                eps,
            } => LayerSpec::BatchNorm(BatchNormParams {
                scale: self.vector(&format!("{id}.scale"), scale)?,
                shift: self.vector(&format!("{id}.shift"), shift)?,
                mean: self.vector(&format!("{id}.mean"), mean)?,
                var: self.vector(&format!("{id}.var"), var)?,
                eps: *eps,
            }),
            LayerEntry::Relu => LayerSpec::relu(),
            LayerEntry::Activation { lipschitz } => LayerSpec::Activation {
                lipschitz: *lipschitz,
            },
            LayerEntry::Pool { lipschitz, window } => LayerSpec::Pool {
                lipschitz: *lipschitz,
                window: *window,
            },
            LayerEntry::Residual {
                shortcut,
                main,
                inner_lipschitz,
            } => LayerSpec::Residual {
                shortcut: self.layers(&format!("{id}.shortcut"), shortcut)?,
                main: self.layers(&format!("{id}.main"), main)?,
                inner_lipschitz: *inner_lipschitz,
            },
        })
    }
}

/// Loads and validates the network stored in `dir`.
pub fn read_network(dir: impl AsRef<Path>) -> Result<NetworkSpec> {
    let dir = dir.as_ref();
    let path = dir.join(LAYERS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: LayersFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: format!("{}: {e}", path.display()),
    })?;
    let net = NetworkSpec {
        input_shape: file.input_shape,
        layers: Loader { dir }.layers("layers", &file.layers)?,
        num_classes: file.num_classes,
    };
    net.validate()?;
    Ok(net)
}

struct Saver<'a> {
    dir: &'a Path,
}

impl Saver<'_> {
    fn layers(&self, prefix: &str, layers: &[LayerSpec]) -> Result<Vec<LayerEntry>> {
        layers
            .iter()
            .enumerate()
            .map(|(i, l)| self.layer(&format!("{prefix}{i}"), l))
            .collect()
    }

    fn weight(&self, id: &str, t: &Tensor) -> Result<TensorRef> {
        let name = format!("{id}.weight.mten");
        write_tensor(self.dir.join(&name), t)?;
        Ok(TensorRef::File(name))
    }

    fn layer(&self, id: &str, l: &LayerSpec) -> Result<LayerEntry> {
        let inline = |v: &Option<Vec<f64>>| v.clone().map(VectorRef::Inline);
        Ok(match l {
            LayerSpec::Dense { weight, bias } => LayerEntry::Dense {
                weight: self.weight(id, weight)?,
                bias: inline(bias),
            },
            LayerSpec::Conv { kernel, bias } => LayerEntry::Conv {
                weight: self.weight(id, kernel.weights())?,
                stride: kernel.stride(),
                padding: Some(kernel.padding().to_vec()),
                bias: inline(bias),
            },
            LayerSpec::BatchNorm(bn) => LayerEntry::BatchNorm {
                scale: VectorRef::Inline(bn.scale.clone()),
                shift: VectorRef::Inline(bn.shift.clone()),
                mean: VectorRef::Inline(bn.mean.clone()),
                var: VectorRef::Inline(bn.var.clone()),
                eps: bn.eps,
            },
            LayerSpec::Activation { lipschitz } if *lipschitz == 1.0 => LayerEntry::Relu,
            LayerSpec::Activation { lipschitz } => LayerEntry::Activation {
                lipschitz: *lipschitz,
            },
            LayerSpec::Pool { lipschitz, window } => LayerEntry::Pool {
                lipschitz: *lipschitz,
                window: *window,
            },
            LayerSpec::Residual {
                shortcut,
                main,
                inner_lipschitz,
            } => LayerEntry::Residual {
                shortcut: self.layers(&format!("{id}_shortcut"), shortcut)?,
                main: self.layers(&format!("{id}_main"), main)?,
                inner_lipschitz: *inner_lipschitz,
            },
        })
    }
}

/// Writes `net` into `dir` (created if missing): weights as f64 MTEN files,
/// everything else inline in `layers.json`.
pub fn write_network(dir: impl AsRef<Path>, net: &NetworkSpec) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file = LayersFile {
        input_shape: net.input_shape.clone(),
        num_classes: net.num_classes,
        layers: Saver { dir }.layers("layer", &net.layers)?,
    };
    super::write_atomic(&dir.join(LAYERS_FILE), |w| {
        serde_json::to_writer_pretty(&mut *w, &file)?;
        w.write_all(b"\n")
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norm::{network_lipschitz, LipschitzConfig};

    fn write_layers(dir: &Path, json: &str) {
        std::fs::write(dir.join(LAYERS_FILE), json).unwrap();
    }

    #[test]
    fn single_inline_dense_layer() {
        let tmp = tempfile::tempdir().unwrap();
        write_layers(
            tmp.path(),
            r#"{"input_shape":[2],"num_classes":2,"layers":[{"kind":"dense","weight":{"shape":[2,2],"data":[1,0,0,1]}}]}"#,
        );
        let net = read_network(tmp.path()).unwrap();
        assert_eq!(net.layers.len(), 1);
        assert_eq!(
            network_lipschitz(&net, &LipschitzConfig::default())
                .unwrap()
                .value,
            1.0
        );
    }

    #[test]
    fn conv_and_batchnorm_from_files() {
        let tmp = tempfile::tempdir().unwrap();
        let w = Tensor::new(vec![2, 1, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        write_tensor(tmp.path().join("c.mten"), &w).unwrap();
        write_tensor(
            tmp.path().join("var.mten"),
            &Tensor::from_vec(vec![3.0, 0.0]).unwrap(),
        )
        .unwrap();
        write_layers(
            tmp.path(),
            r#"{"input_shape":[1,5],"num_classes":6,"layers":[
                {"kind":"conv","weight":"c.mten"},
                {"kind":"batchnorm","scale":[2,1],"shift":[0,0],"mean":[0,0],"var":"var.mten","eps":1.0},
                {"kind":"relu"}]}"#,
        );
        let net = read_network(tmp.path()).unwrap();
        match &net.layers[1] {
            LayerSpec::BatchNorm(bn) => assert_eq!(bn.var, vec![3.0, 0.0]),
            other => panic!("unexpected {other:?}"),
        }
        // BN factors are 2/2 and 1/1; two stacked shifted deltas have norm sqrt(2).
        let l = network_lipschitz(&net, &LipschitzConfig::default())
            .unwrap()
            .value;
        assert!((l - 2f64.sqrt()).abs() < 1e-9, "{l}");
    }

    #[test]
    fn dangling_reference_names_field() {
        let tmp = tempfile::tempdir().unwrap();
        write_layers(
            tmp.path(),
            r#"{"input_shape":[2],"num_classes":2,"layers":[{"kind":"residual","main":[{"kind":"dense","weight":"missing.mten"}]}]}"#,
        );
        match read_network(tmp.path()) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "layers[0].main[0].weight"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let tmp = tempfile::tempdir().unwrap();
        write_layers(
            tmp.path(),
            r#"{"input_shape":[3],"num_classes":2,"layers":[
                {"kind":"dense","weight":{"shape":[4,3],"data":[0,0,0,0,0,0,0,0,0,0,0,0]}},
                {"kind":"relu"},
                {"kind":"dense","weight":{"shape":[2,5],"data":[0,0,0,0,0,0,0,0,0,0]}}]}"#,
        );
        match read_network(tmp.path()) {
            Err(Error::Estimation { layer, .. }) => assert_eq!(layer, "layers[2]"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_json_is_parse_error() {
        let tmp = tempfile::tempdir().unwrap();
        write_layers(tmp.path(), "{\"input_shape\": [2],\n \"layers\": [}");
        assert!(matches!(
            read_network(tmp.path()),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn write_then_read_round_trips() {
        let tmp = tempfile::tempdir().unwrap();
        let conv = ConvKernel::new(
            Tensor::new(vec![2, 1, 2], vec![1.0, -1.0, 0.5, 2.0]).unwrap(),
            2,
            vec![1],
        )
        .unwrap();
        let net = NetworkSpec {
            input_shape: vec![1, 6],
            layers: vec![
                LayerSpec::Conv {
                    kernel: conv,
                    bias: Some(vec![0.1, 0.2]),
                },
                LayerSpec::BatchNorm(BatchNormParams {
                    scale: vec![1.0, 2.0],
                    shift: vec![0.0, 1.0],
                    mean: vec![0.5, 0.0],
                    var: vec![1.0, 4.0],
                    eps: 1e-3,
                }),
                LayerSpec::Residual {
                    shortcut: vec![],
                    main: vec![LayerSpec::relu(), LayerSpec::Activation { lipschitz: 0.5 }],
                    inner_lipschitz: 1.0,
                },
                LayerSpec::Pool {
                    lipschitz: 1.0,
                    window: 2,
                },
                LayerSpec::Dense {
                    weight: Tensor::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0])
                        .unwrap(),
                    bias: None,
                },
            ],
            num_classes: 2,
        };
        net.validate().unwrap();
        write_network(tmp.path(), &net).unwrap();
        assert_eq!(read_network(tmp.path()).unwrap(), net);
    }
}
