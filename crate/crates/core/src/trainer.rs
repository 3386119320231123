//! Deterministic desk-scale trainer: a ReLU MLP (optionally behind one 1-D
//! convolution) fit by plain SGD on Gaussian blobs with corrupted labels.
//!
//! Layers are bias-free unless `biases` is set. Without biases the network is
//! positively homogeneous in each layer's weights, so margins and `L_f` scale
//! together and normalized margins do not depend on the weight scale.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::{conv_forward, conv_weight_grad, ConvKernel};
use crate::error::{Error, Result};
use crate::margin::margin;
use crate::network::{LayerSpec, NetworkSpec};
use crate::norm::{network_lipschitz, LipschitzConfig, NormMethod};
use crate::run::{RunManifest, RunRecord};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub dim: usize,
    /// Distance between any two cluster centers, in units of the unit
    /// within-cluster standard deviation.
    pub separation: f64,
    /// Gaussian clusters per class.
    #[serde(default = "one")]
    pub clusters_per_class: usize,
    pub seed: u64,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvFrontEnd {
    pub channels: usize,
    pub kernel_size: usize,
    #[serde(default = "one")]
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub conv: Option<ConvFrontEnd>,
    pub data: BlobSpec,
    pub corrupt_fraction: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub norm_method: NormMethod,
    #[serde(default)]
    pub biases: bool,
}

impl TrainConfig {
    fn preset(width: usize, lr: f64) -> Self {
        TrainConfig {
            hidden: vec![width],
            conv: None,
            data: BlobSpec {
                num_classes: 3,
                n_train: 600,
                n_test: 3000,
                dim: 100,
                separation: 6.0,
                clusters_per_class: 1,
                seed: 1,
            },
            corrupt_fraction: 0.1,
            epochs: 200,
            lr,
            batch_size: 32,
            seed: 1,
            norm_method: NormMethod::Power,
            biases: false,
        }
    }

    /// Width-8 network: too small to memorize the corrupted labels.
    pub fn small() -> Self {
        Self::preset(8, 0.05)
    }

    /// Width-256 network on the same data.
    pub fn large() -> Self {
        Self::preset(256, 0.01)
    }

    /// Same run with a different seed for both the data and the training.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.num_classes < 2 {
            return Err(Error::validation(
                "data.num_classes",
                "need at least 2 classes",
            ));
        }
        if d.n_train < d.num_classes || d.n_test == 0 {
            return Err(Error::validation(
                "data.n_train",
                "need at least one training sample per class and a non-empty test set",
            ));
        }
        if d.clusters_per_class == 0 || d.dim < d.num_classes * d.clusters_per_class {
            return Err(Error::validation(
                "data.dim",
                format!(
                    "cluster centers sit on coordinate axes, so dim must be >= {} clusters",
                    d.num_classes * d.clusters_per_class
                ),
            ));
        }
        if !(d.separation >= 0.0) || !d.separation.is_finite() {
            return Err(Error::validation(
                "data.separation",
                "must be finite and >= 0",
            ));
        }
        if !(0.0..=1.0).contains(&self.corrupt_fraction) {
            return Err(Error::validation("corrupt_fraction", "must lie in [0, 1]"));
        }
        if self.epochs == 0 {
            return Err(Error::validation("epochs", "must be at least 1"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::validation("lr", "must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size", "must be at least 1"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::validation("hidden", "widths must be positive"));
        }
        if let Some(c) = &self.conv {
            if c.channels == 0 || c.kernel_size == 0 || c.stride == 0 || c.kernel_size > d.dim {
                return Err(Error::validation(
                    "conv",
                    "channels, kernel_size and stride must be positive and kernel_size <= dim",
                ));
            }
        }
        Ok(())
    }
}

/// Samples stored row-major, `dim` values each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub inputs: Vec<f64>,
    /// Labels the model is trained and scored on.
    pub labels: Vec<usize>,
    /// Labels before corruption.
    pub clean_labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }
}

fn sample_blobs(spec: &BlobSpec, n: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let radius = spec.separation / std::f64::consts::SQRT_2;
    let mut inputs = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.num_classes;
        let cluster =
            class * spec.clusters_per_class + rng.random_range(0..spec.clusters_per_class);
        for j in 0..spec.dim {
            let noise: f64 = StandardNormal.sample(rng);
            inputs.push(noise + if j == cluster { radius } else { 0.0 });
        }
        labels.push(class);
    }
    Dataset {
        dim: spec.dim,
        inputs,
        clean_labels: labels.clone(),
        labels,
    }
}

/// Relabels exactly `round(fraction · n)` seeded samples to a uniformly drawn
/// different class.
pub fn corrupt_labels(
    labels: &[usize],
    num_classes: usize,
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut out = labels.to_vec();
    let count = (fraction * labels.len() as f64).round() as usize;
    for i in rand::seq::index::sample(rng, labels.len(), count.min(labels.len())) {
        let shift = rng.random_range(1..num_classes);
        out[i] = (labels[i] + shift) % num_classes;
    }
    out
}

/// Train set with corrupted labels and a clean test set.
pub fn make_blobs(spec: &BlobSpec, corrupt_fraction: f64) -> Result<(Dataset, Dataset)> {
    if spec.num_classes < 2 || spec.n_train < spec.num_classes || spec.clusters_per_class == 0 {
        return Err(Error::domain("blobs need K >= 2 classes and n_train >= K"));
    }
    if spec.dim < spec.num_classes * spec.clusters_per_class {
        return Err(Error::domain(format!(
            "dim {} too small for {} clusters",
            spec.dim,
            spec.num_classes * spec.clusters_per_class
        )));
    }
    if !(0.0..=1.0).contains(&corrupt_fraction) {
        return Err(Error::domain("corrupt fraction outside [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = sample_blobs(spec, spec.n_train, &mut rng);
    let test = sample_blobs(spec, spec.n_test, &mut rng);
    train.labels = corrupt_labels(
        &train.clean_labels,
        spec.num_classes,
        corrupt_fraction,
        &mut rng,
    );
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    weight: Tensor,
    bias: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
struct Conv {
    kernel: ConvKernel,
    bias: Option<Vec<f64>>,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
}

/// ReLU network: optional conv front-end, hidden dense layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    input_dim: usize,
    conv: Option<Conv>,
    dense: Vec<Dense>,
}

/// Intermediate values kept for the backward pass.
struct Trace {
    conv_pre: Option<Vec<f64>>,
    /// Inputs to each dense layer.
    dense_in: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

fn relu(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// `ln Σ exp(z)` and the softmax of `z`.
fn log_softmax_parts(z: &[f64]) -> (f64, Vec<f64>) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    (m + s.ln(), e.into_iter().map(|v| v / s).collect())
}

impl ToyNet {
    pub fn new(config: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let dim = config.data.dim;
        let k = config.data.num_classes;
        let bias = |n: usize| config.biases.then(|| vec![0.0; n]);
        let mut features = dim;
        let conv = match &config.conv {
            Some(c) => {
                let w = he_normal(&[c.channels, 1, c.kernel_size], c.kernel_size, rng)?;
                let kernel = ConvKernel::new(w, c.stride, vec![0])?;
                let in_shape = vec![1, dim];
                let out_shape = kernel.output_shape(&in_shape)?;
                features = out_shape.iter().product();
                Some(Conv {
                    kernel,
                    bias: bias(c.channels),
                    in_shape,
                    out_shape,
                })
            }
            None => None,
        };
        let mut dense = Vec::new();
        for &width in config.hidden.iter().chain(std::iter::once(&k)) {
            dense.push(Dense {
                weight: he_normal(&[width, features], features, rng)?,
                bias: bias(width),
            });
            features = width;
        }
        Ok(ToyNet {
            input_dim: dim,
            conv,
            dense,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.dense.last().map_or(0, |d| d.weight.shape()[0])
    }

    /// Number of weight-bearing layers (conv included).
    pub fn num_weight_layers(&self) -> usize {
        self.dense.len() + usize::from(self.conv.is_some())
    }

    pub fn has_biases(&self) -> bool {
        self.dense.iter().any(|d| d.bias.is_some())
    }

    /// Declarative description with the same weights, for norm estimation
    /// and snapshot writing.
    pub fn to_spec(&self) -> NetworkSpec {
        let mut layers = Vec::new();
        let input_shape = match &self.conv {
            Some(c) => {
                layers.push(LayerSpec::Conv {
                    kernel: c.kernel.clone(),
                    bias: c.bias.clone(),
                });
                layers.push(LayerSpec::relu());
                c.in_shape.clone()
            }
            None => vec![self.input_dim],
        };
        for (i, d) in self.dense.iter().enumerate() {
            if i > 0 {
                layers.push(LayerSpec::relu());
            }
            layers.push(LayerSpec::Dense {
                weight: d.weight.clone(),
                bias: d.bias.clone(),
            });
        }
        NetworkSpec {
            input_shape,
            layers,
            num_classes: self.num_classes(),
        }
    }

    /// Multiplies the weights (and bias) of weight layer `layer` by `c`.
    pub fn scale_layer(&mut self, layer: usize, c: f64) -> Result<()> {
        let offset = usize::from(self.conv.is_some());
        if layer >= self.num_weight_layers() {
            return Err(Error::domain(format!("no weight layer {layer}")));
        }
        let scale_bias = |b: &mut Option<Vec<f64>>| b.iter_mut().flatten().for_each(|v| *v *= c);
        if layer < offset {
            let conv = self.conv.as_mut().expect("conv present");
            conv.kernel = conv.kernel.with_weights(conv.kernel.weights().scale(c)?)?;
            scale_bias(&mut conv.bias);
        } else {
            let d = &mut self.dense[layer - offset];
            d.weight = d.weight.scale(c)?;
            scale_bias(&mut d.bias);
        }
        Ok(())
    }

    /// All parameters flattened: conv weights, conv bias, then each dense
    /// layer's weights and bias.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::new();
        if let Some(c) = &self.conv {
            p.extend_from_slice(c.kernel.weights().data());
            p.extend(c.bias.iter().flatten());
        }
        for d in &self.dense {
            p.extend_from_slice(d.weight.data());
            p.extend(d.bias.iter().flatten());
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.params().len() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.params().len(),
                p.len()
            )));
        }
        let mut at = 0;
        let mut take = |n: usize| {
            let s = &p[at..at + n];
            at += n;
            s.to_vec()
        };
        if let Some(c) = &mut self.conv {
            let w = Tensor::new(
                c.kernel.weights().shape().to_vec(),
                take(c.kernel.weights().len()),
            )?;
            c.kernel = c.kernel.with_weights(w)?;
            if let Some(b) = &mut c.bias {
                *b = take(b.len());
            }
        }
        for d in &mut self.dense {
            d.weight = Tensor::new(d.weight.shape().to_vec(), take(d.weight.len()))?;
            if let Some(b) = &mut d.bias {
                *b = take(b.len());
            }
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> Result<Trace> {
        if x.len() != self.input_dim {
            return Err(Error::shape(format!(
                "input has {} values, network expects {}",
                x.len(),
                self.input_dim
            )));
        }
        let mut conv_pre = None;
        let mut h = x.to_vec();
        if let Some(c) = &self.conv {
            let mut z = conv_forward(&c.kernel, &Tensor::new(c.in_shape.clone(), h)?)?.into_data();
            if let Some(b) = &c.bias {
                let len = c.out_shape[1];
                for (ch, bv) in b.iter().enumerate() {
                    z[ch * len..(ch + 1) * len]
                        .iter_mut()
                        .for_each(|v| *v += bv);
                }
            }
            h = z.clone();
            relu(&mut h);
            conv_pre = Some(z);
        }
        let mut dense_in = Vec::with_capacity(self.dense.len());
        let last = self.dense.len() - 1;
        for (i, d) in self.dense.iter().enumerate() {
            let (rows, cols) = d.weight.dims2()?;
            let w = d.weight.data();
            let mut z: Vec<f64> = (0..rows)
                .map(|r| {
                    w[r * cols..(r + 1) * cols]
                        .iter()
                        .zip(&h)
                        .map(|(a, b)| a * b)
                        .sum()
                })
                .collect();
            if let Some(b) = &d.bias {
                z.iter_mut().zip(b).for_each(|(v, bv)| *v += bv);
            }
            dense_in.push(std::mem::replace(&mut h, z));
            if i < last {
                relu(&mut h);
            }
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite logit in forward pass".into()));
        }
        Ok(Trace {
            conv_pre,
            dense_in,
            logits: h,
        })
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(x)?.logits)
    }

    /// Softmax cross-entropy of one sample.
    pub fn loss(&self, x: &[f64], y: usize) -> Result<f64> {
        let z = self.forward(x)?;
        Ok(log_softmax_parts(&z).0 - z[y])
    }

    /// Adds `scale · ∂loss/∂params` of one sample into `grad` (layout of
    /// [`ToyNet::params`]) and returns the loss.
    fn accumulate_grad(&self, x: &[f64], y: usize, scale: f64, grad: &mut [f64]) -> Result<f64> {
        let t = self.trace(x)?;
        let (lse, mut g) = log_softmax_parts(&t.logits);
        let loss = lse - t.logits[y];
        g[y] -= 1.0;

        // Offsets of each block inside the flat parameter vector.
        let mut offsets = Vec::new();
        let mut at = 0;
        if let Some(c) = &self.conv {
            at += c.kernel.weights().len() + c.bias.as_ref().map_or(0, Vec::len);
        }
        for d in &self.dense {
            offsets.push(at);
            at += d.weight.len() + d.bias.as_ref().map_or(0, Vec::len);
        }

        for (i, d) in self.dense.iter().enumerate().rev() {
            let (rows, cols) = d.weight.dims2()?;
            let input = &t.dense_in[i];
            let base = offsets[i];
            for r in 0..rows {
                let gr = scale * g[r];
                if gr != 0.0 {
                    let row = &mut grad[base + r * cols..base + (r + 1) * cols];
                    row.iter_mut().zip(input).for_each(|(a, b)| *a += gr * b);
                }
            }
            if d.bias.is_some() {
                let b = &mut grad[base + rows * cols..base + rows * cols + rows];
                b.iter_mut().zip(&g).for_each(|(a, v)| *a += scale * v);
            }
            let w = d.weight.data();
            let mut back = vec![0.0; cols];
            for (r, &gv) in g.iter().enumerate() {
                if gv != 0.0 {
                    back.iter_mut()
                        .zip(&w[r * cols..(r + 1) * cols])
                        .for_each(|(a, b)| *a += gv * b);
                }
            }
            // ReLU mask from the forward pass; the subgradient at 0 is 0.
            let pre_relu = if i > 0 { None } else { t.conv_pre.as_deref() };
            for (j, v) in back.iter_mut().enumerate() {
                let active = match pre_relu {
                    Some(z) => z[j] > 0.0,
                    None if i > 0 => input[j] > 0.0,
                    None => true,
                };
                if !active {
                    *v = 0.0;
                }
            }
            g = back;
        }

        if let Some(c) = &self.conv {
            let cot = Tensor::new(c.out_shape.clone(), g)?;
            let xin = Tensor::new(c.in_shape.clone(), x.to_vec())?;
            let wg = conv_weight_grad(&c.kernel, &xin, &cot)?;
            grad[..wg.len()]
                .iter_mut()
                .zip(wg.data())
                .for_each(|(a, b)| *a += scale * b);
            if c.bias.is_some() {
                let len = c.out_shape[1];
                let n = wg.len();
                for ch in 0..c.out_shape[0] {
                    grad[n + ch] +=
                        scale * cot.data()[ch * len..(ch + 1) * len].iter().sum::<f64>();
                }
            }
        }
        Ok(loss)
    }

    /// Mean loss over `(inputs, labels)` and its gradient in the layout of
    /// [`ToyNet::params`].
    pub fn loss_and_grad(&self, inputs: &[&[f64]], labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        if inputs.len() != labels.len() || inputs.is_empty() {
            return Err(Error::shape(
                "need equally many inputs and labels, at least one",
            ));
        }
        let mut grad = vec![0.0; self.params().len()];
        let scale = 1.0 / inputs.len() as f64;
        let mut loss = 0.0;
        for (x, &y) in inputs.iter().zip(labels) {
            loss += self.accumulate_grad(x, y, scale, &mut grad)?;
        }
        Ok((loss * scale, grad))
    }

    /// Raw margins of every sample against `labels`, in sample order.
    pub fn margins(&self, data: &Dataset, labels: &[usize]) -> Result<Vec<f64>> {
        (0..data.len())
            .into_par_iter()
            .map(|i| margin(&self.forward(data.input(i))?, labels[i]))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum TrainStatus {
    Completed,
    /// Training stopped because the loss or a logit became non-finite.
    Diverged {
        epoch: u64,
    },
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub manifest: RunManifest,
    pub records: Vec<RunRecord>,
    pub status: TrainStatus,
    pub net: ToyNet,
}

fn error_rate(margins: &[f64]) -> f64 {
    margins.iter().filter(|&&m| m <= 0.0).count() as f64 / margins.len() as f64
}

/// Evaluates `net` on both splits and builds the epoch's record.
pub fn snapshot(
    net: &ToyNet,
    epoch: u64,
    train: &Dataset,
    test: &Dataset,
    method: NormMethod,
) -> Result<RunRecord> {
    let train_margins = net.margins(train, &train.labels)?;
    let test_margins = net.margins(test, &test.labels)?;
    let losses = (0..train.len())
        .into_par_iter()
        .map(|i| net.loss(train.input(i), train.labels[i]))
        .collect::<Result<Vec<_>>>()?;
    let lipschitz = network_lipschitz(&net.to_spec(), &LipschitzConfig::with_method(method))?.value;
    let mut rec = RunRecord::new(epoch, lipschitz, train_margins);
    rec.train_loss = Some(losses.iter().sum::<f64>() / losses.len() as f64);
    rec.train_error = Some(error_rate(&rec.train_margins));
    rec.test_error = Some(error_rate(&test_margins));
    rec.test_margins = Some(test_margins);
    Ok(rec)
}

pub fn train(config: &TrainConfig) -> Result<TrainOutput> {
    train_with(config, |_, _, _| Ok(()))
}

/// Trains for `config.epochs` epochs, calling `on_epoch` after each epoch's
/// record is built. A diverged run returns the epochs completed so far.
pub fn train_with<F>(config: &TrainConfig, mut on_epoch: F) -> Result<TrainOutput>
where
    F: FnMut(u64, &ToyNet, &mut RunRecord) -> Result<()>,
{
    config.validate()?;
    let (train_set, test_set) = make_blobs(&config.data, config.corrupt_fraction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = ToyNet::new(config, &mut rng)?;
    let mut manifest = RunManifest::new(
        config.data.num_classes,
        config.data.n_train,
        config.data.n_test,
        config.norm_method.to_string(),
    );
    manifest.creator = format!("lipmargin {}", env!("CARGO_PKG_VERSION"));
    let mut records = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut params = net.params();
    for epoch in 1..=config.epochs as u64 {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let xs: Vec<&[f64]> = batch.iter().map(|&i| train_set.input(i)).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| train_set.labels[i]).collect();
            let step = net.loss_and_grad(&xs, &ys).and_then(|(loss, grad)| {
                if loss.is_finite() {
                    Ok(grad)
                } else {
                    Err(Error::Numeric(format!("loss became {loss}")))
                }
            });
            let grad = match step {
                Ok(g) => g,
                Err(e) if e.is_numeric() => {
                    return Ok(TrainOutput {
                        manifest,
                        records,
                        status: TrainStatus::Diverged { epoch },
                        net,
                    })
                }
                Err(e) => return Err(e),
            };
            params
                .iter_mut()
                .zip(&grad)
                .for_each(|(p, g)| *p -= config.lr * g);
            net.set_params(&params)?;
        }
        let mut rec = match snapshot(&net, epoch, &train_set, &test_set, config.norm_method) {
            Ok(r) => r,
            Err(e) if e.is_numeric() => {
                return Ok(TrainOutput {
                    manifest,
                    records,
                    status: TrainStatus::Diverged { epoch },
                    net,
                })
            }
            Err(e) => return Err(e),
        };
        on_epoch(epoch, &net, &mut rec)?;
        records.push(rec);
    }
    Ok(TrainOutput {
        manifest,
        records,
        status: TrainStatus::Completed,
        net,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(conv: bool, biases: bool) -> TrainConfig {
        TrainConfig {
            hidden: vec![5, 4],
            conv: conv.then_some(ConvFrontEnd {
                channels: 2,
                kernel_size: 3,
                stride: 2,
            }),
            data: BlobSpec {
                num_classes: 3,
                n_train: 30,
                n_test: 10,
                dim: 6,
                separation: 4.0,
                clusters_per_class: 1,
                seed: 3,
            },
            corrupt_fraction: 0.1,
            epochs: 3,
            lr: 0.05,
            batch_size: 8,
            seed: 11,
            norm_method: NormMethod::L1,
            biases,
        }
    }

    #[test]
    fn corruption_extremes() {
        let spec = tiny(false, false).data;
        let (clean, _) = make_blobs(&spec, 0.0).unwrap();
        assert_eq!(clean.labels, clean.clean_labels);
        let (all, _) = make_blobs(&spec, 1.0).unwrap();
        assert!(all
            .labels
            .iter()
            .zip(&all.clean_labels)
            .all(|(a, b)| a != b));
        let (some, _) = make_blobs(&spec, 0.1).unwrap();
        let changed = some
            .labels
            .iter()
            .zip(&some.clean_labels)
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(changed, 3);
    }

    #[test]
    fn degenerate_blobs_rejected() {
        let mut spec = tiny(false, false).data;
        spec.num_classes = 1;
        assert!(matches!(make_blobs(&spec, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn single_linear_layer_is_matvec() {
        let mut cfg = tiny(false, false);
        cfg.hidden.clear();
        let net = ToyNet::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        let w = match &net.to_spec().layers[0] {
            LayerSpec::Dense { weight, .. } => weight.clone(),
            _ => unreachable!(),
        };
        let expect = w.matvec(&Tensor::from_vec(x.clone()).unwrap()).unwrap();
        assert_eq!(net.forward(&x).unwrap(), expect.data());
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let cfg = tiny(true, false);
        let mut net = ToyNet::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        net.set_params(&vec![0.0; net.params().len()]).unwrap();
        let loss = net.loss(&[0.0; 6], 1).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-15);
    }

    fn finite_difference_check(conv: bool, biases: bool) {
        let cfg = tiny(conv, biases);
        let net = ToyNet::new(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let (data, _) = make_blobs(&cfg.data, 0.0).unwrap();
        let xs: Vec<&[f64]> = (0..4).map(|i| data.input(i)).collect();
        let ys = &data.labels[..4];
        let (_, grad) = net.loss_and_grad(&xs, ys).unwrap();
        let p = net.params();
        let h = 1e-5;
        for k in 0..p.len() {
            let mut probe = net.clone();
            let mut q = p.clone();
            q[k] += h;
            probe.set_params(&q).unwrap();
            let up = probe.loss_and_grad(&xs, ys).unwrap().0;
            q[k] -= 2.0 * h;
            probe.set_params(&q).unwrap();
            let down = probe.loss_and_grad(&xs, ys).unwrap().0;
            let fd = (up - down) / (2.0 * h);
            let denom = fd.abs().max(grad[k].abs()).max(1e-8);
            assert!(
                (fd - grad[k]).abs() / denom < 1e-4 || (fd - grad[k]).abs() < 1e-9,
                "param {k}: {fd} vs {}",
                grad[k]
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        finite_difference_check(false, false);
        finite_difference_check(true, false);
        finite_difference_check(true, true);
    }

    #[test]
    fn zero_learning_rate_freezes_snapshots() {
        let mut cfg = tiny(true, false);
        cfg.lr = 0.0;
        let out = train(&cfg).unwrap();
        assert_eq!(out.records.len(), 3);
        assert_eq!(out.records[0].train_margins, out.records[2].train_margins);
        assert_eq!(out.records[0].lipschitz, out.records[2].lipschitz);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny(true, true);
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.status, TrainStatus::Completed);
    }

    #[test]
    fn huge_learning_rate_is_reported_as_divergence() {
        let mut cfg = tiny(false, false);
        cfg.lr = 1e300;
        cfg.epochs = 50;
        let out = train(&cfg).unwrap();
        assert!(matches!(out.status, TrainStatus::Diverged { .. }));
    }

    #[test]
    fn scaling_a_layer_leaves_normalized_margins() {
        let cfg = tiny(true, false);
        let out = train(&cfg).unwrap();
        let (data, _) = make_blobs(&cfg.data, cfg.corrupt_fraction).unwrap();
        for method in [NormMethod::L1, NormMethod::Power] {
            let base = snapshot(&out.net, 0, &data, &data, method).unwrap();
            for layer in 0..out.net.num_weight_layers() {
                let mut scaled = out.net.clone();
                scaled.scale_layer(layer, 10.0).unwrap();
                let s = snapshot(&scaled, 0, &data, &data, method).unwrap();
                let l0 = base.lipschitz.unwrap();
                let l1 = s.lipschitz.unwrap();
                for (a, b) in base.train_margins.iter().zip(&s.train_margins) {
                    let (a, b) = (a / l0, b / l1);
                    assert!((a - b).abs() <= 1e-9 * a.abs().max(1e-12), "{a} vs {b}");
                }
            }
        }
    }
}
