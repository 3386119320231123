//! Operator-norm estimates for convolution and dense layers, and their
//! composition into a whole-network Lipschitz normalization factor `L_f`.
//!
//! Two routes are provided:
//!
//! * ℓ1-based upper bounds computed from kernel entries alone
//!   (single channel `‖w‖₁`, multi-channel `√(‖w‖₁ · max_{i,j} ‖w(j,i,·)‖₁)`,
//!   and the stride-aware `√(D · ‖w‖₁ · ‖w‖_∞)` with `D = ∏ ⌈Size_i / S⌉`);
//! * power iteration on `WᵀW` through any [`LinearOperator`].
//!
//! Biases never enter an operator norm. Batch norm is folded into the
//! preceding weight layer; residual blocks are bounded by
//! `‖shortcut‖ + L_in · ∏ ‖main_i‖`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::conv::{ConvKernel, ConvOperator};
use crate::error::{Error, Result};
use crate::network::{layer_output_shape, BatchNormParams, LayerSpec, NetworkSpec};
use crate::tensor::{norm_l2, LinearOperator, MatrixOperator, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateMethod {
    L1A,
    L1B1,
    L1B2Stride,
    /// Row/column ℓ1 bound for dense layers.
    L1Dense,
    PowerIteration,
    /// Scalar factor from a batch norm, activation or pooling layer.
    Declared,
    /// A residual block folded from its two paths.
    Residual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormEstimate {
    pub layer_id: String,
    pub method: EstimateMethod,
    pub value: f64,
    pub iterations_used: Option<usize>,
    pub converged: bool,
}

/// ‖w‖₁ for a single-channel kernel.
pub fn l1_bound_single_channel(kernel: &ConvKernel) -> Result<f64> {
    if kernel.c_in() != 1 || kernel.c_out() != 1 {
        return Err(Error::WrongVariant(format!(
            "kernel has {}×{} channels; use the multi-channel bound",
            kernel.c_out(),
            kernel.c_in()
        )));
    }
    Ok(kernel.weights().sum_abs())
}

/// `max_{i,j} ‖w(j,i,·)‖₁`, the largest ℓ1 norm of a single channel pair.
fn max_channel_pair_l1(kernel: &ConvKernel) -> f64 {
    let per_pair: usize = kernel.kernel_size().iter().product();
    kernel
        .weights()
        .data()
        .chunks(per_pair)
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `√(‖w‖₁ · max_{i,j} ‖w(j,i,·)‖₁)`; an upper bound for any stride.
pub fn l1_bound_multichannel(kernel: &ConvKernel) -> f64 {
    (kernel.weights().sum_abs() * max_channel_pair_l1(kernel)).sqrt()
}

/// `√(D · ‖w‖₁ · ‖w‖_∞)` with `D = ∏_i ⌈Size_i / S⌉`.
pub fn l1_bound_stride(kernel: &ConvKernel) -> f64 {
    let s = kernel.stride();
    let d: usize = kernel
        .kernel_size()
        .iter()
        .map(|&k| k.div_ceil(s))
        .product();
    (d as f64 * kernel.weights().sum_abs() * kernel.weights().max_abs()).sqrt()
}

/// `√(max_j Σ_i |W_ji| · max_i Σ_j |W_ji|)` for a dense (out × in) matrix.
///
/// This is the multi-channel argument for a 1×1 kernel, stopped before the
/// per-channel-pair relaxation; it is never looser than that bound.
pub fn l1_bound_dense(weight: &Tensor) -> Result<f64> {
    let (rows, cols) = weight.dims2()?;
    let w = weight.data();
    let max_row = (0..rows)
        .map(|j| {
            w[j * cols..(j + 1) * cols]
                .iter()
                .map(|v| v.abs())
                .sum::<f64>()
        })
        .fold(0.0, f64::max);
    let max_col = (0..cols)
        .map(|i| (0..rows).map(|j| w[j * cols + i].abs()).sum::<f64>())
        .fold(0.0, f64::max);
    Ok((max_row * max_col).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerIterationConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for PowerIterationConfig {
    fn default() -> Self {
        PowerIterationConfig {
            max_iters: 200,
            tol: 1e-9,
            seed: 0x5EED,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerIteration {
    /// Final estimate of the largest singular value.
    pub value: f64,
    pub iterations_used: usize,
    pub converged: bool,
    /// `‖A v_k‖` for every iterate; non-decreasing up to rounding.
    pub trace: Vec<f64>,
}

/// Largest singular value of `op` by power iteration on `AᵀA`.
///
/// Starts from a seeded Gaussian unit vector. Stops once two successive
/// estimates differ by less than `tol` relative to the current one.
pub fn power_iteration(
    op: &dyn LinearOperator,
    config: &PowerIterationConfig,
) -> Result<PowerIteration> {
    if config.max_iters == 0 {
        return Err(Error::domain("power iteration needs max_iters >= 1"));
    }
    if !(config.tol > 0.0) {
        return Err(Error::domain("power iteration needs tol > 0"));
    }
    let n = op.input_len();
    if n == 0 {
        return Err(Error::domain("operator has an empty input space"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = norm_l2(&v);
    v.iter_mut().for_each(|x| *x /= norm);

    let mut trace = Vec::new();
    let mut prev: Option<f64> = None;
    for iter in 1..=config.max_iters {
        let u = op.apply(&v);
        let sigma = norm_l2(&u);
        if !sigma.is_finite() {
            return Err(Error::Numeric(format!(
                "power iteration produced {sigma} at iteration {iter}"
            )));
        }
        trace.push(sigma);
        if sigma == 0.0 {
            return Ok(PowerIteration {
                value: 0.0,
                iterations_used: iter,
                converged: true,
                trace,
            });
        }
        if let Some(p) = prev {
            if (sigma - p).abs() <= config.tol * sigma {
                return Ok(PowerIteration {
                    value: sigma,
                    iterations_used: iter,
                    converged: true,
                    trace,
                });
            }
        }
        prev = Some(sigma);
        let mut w = op.apply_adjoint(&u);
        let wn = norm_l2(&w);
        if !wn.is_finite() {
            return Err(Error::Numeric(format!(
                "power iteration produced {wn} at iteration {iter}"
            )));
        }
        if wn == 0.0 {
            // Au ≠ 0 but AᵀAu = 0 cannot happen in exact arithmetic.
            return Err(Error::Numeric(
                "adjoint annihilated a non-zero image".into(),
            ));
        }
        w.iter_mut().for_each(|x| *x /= wn);
        v = w;
    }
    let value = *trace.last().expect("at least one iteration ran");
    Ok(PowerIteration {
        value,
        iterations_used: config.max_iters,
        converged: false,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnRescale {
    /// `|α̂_c| / √(σ̂²_c + ε)` per channel.
    pub per_channel: Vec<f64>,
    pub max: f64,
}

pub fn bn_rescale_factor(bn: &BatchNormParams) -> Result<BnRescale> {
    if bn.scale.len() != bn.var.len() || bn.scale.is_empty() {
        return Err(Error::validation(
            "var",
            "scale and var must have the same non-zero length",
        ));
    }
    let mut per_channel = Vec::with_capacity(bn.scale.len());
    for (c, (&a, &v)) in bn.scale.iter().zip(&bn.var).enumerate() {
        let denom = v + bn.eps;
        if !(denom > 0.0) {
            return Err(Error::Numeric(format!(
                "channel {c}: variance + eps = {denom} is not positive"
            )));
        }
        per_channel.push(a.abs() / denom.sqrt());
    }
    let max = per_channel.iter().copied().fold(0.0, f64::max);
    Ok(BnRescale { per_channel, max })
}

/// Multiplies output-channel slice `c` of `weights` (leading axis) by `factors[c]`.
fn rescale_output_channels(weights: &Tensor, factors: &[f64]) -> Result<Tensor> {
    let c_out = weights.shape()[0];
    if factors.len() != c_out {
        return Err(Error::shape(format!(
            "{} rescale factors for {c_out} output channels",
            factors.len()
        )));
    }
    let per = weights.len() / c_out;
    let mut data = weights.data().to_vec();
    for (chunk, &f) in data.chunks_mut(per).zip(factors) {
        chunk.iter_mut().for_each(|x| *x *= f);
    }
    Tensor::new(weights.shape().to_vec(), data)
}

/// `shortcut_norm + L_in · ∏ main_norms`.
pub fn residual_block_bound(
    shortcut_norm: f64,
    main_norms: &[f64],
    inner_lipschitz: f64,
) -> Result<f64> {
    if main_norms.is_empty() {
        return Err(Error::domain("residual block main path is empty"));
    }
    if shortcut_norm < 0.0 || inner_lipschitz < 0.0 || main_norms.iter().any(|&m| m < 0.0) {
        return Err(Error::domain("residual norms must be non-negative"));
    }
    Ok(shortcut_norm + inner_lipschitz * main_norms.iter().product::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormMethod {
    #[default]
    L1,
    Power,
}

impl std::str::FromStr for NormMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(NormMethod::L1),
            "power" => Ok(NormMethod::Power),
            other => Err(Error::domain(format!(
                "unknown norm method `{other}` (expected l1 or power)"
            ))),
        }
    }
}

impl std::fmt::Display for NormMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormMethod::L1 => "l1",
            NormMethod::Power => "power",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BnFusion {
    /// Rescale each output channel of the preceding kernel, then estimate.
    #[default]
    RescaleKernel,
    /// Estimate the raw kernel and multiply by `max_c r_c`.
    ScalarMax,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LipschitzConfig {
    pub method: NormMethod,
    pub power: PowerIterationConfig,
    pub bn_fusion: BnFusion,
}

impl LipschitzConfig {
    pub fn with_method(method: NormMethod) -> Self {
        LipschitzConfig {
            method,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzEstimate {
    pub value: f64,
    pub layers: Vec<NormEstimate>,
}

/// Operator norm estimate of one weight layer on a given input shape.
fn weight_layer_estimate(
    id: &str,
    layer: &LayerSpec,
    input_shape: &[usize],
    bn: Option<&BatchNormParams>,
    config: &LipschitzConfig,
) -> Result<NormEstimate> {
    let rescale = bn
        .map(bn_rescale_factor)
        .transpose()
        .map_err(|e| Error::Estimation {
            layer: id.to_string(),
            reason: e.to_string(),
        })?;
    let (kernel_factors, scalar) = match (&rescale, config.bn_fusion) {
        (None, _) => (None, 1.0),
        (Some(r), BnFusion::RescaleKernel) => (Some(r.per_channel.as_slice()), 1.0),
        (Some(r), BnFusion::ScalarMax) => (None, r.max),
    };
    let wrap = |e: Error| Error::Estimation {
        layer: id.to_string(),
        reason: e.to_string(),
    };

    let (method, raw, iterations, converged) = match layer {
        LayerSpec::Dense { weight, .. } => {
            let w = match kernel_factors {
                Some(f) => rescale_output_channels(weight, f).map_err(wrap)?,
                None => weight.clone(),
            };
            match config.method {
                NormMethod::L1 => (
                    EstimateMethod::L1Dense,
                    l1_bound_dense(&w).map_err(wrap)?,
                    None,
                    true,
                ),
                NormMethod::Power => {
                    let op = MatrixOperator::new(&w).map_err(wrap)?;
                    let p = power_iteration(&op, &config.power).map_err(wrap)?;
                    (
                        EstimateMethod::PowerIteration,
                        p.value,
                        Some(p.iterations_used),
                        p.converged,
                    )
                }
            }
        }
        LayerSpec::Conv { kernel, .. } => {
            let k = match kernel_factors {
                Some(f) => kernel
                    .with_weights(rescale_output_channels(kernel.weights(), f).map_err(wrap)?)
                    .map_err(wrap)?,
                None => kernel.clone(),
            };
            match config.method {
                NormMethod::L1 => {
                    if k.c_in() == 1 && k.c_out() == 1 {
                        let a = l1_bound_single_channel(&k).map_err(wrap)?;
                        let b2 = l1_bound_stride(&k);
                        if b2 < a {
                            (EstimateMethod::L1B2Stride, b2, None, true)
                        } else {
                            (EstimateMethod::L1A, a, None, true)
                        }
                    } else {
                        let b1 = l1_bound_multichannel(&k);
                        let b2 = l1_bound_stride(&k);
                        if b2 < b1 {
                            (EstimateMethod::L1B2Stride, b2, None, true)
                        } else {
                            (EstimateMethod::L1B1, b1, None, true)
                        }
                    }
                }
                NormMethod::Power => {
                    let op = ConvOperator::new(k, input_shape).map_err(wrap)?;
                    let p = power_iteration(&op, &config.power).map_err(wrap)?;
                    (
                        EstimateMethod::PowerIteration,
                        p.value,
                        Some(p.iterations_used),
                        p.converged,
                    )
                }
            }
        }
        other => {
            return Err(Error::Estimation {
                layer: id.to_string(),
                reason: format!("`{}` is not a weight layer", other.kind()),
            })
        }
    };
    Ok(NormEstimate {
        layer_id: id.to_string(),
        method,
        value: raw * scalar,
        iterations_used: iterations,
        converged,
    })
}

/// Estimates every layer on a path. Returns the per-factor values (one per
/// weight layer, standalone batch norm, non-unit activation/pool or residual
/// block), the output shape and the detailed estimates.
fn estimate_path(
    prefix: &str,
    layers: &[LayerSpec],
    input_shape: &[usize],
    config: &LipschitzConfig,
    details: &mut Vec<NormEstimate>,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut factors = Vec::new();
    let mut shape = input_shape.to_vec();
    let mut i = 0;
    while i < layers.len() {
        let id = format!("{prefix}[{i}]");
        let layer = &layers[i];
        let out_shape = layer_output_shape(&id, layer, &shape)?;
        match layer {
            LayerSpec::Dense { .. } | LayerSpec::Conv { .. } => {
                let bn = match layers.get(i + 1) {
                    Some(LayerSpec::BatchNorm(bn)) => {
                        layer_output_shape(
                            &format!("{prefix}[{}]", i + 1),
                            &layers[i + 1],
                            &out_shape,
                        )?;
                        Some(bn)
                    }
                    _ => None,
                };
                let est = weight_layer_estimate(&id, layer, &shape, bn, config)?;
                factors.push(est.value);
                details.push(est);
                if bn.is_some() {
                    i += 1;
                }
            }
            LayerSpec::BatchNorm(bn) => {
                let r = bn_rescale_factor(bn).map_err(|e| Error::Estimation {
                    layer: id.clone(),
                    reason: e.to_string(),
                })?;
                factors.push(r.max);
                details.push(NormEstimate {
                    layer_id: id.clone(),
                    method: EstimateMethod::Declared,
                    value: r.max,
                    iterations_used: None,
                    converged: true,
                });
            }
            LayerSpec::Activation { lipschitz } | LayerSpec::Pool { lipschitz, .. } => {
                if *lipschitz != 1.0 {
                    factors.push(*lipschitz);
                    details.push(NormEstimate {
                        layer_id: id.clone(),
                        method: EstimateMethod::Declared,
                        value: *lipschitz,
                        iterations_used: None,
                        converged: true,
                    });
                }
            }
            LayerSpec::Residual {
                shortcut,
                main,
                inner_lipschitz,
            } => {
                let (s, _) =
                    estimate_path(&format!("{id}.shortcut"), shortcut, &shape, config, details)?;
                let (m, _) = estimate_path(&format!("{id}.main"), main, &shape, config, details)?;
                let shortcut_norm: f64 = s.iter().product();
                // A main path of only unit activations still contributes the identity.
                let main_norms = if m.is_empty() { vec![1.0] } else { m };
                let value = residual_block_bound(shortcut_norm, &main_norms, *inner_lipschitz)?;
                let converged = details
                    .iter()
                    .filter(|d| d.layer_id.starts_with(&id))
                    .all(|d| d.converged);
                factors.push(value);
                details.push(NormEstimate {
                    layer_id: id.clone(),
                    method: EstimateMethod::Residual,
                    value,
                    iterations_used: None,
                    converged,
                });
            }
        }
        shape = out_shape;
        i += 1;
    }
    Ok((factors, shape))
}

/// Whole-network normalization factor: the product of per-layer operator norm
/// estimates with non-unit activation/pool constants and folded residual blocks.
pub fn network_lipschitz(net: &NetworkSpec, config: &LipschitzConfig) -> Result<LipschitzEstimate> {
    if net.layers.is_empty() {
        return Err(Error::validation("layers", "network has no layers"));
    }
    let mut details = Vec::new();
    let (factors, _) = estimate_path(
        "layers",
        &net.layers,
        &net.input_shape,
        config,
        &mut details,
    )?;
    let value: f64 = factors.iter().product();
    if !value.is_finite() {
        return Err(Error::Numeric(format!(
            "Lipschitz estimate overflowed to {value}"
        )));
    }
    Ok(LipschitzEstimate {
        value,
        layers: details,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::materialize_operator;
    use crate::conv::DEFAULT_ORACLE_CAP;
    use rand::{Rng, SeedableRng};

    fn k1(w: &[f64]) -> ConvKernel {
        ConvKernel::simple(Tensor::new(vec![1, 1, w.len()], w.to_vec()).unwrap()).unwrap()
    }

    fn dense(rows: &[Vec<f64>]) -> LayerSpec {
        LayerSpec::Dense {
            weight: Tensor::from_rows(rows).unwrap(),
            bias: None,
        }
    }

    #[test]
    fn single_channel_examples() {
        assert_eq!(l1_bound_single_channel(&k1(&[1.0, 0.0, 0.0])).unwrap(), 1.0);
        assert_eq!(l1_bound_single_channel(&k1(&[1.0, 2.0, 3.0])).unwrap(), 6.0);
        let multi = ConvKernel::simple(Tensor::zeros(&[2, 1, 3]).unwrap()).unwrap();
        assert!(matches!(
            l1_bound_single_channel(&multi),
            Err(Error::WrongVariant(_))
        ));
    }

    #[test]
    fn multichannel_examples() {
        let k = k1(&[1.0, -2.0, 0.5]);
        assert_eq!(l1_bound_multichannel(&k), 3.5);
        // w(1,1,·) = [1,1], w(2,1,·) = [2,0]
        let k = ConvKernel::simple(Tensor::new(vec![2, 1, 2], vec![1.0, 1.0, 2.0, 0.0]).unwrap())
            .unwrap();
        assert!((l1_bound_multichannel(&k) - 8f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn stride_examples() {
        let k = ConvKernel::new(
            Tensor::new(vec![1, 1, 3], vec![1.0, -1.0, 1.0]).unwrap(),
            2,
            vec![0],
        )
        .unwrap();
        assert!((l1_bound_stride(&k) - 6f64.sqrt()).abs() < 1e-15);
        assert_eq!(l1_bound_stride(&k1(&[1.0])), 1.0);
    }

    #[test]
    fn power_iteration_on_diagonal() {
        let m = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let p = power_iteration(
            &MatrixOperator::new(&m).unwrap(),
            &PowerIterationConfig::default(),
        )
        .unwrap();
        assert!((p.value - 3.0).abs() < 1e-9);
        assert!(p.converged);
    }

    #[test]
    fn power_iteration_zero_operator() {
        let m = Tensor::zeros(&[3, 4]).unwrap();
        let p = power_iteration(
            &MatrixOperator::new(&m).unwrap(),
            &PowerIterationConfig::default(),
        )
        .unwrap();
        assert_eq!(p.value, 0.0);
        assert!(p.converged);
    }

    #[test]
    fn power_iteration_rejects_bad_config() {
        let m = Tensor::identity(2).unwrap();
        let op = MatrixOperator::new(&m).unwrap();
        let cfg = PowerIterationConfig {
            max_iters: 0,
            ..Default::default()
        };
        assert!(power_iteration(&op, &cfg).is_err());
    }

    #[test]
    fn power_trace_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let data = (0..30 * 20).map(|_| rng.random_range(-1.0..1.0)).collect();
            let m = Tensor::new(vec![30, 20], data).unwrap();
            let p = power_iteration(
                &MatrixOperator::new(&m).unwrap(),
                &PowerIterationConfig::default(),
            )
            .unwrap();
            for w in p.trace.windows(2) {
                assert!(w[1] >= w[0] * (1.0 - 1e-12), "{} < {}", w[1], w[0]);
            }
        }
    }

    #[test]
    fn bn_factor_examples() {
        let bn = |a: f64, v: f64, eps: f64| BatchNormParams {
            scale: vec![a],
            shift: vec![0.0],
            mean: vec![0.0],
            var: vec![v],
            eps,
        };
        assert!((bn_rescale_factor(&bn(0.5, 0.24, 0.01)).unwrap().max - 1.0).abs() < 1e-15);
        assert_eq!(bn_rescale_factor(&bn(1.0, 0.0, 1.0)).unwrap().max, 1.0);
        assert!(matches!(
            bn_rescale_factor(&bn(1.0, -1.0, 0.5)),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn rescaled_kernel_never_exceeds_scalar_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..30 {
            let c_out = rng.random_range(1..4);
            let c_in = rng.random_range(1..4);
            let size = rng.random_range(1..4);
            let n = c_out * c_in * size;
            let w = Tensor::new(
                vec![c_out, c_in, size],
                (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let kernel = ConvKernel::simple(w).unwrap();
            let bn = BatchNormParams {
                scale: (0..c_out).map(|_| rng.random_range(-2.0..2.0)).collect(),
                shift: vec![0.0; c_out],
                mean: vec![0.0; c_out],
                var: (0..c_out).map(|_| rng.random_range(0.0..3.0)).collect(),
                eps: 1e-3,
            };
            let net = NetworkSpec {
                input_shape: vec![c_in, 8],
                layers: vec![
                    LayerSpec::Conv { kernel, bias: None },
                    LayerSpec::BatchNorm(bn),
                ],
                num_classes: c_out * (8 - size + 1),
            };
            for method in [NormMethod::L1, NormMethod::Power] {
                let mut cfg = LipschitzConfig::with_method(method);
                let fused = network_lipschitz(&net, &cfg).unwrap().value;
                cfg.bn_fusion = BnFusion::ScalarMax;
                let scalar = network_lipschitz(&net, &cfg).unwrap().value;
                assert!(
                    fused <= scalar * (1.0 + 1e-9),
                    "{method}: {fused} > {scalar}"
                );
            }
        }
    }

    #[test]
    fn residual_examples() {
        assert_eq!(residual_block_bound(2.0, &[3.0, 4.0], 1.0).unwrap(), 14.0);
        assert_eq!(residual_block_bound(2.0, &[0.0, 0.0], 1.0).unwrap(), 2.0);
        assert_eq!(residual_block_bound(1.0, &[1.0, 1.0], 1.0).unwrap(), 2.0);
        assert!(residual_block_bound(1.0, &[], 1.0).is_err());
    }

    #[test]
    fn two_dense_layers_multiply() {
        let net = NetworkSpec {
            input_shape: vec![2],
            layers: vec![
                dense(&[vec![2.0, 0.0], vec![0.0, 1.0]]),
                LayerSpec::relu(),
                dense(&[vec![3.0, 0.0], vec![0.0, 0.5]]),
            ],
            num_classes: 2,
        };
        let est =
            network_lipschitz(&net, &LipschitzConfig::with_method(NormMethod::Power)).unwrap();
        assert!((est.value - 6.0).abs() < 1e-8);
        assert_eq!(est.layers.len(), 2);
    }

    #[test]
    fn identity_layer_is_one() {
        let net = NetworkSpec {
            input_shape: vec![3],
            layers: vec![LayerSpec::Dense {
                weight: Tensor::identity(3).unwrap(),
                bias: None,
            }],
            num_classes: 3,
        };
        for method in [NormMethod::L1, NormMethod::Power] {
            let est = network_lipschitz(&net, &LipschitzConfig::with_method(method)).unwrap();
            assert!((est.value - 1.0).abs() < 1e-12, "{method}: {}", est.value);
        }
    }

    #[test]
    fn declared_constants_enter_the_product() {
        let net = NetworkSpec {
            input_shape: vec![2],
            layers: vec![
                LayerSpec::Dense {
                    weight: Tensor::identity(2).unwrap(),
                    bias: None,
                },
                LayerSpec::Activation { lipschitz: 0.25 },
            ],
            num_classes: 2,
        };
        let est = network_lipschitz(&net, &LipschitzConfig::default()).unwrap();
        assert_eq!(est.value, 0.25);
    }

    #[test]
    fn residual_network_uses_block_rule() {
        // shortcut: 2·I, main: 3·I then 4·I with inner activation 1
        let scaled = |c: f64| LayerSpec::Dense {
            weight: Tensor::identity(2).unwrap().scale(c).unwrap(),
            bias: None,
        };
        let net = NetworkSpec {
            input_shape: vec![2],
            layers: vec![LayerSpec::Residual {
                shortcut: vec![scaled(2.0)],
                main: vec![scaled(3.0), LayerSpec::relu(), scaled(4.0)],
                inner_lipschitz: 1.0,
            }],
            num_classes: 2,
        };
        let est =
            network_lipschitz(&net, &LipschitzConfig::with_method(NormMethod::Power)).unwrap();
        assert!((est.value - 14.0).abs() < 1e-8);
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let net = NetworkSpec {
            input_shape: vec![3],
            layers: vec![dense(&[vec![1.0, 0.0]])],
            num_classes: 1,
        };
        match network_lipschitz(&net, &LipschitzConfig::default()) {
            Err(Error::Estimation { layer, .. }) => assert_eq!(layer, "layers[0]"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn delta_conv_exact_norm_is_one() {
        let k = k1(&[0.0, 1.0, 0.0]);
        let m = materialize_operator(&k, &[1, 6], DEFAULT_ORACLE_CAP).unwrap();
        let p = power_iteration(
            &MatrixOperator::new(&m).unwrap(),
            &PowerIterationConfig::default(),
        )
        .unwrap();
        assert!((p.value - 1.0).abs() < 1e-9);
        assert_eq!(l1_bound_single_channel(&k).unwrap(), 1.0);
        assert_eq!(l1_bound_multichannel(&k), 1.0);
    }
}
