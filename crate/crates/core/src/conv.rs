//! Multi-channel 1-D and 2-D convolutions with uniform stride and zero padding.
//!
//! Index convention: the forward pass is a cross-correlation,
//!
//! ```text
//! out[co, u] = Σ_{ci, k} w[co, ci, k] · x[ci, u·S + k − pad]
//! ```
//!
//! which is the textbook convolution `Σ_v x(v) w(u − v)` applied to the
//! reflected kernel. Reflection is an isometry on kernels, so operator norms
//! and every ℓ1-type bound are the same under either convention. The adjoint,
//! the weight gradient and [`materialize_operator`] all use the convention
//! above.

use crate::error::{Error, Result};
use crate::tensor::{LinearOperator, Tensor};

/// Default cap on the input size of an explicitly materialized operator.
pub const DEFAULT_ORACLE_CAP: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    weights: Tensor,
    stride: usize,
    padding: Vec<usize>,
}

/// Geometry of one convolution application, with 1-D lifted to 2-D (height 1).
#[derive(Debug, Clone, Copy)]
struct Geometry {
    c_out: usize,
    c_in: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    stride: usize,
}

fn output_dim(input: usize, pad: usize, size: usize, stride: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < size {
        return Err(Error::shape(format!(
            "kernel size {size} exceeds padded input size {padded}"
        )));
    }
    Ok((padded - size) / stride + 1)
}

impl ConvKernel {
    /// `weights` has shape (C_out, C_in, Size_1[, Size_2]); `padding` has one
    /// entry per spatial dimension.
    pub fn new(weights: Tensor, stride: usize, padding: Vec<usize>) -> Result<Self> {
        let d = weights.ndim().saturating_sub(2);
        if !(1..=2).contains(&d) {
            return Err(Error::shape(format!(
                "convolution weights must have shape (C_out, C_in, size..) with 1 or 2 spatial dims, got {:?}",
                weights.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::shape("stride must be at least 1"));
        }
        if padding.len() != d {
            return Err(Error::shape(format!(
                "{d} spatial dims but {} padding entries",
                padding.len()
            )));
        }
        Ok(ConvKernel {
            weights,
            stride,
            padding,
        })
    }

    /// Stride 1, no padding.
    pub fn simple(weights: Tensor) -> Result<Self> {
        let d = weights.ndim().saturating_sub(2);
        ConvKernel::new(weights, 1, vec![0; d])
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> &[usize] {
        &self.padding
    }

    pub fn c_out(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn spatial_dims(&self) -> usize {
        self.weights.ndim() - 2
    }

    pub fn kernel_size(&self) -> &[usize] {
        &self.weights.shape()[2..]
    }

    /// Same geometry, different weights of identical shape.
    pub fn with_weights(&self, weights: Tensor) -> Result<Self> {
        if weights.shape() != self.weights.shape() {
            return Err(Error::shape(format!(
                "replacement weights have shape {:?}, expected {:?}",
                weights.shape(),
                self.weights.shape()
            )));
        }
        Ok(ConvKernel {
            weights,
            stride: self.stride,
            padding: self.padding.clone(),
        })
    }

    /// Output shape (C_out, spatial..) for an input of shape (C_in, spatial..).
    pub fn output_shape(&self, input_shape: &[usize]) -> Result<Vec<usize>> {
        let g = self.geometry(input_shape)?;
        Ok(if self.spatial_dims() == 1 {
            vec![g.c_out, g.ow]
        } else {
            vec![g.c_out, g.oh, g.ow]
        })
    }

    fn geometry(&self, input_shape: &[usize]) -> Result<Geometry> {
        let d = self.spatial_dims();
        if input_shape.len() != d + 1 {
            return Err(Error::shape(format!(
                "input shape {input_shape:?} does not match a {d}-D kernel (expected (C_in, spatial..))"
            )));
        }
        if input_shape[0] != self.c_in() {
            return Err(Error::shape(format!(
                "kernel expects {} input channels, input has {}",
                self.c_in(),
                input_shape[0]
            )));
        }
        if input_shape.iter().any(|&s| s == 0) {
            return Err(Error::shape("spatial dims must be at least 1"));
        }
        let ks = self.kernel_size();
        let (kh, kw, ph, pw, h, w) = if d == 1 {
            (1, ks[0], 0, self.padding[0], 1, input_shape[1])
        } else {
            (
                ks[0],
                ks[1],
                self.padding[0],
                self.padding[1],
                input_shape[1],
                input_shape[2],
            )
        };
        let oh = output_dim(h, ph, kh, self.stride)?;
        let ow = output_dim(w, pw, kw, self.stride)?;
        Ok(Geometry {
            c_out: self.c_out(),
            c_in: self.c_in(),
            kh,
            kw,
            ph,
            pw,
            h,
            w,
            oh,
            ow,
            stride: self.stride,
        })
    }
}

/// Visits every (output index, input index, weight index) triple that
/// contributes to the convolution, in a fixed order.
#[inline]
fn for_each_tap(g: &Geometry, mut f: impl FnMut(usize, usize, usize)) {
    let s = g.stride;
    for co in 0..g.c_out {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let out_idx = (co * g.oh + oy) * g.ow + ox;
                for ci in 0..g.c_in {
                    for ky in 0..g.kh {
                        let iy = (oy * s + ky) as isize - g.ph as isize;
                        if iy < 0 || iy as usize >= g.h {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * s + kx) as isize - g.pw as isize;
                            if ix < 0 || ix as usize >= g.w {
                                continue;
                            }
                            let in_idx = (ci * g.h + iy as usize) * g.w + ix as usize;
                            let w_idx = ((co * g.c_in + ci) * g.kh + ky) * g.kw + kx;
                            f(out_idx, in_idx, w_idx);
                        }
                    }
                }
            }
        }
    }
}

fn forward_flat(kernel: &ConvKernel, g: &Geometry, x: &[f64]) -> Vec<f64> {
    let w = kernel.weights.data();
    let mut out = vec![0.0; g.c_out * g.oh * g.ow];
    for_each_tap(g, |o, i, k| out[o] += w[k] * x[i]);
    out
}

fn adjoint_flat(kernel: &ConvKernel, g: &Geometry, y: &[f64]) -> Vec<f64> {
    let w = kernel.weights.data();
    let mut out = vec![0.0; g.c_in * g.h * g.w];
    for_each_tap(g, |o, i, k| out[i] += w[k] * y[o]);
    out
}

pub fn conv_forward(kernel: &ConvKernel, input: &Tensor) -> Result<Tensor> {
    let g = kernel.geometry(input.shape())?;
    let out = forward_flat(kernel, &g, input.data());
    Tensor::new(kernel.output_shape(input.shape())?, out)
}

/// `Wᵀy` for the operator `W` of [`conv_forward`] on inputs of `input_shape`.
///
/// With stride > 1 the input shape cannot be recovered from the output shape,
/// so it is passed explicitly.
pub fn conv_adjoint(
    kernel: &ConvKernel,
    cotangent: &Tensor,
    input_shape: &[usize],
) -> Result<Tensor> {
    let g = kernel.geometry(input_shape)?;
    let expected = kernel.output_shape(input_shape)?;
    if cotangent.shape() != expected.as_slice() {
        return Err(Error::shape(format!(
            "cotangent shape {:?} does not match forward output shape {expected:?}",
            cotangent.shape()
        )));
    }
    Tensor::new(
        input_shape.to_vec(),
        adjoint_flat(kernel, &g, cotangent.data()),
    )
}

/// Gradient of `⟨y, conv_forward(w, x)⟩` with respect to the kernel weights.
pub fn conv_weight_grad(kernel: &ConvKernel, input: &Tensor, cotangent: &Tensor) -> Result<Tensor> {
    let g = kernel.geometry(input.shape())?;
    let expected = kernel.output_shape(input.shape())?;
    if cotangent.shape() != expected.as_slice() {
        return Err(Error::shape(format!(
            "cotangent shape {:?} does not match forward output shape {expected:?}",
            cotangent.shape()
        )));
    }
    let x = input.data();
    let y = cotangent.data();
    let mut grad = vec![0.0; kernel.weights.len()];
    for_each_tap(&g, |o, i, k| grad[k] += y[o] * x[i]);
    Tensor::new(kernel.weights.shape().to_vec(), grad)
}

/// Dense matrix `M` with `M·vec(x) = vec(conv_forward(kernel, x))`, built
/// column by column from unit inputs.
pub fn materialize_operator(
    kernel: &ConvKernel,
    input_shape: &[usize],
    cap: usize,
) -> Result<Tensor> {
    let g = kernel.geometry(input_shape)?;
    let n_in: usize = input_shape.iter().product();
    if n_in > cap {
        return Err(Error::OracleSize { size: n_in, cap });
    }
    let n_out = g.c_out * g.oh * g.ow;
    let mut m = vec![0.0; n_out * n_in];
    let mut unit = vec![0.0; n_in];
    for col in 0..n_in {
        unit[col] = 1.0;
        let image = forward_flat(kernel, &g, &unit);
        unit[col] = 0.0;
        for (row, v) in image.into_iter().enumerate() {
            m[row * n_in + col] = v;
        }
    }
    Tensor::new(vec![n_out, n_in], m)
}

/// A convolution bound to a fixed input shape, usable wherever a
/// [`LinearOperator`] is expected.
#[derive(Debug, Clone)]
pub struct ConvOperator {
    kernel: ConvKernel,
    input_shape: Vec<usize>,
    geometry: Geometry,
}

impl ConvOperator {
    pub fn new(kernel: ConvKernel, input_shape: &[usize]) -> Result<Self> {
        let geometry = kernel.geometry(input_shape)?;
        Ok(ConvOperator {
            kernel,
            input_shape: input_shape.to_vec(),
            geometry,
        })
    }

    pub fn kernel(&self) -> &ConvKernel {
        &self.kernel
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }
}

impl LinearOperator for ConvOperator {
    fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    fn output_len(&self) -> usize {
        let g = &self.geometry;
        g.c_out * g.oh * g.ow
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        forward_flat(&self.kernel, &self.geometry, x)
    }

    fn apply_adjoint(&self, y: &[f64]) -> Vec<f64> {
        adjoint_flat(&self.kernel, &self.geometry, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dot;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kernel1d(w: &[f64]) -> ConvKernel {
        ConvKernel::simple(Tensor::new(vec![1, 1, w.len()], w.to_vec()).unwrap()).unwrap()
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn delta_kernel_is_identity() {
        let k = kernel1d(&[1.0]);
        let x = Tensor::new(vec![1, 5], vec![0.5, -1.0, 2.0, 3.0, 4.5]).unwrap();
        let y = conv_forward(&k, &x).unwrap();
        assert_eq!(y.data(), x.data());
        let back = conv_adjoint(&k, &y, x.shape()).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn hand_sum() {
        let k = kernel1d(&[1.0, 1.0]);
        let x = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(conv_forward(&k, &x).unwrap().data(), &[3.0, 5.0]);
    }

    #[test]
    fn zero_cotangent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = ConvKernel::new(random_tensor(&mut rng, &[2, 3, 3]), 2, vec![1]).unwrap();
        let out_shape = k.output_shape(&[3, 7]).unwrap();
        let y = Tensor::zeros(&out_shape).unwrap();
        assert!(conv_adjoint(&k, &y, &[3, 7])
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn materialized_hand_cases() {
        let m = materialize_operator(&kernel1d(&[1.0]), &[1, 4], DEFAULT_ORACLE_CAP).unwrap();
        assert_eq!(m, Tensor::identity(4).unwrap());
        let m = materialize_operator(&kernel1d(&[1.0, 1.0]), &[1, 3], DEFAULT_ORACLE_CAP).unwrap();
        assert_eq!(
            m,
            Tensor::from_rows(&[vec![1.0, 1.0, 0.0], vec![0.0, 1.0, 1.0]]).unwrap()
        );
    }

    #[test]
    fn output_dims_follow_floor_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = ConvKernel::new(random_tensor(&mut rng, &[4, 2, 3, 2]), 2, vec![1, 0]).unwrap();
        // h: (7 + 2 - 3)/2 + 1 = 4, w: (6 - 2)/2 + 1 = 3
        assert_eq!(k.output_shape(&[2, 7, 6]).unwrap(), vec![4, 4, 3]);
    }

    #[test]
    fn random_conv_matches_explicit_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let k = ConvKernel::simple(random_tensor(&mut rng, &[3, 2, 3])).unwrap();
        let m = materialize_operator(&k, &[2, 8], DEFAULT_ORACLE_CAP).unwrap();
        let (rows, cols) = m.dims2().unwrap();
        // Independent matrix assembly straight from the defining sum.
        let w = k.weights().data();
        let ow = 6;
        assert_eq!((rows, cols), (3 * ow, 16));
        let mut expect = vec![0.0; rows * cols];
        for co in 0..3 {
            for u in 0..ow {
                for ci in 0..2 {
                    for t in 0..3 {
                        expect[(co * ow + u) * cols + ci * 8 + u + t] += w[(co * 2 + ci) * 3 + t];
                    }
                }
            }
        }
        assert_eq!(m.data(), expect.as_slice());
        for _ in 0..20 {
            let x = random_tensor(&mut rng, &[2, 8]);
            let direct = conv_forward(&k, &x).unwrap();
            let via = m.matvec(&x.clone().reshape(vec![16]).unwrap()).unwrap();
            for (a, b) in direct.data().iter().zip(via.data()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn adjoint_matches_matrix_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for &(stride, pad) in &[(1, 0), (2, 1), (3, 2)] {
            let k = ConvKernel::new(
                random_tensor(&mut rng, &[2, 3, 3, 2]),
                stride,
                vec![pad, pad],
            )
            .unwrap();
            let shape = [3, 6, 5];
            let m = materialize_operator(&k, &shape, DEFAULT_ORACLE_CAP).unwrap();
            let out_shape = k.output_shape(&shape).unwrap();
            let y = random_tensor(&mut rng, &out_shape);
            let flat_y = Tensor::from_vec(y.data().to_vec()).unwrap();
            let via = m.matvec_transposed(&flat_y).unwrap();
            let adj = conv_adjoint(&k, &y, &shape).unwrap();
            for (a, b) in adj.data().iter().zip(via.data()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let k = ConvKernel::simple(Tensor::zeros(&[2, 3, 3]).unwrap()).unwrap();
        let x = Tensor::zeros(&[2, 8]).unwrap();
        assert!(matches!(conv_forward(&k, &x), Err(Error::Shape(_))));
        let y = Tensor::zeros(&[2, 5]).unwrap();
        assert!(matches!(
            conv_adjoint(&k, &y, &[3, 8]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn cap_is_enforced() {
        let k = kernel1d(&[1.0]);
        assert!(matches!(
            materialize_operator(&k, &[1, 5000], DEFAULT_ORACLE_CAP),
            Err(Error::OracleSize {
                size: 5000,
                cap: 4096
            })
        ));
    }

    #[test]
    fn weight_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let k = ConvKernel::new(random_tensor(&mut rng, &[2, 2, 3]), 2, vec![1]).unwrap();
        let x = random_tensor(&mut rng, &[2, 9]);
        let y = random_tensor(&mut rng, &k.output_shape(x.shape()).unwrap());
        let grad = conv_weight_grad(&k, &x, &y).unwrap();
        // ⟨y, W x⟩ is linear in w, so a unit step gives the exact partial derivative.
        for idx in 0..k.weights().len() {
            let mut w = k.weights().clone();
            w.data_mut()[idx] += 1.0;
            let bumped = k.with_weights(w).unwrap();
            let base = dot(conv_forward(&k, &x).unwrap().data(), y.data());
            let next = dot(conv_forward(&bumped, &x).unwrap().data(), y.data());
            assert!((next - base - grad.data()[idx]).abs() < 1e-12);
        }
    }
}
