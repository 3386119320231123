//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use lipmargin::conv::{materialize_operator, ConvKernel};
use lipmargin::tensor::Tensor;
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Largest singular value by a full SVD.
pub fn svd_norm(m: &Tensor) -> f64 {
    let (r, c) = m.dims2().unwrap();
    DMatrix::from_row_slice(r, c, m.data())
        .singular_values()
        .iter()
        .fold(0.0, |a: f64, &b| a.max(b))
}

pub fn conv_svd_norm(kernel: &ConvKernel, input_shape: &[usize]) -> f64 {
    svd_norm(&materialize_operator(kernel, input_shape, 1 << 14).unwrap())
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], random_vec(rng, rows * cols)).unwrap()
}

/// A 1-D kernel with the given geometry and an input length it accepts.
pub fn random_conv_1d(
    rng: &mut ChaCha8Rng,
    c_out: usize,
    c_in: usize,
    size: usize,
    stride: usize,
    pad: usize,
    len: usize,
) -> (ConvKernel, Vec<usize>) {
    let w = Tensor::new(
        vec![c_out, c_in, size],
        random_vec(rng, c_out * c_in * size),
    )
    .unwrap();
    let len = len.max(size.saturating_sub(2 * pad)).max(1);
    (
        ConvKernel::new(w, stride, vec![pad]).unwrap(),
        vec![c_in, len],
    )
}

/// Single-channel kernel that is zero except for one tap.
pub fn delta_kernel(size: usize, tap: usize, value: f64, stride: usize) -> ConvKernel {
    let mut w = vec![0.0; size];
    w[tap] = value;
    ConvKernel::new(Tensor::new(vec![1, 1, size], w).unwrap(), stride, vec![0]).unwrap()
}

/// Smallest sample value whose empirical CDF reaches `q`, by a linear scan.
pub fn naive_quantile(sample: &[f64], q: f64) -> f64 {
    let n = sample.len() as f64;
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    *sorted
        .iter()
        .find(|&&v| sample.iter().filter(|&&m| m <= v).count() as f64 / n >= q)
        .expect("q <= 1 is always reached")
}

pub fn naive_cdf(sample: &[f64], gamma: f64) -> f64 {
    sample.iter().filter(|&&m| m <= gamma).count() as f64 / sample.len() as f64
}

/// `1 + #{smaller} + (#{equal} - 1) / 2` for every entry.
fn naive_mid_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&u| u < v).count() as f64;
            let equal = x.iter().filter(|&&u| u == v).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

fn naive_pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

pub fn naive_spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    naive_pearson(&naive_mid_ranks(x), &naive_mid_ranks(y))
}

/// τ-b from sign products: `Σ sgn(dx)·sgn(dy) / √(untied_x · untied_y)`.
pub fn naive_kendall(x: &[f64], y: &[f64]) -> Option<f64> {
    let sign = |d: f64| (d > 0.0) as i64 - (d < 0.0) as i64;
    let (mut s, mut untied_x, mut untied_y) = (0i64, 0i64, 0i64);
    for i in 0..x.len() {
        for j in 0..i {
            let (sx, sy) = (sign(x[i] - x[j]), sign(y[i] - y[j]));
            s += sx * sy;
            untied_x += sx.abs();
            untied_y += sy.abs();
        }
    }
    (untied_x > 0 && untied_y > 0)
        .then(|| s as f64 / ((untied_x as f64) * (untied_y as f64)).sqrt())
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}
