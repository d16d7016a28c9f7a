//! A small CPU neural-network engine: dense `NCHW` tensors, layers with
//! explicit forward/backward passes, and Adam.
//!
//! Layers cache what their backward pass needs when run through
//! `forward_train`; plain `forward` takes `&self` and keeps no state, so a
//! trained model can be shared read-only across threads.

mod layers;
mod ops;
mod optim;

pub use layers::{Conv2d, GroupNorm, Linear, Silu};
pub use ops::{
    add_channel_bias, bce_with_logits, channel_sums, concat_channels, global_avg_pool,
    global_avg_pool_backward, mse_loss, sinusoidal_embedding, split_channels, upsample2x,
    upsample2x_backward,
};
pub use optim::{clip_grad_norm, Adam, AdamConfig, AdamState};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense 4-d `f32` tensor in `N x C x H x W` order. Matrices use `H = W = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f32>) -> Self {
        assert_eq!(
            data.len(),
            dims.iter().product::<usize>(),
            "tensor data does not match dims {dims:?}"
        );
        Self { dims, data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        Self::from_vec([rows, cols, 1, 1], data)
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn n(&self) -> usize {
        self.dims[0]
    }

    pub fn c(&self) -> usize {
        self.dims[1]
    }

    pub fn h(&self) -> usize {
        self.dims[2]
    }

    pub fn w(&self) -> usize {
        self.dims[3]
    }

    pub fn item_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    pub fn item(&self, i: usize) -> &[f32] {
        let len = self.item_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [f32] {
        let len = self.item_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Copies the selected batch items into a new tensor.
    pub fn select(&self, items: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(items.len() * self.item_len());
        for &i in items {
            data.extend_from_slice(self.item(i));
        }
        let [_, c, h, w] = self.dims;
        Tensor::from_vec([items.len(), c, h, w], data)
    }
}

/// A trainable parameter with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param {
    name: String,
    shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f32>) -> Self {
        assert_eq!(value.len(), shape.iter().product::<usize>());
        let grad = vec![0.0; value.len()];
        Self {
            name: name.into(),
            shape,
            value,
            grad,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything that owns parameters, listed in a fixed order.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

/// Seeded source of initial weights.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, len: usize, bound: f32) -> Vec<f32> {
        (0..len)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect()
    }
}

/// `C = alpha * A * B + beta * C` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    a_strides: (usize, usize),
    b: &[f32],
    b_strides: (usize, usize),
    beta: f32,
    c: &mut [f32],
    c_row_stride: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= span(m, k, a_strides), "gemm: A too short");
    assert!(b.len() >= span(k, n, b_strides), "gemm: B too short");
    assert!(c.len() >= span(m, n, (c_row_stride, 1)), "gemm: C too short");
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_row_stride as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f32> = (0..m * k).map(|i| i as f32 * 0.5 - 2.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i % 7) as f32 - 3.0).collect();
        let mut c = vec![1.0; m * n];
        gemm(m, k, n, 1.0, &a, (k, 1), &b, (n, 1), 1.0, &mut c, n);
        for i in 0..m {
            for j in 0..n {
                let want: f32 = 1.0 + (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum::<f32>();
                assert!((c[i * n + j] - want).abs() < 1e-4);
            }
        }
        // Transposed A through strides.
        let mut ct = vec![0.0; k * n];
        let at: Vec<f32> = a.clone();
        gemm(k, m, n, 1.0, &at, (1, k), &c, (n, 1), 0.0, &mut ct, n);
        for i in 0..k {
            for j in 0..n {
                let want: f32 = (0..m).map(|p| a[p * k + i] * c[p * n + j]).sum();
                assert!((ct[i * n + j] - want).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn initializer_is_seeded() {
        let a = Initializer::new(3).uniform(10, 0.5);
        let b = Initializer::new(3).uniform(10, 0.5);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.abs() <= 0.5));
        assert_ne!(a, Initializer::new(4).uniform(10, 0.5));
    }
}
