use super::{gemm, Initializer, Module, Param, Tensor};

/// 2-d convolution over square kernels with zero padding `kernel / 2`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    input: Option<Tensor>,
}

impl Conv2d {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        init: &mut Initializer,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let bound = 1.0 / (fan_in as f32).sqrt();
        let w = init.uniform(cout * fan_in, bound);
        let b = init.uniform(cout, bound);
        Self::with_values(name, cin, cout, kernel, stride, w, b)
    }

    /// Zero-initialized convolution; used for output heads so a fresh
    /// model starts by predicting zero.
    pub fn zeroed(name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        let fan_in = cin * kernel * kernel;
        Self::with_values(
            name,
            cin,
            cout,
            kernel,
            stride,
            vec![0.0; cout * fan_in],
            vec![0.0; cout],
        )
    }

    fn with_values(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        w: Vec<f32>,
        b: Vec<f32>,
    ) -> Self {
        assert!(kernel % 2 == 1 && stride >= 1);
        Self {
            weight: Param::new(format!("{name}.weight"), vec![cout, cin, kernel, kernel], w),
            bias: Param::new(format!("{name}.bias"), vec![cout], b),
            cin,
            cout,
            kernel,
            stride,
            pad: kernel / 2,
            input: None,
        }
    }

    pub fn out_size(&self, size: usize) -> usize {
        (size + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let [n, c, h, w] = x.dims();
        assert_eq!(c, self.cin, "{}: channel mismatch", self.weight.name());
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let hw = oh * ow;
        let kk = self.cin * self.kernel * self.kernel;
        let mut out = Tensor::zeros([n, self.cout, oh, ow]);
        let mut col = if self.pointwise() {
            Vec::new()
        } else {
            vec![0.0; kk * hw]
        };
        for i in 0..n {
            let src = x.item(i);
            let cols: &[f32] = if self.pointwise() {
                src
            } else {
                self.im2col(src, h, w, oh, ow, &mut col);
                &col
            };
            let dst = out.item_mut(i);
            for (co, b) in self.bias.value.iter().enumerate() {
                dst[co * hw..(co + 1) * hw].fill(*b);
            }
            gemm(
                self.cout,
                kk,
                hw,
                1.0,
                &self.weight.value,
                (kk, 1),
                cols,
                (hw, 1),
                1.0,
                dst,
                hw,
            );
        }
        out
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let y = self.forward(x);
        self.input = Some(x.clone());
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self
            .input
            .take()
            .expect("Conv2d::backward without forward_train");
        let [n, _, h, w] = x.dims();
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        assert_eq!(dy.dims(), [n, self.cout, oh, ow]);
        let hw = oh * ow;
        let kk = self.cin * self.kernel * self.kernel;
        let mut dx = Tensor::zeros(x.dims());
        let mut col = vec![0.0; if self.pointwise() { 0 } else { kk * hw }];
        let mut dcol = vec![0.0; kk * hw];
        for i in 0..n {
            let dyi = dy.item(i);
            let cols: &[f32] = if self.pointwise() {
                x.item(i)
            } else {
                self.im2col(x.item(i), h, w, oh, ow, &mut col);
                &col
            };
            gemm(
                self.cout,
                hw,
                kk,
                1.0,
                dyi,
                (hw, 1),
                cols,
                (1, hw),
                1.0,
                &mut self.weight.grad,
                kk,
            );
            for (co, g) in self.bias.grad.iter_mut().enumerate() {
                *g += dyi[co * hw..(co + 1) * hw].iter().sum::<f32>();
            }
            gemm(
                kk,
                self.cout,
                hw,
                1.0,
                &self.weight.value,
                (1, kk),
                dyi,
                (hw, 1),
                0.0,
                &mut dcol,
                hw,
            );
            if self.pointwise() {
                dx.item_mut(i).copy_from_slice(&dcol);
            } else {
                self.col2im(&dcol, h, w, oh, ow, dx.item_mut(i));
            }
        }
        dx
    }

    fn im2col(&self, src: &[f32], h: usize, w: usize, oh: usize, ow: usize, col: &mut [f32]) {
        let (k, s, p) = (self.kernel, self.stride, self.pad as isize);
        for ci in 0..self.cin {
            let plane = &src[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * oh * ow;
                    let off = kx as isize - p;
                    for oy in 0..oh {
                        let dst = &mut col[row + oy * ow..row + (oy + 1) * ow];
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let srow = &plane[iy as usize * w..(iy as usize + 1) * w];
                        if s == 1 {
                            let lo = (-off).clamp(0, ow as isize) as usize;
                            let hi = (w as isize - off).clamp(lo as isize, ow as isize) as usize;
                            dst[..lo].fill(0.0);
                            dst[hi..].fill(0.0);
                            let start = (lo as isize + off) as usize;
                            dst[lo..hi].copy_from_slice(&srow[start..start + (hi - lo)]);
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * s) as isize + off;
                                *d = if ix >= 0 && ix < w as isize {
                                    srow[ix as usize]
                                } else {
                                    0.0
                                };
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f32], h: usize, w: usize, oh: usize, ow: usize, dst: &mut [f32]) {
        let (k, s, p) = (self.kernel, self.stride, self.pad as isize);
        for ci in 0..self.cin {
            let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * oh * ow;
                    let off = kx as isize - p;
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &col[row + oy * ow..row + (oy + 1) * ow];
                        let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in src.iter().enumerate() {
                            let ix = (ox * s) as isize + off;
                            if ix >= 0 && ix < w as isize {
                                drow[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Module for Conv2d {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Fully connected layer over `N x IN` matrices.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    fan_in: usize,
    fan_out: usize,
    input: Option<Tensor>,
}

impl Linear {
    pub fn new(name: &str, fan_in: usize, fan_out: usize, init: &mut Initializer) -> Self {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let w = init.uniform(fan_in * fan_out, bound);
        let b = init.uniform(fan_out, bound);
        Self {
            weight: Param::new(format!("{name}.weight"), vec![fan_out, fan_in], w),
            bias: Param::new(format!("{name}.bias"), vec![fan_out], b),
            fan_in,
            fan_out,
            input: None,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let n = x.n();
        assert_eq!(x.item_len(), self.fan_in, "{}: width mismatch", self.weight.name());
        let mut y = Tensor::zeros([n, self.fan_out, 1, 1]);
        for row in y.data_mut().chunks_mut(self.fan_out) {
            row.copy_from_slice(&self.bias.value);
        }
        gemm(
            n,
            self.fan_in,
            self.fan_out,
            1.0,
            x.data(),
            (self.fan_in, 1),
            &self.weight.value,
            (1, self.fan_in),
            1.0,
            y.data_mut(),
            self.fan_out,
        );
        y
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let y = self.forward(x);
        self.input = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self
            .input
            .take()
            .expect("Linear::backward without forward_train");
        let n = x.n();
        gemm(
            self.fan_out,
            n,
            self.fan_in,
            1.0,
            dy.data(),
            (1, self.fan_out),
            x.data(),
            (self.fan_in, 1),
            1.0,
            &mut self.weight.grad,
            self.fan_in,
        );
        for row in dy.data().chunks(self.fan_out) {
            for (g, v) in self.bias.grad.iter_mut().zip(row) {
                *g += v;
            }
        }
        let mut dx = Tensor::zeros(x.dims());
        gemm(
            n,
            self.fan_out,
            self.fan_in,
            1.0,
            dy.data(),
            (self.fan_out, 1),
            &self.weight.value,
            (self.fan_in, 1),
            0.0,
            dx.data_mut(),
            self.fan_in,
        );
        dx
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Group normalization with a per-channel affine transform.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: Param,
    pub beta: Param,
    groups: usize,
    channels: usize,
    eps: f32,
    cache: Option<(Tensor, Vec<f32>)>,
}

impl GroupNorm {
    /// Uses the largest group count in {8, 4, 2, 1} that divides `channels`.
    pub fn new(name: &str, channels: usize) -> Self {
        let groups = [8, 4, 2, 1]
            .into_iter()
            .find(|g| channels % g == 0)
            .unwrap_or(1);
        Self {
            gamma: Param::new(format!("{name}.gamma"), vec![channels], vec![1.0; channels]),
            beta: Param::new(format!("{name}.beta"), vec![channels], vec![0.0; channels]),
            groups,
            channels,
            eps: 1e-5,
            cache: None,
        }
    }

    fn normalize(&self, x: &Tensor) -> (Tensor, Vec<f32>) {
        let [n, c, h, w] = x.dims();
        assert_eq!(c, self.channels);
        let per_group = (c / self.groups) * h * w;
        let mut xhat = Tensor::zeros(x.dims());
        let mut inv_std = Vec::with_capacity(n * self.groups);
        for (src, dst) in x
            .data()
            .chunks(per_group)
            .zip(xhat.data_mut().chunks_mut(per_group))
        {
            let mean = src.iter().map(|&v| v as f64).sum::<f64>() / per_group as f64;
            let var = src
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / per_group as f64;
            let inv = 1.0 / (var + self.eps as f64).sqrt();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = ((s as f64 - mean) * inv) as f32;
            }
            inv_std.push(inv as f32);
        }
        (xhat, inv_std)
    }

    fn affine(&self, xhat: &Tensor) -> Tensor {
        let hw = xhat.h() * xhat.w();
        let mut y = xhat.clone();
        for item in y.data_mut().chunks_mut(self.channels * hw) {
            for (ch, plane) in item.chunks_mut(hw).enumerate() {
                let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                for v in plane {
                    *v = *v * g + b;
                }
            }
        }
        y
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (xhat, _) = self.normalize(x);
        self.affine(&xhat)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let (xhat, inv) = self.normalize(x);
        let y = self.affine(&xhat);
        self.cache = Some((xhat, inv));
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (xhat, inv_std) = self
            .cache
            .take()
            .expect("GroupNorm::backward without forward_train");
        let hw = xhat.h() * xhat.w();
        let cg = self.channels / self.groups;
        let per_group = cg * hw;
        let mut dx = Tensor::zeros(xhat.dims());
        let mut dxhat = vec![0.0f32; per_group];
        for (gi, ((xg, dyg), dxg)) in xhat
            .data()
            .chunks(per_group)
            .zip(dy.data().chunks(per_group))
            .zip(dx.data_mut().chunks_mut(per_group))
            .enumerate()
        {
            let first_ch = (gi % self.groups) * cg;
            let mut sum1 = 0.0f64;
            let mut sum2 = 0.0f64;
            for local in 0..cg {
                let ch = first_ch + local;
                let gamma = self.gamma.value[ch];
                let mut dg = 0.0f32;
                let mut db = 0.0f32;
                for j in local * hw..(local + 1) * hw {
                    dg += dyg[j] * xg[j];
                    db += dyg[j];
                    let d = dyg[j] * gamma;
                    dxhat[j] = d;
                    sum1 += d as f64;
                    sum2 += (d * xg[j]) as f64;
                }
                self.gamma.grad[ch] += dg;
                self.beta.grad[ch] += db;
            }
            let m = per_group as f64;
            let (mean1, mean2) = ((sum1 / m) as f32, (sum2 / m) as f32);
            let inv = inv_std[gi];
            for j in 0..per_group {
                dxg[j] = inv * (dxhat[j] - mean1 - xg[j] * mean2);
            }
        }
        dx
    }
}

impl Module for GroupNorm {
    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// `x * sigmoid(x)`.
#[derive(Clone, Debug, Default)]
pub struct Silu {
    input: Option<Tensor>,
}

impl Silu {
    pub fn forward(x: &Tensor) -> Tensor {
        let mut y = x.clone();
        for v in y.data_mut() {
            *v = *v / (1.0 + (-*v).exp());
        }
        y
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        self.input = Some(x.clone());
        Self::forward(x)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.input.take().expect("Silu::backward without forward_train");
        let mut dx = dy.clone();
        for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
            let s = 1.0 / (1.0 + (-v).exp());
            *d *= s * (1.0 + v * (1.0 - s));
        }
        dx
    }
}
