use super::Tensor;

/// Nearest-neighbour 2x upsampling.
pub fn upsample2x(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.dims();
    let mut y = Tensor::zeros([n, c, 2 * h, 2 * w]);
    for (src, dst) in x
        .data()
        .chunks(h * w)
        .zip(y.data_mut().chunks_mut(4 * h * w))
    {
        for yy in 0..h {
            let srow = &src[yy * w..(yy + 1) * w];
            for rep in 0..2 {
                let drow = &mut dst[(2 * yy + rep) * 2 * w..(2 * yy + rep + 1) * 2 * w];
                for (xx, v) in srow.iter().enumerate() {
                    drow[2 * xx] = *v;
                    drow[2 * xx + 1] = *v;
                }
            }
        }
    }
    y
}

pub fn upsample2x_backward(dy: &Tensor) -> Tensor {
    let [n, c, h2, w2] = dy.dims();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros([n, c, h, w]);
    for (src, dst) in dy
        .data()
        .chunks(h2 * w2)
        .zip(dx.data_mut().chunks_mut(h * w))
    {
        for yy in 0..h {
            for xx in 0..w {
                let a = (2 * yy) * w2 + 2 * xx;
                let b = a + w2;
                dst[yy * w + xx] = src[a] + src[a + 1] + src[b] + src[b + 1];
            }
        }
    }
    dx
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let [n, ca, h, w] = a.dims();
    let [nb, cb, hb, wb] = b.dims();
    assert_eq!((n, h, w), (nb, hb, wb), "concat shape mismatch");
    let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
    for i in 0..n {
        data.extend_from_slice(a.item(i));
        data.extend_from_slice(b.item(i));
    }
    Tensor::from_vec([n, ca + cb, h, w], data)
}

/// Inverse of [`concat_channels`]: splits off the first `first` channels.
pub fn split_channels(x: &Tensor, first: usize) -> (Tensor, Tensor) {
    let [n, c, h, w] = x.dims();
    let hw = h * w;
    let mut a = Vec::with_capacity(n * first * hw);
    let mut b = Vec::with_capacity(n * (c - first) * hw);
    for i in 0..n {
        let item = x.item(i);
        a.extend_from_slice(&item[..first * hw]);
        b.extend_from_slice(&item[first * hw..]);
    }
    (
        Tensor::from_vec([n, first, h, w], a),
        Tensor::from_vec([n, c - first, h, w], b),
    )
}

/// Adds an `N x C` matrix to every spatial position of an `N x C x H x W` tensor.
pub fn add_channel_bias(x: &mut Tensor, bias: &Tensor) {
    let [n, c, h, w] = x.dims();
    assert_eq!(bias.dims(), [n, c, 1, 1], "channel bias shape mismatch");
    let hw = h * w;
    for i in 0..n {
        let b = bias.item(i).to_vec();
        for (plane, bv) in x.item_mut(i).chunks_mut(hw).zip(b) {
            for v in plane {
                *v += bv;
            }
        }
    }
}

/// Gradient of [`add_channel_bias`] with respect to the bias.
pub fn channel_sums(dy: &Tensor) -> Tensor {
    let [n, c, h, w] = dy.dims();
    let hw = h * w;
    let data = dy.data().chunks(hw).map(|p| p.iter().sum()).collect();
    Tensor::from_vec([n, c, 1, 1], data)
}

pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.dims();
    let hw = (h * w) as f32;
    let data = x.data().chunks(h * w).map(|p| p.iter().sum::<f32>() / hw).collect();
    Tensor::from_vec([n, c, 1, 1], data)
}

pub fn global_avg_pool_backward(dy: &Tensor, h: usize, w: usize) -> Tensor {
    let [n, c, _, _] = dy.dims();
    let hw = h * w;
    let mut dx = Tensor::zeros([n, c, h, w]);
    for (plane, g) in dx.data_mut().chunks_mut(hw).zip(dy.data()) {
        plane.fill(g / hw as f32);
    }
    dx
}

/// Standard transformer-style sinusoidal features of a scalar timestep:
/// `[sin(t * f_i), cos(t * f_i)]` with `f_i = 10000^(-i / (dim/2))`.
pub fn sinusoidal_embedding(steps: &[f32], dim: usize) -> Tensor {
    assert!(dim >= 2 && dim % 2 == 0, "embedding width must be even");
    let half = dim / 2;
    let scale = (10000f64).ln() / half as f64;
    let mut data = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        let freqs = (0..half).map(|i| (-(i as f64) * scale).exp());
        let args: Vec<f64> = freqs.map(|f| t as f64 * f).collect();
        data.extend(args.iter().map(|a| a.sin() as f32));
        data.extend(args.iter().map(|a| a.cos() as f32));
    }
    Tensor::from_vec([steps.len(), dim, 1, 1], data)
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> (f64, Tensor) {
    assert_eq!(pred.dims(), target.dims(), "mse shape mismatch");
    let len = pred.data().len() as f64;
    let mut grad = Tensor::zeros(pred.dims());
    let mut sum = 0.0f64;
    for ((g, p), t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        sum += (d as f64) * (d as f64);
        *g = (2.0 * d as f64 / len) as f32;
    }
    (sum / len, grad)
}

/// Binary cross-entropy on logits (`N x 1`), averaged over the batch.
pub fn bce_with_logits(logits: &Tensor, labels: &[f32]) -> (f64, Tensor) {
    assert_eq!(logits.data().len(), labels.len(), "bce shape mismatch");
    let n = labels.len() as f64;
    let mut grad = Tensor::zeros(logits.dims());
    let mut sum = 0.0f64;
    for ((g, &z), &y) in grad.data_mut().iter_mut().zip(logits.data()).zip(labels) {
        let z64 = z as f64;
        // softplus(z) - y z, computed stably.
        let softplus = z64.max(0.0) + (-z64.abs()).exp().ln_1p();
        sum += softplus - y as f64 * z64;
        let p = 1.0 / (1.0 + (-z64).exp());
        *g = ((p - y as f64) / n) as f32;
    }
    (sum / n, grad)
}
