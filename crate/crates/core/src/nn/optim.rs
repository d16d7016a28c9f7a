use super::Param;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, one pair per parameter in visit order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub moments: Vec<(Vec<f32>, Vec<f32>)>,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: AdamState::default(),
        }
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, params: &mut [&mut Param]) {
        if self.state.moments.is_empty() {
            self.state.moments = params
                .iter()
                .map(|p| (vec![0.0; p.value.len()], vec![0.0; p.value.len()]))
                .collect();
        }
        assert_eq!(self.state.moments.len(), params.len(), "optimizer/param count mismatch");
        self.state.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.state.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let step_size = lr / bc1;
        for (p, (m, v)) in params.iter_mut().zip(self.state.moments.iter_mut()) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let denom = (v[i] / bc2).sqrt() + eps;
                p.value[i] -= step_size * m[i] / denom;
            }
            p.zero_grad();
        }
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [&mut Param], max_norm: f32) -> f32 {
    let total: f64 = params
        .iter()
        .flat_map(|p| p.grad.iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum();
    let norm = total.sqrt() as f32;
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / (norm + 1e-6);
        for p in params.iter_mut() {
            for g in &mut p.grad {
                *g *= scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = Param::new("x", vec![2], vec![3.0, -2.0]);
        let mut opt = Adam::new(AdamConfig::with_lr(0.1));
        for _ in 0..500 {
            p.grad = p.value.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut [&mut p]);
        }
        assert!(p.value.iter().all(|v| v.abs() < 1e-2), "{:?}", p.value);
        assert!(p.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Param::new("x", vec![1], vec![1.0]);
        p.grad = vec![5.0];
        let mut opt = Adam::new(AdamConfig::with_lr(0.01));
        opt.step(&mut [&mut p]);
        assert!((p.value[0] - 0.99).abs() < 1e-6);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut p = Param::new("x", vec![2], vec![0.0, 0.0]);
        p.grad = vec![3.0, 4.0];
        let before = clip_grad_norm(&mut [&mut p], 1.0);
        assert!((before - 5.0).abs() < 1e-6);
        let after: f32 = p.grad.iter().map(|g| g * g).sum::<f32>().sqrt();
        assert!((after - 1.0).abs() < 1e-4);
    }
}
