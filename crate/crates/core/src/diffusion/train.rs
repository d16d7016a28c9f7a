use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::process::{check_conditions, q_sample, TrainingNoise};
use super::schedule::NoiseSchedule;
use super::unet::{DenoiserConfig, NoisePredictor, UNet};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::image::ImagePatch;
use crate::nn::{clip_grad_norm, mse_loss, Adam, AdamConfig, AdamState, Module, Tensor};

const KIND: &str = "diffusion";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f32>,
    /// Decay of an exponential moving average of the weights; `None` disables it.
    pub ema_decay: Option<f32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 128,
            steps: 100_000,
            seed: 0,
            grad_clip: Some(1.0),
            ema_decay: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::validation("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch size must be at least 1"));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::validation("EMA decay must be in [0, 1)"));
            }
        }
        Ok(())
    }
}

/// Per-channel Gaussian fit of the training images.
///
/// Its closed-form noise prediction serves as a skip path around the U-Net,
/// which only learns the residual. At high noise levels the closed form is
/// already nearly exact, which keeps short training runs from drifting
/// during sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub mean: [f32; 3],
    pub var: [f32; 3],
}

impl Default for GaussianPrior {
    fn default() -> Self {
        Self {
            mean: [0.0; 3],
            var: [1.0; 3],
        }
    }
}

impl GaussianPrior {
    pub fn fit(images: &[ImagePatch]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::validation("cannot fit a prior to no images"));
        }
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut count = 0usize;
        for img in images {
            let plane = img.side() * img.side();
            for (c, chunk) in img.data().chunks(plane).enumerate() {
                for &v in chunk {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
            count += plane;
        }
        let n = count as f64;
        let mean: [f64; 3] = std::array::from_fn(|c| sum[c] / n);
        Ok(Self {
            mean: std::array::from_fn(|c| mean[c] as f32),
            var: std::array::from_fn(|c| ((sq[c] / n - mean[c] * mean[c]).max(1e-4)) as f32),
        })
    }

    /// `E[eps | x_t]` if every pixel of channel `c` were `N(mean[c], var[c])`:
    /// `s (x_t - a mean) / (a^2 var + s^2)` with `a = sqrt(alpha_bar_t)`,
    /// `s = sqrt(1 - alpha_bar_t)`.
    pub fn predict(&self, x_t: &Tensor, steps: &[usize], sched: &NoiseSchedule) -> Tensor {
        let [n, c, h, w] = x_t.dims();
        assert_eq!(n, steps.len(), "one timestep per item");
        assert_eq!(c, 3, "prior expects RGB input");
        let mut out = x_t.clone();
        for (i, &t) in steps.iter().enumerate() {
            let ab = sched.alpha_bar(t);
            let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
            for (ch, plane) in out.item_mut(i).chunks_mut(h * w).enumerate() {
                let shift = (a * self.mean[ch] as f64) as f32;
                let gain = (s / (ab * self.var[ch] as f64 + 1.0 - ab)) as f32;
                for v in plane {
                    *v = (*v - shift) * gain;
                }
            }
        }
        out
    }
}

/// A trained denoiser together with its schedule and patch geometry; the
/// unit consumed by sampling, sweeps and edits. Noise predictions are the
/// prior's closed form plus the U-Net output.
#[derive(Clone, Debug)]
pub struct DiffusionModel {
    pub denoiser: UNet,
    pub prior: GaussianPrior,
    pub schedule: NoiseSchedule,
    pub side: usize,
}

impl DiffusionModel {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        Self::from_checkpoint(&ckpt)
    }

    /// Prefers the moving-average weights when the checkpoint has them.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(KIND)?;
        let config: DenoiserConfig = ckpt.get("denoiser")?;
        let mut denoiser = UNet::new(config, 0)?;
        let prefix = if ckpt.get::<bool>("has_ema")? { "ema." } else { "model." };
        ckpt.load_module(prefix, &mut denoiser)?;
        Ok(Self {
            denoiser,
            prior: ckpt.get("prior")?,
            schedule: ckpt.get("schedule")?,
            side: ckpt.get("side")?,
        })
    }
}

impl NoisePredictor for DiffusionModel {
    fn predict_noise(&self, x_t: &Tensor, steps: &[usize], conditions: &[f32]) -> Tensor {
        let mut eps = self.denoiser.forward(x_t, steps, conditions);
        eps.add_assign(&self.prior.predict(x_t, steps, &self.schedule));
        eps
    }
}

/// Epsilon-prediction training with Adam.
///
/// The randomness of step `k` is a pure function of `(seed, k)`: batch
/// indices come from ChaCha8 stream `2k` and the `(t, eps)` draws from
/// stream `2k + 1`, so resuming from a checkpoint reproduces an
/// uninterrupted run.
pub struct DiffusionTrainer {
    model: UNet,
    ema: Option<UNet>,
    optimizer: Adam,
    prior: GaussianPrior,
    schedule: NoiseSchedule,
    side: usize,
    config: TrainConfig,
    step: usize,
}

impl DiffusionTrainer {
    pub fn new(
        denoiser: DenoiserConfig,
        prior: GaussianPrior,
        schedule: NoiseSchedule,
        side: usize,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        denoiser.check_side(side)?;
        let model = UNet::new(denoiser, config.seed)?;
        let ema = config.ema_decay.map(|_| model.clone());
        Ok(Self {
            optimizer: Adam::new(AdamConfig::with_lr(config.lr as f32)),
            model,
            ema,
            prior,
            schedule,
            side,
            config,
            step: 0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn prior(&self) -> &GaussianPrior {
        &self.prior
    }

    pub fn denoiser(&self) -> &UNet {
        &self.model
    }

    fn step_rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(stream);
        rng
    }

    /// Checks that every training pair matches the model geometry.
    pub fn check_data(&self, data: &[(ImagePatch, f32)]) -> Result<()> {
        if data.is_empty() {
            return Err(Error::validation("training set is empty"));
        }
        if let Some((p, _)) = data.iter().find(|(p, _)| p.side() != self.side) {
            return Err(Error::validation(format!(
                "training patch side {} does not match model side {}",
                p.side(),
                self.side
            )));
        }
        let conds: Vec<f32> = data.iter().map(|(_, c)| *c).collect();
        check_conditions(&conds)
    }

    /// One optimizer update; returns the batch loss.
    pub fn train_step(&mut self, data: &[(ImagePatch, f32)]) -> Result<f64> {
        let k = self.step as u64;
        let mut pick = self.step_rng(2 * k);
        let idx: Vec<usize> = (0..self.config.batch_size)
            .map(|_| pick.random_range(0..data.len()))
            .collect();
        let images: Vec<ImagePatch> = idx.iter().map(|&i| data[i].0.clone()).collect();
        let conds: Vec<f32> = idx.iter().map(|&i| data[i].1).collect();
        let x0 = ImagePatch::stack(&images)?;
        let noise = TrainingNoise::draw(&mut self.step_rng(2 * k + 1), x0.dims(), self.schedule.steps());
        let x_t = q_sample(&x0, &noise.steps, &noise.eps, &self.schedule)?;

        self.model.zero_grad();
        let mut pred = self.model.forward_train(&x_t, &noise.steps, &conds);
        pred.add_assign(&self.prior.predict(&x_t, &noise.steps, &self.schedule));
        let (loss, grad) = mse_loss(&pred, &noise.eps);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                loss,
                step: self.step,
                context: format!("diffusion training, batch of {}", idx.len()),
            });
        }
        self.model.backward(&grad);
        let mut params = self.model.params_mut();
        if let Some(max) = self.config.grad_clip {
            clip_grad_norm(&mut params, max);
        }
        self.optimizer.step(&mut params);
        if let (Some(ema), Some(decay)) = (&mut self.ema, self.config.ema_decay) {
            for (e, p) in ema.params_mut().into_iter().zip(self.model.params()) {
                for (ev, pv) in e.value.iter_mut().zip(&p.value) {
                    *ev = decay * *ev + (1.0 - decay) * pv;
                }
            }
        }
        self.step += 1;
        Ok(loss)
    }

    /// Runs until the step counter reaches `config.steps`, reporting each loss.
    pub fn train(
        &mut self,
        data: &[(ImagePatch, f32)],
        mut on_step: impl FnMut(usize, f64),
    ) -> Result<()> {
        self.check_data(data)?;
        while self.step < self.config.steps {
            let loss = self.train_step(data)?;
            on_step(self.step, loss);
        }
        Ok(())
    }

    /// Extends the step budget, e.g. after resuming.
    pub fn set_total_steps(&mut self, steps: usize) {
        self.config.steps = steps;
    }

    pub fn model(&self) -> DiffusionModel {
        DiffusionModel {
            denoiser: self.ema.as_ref().unwrap_or(&self.model).clone(),
            prior: self.prior.clone(),
            schedule: self.schedule.clone(),
            side: self.side,
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(KIND);
        ckpt.set("denoiser", self.model.config())?;
        ckpt.set("prior", &self.prior)?;
        ckpt.set("schedule", &self.schedule)?;
        ckpt.set("side", &self.side)?;
        ckpt.set("train", &self.config)?;
        ckpt.set("seed", &self.config.seed)?;
        ckpt.set("step", &self.step)?;
        ckpt.set("has_ema", &self.ema.is_some())?;
        ckpt.set("adam_step", &self.optimizer.state.step)?;
        ckpt.insert_module("model.", &self.model);
        if let Some(ema) = &self.ema {
            ckpt.insert_module("ema.", ema);
        }
        for (i, (m, v)) in self.optimizer.state.moments.iter().enumerate() {
            ckpt.insert(format!("adam.m.{i:04}"), vec![m.len()], m.clone());
            ckpt.insert(format!("adam.v.{i:04}"), vec![v.len()], v.clone());
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    /// Restores weights, optimizer moments and the step counter.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(KIND)?;
        let config: TrainConfig = ckpt.get("train")?;
        let mut trainer = Self::new(
            ckpt.get("denoiser")?,
            ckpt.get("prior")?,
            ckpt.get("schedule")?,
            ckpt.get("side")?,
            config,
        )?;
        ckpt.load_module("model.", &mut trainer.model)?;
        if let Some(ema) = &mut trainer.ema {
            ckpt.load_module("ema.", ema)?;
        }
        let n_params = trainer.model.params().len();
        let adam_step: u64 = ckpt.get("adam_step")?;
        if adam_step > 0 {
            let mut moments = Vec::with_capacity(n_params);
            for i in 0..n_params {
                moments.push((
                    ckpt.tensor(&format!("adam.m.{i:04}"))?.data.clone(),
                    ckpt.tensor(&format!("adam.v.{i:04}"))?.data.clone(),
                ));
            }
            trainer.optimizer.state = AdamState {
                step: adam_step,
                moments,
            };
        }
        trainer.step = ckpt.get("step")?;
        Ok(trainer)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
