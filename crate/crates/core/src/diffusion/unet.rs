//! Multi-scale encoder-decoder noise predictor with skip connections.
//!
//! The timestep is embedded with sinusoidal features and a two-layer MLP.
//! The class score enters through a fully connected map on the raw scalar
//! followed by a nonlinearity, is projected to the timestep-embedding width,
//! and the two embeddings are summed. Every residual block adds a projection
//! of that joint embedding as a per-channel bias.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    add_channel_bias, channel_sums, concat_channels, sinusoidal_embedding, split_channels,
    upsample2x, upsample2x_backward, Conv2d, GroupNorm, Initializer, Linear, Module, Param, Silu,
    Tensor,
};

/// Shape hyperparameters of the denoiser.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    /// Number of resolution levels; the image is halved `depth - 1` times.
    pub depth: usize,
    pub cond_width: usize,
    pub time_width: usize,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.depth == 0 || self.cond_width == 0 || self.time_width == 0
        {
            return Err(Error::validation("denoiser config fields must be positive"));
        }
        if self.time_width % 2 != 0 {
            return Err(Error::validation("timestep embedding width must be even"));
        }
        Ok(())
    }

    /// Channel count at resolution level `level`.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level.min(2)
    }

    /// Checks that an image side can be halved `depth - 1` times.
    pub fn check_side(&self, side: usize) -> Result<()> {
        let factor = 1usize << (self.depth - 1);
        if side == 0 || side % factor != 0 {
            return Err(Error::validation(format!(
                "image side {side} must be a multiple of {factor} for depth {}",
                self.depth
            )));
        }
        Ok(())
    }
}

/// Predicts the noise component of a noisy batch.
pub trait NoisePredictor {
    /// `steps` are 1-based timesteps and `conditions` class scores, one per item.
    fn predict_noise(&self, x_t: &Tensor, steps: &[usize], conditions: &[f32]) -> Tensor;
}

impl<F> NoisePredictor for F
where
    F: Fn(&Tensor, &[usize], &[f32]) -> Tensor,
{
    fn predict_noise(&self, x_t: &Tensor, steps: &[usize], conditions: &[f32]) -> Tensor {
        self(x_t, steps, conditions)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    act1: Silu,
    conv1: Conv2d,
    emb_act: Silu,
    emb_proj: Linear,
    norm2: GroupNorm,
    act2: Silu,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(name: &str, cin: usize, cout: usize, emb: usize, init: &mut Initializer) -> Self {
        Self {
            norm1: GroupNorm::new(&format!("{name}.norm1"), cin),
            act1: Silu::default(),
            conv1: Conv2d::new(&format!("{name}.conv1"), cin, cout, 3, 1, init),
            emb_act: Silu::default(),
            emb_proj: Linear::new(&format!("{name}.emb"), emb, cout, init),
            norm2: GroupNorm::new(&format!("{name}.norm2"), cout),
            act2: Silu::default(),
            conv2: Conv2d::new(&format!("{name}.conv2"), cout, cout, 3, 1, init),
            skip: (cin != cout).then(|| Conv2d::new(&format!("{name}.skip"), cin, cout, 1, 1, init)),
        }
    }

    fn forward(&self, x: &Tensor, emb: &Tensor) -> Tensor {
        let mut h = self.conv1.forward(&Silu::forward(&self.norm1.forward(x)));
        add_channel_bias(&mut h, &self.emb_proj.forward(&Silu::forward(emb)));
        let mut h = self.conv2.forward(&Silu::forward(&self.norm2.forward(&h)));
        match &self.skip {
            Some(skip) => h.add_assign(&skip.forward(x)),
            None => h.add_assign(x),
        }
        h
    }

    fn forward_train(&mut self, x: &Tensor, emb: &Tensor) -> Tensor {
        let h = self.norm1.forward_train(x);
        let h = self.act1.forward_train(&h);
        let mut h = self.conv1.forward_train(&h);
        let e = self.emb_act.forward_train(emb);
        add_channel_bias(&mut h, &self.emb_proj.forward_train(&e));
        let h = self.norm2.forward_train(&h);
        let h = self.act2.forward_train(&h);
        let mut h = self.conv2.forward_train(&h);
        match &mut self.skip {
            Some(skip) => h.add_assign(&skip.forward_train(x)),
            None => h.add_assign(x),
        }
        h
    }

    /// Returns gradients with respect to the block input and the embedding.
    fn backward(&mut self, dy: &Tensor) -> (Tensor, Tensor) {
        let dskip = match &mut self.skip {
            Some(skip) => skip.backward(dy),
            None => dy.clone(),
        };
        let d = self.conv2.backward(dy);
        let d = self.act2.backward(&d);
        let d = self.norm2.backward(&d);
        let demb = self.emb_act.backward(&self.emb_proj.backward(&channel_sums(&d)));
        let d = self.conv1.backward(&d);
        let d = self.act1.backward(&d);
        let mut dx = self.norm1.backward(&d);
        dx.add_assign(&dskip);
        (dx, demb)
    }
}

impl Module for ResBlock {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.norm1.params();
        v.extend(self.conv1.params());
        v.extend(self.emb_proj.params());
        v.extend(self.norm2.params());
        v.extend(self.conv2.params());
        if let Some(s) = &self.skip {
            v.extend(s.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.norm1.params_mut();
        v.extend(self.conv1.params_mut());
        v.extend(self.emb_proj.params_mut());
        v.extend(self.norm2.params_mut());
        v.extend(self.conv2.params_mut());
        if let Some(s) = &mut self.skip {
            v.extend(s.params_mut());
        }
        v
    }
}

/// The conditional denoiser.
#[derive(Clone, Debug)]
pub struct UNet {
    config: DenoiserConfig,
    time_fc1: Linear,
    time_act: Silu,
    time_fc2: Linear,
    cond_fc: Linear,
    cond_act: Silu,
    cond_proj: Linear,
    conv_in: Conv2d,
    down: Vec<ResBlock>,
    downsample: Vec<Conv2d>,
    mid: ResBlock,
    up: Vec<ResBlock>,
    out_norm: GroupNorm,
    out_act: Silu,
    conv_out: Conv2d,
}

impl UNet {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Initializer::new(seed);
        let emb = config.time_width;
        let depth = config.depth;
        let ch = |l: usize| config.channels(l);
        let time_fc1 = Linear::new("time.fc1", emb, emb, &mut init);
        let time_fc2 = Linear::new("time.fc2", emb, emb, &mut init);
        let cond_fc = Linear::new("cond.fc", 1, config.cond_width, &mut init);
        let cond_proj = Linear::new("cond.proj", config.cond_width, emb, &mut init);
        let conv_in = Conv2d::new("conv_in", 3, ch(0), 3, 1, &mut init);
        let mut down = Vec::with_capacity(depth);
        let mut downsample = Vec::with_capacity(depth.saturating_sub(1));
        for l in 0..depth {
            let cin = if l == 0 { ch(0) } else { ch(l - 1) };
            down.push(ResBlock::new(&format!("down{l}"), cin, ch(l), emb, &mut init));
            if l + 1 < depth {
                downsample.push(Conv2d::new(&format!("downsample{l}"), ch(l), ch(l), 3, 2, &mut init));
            }
        }
        let mid = ResBlock::new("mid", ch(depth - 1), ch(depth - 1), emb, &mut init);
        let mut up = Vec::with_capacity(depth);
        for l in 0..depth {
            let from_below = if l + 1 == depth { ch(depth - 1) } else { ch(l + 1) };
            up.push(ResBlock::new(&format!("up{l}"), from_below + ch(l), ch(l), emb, &mut init));
        }
        Ok(Self {
            time_fc1,
            time_act: Silu::default(),
            time_fc2,
            cond_fc,
            cond_act: Silu::default(),
            cond_proj,
            conv_in,
            down,
            downsample,
            mid,
            up,
            out_norm: GroupNorm::new("out_norm", ch(0)),
            out_act: Silu::default(),
            conv_out: Conv2d::zeroed("conv_out", ch(0), 3, 3, 1),
            config,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    fn embedding_inputs(steps: &[usize], conditions: &[f32], width: usize) -> (Tensor, Tensor) {
        assert_eq!(steps.len(), conditions.len(), "one condition per item");
        let t: Vec<f32> = steps.iter().map(|&s| s as f32).collect();
        (
            sinusoidal_embedding(&t, width),
            Tensor::matrix(conditions.len(), 1, conditions.to_vec()),
        )
    }

    fn embed(&self, steps: &[usize], conditions: &[f32]) -> Tensor {
        let (sin, c) = Self::embedding_inputs(steps, conditions, self.config.time_width);
        let mut e = self.time_fc2.forward(&Silu::forward(&self.time_fc1.forward(&sin)));
        e.add_assign(&self.cond_proj.forward(&Silu::forward(&self.cond_fc.forward(&c))));
        e
    }

    fn embed_train(&mut self, steps: &[usize], conditions: &[f32]) -> Tensor {
        let (sin, c) = Self::embedding_inputs(steps, conditions, self.config.time_width);
        let h = self.time_fc1.forward_train(&sin);
        let h = self.time_act.forward_train(&h);
        let mut e = self.time_fc2.forward_train(&h);
        let h = self.cond_fc.forward_train(&c);
        let h = self.cond_act.forward_train(&h);
        e.add_assign(&self.cond_proj.forward_train(&h));
        e
    }

    fn embed_backward(&mut self, demb: &Tensor) {
        let d = self.time_fc2.backward(demb);
        let d = self.time_act.backward(&d);
        self.time_fc1.backward(&d);
        let d = self.cond_proj.backward(demb);
        let d = self.cond_act.backward(&d);
        self.cond_fc.backward(&d);
    }

    pub fn forward(&self, x: &Tensor, steps: &[usize], conditions: &[f32]) -> Tensor {
        assert_eq!(x.n(), steps.len(), "one timestep per item");
        let emb = self.embed(steps, conditions);
        let depth = self.config.depth;
        let mut h = self.conv_in.forward(x);
        let mut skips = Vec::with_capacity(depth);
        for l in 0..depth {
            h = self.down[l].forward(&h, &emb);
            skips.push(h.clone());
            if l + 1 < depth {
                h = self.downsample[l].forward(&h);
            }
        }
        h = self.mid.forward(&h, &emb);
        for l in (0..depth).rev() {
            h = self.up[l].forward(&concat_channels(&h, &skips[l]), &emb);
            if l > 0 {
                h = upsample2x(&h);
            }
        }
        self.conv_out
            .forward(&Silu::forward(&self.out_norm.forward(&h)))
    }

    pub fn forward_train(&mut self, x: &Tensor, steps: &[usize], conditions: &[f32]) -> Tensor {
        assert_eq!(x.n(), steps.len(), "one timestep per item");
        let emb = self.embed_train(steps, conditions);
        let depth = self.config.depth;
        let mut h = self.conv_in.forward_train(x);
        let mut skips = Vec::with_capacity(depth);
        for l in 0..depth {
            h = self.down[l].forward_train(&h, &emb);
            skips.push(h.clone());
            if l + 1 < depth {
                h = self.downsample[l].forward_train(&h);
            }
        }
        h = self.mid.forward_train(&h, &emb);
        for l in (0..depth).rev() {
            h = self.up[l].forward_train(&concat_channels(&h, &skips[l]), &emb);
            if l > 0 {
                h = upsample2x(&h);
            }
        }
        let h = self.out_norm.forward_train(&h);
        let h = self.out_act.forward_train(&h);
        self.conv_out.forward_train(&h)
    }

    /// Backpropagates `dout` (gradient of the loss with respect to the
    /// predicted noise) through the last `forward_train` call.
    pub fn backward(&mut self, dout: &Tensor) {
        let depth = self.config.depth;
        let d = self.conv_out.backward(dout);
        let d = self.out_act.backward(&d);
        let mut d = self.out_norm.backward(&d);
        let mut demb: Option<Tensor> = None;
        let mut add_emb = |g: Tensor| match &mut demb {
            Some(acc) => acc.add_assign(&g),
            None => demb = Some(g),
        };
        let mut dskips: Vec<Option<Tensor>> = vec![None; depth];
        for l in 0..depth {
            if l > 0 {
                d = upsample2x_backward(&d);
            }
            let (dcat, de) = self.up[l].backward(&d);
            add_emb(de);
            let below = if l + 1 == depth {
                self.config.channels(depth - 1)
            } else {
                self.config.channels(l + 1)
            };
            let (dh, dskip) = split_channels(&dcat, below);
            dskips[l] = Some(dskip);
            d = dh;
        }
        let (dmid, de) = self.mid.backward(&d);
        add_emb(de);
        d = dmid;
        for l in (0..depth).rev() {
            if l + 1 < depth {
                d = self.downsample[l].backward(&d);
            }
            d.add_assign(dskips[l].as_ref().expect("skip gradient"));
            let (dx, de) = self.down[l].backward(&d);
            add_emb(de);
            d = dx;
        }
        self.conv_in.backward(&d);
        let demb = demb.expect("embedding gradient");
        self.embed_backward(&demb);
    }
}

impl NoisePredictor for UNet {
    fn predict_noise(&self, x_t: &Tensor, steps: &[usize], conditions: &[f32]) -> Tensor {
        self.forward(x_t, steps, conditions)
    }
}

impl Module for UNet {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.time_fc1.params();
        v.extend(self.time_fc2.params());
        v.extend(self.cond_fc.params());
        v.extend(self.cond_proj.params());
        v.extend(self.conv_in.params());
        for b in &self.down {
            v.extend(b.params());
        }
        for c in &self.downsample {
            v.extend(c.params());
        }
        v.extend(self.mid.params());
        for b in &self.up {
            v.extend(b.params());
        }
        v.extend(self.out_norm.params());
        v.extend(self.conv_out.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.time_fc1.params_mut();
        v.extend(self.time_fc2.params_mut());
        v.extend(self.cond_fc.params_mut());
        v.extend(self.cond_proj.params_mut());
        v.extend(self.conv_in.params_mut());
        for b in &mut self.down {
            v.extend(b.params_mut());
        }
        for c in &mut self.downsample {
            v.extend(c.params_mut());
        }
        v.extend(self.mid.params_mut());
        for b in &mut self.up {
            v.extend(b.params_mut());
        }
        v.extend(self.out_norm.params_mut());
        v.extend(self.conv_out.params_mut());
        v
    }
}
