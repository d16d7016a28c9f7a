use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImagePatch;
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, Conv2d, GroupNorm, Initializer, Linear, Module,
    Param, Silu, Tensor,
};

/// Shape of the residual classifier backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Channels of the first stage; doubled at every later stage.
    pub width: usize,
    /// Number of stages; every stage after the first halves the resolution.
    pub depth: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { width: 16, depth: 3 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 {
            return Err(Error::validation("backbone width and depth must be positive"));
        }
        Ok(())
    }

    fn channels(&self, stage: usize) -> usize {
        self.width << stage
    }
}

/// Pre-activation basic block: `GN -> SiLU -> conv -> GN -> SiLU -> conv`
/// plus an identity or strided 1x1 shortcut.
#[derive(Clone, Debug)]
struct Block {
    norm1: GroupNorm,
    act1: Silu,
    conv1: Conv2d,
    norm2: GroupNorm,
    act2: Silu,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl Block {
    fn new(name: &str, cin: usize, cout: usize, stride: usize, init: &mut Initializer) -> Self {
        Self {
            norm1: GroupNorm::new(&format!("{name}.norm1"), cin),
            act1: Silu::default(),
            conv1: Conv2d::new(&format!("{name}.conv1"), cin, cout, 3, stride, init),
            norm2: GroupNorm::new(&format!("{name}.norm2"), cout),
            act2: Silu::default(),
            conv2: Conv2d::new(&format!("{name}.conv2"), cout, cout, 3, 1, init),
            shortcut: (cin != cout || stride != 1)
                .then(|| Conv2d::new(&format!("{name}.shortcut"), cin, cout, 1, stride, init)),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let h = self.conv1.forward(&Silu::forward(&self.norm1.forward(x)));
        let mut h = self.conv2.forward(&Silu::forward(&self.norm2.forward(&h)));
        match &self.shortcut {
            Some(s) => h.add_assign(&s.forward(x)),
            None => h.add_assign(x),
        }
        h
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let h = self.norm1.forward_train(x);
        let h = self.act1.forward_train(&h);
        let h = self.conv1.forward_train(&h);
        let h = self.norm2.forward_train(&h);
        let h = self.act2.forward_train(&h);
        let mut h = self.conv2.forward_train(&h);
        match &mut self.shortcut {
            Some(s) => h.add_assign(&s.forward_train(x)),
            None => h.add_assign(x),
        }
        h
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let dskip = match &mut self.shortcut {
            Some(s) => s.backward(dy),
            None => dy.clone(),
        };
        let d = self.conv2.backward(dy);
        let d = self.act2.backward(&d);
        let d = self.norm2.backward(&d);
        let d = self.conv1.backward(&d);
        let d = self.act1.backward(&d);
        let mut dx = self.norm1.backward(&d);
        dx.add_assign(&dskip);
        dx
    }
}

impl Module for Block {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.norm1.params();
        v.extend(self.conv1.params());
        v.extend(self.norm2.params());
        v.extend(self.conv2.params());
        if let Some(s) = &self.shortcut {
            v.extend(s.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.norm1.params_mut();
        v.extend(self.conv1.params_mut());
        v.extend(self.norm2.params_mut());
        v.extend(self.conv2.params_mut());
        if let Some(s) = &mut self.shortcut {
            v.extend(s.params_mut());
        }
        v
    }
}

/// Residual CNN mapping a patch to one logit.
#[derive(Clone, Debug)]
pub struct ResNet {
    config: BackboneConfig,
    stem: Conv2d,
    blocks: Vec<Block>,
    norm: GroupNorm,
    act: Silu,
    head: Linear,
    pooled_hw: Option<(usize, usize)>,
}

impl ResNet {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Initializer::new(seed);
        let stem = Conv2d::new("stem", 3, config.width, 3, 1, &mut init);
        let blocks = (0..config.depth)
            .map(|l| {
                let cin = config.channels(l.saturating_sub(1));
                let stride = if l == 0 { 1 } else { 2 };
                Block::new(&format!("block{l}"), cin, config.channels(l), stride, &mut init)
            })
            .collect();
        let top = config.channels(config.depth - 1);
        Ok(Self {
            config,
            stem,
            blocks,
            norm: GroupNorm::new("norm", top),
            act: Silu::default(),
            head: Linear::new("head", top, 1, &mut init),
            pooled_hw: None,
        })
    }

    pub fn config(&self) -> BackboneConfig {
        self.config
    }

    /// Logits, one per item.
    pub fn forward(&self, x: &Tensor) -> Vec<f32> {
        let mut h = self.stem.forward(x);
        for b in &self.blocks {
            h = b.forward(&h);
        }
        let h = Silu::forward(&self.norm.forward(&h));
        self.head.forward(&global_avg_pool(&h)).into_data()
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let mut h = self.stem.forward_train(x);
        for b in &mut self.blocks {
            h = b.forward_train(&h);
        }
        let h = self.norm.forward_train(&h);
        let h = self.act.forward_train(&h);
        self.pooled_hw = Some((h.h(), h.w()));
        self.head.forward_train(&global_avg_pool(&h))
    }

    pub fn backward(&mut self, dlogits: &Tensor) {
        let (h, w) = self.pooled_hw.take().expect("ResNet::backward without forward_train");
        let d = self.head.backward(dlogits);
        let d = global_avg_pool_backward(&d, h, w);
        let d = self.act.backward(&d);
        let mut d = self.norm.backward(&d);
        for b in self.blocks.iter_mut().rev() {
            d = b.backward(&d);
        }
        self.stem.backward(&d);
    }
}

impl Module for ResNet {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.stem.params();
        for b in &self.blocks {
            v.extend(b.params());
        }
        v.extend(self.norm.params());
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.stem.params_mut();
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v.extend(self.norm.params_mut());
        v.extend(self.head.params_mut());
        v
    }
}

pub(crate) fn sigmoid(z: f32) -> f64 {
    1.0 / (1.0 + (-(z as f64)).exp())
}

/// Resizes (when needed) and stacks patches into a batch.
pub(crate) fn prepare(patches: &[ImagePatch], input_side: usize) -> Result<Tensor> {
    if patches.iter().all(|p| p.side() == input_side) {
        return ImagePatch::stack(patches);
    }
    let resized: Vec<ImagePatch> = patches
        .iter()
        .map(|p| p.resize_bilinear(input_side))
        .collect::<Result<_>>()?;
    ImagePatch::stack(&resized)
}
