use serde::{Deserialize, Serialize};

use super::ensemble::{Classifier, ClassifierEnsemble, Ensemble};
use super::net::{prepare, BackboneConfig, ResNet};
use super::sampler::BalancedSampler;
use crate::error::{Error, Result};
use crate::image::ImagePatch;
use crate::nn::{bce_with_logits, Adam, AdamConfig, Module, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// Side the patches are resized to before entering the network.
    pub input_side: usize,
    pub lr: f64,
    /// Must be even: half positives, half negatives.
    pub batch_size: usize,
    /// One ensemble member per seed.
    pub seeds: Vec<u64>,
    /// Share of each slide's height, from the top, used for training.
    pub train_fraction: f64,
    pub backbone: BackboneConfig,
    pub max_steps: usize,
    /// Steps between validation passes.
    pub eval_every: usize,
    /// Validation passes without improvement before stopping.
    pub patience: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            input_side: 256,
            lr: 1e-5,
            batch_size: 128,
            seeds: vec![0, 1, 2],
            train_fraction: 0.75,
            backbone: BackboneConfig::default(),
            max_steps: 20_000,
            eval_every: 200,
            patience: 5,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_side == 0 {
            return Err(Error::validation("classifier input side must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::validation("learning rate must be positive"));
        }
        if self.batch_size == 0 || self.batch_size % 2 != 0 {
            return Err(Error::validation(format!(
                "batch size {} must be even and positive",
                self.batch_size
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::validation("classifier needs at least one seed"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::validation("train fraction must be in (0, 1)"));
        }
        if self.max_steps == 0 || self.eval_every == 0 {
            return Err(Error::validation("step budget and evaluation interval must be positive"));
        }
        self.backbone.validate()
    }
}

/// Loss history of one member.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub seed: u64,
    /// Step at each validation pass.
    pub steps: Vec<usize>,
    /// Mean training loss over the steps since the previous pass.
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_step: usize,
    pub stopped_early: bool,
}

fn binary(label: f32) -> f32 {
    if label > 0.5 {
        1.0
    } else {
        0.0
    }
}

fn resized(data: &[(ImagePatch, f32)], side: usize) -> Result<Vec<Tensor>> {
    data.iter()
        .map(|(p, _)| prepare(std::slice::from_ref(p), side))
        .collect()
}

fn stack(items: &[&Tensor]) -> Tensor {
    let [_, c, h, w] = items[0].dims();
    let mut data = Vec::with_capacity(items.len() * c * h * w);
    for t in items {
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec([items.len(), c, h, w], data)
}

fn mean_bce(net: &ResNet, inputs: &[Tensor], labels: &[f32]) -> f64 {
    let mut total = 0.0;
    for (xs, ys) in inputs.chunks(64).zip(labels.chunks(64)) {
        let refs: Vec<&Tensor> = xs.iter().collect();
        let logits = net.forward(&stack(&refs));
        let (loss, _) = bce_with_logits(&Tensor::from_vec([ys.len(), 1, 1, 1], logits), ys);
        total += loss * ys.len() as f64;
    }
    total / labels.len() as f64
}

/// Trains one member with balanced batches, BCE and Adam, keeping the
/// weights with the lowest validation loss. Labels are binarized at 0.5.
pub fn train_member(
    train: &[(ImagePatch, f32)],
    val: &[(ImagePatch, f32)],
    config: &ClassifierConfig,
    seed: u64,
) -> Result<(Classifier, TrainingCurve)> {
    config.validate()?;
    if val.is_empty() {
        return Err(Error::validation("validation set is empty"));
    }
    let patch_side = train
        .first()
        .map(|(p, _)| p.side())
        .ok_or_else(|| Error::validation("training set is empty"))?;
    if train.iter().chain(val).any(|(p, _)| p.side() != patch_side) {
        return Err(Error::validation("training and validation patches must share one side"));
    }
    let train_x = resized(train, config.input_side)?;
    let val_x = resized(val, config.input_side)?;
    let val_y: Vec<f32> = val.iter().map(|(_, l)| binary(*l)).collect();
    let (pos, neg): (Vec<usize>, Vec<usize>) = (0..train.len()).partition(|&i| train[i].1 > 0.5);
    let mut sampler = BalancedSampler::new(pos, neg, config.batch_size, seed)?;

    let mut net = ResNet::new(config.backbone, seed)?;
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr as f32));
    let mut best = net.clone();
    let mut best_loss = f64::INFINITY;
    let mut curve = TrainingCurve {
        seed,
        steps: vec![],
        train_loss: vec![],
        val_loss: vec![],
        best_step: 0,
        stopped_early: false,
    };
    let (mut running, mut count, mut stale) = (0.0, 0usize, 0usize);
    for step in 1..=config.max_steps {
        let batch = sampler.next_batch();
        let refs: Vec<&Tensor> = batch.iter().map(|(i, _)| &train_x[*i]).collect();
        let labels: Vec<f32> = batch.iter().map(|(_, p)| if *p { 1.0 } else { 0.0 }).collect();
        let logits = net.forward_train(&stack(&refs));
        let (loss, grad) = bce_with_logits(&logits, &labels);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                loss,
                step,
                context: format!("classifier seed {seed}, lr {}", config.lr),
            });
        }
        net.backward(&grad);
        adam.step(&mut net.params_mut());
        running += loss;
        count += 1;
        if step % config.eval_every == 0 || step == config.max_steps {
            let vl = mean_bce(&net, &val_x, &val_y);
            curve.steps.push(step);
            curve.train_loss.push(running / count as f64);
            curve.val_loss.push(vl);
            (running, count) = (0.0, 0);
            if vl < best_loss {
                best_loss = vl;
                best = net.clone();
                curve.best_step = step;
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience {
                    curve.stopped_early = step < config.max_steps;
                    break;
                }
            }
        }
    }
    Ok((Classifier::new(best, patch_side, config.input_side), curve))
}

/// Trains one member per configured seed and averages them.
pub fn train_classifier(
    train: &[(ImagePatch, f32)],
    val: &[(ImagePatch, f32)],
    config: &ClassifierConfig,
    mut on_member: impl FnMut(&TrainingCurve),
) -> Result<(ClassifierEnsemble, Vec<TrainingCurve>)> {
    config.validate()?;
    let mut members = Vec::with_capacity(config.seeds.len());
    let mut curves = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let (m, c) = train_member(train, val, config, seed)?;
        on_member(&c);
        members.push(m);
        curves.push(c);
    }
    Ok((Ensemble::new(members)?, curves))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{evaluate, PatchScorer};

    fn stripes(n: usize) -> Vec<(ImagePatch, f32)> {
        (0..n)
            .map(|i| {
                let label = (i % 2) as f32;
                let level = if label > 0.5 { 0.6 } else { -0.6 };
                let jitter = ((i * 31 % 17) as f32 / 17.0 - 0.5) * 0.4;
                (ImagePatch::filled(8, level + jitter).unwrap(), label)
            })
            .collect()
    }

    fn config() -> ClassifierConfig {
        ClassifierConfig {
            input_side: 8,
            lr: 3e-3,
            batch_size: 8,
            seeds: vec![1, 2],
            train_fraction: 0.75,
            backbone: BackboneConfig { width: 4, depth: 2 },
            max_steps: 60,
            eval_every: 10,
            patience: 3,
        }
    }

    #[test]
    fn learns_a_separable_problem() {
        let data = stripes(40);
        let (ens, curves) = train_classifier(&data[..30], &data[30..], &config(), |_| {}).unwrap();
        assert_eq!(ens.members().len(), 2);
        let c = &curves[0];
        assert!(c.train_loss.last().unwrap() < &c.train_loss[0], "{c:?}");
        let m = evaluate(&ens, &data[30..], 0.5).unwrap();
        assert_eq!(m.accuracy, 1.0);
    }

    #[test]
    fn same_seed_same_weights() {
        let data = stripes(20);
        let mut cfg = config();
        cfg.max_steps = 10;
        let (a, _) = train_member(&data[..16], &data[16..], &cfg, 7).unwrap();
        let (b, _) = train_member(&data[..16], &data[16..], &cfg, 7).unwrap();
        for (pa, pb) in a.network().params().iter().zip(b.network().params()) {
            assert_eq!(pa.value, pb.value);
        }
    }

    #[test]
    fn resizes_to_the_input_side() {
        let data = stripes(12);
        let mut cfg = config();
        cfg.input_side = 4;
        cfg.max_steps = 2;
        let (m, _) = train_member(&data[..8], &data[8..], &cfg, 0).unwrap();
        assert_eq!(m.patch_side(), 8);
        assert_eq!(m.input_side(), 4);
        assert!(m.score(&ImagePatch::filled(4, 0.0).unwrap()).is_err());
        let s = m.score(&data[0].0).unwrap();
        assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn invalid_configs_and_data() {
        let data = stripes(10);
        let mut cfg = config();
        cfg.batch_size = 7;
        assert!(train_member(&data, &data, &cfg, 0).is_err());
        cfg = config();
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
        let only_pos: Vec<_> = data.iter().filter(|d| d.1 > 0.5).cloned().collect();
        assert!(train_member(&only_pos, &data, &config(), 0).is_err());
        assert!(train_member(&data, &[], &config(), 0).is_err());
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut data = stripes(10);
        data[0].0 = ImagePatch::filled(8, 0.0).unwrap();
        let mut cfg = config();
        cfg.lr = 1e30;
        cfg.max_steps = 20;
        let err = train_member(&data, &data, &cfg, 0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    }
}
