use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::{prepare, sigmoid, BackboneConfig, ResNet};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::image::ImagePatch;

const KIND: &str = "classifier-ensemble";
const SCORE_CHUNK: usize = 64;

/// Anything that maps patches of one fixed side to probabilities in `[0, 1]`.
pub trait PatchScorer {
    /// Side of the patches this scorer accepts.
    fn patch_side(&self) -> usize;
    fn score_batch(&self, patches: &[ImagePatch]) -> Result<Vec<f64>>;

    fn score(&self, patch: &ImagePatch) -> Result<f64> {
        Ok(self.score_batch(std::slice::from_ref(patch))?[0])
    }
}

fn check_side(expected: usize, patches: &[ImagePatch]) -> Result<()> {
    match patches.iter().find(|p| p.side() != expected) {
        Some(p) => Err(Error::validation(format!(
            "classifier expects {expected}-pixel patches, got {}",
            p.side()
        ))),
        None => Ok(()),
    }
}

/// One trained network plus its input geometry: patches of `patch_side`
/// are resized bilinearly to `input_side` before the forward pass.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub(crate) net: ResNet,
    pub(crate) patch_side: usize,
    pub(crate) input_side: usize,
}

impl Classifier {
    pub fn new(net: ResNet, patch_side: usize, input_side: usize) -> Self {
        Self {
            net,
            patch_side,
            input_side,
        }
    }

    pub fn input_side(&self) -> usize {
        self.input_side
    }

    pub fn network(&self) -> &ResNet {
        &self.net
    }
}

impl PatchScorer for Classifier {
    fn patch_side(&self) -> usize {
        self.patch_side
    }

    fn score_batch(&self, patches: &[ImagePatch]) -> Result<Vec<f64>> {
        check_side(self.patch_side, patches)?;
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(SCORE_CHUNK) {
            let x = prepare(chunk, self.input_side)?;
            out.extend(self.net.forward(&x).into_iter().map(sigmoid));
        }
        Ok(out)
    }
}

/// Averages member probabilities.
#[derive(Clone, Debug)]
pub struct Ensemble<M> {
    members: Vec<M>,
}

impl<M: PatchScorer> Ensemble<M> {
    pub fn new(members: Vec<M>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::validation("an ensemble needs at least one member"))?;
        if members.iter().any(|m| m.patch_side() != first.patch_side()) {
            return Err(Error::validation("ensemble members disagree on patch side"));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[M] {
        &self.members
    }

    pub fn predict(&self, patch: &ImagePatch) -> Result<f64> {
        self.score(patch)
    }
}

impl<M: PatchScorer> PatchScorer for Ensemble<M> {
    fn patch_side(&self) -> usize {
        self.members[0].patch_side()
    }

    fn score_batch(&self, patches: &[ImagePatch]) -> Result<Vec<f64>> {
        check_side(self.patch_side(), patches)?;
        let per_member: Vec<Vec<f64>> = self
            .members
            .iter()
            .map(|m| m.score_batch(patches))
            .collect::<Result<_>>()?;
        let k = self.members.len() as f64;
        // Offsets from the minimum, summed in sorted order: the mean is then
        // independent of member order, exact for identical members, and
        // stays within the member range.
        Ok((0..patches.len())
            .map(|i| {
                let mut col: Vec<f64> = per_member.iter().map(|s| s[i]).collect();
                col.sort_by(f64::total_cmp);
                let (lo, hi) = (col[0], col[col.len() - 1]);
                (lo + col.iter().map(|v| v - lo).sum::<f64>() / k).clamp(lo, hi)
            })
            .collect())
    }
}

pub type ClassifierEnsemble = Ensemble<Classifier>;

#[derive(Serialize, Deserialize)]
struct Geometry {
    backbone: BackboneConfig,
    patch_side: usize,
    input_side: usize,
    members: usize,
}

impl Ensemble<Classifier> {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let first = &self.members[0];
        if self
            .members
            .iter()
            .any(|m| m.net.config() != first.net.config() || m.input_side != first.input_side)
        {
            return Err(Error::validation("ensemble members differ in architecture"));
        }
        let mut ckpt = Checkpoint::new(KIND);
        ckpt.set(
            "geometry",
            &Geometry {
                backbone: first.net.config(),
                patch_side: first.patch_side,
                input_side: first.input_side,
                members: self.members.len(),
            },
        )?;
        for (i, m) in self.members.iter().enumerate() {
            ckpt.insert_module(&format!("member{i}."), &m.net);
        }
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(KIND)?;
        let g: Geometry = ckpt.get("geometry")?;
        let members = (0..g.members)
            .map(|i| {
                let mut net = ResNet::new(g.backbone, 0)?;
                ckpt.load_module(&format!("member{i}."), &mut net)?;
                Ok(Classifier::new(net, g.patch_side, g.input_side))
            })
            .collect::<Result<_>>()?;
        Self::new(members)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Confusion counts and derived scores at one threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub n: usize,
    pub threshold: f64,
}

impl Metrics {
    /// F1 is reported as 0 when there are no true positives.
    pub fn from_decisions(predicted: &[bool], actual: &[bool], threshold: f64) -> Result<Self> {
        if predicted.is_empty() {
            return Err(Error::validation("cannot evaluate an empty set"));
        }
        if predicted.len() != actual.len() {
            return Err(Error::validation("predictions and labels differ in length"));
        }
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for (&p, &a) in predicted.iter().zip(actual) {
            match (p, a) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
        let n = predicted.len();
        let f1 = if tp == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
        };
        Ok(Self {
            accuracy: (tp + tn) as f64 / n as f64,
            f1,
            tp,
            fp,
            tn,
            fn_,
            n,
            threshold,
        })
    }
}

/// Scores `data` and thresholds at `threshold` (score >= threshold is
/// positive). Labels are binarized as `label > 0.5`.
pub fn evaluate(scorer: &dyn PatchScorer, data: &[(ImagePatch, f32)], threshold: f64) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::validation("cannot evaluate an empty set"));
    }
    let images: Vec<ImagePatch> = data.iter().map(|(p, _)| p.clone()).collect();
    let scores = scorer.score_batch(&images)?;
    let predicted: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
    let actual: Vec<bool> = data.iter().map(|(_, l)| *l > 0.5).collect();
    Metrics::from_decisions(&predicted, &actual, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(f64);

    impl PatchScorer for Fixed {
        fn patch_side(&self) -> usize {
            4
        }
        fn score_batch(&self, patches: &[ImagePatch]) -> Result<Vec<f64>> {
            check_side(4, patches)?;
            Ok(vec![self.0; patches.len()])
        }
    }

    fn patch() -> ImagePatch {
        ImagePatch::filled(4, 0.0).unwrap()
    }

    #[test]
    fn mean_of_members() {
        let e = Ensemble::new(vec![Fixed(0.2), Fixed(0.4), Fixed(0.9)]).unwrap();
        assert!((e.predict(&patch()).unwrap() - 0.5).abs() < 1e-12);
        let same = Ensemble::new(vec![Fixed(0.37), Fixed(0.37), Fixed(0.37)]).unwrap();
        assert_eq!(same.predict(&patch()).unwrap(), Fixed(0.37).score(&patch()).unwrap());
        assert!(Ensemble::<Fixed>::new(vec![]).is_err());
        assert!(e.predict(&ImagePatch::filled(8, 0.0).unwrap()).is_err());
    }

    #[test]
    fn hand_confusion_matrix() {
        let m = Metrics::from_decisions(&[true, true, false, false], &[true, false, false, false], 0.5).unwrap();
        assert_eq!(m.accuracy, 0.75);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!((m.tp, m.fp, m.tn, m.fn_, m.n), (1, 1, 2, 0, 4));
        let perfect = Metrics::from_decisions(&[true, false], &[true, false], 0.5).unwrap();
        assert_eq!((perfect.accuracy, perfect.f1), (1.0, 1.0));
        let none = Metrics::from_decisions(&[false, false], &[false, false], 0.5).unwrap();
        assert_eq!(none.f1, 0.0);
        assert!(Metrics::from_decisions(&[], &[], 0.5).is_err());
    }

    #[test]
    fn evaluate_thresholds_inclusively() {
        let data = vec![(patch(), 1.0), (patch(), 0.0)];
        let m = evaluate(&Fixed(0.5), &data, 0.5).unwrap();
        assert_eq!((m.tp, m.fp), (1, 1));
        assert!(evaluate(&Fixed(0.5), &[], 0.5).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let members = (0..2)
            .map(|s| Classifier::new(ResNet::new(BackboneConfig { width: 4, depth: 2 }, s).unwrap(), 8, 8))
            .collect();
        let e = Ensemble::new(members).unwrap();
        let bytes = e.to_checkpoint().unwrap().to_bytes().unwrap();
        let back = Ensemble::<Classifier>::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        let probe = vec![ImagePatch::filled(8, 0.3).unwrap(), ImagePatch::filled(8, -0.6).unwrap()];
        assert_eq!(e.score_batch(&probe).unwrap(), back.score_batch(&probe).unwrap());
    }
}
