//! Editing real patches by partial forward diffusion followed by
//! conditional denoising.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::process::{check_condition, q_sample, reverse_chain, NoiseSource, RngNoise, SeededNoise};
use super::schedule::NoiseSchedule;
use super::unet::NoisePredictor;
use crate::error::{Error, Result};
use crate::image::ImagePatch;
use crate::nn::Tensor;

/// One real patch edited at a grid of stopping times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformationSeries {
    #[serde(skip)]
    pub source: Option<ImagePatch>,
    pub stop_times: Vec<usize>,
    #[serde(skip)]
    pub outputs: Vec<ImagePatch>,
    /// Classifier scores per output; `None` until scored.
    pub scores: Option<Vec<f64>>,
    /// First frame a reviewer judged to resemble the positive class.
    pub earliest_mark: Option<usize>,
    /// First frame a reviewer judged convincingly positive.
    pub convincing_mark: Option<usize>,
}

impl TransformationSeries {
    pub fn len(&self) -> usize {
        self.stop_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stop_times.is_empty()
    }

    pub fn set_scores(&mut self, scores: Vec<f64>) -> Result<()> {
        if scores.len() != self.len() {
            return Err(Error::validation(format!(
                "{} scores for a series of {} frames",
                scores.len(),
                self.len()
            )));
        }
        self.scores = Some(scores);
        Ok(())
    }

    pub fn set_marks(&mut self, earliest: Option<usize>, convincing: Option<usize>) -> Result<()> {
        validate_marks(self.len(), earliest, convincing)?;
        self.earliest_mark = earliest;
        self.convincing_mark = convincing;
        Ok(())
    }
}

/// Checks human threshold marks against a series of `frames` frames.
pub fn validate_marks(frames: usize, earliest: Option<usize>, convincing: Option<usize>) -> Result<()> {
    for (what, idx) in [("earliest", earliest), ("convincing", convincing)] {
        if let Some(i) = idx {
            if i >= frames {
                return Err(Error::validation(format!(
                    "{what} mark {i} outside a series of {frames} frames"
                )));
            }
        }
    }
    if let (Some(e), Some(c)) = (earliest, convincing) {
        if e > c {
            return Err(Error::validation(format!(
                "earliest mark {e} is after convincing mark {c}"
            )));
        }
    }
    Ok(())
}

/// Edits a batch of patches, item `i` being corrupted to `stops[i]` and
/// denoised under `conditions[i]`. A stop time of 0 returns the input
/// unchanged. `noise.initial` provides the corruption draw.
pub fn partial_edit_batch(
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    inputs: &[ImagePatch],
    stops: &[usize],
    conditions: &[f32],
    noise: &mut dyn NoiseSource,
) -> Result<Vec<ImagePatch>> {
    if inputs.len() != stops.len() || inputs.len() != conditions.len() {
        return Err(Error::validation("need one stop time and condition per input"));
    }
    for &s in stops {
        if s > sched.steps() {
            return Err(Error::Index {
                what: "stopping time",
                index: s,
                lo: 0,
                hi: sched.steps(),
            });
        }
    }
    conditions.iter().try_for_each(|&c| check_condition(c))?;
    let live: Vec<usize> = (0..inputs.len()).filter(|&i| stops[i] > 0).collect();
    let mut outputs: Vec<ImagePatch> = inputs.to_vec();
    if live.is_empty() {
        return Ok(outputs);
    }
    let live_inputs: Vec<ImagePatch> = live.iter().map(|&i| inputs[i].clone()).collect();
    let x0 = ImagePatch::stack(&live_inputs)?;
    let mut eps = Tensor::zeros(x0.dims());
    for (k, &i) in live.iter().enumerate() {
        noise.initial(i, eps.item_mut(k));
    }
    let live_stops: Vec<usize> = live.iter().map(|&i| stops[i]).collect();
    let live_conds: Vec<f32> = live.iter().map(|&i| conditions[i]).collect();
    let x_s = q_sample(&x0, &live_stops, &eps, sched)?;
    let mut remap = Remapped {
        inner: noise,
        ids: &live,
    };
    let out = reverse_chain(model, sched, x_s, &live_stops, &live_conds, &mut remap)?;
    for (patch, &i) in ImagePatch::unstack_clamped(&out)?.into_iter().zip(&live) {
        outputs[i] = patch;
    }
    Ok(outputs)
}

/// Routes compacted batch indices back to the caller's item ids.
struct Remapped<'a> {
    inner: &'a mut dyn NoiseSource,
    ids: &'a [usize],
}

impl NoiseSource for Remapped<'_> {
    fn initial(&mut self, item: usize, out: &mut [f32]) {
        self.inner.initial(self.ids[item], out);
    }

    fn step(&mut self, t: usize, item: usize, out: &mut [f32]) {
        self.inner.step(t, self.ids[item], out);
    }
}

/// Corrupts `x_real` to stopping time `stop` and runs the reverse chain back
/// to `t = 1` under `condition`, drawing noise from `rng`.
pub fn partial_edit(
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    x_real: &ImagePatch,
    stop: usize,
    condition: f32,
    rng: &mut impl RngCore,
) -> Result<ImagePatch> {
    let mut src = RngNoise(rng);
    Ok(partial_edit_batch(
        model,
        sched,
        std::slice::from_ref(x_real),
        &[stop],
        &[condition],
        &mut src,
    )?
    .remove(0))
}

/// Edits one patch at every stopping time in `stop_times`.
///
/// Every column draws from the same seeded noise: the corruption draw is
/// identical across columns and step `t` adds the same noise wherever it is
/// reached, so differences between frames come from the stopping time alone.
pub fn edit_series(
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    x_real: &ImagePatch,
    stop_times: &[usize],
    condition: f32,
    seed: u64,
) -> Result<TransformationSeries> {
    check_stop_grid(stop_times, sched)?;
    let n = stop_times.len();
    let inputs = vec![x_real.clone(); n];
    let mut noise = SeededNoise::uniform(seed, n);
    let outputs = partial_edit_batch(
        model,
        sched,
        &inputs,
        stop_times,
        &vec![condition; n],
        &mut noise,
    )?;
    Ok(TransformationSeries {
        source: Some(x_real.clone()),
        stop_times: stop_times.to_vec(),
        outputs,
        scores: None,
        earliest_mark: None,
        convincing_mark: None,
    })
}

pub fn check_stop_grid(stop_times: &[usize], sched: &NoiseSchedule) -> Result<()> {
    if stop_times.is_empty() {
        return Err(Error::validation("stopping-time grid is empty"));
    }
    if stop_times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::validation("stopping times must be strictly ascending"));
    }
    if let Some(&s) = stop_times.iter().find(|&&s| s > sched.steps()) {
        return Err(Error::Index {
            what: "stopping time",
            index: s,
            lo: 0,
            hi: sched.steps(),
        });
    }
    Ok(())
}

/// Evenly spaced stopping times `0, T/(k-1), ..., T` (rounded, deduplicated).
pub fn even_stop_grid(total_steps: usize, count: usize) -> Vec<usize> {
    if count <= 1 {
        return vec![0];
    }
    let mut grid: Vec<usize> = (0..count)
        .map(|i| ((i * total_steps) as f64 / (count - 1) as f64).round() as usize)
        .collect();
    grid.dedup();
    grid
}

/// Index of the first frame whose score reaches `tau`.
pub fn resemblance_threshold(series: &TransformationSeries, tau: f64) -> Result<Option<usize>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::validation(format!("threshold {tau} outside (0, 1)")));
    }
    let scores = series
        .scores
        .as_ref()
        .ok_or_else(|| Error::state("series has not been scored"))?;
    Ok(scores.iter().position(|&s| s >= tau))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shrink_model() -> impl Fn(&Tensor, &[usize], &[f32]) -> Tensor {
        |x: &Tensor, _: &[usize], c: &[f32]| {
            let mut y = x.clone();
            let per = x.item_len();
            for (i, v) in y.data_mut().iter_mut().enumerate() {
                *v = *v * 0.5 + c[i / per] - 0.5;
            }
            y
        }
    }

    fn scored(scores: Vec<f64>) -> TransformationSeries {
        TransformationSeries {
            source: None,
            stop_times: (0..scores.len()).collect(),
            outputs: vec![],
            scores: Some(scores),
            earliest_mark: None,
            convincing_mark: None,
        }
    }

    #[test]
    fn stop_zero_is_identity() {
        let sched = NoiseSchedule::linear(10, 0.01, 0.2).unwrap();
        let x = ImagePatch::new(2, vec![0.1, -0.3, 0.7, 1.0, -1.0, 0.0, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7])
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = partial_edit(&shrink_model(), &sched, &x, 0, 1.0, &mut rng).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn stop_out_of_range() {
        let sched = NoiseSchedule::linear(10, 0.01, 0.2).unwrap();
        let x = ImagePatch::filled(2, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            partial_edit(&shrink_model(), &sched, &x, 11, 1.0, &mut rng),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn series_shapes_and_determinism() {
        let sched = NoiseSchedule::linear(20, 0.01, 0.2).unwrap();
        let x = ImagePatch::filled(4, 0.2).unwrap();
        let single = edit_series(&shrink_model(), &sched, &x, &[0], 1.0, 3).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single.outputs[0], x);

        let grid = even_stop_grid(20, 8);
        assert_eq!(grid.len(), 8);
        let a = edit_series(&shrink_model(), &sched, &x, &grid, 1.0, 3).unwrap();
        assert_eq!(a.outputs.len(), 8);
        assert_eq!(a.stop_times, grid);
        assert!(a.scores.is_none());
        let b = edit_series(&shrink_model(), &sched, &x, &grid, 1.0, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.outputs[0], x);
    }

    #[test]
    fn series_column_matches_single_batched_edit() {
        // A column of the series equals an edit of that stopping time alone
        // under the same seeded noise.
        let sched = NoiseSchedule::linear(20, 0.01, 0.2).unwrap();
        let x = ImagePatch::filled(4, -0.4).unwrap();
        let series = edit_series(&shrink_model(), &sched, &x, &[0, 5, 12, 20], 0.7, 9).unwrap();
        let mut noise = SeededNoise::uniform(9, 1);
        let alone =
            partial_edit_batch(&shrink_model(), &sched, &[x], &[12], &[0.7], &mut noise).unwrap();
        assert_eq!(series.outputs[2], alone[0]);
    }

    #[test]
    fn grid_validation() {
        let sched = NoiseSchedule::linear(20, 0.01, 0.2).unwrap();
        assert!(check_stop_grid(&[], &sched).is_err());
        assert!(check_stop_grid(&[3, 3], &sched).is_err());
        assert!(check_stop_grid(&[5, 2], &sched).is_err());
        assert!(check_stop_grid(&[0, 21], &sched).is_err());
        assert!(check_stop_grid(&[0, 20], &sched).is_ok());
    }

    #[test]
    fn threshold_lookup() {
        assert_eq!(resemblance_threshold(&scored(vec![0.1, 0.4, 0.95]), 0.9).unwrap(), Some(2));
        assert_eq!(resemblance_threshold(&scored(vec![0.1, 0.2]), 0.9).unwrap(), None);
        assert_eq!(resemblance_threshold(&scored(vec![0.9]), 0.9).unwrap(), Some(0));
        let mut unscored = scored(vec![0.5]);
        unscored.scores = None;
        assert!(matches!(resemblance_threshold(&unscored, 0.9), Err(Error::State(_))));
        assert!(resemblance_threshold(&scored(vec![0.5]), 1.0).is_err());
    }

    #[test]
    fn marks_validation() {
        let mut s = scored(vec![0.0; 8]);
        assert!(s.set_marks(Some(2), Some(5)).is_ok());
        assert!(s.set_marks(Some(5), Some(2)).is_err());
        assert!(s.set_marks(None, Some(4)).is_ok());
        assert_eq!(s.earliest_mark, None);
        assert!(s.set_marks(Some(8), None).is_err());
    }
}
