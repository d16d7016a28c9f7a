//! Fixed-noise condition sweeps, their classifier scores, the smoothness
//! filter used to pick series for display, and aggregate score curves.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::classifier::PatchScorer;
use crate::diffusion::{sample_batch, NoisePredictor, NoiseSchedule, SeededNoise};
use crate::error::{Error, Result};
use crate::image::ImagePatch;
use crate::stats;

/// One seed rendered at every condition of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSeries {
    pub seed: u64,
    pub conditions: Vec<f32>,
    pub images: Vec<ImagePatch>,
    pub scores: Option<Vec<f64>>,
    pub accepted: bool,
}

impl SweepSeries {
    pub fn len(&self) -> usize {
        self.conditions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conditions.is_empty()
    }

    pub fn scores(&self) -> Result<&[f64]> {
        self.scores
            .as_deref()
            .ok_or_else(|| Error::state(format!("series for seed {} has not been scored", self.seed)))
    }
}

/// `0.0, 0.1, ..., 1.0`.
pub fn default_grid() -> Vec<f32> {
    (0..=10).map(|i| i as f32 / 10.0).collect()
}

pub fn check_grid(grid: &[f32]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::validation("condition grid is empty"));
    }
    if let Some(c) = grid.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::validation(format!("condition {c} outside [0, 1]")));
    }
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::validation("condition grid must be ascending"));
    }
    Ok(())
}

/// Samples one series. The initial and per-step noise depend only on
/// `seed`, so every column sees identical noise and only the condition differs.
pub fn generate_sweep(
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    side: usize,
    seed: u64,
    grid: &[f32],
) -> Result<SweepSeries> {
    Ok(generate_sweeps(model, sched, side, &[seed], grid, grid.len())?.remove(0))
}

/// Samples one series per seed, packing up to `batch` images per forward
/// pass. Output is independent of `batch`.
pub fn generate_sweeps(
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    side: usize,
    seeds: &[u64],
    grid: &[f32],
    batch: usize,
) -> Result<Vec<SweepSeries>> {
    check_grid(grid)?;
    if batch == 0 {
        return Err(Error::validation("sampling batch must be at least 1"));
    }
    let jobs: Vec<(u64, f32)> = seeds
        .iter()
        .flat_map(|&s| grid.iter().map(move |&c| (s, c)))
        .collect();
    let mut images = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(batch) {
        let mut noise = SeededNoise::new(chunk.iter().map(|j| j.0).collect());
        let conds: Vec<f32> = chunk.iter().map(|j| j.1).collect();
        images.extend(sample_batch(model, sched, side, &conds, &mut noise)?);
    }
    let mut images = images.into_iter();
    Ok(seeds
        .iter()
        .map(|&seed| SweepSeries {
            seed,
            conditions: grid.to_vec(),
            images: images.by_ref().take(grid.len()).collect(),
            scores: None,
            accepted: false,
        })
        .collect())
}

/// Fills `series.scores` with the scorer's probabilities, in grid order.
pub fn score_series(series: &mut SweepSeries, scorer: &dyn PatchScorer) -> Result<()> {
    if let Some(img) = series.images.iter().find(|i| i.side() != scorer.patch_side()) {
        return Err(Error::validation(format!(
            "scorer expects {}-pixel patches, series has {}",
            scorer.patch_side(),
            img.side()
        )));
    }
    let scores = scorer.score_batch(&series.images)?;
    if scores.len() != series.images.len() {
        return Err(Error::state("scorer returned the wrong number of scores"));
    }
    series.scores = Some(scores);
    Ok(())
}

/// Accepts series that start low, end high, and never jump by much.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRule {
    pub start_max: f64,
    pub end_min: f64,
    pub step_max: f64,
}

impl Default for SelectionRule {
    fn default() -> Self {
        Self {
            start_max: 0.1,
            end_min: 0.9,
            step_max: 0.30,
        }
    }
}

impl SelectionRule {
    /// All comparisons are strict: a score equal to a threshold fails.
    pub fn accepts(&self, scores: &[f64]) -> bool {
        let (Some(first), Some(last)) = (scores.first(), scores.last()) else {
            return false;
        };
        *first < self.start_max
            && *last > self.end_min
            && scores.windows(2).all(|w| (w[1] - w[0]).abs() < self.step_max)
    }

    pub fn select(&self, series: &SweepSeries) -> Result<bool> {
        Ok(self.accepts(series.scores()?))
    }

    /// Sets `accepted` on every series and returns the number accepted.
    pub fn apply(&self, series: &mut [SweepSeries]) -> Result<usize> {
        let mut n = 0;
        for s in series {
            s.accepted = self.select(s)?;
            n += s.accepted as usize;
        }
        Ok(n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveStats {
    pub conditions: Vec<f32>,
    pub mean: Vec<f64>,
    pub median: Vec<f64>,
    pub standard_error: Vec<f64>,
    pub n: usize,
}

impl CurveStats {
    /// Spearman rank correlation between condition and mean score.
    pub fn trend(&self) -> f64 {
        let c: Vec<f64> = self.conditions.iter().map(|&c| c as f64).collect();
        stats::spearman(&c, &self.mean)
    }
}

/// Per-condition mean, median and standard error across scored series.
pub fn curve_stats(series: &[SweepSeries]) -> Result<CurveStats> {
    let first = series
        .first()
        .ok_or_else(|| Error::validation("no series to aggregate"))?;
    if series.iter().any(|s| s.conditions != first.conditions) {
        return Err(Error::validation("series use different condition grids"));
    }
    let all: Vec<&[f64]> = series.iter().map(|s| s.scores()).collect::<Result<_>>()?;
    let columns: Vec<Vec<f64>> = (0..first.len())
        .map(|i| all.iter().map(|s| s[i]).collect())
        .collect();
    Ok(CurveStats {
        conditions: first.conditions.clone(),
        mean: columns.iter().map(|c| stats::mean(c)).collect(),
        median: columns.iter().map(|c| stats::median(c)).collect(),
        standard_error: columns.iter().map(|c| stats::standard_error(c)).collect(),
        n: series.len(),
    })
}

/// Tiles series into a grid: one row per series, one column per condition,
/// each image resized to `cell` pixels.
pub fn montage(series: &[SweepSeries], cell: usize) -> Result<RgbImage> {
    let first = series
        .first()
        .ok_or_else(|| Error::validation("montage needs at least one series"))?;
    if cell == 0 {
        return Err(Error::validation("cell size must be positive"));
    }
    let cols = first.images.len();
    if series.iter().any(|s| s.images.len() != cols) {
        return Err(Error::validation("series differ in length"));
    }
    let mut out = RgbImage::new((cols * cell) as u32, (series.len() * cell) as u32);
    for (r, s) in series.iter().enumerate() {
        for (c, img) in s.images.iter().enumerate() {
            let tile = if img.side() == cell {
                img.to_rgb8()
            } else {
                img.resize_bilinear(cell)?.to_rgb8()
            };
            image::imageops::replace(&mut out, &tile, (c * cell) as i64, (r * cell) as i64);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    struct Constant(f64, usize);

    impl PatchScorer for Constant {
        fn patch_side(&self) -> usize {
            self.1
        }
        fn score_batch(&self, patches: &[ImagePatch]) -> Result<Vec<f64>> {
            Ok(vec![self.0; patches.len()])
        }
    }

    fn cond_model() -> impl Fn(&Tensor, &[usize], &[f32]) -> Tensor {
        |x: &Tensor, _: &[usize], c: &[f32]| {
            let mut out = x.clone();
            for (i, &ci) in c.iter().enumerate() {
                for v in out.item_mut(i) {
                    *v = 0.1 * *v - ci;
                }
            }
            out
        }
    }

    fn scored(scores: &[f64]) -> SweepSeries {
        SweepSeries {
            seed: 0,
            conditions: (0..scores.len()).map(|i| i as f32 / scores.len() as f32).collect(),
            images: vec![ImagePatch::filled(2, 0.0).unwrap(); scores.len()],
            scores: Some(scores.to_vec()),
            accepted: false,
        }
    }

    #[test]
    fn default_grid_has_eleven_points() {
        let g = default_grid();
        assert_eq!(g.len(), 11);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[10], 1.0);
        assert!((g[3] - 0.3).abs() < 1e-7);
    }

    #[test]
    fn sweep_is_deterministic_and_batch_independent() {
        let sched = NoiseSchedule::linear_scaled(10).unwrap();
        let model = cond_model();
        let a = generate_sweep(&model, &sched, 4, 3, &default_grid()).unwrap();
        assert_eq!(a.images.len(), 11);
        let b = generate_sweeps(&model, &sched, 4, &[9, 3], &default_grid(), 4).unwrap();
        assert_eq!(b[1], a);
        assert_ne!(b[0].images, a.images);
        let once = generate_sweep(&model, &sched, 4, 3, &[0.5]).unwrap();
        let twice = generate_sweep(&model, &sched, 4, 3, &[0.5]).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn noise_is_shared_across_columns() {
        struct Recorder(SeededNoise, Vec<(usize, usize, Vec<f32>)>);
        impl crate::diffusion::NoiseSource for Recorder {
            fn initial(&mut self, item: usize, out: &mut [f32]) {
                self.0.initial(item, out);
                self.1.push((0, item, out.to_vec()));
            }
            fn step(&mut self, t: usize, item: usize, out: &mut [f32]) {
                self.0.step(t, item, out);
                self.1.push((t, item, out.to_vec()));
            }
        }
        let sched = NoiseSchedule::linear_scaled(6).unwrap();
        let grid = [0.0, 0.5, 1.0];
        let mut rec = Recorder(SeededNoise::uniform(4, 3), vec![]);
        let imgs = sample_batch(&cond_model(), &sched, 3, &grid, &mut rec).unwrap();
        for t in 0..6 {
            let draws: Vec<&Vec<f32>> = rec.1.iter().filter(|r| r.0 == t).map(|r| &r.2).collect();
            if t == 1 {
                assert!(draws.is_empty());
                continue;
            }
            assert_eq!(draws.len(), 3);
            assert!(draws.iter().all(|d| *d == draws[0]));
        }
        assert_ne!(imgs[0], imgs[2]);
        let via_sweep = generate_sweep(&cond_model(), &sched, 3, 4, &grid).unwrap();
        assert_eq!(via_sweep.images, imgs);
    }

    #[test]
    fn grid_validation() {
        let sched = NoiseSchedule::linear_scaled(4).unwrap();
        assert!(generate_sweep(&cond_model(), &sched, 4, 0, &[]).is_err());
        assert!(generate_sweep(&cond_model(), &sched, 4, 0, &[0.5, 0.2]).is_err());
        assert!(generate_sweep(&cond_model(), &sched, 4, 0, &[1.5]).is_err());
    }

    #[test]
    fn scoring_with_a_stub() {
        let sched = NoiseSchedule::linear_scaled(4).unwrap();
        let mut s = generate_sweep(&cond_model(), &sched, 4, 1, &default_grid()).unwrap();
        assert!(SelectionRule::default().select(&s).is_err());
        score_series(&mut s, &Constant(0.7, 4)).unwrap();
        assert_eq!(s.scores.as_deref(), Some(&[0.7; 11][..]));
        assert!(score_series(&mut s, &Constant(0.7, 8)).is_err());
    }

    #[test]
    fn selection_examples() {
        let rule = SelectionRule::default();
        assert!(rule.accepts(&[0.05, 0.2, 0.4, 0.6, 0.8, 0.95]));
        assert!(!rule.accepts(&[0.05, 0.5, 0.95]));
        assert!(!rule.accepts(&[0.15, 0.35, 0.55, 0.75, 0.95]));
        assert!(!rule.accepts(&[]));
    }

    #[test]
    fn curve_stats_by_hand() {
        let stats = curve_stats(&[scored(&[0.3; 4]), scored(&[0.5; 4])]).unwrap();
        assert_eq!(stats.n, 2);
        for i in 0..4 {
            assert!((stats.mean[i] - 0.4).abs() < 1e-12);
            assert!((stats.median[i] - 0.4).abs() < 1e-12);
            assert!((stats.standard_error[i] - 0.1).abs() < 1e-12);
        }
        let single = curve_stats(&[scored(&[0.1, 0.9])]).unwrap();
        assert_eq!(single.standard_error, vec![0.0, 0.0]);
        let mut other = scored(&[0.1, 0.9]);
        other.conditions[1] = 0.7;
        assert!(curve_stats(&[scored(&[0.1, 0.9]), other]).is_err());
        assert!(curve_stats(&[]).is_err());
    }

    #[test]
    fn montage_shape() {
        let sched = NoiseSchedule::linear_scaled(4).unwrap();
        let s = generate_sweep(&cond_model(), &sched, 4, 1, &default_grid()).unwrap();
        let m = montage(std::slice::from_ref(&s), 8).unwrap();
        assert_eq!(m.dimensions(), (88, 8));
        let six = montage(&vec![s; 6], 4).unwrap();
        assert_eq!(six.dimensions(), (44, 24));
        assert!(montage(&[], 4).is_err());
    }

    #[test]
    fn montage_of_identical_images_has_identical_tiles() {
        let mut s = scored(&[0.0; 3]);
        s.images = vec![ImagePatch::new(2, vec![0.5, -0.5, 0.0, 1.0, 0.2, -0.2, 0.9, -0.9, 0.1, 0.3, 0.6, -1.0]).unwrap(); 3];
        let m = montage(&[s.clone(), s], 2).unwrap();
        let tile = |r: u32, c: u32| -> Vec<u8> {
            let mut v = vec![];
            for y in 0..2 {
                for x in 0..2 {
                    v.extend(m.get_pixel(c * 2 + x, r * 2 + y).0);
                }
            }
            v
        };
        for r in 0..2 {
            for c in 0..3 {
                assert_eq!(tile(r, c), tile(0, 0));
            }
        }
    }
}
