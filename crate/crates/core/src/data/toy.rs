use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::record::PatchRecord;
use crate::error::{Error, Result};
use crate::image::{ImagePatch, CHANNELS};

/// Parameters of one synthetic cell. `m` in `[0, 1]` drives chromatin
/// darkness, edge sharpness and elongation; `seed` drives everything else
/// (position, orientation, size jitter, background and chromatin texture).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub side: usize,
    pub m: f32,
    pub seed: u64,
}

/// A rendered toy cell with its ground-truth morphology value.
#[derive(Clone, Debug, PartialEq)]
pub struct ToySample {
    pub image: ImagePatch,
    pub m: f32,
    pub seed: u64,
}

impl ToySample {
    pub fn is_positive(&self) -> bool {
        self.m > 0.5
    }
}

const BACKGROUND: [f32; 3] = [0.93, 0.78, 0.87];
const NUCLEUS_LIGHT: [f32; 3] = [0.66, 0.52, 0.78];
const NUCLEUS_DARK: [f32; 3] = [0.16, 0.09, 0.30];

/// Aspect ratio of the nucleus ellipse at morphology `m`.
pub(crate) fn elongation(m: f32) -> f32 {
    1.0 + 1.4 * m
}

/// Width of the nucleus boundary ramp, as a fraction of its radius.
pub(crate) fn edge_width(m: f32) -> f32 {
    0.45 - 0.37 * m
}

pub fn render_toy(spec: &ToySpec) -> Result<ImagePatch> {
    if !(0.0..=1.0).contains(&spec.m) {
        return Err(Error::validation(format!("toy morphology {} outside [0, 1]", spec.m)));
    }
    if spec.side < 8 {
        return Err(Error::validation("toy patches need a side of at least 8"));
    }
    let side = spec.side;
    let s = side as f32;
    let m = spec.m;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let cx = s / 2.0 + rng.random_range(-0.08..0.08) * s;
    let cy = s / 2.0 + rng.random_range(-0.08..0.08) * s;
    let theta = rng.random_range(0.0..std::f32::consts::PI);
    let radius = s * 0.2 * rng.random_range(0.92..1.08);
    let aspect = elongation(m);
    let (ra, rb) = (radius * aspect.sqrt(), radius / aspect.sqrt());
    let (cos, sin) = (theta.cos(), theta.sin());
    let ramp = edge_width(m);
    let tint = rng.random_range(-0.03..0.03);

    let waves: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..2.5) / s,
                rng.random_range(0.5..2.5) / s,
                rng.random_range(0.0..std::f32::consts::TAU),
                rng.random_range(0.01..0.03),
            )
        })
        .collect();
    let nucleus: [f32; 3] =
        std::array::from_fn(|c| NUCLEUS_LIGHT[c] + (NUCLEUS_DARK[c] - NUCLEUS_LIGHT[c]) * m);

    let mut data = vec![0.0f32; CHANNELS * side * side];
    for y in 0..side {
        for x in 0..side {
            let (px, py) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            let u = (px * cos + py * sin) / ra;
            let v = (-px * sin + py * cos) / rb;
            let d = (u * u + v * v).sqrt();
            let mask = 1.0 / (1.0 + ((d - 1.0) / (ramp * 0.25)).exp());
            let texture: f32 = waves
                .iter()
                .map(|&(fx, fy, ph, amp)| {
                    amp * (std::f32::consts::TAU * (fx * x as f32 + fy * y as f32) + ph).sin()
                })
                .sum();
            let grain = rng.random_range(-0.02..0.02);
            let chromatin = rng.random_range(-0.04..0.04);
            for c in 0..CHANNELS {
                let bg = BACKGROUND[c] + tint + texture + grain;
                let fg = nucleus[c] + chromatin;
                let val = bg * (1.0 - mask) + fg * mask;
                data[c * side * side + y * side + x] = val.clamp(0.0, 1.0) * 2.0 - 1.0;
            }
        }
    }
    ImagePatch::new(side, data)
}

/// `n` toy cells with `m` uniform on `[0, 1]`, fully determined by `seed`.
pub fn toy_dataset(n: usize, seed: u64, side: usize) -> Result<Vec<ToySample>> {
    if n == 0 {
        return Err(Error::validation("toy dataset needs at least one sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let m: f32 = rng.random();
            let item_seed: u64 = rng.random();
            let spec = ToySpec { side, m, seed: item_seed };
            Ok(ToySample {
                image: render_toy(&spec)?,
                m,
                seed: item_seed,
            })
        })
        .collect()
}

/// Places toy samples on pseudo slides of `per_slide` cells each so the
/// vertical-axis split has coordinates to work with. Returns records and
/// the pseudo-slide height.
pub fn toy_records(samples: &[ToySample], seed: u64, per_slide: usize) -> (Vec<PatchRecord>, f64) {
    const HEIGHT: f64 = 4096.0;
    let per_slide = per_slide.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let records = samples
        .iter()
        .enumerate()
        .map(|(i, s)| PatchRecord {
            patch_id: format!("toy-{i:06}"),
            slide_id: format!("toy-slide-{:03}", i / per_slide),
            center: Some((rng.random_range(0.0..HEIGHT).floor(), rng.random_range(0.0..HEIGHT).floor())),
            image: Some(s.image.clone()),
            votes: Vec::new(),
            label: s.m as f64,
        })
        .collect();
    (records, HEIGHT)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(m: f32, seed: u64) -> ToySpec {
        ToySpec { side: 32, m, seed }
    }

    fn darkness(p: &ImagePatch) -> f64 {
        p.gray().iter().map(|&v| (1.0 - v) as f64 / 2.0).sum::<f64>() / (p.side() * p.side()) as f64
    }

    #[test]
    fn darker_at_high_m() {
        for seed in 0..20 {
            let lo = render_toy(&spec(0.0, seed)).unwrap();
            let hi = render_toy(&spec(1.0, seed)).unwrap();
            assert!(darkness(&hi) > darkness(&lo), "seed {seed}");
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(toy_dataset(5, 3, 32).unwrap(), toy_dataset(5, 3, 32).unwrap());
        assert_ne!(toy_dataset(5, 3, 32).unwrap(), toy_dataset(5, 4, 32).unwrap());
        assert_eq!(render_toy(&spec(0.3, 1)).unwrap(), render_toy(&spec(0.3, 1)).unwrap());
    }

    #[test]
    fn controlled_attributes_are_monotone_in_m() {
        let grid: Vec<f32> = (0..=20).map(|i| i as f32 / 20.0).collect();
        let colors: Vec<f32> = grid
            .iter()
            .map(|&m| (0..3).map(|c| NUCLEUS_LIGHT[c] + (NUCLEUS_DARK[c] - NUCLEUS_LIGHT[c]) * m).sum())
            .collect();
        assert!(colors.windows(2).all(|w| w[1] < w[0]), "nucleus brightness");
        assert!(grid.windows(2).all(|w| edge_width(w[1]) < edge_width(w[0])), "edge ramp");
        assert!(grid.windows(2).all(|w| elongation(w[1]) > elongation(w[0])), "aspect");
        for seed in 0..5 {
            let d: Vec<f64> = grid.iter().map(|&m| darkness(&render_toy(&spec(m, seed)).unwrap())).collect();
            assert!(d.windows(2).all(|w| w[1] >= w[0] - 1e-3), "seed {seed}: {d:?}");
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(render_toy(&spec(1.5, 0)).is_err());
        assert!(render_toy(&ToySpec { side: 4, m: 0.5, seed: 0 }).is_err());
        assert!(toy_dataset(0, 0, 32).is_err());
    }

    #[test]
    fn pseudo_slides() {
        let samples = toy_dataset(10, 1, 16).unwrap();
        let (recs, h) = toy_records(&samples, 1, 4);
        assert_eq!(recs.len(), 10);
        assert_eq!(recs[9].slide_id, "toy-slide-002");
        assert!(recs.iter().all(|r| r.center.unwrap().1 < h));
        assert_eq!(recs[3].label, samples[3].m as f64);
    }
}
