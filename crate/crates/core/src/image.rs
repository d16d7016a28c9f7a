//! Square RGB patches normalized to `[-1, 1]`.

use std::path::Path;

use ::image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const CHANNELS: usize = 3;

/// A square RGB image stored channel-major (`C x H x W`) with every value in
/// `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePatch {
    side: usize,
    data: Vec<f32>,
}

impl ImagePatch {
    pub fn new(side: usize, data: Vec<f32>) -> Result<Self> {
        if side == 0 {
            return Err(Error::validation("patch side must be positive"));
        }
        if data.len() != CHANNELS * side * side {
            return Err(Error::validation(format!(
                "patch of side {side} needs {} values, got {}",
                CHANNELS * side * side,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::validation(format!(
                "patch value {v} outside [-1, 1]"
            )));
        }
        Ok(Self { side, data })
    }

    /// Builds a patch by clamping arbitrary values into `[-1, 1]`. NaN maps to 0.
    pub fn from_clamped(side: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
        }
        Self::new(side, data)
    }

    pub fn filled(side: usize, value: f32) -> Result<Self> {
        Self::new(side, vec![value; CHANNELS * side * side])
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.side + y) * self.side + x]
    }

    /// Per-pixel luminance-like mean over channels, row-major.
    pub fn gray(&self) -> Vec<f32> {
        let plane = self.side * self.side;
        (0..plane)
            .map(|i| (self.data[i] + self.data[plane + i] + self.data[2 * plane + i]) / 3.0)
            .collect()
    }

    pub fn from_rgb8(img: &RgbImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        if w != h {
            return Err(Error::validation(format!("patch must be square, got {w}x{h}")));
        }
        let side = w as usize;
        let plane = side * side;
        let mut data = vec![0.0; CHANNELS * plane];
        for (x, y, px) in img.enumerate_pixels() {
            let i = y as usize * side + x as usize;
            for c in 0..CHANNELS {
                data[c * plane + i] = u8_to_unit(px.0[c]);
            }
        }
        Self::new(side, data)
    }

    /// Quantizes with the fixed affine map `[-1, 1] -> [0, 255]`, rounding half up.
    pub fn to_rgb8(&self) -> RgbImage {
        let side = self.side;
        let plane = side * side;
        RgbImage::from_fn(side as u32, side as u32, |x, y| {
            let i = y as usize * side + x as usize;
            Rgb([
                unit_to_u8(self.data[i]),
                unit_to_u8(self.data[plane + i]),
                unit_to_u8(self.data[2 * plane + i]),
            ])
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8().save(path.as_ref())?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = ::image::open(path.as_ref())?.to_rgb8();
        Self::from_rgb8(&img)
    }

    /// Encodes the patch as PNG bytes.
    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb8()
            .write_to(&mut out, ::image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    /// Bilinear resampling with half-pixel centers.
    pub fn resize_bilinear(&self, side: usize) -> Result<Self> {
        if side == self.side {
            return Ok(self.clone());
        }
        if side == 0 {
            return Err(Error::validation("target side must be positive"));
        }
        let scale = self.side as f32 / side as f32;
        let src = self.side;
        let coords: Vec<(usize, usize, f32)> = (0..side)
            .map(|d| {
                let s = ((d as f32 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(src - 1);
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, s - i0 as f32)
            })
            .collect();
        let mut data = Vec::with_capacity(CHANNELS * side * side);
        for c in 0..CHANNELS {
            let plane = &self.data[c * src * src..(c + 1) * src * src];
            for &(y0, y1, fy) in &coords {
                for &(x0, x1, fx) in &coords {
                    let top = plane[y0 * src + x0] * (1.0 - fx) + plane[y0 * src + x1] * fx;
                    let bot = plane[y1 * src + x0] * (1.0 - fx) + plane[y1 * src + x1] * fx;
                    data.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
        Self::from_clamped(side, data)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec([1, CHANNELS, self.side, self.side], self.data.clone())
    }

    /// Stacks equally sized patches into one `N x 3 x S x S` batch.
    pub fn stack(patches: &[ImagePatch]) -> Result<Tensor> {
        let first = patches
            .first()
            .ok_or_else(|| Error::validation("cannot stack an empty patch list"))?;
        let side = first.side;
        let mut data = Vec::with_capacity(patches.len() * first.len());
        for p in patches {
            if p.side != side {
                return Err(Error::validation(format!(
                    "mixed patch sides {side} and {}",
                    p.side
                )));
            }
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor::from_vec([patches.len(), CHANNELS, side, side], data))
    }

    /// Splits a batch back into patches, clamping into `[-1, 1]`.
    pub fn unstack_clamped(t: &Tensor) -> Result<Vec<ImagePatch>> {
        let [n, c, h, w] = t.dims();
        if c != CHANNELS || h != w {
            return Err(Error::validation(format!(
                "expected N x 3 x S x S batch, got {:?}",
                t.dims()
            )));
        }
        (0..n)
            .map(|i| Self::from_clamped(h, t.item(i).to_vec()))
            .collect()
    }
}

pub fn unit_to_u8(v: f32) -> u8 {
    let scaled = (v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0;
    (scaled + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn u8_to_unit(v: u8) -> f32 {
    v as f32 / 255.0 * 2.0 - 1.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_values() {
        assert!(ImagePatch::new(1, vec![0.0, 1.5, 0.0]).is_err());
        assert!(ImagePatch::new(2, vec![0.0; 3]).is_err());
        assert!(ImagePatch::new(1, vec![-1.0, 0.0, 1.0]).is_ok());
    }

    #[test]
    fn quantization_endpoints_round_half_up() {
        assert_eq!(unit_to_u8(-1.0), 0);
        assert_eq!(unit_to_u8(1.0), 255);
        // (0 + 1) / 2 * 255 = 127.5 rounds up.
        assert_eq!(unit_to_u8(0.0), 128);
        assert_eq!(u8_to_unit(0), -1.0);
        assert_eq!(u8_to_unit(255), 1.0);
    }

    #[test]
    fn png_round_trip_within_one_level() {
        let side = 5;
        let data: Vec<f32> = (0..3 * side * side)
            .map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0)
            .collect();
        let patch = ImagePatch::new(side, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        patch.save_png(&path).unwrap();
        let back = ImagePatch::load_png(&path).unwrap();
        for (a, b) in patch.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn resize_identity_and_constant() {
        let p = ImagePatch::filled(4, 0.25).unwrap();
        assert_eq!(p.resize_bilinear(4).unwrap(), p);
        let big = p.resize_bilinear(9).unwrap();
        assert_eq!(big.side(), 9);
        assert!(big.data().iter().all(|v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn stack_round_trip() {
        let a = ImagePatch::filled(2, 0.5).unwrap();
        let b = ImagePatch::filled(2, -0.5).unwrap();
        let t = ImagePatch::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(t.dims(), [2, 3, 2, 2]);
        assert_eq!(ImagePatch::unstack_clamped(&t).unwrap(), vec![a, b]);
    }
}
