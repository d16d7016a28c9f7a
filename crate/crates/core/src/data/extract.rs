use image::RgbImage;

use crate::error::{Error, Result};
use crate::image::{u8_to_unit, ImagePatch, CHANNELS};

/// Mirror index into `0..len` without repeating the edge pixel.
fn reflect(i: i64, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < len as i64 { m } else { period - m }) as usize
}

/// Crops a `side x side` patch whose center pixel is `center`, covering
/// `x - side/2 .. x + side/2`. Out-of-bounds pixels are reflect-padded.
pub fn extract_patch(slide: &RgbImage, center: (u32, u32), side: usize) -> Result<ImagePatch> {
    if side == 0 || side % 2 != 0 {
        return Err(Error::validation(format!("patch side {side} must be even and positive")));
    }
    let (w, h) = slide.dimensions();
    let (cx, cy) = center;
    if cx >= w || cy >= h {
        return Err(Error::validation(format!(
            "center ({cx}, {cy}) outside the {w}x{h} slide"
        )));
    }
    let half = (side / 2) as i64;
    let mut data = vec![0.0f32; CHANNELS * side * side];
    for dy in 0..side {
        let sy = reflect(cy as i64 - half + dy as i64, h as usize) as u32;
        for dx in 0..side {
            let sx = reflect(cx as i64 - half + dx as i64, w as usize) as u32;
            let px = slide.get_pixel(sx, sy).0;
            for c in 0..CHANNELS {
                data[c * side * side + dy * side + dx] = u8_to_unit(px[c]);
            }
        }
    }
    ImagePatch::new(side, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn slide(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, ((x * 7 + y * 3) % 256) as u8]))
    }

    #[test]
    fn central_block() {
        let s = slide(128, 128);
        let p = extract_patch(&s, (64, 64), 64).unwrap();
        let expect = image::imageops::crop_imm(&s, 32, 32, 64, 64).to_image();
        assert_eq!(p.to_rgb8(), expect);
    }

    #[test]
    fn corner_is_reflected() {
        let s = slide(128, 128);
        let p = extract_patch(&s, (0, 0), 64).unwrap();
        assert_eq!(p.side(), 64);
        let img = p.to_rgb8();
        // Patch pixel (0, 0) maps to slide (-32, -32) -> (32, 32).
        assert_eq!(img.get_pixel(0, 0), s.get_pixel(32, 32));
        assert_eq!(img.get_pixel(31, 32), s.get_pixel(1, 0));
        assert_eq!(img.get_pixel(32, 32), s.get_pixel(0, 0));
        assert_eq!(extract_patch(&s, (0, 0), 64).unwrap(), p);
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-4..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![2, 3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
        assert_eq!(reflect(-5, 1), 0);
    }

    #[test]
    fn rejects_bad_requests() {
        let s = slide(16, 16);
        assert!(extract_patch(&s, (16, 0), 8).is_err());
        assert!(extract_patch(&s, (0, 16), 8).is_err());
        assert!(extract_patch(&s, (4, 4), 7).is_err());
    }

    #[test]
    fn png_round_trip_within_one_level() {
        let s = slide(40, 40);
        let p = extract_patch(&s, (20, 20), 16).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        p.save_png(&path).unwrap();
        let back = ImagePatch::load_png(&path).unwrap();
        for (a, b) in p.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 2.0 / 255.0 + 1e-6);
        }
    }
}
