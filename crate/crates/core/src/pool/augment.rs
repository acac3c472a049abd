use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single `C×H×W` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels * height * width == 0 || data.len() != channels * height * width {
            return Err(Error::InvalidArgument(format!(
                "image {channels}×{height}×{width} with {} values",
                data.len()
            )));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    fn crop(&self, top: usize, left: usize, side: usize) -> Image {
        let mut data = Vec::with_capacity(self.channels * side * side);
        for c in 0..self.channels {
            for y in top..top + side {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + left..row + left + side]);
            }
        }
        Image {
            channels: self.channels,
            height: side,
            width: side,
            data,
        }
    }

    pub fn flip_horizontal(&mut self) {
        for row in self.data.chunks_mut(self.width) {
            row.reverse();
        }
    }

    pub fn flip_vertical(&mut self) {
        let (h, w) = (self.height, self.width);
        for plane in self.data.chunks_mut(h * w) {
            for y in 0..h / 2 {
                let (top, bottom) = plane.split_at_mut((h - 1 - y) * w);
                top[y * w..(y + 1) * w].swap_with_slice(&mut bottom[..w]);
            }
        }
    }
}

/// Random square crop (identity for square inputs) followed by independent
/// horizontal and vertical flips, each with probability 0.5.
pub fn augment<R: Rng + ?Sized>(image: &Image, rng: &mut R) -> Image {
    let side = image.height.min(image.width);
    let mut out = if image.height == image.width {
        image.clone()
    } else {
        let top = rng.gen_range(0..=image.height - side);
        let left = rng.gen_range(0..=image.width - side);
        image.crop(top, left, side)
    };
    if rng.gen_bool(0.5) {
        out.flip_horizontal();
    }
    if rng.gen_bool(0.5) {
        out.flip_vertical();
    }
    out
}

/// Fixed per-channel normalization statistics shared by every task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        NormStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    fn check(&self, image: &Image) -> Result<()> {
        if self.mean.len() != image.channels || self.std.len() != image.channels {
            return Err(Error::InvalidArgument(format!(
                "normalization stats have {} channels, image has {}",
                self.mean.len(),
                image.channels
            )));
        }
        if let Some(c) = self.std.iter().position(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("channel {c} has non-positive std")));
        }
        Ok(())
    }
}

pub fn normalize(image: &Image, stats: &NormStats) -> Result<Image> {
    stats.check(image)?;
    let plane = image.height * image.width;
    let mut out = image.clone();
    for (c, chunk) in out.data.chunks_mut(plane).enumerate() {
        let (m, s) = (stats.mean[c], stats.std[c]);
        chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
    }
    Ok(out)
}

pub fn denormalize(image: &Image, stats: &NormStats) -> Result<Image> {
    stats.check(image)?;
    let plane = image.height * image.width;
    let mut out = image.clone();
    for (c, chunk) in out.data.chunks_mut(plane).enumerate() {
        let (m, s) = (stats.mean[c], stats.std[c]);
        chunk.iter_mut().for_each(|v| *v = *v * s + m);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::mock::StepRng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(c: usize, h: usize, w: usize) -> Image {
        Image::new(c, h, w, (0..c * h * w).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn square_input_without_flips_is_unchanged() {
        let img = ramp(3, 8, 8);
        // u64::MAX makes every gen_bool(0.5) draw false.
        let mut rng = StepRng::new(u64::MAX, 0);
        assert_eq!(augment(&img, &mut rng), img);
    }

    #[test]
    fn non_square_input_is_cropped_square() {
        let img = ramp(1, 40, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = augment(&img, &mut rng);
        assert_eq!((out.height, out.width), (32, 32));
    }

    #[test]
    fn crop_offsets_cover_all_positions() {
        let img = ramp(1, 6, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tops = std::collections::BTreeSet::new();
        for _ in 0..500 {
            let out = augment(&img, &mut rng);
            // Undo flips by looking at the smallest value, which sits at the crop's top row.
            let min = out.data.iter().cloned().fold(f32::INFINITY, f32::min) as usize;
            tops.insert(min / 4);
        }
        assert_eq!(tops.into_iter().collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn flips_are_involutions() {
        let mut img = ramp(2, 5, 3);
        let orig = img.clone();
        img.flip_vertical();
        assert_eq!(img.at(0, 0, 0), orig.at(0, 4, 0));
        img.flip_vertical();
        img.flip_horizontal();
        assert_eq!(img.at(1, 2, 0), orig.at(1, 2, 2));
        img.flip_horizontal();
        assert_eq!(img, orig);
    }

    #[test]
    fn normalize_mean_image_gives_zeros() {
        let stats = NormStats {
            mean: vec![0.5, -1.0],
            std: vec![2.0, 0.5],
        };
        let img = Image::new(2, 2, 2, vec![0.5, 0.5, 0.5, 0.5, -1.0, -1.0, -1.0, -1.0]).unwrap();
        assert!(normalize(&img, &stats).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_stats_are_identity_and_round_trip_holds() {
        let img = ramp(3, 4, 4);
        assert_eq!(normalize(&img, &NormStats::identity(3)).unwrap(), img);
        let stats = NormStats {
            mean: vec![0.3, 0.2, 0.1],
            std: vec![0.7, 1.3, 2.0],
        };
        let back = denormalize(&normalize(&img, &stats).unwrap(), &stats).unwrap();
        for (a, b) in back.data.iter().zip(&img.data) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn zero_std_rejected() {
        let stats = NormStats {
            mean: vec![0.0],
            std: vec![0.0],
        };
        assert!(normalize(&ramp(1, 2, 2), &stats).is_err());
    }
}
