//! Procedurally generated MVTec-style dataset for smoke tests: striped
//! textures with rectangular colour defects and matching masks.

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub categories: Vec<String>,
    pub side: u32,
    pub train_good: usize,
    pub test_good: usize,
    pub test_bad: usize,
    pub seed: u64,
}

impl Default for SyntheticDataset {
    fn default() -> Self {
        Self {
            categories: vec!["gadget".into(), "widget".into()],
            side: 64,
            train_good: 4,
            test_good: 8,
            test_bad: 8,
            seed: 0,
        }
    }
}

impl SyntheticDataset {
    /// Writes the tree under `root` and returns the number of images written.
    pub fn write(&self, root: &Path) -> Result<usize> {
        let mut written = 0;
        for (ci, category) in self.categories.iter().enumerate() {
            let mut rng =
                ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(1000).wrapping_add(ci as u64));
            let cat = root.join(category);
            for i in 0..self.train_good {
                self.save(&self.texture(ci, &mut rng), &cat.join("train/good"), i)?;
                written += 1;
            }
            for i in 0..self.test_good {
                self.save(&self.texture(ci, &mut rng), &cat.join("test/good"), i)?;
                written += 1;
            }
            for i in 0..self.test_bad {
                let mut img = self.texture(ci, &mut rng);
                let mask = self.paint_defect(&mut img, &mut rng);
                self.save(&img, &cat.join("test/defect"), i)?;
                let mask_dir = cat.join("ground_truth/defect");
                fs::create_dir_all(&mask_dir)?;
                let path = mask_dir.join(format!("{i:03}_mask.png"));
                mask.save(&path)
                    .map_err(|source| Error::Image { path, source })?;
                written += 1;
            }
        }
        Ok(written)
    }

    fn save(&self, img: &RgbImage, dir: &Path, index: usize) -> Result<()> {
        fs::create_dir_all(dir)?;
        let path = dir.join(format!("{index:03}.png"));
        img.save(&path)
            .map_err(|source| Error::Image { path, source })
    }

    fn texture(&self, category: usize, rng: &mut ChaCha8Rng) -> RgbImage {
        let period = 6.0 + 3.0 * category as f32;
        let phase: f32 = rng.random_range(0.0..period);
        let base = [
            0.35 + 0.1 * (category % 3) as f32,
            0.45,
            0.55 - 0.1 * (category % 2) as f32,
        ];
        RgbImage::from_fn(self.side, self.side, |x, _| {
            let stripe = 0.12 * ((x as f32 + phase) * std::f32::consts::TAU / period).sin();
            let noise: f32 = rng.random_range(-0.03..0.03);
            let px = base.map(|b| ((b + stripe + noise).clamp(0.0, 1.0) * 255.0).round() as u8);
            Rgb(px)
        })
    }

    fn paint_defect(&self, img: &mut RgbImage, rng: &mut ChaCha8Rng) -> GrayImage {
        let s = self.side;
        let w = rng.random_range(s / 6..=s / 3).max(1);
        let h = rng.random_range(s / 6..=s / 3).max(1);
        let x0 = rng.random_range(0..s - w);
        let y0 = rng.random_range(0..s - h);
        let colour = [
            rng.random_range(200..=255),
            rng.random_range(0..60),
            rng.random_range(0..60),
        ];
        let mut mask = GrayImage::new(s, s);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                img.put_pixel(x, y, Rgb(colour));
                mask.put_pixel(x, y, Luma([255]));
            }
        }
        mask
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{scan_dataset, Split};

    #[test]
    fn written_tree_scans_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticDataset {
            train_good: 2,
            test_good: 3,
            test_bad: 2,
            ..Default::default()
        };
        assert_eq!(cfg.write(dir.path()).unwrap(), 14);
        let m = scan_dataset(dir.path(), None).unwrap();
        assert_eq!(m.categories, vec!["gadget", "widget"]);
        assert_eq!(
            m.select(Some("widget"), Split::Test)
                .iter()
                .filter(|s| s.label == 1)
                .count(),
            2
        );
    }
}
