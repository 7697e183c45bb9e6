//! Image directories, augmentation and a synthetic image generator.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{is_supported_image, read_image, write_image};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    /// File stem.
    pub id: String,
    pub path: PathBuf,
    pub width: usize,
    pub height: usize,
}

/// Decoded images in filename order; the position is the sample index.
#[derive(Debug, Clone)]
pub struct DatasetHandle {
    pub records: Vec<ImageRecord>,
    pub images: Vec<RgbImage>,
}

impl DatasetHandle {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn min_side(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.width.min(r.height))
            .min()
            .unwrap_or(0)
    }

    pub fn from_images(ids: Vec<String>, images: Vec<RgbImage>) -> Self {
        let records = ids
            .into_iter()
            .zip(&images)
            .map(|(id, img)| ImageRecord {
                path: PathBuf::from(&id),
                id,
                width: img.width() as usize,
                height: img.height() as usize,
            })
            .collect();
        DatasetHandle { records, images }
    }
}

/// Loads every `.png` / `.ppm` in `dir` (not recursive), sorted by filename.
/// Other files are ignored.
pub fn load_dataset(dir: &Path) -> Result<DatasetHandle> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_supported_image(p))
        .collect();
    paths.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    if paths.is_empty() {
        return Err(Error::Dataset(format!("no PNG or PPM images in {}", dir.display())));
    }
    let mut records = Vec::new();
    let mut images = Vec::new();
    let mut bad = Vec::new();
    for path in paths {
        match read_image(&path) {
            Ok(img) => {
                records.push(ImageRecord {
                    id: path
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_default(),
                    width: img.width() as usize,
                    height: img.height() as usize,
                    path,
                });
                images.push(img);
            }
            Err(e) => bad.push(format!("{}: {e}", path.display())),
        }
    }
    if !bad.is_empty() {
        return Err(Error::Dataset(format!("undecodable images:\n  {}", bad.join("\n  "))));
    }
    Ok(DatasetHandle { records, images })
}

/// Random `crop × crop` window with independent horizontal and vertical flips,
/// as a `[3, crop, crop]` tensor of `pixel / 255`.
pub fn augment<T: Scalar>(img: &RgbImage, crop: usize, rng: &mut impl Rng) -> Result<Tensor<T>> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if crop == 0 || w < crop || h < crop {
        return Err(Error::Precondition(format!(
            "image {w}x{h} is smaller than the {crop}x{crop} crop"
        )));
    }
    let x0 = rng.gen_range(0..=w - crop);
    let y0 = rng.gen_range(0..=h - crop);
    let flip_h = rng.gen_bool(0.5);
    let flip_v = rng.gen_bool(0.5);
    let plane = crop * crop;
    Ok(Tensor::from_fn(&[3, crop, crop], |i| {
        let (c, y, x) = (i / plane, (i % plane) / crop, i % crop);
        let sx = x0 + if flip_h { crop - 1 - x } else { x };
        let sy = y0 + if flip_v { crop - 1 - y } else { y };
        T::of(img.get_pixel(sx as u32, sy as u32).0[c] as f64 / 255.0)
    }))
}

/// The augmentation stream for one sample in one view cycle.
pub fn view_rng(seed: u64, cycle: u64, sample: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&cycle.to_le_bytes());
    key[16..24].copy_from_slice(&(sample as u64).to_le_bytes());
    key[24..].copy_from_slice(b"augment\0");
    ChaCha8Rng::from_seed(key)
}

/// A deterministic test image: a two-colour gradient with a few flat discs and
/// rectangles, and faint noise.
pub fn synthetic_image(seed: u64, index: usize, width: u32, height: u32) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let color = |rng: &mut ChaCha8Rng| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
    let (c0, c1) = (color(&mut rng), color(&mut rng));
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let (fw, fh) = (width as f64, height as f64);
    let shapes: Vec<(bool, f64, f64, f64, f64, [f64; 3])> = (0..rng.gen_range(1..=3))
        .map(|_| {
            (
                rng.gen_bool(0.5),
                rng.gen_range(0.0..fw),
                rng.gen_range(0.0..fh),
                rng.gen_range(0.1..0.35) * fw,
                rng.gen_range(0.1..0.35) * fh,
                color(&mut rng),
            )
        })
        .collect();
    let mut img = RgbImage::new(width, height);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let (fx, fy) = (x as f64 / fw - 0.5, y as f64 / fh - 0.5);
        let t = (fx * dx + fy * dy + 0.5).clamp(0.0, 1.0);
        let mut c = [0.0; 3];
        for k in 0..3 {
            c[k] = c0[k] * (1.0 - t) + c1[k] * t;
        }
        for &(disc, cx, cy, rx, ry, sc) in &shapes {
            let (ux, uy) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
            let inside = if disc {
                ux * ux + uy * uy <= 1.0
            } else {
                ux.abs() <= 1.0 && uy.abs() <= 1.0
            };
            if inside {
                c = sc;
            }
        }
        let mut out = [0u8; 3];
        for k in 0..3 {
            let v = c[k] + rng.gen_range(-0.02..0.02);
            out[k] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        *px = Rgb(out);
    }
    img
}

/// In-memory synthetic dataset with ids `synth_0000`, `synth_0001`, ...
pub fn synthetic_dataset(n: usize, size: u32, seed: u64) -> DatasetHandle {
    let ids = (0..n).map(|i| format!("synth_{i:04}")).collect();
    let images = (0..n).map(|i| synthetic_image(seed, i, size, size)).collect();
    DatasetHandle::from_images(ids, images)
}

/// Writes `n` synthetic PNGs to `dir`.
pub fn write_synthetic_dataset(dir: &Path, n: usize, size: u32, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for i in 0..n {
        write_image(&dir.join(format!("synth_{i:04}.png")), &synthetic_image(seed, i, size, size))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loads_sorted_and_names_offenders() {
        let dir = tempfile::tempdir().unwrap();
        for (i, name) in ["b.ppm", "a.png", "c.png"].iter().enumerate() {
            write_image(&dir.path().join(name), &synthetic_image(1, i, 8, 6)).unwrap();
        }
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let d = load_dataset(dir.path()).unwrap();
        let ids: Vec<_> = d.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!((d.records[0].width, d.records[0].height), (8, 6));
        let again = load_dataset(dir.path()).unwrap();
        assert_eq!(again.records, d.records);

        std::fs::write(dir.path().join("broken.png"), b"\x89PNG garbage").unwrap();
        let msg = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(msg.contains("broken.png"), "{msg}");
        assert!(!msg.contains("a.png"), "{msg}");
    }

    #[test]
    fn empty_directory() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Dataset(_))));
    }

    #[test]
    fn augment_contract() {
        let img = synthetic_image(2, 0, 12, 12);
        let a: Tensor<f32> = augment(&img, 12, &mut view_rng(1, 0, 3)).unwrap();
        let b: Tensor<f32> = augment(&img, 12, &mut view_rng(1, 0, 3)).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // Full-size crop: only flips change the content, so the sorted values agree.
        let sorted = |t: &Tensor<f32>| {
            let mut v = t.data().to_vec();
            v.sort_by(|x, y| x.partial_cmp(y).unwrap());
            v
        };
        let c: Tensor<f32> = augment(&img, 12, &mut view_rng(1, 5, 3)).unwrap();
        assert_eq!(sorted(&a), sorted(&c));
        assert!(augment::<f32>(&img, 13, &mut view_rng(0, 0, 0)).is_err());
        let small: Tensor<f32> = augment(&img, 4, &mut view_rng(0, 0, 0)).unwrap();
        assert_eq!(small.shape(), &[3, 4, 4]);
    }

    #[test]
    fn synthetic_is_deterministic() {
        assert_eq!(synthetic_image(3, 7, 16, 16), synthetic_image(3, 7, 16, 16));
        assert_ne!(synthetic_image(3, 7, 16, 16), synthetic_image(3, 8, 16, 16));
    }
}
