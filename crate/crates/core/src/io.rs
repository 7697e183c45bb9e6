//! File output and RGB8 image I/O (PNG and binary PPM).

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Writes `bytes` to a sibling temporary file and renames it over `path`, so a
/// failure never leaves a partial file behind.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::Precondition(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

fn format_for(path: &Path) -> Result<ImageFormat> {
    let ext = path
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "png" => Ok(ImageFormat::Png),
        "ppm" | "pnm" => Ok(ImageFormat::Pnm),
        _ => Err(Error::Image {
            path: path.to_owned(),
            message: "only .png and .ppm are supported".into(),
        }),
    }
}

pub fn is_supported_image(path: &Path) -> bool {
    format_for(path).is_ok()
}

pub fn read_image(path: &Path) -> Result<RgbImage> {
    let format = format_for(path)?;
    let bytes = fs::read(path).map_err(|e| Error::Image {
        path: path.to_owned(),
        message: e.to_string(),
    })?;
    let img = image::load_from_memory_with_format(&bytes, format).map_err(|e| Error::Image {
        path: path.to_owned(),
        message: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}

pub fn write_image(path: &Path, img: &RgbImage) -> Result<()> {
    let format = format_for(path)?;
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, format).map_err(|e| Error::Image {
        path: path.to_owned(),
        message: e.to_string(),
    })?;
    atomic_write(path, buf.get_ref())
}

/// `[1, 3, h, w]` tensor with values `pixel / 255`.
pub fn image_to_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[1, 3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        T::of(raw[p * 3 + c] as f64 / 255.0)
    })
}

/// Inverse of [`image_to_tensor`] for batch item 0, clamping to `[0, 1]` and
/// rounding to the nearest 8-bit level.
pub fn tensor_to_image<T: Scalar>(t: &Tensor<T>) -> Result<RgbImage> {
    let (_, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::dim(format!("expected 3 channels, got {c}")));
    }
    let d = t.data();
    let mut raw = vec![0u8; h * w * 3];
    for p in 0..h * w {
        for ch in 0..3 {
            let v = d[ch * h * w + p].as_f64();
            let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            raw[p * 3 + ch] = (v * 255.0).round() as u8;
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized to dims"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_and_ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_fn(5, 3, |x, y| image::Rgb([x as u8 * 40, y as u8 * 70, 9]));
        for name in ["a.png", "a.ppm"] {
            let p = dir.path().join(name);
            write_image(&p, &img).unwrap();
            assert_eq!(read_image(&p).unwrap(), img);
        }
        let t = image_to_tensor::<f32>(&img);
        assert_eq!(t.shape(), &[1, 3, 3, 5]);
        assert_eq!(tensor_to_image(&t).unwrap(), img);
    }

    #[test]
    fn unsupported_and_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("x.png");
        std::fs::write(&bad, b"not a png").unwrap();
        match read_image(&bad) {
            Err(Error::Image { path, .. }) => assert_eq!(path, bad),
            other => panic!("{other:?}"),
        }
        assert!(read_image(&dir.path().join("x.jpg")).is_err());
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.bin");
        atomic_write(&p, b"abc").unwrap();
        atomic_write(&p, b"de").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"de");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
        assert!(atomic_write(&dir.path().join("missing/out.bin"), b"x").is_err());
    }
}
