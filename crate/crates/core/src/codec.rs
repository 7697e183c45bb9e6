//! Byte format for a quantized latent, and the image-level compress/decompress
//! pipeline built on it. The layout is documented in `FORMAT.md`.

use image::RgbImage;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::io::{image_to_tensor, tensor_to_image};
use crate::model::{Cae, Mode};
use crate::quantizer::{quantize_deterministic, QuantizedLatent};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CAEA";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum PayloadMode {
    /// Significance bitmap followed by zigzag varints of the nonzero values.
    Sparse = 0,
    /// Every value as a little-endian `i32`.
    Dense = 1,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressedImage {
    pub version: u8,
    pub source_width: u16,
    pub source_height: u16,
    pub latent_channels: u16,
    pub latent_h: u16,
    pub latent_w: u16,
    pub mode: PayloadMode,
    pub payload: Vec<u8>,
}

impl CompressedImage {
    pub fn numel(&self) -> usize {
        self.latent_channels as usize * self.latent_h as usize * self.latent_w as usize
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.push(self.version);
        for v in [
            self.source_width,
            self.source_height,
            self.latent_channels,
            self.latent_h,
            self.latent_w,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(self.mode as u8);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a compressed latent (bad magic)".into()));
        }
        if bytes.len() < 5 {
            return Err(Error::Corrupt("header truncated".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Version {
                found: bytes[4] as u32,
                expected: VERSION as u32,
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Corrupt(format!(
                "header truncated: {} of {HEADER_LEN} bytes",
                bytes.len()
            )));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let mode = match bytes[15] {
            0 => PayloadMode::Sparse,
            1 => PayloadMode::Dense,
            m => return Err(Error::Corrupt(format!("unknown payload mode {m}"))),
        };
        let c = CompressedImage {
            version: bytes[4],
            source_width: u16_at(5),
            source_height: u16_at(7),
            latent_channels: u16_at(9),
            latent_h: u16_at(11),
            latent_w: u16_at(13),
            mode,
            payload: bytes[HEADER_LEN..].to_vec(),
        };
        if c.numel() == 0 || c.source_width == 0 || c.source_height == 0 {
            return Err(Error::Corrupt("zero dimension in header".into()));
        }
        Ok(c)
    }
}

pub fn zigzag(v: i32) -> u32 {
    ((v << 1) ^ (v >> 31)) as u32
}

pub fn unzigzag(u: u32) -> i32 {
    ((u >> 1) as i32) ^ -((u & 1) as i32)
}

fn put_varint(out: &mut Vec<u8>, mut u: u32) {
    while u >= 0x80 {
        out.push((u as u8 & 0x7f) | 0x80);
        u >>= 7;
    }
    out.push(u as u8);
}

fn get_varint(buf: &[u8], pos: &mut usize) -> Result<u32> {
    let mut value = 0u64;
    for i in 0..5 {
        let b = *buf
            .get(*pos)
            .ok_or_else(|| Error::Corrupt(format!("payload truncated inside varint at byte {pos}")))?;
        *pos += 1;
        value |= ((b & 0x7f) as u64) << (7 * i);
        if b & 0x80 == 0 {
            return u32::try_from(value).map_err(|_| Error::Corrupt("varint exceeds 32 bits".into()));
        }
    }
    Err(Error::Corrupt("varint longer than 5 bytes".into()))
}

fn sparse_payload(values: &[i32]) -> Vec<u8> {
    let mut out = vec![0u8; values.len().div_ceil(8)];
    for (i, &v) in values.iter().enumerate() {
        if v != 0 {
            out[i / 8] |= 0x80 >> (i % 8);
        }
    }
    for &v in values.iter().filter(|&&v| v != 0) {
        put_varint(&mut out, zigzag(v));
    }
    out
}

fn dense_payload(values: &[i32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn dim_u16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Contract(format!("{what} {v} does not fit in u16")))
}

/// Serializes a single-image latent. The smaller of the two payload modes is
/// chosen; sparse wins ties.
pub fn encode_latent(q: &QuantizedLatent) -> Result<Vec<u8>> {
    let [n, c, h, w] = q.shape();
    if n != 1 {
        return Err(Error::dim(format!("the codec stores one image, got batch of {n}")));
    }
    if let Some(v) = q.values().iter().find(|&&v| v == i32::MIN) {
        return Err(Error::Contract(format!("latent value {v} out of range")));
    }
    let (sh, sw) = q.source();
    let sparse = sparse_payload(q.values());
    let (mode, payload) = if sparse.len() <= q.numel() * 4 {
        (PayloadMode::Sparse, sparse)
    } else {
        (PayloadMode::Dense, dense_payload(q.values()))
    };
    Ok(CompressedImage {
        version: VERSION,
        source_width: dim_u16(sw, "source width")?,
        source_height: dim_u16(sh, "source height")?,
        latent_channels: dim_u16(c, "latent channels")?,
        latent_h: dim_u16(h, "latent height")?,
        latent_w: dim_u16(w, "latent width")?,
        mode,
        payload,
    }
    .to_bytes())
}

pub fn decode_latent(bytes: &[u8]) -> Result<QuantizedLatent> {
    let c = CompressedImage::from_bytes(bytes)?;
    let numel = c.numel();
    let p = &c.payload;
    let values = match c.mode {
        PayloadMode::Dense => {
            if p.len() != numel * 4 {
                return Err(Error::Corrupt(format!(
                    "dense payload is {} bytes, expected {}",
                    p.len(),
                    numel * 4
                )));
            }
            p.chunks_exact(4)
                .map(|b| i32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect()
        }
        PayloadMode::Sparse => {
            let bitmap_len = numel.div_ceil(8);
            if p.len() < bitmap_len {
                return Err(Error::Corrupt(format!(
                    "payload of {} bytes cannot hold a {bitmap_len}-byte bitmap",
                    p.len()
                )));
            }
            let (bitmap, rest) = p.split_at(bitmap_len);
            if numel % 8 != 0 && bitmap[bitmap_len - 1] & (0xff >> (numel % 8)) != 0 {
                return Err(Error::Corrupt("padding bits set in bitmap".into()));
            }
            let mut pos = 0;
            let mut values = vec![0i32; numel];
            for (i, v) in values.iter_mut().enumerate() {
                if bitmap[i / 8] & (0x80 >> (i % 8)) != 0 {
                    let u = get_varint(rest, &mut pos)?;
                    if u == 0 {
                        return Err(Error::Corrupt(format!("element {i} is flagged but zero")));
                    }
                    *v = unzigzag(u);
                }
            }
            if pos != rest.len() {
                return Err(Error::Corrupt(format!(
                    "{} bytes after the last value",
                    rest.len() - pos
                )));
            }
            values
        }
    };
    Ok(QuantizedLatent::new(
        [1, c.latent_channels as usize, c.latent_h as usize, c.latent_w as usize],
        values,
    )?
    .with_source(c.source_height as usize, c.source_width as usize))
}

/// Edge-replicates `img` on the right and bottom up to multiples of `factor`.
fn pad_to_multiple(img: &RgbImage, factor: usize) -> RgbImage {
    let (w, h) = (img.width(), img.height());
    let f = factor as u32;
    let (pw, ph) = (w.div_ceil(f) * f, h.div_ceil(f) * f);
    if (pw, ph) == (w, h) {
        return img.clone();
    }
    RgbImage::from_fn(pw, ph, |x, y| *img.get_pixel(x.min(w - 1), y.min(h - 1)))
}

/// Deterministic latent of an image: eval-mode encoder, nearest-integer rounding.
pub fn latent_of(model: &Cae<f32>, img: &RgbImage) -> Result<QuantizedLatent> {
    let padded = pad_to_multiple(img, model.config().downsample_factor());
    let mut tape = Tape::new();
    let x = tape.constant(image_to_tensor(&padded));
    let z = model.encode_frozen(&mut tape, x, Mode::Eval)?;
    Ok(quantize_deterministic(tape.value(z))?.with_source(img.height() as usize, img.width() as usize))
}

pub fn compress_image(model: &Cae<f32>, img: &RgbImage) -> Result<Vec<u8>> {
    encode_latent(&latent_of(model, img)?)
}

/// Decodes a latent into a tensor of the padded size, unclamped.
pub fn reconstruct(model: &Cae<f32>, q: &QuantizedLatent) -> Result<Tensor<f32>> {
    let (sh, sw) = q.source();
    let f = model.config().downsample_factor();
    let [_, c, h, w] = q.shape();
    let expected = [1, model.config().latent_channels, sh.div_ceil(f), sw.div_ceil(f)];
    if q.shape() != expected {
        return Err(Error::dim(format!(
            "file latent {:?} (source {sh}x{sw}) does not fit model latent {expected:?}",
            [1, c, h, w]
        )));
    }
    let mut tape = Tape::new();
    let z = tape.constant(q.to_tensor());
    let x = model.decode_frozen(&mut tape, z, Mode::Eval)?;
    Ok(tape.value(x).clone())
}

pub fn decompress_latent(model: &Cae<f32>, q: &QuantizedLatent) -> Result<RgbImage> {
    let (sh, sw) = q.source();
    let full = tensor_to_image(&reconstruct(model, q)?)?;
    Ok(image::imageops::crop_imm(&full, 0, 0, sw as u32, sh as u32).to_image())
}

pub fn decompress_image(model: &Cae<f32>, bytes: &[u8]) -> Result<RgbImage> {
    decompress_latent(model, &decode_latent(bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CaeConfig;

    fn latent(c: usize, h: usize, w: usize, values: Vec<i32>) -> QuantizedLatent {
        QuantizedLatent::new([1, c, h, w], values).unwrap().with_source(h * 16, w * 16)
    }

    #[test]
    fn zigzag_pairs() {
        for (v, u) in [(0, 0), (-1, 1), (1, 2), (-2, 3), (i32::MAX, u32::MAX - 1)] {
            assert_eq!(zigzag(v), u);
            assert_eq!(unzigzag(u), v);
        }
    }

    #[test]
    fn all_zero_layout() {
        let q = latent(32, 4, 4, vec![0; 512]);
        let bytes = encode_latent(&q).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 64);
        assert_eq!(&bytes[..5], b"CAEA\x01");
        assert_eq!(bytes[15], 0);
        assert!(bytes[HEADER_LEN..].iter().all(|&b| b == 0));
        assert_eq!(decode_latent(&bytes).unwrap(), q);
    }

    #[test]
    fn single_one_layout() {
        let mut v = vec![0; 16];
        v[9] = 1;
        let bytes = encode_latent(&latent(1, 4, 4, v)).unwrap();
        assert_eq!(&bytes[HEADER_LEN..], &[0x00, 0x40, 0x02]);
    }

    #[test]
    fn dense_when_smaller() {
        let v: Vec<i32> = (0..16).map(|i| 1_000_000_000 + i).collect();
        let q = latent(1, 4, 4, v);
        let bytes = encode_latent(&q).unwrap();
        assert_eq!(bytes[15], 1);
        assert_eq!(bytes.len(), HEADER_LEN + 64);
        assert_eq!(decode_latent(&bytes).unwrap(), q);
    }

    #[test]
    fn header_errors() {
        let bytes = encode_latent(&latent(2, 2, 2, vec![1, 0, 0, -3, 0, 0, 0, 0])).unwrap();
        assert!(matches!(decode_latent(b"XXXX\x01"), Err(Error::Format(_))));
        let mut v = bytes.clone();
        v[4] = 2;
        assert!(matches!(decode_latent(&v), Err(Error::Version { found: 2, .. })));
        for cut in 5..bytes.len() {
            assert!(matches!(decode_latent(&bytes[..cut]), Err(Error::Corrupt(_))), "{cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_latent(&extra), Err(Error::Corrupt(_))));
    }

    #[test]
    fn batch_and_min_rejected() {
        let q = QuantizedLatent::new([2, 1, 1, 1], vec![0, 0]).unwrap();
        assert!(encode_latent(&q).is_err());
        assert!(matches!(
            encode_latent(&latent(1, 1, 1, vec![i32::MIN])),
            Err(Error::Contract(_))
        ));
    }

    fn small_model(latent_channels: usize) -> Cae<f32> {
        Cae::new(CaeConfig {
            base_channels: 4,
            latent_channels,
            n_residual_blocks: 1,
            n_down_pre: 2,
            n_down_post: 1,
            seed: 1,
        })
        .unwrap()
    }

    #[test]
    fn image_round_trip_keeps_dimensions() {
        let model = small_model(3);
        let img = RgbImage::from_fn(21, 17, |x, y| image::Rgb([(x * 12) as u8, (y * 15) as u8, 128]));
        let bytes = compress_image(&model, &img).unwrap();
        assert_eq!(bytes, compress_image(&model, &img).unwrap());
        let out = decompress_image(&model, &bytes).unwrap();
        assert_eq!(out.dimensions(), (21, 17));
        let q = decode_latent(&bytes).unwrap();
        assert_eq!(q.shape(), [1, 3, 3, 3]);
        assert_eq!(q.source(), (17, 21));

        let err = decompress_image(&small_model(5), &bytes).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Dimension(_)));
        assert!(msg.contains("[1, 3, 3, 3]") && msg.contains("[1, 5, 3, 3]"), "{msg}");
    }
}
