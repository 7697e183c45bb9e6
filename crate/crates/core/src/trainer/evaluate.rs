//! Per-image rate and distortion through the full compress / decompress path.

use std::io::Write;

use crate::codec::{decode_latent, decompress_latent, encode_latent, latent_of};
use crate::error::{Error, Result};
use crate::io::image_to_tensor;
use crate::metrics::{self, MsSsimParams, SsimParams};
use crate::model::Cae;
use crate::tensor::Tensor;

use super::dataset::DatasetHandle;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub image_id: String,
    pub bytes: usize,
    pub bpp: f64,
    pub mse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
    pub zero_ratio: f64,
}

/// Mean and 95% normal-approximation half-width of each column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub bpp: (f64, f64),
    pub mse: (f64, f64),
    pub psnr_db: (f64, f64),
    pub ssim: (f64, f64),
    pub ms_ssim: (f64, f64),
    pub zero_ratio: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub baseline: Option<Vec<EvalRow>>,
}

pub const METRICS_HEADER: &str = "image_id,bpp,mse,psnr_db,ssim,ms_ssim,zero_ratio";

/// `(mean, 1.96 · s / √n)`, with the sample standard deviation `s`; the
/// half-width is 0 for a single value.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 || !mean.is_finite() {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

pub fn evaluate_image(model: &Cae<f32>, id: &str, img: &image::RgbImage) -> Result<EvalRow> {
    let q = latent_of(model, img)?;
    let bytes = encode_latent(&q)?;
    let decoded = decode_latent(&bytes)?;
    if decoded != q {
        return Err(Error::Corrupt(format!("{id}: latent did not survive the codec")));
    }
    let out = decompress_latent(model, &decoded)?;
    let x: Tensor<f64> = image_to_tensor(img);
    let y: Tensor<f64> = image_to_tensor(&out);
    let mse = metrics::mse(&x, &y)?;
    let ms = MsSsimParams::default();
    Ok(EvalRow {
        image_id: id.to_owned(),
        bytes: bytes.len(),
        bpp: metrics::bpp(bytes.len(), (img.width() * img.height()) as usize),
        mse,
        psnr_db: metrics::psnr_from_mse(mse, 1.0),
        ssim: metrics::ssim(&x, &y, &SsimParams::default())?,
        ms_ssim: metrics::ms_ssim(&x, &y, &ms)?,
        zero_ratio: metrics::zero_ratio(&q),
    })
}

pub fn evaluate(model: &Cae<f32>, data: &DatasetHandle) -> Result<Vec<EvalRow>> {
    data.records
        .iter()
        .zip(&data.images)
        .map(|(r, img)| evaluate_image(model, &r.id, img))
        .collect()
}

pub fn evaluate_with_baseline(model: &Cae<f32>, baseline: Option<&Cae<f32>>, data: &DatasetHandle) -> Result<EvalReport> {
    Ok(EvalReport {
        rows: evaluate(model, data)?,
        baseline: baseline.map(|b| evaluate(b, data)).transpose()?,
    })
}

pub fn aggregate(rows: &[EvalRow]) -> Aggregate {
    let col = |f: fn(&EvalRow) -> f64| mean_ci95(&rows.iter().map(f).collect::<Vec<_>>());
    Aggregate {
        bpp: col(|r| r.bpp),
        mse: col(|r| r.mse),
        psnr_db: col(|r| r.psnr_db),
        ssim: col(|r| r.ssim),
        ms_ssim: col(|r| r.ms_ssim),
        zero_ratio: col(|r| r.zero_ratio),
    }
}

fn num(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v}")
    }
}

/// Per-image rows, then a `mean` and a `ci95` row. With a baseline, two
/// columns hold this model's value minus the baseline's.
pub fn write_metrics_csv<W: Write>(mut out: W, report: &EvalReport) -> std::io::Result<()> {
    let paired = report.baseline.as_ref();
    write!(out, "{METRICS_HEADER}")?;
    if paired.is_some() {
        write!(out, ",delta_bpp,delta_zero_ratio")?;
    }
    writeln!(out)?;
    let line = |r: [f64; 6]| r.iter().map(|&v| num(v)).collect::<Vec<_>>().join(",");
    let mut deltas = (Vec::new(), Vec::new());
    for (i, r) in report.rows.iter().enumerate() {
        write!(
            out,
            "{},{}",
            r.image_id,
            line([r.bpp, r.mse, r.psnr_db, r.ssim, r.ms_ssim, r.zero_ratio])
        )?;
        if let Some(b) = paired {
            let d = (r.bpp - b[i].bpp, r.zero_ratio - b[i].zero_ratio);
            write!(out, ",{},{}", num(d.0), num(d.1))?;
            deltas.0.push(d.0);
            deltas.1.push(d.1);
        }
        writeln!(out)?;
    }
    let a = aggregate(&report.rows);
    let cols = [a.bpp, a.mse, a.psnr_db, a.ssim, a.ms_ssim, a.zero_ratio];
    let (d_bpp, d_zero) = (mean_ci95(&deltas.0), mean_ci95(&deltas.1));
    for (label, pick) in [("mean", 0usize), ("ci95", 1)] {
        let vals = cols.map(|c| if pick == 0 { c.0 } else { c.1 });
        write!(out, "{label},{}", line(vals))?;
        if paired.is_some() {
            let d = if pick == 0 { (d_bpp.0, d_zero.0) } else { (d_bpp.1, d_zero.1) };
            write!(out, ",{},{}", num(d.0), num(d.1))?;
        }
        writeln!(out)?;
    }
    Ok(())
}
