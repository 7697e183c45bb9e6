//! Keep-ratio sweeps: one training per ratio, evaluated on the training set.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::admm::RefreshStats;
use crate::checkpoint::save_checkpoint;
use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::model::Cae;
use crate::plot::{scatter_svg, Panel, Point};

use super::config::Profile;
use super::dataset::DatasetHandle;
use super::evaluate::{aggregate, evaluate, Aggregate, EvalRow};
use super::train::{train, write_epoch_log};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub keep_ratio: f64,
    pub rows: Vec<EvalRow>,
    pub aggregate: Aggregate,
    pub checkpoint: PathBuf,
    pub refreshes: Vec<RefreshStats>,
}

pub const SWEEP_HEADER: &str =
    "keep_ratio,bpp,bpp_ci95,mse,psnr_db,ssim,ssim_ci95,ms_ssim,ms_ssim_ci95,zero_ratio";

/// File stem used for one ratio's outputs, e.g. `keep_0.1`.
pub fn ratio_stem(keep_ratio: f64) -> String {
    format!("keep_{keep_ratio}")
}

fn run_one(data: &DatasetHandle, profile: &Profile, keep_ratio: f64, out_dir: &Path) -> Result<SweepPoint> {
    let mut cfg = profile.train.clone();
    cfg.keep_ratio = keep_ratio;
    cfg.admm = true;
    let mut model = Cae::<f32>::new(profile.model)?;
    let outcome = train(&mut model, data, &cfg, |_| {})?;
    let stem = ratio_stem(keep_ratio);
    let checkpoint = out_dir.join(format!("{stem}.ckpt"));
    save_checkpoint(
        &checkpoint,
        &model,
        Some(&outcome.optimizer),
        outcome.admm_summary(keep_ratio).as_ref(),
    )?;
    let mut log = Vec::new();
    write_epoch_log(&mut log, &outcome.log)?;
    atomic_write(&out_dir.join(format!("{stem}_epochs.csv")), &log)?;
    let rows = evaluate(&model, data)?;
    Ok(SweepPoint {
        keep_ratio,
        aggregate: aggregate(&rows),
        rows,
        checkpoint,
        refreshes: outcome.refreshes,
    })
}

/// Trains one model per keep ratio with otherwise identical settings (same
/// seed, data and schedule), on up to `threads` workers. Writes
/// `keep_<r>.ckpt`, `keep_<r>_epochs.csv`, `rd_sweep.csv` and `rd_sweep.svg`
/// into `out_dir`. Results are in the order of `keep_ratios` and do not depend
/// on `threads`.
pub fn rd_sweep(
    data: &DatasetHandle,
    profile: &Profile,
    keep_ratios: &[f64],
    out_dir: &Path,
    threads: usize,
) -> Result<Vec<SweepPoint>> {
    if keep_ratios.len() < 2 {
        return Err(Error::Config(format!(
            "a sweep needs at least 2 keep ratios, got {}",
            keep_ratios.len()
        )));
    }
    for &r in keep_ratios {
        let mut cfg = profile.train.clone();
        cfg.keep_ratio = r;
        cfg.validate(&profile.model)?;
    }
    std::fs::create_dir_all(out_dir)?;

    let results: Vec<Mutex<Option<Result<SweepPoint>>>> = keep_ratios.iter().map(|_| Mutex::new(None)).collect();
    let next = Mutex::new(0usize);
    let workers = threads.clamp(1, keep_ratios.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().unwrap();
                    let i = *n;
                    *n += 1;
                    i
                };
                if i >= keep_ratios.len() {
                    break;
                }
                let r = run_one(data, profile, keep_ratios[i], out_dir);
                *results[i].lock().unwrap() = Some(r);
            });
        }
    });
    let mut points = Vec::with_capacity(keep_ratios.len());
    for (slot, &r) in results.into_iter().zip(keep_ratios) {
        match slot.into_inner().unwrap() {
            Some(Ok(p)) => points.push(p),
            Some(Err(e)) => return Err(wrap(r, e)),
            None => unreachable!("every ratio is claimed by a worker"),
        }
    }

    let mut csv = Vec::new();
    write_sweep_csv(&mut csv, &points)?;
    atomic_write(&out_dir.join("rd_sweep.csv"), &csv)?;
    atomic_write(&out_dir.join("rd_sweep.svg"), sweep_svg(&points).as_bytes())?;
    Ok(points)
}

fn wrap(ratio: f64, e: Error) -> Error {
    match e {
        Error::Divergence { epoch, batch, lr, detail } => Error::Divergence {
            epoch,
            batch,
            lr,
            detail: format!("keep ratio {ratio}: {detail}"),
        },
        other => other,
    }
}

pub fn write_sweep_csv<W: Write>(mut out: W, points: &[SweepPoint]) -> std::io::Result<()> {
    writeln!(out, "{SWEEP_HEADER}")?;
    for p in points {
        let a = &p.aggregate;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            p.keep_ratio, a.bpp.0, a.bpp.1, a.mse.0, a.psnr_db.0, a.ssim.0, a.ssim.1, a.ms_ssim.0, a.ms_ssim.1, a.zero_ratio.0
        )?;
    }
    Ok(())
}

/// Two panels, (bpp, SSIM) and (bpp, MS-SSIM), one point per ratio in each.
pub fn sweep_svg(points: &[SweepPoint]) -> String {
    let panel = |title: &str, y: fn(&Aggregate) -> f64| Panel {
        title: title.into(),
        x_label: "bits per pixel".into(),
        y_label: title.into(),
        points: points
            .iter()
            .map(|p| Point {
                x: p.aggregate.bpp.0,
                y: y(&p.aggregate),
                label: format!("keep {}", p.keep_ratio),
            })
            .collect(),
    };
    scatter_svg(&[panel("SSIM", |a| a.ssim.0), panel("MS-SSIM", |a| a.ms_ssim.0)])
}
