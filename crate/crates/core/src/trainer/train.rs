//! The training loop: distortion plus ADMM penalty minimized with Adam, and
//! periodic `Z` / `U` refreshes.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::admm::{admm_penalty, AdmmStore, AdmmTraceRow, RefreshStats, SparsityBudget};
use crate::autodiff::{AdamConfig, AdamState, Tape};
use crate::checkpoint::AdmmSummary;
use crate::error::{Error, Result};
use crate::metrics::{self, distortion_loss, mse_on_tape, LossWeights, MsSsimParams};
use crate::model::{Cae, Mode};
use crate::quantizer::{quantize_deterministic, quantize_on_tape, quantize_stochastic, RngStream};
use crate::tensor::Tensor;

use super::config::TrainConfig;
use super::dataset::{augment, view_rng, DatasetHandle};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_penalty: f64,
    /// Mean `card(Z)` over samples as of this epoch's end.
    pub mean_card_z: f64,
    /// Mean `||qz - Z||` over the training pass.
    pub mean_primal_residual: f64,
    pub lr: f64,
    pub admm_refresh: bool,
    /// Reconstruction MSE of the training pass (not part of the CSV).
    pub mean_mse: f64,
}

pub const EPOCH_LOG_HEADER: &str =
    "epoch,mean_loss,mean_penalty,mean_card_Z,mean_primal_residual,lr,admm_refresh_flag";

pub fn write_epoch_log<W: Write>(mut out: W, rows: &[EpochRow]) -> std::io::Result<()> {
    writeln!(out, "{EPOCH_LOG_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch,
            r.mean_loss,
            r.mean_penalty,
            r.mean_card_z,
            r.mean_primal_residual,
            r.lr,
            r.admm_refresh as u8
        )?;
    }
    Ok(())
}

/// Multiplies the learning rate by `decay` once the loss has gone
/// `patience` epochs without beating the best value so far.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub patience: usize,
    pub decay: f64,
    best: f64,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(patience: usize, decay: f64) -> Self {
        PlateauScheduler {
            patience,
            decay,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Forgets the best loss seen so far.
    pub fn reset(&mut self) {
        self.best = f64::INFINITY;
        self.stale = 0;
    }

    /// Feeds one epoch loss and returns the factor to apply to the learning rate.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.stale = 0;
            return 1.0;
        }
        self.stale += 1;
        if self.patience > 0 && self.stale >= self.patience {
            self.stale = 0;
            return self.decay;
        }
        1.0
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochRow>,
    pub trace: Vec<AdmmTraceRow>,
    pub refreshes: Vec<RefreshStats>,
    pub store: Option<AdmmStore>,
    pub optimizer: AdamState<f32>,
}

impl TrainOutcome {
    pub fn admm_summary(&self, keep_ratio: f64) -> Option<AdmmSummary> {
        let store = self.store.as_ref()?;
        let last = self.refreshes.last().copied().unwrap_or_default();
        Some(AdmmSummary {
            refreshes: store.k as u64,
            rho: store.rho,
            keep_ratio,
            ell: store.ell as u32,
            mean_card_z: last.mean_card_z,
            mean_primal_residual: last.mean_primal_residual,
        })
    }
}

fn batch_views(data: &DatasetHandle, samples: &[usize], cfg: &TrainConfig, cycle: u64) -> Result<Tensor<f32>> {
    let c = cfg.crop_size;
    let views = samples
        .iter()
        .map(|&s| {
            augment::<f32>(&data.images[s], c, &mut view_rng(cfg.seed, cycle, s))?.reshape(&[1, 3, c, c])
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack_batch(&views)
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(epoch as u64).to_le_bytes());
    key[16..24].copy_from_slice(b"shuffle\0");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::from_seed(key));
    order
}

/// Deterministic quantized latents of every sample's current view, encoded with
/// running statistics.
pub fn dataset_latents(model: &Cae<f32>, data: &DatasetHandle, cfg: &TrainConfig, cycle: u64) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(cfg.batch_size) {
        let x = batch_views(data, chunk, cfg, cycle)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let z = model.encode_frozen(&mut tape, xv, Mode::Eval)?;
        let q = quantize_deterministic(tape.value(z))?;
        for i in 0..chunk.len() {
            out.push(q.item(i).iter().map(|&v| v as f64).collect());
        }
    }
    Ok(out)
}

fn finite_or_abort(v: f64, what: &str, epoch: usize, batch: usize, lr: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            epoch,
            batch,
            lr,
            detail: format!("{what} is {v}"),
        })
    }
}

/// Trains `model` in place. `progress` sees each epoch row as it is produced.
pub fn train(
    model: &mut Cae<f32>,
    data: &DatasetHandle,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochRow),
) -> Result<TrainOutcome> {
    cfg.validate(model.config())?;
    if data.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    if data.min_side() < cfg.crop_size {
        return Err(Error::Precondition(format!(
            "smallest image side {} is below the crop size {}",
            data.min_side(),
            cfg.crop_size
        )));
    }
    let latent_shape = model.latent_shape(1, cfg.crop_size, cfg.crop_size)?;
    let per_sample: usize = latent_shape.iter().product();
    let mut store = if cfg.admm {
        Some(AdmmStore::new(data.len(), per_sample, SparsityBudget::new(cfg.keep_ratio)?, cfg.rho)?)
    } else {
        None
    };
    let mut adam = AdamState::new(
        model.params(),
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut plateau = PlateauScheduler::new(cfg.plateau_patience_epochs, cfg.lr_decay);
    let ms = MsSsimParams::default();
    let mut log = Vec::new();
    let mut trace = Vec::new();
    let mut refreshes = Vec::new();

    for epoch in 0..cfg.total_epochs {
        let warmup = cfg.is_warmup(epoch);
        if epoch > 0 && cfg.is_warmup(epoch - 1) && !warmup {
            // The objective changes here; losses from the warmup are not comparable.
            plateau.reset();
        }
        let cycle = cfg.view_cycle(epoch);
        let (weights, scale) = if warmup {
            (LossWeights::MSE_ONLY, cfg.warmup_mse_scale)
        } else {
            (cfg.loss, 1.0)
        };
        let order = epoch_order(cfg.seed, epoch, data.len());
        let (mut loss_sum, mut pen_sum, mut mse_sum, mut res_sum) = (0.0, 0.0, 0.0, 0.0);

        for (b, samples) in order.chunks(cfg.batch_size).enumerate() {
            let n = samples.len();
            let x = batch_views(data, samples, cfg, cycle)?;
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let z = model.encode(&mut tape, xv, Mode::Train)?;
            let q = quantize_stochastic(tape.value(z), &mut RngStream::keyed(cfg.seed, epoch as u64, b as u64))
                .map_err(|e| Error::Divergence {
                    epoch,
                    batch: b,
                    lr: adam.lr(),
                    detail: format!("latent: {e}"),
                })?;
            let qv = quantize_on_tape(&mut tape, z, &q)?;
            let xh = model.decode(&mut tape, qv, Mode::Train)?;

            let mut loss = if warmup {
                let m = mse_on_tape(&mut tape, xv, xh)?;
                tape.scale(m, scale as f32)
            } else {
                distortion_loss(&mut tape, xv, xh, &weights, &ms)?
            };
            let mut penalty = 0.0;
            if let Some(store) = store.as_ref() {
                for (i, &s) in samples.iter().enumerate() {
                    res_sum += q
                        .item(i)
                        .iter()
                        .zip(store.z(s))
                        .map(|(&a, &z)| (a as f64 - z).powi(2))
                        .sum::<f64>()
                        .sqrt();
                }
                if !warmup {
                    let (zb, ub) = store.batch::<f32>(samples, q.shape())?;
                    let p = admm_penalty(&mut tape, qv, &zb, &ub, store.rho)?;
                    let p = tape.scale(p, 1.0 / n as f32);
                    penalty = tape.scalar(p) as f64;
                    loss = tape.add(loss, p)?;
                }
            }
            let value = tape.scalar(loss) as f64;
            finite_or_abort(value, "loss", epoch, b, adam.lr())?;
            mse_sum += metrics::mse(tape.value(xv), tape.value(xh))? * n as f64;
            loss_sum += value * n as f64;
            pen_sum += penalty * n as f64;

            tape.backward(loss)?;
            model.params_mut().zero_grad();
            tape.accumulate_param_grads(model.params_mut())?;
            adam.step(model.params_mut())?;
            if let Some(bad) = model.params().iter().find(|p| p.value.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    lr: adam.lr(),
                    detail: format!("parameter {} became non-finite", bad.name),
                });
            }
        }
        model.params_mut().zero_grad();

        let count = data.len() as f64;
        let mean_loss = loss_sum / count;
        let mut refreshed = false;
        if let Some(store) = store.as_mut() {
            if cfg.refresh_after(epoch) {
                let latents = dataset_latents(model, data, cfg, cfg.view_cycle(epoch + 1)).map_err(|e| match e {
                    Error::Contract(detail) => Error::Divergence {
                        epoch,
                        batch: data.len().div_ceil(cfg.batch_size),
                        lr: adam.lr(),
                        detail: format!("ADMM refresh: {detail}"),
                    },
                    other => other,
                })?;
                let stats = store.refresh_all(&latents)?;
                trace.push(AdmmTraceRow {
                    k: store.k,
                    mean_primal_residual: stats.mean_primal_residual,
                    mean_card_z: stats.mean_card_z,
                    mean_penalty: stats.mean_penalty,
                });
                refreshes.push(stats);
                refreshed = true;
            }
        }
        let mean_card_z = store.as_ref().map_or(0.0, |s| {
            (0..s.samples()).map(|i| crate::admm::card(s.z(i)) as f64).sum::<f64>() / count
        });
        let row = EpochRow {
            epoch,
            mean_loss,
            mean_penalty: pen_sum / count,
            mean_card_z,
            mean_primal_residual: res_sum / count,
            lr: adam.lr(),
            admm_refresh: refreshed,
            mean_mse: mse_sum / count,
        };
        progress(&row);
        log.push(row);
        let factor = plateau.observe(mean_loss);
        if factor != 1.0 {
            adam.set_lr(adam.lr() * factor);
        }
    }
    Ok(TrainOutcome {
        log,
        trace,
        refreshes,
        store,
        optimizer: adam,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CaeConfig;
    use crate::trainer::dataset::synthetic_dataset;

    #[test]
    fn plateau_halves_on_stale_best() {
        let mut p = PlateauScheduler::new(2, 0.5);
        let factors: Vec<f64> = [3.0, 2.0, 2.0, 2.5, 1.0, 1.0, 1.0, 1.0, 1.0]
            .iter()
            .map(|&l| p.observe(l))
            .collect();
        assert_eq!(factors, [1.0, 1.0, 1.0, 0.5, 1.0, 1.0, 0.5, 1.0, 0.5]);
    }

    fn tiny() -> (CaeConfig, TrainConfig) {
        (
            CaeConfig {
                base_channels: 4,
                latent_channels: 4,
                n_residual_blocks: 1,
                n_down_pre: 2,
                n_down_post: 1,
                seed: 5,
            },
            TrainConfig {
                batch_size: 2,
                crop_size: 16,
                total_epochs: 3,
                warmup_epochs: 1,
                admm_interval_epochs: 1,
                keep_ratio: 0.25,
                seed: 5,
                ..TrainConfig::default()
            },
        )
    }

    #[test]
    fn short_run_is_reproducible_and_feasible() {
        let (mc, tc) = tiny();
        let data = synthetic_dataset(4, 20, 1);
        let run = || {
            let mut m = Cae::<f32>::new(mc).unwrap();
            let out = train(&mut m, &data, &tc, |_| {}).unwrap();
            (m, out)
        };
        let (a, oa) = run();
        let (b, _) = run();
        assert_eq!(a.params(), b.params());
        assert_eq!(a.buffers(), b.buffers());
        assert_eq!(oa.log.len(), 3);
        assert_eq!(oa.refreshes.len(), 3);
        let store = oa.store.as_ref().unwrap();
        assert_eq!(store.ell, 4);
        for r in &oa.refreshes {
            assert_eq!(r.feasible, r.samples);
            assert!(r.max_card_z <= store.ell);
        }
        assert_eq!(oa.log[0].mean_penalty, 0.0);
        assert!(oa.log.iter().all(|r| r.admm_refresh));
        let mut csv = Vec::new();
        write_epoch_log(&mut csv, &oa.log).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with(EPOCH_LOG_HEADER));
    }

    #[test]
    fn baseline_has_no_penalty() {
        let (mc, mut tc) = tiny();
        tc.admm = false;
        let data = synthetic_dataset(3, 16, 2);
        let mut m = Cae::<f32>::new(mc).unwrap();
        let out = train(&mut m, &data, &tc, |_| {}).unwrap();
        assert!(out.store.is_none());
        assert!(out.log.iter().all(|r| r.mean_penalty == 0.0 && !r.admm_refresh));
    }

    #[test]
    fn undersized_images_rejected() {
        let (mc, tc) = tiny();
        let data = synthetic_dataset(2, 8, 0);
        let mut m = Cae::<f32>::new(mc).unwrap();
        assert!(matches!(train(&mut m, &data, &tc, |_| {}), Err(Error::Precondition(_))));
    }

    #[test]
    fn divergence_reports_position() {
        let (mc, mut tc) = tiny();
        tc.lr = 1e30;
        let data = synthetic_dataset(2, 16, 0);
        let mut m = Cae::<f32>::new(mc).unwrap();
        match train(&mut m, &data, &tc, |_| {}) {
            Err(Error::Divergence { epoch, lr, .. }) => {
                assert!(epoch < 3);
                assert!(lr > 1e29);
            }
            other => panic!("expected divergence, got {:?}", other.map(|o| o.log)),
        }
    }
}
