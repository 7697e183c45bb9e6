//! ADMM cardinality pruning of the quantized latent.
//!
//! The constraint `card(Z) <= ell` is handled in scaled form. Each outer
//! iteration:
//!
//! 1. minimizes `d(x, x_hat) + rho/2 * ||qz - Z + U||^2` by gradient descent,
//! 2. sets `Z = project_cardinality(qz + U, ell)`,
//! 3. sets `U = U + qz - Z`.
//!
//! [`AdmmStore`] keeps `Z` and `U` per training sample so every image has its
//! own budget across minibatches. [`run_admm_toy`] runs the same loop on a free
//! vector, which is how the driver is validated against brute force.

use std::io::Write;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub fn card(v: &[f64]) -> usize {
    v.iter().filter(|&&x| x != 0.0).count()
}

/// Euclidean projection onto `{Z : card(Z) <= ell}`: keeps the `ell`
/// largest-magnitude entries and zeroes the rest. Equal magnitudes go to the
/// lower flat index.
pub fn project_cardinality(v: &[f64], ell: usize) -> Vec<f64> {
    if ell >= v.len() {
        return v.to_vec();
    }
    let mut order: Vec<usize> = (0..v.len()).collect();
    let rank = |a: &usize, b: &usize| {
        v[*b]
            .abs()
            .total_cmp(&v[*a].abs())
            .then_with(|| a.cmp(b))
    };
    let mut out = vec![0.0; v.len()];
    if ell == 0 {
        return out;
    }
    order.select_nth_unstable_by(ell - 1, rank);
    for &i in &order[..ell] {
        out[i] = v[i];
    }
    out
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dim(format!("length {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// `Z = project_cardinality(qz + U, ell)`.
pub fn update_z(qz: &[f64], u: &[f64], ell: usize) -> Result<Vec<f64>> {
    same_len(qz, u)?;
    let sum: Vec<f64> = qz.iter().zip(u).map(|(a, b)| a + b).collect();
    Ok(project_cardinality(&sum, ell))
}

/// `U + qz - Z`.
pub fn update_u(u: &[f64], qz: &[f64], z_new: &[f64]) -> Result<Vec<f64>> {
    same_len(u, qz)?;
    same_len(u, z_new)?;
    Ok(u.iter()
        .zip(qz)
        .zip(z_new)
        .map(|((u, q), z)| u + (q - z))
        .collect())
}

/// `(rho/2) * ||qz - Z + U||_F^2` as a differentiable scalar.
pub fn admm_penalty<T: Scalar>(
    tape: &mut Tape<T>,
    qz: Var,
    z: &Tensor<T>,
    u: &Tensor<T>,
    rho: f64,
) -> Result<Var> {
    tape.value(qz).check_same_shape(z)?;
    tape.value(qz).check_same_shape(u)?;
    let zc = tape.constant(z.clone());
    let uc = tape.constant(u.clone());
    let d = tape.sub(qz, zc)?;
    let d = tape.add(d, uc)?;
    let ss = tape.sum_of_squares(d);
    Ok(tape.scale(ss, T::of(rho / 2.0)))
}

/// Fraction of latent entries each sample may keep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsityBudget {
    pub keep_ratio: f64,
}

impl Default for SparsityBudget {
    fn default() -> Self {
        SparsityBudget { keep_ratio: 0.10 }
    }
}

impl SparsityBudget {
    pub fn new(keep_ratio: f64) -> Result<Self> {
        if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "keep ratio must lie in (0, 1], got {keep_ratio}"
            )));
        }
        Ok(SparsityBudget { keep_ratio })
    }

    /// `ceil(keep_ratio * numel)`, clamped to `[1, numel]`.
    pub fn ell(&self, numel: usize) -> usize {
        ((self.keep_ratio * numel as f64).ceil() as usize).clamp(1, numel.max(1))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RefreshStats {
    pub mean_card_z: f64,
    pub max_card_z: usize,
    pub mean_primal_residual: f64,
    pub mean_penalty: f64,
    /// Samples whose `Z` satisfies the budget after the refresh.
    pub feasible: usize,
    pub samples: usize,
}

/// Per-sample `Z` / `U` store for training.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmStore {
    pub rho: f64,
    pub ell: usize,
    /// Completed refresh rounds.
    pub k: usize,
    latent_numel: usize,
    z: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
}

impl AdmmStore {
    pub fn new(samples: usize, latent_numel: usize, budget: SparsityBudget, rho: f64) -> Result<Self> {
        if !(rho > 0.0) {
            return Err(Error::Config(format!("rho must be positive, got {rho}")));
        }
        Ok(AdmmStore {
            rho,
            ell: budget.ell(latent_numel),
            k: 0,
            latent_numel,
            z: vec![vec![0.0; latent_numel]; samples],
            u: vec![vec![0.0; latent_numel]; samples],
        })
    }

    pub fn samples(&self) -> usize {
        self.z.len()
    }

    pub fn latent_numel(&self) -> usize {
        self.latent_numel
    }

    pub fn z(&self, sample: usize) -> &[f64] {
        &self.z[sample]
    }

    pub fn u(&self, sample: usize) -> &[f64] {
        &self.u[sample]
    }

    /// `Z` and `U` for a minibatch, stacked in the latent's `[n, c, h, w]` shape.
    pub fn batch<T: Scalar>(&self, samples: &[usize], latent_shape: [usize; 4]) -> Result<(Tensor<T>, Tensor<T>)> {
        let per: usize = latent_shape[1..].iter().product();
        if per != self.latent_numel || latent_shape[0] != samples.len() {
            return Err(Error::dim(format!(
                "latent shape {latent_shape:?} does not match store of {} per sample",
                self.latent_numel
            )));
        }
        let gather = |src: &Vec<Vec<f64>>| {
            let data: Vec<T> = samples
                .iter()
                .flat_map(|&s| src[s].iter().map(|&v| T::of(v)))
                .collect();
            Tensor::new(latent_shape.to_vec(), data)
        };
        Ok((gather(&self.z)?, gather(&self.u)?))
    }

    /// Steps two and three for one sample. Returns `(card(Z), ||qz - Z||, penalty)`,
    /// the penalty evaluated with the new `Z` and `U`.
    pub fn refresh_sample(&mut self, sample: usize, qz: &[f64]) -> Result<(usize, f64, f64)> {
        if qz.len() != self.latent_numel {
            return Err(Error::dim(format!(
                "latent of {} values for store of {}",
                qz.len(),
                self.latent_numel
            )));
        }
        let z_new = update_z(qz, &self.u[sample], self.ell)?;
        let u_new = update_u(&self.u[sample], qz, &z_new)?;
        let residual = qz
            .iter()
            .zip(&z_new)
            .map(|(q, z)| (q - z) * (q - z))
            .sum::<f64>()
            .sqrt();
        let penalty = self.rho / 2.0
            * qz.iter()
                .zip(&z_new)
                .zip(&u_new)
                .map(|((q, z), u)| (q - z + u).powi(2))
                .sum::<f64>();
        let c = card(&z_new);
        self.z[sample] = z_new;
        self.u[sample] = u_new;
        Ok((c, residual, penalty))
    }

    /// Refreshes every sample from `latents[i]` and advances `k`.
    pub fn refresh_all(&mut self, latents: &[Vec<f64>]) -> Result<RefreshStats> {
        if latents.len() != self.samples() {
            return Err(Error::dim(format!(
                "{} latents for {} samples",
                latents.len(),
                self.samples()
            )));
        }
        let mut stats = RefreshStats {
            samples: latents.len(),
            ..RefreshStats::default()
        };
        for (i, qz) in latents.iter().enumerate() {
            let (c, r, p) = self.refresh_sample(i, qz)?;
            stats.mean_card_z += c as f64;
            stats.max_card_z = stats.max_card_z.max(c);
            stats.mean_primal_residual += r;
            stats.mean_penalty += p;
            if c <= self.ell {
                stats.feasible += 1;
            }
        }
        let n = latents.len().max(1) as f64;
        stats.mean_card_z /= n;
        stats.mean_primal_residual /= n;
        stats.mean_penalty /= n;
        self.k += 1;
        Ok(stats)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmmTraceRow {
    pub k: usize,
    pub mean_primal_residual: f64,
    pub mean_card_z: f64,
    pub mean_penalty: f64,
}

pub fn write_trace_csv<W: Write>(mut out: W, rows: &[AdmmTraceRow]) -> std::io::Result<()> {
    writeln!(out, "k,mean_primal_residual,mean_card_z,mean_penalty")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{}",
            r.k, r.mean_primal_residual, r.mean_card_z, r.mean_penalty
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyConfig {
    pub dim: usize,
    pub ell: usize,
    pub rho: f64,
    /// Outer iterations.
    pub k_m: usize,
    /// Gradient steps on the first sub-problem per outer iteration.
    pub inner_steps: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyResult {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub u: Vec<f64>,
    /// `||x - Z||` after every outer iteration.
    pub residuals: Vec<f64>,
}

/// ADMM on a free vector `x` with `Q` the identity. `objective` returns the
/// value and gradient at a point.
pub fn run_admm_toy<F>(objective: F, cfg: &ToyConfig) -> Result<ToyResult>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    if cfg.ell == 0 || !(cfg.rho > 0.0) || cfg.dim == 0 {
        return Err(Error::Config(format!("invalid toy problem {cfg:?}")));
    }
    let mut x = vec![0.0; cfg.dim];
    let mut z = vec![0.0; cfg.dim];
    let mut u = vec![0.0; cfg.dim];
    let mut residuals = Vec::with_capacity(cfg.k_m);
    for k in 0..cfg.k_m {
        for step in 0..cfg.inner_steps {
            let (value, grad) = objective(&x);
            if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch: k,
                    batch: step,
                    lr: cfg.lr,
                    detail: format!("objective {value} at x = {x:?}"),
                });
            }
            for i in 0..cfg.dim {
                x[i] -= cfg.lr * (grad[i] + cfg.rho * (x[i] - z[i] + u[i]));
            }
        }
        z = update_z(&x, &u, cfg.ell)?;
        u = update_u(&u, &x, &z)?;
        residuals.push(
            x.iter()
                .zip(&z)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt(),
        );
    }
    Ok(ToyResult { x, z, u, residuals })
}
