//! Versioned binary checkpoints.
//!
//! ```text
//! "CAEC" | version u16 | config | u32 count | count × record
//!        | u8 has_optimizer [ t u64 | lr f64 | beta1 f64 | beta2 f64 | eps f64 | u32 count | records ]
//!        | u8 has_admm [ refreshes u64 | rho f64 | keep_ratio f64 | ell u32 | mean_card_z f64 | mean_primal_residual f64 ]
//! config = base_channels u32 | latent_channels u32 | n_residual_blocks u32 | n_down_pre u32 | n_down_post u32 | seed u64
//! record = name_len u16 | name | rank u8 | rank × u32 dim | f32 values
//! ```
//!
//! All integers and floats are little-endian. Model records hold the
//! parameters followed by the batch-norm running statistics; optimizer records
//! hold the first moments (`m.<name>`) followed by the second (`v.<name>`).

use std::path::Path;

use crate::autodiff::{AdamConfig, AdamState, Parameters};
use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::model::{Cae, CaeConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CAEC";
pub const VERSION: u16 = 1;

/// What the trainer knows about the ADMM store at save time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmmSummary {
    pub refreshes: u64,
    pub rho: f64,
    pub keep_ratio: f64,
    pub ell: u32,
    pub mean_card_z: f64,
    pub mean_primal_residual: f64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Cae<f32>,
    pub optimizer: Option<AdamState<f32>>,
    pub admm: Option<AdmmSummary>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn record(&mut self, name: &str, t: &Tensor<f32>) {
        self.u16(name.len() as u16);
        self.0.extend_from_slice(name.as_bytes());
        self.u8(t.shape().len() as u8);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt(format!(
                "checkpoint truncated at byte {} (needed {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn record(&mut self) -> Result<(String, Tensor<f32>)> {
        let len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::Corrupt("record name is not UTF-8".into()))?
            .to_owned();
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= self.buf.len() - self.pos))
            .ok_or_else(|| Error::Corrupt(format!("record {name} has impossible shape {shape:?}")))?;
        let raw = self.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| Error::Corrupt(format!("record {name}: {e}")))?;
        Ok((name, t))
    }
}

fn write_config(w: &mut Writer, c: &CaeConfig) {
    for v in [
        c.base_channels,
        c.latent_channels,
        c.n_residual_blocks,
        c.n_down_pre,
        c.n_down_post,
    ] {
        w.u32(v as u32);
    }
    w.u64(c.seed);
}

fn read_config(r: &mut Reader<'_>) -> Result<CaeConfig> {
    Ok(CaeConfig {
        base_channels: r.u32()? as usize,
        latent_channels: r.u32()? as usize,
        n_residual_blocks: r.u32()? as usize,
        n_down_pre: r.u32()? as usize,
        n_down_post: r.u32()? as usize,
        seed: r.u64()?,
    })
}

pub fn to_bytes(model: &Cae<f32>, optimizer: Option<&AdamState<f32>>, admm: Option<&AdmmSummary>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u16(VERSION);
    write_config(&mut w, model.config());
    w.u32((model.params().len() + model.buffers().len()) as u32);
    for p in model.params().iter().chain(model.buffers().iter()) {
        w.record(&p.name, &p.value);
    }
    match optimizer {
        Some(opt) => {
            w.u8(1);
            w.u64(opt.t);
            w.f64(opt.config.lr);
            w.f64(opt.config.beta1);
            w.f64(opt.config.beta2);
            w.f64(opt.config.epsilon);
            w.u32((opt.m.len() + opt.v.len()) as u32);
            for (p, m) in model.params().iter().zip(&opt.m) {
                w.record(&format!("m.{}", p.name), m);
            }
            for (p, v) in model.params().iter().zip(&opt.v) {
                w.record(&format!("v.{}", p.name), v);
            }
        }
        None => w.u8(0),
    }
    match admm {
        Some(a) => {
            w.u8(1);
            w.u64(a.refreshes);
            w.f64(a.rho);
            w.f64(a.keep_ratio);
            w.u32(a.ell);
            w.f64(a.mean_card_z);
            w.f64(a.mean_primal_residual);
        }
        None => w.u8(0),
    }
    w.0
}

fn fill(dst: &Parameters<f32>, records: &[(String, Tensor<f32>)], prefix: &str) -> Result<Parameters<f32>> {
    let mut out = Parameters::new();
    if records.len() != dst.len() {
        return Err(Error::Corrupt(format!(
            "{} records where {} were expected",
            records.len(),
            dst.len()
        )));
    }
    for (slot, (name, t)) in dst.iter().zip(records) {
        if *name != format!("{prefix}{}", slot.name) || t.shape() != slot.value.shape() {
            return Err(Error::Corrupt(format!(
                "record {name} {:?} does not match {prefix}{} {:?}",
                t.shape(),
                slot.name,
                slot.value.shape()
            )));
        }
        out.add(slot.name.clone(), t.clone())?;
    }
    Ok(out)
}

pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    r.take(4)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Version {
            found: version as u32,
            expected: VERSION as u32,
        });
    }
    let config = read_config(&mut r)?;
    let mut model = Cae::<f32>::new(config)
        .map_err(|e| Error::Corrupt(format!("stored config is invalid: {e}")))?;
    let count = r.u32()? as usize;
    let mut records = Vec::new();
    for _ in 0..count {
        records.push(r.record()?);
    }
    let np = model.params().len();
    if records.len() < np {
        return Err(Error::Corrupt("missing parameter records".into()));
    }
    let params = fill(model.params(), &records[..np], "")?;
    let buffers = fill(model.buffers(), &records[np..], "")?;
    model.load_values(&params, &buffers)?;

    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let t = r.u64()?;
            let config = AdamConfig {
                lr: r.f64()?,
                beta1: r.f64()?,
                beta2: r.f64()?,
                epsilon: r.f64()?,
            };
            let count = r.u32()? as usize;
            let mut recs = Vec::new();
            for _ in 0..count {
                recs.push(r.record()?);
            }
            if recs.len() != 2 * np {
                return Err(Error::Corrupt("optimizer moments do not cover the parameters".into()));
            }
            let m = fill(model.params(), &recs[..np], "m.")?;
            let v = fill(model.params(), &recs[np..], "v.")?;
            Some(AdamState {
                config,
                t,
                m: m.iter().map(|p| p.value.clone()).collect(),
                v: v.iter().map(|p| p.value.clone()).collect(),
            })
        }
        other => return Err(Error::Corrupt(format!("bad optimizer flag {other}"))),
    };
    let admm = match r.u8()? {
        0 => None,
        1 => Some(AdmmSummary {
            refreshes: r.u64()?,
            rho: r.f64()?,
            keep_ratio: r.f64()?,
            ell: r.u32()?,
            mean_card_z: r.f64()?,
            mean_primal_residual: r.f64()?,
        }),
        other => return Err(Error::Corrupt(format!("bad ADMM flag {other}"))),
    };
    if r.pos != buf.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after checkpoint",
            buf.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        model,
        optimizer,
        admm,
    })
}

pub fn save_checkpoint(
    path: &Path,
    model: &Cae<f32>,
    optimizer: Option<&AdamState<f32>>,
    admm: Option<&AdmmSummary>,
) -> Result<()> {
    atomic_write(path, &to_bytes(model, optimizer, admm))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path)?)
}

/// Loads a checkpoint and checks that it was made for `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &CaeConfig) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if ck.model.config() != expected {
        return Err(Error::ConfigMismatch {
            found: format!("{:?}", ck.model.config()),
            expected: format!("{expected:?}"),
        });
    }
    Ok(ck)
}
