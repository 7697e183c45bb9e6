//! The convolutional autoencoder.
//!
//! Encoder: a `Conv 5/2p2` block and `n_down_pre - 1` `Conv 3/2p1` blocks (each
//! conv + batch norm + PReLU), `n_residual_blocks` residual blocks, `n_down_post`
//! more `Conv 3/2p1` blocks and a linear `Conv 3/1p1` to `latent_channels`.
//!
//! Decoder: the mirror image. A `Conv 3/1p1` block lifts the latent to
//! `base_channels`, every downsampling stage becomes `Conv 3/1p1` to four times
//! the channels followed by a 2× pixel shuffle, and a linear `Conv 5/1p2` maps
//! back to three channels. All padding is reflection padding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BnOptions, BnRunning, PadMode, ParamId, Parameters, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CaeConfig {
    pub base_channels: usize,
    /// Latent channel count; the knob that sets the uncompressed latent size.
    pub latent_channels: usize,
    pub n_residual_blocks: usize,
    pub n_down_pre: usize,
    pub n_down_post: usize,
    pub seed: u64,
}

impl Default for CaeConfig {
    fn default() -> Self {
        CaeConfig {
            base_channels: 64,
            latent_channels: 32,
            n_residual_blocks: 15,
            n_down_pre: 3,
            n_down_post: 2,
            seed: 0,
        }
    }
}

impl CaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.latent_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.n_down_pre == 0 {
            return Err(Error::Config(
                "the encoder needs at least one pre-residual downsampling block".into(),
            ));
        }
        if self.n_down_pre + self.n_down_post > 16 {
            return Err(Error::Config("too many downsampling stages".into()));
        }
        Ok(())
    }

    pub fn downsample_factor(&self) -> usize {
        1 << (self.n_down_pre + self.n_down_post)
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Debug, Clone, Copy)]
enum Block {
    /// conv → bn → prelu
    Plain { conv: Conv, norm: Norm, slope: ParamId },
    /// conv → shuffle(2) → bn → prelu
    Up { conv: Conv, norm: Norm, slope: ParamId },
    /// conv → bn → prelu → conv → bn, plus skip
    Residual {
        conv1: Conv,
        norm1: Norm,
        slope: ParamId,
        conv2: Conv,
        norm2: Norm,
    },
    Linear(Conv),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated when the model is
    /// borrowed mutably.
    Train,
    /// Running statistics.
    Eval,
}

struct Builder<'a, T: Scalar> {
    params: &'a mut Parameters<T>,
    buffers: &'a mut Parameters<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Conv> {
        let bound = (6.0 / (cin * k * k) as f64).sqrt();
        let rng = &mut self.rng;
        let w = Tensor::from_fn(&[cout, cin, k, k], |_| T::of(rng.gen_range(-bound..bound)));
        Ok(Conv {
            weight: self.params.add(format!("{name}.weight"), w)?,
            bias: self.params.add(format!("{name}.bias"), Tensor::zeros(&[cout]))?,
            stride,
            pad: k / 2,
        })
    }

    fn norm(&mut self, name: &str, c: usize) -> Result<Norm> {
        Ok(Norm {
            gamma: self.params.add(format!("{name}.gamma"), Tensor::full(&[c], T::one()))?,
            beta: self.params.add(format!("{name}.beta"), Tensor::zeros(&[c]))?,
            mean: self
                .buffers
                .add(format!("{name}.running_mean"), Tensor::zeros(&[c]))?,
            var: self
                .buffers
                .add(format!("{name}.running_var"), Tensor::full(&[c], T::one()))?,
        })
    }

    fn slope(&mut self, name: &str, c: usize) -> Result<ParamId> {
        self.params.add(format!("{name}.slope"), Tensor::full(&[c], T::of(0.25)))
    }

    fn plain(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Block> {
        Ok(Block::Plain {
            conv: self.conv(&format!("{name}.conv"), cin, cout, k, stride)?,
            norm: self.norm(&format!("{name}.bn"), cout)?,
            slope: self.slope(&format!("{name}.act"), cout)?,
        })
    }

    fn up(&mut self, name: &str, c: usize) -> Result<Block> {
        Ok(Block::Up {
            conv: self.conv(&format!("{name}.conv"), c, 4 * c, 3, 1)?,
            norm: self.norm(&format!("{name}.bn"), c)?,
            slope: self.slope(&format!("{name}.act"), c)?,
        })
    }

    fn residual(&mut self, name: &str, c: usize) -> Result<Block> {
        Ok(Block::Residual {
            conv1: self.conv(&format!("{name}.conv1"), c, c, 3, 1)?,
            norm1: self.norm(&format!("{name}.bn1"), c)?,
            slope: self.slope(&format!("{name}.act"), c)?,
            conv2: self.conv(&format!("{name}.conv2"), c, c, 3, 1)?,
            norm2: self.norm(&format!("{name}.bn2"), c)?,
        })
    }
}

/// Encoder and decoder parameters plus batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct Cae<T: Scalar> {
    config: CaeConfig,
    params: Parameters<T>,
    buffers: Parameters<T>,
    encoder: Vec<Block>,
    decoder: Vec<Block>,
    bn: BnOptions,
}

enum Stats<'a, T> {
    Shared(&'a Parameters<T>),
    Mut(&'a mut Parameters<T>),
}

impl<T> Stats<'_, T> {
    fn get(&self) -> &Parameters<T> {
        match self {
            Stats::Shared(p) => p,
            Stats::Mut(p) => p,
        }
    }
}

impl<T: Scalar> Cae<T> {
    pub fn new(config: CaeConfig) -> Result<Self> {
        config.validate()?;
        let mut params = Parameters::new();
        let mut buffers = Parameters::new();
        let mut b = Builder {
            params: &mut params,
            buffers: &mut buffers,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let c = config.base_channels;
        let mut encoder = vec![b.plain("enc.pre0", 3, c, 5, 2)?];
        for i in 1..config.n_down_pre {
            encoder.push(b.plain(&format!("enc.pre{i}"), c, c, 3, 2)?);
        }
        for i in 0..config.n_residual_blocks {
            encoder.push(b.residual(&format!("enc.res{i}"), c)?);
        }
        for i in 0..config.n_down_post {
            encoder.push(b.plain(&format!("enc.post{i}"), c, c, 3, 2)?);
        }
        encoder.push(Block::Linear(b.conv("enc.out.conv", c, config.latent_channels, 3, 1)?));

        let mut decoder = vec![b.plain("dec.in", config.latent_channels, c, 3, 1)?];
        for i in 0..config.n_down_post {
            decoder.push(b.up(&format!("dec.post{i}"), c)?);
        }
        for i in 0..config.n_residual_blocks {
            decoder.push(b.residual(&format!("dec.res{i}"), c)?);
        }
        for i in 0..config.n_down_pre {
            decoder.push(b.up(&format!("dec.pre{i}"), c)?);
        }
        decoder.push(Block::Linear(b.conv("dec.out.conv", c, 3, 5, 1)?));

        Ok(Cae {
            config,
            params,
            buffers,
            encoder,
            decoder,
            bn: BnOptions::default(),
        })
    }

    pub fn config(&self) -> &CaeConfig {
        &self.config
    }

    pub fn params(&self) -> &Parameters<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters<T> {
        &mut self.params
    }

    /// Batch-norm running statistics.
    pub fn buffers(&self) -> &Parameters<T> {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut Parameters<T> {
        &mut self.buffers
    }

    pub fn is_encoder_param(name: &str) -> bool {
        name.starts_with("enc.")
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Scalar>(&self) -> Cae<U> {
        Cae {
            config: self.config,
            params: self.params.cast(),
            buffers: self.buffers.cast(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            bn: self.bn,
        }
    }

    /// Latent shape `[n, c_z, h, w]` for an `n × 3 × height × width` input.
    pub fn latent_shape(&self, n: usize, height: usize, width: usize) -> Result<[usize; 4]> {
        let f = self.config.downsample_factor();
        if height % f != 0 || width % f != 0 || height == 0 || width == 0 {
            return Err(Error::dim(format!(
                "input {height}x{width} is not divisible by the downsample factor {f}"
            )));
        }
        Ok([n, self.config.latent_channels, height / f, width / f])
    }

    /// Encodes `x` (shape `[n, 3, h, w]`). In train mode the running statistics are updated.
    pub fn encode(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        self.check_image(tape, x)?;
        let blocks = self.encoder.clone();
        Self::run(&self.params, Stats::Mut(&mut self.buffers), self.bn, &blocks, tape, x, mode)
    }

    pub fn decode(&mut self, tape: &mut Tape<T>, z_hat: Var, mode: Mode) -> Result<Var> {
        self.check_latent(tape, z_hat)?;
        let blocks = self.decoder.clone();
        Self::run(&self.params, Stats::Mut(&mut self.buffers), self.bn, &blocks, tape, z_hat, mode)
    }

    /// Encoding without touching the running statistics (train mode then just
    /// uses batch statistics).
    pub fn encode_frozen(&self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        self.check_image(tape, x)?;
        Self::run(&self.params, Stats::Shared(&self.buffers), self.bn, &self.encoder, tape, x, mode)
    }

    pub fn decode_frozen(&self, tape: &mut Tape<T>, z_hat: Var, mode: Mode) -> Result<Var> {
        self.check_latent(tape, z_hat)?;
        Self::run(&self.params, Stats::Shared(&self.buffers), self.bn, &self.decoder, tape, z_hat, mode)
    }

    fn check_image(&self, tape: &Tape<T>, x: Var) -> Result<()> {
        let (n, c, h, w) = tape.value(x).dims4()?;
        if c != 3 {
            return Err(Error::dim(format!("encoder expects 3 channels, got {c}")));
        }
        self.latent_shape(n, h, w).map(|_| ())
    }

    fn check_latent(&self, tape: &Tape<T>, z: Var) -> Result<()> {
        let (_, c, _, _) = tape.value(z).dims4()?;
        if c != self.config.latent_channels {
            return Err(Error::dim(format!(
                "decoder expects {} latent channels, got {c}",
                self.config.latent_channels
            )));
        }
        Ok(())
    }

    fn conv(params: &Parameters<T>, tape: &mut Tape<T>, x: Var, c: &Conv) -> Result<Var> {
        let w = tape.param(params, c.weight);
        let b = tape.param(params, c.bias);
        tape.conv2d(x, w, Some(b), c.stride, c.pad, PadMode::Reflect)
    }

    fn norm(
        params: &Parameters<T>,
        stats: &mut Stats<'_, T>,
        opts: BnOptions,
        tape: &mut Tape<T>,
        x: Var,
        n: &Norm,
        mode: Mode,
    ) -> Result<Var> {
        let g = tape.param(params, n.gamma);
        let b = tape.param(params, n.beta);
        match (mode, stats) {
            (Mode::Train, Stats::Mut(buf)) => {
                // running mean and var are two distinct buffers
                let mut mean = std::mem::replace(&mut buf.get_mut(n.mean).value, Tensor::scalar(T::zero()));
                let out = tape.batchnorm2d_train(
                    x,
                    g,
                    b,
                    Some(BnRunning {
                        mean: mean.data_mut(),
                        var: buf.get_mut(n.var).value.data_mut(),
                    }),
                    opts,
                );
                buf.get_mut(n.mean).value = mean;
                out
            }
            (Mode::Train, Stats::Shared(_)) => tape.batchnorm2d_train(x, g, b, None, opts),
            (Mode::Eval, stats) => {
                let buf = stats.get();
                tape.batchnorm2d_eval(
                    x,
                    g,
                    b,
                    buf.value(n.mean).data(),
                    buf.value(n.var).data(),
                    opts,
                )
            }
        }
    }

    fn run(
        params: &Parameters<T>,
        mut stats: Stats<'_, T>,
        opts: BnOptions,
        blocks: &[Block],
        tape: &mut Tape<T>,
        mut x: Var,
        mode: Mode,
    ) -> Result<Var> {
        for block in blocks {
            x = match block {
                Block::Plain { conv, norm, slope } => {
                    let y = Self::conv(params, tape, x, conv)?;
                    let y = Self::norm(params, &mut stats, opts, tape, y, norm, mode)?;
                    let a = tape.param(params, *slope);
                    tape.prelu(y, a)?
                }
                Block::Up { conv, norm, slope } => {
                    let y = Self::conv(params, tape, x, conv)?;
                    let y = tape.pixel_shuffle(y, 2)?;
                    let y = Self::norm(params, &mut stats, opts, tape, y, norm, mode)?;
                    let a = tape.param(params, *slope);
                    tape.prelu(y, a)?
                }
                Block::Residual {
                    conv1,
                    norm1,
                    slope,
                    conv2,
                    norm2,
                } => {
                    let y = Self::conv(params, tape, x, conv1)?;
                    let y = Self::norm(params, &mut stats, opts, tape, y, norm1, mode)?;
                    let a = tape.param(params, *slope);
                    let y = tape.prelu(y, a)?;
                    let y = Self::conv(params, tape, y, conv2)?;
                    let y = Self::norm(params, &mut stats, opts, tape, y, norm2, mode)?;
                    tape.add(x, y)?
                }
                Block::Linear(conv) => Self::conv(params, tape, x, conv)?,
            };
        }
        Ok(x)
    }

    /// Copies parameter and buffer values from `other`; names and shapes must agree.
    pub fn load_values(&mut self, params: &Parameters<T>, buffers: &Parameters<T>) -> Result<()> {
        fn copy<T: Scalar>(dst: &mut Parameters<T>, src: &Parameters<T>) -> Result<()> {
            if dst.len() != src.len() {
                return Err(Error::dim(format!(
                    "{} tensors supplied for {} slots",
                    src.len(),
                    dst.len()
                )));
            }
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                if d.name != s.name || d.value.shape() != s.value.shape() {
                    return Err(Error::dim(format!(
                        "tensor {} {:?} does not fit slot {} {:?}",
                        s.name,
                        s.value.shape(),
                        d.name,
                        d.value.shape()
                    )));
                }
                d.value = s.value.clone();
            }
            Ok(())
        }
        copy(&mut self.params, params)?;
        copy(&mut self.buffers, buffers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CaeConfig {
        CaeConfig {
            base_channels: 8,
            latent_channels: 4,
            n_residual_blocks: 1,
            n_down_pre: 2,
            n_down_post: 1,
            seed: 9,
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Cae::<f32>::new(small()).unwrap();
        let b = Cae::<f32>::new(small()).unwrap();
        assert_eq!(a.params(), b.params());
        let c = Cae::<f32>::new(CaeConfig { seed: 10, ..small() }).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn encode_decode_shapes() {
        let mut m = Cae::<f32>::new(small()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 16, 24], |i| (i % 7) as f32 / 7.0));
        let z = m.encode(&mut tape, x, Mode::Train).unwrap();
        assert_eq!(tape.shape(z), &[2, 4, 2, 3]);
        let y = m.decode(&mut tape, z, Mode::Train).unwrap();
        assert_eq!(tape.shape(y), &[2, 3, 16, 24]);
    }

    #[test]
    fn indivisible_input_rejected() {
        let m = Cae::<f32>::new(small()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 20, 16]));
        assert!(matches!(
            m.encode_frozen(&mut tape, x, Mode::Eval),
            Err(Error::Dimension(_))
        ));
        let z = tape.constant(Tensor::zeros(&[1, 5, 2, 2]));
        assert!(matches!(
            m.decode_frozen(&mut tape, z, Mode::Eval),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn zero_residual_blocks_runs() {
        let mut m = Cae::<f32>::new(CaeConfig {
            n_residual_blocks: 0,
            ..small()
        })
        .unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 4, 2, 2]));
        let y = m.decode(&mut tape, z, Mode::Eval).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 16, 16]);
        assert!(tape.value(y).data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn train_mode_updates_running_stats_eval_does_not() {
        let mut m = Cae::<f32>::new(small()).unwrap();
        let before = m.buffers().clone();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 16, 16], |i| (i % 5) as f32 * 0.2));
        m.encode(&mut tape, x, Mode::Eval).unwrap();
        assert_eq!(m.buffers(), &before);
        m.encode(&mut tape, x, Mode::Train).unwrap();
        assert_ne!(m.buffers(), &before);
    }
}
