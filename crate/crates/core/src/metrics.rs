//! Distortion and rate metrics.
//!
//! SSIM and MS-SSIM are built from tape operations so the evaluation value and
//! the training loss come from the same arithmetic. Operand order is kept
//! symmetric in `x` and `y` (`μx·μy`, `σx² + σy²`, ...) so swapping the
//! arguments gives a bitwise-identical result.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::quantizer::QuantizedLatent;
use crate::tensor::{Scalar, Tensor};

/// Standard five-scale MS-SSIM exponents.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the pixel values.
    pub l: f64,
    pub window_size: usize,
    pub sigma: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            k1: 0.01,
            k2: 0.03,
            l: 1.0,
            window_size: 11,
            sigma: 1.5,
        }
    }
}

impl SsimParams {
    fn validate(&self) -> Result<()> {
        if !(self.k1 > 0.0 && self.k2 > 0.0 && self.l > 0.0 && self.sigma > 0.0) || self.window_size == 0 {
            return Err(Error::Config(format!("invalid SSIM parameters {self:?}")));
        }
        Ok(())
    }

    fn c1(&self) -> f64 {
        (self.k1 * self.l).powi(2)
    }

    fn c2(&self) -> f64 {
        (self.k2 * self.l).powi(2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsSsimParams {
    pub ssim: SsimParams,
    pub scales: usize,
    /// Per-scale exponents, finest first. Renormalized over the scales used.
    pub weights: Vec<f64>,
}

impl Default for MsSsimParams {
    fn default() -> Self {
        MsSsimParams {
            ssim: SsimParams::default(),
            scales: 5,
            weights: MS_SSIM_WEIGHTS.to_vec(),
        }
    }
}

impl MsSsimParams {
    /// Number of scales that fit an image whose smaller side is `min_dim`:
    /// the coarsest scale must still hold one full window.
    pub fn effective_scales(&self, min_dim: usize) -> Result<usize> {
        let win = self.ssim.window_size;
        if min_dim < win {
            return Err(Error::Precondition(format!(
                "image side {min_dim} is smaller than the {win}-pixel SSIM window"
            )));
        }
        let mut s = 1;
        while s < self.scales.min(self.weights.len()) && (min_dim >> s) >= win {
            s += 1;
        }
        Ok(s)
    }

    pub fn effective_weights(&self, scales: usize) -> Vec<f64> {
        let used = &self.weights[..scales];
        let total: f64 = used.iter().sum();
        used.iter().map(|w| w / total).collect()
    }
}

/// Normalized 1-D Gaussian; the 2-D window is its outer product.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let centre = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - centre).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn check_pair<T: Scalar>(tape: &Tape<T>, x: Var, y: Var) -> Result<(usize, usize)> {
    if tape.shape(x) != tape.shape(y) {
        return Err(Error::dim(format!(
            "metric inputs differ: {:?} vs {:?}",
            tape.shape(x),
            tape.shape(y)
        )));
    }
    let (_, _, h, w) = tape.value(x).dims4()?;
    Ok((h, w))
}

/// Returns the SSIM map and the contrast-structure map.
fn ssim_maps<T: Scalar>(tape: &mut Tape<T>, x: Var, y: Var, p: &SsimParams) -> Result<(Var, Var)> {
    p.validate()?;
    let (h, w) = check_pair(tape, x, y)?;
    if h < p.window_size || w < p.window_size {
        return Err(Error::Precondition(format!(
            "{h}x{w} image is smaller than the {}-pixel SSIM window",
            p.window_size
        )));
    }
    let kernel: Vec<T> = gaussian_window(p.window_size, p.sigma)
        .into_iter()
        .map(T::of)
        .collect();
    let c1 = T::of(p.c1());
    let c2 = T::of(p.c2());
    let two = T::of(2.0);

    let mu_x = tape.separable_filter(x, &kernel)?;
    let mu_y = tape.separable_filter(y, &kernel)?;
    let xx = tape.mul(x, x)?;
    let yy = tape.mul(y, y)?;
    let xy = tape.mul(x, y)?;
    let e_xx = tape.separable_filter(xx, &kernel)?;
    let e_yy = tape.separable_filter(yy, &kernel)?;
    let e_xy = tape.separable_filter(xy, &kernel)?;

    let mu_xx = tape.mul(mu_x, mu_x)?;
    let mu_yy = tape.mul(mu_y, mu_y)?;
    let mu_xy = tape.mul(mu_x, mu_y)?;
    let var_x = tape.sub(e_xx, mu_xx)?;
    let var_y = tape.sub(e_yy, mu_yy)?;
    let cov = tape.sub(e_xy, mu_xy)?;

    let lum_num = tape.scale(mu_xy, two);
    let lum_num = tape.add_scalar(lum_num, c1);
    let lum_den = tape.add(mu_xx, mu_yy)?;
    let lum_den = tape.add_scalar(lum_den, c1);
    let lum = tape.div(lum_num, lum_den)?;

    let cs_num = tape.scale(cov, two);
    let cs_num = tape.add_scalar(cs_num, c2);
    let cs_den = tape.add(var_x, var_y)?;
    let cs_den = tape.add_scalar(cs_den, c2);
    let cs = tape.div(cs_num, cs_den)?;

    let map = tape.mul(lum, cs)?;
    Ok((map, cs))
}

/// Mean SSIM over all windows, channels and batch items.
pub fn ssim_on_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, y: Var, p: &SsimParams) -> Result<Var> {
    let (map, _) = ssim_maps(tape, x, y, p)?;
    Ok(tape.mean(map))
}

pub fn ms_ssim_on_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, y: Var, p: &MsSsimParams) -> Result<Var> {
    let (h, w) = check_pair(tape, x, y)?;
    let scales = p.effective_scales(h.min(w))?;
    let weights = p.effective_weights(scales);
    let floor = T::of(1e-6);
    let (mut x, mut y) = (x, y);
    let mut total: Option<Var> = None;
    for (s, &wt) in weights.iter().enumerate() {
        let (map, cs) = ssim_maps(tape, x, y, &p.ssim)?;
        let term = if s + 1 == scales { tape.mean(map) } else { tape.mean(cs) };
        let term = tape.clamp_min(term, floor);
        let term = tape.powf(term, T::of(wt));
        total = Some(match total {
            None => term,
            Some(acc) => tape.mul(acc, term)?,
        });
        if s + 1 < scales {
            x = tape.avg_pool2(x)?;
            y = tape.avg_pool2(y)?;
        }
    }
    Ok(total.expect("at least one scale"))
}

pub fn mse_on_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, y: Var) -> Result<Var> {
    let d = tape.sub(y, x)?;
    let ss = tape.sum_of_squares(d);
    let n = tape.value(x).numel();
    Ok(tape.scale(ss, T::of(1.0 / n as f64)))
}

/// Differentiable PSNR in dB; diverges as the MSE reaches zero.
pub fn psnr_on_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, y: Var, max_i: f64) -> Result<Var> {
    let m = mse_on_tape(tape, x, y)?;
    let l = tape.ln(m);
    let db = tape.scale(l, T::of(-10.0 / std::f64::consts::LN_10));
    Ok(tape.add_scalar(db, T::of(10.0 * (max_i * max_i).log10())))
}

fn with_pair<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    f: impl FnOnce(&mut Tape<T>, Var, Var) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let out = f(&mut tape, xv, yv)?;
    Ok(tape.scalar(out).as_f64())
}

pub fn mse<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    x.check_same_shape(y)?;
    let n = x.numel() as f64;
    Ok(x.data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| (b.as_f64() - a.as_f64()).powi(2))
        .sum::<f64>()
        / n)
}

/// PSNR in dB, `f64::INFINITY` for identical inputs.
pub fn psnr<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, max_i: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?, max_i))
}

pub fn psnr_from_mse(mse: f64, max_i: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_i * max_i / mse).log10()
    }
}

pub fn ssim<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, p: &SsimParams) -> Result<f64> {
    with_pair(x, y, |t, a, b| ssim_on_tape(t, a, b, p))
}

pub fn ms_ssim<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, p: &MsSsimParams) -> Result<f64> {
    with_pair(x, y, |t, a, b| ms_ssim_on_tape(t, a, b, p))
}

/// Weights of the combined distortion loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub mse: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
}

impl LossWeights {
    pub const MSE_ONLY: LossWeights = LossWeights {
        mse: 1.0,
        ssim: 0.0,
        ms_ssim: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let all = [self.mse, self.ssim, self.ms_ssim];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || all.iter().all(|&w| w == 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative and not all zero: {self:?}"
            )));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mse: 1.0,
            ssim: 0.0,
            ms_ssim: 0.1,
        }
    }
}

/// `w_mse·MSE + w_ssim·(1 − SSIM) + w_msssim·(1 − MS-SSIM)`.
pub fn distortion_loss<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    x_hat: Var,
    weights: &LossWeights,
    ms: &MsSsimParams,
) -> Result<Var> {
    weights.validate()?;
    let mut terms = Vec::new();
    if weights.mse > 0.0 {
        let m = mse_on_tape(tape, x, x_hat)?;
        terms.push(tape.scale(m, T::of(weights.mse)));
    }
    if weights.ssim > 0.0 {
        let s = ssim_on_tape(tape, x, x_hat, &ms.ssim)?;
        let l = tape.scale(s, T::of(-1.0));
        let l = tape.add_scalar(l, T::one());
        terms.push(tape.scale(l, T::of(weights.ssim)));
    }
    if weights.ms_ssim > 0.0 {
        let s = ms_ssim_on_tape(tape, x, x_hat, ms)?;
        let l = tape.scale(s, T::of(-1.0));
        let l = tape.add_scalar(l, T::one());
        terms.push(tape.scale(l, T::of(weights.ms_ssim)));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Fraction of zero entries.
pub fn zero_ratio(q: &QuantizedLatent) -> f64 {
    let n = q.numel();
    (n - q.card()) as f64 / n as f64
}

/// Bits per source pixel of a file of `bytes` bytes.
pub fn bpp(bytes: usize, pixels: usize) -> f64 {
    assert!(pixels > 0, "bpp of an empty image");
    8.0 * bytes as f64 / pixels as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(seed: u64, shape: &[usize]) -> Tensor<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen::<f64>())
    }

    #[test]
    fn window_sums_to_one() {
        let w = gaussian_window(11, 1.5);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((w[0] - w[10]).abs() < 1e-18);
    }

    #[test]
    fn mse_and_psnr_values() {
        let x = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let y = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        assert_eq!(mse(&x, &y).unwrap(), 1.0);
        assert_eq!(mse(&x, &x).unwrap(), 0.0);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
        assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-12);
        assert!(psnr_from_mse(255.0 * 255.0, 255.0).abs() < 1e-12);
    }

    #[test]
    fn mse_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![3], vec![0.0, 1.0, 2.0]).unwrap());
        let y = tape.leaf(Tensor::new(vec![3], vec![1.0, 1.0, 0.5]).unwrap());
        let m = mse_on_tape(&mut tape, x, y).unwrap();
        tape.backward(m).unwrap();
        let g = tape.grad(y).unwrap().data();
        let expect = [2.0 / 3.0, 0.0, -1.0];
        for (a, b) in g.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn ssim_reflexive_and_symmetric() {
        let x = img(1, &[1, 3, 16, 16]);
        let y = img(2, &[1, 3, 16, 16]);
        let p = SsimParams::default();
        assert_eq!(ssim(&x, &x, &p).unwrap(), 1.0);
        assert_eq!(ssim(&x, &y, &p).unwrap(), ssim(&y, &x, &p).unwrap());
        assert!(ssim(&x, &y, &p).unwrap() < 0.5);
    }

    #[test]
    fn ssim_constant_closed_form() {
        let (a, b) = (0.2, 0.6);
        let x = Tensor::full(&[1, 1, 12, 12], a);
        let y = Tensor::full(&[1, 1, 12, 12], b);
        let c1 = 0.01f64.powi(2);
        let expect = (2.0 * a * b + c1) / (a * a + b * b + c1);
        let got = ssim(&x, &y, &SsimParams::default()).unwrap();
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
    }

    #[test]
    fn ssim_too_small() {
        let x = Tensor::<f64>::zeros(&[1, 1, 10, 20]);
        assert!(matches!(
            ssim(&x, &x, &SsimParams::default()),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn ms_ssim_scale_reduction() {
        let p = MsSsimParams::default();
        assert_eq!(p.effective_scales(32).unwrap(), 2);
        assert_eq!(p.effective_scales(64).unwrap(), 3);
        assert_eq!(p.effective_scales(176).unwrap(), 5);
        assert_eq!(p.effective_scales(11).unwrap(), 1);
        let w = p.effective_weights(2);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((w[0] - 0.0448 / (0.0448 + 0.2856)).abs() < 1e-15);
    }

    #[test]
    fn ms_ssim_reflexive_and_symmetric() {
        let x = img(3, &[1, 3, 32, 32]);
        let y = img(4, &[1, 3, 32, 32]);
        let p = MsSsimParams::default();
        assert_eq!(ms_ssim(&x, &x, &p).unwrap(), 1.0);
        assert_eq!(ms_ssim(&x, &y, &p).unwrap(), ms_ssim(&y, &x, &p).unwrap());
    }

    #[test]
    fn distortion_loss_reductions() {
        let x = img(5, &[1, 3, 16, 16]);
        let y = img(6, &[1, 3, 16, 16]);
        let ms = MsSsimParams::default();
        let mut tape = Tape::new();
        let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
        let l = distortion_loss(&mut tape, xv, yv, &LossWeights::MSE_ONLY, &ms).unwrap();
        assert_eq!(tape.scalar(l), mse(&x, &y).unwrap());
        let w = LossWeights {
            mse: 0.5,
            ssim: 0.3,
            ms_ssim: 0.2,
        };
        let same = distortion_loss(&mut tape, xv, xv, &w, &ms).unwrap();
        assert_eq!(tape.scalar(same), 0.0);
        let zero = LossWeights {
            mse: 0.0,
            ssim: 0.0,
            ms_ssim: 0.0,
        };
        assert!(matches!(
            distortion_loss(&mut tape, xv, yv, &zero, &ms),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_ratio_and_bpp() {
        let q = QuantizedLatent::new([1, 1, 1, 4], vec![0, 1, 0, 2]).unwrap();
        assert_eq!(zero_ratio(&q), 0.5);
        let z = QuantizedLatent::new([1, 1, 2, 2], vec![0; 4]).unwrap();
        assert_eq!(zero_ratio(&z), 1.0);
        assert!((bpp(9600, 768 * 512) - 0.1953125).abs() < 1e-12);
        assert!(bpp(10, 100) < bpp(11, 100));
    }
}
