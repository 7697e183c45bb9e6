//! Integer quantization of the latent code.
//!
//! Training rounds stochastically: `t` becomes `floor(t) + 1` with probability
//! `t - floor(t)`, so the expected output is `t` and the gradient is taken as the
//! identity. Compression rounds to nearest (ties away from zero) so the codec is
//! deterministic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedLatent {
    shape: [usize; 4],
    values: Vec<i32>,
    /// Height and width of the image this latent was produced from.
    source: (usize, usize),
}

impl QuantizedLatent {
    /// `shape` is `[n, c, h, w]`; the source size defaults to the latent's spatial size.
    pub fn new(shape: [usize; 4], values: Vec<i32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) || shape.iter().product::<usize>() != values.len() {
            return Err(Error::dim(format!(
                "latent shape {shape:?} does not hold {} values",
                values.len()
            )));
        }
        Ok(QuantizedLatent {
            shape,
            values,
            source: (shape[2], shape[3]),
        })
    }

    pub fn with_source(mut self, height: usize, width: usize) -> Self {
        self.source = (height, width);
        self
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn values(&self) -> &[i32] {
        &self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// `(height, width)` of the source image.
    pub fn source(&self) -> (usize, usize) {
        self.source
    }

    pub fn card(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0).count()
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            self.shape.to_vec(),
            self.values.iter().map(|&v| T::of(v as f64)).collect(),
        )
        .expect("shape checked at construction")
    }

    /// Values of batch item `index`, flattened.
    pub fn item(&self, index: usize) -> &[i32] {
        let per = self.values.len() / self.shape[0];
        &self.values[index * per..(index + 1) * per]
    }
}

/// Reproducible uniform draws for the stochastic quantizer, keyed by
/// `(seed, epoch, batch)`; the element index is the draw position.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    counter: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::keyed(seed, 0, 0)
    }

    pub fn keyed(seed: u64, epoch: u64, batch: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&epoch.to_le_bytes());
        key[16..24].copy_from_slice(b"quantize");
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(batch);
        RngStream {
            seed,
            counter: 0,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of draws taken so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn uniform(&mut self) -> f64 {
        self.counter += 1;
        self.rng.gen::<f64>()
    }
}

fn to_shape(z: &Tensor<impl Scalar>) -> Result<[usize; 4]> {
    let (n, c, h, w) = z.dims4()?;
    Ok([n, c, h, w])
}

fn checked(v: f64) -> Result<i32> {
    if !v.is_finite() {
        return Err(Error::Contract(format!("cannot quantize non-finite value {v}")));
    }
    if v.abs() >= i32::MAX as f64 {
        return Err(Error::Contract(format!("latent value {v} overflows i32")));
    }
    Ok(v as i32)
}

pub fn quantize_stochastic<T: Scalar>(z: &Tensor<T>, rng: &mut RngStream) -> Result<QuantizedLatent> {
    let shape = to_shape(z)?;
    let values = z
        .data()
        .iter()
        .map(|&t| {
            let t = t.as_f64();
            if !t.is_finite() {
                return checked(t);
            }
            let floor = t.floor();
            let up = rng.uniform() < t - floor;
            checked(if up { floor + 1.0 } else { floor })
        })
        .collect::<Result<Vec<_>>>()?;
    QuantizedLatent::new(shape, values)
}

/// Round to nearest, ties away from zero.
pub fn quantize_deterministic<T: Scalar>(z: &Tensor<T>) -> Result<QuantizedLatent> {
    let shape = to_shape(z)?;
    let values = z
        .data()
        .iter()
        .map(|&t| checked(t.as_f64().round()))
        .collect::<Result<Vec<_>>>()?;
    QuantizedLatent::new(shape, values)
}

/// Backward rule of the quantizer: the gradient of its expectation, i.e. identity.
pub fn quantize_grad_passthrough<T: Scalar>(upstream: &Tensor<T>) -> Tensor<T> {
    upstream.clone()
}

/// Records `q` on the tape as the quantized version of `z`.
pub fn quantize_on_tape<T: Scalar>(tape: &mut Tape<T>, z: Var, q: &QuantizedLatent) -> Result<Var> {
    tape.straight_through(z, q.to_tensor())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![1, 1, 1, data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn integers_are_fixed_points() {
        let mut rng = RngStream::new(3);
        for _ in 0..100 {
            let q = quantize_stochastic(&t(&[2.0, -3.0, 0.0]), &mut rng).unwrap();
            assert_eq!(q.values(), &[2, -3, 0]);
        }
        assert_eq!(quantize_deterministic(&t(&[2.0, -3.0])).unwrap().values(), &[2, -3]);
    }

    #[test]
    fn stochastic_picks_floor_or_ceil() {
        let mut rng = RngStream::new(11);
        let q = quantize_stochastic(&t(&[-0.3; 1000]), &mut rng).unwrap();
        assert!(q.values().iter().all(|&v| v == -1 || v == 0));
        let zeros = q.values().iter().filter(|&&v| v == 0).count();
        assert!((600..800).contains(&zeros), "{zeros}");
    }

    #[test]
    fn nearest_with_ties_away_from_zero() {
        let q = quantize_deterministic(&t(&[1.25, 1.5, -1.5, -0.49, 2.5])).unwrap();
        assert_eq!(q.values(), &[1, 2, -2, 0, 3]);
    }

    #[test]
    fn non_finite_rejected() {
        let mut rng = RngStream::new(0);
        assert!(matches!(
            quantize_stochastic(&t(&[f64::NAN]), &mut rng),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            quantize_deterministic(&t(&[f64::INFINITY])),
            Err(Error::Contract(_))
        ));
        assert!(quantize_deterministic(&t(&[3e9])).is_err());
    }

    #[test]
    fn same_key_same_draws() {
        let z = Tensor::from_fn(&[2, 3, 2, 2], |i| (i as f64 * 0.37).sin() * 3.0);
        let a = quantize_stochastic(&z, &mut RngStream::keyed(5, 2, 7)).unwrap();
        let b = quantize_stochastic(&z, &mut RngStream::keyed(5, 2, 7)).unwrap();
        let c = quantize_stochastic(&z, &mut RngStream::keyed(5, 2, 8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn passthrough_is_identity() {
        let g = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f32 * 0.5 - 1.0);
        assert_eq!(quantize_grad_passthrough(&g), g);
        let zero = Tensor::<f32>::zeros(&[1, 2, 2, 2]);
        assert_eq!(quantize_grad_passthrough(&zero), zero);
    }
}
