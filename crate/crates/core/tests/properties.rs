use cae_admm::admm::{admm_penalty, card, project_cardinality, update_u, update_z};
use cae_admm::autodiff::Tape;
use cae_admm::codec::{decode_latent, encode_latent, unzigzag, zigzag};
use cae_admm::quantizer::{quantize_deterministic, quantize_stochastic, QuantizedLatent, RngStream};
use cae_admm::tensor::Tensor;
use proptest::prelude::*;

/// Smallest `||v - z||²` over supports of size `min(ell, n)`, by enumeration.
/// Ties go to the lexicographically smallest support bitmask in index order.
fn best_subset(v: &[f64], ell: usize) -> Vec<f64> {
    let n = v.len();
    let k = ell.min(n);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let support: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        let cost: f64 = (0..n).filter(|i| mask >> i & 1 == 0).map(|i| v[i] * v[i]).sum();
        let better = match &best {
            None => true,
            Some((c, s)) => cost < *c || (cost == *c && support < *s),
        };
        if better {
            best = Some((cost, support));
        }
    }
    let (_, support) = best.unwrap();
    (0..n).map(|i| if support.contains(&i) { v[i] } else { 0.0 }).collect()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

proptest! {
    #[test]
    fn projection_is_the_euclidean_projection(v in prop::collection::vec(-10i32..10, 1..=12), ell in 1usize..14) {
        // Small integers make magnitude ties common.
        let v: Vec<f64> = v.into_iter().map(f64::from).collect();
        let p = project_cardinality(&v, ell);
        let oracle = best_subset(&v, ell);
        prop_assert_eq!(dist2(&v, &p), dist2(&v, &oracle));
        prop_assert_eq!(&p, &oracle);
        prop_assert!(card(&p) <= ell);
        prop_assert_eq!(project_cardinality(&p, ell), p);
    }

    #[test]
    fn z_update_is_feasible(q in prop::collection::vec(-5.0f64..5.0, 1..40), ell in 1usize..40, seed in any::<u64>()) {
        let u: Vec<f64> = (0..q.len()).map(|i| ((seed.wrapping_add(i as u64) % 97) as f64 - 48.0) / 10.0).collect();
        let z = update_z(&q, &u, ell).unwrap();
        prop_assert!(card(&z) <= ell);
        let sum: Vec<f64> = q.iter().zip(&u).map(|(a, b)| a + b).collect();
        prop_assert_eq!(&z, &project_cardinality(&sum, ell));
        let u2 = update_u(&u, &q, &z).unwrap();
        for i in 0..q.len() {
            prop_assert_eq!(u2[i], u[i] + (q[i] - z[i]));
        }
    }

    #[test]
    fn penalty_is_non_negative(q in prop::collection::vec(-5.0f64..5.0, 1..20), rho in 1e-4f64..10.0) {
        let n = q.len();
        let z = Tensor::new(vec![n], q.iter().map(|v| v * 0.5).collect()).unwrap();
        let u = Tensor::new(vec![n], q.iter().map(|v| v * -0.25).collect()).unwrap();
        let mut tape = Tape::new();
        let qv = tape.leaf(Tensor::new(vec![n], q.clone()).unwrap());
        let p = admm_penalty(&mut tape, qv, &z, &u, rho).unwrap();
        let expected: f64 = q.iter().map(|v| (v - 0.5 * v - 0.25 * v).powi(2)).sum::<f64>() * rho / 2.0;
        prop_assert!(tape.scalar(p) >= 0.0);
        prop_assert!((tape.scalar(p) - expected).abs() <= 1e-12 * expected.max(1.0));
    }

    #[test]
    fn zigzag_round_trip(v in any::<i32>()) {
        prop_assert_eq!(unzigzag(zigzag(v)), v);
    }

    #[test]
    fn codec_round_trip(c in 1usize..16, h in 1usize..6, w in 1usize..6, density in 0.0f64..1.0, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed);
        let values: Vec<i32> = (0..c * h * w)
            .map(|_| if rng.uniform() < density { (rng.uniform() * 200.0) as i32 - 100 } else { 0 })
            .collect();
        let q = QuantizedLatent::new([1, c, h, w], values).unwrap().with_source(h * 8 - 3, w * 8);
        let bytes = encode_latent(&q).unwrap();
        prop_assert_eq!(decode_latent(&bytes).unwrap(), q);
        prop_assert!(bytes.len() <= 16 + 4 * c * h * w);
    }

    #[test]
    fn decoder_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..200), header in any::<bool>()) {
        let mut b = bytes;
        if header && b.len() >= 5 {
            b[..5].copy_from_slice(b"CAEA\x01");
        }
        let _ = decode_latent(&b);
    }

    #[test]
    fn stochastic_rounding_brackets_the_input(t in prop::collection::vec(-50.0f64..50.0, 1..30), seed in any::<u64>()) {
        let n = t.len();
        let z = Tensor::new(vec![1, n, 1, 1], t.clone()).unwrap();
        let q = quantize_stochastic(&z, &mut RngStream::new(seed)).unwrap();
        let d = quantize_deterministic(&z).unwrap();
        for i in 0..n {
            let v = q.values()[i] as f64;
            prop_assert!(v == t[i].floor() || v == t[i].floor() + 1.0, "{} -> {}", t[i], v);
            prop_assert!((d.values()[i] as f64 - t[i]).abs() <= 0.5);
        }
    }
}

fn quadratic(c: Vec<f64>) -> impl Fn(&[f64]) -> (f64, Vec<f64>) {
    move |x: &[f64]| {
        let v = x.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
        (v, x.iter().zip(&c).map(|(a, b)| 2.0 * (a - b)).collect())
    }
}

#[test]
fn toy_without_active_constraint_matches_gradient_descent() {
    use cae_admm::admm::{run_admm_toy, ToyConfig};
    let c = vec![1.5, -0.7, 0.2, 3.0];
    let res = run_admm_toy(
        quadratic(c.clone()),
        &ToyConfig {
            dim: 4,
            ell: 4,
            rho: 0.5,
            k_m: 200,
            inner_steps: 10,
            lr: 0.1,
        },
    )
    .unwrap();
    // Plain gradient descent on the same objective.
    let mut x = vec![0.0; 4];
    for _ in 0..2000 {
        for i in 0..4 {
            x[i] -= 0.1 * 2.0 * (x[i] - c[i]);
        }
    }
    for i in 0..4 {
        assert!((res.x[i] - x[i]).abs() < 1e-6, "{:?} vs {x:?}", res.x);
        assert!((res.z[i] - c[i]).abs() < 1e-6);
    }
}

#[test]
fn toy_residual_settles() {
    use cae_admm::admm::{run_admm_toy, ToyConfig};
    let res = run_admm_toy(
        quadratic(vec![4.0, -0.5, 0.3, 2.5, -1.0, 0.1]),
        &ToyConfig {
            dim: 6,
            ell: 2,
            rho: 4.0,
            k_m: 200,
            inner_steps: 20,
            lr: 0.1,
        },
    )
    .unwrap();
    let tail = &res.residuals[res.residuals.len() / 2..];
    let rises = tail.windows(2).filter(|w| w[1] > w[0] * (1.0 + 1e-12)).count();
    assert!(rises as f64 <= 0.05 * tail.len() as f64, "{tail:?}");
    assert_eq!(card(&res.z), 2);
}
