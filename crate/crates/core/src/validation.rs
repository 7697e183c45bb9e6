//! Finite-difference checks of every differentiable op, the composite losses,
//! the quantizer's pass-through rule, and a self-test of the checker itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::admm::admm_penalty;
use crate::autodiff::{grad_check, BnOptions, GradCheckConfig, OpKind, PadMode, Tape, Var};
use crate::error::Result;
use crate::metrics::{distortion_loss, mse_on_tape, ssim_on_tape, LossWeights, MsSsimParams, SsimParams};
use crate::model::{Cae, CaeConfig, Mode};
use crate::quantizer::{quantize_on_tape, quantize_stochastic, RngStream};
use crate::tensor::Tensor;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;
/// Error the checker must report for a deliberately broken backward rule.
pub const FAULT_THRESHOLD: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Largest relative error over all seeds (absolute difference for the
    /// pass-through check, detected error for the self-test).
    pub error: f64,
    pub tolerance: f64,
    pub seeds: usize,
    pub passed: bool,
}

type Inputs = Vec<Tensor<f64>>;
type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Inputs,
    build: Build,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values with `lo <= |v| < hi` and random sign, keeping clear of kinks at 0.
fn signed_away(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v = rng.gen_range(lo..hi);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// `sum(out ⊙ w)` for fixed random `w`, so that every output coordinate
/// contributes with its own O(1) weight.
fn weighted(tape: &mut Tape<f64>, out: Var, w: &[f64]) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let wt = tape.constant(Tensor::new(shape, w[..n].to_vec())?);
    let p = tape.mul(out, wt)?;
    Ok(tape.sum(p))
}

fn weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn conv_case(rng: &mut ChaCha8Rng, mode: PadMode) -> Case {
    let n = rng.gen_range(1..=2);
    let cin = rng.gen_range(1..=3);
    let cout = rng.gen_range(1..=4);
    let k = [1, 3, 5][rng.gen_range(0..3)];
    let stride = rng.gen_range(1..=2);
    let h = rng.gen_range(k.max(3)..=8);
    let w = rng.gen_range(k.max(3)..=8);
    let pad = match mode {
        PadMode::Reflect => (k / 2).min(h - 1).min(w - 1),
        PadMode::Zero => rng.gen_range(0..=2),
    };
    let wts = weights(rng, 4096);
    Case {
        inputs: vec![
            uniform(rng, &[n, cin, h, w], -1.0, 1.0),
            uniform(rng, &[cout, cin, k, k], -1.0, 1.0),
            uniform(rng, &[cout], -0.5, 0.5),
        ],
        build: Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad, mode)?;
            weighted(t, y, &wts)
        }),
    }
}

fn bn_case(rng: &mut ChaCha8Rng, train: bool) -> Case {
    let n = rng.gen_range(2..=4);
    let c = rng.gen_range(1..=3);
    let (h, w) = (rng.gen_range(2..=5), rng.gen_range(2..=5));
    let mean: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
    let wts = weights(rng, 4096);
    Case {
        inputs: vec![
            uniform(rng, &[n, c, h, w], -2.0, 2.0),
            uniform(rng, &[c], 0.5, 1.5),
            uniform(rng, &[c], -0.5, 0.5),
        ],
        build: Box::new(move |t, v| {
            let y = if train {
                t.batchnorm2d_train(v[0], v[1], v[2], None, BnOptions::default())?
            } else {
                t.batchnorm2d_eval(v[0], v[1], v[2], &mean, &var, BnOptions::default())?
            };
            weighted(t, y, &wts)
        }),
    }
}

fn random_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![
        rng.gen_range(1..=2),
        rng.gen_range(1..=3),
        rng.gen_range(1..=5),
        rng.gen_range(1..=5),
    ]
}

/// Unary op on one input drawn from `[lo, hi)` (sign-symmetric when `signed`).
fn unary_case(
    rng: &mut ChaCha8Rng,
    lo: f64,
    hi: f64,
    signed: bool,
    f: impl Fn(&mut Tape<f64>, Var) -> Result<Var> + 'static,
) -> Case {
    let shape = random_shape(rng);
    let x = if signed {
        signed_away(rng, &shape, lo, hi)
    } else {
        uniform(rng, &shape, lo, hi)
    };
    let wts = weights(rng, 4096);
    Case {
        inputs: vec![x],
        build: Box::new(move |t, v| {
            let y = f(t, v[0])?;
            if t.value(y).is_scalar() {
                Ok(y)
            } else {
                weighted(t, y, &wts)
            }
        }),
    }
}

fn binary_case(rng: &mut ChaCha8Rng, f: fn(&mut Tape<f64>, Var, Var) -> Result<Var>, denom: bool) -> Case {
    let shape = random_shape(rng);
    let a = uniform(rng, &shape, -2.0, 2.0);
    // Every third case broadcasts a scalar operand, alternating sides.
    let b_shape = if rng.gen_range(0..3) == 0 { vec![1] } else { shape.clone() };
    let b = if denom {
        signed_away(rng, &b_shape, 0.5, 2.0)
    } else {
        uniform(rng, &b_shape, -2.0, 2.0)
    };
    let swap = !denom && b_shape.len() == 1 && rng.gen_bool(0.5);
    let wts = weights(rng, 4096);
    Case {
        inputs: if swap { vec![b, a] } else { vec![a, b] },
        build: Box::new(move |t, v| {
            let y = f(t, v[0], v[1])?;
            weighted(t, y, &wts)
        }),
    }
}

fn image_pair(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Inputs {
    let x = uniform(rng, &[n, 3, size, size], 0.0, 1.0);
    let noise = uniform(rng, &[n, 3, size, size], -0.2, 0.2);
    let y = x.zip_map(&noise, |a, b| (a + b).clamp(0.0, 1.0)).expect("same shape");
    vec![x, y]
}

fn case_for(name: &str, rng: &mut ChaCha8Rng) -> Case {
    match name {
        "conv2d_reflect" => conv_case(rng, PadMode::Reflect),
        "conv2d_zero" => conv_case(rng, PadMode::Zero),
        "batchnorm2d_train" => bn_case(rng, true),
        "batchnorm2d_eval" => bn_case(rng, false),
        "prelu" => {
            let shape = random_shape(rng);
            let wts = weights(rng, 4096);
            Case {
                inputs: vec![
                    signed_away(rng, &shape, 0.05, 2.0),
                    uniform(rng, &[shape[1]], 0.0, 0.5),
                ],
                build: Box::new(move |t, v| {
                    let y = t.prelu(v[0], v[1])?;
                    weighted(t, y, &wts)
                }),
            }
        }
        "pixel_shuffle" | "pixel_unshuffle" => {
            let r = rng.gen_range(1..=3);
            let (n, c, h, w) = (rng.gen_range(1..=2), rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
            let shuffle = name == "pixel_shuffle";
            let shape = if shuffle { [n, c * r * r, h, w] } else { [n, c, h * r, w * r] };
            let wts = weights(rng, 4096);
            Case {
                inputs: vec![uniform(rng, &shape, -1.0, 1.0)],
                build: Box::new(move |t, v| {
                    let y = if shuffle {
                        t.pixel_shuffle(v[0], r)?
                    } else {
                        t.pixel_unshuffle(v[0], r)?
                    };
                    weighted(t, y, &wts)
                }),
            }
        }
        "add" => binary_case(rng, |t, a, b| t.add(a, b), false),
        "sub" => binary_case(rng, |t, a, b| t.sub(a, b), false),
        "mul" => binary_case(rng, |t, a, b| t.mul(a, b), false),
        "div" => binary_case(rng, |t, a, b| t.div(a, b), true),
        "scale" => {
            let s = rng.gen_range(-2.0..2.0);
            unary_case(rng, -2.0, 2.0, false, move |t, a| Ok(t.scale(a, s)))
        }
        "add_scalar" => {
            let s = rng.gen_range(-2.0..2.0);
            unary_case(rng, -2.0, 2.0, false, move |t, a| Ok(t.add_scalar(a, s)))
        }
        "sum" => unary_case(rng, -2.0, 2.0, false, |t, a| Ok(t.sum(a))),
        "mean" => unary_case(rng, -2.0, 2.0, false, |t, a| Ok(t.mean(a))),
        "sum_of_squares" => unary_case(rng, -2.0, 2.0, false, |t, a| Ok(t.sum_of_squares(a))),
        "reshape" => unary_case(rng, -2.0, 2.0, false, |t, a| {
            let n = t.value(a).numel();
            t.reshape(a, &[n])
        }),
        "powf" => {
            let p = rng.gen_range(0.5..2.5);
            unary_case(rng, 0.2, 2.0, false, move |t, a| Ok(t.powf(a, p)))
        }
        "clamp_min" => unary_case(rng, 0.05, 2.0, true, |t, a| Ok(t.clamp_min(a, 0.0))),
        "ln" => unary_case(rng, 0.3, 3.0, false, |t, a| Ok(t.ln(a))),
        "avg_pool2" => {
            let shape = [rng.gen_range(1..=2), rng.gen_range(1..=3), 2 * rng.gen_range(1..=3), 2 * rng.gen_range(1..=3)];
            let wts = weights(rng, 4096);
            Case {
                inputs: vec![uniform(rng, &shape, -1.0, 1.0)],
                build: Box::new(move |t, v| {
                    let y = t.avg_pool2(v[0])?;
                    weighted(t, y, &wts)
                }),
            }
        }
        "separable_filter" => {
            let k = rng.gen_range(1..=5);
            let kernel: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..1.0)).collect();
            let shape = [rng.gen_range(1..=2), rng.gen_range(1..=2), rng.gen_range(k..=k + 4), rng.gen_range(k..=k + 4)];
            let wts = weights(rng, 4096);
            Case {
                inputs: vec![uniform(rng, &shape, -1.0, 1.0)],
                build: Box::new(move |t, v| {
                    let y = t.separable_filter(v[0], &kernel)?;
                    weighted(t, y, &wts)
                }),
            }
        }
        // Replacing a value by itself: the forward map is the identity, so
        // finite differences see exactly the pass-through rule.
        "straight_through" => unary_case(rng, -2.0, 2.0, false, |t, a| {
            let same = t.value(a).clone();
            t.straight_through(a, same)
        }),
        "conv_prelu_mean" => {
            let (n, c, h, w) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(4..=7), rng.gen_range(4..=7));
            let cout = rng.gen_range(1..=3);
            Case {
                inputs: vec![
                    uniform(rng, &[n, c, h, w], -1.0, 1.0),
                    uniform(rng, &[cout, c, 3, 3], -1.0, 1.0),
                    uniform(rng, &[cout], -0.1, 0.1),
                    uniform(rng, &[cout], 0.1, 0.4),
                ],
                build: Box::new(|t, v| {
                    let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1, PadMode::Reflect)?;
                    let y = t.prelu(y, v[3])?;
                    Ok(t.mean(y))
                }),
            }
        }
        "admm_penalty" => {
            let shape = random_shape(rng);
            let z = uniform(rng, &shape, -2.0, 2.0);
            let u = uniform(rng, &shape, -1.0, 1.0);
            let rho = rng.gen_range(0.01..2.0);
            Case {
                inputs: vec![uniform(rng, &shape, -2.0, 2.0)],
                build: Box::new(move |t, v| admm_penalty(t, v[0], &z, &u, rho)),
            }
        }
        "mse" => Case {
            inputs: image_pair(rng, 1, 6),
            build: Box::new(|t, v| mse_on_tape(t, v[0], v[1])),
        },
        // A 7-tap window keeps every pixel's gradient well above the
        // finite-difference noise floor; the default window is covered by
        // `distortion_loss`.
        "ssim" => Case {
            inputs: image_pair(rng, 1, 9),
            build: Box::new(|t, v| {
                let p = SsimParams {
                    window_size: 7,
                    ..SsimParams::default()
                };
                ssim_on_tape(t, v[0], v[1], &p)
            }),
        },
        "distortion_loss" => Case {
            inputs: image_pair(rng, 1, 32),
            build: Box::new(|t, v| {
                let w = LossWeights {
                    mse: 1.0,
                    ssim: 0.5,
                    ms_ssim: 0.5,
                };
                distortion_loss(t, v[0], v[1], &w, &MsSsimParams::default())
            }),
        },
        other => panic!("no gradient case named {other}"),
    }
}

/// Every op of the engine, with its tolerance and the number of coordinates
/// sampled per input (all when `None`).
pub const CHECKS: &[(&str, f64, Option<usize>)] = &[
    ("conv2d_reflect", OP_TOLERANCE, Some(60)),
    ("conv2d_zero", OP_TOLERANCE, Some(60)),
    ("batchnorm2d_train", OP_TOLERANCE, None),
    ("batchnorm2d_eval", OP_TOLERANCE, None),
    ("prelu", OP_TOLERANCE, None),
    ("pixel_shuffle", OP_TOLERANCE, None),
    ("pixel_unshuffle", OP_TOLERANCE, None),
    ("add", OP_TOLERANCE, None),
    ("sub", OP_TOLERANCE, None),
    ("mul", OP_TOLERANCE, None),
    ("div", OP_TOLERANCE, None),
    ("scale", OP_TOLERANCE, None),
    ("add_scalar", OP_TOLERANCE, None),
    ("sum", OP_TOLERANCE, None),
    ("mean", OP_TOLERANCE, None),
    ("sum_of_squares", OP_TOLERANCE, None),
    ("reshape", OP_TOLERANCE, None),
    ("powf", OP_TOLERANCE, None),
    ("clamp_min", OP_TOLERANCE, None),
    ("ln", OP_TOLERANCE, None),
    ("avg_pool2", OP_TOLERANCE, None),
    ("separable_filter", OP_TOLERANCE, None),
    ("straight_through", OP_TOLERANCE, None),
    ("conv_prelu_mean", OP_TOLERANCE, Some(60)),
    ("admm_penalty", OP_TOLERANCE, None),
    ("mse", OP_TOLERANCE, None),
    ("ssim", COMPOSITE_TOLERANCE, None),
    ("distortion_loss", COMPOSITE_TOLERANCE, Some(40)),
];

/// The op kind each check exercises, for the fault self-test.
pub fn kind_of(name: &str) -> Option<OpKind> {
    Some(match name {
        "conv2d_reflect" | "conv2d_zero" => OpKind::Conv2d,
        "batchnorm2d_train" => OpKind::BatchNormTrain,
        "batchnorm2d_eval" => OpKind::BatchNormEval,
        "prelu" => OpKind::Prelu,
        "pixel_shuffle" => OpKind::PixelShuffle,
        "pixel_unshuffle" => OpKind::PixelUnshuffle,
        "add" => OpKind::Add,
        "sub" => OpKind::Sub,
        "mul" => OpKind::Mul,
        "div" => OpKind::Div,
        "scale" => OpKind::Scale,
        "add_scalar" => OpKind::AddScalar,
        "sum" => OpKind::Sum,
        "mean" => OpKind::Mean,
        "sum_of_squares" => OpKind::SumSquares,
        "reshape" => OpKind::Reshape,
        "powf" => OpKind::Powf,
        "clamp_min" => OpKind::ClampMin,
        "ln" => OpKind::Ln,
        "avg_pool2" => OpKind::AvgPool2,
        "separable_filter" => OpKind::SeparableFilter,
        "straight_through" => OpKind::StraightThrough,
        _ => return None,
    })
}

fn case_rng(name: &str, seed: u64) -> ChaCha8Rng {
    let tag = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    ChaCha8Rng::seed_from_u64(tag ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Runs one named check over `seeds` random instances.
pub fn run_check(name: &str, tolerance: f64, max_coords: Option<usize>, seeds: usize, fault: Option<OpKind>) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for seed in 0..seeds as u64 {
        let case = case_for(name, &mut case_rng(name, seed));
        let build = &case.build;
        let cfg = GradCheckConfig {
            max_coords,
            seed,
            ..GradCheckConfig::default()
        };
        let err = grad_check(
            |t, v| {
                if let Some(k) = fault {
                    t.inject_fault(k);
                }
                build(t, v)
            },
            &case.inputs,
            &cfg,
        )?;
        worst = worst.max(err);
    }
    Ok(CheckResult {
        name: name.to_owned(),
        error: worst,
        tolerance,
        seeds,
        passed: worst <= tolerance,
    })
}

/// A tiny model for graph-level checks on 16×16 inputs.
pub fn toy_config(seed: u64) -> CaeConfig {
    CaeConfig {
        base_channels: 4,
        latent_channels: 3,
        n_residual_blocks: 1,
        n_down_pre: 2,
        n_down_post: 1,
        seed,
    }
}

/// Parameter gradients of `mean((D(Q(E(x))) - x)^2)` computed two ways: through
/// the quantizer node, and by differentiating the decoder at the quantized
/// value and pushing that gradient into the encoder unchanged. Returns the
/// largest absolute difference.
pub fn quantizer_passthrough_difference(seed: u64) -> Result<f64> {
    let model = Cae::<f64>::new(toy_config(seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, &[2, 3, 16, 16], 0.0, 1.0);

    let mut full = Tape::new();
    let mut p_full = model.params().clone();
    let xv = full.constant(x.clone());
    let z = model.encode_frozen(&mut full, xv, Mode::Train)?;
    let q = quantize_stochastic(full.value(z), &mut RngStream::keyed(seed, 0, 0))?;
    let qv = quantize_on_tape(&mut full, z, &q)?;
    let xh = model.decode_frozen(&mut full, qv, Mode::Train)?;
    let loss = mse_on_tape(&mut full, xv, xh)?;
    full.backward(loss)?;
    p_full.zero_grad();
    full.accumulate_param_grads(&mut p_full)?;

    let mut p_split = model.params().clone();
    p_split.zero_grad();
    let mut dec = Tape::new();
    let xd = dec.constant(x.clone());
    let zq = dec.leaf(q.to_tensor());
    let xh = model.decode_frozen(&mut dec, zq, Mode::Train)?;
    let loss = mse_on_tape(&mut dec, xd, xh)?;
    dec.backward(loss)?;
    dec.accumulate_param_grads(&mut p_split)?;
    let g_z = dec.grad(zq).cloned().expect("latent leaf receives a gradient");
    let mut enc = Tape::new();
    let xe = enc.constant(x);
    let z = model.encode_frozen(&mut enc, xe, Mode::Train)?;
    enc.backward_from(z, g_z)?;
    enc.accumulate_param_grads(&mut p_split)?;

    let mut worst = 0.0f64;
    for (a, b) in p_full.iter().zip(p_split.iter()) {
        for (x, y) in a.grad.data().iter().zip(b.grad.data()) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(worst)
}

/// The whole suite: every op and composite, the quantizer pass-through
/// contract, and the fault self-test.
pub fn run_suite(seeds: usize) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for &(name, tol, coords) in CHECKS {
        out.push(run_check(name, tol, coords, seeds, None)?);
    }
    let mut diff = 0.0f64;
    for s in 0..seeds.min(5) as u64 {
        diff = diff.max(quantizer_passthrough_difference(s)?);
    }
    out.push(CheckResult {
        name: "quantizer_passthrough".into(),
        error: diff,
        tolerance: 0.0,
        seeds: seeds.min(5),
        passed: diff == 0.0,
    });
    let fault = run_check("conv2d_reflect", OP_TOLERANCE, Some(60), 3, Some(OpKind::Conv2d))?;
    out.push(CheckResult {
        name: "fault_self_test".into(),
        passed: fault.error > FAULT_THRESHOLD,
        tolerance: FAULT_THRESHOLD,
        ..fault
    });
    Ok(out)
}
