use cae_admm::autodiff::Tape;
use cae_admm::metrics::mse_on_tape;
use cae_admm::model::{Cae, CaeConfig, Mode};
use cae_admm::quantizer::{quantize_on_tape, quantize_stochastic, RngStream};
use cae_admm::tensor::Tensor;
use cae_admm::validation::toy_config;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Trainable parameter count from the layer list: conv `k·k·cin·cout + cout`,
/// batch norm `2c`, PReLU `c`.
fn shape_walk(cfg: &CaeConfig) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| k * k * cin * cout + cout;
    let (c, cz) = (cfg.base_channels, cfg.latent_channels);
    let bn_act = |ch: usize| 3 * ch;
    let plain = |cin: usize, cout: usize, k: usize| conv(cin, cout, k) + bn_act(cout);
    let residual = 2 * conv(c, c, 3) + 2 * 2 * c + c;
    let up = conv(c, 4 * c, 3) + bn_act(c);

    let mut n = plain(3, c, 5) + (cfg.n_down_pre - 1) * plain(c, c, 3);
    n += cfg.n_residual_blocks * residual;
    n += cfg.n_down_post * plain(c, c, 3) + conv(c, cz, 3);
    n += plain(cz, c, 3) + cfg.n_down_post * up;
    n += cfg.n_residual_blocks * residual;
    n += cfg.n_down_pre * up + conv(c, 3, 5);
    n
}

#[test]
fn parameter_count_matches_shape_walk() {
    let default = CaeConfig::default();
    let model = Cae::<f32>::new(default).unwrap();
    assert_eq!(model.params().numel(), shape_walk(&default));
    for cfg in [toy_config(0), cae_admm::trainer::Profile::desk().model] {
        assert_eq!(Cae::<f32>::new(cfg).unwrap().params().numel(), shape_walk(&cfg));
    }
}

#[test]
fn default_config_latent_shapes() {
    let model = Cae::<f32>::new(CaeConfig::default()).unwrap();
    assert_eq!(model.latent_shape(1, 128, 128).unwrap(), [1, 32, 4, 4]);
    assert_eq!(model.latent_shape(1, 64, 64).unwrap(), [1, 32, 2, 2]);
    assert!(model.latent_shape(1, 48, 64).is_err());
}

#[test]
fn latent_numel_for_random_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..10 {
        let cfg = CaeConfig {
            base_channels: rng.gen_range(1..6),
            latent_channels: rng.gen_range(1..6),
            n_residual_blocks: rng.gen_range(0..2),
            n_down_pre: rng.gen_range(1..3),
            n_down_post: rng.gen_range(0..2),
            seed: rng.gen(),
        };
        let f = 1usize << (cfg.n_down_pre + cfg.n_down_post);
        let (n, h, w) = (rng.gen_range(1..3), f * rng.gen_range(2..4), f * rng.gen_range(2..4));
        let model = Cae::<f32>::new(cfg).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[n, 3, h, w], |i| (i as f32 * 0.37).sin() * 0.5 + 0.5));
        let z = model.encode_frozen(&mut tape, x, Mode::Eval).unwrap();
        let numel = n * 3 * h * w / 3 * cfg.latent_channels / (f * f);
        assert_eq!(tape.value(z).numel(), numel, "{cfg:?}");
        let y = model.decode_frozen(&mut tape, z, Mode::Eval).unwrap();
        assert_eq!(tape.value(y).shape(), &[n, 3, h, w]);
    }
}

#[test]
fn same_seed_same_parameters() {
    let cfg = toy_config(9);
    assert_eq!(
        Cae::<f32>::new(cfg).unwrap().params(),
        Cae::<f32>::new(cfg).unwrap().params()
    );
    let other = CaeConfig { seed: 10, ..cfg };
    assert_ne!(Cae::<f32>::new(cfg).unwrap().params(), Cae::<f32>::new(other).unwrap().params());
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

fn reconstruction_loss(model: &Cae<f64>, x: &Tensor<f64>) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let z = model.encode_frozen(&mut tape, xv, Mode::Train).unwrap();
    let y = model.decode_frozen(&mut tape, z, Mode::Train).unwrap();
    let l = mse_on_tape(&mut tape, xv, y).unwrap();
    tape.scalar(l)
}

/// Encoder parameter gradients of the 16×16 toy against central differences
/// (quantizer replaced by the identity, which is what its backward rule is).
#[test]
fn encoder_gradients_match_finite_differences() {
    let cfg = toy_config(4);
    let model = Cae::<f64>::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::from_fn(&[2, 3, 16, 16], |_| rng.gen_range(0.0..1.0));

    let mut params = model.params().clone();
    params.zero_grad();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let z = model.encode_frozen(&mut tape, xv, Mode::Train).unwrap();
    let y = model.decode_frozen(&mut tape, z, Mode::Train).unwrap();
    let l = mse_on_tape(&mut tape, xv, y).unwrap();
    tape.backward(l).unwrap();
    tape.accumulate_param_grads(&mut params).unwrap();

    // The latent conv's bias is not checked: the decoder's first batch norm
    // cancels it, so its gradient is exactly zero.
    let h = 1e-5;
    let mut worst = 0.0f64;
    let names = ["enc.pre0.conv.weight", "enc.res0.bn1.gamma", "enc.post0.act.slope", "enc.out.conv.weight"];
    for name in names {
        let p = params.by_name(name).unwrap_or_else(|| panic!("{name}"));
        let id = params.id_of(name).unwrap();
        for _ in 0..6 {
            let i = rng.gen_range(0..p.value.numel());
            let bump = |d: f64| {
                let mut m = model.clone();
                m.params_mut().get_mut(id).value.data_mut()[i] += d;
                reconstruction_loss(&m, &x)
            };
            let numeric = (bump(h) - bump(-h)) / (2.0 * h);
            worst = worst.max(relative_error(p.grad.data()[i], numeric));
        }
    }
    assert!(worst <= 1e-4, "worst relative error {worst}");

    // The same parameters receive a gradient through the quantizer node.
    let mut qparams = model.params().clone();
    qparams.zero_grad();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let z = model.encode_frozen(&mut tape, xv, Mode::Train).unwrap();
    let q = quantize_stochastic(tape.value(z), &mut RngStream::keyed(4, 0, 0)).unwrap();
    let qv = quantize_on_tape(&mut tape, z, &q).unwrap();
    let y = model.decode_frozen(&mut tape, qv, Mode::Train).unwrap();
    let l = mse_on_tape(&mut tape, xv, y).unwrap();
    tape.backward(l).unwrap();
    tape.accumulate_param_grads(&mut qparams).unwrap();
    for name in names {
        let g = &qparams.by_name(name).unwrap().grad;
        assert!(g.data().iter().any(|&v| v != 0.0), "{name} has no gradient");
    }
}

#[test]
fn residual_free_model_runs() {
    let cfg = CaeConfig {
        n_residual_blocks: 0,
        ..toy_config(1)
    };
    let model = Cae::<f32>::new(cfg).unwrap();
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&model.latent_shape(1, 16, 16).unwrap()));
    let y = model.decode_frozen(&mut tape, z, Mode::Eval).unwrap();
    assert!(tape.value(y).data().iter().all(|v| v.is_finite()));
}
