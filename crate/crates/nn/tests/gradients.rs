//! Analytic gradients against central finite differences, per layer type and
//! over randomized model shapes.

use std::time::Instant;

use iqband_nn::gradcheck::{check_gradients, param_sample, random_spec, relative_error};
use iqband_nn::{Activation, Layer, Mode, ModelSpec, Network, Shape3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random_batch(rng: &mut ChaCha8Rng, net: &Network<f64>, n: usize) -> (Vec<f64>, Vec<usize>) {
    let x = (0..n * net.input_size())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let labels = (0..n).map(|_| rng.random_range(0..net.num_classes())).collect();
    (x, labels)
}

fn check_spec(spec: &ModelSpec, seed: u64, mode: Mode) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Network::<f64>::new(spec, seed).unwrap();
    let n = rng.random_range(1..=20);
    let (x, labels) = random_batch(&mut rng, &net, n);
    let idx = param_sample(&net, 400);
    let report = check_gradients(&net, &x, &labels, mode, seed ^ 0xd00d, H, &idx).unwrap();
    assert!(report.kinks <= report.checked, "mostly kinks: {report:?}");
    assert!(
        report.max_rel_error < TOL,
        "spec {} seed {seed}: rel error {} at param {}",
        spec.summary(),
        report.max_rel_error,
        report.worst_param
    );
    report.max_rel_error
}

fn head(input: Shape3, body: Vec<Layer>) -> ModelSpec {
    let mut layers = body;
    layers.push(Layer::Softmax { classes: 3 });
    ModelSpec::new(input, layers)
}

#[test]
fn conv_every_activation_full_and_partial_width() {
    for (i, act) in [Activation::Relu, Activation::Tanh, Activation::Sigmoid, Activation::Linear]
        .into_iter()
        .enumerate()
    {
        for fw in [1, 2] {
            let spec = head(
                Shape3::new(14, 2, 3),
                vec![
                    Layer::Conv {
                        filters: 4,
                        filter_len: 5,
                        filter_width: fw,
                        activation: act,
                    },
                    Layer::Flatten,
                ],
            );
            check_spec(&spec, 100 + i as u64 * 2 + fw as u64, Mode::Eval);
        }
    }
}

#[test]
fn stacked_conv_pool_blocks() {
    let spec = head(
        Shape3::new(40, 2, 2),
        vec![
            Layer::Conv {
                filters: 5,
                filter_len: 6,
                filter_width: 2,
                activation: Activation::Tanh,
            },
            Layer::MaxPool { pool: 3, stride: 2 },
            Layer::Conv {
                filters: 3,
                filter_len: 4,
                filter_width: 1,
                activation: Activation::Sigmoid,
            },
            Layer::MaxPool { pool: 2, stride: 2 },
            Layer::Flatten,
        ],
    );
    check_spec(&spec, 11, Mode::Eval);
}

#[test]
fn dense_and_dropout_in_training_mode() {
    let spec = head(
        Shape3::new(6, 2, 1),
        vec![
            Layer::Flatten,
            Layer::Dense {
                units: 7,
                activation: Activation::Sigmoid,
            },
            Layer::Dropout { rate: 0.45 },
            Layer::Dense {
                units: 5,
                activation: Activation::Tanh,
            },
        ],
    );
    check_spec(&spec, 21, Mode::Train);
}

#[test]
fn zero_rate_dropout_is_transparent() {
    let body = vec![
        Layer::Conv {
            filters: 3,
            filter_len: 3,
            filter_width: 2,
            activation: Activation::Relu,
        },
        Layer::MaxPool { pool: 2, stride: 2 },
        Layer::Flatten,
        Layer::Dense {
            units: 4,
            activation: Activation::Relu,
        },
    ];
    let mut with = body.clone();
    with.insert(1, Layer::Dropout { rate: 0.0 });
    with.insert(5, Layer::Dropout { rate: 0.0 });
    let plain = Network::<f64>::new(&head(Shape3::new(12, 2, 2), body), 5).unwrap();
    let dropped =
        Network::<f64>::from_params(&head(Shape3::new(12, 2, 2), with), plain.params().to_vec()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (x, labels) = random_batch(&mut rng, &plain, 9);
    let (la, ga) = plain.loss_and_gradient(&x, &labels, Mode::Train, 3).unwrap();
    let (lb, gb) = dropped.loss_and_gradient(&x, &labels, Mode::Train, 3).unwrap();
    assert_eq!(la, lb);
    assert_eq!(ga, gb);
}

#[test]
fn softmax_logit_gradient_is_p_minus_t() {
    // With a single-input identity-like head the bias gradient equals mean(p - t).
    let spec = head(Shape3::new(4, 1, 1), vec![Layer::Flatten]);
    let net = Network::<f64>::new(&spec, 2).unwrap();
    let x = [0.3, -0.2, 0.9, 0.1];
    let (_, g) = net.loss_and_gradient(&x, &[2], Mode::Eval, 0).unwrap();
    let probs = net.forward(&x).unwrap();
    let (_, bias) = net.param_ranges(1);
    let t = [0.0, 0.0, 1.0];
    for (k, gi) in g[bias].iter().enumerate() {
        assert!((gi - (probs[k] - t[k])).abs() < 1e-12);
    }
    // Closed form against finite differences of the loss in the logits.
    let z = [0.5f64, -1.0, 2.0];
    let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
    for k in 0..3 {
        let p = (z[k] - lse).exp();
        let loss = |zz: &[f64; 3]| -> f64 { zz.iter().map(|v| v.exp()).sum::<f64>().ln() - zz[1] };
        let mut zp = z;
        zp[k] += H;
        let mut zm = z;
        zm[k] -= H;
        let fd = (loss(&zp) - loss(&zm)) / (2.0 * H);
        let t = if k == 1 { 1.0 } else { 0.0 };
        assert!(relative_error(p - t, fd) < TOL);
    }
}

#[test]
fn fifty_random_shapes_under_a_minute() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for case in 0..60u64 {
        let spec = random_spec(&mut rng);
        let mode = if case % 2 == 0 { Mode::Train } else { Mode::Eval };
        worst = worst.max(check_spec(&spec, 1000 + case, mode));
    }
    assert!(worst < TOL);
    assert!(start.elapsed().as_secs() < 60, "took {:?}", start.elapsed());
}
