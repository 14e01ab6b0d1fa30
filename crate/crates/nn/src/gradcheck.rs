//! Central finite-difference gradient checking in `f64`.

use rand::Rng;

use crate::error::Result;
use crate::network::{Mode, Network};
use crate::spec::{Activation, Layer, ModelSpec, Shape3};

/// Relative errors are measured against `max(|analytic|, |numeric|, FLOOR)` so
/// that vanishing gradients are compared in absolute terms.
pub const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Points skipped because `p - h` and `p + h` straddle a ReLU or max-pool
    /// switch, where the loss is not differentiable.
    pub kinks: usize,
    pub max_rel_error: f64,
    pub worst_param: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares the analytic gradient against `(L(p + h) - L(p - h)) / 2h` for the
/// given parameter indices. Dropout masks are pinned through `dropout_seed`.
/// Points whose `p - h`/`p + h` activation patterns differ from the pattern
/// at `p` are counted in `kinks` and not compared.
pub fn check_gradients(
    net: &Network<f64>,
    batch: &[f64],
    labels: &[usize],
    mode: Mode,
    dropout_seed: u64,
    h: f64,
    indices: &[usize],
) -> Result<GradCheckReport> {
    let (_, grads) = net.loss_and_gradient(batch, labels, mode, dropout_seed)?;
    let pattern = net.activation_pattern(batch, mode, dropout_seed)?;
    let mut probe = net.clone();
    let mut report = GradCheckReport {
        checked: 0,
        kinks: 0,
        max_rel_error: 0.0,
        worst_param: 0,
    };
    for &i in indices {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + h;
        let plus = probe.loss(batch, labels, mode, dropout_seed)?;
        let kink_plus = probe.activation_pattern(batch, mode, dropout_seed)? != pattern;
        probe.params_mut()[i] = orig - h;
        let minus = probe.loss(batch, labels, mode, dropout_seed)?;
        let kink_minus = probe.activation_pattern(batch, mode, dropout_seed)? != pattern;
        probe.params_mut()[i] = orig;
        if kink_plus || kink_minus {
            report.kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(grads[i], numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_param = i;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Every parameter index if there are at most `limit`, else an even sample
/// that always includes the first and last parameter of each layer.
pub fn param_sample(net: &Network<f64>, limit: usize) -> Vec<usize> {
    let n = net.num_params();
    if n <= limit {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..limit).map(|k| k * n / limit).collect();
    for layer in 0..net.spec().layers.len() {
        let (w, b) = net.param_ranges(layer);
        for r in [w, b] {
            if !r.is_empty() {
                idx.push(r.start);
                idx.push(r.end - 1);
            }
        }
    }
    idx.sort_unstable();
    idx.dedup();
    idx
}

const ACTIVATIONS: [Activation; 4] = [
    Activation::Relu,
    Activation::Tanh,
    Activation::Sigmoid,
    Activation::Linear,
];

/// A random small Hyper-CNN-shaped spec: one or two convolution blocks (with
/// dropout and pooling), flatten, up to two dense layers and a softmax head.
pub fn random_spec<R: Rng>(rng: &mut R) -> ModelSpec {
    let width = rng.random_range(1..=3);
    let channels = rng.random_range(1..=3);
    let mut len = rng.random_range(10..=28);
    let input = Shape3::new(len, width, channels);
    let mut layers = Vec::new();
    let mut cur_width = width;
    let blocks = rng.random_range(1..=2);
    for _ in 0..blocks {
        let filter_len = rng.random_range(1..=len.min(5));
        let filter_width = rng.random_range(1..=cur_width);
        layers.push(Layer::Conv {
            filters: rng.random_range(1..=4),
            filter_len,
            filter_width,
            activation: ACTIVATIONS[rng.random_range(0..4)],
        });
        len = len - filter_len + 1;
        cur_width = cur_width - filter_width + 1;
        if rng.random_bool(0.5) {
            layers.push(Layer::Dropout {
                rate: [0.0, 0.15, 0.3][rng.random_range(0..3)],
            });
        }
        if len >= 2 && rng.random_bool(0.7) {
            let pool = rng.random_range(1..=len.min(3));
            let stride = rng.random_range(1..=3);
            layers.push(Layer::MaxPool { pool, stride });
            len = (len - pool) / stride + 1;
        }
    }
    layers.push(Layer::Flatten);
    for _ in 0..rng.random_range(0..=2) {
        layers.push(Layer::Dense {
            units: rng.random_range(1..=6),
            activation: ACTIVATIONS[rng.random_range(0..4)],
        });
        if rng.random_bool(0.5) {
            layers.push(Layer::Dropout { rate: 0.2 });
        }
    }
    layers.push(Layer::Softmax {
        classes: rng.random_range(2..=4),
    });
    ModelSpec::new(input, layers)
}
