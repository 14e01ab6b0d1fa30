use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{NnError, Result};
use crate::real::{gemm, Real, View};
use crate::seed;
use crate::spec::{Activation, Layer, ModelSpec, Shape, Shape3};

/// Samples per gradient chunk. Chunks are reduced in index order, so results do
/// not depend on the number of worker threads.
pub const GRAD_CHUNK: usize = 16;
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active.
    Train,
    /// Dropout is the identity.
    Eval,
}

#[derive(Debug, Clone)]
struct LayerPlan {
    layer: Layer,
    input: Shape,
    output: Shape,
    weights: Range<usize>,
    bias: Range<usize>,
}

/// Activations recorded by a forward pass over one chunk.
#[derive(Debug, Clone)]
struct Cache<T> {
    batch: usize,
    /// `acts[0]` is the input, `acts[i + 1]` the output of layer `i`.
    acts: Vec<Vec<T>>,
    masks: Vec<Option<Vec<T>>>,
    argmax: Vec<Option<Vec<u32>>>,
    log_probs: Vec<T>,
}

impl<T> Cache<T> {
    fn probs(&self) -> &[T] {
        self.acts.last().expect("cache has output")
    }
}

/// A compiled model: spec, layer plan and a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Network<T> {
    spec: ModelSpec,
    plan: Vec<LayerPlan>,
    params: Vec<T>,
    cached: Option<(Vec<Cache<T>>, usize)>,
}

fn input_shape3(shape: Shape) -> Shape3 {
    match shape {
        Shape::Spatial(s) => s,
        Shape::Flat(n) => Shape3::new(n, 1, 1),
    }
}

impl<T: Real> Network<T> {
    /// Builds the network with all parameters set to zero.
    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut plan = Vec::with_capacity(spec.layers.len());
        let mut offset = 0;
        let mut input = Shape::Spatial(spec.input);
        for (layer, output) in spec.layers.iter().zip(shapes) {
            let (nw, nb) = match *layer {
                Layer::Conv {
                    filters,
                    filter_len,
                    filter_width,
                    ..
                } => (
                    filters * filter_len * filter_width * input_shape3(input).channels,
                    filters,
                ),
                Layer::Dense { units, .. } => (units * input.size(), units),
                Layer::Softmax { classes } => (classes * input.size(), classes),
                _ => (0, 0),
            };
            plan.push(LayerPlan {
                layer: *layer,
                input,
                output,
                weights: offset..offset + nw,
                bias: offset + nw..offset + nw + nb,
            });
            offset += nw + nb;
            input = output;
        }
        Ok(Self {
            spec: spec.clone(),
            plan,
            params: vec![T::zero(); offset],
            cached: None,
        })
    }

    /// Builds the network with seeded fan-in scaled uniform weights (He for
    /// ReLU, Xavier otherwise) and zero biases.
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for lp in &net.plan {
            let (fan_in, fan_out, act) = match lp.layer {
                Layer::Conv {
                    filters,
                    filter_len,
                    filter_width,
                    activation,
                } => {
                    let c = input_shape3(lp.input).channels;
                    (
                        filter_len * filter_width * c,
                        filters * filter_len * filter_width,
                        activation,
                    )
                }
                Layer::Dense { units, activation } => (lp.input.size(), units, activation),
                Layer::Softmax { classes } => (lp.input.size(), classes, Activation::Linear),
                _ => continue,
            };
            let limit = match act {
                Activation::Relu => (6.0 / fan_in as f64).sqrt(),
                _ => (6.0 / (fan_in + fan_out) as f64).sqrt(),
            };
            for w in &mut net.params[lp.weights.clone()] {
                *w = T::lit(rng.random_range(-limit..limit));
            }
        }
        Ok(net)
    }

    pub fn from_params(spec: &ModelSpec, params: Vec<T>) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        if params.len() != net.params.len() {
            return Err(NnError::LengthMismatch {
                params: net.params.len(),
                grads: params.len(),
            });
        }
        net.params = params;
        Ok(net)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<T> {
        self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_size(&self) -> usize {
        self.spec.input.size()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes()
    }

    /// Parameter ranges `(weights, bias)` of layer `index` within the flat vector.
    pub fn param_ranges(&self, index: usize) -> (Range<usize>, Range<usize>) {
        let lp = &self.plan[index];
        (lp.weights.clone(), lp.bias.clone())
    }

    fn batch_size(&self, batch: &[T]) -> Result<usize> {
        let size = self.input_size();
        if batch.is_empty() || !batch.len().is_multiple_of(size) {
            return Err(NnError::Shape {
                layer: 0,
                kind: self.spec.layers.first().map_or("input", |l| l.kind()),
                detail: format!(
                    "batch of {} values is not a whole number of {} inputs",
                    batch.len(),
                    self.spec.input
                ),
            });
        }
        Ok(batch.len() / size)
    }

    fn check_labels(&self, labels: &[usize], batch: usize) -> Result<()> {
        if labels.len() != batch {
            return Err(NnError::LabelMismatch {
                labels: labels.len(),
                batch,
            });
        }
        let classes = self.num_classes();
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(NnError::InvalidConfig(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(())
    }

    /// Inference-mode class probabilities, `batch x classes` row-major.
    pub fn forward(&self, batch: &[T]) -> Result<Vec<T>> {
        let n = self.batch_size(batch)?;
        let size = self.input_size();
        let chunks: Vec<Vec<T>> = batch
            .par_chunks(EVAL_CHUNK * size)
            .map(|chunk| {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let cache = self.forward_pass(chunk, chunk.len() / size, Mode::Eval, &mut rng, false);
                cache.acts.into_iter().last().unwrap_or_default()
            })
            .collect();
        let out: Vec<T> = chunks.into_iter().flatten().collect();
        debug_assert_eq!(out.len(), n * self.num_classes());
        Ok(out)
    }

    /// Forward pass that records activations for a subsequent [`Network::backward`].
    pub fn forward_cached(&mut self, batch: &[T], mode: Mode, dropout_seed: u64) -> Result<Vec<T>> {
        let n = self.batch_size(batch)?;
        let caches = self.forward_chunks(batch, mode, dropout_seed);
        let probs = caches.iter().flat_map(|c| c.probs().iter().copied()).collect();
        self.cached = Some((caches, n));
        Ok(probs)
    }

    /// Gradient of mean categorical cross-entropy with respect to every
    /// parameter, for the batch recorded by the last `forward_cached` call.
    pub fn backward(&mut self, labels: &[usize]) -> Result<Vec<T>> {
        let (caches, n) = self.cached.take().ok_or(NnError::NoForwardCache)?;
        self.check_labels(labels, n)?;
        let (_, grads) = self.reduce_chunks(&caches, labels, n);
        Ok(grads)
    }

    /// Discrete state of the piecewise-linear parts of the network: the
    /// max-pool winners and the ReLU on/off bits. Two parameter vectors with the
    /// same pattern lie on the same smooth piece of the loss surface.
    pub fn activation_pattern(&self, batch: &[T], mode: Mode, dropout_seed: u64) -> Result<Vec<u32>> {
        self.batch_size(batch)?;
        let mut out = Vec::new();
        for cache in self.forward_chunks(batch, mode, dropout_seed) {
            for (i, layer) in self.spec.layers.iter().enumerate() {
                if let Some(idx) = &cache.argmax[i] {
                    out.extend_from_slice(idx);
                }
                let relu = matches!(
                    layer,
                    Layer::Conv { activation: Activation::Relu, .. } | Layer::Dense { activation: Activation::Relu, .. }
                );
                if relu {
                    out.extend(cache.acts[i + 1].iter().map(|v| u32::from(*v > T::zero())));
                }
            }
        }
        Ok(out)
    }

    /// Mean cross-entropy loss and its gradient in one call.
    pub fn loss_and_gradient(
        &self,
        batch: &[T],
        labels: &[usize],
        mode: Mode,
        dropout_seed: u64,
    ) -> Result<(f64, Vec<T>)> {
        let n = self.batch_size(batch)?;
        self.check_labels(labels, n)?;
        let caches = self.forward_chunks(batch, mode, dropout_seed);
        Ok(self.reduce_chunks(&caches, labels, n))
    }

    /// Like [`Network::loss_and_gradient`], also counting correct argmax predictions.
    pub(crate) fn training_step(
        &self,
        batch: &[T],
        labels: &[usize],
        dropout_seed: u64,
    ) -> Result<(f64, Vec<T>, usize)> {
        let n = self.batch_size(batch)?;
        self.check_labels(labels, n)?;
        let caches = self.forward_chunks(batch, Mode::Train, dropout_seed);
        let classes = self.num_classes();
        let correct = caches
            .iter()
            .flat_map(|c| c.probs().chunks(classes))
            .zip(labels)
            .filter(|(p, &l)| argmax(p) == l)
            .count();
        let (loss, grads) = self.reduce_chunks(&caches, labels, n);
        Ok((loss, grads, correct))
    }

    /// Inference-mode probabilities and log-probabilities, both `batch x classes`.
    pub fn predict(&self, batch: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        self.batch_size(batch)?;
        let size = self.input_size();
        let parts: Vec<(Vec<T>, Vec<T>)> = batch
            .par_chunks(EVAL_CHUNK * size)
            .map(|chunk| {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let mut cache = self.forward_pass(chunk, chunk.len() / size, Mode::Eval, &mut rng, false);
                let logp = std::mem::take(&mut cache.log_probs);
                (cache.acts.pop().unwrap_or_default(), logp)
            })
            .collect();
        let mut probs = Vec::with_capacity(batch.len() / size * self.num_classes());
        let mut logp = Vec::with_capacity(probs.capacity());
        for (p, l) in parts {
            probs.extend(p);
            logp.extend(l);
        }
        Ok((probs, logp))
    }

    /// Mean cross-entropy loss with the same dropout masks `loss_and_gradient` would draw.
    pub fn loss(&self, batch: &[T], labels: &[usize], mode: Mode, dropout_seed: u64) -> Result<f64> {
        let n = self.batch_size(batch)?;
        self.check_labels(labels, n)?;
        let size = self.input_size();
        let total: f64 = batch
            .par_chunks(GRAD_CHUNK * size)
            .zip(labels.par_chunks(GRAD_CHUNK))
            .enumerate()
            .map(|(i, (chunk, lab))| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(dropout_seed, &[i as u64]));
                let cache = self.forward_pass(chunk, lab.len(), mode, &mut rng, false);
                chunk_loss(&cache, lab, self.num_classes())
            })
            .collect::<Vec<_>>()
            .into_iter()
            .sum();
        Ok(total / n as f64)
    }

    fn forward_chunks(&self, batch: &[T], mode: Mode, dropout_seed: u64) -> Vec<Cache<T>> {
        let size = self.input_size();
        batch
            .par_chunks(GRAD_CHUNK * size)
            .enumerate()
            .map(|(i, chunk)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(dropout_seed, &[i as u64]));
                self.forward_pass(chunk, chunk.len() / size, mode, &mut rng, true)
            })
            .collect()
    }

    fn reduce_chunks(&self, caches: &[Cache<T>], labels: &[usize], n: usize) -> (f64, Vec<T>) {
        let scale = T::lit(1.0 / n as f64);
        let classes = self.num_classes();
        let parts: Vec<(f64, Vec<T>)> = caches
            .par_iter()
            .zip(labels.par_chunks(GRAD_CHUNK))
            .map(|(cache, lab)| {
                let mut g = vec![T::zero(); self.params.len()];
                self.backward_pass(cache, lab, scale, &mut g);
                (chunk_loss(cache, lab, classes), g)
            })
            .collect();
        let mut grads = vec![T::zero(); self.params.len()];
        let mut loss = 0.0;
        for (l, g) in parts {
            loss += l;
            for (acc, v) in grads.iter_mut().zip(g) {
                *acc += v;
            }
        }
        (loss / n as f64, grads)
    }

    fn forward_pass(
        &self,
        input: &[T],
        batch: usize,
        mode: Mode,
        rng: &mut ChaCha8Rng,
        keep: bool,
    ) -> Cache<T> {
        let layers = self.plan.len();
        let mut cache = Cache {
            batch,
            acts: Vec::with_capacity(layers + 1),
            masks: vec![None; layers],
            argmax: vec![None; layers],
            log_probs: Vec::new(),
        };
        let mut current = input.to_vec();
        for (i, lp) in self.plan.iter().enumerate() {
            let w = &self.params[lp.weights.clone()];
            let b = &self.params[lp.bias.clone()];
            let out = match lp.layer {
                Layer::Conv {
                    filter_len,
                    filter_width,
                    activation,
                    ..
                } => conv_forward(
                    &current,
                    batch,
                    input_shape3(lp.input),
                    input_shape3(lp.output),
                    filter_len,
                    filter_width,
                    w,
                    b,
                    activation,
                ),
                Layer::Dropout { rate } => {
                    if mode == Mode::Train && rate > 0.0 {
                        let keep_scale = T::lit(1.0 / (1.0 - rate));
                        let mask: Vec<T> = (0..current.len())
                            .map(|_| {
                                if rng.random::<f64>() < rate {
                                    T::zero()
                                } else {
                                    keep_scale
                                }
                            })
                            .collect();
                        let out = current.iter().zip(&mask).map(|(&x, &m)| x * m).collect();
                        if keep {
                            cache.masks[i] = Some(mask);
                        }
                        out
                    } else {
                        current.clone()
                    }
                }
                Layer::MaxPool { pool, stride } => {
                    let (out, arg) = pool_forward(
                        &current,
                        batch,
                        input_shape3(lp.input),
                        input_shape3(lp.output),
                        pool,
                        stride,
                    );
                    if keep {
                        cache.argmax[i] = Some(arg);
                    }
                    out
                }
                Layer::Flatten => current.clone(),
                Layer::Dense { units, activation } => {
                    dense_forward(&current, batch, lp.input.size(), units, w, b, activation)
                }
                Layer::Softmax { classes } => {
                    let logits = dense_forward(
                        &current,
                        batch,
                        lp.input.size(),
                        classes,
                        w,
                        b,
                        Activation::Linear,
                    );
                    let (probs, logp) = softmax_rows(&logits, classes);
                    cache.log_probs = logp;
                    probs
                }
            };
            if keep {
                cache.acts.push(current);
            }
            current = out;
        }
        cache.acts.push(current);
        cache
    }

    fn backward_pass(&self, cache: &Cache<T>, labels: &[usize], scale: T, grads: &mut [T]) {
        let batch = cache.batch;
        let mut delta: Vec<T> = Vec::new();
        for (i, lp) in self.plan.iter().enumerate().rev() {
            let x = &cache.acts[i];
            let y = &cache.acts[i + 1];
            let need_dx = i > 0;
            let w = &self.params[lp.weights.clone()];
            let (gw, gb) = split_grads(grads, &lp.weights, &lp.bias);
            delta = match lp.layer {
                Layer::Softmax { classes } => {
                    let mut dz = y.clone();
                    for (row, &label) in dz.chunks_mut(classes).zip(labels) {
                        row[label] -= T::one();
                        for v in row.iter_mut() {
                            *v *= scale;
                        }
                    }
                    dense_backward(x, &dz, batch, lp.input.size(), classes, w, gw, gb, need_dx)
                }
                Layer::Dense { units, activation } => {
                    let dz = activation_backward(&delta, y, activation);
                    dense_backward(x, &dz, batch, lp.input.size(), units, w, gw, gb, need_dx)
                }
                Layer::Conv {
                    filter_len,
                    filter_width,
                    activation,
                    ..
                } => {
                    let dz = activation_backward(&delta, y, activation);
                    conv_backward(
                        x,
                        &dz,
                        batch,
                        input_shape3(lp.input),
                        input_shape3(lp.output),
                        filter_len,
                        filter_width,
                        w,
                        gw,
                        gb,
                        need_dx,
                    )
                }
                Layer::Dropout { .. } => match &cache.masks[i] {
                    Some(mask) => delta.iter().zip(mask).map(|(&d, &m)| d * m).collect(),
                    None => delta,
                },
                Layer::MaxPool { .. } => pool_backward(
                    &delta,
                    cache.argmax[i].as_deref().expect("pool argmax cached"),
                    batch,
                    input_shape3(lp.input),
                    input_shape3(lp.output),
                ),
                Layer::Flatten => delta,
            };
            if !need_dx {
                break;
            }
        }
    }
}

fn split_grads<'a, T>(grads: &'a mut [T], w: &Range<usize>, b: &Range<usize>) -> (&'a mut [T], &'a mut [T]) {
    let (head, tail) = grads.split_at_mut(w.end);
    (&mut head[w.clone()], &mut tail[..b.len()])
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn chunk_loss<T: Real>(cache: &Cache<T>, labels: &[usize], classes: usize) -> f64 {
    cache
        .log_probs
        .chunks(classes)
        .zip(labels)
        .map(|(row, &l)| -row[l].as_f64())
        .sum()
}

fn activate<T: Real>(values: &mut [T], act: Activation) {
    match act {
        Activation::Linear => {}
        Activation::Relu => values.iter_mut().for_each(|v| {
            if *v < T::zero() {
                *v = T::zero()
            }
        }),
        Activation::Tanh => values.iter_mut().for_each(|v| *v = v.tanh()),
        Activation::Sigmoid => values
            .iter_mut()
            .for_each(|v| *v = T::one() / (T::one() + (-*v).exp())),
    }
}

/// Gradient with respect to the pre-activation, computed from the activation output.
fn activation_backward<T: Real>(delta: &[T], out: &[T], act: Activation) -> Vec<T> {
    let one = T::one();
    delta
        .iter()
        .zip(out)
        .map(|(&d, &y)| match act {
            Activation::Linear => d,
            Activation::Relu => {
                if y > T::zero() {
                    d
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => d * (one - y * y),
            Activation::Sigmoid => d * y * (one - y),
        })
        .collect()
}

fn softmax_rows<T: Real>(logits: &[T], classes: usize) -> (Vec<T>, Vec<T>) {
    let mut probs = vec![T::zero(); logits.len()];
    let mut logp = vec![T::zero(); logits.len()];
    for ((z, p), lp) in logits
        .chunks(classes)
        .zip(probs.chunks_mut(classes))
        .zip(logp.chunks_mut(classes))
    {
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = z.iter().map(|&v| (v - max).exp()).sum();
        let log_sum = sum.ln();
        for i in 0..classes {
            lp[i] = z[i] - max - log_sum;
            p[i] = lp[i].exp();
        }
    }
    (probs, logp)
}

fn im2col<T: Real>(x: &[T], ins: Shape3, outs: Shape3, kh: usize, kw: usize, cols: &mut [T]) {
    let row = ins.width * ins.channels;
    let seg = kw * ins.channels;
    let k = kh * seg;
    for t in 0..outs.len {
        for j in 0..outs.width {
            let dst = &mut cols[(t * outs.width + j) * k..][..k];
            for dt in 0..kh {
                let src = &x[(t + dt) * row + j * ins.channels..][..seg];
                dst[dt * seg..(dt + 1) * seg].copy_from_slice(src);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward<T: Real>(
    x: &[T],
    batch: usize,
    ins: Shape3,
    outs: Shape3,
    kh: usize,
    kw: usize,
    w: &[T],
    bias: &[T],
    act: Activation,
) -> Vec<T> {
    let k = kh * kw * ins.channels;
    let f = outs.channels;
    let p = outs.len * outs.width;
    let row = ins.width * ins.channels;
    let full_width = kw == ins.width;
    let mut y = vec![T::zero(); batch * p * f];
    let mut cols = if full_width { Vec::new() } else { vec![T::zero(); p * k] };
    for b in 0..batch {
        let xs = &x[b * ins.size()..(b + 1) * ins.size()];
        let ys = &mut y[b * p * f..(b + 1) * p * f];
        for r in ys.chunks_mut(f) {
            r.copy_from_slice(bias);
        }
        // With a full-width filter each receptive field is a contiguous run of
        // the input, so rows of the patch matrix overlap with stride `row`.
        let a = if full_width {
            View::new(xs, row, 1)
        } else {
            im2col(xs, ins, outs, kh, kw, &mut cols);
            View::new(&cols, k, 1)
        };
        gemm(p, k, f, T::one(), a, View::new(w, 1, k), T::one(), ys, f);
    }
    activate(&mut y, act);
    y
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Real>(
    x: &[T],
    dz: &[T],
    batch: usize,
    ins: Shape3,
    outs: Shape3,
    kh: usize,
    kw: usize,
    w: &[T],
    gw: &mut [T],
    gb: &mut [T],
    need_dx: bool,
) -> Vec<T> {
    let k = kh * kw * ins.channels;
    let f = outs.channels;
    let p = outs.len * outs.width;
    let row = ins.width * ins.channels;
    let seg = kw * ins.channels;
    let full_width = kw == ins.width;
    let mut dx = if need_dx { vec![T::zero(); x.len()] } else { Vec::new() };
    let mut cols = if full_width { Vec::new() } else { vec![T::zero(); p * k] };
    let mut da = if need_dx { vec![T::zero(); p * k] } else { Vec::new() };
    for b in 0..batch {
        let xs = &x[b * ins.size()..(b + 1) * ins.size()];
        let dzs = &dz[b * p * f..(b + 1) * p * f];
        let a = if full_width {
            View::new(xs, row, 1)
        } else {
            im2col(xs, ins, outs, kh, kw, &mut cols);
            View::new(&cols, k, 1)
        };
        gemm(f, p, k, T::one(), View::new(dzs, 1, f), a, T::one(), gw, k);
        for r in dzs.chunks(f) {
            for (g, &d) in gb.iter_mut().zip(r) {
                *g += d;
            }
        }
        if need_dx {
            gemm(p, f, k, T::one(), View::new(dzs, f, 1), View::new(w, k, 1), T::zero(), &mut da, k);
            let dxs = &mut dx[b * ins.size()..(b + 1) * ins.size()];
            if full_width {
                for t in 0..outs.len {
                    for (d, &v) in dxs[t * row..t * row + k].iter_mut().zip(&da[t * k..(t + 1) * k]) {
                        *d += v;
                    }
                }
            } else {
                for t in 0..outs.len {
                    for j in 0..outs.width {
                        let src = &da[(t * outs.width + j) * k..][..k];
                        for dt in 0..kh {
                            let dst = &mut dxs[(t + dt) * row + j * ins.channels..][..seg];
                            for (d, &v) in dst.iter_mut().zip(&src[dt * seg..(dt + 1) * seg]) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn pool_forward<T: Real>(
    x: &[T],
    batch: usize,
    ins: Shape3,
    outs: Shape3,
    pool: usize,
    stride: usize,
) -> (Vec<T>, Vec<u32>) {
    let row = ins.width * ins.channels;
    let mut y = vec![T::zero(); batch * outs.size()];
    let mut arg = vec![0u32; batch * outs.size()];
    for b in 0..batch {
        let xs = &x[b * ins.size()..(b + 1) * ins.size()];
        let ys = &mut y[b * outs.size()..(b + 1) * outs.size()];
        let args = &mut arg[b * outs.size()..(b + 1) * outs.size()];
        for t in 0..outs.len {
            let base = t * stride;
            let yr = &mut ys[t * row..(t + 1) * row];
            let ar = &mut args[t * row..(t + 1) * row];
            yr.copy_from_slice(&xs[base * row..(base + 1) * row]);
            ar.fill(base as u32);
            for s in base + 1..base + pool {
                let xr = &xs[s * row..(s + 1) * row];
                for e in 0..row {
                    if xr[e] > yr[e] {
                        yr[e] = xr[e];
                        ar[e] = s as u32;
                    }
                }
            }
        }
    }
    (y, arg)
}

fn pool_backward<T: Real>(delta: &[T], arg: &[u32], batch: usize, ins: Shape3, outs: Shape3) -> Vec<T> {
    let row = ins.width * ins.channels;
    let mut dx = vec![T::zero(); batch * ins.size()];
    for b in 0..batch {
        let ds = &delta[b * outs.size()..(b + 1) * outs.size()];
        let args = &arg[b * outs.size()..(b + 1) * outs.size()];
        let dxs = &mut dx[b * ins.size()..(b + 1) * ins.size()];
        for (idx, (&d, &s)) in ds.iter().zip(args).enumerate() {
            dxs[s as usize * row + idx % row] += d;
        }
    }
    dx
}

fn dense_forward<T: Real>(
    x: &[T],
    batch: usize,
    inputs: usize,
    units: usize,
    w: &[T],
    bias: &[T],
    act: Activation,
) -> Vec<T> {
    let mut y = vec![T::zero(); batch * units];
    for r in y.chunks_mut(units) {
        r.copy_from_slice(bias);
    }
    gemm(
        batch,
        inputs,
        units,
        T::one(),
        View::new(x, inputs, 1),
        View::new(w, 1, inputs),
        T::one(),
        &mut y,
        units,
    );
    activate(&mut y, act);
    y
}

#[allow(clippy::too_many_arguments)]
fn dense_backward<T: Real>(
    x: &[T],
    dz: &[T],
    batch: usize,
    inputs: usize,
    units: usize,
    w: &[T],
    gw: &mut [T],
    gb: &mut [T],
    need_dx: bool,
) -> Vec<T> {
    gemm(
        units,
        batch,
        inputs,
        T::one(),
        View::new(dz, 1, units),
        View::new(x, inputs, 1),
        T::one(),
        gw,
        inputs,
    );
    for r in dz.chunks(units) {
        for (g, &d) in gb.iter_mut().zip(r) {
            *g += d;
        }
    }
    if !need_dx {
        return Vec::new();
    }
    let mut dx = vec![T::zero(); batch * inputs];
    gemm(
        batch,
        units,
        inputs,
        T::one(),
        View::new(dz, units, 1),
        View::new(w, inputs, 1),
        T::zero(),
        &mut dx,
        inputs,
    );
    dx
}
