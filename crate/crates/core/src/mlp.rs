//! Per-pixel RGBXY to surface-normal regressor.
//!
//! Three weight layers (5 -> h1 -> h2 -> 3), ReLU on both hidden layers,
//! inverted dropout on hidden activations during training, mean squared
//! error loss and Adam. Training runs in `f64` and is single-threaded and
//! deterministic for a given seed; inference has an `f32` batched path
//! ([`Predictor`]) for frame-rate prediction.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::linalg::{dgemm, sgemm};
use crate::rng::SeededRng;
use crate::sim::{self, GelConfig, Indenter, IndenterShape, LightingModel, NormalMap, TactileFrame};

pub const INPUTS: usize = 5;
pub const OUTPUTS: usize = 3;

/// Smallest `n_z` kept when renormalising predicted normals.
pub const NZ_FLOOR: f64 = 0.05;

/// One fully connected layer, `weights` is `inputs x outputs` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
}

impl MlpParams {
    /// He-uniform weights, zero biases, `5 -> hidden... -> 3`.
    pub fn init(hidden: &[usize], seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        Self::init_with(hidden, &mut rng)
    }

    fn init_with(hidden: &[usize], rng: &mut SeededRng) -> Self {
        let mut sizes = vec![INPUTS];
        sizes.extend_from_slice(hidden);
        sizes.push(OUTPUTS);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let mut layer = Dense::zeros(w[0], w[1]);
                let bound = libm::sqrt(6.0 / w[0] as f64);
                for v in &mut layer.weights {
                    *v = rng.uniform_in(-bound, bound);
                }
                layer
            })
            .collect();
        MlpParams { layers }
    }

    pub fn zeros_like(&self) -> Self {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.outputs)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Checks layer chaining and finiteness.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::domain("network has no layers"));
        }
        let mut expected_in = INPUTS;
        for (i, l) in self.layers.iter().enumerate() {
            if l.inputs != expected_in
                || l.weights.len() != l.inputs * l.outputs
                || l.bias.len() != l.outputs
            {
                return Err(Error::domain(format!("layer {i} has inconsistent shape")));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("network parameters"));
            }
            expected_in = l.outputs;
        }
        if expected_in != OUTPUTS {
            return Err(Error::domain("network must end in 3 outputs"));
        }
        Ok(())
    }

    fn same_shape(&self, other: &MlpParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.inputs == b.inputs && a.outputs == b.outputs)
    }

    /// All parameters in a fixed order: per layer weights then bias.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    fn for_each_mut(&mut self, mut f: impl FnMut(usize, &mut f64)) {
        let mut i = 0;
        for l in &mut self.layers {
            for v in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                f(i, v);
                i += 1;
            }
        }
    }
}

/// Dropout multipliers per hidden layer, `0` or `1 / (1 - rate)` per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    /// One `batch x width` row-major buffer per hidden layer.
    pub layers: Vec<Vec<f64>>,
}

impl DropoutMasks {
    pub fn sample(p: &MlpParams, batch: usize, rate: f64, rng: &mut SeededRng) -> Self {
        let keep = 1.0 / (1.0 - rate);
        let layers = p
            .hidden_sizes()
            .into_iter()
            .map(|h| {
                (0..batch * h)
                    .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
                    .collect()
            })
            .collect();
        DropoutMasks { layers }
    }

    /// All-keep masks with the scale for `rate`; equals inference when rate = 0.
    pub fn keep_all(p: &MlpParams, batch: usize, rate: f64) -> Self {
        let keep = 1.0 / (1.0 - rate);
        DropoutMasks {
            layers: p
                .hidden_sizes()
                .into_iter()
                .map(|h| vec![keep; batch * h])
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    Infer,
    /// One mask row per hidden layer, each of that layer's width.
    Train(&'a [&'a [f64]]),
}

/// Single-sample forward pass; returns the raw (unnormalised) output.
pub fn forward(p: &MlpParams, x: &[f64; INPUTS], mode: Mode<'_>) -> [f64; OUTPUTS] {
    let mut act: Vec<f64> = x.to_vec();
    let last = p.layers.len() - 1;
    for (li, layer) in p.layers.iter().enumerate() {
        let mut z = layer.bias.clone();
        for (i, &a) in act.iter().enumerate() {
            let row = &layer.weights[i * layer.outputs..(i + 1) * layer.outputs];
            for (zj, w) in z.iter_mut().zip(row) {
                *zj += a * w;
            }
        }
        if li < last {
            for (j, zj) in z.iter_mut().enumerate() {
                *zj = zj.max(0.0);
                if let Mode::Train(masks) = mode {
                    *zj *= masks[li][j];
                }
            }
        }
        act = z;
    }
    [act[0], act[1], act[2]]
}

/// Mean over all elements of the squared difference.
pub fn mse_loss(pred: &[[f64; OUTPUTS]], target: &[[f64; OUTPUTS]]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Shape {
            what: "mse batch",
            expected: (target.len(), OUTPUTS),
            found: (pred.len(), OUTPUTS),
        });
    }
    if pred.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    let sum: f64 = pred
        .iter()
        .zip(target)
        .flat_map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)))
        .sum();
    Ok(sum / (pred.len() * OUTPUTS) as f64)
}

/// Cached pre-activations and activations of a batched forward pass.
struct Trace {
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`
    /// (post ReLU and mask for hidden layers, raw for the last).
    acts: Vec<Vec<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Vec<f64>>,
}

fn forward_trace(p: &MlpParams, inputs: &[f64], n: usize, masks: Option<&DropoutMasks>) -> Trace {
    let mut acts = vec![inputs.to_vec()];
    let mut pre = Vec::new();
    let last = p.layers.len() - 1;
    for (li, layer) in p.layers.iter().enumerate() {
        let mut z = vec![0.0; n * layer.outputs];
        for row in z.chunks_exact_mut(layer.outputs) {
            row.copy_from_slice(&layer.bias);
        }
        let a = &acts[li];
        dgemm(
            n,
            layer.inputs,
            layer.outputs,
            1.0,
            a,
            (layer.inputs as isize, 1),
            &layer.weights,
            (layer.outputs as isize, 1),
            1.0,
            &mut z,
        );
        if li < last {
            let mut out: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
            if let Some(m) = masks {
                for (o, k) in out.iter_mut().zip(&m.layers[li]) {
                    *o *= k;
                }
            }
            pre.push(z);
            acts.push(out);
        } else {
            acts.push(z);
        }
    }
    Trace { acts, pre }
}

/// Batched inference in `f64`, `inputs` is `n x 5` row-major.
pub fn forward_batch(p: &MlpParams, inputs: &[f64]) -> Vec<[f64; OUTPUTS]> {
    let n = inputs.len() / INPUTS;
    let trace = forward_trace(p, inputs, n, None);
    trace
        .acts
        .last()
        .unwrap()
        .chunks_exact(OUTPUTS)
        .map(|c| [c[0], c[1], c[2]])
        .collect()
}

/// Loss and its exact gradient for a batch under fixed dropout masks.
/// `inputs` is `n x 5`, `targets` is `n x 3`, both row-major.
pub fn backward(
    p: &MlpParams,
    inputs: &[f64],
    targets: &[f64],
    masks: Option<&DropoutMasks>,
) -> Result<(f64, MlpParams)> {
    let n = inputs.len() / INPUTS;
    if n == 0 {
        return Err(Error::domain("empty batch"));
    }
    if inputs.len() != n * INPUTS || targets.len() != n * OUTPUTS {
        return Err(Error::Shape {
            what: "training batch",
            expected: (n, OUTPUTS),
            found: (targets.len() / OUTPUTS, targets.len() % OUTPUTS),
        });
    }
    let trace = forward_trace(p, inputs, n, masks);
    let out = trace.acts.last().unwrap();
    let denom = (n * OUTPUTS) as f64;
    let mut loss = 0.0;
    let mut dz: Vec<f64> = out
        .iter()
        .zip(targets)
        .map(|(y, t)| {
            let e = y - t;
            loss += e * e;
            2.0 * e / denom
        })
        .collect();
    loss /= denom;

    let mut grads = p.zeros_like();
    for li in (0..p.layers.len()).rev() {
        let layer = &p.layers[li];
        let a = &trace.acts[li];
        let g = &mut grads.layers[li];
        // dW = a^T dz
        dgemm(
            layer.inputs,
            n,
            layer.outputs,
            1.0,
            a,
            (1, layer.inputs as isize),
            &dz,
            (layer.outputs as isize, 1),
            0.0,
            &mut g.weights,
        );
        for row in dz.chunks_exact(layer.outputs) {
            for (b, d) in g.bias.iter_mut().zip(row) {
                *b += d;
            }
        }
        if li == 0 {
            break;
        }
        // da = dz W^T, then through mask and ReLU of the previous layer
        let mut da = vec![0.0; n * layer.inputs];
        dgemm(
            n,
            layer.outputs,
            layer.inputs,
            1.0,
            &dz,
            (layer.outputs as isize, 1),
            &layer.weights,
            (1, layer.outputs as isize),
            0.0,
            &mut da,
        );
        let z_prev = &trace.pre[li - 1];
        for (i, d) in da.iter_mut().enumerate() {
            if z_prev[i] <= 0.0 {
                *d = 0.0;
            } else if let Some(m) = masks {
                *d *= m.layers[li - 1][i];
            }
        }
        dz = da;
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(param_count: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(p: &mut MlpParams, grads: &MlpParams, s: &mut AdamState) -> Result<()> {
    if !p.same_shape(grads) || s.m.len() != p.param_count() || s.v.len() != s.m.len() {
        return Err(Error::domain("adam: parameter, gradient and state shapes differ"));
    }
    s.t += 1;
    let bc1 = 1.0 - libm::pow(s.beta1, s.t as f64);
    let bc2 = 1.0 - libm::pow(s.beta2, s.t as f64);
    let g = grads.flat();
    let AdamState {
        m,
        v,
        lr,
        beta1,
        beta2,
        epsilon,
        ..
    } = s;
    p.for_each_mut(|i, w| {
        let gi = g[i];
        m[i] = *beta1 * m[i] + (1.0 - *beta1) * gi;
        v[i] = *beta2 * v[i] + (1.0 - *beta2) * gi * gi;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        *w -= *lr * m_hat / (libm::sqrt(v_hat) + *epsilon);
    });
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSample {
    /// r, g, b, x_norm, y_norm
    pub input: [f64; INPUTS],
    /// unit normal
    pub target: [f64; OUTPUTS],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub dropout_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: [usize; 2],
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            dropout_rate: 0.05,
            epochs: 50,
            batch_size: 4096,
            hidden: [64, 64],
            rng_seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::domain("dropout_rate must be in [0, 1)"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::domain("lr must be a finite non-negative number"));
        }
        if self.epochs < 1 {
            return Err(Error::domain("epochs must be ≥ 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::domain("batch_size must be ≥ 1"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::domain("hidden sizes must be ≥ 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: MlpParams,
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
}

/// Seeded minibatch Adam over `dataset`.
pub fn train(dataset: &[TrainSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::domain("training dataset is empty"));
    }
    let mut rng = SeededRng::new(cfg.rng_seed);
    let mut params = MlpParams::init_with(&cfg.hidden, &mut rng);
    let mut adam = AdamState::new(params.param_count(), cfg.lr);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut loss_history = Vec::with_capacity(cfg.epochs);
    let mut inputs = Vec::with_capacity(cfg.batch_size * INPUTS);
    let mut targets = Vec::with_capacity(cfg.batch_size * OUTPUTS);

    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            inputs.clear();
            targets.clear();
            for &i in chunk {
                inputs.extend_from_slice(&dataset[i].input);
                targets.extend_from_slice(&dataset[i].target);
            }
            let masks = (cfg.dropout_rate > 0.0)
                .then(|| DropoutMasks::sample(&params, chunk.len(), cfg.dropout_rate, &mut rng));
            let (loss, grads) = backward(&params, &inputs, &targets, masks.as_ref())?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            adam_step(&mut params, &grads, &mut adam)?;
            epoch_loss += loss * chunk.len() as f64;
        }
        loss_history.push(epoch_loss / dataset.len() as f64);
    }
    Ok(TrainOutcome {
        params,
        loss_history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_images: usize,
    /// mm
    pub ball_diameter: f64,
    /// Press depths are drawn uniformly from this range (mm), clipped to
    /// the gel's `max_indent`.
    pub min_press: f64,
    pub max_press: f64,
    /// Images held out from training for evaluation.
    pub holdout_images: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_images: 40,
            ball_diameter: 6.0,
            min_press: 0.1,
            max_press: 1.2,
            holdout_images: 4,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CalibDataset {
    pub samples: Vec<TrainSample>,
    pub pixels_per_image: usize,
    pub presses: Vec<Indenter>,
}

impl CalibDataset {
    /// `(train, holdout)` with the last `holdout_images` images held out.
    pub fn split(&self, holdout_images: usize) -> (&[TrainSample], &[TrainSample]) {
        let keep = self.presses.len().saturating_sub(holdout_images);
        self.samples.split_at(keep * self.pixels_per_image)
    }
}

/// Network input for pixel `(r, c)` of an `h x w` frame.
#[inline]
pub fn pixel_input(rgb: [f32; 3], r: usize, c: usize, h: usize, w: usize) -> [f64; INPUTS] {
    [
        rgb[0] as f64,
        rgb[1] as f64,
        rgb[2] as f64,
        c as f64 / (w - 1) as f64,
        r as f64 / (h - 1) as f64,
    ]
}

/// Random ball presses rendered through the gel simulator, every pixel
/// labelled with the closed-form sphere normal (flat outside the disc).
pub fn make_calib_dataset(
    gel: &GelConfig,
    lm: &LightingModel,
    cfg: &DatasetConfig,
) -> Result<CalibDataset> {
    make_calib_dataset_with(gel, lm, cfg, None)
}

/// As [`make_calib_dataset`], optionally forcing every press depth.
pub fn make_calib_dataset_with(
    gel: &GelConfig,
    lm: &LightingModel,
    cfg: &DatasetConfig,
    forced_depth: Option<f64>,
) -> Result<CalibDataset> {
    gel.validate()?;
    lm.validate()?;
    if cfg.n_images < 1 {
        return Err(Error::domain("n_images must be ≥ 1"));
    }
    if !(cfg.ball_diameter > 0.0) {
        return Err(Error::domain("ball_diameter must be > 0"));
    }
    let shape = IndenterShape::Sphere {
        radius: cfg.ball_diameter / 2.0,
    };
    let hi = cfg.max_press.min(gel.max_indent);
    let lo = cfg.min_press.min(hi);
    let (xmax, ymax) = gel.extent_mm();
    let margin = 2.0 * gel.pixel_pitch;
    let mut rng = SeededRng::new(cfg.seed);
    let (h, w) = (gel.height_px, gel.width_px);
    let mut samples = Vec::with_capacity(cfg.n_images * h * w);
    let mut presses = Vec::with_capacity(cfg.n_images);

    for _ in 0..cfg.n_images {
        let depth = forced_depth.unwrap_or_else(|| rng.uniform_in(lo, hi));
        let a = shape.contact_radius(depth) + margin;
        if 2.0 * a > xmax || 2.0 * a > ymax {
            return Err(Error::domain("calibration ball does not fit the gel"));
        }
        let center = (rng.uniform_in(a, xmax - a), rng.uniform_in(a, ymax - a));
        let ind = Indenter {
            shape,
            center,
            press_depth: depth,
        };
        let (_, frame) = sim::press_frame(gel, lm, &ind)?;
        for r in 0..h {
            for c in 0..w {
                let x = c as f64 * gel.pixel_pitch;
                let y = r as f64 * gel.pixel_pitch;
                samples.push(TrainSample {
                    input: pixel_input(frame.pixels[(r, c)], r, c, h, w),
                    target: ind.analytic_normal(x, y),
                });
            }
        }
        presses.push(ind);
    }
    Ok(CalibDataset {
        samples,
        pixels_per_image: h * w,
        presses,
    })
}

/// Unit normal from a raw network output, `n_z` floored before scaling.
#[inline]
pub fn renormalize(v: [f64; 3]) -> [f64; 3] {
    let z = v[2].max(NZ_FLOOR);
    let inv = 1.0 / libm::sqrt(v[0] * v[0] + v[1] * v[1] + z * z);
    [v[0] * inv, v[1] * inv, z * inv]
}

/// `f32` copy of a network for batched frame inference. Immutable and
/// shareable; per-call scratch lives on the stack of `predict`.
#[derive(Debug, Clone)]
pub struct Predictor {
    layers: Vec<FastLayer>,
}

#[derive(Debug, Clone)]
struct FastLayer {
    fan_in: usize,
    fan_out: usize,
    /// `fan_out x fan_in`, row-major
    weights_t: Vec<f32>,
    bias: Vec<f32>,
}

const CHUNK: usize = 2048;

impl FastLayer {
    fn apply(&self, x: &[f32], rows: usize, relu: bool, out: &mut [f32]) {
        #[cfg(all(feature = "std", target_arch = "x86_64"))]
        {
            if std::is_x86_feature_detected!("avx512f") {
                // SAFETY: feature detected at runtime.
                return unsafe { self.apply_avx512(x, rows, relu, out) };
            }
            if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
                // SAFETY: features detected at runtime.
                return unsafe { self.apply_avx2(x, rows, relu, out) };
            }
        }
        self.apply_generic(x, rows, relu, out)
    }

    #[cfg(all(feature = "std", target_arch = "x86_64"))]
    #[target_feature(enable = "avx512f")]
    unsafe fn apply_avx512(&self, x: &[f32], rows: usize, relu: bool, out: &mut [f32]) {
        self.apply_generic(x, rows, relu, out)
    }

    #[cfg(all(feature = "std", target_arch = "x86_64"))]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn apply_avx2(&self, x: &[f32], rows: usize, relu: bool, out: &mut [f32]) {
        self.apply_generic(x, rows, relu, out)
    }

    /// `x` and `out` are feature-major: feature `k` of pixel `i` sits at
    /// `k * rows + i`.
    #[inline(always)]
    fn apply_generic(&self, x: &[f32], rows: usize, relu: bool, out: &mut [f32]) {
        let (fi, fo) = (self.fan_in, self.fan_out);
        let out = &mut out[..rows * fo];
        if fi <= 8 || fo <= 4 {
            for (j, oj) in out.chunks_exact_mut(rows).enumerate() {
                oj.fill(self.bias[j]);
                for (xk, &w) in x.chunks_exact(rows).zip(&self.weights_t[j * fi..(j + 1) * fi]) {
                    for (o, &v) in oj.iter_mut().zip(xk) {
                        *o += w * v;
                    }
                }
            }
        } else {
            sgemm(fo, fi, rows, &self.weights_t, &x[..fi * rows], out);
            for (oj, &b) in out.chunks_exact_mut(rows).zip(&self.bias) {
                oj.iter_mut().for_each(|o| *o += b);
            }
        }
        if relu {
            out.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
}

impl Predictor {
    pub fn new(p: &MlpParams) -> Self {
        Predictor {
            layers: p
                .layers
                .iter()
                .map(|l| FastLayer {
                    fan_in: l.inputs,
                    fan_out: l.outputs,
                    weights_t: (0..l.outputs * l.inputs)
                        .map(|i| l.weights[(i % l.inputs) * l.outputs + i / l.inputs] as f32)
                        .collect(),
                    bias: l.bias.iter().map(|&v| v as f32).collect(),
                })
                .collect(),
        }
    }

    pub fn predict(&self, frame: &TactileFrame) -> NormalMap {
        let (h, w) = frame.pixels.shape();
        let total = h * w;
        let widest = self.layers.iter().map(|l| l.fan_out).max().unwrap_or(OUTPUTS);
        let mut buf_a = vec![0.0f32; CHUNK * widest.max(INPUTS)];
        let mut buf_b = vec![0.0f32; CHUNK * widest.max(INPUTS)];
        let mut out = Vec::with_capacity(total);
        let px = frame.pixels.as_slice();
        let (sx, sy) = (1.0 / (w - 1) as f32, 1.0 / (h - 1) as f32);
        let last = self.layers.len() - 1;

        let mut start = 0;
        while start < total {
            let n = CHUNK.min(total - start);
            for i in 0..n {
                let idx = start + i;
                for (k, &v) in px[idx].iter().enumerate() {
                    buf_a[k * n + i] = v;
                }
                buf_a[3 * n + i] = (idx % w) as f32 * sx;
                buf_a[4 * n + i] = (idx / w) as f32 * sy;
            }
            for (li, layer) in self.layers.iter().enumerate() {
                layer.apply(&buf_a[..n * layer.fan_in], n, li < last, &mut buf_b);
                core::mem::swap(&mut buf_a, &mut buf_b);
            }
            for i in 0..n {
                let o = [buf_a[i], buf_a[n + i], buf_a[2 * n + i]];
                out.push(renormalize(o.map(f64::from)));
            }
            start += n;
        }
        NormalMap {
            vectors: Grid::from_vec(h, w, out).expect("chunked output covers the frame"),
        }
    }
}

/// Per-pixel inference and renormalisation.
pub fn predict_normal_map(p: &MlpParams, f: &TactileFrame) -> NormalMap {
    Predictor::new(p).predict(f)
}

/// Median per-pixel angular error in degrees between predictions and labels.
pub fn median_angular_error(p: &MlpParams, samples: &[TrainSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let inputs: Vec<f64> = samples.iter().flat_map(|s| s.input).collect();
    let preds = forward_batch(p, &inputs);
    let mut errs: Vec<f64> = preds
        .iter()
        .zip(samples)
        .map(|(y, s)| sim::angle_deg(renormalize(*y), s.target))
        .collect();
    errs.sort_by(f64::total_cmp);
    errs[errs.len() / 2]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_params(sizes: &[usize], seed: u64) -> MlpParams {
        MlpParams::init(sizes, seed)
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = tiny_params(&[4, 4], 1).zeros_like();
        assert_eq!(forward(&p, &[0.3, 0.2, 0.9, 0.1, 0.5], Mode::Infer), [0.0; 3]);
    }

    #[test]
    fn hand_computed_single_path() {
        // 5-2-2-3: only input 0 feeds hidden unit 0, which feeds unit 0, which
        // feeds all three outputs with weights (1, 2, 3).
        let mut p = tiny_params(&[2, 2], 1).zeros_like();
        p.layers[0].weights[0] = 2.0; // x0 -> h1_0
        p.layers[0].bias = vec![0.5, 0.0];
        p.layers[1].weights[0] = 3.0; // h1_0 -> h2_0
        p.layers[1].bias = vec![-1.0, 0.0];
        p.layers[2].weights[..3].copy_from_slice(&[1.0, 2.0, 3.0]);
        p.layers[2].bias = vec![0.0, 0.0, 0.1];
        // h1 = 2*0.75 + 0.5 = 2, h2 = 3*2 - 1 = 5, y = (5, 10, 15.1)
        let y = forward(&p, &[0.75, 0.0, 0.0, 0.0, 0.0], Mode::Infer);
        assert_eq!(y, [5.0, 10.0, 15.1]);
    }

    #[test]
    fn zero_rate_train_equals_infer() {
        let p = tiny_params(&[8, 8], 3);
        let x = [0.2, 0.4, 0.6, 0.8, 1.0];
        let ones = [1.0; 8];
        let masks: [&[f64]; 2] = [&ones, &ones];
        assert_eq!(forward(&p, &x, Mode::Train(&masks)), forward(&p, &x, Mode::Infer));
    }

    #[test]
    fn batch_forward_matches_single() {
        let p = tiny_params(&[7, 5], 9);
        let xs: Vec<[f64; 5]> = (0..11)
            .map(|i| {
                let t = i as f64 / 10.0;
                [t, 1.0 - t, 0.5 * t, t * t, 0.3]
            })
            .collect();
        let flat: Vec<f64> = xs.iter().flatten().copied().collect();
        let batched = forward_batch(&p, &flat);
        for (x, b) in xs.iter().zip(&batched) {
            let s = forward(&p, x, Mode::Infer);
            for k in 0..3 {
                assert!((s[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mse_values() {
        let a = [[1.0, 0.0, 0.0]];
        let b = [[0.0, 1.0, 0.0]];
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        assert!((mse_loss(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let c = [[2.0, 1.0, 1.0], [1.0, 1.0, 1.0]];
        let d = [[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        assert_eq!(mse_loss(&c, &d).unwrap(), 1.0);
        assert!(matches!(mse_loss(&a, &c), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_loss_zero_gradient() {
        let p = tiny_params(&[4, 4], 5);
        let x = [0.1, 0.2, 0.3, 0.4, 0.5];
        let y = forward_batch(&p, &x)[0];
        let (loss, g) = backward(&p, &x, &y, None).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_batch_same_gradient() {
        let p = tiny_params(&[6, 6], 5);
        let x = [0.1, 0.2, 0.3, 0.4, 0.5, 0.9, 0.8, 0.7, 0.6, 0.5];
        let t = [0.0, 0.0, 1.0, 0.6, 0.0, 0.8];
        let (l1, g1) = backward(&p, &x, &t, None).unwrap();
        let x2: Vec<f64> = x.iter().chain(&x).copied().collect();
        let t2: Vec<f64> = t.iter().chain(&t).copied().collect();
        let (l2, g2) = backward(&p, &x2, &t2, None).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        for (a, b) in g1.flat().iter().zip(g2.flat()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn adam_zero_gradient_fresh_state() {
        let mut p = tiny_params(&[3, 3], 2);
        let before = p.clone();
        let mut s = AdamState::new(p.param_count(), 0.001);
        let g = p.zeros_like();
        adam_step(&mut p, &g, &mut s).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn adam_first_step_magnitude() {
        let mut p = tiny_params(&[1, 1], 2).zeros_like();
        let mut g = p.zeros_like();
        g.layers[2].bias[0] = 1.0;
        let mut s = AdamState::new(p.param_count(), 0.001);
        adam_step(&mut p, &g, &mut s).unwrap();
        let expected = -0.001 * 1.0 / (1.0 + 1e-8);
        assert!((p.layers[2].bias[0] - expected).abs() < 1e-18);
        assert!((p.layers[2].bias[0] + 0.000999999990).abs() < 1e-15);
    }

    #[test]
    fn adam_constant_gradient_tends_to_lr() {
        let mut p = tiny_params(&[1, 1], 2).zeros_like();
        let mut g = p.zeros_like();
        g.layers[2].bias[1] = 0.37;
        let mut s = AdamState::new(p.param_count(), 0.001);
        let mut prev = 0.0;
        let mut last_step = 0.0;
        for _ in 0..2000 {
            adam_step(&mut p, &g, &mut s).unwrap();
            let cur = p.layers[2].bias[1];
            last_step = prev - cur;
            assert!(last_step > 0.0, "drift must be monotone");
            prev = cur;
        }
        assert!((last_step - 0.001).abs() < 1e-9, "{last_step}");
    }

    #[test]
    fn adam_rejects_mismatched_shapes() {
        let mut p = tiny_params(&[3, 3], 2);
        let g = tiny_params(&[4, 3], 2);
        let mut s = AdamState::new(p.param_count(), 0.001);
        assert!(adam_step(&mut p, &g, &mut s).is_err());
    }

    #[test]
    fn renormalize_keeps_nz_positive() {
        let n = renormalize([1.0, 0.0, -5.0]);
        assert!(n[2] > 0.0);
        assert!((n[0] * n[0] + n[1] * n[1] + n[2] * n[2] - 1.0).abs() < 1e-12);
        assert_eq!(renormalize([0.0, 0.0, 0.0]), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        cfg.epochs = 0;
        assert_eq!(
            cfg.validate().unwrap_err().to_string(),
            "domain error: epochs must be ≥ 1"
        );
        let cfg = TrainConfig {
            dropout_rate: 1.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
