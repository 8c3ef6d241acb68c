//! Heteroscedastic convolutional regressor with hand-written reverse-mode
//! gradients, trained on the Laplacian negative log-likelihood.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::RealRaster;
use crate::uqstats::{EnsembleSource, PredictiveEnsemble};

pub const IN_CHANNELS: usize = 5;

/// (input, output) channels of the four 3×3 convolutions.
pub const LAYERS: [(usize, usize); 4] = [(IN_CHANNELS, 16), (16, 32), (32, 16), (16, 2)];

/// Dropout acts on the output of this layer (after its ReLU).
pub const DROPOUT_LAYER: usize = 1;

pub const ARCHITECTURE_ID: &str = "conv3x3:5-16-32-drop-16-2";

const KERNEL: usize = 9;

fn weight_len(l: usize) -> usize {
    LAYERS[l].0 * LAYERS[l].1 * KERNEL
}

fn layer_offset(l: usize) -> usize {
    (0..l).map(|k| weight_len(k) + LAYERS[k].1).sum()
}

pub fn param_count() -> usize {
    layer_offset(LAYERS.len())
}

/// Named tensors of the checkpoint layout, in storage order.
pub fn tensor_layout() -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for (l, &(cin, cout)) in LAYERS.iter().enumerate() {
        out.push((format!("conv{}.weight", l + 1), vec![cout, cin, 3, 3]));
        out.push((format!("conv{}.bias", l + 1), vec![cout]));
    }
    out
}

/// All kernels and biases in one flat vector. Per layer: weights laid out
/// `[out][in][ky][kx]`, followed by `out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorParams {
    values: Vec<f64>,
}

impl RegressorParams {
    pub fn zeros() -> Self {
        Self { values: vec![0.0; param_count()] }
    }

    pub fn from_flat(values: Vec<f64>) -> Result<Self> {
        if values.len() != param_count() {
            return Err(Error::ShapeMismatch(format!("{} parameters, expected {}", values.len(), param_count())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(Self { values })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn weight(&self, l: usize) -> &[f64] {
        let o = layer_offset(l);
        &self.values[o..o + weight_len(l)]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        let o = layer_offset(l) + weight_len(l);
        &self.values[o..o + LAYERS[l].1]
    }

    fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let o = layer_offset(l);
        let (w, rest) = self.values[o..].split_at_mut(weight_len(l));
        (w, &mut rest[..LAYERS[l].1])
    }

    /// Flat index of kernel tap `(o, i, ky, kx)` in layer `l`.
    pub fn weight_index(l: usize, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        layer_offset(l) + ((o * LAYERS[l].0 + i) * 3 + ky) * 3 + kx
    }
}

/// He-normal kernels (variance 2/fan_in), zero biases.
pub fn init_params(seed: u64) -> RegressorParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = RegressorParams::zeros();
    for (l, &(fan_in, _)) in LAYERS.iter().enumerate() {
        let std = (2.0 / (fan_in * KERNEL) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let (w, _) = p.layer_mut(l);
        w.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
    }
    p
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DropoutMode {
    Off,
    Sampled { rate: f64, seed: u64 },
}

impl DropoutMode {
    /// Per-channel multipliers: 0 for dropped channels, 1/(1−rate) otherwise.
    fn mask(&self, channels: usize) -> Vec<f64> {
        match *self {
            DropoutMode::Off => vec![1.0; channels],
            DropoutMode::Sampled { rate, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let keep = 1.0 / (1.0 - rate);
                (0..channels).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect()
            }
        }
    }

    /// Channels zeroed by this mode at the dropout site.
    pub fn dropped_channels(&self) -> Vec<usize> {
        self.mask(LAYERS[DROPOUT_LAYER].1).iter().enumerate().filter(|(_, &m)| m == 0.0).map(|(c, _)| c).collect()
    }
}

/// Per-pixel Laplace location μ and log-scale s (σ = exp(s)).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveMap {
    pub mu: RealRaster,
    pub log_scale: RealRaster,
}

impl PredictiveMap {
    pub fn new(mu: RealRaster, log_scale: RealRaster) -> Result<Self> {
        if !mu.same_shape(&log_scale) {
            return Err(Error::ShapeMismatch("mu and log_scale differ".into()));
        }
        Ok(Self { mu, log_scale })
    }

    pub fn sigma(&self) -> RealRaster {
        self.log_scale.map(f64::exp)
    }
}

fn conv_forward(input: &[f64], h: usize, w: usize, l: usize, params: &RegressorParams) -> Vec<f64> {
    let (cin, cout) = LAYERS[l];
    let n = h * w;
    let (kernel, bias) = (params.weight(l), params.bias(l));
    let mut out = vec![0.0; cout * n];
    for o in 0..cout {
        let dst = &mut out[o * n..(o + 1) * n];
        dst.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..cin {
            let src = &input[i * n..(i + 1) * n];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = kernel[((o * cin + i) * 3 + ky) * 3 + kx];
                    let (r0, r1, c0, c1) = tap_bounds(h, w, ky, kx);
                    for r in r0..r1 {
                        let sr = r + ky - 1;
                        let d = &mut dst[r * w + c0..r * w + c1];
                        let s = &src[sr * w + c0 + kx - 1..sr * w + c1 + kx - 1];
                        d.iter_mut().zip(s).for_each(|(a, b)| *a += wv * b);
                    }
                }
            }
        }
    }
    out
}

/// Output rows/cols for which tap (ky, kx) reads inside the frame.
#[inline]
fn tap_bounds(h: usize, w: usize, ky: usize, kx: usize) -> (usize, usize, usize, usize) {
    let r0 = if ky == 0 { 1 } else { 0 };
    let r1 = if ky == 2 { h - 1 } else { h };
    let c0 = if kx == 0 { 1 } else { 0 };
    let c1 = if kx == 2 { w - 1 } else { w };
    (r0, r1, c0, c1)
}

/// Accumulates kernel/bias gradients into `grad` and returns the input gradient
/// when `want_input` is set.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    dout: &[f64],
    h: usize,
    w: usize,
    l: usize,
    params: &RegressorParams,
    grad: &mut RegressorParams,
    want_input: bool,
) -> Option<Vec<f64>> {
    let (cin, cout) = LAYERS[l];
    let n = h * w;
    let kernel = params.weight(l);
    let mut din = if want_input { Some(vec![0.0; cin * n]) } else { None };
    let (gw, gb) = grad.layer_mut(l);
    for o in 0..cout {
        let g = &dout[o * n..(o + 1) * n];
        gb[o] += g.iter().sum::<f64>();
        for i in 0..cin {
            let src = &input[i * n..(i + 1) * n];
            for ky in 0..3 {
                for kx in 0..3 {
                    let k = ((o * cin + i) * 3 + ky) * 3 + kx;
                    let (r0, r1, c0, c1) = tap_bounds(h, w, ky, kx);
                    let mut acc = 0.0;
                    for r in r0..r1 {
                        let sr = r + ky - 1;
                        let gr = &g[r * w + c0..r * w + c1];
                        let s = &src[sr * w + c0 + kx - 1..sr * w + c1 + kx - 1];
                        acc += gr.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                    }
                    gw[k] += acc;
                    if let Some(din) = din.as_mut() {
                        let wv = kernel[k];
                        let dst = &mut din[i * n..(i + 1) * n];
                        for r in r0..r1 {
                            let sr = r + ky - 1;
                            let gr = &g[r * w + c0..r * w + c1];
                            let d = &mut dst[sr * w + c0 + kx - 1..sr * w + c1 + kx - 1];
                            d.iter_mut().zip(gr).for_each(|(a, b)| *a += wv * b);
                        }
                    }
                }
            }
        }
    }
    din
}

fn check_input(input: &[RealRaster]) -> Result<(usize, usize)> {
    if input.len() != IN_CHANNELS {
        return Err(Error::ShapeMismatch(format!("{} input channels, expected {IN_CHANNELS}", input.len())));
    }
    let shape = input[0].shape();
    if input.iter().any(|c| c.shape() != shape) {
        return Err(Error::ShapeMismatch("input channels differ in shape".into()));
    }
    if shape.0 < 2 || shape.1 < 2 {
        return Err(Error::ShapeMismatch(format!("input {shape:?} too small")));
    }
    Ok(shape)
}

/// Activations kept for the backward pass.
struct Trace {
    h: usize,
    w: usize,
    /// Layer inputs (post-activation, post-dropout where applicable).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<f64>>,
    mask: Vec<f64>,
    output: Vec<f64>,
}

fn run_forward(params: &RegressorParams, input: &[RealRaster], dropout: DropoutMode) -> Result<Trace> {
    let (h, w) = check_input(input)?;
    let n = h * w;
    let mut x: Vec<f64> = Vec::with_capacity(IN_CHANNELS * n);
    input.iter().for_each(|c| x.extend_from_slice(c.data()));
    let mask = dropout.mask(LAYERS[DROPOUT_LAYER].1);
    let mut inputs = Vec::with_capacity(LAYERS.len());
    let mut pre = Vec::with_capacity(LAYERS.len() - 1);
    for l in 0..LAYERS.len() {
        let z = conv_forward(&x, h, w, l, params);
        inputs.push(x);
        if l + 1 == LAYERS.len() {
            return Ok(Trace { h, w, inputs, pre, mask, output: z });
        }
        let mut a: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
        if l == DROPOUT_LAYER {
            for (c, m) in mask.iter().enumerate() {
                a[c * n..(c + 1) * n].iter_mut().for_each(|v| *v *= m);
            }
        }
        pre.push(z);
        x = a;
    }
    unreachable!("loop returns at the last layer")
}

pub fn forward(params: &RegressorParams, input: &[RealRaster], dropout: DropoutMode) -> Result<PredictiveMap> {
    let t = run_forward(params, input, dropout)?;
    let (h, w, n) = (t.h, t.w, t.h * t.w);
    let pitch = input[0].pitch();
    let mu = RealRaster::new(h, w, pitch, t.output[..n].to_vec())?;
    let s = RealRaster::new(h, w, pitch, t.output[n..].to_vec())?;
    PredictiveMap::new(mu, s)
}

/// Mean over pixels of `|y − μ|·e^{−s} + s + ln 2`.
pub fn nll_loss(pred: &PredictiveMap, target: &RealRaster) -> Result<f64> {
    if !pred.mu.same_shape(target) {
        return Err(Error::ShapeMismatch("prediction and target differ".into()));
    }
    Ok(nll_from_slices(pred.mu.data(), pred.log_scale.data(), target.data()))
}

fn nll_from_slices(mu: &[f64], s: &[f64], y: &[f64]) -> f64 {
    let sum: f64 = mu.iter().zip(s).zip(y).map(|((m, s), y)| (y - m).abs() * (-s).exp() + s).sum();
    sum / y.len() as f64 + std::f64::consts::LN_2
}

/// Loss and exact gradient with respect to every parameter for one sample.
pub fn backward(
    params: &RegressorParams,
    input: &[RealRaster],
    target: &RealRaster,
    dropout: DropoutMode,
) -> Result<(f64, RegressorParams)> {
    let t = run_forward(params, input, dropout)?;
    if target.shape() != (t.h, t.w) {
        return Err(Error::ShapeMismatch("prediction and target differ".into()));
    }
    let (h, w, n) = (t.h, t.w, t.h * t.w);
    let (mu, s) = t.output.split_at(n);
    let y = target.data();
    let loss = nll_from_slices(mu, s, y);

    let inv_n = 1.0 / n as f64;
    let mut dz = vec![0.0; 2 * n];
    for i in 0..n {
        let r = y[i] - mu[i];
        let e = (-s[i]).exp();
        // sign(0) = 0: the subgradient at the kink.
        let sign = if r > 0.0 { 1.0 } else if r < 0.0 { -1.0 } else { 0.0 };
        dz[i] = -sign * e * inv_n;
        dz[n + i] = (1.0 - r.abs() * e) * inv_n;
    }

    let mut grad = RegressorParams::zeros();
    for l in (0..LAYERS.len()).rev() {
        let din = conv_backward(&t.inputs[l], &dz, h, w, l, params, &mut grad, l > 0);
        let Some(mut da) = din else { break };
        let hidden = l - 1;
        if hidden == DROPOUT_LAYER {
            for (c, m) in t.mask.iter().enumerate() {
                da[c * n..(c + 1) * n].iter_mut().for_each(|v| *v *= m);
            }
        }
        for (d, z) in da.iter_mut().zip(&t.pre[hidden]) {
            if *z <= 0.0 {
                *d = 0.0;
            }
        }
        dz = da;
    }
    Ok((loss, grad))
}

/// Outcome of a central finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

/// Signs of every ReLU pre-activation and every output residual; a parameter
/// perturbation that flips any of them straddles a kink.
fn kink_signature(params: &RegressorParams, input: &[RealRaster], target: &RealRaster, dropout: DropoutMode) -> Result<Vec<bool>> {
    let t = run_forward(params, input, dropout)?;
    let n = t.h * t.w;
    let mut sig: Vec<bool> = t.pre.iter().flatten().map(|z| *z > 0.0).collect();
    sig.extend(t.output[..n].iter().zip(target.data()).map(|(m, y)| y - m > 0.0));
    Ok(sig)
}

/// Compares `backward` against central differences on `samples` randomly
/// chosen parameters. Relative error is `|a − n| / max(|a|, |n|, floor)`;
/// parameters whose ±h evaluations cross a ReLU or absolute-value kink are
/// skipped and counted.
#[allow(clippy::too_many_arguments)]
pub fn check_gradient(
    params: &RegressorParams,
    batch: &[(Vec<RealRaster>, RealRaster, DropoutMode)],
    samples: usize,
    h: f64,
    floor: f64,
    seed: u64,
) -> Result<GradientCheck> {
    let loss_of = |p: &RegressorParams| -> Result<f64> {
        let mut total = 0.0;
        for (x, y, d) in batch {
            total += nll_loss(&forward(p, x, *d)?, y)?;
        }
        Ok(total / batch.len() as f64)
    };
    let mut analytic = RegressorParams::zeros();
    for (x, y, d) in batch {
        let (_, g) = backward(params, x, y, *d)?;
        analytic.values.iter_mut().zip(&g.values).for_each(|(a, b)| *a += b / batch.len() as f64);
    }
    let signature = |p: &RegressorParams| -> Result<Vec<Vec<bool>>> {
        batch.iter().map(|(x, y, d)| kink_signature(p, x, y, *d)).collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradientCheck { max_rel_error: 0.0, checked: 0, skipped_kinks: 0 };
    let mut attempts = 0;
    while report.checked < samples && attempts < samples * 20 {
        attempts += 1;
        let k = rng.random_range(0..param_count());
        let mut plus = params.clone();
        plus.values[k] += h;
        let mut minus = params.clone();
        minus.values[k] -= h;
        if signature(&plus)? != signature(&minus)? {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (loss_of(&plus)? - loss_of(&minus)?) / (2.0 * h);
        let a = analytic.values[k];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Provenance {
    pub fov_region: String,
    pub time_frame: u32,
    pub sample_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Vec<RealRaster>,
    pub target: RealRaster,
    pub split: Split,
    pub provenance: Provenance,
}

/// Input/target pairs sharing one shape, targets normalized to [0, 1].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let mut shape = None;
        for s in &samples {
            let sh = check_input(&s.input)?;
            if s.target.shape() != sh {
                return Err(Error::ShapeMismatch("target and input differ".into()));
            }
            if *shape.get_or_insert(sh) != sh {
                return Err(Error::ShapeMismatch("samples differ in shape".into()));
            }
            if s.target.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidArgument("targets must lie in [0, 1]".into()));
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout_rate: f64,
    pub seed: u64,
    pub ensemble_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 16,
            epochs: 500,
            dropout_rate: 0.1,
            seed: 0,
            ensemble_size: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout rate must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("invalid moment coefficients");
        }
        if self.batch_size == 0 || self.ensemble_size == 0 {
            return bad("batch size and ensemble size must be >= 1");
        }
        Ok(())
    }

    /// Seed of ensemble member `p`.
    pub fn member_seed(&self, p: usize) -> u64 {
        self.seed.wrapping_add((p as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    fn dropout(&self, seed: u64) -> DropoutMode {
        if self.dropout_rate > 0.0 {
            DropoutMode::Sampled { rate: self.dropout_rate, seed }
        } else {
            DropoutMode::Off
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub params: RegressorParams,
    /// Mini-batch loss at every optimizer step.
    pub step_loss: Vec<f64>,
    /// Mean mini-batch loss per epoch.
    pub epoch_loss: Vec<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for k in 0..params.len() {
            self.m[k] = cfg.beta1 * self.m[k] + (1.0 - cfg.beta1) * grad[k];
            self.v[k] = cfg.beta2 * self.v[k] + (1.0 - cfg.beta2) * grad[k] * grad[k];
            let mh = self.m[k] / c1;
            let vh = self.v[k] / c2;
            params[k] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
        }
    }
}

/// Trains one network from `init_params(seed)`.
pub fn train_member(dataset: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<TrainReport> {
    cfg.validate()?;
    let train = dataset.split(Split::Train);
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut params = init_params(seed);
    let mut adam = Adam::new(param_count());
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5348_5546_464c_4500);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4452_4f50_4f55_5400);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport { params: params.clone(), step_loss: Vec::new(), epoch_loss: Vec::with_capacity(cfg.epochs) };

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_sum = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let jobs: Vec<(usize, DropoutMode)> = batch.iter().map(|&i| (i, cfg.dropout(drop_rng.random()))).collect();
            let results: Vec<Result<(f64, RegressorParams)>> =
                jobs.par_iter().map(|&(i, d)| backward(&params, &train[i].input, &train[i].target, d)).collect();
            let inv = 1.0 / batch.len() as f64;
            let mut grad = vec![0.0; param_count()];
            let mut loss = 0.0;
            for r in results {
                let (l, g) = r?;
                loss += l * inv;
                grad.iter_mut().zip(&g.values).for_each(|(a, b)| *a += b * inv);
            }
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::DivergedLoss { epoch });
            }
            adam.step(&mut params.values, &grad, cfg);
            report.step_loss.push(loss);
            epoch_sum += loss;
            batches += 1;
        }
        report.epoch_loss.push(epoch_sum / batches as f64);
    }
    report.params = params;
    Ok(report)
}

pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<RegressorParams> {
    Ok(train_member(dataset, cfg, cfg.seed)?.params)
}

/// Trains `cfg.ensemble_size` members concurrently with disjoint seeds.
pub fn train_ensemble(dataset: &Dataset, cfg: &TrainConfig) -> Result<Vec<RegressorParams>> {
    (0..cfg.ensemble_size)
        .into_par_iter()
        .map(|p| train_member(dataset, cfg, cfg.member_seed(p)).map(|r| r.params))
        .collect()
}

/// Mean loss and mean absolute error of μ over a set of samples (dropout off).
pub fn evaluate(params: &RegressorParams, samples: &[&Sample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per: Vec<Result<(f64, f64)>> = samples
        .par_iter()
        .map(|s| {
            let pred = forward(params, &s.input, DropoutMode::Off)?;
            let mae = pred.mu.data().iter().zip(s.target.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / s.target.len() as f64;
            Ok((nll_loss(&pred, &s.target)?, mae))
        })
        .collect();
    let mut acc = (0.0, 0.0);
    for r in per {
        let (l, m) = r?;
        acc.0 += l;
        acc.1 += m;
    }
    let k = samples.len() as f64;
    Ok((acc.0 / k, acc.1 / k))
}

/// One deterministic forward per member.
pub fn predict_deep_ensemble(models: &[RegressorParams], input: &[RealRaster]) -> Result<PredictiveEnsemble> {
    if models.is_empty() {
        return Err(Error::InvalidArgument("ensemble needs at least one member".into()));
    }
    let members = models.par_iter().map(|m| forward(m, input, DropoutMode::Off)).collect::<Result<Vec<_>>>()?;
    PredictiveEnsemble::new(members, EnsembleSource::DeepEnsemble)
}

/// `count` sampled-dropout forwards of one network.
pub fn predict_mc_dropout(
    params: &RegressorParams,
    rate: f64,
    count: usize,
    seed: u64,
    input: &[RealRaster],
) -> Result<PredictiveEnsemble> {
    if count == 0 {
        return Err(Error::InvalidArgument("ensemble needs at least one member".into()));
    }
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument("dropout rate must be in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..count).map(|_| rng.random()).collect();
    let members = seeds
        .par_iter()
        .map(|&s| forward(params, input, DropoutMode::Sampled { rate, seed: s }))
        .collect::<Result<Vec<_>>>()?;
    PredictiveEnsemble::new(members, EnsembleSource::McDropout)
}
