//! A few zero-padded convolution layers with `tanh` between them, trained on
//! the noise-prediction objective with hand-written backpropagation.
//!
//! Time enters every layer as a learned per-channel bias scaled by `t / T`.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Denoiser;
use crate::diffusion::{forward_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::field::{Field, Units};
use crate::rng::{normal_field, seeded};

const MAGIC: &[u8; 4] = b"PCDN";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
struct ConvLayer {
    in_ch: usize,
    out_ch: usize,
    /// `[out][in][ky][kx]`
    weights: Vec<f64>,
    bias: Vec<f64>,
    time_bias: Vec<f64>,
}

impl ConvLayer {
    fn zeros(in_ch: usize, out_ch: usize, ksize: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            weights: vec![0.0; out_ch * in_ch * ksize * ksize],
            bias: vec![0.0; out_ch],
            time_bias: vec![0.0; out_ch],
        }
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len() + self.time_bias.len()
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .chain(self.bias.iter_mut())
            .chain(self.time_bias.iter_mut())
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(&self.bias).chain(&self.time_bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvDenoiser {
    kernel_size: usize,
    layers: Vec<ConvLayer>,
}

/// Activations kept for the backward pass.
struct Tape {
    /// `inputs[l]` feeds layer `l`; the last entry is the network output.
    acts: Vec<Vec<f64>>,
}

impl ConvDenoiser {
    /// `channels` lists the channel count at each interface, input first and
    /// output last, so `[1, 8, 8, 1]` is three layers.
    pub fn new(channels: &[usize], kernel_size: usize, rng: &mut impl Rng) -> Result<Self> {
        if channels.len() < 2 {
            return Err(Error::param("channels", "need at least one layer"));
        }
        if channels.first() != Some(&1) || channels.last() != Some(&1) {
            return Err(Error::param("channels", "input and output must be single-channel"));
        }
        if channels.contains(&0) {
            return Err(Error::param("channels", "zero-width layer"));
        }
        if kernel_size == 0 || kernel_size.is_multiple_of(2) {
            return Err(Error::param("kernel_size", format!("must be odd, got {kernel_size}")));
        }
        let layers = channels
            .windows(2)
            .map(|w| {
                let mut layer = ConvLayer::zeros(w[0], w[1], kernel_size);
                let fan_in = (w[0] * kernel_size * kernel_size) as f64;
                let dist = Normal::new(0.0, (1.0 / fan_in).sqrt()).unwrap();
                for v in layer.weights.iter_mut() {
                    *v = dist.sample(rng);
                }
                layer
            })
            .collect();
        Ok(Self { kernel_size, layers })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::param_count).sum()
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn channels(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].in_ch)
            .chain(self.layers.iter().map(|l| l.out_ch))
            .collect()
    }

    fn flat_params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.params().copied()).collect()
    }

    fn set_flat_params(&mut self, flat: &[f64]) {
        let mut it = flat.iter();
        for layer in &mut self.layers {
            for p in layer.params_mut() {
                *p = *it.next().expect("parameter count");
            }
        }
    }

    fn forward(&self, x: &[f64], h: usize, w: usize, t_frac: f64) -> Tape {
        let mut acts = vec![x.to_vec()];
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = conv_forward(layer, acts.last().unwrap(), h, w, self.kernel_size);
            let hw = h * w;
            for o in 0..layer.out_ch {
                let b = layer.bias[o] + layer.time_bias[o] * t_frac;
                for v in &mut out[o * hw..(o + 1) * hw] {
                    *v += b;
                    if i != last {
                        *v = v.tanh();
                    }
                }
            }
            acts.push(out);
        }
        Tape { acts }
    }

    /// Loss `mean((out - target)^2)` and gradients for every parameter, flattened
    /// in layer order (weights, bias, time bias).
    fn loss_and_grad(&self, x: &[f64], target: &[f64], h: usize, w: usize, t_frac: f64) -> (f64, Vec<f64>) {
        let tape = self.forward(x, h, w, t_frac);
        let out = tape.acts.last().unwrap();
        let p = (h * w) as f64;
        let loss = out.iter().zip(target).map(|(o, y)| (o - y).powi(2)).sum::<f64>() / p;
        let mut delta: Vec<f64> = out.iter().zip(target).map(|(o, y)| 2.0 * (o - y) / p).collect();

        let hw = h * w;
        let mut grads: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &tape.acts[i];
            let mut g = ConvLayer::zeros(layer.in_ch, layer.out_ch, self.kernel_size);
            conv_weight_grad(layer, input, &delta, h, w, self.kernel_size, &mut g.weights);
            for o in 0..layer.out_ch {
                let s: f64 = delta[o * hw..(o + 1) * hw].iter().sum();
                g.bias[o] = s;
                g.time_bias[o] = s * t_frac;
            }
            grads.push(g.params().copied().collect());
            if i > 0 {
                let mut back = conv_input_grad(layer, &delta, h, w, self.kernel_size);
                for (b, a) in back.iter_mut().zip(input) {
                    *b *= 1.0 - a * a;
                }
                delta = back;
            }
        }
        grads.reverse();
        (loss, grads.concat())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.kernel_size as u32).to_le_bytes());
        buf.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for c in self.channels() {
            buf.extend_from_slice(&(c as u32).to_le_bytes());
        }
        for p in self.flat_params() {
            buf.extend_from_slice(&(p as f32).to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let truncated = |expected: usize| Error::Truncated {
            path: path.to_path_buf(),
            expected: expected as u64,
            actual: bytes.len() as u64,
        };
        if bytes.len() < 16 {
            return Err(truncated(16));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: *MAGIC,
                found: bytes[..4].to_vec(),
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let kernel_size = word(8) as usize;
        let n_layers = word(12) as usize;
        let header = 16 + 4 * (n_layers + 1);
        if n_layers == 0 || n_layers > 64 {
            return Err(Error::Data(format!("implausible layer count {n_layers}")));
        }
        if bytes.len() < header {
            return Err(truncated(header));
        }
        let channels: Vec<usize> = (0..=n_layers).map(|i| word(16 + 4 * i) as usize).collect();
        let mut net = ConvDenoiser {
            kernel_size,
            layers: channels
                .windows(2)
                .map(|w| ConvLayer::zeros(w[0], w[1], kernel_size))
                .collect(),
        };
        let expected = header + 4 * net.param_count();
        if bytes.len() < expected {
            return Err(truncated(expected));
        }
        if bytes.len() > expected {
            return Err(Error::TrailingData {
                path: path.to_path_buf(),
                extra: (bytes.len() - expected) as u64,
            });
        }
        let flat: Vec<f64> = bytes[header..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        net.set_flat_params(&flat);
        Ok(net)
    }
}

fn conv_forward(layer: &ConvLayer, input: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let c = k / 2;
    let hw = h * w;
    let mut out = vec![0.0; layer.out_ch * hw];
    for o in 0..layer.out_ch {
        for i in 0..layer.in_ch {
            let src = &input[i * hw..(i + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = layer.weights[((o * layer.in_ch + i) * k + ky) * k + kx];
                    for r in 0..h {
                        let sr = r as isize + ky as isize - c as isize;
                        if sr < 0 || sr >= h as isize {
                            continue;
                        }
                        let sr = sr as usize;
                        for col in 0..w {
                            let sc = col as isize + kx as isize - c as isize;
                            if sc < 0 || sc >= w as isize {
                                continue;
                            }
                            out[o * hw + r * w + col] += wv * src[sr * w + sc as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_weight_grad(layer: &ConvLayer, input: &[f64], delta: &[f64], h: usize, w: usize, k: usize, out: &mut [f64]) {
    let c = k / 2;
    let hw = h * w;
    for o in 0..layer.out_ch {
        for i in 0..layer.in_ch {
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = 0.0;
                    for r in 0..h {
                        let sr = r as isize + ky as isize - c as isize;
                        if sr < 0 || sr >= h as isize {
                            continue;
                        }
                        for col in 0..w {
                            let sc = col as isize + kx as isize - c as isize;
                            if sc < 0 || sc >= w as isize {
                                continue;
                            }
                            acc += delta[o * hw + r * w + col] * input[i * hw + sr as usize * w + sc as usize];
                        }
                    }
                    out[((o * layer.in_ch + i) * k + ky) * k + kx] = acc;
                }
            }
        }
    }
}

fn conv_input_grad(layer: &ConvLayer, delta: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let c = k / 2;
    let hw = h * w;
    let mut out = vec![0.0; layer.in_ch * hw];
    for o in 0..layer.out_ch {
        for i in 0..layer.in_ch {
            for ky in 0..k {
                for kx in 0..k {
                    let wv = layer.weights[((o * layer.in_ch + i) * k + ky) * k + kx];
                    for r in 0..h {
                        let sr = r as isize + ky as isize - c as isize;
                        if sr < 0 || sr >= h as isize {
                            continue;
                        }
                        for col in 0..w {
                            let sc = col as isize + kx as isize - c as isize;
                            if sc < 0 || sc >= w as isize {
                                continue;
                            }
                            out[i * hw + sr as usize * w + sc as usize] += wv * delta[o * hw + r * w + col];
                        }
                    }
                }
            }
        }
    }
    out
}

impl Denoiser for ConvDenoiser {
    fn predict_noise(&self, x_t: &Field, t: usize, schedule: &NoiseSchedule) -> Result<Field> {
        schedule.check_step(t)?;
        let (h, w) = x_t.shape();
        let tape = self.forward(x_t.values(), h, w, t as f64 / schedule.steps() as f64);
        let out = tape.acts.into_iter().last().unwrap();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                step: t,
                line: 2,
                what: "denoiser output",
            });
        }
        Ok(Field::from_parts(h, w, out, Units::Model))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Adam step size.
    pub lr: f64,
    /// Noise draws per field per epoch.
    pub draws_per_field: usize,
    pub channels: Vec<usize>,
    pub kernel_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            lr: 5e-3,
            draws_per_field: 4,
            channels: vec![1, 8, 8, 1],
            kernel_size: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ConvDenoiser,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::B1.powi(self.step);
        let c2 = 1.0 - Self::B2.powi(self.step);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

/// Minimizes `E || eps - eps_theta(x_t, t) ||^2` over uniform `t` and Gaussian `eps`.
pub fn train_conv_denoiser(dataset: &[Field], schedule: &NoiseSchedule, config: &TrainConfig) -> Result<TrainOutcome> {
    let first = dataset.first().ok_or_else(|| Error::Data("empty training set".into()))?;
    let (h, w) = first.shape();
    if dataset.iter().any(|f| f.shape() != (h, w)) {
        return Err(Error::Data("training fields differ in shape".into()));
    }
    if config.batch_size == 0 || config.draws_per_field == 0 {
        return Err(Error::param("batch_size", "batch size and draws must be positive"));
    }
    let mut rng = seeded(config.seed);
    let mut model = ConvDenoiser::new(&config.channels, config.kernel_size, &mut rng)?;
    let mut params = model.flat_params();
    let mut adam = Adam::new(params.len());
    let data: Vec<Field> = dataset.iter().map(Field::to_model).collect();
    let steps = schedule.steps();

    let mut order: Vec<usize> = (0..data.len()).flat_map(|i| std::iter::repeat_n(i, config.draws_per_field)).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    let mut last_finite = f64::NAN;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        // Stratified steps: one uniform draw per equal slice of 1..=T, then shuffled.
        let n_draws = order.len();
        let mut ts: Vec<usize> = (0..n_draws)
            .map(|i| {
                let u = (i as f64 + rng.random::<f64>()) / n_draws as f64;
                ((u * steps as f64) as usize).min(steps - 1) + 1
            })
            .collect();
        ts.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let mut grad = vec![0.0; params.len()];
            let mut batch_loss = 0.0;
            for (j, &idx) in batch.iter().enumerate() {
                let t = ts[b * config.batch_size + j];
                let eps = normal_field(&mut rng, h, w, Units::Model);
                let xt = forward_sample(schedule, &data[idx], t, &eps)?;
                let (l, g) = model.loss_and_grad(xt.values(), eps.values(), h, w, t as f64 / steps as f64);
                batch_loss += l;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            let n = batch.len() as f64;
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training {
                    epoch,
                    last_finite_loss: last_finite,
                });
            }
            last_finite = batch_loss / n;
            grad.iter_mut().for_each(|g| *g /= n);
            adam.update(&mut params, &grad, config.lr);
            model.set_flat_params(&params);
            epoch_loss += batch_loss;
        }
        let mean = epoch_loss / order.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Training {
                epoch,
                last_finite_loss: last_finite,
            });
        }
        losses.push(mean);
    }
    Ok(TrainOutcome { model, losses })
}
