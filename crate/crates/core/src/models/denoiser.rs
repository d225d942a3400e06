//! Conditional noise predictor `eps_hat(x_t, t, e)`.
//!
//! Flattened image -> 1024->h1 linear, modulated per unit by a scale and
//! shift computed from `[sinusoidal time features, projected prompt]`, then
//! swish -> h1->h2 linear, modulated the same way -> swish -> h2->1024
//! linear, plus the input times a scalar gate computed from the same
//! conditioning vector.

use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_noise, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{self, Adam, ParamId, ParamStore};
use crate::phantom::{Dataset, IMAGE_PIXELS, IMAGE_SIZE};
use crate::prompt::{embed, AttributeSpec, Embedding, EmbeddingTable, EMBED_DIM};
use crate::rng::RngStream;
use crate::tensor::Tensor;

use super::{TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub pixels: usize,
    pub hidden: [usize; 2],
    pub time_dim: usize,
    pub prompt_dim: usize,
    /// Diffusion step count the time features are normalized by.
    pub steps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            pixels: IMAGE_PIXELS,
            hidden: [512, 512],
            time_dim: 32,
            prompt_dim: 32,
            steps: crate::diffusion::DEFAULT_STEPS,
        }
    }
}

impl DenoiserConfig {
    fn cond_dim(&self) -> usize {
        self.time_dim + self.prompt_dim
    }

    fn validate(&self) -> Result<()> {
        if self.pixels == 0 || self.hidden.contains(&0) || self.prompt_dim == 0 || self.steps == 0 {
            return Err(Error::invalid("denoiser config", "all sizes must be positive"));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::invalid("time_dim", "must be positive and even"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ids {
    w1: ParamId,
    b1: ParamId,
    wp: ParamId,
    bp: ParamId,
    ws: ParamId,
    bs: ParamId,
    wh: ParamId,
    bh: ParamId,
    w2: ParamId,
    b2: ParamId,
    w3: ParamId,
    b3: ParamId,
    ws2: ParamId,
    bs2: ParamId,
    wh2: ParamId,
    bh2: ParamId,
    wg: ParamId,
    bg: ParamId,
}

/// Architecture: configuration plus the parameter slots it reads.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserArch {
    config: DenoiserConfig,
    ids: Ids,
}

struct Cache {
    rows: usize,
    cond: Vec<f64>,
    a1: Vec<f64>,
    scale: Vec<f64>,
    z1: Vec<f64>,
    h1: Vec<f64>,
    a2: Vec<f64>,
    scale2: Vec<f64>,
    z2: Vec<f64>,
    h2: Vec<f64>,
}

/// Sinusoidal features of `t / steps`: `sin(w_k s)` then `cos(w_k s)`,
/// with `w_k` log-spaced from 1 to 200.
pub fn time_features(t: usize, steps: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let s = t as f64 / steps as f64;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let w = if half > 1 {
            (200f64.ln() * k as f64 / (half - 1) as f64).exp()
        } else {
            1.0
        };
        out[k] = (w * s).sin();
        out[half + k] = (w * s).cos();
    }
    out
}

impl DenoiserArch {
    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub(crate) fn build(config: DenoiserConfig, store: &mut ParamStore, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let [h1, h2] = config.hidden;
        let c = config.cond_dim();
        let ids = Ids {
            w1: store.add("w1", nn::glorot(rng, config.pixels, h1)),
            b1: store.add("b1", nn::zeros(h1)),
            wp: store.add("wp", nn::glorot(rng, EMBED_DIM, config.prompt_dim)),
            bp: store.add("bp", nn::zeros(config.prompt_dim)),
            ws: store.add("ws", nn::glorot(rng, c, h1)),
            bs: store.add("bs", nn::zeros(h1)),
            wh: store.add("wh", nn::glorot(rng, c, h1)),
            bh: store.add("bh", nn::zeros(h1)),
            w2: store.add("w2", nn::glorot(rng, h1, h2)),
            b2: store.add("b2", nn::zeros(h2)),
            w3: store.add("w3", nn::glorot(rng, h2, config.pixels)),
            b3: store.add("b3", nn::zeros(config.pixels)),
            ws2: store.add("ws2", nn::glorot(rng, c, h2)),
            bs2: store.add("bs2", nn::zeros(h2)),
            wh2: store.add("wh2", nn::glorot(rng, c, h2)),
            bh2: store.add("bh2", nn::zeros(h2)),
            wg: store.add("wg", Tensor::zeros(&[c, 1])?),
            bg: store.add("bg", Tensor::full(&[1], 1.0)?),
        };
        Ok(Self { config, ids })
    }

    /// Re-binds to a store holding the same named parameters.
    pub(crate) fn bind(config: DenoiserConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let id = |name: &str| {
            store
                .id(name)
                .ok_or_else(|| Error::format("tensors", format!("missing parameter `{name}`")))
        };
        let ids = Ids {
            w1: id("w1")?,
            b1: id("b1")?,
            wp: id("wp")?,
            bp: id("bp")?,
            ws: id("ws")?,
            bs: id("bs")?,
            wh: id("wh")?,
            bh: id("bh")?,
            w2: id("w2")?,
            b2: id("b2")?,
            w3: id("w3")?,
            b3: id("b3")?,
            ws2: id("ws2")?,
            bs2: id("bs2")?,
            wh2: id("wh2")?,
            bh2: id("bh2")?,
            wg: id("wg")?,
            bg: id("bg")?,
        };
        let [h1, h2] = config.hidden;
        let c = config.cond_dim();
        let expect = [
            (ids.w1, vec![config.pixels, h1]),
            (ids.b1, vec![h1]),
            (ids.wp, vec![EMBED_DIM, config.prompt_dim]),
            (ids.bp, vec![config.prompt_dim]),
            (ids.ws, vec![c, h1]),
            (ids.bs, vec![h1]),
            (ids.wh, vec![c, h1]),
            (ids.bh, vec![h1]),
            (ids.w2, vec![h1, h2]),
            (ids.b2, vec![h2]),
            (ids.w3, vec![h2, config.pixels]),
            (ids.b3, vec![config.pixels]),
            (ids.ws2, vec![c, h2]),
            (ids.bs2, vec![h2]),
            (ids.wh2, vec![c, h2]),
            (ids.bh2, vec![h2]),
            (ids.wg, vec![c, 1]),
            (ids.bg, vec![1]),
        ];
        for (pid, shape) in expect {
            if store.param(pid).shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    expected: shape,
                    actual: store.param(pid).shape().to_vec(),
                });
            }
        }
        Ok(Self { config, ids })
    }

    fn check_inputs(&self, x: &[f64], ts: &[usize], es: &[Embedding]) -> Result<usize> {
        let rows = ts.len();
        if rows == 0 || es.len() != rows || x.len() != rows * self.config.pixels {
            return Err(Error::ShapeMismatch {
                expected: vec![rows, self.config.pixels],
                actual: vec![es.len(), x.len()],
            });
        }
        if let Some(&t) = ts.iter().find(|&&t| t == 0 || t > self.config.steps) {
            return Err(Error::StepOutOfRange {
                t,
                max: self.config.steps,
            });
        }
        Ok(rows)
    }

    fn forward(&self, store: &ParamStore, x: &[f64], ts: &[usize], es: &[Embedding]) -> Result<(Vec<f64>, Cache)> {
        let rows = self.check_inputs(x, ts, es)?;
        let cfg = &self.config;
        let ids = &self.ids;
        let e: Vec<f64> = es.iter().flat_map(|e| e.0).collect();
        let prompt = nn::linear_forward(&e, rows, store.param(ids.wp), store.param(ids.bp));
        let cd = cfg.cond_dim();
        let mut cond = Vec::with_capacity(rows * cd);
        for (r, &t) in ts.iter().enumerate() {
            cond.extend(time_features(t, cfg.steps, cfg.time_dim));
            cond.extend_from_slice(&prompt[r * cfg.prompt_dim..(r + 1) * cfg.prompt_dim]);
        }
        let scale = nn::linear_forward(&cond, rows, store.param(ids.ws), store.param(ids.bs));
        let shift = nn::linear_forward(&cond, rows, store.param(ids.wh), store.param(ids.bh));
        let a1 = nn::linear_forward(x, rows, store.param(ids.w1), store.param(ids.b1));
        let z1: Vec<f64> = a1
            .iter()
            .zip(&scale)
            .zip(&shift)
            .map(|((a, s), h)| a * (1.0 + s) + h)
            .collect();
        let h1 = nn::swish_forward(&z1);
        let a2 = nn::linear_forward(&h1, rows, store.param(ids.w2), store.param(ids.b2));
        let scale2 = nn::linear_forward(&cond, rows, store.param(ids.ws2), store.param(ids.bs2));
        let shift2 = nn::linear_forward(&cond, rows, store.param(ids.wh2), store.param(ids.bh2));
        let z2: Vec<f64> = a2
            .iter()
            .zip(&scale2)
            .zip(&shift2)
            .map(|((a, s), h)| a * (1.0 + s) + h)
            .collect();
        let h2 = nn::swish_forward(&z2);
        let mut out = nn::linear_forward(&h2, rows, store.param(ids.w3), store.param(ids.b3));
        // Gated skip from the input: at high noise the target is close to x_t itself.
        let gate = nn::linear_forward(&cond, rows, store.param(ids.wg), store.param(ids.bg));
        for (r, g) in gate.iter().enumerate() {
            let span = r * cfg.pixels..(r + 1) * cfg.pixels;
            for (o, xv) in out[span.clone()].iter_mut().zip(&x[span]) {
                *o += g * xv;
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("denoiser output".into()));
        }
        Ok((
            out,
            Cache {
                rows,
                cond,
                a1,
                scale,
                z1,
                h1,
                a2,
                scale2,
                z2,
                h2,
            },
        ))
    }

    fn backward(&self, store: &mut ParamStore, x: &[f64], es: &[Embedding], cache: &Cache, dout: &[f64]) {
        let ids = self.ids;
        let cfg = self.config;
        let rows = cache.rows;
        let dh2 = nn::linear_backward(store, ids.w3, ids.b3, &cache.h2, dout, rows, true).unwrap();
        let dgate: Vec<f64> = dout
            .chunks_exact(cfg.pixels)
            .zip(x.chunks_exact(cfg.pixels))
            .map(|(d, xr)| d.iter().zip(xr).map(|(a, b)| a * b).sum())
            .collect();
        let dc_g = nn::linear_backward(store, ids.wg, ids.bg, &cache.cond, &dgate, rows, true).unwrap();
        let dz2 = nn::swish_backward(&cache.z2, &dh2);
        let da2: Vec<f64> = dz2.iter().zip(&cache.scale2).map(|(d, s)| d * (1.0 + s)).collect();
        let dscale2: Vec<f64> = dz2.iter().zip(&cache.a2).map(|(d, a)| d * a).collect();
        let dc_s2 = nn::linear_backward(store, ids.ws2, ids.bs2, &cache.cond, &dscale2, rows, true).unwrap();
        let dc_h2 = nn::linear_backward(store, ids.wh2, ids.bh2, &cache.cond, &dz2, rows, true).unwrap();
        let dh1 = nn::linear_backward(store, ids.w2, ids.b2, &cache.h1, &da2, rows, true).unwrap();
        let dz1 = nn::swish_backward(&cache.z1, &dh1);
        let da1: Vec<f64> = dz1.iter().zip(&cache.scale).map(|(d, s)| d * (1.0 + s)).collect();
        let dscale: Vec<f64> = dz1.iter().zip(&cache.a1).map(|(d, a)| d * a).collect();
        nn::linear_backward(store, ids.w1, ids.b1, x, &da1, rows, false);
        let dc_s = nn::linear_backward(store, ids.ws, ids.bs, &cache.cond, &dscale, rows, true).unwrap();
        let dc_h = nn::linear_backward(store, ids.wh, ids.bh, &cache.cond, &dz1, rows, true).unwrap();
        let cd = cfg.cond_dim();
        let mut dprompt = Vec::with_capacity(rows * cfg.prompt_dim);
        for r in 0..rows {
            let base = r * cd + cfg.time_dim;
            for k in 0..cfg.prompt_dim {
                dprompt.push(dc_s[base + k] + dc_h[base + k] + dc_s2[base + k] + dc_h2[base + k] + dc_g[base + k]);
            }
        }
        let e: Vec<f64> = es.iter().flat_map(|e| e.0).collect();
        nn::linear_backward(store, ids.wp, ids.bp, &e, &dprompt, rows, false);
    }

    pub fn predict(&self, store: &ParamStore, x: &[f64], ts: &[usize], es: &[Embedding]) -> Result<Vec<f64>> {
        Ok(self.forward(store, x, ts, es)?.0)
    }

    /// Mean squared error against `batch.target`; writes gradients into `store`.
    pub fn loss_and_grad(&self, store: &mut ParamStore, batch: &NoiseBatch) -> Result<f64> {
        let (out, cache) = self.forward(store, &batch.x_t, &batch.ts, &batch.es)?;
        let n = out.len() as f64;
        let mut loss = 0.0;
        let mut dout = Vec::with_capacity(out.len());
        for (o, y) in out.iter().zip(&batch.target) {
            let d = o - y;
            loss += d * d;
            dout.push(2.0 * d / n);
        }
        self.backward(store, &batch.x_t, &batch.es, &cache, &dout);
        Ok(loss / n)
    }

    /// Loss without gradients.
    pub fn loss(&self, store: &ParamStore, batch: &NoiseBatch) -> Result<f64> {
        let out = self.predict(store, &batch.x_t, &batch.ts, &batch.es)?;
        Ok(out
            .iter()
            .zip(&batch.target)
            .map(|(o, y)| (o - y).powi(2))
            .sum::<f64>()
            / out.len() as f64)
    }
}

/// One noise-prediction training batch.
#[derive(Debug, Clone)]
pub struct NoiseBatch {
    pub x_t: Vec<f64>,
    pub ts: Vec<usize>,
    pub es: Vec<Embedding>,
    pub target: Vec<f64>,
}

/// Draws a batch: uniform samples, `t` uniform in `1..=T`, Gaussian noise.
pub fn sample_noise_batch(
    dataset: &Dataset,
    embeddings: &[Embedding],
    schedule: &NoiseSchedule,
    batch_size: usize,
    rng: &mut RngStream,
) -> Result<NoiseBatch> {
    let mut batch = NoiseBatch {
        x_t: Vec::with_capacity(batch_size * IMAGE_PIXELS),
        ts: Vec::with_capacity(batch_size),
        es: Vec::with_capacity(batch_size),
        target: Vec::with_capacity(batch_size * IMAGE_PIXELS),
    };
    for _ in 0..batch_size {
        let i = rng.below(dataset.len());
        let t = 1 + rng.below(schedule.steps());
        let eps = crate::rng::sample_standard_normal(rng, &[IMAGE_SIZE, IMAGE_SIZE])?;
        let x_t = forward_noise(&dataset.phantoms[i].image, t, &eps, schedule)?;
        batch.x_t.extend_from_slice(x_t.data());
        batch.target.extend_from_slice(eps.data());
        batch.ts.push(t);
        batch.es.push(embeddings[i]);
    }
    Ok(batch)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    arch: DenoiserArch,
    params: ParamStore,
    pub seed: u64,
}

impl DenoiserModel {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = RngStream::new(seed, 0x4445_4e4f_4953_4552);
        let arch = DenoiserArch::build(config, &mut params, &mut rng)?;
        Ok(Self { arch, params, seed })
    }

    pub(crate) fn from_parts(config: DenoiserConfig, params: ParamStore, seed: u64) -> Result<Self> {
        let arch = DenoiserArch::bind(config, &params)?;
        Ok(Self { arch, params, seed })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.arch.config
    }

    pub fn arch(&self) -> &DenoiserArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Architecture and mutable parameters, for gradient checks.
    pub fn split_mut(&mut self) -> (&DenoiserArch, &mut ParamStore) {
        (&self.arch, &mut self.params)
    }

    /// Rounds every parameter to the nearest f32 so checkpoints reload exactly.
    pub fn round_to_f32(&mut self) {
        round_store_to_f32(&mut self.params);
    }

    pub fn digest(&self) -> String {
        self.params.digest()
    }
}

pub(crate) fn round_store_to_f32(store: &mut ParamStore) {
    for i in 0..store.len() {
        let p = store.param_mut(ParamId(i));
        for v in p.data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

impl Denoiser for DenoiserModel {
    fn predict_batch(&self, x: &[f64], ts: &[usize], es: &[Embedding]) -> Result<Vec<f64>> {
        self.arch.predict(&self.params, x, ts, es)
    }
}

/// Noise prediction for one 32x32 latent.
pub fn predict_noise(model: &DenoiserModel, x_t: &Tensor, t: usize, e: &Embedding) -> Result<Tensor> {
    if x_t.shape() != [IMAGE_SIZE, IMAGE_SIZE] {
        return Err(Error::ShapeMismatch {
            expected: vec![IMAGE_SIZE, IMAGE_SIZE],
            actual: x_t.shape().to_vec(),
        });
    }
    let out = model.predict_batch(x_t.data(), &[t], &[*e])?;
    Tensor::from_vec(x_t.shape(), out)
}

fn smoothed(curve: &[f64], window: usize) -> (f64, f64) {
    let w = window.min(curve.len()).max(1);
    let head = curve[..w].iter().sum::<f64>() / w as f64;
    let tail = curve[curve.len() - w..].iter().sum::<f64>() / w as f64;
    (head, tail)
}

pub fn train_denoiser(
    dataset: &Dataset,
    table: &EmbeddingTable,
    schedule: &NoiseSchedule,
    config: DenoiserConfig,
    cfg: &TrainConfig,
) -> Result<(DenoiserModel, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::invalid("dataset", "empty"));
    }
    cfg.validate()?;
    if config.steps != schedule.steps() {
        return Err(Error::invalid(
            "steps",
            format!("model expects {} steps, schedule has {}", config.steps, schedule.steps()),
        ));
    }
    let embeddings = dataset
        .phantoms
        .iter()
        .map(|p| embed(&AttributeSpec(p.attrs.present().into_iter().collect()), table))
        .collect::<Result<Vec<_>>>()?;
    let mut model = DenoiserModel::new(config, cfg.seed)?;
    let root = RngStream::new(cfg.seed, 0x4e4f_4953_4554_524e);
    let mut opt = Adam::new(cfg.adam(), &model.params);
    let mut curve = Vec::with_capacity(cfg.steps.max(1));
    if cfg.steps == 0 {
        let batch = sample_noise_batch(dataset, &embeddings, schedule, cfg.batch_size, &mut root.child(0))?;
        curve.push(model.arch.loss(&model.params, &batch)?);
    }
    for step in 0..cfg.steps {
        let batch = sample_noise_batch(dataset, &embeddings, schedule, cfg.batch_size, &mut root.child(step as u64))?;
        let (arch, params) = model.split_mut();
        params.zero_grads();
        let loss = arch.loss_and_grad(params, &batch)?;
        opt.step(params, cfg.lr_at(step));
        curve.push(loss);
    }
    if cfg.steps > 0 {
        model.round_to_f32();
    }
    let (initial, last) = smoothed(&curve, 50);
    let report = TrainReport {
        loss_curve: curve,
        initial_smoothed_loss: initial,
        final_smoothed_loss: last,
        heads: Vec::new(),
    };
    Ok((model, report))
}
