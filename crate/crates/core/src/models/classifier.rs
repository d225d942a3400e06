//! Multi-head classifier: a 4-way content-quadrant softmax head and one
//! sigmoid head per attribute, on a shared two-hidden-layer trunk. The
//! trunk activations double as perceptual features.

use serde::{Deserialize, Serialize};

use crate::attr::Attribute;
use crate::error::{Error, Result};
use crate::nn::{self, sigmoid, Adam, ParamId, ParamStore};
use crate::phantom::{content_quadrant, Dataset, IMAGE_PIXELS, IMAGE_SIZE};
use crate::rng::RngStream;
use crate::tensor::Tensor;

use super::denoiser::round_store_to_f32;
use super::{HeadMetrics, TrainConfig, TrainReport};

pub const CONTENT_CLASSES: usize = 4;
const ATTRS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub pixels: usize,
    pub hidden: [usize; 2],
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            pixels: IMAGE_PIXELS,
            hidden: [256, 128],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ids {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    wc: ParamId,
    bc: ParamId,
    wa: ParamId,
    ba: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierArch {
    config: ClassifierConfig,
    ids: Ids,
}

struct Cache {
    rows: usize,
    a1: Vec<f64>,
    h1: Vec<f64>,
    a2: Vec<f64>,
    h2: Vec<f64>,
    content_logits: Vec<f64>,
    attr_logits: Vec<f64>,
}

/// Training targets for a batch of images.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub images: Vec<f64>,
    pub content: Vec<usize>,
    /// Row-major `[rows, 4]` in [`Attribute::ALL`] order.
    pub attrs: Vec<bool>,
}

/// Per-image classifier output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub content_probs: [f64; CONTENT_CLASSES],
    /// Indexed by [`Attribute::index`].
    pub attr_probs: [f64; ATTRS],
}

impl Classification {
    pub fn attr(&self, a: Attribute) -> f64 {
        self.attr_probs[a.index()]
    }

    pub fn content_class(&self) -> usize {
        argmax(&self.content_probs)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn softmax(logits: &[f64]) -> [f64; CONTENT_CLASSES] {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = [0.0; CONTENT_CLASSES];
    let mut sum = 0.0;
    for (pi, &z) in p.iter_mut().zip(logits) {
        *pi = (z - m).exp();
        sum += *pi;
    }
    p.iter_mut().for_each(|x| *x /= sum);
    p
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

impl ClassifierArch {
    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    fn build(config: ClassifierConfig, store: &mut ParamStore, rng: &mut RngStream) -> Result<Self> {
        if config.pixels == 0 || config.hidden.contains(&0) {
            return Err(Error::invalid("classifier config", "all sizes must be positive"));
        }
        let [h1, h2] = config.hidden;
        let ids = Ids {
            w1: store.add("w1", nn::glorot(rng, config.pixels, h1)),
            b1: store.add("b1", nn::zeros(h1)),
            w2: store.add("w2", nn::glorot(rng, h1, h2)),
            b2: store.add("b2", nn::zeros(h2)),
            wc: store.add("wc", nn::glorot(rng, h2, CONTENT_CLASSES)),
            bc: store.add("bc", nn::zeros(CONTENT_CLASSES)),
            wa: store.add("wa", nn::glorot(rng, h2, ATTRS)),
            ba: store.add("ba", nn::zeros(ATTRS)),
        };
        Ok(Self { config, ids })
    }

    fn bind(config: ClassifierConfig, store: &ParamStore) -> Result<Self> {
        let id = |name: &str| {
            store
                .id(name)
                .ok_or_else(|| Error::format("tensors", format!("missing parameter `{name}`")))
        };
        let ids = Ids {
            w1: id("w1")?,
            b1: id("b1")?,
            w2: id("w2")?,
            b2: id("b2")?,
            wc: id("wc")?,
            bc: id("bc")?,
            wa: id("wa")?,
            ba: id("ba")?,
        };
        let [h1, h2] = config.hidden;
        let expect = [
            (ids.w1, vec![config.pixels, h1]),
            (ids.b1, vec![h1]),
            (ids.w2, vec![h1, h2]),
            (ids.b2, vec![h2]),
            (ids.wc, vec![h2, CONTENT_CLASSES]),
            (ids.bc, vec![CONTENT_CLASSES]),
            (ids.wa, vec![h2, ATTRS]),
            (ids.ba, vec![ATTRS]),
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

    fn forward(&self, store: &ParamStore, images: &[f64]) -> Result<Cache> {
        let px = self.config.pixels;
        if images.is_empty() || images.len() % px != 0 {
            return Err(Error::ShapeMismatch {
                expected: vec![px],
                actual: vec![images.len()],
            });
        }
        let rows = images.len() / px;
        let ids = &self.ids;
        let a1 = nn::linear_forward(images, rows, store.param(ids.w1), store.param(ids.b1));
        let h1 = nn::swish_forward(&a1);
        let a2 = nn::linear_forward(&h1, rows, store.param(ids.w2), store.param(ids.b2));
        let h2 = nn::swish_forward(&a2);
        let content_logits = nn::linear_forward(&h2, rows, store.param(ids.wc), store.param(ids.bc));
        let attr_logits = nn::linear_forward(&h2, rows, store.param(ids.wa), store.param(ids.ba));
        if content_logits.iter().chain(&attr_logits).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("classifier logits".into()));
        }
        Ok(Cache {
            rows,
            a1,
            h1,
            a2,
            h2,
            content_logits,
            attr_logits,
        })
    }

    /// Mean over rows of content cross-entropy plus the four attribute
    /// binary cross-entropies; writes gradients into `store`.
    pub fn loss_and_grad(&self, store: &mut ParamStore, batch: &LabeledBatch) -> Result<f64> {
        let cache = self.forward(store, &batch.images)?;
        let rows = cache.rows;
        if batch.content.len() != rows || batch.attrs.len() != rows * ATTRS {
            return Err(Error::ShapeMismatch {
                expected: vec![rows, ATTRS],
                actual: vec![batch.content.len(), batch.attrs.len()],
            });
        }
        let inv = 1.0 / rows as f64;
        let mut loss = 0.0;
        let mut dc = vec![0.0; rows * CONTENT_CLASSES];
        let mut da = vec![0.0; rows * ATTRS];
        for r in 0..rows {
            let logits = &cache.content_logits[r * CONTENT_CLASSES..(r + 1) * CONTENT_CLASSES];
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            let y = batch.content[r];
            loss += lse - logits[y];
            for k in 0..CONTENT_CLASSES {
                let p = (logits[k] - lse).exp();
                dc[r * CONTENT_CLASSES + k] = inv * (p - if k == y { 1.0 } else { 0.0 });
            }
            for k in 0..ATTRS {
                let z = cache.attr_logits[r * ATTRS + k];
                let y = if batch.attrs[r * ATTRS + k] { 1.0 } else { 0.0 };
                loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
                da[r * ATTRS + k] = inv * (sigmoid(z) - y);
            }
        }
        let ids = self.ids;
        let dh2c = nn::linear_backward(store, ids.wc, ids.bc, &cache.h2, &dc, rows, true).unwrap();
        let dh2a = nn::linear_backward(store, ids.wa, ids.ba, &cache.h2, &da, rows, true).unwrap();
        let dh2: Vec<f64> = dh2c.iter().zip(&dh2a).map(|(a, b)| a + b).collect();
        let da2 = nn::swish_backward(&cache.a2, &dh2);
        let dh1 = nn::linear_backward(store, ids.w2, ids.b2, &cache.h1, &da2, rows, true).unwrap();
        let da1 = nn::swish_backward(&cache.a1, &dh1);
        nn::linear_backward(store, ids.w1, ids.b1, &batch.images, &da1, rows, false);
        Ok(loss * inv)
    }

    pub fn classify_batch(&self, store: &ParamStore, images: &[f64]) -> Result<Vec<Classification>> {
        let cache = self.forward(store, images)?;
        Ok((0..cache.rows)
            .map(|r| {
                let content_probs = softmax(&cache.content_logits[r * CONTENT_CLASSES..(r + 1) * CONTENT_CLASSES]);
                let mut attr_probs = [0.0; ATTRS];
                for (k, p) in attr_probs.iter_mut().enumerate() {
                    *p = sigmoid(cache.attr_logits[r * ATTRS + k]);
                }
                Classification {
                    content_probs,
                    attr_probs,
                }
            })
            .collect())
    }

    /// Per row: `[normalized h1, normalized h2]`.
    pub fn features_batch(&self, store: &ParamStore, images: &[f64]) -> Result<Vec<[Vec<f64>; 2]>> {
        let cache = self.forward(store, images)?;
        let [n1, n2] = self.config.hidden;
        Ok((0..cache.rows)
            .map(|r| {
                [
                    normalize(&cache.h1[r * n1..(r + 1) * n1]),
                    normalize(&cache.h2[r * n2..(r + 1) * n2]),
                ]
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    arch: ClassifierArch,
    params: ParamStore,
    pub seed: u64,
}

impl ClassifierModel {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = RngStream::new(seed, 0x434c_4153_5349_4659);
        let arch = ClassifierArch::build(config, &mut params, &mut rng)?;
        Ok(Self { arch, params, seed })
    }

    pub(crate) fn from_parts(config: ClassifierConfig, params: ParamStore, seed: u64) -> Result<Self> {
        let arch = ClassifierArch::bind(config, &params)?;
        Ok(Self { arch, params, seed })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.arch.config
    }

    pub fn arch(&self) -> &ClassifierArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn split_mut(&mut self) -> (&ClassifierArch, &mut ParamStore) {
        (&self.arch, &mut self.params)
    }

    /// Names of the layers whose activations [`features`] returns.
    pub fn feature_layers(&self) -> [&'static str; 2] {
        ["h1", "h2"]
    }

    pub fn classify_batch(&self, images: &[f64]) -> Result<Vec<Classification>> {
        self.arch.classify_batch(&self.params, images)
    }

    pub fn features_batch(&self, images: &[f64]) -> Result<Vec<[Vec<f64>; 2]>> {
        self.arch.features_batch(&self.params, images)
    }

    pub fn digest(&self) -> String {
        self.params.digest()
    }
}

fn check_image(image: &Tensor) -> Result<()> {
    if image.shape() != [IMAGE_SIZE, IMAGE_SIZE] {
        return Err(Error::ShapeMismatch {
            expected: vec![IMAGE_SIZE, IMAGE_SIZE],
            actual: image.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn classify(model: &ClassifierModel, image: &Tensor) -> Result<Classification> {
    check_image(image)?;
    Ok(model.classify_batch(image.data())?.remove(0))
}

/// Unit-normalized activations of both hidden layers. A zero activation
/// vector is returned unchanged.
pub fn features(model: &ClassifierModel, image: &Tensor) -> Result<Vec<Vec<f64>>> {
    check_image(image)?;
    let [a, b] = model.features_batch(image.data())?.remove(0);
    Ok(vec![a, b])
}

fn labels(ds: &Dataset) -> (Vec<usize>, Vec<bool>) {
    let content = ds.phantoms.iter().map(|p| content_quadrant(&p.content)).collect();
    let attrs = ds
        .phantoms
        .iter()
        .flat_map(|p| Attribute::ALL.map(|a| p.attrs.get(a)))
        .collect();
    (content, attrs)
}

fn check_labels(ds: &Dataset) -> Result<()> {
    let (content, attrs) = labels(ds);
    let mut seen = [false; CONTENT_CLASSES];
    content.iter().for_each(|&c| seen[c] = true);
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::SingleClassHead("content".into()));
    }
    for a in Attribute::ALL {
        let pos = attrs.iter().skip(a.index()).step_by(ATTRS).filter(|&&b| b).count();
        if pos == 0 || pos == ds.len() {
            return Err(Error::SingleClassHead(a.name().into()));
        }
    }
    Ok(())
}

fn binary_f1(pred: &[bool], truth: &[bool]) -> f64 {
    let tp = pred.iter().zip(truth).filter(|(p, t)| **p && **t).count() as f64;
    let fp = pred.iter().zip(truth).filter(|(p, t)| **p && !**t).count() as f64;
    let fneg = pred.iter().zip(truth).filter(|(p, t)| !**p && **t).count() as f64;
    if tp == 0.0 {
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fneg)
    }
}

/// Accuracy and F1 per head on a labeled dataset (content F1 is macro-averaged).
pub fn evaluate_heads(model: &ClassifierModel, ds: &Dataset) -> Result<Vec<HeadMetrics>> {
    let (content, attrs) = labels(ds);
    let mut preds = Vec::with_capacity(ds.len());
    for chunk in ds.phantoms.chunks(256) {
        let images: Vec<f64> = chunk.iter().flat_map(|p| p.image.data().iter().copied()).collect();
        preds.extend(model.classify_batch(&images)?);
    }
    let n = ds.len() as f64;
    let pc: Vec<usize> = preds.iter().map(Classification::content_class).collect();
    let acc = pc.iter().zip(&content).filter(|(a, b)| a == b).count() as f64 / n;
    let f1 = (0..CONTENT_CLASSES)
        .map(|k| {
            let p: Vec<bool> = pc.iter().map(|&c| c == k).collect();
            let t: Vec<bool> = content.iter().map(|&c| c == k).collect();
            binary_f1(&p, &t)
        })
        .sum::<f64>()
        / CONTENT_CLASSES as f64;
    let mut heads = vec![HeadMetrics {
        head: "content".into(),
        accuracy: acc,
        f1,
    }];
    for a in Attribute::ALL {
        let p: Vec<bool> = preds.iter().map(|c| c.attr(a) >= 0.5).collect();
        let t: Vec<bool> = attrs.iter().skip(a.index()).step_by(ATTRS).copied().collect();
        heads.push(HeadMetrics {
            head: a.name().into(),
            accuracy: p.iter().zip(&t).filter(|(x, y)| x == y).count() as f64 / n,
            f1: binary_f1(&p, &t),
        });
    }
    Ok(heads)
}

/// Trains on `train` and reports held-out metrics on `held_out`.
pub fn train_classifier(
    train: &Dataset,
    held_out: &Dataset,
    config: ClassifierConfig,
    cfg: &TrainConfig,
) -> Result<(ClassifierModel, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() || held_out.is_empty() {
        return Err(Error::invalid("dataset", "empty"));
    }
    check_labels(train)?;
    let (content, attrs) = labels(train);
    let mut model = ClassifierModel::new(config, cfg.seed)?;
    let mut opt = Adam::new(cfg.adam(), &model.params);
    let root = RngStream::new(cfg.seed, 0x434c_5452_4149_4e00);
    let make_batch = |rng: &mut RngStream| {
        let mut b = LabeledBatch {
            images: Vec::with_capacity(cfg.batch_size * IMAGE_PIXELS),
            content: Vec::with_capacity(cfg.batch_size),
            attrs: Vec::with_capacity(cfg.batch_size * ATTRS),
        };
        for _ in 0..cfg.batch_size {
            let i = rng.below(train.len());
            b.images.extend_from_slice(train.phantoms[i].image.data());
            b.content.push(content[i]);
            b.attrs.extend_from_slice(&attrs[i * ATTRS..(i + 1) * ATTRS]);
        }
        b
    };
    let mut curve = Vec::with_capacity(cfg.steps.max(1));
    if cfg.steps == 0 {
        let batch = make_batch(&mut root.child(0));
        let (arch, params) = model.split_mut();
        curve.push(arch.loss_and_grad(params, &batch)?);
        params.zero_grads();
    }
    for step in 0..cfg.steps {
        let batch = make_batch(&mut root.child(step as u64));
        let (arch, params) = model.split_mut();
        params.zero_grads();
        curve.push(arch.loss_and_grad(params, &batch)?);
        opt.step(params, cfg.lr_at(step));
    }
    if cfg.steps > 0 {
        round_store_to_f32(&mut model.params);
    }
    let heads = evaluate_heads(&model, held_out)?;
    let w = 50.min(curve.len());
    let report = TrainReport {
        initial_smoothed_loss: curve[..w].iter().sum::<f64>() / w as f64,
        final_smoothed_loss: curve[curve.len() - w..].iter().sum::<f64>() / w as f64,
        loss_curve: curve,
        heads,
    };
    Ok((model, report))
}
