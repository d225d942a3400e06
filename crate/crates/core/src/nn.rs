//! Parameter storage, the small layer set used by the models, the Adam
//! optimizer, and a finite-difference gradient checker.
//!
//! Layers are plain functions over row-major batches: a batch of `b` rows
//! with `n` features is a `&[f64]` of length `b * n`. Each forward function
//! has a matching backward function that accumulates parameter gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// `c = op(a) * op(b) + beta * c` for row-major operands.
///
/// `op(a)` is `m x k` and `op(b)` is `k x n`; with `trans_a` the stored `a`
/// is `k x m`, with `trans_b` the stored `b` is `n x k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the
    // strides above address only those elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameters with one gradient slot of matching shape each.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    params: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            params: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::from_parts(value.shape().to_vec(), vec![0.0; value.len()]);
        self.names.push(name.into());
        self.params.push(value);
        self.grads.push(grad);
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    /// Mutable parameter value and gradient of the same slot.
    pub(crate) fn param_and_grad_mut(&mut self, id: ParamId) -> (&Tensor, &mut Tensor) {
        (&self.params[id.0], &mut self.grads[id.0])
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.params[id.0].shape() {
            return Err(Error::ShapeMismatch {
                expected: self.params[id.0].shape().to_vec(),
                actual: value.shape().to_vec(),
            });
        }
        self.params[id.0] = value;
        Ok(())
    }

    /// SHA-256 over names, shapes and parameter bytes.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, p) in self.iter() {
            h.update(name.as_bytes());
            h.update(p.digest().as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Glorot-uniform weight matrix `[fan_in, fan_out]`.
pub(crate) fn glorot(rng: &mut RngStream, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.uniform(-limit, limit))
        .collect();
    Tensor::from_parts(vec![fan_in, fan_out], data)
}

pub(crate) fn zeros(n: usize) -> Tensor {
    Tensor::from_parts(vec![n], vec![0.0; n])
}

/// `y = x w + bias` for `x: [rows, in]`, `w: [in, out]`.
pub(crate) fn linear_forward(x: &[f64], rows: usize, w: &Tensor, bias: &Tensor) -> Vec<f64> {
    let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
    let mut y = Vec::with_capacity(rows * fan_out);
    for _ in 0..rows {
        y.extend_from_slice(bias.data());
    }
    gemm(x, w.data(), &mut y, rows, fan_in, fan_out, false, false, 1.0);
    y
}

/// Accumulates `dw += x^T dy`, `db += sum_rows dy`; returns `dx = dy w^T` if asked.
pub(crate) fn linear_backward(
    store: &mut ParamStore,
    w: ParamId,
    b: ParamId,
    x: &[f64],
    dy: &[f64],
    rows: usize,
    want_dx: bool,
) -> Option<Vec<f64>> {
    let (fan_in, fan_out) = {
        let s = store.param(w).shape();
        (s[0], s[1])
    };
    {
        let (_, dw) = store.param_and_grad_mut(w);
        gemm(x, dy, dw.data_mut(), fan_in, rows, fan_out, true, false, 1.0);
    }
    {
        let db = store.grad_mut(b).data_mut();
        for row in dy.chunks_exact(fan_out) {
            for (g, d) in db.iter_mut().zip(row) {
                *g += d;
            }
        }
    }
    if want_dx {
        let mut dx = vec![0.0; rows * fan_in];
        gemm(dy, store.param(w).data(), &mut dx, rows, fan_out, fan_in, false, true, 0.0);
        Some(dx)
    } else {
        None
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `x * sigmoid(x)`.
pub(crate) fn swish_forward(pre: &[f64]) -> Vec<f64> {
    pre.iter().map(|&x| x * sigmoid(x)).collect()
}

pub(crate) fn swish_backward(pre: &[f64], dpost: &[f64]) -> Vec<f64> {
    pre.iter()
        .zip(dpost)
        .map(|(&x, &d)| {
            let s = sigmoid(x);
            d * s * (1.0 + x * (1.0 - s))
        })
        .collect()
}

/// Adam with bias correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let m = store.params.iter().map(|p| vec![0.0; p.len()]).collect();
        let v = store.params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self { cfg, step: 0, m, v }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in store
            .params
            .iter_mut()
            .zip(&store.grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }
}

fn relative_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-12)
}

/// Compares reverse-mode gradients against central finite differences.
///
/// `loss_fn` must return the loss and write its gradient into the store's
/// gradient slots; the store's gradients are zeroed before every call.
/// Returns `max |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-12)` over all scalars.
pub fn check_gradients<F>(loss_fn: F, store: &mut ParamStore, epsilon: f64) -> Result<f64>
where
    F: FnMut(&mut ParamStore) -> Result<f64>,
{
    check_gradients_impl(loss_fn, store, epsilon, None)
}

/// Like [`check_gradients`] but checks at most `per_param` randomly chosen
/// coordinates of each parameter tensor.
pub fn check_gradients_sampled<F>(
    loss_fn: F,
    store: &mut ParamStore,
    epsilon: f64,
    per_param: usize,
    rng: &mut RngStream,
) -> Result<f64>
where
    F: FnMut(&mut ParamStore) -> Result<f64>,
{
    check_gradients_impl(loss_fn, store, epsilon, Some((per_param, rng)))
}

fn check_gradients_impl<F>(
    mut loss_fn: F,
    store: &mut ParamStore,
    epsilon: f64,
    sample: Option<(usize, &mut RngStream)>,
) -> Result<f64>
where
    F: FnMut(&mut ParamStore) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::invalid("epsilon", format!("{epsilon} outside [1e-7, 1e-3]")));
    }
    let mut eval = |store: &mut ParamStore| -> Result<f64> {
        store.zero_grads();
        let l = loss_fn(store)?;
        if !l.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        Ok(l)
    };
    eval(store)?;
    let analytic: Vec<Vec<f64>> = store.grads.iter().map(|g| g.data().to_vec()).collect();

    let mut coords: Vec<(usize, usize)> = Vec::new();
    match sample {
        None => {
            for (pi, p) in store.params.iter().enumerate() {
                coords.extend((0..p.len()).map(|i| (pi, i)));
            }
        }
        Some((per_param, rng)) => {
            for (pi, p) in store.params.iter().enumerate() {
                if p.len() <= per_param {
                    coords.extend((0..p.len()).map(|i| (pi, i)));
                } else {
                    coords.extend((0..per_param).map(|_| (pi, rng.below(p.len()))));
                }
            }
        }
    }

    let mut worst: f64 = 0.0;
    for (pi, i) in coords {
        let orig = store.params[pi].data()[i];
        store.params[pi].data_mut()[i] = orig + epsilon;
        let up = eval(store)?;
        store.params[pi].data_mut()[i] = orig - epsilon;
        let down = eval(store)?;
        store.params[pi].data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * epsilon);
        worst = worst.max(relative_error(analytic[pi][i], fd));
    }
    // Leave the analytic gradient in place for the caller.
    for (g, a) in store.grads.iter_mut().zip(analytic) {
        g.data_mut().copy_from_slice(&a);
    }
    Ok(worst)
}
