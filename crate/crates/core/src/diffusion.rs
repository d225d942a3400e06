//! Noise schedule, forward noising, the deterministic DDIM step and the
//! timestep-indexed generator `x_0 = g(x_T, e_1..e_T)`.
//!
//! `alpha_bar[t]` is the cumulative signal retention at step `t`, with
//! `alpha_bar[0] = 1`. Forward noising is
//! `x_t = sqrt(alpha_bar[t]) x_0 + sqrt(1 - alpha_bar[t]) eps`, and one reverse
//! step is `x_{t-1} = g0 x_t + g1 eps_hat` with
//! `g0 = sqrt(ab[t-1] / ab[t])` and
//! `g1 = sqrt(1 - ab[t-1]) - sqrt(ab[t-1] / ab[t] - ab[t-1])`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::prompt::Embedding;
use crate::tensor::Tensor;

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_BETA_START: f64 = 0.001;
pub const DEFAULT_BETA_END: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    steps: usize,
    /// `beta[t - 1]` is the per-step variance of step `t`.
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::invalid("steps", format!("{steps} < 2")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(
            "beta",
            format!("need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"),
        ));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
        .collect();
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    for b in &beta {
        let prev = *alpha_bar.last().unwrap();
        alpha_bar.push(prev * (1.0 - b));
    }
    Ok(NoiseSchedule {
        steps,
        beta,
        alpha_bar,
    })
}

/// The parameters a linear schedule is built from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    /// A schedule given directly by its cumulative coefficients. Requires
    /// `alpha_bar[0] = 1` and every value in `(0, 1]`; plateaus are allowed,
    /// which makes degenerate identity steps expressible.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 || alpha_bar[0] != 1.0 {
            return Err(Error::invalid("alpha_bar", "need at least two entries with alpha_bar[0] = 1"));
        }
        if alpha_bar.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::invalid("alpha_bar", "entries must lie in (0, 1]"));
        }
        let beta = alpha_bar.windows(2).map(|w| 1.0 - w[1] / w[0]).collect();
        Ok(Self {
            steps: alpha_bar.len() - 1,
            beta,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.beta[t - 1])
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::StepOutOfRange { t, max: self.steps });
        }
        Ok(())
    }

    pub fn gamma(&self, t: usize) -> Result<(f64, f64)> {
        self.check_step(t)?;
        gamma_coefficients(self.alpha_bar[t - 1], self.alpha_bar[t])
    }
}

/// `(g0, g1)` from `alpha_bar[t-1]` and `alpha_bar[t]`.
pub fn gamma_coefficients(ab_prev: f64, ab_t: f64) -> Result<(f64, f64)> {
    if !(ab_t > 0.0 && ab_t <= 1.0 && ab_prev > 0.0 && ab_prev <= 1.0) {
        return Err(Error::invalid("alpha_bar", format!("({ab_prev}, {ab_t}) outside (0, 1]")));
    }
    let ratio = ab_prev / ab_t;
    let radicand = ratio - ab_prev;
    // ab_prev * (1 - ab_t) / ab_t >= 0 for ab_t <= 1
    assert!(radicand >= 0.0, "negative gamma radicand {radicand}");
    Ok((ratio.sqrt(), (1.0 - ab_prev).sqrt() - radicand.sqrt()))
}

pub fn gamma(schedule: &NoiseSchedule, t: usize) -> Result<(f64, f64)> {
    schedule.gamma(t)
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn forward_noise(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    check_pair(x0, eps)?;
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar[t];
    x0.axpby(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

pub fn ddim_step(x_t: &Tensor, t: usize, eps_hat: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    check_pair(x_t, eps_hat)?;
    let (g0, g1) = schedule.gamma(t)?;
    x_t.axpby(g0, eps_hat, g1)
}

/// A noise predictor `eps_hat(x_t, t, e)`.
///
/// Rows of `x` are flattened images; row `i` is evaluated at step `ts[i]`
/// with embedding `es[i]`. Implementations must give each row the same
/// result regardless of which other rows share the batch.
pub trait Denoiser: Sync {
    fn predict_batch(&self, x: &[f64], ts: &[usize], es: &[Embedding]) -> Result<Vec<f64>>;
}

/// Adapts a per-image closure into a [`Denoiser`].
pub struct FnDenoiser<F>(pub F);

impl<F> Denoiser for FnDenoiser<F>
where
    F: Fn(&[f64], usize, &Embedding) -> Vec<f64> + Sync,
{
    fn predict_batch(&self, x: &[f64], ts: &[usize], es: &[Embedding]) -> Result<Vec<f64>> {
        let n = x.len() / ts.len();
        let mut out = Vec::with_capacity(x.len());
        for ((row, &t), e) in x.chunks_exact(n).zip(ts).zip(es) {
            let y = (self.0)(row, t, e);
            if y.len() != n {
                return Err(Error::ShapeMismatch {
                    expected: vec![n],
                    actual: vec![y.len()],
                });
            }
            out.extend(y);
        }
        Ok(out)
    }
}

/// The full reverse pass: latents `x_T .. x_0` and the embedding used at
/// each step.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationTrace {
    /// Step index of each latent, `T, T-1, .., 0`.
    pub steps: Vec<usize>,
    pub latents: Vec<Tensor>,
    /// `embeddings[i]` drove the step out of `latents[i]`.
    pub embeddings: Vec<Embedding>,
}

/// Final latent of one generation plus a SHA-256 digest of every
/// intermediate latent (`x_T` through `x_0`, f64 little-endian).
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub x0: Tensor,
    pub trace_digest: String,
}

fn check_embeddings(len: usize, schedule: &NoiseSchedule) -> Result<()> {
    if len != schedule.steps() {
        return Err(Error::invalid(
            "embedding_schedule",
            format!("has {len} entries, schedule has {} steps", schedule.steps()),
        ));
    }
    Ok(())
}

/// Runs the reverse pass from `x_T`; `embedding_schedule[t - 1]` is used at step `t`.
pub fn generate(
    x_t: &Tensor,
    embedding_schedule: &[Embedding],
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
) -> Result<(Tensor, GenerationTrace)> {
    check_embeddings(embedding_schedule.len(), schedule)?;
    let mut trace = GenerationTrace {
        steps: vec![schedule.steps()],
        latents: vec![x_t.clone()],
        embeddings: Vec::with_capacity(schedule.steps()),
    };
    let mut x = x_t.clone();
    for t in (1..=schedule.steps()).rev() {
        let e = embedding_schedule[t - 1];
        let eps = denoiser.predict_batch(x.data(), &[t], &[e])?;
        let eps = Tensor::from_vec(x.shape(), eps)?;
        x = ddim_step(&x, t, &eps, schedule)?;
        trace.steps.push(t - 1);
        trace.latents.push(x.clone());
        trace.embeddings.push(e);
    }
    Ok((x, trace))
}

/// Runs many reverse passes in lock-step, one denoiser call per step.
///
/// Each output equals what [`generate`] returns for the same inputs.
pub fn generate_batch(
    x_t: &[Tensor],
    embedding_schedules: &[Vec<Embedding>],
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
) -> Result<Vec<GenerationResult>> {
    if x_t.len() != embedding_schedules.len() {
        return Err(Error::invalid(
            "embedding_schedules",
            format!("{} schedules for {} latents", embedding_schedules.len(), x_t.len()),
        ));
    }
    if x_t.is_empty() {
        return Ok(Vec::new());
    }
    for e in embedding_schedules {
        check_embeddings(e.len(), schedule)?;
    }
    let shape = x_t[0].shape().to_vec();
    for x in x_t {
        check_pair(&x_t[0], x)?;
    }
    let n = x_t[0].len();
    let rows = x_t.len();
    let mut x: Vec<f64> = x_t.iter().flat_map(|t| t.data().iter().copied()).collect();
    let mut hashers: Vec<Sha256> = x_t
        .iter()
        .map(|t| {
            let mut h = Sha256::new();
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
            h
        })
        .collect();
    for t in (1..=schedule.steps()).rev() {
        let ts = vec![t; rows];
        let es: Vec<Embedding> = embedding_schedules.iter().map(|s| s[t - 1]).collect();
        let eps = denoiser.predict_batch(&x, &ts, &es)?;
        if eps.len() != x.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![x.len()],
                actual: vec![eps.len()],
            });
        }
        let (g0, g1) = schedule.gamma(t)?;
        for (xv, ev) in x.iter_mut().zip(&eps) {
            *xv = g0 * *xv + g1 * ev;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("latent at step {}", t - 1)));
        }
        for (h, row) in hashers.iter_mut().zip(x.chunks_exact(n)) {
            for v in row {
                h.update(v.to_le_bytes());
            }
        }
    }
    Ok(x.chunks_exact(n)
        .zip(hashers)
        .map(|(row, h)| GenerationResult {
            x0: Tensor::from_parts(shape.clone(), row.to_vec()),
            trace_digest: hex::encode(h.finalize()),
        })
        .collect())
}

/// Digest of a full trace in the same encoding as [`GenerationResult::trace_digest`].
pub fn trace_digest(trace: &GenerationTrace) -> String {
    let mut h = Sha256::new();
    for l in &trace.latents {
        for v in l.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
