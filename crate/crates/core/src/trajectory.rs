//! Attribute trajectories by embedding swap.
//!
//! For a swap step `tau`, reverse diffusion uses the neutral embedding `e`
//! for steps `t > tau` and the style embedding `e'` for `t <= tau`, so `e'`
//! governs the final `tau` steps. All points of one trajectory start from
//! the same `x_T`, drawn from the plan's noise seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{generate_batch, Denoiser, ScheduleParams};
use crate::error::{Error, Result};
use crate::io::{read_json, write_atomic, write_json};
use crate::models::DenoiserModel;
use crate::phantom::IMAGE_SIZE;
use crate::prompt::{embed, format_prompt, parse_prompt, AttributeSpec, Embedding, EmbeddingTable};
use crate::rng::{make_rng, sample_standard_normal};
use crate::tensor::Tensor;

pub const DEFAULT_SWAP_SET: [usize; 9] = [5, 10, 15, 20, 25, 30, 35, 40, 45];
pub const ARCHIVE_MAGIC: &[u8; 5] = b"LTRJ1";
pub const ARCHIVE_VERSION: u32 = 1;
const NOISE_STREAM: u64 = 0x7874_0000_0000_0001;
/// Upper bound on rows per lock-step generation batch.
const GENERATION_CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwapPlan {
    pub neutral_spec: AttributeSpec,
    pub style_spec: AttributeSpec,
    pub swap_set: Vec<usize>,
    pub noise_seed: u64,
    /// Permits `style_spec == neutral_spec`.
    #[serde(default)]
    pub degenerate: bool,
}

impl SwapPlan {
    /// Neutral start, the given style, and the default swap set.
    pub fn new(style_spec: AttributeSpec, noise_seed: u64) -> Self {
        Self {
            neutral_spec: AttributeSpec::neutral(),
            style_spec,
            swap_set: DEFAULT_SWAP_SET.to_vec(),
            noise_seed,
            degenerate: false,
        }
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.swap_set.is_empty() {
            return Err(Error::invalid("swap_set", "empty"));
        }
        if let Some(&t) = self.swap_set.iter().find(|&&t| t > steps) {
            return Err(Error::invalid("swap_set", format!("tau {t} outside 0..={steps}")));
        }
        if self.swap_set.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("swap_set", "must be strictly increasing"));
        }
        if self.style_spec == self.neutral_spec && !self.degenerate {
            return Err(Error::invalid("style_spec", "equals neutral_spec; set `degenerate` to allow"));
        }
        Ok(())
    }
}

/// Entry `t - 1` is the embedding used at step `t`: `e'` for `t <= tau`, else `e`.
pub fn embedding_schedule(e: &Embedding, e_prime: &Embedding, tau: usize, steps: usize) -> Result<Vec<Embedding>> {
    if tau > steps {
        return Err(Error::invalid("tau", format!("{tau} outside 0..={steps}")));
    }
    Ok((1..=steps).map(|t| if t <= tau { *e_prime } else { *e }).collect())
}

/// The shared starting noise of every trajectory with this seed.
pub fn initial_noise(noise_seed: u64) -> Tensor {
    sample_standard_normal(&mut make_rng(noise_seed, NOISE_STREAM), &[IMAGE_SIZE, IMAGE_SIZE])
        .expect("fixed shape is valid")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub tau: usize,
    /// Final latent, rounded to f32 precision.
    pub z0: Tensor,
    /// Digest of the full f64 reverse-pass trace.
    pub trace_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub plan: SwapPlan,
    pub model_hash: String,
    pub schedule: ScheduleParams,
    pub x_t_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Generation with the neutral embedding throughout (`tau = 0`).
    pub neutral: TrajectoryPoint,
    /// One point per swap step, ascending.
    pub points: Vec<TrajectoryPoint>,
    pub provenance: Provenance,
}

impl Trajectory {
    pub fn point(&self, tau: usize) -> Option<&TrajectoryPoint> {
        if tau == 0 && !self.points.iter().any(|p| p.tau == 0) {
            return Some(&self.neutral);
        }
        self.points.iter().find(|p| p.tau == tau)
    }

    /// Neutral latent followed by the swap points in ascending order.
    pub fn latents(&self) -> Vec<&Tensor> {
        std::iter::once(&self.neutral.z0).chain(self.points.iter().map(|p| &p.z0)).collect()
    }
}

fn round_f32(t: Tensor) -> Tensor {
    let shape = t.shape().to_vec();
    Tensor::from_parts(shape, t.into_data().into_iter().map(|v| v as f32 as f64).collect())
}

/// Generates one trajectory.
pub fn build_trajectory(
    plan: &SwapPlan,
    model: &DenoiserModel,
    schedule: &ScheduleParams,
    table: &EmbeddingTable,
) -> Result<Trajectory> {
    Ok(build_trajectories(std::slice::from_ref(plan), model, schedule, table)?.remove(0))
}

/// Generates many trajectories in lock-step. Identical generations (the
/// neutral pass of plans sharing a seed, `tau = 0`, `e' = e`) run once.
/// Each result equals what [`build_trajectory`] gives for that plan alone.
pub fn build_trajectories(
    plans: &[SwapPlan],
    model: &DenoiserModel,
    schedule: &ScheduleParams,
    table: &EmbeddingTable,
) -> Result<Vec<Trajectory>> {
    build_trajectories_with(plans, model, &model.digest(), schedule, table)
}

type GenKey = (u64, String, String, usize);

/// As [`build_trajectories`] with any denoiser; `model_hash` goes into the
/// provenance as given.
pub fn build_trajectories_with(
    plans: &[SwapPlan],
    denoiser: &dyn Denoiser,
    model_hash: &str,
    schedule: &ScheduleParams,
    table: &EmbeddingTable,
) -> Result<Vec<Trajectory>> {
    let sched = schedule.build()?;
    let steps = sched.steps();
    for p in plans {
        p.validate(steps)?;
    }
    // A generation is identified by its seed and effective (e, e', tau).
    let key = |p: &SwapPlan, tau: usize| -> GenKey {
        let neutral = format_prompt(&p.neutral_spec);
        if tau == 0 || p.style_spec == p.neutral_spec {
            (p.noise_seed, neutral.clone(), neutral, 0)
        } else {
            (p.noise_seed, neutral, format_prompt(&p.style_spec), tau)
        }
    };
    let mut index: BTreeMap<GenKey, usize> = BTreeMap::new();
    let mut jobs: Vec<(u64, Vec<Embedding>)> = Vec::new();
    let mut noise_cache: BTreeMap<u64, Tensor> = BTreeMap::new();
    for p in plans {
        let e = embed(&p.neutral_spec, table)?;
        let e_prime = embed(&p.style_spec, table)?;
        for tau in std::iter::once(0).chain(p.swap_set.iter().copied()) {
            let k = key(p, tau);
            if !index.contains_key(&k) {
                let swapped = k.3 != 0;
                index.insert(k, jobs.len());
                let sched_e = if !swapped {
                    vec![e; steps]
                } else {
                    embedding_schedule(&e, &e_prime, tau, steps)?
                };
                jobs.push((p.noise_seed, sched_e));
            }
        }
        noise_cache.entry(p.noise_seed).or_insert_with(|| initial_noise(p.noise_seed));
    }
    let mut results = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(GENERATION_CHUNK) {
        let xs: Vec<Tensor> = chunk.iter().map(|(s, _)| noise_cache[s].clone()).collect();
        let es: Vec<Vec<Embedding>> = chunk.iter().map(|(_, e)| e.clone()).collect();
        results.extend(generate_batch(&xs, &es, denoiser, &sched)?);
    }
    let point = |p: &SwapPlan, tau: usize| {
        let r = &results[index[&key(p, tau)]];
        TrajectoryPoint {
            tau,
            z0: round_f32(r.x0.clone()),
            trace_digest: r.trace_digest.clone(),
        }
    };
    Ok(plans
        .iter()
        .map(|p| Trajectory {
            neutral: point(p, 0),
            points: p.swap_set.iter().map(|&tau| point(p, tau)).collect(),
            provenance: Provenance {
                plan: p.clone(),
                model_hash: model_hash.to_string(),
                schedule: *schedule,
                x_t_hash: noise_cache[&p.noise_seed].digest(),
            },
        })
        .collect())
}

/// `manifest.json` of an archive directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveManifest {
    pub format_version: u32,
    pub schedule: ScheduleParams,
    pub neutral_prompt: String,
    pub style_prompt: String,
    pub swap_set: Vec<usize>,
    pub noise_seed: u64,
    #[serde(default)]
    pub degenerate: bool,
    pub model_hash: String,
    pub x_t_hash: String,
    pub latent_shape: Vec<usize>,
    pub record_count: usize,
    /// One per record: trace digests for trajectories, empty for samples.
    pub trace_digests: Vec<String>,
    pub blob_sha256: String,
    #[serde(default)]
    pub interpolated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_indices: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    /// Curve parameters of interpolated records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u: Option<Vec<f64>>,
}

impl ArchiveManifest {
    fn plan(&self) -> Result<SwapPlan> {
        let bad = |field: &str, e: Error| Error::format(format!("manifest.{field}"), e.to_string());
        Ok(SwapPlan {
            neutral_spec: parse_prompt(&self.neutral_prompt).map_err(|e| bad("neutral_prompt", e))?,
            style_spec: parse_prompt(&self.style_prompt).map_err(|e| bad("style_prompt", e))?,
            swap_set: self.swap_set.clone(),
            noise_seed: self.noise_seed,
            degenerate: self.degenerate,
        })
    }

    fn from_provenance(prov: &Provenance, shape: &[usize], records: usize) -> Self {
        Self {
            format_version: ARCHIVE_VERSION,
            schedule: prov.schedule,
            neutral_prompt: format_prompt(&prov.plan.neutral_spec),
            style_prompt: format_prompt(&prov.plan.style_spec),
            swap_set: prov.plan.swap_set.clone(),
            noise_seed: prov.plan.noise_seed,
            degenerate: prov.plan.degenerate,
            model_hash: prov.model_hash.clone(),
            x_t_hash: prov.x_t_hash.clone(),
            latent_shape: shape.to_vec(),
            record_count: records,
            trace_digests: Vec::new(),
            blob_sha256: String::new(),
            interpolated: false,
            control_indices: None,
            m: None,
            u: None,
        }
    }

    pub fn provenance(&self) -> Result<Provenance> {
        Ok(Provenance {
            plan: self.plan()?,
            model_hash: self.model_hash.clone(),
            schedule: self.schedule,
            x_t_hash: self.x_t_hash.clone(),
        })
    }
}

fn encode_blob(records: &[&Tensor]) -> Vec<u8> {
    let per = records.first().map_or(0, |t| t.len());
    let mut out = Vec::with_capacity(13 + records.len() * per * 4);
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    out.extend_from_slice(&(per as u32).to_le_bytes());
    for t in records {
        for v in t.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

fn decode_blob(bytes: &[u8], manifest: &ArchiveManifest) -> Result<Vec<Tensor>> {
    if bytes.len() < 13 || &bytes[..5] != ARCHIVE_MAGIC {
        return Err(Error::format("latents.bin magic", "expected LTRJ1"));
    }
    let count = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let per = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    if count != manifest.record_count {
        return Err(Error::format(
            "record_count",
            format!("manifest declares {}, blob header {count}", manifest.record_count),
        ));
    }
    let expected_per: usize = manifest.latent_shape.iter().product();
    if per != expected_per {
        return Err(Error::format(
            "latent_shape",
            format!("manifest implies {expected_per} elements per record, blob header {per}"),
        ));
    }
    let body = &bytes[13..];
    if body.len() != count * per * 4 {
        return Err(Error::format(
            "record_count",
            format!("blob holds {} bytes of records, {count} records need {}", body.len(), count * per * 4),
        ));
    }
    if hex::encode(Sha256::digest(bytes)) != manifest.blob_sha256 {
        return Err(Error::format("blob_sha256", "latents.bin does not match the manifest hash"));
    }
    body.chunks_exact(per * 4)
        .map(|rec| {
            let data = rec.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
            Tensor::from_vec(&manifest.latent_shape, data).map_err(|e| Error::format("latents.bin", e.to_string()))
        })
        .collect()
}

/// Writes `manifest.json` and `latents.bin` into `dir`. The manifest's
/// `record_count` and `blob_sha256` are filled in here.
pub fn write_archive(dir: &Path, mut manifest: ArchiveManifest, records: &[&Tensor]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::invalid("records", "archive needs at least one record"));
    }
    if records.iter().any(|r| r.shape() != manifest.latent_shape.as_slice()) {
        return Err(Error::invalid("records", "all records must match latent_shape"));
    }
    let blob = encode_blob(records);
    manifest.record_count = records.len();
    manifest.blob_sha256 = hex::encode(Sha256::digest(&blob));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join("latents.bin"), &blob)?;
    write_json(&dir.join("manifest.json"), &manifest)
}

/// Reads and validates an archive directory.
pub fn read_archive(dir: &Path) -> Result<(ArchiveManifest, Vec<Tensor>)> {
    let manifest: ArchiveManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.format_version != ARCHIVE_VERSION {
        return Err(Error::format(
            "format_version",
            format!("unsupported version {}", manifest.format_version),
        ));
    }
    let path = dir.join("latents.bin");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let records = decode_blob(&bytes, &manifest)?;
    Ok((manifest, records))
}

pub fn save_archive(traj: &Trajectory, dir: &Path) -> Result<()> {
    let records = traj.latents();
    let mut manifest = ArchiveManifest::from_provenance(&traj.provenance, traj.neutral.z0.shape(), records.len());
    manifest.trace_digests = std::iter::once(&traj.neutral)
        .chain(&traj.points)
        .map(|p| p.trace_digest.clone())
        .collect();
    write_archive(dir, manifest, &records)
}

pub fn load_archive(dir: &Path) -> Result<Trajectory> {
    let (manifest, records) = read_archive(dir)?;
    if manifest.interpolated {
        return Err(Error::format("interpolated", "archive holds curve samples, not a trajectory"));
    }
    if manifest.record_count != manifest.swap_set.len() + 1 {
        return Err(Error::format(
            "swap_set",
            format!(
                "{} swap steps need {} records, archive has {}",
                manifest.swap_set.len(),
                manifest.swap_set.len() + 1,
                manifest.record_count
            ),
        ));
    }
    if manifest.trace_digests.len() != manifest.record_count {
        return Err(Error::format("trace_digests", "length differs from record_count"));
    }
    let provenance = manifest.provenance()?;
    let mut pts = records
        .into_iter()
        .zip(&manifest.trace_digests)
        .zip(std::iter::once(0).chain(manifest.swap_set.iter().copied()))
        .map(|((z0, d), tau)| TrajectoryPoint {
            tau,
            z0,
            trace_digest: d.clone(),
        });
    let neutral = pts.next().unwrap();
    Ok(Trajectory {
        neutral,
        points: pts.collect(),
        provenance,
    })
}

/// Manifest for curve samples derived from `prov`'s trajectory.
pub fn curve_manifest(prov: &Provenance, shape: &[usize], control_indices: Vec<usize>, u: Vec<f64>) -> ArchiveManifest {
    let mut m = ArchiveManifest::from_provenance(prov, shape, u.len());
    m.interpolated = true;
    m.control_indices = Some(control_indices);
    m.m = Some(u.len());
    m.u = Some(u);
    m
}
