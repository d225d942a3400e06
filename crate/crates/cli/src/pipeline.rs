//! Pipeline stages shared by the subcommands.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use difftraj::interpolation::{interpolate_trajectory, CurveSamples};
use difftraj::metrics::{
    cfrt_from_predictions, cosine_matrix_from, evaluate_trajectory, pca_project, CfrtReport,
    CosineMatrix, EvalPoints, PcaProjection, PerceptualReport,
    SamplePredictions,
};
use difftraj::models::{
    evaluate_heads, train_classifier, train_denoiser, ClassifierModel, DenoiserModel, HeadMetrics, TrainReport,
};
use difftraj::phantom::{sample_split, Dataset, Split};
use difftraj::prompt::{make_table, AttributeSpec, EmbeddingTable};
use difftraj::tensor::Tensor;
use difftraj::trajectory::{build_trajectories, SwapPlan, Trajectory};
use difftraj::{Attribute, Result};

use crate::config::{EvalConfig, RunConfig};

pub struct Datasets {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn make_datasets(cfg: &RunConfig) -> Result<Datasets> {
    let d = &cfg.dataset;
    let probs = cfg.attr_probs();
    Ok(Datasets {
        train: sample_split(d.train, d.seed, &probs, Split::Train)?,
        val: sample_split(d.val, d.seed, &probs, Split::Val)?,
        test: sample_split(d.test, d.seed, &probs, Split::Test)?,
    })
}

pub fn embedding_table(cfg: &RunConfig) -> Result<EmbeddingTable> {
    make_table(cfg.embedding_seed)
}

pub fn train_denoiser_stage(cfg: &RunConfig, data: &Datasets) -> Result<(DenoiserModel, TrainReport)> {
    let table = embedding_table(cfg)?;
    let schedule = cfg.schedule.build()?;
    train_denoiser(&data.train, &table, &schedule, cfg.denoiser.model, &cfg.denoiser.train)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub initial_smoothed_loss: f64,
    pub final_smoothed_loss: f64,
    pub val: Vec<HeadMetrics>,
    pub test: Vec<HeadMetrics>,
}

pub fn train_classifier_stage(cfg: &RunConfig, data: &Datasets) -> Result<(ClassifierModel, ClassifierReport)> {
    let (model, report) = train_classifier(&data.train, &data.val, cfg.classifier.model, &cfg.classifier.train)?;
    let test = evaluate_heads(&model, &data.test)?;
    Ok((
        model,
        ClassifierReport {
            initial_smoothed_loss: report.initial_smoothed_loss,
            final_smoothed_loss: report.final_smoothed_loss,
            val: report.heads,
            test,
        },
    ))
}

/// Results for one style attribute over all evaluation seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeEvaluation {
    pub attribute: Attribute,
    /// Counterfactuals are the trajectory points at `cfrt_tau`.
    pub cfrt: CfrtReport,
    /// Counterfactuals are the Bezier samples; one start sample per (seed, u).
    pub cfrt_interpolated: CfrtReport,
    /// One report per seed, over the neutral point and each swap step.
    pub perceptual: Vec<PerceptualReport>,
    /// Fraction of trajectories whose distance at the smallest swap step is
    /// below the distance at the largest.
    pub closer_at_small_tau: f64,
    /// Mean Spearman correlation of tau against style probability; an
    /// undefined correlation counts as 0.
    pub mean_spearman: f64,
    pub undefined_correlations: usize,
    /// Entry-wise mean of the per-trajectory cosine matrices over defined entries.
    pub mean_cosine: CosineMatrix,
    /// Mean distance to neutral at each position (neutral first).
    pub mean_distance: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaReport {
    pub noise_seed: u64,
    /// Attribute of each projected latent, `None` for the neutral one.
    pub labels: Vec<(Option<Attribute>, usize)>,
    pub projection: PcaProjection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Noise seed of each trajectory index.
    pub seeds: Vec<u64>,
    pub swap_set: Vec<usize>,
    pub cfrt_tau: usize,
    pub attributes: Vec<AttributeEvaluation>,
    pub pca: PcaReport,
}

impl Evaluation {
    pub fn attribute(&self, a: Attribute) -> Option<&AttributeEvaluation> {
        self.attributes.iter().find(|e| e.attribute == a)
    }
}

/// Trajectories grouped by seed, one per style attribute.
pub struct TrajectorySet {
    pub seeds: Vec<u64>,
    /// `by_attr[a][i]` is the trajectory of attribute `a` for `seeds[i]`.
    pub by_attr: BTreeMap<Attribute, Vec<Trajectory>>,
}

pub fn build_trajectory_set(cfg: &RunConfig, denoiser: &DenoiserModel) -> Result<TrajectorySet> {
    let ev = &cfg.evaluation;
    let table = embedding_table(cfg)?;
    let seeds: Vec<u64> = (0..ev.trajectories as u64).map(|i| ev.noise_seed + i).collect();
    let mut plans = Vec::with_capacity(seeds.len() * ev.style_attributes.len());
    for &a in &ev.style_attributes {
        for &s in &seeds {
            let mut p = SwapPlan::new(AttributeSpec::of(&[a]), s);
            p.swap_set = ev.swap_set.clone();
            plans.push(p);
        }
    }
    let mut all = build_trajectories(&plans, denoiser, &cfg.schedule, &table)?.into_iter();
    let by_attr = ev
        .style_attributes
        .iter()
        .map(|&a| (a, all.by_ref().take(seeds.len()).collect()))
        .collect();
    Ok(TrajectorySet { seeds, by_attr })
}

fn point_at(traj: &Trajectory, tau: usize) -> &Tensor {
    &traj.point(tau).expect("tau validated against swap_set").z0
}

/// Classifier outputs for each seed's neutral image and, per attribute, the
/// `k`-th picked counterfactual; one start sample per (seed, k).
fn counterfactual_predictions(
    set: &TrajectorySet,
    classifier: &ClassifierModel,
    pick: impl Fn(Attribute, usize) -> Vec<Tensor>,
) -> Result<Vec<SamplePredictions>> {
    let attrs: Vec<Attribute> = set.by_attr.keys().copied().collect();
    let classify = |ts: &[&Tensor]| {
        let images: Vec<f64> = ts.iter().flat_map(|t| t.data().iter().copied()).collect();
        classifier.classify_batch(&images)
    };
    let first = &set.by_attr[&attrs[0]];
    let neutral = classify(&first.iter().map(|t| &t.neutral.z0).collect::<Vec<_>>())?;
    let mut by_attr = BTreeMap::new();
    for &a in &attrs {
        let mut per_seed = Vec::with_capacity(set.seeds.len());
        for i in 0..set.seeds.len() {
            let picked = pick(a, i);
            per_seed.push(classify(&picked.iter().collect::<Vec<_>>())?);
        }
        by_attr.insert(a, per_seed);
    }
    let mut out = Vec::new();
    for (i, original) in neutral.iter().enumerate() {
        let k_count = by_attr[&attrs[0]][i].len();
        for k in 0..k_count {
            out.push(SamplePredictions {
                original: *original,
                counterfactuals: attrs.iter().map(|a| (*a, by_attr[a][i][k])).collect(),
            });
        }
    }
    Ok(out)
}

fn mean_cosine(ms: &[CosineMatrix]) -> CosineMatrix {
    let grid = ms[0].grid.clone();
    let k = grid.len();
    let mut values = vec![vec![None; k]; k];
    for i in 0..k {
        for j in 0..k {
            let vals: Vec<f64> = ms.iter().filter_map(|m| m.values[i][j]).collect();
            if !vals.is_empty() {
                values[i][j] = Some(vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
    }
    CosineMatrix { grid, values }
}

pub fn evaluate(
    ev: &EvalConfig,
    set: &TrajectorySet,
    classifier: &ClassifierModel,
) -> Result<(Evaluation, BTreeMap<Attribute, Vec<CurveSamples>>)> {
    let thr = ev.flip_threshold;

    let attrs: Vec<Attribute> = set.by_attr.keys().copied().collect();
    let preds = counterfactual_predictions(set, classifier, |a, i| {
        vec![point_at(&set.by_attr[&a][i], ev.cfrt_tau).clone()]
    })?;
    let curves: BTreeMap<Attribute, Vec<CurveSamples>> = set
        .by_attr
        .iter()
        .map(|(a, ts)| {
            let c = ts.iter().map(|t| interpolate_trajectory(t, ev.n_ctrl, ev.m)).collect::<Result<Vec<_>>>()?;
            Ok((*a, c))
        })
        .collect::<Result<_>>()?;
    let curve_preds = counterfactual_predictions(set, classifier, |a, i| curves[&a][i].latents.clone())?;

    let mut attributes = Vec::with_capacity(set.by_attr.len());
    for (&a, trajs) in &set.by_attr {
        let cfrt = cfrt_from_predictions(&preds, &attrs, a, thr)?;
        let cfrt_interpolated = cfrt_from_predictions(&curve_preds, &attrs, a, thr)?;
        let perceptual = trajs
            .iter()
            .map(|t| evaluate_trajectory(t, EvalPoints::Trajectory, classifier, a))
            .collect::<Result<Vec<_>>>()?;
        let lo = ev.swap_set[0] as f64;
        let hi = *ev.swap_set.last().unwrap() as f64;
        let closer = perceptual
            .iter()
            .filter(|r| r.distance_at(lo).unwrap() < r.distance_at(hi).unwrap())
            .count();
        let undefined = perceptual.iter().filter(|r| r.spearman.is_none()).count();
        let mean_spearman =
            perceptual.iter().map(|r| r.spearman.unwrap_or(0.0)).sum::<f64>() / perceptual.len() as f64;
        let cosines = trajs
            .iter()
            .map(|t| {
                let pts: Vec<(usize, &Tensor)> = t.points.iter().map(|p| (p.tau, &p.z0)).collect();
                cosine_matrix_from(&t.neutral.z0, &pts, &ev.swap_set)
            })
            .collect::<Result<Vec<_>>>()?;
        let positions: Vec<usize> = std::iter::once(0).chain(ev.swap_set.iter().copied()).collect();
        let mean_distance = positions
            .iter()
            .enumerate()
            .map(|(k, &tau)| {
                let m = perceptual.iter().map(|r| r.entries[k].distance).sum::<f64>() / perceptual.len() as f64;
                (tau, m)
            })
            .collect();
        attributes.push(AttributeEvaluation {
            attribute: a,
            cfrt,
            cfrt_interpolated,
            closer_at_small_tau: closer as f64 / perceptual.len() as f64,
            mean_spearman,
            undefined_correlations: undefined,
            mean_cosine: mean_cosine(&cosines),
            mean_distance,
            perceptual,
        });
    }

    // Scatter of the first seed: neutral plus every attribute's swap points.
    let mut latents: Vec<&Tensor> = Vec::new();
    let mut labels = Vec::new();
    let first = &set.by_attr.values().next().unwrap()[0];
    latents.push(&first.neutral.z0);
    labels.push((None, 0));
    for (&a, trajs) in &set.by_attr {
        for p in &trajs[0].points {
            latents.push(&p.z0);
            labels.push((Some(a), p.tau));
        }
    }
    let pca = PcaReport {
        noise_seed: set.seeds[0],
        labels,
        projection: pca_project(&latents, 2)?,
    };
    Ok((
        Evaluation {
            seeds: set.seeds.clone(),
            swap_set: ev.swap_set.clone(),
            cfrt_tau: ev.cfrt_tau,
            attributes,
            pca,
        },
        curves,
    ))
}
