//! Disentanglement metrics: classifier flip rate over counterfactuals,
//! directional cosine matrices, classifier-feature perceptual distance,
//! PCA projection and rank correlation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::attr::Attribute;
use crate::error::{Error, Result};
use crate::interpolation::CurveSamples;
use crate::models::{Classification, ClassifierModel};
use crate::tensor::Tensor;
use crate::trajectory::{Trajectory, DEFAULT_SWAP_SET};

pub const PERCEPTUAL_METRIC_NAME: &str = "feature_perceptual_distance";
pub const DEFAULT_FLIP_THRESHOLD: f64 = 0.5;
pub const DEFAULT_CFRT_TAU: usize = 25;
const MIN_NORM: f64 = 1e-12;

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| x.to_string())
}

// ---------------------------------------------------------------- CFRT

/// One start image with a counterfactual per attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualSample {
    pub neutral: Tensor,
    /// Ground-truth content class of the start image.
    pub content: usize,
    /// Ground-truth attribute labels of the start image, by [`Attribute::index`].
    pub labels: [bool; 4],
    pub counterfactuals: BTreeMap<Attribute, Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualSet {
    /// Attributes every sample must have a counterfactual for.
    pub attributes: Vec<Attribute>,
    pub samples: Vec<CounterfactualSample>,
}

/// Classifier outputs on a start image and its counterfactuals.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePredictions {
    pub original: Classification,
    pub counterfactuals: BTreeMap<Attribute, Classification>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfrtIndicator {
    pub sample: usize,
    /// `|f_A(x) - f_A(x'_A)|`.
    pub target_change: f64,
    /// `max_{j != A} |f_A(x) - f_A(x'_j)|`, 0 when there is no other attribute.
    pub max_other_change: f64,
    pub target_dominates: bool,
    pub content_preserved: bool,
    pub others_preserved: bool,
    pub pass: bool,
    /// First failing condition, if any.
    pub failed: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfrtReport {
    pub attribute: Attribute,
    pub score: f64,
    pub samples: usize,
    pub flip_threshold: f64,
    pub indicators: Vec<CfrtIndicator>,
}

impl CfrtReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "sample,target_change,max_other_change,target_dominates,content_preserved,others_preserved,pass\n",
        );
        for i in &self.indicators {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                i.sample,
                i.target_change,
                i.max_other_change,
                i.target_dominates as u8,
                i.content_preserved as u8,
                i.others_preserved as u8,
                i.pass as u8
            );
        }
        s
    }
}

/// Flip rate of attribute `a` from precomputed classifier outputs.
pub fn cfrt_from_predictions(
    preds: &[SamplePredictions],
    attributes: &[Attribute],
    a: Attribute,
    flip_threshold: f64,
) -> Result<CfrtReport> {
    if !attributes.contains(&a) {
        return Err(Error::invalid("attribute", format!("{a} is not in the counterfactual set")));
    }
    if preds.is_empty() {
        return Err(Error::invalid("cf_set", "no samples"));
    }
    if !(0.0..=1.0).contains(&flip_threshold) {
        return Err(Error::invalid("flip_threshold", format!("{flip_threshold} outside [0, 1]")));
    }
    let mut indicators = Vec::with_capacity(preds.len());
    for (n, p) in preds.iter().enumerate() {
        let get = |j: Attribute| {
            p.counterfactuals.get(&j).ok_or_else(|| Error::MissingCounterfactual {
                sample: n,
                attribute: j.name().to_string(),
            })
        };
        for &j in attributes {
            get(j)?;
        }
        let x = &p.original;
        let xa = get(a)?;
        let fa = x.attr(a);
        let target_change = (fa - xa.attr(a)).abs();
        let mut max_other_change = 0.0f64;
        for &j in attributes.iter().filter(|&&j| j != a) {
            max_other_change = max_other_change.max((fa - get(j)?.attr(a)).abs());
        }
        let target_dominates = target_change > max_other_change;
        let content_preserved = x.content_class() == xa.content_class();
        let others_preserved = Attribute::ALL
            .iter()
            .filter(|&&k| k != a)
            .all(|&k| (x.attr(k) >= flip_threshold) == (xa.attr(k) >= flip_threshold));
        let failed = if !target_dominates {
            Some("target_dominates")
        } else if !content_preserved {
            Some("content_preserved")
        } else if !others_preserved {
            Some("others_preserved")
        } else {
            None
        };
        indicators.push(CfrtIndicator {
            sample: n,
            target_change,
            max_other_change,
            target_dominates,
            content_preserved,
            others_preserved,
            pass: failed.is_none(),
            failed: failed.map(str::to_string),
        });
    }
    let score = indicators.iter().filter(|i| i.pass).count() as f64 / indicators.len() as f64;
    Ok(CfrtReport {
        attribute: a,
        score,
        samples: indicators.len(),
        flip_threshold,
        indicators,
    })
}

/// Classifies every image of the set in one batch.
pub fn predict_counterfactuals(set: &CounterfactualSet, classifier: &ClassifierModel) -> Result<Vec<SamplePredictions>> {
    let mut images = Vec::new();
    let mut layout = Vec::with_capacity(set.samples.len());
    for (n, s) in set.samples.iter().enumerate() {
        images.extend_from_slice(s.neutral.data());
        let mut attrs = Vec::with_capacity(set.attributes.len());
        for &j in &set.attributes {
            let t = s.counterfactuals.get(&j).ok_or_else(|| Error::MissingCounterfactual {
                sample: n,
                attribute: j.name().to_string(),
            })?;
            if t.shape() != s.neutral.shape() {
                return Err(Error::ShapeMismatch {
                    expected: s.neutral.shape().to_vec(),
                    actual: t.shape().to_vec(),
                });
            }
            images.extend_from_slice(t.data());
            attrs.push(j);
        }
        layout.push(attrs);
    }
    if images.is_empty() {
        return Err(Error::invalid("cf_set", "no samples"));
    }
    let mut out = classifier.classify_batch(&images)?.into_iter();
    Ok(layout
        .into_iter()
        .map(|attrs| {
            let original = out.next().unwrap();
            let counterfactuals = attrs.into_iter().map(|j| (j, out.next().unwrap())).collect();
            SamplePredictions {
                original,
                counterfactuals,
            }
        })
        .collect())
}

pub fn cfrt(set: &CounterfactualSet, classifier: &ClassifierModel, a: Attribute, flip_threshold: f64) -> Result<CfrtReport> {
    let preds = predict_counterfactuals(set, classifier)?;
    cfrt_from_predictions(&preds, &set.attributes, a, flip_threshold)
}

// ------------------------------------------------------ cosine matrix

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineMatrix {
    pub grid: Vec<usize>,
    /// `None` where a direction has norm below 1e-12.
    pub values: Vec<Vec<Option<f64>>>,
}

impl CosineMatrix {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.values[i][j]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("tau");
        for t in &self.grid {
            let _ = write!(s, ",{t}");
        }
        s.push('\n');
        for (t, row) in self.grid.iter().zip(&self.values) {
            let _ = write!(s, "{t}");
            for v in row {
                let _ = write!(s, ",{}", fmt_opt(*v));
            }
            s.push('\n');
        }
        s
    }
}

/// Cosines between the directions `z_tau - z_orig` for each pair of grid steps.
pub fn cosine_matrix_from(z_orig: &Tensor, points: &[(usize, &Tensor)], grid: &[usize]) -> Result<CosineMatrix> {
    let mut dirs = Vec::with_capacity(grid.len());
    for &tau in grid {
        let z = points
            .iter()
            .find(|(t, _)| *t == tau)
            .map(|(_, z)| *z)
            .ok_or(Error::MissingGridPoint(tau))?;
        let d = z.sub(z_orig)?;
        let n = d.norm();
        dirs.push((d, n));
    }
    let k = grid.len();
    let mut values = vec![vec![None; k]; k];
    for i in 0..k {
        for j in i..k {
            let (di, ni) = &dirs[i];
            let (dj, nj) = &dirs[j];
            if *ni < MIN_NORM || *nj < MIN_NORM {
                continue;
            }
            let c = if i == j {
                1.0
            } else {
                (di.dot(dj)? / (ni * nj)).clamp(-1.0, 1.0)
            };
            values[i][j] = Some(c);
            values[j][i] = Some(c);
        }
    }
    Ok(CosineMatrix {
        grid: grid.to_vec(),
        values,
    })
}

/// The matrix over the default grid `{5, 10, .., 45}`.
pub fn cosine_matrix(traj: &Trajectory) -> Result<CosineMatrix> {
    let points: Vec<(usize, &Tensor)> = traj.points.iter().map(|p| (p.tau, &p.z0)).collect();
    cosine_matrix_from(&traj.neutral.z0, &points, &DEFAULT_SWAP_SET)
}

// ------------------------------------------------ perceptual distance

fn feature_distance(fa: &[Vec<f64>; 2], fb: &[Vec<f64>; 2]) -> f64 {
    fa.iter()
        .zip(fb)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
        .sum::<f64>()
        / 2.0
}

/// Mean over the classifier's two hidden layers of the L2 distance between
/// unit-normalized activations.
pub fn perceptual_distance(a: &Tensor, b: &Tensor, classifier: &ClassifierModel) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    let mut images = a.data().to_vec();
    images.extend_from_slice(b.data());
    let f = classifier.features_batch(&images)?;
    Ok(feature_distance(&f[0], &f[1]))
}

/// Distance from `reference` to each of `others`, in one batch.
pub fn perceptual_distances(reference: &Tensor, others: &[&Tensor], classifier: &ClassifierModel) -> Result<Vec<f64>> {
    let mut images = reference.data().to_vec();
    for o in others {
        if o.shape() != reference.shape() {
            return Err(Error::ShapeMismatch {
                expected: reference.shape().to_vec(),
                actual: o.shape().to_vec(),
            });
        }
        images.extend_from_slice(o.data());
    }
    let f = classifier.features_batch(&images)?;
    Ok(f[1..].iter().map(|g| feature_distance(&f[0], g)).collect())
}

// --------------------------------------------------------------- PCA

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    /// One row of `k` coordinates per input latent.
    pub coords: Vec<Vec<f64>>,
    /// Variance along each component, descending.
    pub explained_variance: Vec<f64>,
    /// Unit principal directions in flattened latent space.
    pub components: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

impl PcaProjection {
    /// Reconstruction of input `i` from its `k` coordinates.
    pub fn reconstruct(&self, i: usize) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, dir) in self.coords[i].iter().zip(&self.components) {
            for (o, d) in out.iter_mut().zip(dir) {
                *o += c * d;
            }
        }
        out
    }
}

/// Projects the centered latents onto their top-`k` principal directions.
/// Each direction's largest-magnitude loading is made positive.
pub fn pca_project(latents: &[&Tensor], k: usize) -> Result<PcaProjection> {
    if k == 0 {
        return Err(Error::invalid("k", "must be at least 1"));
    }
    let n = latents.len();
    if n < k + 1 {
        return Err(Error::invalid("latents", format!("{n} latents for {k} components; need at least {}", k + 1)));
    }
    let d = latents[0].len();
    if let Some(t) = latents.iter().find(|t| t.shape() != latents[0].shape()) {
        return Err(Error::ShapeMismatch {
            expected: latents[0].shape().to_vec(),
            actual: t.shape().to_vec(),
        });
    }
    let mut mean = vec![0.0; d];
    for t in latents {
        for (m, v) in mean.iter_mut().zip(t.data()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<Vec<f64>> = latents
        .iter()
        .map(|t| t.data().iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    // Eigen-decompose the n x n Gram matrix instead of the d x d covariance.
    let gram = DMatrix::from_fn(n, n, |i, j| centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum::<f64>());
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut coords = vec![Vec::with_capacity(k); n];
    let mut components = Vec::with_capacity(k);
    let mut explained_variance = Vec::with_capacity(k);
    for &c in order.iter().take(k) {
        let lambda = eig.eigenvalues[c].max(0.0);
        let v = eig.eigenvectors.column(c);
        let mut dir = vec![0.0; d];
        if lambda > MIN_NORM {
            for (i, row) in centered.iter().enumerate() {
                for (o, x) in dir.iter_mut().zip(row) {
                    *o += v[i] * x;
                }
            }
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            dir.iter_mut().for_each(|x| *x /= norm);
            let lead = dir.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if lead < 0.0 {
                dir.iter_mut().for_each(|x| *x = -*x);
            }
        }
        for (i, row) in centered.iter().enumerate() {
            coords[i].push(row.iter().zip(&dir).map(|(a, b)| a * b).sum());
        }
        explained_variance.push(lambda / (n - 1) as f64);
        components.push(dir);
    }
    Ok(PcaProjection {
        coords,
        explained_variance,
        components,
        mean,
    })
}

// ------------------------------------------------ rank correlation

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties; `None` when
/// either side is constant or the lengths differ or are below 2.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

// ------------------------------------------------ perceptual report

#[derive(Debug, Clone, Copy)]
pub enum EvalPoints<'a> {
    /// Neutral point (position 0) then each swap step (position tau).
    Trajectory,
    /// Curve samples (position u).
    Samples(&'a CurveSamples),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceptualEntry {
    pub position: f64,
    pub distance: f64,
    pub style_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceptualReport {
    pub metric: String,
    pub style_attr: Attribute,
    /// `tau` or `u`.
    pub position_kind: String,
    pub entries: Vec<PerceptualEntry>,
    pub spearman: Option<f64>,
    pub correlation_defined: bool,
}

impl PerceptualReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{},{},style_prob\n", self.position_kind, self.metric);
        for e in &self.entries {
            let _ = writeln!(s, "{},{},{}", e.position, e.distance, e.style_prob);
        }
        s
    }

    pub fn distance_at(&self, position: f64) -> Option<f64> {
        self.entries.iter().find(|e| e.position == position).map(|e| e.distance)
    }
}

/// Distance to the neutral latent and style-head probability at each point,
/// plus the rank correlation of position against style probability.
pub fn evaluate_trajectory(
    traj: &Trajectory,
    points: EvalPoints<'_>,
    classifier: &ClassifierModel,
    style_attr: Attribute,
) -> Result<PerceptualReport> {
    let plan = &traj.provenance.plan;
    let degenerate = plan.style_spec == plan.neutral_spec;
    if !degenerate && !plan.style_spec.0.contains(&style_attr) {
        return Err(Error::invalid(
            "style_attr",
            format!("{style_attr} is not in the trajectory's style prompt `{}`", plan.style_spec),
        ));
    }
    let (kind, positions, latents): (&str, Vec<f64>, Vec<&Tensor>) = match points {
        EvalPoints::Trajectory => (
            "tau",
            std::iter::once(0.0).chain(traj.points.iter().map(|p| p.tau as f64)).collect(),
            traj.latents(),
        ),
        EvalPoints::Samples(s) => ("u", s.u.clone(), s.latents.iter().collect()),
    };
    let z_orig = &traj.neutral.z0;
    let mut images = z_orig.data().to_vec();
    for l in &latents {
        if l.shape() != z_orig.shape() {
            return Err(Error::ShapeMismatch {
                expected: z_orig.shape().to_vec(),
                actual: l.shape().to_vec(),
            });
        }
        images.extend_from_slice(l.data());
    }
    let feats = classifier.features_batch(&images)?;
    let probs = classifier.classify_batch(&images)?;
    let entries: Vec<PerceptualEntry> = positions
        .iter()
        .enumerate()
        .map(|(i, &position)| PerceptualEntry {
            position,
            distance: feature_distance(&feats[0], &feats[i + 1]),
            style_prob: probs[i + 1].attr(style_attr),
        })
        .collect();
    let ys: Vec<f64> = entries.iter().map(|e| e.style_prob).collect();
    let rho = spearman(&positions, &ys);
    Ok(PerceptualReport {
        metric: PERCEPTUAL_METRIC_NAME.to_string(),
        style_attr,
        position_kind: kind.to_string(),
        entries,
        spearman: rho,
        correlation_defined: rho.is_some(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ClassifierConfig;
    use crate::rng::{make_rng, sample_standard_normal};
    use proptest::prelude::*;
    use Attribute::*;

    fn cls(attr: [f64; 4], content: usize) -> Classification {
        let mut content_probs = [0.1; 4];
        content_probs[content] = 0.7;
        Classification {
            content_probs,
            attr_probs: attr,
        }
    }

    /// Independent restatement of the per-sample indicator.
    fn brute_force(preds: &[SamplePredictions], attrs: &[Attribute], a: Attribute, thr: f64) -> f64 {
        let mut hits = 0;
        for p in preds {
            let f = |c: &Classification| c.attr_probs[a.index()];
            let da = (f(&p.original) - f(&p.counterfactuals[&a])).abs();
            let others: Vec<f64> = attrs
                .iter()
                .filter(|j| **j != a)
                .map(|j| (f(&p.original) - f(&p.counterfactuals[j])).abs())
                .collect();
            let cond_a = if others.is_empty() {
                da > 0.0
            } else {
                others.iter().all(|o| da > *o)
            };
            let arg = |c: &Classification| {
                let mut best = 0;
                for k in 1..4 {
                    if c.content_probs[k] > c.content_probs[best] {
                        best = k;
                    }
                }
                best
            };
            let cond_b = arg(&p.original) == arg(&p.counterfactuals[&a]);
            let mut cond_c = true;
            for k in 0..4 {
                if k != a.index() {
                    let x = p.original.attr_probs[k] >= thr;
                    let y = p.counterfactuals[&a].attr_probs[k] >= thr;
                    cond_c &= x == y;
                }
            }
            if cond_a && cond_b && cond_c {
                hits += 1;
            }
        }
        hits as f64 / preds.len() as f64
    }

    fn sample(orig: [f64; 4], cfs: &[(Attribute, [f64; 4], usize)]) -> SamplePredictions {
        SamplePredictions {
            original: cls(orig, 0),
            counterfactuals: cfs.iter().map(|(a, p, c)| (*a, cls(*p, *c))).collect(),
        }
    }

    #[test]
    fn two_sample_fixture_scores_half() {
        let attrs = [Device, Marker];
        let preds = vec![
            sample([0.1, 0.1, 0.1, 0.1], &[(Device, [0.1, 0.9, 0.1, 0.1], 0), (Marker, [0.1, 0.15, 0.1, 0.1], 0)]),
            sample([0.1, 0.1, 0.1, 0.1], &[(Device, [0.1, 0.3, 0.1, 0.1], 0), (Marker, [0.1, 0.4, 0.1, 0.1], 0)]),
        ];
        let r = cfrt_from_predictions(&preds, &attrs, Device, 0.5).unwrap();
        assert_eq!(r.score, 0.5);
        assert!((r.indicators[0].target_change - 0.8).abs() < 1e-12);
        assert!((r.indicators[0].max_other_change - 0.05).abs() < 1e-12);
        assert!(!r.indicators[1].pass);
        assert_eq!(r.indicators[1].failed.as_deref(), Some("target_dominates"));
        assert_eq!(r.score, brute_force(&preds, &attrs, Device, 0.5));
    }

    #[test]
    fn empty_other_set_needs_positive_change() {
        let same = vec![sample([0.2, 0.3, 0.1, 0.1], &[(Device, [0.2, 0.3, 0.1, 0.1], 0)])];
        assert_eq!(cfrt_from_predictions(&same, &[Device], Device, 0.5).unwrap().score, 0.0);
        let moved = vec![sample([0.2, 0.3, 0.1, 0.1], &[(Device, [0.2, 0.31, 0.1, 0.1], 0)])];
        assert_eq!(cfrt_from_predictions(&moved, &[Device], Device, 0.5).unwrap().score, 1.0);
    }

    #[test]
    fn conditions_b_and_c_and_errors() {
        let attrs = [Device, Marker];
        let content_moved = vec![sample([0.1; 4], &[(Device, [0.1, 0.9, 0.1, 0.1], 2), (Marker, [0.1; 4], 0)])];
        let r = cfrt_from_predictions(&content_moved, &attrs, Device, 0.5).unwrap();
        assert_eq!(r.indicators[0].failed.as_deref(), Some("content_preserved"));
        let other_flipped = vec![sample([0.1; 4], &[(Device, [0.1, 0.9, 0.6, 0.1], 0), (Marker, [0.1; 4], 0)])];
        let r = cfrt_from_predictions(&other_flipped, &attrs, Device, 0.5).unwrap();
        assert_eq!(r.indicators[0].failed.as_deref(), Some("others_preserved"));
        let missing = vec![sample([0.1; 4], &[(Device, [0.1, 0.9, 0.1, 0.1], 0)])];
        match cfrt_from_predictions(&missing, &attrs, Device, 0.5) {
            Err(Error::MissingCounterfactual { sample, attribute }) => {
                assert_eq!((sample, attribute.as_str()), (0, "marker"));
            }
            other => panic!("{other:?}"),
        }
        assert!(cfrt_from_predictions(&missing, &[Marker], Device, 0.5).is_err());
    }

    fn arb_cls() -> impl Strategy<Value = Classification> {
        (proptest::array::uniform4(0.0f64..1.0), 0usize..4).prop_map(|(a, c)| cls(a, c))
    }

    proptest! {
        #[test]
        fn cfrt_matches_brute_force(
            raw in proptest::collection::vec((arb_cls(), proptest::collection::vec(arb_cls(), 4)), 1..12),
            a_idx in 0usize..4,
            n_attrs in 1usize..=4,
        ) {
            let attrs: Vec<Attribute> = Attribute::ALL[..n_attrs].to_vec();
            let a = attrs[a_idx % n_attrs];
            let preds: Vec<SamplePredictions> = raw
                .into_iter()
                .map(|(o, cf)| SamplePredictions {
                    original: o,
                    counterfactuals: attrs.iter().zip(cf).map(|(j, c)| (*j, c)).collect(),
                })
                .collect();
            let r = cfrt_from_predictions(&preds, &attrs, a, 0.5).unwrap();
            prop_assert_eq!(r.score, brute_force(&preds, &attrs, a, 0.5));
        }
    }

    fn v(x: &[f64]) -> Tensor {
        Tensor::from_vec(&[x.len()], x.to_vec()).unwrap()
    }

    #[test]
    fn cosine_fixtures() {
        let zero = v(&[0.0; 4]);
        let base = v(&[0.3, -1.0, 2.0, 0.5]);
        let pts: Vec<Tensor> = (1..=9).map(|k| base.scale(k as f64 * 0.7).unwrap()).collect();
        let refs: Vec<(usize, &Tensor)> = DEFAULT_SWAP_SET.iter().copied().zip(&pts).collect();
        let m = cosine_matrix_from(&zero, &refs, &DEFAULT_SWAP_SET).unwrap();
        for row in &m.values {
            for c in row {
                assert!((c.unwrap() - 1.0).abs() <= 1e-9);
            }
        }
        let a = v(&[1.0, 1.0, 0.0, 0.0]);
        let b = v(&[1.0, 0.0, 0.0, 0.0]);
        let c = v(&[0.0, 0.0, 3.0, 0.0]);
        let m = cosine_matrix_from(&zero, &[(5, &a), (10, &b), (15, &c)], &[5, 10, 15]).unwrap();
        assert!((m.get(0, 1).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() <= 1e-9);
        assert!(m.get(1, 2).unwrap().abs() <= 1e-12);
        let m = cosine_matrix_from(&zero, &[(5, &a), (10, &zero)], &[5, 10]).unwrap();
        assert_eq!(m.get(0, 0), Some(1.0));
        assert_eq!(m.get(0, 1), None);
        assert_eq!(m.get(1, 1), None);
        assert!(matches!(
            cosine_matrix_from(&zero, &[(5, &a)], &[5, 10]),
            Err(Error::MissingGridPoint(10))
        ));
        assert!(m.to_csv().contains("undefined"));
    }

    proptest! {
        #[test]
        fn cosine_matrix_is_symmetric_with_unit_diagonal(
            pts in proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, 6), 9),
        ) {
            let zero = v(&[0.0; 6]);
            let ts: Vec<Tensor> = pts.iter().map(|p| v(p)).collect();
            let refs: Vec<(usize, &Tensor)> = DEFAULT_SWAP_SET.iter().copied().zip(&ts).collect();
            let m = cosine_matrix_from(&zero, &refs, &DEFAULT_SWAP_SET).unwrap();
            for i in 0..9 {
                if let Some(d) = m.get(i, i) {
                    prop_assert_eq!(d, 1.0);
                }
                for j in 0..9 {
                    prop_assert_eq!(m.get(i, j), m.get(j, i));
                    if let Some(c) = m.get(i, j) {
                        prop_assert!((-1.0..=1.0).contains(&c));
                    }
                }
            }
        }
    }

    #[test]
    fn perceptual_distance_is_a_pseudometric() {
        let model = ClassifierModel::new(ClassifierConfig::default(), 2).unwrap();
        let mut rng = make_rng(2, 2);
        let imgs: Vec<Tensor> = (0..4).map(|_| sample_standard_normal(&mut rng, &[32, 32]).unwrap()).collect();
        for a in &imgs {
            assert_eq!(perceptual_distance(a, a, &model).unwrap(), 0.0);
            for b in &imgs {
                let ab = perceptual_distance(a, b, &model).unwrap();
                let ba = perceptual_distance(b, a, &model).unwrap();
                assert!(ab >= 0.0 && (ab - ba).abs() <= 1e-12);
            }
        }
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let batch = perceptual_distances(&imgs[0], &refs, &model).unwrap();
        assert_eq!(batch[0], 0.0);
        assert!((batch[2] - perceptual_distance(&imgs[0], &imgs[2], &model).unwrap()).abs() <= 1e-12);
        assert!(perceptual_distance(&imgs[0], &Tensor::zeros(&[16, 64]).unwrap(), &model).is_err());
    }

    #[test]
    fn pca_fixtures() {
        let pts = [v(&[0.0, 5.0]), v(&[1.0, 5.0]), v(&[2.0, 5.0])];
        let refs: Vec<&Tensor> = pts.iter().collect();
        let p = pca_project(&refs, 1).unwrap();
        let c: Vec<f64> = p.coords.iter().map(|r| r[0]).collect();
        let sign = c[2].signum();
        for (got, want) in c.iter().zip([-1.0, 0.0, 1.0]) {
            assert!((got * sign - want).abs() <= 1e-12);
        }
        assert!(pca_project(&refs[..1], 1).is_err());
        assert!(pca_project(&refs, 0).is_err());

        // Points in a 2-D affine subspace of R^5 keep their pairwise distances.
        let mut rng = make_rng(9, 9);
        let (o, u1, u2) = (
            v(&[1.0, 2.0, 3.0, 4.0, 5.0]),
            v(&[1.0, 0.0, 1.0, 0.0, 0.0]).scale(0.5f64.sqrt()).unwrap(),
            v(&[0.0, 1.0, 0.0, 0.0, 0.0]),
        );
        let pts: Vec<Tensor> = (0..8)
            .map(|_| {
                let a = rng.uniform(-3.0, 3.0);
                let b = rng.uniform(-3.0, 3.0);
                o.axpby(1.0, &u1, a).unwrap().axpby(1.0, &u2, b).unwrap()
            })
            .collect();
        let refs: Vec<&Tensor> = pts.iter().collect();
        let p = pca_project(&refs, 2).unwrap();
        assert!(p.explained_variance[0] >= p.explained_variance[1]);
        for i in 0..8 {
            for j in 0..8 {
                let d = pts[i].sub(&pts[j]).unwrap().norm();
                let e = ((p.coords[i][0] - p.coords[j][0]).powi(2) + (p.coords[i][1] - p.coords[j][1]).powi(2)).sqrt();
                assert!((d - e).abs() <= 1e-9);
            }
        }
        for dir in &p.components {
            let lead = dir.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(lead > 0.0);
        }
    }

    #[test]
    fn pca_reconstruction_error_shrinks_with_k() {
        let mut rng = make_rng(4, 4);
        let pts: Vec<Tensor> = (0..10).map(|_| sample_standard_normal(&mut rng, &[12]).unwrap()).collect();
        let refs: Vec<&Tensor> = pts.iter().collect();
        let mut last = f64::INFINITY;
        for k in 1..=6 {
            let p = pca_project(&refs, k).unwrap();
            let err: f64 = (0..10)
                .map(|i| p.reconstruct(i).iter().zip(pts[i].data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                .sum();
            assert!(err <= last + 1e-9);
            assert!(p.explained_variance.windows(2).all(|w| w[0] >= w[1]));
            last = err;
        }
    }

    #[test]
    fn spearman_cases() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]), None);
        // Ties: ranks (1, 2.5, 2.5, 4) against (1, 2, 3, 4).
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[0.0, 1.0, 1.0, 2.0]).unwrap();
        assert!((r - 4.5 / (5.0f64 * 4.5).sqrt()).abs() < 1e-12);
    }
}
