//! Bezier curves through trajectory latents.
//!
//! `B(u) = sum_i binom(n, i) (1 - u)^(n - i) u^i P_i` for `u` in `[0, 1]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trajectory::{curve_manifest, read_archive, write_archive, Provenance, Trajectory};

pub const DEFAULT_CONTROL_POINTS: usize = 7;
pub const DEFAULT_SAMPLES: usize = 50;
const MAX_DEGREE: usize = 64;

/// `binom(n, i) (1 - u)^(n - i) u^i`.
pub fn bernstein_weight(n: usize, i: usize, u: f64) -> Result<f64> {
    if n > MAX_DEGREE {
        return Err(Error::invalid("n", format!("degree {n} above {MAX_DEGREE}")));
    }
    if i > n {
        return Err(Error::invalid("i", format!("index {i} above degree {n}")));
    }
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::invalid("u", format!("{u} outside [0, 1]")));
    }
    let k = i.min(n - i);
    let mut binom = 1.0;
    for j in 0..k {
        binom = binom * (n - j) as f64 / (j + 1) as f64;
    }
    Ok(binom * (1.0 - u).powi((n - i) as i32) * u.powi(i as i32))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BezierCurve {
    control_points: Vec<Tensor>,
}

impl BezierCurve {
    pub fn new(control_points: Vec<Tensor>) -> Result<Self> {
        if control_points.len() < 2 {
            return Err(Error::invalid("control_points", "need at least two"));
        }
        if control_points.len() - 1 > MAX_DEGREE {
            return Err(Error::invalid("control_points", format!("degree above {MAX_DEGREE}")));
        }
        let shape = control_points[0].shape();
        if let Some(p) = control_points.iter().find(|p| p.shape() != shape) {
            return Err(Error::ShapeMismatch {
                expected: shape.to_vec(),
                actual: p.shape().to_vec(),
            });
        }
        Ok(Self { control_points })
    }

    pub fn degree(&self) -> usize {
        self.control_points.len() - 1
    }

    pub fn control_points(&self) -> &[Tensor] {
        &self.control_points
    }
}

pub fn bezier_point(curve: &BezierCurve, u: f64) -> Result<Tensor> {
    let n = curve.degree();
    let shape = curve.control_points[0].shape().to_vec();
    if u == 0.0 {
        return Ok(curve.control_points[0].clone());
    }
    if u == 1.0 {
        return Ok(curve.control_points[n].clone());
    }
    let mut out = vec![0.0; curve.control_points[0].len()];
    for (i, p) in curve.control_points.iter().enumerate() {
        let w = bernstein_weight(n, i, u)?;
        for (o, v) in out.iter_mut().zip(p.data()) {
            *o += w * v;
        }
    }
    Tensor::from_vec(&shape, out)
}

/// Samples at strictly increasing `u`, from 0 to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSamples {
    pub u: Vec<f64>,
    pub latents: Vec<Tensor>,
    /// Trajectory record indices used as control points (neutral is 0).
    pub control_indices: Vec<usize>,
}

impl CurveSamples {
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }
}

/// Evaluates the curve at `u = k / (m - 1)`, `k = 0..m`.
pub fn sample_curve(curve: &BezierCurve, m: usize) -> Result<CurveSamples> {
    if m < 2 {
        return Err(Error::invalid("m", format!("{m} < 2")));
    }
    let u: Vec<f64> = (0..m).map(|k| k as f64 / (m - 1) as f64).collect();
    let latents = u.iter().map(|&u| bezier_point(curve, u)).collect::<Result<_>>()?;
    Ok(CurveSamples {
        u,
        latents,
        control_indices: (0..curve.control_points.len()).collect(),
    })
}

/// `n_ctrl` indices spread uniformly over `0..count`, first and last included.
pub fn control_indices(count: usize, n_ctrl: usize) -> Result<Vec<usize>> {
    if n_ctrl < 2 {
        return Err(Error::invalid("n_ctrl", format!("{n_ctrl} < 2")));
    }
    if count < n_ctrl {
        return Err(Error::invalid(
            "n_ctrl",
            format!("trajectory has {count} points, {n_ctrl} control points requested"),
        ));
    }
    Ok((0..n_ctrl)
        .map(|k| ((k * (count - 1)) as f64 / (n_ctrl - 1) as f64).round() as usize)
        .collect())
}

/// Fits a Bezier curve to `n_ctrl` of the trajectory's latents (neutral
/// first) and samples it at `m` points.
pub fn interpolate_trajectory(traj: &Trajectory, n_ctrl: usize, m: usize) -> Result<CurveSamples> {
    let latents = traj.latents();
    let idx = control_indices(latents.len(), n_ctrl)?;
    let curve = BezierCurve::new(idx.iter().map(|&i| latents[i].clone()).collect())?;
    let mut samples = sample_curve(&curve, m)?;
    samples.control_indices = idx;
    Ok(samples)
}

/// Writes samples in the trajectory archive format, flagged as interpolated.
pub fn save_curve_archive(samples: &CurveSamples, provenance: &Provenance, dir: &Path) -> Result<()> {
    let Some(first) = samples.latents.first() else {
        return Err(Error::invalid("samples", "empty"));
    };
    let manifest = curve_manifest(provenance, first.shape(), samples.control_indices.clone(), samples.u.clone());
    write_archive(dir, manifest, &samples.latents.iter().collect::<Vec<_>>())
}

/// Reads an interpolated archive. Latents come back at f32 precision.
pub fn load_curve_archive(dir: &Path) -> Result<(CurveSamples, Provenance)> {
    let (manifest, latents) = read_archive(dir)?;
    if !manifest.interpolated {
        return Err(Error::format("interpolated", "archive holds a trajectory, not curve samples"));
    }
    let u = manifest.u.clone().unwrap_or_default();
    if u.len() != latents.len() || manifest.m != Some(u.len()) {
        return Err(Error::format("u", format!("{} parameters for {} records", u.len(), latents.len())));
    }
    if u.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::format("u", "not strictly increasing"));
    }
    let samples = CurveSamples {
        u,
        latents,
        control_indices: manifest.control_indices.clone().unwrap_or_default(),
    };
    Ok((samples, manifest.provenance()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn weight_examples() {
        for n in 1..10 {
            assert_eq!(bernstein_weight(n, 0, 0.0).unwrap(), 1.0);
            assert_eq!(bernstein_weight(n, n, 1.0).unwrap(), 1.0);
        }
        assert_eq!(bernstein_weight(2, 1, 0.5).unwrap(), 0.5);
        assert!(bernstein_weight(2, 3, 0.5).is_err());
        assert!(bernstein_weight(2, 1, 1.5).is_err());
        assert!(bernstein_weight(65, 1, 0.5).is_err());
        // binom(64, 32) = 1832624140942590534
        let w = bernstein_weight(64, 32, 0.5).unwrap();
        assert!((w - 1.832624140942590e18 * 0.5f64.powi(64)).abs() < 1e-12);
    }

    #[test]
    fn partition_of_unity() {
        for n in 1..=16 {
            for k in 0..=100 {
                let u = k as f64 / 100.0;
                let s: f64 = (0..=n).map(|i| bernstein_weight(n, i, u).unwrap()).sum();
                assert!((s - 1.0).abs() <= 1e-12, "n={n} u={u}: {s}");
            }
        }
    }

    #[test]
    fn curve_examples() {
        let c = BezierCurve::new(vec![t(&[0.0, 0.0]), t(&[1.0, 2.0]), t(&[2.0, 0.0])]).unwrap();
        let mid = bezier_point(&c, 0.5).unwrap();
        assert!((mid.data()[0] - 1.0).abs() < 1e-12 && (mid.data()[1] - 1.0).abs() < 1e-12);
        assert!(bezier_point(&c, 0.0).unwrap().bit_eq(&c.control_points()[0]));
        assert!(bezier_point(&c, 1.0).unwrap().bit_eq(&c.control_points()[2]));
        assert!(bezier_point(&c, -0.1).is_err());
        let s = sample_curve(&c, 2).unwrap();
        assert!(s.latents[0].bit_eq(&c.control_points()[0]) && s.latents[1].bit_eq(&c.control_points()[2]));
        let s = sample_curve(&c, 50).unwrap();
        assert_eq!(s.len(), 50);
        assert!(s.u.windows(2).all(|w| w[1] > w[0]));
        assert!(sample_curve(&c, 1).is_err());
        assert!(BezierCurve::new(vec![t(&[1.0])]).is_err());
        assert!(BezierCurve::new(vec![t(&[1.0]), t(&[1.0, 2.0])]).is_err());
    }

    #[test]
    fn constant_curve() {
        let c = BezierCurve::new(vec![t(&[0.3, -0.7]); 7]).unwrap();
        for s in sample_curve(&c, 50).unwrap().latents {
            assert!(s.max_abs_diff(&t(&[0.3, -0.7])).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn control_index_choice() {
        assert_eq!(control_indices(10, 7).unwrap(), vec![0, 2, 3, 5, 6, 8, 9]);
        assert_eq!(control_indices(10, 10).unwrap(), (0..10).collect::<Vec<_>>());
        assert_eq!(control_indices(10, 2).unwrap(), vec![0, 9]);
        assert!(control_indices(5, 7).is_err());
    }

    proptest! {
        #[test]
        fn degree_one_is_linear(a in -5.0f64..5.0, b in -5.0f64..5.0, u in 0.0f64..=1.0) {
            let c = BezierCurve::new(vec![t(&[a]), t(&[b])]).unwrap();
            let p = bezier_point(&c, u).unwrap().data()[0];
            prop_assert!((p - ((1.0 - u) * a + u * b)).abs() <= 1e-12);
        }

        #[test]
        fn samples_stay_in_control_hull(
            pts in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 4), 2..9),
            m in 2usize..20,
        ) {
            let c = BezierCurve::new(pts.iter().map(|p| t(p)).collect()).unwrap();
            for s in sample_curve(&c, m).unwrap().latents {
                for (k, v) in s.data().iter().enumerate() {
                    let lo = pts.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
                    let hi = pts.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
                }
            }
        }
    }
}
