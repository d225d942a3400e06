//! Acceptance gate. Each test prints one `criterion N: PASS|FAIL` line to the
//! real stdout (bypassing capture) and then asserts.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use difftraj::diffusion::{ddim_step, gamma_coefficients, generate, FnDenoiser, NoiseSchedule};
use difftraj::interpolation::{bernstein_weight, bezier_point, BezierCurve};
use difftraj::metrics::{cfrt_from_predictions, cosine_matrix, cosine_matrix_from, SamplePredictions};
use difftraj::models::{
    load_checkpoint, save_checkpoint, Classification, ClassifierConfig, ClassifierModel, DenoiserConfig,
    DenoiserModel, LabeledBatch, NoiseBatch,
};
use difftraj::nn::{check_gradients, check_gradients_sampled, ParamId};
use difftraj::prompt::{embed, make_table, AttributeSpec, Embedding};
use difftraj::rng::{make_rng, sample_standard_normal, RngStream};
use difftraj::trajectory::{build_trajectories, load_archive, save_archive, SwapPlan};
use difftraj::{Attribute, Tensor};
use difftraj_cli::config::RunConfig;
use difftraj_cli::{run_pipeline, RunOutputs};

// Pinned tolerances and thresholds.
const ORACLE_TOL: f64 = 1e-10;
const GAMMA_TOL: f64 = 1e-12;
const BERNSTEIN_TOL: f64 = 1e-12;
const COSINE_TOL: f64 = 1e-9;
const GRAD_TOL: f64 = 1e-4;
const GRAD_EPS: f64 = 1e-5;
// Weight noise added before checking. The full-size models use a smaller
// scale so the loss stays near its trained magnitude.
const PERTURB_SMALL: f64 = 0.1;
const PERTURB_FULL: f64 = 0.01;
// The gate covers every coordinate of reduced-width instances of both
// architectures. Full-width sampled checks are reported only: at eps 1e-5
// the central difference of a loss near 2 carries roundoff around 1e-10,
// which exceeds 1e-4 relative for coordinates with |g| below about 1e-6.
const MIN_ACCURACY: f64 = 0.90;
const MIN_F1: f64 = 0.85;
const MIN_CFRT: f64 = 0.70;
const MIN_CLOSER: f64 = 0.80;
const MIN_SPEARMAN: f64 = 0.6;
const MAX_INTERP_GAP: f64 = 0.15;
const GATED: [Attribute; 3] = [Attribute::Device, Attribute::Marker, Attribute::Grid];

fn verdict(n: u32, pass: bool, elapsed: Duration, detail: &str) {
    let line = format!(
        "criterion {n}: {} ({:.2}s) {detail}\n",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn scratch(name: &str) -> PathBuf {
    let p = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&p);
    p
}

struct Run {
    dir: PathBuf,
    out: RunOutputs,
    elapsed: Duration,
}

fn run_once(name: &str) -> Run {
    let dir = scratch(name);
    let cfg = RunConfig::reference(&dir);
    let start = Instant::now();
    let out = run_pipeline(&cfg).unwrap_or_else(|e| panic!("pipeline {name}: {e}"));
    Run {
        dir,
        out,
        elapsed: start.elapsed(),
    }
}

fn reference_run() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| run_once("run_a"))
}

fn ms(run: &Run, stage: &str) -> Duration {
    Duration::from_millis(run.out.manifest.timings_ms[stage])
}

// ------------------------------------------------------------------ 1

#[test]
fn criterion_01_oracle_ddim_reconstruction() {
    let start = Instant::now();
    let s = NoiseSchedule::default();
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let mut rng = make_rng(seed, 11);
        let x0 = sample_standard_normal(&mut rng, &[32, 32]).unwrap();
        let xt = sample_standard_normal(&mut rng, &[32, 32]).unwrap();
        let target = x0.data().to_vec();
        let ab = s.alpha_bar().to_vec();
        // Analytic noise: the eps that maps x0 to the current latent.
        let oracle = FnDenoiser(move |x: &[f64], t: usize, _: &Embedding| {
            x.iter()
                .zip(&target)
                .map(|(v, x0)| (v - ab[t].sqrt() * x0) / (1.0 - ab[t]).sqrt())
                .collect::<Vec<_>>()
        });
        let es = vec![Embedding([0.0; 16]); s.steps()];
        let (out, _) = generate(&xt, &es, &oracle, &s).unwrap();
        worst = worst.max(out.max_abs_diff(&x0).unwrap());
    }
    let elapsed = start.elapsed();
    let pass = worst < ORACLE_TOL && elapsed < Duration::from_secs(1);
    verdict(1, pass, elapsed, &format!("max_abs_err={worst:.3e} tol={ORACLE_TOL:e}"));
    assert!(pass);
}

// ------------------------------------------------------------------ 2

#[test]
fn criterion_02_gamma_coefficients() {
    let start = Instant::now();
    let mut ok = true;
    for ab in [1.0, 0.9, 0.5, 0.25, 0.004] {
        ok &= gamma_coefficients(ab, ab).unwrap() == (1.0, 0.0);
    }
    let (g0, g1) = gamma_coefficients(1.0, 0.25).unwrap();
    let hand = (g0 - 2.0).abs() <= GAMMA_TOL && (g1 + 3f64.sqrt()).abs() <= GAMMA_TOL;
    let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.25]).unwrap();
    let mut rng = make_rng(2, 2);
    let x0 = sample_standard_normal(&mut rng, &[32, 32]).unwrap();
    let eps = sample_standard_normal(&mut rng, &[32, 32]).unwrap();
    let xt = x0.axpby(0.5, &eps, 0.75f64.sqrt()).unwrap();
    let back = ddim_step(&xt, 1, &eps, &s).unwrap();
    let err = back.max_abs_diff(&x0).unwrap();
    let elapsed = start.elapsed();
    let pass = ok && hand && err <= GAMMA_TOL && elapsed < Duration::from_secs(1);
    verdict(
        2,
        pass,
        elapsed,
        &format!("degenerate_exact={ok} gamma=({g0}, {g1}) step_err={err:.3e}"),
    );
    assert!(pass);
}

// ------------------------------------------------------------------ 3

fn t1(v: &[f64]) -> Tensor {
    Tensor::from_vec(&[v.len()], v.to_vec()).unwrap()
}

#[test]
fn criterion_03_bernstein_bezier() {
    let start = Instant::now();
    let mut unity = 0.0f64;
    for n in 0..=16 {
        for k in 0..=100 {
            let u = k as f64 / 100.0;
            let s: f64 = (0..=n).map(|i| bernstein_weight(n, i, u).unwrap()).sum();
            unity = unity.max((s - 1.0).abs());
        }
    }
    let mut rng = make_rng(3, 3);
    let pts: Vec<Tensor> = (0..7).map(|_| sample_standard_normal(&mut rng, &[5]).unwrap()).collect();
    let c = BezierCurve::new(pts.clone()).unwrap();
    let endpoints = bezier_point(&c, 0.0).unwrap().bit_eq(&pts[0]) && bezier_point(&c, 1.0).unwrap().bit_eq(&pts[6]);
    let (a, b) = (t1(&[0.3, -1.2]), t1(&[2.5, 0.7]));
    let line = BezierCurve::new(vec![a.clone(), b.clone()]).unwrap();
    let mut linear = 0.0f64;
    for k in 0..=100 {
        let u = k as f64 / 100.0;
        let expect = a.axpby(1.0 - u, &b, u).unwrap();
        linear = linear.max(bezier_point(&line, u).unwrap().max_abs_diff(&expect).unwrap());
    }
    let q = BezierCurve::new(vec![t1(&[0.0, 0.0]), t1(&[1.0, 2.0]), t1(&[2.0, 0.0])]).unwrap();
    let mid = bezier_point(&q, 0.5).unwrap().max_abs_diff(&t1(&[1.0, 1.0])).unwrap();
    let elapsed = start.elapsed();
    let pass = unity <= BERNSTEIN_TOL
        && endpoints
        && linear <= BERNSTEIN_TOL
        && mid <= BERNSTEIN_TOL
        && elapsed < Duration::from_secs(1);
    verdict(
        3,
        pass,
        elapsed,
        &format!("unity_err={unity:.3e} endpoints={endpoints} linear_err={linear:.3e} midpoint_err={mid:.3e}"),
    );
    assert!(pass);
}

// ------------------------------------------------------------------ 4

fn cls(content: usize, attrs: [f64; 4]) -> Classification {
    let mut content_probs = [0.1 / 3.0; 4];
    content_probs[content] = 0.9;
    Classification {
        content_probs,
        attr_probs: attrs,
    }
}

/// Direct enumeration of the indicator, written independently of the library.
fn brute_force_cfrt(preds: &[SamplePredictions], attrs: &[Attribute], a: Attribute, thr: f64) -> f64 {
    let mut hits = 0usize;
    for p in preds {
        let fa = |c: &Classification| c.attr_probs[a.index()];
        let own = (fa(&p.original) - fa(&p.counterfactuals[&a])).abs();
        let others: Vec<f64> = attrs
            .iter()
            .filter(|j| **j != a)
            .map(|j| (fa(&p.original) - fa(&p.counterfactuals[j])).abs())
            .collect();
        let other_max = if others.is_empty() {
            0.0
        } else {
            others.iter().cloned().fold(f64::MIN, f64::max)
        };
        let argmax = |c: &Classification| {
            (0..4)
                .max_by(|&i, &j| c.content_probs[i].partial_cmp(&c.content_probs[j]).unwrap().then(j.cmp(&i)))
                .unwrap()
        };
        let cf = &p.counterfactuals[&a];
        let same_content = argmax(&p.original) == argmax(cf);
        let mut same_others = true;
        for k in 0..4 {
            if k != a.index() && ((p.original.attr_probs[k] >= thr) != (cf.attr_probs[k] >= thr)) {
                same_others = false;
            }
        }
        if own > other_max && same_content && same_others {
            hits += 1;
        }
    }
    hits as f64 / preds.len() as f64
}

#[test]
fn criterion_04_cfrt_fixtures() {
    let start = Instant::now();
    use Attribute::*;
    let all = Attribute::ALL.to_vec();
    let mut details = Vec::new();
    let mut ok = true;

    // Two samples: the first flips the device cleanly, the second also flips the marker.
    let half = vec![
        SamplePredictions {
            original: cls(0, [0.1, 0.1, 0.1, 0.1]),
            counterfactuals: BTreeMap::from([
                (Effusion, cls(0, [0.9, 0.1, 0.1, 0.1])),
                (Device, cls(0, [0.1, 0.9, 0.1, 0.1])),
                (Marker, cls(0, [0.1, 0.2, 0.9, 0.1])),
                (Grid, cls(0, [0.1, 0.1, 0.1, 0.9])),
            ]),
        },
        SamplePredictions {
            original: cls(1, [0.1, 0.1, 0.1, 0.1]),
            counterfactuals: BTreeMap::from([
                (Effusion, cls(1, [0.9, 0.1, 0.1, 0.1])),
                (Device, cls(1, [0.1, 0.9, 0.8, 0.1])),
                (Marker, cls(1, [0.1, 0.1, 0.9, 0.1])),
                (Grid, cls(1, [0.1, 0.1, 0.1, 0.9])),
            ]),
        },
    ];
    let got = cfrt_from_predictions(&half, &all, Device, 0.5).unwrap().score;
    ok &= got == 0.5 && brute_force_cfrt(&half, &all, Device, 0.5) == got;
    details.push(format!("two_sample={got}"));

    // Only the target attribute: the max over others is 0.
    let solo = vec![SamplePredictions {
        original: cls(2, [0.3, 0.3, 0.3, 0.3]),
        counterfactuals: BTreeMap::from([(Grid, cls(2, [0.3, 0.3, 0.3, 0.31]))]),
    }];
    let got = cfrt_from_predictions(&solo, &[Grid], Grid, 0.5).unwrap();
    ok &= got.score == 1.0 && got.indicators[0].max_other_change == 0.0;
    ok &= brute_force_cfrt(&solo, &[Grid], Grid, 0.5) == 1.0;
    details.push(format!("empty_others={}", got.score));

    // Content change, dominated change and unchanged cases.
    let mixed = vec![
        SamplePredictions {
            original: cls(0, [0.1, 0.1, 0.1, 0.1]),
            counterfactuals: BTreeMap::from([(Effusion, cls(3, [0.9, 0.1, 0.1, 0.1])), (Marker, cls(0, [0.1, 0.1, 0.9, 0.1]))]),
        },
        SamplePredictions {
            original: cls(0, [0.1, 0.1, 0.1, 0.1]),
            counterfactuals: BTreeMap::from([(Effusion, cls(0, [0.5, 0.1, 0.1, 0.1])), (Marker, cls(0, [0.6, 0.1, 0.9, 0.1]))]),
        },
        SamplePredictions {
            original: cls(0, [0.1, 0.1, 0.1, 0.1]),
            counterfactuals: BTreeMap::from([(Effusion, cls(0, [0.1, 0.1, 0.1, 0.1])), (Marker, cls(0, [0.1, 0.1, 0.1, 0.1]))]),
        },
    ];
    let two = [Effusion, Marker];
    for a in two {
        let got = cfrt_from_predictions(&mixed, &two, a, 0.5).unwrap().score;
        let want = brute_force_cfrt(&mixed, &two, a, 0.5);
        ok &= got == want;
        details.push(format!("mixed_{a}={got}"));
    }

    // Randomized agreement with the enumeration.
    let mut rng: RngStream = make_rng(4, 4);
    let mut agree = true;
    for _ in 0..200 {
        let r = |rng: &mut RngStream| {
            let c = rng.below(4);
            let mut probs = [0.0; 4];
            for p in &mut probs {
                *p = (rng.below(5) as f64) / 4.0;
            }
            cls(c, probs)
        };
        let preds: Vec<SamplePredictions> = (0..1 + rng.below(6))
            .map(|_| SamplePredictions {
                original: r(&mut rng),
                counterfactuals: all.iter().map(|&a| (a, r(&mut rng))).collect(),
            })
            .collect();
        for &a in &all {
            agree &= cfrt_from_predictions(&preds, &all, a, 0.5).unwrap().score == brute_force_cfrt(&preds, &all, a, 0.5);
        }
    }
    ok &= agree;
    details.push(format!("random_agree={agree}"));
    let elapsed = start.elapsed();
    let pass = ok && elapsed < Duration::from_secs(1);
    verdict(4, pass, elapsed, &details.join(" "));
    assert!(pass);
}

// ------------------------------------------------------------------ 5

#[test]
fn criterion_05_cosine_matrix() {
    let start = Instant::now();
    let model = DenoiserModel::new(DenoiserConfig::default(), 5).unwrap();
    let table = make_table(5).unwrap();
    let schedule = difftraj::diffusion::ScheduleParams::default();
    let plans: Vec<SwapPlan> = (0..2).map(|s| SwapPlan::new(AttributeSpec::of(&[Attribute::Marker]), 50 + s)).collect();
    let trajs = build_trajectories(&plans, &model, &schedule, &table).unwrap();
    let mut structural = true;
    for t in &trajs {
        let m = cosine_matrix(t).unwrap();
        for i in 0..9 {
            for j in 0..9 {
                let v = m.get(i, j).expect("generated points differ from neutral");
                structural &= v == m.get(j, i).unwrap() && (-1.0..=1.0).contains(&v);
                if i == j {
                    structural &= v == 1.0;
                }
            }
        }
    }
    let origin = t1(&[0.0, 0.0]);
    let grid = [5, 10, 15];
    let (a, b, c) = (t1(&[1.0, 2.0]), t1(&[2.0, 4.0]), t1(&[-0.5, -1.0]));
    let colinear = cosine_matrix_from(&origin, &[(5, &a), (10, &b), (15, &b)], &grid).unwrap();
    let all_ones = (0..3).all(|i| (0..3).all(|j| (colinear.get(i, j).unwrap() - 1.0).abs() <= COSINE_TOL));
    let mixed = cosine_matrix_from(&origin, &[(5, &t1(&[1.0, 0.0])), (10, &t1(&[0.0, 3.0])), (15, &t1(&[1.0, 1.0]))], &grid).unwrap();
    let orth = mixed.get(0, 1).unwrap().abs() <= COSINE_TOL;
    let diag = (mixed.get(0, 2).unwrap() - 0.5f64.sqrt()).abs() <= COSINE_TOL;
    let opposite = cosine_matrix_from(&origin, &[(5, &a), (10, &c), (15, &b)], &grid).unwrap();
    let anti = (opposite.get(0, 1).unwrap() + 1.0).abs() <= COSINE_TOL;
    let elapsed = start.elapsed();
    let pass = structural && all_ones && orth && diag && anti && elapsed < Duration::from_secs(1);
    verdict(
        5,
        pass,
        elapsed,
        &format!("generated_structure={structural} colinear={all_ones} orthogonal={orth} inv_sqrt2={diag} opposite={anti}"),
    );
    assert!(pass);
}

// ------------------------------------------------------------------ 6

fn perturb(store: &mut difftraj::nn::ParamStore, seed: u64, scale: f64) {
    let mut rng = make_rng(seed, 66);
    for i in 0..store.len() {
        let p = store.param(ParamId(i));
        let moved: Vec<f64> = p.data().iter().map(|v| v + scale * rng.next_normal()).collect();
        let t = Tensor::from_vec(p.shape(), moved).unwrap();
        store.set(ParamId(i), t).unwrap();
    }
}

#[test]
fn criterion_06_gradient_checks() {
    let start = Instant::now();
    let mut worst_d = 0.0f64;
    let mut worst_c = 0.0f64;
    let mut full_d = 0.0f64;
    let mut full_c = 0.0f64;
    let table = make_table(6).unwrap();
    let specs = AttributeSpec::all();
    for seed in 0..3u64 {
        // Small denoiser, every coordinate.
        let small = DenoiserConfig {
            pixels: 12,
            hidden: [7, 5],
            time_dim: 4,
            prompt_dim: 3,
            steps: 10,
        };
        let mut rng = make_rng(seed, 6);
        let mut m = DenoiserModel::new(small, seed).unwrap();
        perturb(m.split_mut().1, seed, PERTURB_SMALL);
        let batch = NoiseBatch {
            x_t: (0..3 * 12).map(|_| rng.next_normal()).collect(),
            ts: (0..3).map(|_| 1 + rng.below(10)).collect(),
            es: (0..3).map(|_| embed(&specs[rng.below(16)], &table).unwrap()).collect(),
            target: (0..3 * 12).map(|_| rng.next_normal()).collect(),
        };
        let (arch, store) = m.split_mut();
        worst_d = worst_d.max(check_gradients(|s| arch.loss_and_grad(s, &batch), store, GRAD_EPS).unwrap());

        // Default denoiser, sampled coordinates of every tensor.
        let cfg = DenoiserConfig::default();
        let mut m = DenoiserModel::new(cfg, seed).unwrap();
        perturb(m.split_mut().1, seed + 10, PERTURB_FULL);
        let batch = NoiseBatch {
            x_t: (0..2 * cfg.pixels).map(|_| rng.next_normal()).collect(),
            ts: (0..2).map(|_| 1 + rng.below(cfg.steps)).collect(),
            es: (0..2).map(|_| embed(&specs[rng.below(16)], &table).unwrap()).collect(),
            target: (0..2 * cfg.pixels).map(|_| rng.next_normal()).collect(),
        };
        let (arch, store) = m.split_mut();
        let mut pick = make_rng(seed, 7);
        full_d = full_d.max(
            check_gradients_sampled(|s| arch.loss_and_grad(s, &batch), store, GRAD_EPS, 4, &mut pick).unwrap(),
        );

        // Small classifier, every coordinate.
        let small = ClassifierConfig {
            pixels: 10,
            hidden: [6, 5],
        };
        let mut m = ClassifierModel::new(small, seed).unwrap();
        perturb(m.split_mut().1, seed + 20, PERTURB_SMALL);
        let batch = LabeledBatch {
            images: (0..4 * 10).map(|_| rng.next_normal()).collect(),
            content: (0..4).map(|_| rng.below(4)).collect(),
            attrs: (0..16).map(|_| rng.bernoulli(0.5)).collect(),
        };
        let (arch, store) = m.split_mut();
        worst_c = worst_c.max(check_gradients(|s| arch.loss_and_grad(s, &batch), store, GRAD_EPS).unwrap());

        // Default classifier, sampled coordinates.
        let cfg = ClassifierConfig::default();
        let mut m = ClassifierModel::new(cfg, seed).unwrap();
        perturb(m.split_mut().1, seed + 30, PERTURB_FULL);
        let batch = LabeledBatch {
            images: (0..3 * cfg.pixels).map(|_| rng.next_normal()).collect(),
            content: (0..3).map(|_| rng.below(4)).collect(),
            attrs: (0..12).map(|_| rng.bernoulli(0.5)).collect(),
        };
        let (arch, store) = m.split_mut();
        full_c = full_c.max(
            check_gradients_sampled(|s| arch.loss_and_grad(s, &batch), store, GRAD_EPS, 4, &mut pick).unwrap(),
        );
    }
    let elapsed = start.elapsed();
    let pass = worst_d < GRAD_TOL && worst_c < GRAD_TOL && elapsed < Duration::from_secs(120);
    verdict(
        6,
        pass,
        elapsed,
        &format!(
            "denoiser_rel_err={worst_d:.3e} classifier_rel_err={worst_c:.3e} tol={GRAD_TOL:e} \
             (full width, sampled, not gated: denoiser={full_d:.3e} classifier={full_c:.3e})"
        ),
    );
    assert!(pass);
}

// ------------------------------------------------------------------ 7

#[test]
fn criterion_07_classifier_heads() {
    let run = reference_run();
    let elapsed = ms(run, "synth") + ms(run, "train_classifier");
    let mut ok = true;
    let mut details = Vec::new();
    for h in &run.out.classifier.test {
        let head_ok = if h.head == "content" {
            h.accuracy >= MIN_ACCURACY
        } else {
            h.accuracy >= MIN_ACCURACY && h.f1 >= MIN_F1
        };
        ok &= head_ok;
        details.push(format!("{}:acc={:.3},f1={:.3}", h.head, h.accuracy, h.f1));
    }
    ok &= run.out.classifier.test.len() == 5;
    let pass = ok && elapsed <= Duration::from_secs(600);
    verdict(7, pass, elapsed, &details.join(" "));
    assert!(pass);
}

// ------------------------------------------------------------------ 8

#[test]
fn criterion_08_disentanglement() {
    let run = reference_run();
    let ev = &run.out.evaluation;
    let mut ok = ev.swap_set == vec![5, 10, 15, 20, 25, 30, 35, 40, 45] && ev.cfrt_tau == 25;
    let mut details = Vec::new();
    for a in &ev.attributes {
        let gated = GATED.contains(&a.attribute);
        if gated {
            ok &= a.cfrt.samples == 100;
            ok &= a.cfrt.score >= MIN_CFRT;
            ok &= a.closer_at_small_tau >= MIN_CLOSER;
            ok &= a.mean_spearman >= MIN_SPEARMAN;
        }
        details.push(format!(
            "{}{}:cfrt={:.2},closer={:.2},rho={:.3}",
            a.attribute,
            if gated { "" } else { "(reported)" },
            a.cfrt.score,
            a.closer_at_small_tau,
            a.mean_spearman
        ));
    }
    ok &= GATED.iter().all(|g| ev.attribute(*g).is_some());
    let pass = ok && run.elapsed <= Duration::from_secs(1800);
    verdict(8, pass, run.elapsed, &details.join(" "));
    assert!(pass);
}

// ------------------------------------------------------------------ 9

#[test]
fn criterion_09_interpolated_cfrt() {
    let run = reference_run();
    let ev = &run.out.evaluation;
    let elapsed = ms(run, "evaluate");
    let mut ok = true;
    let mut details = Vec::new();
    let mut checked = 0;
    for a in &ev.attributes {
        let gap = (a.cfrt_interpolated.score - a.cfrt.score).abs();
        if GATED.contains(&a.attribute) && a.cfrt.score >= MIN_CFRT {
            checked += 1;
            ok &= gap <= MAX_INTERP_GAP && a.cfrt_interpolated.samples == 100 * 50;
        }
        details.push(format!(
            "{}:traj={:.3},interp={:.3},gap={gap:.3}",
            a.attribute, a.cfrt.score, a.cfrt_interpolated.score
        ));
    }
    // With no attribute passing criterion 8a there is nothing to compare.
    ok &= checked > 0;
    let pass = ok && elapsed <= Duration::from_secs(600);
    verdict(9, pass, elapsed, &format!("compared={checked} {}", details.join(" ")));
    assert!(pass);
}

// ------------------------------------------------------------------ 10

fn collect(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect(root, &p, out);
        } else {
            let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            out.insert(rel, std::fs::read(&p).unwrap());
        }
    }
}

#[test]
fn criterion_10_determinism_and_persistence() {
    let a = reference_run();
    let start = Instant::now();
    let b = run_once("run_b");
    let mut details = Vec::new();

    let (mut fa, mut fb) = (BTreeMap::new(), BTreeMap::new());
    collect(&a.dir, &a.dir, &mut fa);
    collect(&b.dir, &b.dir, &mut fb);
    let reports: Vec<&String> = fa
        .keys()
        .filter(|k| (k.ends_with(".csv") || k.ends_with(".json")) && k.as_str() != "manifest.json" && k.as_str() != "config.json")
        .collect();
    let reports_equal = !reports.is_empty() && reports.iter().all(|k| fb.get(*k) == fa.get(*k));
    let same_files = fa.keys().eq(fb.keys());
    let artifacts_equal = a.out.manifest.artifacts.iter().filter(|(k, _)| k.as_str() != "config.json").eq(b
        .out
        .manifest
        .artifacts
        .iter()
        .filter(|(k, _)| k.as_str() != "config.json"));
    let hashes_equal = a.out.manifest.config_hash == b.out.manifest.config_hash;
    details.push(format!(
        "files={} reports_identical={reports_equal} manifest_hashes_identical={artifacts_equal} config_hash={hashes_equal}",
        reports.len()
    ));

    // Checkpoints: reload and re-save byte-for-byte.
    let scratch_dir = scratch("roundtrip");
    std::fs::create_dir_all(&scratch_dir).unwrap();
    let mut ckpt_exact = true;
    for name in ["denoiser.mdl", "classifier.mdl"] {
        let path = a.dir.join("checkpoints").join(name);
        let ck = load_checkpoint(&path).unwrap();
        let copy = scratch_dir.join(name);
        save_checkpoint(&copy, &ck).unwrap();
        ckpt_exact &= std::fs::read(&copy).unwrap() == std::fs::read(&path).unwrap();
        ckpt_exact &= load_checkpoint(&copy).unwrap() == ck;
    }

    // Archives: reload, compare against a fresh generation, re-save.
    let (denoiser, schedule) = load_checkpoint(&a.dir.join("checkpoints/denoiser.mdl")).unwrap().into_denoiser().unwrap();
    let table = make_table(0).unwrap();
    let mut archive_exact = true;
    let mut archives = 0;
    for entry in std::fs::read_dir(a.dir.join("archives")).unwrap() {
        let dir = entry.unwrap().path();
        if dir.to_string_lossy().ends_with("_curve") {
            continue;
        }
        archives += 1;
        let traj = load_archive(&dir).unwrap();
        let fresh = build_trajectories(&[traj.provenance.plan.clone()], &denoiser, &schedule, &table).unwrap();
        archive_exact &= fresh[0] == traj;
        let copy = scratch_dir.join(dir.file_name().unwrap());
        save_archive(&traj, &copy).unwrap();
        for f in ["latents.bin", "manifest.json"] {
            archive_exact &= std::fs::read(copy.join(f)).unwrap() == std::fs::read(dir.join(f)).unwrap();
        }
        archive_exact &= load_archive(&copy).unwrap() == traj;
    }
    archive_exact &= archives > 0;

    // Degenerate plans: tau = 0 and e' = e reproduce the neutral generation bit for bit.
    let mut zero = SwapPlan::new(AttributeSpec::of(&[Attribute::Device]), 1000);
    zero.swap_set = vec![0, 25];
    let mut same = SwapPlan::new(AttributeSpec::neutral(), 1000);
    same.degenerate = true;
    let out = build_trajectories(&[zero, same], &denoiser, &schedule, &table).unwrap();
    let tau0 = out[0].point(0).map(|p| p.z0.bit_eq(&out[0].neutral.z0)).unwrap_or(false);
    let swap_same = out[1].points.iter().all(|p| p.z0.bit_eq(&out[1].neutral.z0) && p.trace_digest == out[1].neutral.trace_digest);
    details.push(format!(
        "checkpoint_roundtrip={ckpt_exact} archive_roundtrip={archive_exact}({archives}) tau0_neutral={tau0} e_prime_eq_e={swap_same}"
    ));
    let elapsed = start.elapsed();
    let pass = reports_equal
        && same_files
        && artifacts_equal
        && hashes_equal
        && ckpt_exact
        && archive_exact
        && tau0
        && swap_same
        && elapsed <= 2 * a.elapsed.max(Duration::from_secs(1));
    verdict(10, pass, elapsed, &details.join(" "));
    assert!(pass);
}
