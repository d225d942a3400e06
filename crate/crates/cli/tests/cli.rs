use std::path::{Path, PathBuf};

use difftraj::io::{read_json, write_json};
use difftraj::models::{ClassifierConfig, DenoiserConfig};
use difftraj::trajectory::load_archive;
use difftraj_cli::config::RunConfig;
use difftraj_cli::pipeline::Evaluation;
use difftraj_cli::report::{cosine_heatmap_svg, emit_report};
use difftraj_cli::{run, run_pipeline, RunManifest, EXIT_DATA, EXIT_OK, EXIT_USAGE};

fn tiny(dir: &Path) -> RunConfig {
    let mut c = RunConfig::reference(dir);
    c.dataset.train = 96;
    c.dataset.val = 32;
    c.dataset.test = 32;
    c.denoiser.model = DenoiserConfig {
        hidden: [48, 48],
        ..DenoiserConfig::default()
    };
    c.denoiser.train.steps = 20;
    c.denoiser.train.batch_size = 8;
    c.classifier.model = ClassifierConfig {
        pixels: 1024,
        hidden: [24, 12],
    };
    c.classifier.train.steps = 20;
    c.classifier.train.batch_size = 16;
    c.evaluation.trajectories = 3;
    c.evaluation.archived_seeds = 1;
    c
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let p = dir.join("config.in.json");
    write_json(&p, cfg).unwrap();
    p
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn help_exits_zero() {
    assert_eq!(run(["--help"]), EXIT_OK);
    assert_eq!(run(["traverse", "--help"]), EXIT_OK);
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.json");
    assert_eq!(
        run(["traverse", "--config", &s(&missing), "--style", "phantom with device", "--seed", "1", "--out", "x"]),
        EXIT_USAGE
    );
    assert_eq!(run(["run", "--config", &s(&missing)]), EXIT_USAGE);
    assert_eq!(run(["no-such-command"]), EXIT_USAGE);
    assert_eq!(run(["run"]), EXIT_USAGE);
}

#[test]
fn bad_config_exits_two_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = tiny(&out);
    let mut v = serde_json::to_value(&cfg).unwrap();
    v["surprise"] = serde_json::json!(1);
    let p = tmp.path().join("c.json");
    std::fs::write(&p, serde_json::to_vec(&v).unwrap()).unwrap();
    assert_eq!(run(["run", "--config", &s(&p)]), EXIT_DATA);

    let mut bad = cfg.clone();
    bad.evaluation.cfrt_tau = 26;
    let p = write_config(tmp.path(), &bad);
    assert_eq!(run(["synth", "--config", &s(&p)]), EXIT_DATA);
    assert!(!out.exists());
}

#[test]
fn empty_report_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("figs");
    let cfg = tiny(&tmp.path().join("run"));
    let outputs = run_pipeline(&cfg).unwrap();
    let mut ev: Evaluation = outputs.evaluation;
    ev.attributes.clear();
    assert!(emit_report(&ev, &out).is_err());
    assert!(!out.exists());
    let evp = tmp.path().join("empty.json");
    write_json(&evp, &ev).unwrap();
    assert_eq!(run(["report", "--evaluation", &s(&evp), "--out", &s(&out)]), EXIT_DATA);
    assert!(!out.exists());
}

#[test]
fn full_cli_flow() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("run");
    let cfg = tiny(&root);
    let cp = write_config(tmp.path(), &cfg);
    let c = s(&cp);

    assert_eq!(run(["synth", "--config", &c]), EXIT_OK);
    let index: serde_json::Value = read_json(&root.join("data/train/index.json")).unwrap();
    assert_eq!(index["count"], 96);
    assert!(root.join("data/test/000031.pgm").is_file());

    assert_eq!(run(["run", "--config", &c]), EXIT_OK);
    let manifest: RunManifest = read_json(&root.join("manifest.json")).unwrap();
    assert!(manifest.artifacts.contains_key("checkpoints/denoiser.mdl"));
    assert!(manifest.artifacts.contains_key("reports/evaluation.json"));
    assert!(!manifest.artifacts.contains_key("manifest.json"));
    for stage in ["synth", "train_denoiser", "train_classifier", "traverse", "evaluate"] {
        assert!(manifest.timings_ms.contains_key(stage), "{stage}");
    }

    // Single image.
    let img = tmp.path().join("img.pgm");
    let ck = s(&root.join("checkpoints/denoiser.mdl"));
    assert_eq!(run(["generate", "--checkpoint", &ck, "--prompt", "phantom with grid", "--seed", "3", "--out", &s(&img)]), EXIT_OK);
    let bytes = std::fs::read(&img).unwrap();
    assert!(bytes.starts_with(b"P5\n32 32\n255\n"));
    assert_eq!(bytes.len(), 13 + 1024);
    assert_eq!(
        run(["generate", "--checkpoint", &ck, "--prompt", "phantom with wings", "--seed", "3", "--out", &s(&tmp.path().join("bad.pgm"))]),
        EXIT_DATA
    );
    assert!(!tmp.path().join("bad.pgm").exists());

    // Traverse the same plans the pipeline built and compare with its archives.
    let mut archives = Vec::new();
    for a in ["effusion", "device", "marker", "grid"] {
        for seed in [1000u64, 1001] {
            let out = tmp.path().join(format!("tr_{a}_{seed}"));
            let style = format!("phantom with {a}");
            assert_eq!(
                run(["traverse", "--config", &c, "--style", &style, "--seed", &seed.to_string(), "--out", &s(&out)]),
                EXIT_OK
            );
            archives.push(out);
        }
        let ours = load_archive(&tmp.path().join(format!("tr_{a}_1000"))).unwrap();
        let theirs = load_archive(&root.join(format!("archives/{a}_seed1000"))).unwrap();
        assert_eq!(ours, theirs);
    }
    let bad = tmp.path().join("tr_bad");
    assert_eq!(
        run(["traverse", "--config", &c, "--style", "phantom with device", "--seed", "1", "--swap-set", "5,99", "--out", &s(&bad)]),
        EXIT_DATA
    );
    assert!(!bad.exists());

    // Interpolate one archive.
    let curve = tmp.path().join("curve");
    assert_eq!(run(["interpolate", "--archive", &s(&archives[0]), "--out", &s(&curve)]), EXIT_OK);
    let (samples, prov) = difftraj::interpolation::load_curve_archive(&curve).unwrap();
    assert_eq!(samples.len(), 50);
    assert_eq!(samples.control_indices.len(), 7);
    assert_eq!(prov.plan.noise_seed, 1000);
    assert_eq!(run(["interpolate", "--archive", &s(&curve), "--out", &s(&tmp.path().join("c2"))]), EXIT_DATA);

    // Evaluate the archives, then render.
    let evdir = tmp.path().join("eval");
    let mut args: Vec<String> = vec![
        "evaluate".into(),
        "--classifier".into(),
        s(&root.join("checkpoints/classifier.mdl")),
        "--out".into(),
        s(&evdir),
        "--archive".into(),
    ];
    args.extend(archives.iter().map(|p| s(p)));
    assert_eq!(run(args.clone()), EXIT_OK);
    let ev: Evaluation = read_json(&evdir.join("evaluation.json")).unwrap();
    assert_eq!(ev.seeds, vec![1000, 1001]);
    assert_eq!(ev.attributes.len(), 4);
    assert_eq!(ev.attributes[0].cfrt.samples, 2);

    // Missing one attribute for a seed is a data error.
    let mut partial = args[..args.len() - 1].to_vec();
    partial[4] = s(&tmp.path().join("eval_partial"));
    assert_eq!(run(partial), EXIT_DATA);
    assert!(!tmp.path().join("eval_partial").exists());

    let figs = tmp.path().join("figs");
    assert_eq!(run(["report", "--evaluation", &s(&evdir.join("evaluation.json")), "--out", &s(&figs)]), EXIT_OK);
    for f in ["cosine_device.svg", "distance_vs_tau.svg", "pca_scatter.svg", "cfrt.csv", "pca.csv"] {
        assert!(figs.join(f).is_file(), "{f}");
    }
    assert_eq!(
        run(["report", "--evaluation", &s(&tmp.path().join("none.json")), "--out", &s(&figs)]),
        EXIT_USAGE
    );
}

#[test]
fn report_contents_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(&tmp.path().join("run"));
    let ev = run_pipeline(&cfg).unwrap().evaluation;
    let figs = tmp.path().join("figs");
    emit_report(&ev, &figs).unwrap();

    for a in &ev.attributes {
        let svg = std::fs::read_to_string(figs.join(format!("cosine_{}.svg", a.attribute))).unwrap();
        assert_eq!(svg.matches("class=\"cell-value\"").count(), 81);
        assert_eq!(svg, cosine_heatmap_svg(&a.mean_cosine, &format!("mean direction cosine, {}", a.attribute)));

        let mut rdr = csv::Reader::from_path(figs.join(format!("cosine_{}.csv", a.attribute))).unwrap();
        let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 9);
        for (i, row) in rows.iter().enumerate() {
            for j in 0..9 {
                let cell = &row[j + 1];
                match a.mean_cosine.values[i][j] {
                    Some(v) => assert!((cell.parse::<f64>().unwrap() - v).abs() <= 1e-9),
                    None => assert_eq!(cell, "undefined"),
                }
            }
        }
    }

    let mut rdr = csv::Reader::from_path(figs.join("cfrt.csv")).unwrap();
    for (rec, a) in rdr.records().zip(&ev.attributes) {
        let rec = rec.unwrap();
        assert_eq!(&rec[0], a.attribute.name());
        assert!((rec[1].parse::<f64>().unwrap() - a.cfrt.score).abs() <= 1e-9);
        assert!((rec[2].parse::<f64>().unwrap() - a.cfrt_interpolated.score).abs() <= 1e-9);
        assert!((rec[4].parse::<f64>().unwrap() - a.mean_spearman).abs() <= 1e-9);
    }

    let mut rdr = csv::Reader::from_path(figs.join("perceptual.csv")).unwrap();
    let recs: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    let mut k = 0;
    for a in &ev.attributes {
        for r in &a.perceptual {
            for e in &r.entries {
                assert!((recs[k][4].parse::<f64>().unwrap() - e.distance).abs() <= 1e-9);
                assert!((recs[k][5].parse::<f64>().unwrap() - e.style_prob).abs() <= 1e-9);
                k += 1;
            }
        }
    }
    assert_eq!(k, recs.len());

    let mut rdr = csv::Reader::from_path(figs.join("pca.csv")).unwrap();
    for (rec, c) in rdr.records().zip(&ev.pca.projection.coords) {
        let rec = rec.unwrap();
        assert!((rec[2].parse::<f64>().unwrap() - c[0]).abs() <= 1e-9);
        assert!((rec[3].parse::<f64>().unwrap() - c[1]).abs() <= 1e-9);
    }

    let pca = std::fs::read_to_string(figs.join("pca_scatter.svg")).unwrap();
    assert_eq!(pca.matches("<polyline").count(), ev.attributes.len());
    assert_eq!(pca.matches("<circle").count(), ev.pca.projection.coords.len());
}
