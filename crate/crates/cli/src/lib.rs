//! Command-line driver: dataset synthesis, training, traversal,
//! interpolation, evaluation and reporting, all file-based.

pub mod config;
pub mod pipeline;
pub mod report;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use difftraj::diffusion::generate;
use difftraj::interpolation::{interpolate_trajectory, save_curve_archive};
use difftraj::io::{read_json, write_atomic, write_json};
use difftraj::models::{digest_bytes, load_checkpoint, Checkpoint, ClassifierModel, DenoiserModel};
use difftraj::phantom::{encode_pgm, export_dataset};
use difftraj::prompt::{embed, format_prompt, make_table, parse_prompt};
use difftraj::trajectory::{build_trajectory, initial_noise, load_archive, save_archive, SwapPlan, Trajectory};
use difftraj::Attribute;

use config::{EvalConfig, RunConfig};
use pipeline::{Evaluation, TrajectorySet};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

const META_EMBEDDING_SEED: &str = "embedding_seed";

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or unreadable input path.
    Usage(String),
    /// Malformed inputs, failed validation or failed writes.
    Data(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<difftraj::Error> for CliError {
    fn from(e: difftraj::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn ctx<T>(what: impl std::fmt::Display, r: difftraj::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError::Data(format!("{what}: {e}")))
}

#[derive(Parser)]
#[command(name = "difftraj", version, about = "Embedding-swap trajectories for a toy conditional diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the reference configuration.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
        /// Output directory recorded in the config.
        #[arg(long, default_value = "run")]
        output_dir: PathBuf,
    },
    /// Synthesize the phantom dataset splits as PGM images plus index.json.
    Synth {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the conditional denoiser and write its checkpoint.
    TrainDenoiser {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the attribute classifier and write its checkpoint.
    TrainClassifier {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate one image from a prompt.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        seed: u64,
        /// Output PGM file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build one embedding-swap trajectory and write it as an archive.
    Traverse {
        #[arg(long)]
        config: PathBuf,
        /// Style prompt, e.g. "phantom with device".
        #[arg(long)]
        style: String,
        #[arg(long, default_value = "neutral phantom")]
        neutral: String,
        #[arg(long)]
        seed: u64,
        /// Comma-separated swap steps; defaults to the config's.
        #[arg(long, value_delimiter = ',')]
        swap_set: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a Bezier curve to a trajectory archive and write the samples.
    Interpolate {
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        n_ctrl: usize,
        #[arg(long, default_value_t = 50)]
        m: usize,
    },
    /// Score trajectory archives with a classifier.
    Evaluate {
        #[arg(long)]
        classifier: PathBuf,
        /// Trajectory archive directories; one per (seed, style attribute).
        #[arg(long, required = true, num_args = 1..)]
        archive: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 25)]
        cfrt_tau: usize,
        #[arg(long, default_value_t = 0.5)]
        flip_threshold: f64,
        #[arg(long, default_value_t = 7)]
        n_ctrl: usize,
        #[arg(long, default_value_t = 50)]
        m: usize,
    },
    /// Render tables and SVG figures from an evaluation.json.
    Report {
        #[arg(long)]
        evaluation: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline: synthesis, training, traversal, evaluation, reports.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

/// Entry point; `argv` excludes the program name.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = std::iter::once(OsString::from("difftraj")).chain(argv.into_iter().map(Into::into));
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    EXIT_OK
                }
                _ => {
                    eprint!("{e}");
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::InitConfig { out, output_dir } => {
            let cfg = RunConfig::reference(output_dir);
            ctx(out.display(), write_json(&out, &cfg))
        }
        Command::Synth { config } => synth(&RunConfig::load(&config)?),
        Command::TrainDenoiser { config } => {
            let cfg = RunConfig::load(&config)?;
            let data = ctx("dataset", pipeline::make_datasets(&cfg))?;
            let (model, report) = ctx("denoiser training", pipeline::train_denoiser_stage(&cfg, &data))?;
            let layout = Layout::new(&cfg.output_dir);
            save_denoiser(&cfg, &layout, model)?;
            ctx("denoiser report", write_json(&layout.reports.join("denoiser_train.json"), &report))
        }
        Command::TrainClassifier { config } => {
            let cfg = RunConfig::load(&config)?;
            let data = ctx("dataset", pipeline::make_datasets(&cfg))?;
            let (model, report) = ctx("classifier training", pipeline::train_classifier_stage(&cfg, &data))?;
            let layout = Layout::new(&cfg.output_dir);
            save_classifier(&layout, model)?;
            ctx("classifier report", write_json(&layout.reports.join("classifier.json"), &report))
        }
        Command::Generate { checkpoint, prompt, seed, out } => generate_cmd(&checkpoint, &prompt, seed, &out),
        Command::Traverse { config, style, neutral, seed, swap_set, out } => {
            let cfg = RunConfig::load(&config)?;
            let style = parse_prompt(&style).map_err(|e| CliError::Data(format!("--style: {e}")))?;
            let neutral = parse_prompt(&neutral).map_err(|e| CliError::Data(format!("--neutral: {e}")))?;
            let mut plan = SwapPlan::new(style, seed);
            plan.neutral_spec = neutral;
            plan.swap_set = swap_set.unwrap_or_else(|| cfg.evaluation.swap_set.clone());
            ctx("--swap-set", plan.validate(cfg.schedule.steps))?;
            let layout = Layout::new(&cfg.output_dir);
            let (model, schedule) = load_denoiser(&layout.denoiser)?;
            if schedule != cfg.schedule {
                return Err(CliError::Data(format!(
                    "{}: schedule differs from config key `schedule`",
                    layout.denoiser.display()
                )));
            }
            let table = ctx("embedding table", make_table(cfg.embedding_seed))?;
            let traj = ctx("trajectory", build_trajectory(&plan, &model, &schedule, &table))?;
            ctx(out.display(), save_archive(&traj, &out))
        }
        Command::Interpolate { archive, out, n_ctrl, m } => {
            let traj = ctx(archive.display(), load_archive(&archive))?;
            let samples = ctx("interpolation", interpolate_trajectory(&traj, n_ctrl, m))?;
            ctx(out.display(), save_curve_archive(&samples, &traj.provenance, &out))
        }
        Command::Evaluate { classifier, archive, out, cfrt_tau, flip_threshold, n_ctrl, m } => {
            let classifier = load_classifier(&classifier)?;
            let set = trajectory_set_from_archives(&archive)?;
            let ev = eval_params(&set, cfrt_tau, flip_threshold, n_ctrl, m)?;
            let (evaluation, _) = ctx("evaluation", pipeline::evaluate(&ev, &set, &classifier))?;
            ctx("evaluation.json", write_json(&out.join("evaluation.json"), &evaluation))?;
            report::emit_tables(&evaluation, &out).map(|_| ())
        }
        Command::Report { evaluation, out } => {
            if !evaluation.is_file() {
                return Err(CliError::Usage(format!("cannot read evaluation {}", evaluation.display())));
            }
            let ev: Evaluation = ctx(evaluation.display(), read_json(&evaluation))?;
            report::emit_report(&ev, &out).map(|_| ())
        }
        Command::Run { config } => run_pipeline(&RunConfig::load(&config)?).map(|_| ()),
    }
}

/// Output locations under a run directory.
pub struct Layout {
    pub root: PathBuf,
    pub data: PathBuf,
    pub denoiser: PathBuf,
    pub classifier: PathBuf,
    pub reports: PathBuf,
    pub figures: PathBuf,
    pub archives: PathBuf,
    pub manifest: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
            data: root.join("data"),
            denoiser: root.join("checkpoints").join("denoiser.mdl"),
            classifier: root.join("checkpoints").join("classifier.mdl"),
            reports: root.join("reports"),
            figures: root.join("figures"),
            archives: root.join("archives"),
            manifest: root.join("manifest.json"),
        }
    }
}

fn synth(cfg: &RunConfig) -> CliResult<()> {
    let data = ctx("dataset", pipeline::make_datasets(cfg))?;
    let layout = Layout::new(&cfg.output_dir);
    for (name, ds) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        let dir = layout.data.join(name);
        ctx(dir.display(), export_dataset(ds, &dir))?;
    }
    Ok(())
}

fn save_denoiser(cfg: &RunConfig, layout: &Layout, model: DenoiserModel) -> CliResult<String> {
    let mut ck = Checkpoint::denoiser(model, cfg.schedule);
    ck.meta.insert(META_EMBEDDING_SEED.into(), cfg.embedding_seed.to_string());
    ctx(layout.denoiser.display(), difftraj::models::save_checkpoint(&layout.denoiser, &ck))
}

fn save_classifier(layout: &Layout, model: ClassifierModel) -> CliResult<String> {
    ctx(
        layout.classifier.display(),
        difftraj::models::save_checkpoint(&layout.classifier, &Checkpoint::classifier(model)),
    )
}

fn read_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("cannot read checkpoint {}", path.display())));
    }
    ctx(path.display(), load_checkpoint(path))
}

fn load_denoiser(path: &Path) -> CliResult<(DenoiserModel, difftraj::diffusion::ScheduleParams)> {
    ctx(path.display(), read_checkpoint(path)?.into_denoiser())
}

fn load_classifier(path: &Path) -> CliResult<ClassifierModel> {
    ctx(path.display(), read_checkpoint(path)?.into_classifier())
}

fn generate_cmd(checkpoint: &Path, prompt: &str, seed: u64, out: &Path) -> CliResult<()> {
    let spec = parse_prompt(prompt).map_err(|e| CliError::Data(format!("--prompt: {e}")))?;
    let ck = read_checkpoint(checkpoint)?;
    let embedding_seed: u64 = ck
        .meta
        .get(META_EMBEDDING_SEED)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| CliError::Data(format!("{}: missing meta `{META_EMBEDDING_SEED}`", checkpoint.display())))?;
    let (model, params) = ctx(checkpoint.display(), ck.into_denoiser())?;
    let schedule = ctx("schedule", params.build())?;
    let table = ctx("embedding table", make_table(embedding_seed))?;
    let e = ctx("--prompt", embed(&spec, &table))?;
    let es = vec![e; schedule.steps()];
    let (x0, _) = ctx("generation", generate(&initial_noise(seed), &es, &model, &schedule))?;
    let pgm = ctx("image", encode_pgm(&x0))?;
    ctx(out.display(), write_atomic(out, &pgm))
}

fn trajectory_set_from_archives(dirs: &[PathBuf]) -> CliResult<TrajectorySet> {
    let mut by_seed: BTreeMap<u64, BTreeMap<Attribute, Trajectory>> = BTreeMap::new();
    for dir in dirs {
        if !dir.is_dir() {
            return Err(CliError::Usage(format!("cannot read archive {}", dir.display())));
        }
        let traj = ctx(dir.display(), load_archive(dir))?;
        let plan = traj.provenance.plan.clone();
        let attrs: Vec<Attribute> = plan.style_spec.iter().collect();
        let [a] = attrs[..] else {
            return Err(CliError::Data(format!(
                "{}: style `{}` must name exactly one attribute",
                dir.display(),
                format_prompt(&plan.style_spec)
            )));
        };
        if by_seed.entry(plan.noise_seed).or_default().insert(a, traj).is_some() {
            return Err(CliError::Data(format!(
                "{}: duplicate archive for seed {} and attribute {a}",
                dir.display(),
                plan.noise_seed
            )));
        }
    }
    let attrs: Vec<Attribute> = by_seed.values().flat_map(|m| m.keys().copied()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let mut by_attr: BTreeMap<Attribute, Vec<Trajectory>> = attrs.iter().map(|&a| (a, Vec::new())).collect();
    let mut seeds = Vec::new();
    for (seed, mut m) in by_seed {
        for &a in &attrs {
            let t = m
                .remove(&a)
                .ok_or_else(|| CliError::Data(format!("archives: seed {seed} has no trajectory for {a}")))?;
            by_attr.get_mut(&a).unwrap().push(t);
        }
        seeds.push(seed);
    }
    Ok(TrajectorySet { seeds, by_attr })
}

fn eval_params(set: &TrajectorySet, cfrt_tau: usize, flip_threshold: f64, n_ctrl: usize, m: usize) -> CliResult<EvalConfig> {
    let first = &set.by_attr.values().next().expect("at least one archive")[0];
    let swap_set = first.provenance.plan.swap_set.clone();
    for t in set.by_attr.values().flatten() {
        let p = &t.provenance;
        if p.plan.swap_set != swap_set || p.model_hash != first.provenance.model_hash {
            return Err(CliError::Data(format!(
                "archives: seed {} differs in swap_set or model_hash",
                p.plan.noise_seed
            )));
        }
    }
    if !swap_set.contains(&cfrt_tau) {
        return Err(CliError::Data(format!("--cfrt-tau: {cfrt_tau} not in archive swap_set {swap_set:?}")));
    }
    if !(0.0..=1.0).contains(&flip_threshold) {
        return Err(CliError::Data(format!("--flip-threshold: {flip_threshold} outside [0, 1]")));
    }
    if n_ctrl < 2 || n_ctrl > swap_set.len() + 1 || m < 2 {
        return Err(CliError::Data(format!("--n-ctrl {n_ctrl} / --m {m}: out of range")));
    }
    Ok(EvalConfig {
        trajectories: set.seeds.len(),
        noise_seed: set.seeds[0],
        swap_set,
        style_attributes: set.by_attr.keys().copied().collect(),
        cfrt_tau,
        flip_threshold,
        n_ctrl,
        m,
        archived_seeds: 0,
    })
}

/// Written last, at the run root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    /// SHA-256 of the canonical config JSON with `output_dir` cleared.
    pub config_hash: String,
    /// SHA-256 of each artifact, keyed by path relative to the run root.
    pub artifacts: BTreeMap<String, String>,
    pub timings_ms: BTreeMap<String, u64>,
}

pub fn config_hash(cfg: &RunConfig) -> String {
    let mut c = cfg.clone();
    c.output_dir = PathBuf::new();
    digest_bytes(&serde_json::to_vec(&c).expect("config serializes"))
}

fn hash_tree(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> CliResult<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            hash_tree(root, &p, out)?;
        } else {
            let bytes = std::fs::read(&p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            let rel = p.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
            out.insert(rel, digest_bytes(&bytes));
        }
    }
    Ok(())
}

/// Everything a full run produces, kept in memory until validation passes.
pub struct RunOutputs {
    pub evaluation: Evaluation,
    pub classifier: pipeline::ClassifierReport,
    pub denoiser: difftraj::models::TrainReport,
    pub manifest: RunManifest,
}

pub fn run_pipeline(cfg: &RunConfig) -> CliResult<RunOutputs> {
    let layout = Layout::new(&cfg.output_dir);
    let mut timings = BTreeMap::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut BTreeMap<String, u64>| {
        timings.insert(name.to_string(), clock.elapsed().as_millis() as u64);
        clock = Instant::now();
    };

    let data = ctx("dataset", pipeline::make_datasets(cfg))?;
    lap("synth", &mut timings);
    let (denoiser, denoiser_report) = ctx("denoiser training", pipeline::train_denoiser_stage(cfg, &data))?;
    lap("train_denoiser", &mut timings);
    let (classifier, classifier_report) = ctx("classifier training", pipeline::train_classifier_stage(cfg, &data))?;
    lap("train_classifier", &mut timings);
    let set = ctx("traversal", pipeline::build_trajectory_set(cfg, &denoiser))?;
    lap("traverse", &mut timings);
    let (evaluation, curves) = ctx("evaluation", pipeline::evaluate(&cfg.evaluation, &set, &classifier))?;
    lap("evaluate", &mut timings);

    std::fs::create_dir_all(&layout.root)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", layout.root.display())))?;
    save_denoiser(cfg, &layout, denoiser)?;
    save_classifier(&layout, classifier)?;
    ctx("config", write_json(&layout.root.join("config.json"), cfg))?;
    ctx("denoiser report", write_json(&layout.reports.join("denoiser_train.json"), &denoiser_report))?;
    ctx("classifier report", write_json(&layout.reports.join("classifier.json"), &classifier_report))?;
    ctx("evaluation.json", write_json(&layout.reports.join("evaluation.json"), &evaluation))?;
    report::emit_tables(&evaluation, &layout.reports)?;
    report::emit_report(&evaluation, &layout.figures)?;
    let archived = cfg.evaluation.archived_seeds.min(set.seeds.len());
    for (a, trajs) in &set.by_attr {
        for (i, t) in trajs.iter().take(archived).enumerate() {
            let dir = layout.archives.join(format!("{a}_seed{}", set.seeds[i]));
            ctx(dir.display(), save_archive(t, &dir))?;
            let cdir = layout.archives.join(format!("{a}_seed{}_curve", set.seeds[i]));
            ctx(cdir.display(), save_curve_archive(&curves[a][i], &t.provenance, &cdir))?;
        }
    }
    lap("write", &mut timings);

    let mut artifacts = BTreeMap::new();
    hash_tree(&layout.root, &layout.root, &mut artifacts)?;
    artifacts.remove("manifest.json");
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config_hash(cfg),
        artifacts,
        timings_ms: timings,
    };
    ctx(layout.manifest.display(), write_json(&layout.manifest, &manifest))?;
    Ok(RunOutputs {
        evaluation,
        classifier: classifier_report,
        denoiser: denoiser_report,
        manifest,
    })
}
