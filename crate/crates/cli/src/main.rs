mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use objcomp::composition::ConnectionModel;
use objcomp::generator::{GeneratorConfig, TrueWorld};
use objcomp::mcmc::{sample_with_model, SamplerConfig};
use objcomp::rng::derive_seed;
use objcomp::scene::{load_scene, save_scene};
use objcomp::sim::{EpisodeConfig, Method};
use objcomp::stats::{evaluate_methods, EvalScene};
use objcomp::world::{TaskKind, TaskSpec};
use serde::Serialize;

use crate::config::{GenerateSpec, RunConfig};

#[derive(Parser)]
#[command(
    name = "objcomp",
    version,
    about = "Sample object compositions and run manipulation episodes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample compositions of one scene and report edge marginals.
    Sample(SampleArgs),
    /// Run and compare methods on scene files or generated scenes.
    Run(RunArgs),
    /// Write generated scenes with ground truth to a directory.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct SamplerFlags {
    /// Target effective sample size.
    #[arg(long)]
    ess_target: Option<usize>,
    /// Number of compositions kept.
    #[arg(long)]
    h_size: Option<usize>,
    /// Coupled chains for coupling from the past.
    #[arg(long)]
    n_start: Option<usize>,
    /// Cap on chain length.
    #[arg(long)]
    t_max: Option<usize>,
}

impl SamplerFlags {
    fn apply(&self, config: &mut SamplerConfig) {
        if let Some(v) = self.ess_target {
            config.n_ess_target = v;
        }
        if let Some(v) = self.h_size {
            config.h_size = v;
        }
        if let Some(v) = self.n_start {
            config.n_start = v;
        }
        if let Some(v) = self.t_max {
            config.t_max = v;
        }
    }
}

#[derive(Args)]
struct SampleArgs {
    /// Scene file.
    #[arg(long)]
    scene: PathBuf,
    /// Sampler seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    sampler: SamplerFlags,
    /// Write the report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene files with ground truth.
    #[arg(long, num_args = 1.., conflicts_with = "generate")]
    scene: Vec<PathBuf>,
    /// Number of object-search scenes to generate.
    #[arg(long)]
    generate: Option<usize>,
    /// Comma-separated methods: best_seg, max_util, pomdp, pomdp_halluc.
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
    /// Base seed for scene generation and episodes.
    #[arg(long)]
    seed: Option<u64>,
    /// Planner lookahead depth.
    #[arg(long)]
    horizon: Option<usize>,
    /// Particles per planner node.
    #[arg(long)]
    particles: Option<usize>,
    #[command(flatten)]
    sampler: SamplerFlags,
    /// Add the hallucinating planner to the compared methods.
    #[arg(long)]
    hallucinate: bool,
    /// table_clearing or object_search.
    #[arg(long, value_parser = parse_task)]
    task: Option<TaskKind>,
    /// Episodes per scene and method.
    #[arg(long)]
    trials: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Number of scenes.
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Base seed; scene k uses a seed derived from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON generator configuration; defaults to object-search scenes.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for the scene files.
    #[arg(long)]
    out: PathBuf,
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    match s {
        "table_clearing" => Ok(TaskKind::TableClearing),
        "object_search" => Ok(TaskKind::ObjectSearch),
        _ => Err(format!(
            "unknown task {s:?}; valid tasks: table_clearing, object_search"
        )),
    }
}

// Input and configuration problems exit with 2, everything else with 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<objcomp::Error>() {
        Some(
            objcomp::Error::Io { .. }
            | objcomp::Error::Parse(_)
            | objcomp::Error::InvalidScene { .. }
            | objcomp::Error::InvalidConfig(_)
            | objcomp::Error::InvalidArgument(_),
        ) => 2,
        _ if err.downcast_ref::<serde_json::Error>().is_some() => 2,
        _ => 1,
    }
}

// The error chain on one line, skipping causes already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !text.ends_with(&msg) {
            if !text.is_empty() {
                text.push_str(": ");
            }
            text.push_str(&msg);
        }
    }
    text
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Sample(args) => cmd_sample(args),
        Command::Run(args) => cmd_run(args),
        Command::Generate(args) => cmd_generate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", describe(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}

#[derive(Serialize)]
struct EdgeReport {
    edge: [u32; 2],
    prior: f64,
    marginal: f64,
}

#[derive(Serialize)]
struct CompositionCount {
    hypotheses: Vec<Vec<u32>>,
    count: usize,
}

#[derive(Serialize)]
struct SampleReport {
    samples: usize,
    cftp_collapsed: bool,
    cftp_horizon: u64,
    ess: f64,
    truncated: bool,
    chain_length: usize,
    edges: Vec<EdgeReport>,
    compositions: Vec<CompositionCount>,
}

fn cmd_sample(args: SampleArgs) -> anyhow::Result<()> {
    let mut config = SamplerConfig {
        seed: args.seed,
        ..SamplerConfig::default()
    };
    args.sampler.apply(&mut config);
    config.validate()?;
    let scene = load_scene(&args.scene)?;
    let model = ConnectionModel::new(&scene);
    let set = sample_with_model(&model, &config)?;
    let edges = scene
        .candidate_edges()
        .iter()
        .zip(set.edge_marginals())
        .map(|(e, marginal)| EdgeReport {
            edge: [e.a(), e.b()],
            prior: scene.prior(e.a(), e.b()),
            marginal,
        })
        .collect();
    let mut counts: BTreeMap<Vec<Vec<u32>>, usize> = BTreeMap::new();
    for c in set.compositions(&model) {
        *counts
            .entry(c.hypotheses.iter().map(|h| h.ids().to_vec()).collect())
            .or_default() += 1;
    }
    let mut compositions: Vec<CompositionCount> = counts
        .into_iter()
        .map(|(hypotheses, count)| CompositionCount { hypotheses, count })
        .collect();
    compositions.sort_by_key(|c| std::cmp::Reverse(c.count));
    let report = SampleReport {
        samples: set.samples.len(),
        cftp_collapsed: set.cftp_collapsed,
        cftp_horizon: set.cftp_horizon,
        ess: set.ess_achieved,
        truncated: set.truncated,
        chain_length: set.chain_length,
        edges,
        compositions,
    };
    let text = serde_json::to_string_pretty(&report)? + "\n";
    match args.out {
        Some(path) => fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn merged_config(args: &RunArgs) -> anyhow::Result<RunConfig> {
    let mut config = match &args.config {
        Some(path) => read_json(path)?,
        None => RunConfig::default(),
    };
    if !args.scene.is_empty() {
        config.scenes = args.scene.clone();
        config.generate = None;
    }
    if let Some(count) = args.generate {
        config.scenes.clear();
        let generator = config
            .generate
            .take()
            .map(|g| g.config)
            .unwrap_or_else(GeneratorConfig::object_search);
        config.generate = Some(GenerateSpec {
            count,
            config: generator,
        });
    }
    if !args.methods.is_empty() {
        config.methods = args
            .methods
            .iter()
            .map(|m| m.parse::<Method>())
            .collect::<objcomp::Result<_>>()?;
    }
    if args.hallucinate && !config.methods.contains(&Method::PomdpHalluc) {
        config.methods.push(Method::PomdpHalluc);
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(h) = args.horizon {
        config.planner.horizon = h;
    }
    if let Some(p) = args.particles {
        config.planner.particles_per_node = p;
    }
    args.sampler.apply(&mut config.sampler);
    if let Some(task) = args.task {
        config.task = task;
    }
    if let Some(trials) = args.trials {
        config.trials = trials;
    }
    if let Some(out) = &args.out {
        config.out = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn load_scenes(config: &RunConfig) -> anyhow::Result<Vec<EvalScene>> {
    if let Some(spec) = &config.generate {
        return (0..spec.count)
            .map(|k| {
                let world = TrueWorld::generate(&spec.config, derive_seed(config.seed, &[k as u64]))?;
                Ok(EvalScene {
                    id: format!("gen-{k:04}"),
                    world,
                })
            })
            .collect();
    }
    config
        .scenes
        .iter()
        .map(|path| {
            let scene = load_scene(path)?;
            let id = path
                .file_stem()
                .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
            Ok(EvalScene {
                id,
                world: TrueWorld::from_scene(&scene)?,
            })
        })
        .collect()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).map_err(|source| objcomp::Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let value = serde_json::from_str(&text).map_err(objcomp::Error::from);
    value.with_context(|| format!("reading {}", path.display()))
}

fn write_file(dir: &Path, name: &str, contents: &[u8]) -> anyhow::Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_run(args: RunArgs) -> anyhow::Result<()> {
    let config = merged_config(&args)?;
    let scenes = load_scenes(&config)?;
    let episode_config = EpisodeConfig {
        task: TaskSpec {
            discount: config.discount,
            ..TaskSpec::new(config.task)
        },
        sampler: config.sampler.clone(),
        planner: config.planner,
        max_steps: config.max_steps,
        action_budget: config
            .action_budget
            .unwrap_or(EpisodeConfig::new(config.task).action_budget),
        success_multiplier: config.success_multiplier,
        ..EpisodeConfig::new(config.task)
    };
    let (episodes, report) = evaluate_methods(&scenes, &config.methods, config.trials, &episode_config, config.seed)?;

    fs::create_dir_all(&config.out).with_context(|| format!("creating {}", config.out.display()))?;
    let mut jsonl = Vec::new();
    for e in &episodes {
        serde_json::to_writer(&mut jsonl, &e.record)?;
        jsonl.push(b'\n');
    }
    write_file(&config.out, "episodes.jsonl", &jsonl)?;
    write_file(
        &config.out,
        "report.json",
        (serde_json::to_string_pretty(&report)? + "\n").as_bytes(),
    )?;

    let mut timing = csv::Writer::from_writer(Vec::new());
    timing.write_record([
        "scene_id",
        "method",
        "seed",
        "pre_processing_s",
        "segmentation_s",
        "belief_generation_s",
        "planning_s",
        "total_s",
    ])?;
    let mut rewards = csv::Writer::from_writer(Vec::new());
    rewards.write_record(["scene_id", "method", "seed", "steps", "total_reward", "error"])?;
    for e in &episodes {
        let r = &e.record;
        let t = &e.timing;
        timing.write_record([
            r.scene_id.clone(),
            r.method.to_string(),
            r.seed.to_string(),
            format!("{:.6}", t.pre_processing.as_secs_f64()),
            format!("{:.6}", t.segmentation.as_secs_f64()),
            format!("{:.6}", t.belief_generation.as_secs_f64()),
            format!("{:.6}", t.planning.as_secs_f64()),
            format!("{:.6}", t.total().as_secs_f64()),
        ])?;
        rewards.write_record([
            r.scene_id.clone(),
            r.method.to_string(),
            r.seed.to_string(),
            r.steps.len().to_string(),
            r.total_reward.to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    write_file(&config.out, "timing.csv", &timing.into_inner()?)?;
    write_file(&config.out, "rewards.csv", &rewards.into_inner()?)?;

    let mut stdout = std::io::stdout().lock();
    writeln!(
        stdout,
        "{:<14} {:>8} {:>8} {:>18}",
        "method", "episodes", "mean", "95% ci"
    )?;
    for m in &report.methods {
        writeln!(
            stdout,
            "{:<14} {:>8} {:>8.3} {:>18}",
            m.method.to_string(),
            m.episodes,
            m.mean_reward,
            format!("[{:.3}, {:.3}]", m.ci_low, m.ci_high)
        )?;
    }
    for t in &report.pairwise {
        writeln!(stdout, "{} > {}: p = {:.4}", t.better, t.worse, t.p_value)?;
    }
    let completed = episodes.iter().filter(|e| e.record.error.is_none()).count();
    if completed == 0 {
        bail!(
            "no episode completed; see {}",
            config.out.join("episodes.jsonl").display()
        );
    }
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> anyhow::Result<()> {
    let config = match &args.config {
        Some(path) => read_json(path)?,
        None => GeneratorConfig::object_search(),
    };
    config.validate()?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    for k in 0..args.count {
        let scene = TrueWorld::generate(&config, derive_seed(args.seed, &[k as u64]))?.view(0)?;
        save_scene(&scene, args.out.join(format!("scene_{k:04}.json")))?;
    }
    println!("wrote {} scenes to {}", args.count, args.out.display());
    Ok(())
}
