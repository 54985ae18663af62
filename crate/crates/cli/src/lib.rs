//! The `geoaware` command line: data generation, training, evaluation,
//! comparison, layer ablation, gradient checks and report rendering.

pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use geoaware::backbones::LayerSelection;
use geoaware::bench::{
    ablate_layers, evaluate_policy, write_report, EvalSettings, Report, ReportFormat,
};
use geoaware::deskworld::{generate_dataset, make_tasks, read_dataset, write_dataset, ViewCategory};
use geoaware::gradsuite::{run_gradient_suite, SUITE_TOLERANCE};
use geoaware::numerics::Fault;
use geoaware::policy::{BackboneKind, HeadKind, PolicySpec};
use geoaware::training::{bc_train_with, load_checkpoint, save_checkpoint, Checkpoint, Phase};
use geoaware::Error;

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_CHECKPOINT: i32 = 3;
pub const EXIT_SCHEMA: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Numeric(_) => EXIT_NUMERIC,
            Error::Format(_) => EXIT_CHECKPOINT,
            Error::Schema(_) => EXIT_SCHEMA,
            _ => EXIT_USAGE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn checkpoint_error(path: &Path, e: Error) -> CliError {
    CliError {
        code: EXIT_CHECKPOINT,
        message: format!("cannot use checkpoint {}: {e}", path.display()),
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "geoaware", version, about = "View-robust imitation policies on the DeskWorld tabletop benchmark")]
#[command(after_help = "Settings resolve as flags > --config file > defaults; GEOAWARE_SEED replaces the default seed.")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Record scripted-expert demonstrations as JSON lines.
    GenData(GenDataArgs),
    /// Behavior-clone a policy on a dataset and write a checkpoint.
    Train(TrainArgs),
    /// Roll a checkpoint out on one viewpoint category and write a report.
    Eval(EvalArgs),
    /// Train and evaluate one policy per layer-selection mode.
    Ablate(AblateArgs),
    /// Finite-difference check of every gradient at 64-bit.
    Gradcheck(GradcheckArgs),
    /// Render a report JSON as markdown or CSV.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Run configuration JSON [default: none]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset file to write [required]
    #[arg(long)]
    pub out: PathBuf,
    /// Demonstrations per task
    #[arg(long)]
    pub episodes_per_task: Option<usize>,
    /// Global seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Run configuration JSON [default: none]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset file from gen-data [required]
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint file to write [required]
    #[arg(long)]
    pub out: PathBuf,
    /// Action head: mlp or vqbet
    #[arg(long)]
    pub head: Option<HeadKind>,
    /// Vision backbone: geo or pixel
    #[arg(long)]
    pub backbone: Option<BackboneKind>,
    /// Optimizer steps
    #[arg(long)]
    pub steps: Option<usize>,
    /// Global seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint to evaluate [required]
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Viewpoint category: seen, novel-small, novel-medium or novel-large
    #[arg(long)]
    pub views: Option<ViewCategory>,
    /// Rollouts per task
    #[arg(long)]
    pub rollouts: Option<usize>,
    /// Evaluation seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report JSON to write [default: none, print only]
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Run configuration JSON [default: none]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset file from gen-data [required]
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated layer selections
    #[arg(long, value_delimiter = ',')]
    pub modes: Option<Vec<LayerSelection>>,
    /// Directory for checkpoints and reports [required]
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Corrupt one backward rule to demonstrate detection
    #[arg(long, hide = true, value_parser = ["conv1d"])]
    pub inject_fault: Option<String>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Report JSON to render [required]
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output format: md or csv
    #[arg(long)]
    pub format: Option<ReportFormat>,
    /// Output file [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Clap command with the config-backed defaults spliced into the help.
pub fn command() -> clap::Command {
    let d = RunConfig::default();
    let seed = match config::env_seed() {
        Ok(s) if std::env::var_os(config::SEED_ENV).is_some() => format!("{s} from {}", config::SEED_ENV),
        _ => format!("{}, or {}", d.seed, config::SEED_ENV),
    };
    let modes = ABLATE_DEFAULT.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
    let defaults: Vec<(&str, &str, String)> = vec![
        ("gen-data", "episodes_per_task", d.data.episodes_per_task.to_string()),
        ("gen-data", "seed", seed.clone()),
        ("train", "head", d.policy.head.to_string()),
        ("train", "backbone", d.policy.backbone.to_string()),
        ("train", "steps", d.train.steps.to_string()),
        ("train", "seed", seed.clone()),
        ("eval", "views", d.eval.views.as_str().replace('_', "-")),
        ("eval", "rollouts", d.eval.rollouts_per_task.to_string()),
        ("eval", "seed", seed),
        ("ablate", "modes", modes),
        ("report", "format", "md".into()),
    ];
    let mut cmd = Cli::command();
    for (sub, arg, value) in defaults {
        cmd = cmd.mut_subcommand(sub, |s| {
            s.mut_arg(arg, |a| {
                let help = a.get_help().map(ToString::to_string).unwrap_or_default();
                a.help(format!("{help} [default: {value}]"))
            })
        });
    }
    cmd
}

const ABLATE_DEFAULT: [LayerSelection; 3] = geoaware::bench::ABLATION_MODES;

/// Parses `args` and runs the subcommand, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return EXIT_USAGE;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

fn dispatch(cmd: Command) -> CliResult {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Report(a) => report(a),
    }
}

fn resolve(path: Option<&Path>, seed: Option<u64>) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn gen_data(a: GenDataArgs) -> CliResult {
    let mut cfg = resolve(a.config.as_deref(), a.seed)?;
    if let Some(n) = a.episodes_per_task {
        cfg.data.episodes_per_task = n;
    }
    cfg.validate()?;
    let tasks = make_tasks();
    let ds = generate_dataset(&tasks, cfg.data.episodes_per_task, cfg.seed)?;
    write_dataset(&ds, &a.out)?;
    println!("wrote {} episodes ({} steps) to {}", ds.episodes.len(), ds.num_steps(), a.out.display());
    for task in &tasks {
        let n = ds.episodes.iter().filter(|e| e.task_id == task.id).count();
        println!("task {} \"{}\": expert succeeded {n}/{n}", task.id, task.instruction);
    }
    Ok(())
}

fn train(a: TrainArgs) -> CliResult {
    let mut cfg = resolve(a.config.as_deref(), a.seed)?;
    if let Some(h) = a.head {
        cfg.policy.head = h;
    }
    if let Some(b) = a.backbone {
        cfg.policy.backbone = b;
    }
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    cfg.validate()?;
    let ds = read_dataset(&a.data).map_err(|e| CliError {
        code: EXIT_USAGE,
        message: format!("cannot read dataset {}: {e}", a.data.display()),
    })?;
    let spec = PolicySpec::for_tasks(cfg.policy.clone(), cfg.geo.clone(), ds.tasks());
    let out = bc_train_with(&ds, spec, &cfg.train, &mut |p| {
        let phase = match p.phase {
            Phase::Codebook => "codebook",
            Phase::Policy => "policy",
        };
        eprintln!("{phase} step {}/{}: loss {:.5}", p.step, p.total, p.recent_loss);
    })?;
    save_checkpoint(&out.policy, &cfg.train, cfg.train.steps as u64, &a.out)?;
    let last = out.losses.last().copied().unwrap_or(f64::NAN);
    println!("final loss {last:.6}");
    println!("wrote checkpoint {}", a.out.display());
    Ok(())
}

fn load(path: &Path) -> CliResult<Checkpoint> {
    let ck = load_checkpoint(path).map_err(|e| checkpoint_error(path, e))?;
    let views = geoaware::deskworld::seen_cameras().len();
    if ck.policy.config().views != views {
        return Err(checkpoint_error(
            path,
            Error::Config(format!("trained for {} views, the benchmark has {views}", ck.policy.config().views)),
        ));
    }
    Ok(ck)
}

fn emit(report: &Report, path: Option<&Path>) -> CliResult {
    if let Some(p) = path {
        write_report(report, ReportFormat::Json, p)?;
        println!("wrote report {}", p.display());
    }
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    let cfg = resolve(None, a.seed)?;
    let ck = load(&a.ckpt)?;
    let category = a.views.unwrap_or(cfg.eval.views);
    let rollouts = a.rollouts.unwrap_or(cfg.eval.rollouts_per_task);
    let settings = EvalSettings::new(category, rollouts, vec![cfg.seed]);
    let r = evaluate_policy(&ck.policy, &make_tasks(), &settings)?;
    for t in &r.tasks {
        println!("task {}: {}/{} ({:.1}%)", t.id, t.successes, t.rollouts, t.rate);
    }
    println!("{} on {}: average success {:.1}%", r.model, r.category, r.average_rate);
    emit(&Report::Eval(r), a.report.as_deref())
}

fn ablate(a: AblateArgs) -> CliResult {
    let cfg = resolve(a.config.as_deref(), None)?;
    cfg.validate()?;
    if cfg.policy.backbone != BackboneKind::Geo {
        return Err(CliError {
            code: EXIT_USAGE,
            message: "layer ablation needs policy.backbone = geo".into(),
        });
    }
    let modes = a.modes.unwrap_or_else(|| ABLATE_DEFAULT.to_vec());
    let ds = read_dataset(&a.data).map_err(|e| CliError {
        code: EXIT_USAGE,
        message: format!("cannot read dataset {}: {e}", a.data.display()),
    })?;
    std::fs::create_dir_all(&a.out_dir).map_err(Error::from)?;
    let spec = PolicySpec::for_tasks(cfg.policy.clone(), cfg.geo.clone(), ds.tasks());
    let r = ablate_layers(
        &ds,
        &spec,
        &cfg.train,
        &modes,
        cfg.eval.ablation_novel_views,
        cfg.eval.rollouts_per_task,
        &[cfg.seed],
        |mode, out| {
            let path = a.out_dir.join(format!("policy-{mode}.gavp"));
            eprintln!("trained {mode}: final loss {:.5}", out.losses.last().copied().unwrap_or(f64::NAN));
            save_checkpoint(&out.policy, &cfg.train, cfg.train.steps as u64, &path)
        },
    )?;
    let report = Report::Ablation(r);
    write_report(&report, ReportFormat::Json, &a.out_dir.join("ablation.json"))?;
    write_report(&report, ReportFormat::Markdown, &a.out_dir.join("ablation.md"))?;
    print!("{}", report.to_markdown());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CliResult {
    let fault = a.inject_fault.map(|_| Fault::Conv1dBackward);
    let start = std::time::Instant::now();
    let entries = run_gradient_suite(fault)?;
    let width = entries.iter().map(|e| e.component.len()).max().unwrap_or(0);
    for e in &entries {
        let verdict = if e.passed() { "ok" } else { "FAIL" };
        println!("{:<width$}  {:.3e}  {verdict}", e.component, e.max_rel_err);
    }
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passed()).map(|e| e.component.as_str()).collect();
    let secs = start.elapsed().as_secs_f64();
    if failed.is_empty() {
        println!("PASS: {} components within {SUITE_TOLERANCE:e} in {secs:.1} s", entries.len());
        Ok(())
    } else {
        println!("FAIL: {}", failed.join(", "));
        Err(CliError {
            code: EXIT_NUMERIC,
            message: format!("gradient check failed for {}", failed.join(", ")),
        })
    }
}

fn report(a: ReportArgs) -> CliResult {
    let text = std::fs::read_to_string(&a.input).map_err(|e| CliError {
        code: EXIT_USAGE,
        message: format!("cannot read {}: {e}", a.input.display()),
    })?;
    let r = Report::from_json(&text)?;
    let format = a.format.unwrap_or(ReportFormat::Markdown);
    if format == ReportFormat::Json {
        return Err(CliError {
            code: EXIT_USAGE,
            message: "report renders to md or csv".into(),
        });
    }
    match a.out {
        Some(p) => write_report(&r, format, &p)?,
        None => print!("{}", r.render(format)?),
    }
    Ok(())
}
