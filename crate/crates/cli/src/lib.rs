//! Command-line front end: instance generation, training, solving,
//! evaluation, dynamic simulation, self-tests and SVG plots.

pub mod config;
pub mod selftest;
pub mod svg;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use cetsp::dynamic::{self, generate_scenario, simulate_all, DynamicScenario, Planner};
use cetsp::env::DiscretizedInstance;
use cetsp::error::{DiffError, PolicyError, TrainError};
use cetsp::geometry::Point;
use cetsp::heuristics::{cheapest_insertion, nearest_neighbor, InsertionMode};
use cetsp::instance::{self, generate_indexed, normalize, Distribution, GenConfig, Instance, RadiusConfig, RadiusKind};
use cetsp::par::{self, ExecMode};
use cetsp::policy::{EncoderKind, Policy, PolicyConfig};
use cetsp::training::{self, evaluate, Baseline, TrainConfig};

use config::{pick, FileConfig};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "cetsp", version, about = "Close-enough TSP toolkit")]
pub struct Cli {
    /// TOML file supplying defaults for any flag.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate instances or dynamic scenarios.
    Gen(GenArgs),
    /// Train a policy with REINFORCE.
    Train(TrainArgs),
    /// Solve one instance file.
    Solve(SolveArgs),
    /// Evaluate on a generated or loaded dataset.
    Eval(EvalArgs),
    /// Simulate dynamic scenarios with a replanning strategy.
    Dynamic(DynamicArgs),
    /// Run gradient and oracle checks.
    Selftest,
    /// Render an instance and a route as SVG.
    Plot(PlotArgs),
}

#[derive(Debug, Default, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub gamma: Option<usize>,
    #[arg(long)]
    pub knn: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// prenorm | postnorm
    #[arg(long)]
    pub encoder: Option<String>,
    /// Disable k-NN interaction in the location decoder.
    #[arg(long)]
    pub no_knn_interaction: bool,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub n: Option<usize>,
    /// constant | random
    #[arg(long)]
    pub radius: Option<String>,
    /// uniform | clustered | mixed
    #[arg(long)]
    pub dist: Option<String>,
    #[arg(long)]
    pub count: Option<usize>,
    /// Number of dynamic targets; writes a scenario file when > 0.
    #[arg(long)]
    pub m: Option<usize>,
    /// Output file, or directory when `--count` > 1.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Instances per epoch.
    #[arg(long)]
    pub instances: Option<usize>,
    /// Comma-separated training sizes.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    /// Comma-separated radius types.
    #[arg(long, value_delimiter = ',')]
    pub radius_types: Option<Vec<String>>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Output directory for the checkpoint and metrics log.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    /// Instance file.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Policy checkpoint; without it only baselines run.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub aug: bool,
    #[arg(long)]
    pub gamma: Option<usize>,
    /// Comma-separated baselines (nn, ci).
    #[arg(long, value_delimiter = ',')]
    pub baselines: Option<Vec<String>>,
    /// Write the best route as SVG.
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Directory of instance files; otherwise instances are generated.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub radius: Option<String>,
    #[arg(long)]
    pub dist: Option<String>,
    #[arg(long)]
    pub aug: bool,
    #[arg(long)]
    pub gamma: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub baselines: Option<Vec<String>>,
    /// Disable k-NN interaction on the loaded model (ablation).
    #[arg(long)]
    pub no_knn_interaction: bool,
    /// Write machine-readable rows.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DynamicArgs {
    /// policy | ci | mri | mgi
    #[arg(long)]
    pub planner: Option<String>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Scenario file; otherwise scenarios are generated.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub aug: bool,
    #[arg(long)]
    pub gamma: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// none | nn | ci | policy
    #[arg(long)]
    pub solver: Option<String>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub aug: bool,
    #[arg(long)]
    pub gamma: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Failure that maps to the numeric exit status.
#[derive(Debug)]
pub struct NumericFailure(pub String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

fn is_numeric(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<NumericFailure>()
            || matches!(e.downcast_ref::<TrainError>(), Some(TrainError::NonFiniteLoss { .. }))
            || matches!(e.downcast_ref::<DiffError>(), Some(DiffError::NonFinite(_)))
            || matches!(e.downcast_ref::<PolicyError>(), Some(PolicyError::Diff(DiffError::NonFinite(_))))
    })
}

fn check_finite(what: &str, v: f64) -> anyhow::Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(NumericFailure(format!("{what} is not finite")).into())
    }
}

fn parse_enum<T: std::str::FromStr>(what: &str, s: &str) -> anyhow::Result<T>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(|e| anyhow::anyhow!("invalid {what}: {e}"))
}

fn parse_baselines(names: &[String]) -> anyhow::Result<Vec<Baseline>> {
    names
        .iter()
        .map(|n| match n.to_ascii_lowercase().as_str() {
            "nn" => Ok(Baseline::NearestNeighbor),
            "ci" => Ok(Baseline::CheapestInsertion),
            other => bail!("unknown baseline {other:?} (expected nn|ci)"),
        })
        .collect()
}

fn workers_from_env() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("CETSP_WORKERS") {
        let n: usize = v.trim().parse().with_context(|| format!("CETSP_WORKERS={v:?} is not a positive integer"))?;
        if n == 0 {
            bail!("CETSP_WORKERS must be at least 1");
        }
        par::init_workers(n);
    }
    Ok(())
}

fn policy_config(m: &ModelArgs, file: &FileConfig) -> anyhow::Result<PolicyConfig> {
    let d = PolicyConfig::default();
    let encoder = pick(m.encoder.clone(), file.encoder.clone(), d.encoder.name().to_string());
    let knn_interaction = if m.no_knn_interaction { false } else { file.knn_interaction.unwrap_or(true) };
    let cfg = PolicyConfig {
        layers: pick(m.layers, file.layers, d.layers),
        heads: pick(m.heads, file.heads, d.heads),
        dim: pick(m.dim, file.dim, d.dim),
        gamma: pick(m.gamma, file.gamma, d.gamma),
        k_nn: pick(m.knn, file.knn, d.k_nn),
        encoder: parse_enum::<EncoderKind>("encoder", &encoder)?,
        knn_interaction,
        ..d
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(path: Option<PathBuf>) -> anyhow::Result<Option<Policy>> {
    path.map(|p| Policy::load(&p).with_context(|| format!("loading model {}", p.display()))).transpose()
}

fn read_instance(path: &Path) -> anyhow::Result<Instance> {
    instance::load(path).with_context(|| format!("reading instance {}", path.display()))
}

fn read_dir_instances(dir: &Path) -> anyhow::Result<Vec<Instance>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    paths.iter().map(|p| read_instance(p)).collect()
}

fn gen_config(n: usize, radius: &str, dist: &str, seed: u64) -> anyhow::Result<GenConfig> {
    let cfg = GenConfig {
        sizes: vec![n],
        distribution: parse_enum::<Distribution>("distribution", dist)?,
        radius: RadiusConfig::new(parse_enum::<RadiusKind>("radius type", radius)?),
        seed,
    };
    cfg.validate().map_err(anyhow::Error::msg)?;
    Ok(cfg)
}

fn cmd_gen(a: GenArgs, file: &FileConfig, seed: u64, out: &mut dyn Write) -> anyhow::Result<()> {
    let n = pick(a.n, file.n, 20);
    let m = pick(a.m, file.m, 0);
    let count = pick(a.count, file.count, 1);
    let radius = pick(a.radius, file.radius.clone(), "random".into());
    let dist = pick(a.dist, file.dist.clone(), "uniform".into());
    let path = pick(a.out, file.out.clone(), PathBuf::from("instance.txt"));
    if count == 0 {
        bail!("--count must be at least 1");
    }
    let gen = gen_config(n, &radius, &dist, seed)?;
    let targets: Vec<PathBuf> = if count == 1 {
        vec![path]
    } else {
        std::fs::create_dir_all(&path)?;
        (0..count).map(|i| path.join(format!("instance_{i:04}.txt"))).collect()
    };
    for (i, p) in targets.iter().enumerate() {
        if m > 0 {
            if gen.distribution != Distribution::Uniform || radius != "random" {
                bail!("dynamic scenarios use uniform centers and random radii");
            }
            dynamic::save(p, &generate_scenario(n, m, seed, i as u64))?;
        } else {
            instance::save(p, &generate_indexed(&gen, n, i as u64).with_id(format!("gen-{seed}-{i}")))?;
        }
        writeln!(out, "wrote {}", p.display())?;
    }
    Ok(())
}

fn cmd_train(a: TrainArgs, file: &FileConfig, seed: u64, out: &mut dyn Write) -> anyhow::Result<()> {
    let pcfg = policy_config(&a.model, file)?;
    let d = TrainConfig::default();
    let kinds = pick(a.radius_types, file.radius_types.clone(), vec!["constant".into(), "random".into()]);
    let dir = pick(a.out, file.out.clone(), PathBuf::from("model"));
    let cfg = TrainConfig {
        epochs: pick(a.epochs, file.epochs, d.epochs),
        instances_per_epoch: pick(a.instances, file.instances, d.instances_per_epoch),
        batch_size: pick(a.batch, file.batch, d.batch_size),
        sizes: pick(a.sizes, file.sizes.clone(), d.sizes.clone()),
        radius_kinds: kinds.iter().map(|k| parse_enum::<RadiusKind>("radius type", k)).collect::<Result<_, _>>()?,
        lr: pick(a.lr, file.lr, d.lr),
        weight_decay: pick(a.weight_decay, file.weight_decay, d.weight_decay),
        eval_every: pick(a.eval_every, file.eval_every, d.eval_every),
        seed,
        checkpoint_dir: Some(dir.clone()),
        metrics_path: Some(dir.join("metrics.log")),
        ..d
    };
    cfg.validate()?;
    writeln!(out, "model: {pcfg}")?;
    writeln!(out, "workers: {}", par::workers())?;
    let mut policy = Policy::new(pcfg, seed)?;
    let mut lines = Vec::new();
    let report = training::train(&cfg, &mut policy, &mut |s| {
        let val = s.validation.map_or("-".to_string(), |v| format!("{v:.4}"));
        let line = format!("epoch {:>3}  reward {:.4}  loss {:.4e}  val {val}  {:.1}s", s.epoch, s.mean_reward, s.mean_loss, s.wall_ms as f64 / 1e3);
        eprintln!("{line}");
        lines.push(line);
    })?;
    for l in &lines {
        writeln!(out, "{l}")?;
    }
    writeln!(
        out,
        "multistart violations: {} of {} instances; skipped {}",
        report.multistart_violations, report.multistart_checked, report.skipped_instances
    )?;
    writeln!(out, "checkpoint: {}", dir.join("checkpoint.bin").display())?;
    Ok(())
}

fn cmd_solve(a: SolveArgs, file: &FileConfig, out: &mut dyn Write) -> anyhow::Result<()> {
    let input = pick(a.input, file.input.clone(), PathBuf::new());
    if input.as_os_str().is_empty() {
        bail!("--input is required");
    }
    let inst = read_instance(&input)?;
    let policy = load_model(a.model.or(file.model.clone()))?;
    let aug = a.aug || file.aug.unwrap_or(false);
    let gamma = pick(a.gamma, file.gamma, PolicyConfig::default().gamma);
    let default_bl = vec!["nn".to_string(), "ci".to_string()];
    let baselines = parse_baselines(&pick(a.baselines, file.baselines.clone(), default_bl))?;
    let report = evaluate(policy.as_ref(), std::slice::from_ref(&inst), gamma, aug, &baselines, ExecMode::Sequential)?;
    for r in &report.rows {
        check_finite(&r.method, r.objective)?;
    }
    write!(out, "{}", report.to_table())?;
    if let Some(path) = a.svg.or(file.svg.clone()) {
        let norm = normalize(&inst)?;
        let route = best_route(&norm.instance, policy.as_ref(), aug, gamma, &report)?;
        svg::render_svg(&norm.instance, Some(&route), &path)?;
        writeln!(out, "wrote {}", path.display())?;
    }
    Ok(())
}

/// Open waypoint list (depot first, no closing point) of the best row.
fn best_route(inst: &Instance, policy: Option<&Policy>, aug: bool, gamma: usize, report: &training::EvalReport) -> anyhow::Result<Vec<Point>> {
    let best = report.rows.iter().min_by(|a, b| a.objective.total_cmp(&b.objective)).context("no rows")?;
    let route = solve_with(inst, &best.method, policy, aug, gamma)?;
    Ok(route)
}

fn solve_with(inst: &Instance, method: &str, policy: Option<&Policy>, aug: bool, gamma: usize) -> anyhow::Result<Vec<Point>> {
    let gamma = policy.map_or(gamma, |p| p.config().gamma);
    let d = DiscretizedInstance::new(inst.clone(), gamma)?;
    let mut pts = match method.to_ascii_lowercase().as_str() {
        "nn" => nearest_neighbor(&d).waypoints(),
        "ci" => cheapest_insertion(&d, None).waypoints(),
        "policy" | "policy+aug" => policy.context("policy route requested without --model")?.solve(&d, aug)?.waypoints,
        other => bail!("unknown solver {other:?}"),
    };
    pts.pop();
    Ok(pts)
}

fn cmd_eval(a: EvalArgs, file: &FileConfig, seed: u64, out: &mut dyn Write) -> anyhow::Result<()> {
    let dataset = match a.input.or(file.input.clone()) {
        Some(dir) => read_dir_instances(&dir)?,
        None => {
            let n = pick(a.n, file.n, 20);
            let count = pick(a.count, file.count, 100);
            let radius = pick(a.radius, file.radius.clone(), "random".into());
            let dist = pick(a.dist, file.dist.clone(), "uniform".into());
            let gen = gen_config(n, &radius, &dist, seed)?;
            (0..count as u64).map(|i| generate_indexed(&gen, n, i)).collect()
        }
    };
    let mut policy = load_model(a.model.or(file.model.clone()))?;
    if let Some(p) = policy.as_mut() {
        if a.no_knn_interaction || file.knn_interaction == Some(false) {
            p.set_knn_interaction(false);
        }
    }
    let aug = a.aug || file.aug.unwrap_or(false);
    let gamma = pick(a.gamma, file.gamma, PolicyConfig::default().gamma);
    let default_bl = vec!["nn".to_string(), "ci".to_string()];
    let baselines = parse_baselines(&pick(a.baselines, file.baselines.clone(), default_bl))?;
    let report = evaluate(policy.as_ref(), &dataset, gamma, aug, &baselines, ExecMode::available())?;
    for r in &report.rows {
        check_finite(&r.method, r.objective)?;
    }
    writeln!(out, "instances: {}", dataset.len())?;
    write!(out, "{}", report.to_table())?;
    if let Some(path) = a.csv.or(file.csv.clone()) {
        std::fs::write(&path, report.to_csv())?;
        writeln!(out, "wrote {}", path.display())?;
    }
    Ok(())
}

fn cmd_dynamic(a: DynamicArgs, file: &FileConfig, seed: u64, out: &mut dyn Write) -> anyhow::Result<()> {
    let scenarios: Vec<DynamicScenario> = match a.input.or(file.input.clone()) {
        Some(p) => vec![dynamic::load(&p)?],
        None => {
            let n = pick(a.n, file.n, 20);
            let m = pick(a.m, file.m, 2);
            let count = pick(a.count, file.count, 100);
            (0..count as u64).map(|i| generate_scenario(n, m, seed, i)).collect()
        }
    };
    let planner_name = pick(a.planner, file.planner.clone(), "ci".into());
    let policy = load_model(a.model.or(file.model.clone()))?;
    let aug = a.aug || file.aug.unwrap_or(false);
    let planner = match planner_name.to_ascii_lowercase().as_str() {
        "policy" => Planner::Policy { policy: policy.as_ref().context("--planner policy needs --model")?, aug },
        other => Planner::Insertion(parse_enum::<InsertionMode>("planner", other)?),
    };
    let gamma = pick(a.gamma, file.gamma, PolicyConfig::default().gamma);
    let t0 = Instant::now();
    let traces = simulate_all(&scenarios, planner, gamma, ExecMode::available())?;
    let secs = t0.elapsed().as_secs_f64();
    let incomplete = traces.iter().zip(&scenarios).filter(|(t, s)| !t.covers_all(s)).count();
    let mean = traces.iter().map(|t| t.length).sum::<f64>() / traces.len().max(1) as f64;
    let replans = traces.iter().map(|t| t.events.len()).sum::<usize>();
    check_finite("mean length", mean)?;
    writeln!(out, "scenario: {}  x{}", scenarios.first().map_or("-".into(), |s| s.name()), scenarios.len())?;
    writeln!(out, "{:<10}  {:>10}  {:>8}  {:>10}", "Planner", "Obj.", "Replans", "Time")?;
    writeln!(out, "{:<10}  {:>10.4}  {:>8}  {:>9.2}s", planner.name(), mean, replans, secs)?;
    if incomplete > 0 {
        return Err(NumericFailure(format!("{incomplete} traces left targets uncovered")).into());
    }
    Ok(())
}

fn cmd_selftest(seed: u64, out: &mut dyn Write) -> anyhow::Result<()> {
    let checks = selftest::run_all(seed);
    for c in &checks {
        writeln!(out, "{}", c.line())?;
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(NumericFailure(format!("{failed} self-test check(s) failed")).into());
    }
    writeln!(out, "all {} checks passed", checks.len())?;
    Ok(())
}

fn cmd_plot(a: PlotArgs, file: &FileConfig, out: &mut dyn Write) -> anyhow::Result<()> {
    let input = pick(a.input, file.input.clone(), PathBuf::new());
    if input.as_os_str().is_empty() {
        bail!("--input is required");
    }
    let inst = normalize(&read_instance(&input)?)?.instance;
    let solver = pick(a.solver, file.solver.clone(), "none".into());
    let path = pick(a.out, file.out.clone(), PathBuf::from("plot.svg"));
    let policy = load_model(a.model.or(file.model.clone()))?;
    let aug = a.aug || file.aug.unwrap_or(false);
    let gamma = pick(a.gamma, file.gamma, PolicyConfig::default().gamma);
    let route = match solver.as_str() {
        "none" => None,
        s => Some(solve_with(&inst, s, policy.as_ref(), aug, gamma)?),
    };
    svg::render_svg(&inst, route.as_deref(), &path).with_context(|| format!("writing {}", path.display()))?;
    writeln!(out, "wrote {}", path.display())?;
    Ok(())
}

/// Runs a parsed command line, writing the report to `out`.
pub fn dispatch(cli: Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let seed = pick(cli.seed, file.seed, 0);
    writeln!(out, "seed: {seed}")?;
    match cli.command {
        Command::Gen(a) => cmd_gen(a, &file, seed, out),
        Command::Train(a) => cmd_train(a, &file, seed, out),
        Command::Solve(a) => cmd_solve(a, &file, out),
        Command::Eval(a) => cmd_eval(a, &file, seed, out),
        Command::Dynamic(a) => cmd_dynamic(a, &file, seed, out),
        Command::Selftest => cmd_selftest(seed, out),
        Command::Plot(a) => cmd_plot(a, &file, out),
    }
}

/// Parses `argv`, runs it and returns the process exit status.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                return EXIT_USAGE;
            }
            let _ = write!(out, "{}", e.render());
            return 0;
        }
    };
    if let Err(e) = workers_from_env() {
        let _ = writeln!(err, "error: {e:#}");
        return EXIT_USAGE;
    }
    match dispatch(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            if is_numeric(&e) {
                EXIT_NUMERIC
            } else {
                EXIT_USAGE
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_errors_are_classified() {
        let e: anyhow::Error = TrainError::NonFiniteLoss { epoch: 0, batch: 3 }.into();
        assert!(is_numeric(&e.context("training")));
        assert!(is_numeric(&check_finite("x", f64::NAN).unwrap_err()));
        assert!(!is_numeric(&anyhow::anyhow!("missing file")));
        assert_eq!(check_finite("x", 1.5).unwrap(), 1.5);
    }
}
