use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use latent_geom::compare::{
    comparison_csv, compare_models, class_transition_count, interpolation_sequence, ranked,
    sample_test_pairs, ImageStrip,
};
use latent_geom::data::{filter_digits, load_split, Dataset, Split};
use latent_geom::fields::{scalar_grid, streamlines, Bounds, EigenKind, ScalarKind, StreamlineOptions};
use latent_geom::geodesic::{shorten, CurveOptConfig, GradientMode};
use latent_geom::metric::MetricProvider;
use latent_geom::network::{audit_jacobian, load_model, save_model, FeatureMap, LatentPoint, ModelFile};
use latent_geom::sampling::{bootstrap_mean_ci, run_monte_carlo, sample_rng, McConfig};
use latent_geom::spline::BSplineCurve;
use latent_geom::training::{accuracy, train_logreg, train_vae, TrainConfig, Vae};

const OUT_DIR_ENV: &str = "LATENT_GEOM_OUT";
const MNIST_DIR_ENV: &str = "MNIST_DIR";

#[derive(Parser, Clone, Debug)]
#[command(name = "latent-geom", version, about = "Latent-space geometry of generative models")]
struct Cli {
    /// Worker threads for parallel stages; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Output directory [default: $LATENT_GEOM_OUT or ./out].
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Debug, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
enum Command {
    /// Train a VAE with a stochastic decoder.
    TrainVae(TrainVaeArgs),
    /// Train a logistic-regression classifier on pixels.
    TrainLogreg(TrainLogregArgs),
    /// Shorten the straight line between two latent points.
    Shorten(ShortenArgs),
    /// Monte-Carlo estimate of relative improvements along steep directions.
    McImprove(McArgs),
    /// Scalar metric summaries on a grid of a 2-D latent space.
    Grid(GridArgs),
    /// Streamlines of the extreme eigenvector fields.
    Streamlines(StreamlineArgs),
    /// Compare two VAEs on the same test-image pairs.
    Compare(CompareArgs),
    /// Image strips along straight and shortened interpolations.
    Interp(InterpArgs),
    /// Check network Jacobians against finite differences.
    CheckJacobian(CheckArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Clone, Debug, Serialize)]
struct DataArgs {
    /// Directory with the MNIST IDX files [default: $MNIST_DIR or ./data/mnist].
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Digits to keep.
    #[arg(long, value_delimiter = ',', default_value = "2,4,5,7")]
    digits: Vec<u8>,
}

impl DataArgs {
    fn dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| {
            std::env::var_os(MNIST_DIR_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("data/mnist"))
        })
    }

    fn load(&self, split: Split) -> Result<Dataset> {
        let dir = self.dir();
        let ds = load_split(&dir, split)
            .with_context(|| format!("loading MNIST from {}", dir.display()))?;
        let digits: BTreeSet<u8> = self.digits.iter().copied().collect();
        Ok(filter_digits(&ds, &digits)?)
    }
}

#[derive(Args, Clone, Debug, Serialize)]
struct TrainVaeArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().sigma_epochs)]
    sigma_epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = TrainConfig::default().latent_dim)]
    latent_dim: usize,
    /// Encoder hidden widths; decoders mirror them.
    #[arg(long, value_delimiter = ',', default_value = "128,64")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = TrainConfig::default().sigma_floor)]
    sigma_floor: f64,
    /// Model file name inside the output directory.
    #[arg(long, default_value = "vae.json")]
    output: String,
}

#[derive(Args, Clone, Debug, Serialize)]
struct TrainLogregArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "logreg.json")]
    output: String,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum GradientArg {
    Auto,
    ExactVjp,
    Fd,
}

#[derive(Args, Clone, Debug, Serialize)]
struct OptArgs {
    /// Trapezoid intervals for curve lengths.
    #[arg(long, default_value_t = CurveOptConfig::default().quad_points)]
    quad_points: usize,
    /// Intervals of the energy discretization.
    #[arg(long, default_value_t = CurveOptConfig::default().energy_segments)]
    segments: usize,
    #[arg(long, default_value_t = CurveOptConfig::default().step_size)]
    step_size: f64,
    #[arg(long, default_value_t = CurveOptConfig::default().max_iters)]
    max_iters: usize,
    #[arg(long, default_value_t = CurveOptConfig::default().plateau_window)]
    plateau_window: usize,
    #[arg(long, default_value_t = CurveOptConfig::default().plateau_rel_tol)]
    plateau_tol: f64,
    #[arg(long, default_value_t = CurveOptConfig::default().max_control_points)]
    max_control_points: usize,
    #[arg(long, value_enum, default_value_t = GradientArg::Auto)]
    gradient: GradientArg,
}

impl OptArgs {
    fn config(&self) -> CurveOptConfig {
        CurveOptConfig {
            quad_points: self.quad_points,
            energy_segments: self.segments,
            step_size: self.step_size,
            max_iters: self.max_iters,
            plateau_window: self.plateau_window,
            plateau_rel_tol: self.plateau_tol,
            max_control_points: self.max_control_points,
            gradient_mode: match self.gradient {
                GradientArg::Auto => None,
                GradientArg::ExactVjp => Some(GradientMode::ExactVjp),
                GradientArg::Fd => Some(GradientMode::FiniteDifference),
            },
        }
    }
}

#[derive(Args, Clone, Debug, Serialize)]
struct MetricArgs {
    /// Generator model file (kind mlp or stochastic).
    #[arg(long)]
    model: PathBuf,
    /// Logistic-regression model whose outputs measure distances.
    #[arg(long)]
    feature: Option<PathBuf>,
}

impl MetricArgs {
    fn provider(&self) -> Result<MetricProvider> {
        let model = load_model(&self.model).with_context(|| format!("loading {}", self.model.display()))?;
        let feature = self.feature.as_deref().map(load_feature).transpose()?;
        provider_for(model, feature)
    }
}

fn load_feature(path: &Path) -> Result<FeatureMap> {
    match load_model(path).with_context(|| format!("loading {}", path.display()))? {
        ModelFile::Logistic(f) => Ok(f),
        _ => bail!("{} is not a logistic model", path.display()),
    }
}

fn provider_for(model: ModelFile, feature: Option<FeatureMap>) -> Result<MetricProvider> {
    Ok(match (model, feature) {
        (ModelFile::Mlp(g), None) => MetricProvider::deterministic(g),
        (ModelFile::Mlp(g), Some(f)) => MetricProvider::feature_deterministic(g, f),
        (ModelFile::Stochastic { generator, .. }, None) => MetricProvider::stochastic(generator),
        (ModelFile::Stochastic { generator, .. }, Some(f)) => MetricProvider::feature_stochastic(generator, f),
        (ModelFile::Logistic(_), _) => bail!("a logistic model is not a generator"),
    })
}

fn parse_point(s: &str) -> Result<LatentPoint, String> {
    let coords = s
        .split(',')
        .map(|c| c.trim().parse::<f64>().map_err(|e| format!("bad coordinate `{c}`: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    LatentPoint::new(coords).map_err(|e| e.to_string())
}

#[derive(Args, Clone, Debug, Serialize)]
struct ShortenArgs {
    #[command(flatten)]
    metric: MetricArgs,
    /// Start point, comma separated.
    #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
    from: LatentPoint,
    /// End point, comma separated.
    #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
    to: LatentPoint,
    #[command(flatten)]
    opt: OptArgs,
}

#[derive(Args, Clone, Debug, Serialize)]
struct McArgs {
    #[command(flatten)]
    metric: MetricArgs,
    /// Latent step length towards the steepest direction.
    #[arg(long)]
    alpha: f64,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    bins: usize,
    #[command(flatten)]
    opt: OptArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum GridKind {
    LogCond,
    LogSqrtDet,
}

fn parse_bounds(s: &str) -> Result<Bounds, String> {
    let v = s
        .split(',')
        .map(|c| c.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    if v.len() != 4 {
        return Err("bounds are xmin,xmax,ymin,ymax".into());
    }
    Bounds::new(v[0], v[1], v[2], v[3]).map_err(|e| e.to_string())
}

#[derive(Args, Clone, Debug, Serialize)]
struct GridArgs {
    #[command(flatten)]
    metric: MetricArgs,
    #[arg(long, value_enum)]
    kind: GridKind,
    /// xmin,xmax,ymin,ymax
    #[arg(long, value_parser = parse_bounds, allow_hyphen_values = true, default_value = "-3,3,-3,3")]
    bounds: Bounds,
    /// nx,ny
    #[arg(long, value_delimiter = ',', default_value = "100,100")]
    resolution: Vec<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum StreamKind {
    Min,
    Max,
}

#[derive(Args, Clone, Debug, Serialize)]
struct StreamlineArgs {
    #[command(flatten)]
    metric: MetricArgs,
    #[arg(long, value_enum)]
    kind: StreamKind,
    /// Seed points separated by `;`, coordinates by `,`.
    #[arg(long, value_delimiter = ';', value_parser = parse_point, allow_hyphen_values = true)]
    seeds: Vec<LatentPoint>,
    #[arg(long, default_value_t = 0.05)]
    step: f64,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    /// Stop lines at this box, xmin,xmax,ymin,ymax.
    #[arg(long, value_parser = parse_bounds, allow_hyphen_values = true)]
    bounds: Option<Bounds>,
}

#[derive(Args, Clone, Debug, Serialize)]
struct CompareArgs {
    #[arg(long)]
    model_a: PathBuf,
    #[arg(long)]
    model_b: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 20)]
    pairs: usize,
    #[arg(long, default_value_t = latent_geom::compare::DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    opt: OptArgs,
}

#[derive(Args, Clone, Debug, Serialize)]
struct InterpArgs {
    /// VAE model file with encoder.
    #[arg(long)]
    model: PathBuf,
    /// Logistic model; adds a strip shortened in its feature metric.
    #[arg(long)]
    feature: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Index into the filtered test set.
    #[arg(long)]
    from_idx: usize,
    #[arg(long)]
    to_idx: usize,
    #[arg(long, default_value_t = 10)]
    frames: usize,
    #[command(flatten)]
    opt: OptArgs,
}

#[derive(Args, Clone, Debug, Serialize)]
struct CheckArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 20)]
    points: usize,
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
    /// Largest acceptable relative Jacobian error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone, Debug, Serialize)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Serialize, Deserialize, Debug)]
struct RunManifest {
    command: String,
    args: Vec<String>,
    cwd: PathBuf,
    out_dir: PathBuf,
    workers: usize,
    config: serde_json::Value,
    resolved: serde_json::Value,
    env: BTreeMap<String, String>,
    seed: Option<u64>,
    started_unix: f64,
    finished_unix: f64,
    outputs: Vec<PathBuf>,
    version: String,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

struct Run {
    out_dir: PathBuf,
    outputs: Vec<PathBuf>,
    resolved: serde_json::Value,
}

impl Run {
    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(path.clone());
        Ok(path)
    }

    fn save_model(&mut self, name: &str, model: &ModelFile) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        save_model(model, &path).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(path.clone());
        Ok(path)
    }
}

fn json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::TrainVae(_) => "train-vae",
        Command::TrainLogreg(_) => "train-logreg",
        Command::Shorten(_) => "shorten",
        Command::McImprove(_) => "mc-improve",
        Command::Grid(_) => "grid",
        Command::Streamlines(_) => "streamlines",
        Command::Compare(_) => "compare",
        Command::Interp(_) => "interp",
        Command::CheckJacobian(_) => "check-jacobian",
        Command::Replay(_) => "replay",
    }
}

fn command_seed(c: &Command) -> Option<u64> {
    match c {
        Command::TrainVae(a) => Some(a.seed),
        Command::TrainLogreg(a) => Some(a.seed),
        Command::McImprove(a) => Some(a.seed),
        Command::Compare(a) => Some(a.seed),
        Command::CheckJacobian(a) => Some(a.seed),
        _ => None,
    }
}

fn resolve_out_dir(cli: &Cli) -> PathBuf {
    cli.out_dir.clone().unwrap_or_else(|| {
        std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("out"))
    })
}

fn execute(cli: Cli, args: Vec<String>) -> Result<()> {
    if let Command::Replay(r) = &cli.command {
        return replay(&r.manifest, cli.workers, cli.out_dir.clone());
    }
    let out_dir = std::path::absolute(resolve_out_dir(&cli))?;
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build()?;
    let started = now();
    let mut run = Run {
        out_dir: out_dir.clone(),
        outputs: Vec::new(),
        resolved: serde_json::Value::Null,
    };
    pool.install(|| dispatch(&cli.command, &mut run))?;
    let name = command_name(&cli.command);
    let manifest = RunManifest {
        command: name.into(),
        args,
        cwd: std::env::current_dir()?,
        out_dir: out_dir.clone(),
        workers: cli.workers,
        config: serde_json::to_value(&cli.command)?,
        resolved: run.resolved,
        env: [MNIST_DIR_ENV]
            .into_iter()
            .filter_map(|k| std::env::var(k).ok().map(|v| (k.to_string(), v)))
            .collect(),
        seed: command_seed(&cli.command),
        started_unix: started,
        finished_unix: now(),
        outputs: run.outputs,
        version: env!("CARGO_PKG_VERSION").into(),
    };
    let path = out_dir.join(format!("{name}.manifest.json"));
    fs::write(&path, json(&manifest)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn replay(path: &Path, workers: usize, out_dir: Option<PathBuf>) -> Result<()> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let m: RunManifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if m.version != env!("CARGO_PKG_VERSION") {
        eprintln!("warning: manifest written by version {}", m.version);
    }
    let out_dir = out_dir.map(std::path::absolute).transpose()?;
    for (k, v) in &m.env {
        std::env::set_var(k, v);
    }
    std::env::set_current_dir(&m.cwd).with_context(|| format!("entering {}", m.cwd.display()))?;
    let mut argv = vec!["latent-geom".to_string()];
    argv.extend(m.args.iter().cloned());
    let mut cli = Cli::try_parse_from(&argv).map_err(|e| anyhow!("manifest arguments: {e}"))?;
    if matches!(cli.command, Command::Replay(_)) {
        bail!("a manifest cannot replay another replay");
    }
    cli.out_dir = Some(out_dir.unwrap_or(m.out_dir));
    cli.workers = workers;
    execute(cli, m.args)
}

fn dispatch(command: &Command, run: &mut Run) -> Result<()> {
    match command {
        Command::TrainVae(a) => cmd_train_vae(a, run),
        Command::TrainLogreg(a) => cmd_train_logreg(a, run),
        Command::Shorten(a) => cmd_shorten(a, run),
        Command::McImprove(a) => cmd_mc(a, run),
        Command::Grid(a) => cmd_grid(a, run),
        Command::Streamlines(a) => cmd_streamlines(a, run),
        Command::Compare(a) => cmd_compare(a, run),
        Command::Interp(a) => cmd_interp(a, run),
        Command::CheckJacobian(a) => cmd_check(a, run),
        Command::Replay(_) => unreachable!("handled before dispatch"),
    }
}

fn cmd_train_vae(a: &TrainVaeArgs, run: &mut Run) -> Result<()> {
    let ds = a.data.load(Split::Train)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        sigma_epochs: a.sigma_epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        seed: a.seed,
        latent_dim: a.latent_dim,
        hidden: a.hidden.clone(),
        sigma_floor: a.sigma_floor,
    };
    run.resolved = serde_json::json!({ "data_dir": a.data.dir(), "train": cfg });
    let (vae, report) = train_vae(&ds, &cfg)?;
    let path = run.save_model(&a.output, &vae.to_model_file())?;
    run.write(&format!("{}.report.json", a.output.trim_end_matches(".json")), json(&report)?)?;
    println!(
        "trained {} parameters on {} images; held-out ELBO {:.3} -> {:.3}; wrote {}",
        vae.parameter_count(),
        ds.len(),
        report.elbo_history[0],
        report.elbo_history.last().copied().unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

fn cmd_train_logreg(a: &TrainLogregArgs, run: &mut Run) -> Result<()> {
    let train = a.data.load(Split::Train)?;
    let test = a.data.load(Split::Test)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        seed: a.seed,
        ..TrainConfig::default()
    };
    run.resolved = serde_json::json!({ "data_dir": a.data.dir(), "train": cfg });
    let (map, report) = train_logreg(&train, &cfg)?;
    let test_accuracy = accuracy(&map, &test)?;
    let path = run.save_model(&a.output, &ModelFile::Logistic(map))?;
    let summary = serde_json::json!({
        "loss_history": report.loss_history,
        "train_accuracy": report.train_accuracy,
        "test_accuracy": test_accuracy,
    });
    run.write(&format!("{}.report.json", a.output.trim_end_matches(".json")), json(&summary)?)?;
    println!(
        "train accuracy {:.4}, test accuracy {:.4}; wrote {}",
        report.train_accuracy,
        test_accuracy,
        path.display()
    );
    Ok(())
}

fn cmd_shorten(a: &ShortenArgs, run: &mut Run) -> Result<()> {
    let p = a.metric.provider()?;
    run.resolved = serde_json::json!({ "metric": p.name(), "shorten": a.opt.config() });
    let r = shorten(&a.from, &a.to, &p, &a.opt.config())?;
    run.write("shorten.curve.json", r.curve.to_json())?;
    let summary = serde_json::json!({
        "metric": p.name(),
        "d_straight": r.d_straight,
        "d_short": r.d_short,
        "rel_improvement": r.rel_improvement(),
        "iterations": r.iterations,
        "control_points": r.control_points,
        "fallback_used": r.fallback_used,
    });
    run.write("shorten.json", json(&summary)?)?;
    println!(
        "d_straight {} d_short {} relative improvement {}",
        r.d_straight,
        r.d_short,
        r.rel_improvement()
    );
    Ok(())
}

fn cmd_mc(a: &McArgs, run: &mut Run) -> Result<()> {
    let p = a.metric.provider()?;
    let cfg = McConfig {
        n_samples: a.samples,
        alpha: a.alpha,
        seed: a.seed,
        shorten: a.opt.config(),
        histogram_bins: a.bins,
    };
    run.resolved = serde_json::json!({ "metric": p.name(), "monte_carlo": cfg });
    let s = run_monte_carlo(&p, &cfg)?;
    run.write("mc.records.csv", s.records_csv())?;
    let values: Vec<f64> = s.records.iter().map(|r| r.rel_improvement).collect();
    let (lo, hi) = bootstrap_mean_ci(&values, 0.95, 10_000, a.seed);
    let mut summary: serde_json::Value = serde_json::from_str(&s.summary_json())?;
    summary["metric"] = p.name().into();
    summary["bootstrap_ci95"] = serde_json::json!([lo, hi]);
    run.write("mc.summary.json", json(&summary)?)?;
    println!(
        "{} samples: mean relative improvement {:.5} (std {:.5}, 95% CI [{:.5}, {:.5}]), {} fallbacks, {} failures",
        s.records.len(),
        s.mean,
        s.std,
        lo,
        hi,
        s.fallbacks,
        s.failures.len()
    );
    Ok(())
}

fn cmd_grid(a: &GridArgs, run: &mut Run) -> Result<()> {
    let p = a.metric.provider()?;
    let &[nx, ny] = a.resolution.as_slice() else {
        bail!("resolution is nx,ny");
    };
    let kind = match a.kind {
        GridKind::LogCond => ScalarKind::LogCondition,
        GridKind::LogSqrtDet => ScalarKind::LogSqrtDet,
    };
    run.resolved = serde_json::json!({ "metric": p.name(), "kind": kind.name(), "bounds": a.bounds, "nx": nx, "ny": ny });
    let g = scalar_grid(&p, kind, a.bounds, nx, ny)?;
    let path = run.write(&format!("grid.{}.csv", kind.name()), g.to_csv())?;
    println!("{} nodes, {} missing; wrote {}", nx * ny, g.missing(), path.display());
    Ok(())
}

fn cmd_streamlines(a: &StreamlineArgs, run: &mut Run) -> Result<()> {
    let p = a.metric.provider()?;
    let kind = match a.kind {
        StreamKind::Min => EigenKind::Min,
        StreamKind::Max => EigenKind::Max,
    };
    if a.seeds.is_empty() {
        bail!("at least one seed is required");
    }
    let opts = StreamlineOptions {
        step_length: a.step,
        n_steps: a.steps,
        bounds: a.bounds,
        initial_direction: None,
    };
    run.resolved = serde_json::json!({ "metric": p.name(), "kind": kind, "options": opts });
    let set = streamlines(&p, kind, &a.seeds, &opts)?;
    let name = match kind {
        EigenKind::Min => "streamlines.min.csv",
        EigenKind::Max => "streamlines.max.csv",
    };
    let path = run.write(name, set.to_csv())?;
    println!("{} streamlines; wrote {}", set.lines.len(), path.display());
    Ok(())
}

fn load_vae(path: &Path) -> Result<Vae> {
    let model = load_model(path).with_context(|| format!("loading {}", path.display()))?;
    Vae::from_model_file(model).with_context(|| format!("in {}", path.display()))
}

fn cmd_compare(a: &CompareArgs, run: &mut Run) -> Result<()> {
    let va = load_vae(&a.model_a)?;
    let vb = load_vae(&a.model_b)?;
    let test = a.data.load(Split::Test)?;
    let pairs = sample_test_pairs(&test, a.pairs, a.seed)?;
    run.resolved = serde_json::json!({ "data_dir": a.data.dir(), "pairs": pairs, "threshold": a.threshold, "shorten": a.opt.config() });
    let rows = compare_models(&va, &vb, &test, &pairs, a.threshold, &a.opt.config())?;
    run.write("compare.csv", comparison_csv(&rows))?;
    let order: Vec<_> = ranked(&rows).into_iter().cloned().collect();
    run.write("compare.ranked.csv", comparison_csv(&order))?;
    let selected: Vec<usize> = rows.iter().filter(|r| r.selected).map(|r| r.pair).collect();
    println!(
        "{} of {} pairs within gap {}: {:?}; most similar pair {}",
        selected.len(),
        rows.len(),
        a.threshold,
        selected,
        order.first().map_or(0, |r| r.pair)
    );
    Ok(())
}

fn cmd_interp(a: &InterpArgs, run: &mut Run) -> Result<()> {
    let vae = load_vae(&a.model)?;
    let test = a.data.load(Split::Test)?;
    for idx in [a.from_idx, a.to_idx] {
        if idx >= test.len() {
            bail!("index {idx} is outside the {} filtered test images", test.len());
        }
    }
    let z0 = vae.encoder.encode(test.image(a.from_idx))?;
    let z1 = vae.encoder.encode(test.image(a.to_idx))?;
    let cfg = a.opt.config();
    run.resolved = serde_json::json!({ "data_dir": a.data.dir(), "z0": z0, "z1": z1, "shorten": cfg });
    let gen = &vae.generator;
    let shape = test.image_shape();
    let straight = BSplineCurve::straight_line(&z0, &z1, 2)?;
    let plain = shorten(&z0, &z1, &MetricProvider::stochastic(gen.clone()), &cfg)?;
    let plain_improvement = plain.rel_improvement();
    let mut curves = vec![("straight", straight, None), ("shortened", plain.curve, Some(plain_improvement))];
    let feature = a.feature.as_deref().map(load_feature).transpose()?;
    if let Some(f) = &feature {
        let p = MetricProvider::feature_stochastic(gen.clone(), f.clone());
        let r = shorten(&z0, &z1, &p, &cfg)?;
        let improvement = r.rel_improvement();
        curves.push(("feature_shortened", r.curve, Some(improvement)));
    }
    let mut strips = Vec::new();
    let mut summary = Vec::new();
    for (name, curve, improvement) in &curves {
        strips.push(interpolation_sequence(gen, curve, a.frames, shape)?);
        let transitions = feature
            .as_ref()
            .map(|f| class_transition_count(f, gen, curve, 100))
            .transpose()?;
        summary.push(serde_json::json!({
            "curve": name,
            "rel_improvement": improvement,
            "class_transitions": transitions,
            "spline": serde_json::from_str::<serde_json::Value>(&curve.to_json())?,
        }));
    }
    let path = run.write("interp.pgm", ImageStrip::stack(&strips)?.to_pgm())?;
    run.write("interp.json", json(&summary)?)?;
    println!("{} strips of {} frames; wrote {}", strips.len(), a.frames, path.display());
    Ok(())
}

fn cmd_check(a: &CheckArgs, run: &mut Run) -> Result<()> {
    let model = load_model(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let nets = match &model {
        ModelFile::Mlp(g) => vec![("generator", g.clone())],
        ModelFile::Stochastic { generator, .. } => vec![
            ("mu", generator.mu_net().clone()),
            ("sigma", generator.sigma_net().clone()),
        ],
        ModelFile::Logistic(_) => bail!("nothing to audit in a logistic model"),
    };
    run.resolved = serde_json::json!({ "points": a.points, "step": a.step, "tolerance": a.tolerance, "seed": a.seed });
    let mut rng = sample_rng(a.seed, 0);
    let mut report = Vec::new();
    let mut worst: f64 = 0.0;
    for (name, net) in &nets {
        let audit = audit_jacobian(net, a.points, a.step, &mut rng)?;
        println!(
            "{name}: max relative Jacobian error {:.3e}, max vjp error {:.3e}",
            audit.max_rel_error, audit.max_vjp_error
        );
        worst = worst.max(audit.max_rel_error);
        report.push(serde_json::json!({ "network": name, "audit": audit }));
    }
    run.write("check-jacobian.json", json(&report)?)?;
    if !(worst < a.tolerance) {
        bail!("Jacobian error {worst:.3e} exceeds tolerance {:.1e}", a.tolerance);
    }
    Ok(())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match execute(cli, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
