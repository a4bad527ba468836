//! Command-line front-end: dataset generation, fitting, the component
//! ablation and standalone metrics.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
//! Failures print exactly one line to stderr: `error[<category>]: <message>`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use splat_embed::ablation::{run_ablation, VariantSummary};
use splat_embed::engine::{fit_with, FitOptions, FitResult, InitStrategy};
use splat_embed::export::{
    fit_metrics, prepare_export, read_ply, records_to_gaussians, write_ply, write_report,
    write_training_log,
};
use splat_embed::ingest::{generate_swiss_roll, generate_trajectory, load_csv, write_csv, CsvSchema};
use splat_embed::metrics::{evaluate, MetricsReport, StressOptions};
use splat_embed::{Dataset, Error, ErrorCategory, FitConfig, Regime, RowMatrix};

const THREADS_ENV: &str = "SPLAT_EMBED_THREADS";

#[derive(Parser, Debug)]
#[command(name = "splat-embed", version, about = "Embed data as anisotropic 3D Gaussians")]
struct Cli {
    /// Worker threads (defaults to all available cores).
    #[arg(long, global = true, env = THREADS_ENV)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic benchmark dataset as CSV.
    Generate(GenerateArgs),
    /// Fit an embedding and write PLY, report, training log and manifest.
    Fit(FitArgs),
    /// Run the full objective and the two single-term ablations.
    Ablate(FitArgs),
    /// Compare an embedding (PLY or 3-column CSV) against the original data.
    Metrics(MetricsArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    SwissRoll,
    Trajectory,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    kind: Kind,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Noise standard deviation (default 0.05 for the swiss roll, 0.002 for the trajectory).
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Ambient dimension of the trajectory.
    #[arg(long, default_value_t = 10)]
    dim: usize,
    /// Helix turns of the trajectory.
    #[arg(long, default_value_t = 3.0)]
    turns: f64,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
struct InputArgs {
    /// CSV with one sample per row. A non-numeric first line is read as a header.
    #[arg(long, short)]
    input: PathBuf,
    /// Header name of the energy column; ignored when absent from the file.
    #[arg(long, default_value = "energy")]
    energy_column: String,
    /// Header name of the label column; ignored when absent from the file.
    #[arg(long, default_value = "label")]
    label_column: String,
}

#[derive(Args, Debug, Clone, Serialize)]
struct FitArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Output directory (created if missing).
    #[arg(long, short)]
    out: PathBuf,
    /// TOML file with FitConfig keys, or a manifest written by a previous run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `pca3` or a path to an N x 3 CSV.
    #[arg(long, default_value = "pca3")]
    init: String,
    #[arg(long)]
    regime: Option<Regime>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long)]
    freeze_epoch: Option<usize>,
    #[arg(long)]
    lambda_r: Option<f64>,
    #[arg(long)]
    lambda_c: Option<f64>,
    #[arg(long)]
    lambda_o: Option<f64>,
    #[arg(long)]
    huber_beta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report Stress-1 without the optimal rescaling.
    #[arg(long)]
    raw_stress: bool,
    /// Write a training-state PLY every C epochs.
    #[arg(long, value_name = "C")]
    checkpoint_every: Option<usize>,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    #[command(flatten)]
    high: InputArgs,
    /// Embedding as a PLY written by `fit`, or a 3-column CSV.
    #[arg(long)]
    low: PathBuf,
    #[arg(long, default_value_t = 15)]
    k: usize,
    #[arg(long)]
    raw_stress: bool,
    /// Seed of the pair sample used for large inputs.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(Error),
    Io(PathBuf, std::io::Error),
}

impl CliError {
    fn category(&self) -> ErrorCategory {
        match self {
            CliError::Usage(_) => ErrorCategory::Usage,
            CliError::Core(e) => e.category(),
            CliError::Io(..) => ErrorCategory::Data,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            CliError::Core(e) => e.to_string(),
            CliError::Io(p, e) => format!("{}: {e}", p.display()),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult<T> = Result<T, CliError>;

fn exit_code(cat: ErrorCategory) -> u8 {
    match cat {
        ErrorCategory::Usage => 1,
        ErrorCategory::Data => 2,
        ErrorCategory::Numerical => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let line = first.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", line.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cat = e.category();
            eprintln!("error[{}]: {}", cat.as_str(), e.message().replace('\n', " "));
            ExitCode::from(exit_code(cat))
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure thread pool: {e}")))?;
    }
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Fit(a) => cmd_fit(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Metrics(a) => cmd_metrics(&a),
    }
}

fn cmd_generate(a: &GenerateArgs) -> CliResult<()> {
    let d = match a.kind {
        Kind::SwissRoll => generate_swiss_roll(a.n, a.noise.unwrap_or(0.05), a.seed)?,
        Kind::Trajectory => {
            generate_trajectory(a.n, a.dim, a.turns, a.noise.unwrap_or(0.002), a.seed)?
        }
    };
    write_csv(&d, &a.out)?;
    Ok(())
}

fn first_line_is_header(path: &Path) -> CliResult<bool> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(path.into(), e))?;
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    Ok(first.split(',').any(|c| c.trim().parse::<f64>().is_err()))
}

fn load_input(a: &InputArgs) -> CliResult<Dataset> {
    let path = &a.input;
    let schema = if first_line_is_header(path)? {
        let header = csv_header(path)?;
        let present = |name: &str| header.iter().any(|h| h == name);
        CsvSchema::from_header(
            path,
            b',',
            present(&a.energy_column).then_some(a.energy_column.as_str()),
            present(&a.label_column).then_some(a.label_column.as_str()),
        )?
    } else {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(path.into(), e))?;
        let width = text.lines().next().map_or(0, |l| l.split(',').count());
        CsvSchema::indices(0..width)
    };
    Ok(load_csv(path, &schema)?)
}

fn csv_header(path: &Path) -> CliResult<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(path.into(), e))?;
    Ok(text
        .lines()
        .next()
        .unwrap_or("")
        .split(',')
        .map(|s| s.trim().to_owned())
        .collect())
}

/// Loads `--config` (plain keys or a manifest's `[config]` table) and applies
/// flag overrides. When `epochs` is lowered below the default freeze epoch
/// and no freeze epoch is given anywhere, the freeze epoch follows `epochs`.
fn resolve_config(a: &FitArgs) -> CliResult<FitConfig> {
    let mut table = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Io(path.clone(), e))?;
            let mut t: toml::Table = toml::from_str(&text)
                .map_err(|e| CliError::Usage(format!("{}: {}", path.display(), e.message())))?;
            match t.remove("config") {
                Some(toml::Value::Table(inner)) => inner,
                _ => t,
            }
        }
        None => toml::Table::new(),
    };
    let freeze_given = a.freeze_epoch.is_some() || table.contains_key("freeze_epoch");
    let mut set = |key: &str, v: Option<toml::Value>| {
        if let Some(v) = v {
            table.insert(key.to_owned(), v);
        }
    };
    set("regime", a.regime.map(|r| r.as_str().into()));
    set("k", a.k.map(|v| toml::Value::Integer(v as i64)));
    set("epochs", a.epochs.map(|v| toml::Value::Integer(v as i64)));
    set("lazy_interval", a.tau.map(|v| toml::Value::Integer(v as i64)));
    set("freeze_epoch", a.freeze_epoch.map(|v| toml::Value::Integer(v as i64)));
    set("lambda_r", a.lambda_r.map(toml::Value::Float));
    set("lambda_c", a.lambda_c.map(toml::Value::Float));
    set("lambda_o", a.lambda_o.map(toml::Value::Float));
    set("huber_beta", a.huber_beta.map(toml::Value::Float));
    set("seed", a.seed.map(|v| toml::Value::Integer(v as i64)));
    let mut cfg: FitConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Usage(format!("config: {}", e.message())))?;
    if !freeze_given && cfg.freeze_epoch > cfg.epochs {
        cfg.freeze_epoch = cfg.epochs;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_strategy(choice: &str) -> InitStrategy {
    match choice {
        "pca3" => InitStrategy::Pca3,
        path => InitStrategy::External(PathBuf::from(path)),
    }
}

fn stress_options(raw: bool, seed: u64) -> StressOptions {
    StressOptions {
        optimal_scale: !raw,
        seed,
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.into(), e))
}

fn write_artifacts(d: &Dataset, r: &FitResult, out: &Path, ply_name: &str) -> CliResult<()> {
    let (visual, colors) = prepare_export(&r.gaussians, d, r.config.regime)?;
    write_ply(&visual, &colors, &out.join(ply_name))?;
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    subcommand: &'a str,
    version: &'a str,
    args: &'a FitArgs,
    outputs: Vec<String>,
    started_unix: f64,
    finished_unix: f64,
    wall_time_seconds: f64,
    config: &'a FitConfig,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

fn write_toml<T: Serialize>(value: &T, path: &Path) -> CliResult<()> {
    let text = toml::to_string(value)
        .map_err(|e| CliError::Usage(format!("cannot serialize {}: {e}", path.display())))?;
    fs::write(path, text).map_err(|e| CliError::Io(path.into(), e))
}

fn cmd_fit(a: &FitArgs) -> CliResult<()> {
    let started = unix_now();
    let cfg = resolve_config(a)?;
    let d = load_input(&a.input)?;
    create_dir(&a.out)?;
    let checkpoint = match a.checkpoint_every {
        Some(0) => return Err(CliError::Usage("--checkpoint-every must be at least 1".into())),
        Some(c) => {
            let dir = a.out.join("checkpoints");
            create_dir(&dir)?;
            Some((c, dir))
        }
        None => None,
    };
    let result = fit_with(
        &d,
        &cfg,
        FitOptions {
            init: Some(init_strategy(&a.init)),
            checkpoint,
            ..FitOptions::default()
        },
    )?;
    let (m_init, m_final) = fit_metrics(&d, &result, !a.raw_stress)?;
    write_artifacts(&d, &result, &a.out, "embedding.ply")?;
    write_report(&result, &m_init, &m_final, &a.out.join("report.toml"))?;
    write_training_log(&result.history, &a.out.join("train_log.jsonl"))?;
    let manifest = Manifest {
        subcommand: "fit",
        version: env!("CARGO_PKG_VERSION"),
        args: a,
        outputs: ["embedding.ply", "report.toml", "train_log.jsonl", "manifest.toml"]
            .map(String::from)
            .to_vec(),
        started_unix: started,
        finished_unix: unix_now(),
        wall_time_seconds: result.wall_time,
        config: &result.config,
    };
    write_toml(&manifest, &a.out.join("manifest.toml"))?;
    log::info!(
        "fit done: trustworthiness {:.6}, continuity {:.6}, stress1 {:.6}",
        m_final.trustworthiness,
        m_final.continuity,
        m_final.stress1
    );
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    #[serde(flatten)]
    summary: VariantSummary,
    metrics: MetricsReport,
}

#[derive(Serialize)]
struct AblationReport {
    variants: Vec<AblationRow>,
}

fn cmd_ablate(a: &FitArgs) -> CliResult<()> {
    let started = unix_now();
    let cfg = resolve_config(a)?;
    let d = load_input(&a.input)?;
    create_dir(&a.out)?;
    let runs = run_ablation(&d, &cfg, &init_strategy(&a.init))?;
    let mut rows = Vec::with_capacity(runs.len());
    let mut outputs = vec!["ablation.toml".to_owned(), "manifest.toml".to_owned()];
    let mut wall = 0.0;
    for (summary, result) in &runs {
        let name = format!("{}.ply", summary.variant.as_str());
        write_artifacts(&d, result, &a.out, &name)?;
        outputs.push(name);
        let (_, metrics) = fit_metrics(&d, result, !a.raw_stress)?;
        rows.push(AblationRow {
            summary: *summary,
            metrics,
        });
        wall += result.wall_time;
    }
    write_toml(&AblationReport { variants: rows }, &a.out.join("ablation.toml"))?;
    let manifest = Manifest {
        subcommand: "ablate",
        version: env!("CARGO_PKG_VERSION"),
        args: a,
        outputs,
        started_unix: started,
        finished_unix: unix_now(),
        wall_time_seconds: wall,
        config: &cfg,
    };
    write_toml(&manifest, &a.out.join("manifest.toml"))
}

fn load_embedding(path: &Path) -> CliResult<RowMatrix> {
    let is_ply = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("ply"));
    if is_ply {
        let g = records_to_gaussians(&read_ply(path)?);
        return Ok(RowMatrix::from_vec3(&g.means));
    }
    Ok(splat_embed::engine::load_embedding_csv(path)?)
}

fn cmd_metrics(a: &MetricsArgs) -> CliResult<()> {
    let d = load_input(&a.high)?;
    let low = load_embedding(&a.low)?;
    let report = evaluate(&d.points, &low, a.k, &stress_options(a.raw_stress, a.seed))?;
    let text = toml::to_string(&report)
        .map_err(|e| CliError::Usage(format!("cannot serialize metrics: {e}")))?;
    print!("{text}");
    Ok(())
}
