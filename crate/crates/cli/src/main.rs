use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use semeq::harness::{
    aggregate, aggregate_path, count_flops, evaluate, fit_method, fitting_set, parse_config,
    prepare_run, run_adaptation, run_sweep, target_centroids, write_csv, ConfigFormat,
    ExperimentConfig, Fitted, FlopDims, Method, TaskSource,
};
use semeq::linear::{decode_linear, encode_linear, LINEAR_MAGIC};
use semeq::neural::{decode_neural, encode_neural};
use semeq::pilots::{generate_pool, save_pilots};
use semeq::Error;
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "semeq",
    version,
    about = "Semantic and physical channel equalization simulator"
)]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic pilot pool (theta.bin, gamma.bin, labels.bin).
    GenPilots {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one equalizer on the first run of the config and save it.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Model file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a saved equalizer on the test split of the config.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a parameter sweep into a resumable CSV file.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the RIS-only channel adaptation experiment.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the per-sample FLOP count of a method.
    Flops {
        #[arg(long)]
        method: Method,
        #[arg(long = "K", default_value_t = 1)]
        k: usize,
        #[arg(long)]
        nt: usize,
        /// Defaults to `nt`.
        #[arg(long)]
        nr: Option<usize>,
        #[arg(long)]
        ntheta: usize,
        #[arg(long)]
        ngamma: usize,
        #[arg(long, default_value_t = 0.0)]
        sparsity: f64,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML, or JSON with a `.json` extension).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    method: Option<Method>,
    /// Override any config field, e.g. `--set channel.nt=4` or
    /// `--set sweep.k=[1,2]`. Values are TOML; bare words are strings.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, value_enum, default_value_t = Emit::Csv)]
    emit: Emit,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Emit {
    Csv,
    Json,
}

struct Failure {
    code: u8,
    kind: &'static str,
    key: Option<String>,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind, key) = match &e {
            Error::Config { key, .. } => (2, "config", Some(key.clone())),
            Error::InvalidParameter(_) => (2, "config", None),
            Error::Io { .. } => (3, "io", None),
            Error::Format { .. } => (3, "format", None),
            Error::Csv(_) => (3, "io", None),
            _ => (1, "runtime", None),
        };
        Failure {
            code,
            kind,
            key,
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: io::Error) -> Failure {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
    .into()
}

fn config_failure(key: &str, message: impl ToString) -> Failure {
    Error::Config {
        key: key.to_string(),
        message: message.to_string(),
    }
    .into()
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let key = f.key.map(|k| format!(" key={k}")).unwrap_or_default();
            eprintln!("error[{}]{key}: {}", f.kind, f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::GenPilots { common, out } => gen_pilots(&load_config(&common)?, &out),
        Command::Fit { common, out } => fit(&load_config(&common)?, &out),
        Command::Eval { common, model, out } => {
            eval(&load_config(&common)?, &model, out.as_deref(), common.emit)
        }
        Command::Sweep { common, out } => sweep(&load_config(&common)?, &out, common.emit),
        Command::Adapt { common, out } => {
            adapt(&load_config(&common)?, out.as_deref(), common.emit)
        }
        Command::Flops {
            method,
            k,
            nt,
            nr,
            ntheta,
            ngamma,
            sparsity,
        } => {
            if !(0.0..=1.0).contains(&sparsity) {
                return Err(config_failure("sparsity", "must lie in [0, 1]"));
            }
            let dims = FlopDims {
                k,
                nt,
                nr: nr.unwrap_or(nt),
                n_theta: ntheta,
                n_gamma: ngamma,
            };
            println!("{}", count_flops(method, &dims, sparsity));
            Ok(())
        }
    }
}

/// Loads the config file (or defaults), then applies `--set`, `--seed` and
/// `--method` in that order and re-validates the result.
fn load_config(common: &Common) -> CliResult<ExperimentConfig> {
    let base = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
            let format = match path.extension().and_then(|e| e.to_str()) {
                Some("json") => ConfigFormat::Json,
                _ => ConfigFormat::Toml,
            };
            parse_config(&text, format)?
        }
        None => ExperimentConfig::default(),
    };
    if common.overrides.is_empty() && common.seed.is_none() && common.method.is_none() {
        base.validate()?;
        return Ok(base);
    }
    let mut doc = toml::Table::try_from(&base).map_err(|e| config_failure("<config>", e))?;
    for item in &common.overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| config_failure(item, "override must have the form KEY=VALUE"))?;
        set_path(&mut doc, key.trim(), parse_value(value.trim()))?;
    }
    if let Some(seed) = common.seed {
        set_path(&mut doc, "seed", toml::Value::Integer(seed as i64))?;
    }
    if let Some(m) = common.method {
        doc.remove("methods");
        set_path(&mut doc, "method", toml::Value::String(m.name().into()))?;
    }
    let cfg = parse_config(&doc.to_string(), ConfigFormat::Toml)?;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(doc: &mut toml::Table, key: &str, value: toml::Value) -> CliResult<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut table = doc;
    for (i, part) in parents.iter().enumerate() {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| config_failure(&parts[..=i].join("."), "not a table"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn gen_pilots(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    let TaskSource::Synthetic(spec) = &cfg.task else {
        return Err(config_failure("task", "gen-pilots needs a synthetic task"));
    };
    let pool = generate_pool(spec)?;
    fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    save_pilots(
        &pool,
        &out.join("theta.bin"),
        &out.join("gamma.bin"),
        Some(&out.join("labels.bin")),
    )?;
    println!(
        "wrote {} pilots ({} / {} dims) to {}",
        pool.len(),
        pool.raw_theta,
        pool.raw_gamma,
        out.display()
    );
    Ok(())
}

fn fit(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    let method = cfg.methods()[0];
    if method.baseline().is_some() {
        return Err(config_failure(
            "method",
            "only the linear and neural equalizers can be saved",
        ));
    }
    let run = prepare_run(cfg, 0)?;
    let fitted = fit_method(
        method,
        &run.train,
        &run.val,
        &run.real,
        &run.noise,
        &cfg.settings(),
        run.seed,
    )?;
    let bytes = match &fitted {
        Fitted::Linear(eq) => encode_linear(eq),
        Fitted::Neural(eq) => encode_neural(eq),
        Fitted::Baseline { .. } => unreachable!("baselines rejected above"),
    };
    fs::write(out, bytes).map_err(|e| io_failure(out, e))?;
    let power = fitted.transmit_power(&fitting_set(method, &run.train, &run.val))?;
    println!(
        "fitted {} (power {power:.6}, sparsity {:.4}) -> {}",
        method.name(),
        fitted.sparsity(),
        out.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> CliResult<Fitted> {
    let bytes = fs::read(path).map_err(|e| io_failure(path, e))?;
    let fitted = if bytes.starts_with(LINEAR_MAGIC) {
        decode_linear(&bytes).map(Fitted::Linear)
    } else {
        decode_neural(&bytes).map(Fitted::Neural)
    };
    fitted.map_err(|source| {
        Error::Format {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

fn emit<T: serde::Serialize>(rows: &[T], out: Option<&Path>, format: Emit) -> CliResult<()> {
    let mut buf = Vec::new();
    match format {
        Emit::Csv => write_csv(rows, &mut buf)?,
        Emit::Json => {
            serde_json::to_writer_pretty(&mut buf, rows).expect("rows serialize to JSON");
            buf.push(b'\n');
        }
    }
    match out {
        Some(path) => fs::write(path, buf).map_err(|e| io_failure(path, e)),
        None => io::stdout()
            .write_all(&buf)
            .map_err(|e| io_failure(Path::new("<stdout>"), e)),
    }
}

fn eval(cfg: &ExperimentConfig, model: &Path, out: Option<&Path>, format: Emit) -> CliResult<()> {
    let fitted = load_model(model)?;
    let run = prepare_run(cfg, 0)?;
    let centroids = match run.train.labels {
        Some(_) => Some(target_centroids(&run.train)?),
        None => None,
    };
    let (mse, accuracy) = evaluate(
        &fitted,
        &run.test,
        centroids.as_ref(),
        &run.real,
        &run.noise,
        cfg.n_noise_draws,
        run.seed,
    )?;
    let row = json!({
        "method": fitted.method().name(),
        "seed": run.seed,
        "mse": mse,
        "accuracy": accuracy,
        "sparsity": fitted.sparsity(),
        "max_phase_dev": fitted.phases().max_modulus_error(),
    });
    emit(&[row], out, format)
}

fn sweep(cfg: &ExperimentConfig, out: &Path, format: Emit) -> CliResult<()> {
    let rows = run_sweep(cfg, out)?;
    let failures = rows.iter().filter(|r| !r.error.is_empty()).count();
    if format == Emit::Json {
        let json_path = out.with_extension("json");
        emit(&rows, Some(&json_path), Emit::Json)?;
        emit(
            &aggregate(&rows),
            Some(&out.with_extension("aggregate.json")),
            Emit::Json,
        )?;
    }
    println!(
        "{} rows ({failures} failed) in {}; aggregate in {}",
        rows.len(),
        out.display(),
        aggregate_path(out).display()
    );
    Ok(())
}

fn adapt(cfg: &ExperimentConfig, out: Option<&Path>, format: Emit) -> CliResult<()> {
    let rows = run_adaptation(cfg)?;
    emit(&rows, out, format)
}
