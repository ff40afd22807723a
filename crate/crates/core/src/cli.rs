//! The `promptlab` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::{read_config, ConfigError, ExperimentConfig};
use crate::error::Error;
use crate::instrumentation::{emit_report, run_noise_sweep, ReportDocument, ReportFormat, SeedContext, SweepPlan};
use crate::numeric::Matrix;
use crate::upl::run_upl_comparison;
use crate::world::{sample_dataset, NoiseSpec, Split, World};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "promptlab", version, about = "Label-noise experiments on a synthetic frozen text encoder")]
struct Cli {
    /// JSON experiment config; defaults are used for anything missing.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Run a single world seed instead of the configured list.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Suppress progress messages on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write each world and its train/test/unlabeled splits.
    Gen,
    /// Train every method × noise × loss × seed cell.
    Sweep,
    /// As `sweep`, recording the noisy-to-clean gradient ratio each epoch.
    Gradratio,
    /// Write the random-prompt confusion matrices, then sweep under confusion noise.
    Confusion,
    /// Compare top-K/CE, random-K/CE and random-K/robust-loss pseudo-labeling.
    Upl,
    /// Re-render the CSV for a stored JSON report.
    Report {
        /// Report JSON; defaults to `<out>/sweep.json`.
        input: Option<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(Failure::Config(msg)) => {
            eprintln!("error: config: {msg}");
            EXIT_CONFIG
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            EXIT_RUNTIME
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut config = match &cli.config {
        Some(path) => read_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        config.seeds = vec![seed];
    }
    config.validate()?;
    Ok(config)
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    let config = load_config(cli)?;
    let out = config.output_dir.clone();
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| Error::Io { path, source }
    };
    std::fs::create_dir_all(&out).map_err(io(&out))?;
    let say = |msg: String| {
        if !cli.quiet {
            eprintln!("{msg}");
        }
    };
    match &cli.command {
        Command::Gen => {
            for &seed in &config.seeds {
                let dir = generate_files(&config, seed, &out)?;
                say(format!("wrote {}", dir.display()));
            }
            Ok(())
        }
        Command::Sweep => sweep(&config, "sweep", false, &out, &say),
        Command::Gradratio => sweep(&config, "gradratio", true, &out, &say),
        Command::Confusion => {
            let mut matrices = Vec::new();
            for &seed in &config.seeds {
                let ctx = SeedContext::build(&config.world, seed, Some(config.confusion_runs))?;
                matrices.push(ConfusionEntry {
                    world_seed: seed,
                    matrix: ctx.confusion.expect("confusion requested"),
                });
            }
            let path = out.join("confusion_matrix.json");
            write_json(
                &path,
                &ConfusionDocument {
                    config: &config,
                    runs: config.confusion_runs,
                    matrices,
                },
            )?;
            say(format!("wrote {}", path.display()));
            let mut rates: Vec<f64> = Vec::new();
            for n in &config.noise {
                if !rates.contains(&n.rate) {
                    rates.push(n.rate);
                }
            }
            let mut cfg = config.clone();
            cfg.noise = rates.into_iter().map(|r| NoiseSpec::confusion(r, None)).collect();
            sweep(&cfg, "confusion", false, &out, &say)
        }
        Command::Upl => {
            let reports = run_upl_comparison(&config.world, &config.seeds, &config.upl, &config.train)?;
            finish(ReportDocument::new("upl", &config, reports), &out, "upl", &say)
        }
        Command::Report { input } => {
            let input = input.clone().unwrap_or_else(|| out.join("sweep.json"));
            let doc = ReportDocument::read(&input)?;
            let path = input.with_extension("csv");
            emit_report(&doc, ReportFormat::Csv, &path)?;
            say(format!("wrote {}", path.display()));
            Ok(())
        }
    }
}

fn sweep(config: &ExperimentConfig, name: &str, probe: bool, out: &Path, say: &dyn Fn(String)) -> Result<(), Failure> {
    let reports = run_noise_sweep(&SweepPlan::from_config(config, probe))?;
    finish(ReportDocument::new(name, config, reports), out, name, say)
}

/// Writes `<name>.json` and `<name>.csv`, then fails if any run failed.
fn finish(doc: ReportDocument, out: &Path, name: &str, say: &dyn Fn(String)) -> Result<(), Failure> {
    let json = out.join(format!("{name}.json"));
    let csv = out.join(format!("{name}.csv"));
    emit_report(&doc, ReportFormat::Json, &json)?;
    emit_report(&doc, ReportFormat::Csv, &csv)?;
    say(format!("wrote {} and {} ({} runs)", json.display(), csv.display(), doc.reports.len()));
    let failed: Vec<_> = doc.reports.iter().filter(|r| r.error.is_some()).collect();
    if let Some(first) = failed.first() {
        return Err(Failure::Runtime(format!(
            "{} of {} runs failed; first at {}: {}",
            failed.len(),
            doc.reports.len(),
            first.coordinates(),
            first.error.as_deref().unwrap_or_default()
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct ConfusionEntry {
    world_seed: u64,
    matrix: Matrix,
}

#[derive(Serialize)]
struct ConfusionDocument<'a> {
    config: &'a ExperimentConfig,
    runs: usize,
    matrices: Vec<ConfusionEntry>,
}

#[derive(Serialize)]
struct WorldDocument<'a> {
    config: &'a ExperimentConfig,
    world_seed: u64,
    world: &'a World,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.display().to_string(),
        source,
    })? + "\n";
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes `bytes` unless the file already holds exactly them; a differing
/// existing file is an error.
fn write_once(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    match std::fs::read(path) {
        Ok(existing) if existing == bytes => Ok(()),
        Ok(_) => Err(Error::invalid(
            path.display().to_string(),
            "exists with different contents; refusing to overwrite",
        )),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => std::fs::write(path, bytes).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        }),
        Err(source) => Err(Error::Io {
            path: path.display().to_string(),
            source,
        }),
    }
}

fn generate_files(config: &ExperimentConfig, seed: u64, out: &Path) -> Result<PathBuf, Error> {
    let dir = out.join(format!("world-{seed}"));
    std::fs::create_dir_all(&dir).map_err(|source| Error::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let ctx = SeedContext::build(&config.world, seed, None)?;
    let doc = WorldDocument {
        config,
        world_seed: seed,
        world: &ctx.world,
    };
    let text = serde_json::to_string_pretty(&doc).map_err(|source| Error::Json {
        path: "world.json".into(),
        source,
    })? + "\n";
    write_once(&dir.join("world.json"), text.as_bytes())?;
    let stamp = format!(
        "world_seed={seed} config={}",
        serde_json::to_string(config).expect("config serializes")
    );
    let unlabeled = sample_dataset(&ctx.world, Split::Unlabeled, &ctx.config)?;
    for (name, data) in [("train", &ctx.train), ("test", &ctx.test), ("unlabeled", &unlabeled)] {
        let text = data.to_csv(Some(&stamp))?;
        write_once(&dir.join(format!("{name}.csv")), text.as_bytes())?;
    }
    Ok(dir)
}
