use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use dts_cli::config::{load, Override, Preset};
use dts_cli::report::emit_report;
use dts_cli::runner::{out_root, run_experiment, sweep};
use dts_cli::{CliError, CliResult, ExperimentConfig, RunManifest};
use dts_core::AblationMode;

#[derive(Parser)]
#[command(name = "dts", version, about = "Train and evaluate dual teacher-student models on class-mismatched data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one run per seed.
    Run(RunArgs),
    /// Repeat `run` for every value of one configuration field.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Configuration key to vary, dotted or bare (e.g. `tau`, `dataset.mismatch_ratio`).
        #[arg(long)]
        axis: String,
        /// Comma-separated values for the axis.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
    },
    /// Write runs.csv, aggregate.csv and auroc_vs_epoch.csv for a manifest.
    Report {
        /// Manifest file or the directory containing manifest.json.
        manifest: PathBuf,
        /// Report failed runs from their last recorded epoch.
        #[arg(long)]
        include_incomplete: bool,
    },
    /// Resolve and validate a configuration without training.
    ValidateConfig(ConfigArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Default values to start from: standard, desk or benchmark.
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// A count N (seeds 0..N) or a comma-separated seed list.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    ablation: Option<String>,
    /// `synthetic`, a CSV file, or a CIFAR-10 binary directory.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    mismatch_ratio: Option<f64>,
    #[arg(long)]
    labeled_size: Option<usize>,
    /// `key=value` override, applied after every other flag.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<Override>,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output root; defaults to $DTS_OUT_DIR, then `runs`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Runs executed concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    match s {
        "standard" => Ok(Preset::Standard),
        "desk" => Ok(Preset::Desk),
        "benchmark" => Ok(Preset::Benchmark),
        _ => Err(format!("unknown preset {s:?}; expected standard, desk or benchmark")),
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn ov(key: &str, value: String) -> Override {
    Override { key: key.to_string(), value }
}

fn parse_seeds(s: &str) -> CliResult<Vec<u64>> {
    let bad = || CliError::Validation(format!("--seeds: expected a count or a comma-separated list, got {s:?}"));
    if !s.contains(',') {
        let n: u64 = s.trim().parse().map_err(|_| bad())?;
        return Ok((0..n).collect());
    }
    s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect()
}

impl ConfigArgs {
    fn overrides(&self) -> CliResult<Vec<Override>> {
        let mut out = Vec::new();
        if let Some(seed) = self.seed {
            out.push(ov("seeds", format!("[{seed}]")));
        }
        if let Some(s) = &self.seeds {
            let seeds: Vec<String> = parse_seeds(s)?.iter().map(u64::to_string).collect();
            out.push(ov("seeds", format!("[{}]", seeds.join(", "))));
        }
        if let Some(a) = &self.ablation {
            let mode = AblationMode::from_str(a).map_err(|e| CliError::Validation(format!("--ablation: {e}")))?;
            out.push(ov("train.ablation", toml_string(mode.name())));
        }
        if let Some(d) = &self.dataset {
            if d == "synthetic" {
                out.push(ov("dataset.source", toml_string("synthetic")));
            } else {
                let source = if Path::new(d).is_dir() { "cifar10" } else { "csv" };
                out.push(ov("dataset.source", toml_string(source)));
                out.push(ov("dataset.path", toml_string(d)));
            }
        }
        if let Some(r) = self.mismatch_ratio {
            out.push(ov("dataset.mismatch_ratio", format!("{r:?}")));
        }
        if let Some(m) = self.labeled_size {
            out.push(ov("dataset.labeled_size", m.to_string()));
        }
        out.extend(self.set.iter().cloned());
        Ok(out)
    }

    fn resolve(&self, extra: Option<&Override>) -> CliResult<ExperimentConfig> {
        let mut overrides = self.overrides()?;
        overrides.extend(extra.cloned());
        load(self.config.as_deref(), self.preset, &overrides)
    }
}

fn print_manifest(m: &RunManifest, path: &Path) -> CliResult<()> {
    let failed = m.failed().count();
    println!("manifest: {}", path.display());
    println!("runs: {} completed, {failed} failed", m.runs.len() - failed);
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} run(s) failed; see the manifest")));
    }
    Ok(())
}

fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Run(args) => {
            let config = args.config.resolve(None)?;
            let root = out_root(args.out_dir.as_deref());
            let manifest = run_experiment(&config, &root, args.jobs)?;
            let report = emit_report(&manifest, false);
            print_manifest(&manifest, &manifest.out_dir.join(dts_cli::manifest::MANIFEST_FILE))?;
            report.map(|_| ())
        }
        Command::Sweep { run, axis, values } => {
            let base = run.config.resolve(None)?;
            let root = out_root(run.out_dir.as_deref());
            let manifest = sweep(&base, |o| run.config.resolve(Some(o)), &axis, &values, &root, run.jobs)?;
            let report = emit_report(&manifest, false);
            print_manifest(&manifest, &manifest.out_dir.join(dts_cli::manifest::MANIFEST_FILE))?;
            report.map(|_| ())
        }
        Command::Report { manifest, include_incomplete } => {
            let manifest = RunManifest::read(&manifest)?;
            let report = emit_report(&manifest, include_incomplete)?;
            for f in &report.files {
                println!("{}", f.display());
            }
            if report.skipped > 0 {
                eprintln!("skipped {} incomplete run(s)", report.skipped);
            }
            for a in &report.aggregate {
                println!(
                    "{} runs={} acc={:.4}±{:.4} auroc={:.4}±{:.4}",
                    if a.axis_value.is_empty() { "-" } else { &a.axis_value },
                    a.runs,
                    a.acc_mean,
                    a.acc_std,
                    a.auroc_mean,
                    a.auroc_std
                );
            }
            Ok(())
        }
        Command::ValidateConfig(args) => {
            let config = args.resolve(None)?;
            print!("{}", config.to_toml());
            println!("# config hash: {}", config.hash());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
