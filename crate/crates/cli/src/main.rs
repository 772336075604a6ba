use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use fedbd::config::{parse_config, ExperimentConfig};
use fedbd::orchestrator::{sweep, Federation, SweepAxis, SweepRun};
use fedbd::report::{find_summaries, mean_ci95, read_summary, write_outputs, GroupKey, SummaryTable};

/// Federated-learning backdoor simulator.
#[derive(Debug, Parser)]
#[command(name = "fedbd", version)]
struct Cli {
    /// Root directory for run outputs.
    #[arg(long, global = true, env = "FEDBD_OUTPUT_ROOT", default_value = "runs")]
    output_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment and write its artifacts.
    Run {
        config: PathBuf,
        /// Output directory (default: <output-root>/<config name>-seed<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Repeat an experiment over values of one config parameter.
    Sweep {
        config: PathBuf,
        /// finetune_fraction, csft_epochs, norm_threshold, m, grad_clip or mom_scale.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        values: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        /// Output directory (default: <output-root>/<config name>-<axis>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate the summary.json files found under the given directories.
    Summarize {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

fn percent(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}%", x * 100.0)).unwrap_or_else(|| "-".into())
}

fn run(config: &Path, out: Option<PathBuf>, seed: Option<u64>, root: &Path) -> Result<()> {
    let mut cfg = parse_config(config)?;
    if let Some(seed) = seed {
        cfg.master_seed = seed;
        cfg.validate()?;
    }
    let dir = out.unwrap_or_else(|| root.join(format!("{}-seed{}", stem(config), cfg.master_seed)));
    let (result, _) = Federation::new(&cfg)?.run()?;
    let bundle = write_outputs(&result, &cfg, &dir)?;
    println!(
        "{} / {} / m={}: train acc {} asr {} | ft acc {} asr {}",
        result.defense,
        result.attack,
        result.m,
        percent(Some(result.final_train_acc)),
        percent(Some(result.final_train_asr)),
        percent(result.ft_acc),
        percent(result.ft_asr)
    );
    println!("wrote {}", bundle.run_dir.display());
    Ok(())
}

fn sweep_table(runs: &[SweepRun], axis: SweepAxis) -> String {
    let mut out = format!("{axis},runs,train_acc,train_asr,ft_acc,ft_asr,ft_asr_ci95\n");
    let mut values: Vec<f64> = runs.iter().map(|r| r.value).collect();
    values.dedup();
    for v in values {
        let group: Vec<_> = runs.iter().filter(|r| r.value == v).map(|r| &r.result).collect();
        let stat = |f: &dyn Fn(&fedbd::orchestrator::RunResult) -> Option<f64>| {
            let xs: Option<Vec<f64>> = group.iter().map(|r| f(r)).collect();
            xs.and_then(|xs| mean_ci95(&xs))
        };
        let cell = |s: Option<fedbd::report::MeanCi>| s.map(|s| format!("{:.2}", s.mean * 100.0)).unwrap_or_default();
        let ft_asr = stat(&|r| r.ft_asr);
        let _ = writeln!(
            out,
            "{v},{},{},{},{},{},{}",
            group.len(),
            cell(stat(&|r| Some(r.final_train_acc))),
            cell(stat(&|r| Some(r.final_train_asr))),
            cell(stat(&|r| r.ft_acc)),
            cell(ft_asr),
            ft_asr
                .and_then(|s| s.half_width)
                .map(|h| format!("{:.2}", h * 100.0))
                .unwrap_or_default()
        );
    }
    out
}

fn run_sweep(
    config: &Path,
    axis: &str,
    values: &[f64],
    repeats: usize,
    out: Option<PathBuf>,
    root: &Path,
) -> Result<()> {
    let base: ExperimentConfig = parse_config(config)?;
    let axis: SweepAxis = axis.parse()?;
    let dir = out.unwrap_or_else(|| root.join(format!("{}-{axis}", stem(config))));
    let runs = sweep(&base, axis, values, repeats)?;
    for r in &runs {
        let run_dir = dir.join(format!("{axis}={}", r.value)).join(format!("r{}", r.repeat));
        write_outputs(&r.result, &r.config, &run_dir)?;
    }
    let table = sweep_table(&runs, axis);
    let path = dir.join("sweep.csv");
    fs::write(&path, &table).with_context(|| format!("writing {}", path.display()))?;
    print!("{table}");
    println!("wrote {}", dir.display());
    Ok(())
}

fn summarize(dirs: &[PathBuf], csv: Option<PathBuf>) -> Result<()> {
    let mut results = Vec::new();
    for dir in dirs {
        for path in find_summaries(dir)? {
            results.push(read_summary(&path)?);
        }
    }
    if results.is_empty() {
        bail!("no summary.json found under {}", dirs.iter().map(|d| d.display().to_string()).collect::<Vec<_>>().join(", "));
    }
    let table = SummaryTable::new(&results, &GroupKey::TABLE);
    print!("{}", table.to_text());
    if let Some(path) = csv {
        fs::write(&path, table.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

/// The error and any causes not already quoted in it, on one line.
fn describe(e: &anyhow::Error) -> String {
    let mut text = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !text.contains(&c) {
            text = format!("{text}: {c}");
        }
    }
    text
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { config, out, seed } => run(&config, out, seed, &cli.output_root),
        Command::Sweep {
            config,
            axis,
            values,
            repeats,
            out,
        } => run_sweep(&config, &axis, &values, repeats, out, &cli.output_root),
        Command::Summarize { dirs, csv } => summarize(&dirs, csv),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}
