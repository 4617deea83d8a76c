//! `himoe`: train, compare, sweep, and certify the grouped routing
//! laboratory from the command line.
//!
//! Exit codes: 0 on success, 1 when a run diverges or a certified property
//! is violated, 2 for configuration, usage, and file system problems.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use himoe_core::config::ExperimentConfig;
use himoe_core::harness::{compare_baselines, pareto_sweep, train, SweepTable};
use himoe_core::theory;
use himoe_core::Error;

#[derive(Parser)]
#[command(name = "himoe", version, about = "Desk-scale laboratory for grouped expert routing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the randomized certification suites for every closed-form
    /// identity and bound.
    Verify {
        /// Samples per property.
        #[arg(long, default_value_t = theory::DEFAULT_SAMPLES)]
        samples: usize,
        /// Master seed for the property sweeps.
        #[arg(long, default_value_t = 20240901)]
        seed: u64,
        /// Directory for verify_report.json (skipped when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one configuration and write its run record.
    Train {
        /// Configuration file (key = value lines); defaults apply when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for metrics.csv, activations.csv, summary.json.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the training seed from the configuration.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train all four routing variants from one base configuration.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for compare.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sweep the two penalty strengths over a grid and record the frontier
    /// data.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for sweep.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated sharpening penalty values.
        #[arg(long, default_value = "0,0.1,0.4", value_name = "LIST")]
        lambda_intra: String,
        /// Comma-separated kept-mass penalty values.
        #[arg(long, default_value = "0,0.05,0.2", value_name = "LIST")]
        lambda_inter: String,
    },
    /// Post-process artifacts in a directory: Pareto points from sweep.csv
    /// and expert usage heatmaps from run records.
    Report {
        /// Directory holding sweep.csv and/or run record directories.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            let code = match err {
                Error::Diverged { .. } => 1,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}

fn run(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::Verify { samples, seed, out } => verify(samples, seed, out.as_deref()),
        Command::Train { config, out, seed } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let record = train(&cfg)?;
            if let Some(dir) = out {
                record.write_to(&dir)?;
                println!("run record written to {}", dir.display());
            }
            let s = &record.summary;
            println!(
                "steps={} task_loss={} total_loss={} expert_cv={} coverage={} i2={} accuracy={}",
                s.steps_completed,
                s.final_task_loss,
                s.final_total_loss,
                s.final_expert_cv,
                s.final_coverage,
                s.final_i2,
                s.final_accuracy
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Compare { config, out, seed } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let table = compare_baselines(&cfg)?;
            let csv = table.to_csv();
            print!("{csv}");
            if let Some(dir) = out {
                write_file(&dir, "compare.csv", &csv)?;
            }
            let diverged = table.rows.iter().any(|r| r.summary.is_none());
            Ok(if diverged { ExitCode::from(1) } else { ExitCode::SUCCESS })
        }
        Command::Sweep {
            config,
            out,
            seed,
            lambda_intra,
            lambda_inter,
        } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let li = parse_grid("--lambda-intra", &lambda_intra)?;
            let le = parse_grid("--lambda-inter", &lambda_inter)?;
            let threads = thread_budget(li.len() * le.len())?;
            let table = pareto_sweep(&cfg, &li, &le, threads)?;
            let csv = table.to_csv();
            print!("{csv}");
            if let Some(dir) = out {
                write_file(&dir, "sweep.csv", &csv)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { out } => report(&out),
    }
}

fn verify(samples: usize, seed: u64, out: Option<&Path>) -> Result<ExitCode, Error> {
    let suite = theory::run_all(samples, seed)?;
    for r in &suite.reports {
        println!(
            "{} {} samples={} worst={:e} tol={:e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.property_name,
            r.samples,
            r.max_violation_magnitude,
            r.tolerance
        );
    }
    println!(
        "{} of {} properties passed (seed {legend})",
        suite.passed_count,
        suite.total,
        legend = suite.seed
    );
    if let Some(dir) = out {
        let json = serde_json::to_string_pretty(&suite).map_err(|e| Error::Io {
            path: dir.join("verify_report.json").display().to_string(),
            reason: e.to_string(),
        })?;
        write_file(dir, "verify_report.json", &(json + "\n"))?;
    }
    Ok(if suite.all_passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig, Error> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_grid(flag: &str, text: &str) -> Result<Vec<f64>, Error> {
    let mut values = Vec::new();
    for part in text.split(',') {
        let trimmed = part.trim();
        let v: f64 = trimmed.parse().map_err(|_| Error::InvalidConfig {
            reason: format!("{flag} expects comma-separated numbers, got `{trimmed}`"),
        })?;
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::InvalidConfig {
                reason: format!("{flag} values must be finite and nonnegative, got {v}"),
            });
        }
        values.push(v);
    }
    if values.is_empty() {
        return Err(Error::InvalidConfig {
            reason: format!("{flag} must name at least one value"),
        });
    }
    Ok(values)
}

/// Worker count for the sweep: `HIMOE_THREADS` when set (strictly parsed),
/// otherwise the available parallelism, never more than there are cells.
fn thread_budget(cells: usize) -> Result<usize, Error> {
    let threads = match std::env::var("HIMOE_THREADS") {
        Ok(text) => text.parse::<usize>().ok().filter(|&t| t > 0).ok_or_else(|| {
            Error::InvalidConfig {
                reason: format!("HIMOE_THREADS must be a positive integer, got `{text}`"),
            }
        })?,
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    Ok(threads.min(cells.max(1)))
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), Error> {
    std::fs::create_dir_all(dir)
        .map_err(|e| io_error(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| io_error(&path, e))
}

fn io_error(path: &Path, err: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        reason: err.to_string(),
    }
}

/// Derives presentation artifacts from the primary records in `dir`.
fn report(dir: &Path) -> Result<ExitCode, Error> {
    let mut produced = Vec::new();

    let sweep_path = dir.join("sweep.csv");
    if sweep_path.is_file() {
        let text = std::fs::read_to_string(&sweep_path).map_err(|e| io_error(&sweep_path, e))?;
        let points = pareto_points(&text)?;
        write_file(dir, "pareto_points.csv", &points)?;
        produced.push("pareto_points.csv".to_string());
    }

    // Run record directories are recognized by their summary.json.
    let mut run_dirs: Vec<PathBuf> = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| io_error(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| io_error(dir, e))?;
        let path = entry.path();
        if path.is_dir() && path.join("summary.json").is_file() {
            run_dirs.push(path);
        }
    }
    run_dirs.sort();
    for run in &run_dirs {
        let heatmap = usage_heatmap(run)?;
        let name = "heatmap.csv";
        write_file(run, name, &heatmap)?;
        produced.push(format!(
            "{}/heatmap.csv",
            run.file_name().and_then(|n| n.to_str()).unwrap_or("run")
        ));
    }

    if produced.is_empty() {
        eprintln!(
            "error: nothing to report in {}: expected sweep.csv or run record directories \
             (summary.json + activations.csv)",
            dir.display()
        );
        return Ok(ExitCode::from(2));
    }
    for name in &produced {
        println!("wrote {name}");
    }
    Ok(ExitCode::SUCCESS)
}

/// Filters sweep rows down to the balance/task Pareto frontier: rows not
/// dominated in (final_task_loss, final_expert_cv), both minimized.
fn pareto_points(sweep_csv: &str) -> Result<String, Error> {
    let mut lines = sweep_csv.lines();
    let header = lines.next().unwrap_or_default();
    if header != SweepTable::CSV_HEADER {
        return Err(Error::InvalidConfig {
            reason: format!("sweep.csv has unexpected header `{header}`"),
        });
    }
    let mut rows: Vec<(Vec<String>, f64, f64)> = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(str::to_string).collect();
        if fields.len() != 6 {
            return Err(Error::InvalidConfig {
                reason: format!("sweep.csv row has {} fields, expected 6", fields.len()),
            });
        }
        let task: f64 = fields[2].parse().map_err(|_| Error::InvalidConfig {
            reason: format!("bad final_task_loss `{}` in sweep.csv", fields[2]),
        })?;
        let cv: f64 = fields[3].parse().map_err(|_| Error::InvalidConfig {
            reason: format!("bad final_expert_cv `{}` in sweep.csv", fields[3]),
        })?;
        rows.push((fields, task, cv));
    }
    let mut out = String::from(SweepTable::CSV_HEADER);
    out.push('\n');
    for (i, (fields, task, cv)) in rows.iter().enumerate() {
        let dominated = rows.iter().enumerate().any(|(j, (_, t2, c2))| {
            j != i && t2 <= task && c2 <= cv && (t2 < task || c2 < cv)
        });
        if !dominated {
            out.push_str(&fields.join(","));
            out.push('\n');
        }
    }
    Ok(out)
}

/// Long-format expert usage from one run record: step, expert index, and
/// the fraction of the batch that selected the expert.
fn usage_heatmap(run_dir: &Path) -> Result<String, Error> {
    let summary_path = run_dir.join("summary.json");
    let text = std::fs::read_to_string(&summary_path).map_err(|e| io_error(&summary_path, e))?;
    let summary: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Io {
            path: summary_path.display().to_string(),
            reason: format!("invalid summary.json: {e}"),
        })?;
    let batch_size = summary["summary"]["batch_size"].as_u64().ok_or_else(|| Error::Io {
        path: summary_path.display().to_string(),
        reason: "summary.json lacks summary.batch_size".to_string(),
    })? as f64;

    let activations_path = run_dir.join("activations.csv");
    let text =
        std::fs::read_to_string(&activations_path).map_err(|e| io_error(&activations_path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let experts = header.split(',').count().saturating_sub(1);
    if experts == 0 {
        return Err(Error::InvalidConfig {
            reason: format!("{} has no expert columns", activations_path.display()),
        });
    }
    let mut out = String::from("step,expert,fraction\n");
    use std::fmt::Write as _;
    for line in lines {
        let mut fields = line.split(',');
        let step = fields.next().unwrap_or_default();
        for (e, field) in fields.enumerate() {
            let count: f64 = field.parse().map_err(|_| Error::InvalidConfig {
                reason: format!("bad activation count `{field}` in {}", activations_path.display()),
            })?;
            let _ = writeln!(out, "{step},{e},{}", count / batch_size);
        }
    }
    Ok(out)
}
