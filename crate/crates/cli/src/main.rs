use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use doc_tuner::drift::{drift_probe, DriftProbe};
use doc_tuner::experiment::{report, run_dir_name, run_matrix, write_outputs, ExperimentConfig};
use doc_tuner::selftest::{pca_selftest, SelftestConfig};
use doc_tuner::trainer::Method;
use doc_tuner::Error;

#[derive(Debug, Parser)]
#[command(name = "doc-tuner", version, about = "Continual LoRA fine-tuning with tracked orthogonal gradient cuts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON experiment config; missing fields take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "results")]
    out: PathBuf,
    /// Run a single method (doc, seq_lora, doc_ablation, per_task_reference).
    #[arg(long, global = true)]
    method: Option<Method>,
    /// Number of tasks in the stream.
    #[arg(long, global = true)]
    tasks: Option<usize>,
    #[arg(long, global = true)]
    quiet: bool,
    /// Print the mean wall-clock duration of a training step per run.
    #[arg(long, global = true)]
    time: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train every (method, seed) pair and write metrics, logs and checkpoints.
    Run,
    /// Track gradient and coordinate drift of fixed task-1 samples.
    DriftProbe,
    /// Check the component tracker against batch PCA on a Gaussian stream.
    PcaSelftest,
    /// Recompute metrics from a finished run directory and compare with summary.json.
    Report,
}

/// Exit 1 for bad input, 2 for failures while running.
enum Failure {
    Input(Error),
    Runtime(Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_json_file(path).map_err(Failure::Input)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(method) = cli.method {
        cfg.methods = vec![method];
    }
    if let Some(tasks) = cli.tasks {
        cfg.tasks = tasks;
    }
    cfg.validate().map_err(Failure::Input)?;
    Ok(cfg)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn cmd_run(cli: &Cli) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    let outcomes = run_matrix(&cfg).map_err(|e| {
        if e.is_validation() {
            Failure::Input(e)
        } else {
            Failure::Runtime(e)
        }
    })?;
    let summary = write_outputs(&cli.out, &outcomes).map_err(Failure::Runtime)?;
    if !cli.quiet {
        println!("{:<20} {:>6} {:>8} {:>8} {:>8}", "method", "seed", "AA", "BWT", "FWT");
        for r in &summary.runs {
            println!(
                "{:<20} {:>6} {:>8.4} {:>8} {:>8}",
                r.method.name(),
                r.seed,
                r.aa,
                fmt_opt(r.bwt),
                fmt_opt(r.fwt)
            );
        }
        for (name, m) in &summary.medians {
            println!("median {name:<13} AA {:.4} BWT {} FWT {}", m.aa, fmt_opt(m.bwt), fmt_opt(m.fwt));
        }
        println!("results in {}", cli.out.display());
    }
    if cli.time {
        for r in &summary.runs {
            println!("{} mean step {:.3e} s", run_dir_name(r.method, r.seed), r.mean_step_seconds);
        }
    }
    Ok(())
}

fn write_probe(dir: &Path, name: &str, probe: &DriftProbe) -> Result<(), Error> {
    let json = dir.join(format!("{name}.json"));
    let file = fs::File::create(&json).map_err(|e| Error::Io {
        path: json.display().to_string(),
        source: e,
    })?;
    serde_json::to_writer_pretty(BufWriter::new(file), probe)?;
    let csv_path = dir.join(format!("{name}.csv"));
    let file = fs::File::create(&csv_path).map_err(|e| Error::Io {
        path: csv_path.display().to_string(),
        source: e,
    })?;
    probe.write_csv(BufWriter::new(file))
}

fn cmd_drift(cli: &Cli) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    let method = cfg.methods[0];
    fs::create_dir_all(&cli.out)
        .map_err(|e| Failure::Runtime(Error::Io {
            path: cli.out.display().to_string(),
            source: e,
        }))?;
    for &seed in &cfg.seeds {
        let probe = drift_probe(&cfg.run_config(method, seed), &cfg.task_specs(seed), &cfg.probe)
            .map_err(Failure::Runtime)?;
        let name = format!("drift-{}", run_dir_name(method, seed));
        write_probe(&cli.out, &name, &probe).map_err(Failure::Runtime)?;
        if cli.quiet {
            continue;
        }
        let last_task = cfg.tasks.min(2) as u32;
        if let Some(p) = probe.end_of_task(last_task) {
            let tracked_wins = p
                .coord_tracked
                .iter()
                .zip(&p.coord_frozen)
                .filter(|(t, f)| matches!((t, f), (Some(t), Some(f)) if t >= f))
                .count();
            let stat = |s: Option<doc_tuner::drift::Stat>| {
                s.map_or_else(|| "-".to_string(), |s| format!("{:.4} ± {:.4}", s.mean, s.std))
            };
            println!(
                "seed {seed} end of task {last_task} (step {}): grad vs first {}, grad vs mean {}, coord tracked {}, coord frozen {}, tracked >= frozen for {tracked_wins}/{} anchors",
                p.step,
                stat(p.grad_vs_first_stat()),
                stat(p.grad_vs_mean_stat()),
                stat(p.coord_tracked_stat()),
                stat(p.coord_frozen_stat()),
                p.coord_tracked.len(),
            );
            if !p.excluded.is_empty() {
                println!("  excluded anchors (zero gradient): {:?}", p.excluded);
            }
        }
    }
    Ok(())
}

fn cmd_selftest(cli: &Cli) -> Result<(), Failure> {
    let cfg = SelftestConfig {
        seed: cli.seed.unwrap_or(0),
        ..SelftestConfig::default()
    };
    let report = pca_selftest(&cfg).map_err(Failure::Runtime)?;
    if !cli.quiet {
        for (k, c) in report.cosines.iter().enumerate() {
            println!(
                "component {}: |cos| = {c:.6} (oracle eigenvalue {:.4}, tracked norm {:.4})",
                k + 1,
                report.oracle_eigenvalues[k],
                report.tracked_norms.get(k).copied().unwrap_or(0.0)
            );
        }
        println!("threshold {}: {}", cfg.threshold, if report.passed { "pass" } else { "FAIL" });
    }
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Runtime(Error::Invariant(format!(
            "tracked components below {}: {:?}",
            cfg.threshold, report.cosines
        ))))
    }
}

fn cmd_report(cli: &Cli) -> Result<(), Failure> {
    let check = report(&cli.out).map_err(|e| match e {
        Error::Io { .. } => Failure::Input(e),
        other => Failure::Runtime(other),
    })?;
    if !cli.quiet {
        for r in &check.recomputed.runs {
            println!(
                "{:<28} AA {:.4} BWT {} FWT {}",
                run_dir_name(r.method, r.seed),
                r.aa,
                fmt_opt(r.bwt),
                fmt_opt(r.fwt)
            );
        }
    }
    if check.mismatches.is_empty() {
        if !cli.quiet {
            println!("all metrics match summary.json");
        }
        Ok(())
    } else {
        Err(Failure::Runtime(Error::Invariant(format!(
            "recomputed metrics differ from summary.json for {:?}",
            check.mismatches
        ))))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::Run => cmd_run(&cli),
        Command::DriftProbe => cmd_drift(&cli),
        Command::PcaSelftest => cmd_selftest(&cli),
        Command::Report => cmd_report(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Input(e) | Failure::Runtime(e)) = &f;
            eprintln!("error: {e}");
            ExitCode::from(f.code())
        }
    }
}
