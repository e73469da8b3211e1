//! Command-line entry point.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::config::{default_out_root, ExperimentConfig};
use super::experiment::Experiment;
use super::studies::{self, SweepAxis, VerifyPlan};
use crate::error::{KestError, Result};
use crate::evaluation::verify::Precision;
use crate::evaluation::{sample_generations, write_metrics_csv, EvalConfig, MetricsRow};
use crate::selftrain::Mode;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_TRAINING: i32 = 3;
pub const EXIT_VERIFICATION: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "kest", version, about = "Kernel-based self-training for attribute-controllable generation")]
pub struct Cli {
    /// Output root (default: $KEST_OUT_DIR or ./runs).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Replaces the configured seed list with this single seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and its split into jsonl files.
    Corpus { config: PathBuf },
    /// Base training plus self-training for every configured seed and mode.
    Train {
        config: PathBuf,
        /// Comma-separated subset of modes.
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<Mode>>,
    },
    /// Sample generations from a finished run directory.
    Generate {
        run: PathBuf,
        #[arg(long, default_value_t = 10)]
        per_class: usize,
        /// Output file (default: stdout).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Recompute metrics for a finished run directory.
    Eval { run: PathBuf },
    /// Vary one self-training setting over a list of values.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// AG vs NAG pseudo-text cost over sequence lengths.
    Timing {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![8, 16, 32, 48])]
        lengths: Vec<usize>,
        /// Trained checkpoint; a fresh model is used otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run every numerical verifier.
    Verify {
        #[arg(long, default_value = "f64")]
        precision: Precision,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1000)]
        invariant_trials: usize,
    },
    /// Compare finished runs: mode table and history plots.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

pub fn exit_code(e: &KestError) -> i32 {
    match e {
        KestError::Config(_) | KestError::Split { .. } => EXIT_CONFIG,
        KestError::Training(_) => EXIT_TRAINING,
        KestError::Verification(_) => EXIT_VERIFICATION,
        _ => EXIT_OTHER,
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut c = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        c.seeds = vec![s];
    }
    Ok(c)
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return EXIT_CONFIG;
        }
        // Fails only if a pool already exists (e.g. repeated in-process calls).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cli: &Cli) -> Result<i32> {
    let root = cli.out.clone().unwrap_or_else(default_out_root);
    match &cli.command {
        Command::Corpus { config } => {
            let exp = Experiment::open(load_config(config, cli.seed)?, &root)?;
            let b = &exp.data.bundle;
            println!(
                "{}: |D_l|={} |D_u|={} |test|={} vocab={}",
                exp.dir.join("corpus").display(),
                b.labeled.len(),
                b.unlabeled.len(),
                b.test.len(),
                exp.data.corpus.vocab.len()
            );
        }
        Command::Train { config, modes } => {
            let mut c = load_config(config, cli.seed)?;
            if let Some(m) = modes {
                c.modes = m.clone();
            }
            let exp = Experiment::open(c, &root)?;
            let records = exp.run_all()?;
            for r in &records {
                println!(
                    "seed {} {:<15} oracle_acc {:.4} self_bleu {:.4} model_ppl {:.3} ({:.1}s)",
                    r.seed,
                    r.mode.name(),
                    r.metrics.oracle_control_acc,
                    r.metrics.self_bleu,
                    r.metrics.model_ppl,
                    r.runtime_s
                );
            }
            println!("{}", exp.dir.display());
        }
        Command::Generate { run, per_class, output } => {
            let exp = Experiment::locate(run)?;
            let model = exp.load_run_model::<f32>(run)?;
            let eval = EvalConfig { samples_per_class: *per_class, ..exp.config.eval };
            let seed = cli.seed.unwrap_or(exp.config.seeds[0]);
            let held = exp.data.held_out(&exp.config.selftrain);
            let gens = sample_generations(&model, held, &eval, &exp.config.decode, seed)?;
            match output {
                Some(p) => exp.write_generations(p, &gens)?,
                None => {
                    let c = &exp.data.corpus;
                    for g in &gens {
                        let line = serde_json::json!({
                            "text": crate::tokenizer::decode(&g.tokens, &c.vocab)?,
                            "label": c.class_names[g.label],
                        });
                        println!("{line}");
                    }
                }
            }
        }
        Command::Eval { run } => {
            let exp = Experiment::locate(run)?;
            let record_path = run.join("run_record.json");
            let (mode, seed) = match super::experiment::RunRecord::load(&record_path) {
                Ok(r) => (r.mode, r.seed),
                Err(_) => (Mode::Kest, cli.seed.unwrap_or(exp.config.seeds[0])),
            };
            let model = exp.load_run_model::<f32>(run)?;
            let evaluators = exp.evaluators()?;
            let (report, _) = exp.score(&model, &exp.st_config(mode, seed), &evaluators)?;
            let out = root.join("eval");
            std::fs::create_dir_all(&out)?;
            let path = out.join("metrics.csv");
            let row = MetricsRow { run: run.display().to_string(), mode: mode.name().into(), seed, epoch: "final".into(), report };
            write_metrics_csv(&path, &[row], Some(&exp.header()))?;
            print!("{}", std::fs::read_to_string(&path)?);
        }
        Command::Sweep { config, axis, values } => {
            let exp = Experiment::open(load_config(config, cli.seed)?, &root)?;
            let out = studies::sweep(&exp, *axis, values)?;
            for (v, row) in &out.summary {
                let (acc, acc_sd) = row.metric("oracle_control_acc").unwrap_or_default();
                let (dist, _) = row.metric("dist").unwrap_or_default();
                println!("{axis}={v:<6} {:<15} oracle_acc {acc:.4} ± {acc_sd:.4} dist {dist:.4}", row.mode.name());
            }
            println!("{}", out.dir.join("sweep.csv").display());
        }
        Command::Timing { config, lengths, checkpoint } => {
            let c = load_config(config, cli.seed)?;
            let seed = c.seeds[0];
            let exp = Experiment::open(c, &root)?;
            let rows = studies::timing(&exp, lengths, checkpoint.as_deref(), seed)?;
            for r in &rows {
                println!(
                    "L={:<3} AG {:.4}s ({:.1} passes/item)  NAG {:.4}s ({:.1} passes/item)  speedup {:.1}x",
                    r.length, r.ag_wall_s, r.ag_passes_per_item, r.nag_wall_s, r.nag_passes_per_item, r.speedup()
                );
            }
            println!("{}", exp.dir.join("timing").join("timing.csv").display());
        }
        Command::Verify { precision, trials, invariant_trials } => {
            let plan = VerifyPlan { identity_trials: *trials, oracle_trials: 2 * *trials, invariant_trials: *invariant_trials };
            let reports = studies::verify_all(*precision, cli.seed.unwrap_or(0), plan)?;
            let text = studies::render_reports(&reports);
            std::fs::create_dir_all(&root)?;
            let path = root.join("verify_report.txt");
            std::fs::write(&path, &text)?;
            print!("{text}");
            if reports.iter().any(|r| !r.passed()) {
                eprintln!("verification failed; see {}", path.display());
                return Ok(EXIT_VERIFICATION);
            }
        }
        Command::Report { runs } => {
            let records = studies::collect_records(runs)?;
            let out = root.join("report");
            let rows = studies::report(&records, &out)?;
            for r in &rows {
                let (acc, sd) = r.metric("oracle_control_acc").unwrap_or_default();
                println!("{:<15} {:<14} n={} oracle_acc {acc:.4} ± {sd:.4}", r.mode.name(), r.variant, r.seeds.len());
            }
            println!("{}", out.join("report.csv").display());
        }
    }
    Ok(EXIT_OK)
}
