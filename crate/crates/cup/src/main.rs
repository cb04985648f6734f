use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use cup::corpus::load_dir;
use cup::generate::{generate_program, GenParams};
use cup::harness::{run_corpus, HarnessConfig};
use cup::report::Report;
use cup_core::analysis::analyze;
use cup_core::capability::DEFAULT_CAPACITY;
use cup_core::instrument::{instrument, LoweringMode};
use cup_core::ir::{parse_named, print, Module};
use cup_core::vm::{self, Config, Outcome};

/// Exit status when the guest hits a hardware fault.
const FAULT_EXIT: u8 = 42;

#[derive(Parser)]
#[command(name = "cup", version, about = "Capability-based memory-safety sanitizer for Mini-IR programs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Intrinsic,
    Expanded,
}

impl From<Mode> for LoweringMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Intrinsic => LoweringMode::Intrinsic,
            Mode::Expanded => LoweringMode::Expanded,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Json,
    Text,
}

#[derive(Subcommand)]
enum Command {
    /// Print the instrumentation plan for a module.
    Analyze {
        file: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        report: ReportFormat,
    },
    /// Instrument a module; provenance goes to `<out>.prov.json`.
    Instrument {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "expanded")]
        mode: Mode,
    },
    /// Run a module in the VM. Exits 0 on exit(0), 1 on a nonzero exit and
    /// 42 on a hardware fault.
    Run {
        file: PathBuf,
        #[arg(long, num_args = 1.., allow_negative_numbers = true)]
        args: Vec<i64>,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_CAPACITY)]
        table_size: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run every case of a corpus and report verdicts. Exits nonzero on any
    /// false positive, false negative, or malformed case.
    Harness {
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "expanded")]
        mode: Mode,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Synthetic checks for the bounds-check microbenchmark; 0 skips it.
        #[arg(long, default_value_t = 10_000_000)]
        bench_checks: u64,
    },
    /// Write generated cases in corpus layout.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        count: u64,
        #[arg(long, default_value_t = GenParams::default().n_objects)]
        n_objects: usize,
        #[arg(long, default_value_t = GenParams::default().max_len)]
        max_len: u64,
        #[arg(long, default_value_t = GenParams::default().n_accesses)]
        n_accesses: usize,
        #[arg(long, default_value_t = GenParams::default().bug_rate)]
        bug_rate: f64,
    },
    /// Parse and validate a module, reporting every problem found.
    Validate { file: PathBuf },
}

fn load(path: &Path) -> Result<Module> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_named(&text, &path.display().to_string()).map_err(|e| anyhow::anyhow!("{e}"))
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Analyze { file, report } => {
            let plan = analyze(&load(&file)?);
            match report {
                ReportFormat::Json => println!("{}", serde_json::to_string_pretty(&plan)?),
                ReportFormat::Text => {
                    for a in &plan.allocations {
                        println!("{:?} {:?} {:?} size={:?}", a.site, a.region, a.classification, a.size);
                    }
                    for e in &plan.escapes {
                        println!("escape {:?}", e);
                    }
                    println!("{} dereference sites, {} global rewrites", plan.derefs.len(), plan.global_rewrites.len());
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Instrument { input, output, mode } => {
            let im = instrument(&load(&input)?, mode.into()).map_err(|e| anyhow::anyhow!("{e}"))?;
            fs::write(&output, print(&im.module)).with_context(|| format!("writing {}", output.display()))?;
            let mut prov = output.clone().into_os_string();
            prov.push(".prov.json");
            fs::write(&prov, serde_json::to_string_pretty(&im.provenance)? + "\n")?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { file, args, trace, table_size, seed } => {
            let m = load(&file)?;
            let config = Config { table_capacity: table_size, seed, trace: trace.is_some(), ..Config::default() };
            let args: Vec<u64> = args.into_iter().map(|a| a as u64).collect();
            let r = vm::run(&m, &args, &config);
            std::io::stdout().write_all(&r.output)?;
            if let Some(path) = trace {
                fs::write(&path, serde_json::to_string(&r.trace)?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(match &r.outcome {
                Outcome::Exit { code: 0 } => ExitCode::SUCCESS,
                Outcome::Exit { .. } => ExitCode::from(1),
                Outcome::HardwareFault { .. } => {
                    eprintln!("{}", serde_json::to_string(&r.outcome)?);
                    ExitCode::from(FAULT_EXIT)
                }
                Outcome::VmError { .. } => {
                    eprintln!("{}", serde_json::to_string(&r.outcome)?);
                    ExitCode::from(2)
                }
            })
        }
        Command::Harness { corpus, mode, report, bench_checks } => {
            let cases = load_dir(&corpus)?;
            let hc = HarnessConfig { mode: mode.into(), ..HarnessConfig::default() };
            let mut rep = Report::new(hc.mode, run_corpus(&cases, &hc));
            if bench_checks > 0 {
                rep.microbenchmark = Some(cup::bench::run(bench_checks));
            }
            print!("{}", rep.table());
            if let Some(path) = report {
                fs::write(&path, serde_json::to_string_pretty(&rep)? + "\n")
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(if rep.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Generate { out, seed, count, n_objects, max_len, n_accesses, bug_rate } => {
            let params = GenParams { n_objects, max_len, n_accesses, bug_rate };
            if let Err(e) = params.check() {
                bail!(e);
            }
            for s in seed..seed + count {
                generate_program(s, &params).save(&out)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { file } => {
            load(&file)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}
