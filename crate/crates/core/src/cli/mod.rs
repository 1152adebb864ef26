//! The `hyena-distill` command line.
//!
//! Every subcommand works inside one output directory (`--out`), guarded by
//! a lock file. Artifacts have stable names:
//!
//! | file | written by |
//! |---|---|
//! | `config.resolved.toml` | every command |
//! | `corpus.tok` | `ingest` |
//! | `teacher.ckpt`, `hyena_pretrained.ckpt` | `pretrain` |
//! | `activations/{train,val}_layer{i}.hyad` | `dump-activations` |
//! | `student_pkt.ckpt`, `student_jkt.ckpt` | `distill` |
//! | `search.md`, `search.csv` | `distill --mode search` |
//! | `student_pkt_finetune.ckpt`, `student_jkt_finetune.ckpt` | `finetune` |
//! | `eval.csv`, `eval/{name}.json` | `eval` |
//! | `bench.csv`, `bench.json` | `bench` |
//! | `report.md` | `report` |
//! | `logs/{name}.csv` | every training stage |
//!
//! Training stages keep a `{name}.partial.ckpt` with optimizer state while
//! running, so re-running a command continues where it stopped; a finished
//! artifact is never recomputed.

mod commands;
mod config;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

pub use config::{apply_override, BenchConfig, DataConfig, RunConfig, SearchConfig};

use crate::Error;

#[derive(Debug, Parser)]
#[command(
    name = "hyena-distill",
    version,
    about = "Distill an attention decoder into a Hyena decoder"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `--set pkt.batch_size=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory holding every artifact of the run.
    #[arg(long, short, global = true, default_value = "run")]
    pub out: PathBuf,
    /// Seed for data sampling, initialisation and every stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PretrainRole {
    /// Attention teacher.
    Teacher,
    /// Hyena model trained from scratch.
    Hyena,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DistillMode {
    Pkt,
    Jkt,
    /// Last-layer learning-rate / batch-size grid.
    Search,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FinetuneFrom {
    Pkt,
    Jkt,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tokenize text files (or generate a synthetic corpus) into corpus.tok.
    Ingest {
        /// Text files; overrides data.inputs.
        #[arg(long)]
        input: Vec<PathBuf>,
        /// Size of the generated corpus when no input is given.
        #[arg(long)]
        synthetic_bytes: Option<usize>,
    },
    /// Next-token training from random initialisation.
    Pretrain {
        #[arg(long, value_enum, default_value = "teacher")]
        role: PretrainRole,
    },
    /// Store the teacher's per-layer outputs for distillation.
    DumpActivations,
    /// Train a Hyena student to match the teacher layer outputs.
    Distill {
        #[arg(long, value_enum)]
        mode: DistillMode,
    },
    /// Cross-entropy fine-tune of a distilled student.
    Finetune {
        #[arg(long, value_enum, default_value = "pkt")]
        from: FinetuneFrom,
    },
    /// Validation perplexity of checkpoints (all known ones by default).
    Eval {
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// Mixer forward-time scaling benchmark.
    Bench,
    /// Render report.md from the eval, bench and search outputs.
    Report,
    /// Every stage in order: ingest, pretrain (teacher and Hyena), dump
    /// activations, PKT, JKT, fine-tune, eval, bench, report.
    Pipeline {
        /// Scale the training budgets to finish in about this many minutes.
        #[arg(long)]
        budget_minutes: Option<f64>,
        /// Skip the scaling benchmark.
        #[arg(long)]
        skip_bench: bool,
    },
}

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const MISSING_FILE: i32 = 4;
    pub const IO: i32 = 5;
    pub const DATA: i32 = 6;
    pub const NUMERIC: i32 = 7;
    pub const LOCKED: i32 = 8;
}

fn category(e: &Error) -> (&'static str, i32) {
    match e {
        Error::Config(_) | Error::MixerKind { .. } | Error::Precision { .. } => {
            ("config", exit::CONFIG)
        }
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
            ("missing-file", exit::MISSING_FILE)
        }
        Error::Io(_) => ("io", exit::IO),
        Error::Corrupt(_) | Error::Magic { .. } | Error::Provenance(_) | Error::Data(_) => {
            ("data", exit::DATA)
        }
        Error::Numeric(_) | Error::Diverged { .. } => ("numeric", exit::NUMERIC),
        Error::Shape(_) | Error::Graph(_) | Error::Bench(_) => ("internal", exit::FAILURE),
    }
}

/// Exclusive lock on an output directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self, String> {
        let path = dir.join(".lock");
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    let _ = writeln!(f, "{}", std::process::id());
                    return Ok(RunLock { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let holder = std::fs::read_to_string(&path).unwrap_or_default();
                    let pid = holder.trim().parse::<u32>().ok();
                    let alive = pid.is_some_and(|p| {
                        !Path::new("/proc").exists() || Path::new(&format!("/proc/{p}")).exists()
                    });
                    if alive {
                        return Err(format!(
                            "{} is locked by process {}",
                            dir.display(),
                            holder.trim()
                        ));
                    }
                    let _ = std::fs::remove_file(&path);
                }
                Err(e) => return Err(format!("cannot create {}: {e}", path.display())),
            }
        }
        Err(format!("cannot lock {}", dir.display()))
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                exit::USAGE
            } else {
                exit::OK
            };
        }
    };
    if let Err(e) = std::fs::create_dir_all(&cli.out) {
        eprintln!("error[io]: cannot create {}: {e}", cli.out.display());
        return exit::IO;
    }
    let _lock = match RunLock::acquire(&cli.out) {
        Ok(l) => l,
        Err(msg) => {
            eprintln!("error[locked]: {msg}");
            return exit::LOCKED;
        }
    };
    match commands::execute(&cli) {
        Ok(()) => exit::OK,
        Err(e) => {
            let (cat, code) = category(&e);
            eprintln!("error[{cat}]: {e}");
            code
        }
    }
}
