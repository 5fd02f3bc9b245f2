//! Command-line front end. Argument handling and file plumbing only.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config;
use crate::error::{Error, Result};
use crate::logs;
use crate::selftest;
use crate::sim::{self, ControllerSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_SELFTEST: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "gpmpc", version, about = "GP-based dual MPC for lane merging")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ControllerChoice {
    Gp,
    Cv,
    Both,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the closed-loop trial grid and write trial CSVs plus summaries.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "both")]
        controller: ControllerChoice,
        /// Also run GP-MPC seeded with the pre-training fixture.
        #[arg(long)]
        pretrain: bool,
        /// Number of grid points (overrides the config).
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Turn trial CSVs into time-lapse and error-vs-time tables.
    Plotdata {
        #[arg(required = true)]
        trials: Vec<PathBuf>,
        #[arg(long, default_value = "plotdata")]
        out: PathBuf,
        /// Steps between time-lapse frames.
        #[arg(long, default_value_t = 4)]
        stride: usize,
    },
    /// Fast invariant checks.
    Selftest,
    /// Regenerate the pre-training fixture.
    PretrainFixture {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Destination; defaults to the fixture path named by the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::MissingFixture(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn main_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(stderr, "{e}");
                return EXIT_CONFIG;
            }
            let _ = write!(stdout, "{e}");
            return EXIT_OK;
        }
    };
    match execute(cli.command, stdout, stderr) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cmd: Command, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Run { config, controller, pretrain, trials, out, jobs, seed } => {
            let loaded = config::load(config.as_deref())?;
            let mut scenario = loaded.scenario;
            if let Some(n) = trials {
                if n == 0 {
                    return Err(Error::Config("--trials must be at least 1".into()));
                }
                scenario.grid.count = n;
            }
            if let Some(s) = seed {
                scenario.seed = s;
            }
            let mut specs = match controller {
                ControllerChoice::Gp => vec![ControllerSpec::GP],
                ControllerChoice::Cv => vec![ControllerSpec::CV],
                ControllerChoice::Both => vec![ControllerSpec::GP, ControllerSpec::CV],
            };
            let data = if pretrain {
                specs.push(ControllerSpec::GP_PRETRAINED);
                Some(sim::read_training_csv(&loaded.pretrain_fixture)?)
            } else {
                None
            };
            let batch = sim::run_batch(&scenario, &specs, data.as_ref(), jobs)?;
            let paths = logs::write_batch(&out, scenario.seed, &scenario.grid.points(), &batch.summaries, &batch.records)?;
            write!(stdout, "{}", logs::format_summary_table(&batch.summaries))?;
            writeln!(stdout, "wrote {} trial files and summary.json to {}", paths.len(), out.display())?;
            Ok(EXIT_OK)
        }
        Command::Plotdata { trials, out, stride } => {
            if stride == 0 {
                return Err(Error::Config("--stride must be at least 1".into()));
            }
            let records = trials.iter().map(|p| logs::read_trial_csv(p)).collect::<Result<Vec<_>>>()?;
            let res = logs::write_plotdata(&records, &out, stride)?;
            for w in &res.warnings {
                writeln!(stderr, "warning: {w}")?;
            }
            writeln!(stdout, "wrote {} files to {}", res.files.len(), out.display())?;
            Ok(EXIT_OK)
        }
        Command::Selftest => {
            let mut ok = true;
            for c in selftest::run_all() {
                ok &= c.passed;
                writeln!(stdout, "{:<18} {}  {}", c.name, if c.passed { "PASS" } else { "FAIL" }, c.detail)?;
            }
            Ok(if ok { EXIT_OK } else { EXIT_SELFTEST })
        }
        Command::PretrainFixture { config, out } => {
            let loaded = config::load(config.as_deref())?;
            let dest = out.unwrap_or(loaded.pretrain_fixture);
            let set = sim::pretrain_set(&loaded.scenario)?;
            if let Some(dir) = dest.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            sim::write_training_csv(&dest, &set)?;
            writeln!(stdout, "wrote {} samples to {}", set.len(), display(&dest))?;
            Ok(EXIT_OK)
        }
    }
}

fn display(p: &Path) -> String {
    p.display().to_string()
}
