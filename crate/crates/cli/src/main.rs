use std::path::PathBuf;
use std::process::ExitCode;

use attnreuse_cli::config::RunConfig;
use attnreuse_cli::{ablate, analyze, distill, gradcheck, sweep_ratio, CliError};
use attnreuse_core::distill::LossVariant;
use attnreuse_core::reuse::PatternSpec;
use clap::{Args, Parser, Subcommand};

/// Attention-map reuse and masked layer-to-layer distillation experiments.
#[derive(Debug, Parser)]
#[command(name = "attnreuse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parameter and MAC comparison of reuse patterns.
    Analyze(Common),
    /// Distill a pretrained teacher into a student.
    Distill(Common),
    /// Train one student per loss variant with shared seeds and masks.
    Ablate(Common),
    /// One run per mask ratio, optionally plus a linear ratio schedule.
    SweepRatio {
        #[command(flatten)]
        common: Common,
        /// Comma-separated constant ratios.
        #[arg(long, value_delimiter = ',', default_value = "0.4,0.6,0.8")]
        ratios: Vec<f64>,
        /// Also run the linear schedule from mask.ratio to mask.ratio_end.
        #[arg(long)]
        schedule: bool,
        /// Run settings in parallel.
        #[arg(long)]
        parallel: bool,
    },
    /// Finite-difference check of the distillation loss gradient.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Deliberately corrupt the matmul backward pass.
        #[arg(long)]
        corrupt_backward: bool,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Student pattern, or analysis patterns when repeated (`none`, `2by6`, `6by2-up`, `[0,1,0,3]`).
    #[arg(long)]
    pattern: Vec<String>,
    /// Sequence length: frames per utterance, or the analysis length.
    #[arg(long)]
    n: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    variant: Option<LossVariant>,
    /// Write SVG loss curves next to the metrics.
    #[arg(long)]
    plot: bool,
}

impl Common {
    fn load(&self, analysis: bool) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.steps {
            cfg.distill.steps = s;
        }
        if let Some(d) = &self.out_dir {
            cfg.out_dir = d.clone();
        }
        if let Some(v) = self.variant {
            cfg.distill.variant = v;
        }
        if analysis {
            if let Some(n) = self.n {
                cfg.analysis.n = n;
            }
            if !self.pattern.is_empty() {
                cfg.analysis.patterns = self.pattern.clone();
            }
        } else {
            if let Some(n) = self.n {
                cfg.data.n = n as usize;
            }
            match self.pattern.as_slice() {
                [] => {}
                [p] => cfg.student.pattern = PatternSpec::Name(p.clone()),
                _ => return Err(CliError::Usage("--pattern takes one student pattern here".into())),
            }
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<bool, CliError> {
    match cli.command {
        Command::Analyze(c) => {
            let cfg = c.load(true)?;
            let report = analyze(&cfg, &cfg.analysis.patterns)?;
            println!("{report}");
            Ok(true)
        }
        Command::Distill(c) => {
            let report = distill(&c.load(false)?, c.plot)?;
            println!("{report}");
            Ok(true)
        }
        Command::Ablate(c) => {
            let report = ablate(&c.load(false)?, c.plot)?;
            println!("{report}");
            Ok(true)
        }
        Command::SweepRatio {
            common,
            ratios,
            schedule,
            parallel,
        } => {
            let report = sweep_ratio(&common.load(false)?, &ratios, schedule, parallel, common.plot)?;
            println!("{report}");
            if let Some(row) = report.failed() {
                return Err(CliError::Numeric(format!(
                    "{}: {}",
                    row.label,
                    row.error.as_deref().unwrap_or_default()
                )));
            }
            Ok(true)
        }
        Command::Gradcheck {
            common,
            corrupt_backward,
        } => {
            let report = gradcheck(&common.load(false)?, corrupt_backward)?;
            println!("{report}");
            Ok(report.passed)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
