//! `mcmf`: run bidding experiments, sparsity sweeps and ablations, generate
//! synthetic logs and convert iPinYou-style logs.
//!
//! Without `--config` experiments use the synthetic benchmark; the full
//! default config is printed at the end of `mcmf --help`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use mcmf_core::data::{
    convert_ipinyou, CanonicalWriter, ColumnMap, IpinyouOptions, SynthConfig, SyntheticLog, TimestampFormat,
};
use mcmf_core::harness::{
    load_config, run_ablation, run_experiment, sweep_sparsity, ControllerKind, ExperimentSpec, HarnessError,
    LogSource, BudgetPreset,
};
use mcmf_core::mcmf::FeatureSet;

#[derive(Parser)]
#[command(name = "mcmf", version, about = "Real-time bidding controller lab")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Replay every condition × controller × trial; writes metrics.csv,
    /// trace.csv and manifest.toml.
    Run(ExperimentArgs),
    /// Dropout sweep with shared per-trial masks; writes sweep_raw.csv,
    /// sweep_summary.csv and manifest.toml.
    SweepSparsity {
        #[command(flatten)]
        common: ExperimentArgs,
        /// Comma-separated dropout probabilities [default: 0.1,...,0.9].
        #[arg(long, value_delimiter = ',')]
        p_list: Option<Vec<f64>>,
        /// Trials per probability [default: 100].
        #[arg(long)]
        sweep_trials: Option<usize>,
    },
    /// The learning controller under NG, PO, PI and FULL inputs; writes
    /// ablation.csv and manifest.toml.
    Ablation(ExperimentArgs),
    /// Write a synthetic log in the canonical format.
    GenSynthetic {
        /// Output file.
        #[arg(long)]
        out: PathBuf,
        /// TOML file with generator settings; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of records [default: 100000].
        #[arg(long)]
        n: Option<usize>,
        /// Generator seed [default: 1].
        #[arg(long)]
        seed: Option<u64>,
        /// True click rate [default: 0.05].
        #[arg(long)]
        ctr: Option<f64>,
        /// True conversion rate given a click [default: 0.1].
        #[arg(long)]
        cvr: Option<f64>,
    },
    /// Map a delimited raw log with joined predictions and labels onto the
    /// canonical format.
    ConvertIpinyou {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Zero-based positions, e.g. `ts=1,pctr=5,pcvr=6,market_price=3,click=7,conversion=8`.
        #[arg(long)]
        columns: String,
        /// Field delimiter; `tab` or a single character.
        #[arg(long, default_value = "tab")]
        delimiter: String,
        /// The first row is a header.
        #[arg(long)]
        header: bool,
        #[arg(long, value_enum, default_value_t = TsFormat::Ipinyou)]
        ts_format: TsFormat,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TsFormat {
    /// yyyyMMddHHmmssSSS, UTC.
    Ipinyou,
    /// Integer milliseconds since epoch.
    Millis,
}

#[derive(Clone, Copy, ValueEnum)]
enum Controller {
    Mcmf,
    Pid,
    Fixed,
}

#[derive(Clone, Copy, ValueEnum)]
enum Features {
    Ng,
    Po,
    Pi,
    Full,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment TOML or a manifest.toml from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory [default: out].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Canonical log file to replay instead of the configured source.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Trials [default: 1].
    #[arg(long)]
    trials: Option<usize>,
    /// Base seed for all derived seeds [default: 1].
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated controllers [default: mcmf,pid,fixed].
    #[arg(long, value_enum, value_delimiter = ',')]
    controllers: Option<Vec<Controller>>,
    /// Learning controller input features [default: full].
    #[arg(long, value_enum, ignore_case = true)]
    features: Option<Features>,
    /// Dropout probability applied to the log [default: 0].
    #[arg(long)]
    dropout: Option<f64>,
    /// Budget 182344 and PPC target 1800, single and multi constraint.
    #[arg(long, conflicts_with = "paper_tight")]
    paper_adequate: bool,
    /// Budget 22793 and PPC target 1800, single and multi constraint.
    #[arg(long)]
    paper_tight: bool,
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<ExperimentSpec, HarnessError> {
        let mut spec = match &self.config {
            Some(path) => load_config(path)?.0,
            None => ExperimentSpec::default(),
        };
        if let Some(out) = &self.out {
            spec.output_dir = out.clone();
        }
        if let Some(path) = &self.log {
            spec.log = LogSource::File { path: path.clone() };
        }
        if let Some(t) = self.trials {
            spec.trials = t;
        }
        if let Some(s) = self.seed {
            spec.base_seed = s;
        }
        if let Some(cs) = &self.controllers {
            spec.controllers = cs
                .iter()
                .map(|c| match c {
                    Controller::Mcmf => ControllerKind::Mcmf,
                    Controller::Pid => ControllerKind::Pid,
                    Controller::Fixed => ControllerKind::Fixed,
                })
                .collect();
        }
        if let Some(f) = self.features {
            spec.mcmf.feature_set = match f {
                Features::Ng => FeatureSet::Ng,
                Features::Po => FeatureSet::Po,
                Features::Pi => FeatureSet::Pi,
                Features::Full => FeatureSet::Full,
            };
        }
        if let Some(p) = self.dropout {
            spec.sim.dropout_p = p;
        }
        if self.paper_adequate {
            spec.apply_preset(BudgetPreset::Adequate);
        }
        if self.paper_tight {
            spec.apply_preset(BudgetPreset::Tight);
        }
        for c in &spec.conditions {
            println!(
                "condition {} budget={} ppc_e={}",
                c.name, c.budget, spec.constraints.ppc_expected
            );
        }
        Ok(spec)
    }
}

fn delimiter(raw: &str) -> Result<u8, HarnessError> {
    match raw {
        "tab" | "\\t" => Ok(b'\t'),
        s if s.len() == 1 => Ok(s.as_bytes()[0]),
        s => Err(HarnessError::Config(format!("delimiter must be one byte or `tab`, got `{s}`"))),
    }
}

fn io_err(path: &std::path::Path) -> impl Fn(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn execute(cmd: Cmd) -> Result<(), HarnessError> {
    match cmd {
        Cmd::Run(args) => {
            let spec = args.resolve()?;
            let runs = run_experiment(&spec)?;
            println!("wrote {} runs to {}", runs.len(), spec.output_dir.display());
        }
        Cmd::SweepSparsity {
            common,
            p_list,
            sweep_trials,
        } => {
            let mut spec = common.resolve()?;
            if let Some(p) = p_list {
                spec.sweep.p_list = p;
            }
            if let Some(t) = sweep_trials {
                spec.sweep.trials = t;
            }
            let rows = sweep_sparsity(&spec)?;
            println!("wrote {} summary rows to {}", rows.len(), spec.output_dir.display());
        }
        Cmd::Ablation(args) => {
            let spec = args.resolve()?;
            let rows = run_ablation(&spec)?;
            println!("wrote {} ablation rows to {}", rows.len(), spec.output_dir.display());
        }
        Cmd::GenSynthetic {
            out,
            config,
            n,
            seed,
            ctr,
            cvr,
        } => {
            let mut cfg = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
                    toml::from_str(&text).map_err(|e| HarnessError::Config(e.to_string().replace('\n', " ")))?
                }
                None => SynthConfig::default(),
            };
            cfg.n_records = n.unwrap_or(cfg.n_records);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.ctr_true = ctr.unwrap_or(cfg.ctr_true);
            cfg.cvr_true = cvr.unwrap_or(cfg.cvr_true);
            let records = SyntheticLog::new(cfg)?;
            let n = records.len();
            let file = File::create(&out).map_err(io_err(&out))?;
            let mut w = CanonicalWriter::new(BufWriter::new(file))?;
            for r in records {
                w.write(&r)?;
            }
            w.finish()?;
            println!("wrote {n} records to {}", out.display());
        }
        Cmd::ConvertIpinyou {
            input,
            output,
            columns,
            delimiter: delim,
            header,
            ts_format,
        } => {
            let opts = IpinyouOptions {
                columns: ColumnMap::parse(&columns)?,
                delimiter: delimiter(&delim)?,
                has_header: header,
                ts_format: match ts_format {
                    TsFormat::Ipinyou => TimestampFormat::IpinyouDigits,
                    TsFormat::Millis => TimestampFormat::EpochMillis,
                },
            };
            let raw = File::open(&input).map_err(io_err(&input))?;
            let out = File::create(&output).map_err(io_err(&output))?;
            let n = convert_ipinyou(BufReader::new(raw), BufWriter::new(out), &opts)?;
            println!("converted {n} records to {}", output.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let defaults = ExperimentSpec::default()
        .to_toml()
        .unwrap_or_default();
    let command = Cli::command().after_long_help(format!("Default experiment config:\n\n{defaults}"));
    let cli = match Cli::from_arg_matches(&command.get_matches()) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} msg={msg:?}", e.kind());
            ExitCode::FAILURE
        }
    }
}
