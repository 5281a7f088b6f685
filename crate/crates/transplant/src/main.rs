use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use transplant::cli::{self, Experiment, RunConfig};
use transplant::core::surgery::Strategy;
use transplant::corpus::Domain;
use transplant::{Error, Result};

#[derive(Parser)]
#[command(name = "transplant", version, about = "Modular layer transplantation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for independent experiment jobs.
    #[arg(long)]
    jobs: Option<usize>,
    /// Base or recipient model file.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Donor checkpoint file.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    position: Option<usize>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    alpha: Option<f32>,
    #[arg(long = "topk-fraction")]
    topk_fraction: Option<f64>,
    /// Record wall-clock training time in reports.
    #[arg(long)]
    timing: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a base model from scratch.
    Pretrain(Wrapped),
    /// Save untrained base layers as an organ checkpoint.
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        start: Option<usize>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a donor organ behind the frozen base embedding and head.
    TrainDonor(Wrapped),
    /// Integrate a checkpoint into a recipient, recover and evaluate.
    Transplant(Wrapped),
    /// Evaluate a saved model on the corpus splits.
    Evaluate(Wrapped),
    SweepPositions(Wrapped),
    MultiOrgan {
        #[command(flatten)]
        common: Common,
        /// Largest organ count to evaluate.
        #[arg(long, default_value_t = 2)]
        organs: usize,
    },
    CompareMethods(Wrapped),
    CrossDomain(Wrapped),
    /// Every protocol end to end into one report bundle.
    FullStudy(Wrapped),
    /// Run the experiment named in the config file.
    Run(Wrapped),
    /// Write a synthetic text corpus.
    SynthCorpus {
        #[arg(long)]
        domain: Domain,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Wrapped {
    #[command(flatten)]
    common: Common,
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if let Some(j) = c.jobs {
        cfg.jobs = j;
    }
    if let Some(m) = &c.model {
        cfg.paths.base_model = Some(m.clone());
    }
    if let Some(k) = &c.checkpoint {
        cfg.paths.checkpoint = Some(k.clone());
    }
    if let Some(p) = c.position {
        cfg.study.position = p;
    }
    if let Some(s) = c.strategy {
        cfg.study.strategy = s;
    }
    if let Some(r) = c.rank {
        cfg.study.baselines.lora_rank = r;
    }
    if let Some(a) = c.alpha {
        cfg.study.baselines.lora_alpha = a;
    }
    if let Some(f) = c.topk_fraction {
        cfg.study.baselines.topk_fraction = f;
    }
    cfg.timing |= c.timing;
    cfg.resolved()
}

fn print<T: serde::Serialize>(value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn run_experiment(cfg: &RunConfig, exp: Experiment, organs: usize) -> Result<()> {
    match exp {
        Experiment::Pretrain => print(&cli::cmd_pretrain(cfg)?.1),
        Experiment::Extract => {
            let start = cfg
                .study
                .extraction_start
                .unwrap_or_else(|| transplant::core::surgery::default_extraction_start(cfg.model.num_layers));
            let path = cli::cmd_extract(cfg, start, cfg.study.organ_size)?;
            print(&cli::describe_checkpoint(&path)?)
        }
        Experiment::TrainDonor => {
            cli::cmd_train_donor(cfg)?;
            print(&cli::describe_checkpoint(&cfg.checkpoint_path())?)
        }
        Experiment::Transplant => print(&cli::cmd_transplant(cfg, cfg.study.position, cfg.study.strategy)?),
        Experiment::Evaluate => print(&cli::cmd_evaluate(cfg, &cfg.base_model_path())?),
        Experiment::SweepPositions => print(&cli::cmd_sweep_positions(cfg)?),
        Experiment::MultiOrgan => print(&cli::cmd_multi_organ(cfg, organs)?),
        Experiment::CompareMethods => print(&cli::cmd_compare_methods(cfg)?),
        Experiment::CrossDomain => print(&cli::cmd_cross_domain(cfg)?),
        Experiment::FullStudy => {
            let out = cli::cmd_full_study(cfg)?;
            for f in out.files {
                println!("{}", out.dir.join(f).display());
            }
            Ok(())
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let (common, exp, organs) = match cli.command {
        Command::SynthCorpus {
            domain,
            samples,
            seed,
            out,
        } => {
            let n = cli::cmd_synth_corpus(domain, samples, seed, &out)?;
            println!("wrote {n} lines to {}", out.display());
            return Ok(());
        }
        Command::Extract { common, start, count } => {
            let mut cfg = load_config(&common)?;
            cfg.study.extraction_start = start.or(cfg.study.extraction_start);
            cfg.study.organ_size = count.unwrap_or(cfg.study.organ_size);
            return run_experiment(&cfg, Experiment::Extract, 0);
        }
        Command::MultiOrgan { common, organs } => (common, Some(Experiment::MultiOrgan), organs),
        Command::Pretrain(w) => (w.common, Some(Experiment::Pretrain), 0),
        Command::TrainDonor(w) => (w.common, Some(Experiment::TrainDonor), 0),
        Command::Transplant(w) => (w.common, Some(Experiment::Transplant), 0),
        Command::Evaluate(w) => (w.common, Some(Experiment::Evaluate), 0),
        Command::SweepPositions(w) => (w.common, Some(Experiment::SweepPositions), 0),
        Command::CompareMethods(w) => (w.common, Some(Experiment::CompareMethods), 0),
        Command::CrossDomain(w) => (w.common, Some(Experiment::CrossDomain), 0),
        Command::FullStudy(w) => (w.common, Some(Experiment::FullStudy), 0),
        Command::Run(w) => (w.common, None, 0),
    };
    let cfg = load_config(&common)?;
    let exp = exp
        .or(cfg.experiment)
        .ok_or_else(|| Error::Input("the config names no experiment".into()))?;
    let organs = if exp == Experiment::MultiOrgan && organs == 0 {
        cfg.study.multi_organ_positions.len()
    } else {
        organs
    };
    run_experiment(&cfg, exp, organs)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NOT_LOG", "warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Core(transplant::core::Error::Compatibility(fields)) = &e {
                for f in fields {
                    eprintln!("  {f}");
                }
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
