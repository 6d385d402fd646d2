//! `promptlab` command-line driver.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use promptlab::config::{ExperimentConfig, Precision};
use promptlab::prompts::StrategyKind;
use promptlab::Error;

#[derive(Debug, Parser)]
#[command(name = "promptlab", version, about = "Prompt tuning experiments on a frozen miniature dual encoder")]
pub struct Cli {
    /// Experiment config file (JSON); defaults apply to every missing field.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_parser = ["f32", "f64"])]
    pub precision: Option<String>,
    /// Worker threads for grid cells.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct Sources {
    /// Dataset manifest or directory.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Saved backbone directory.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        sigma_v: Option<f64>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        train_per_class: Option<usize>,
        #[arg(long)]
        test_per_class: Option<usize>,
        /// Generator seed, independent of the global seed.
        #[arg(long)]
        data_seed: Option<u64>,
    },
    /// Draw and save a random backbone.
    InitBackbone,
    /// Train one strategy on one few-shot episode.
    Train {
        #[command(flatten)]
        sources: Sources,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Evaluate saved prompts (or zero-shot) on the test split.
    Eval {
        #[command(flatten)]
        sources: Sources,
        /// Directory written by `train`.
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Run the strategies x shots x seeds grid.
    Matrix {
        #[command(flatten)]
        sources: Sources,
        #[arg(long, value_delimiter = ',')]
        strategies: Option<Vec<String>>,
        #[arg(long, value_delimiter = ',')]
        shots: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        no_shifts: bool,
    },
    /// Intra-class visual and inter-class text variance.
    Variance {
        #[command(flatten)]
        sources: Sources,
        #[arg(long)]
        prompts: Option<PathBuf>,
        /// `results.jsonl` from `matrix`; adds the gain-vs-variance table.
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Attention response maps between visual prompts and patches.
    AttnMap {
        #[command(flatten)]
        sources: Sources,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        images: Option<Vec<usize>>,
    },
    /// Train on the source split, evaluate on shifted targets.
    ShiftEval {
        #[command(flatten)]
        sources: Sources,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        prompts: Option<PathBuf>,
    },
}

fn parse_strategy(s: &str) -> promptlab::Result<StrategyKind> {
    s.parse()
}

/// Resolves the config file, then applies command-line overrides.
fn resolve(cli: &Cli) -> promptlab::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) if !p.exists() => {
            return Err(Error::Config(format!("config file {} does not exist", p.display())));
        }
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(p) = &cli.precision {
        cfg.precision = p.parse::<Precision>()?;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    let apply_sources = |cfg: &mut ExperimentConfig, s: &Sources| {
        if let Some(d) = &s.dataset {
            cfg.dataset.path = Some(d.clone());
        }
        if let Some(b) = &s.backbone {
            cfg.backbone = Some(b.clone());
        }
    };
    let apply_train = |cfg: &mut ExperimentConfig, t: &TrainArgs| -> promptlab::Result<()> {
        if let Some(s) = &t.strategy {
            cfg.strategy = parse_strategy(s)?;
        }
        if let Some(s) = t.shots {
            cfg.shots = s;
        }
        if let Some(e) = t.epochs {
            cfg.train.epochs = e;
        }
        if let Some(lr) = t.lr {
            cfg.train.initial_lr = lr;
        }
        if let Some(b) = t.batch_size {
            cfg.train.batch_size = b;
        }
        Ok(())
    };
    match &cli.command {
        Command::GenData {
            classes,
            sigma_v,
            rho,
            train_per_class,
            test_per_class,
            data_seed,
        } => {
            let spec = &mut cfg.dataset.synthetic;
            if let Some(v) = classes {
                spec.classes = *v;
            }
            if let Some(v) = sigma_v {
                spec.sigma_v = *v;
            }
            if let Some(v) = rho {
                spec.rho = *v;
            }
            if let Some(v) = train_per_class {
                spec.train_per_class = *v;
            }
            if let Some(v) = test_per_class {
                spec.test_per_class = *v;
            }
            if let Some(v) = data_seed {
                spec.seed = *v;
            }
        }
        Command::InitBackbone => {}
        Command::Train { sources, train } => {
            apply_sources(&mut cfg, sources);
            apply_train(&mut cfg, train)?;
        }
        Command::Eval { sources, strategy, .. } => {
            apply_sources(&mut cfg, sources);
            if let Some(s) = strategy {
                cfg.strategy = parse_strategy(s)?;
            }
        }
        Command::Matrix {
            sources,
            strategies,
            shots,
            seeds,
            epochs,
            no_shifts,
        } => {
            apply_sources(&mut cfg, sources);
            if let Some(list) = strategies {
                cfg.matrix.strategies = list.iter().map(|s| parse_strategy(s)).collect::<promptlab::Result<_>>()?;
            }
            if let Some(s) = shots {
                cfg.matrix.shots = s.clone();
            }
            if let Some(s) = seeds {
                cfg.matrix.seeds = s.clone();
            }
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            if *no_shifts {
                cfg.shifts.clear();
            }
        }
        Command::Variance { sources, .. } => apply_sources(&mut cfg, sources),
        Command::AttnMap {
            sources,
            train,
            layer,
            images,
            ..
        } => {
            apply_sources(&mut cfg, sources);
            apply_train(&mut cfg, train)?;
            if layer.is_some() {
                cfg.attention_layer = *layer;
            }
            if let Some(i) = images {
                cfg.attention_images = i.clone();
            }
        }
        Command::ShiftEval { sources, train, .. } => {
            apply_sources(&mut cfg, sources);
            apply_train(&mut cfg, train)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code(e: &Error) -> u8 {
    if e.is_validation() {
        3
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = resolve(&cli).and_then(|cfg| match cfg.precision {
        Precision::F32 => commands::run::<f32>(&cli.command, &cfg),
        Precision::F64 => commands::run::<f64>(&cli.command, &cfg),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let message = e.to_string().replace('\n', " ");
            eprintln!("error kind={} exit={code} message={}", e.kind(), serde_json::to_string(&message).expect("string"));
            ExitCode::from(code)
        }
    }
}
