use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::warn;

use curvlab::harness::{self, DatasetSpec, EpsSpec, ExperimentConfig, Manifest, Stage};
use curvlab::model::Activation;

#[derive(Parser)]
#[command(
    name = "curvlab",
    version,
    about = "Curvature probing, attacks and curvature regularization"
)]
struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a baseline network with plain cross-entropy.
    Train(ExpArgs),
    /// Fine-tune with the curvature penalty; trains a baseline first when no
    /// checkpoint is given.
    FinetuneCure(ExpArgs),
    /// Attack a network and write per-sample outcomes and the ε sweep.
    Attack(ExpArgs),
    /// Hessian eigenvalue profiles and Frobenius estimates at eval points.
    Curvature(ExpArgs),
    /// Decision-region and loss-surface grids, attack-gap table and SPSA check.
    Surface(ExpArgs),
    /// Bound curves and the sandwich sweep on random quadratic models.
    Theory(ExpArgs),
    /// Run every stage listed in the configuration.
    Run(ExpArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetKind {
    TwoMoons,
    Gaussians,
    Spirals,
}

#[derive(Args, Clone, Default)]
struct ExpArgs {
    /// JSON experiment configuration; its values win over flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    master_seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Start from a saved network instead of training one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    dataset: Option<DatasetKind>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_eval: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long, value_enum)]
    activation: Option<ActivationArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr_start: Option<f64>,
    #[arg(long)]
    lr_end: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    h_max: Option<f64>,
    #[arg(long)]
    cure_epochs: Option<usize>,
    #[arg(long)]
    cure_lr_start: Option<f64>,
    #[arg(long)]
    cure_lr_end: Option<f64>,
    /// ℓ∞ budget as a fraction of the data bounding-box diagonal.
    #[arg(long, conflicts_with = "eps_absolute")]
    eps_fraction: Option<f64>,
    /// ℓ∞ budget in input units (pixel units for images).
    #[arg(long)]
    eps_absolute: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pgd_steps: Option<Vec<usize>>,
    #[arg(long)]
    eval_points: Option<usize>,
    /// Random quadratic models in the sandwich sweep.
    #[arg(long)]
    theory_models: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ActivationArg {
    Relu,
    Tanh,
}

impl From<ActivationArg> for Activation {
    fn from(a: ActivationArg) -> Self {
        match a {
            ActivationArg::Relu => Activation::Relu,
            ActivationArg::Tanh => Activation::Tanh,
        }
    }
}

/// Applies one flag: without a config file it sets the value, with one the
/// file's value stays and a warning names the ignored flag.
struct Overrides<'a> {
    cfg: &'a mut ExperimentConfig,
    from_file: bool,
}

impl Overrides<'_> {
    fn set<T>(&mut self, flag: &str, value: Option<T>, apply: impl FnOnce(&mut ExperimentConfig, T)) {
        let Some(v) = value else { return };
        if self.from_file {
            warn!("--{flag} conflicts with the config file; keeping the config value");
        } else {
            apply(self.cfg, v);
        }
    }
}

fn dataset_sizes(d: &mut DatasetSpec) -> (Option<&mut usize>, Option<&mut usize>, Option<&mut f64>) {
    match d {
        DatasetSpec::TwoMoons { n_train, n_eval, noise }
        | DatasetSpec::Spirals {
            n_train, n_eval, noise, ..
        } => (Some(n_train), Some(n_eval), Some(noise)),
        DatasetSpec::Gaussians { n_train, n_eval, .. } => (Some(n_train), Some(n_eval), None),
        DatasetSpec::Idx { .. } => (None, None, None),
    }
}

fn build_config(args: &ExpArgs, default_name: &str) -> curvlab::Result<ExperimentConfig> {
    let (mut cfg, from_file) = match &args.config {
        Some(path) => (ExperimentConfig::load(path)?, true),
        None => (
            ExperimentConfig::two_moons(default_name, 0, "runs/".to_string() + default_name),
            false,
        ),
    };
    let mut o = Overrides {
        cfg: &mut cfg,
        from_file,
    };
    o.set("name", args.name.clone(), |c, v| c.name = v);
    o.set("master-seed", args.master_seed, |c, v| c.master_seed = v);
    o.set("output-dir", args.output_dir.clone(), |c, v| c.output_dir = v);
    o.set("checkpoint", args.checkpoint.clone(), |c, v| c.checkpoint = Some(v));
    o.set("dataset", args.dataset, |c, v| {
        c.dataset = match v {
            DatasetKind::TwoMoons => DatasetSpec::TwoMoons {
                n_train: 1000,
                n_eval: 200,
                noise: 0.25,
            },
            DatasetKind::Gaussians => DatasetSpec::Gaussians {
                n_train: 1000,
                n_eval: 200,
                classes: 3,
                spread: 0.5,
            },
            DatasetKind::Spirals => DatasetSpec::Spirals {
                n_train: 1000,
                n_eval: 200,
                turns: 1.5,
                noise: 0.1,
            },
        }
    });
    o.set("n-train", args.n_train, |c, v| {
        if let (Some(n), _, _) = dataset_sizes(&mut c.dataset) {
            *n = v;
        }
    });
    o.set("n-eval", args.n_eval, |c, v| {
        if let (_, Some(n), _) = dataset_sizes(&mut c.dataset) {
            *n = v;
        }
    });
    o.set("noise", args.noise, |c, v| {
        if let (_, _, Some(n)) = dataset_sizes(&mut c.dataset) {
            *n = v;
        }
    });
    o.set("activation", args.activation, |c, v| {
        if !c.network.set_activation(v.into()) {
            warn!("--activation has no effect on an explicit layer list");
        }
    });
    o.set("epochs", args.epochs, |c, v| c.train.epochs = v);
    o.set("lr-start", args.lr_start, |c, v| c.train.lr_start = v);
    o.set("lr-end", args.lr_end, |c, v| c.train.lr_end = v);
    o.set("batch-size", args.batch_size, |c, v| c.train.batch_size = v);
    o.set("gamma", args.gamma, |c, v| c.cure.gamma = v);
    o.set("h-max", args.h_max, |c, v| c.cure.h_max = Some(v));
    o.set("cure-epochs", args.cure_epochs, |c, v| c.cure.epochs = v);
    o.set("cure-lr-start", args.cure_lr_start, |c, v| c.cure.lr_start = v);
    o.set("cure-lr-end", args.cure_lr_end, |c, v| c.cure.lr_end = v);
    o.set("eps-fraction", args.eps_fraction, |c, v| {
        c.attacks.epsilon = EpsSpec::DiagonalFraction(v)
    });
    o.set("eps-absolute", args.eps_absolute, |c, v| {
        c.attacks.epsilon = EpsSpec::Absolute(v)
    });
    o.set("pgd-steps", args.pgd_steps.clone(), |c, v| c.attacks.pgd_steps = v);
    o.set("eval-points", args.eval_points, |c, v| c.attacks.eval_points = v);
    o.set("theory-models", args.theory_models, |c, v| c.theory.models = v);
    Ok(cfg)
}

/// Stage list for a subcommand; `None` keeps the configured stages.
fn stages_for(command: &Command, has_model: bool) -> Option<Vec<Stage>> {
    use Stage::*;
    let with_model = |rest: &[Stage]| {
        let mut s = if has_model { Vec::new() } else { vec![Train] };
        s.extend_from_slice(rest);
        s
    };
    match command {
        Command::Train(_) => Some(vec![Train]),
        Command::FinetuneCure(_) => Some(with_model(&[Cure])),
        Command::Attack(_) => Some(with_model(&[Attack])),
        Command::Curvature(_) => Some(with_model(&[Probe])),
        Command::Surface(_) => Some(with_model(&[Attack, Export])),
        Command::Theory(_) => Some(vec![Theory]),
        Command::Run(_) => None,
    }
}

fn execute(cli: &Cli) -> curvlab::Result<()> {
    let (args, name) = match &cli.command {
        Command::Train(a) => (a, "train"),
        Command::FinetuneCure(a) => (a, "finetune-cure"),
        Command::Attack(a) => (a, "attack"),
        Command::Curvature(a) => (a, "curvature"),
        Command::Surface(a) => (a, "surface"),
        Command::Theory(a) => (a, "theory"),
        Command::Run(a) => (a, "run"),
    };
    let mut cfg = build_config(args, name)?;
    if let Some(stages) = stages_for(&cli.command, cfg.checkpoint.is_some()) {
        cfg.stages = stages;
    }
    let dir = harness::run_experiment(&cfg)?;
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    println!("{}", dir.display());
    for (k, v) in &manifest.summary {
        println!("{k}\t{v}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
