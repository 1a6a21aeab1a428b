//! `tlsi`: generate synthetic logs, train, evaluate, gradient-check and
//! ablate the interest model.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tlsi_core::model::ActivationKind;
use tlsi_core::Variant;

use config::{usage, RunConfig, UsageError};

#[derive(Debug, Parser)]
#[command(name = "tlsi", version, about = "Time-aware interest CTR model")]
struct Cli {
    /// Log verbosity: -v for debug, -vv for trace.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic behavior log with planted temporal patterns.
    Generate(GenerateArgs),
    /// Train one model and evaluate it on the held-out last events.
    Train(TrainArgs),
    /// Evaluate a checkpoint, optionally dumping gate and attention traces.
    Eval(EvalArgs),
    /// Finite-difference check of every parameter group on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate several variants over a seed list.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (events.jsonl and spec.json).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    items: Option<usize>,
    #[arg(long)]
    categories: Option<usize>,
    /// Probability of replacing an event by a non-preferred category.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    horizon_days: Option<f64>,
    /// No planted patterns except those given by --period/--hours.
    #[arg(long)]
    plain: bool,
    /// Period in days, e.g. `cat3=7`. Repeatable.
    #[arg(long, value_name = "CAT=DAYS")]
    period: Vec<String>,
    /// Active hours, e.g. `cat2=20,21`. Repeatable.
    #[arg(long, value_name = "CAT=H[,H..]")]
    hours: Vec<String>,
}

#[derive(Debug, Args)]
struct ModelFlags {
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    item_dim: Option<usize>,
    #[arg(long)]
    category_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    mlp_hidden: Option<usize>,
    #[arg(long, value_parser = parse_activation)]
    activation: Option<ActivationKind>,
    #[arg(long)]
    no_standardize: bool,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    max_len_long: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Global gradient-norm clip.
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    targets_per_user: Option<usize>,
    /// Share of users held out from training for validation.
    #[arg(long)]
    holdout: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML run configuration; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Behavior log file, or a directory written by `generate`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Write gates.csv (example_id, alpha_mean, recency_seconds).
    #[arg(long)]
    dump_gates: bool,
    /// Write attention.csv (example_id, position, a_c, a_t).
    #[arg(long)]
    dump_attention: bool,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model sizes as `d=<width>,n=<length>[,b=<batch>]`.
    #[arg(long, default_value = "d=4,n=3")]
    sizes: String,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    rtol: Option<f64>,
    #[arg(long)]
    step: Option<f64>,
    /// Also write the report as JSON into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated variants; all of them by default.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<Variant>,
    /// Comma-separated seeds; results are averaged over them.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

fn parse_activation(s: &str) -> Result<ActivationKind, String> {
    match s {
        "dice" => Ok(ActivationKind::Dice),
        "prelu" => Ok(ActivationKind::Prelu),
        _ => Err(format!("unknown activation `{s}` (expected dice or prelu)")),
    }
}

fn split_pair(s: &str) -> anyhow::Result<(&str, &str)> {
    s.split_once('=')
        .ok_or_else(|| usage(format!("expected KEY=VALUE, got `{s}`")))
}

impl GenerateArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut c = RunConfig::load(self.config.as_deref())?;
        let g = &mut c.generate;
        set(&mut g.users, self.users);
        set(&mut g.items, self.items);
        set(&mut g.categories, self.categories);
        set(&mut g.noise, self.noise);
        set(&mut g.seed, self.seed);
        set(&mut g.horizon_days, self.horizon_days);
        g.plain |= self.plain;
        for p in &self.period {
            let (k, v) = split_pair(p)?;
            let days = v.parse().map_err(|_| usage(format!("bad period `{p}`")))?;
            g.periods.insert(k.to_string(), days);
        }
        for h in &self.hours {
            let (k, v) = split_pair(h)?;
            let hours = v
                .split(',')
                .map(|x| x.trim().parse::<u32>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| usage(format!("bad hours `{h}`")))?;
            g.hours.insert(k.to_string(), hours);
        }
        Ok(c)
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

impl ModelFlags {
    fn apply(&self, c: &mut RunConfig) {
        set(&mut c.variant, self.variant);
        let m = &mut c.model;
        set(&mut m.item_dim, self.item_dim);
        set(&mut m.category_dim, self.category_dim);
        if self.hidden_dim.is_some() {
            m.hidden_dim = self.hidden_dim;
        }
        set(&mut m.mlp_hidden, self.mlp_hidden);
        set(&mut m.activation, self.activation);
        if self.no_standardize {
            m.standardize = false;
        }
        set(&mut m.max_len, self.max_len);
        set(&mut m.max_len_long, self.max_len_long);
    }
}

impl TrainFlags {
    fn apply(&self, c: &mut RunConfig) {
        set(&mut c.train.epochs, self.epochs);
        set(&mut c.train.batch_size, self.batch_size);
        set(&mut c.train.lr, self.lr);
        if self.clip_norm.is_some() {
            c.train.clip_norm = self.clip_norm;
        }
        set(&mut c.split.min_len, self.min_len);
        set(&mut c.split.targets_per_user, self.targets_per_user);
        set(&mut c.split.holdout_fraction, self.holdout);
    }
}

impl TrainArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut c = RunConfig::load(self.config.as_deref())?;
        if self.data.is_some() {
            c.data = self.data.clone();
        }
        if let Some(s) = self.seed {
            c.seeds = vec![s];
        }
        self.model.apply(&mut c);
        self.train.apply(&mut c);
        c.validate()?;
        if c.seeds.len() != 1 {
            return Err(usage(format!(
                "train takes a single seed, got {:?} (use ablate for seed lists)",
                c.seeds
            )));
        }
        Ok(c)
    }
}

impl AblateArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut c = RunConfig::load(self.config.as_deref())?;
        if self.data.is_some() {
            c.data = self.data.clone();
        }
        if !self.seeds.is_empty() {
            c.seeds = self.seeds.clone();
        }
        self.model.apply(&mut c);
        self.train.apply(&mut c);
        c.validate()?;
        Ok(c)
    }
}

fn parse_sizes(s: &str) -> anyhow::Result<Vec<(String, usize)>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (k, v) = split_pair(p.trim())?;
            let n = v.parse().map_err(|_| usage(format!("bad size `{p}`")))?;
            Ok((k.to_string(), n))
        })
        .collect()
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate(a) => {
            let c = a.resolve()?;
            commands::generate(&c, &a.out)
        }
        Command::Train(a) => {
            let c = a.resolve()?;
            commands::train(&c, &a.out)
        }
        Command::Eval(a) => commands::eval(&commands::EvalRequest {
            checkpoint: a.checkpoint,
            data: a.data,
            out: a.out,
            dump_gates: a.dump_gates,
            dump_attention: a.dump_attention,
            batch_size: a.batch_size,
        }),
        Command::Gradcheck(a) => {
            let mut cfg = tlsi_core::gradcheck::GradcheckConfig {
                seed: a.seed,
                ..Default::default()
            };
            for (k, v) in parse_sizes(&a.sizes)? {
                match k.as_str() {
                    "d" => cfg.dim = v,
                    "n" => cfg.seq_len = v,
                    "b" => cfg.batch = v,
                    _ => return Err(usage(format!("unknown size `{k}` (expected d, n or b)"))),
                }
            }
            set(&mut cfg.variant, a.variant);
            set(&mut cfg.rtol, a.rtol);
            set(&mut cfg.step, a.step);
            commands::gradcheck(&cfg, a.out.as_deref())
        }
        Command::Ablate(a) => {
            let c = a.resolve()?;
            let variants = if a.variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                a.variants.clone()
            };
            commands::ablate(&c, &variants, &a.out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let is_usage = e.downcast_ref::<UsageError>().is_some()
                || matches!(
                    e.downcast_ref::<tlsi_core::Error>(),
                    Some(tlsi_core::Error::Config(_))
                );
            ExitCode::from(if is_usage { 2 } else { 1 })
        }
    }
}
