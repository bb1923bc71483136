use std::path::PathBuf;
use std::process::ExitCode;

use adapter_cluster_cli::commands::{self, CliError};
use adapter_cluster_cli::config::{read_pairs, RunConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adapter-cluster", version, about = "Cluster and merge LoRA adapter fleets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic adapter fleet with planted groups.
    GenSynthetic(Opts),
    /// Compute a partition of an adapter set.
    Cluster(Opts),
    /// Merge each cluster of a partition into one adapter.
    Merge(Opts),
    /// Score a partition with the loss oracle.
    Eval(Opts),
    /// Cluster and evaluate over a grid of K, n and seeds.
    Sweep(Opts),
}

/// Every flag maps to the config key of the same name; flags override the file.
#[derive(Args, Default)]
struct Opts {
    /// `key = value` run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    adapters: Option<String>,
    /// random, kmeans, kmeans_svd, dirichlet or d2c.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    iters: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// linear, ties or dare.
    #[arg(long)]
    merge: Option<String>,
    #[arg(long)]
    density: Option<String>,
    #[arg(long)]
    drop_rate: Option<String>,
    /// Comma-separated merge weights.
    #[arg(long)]
    weights: Option<String>,
    #[arg(long)]
    merge_seed: Option<String>,
    /// synthetic or command.
    #[arg(long)]
    oracle: Option<String>,
    #[arg(long)]
    oracle_cmd: Option<String>,
    /// Seconds.
    #[arg(long)]
    oracle_timeout: Option<String>,
    #[arg(long)]
    examples_per_task: Option<String>,
    #[arg(long)]
    eval_examples: Option<String>,
    /// Synthetic task model directory (default: `<adapters>/model`).
    #[arg(long)]
    model: Option<String>,
    /// group_label or lang_label.
    #[arg(long)]
    attribute: Option<String>,
    /// Dirichlet concentration.
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    top_k: Option<String>,
    #[arg(long)]
    partition: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Comma-separated K values.
    #[arg(long)]
    ks: Option<String>,
    /// Comma-separated examples-per-task values.
    #[arg(long)]
    ns: Option<String>,
    #[arg(long)]
    repeats: Option<String>,
    #[arg(long)]
    groups: Option<String>,
    #[arg(long)]
    num_adapters: Option<String>,
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    rank: Option<String>,
    #[arg(long)]
    d_in: Option<String>,
    #[arg(long)]
    d_out: Option<String>,
    #[arg(long)]
    lora_alpha: Option<String>,
    #[arg(long)]
    center_scale: Option<String>,
    #[arg(long)]
    noise: Option<String>,
    #[arg(long)]
    langs: Option<String>,
    /// Extra `key=value` settings.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Opts {
    fn flag_pairs(&self) -> Vec<(&'static str, &str)> {
        let flags: [(&'static str, &Option<String>); 34] = [
            ("adapters", &self.adapters),
            ("method", &self.method),
            ("k", &self.k),
            ("iters", &self.iters),
            ("seed", &self.seed),
            ("merge", &self.merge),
            ("density", &self.density),
            ("drop_rate", &self.drop_rate),
            ("weights", &self.weights),
            ("merge_seed", &self.merge_seed),
            ("oracle", &self.oracle),
            ("oracle_cmd", &self.oracle_cmd),
            ("oracle_timeout", &self.oracle_timeout),
            ("examples_per_task", &self.examples_per_task),
            ("eval_examples", &self.eval_examples),
            ("model", &self.model),
            ("attribute", &self.attribute),
            ("alpha", &self.alpha),
            ("top_k", &self.top_k),
            ("partition", &self.partition),
            ("out", &self.out),
            ("ks", &self.ks),
            ("ns", &self.ns),
            ("repeats", &self.repeats),
            ("groups", &self.groups),
            ("num_adapters", &self.num_adapters),
            ("layers", &self.layers),
            ("rank", &self.rank),
            ("d_in", &self.d_in),
            ("d_out", &self.d_out),
            ("lora_alpha", &self.lora_alpha),
            ("center_scale", &self.center_scale),
            ("noise", &self.noise),
            ("langs", &self.langs),
        ];
        flags
            .into_iter()
            .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
            .collect()
    }

    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            for (k, v) in read_pairs(path)? {
                cfg.set(&k, &v)?;
            }
        }
        for (k, v) in self.flag_pairs() {
            cfg.set(k, v)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(&k.trim().replace('-', "_"), v.trim())?;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenSynthetic(o) => {
            let s = commands::gen_synthetic(&o.resolve()?)?;
            println!("wrote {} adapters to {}", s.files.len(), s.out.display());
        }
        Command::Cluster(o) => {
            let s = commands::cluster(&o.resolve()?)?;
            print!("{}", s.to_text());
        }
        Command::Merge(o) => {
            let files = commands::merge(&o.resolve()?)?;
            println!("wrote {} merged adapters", files.len());
        }
        Command::Eval(o) => {
            let r = commands::eval(&o.resolve()?)?;
            print!("{}", r.to_text());
            if r.failures() > 0 {
                eprintln!("{} task evaluations failed", r.failures());
            }
        }
        Command::Sweep(o) => {
            let t = commands::sweep(&o.resolve()?)?;
            print!("{}", t.to_tsv());
            for c in t.cells.iter().filter(|c| c.error.is_some()) {
                eprintln!("cell K={} n={} seed={}: {}", c.k, c.n, c.seed, c.error.as_deref().unwrap_or(""));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
