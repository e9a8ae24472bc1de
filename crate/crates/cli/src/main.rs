//! Command-line runner for routing experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use vroute_core::data::{load_csv, CsvSchema};
use vroute_core::efficiency::{ArchSpec, CostVariant};
use vroute_core::experiment::{
    cmd_efficiency, cmd_eval, cmd_ood, cmd_stability, cmd_sweep_temp, cmd_train, ExperimentConfig, RunManifest,
};
use vroute_core::routers::RouterVariant;

#[derive(Parser)]
#[command(name = "vroute", version, about = "Variational MoE routing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stage-1 training, layer selection and stage-2 training per variant.
    Train(Common),
    /// Accuracy, NLL, ECE and MCE on the test split or a CSV file.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Labelled CSV to evaluate instead of the synthetic test split.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// AUROC/AUPRC of every uncertainty signal on the near and far shifts.
    Ood(Common),
    /// Routing Jaccard under input noise, per layer and noise level.
    Stability(Common),
    /// Fixed-temperature routing at one layer at a time.
    SweepTemp(Common),
    /// Analytic parameter and MAC counts.
    Efficiency {
        #[command(flatten)]
        common: Common,
        /// Granite-3B-MoE preset (L=10, N=40, D=1536, H=384, S=35, 800M base).
        #[arg(long, conflicts_with = "arch")]
        granite: bool,
        /// JSON architecture spec.
        #[arg(long)]
        arch: Option<PathBuf>,
        /// Also report GFLOPs (2 × MACs).
        #[arg(long)]
        flops: bool,
    },
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; omitted keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Restricts the variant list; repeatable.
    #[arg(long = "variant")]
    variants: Vec<String>,
    /// Monte Carlo samples at evaluation.
    #[arg(long)]
    samples: Option<usize>,
    /// Checkpoint to load instead of those in the output directory; repeatable.
    #[arg(long = "checkpoint")]
    checkpoints: Vec<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if !self.variants.is_empty() {
            cfg.variants = self.variants.iter().map(|v| v.parse::<RouterVariant>()).collect::<Result<_, _>>()?;
        }
        if self.samples == Some(0) {
            bail!("--samples must be >= 1");
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn report(m: &RunManifest, out: &std::path::Path) {
    for f in &m.files {
        println!("{}", out.join(&f.path).display());
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("VROUTE_THREADS") {
        let n: usize = v.parse().with_context(|| format!("VROUTE_THREADS={v}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Train(c) => {
            let cfg = c.config()?;
            report(&cmd_train(&cfg)?, &cfg.out_dir);
        }
        Command::Eval { common, data } => {
            let cfg = common.config()?;
            let ds = match data {
                Some(p) => {
                    let schema = CsvSchema { feature_dim: cfg.model.features, num_classes: cfg.model.classes };
                    Some(load_csv(&p, schema).with_context(|| format!("reading {}", p.display()))?)
                }
                None => None,
            };
            report(&cmd_eval(&cfg, &common.checkpoints, ds.as_ref(), common.samples)?, &cfg.out_dir);
        }
        Command::Ood(c) => {
            let cfg = c.config()?;
            report(&cmd_ood(&cfg, &c.checkpoints, c.samples)?, &cfg.out_dir);
        }
        Command::Stability(c) => {
            let cfg = c.config()?;
            report(&cmd_stability(&cfg, &c.checkpoints)?, &cfg.out_dir);
        }
        Command::SweepTemp(c) => {
            let cfg = c.config()?;
            if c.checkpoints.len() > 1 {
                bail!("sweep-temp takes at most one --checkpoint");
            }
            report(&cmd_sweep_temp(&cfg, c.checkpoints.first().map(PathBuf::as_path))?, &cfg.out_dir);
        }
        Command::Efficiency { common, granite, arch, flops } => {
            let mut cfg = ExperimentConfig::default();
            if let Some(p) = &common.config {
                cfg = ExperimentConfig::load(p)?;
            }
            if let Some(o) = &common.out {
                cfg.out_dir = o.clone();
            }
            let spec = match (granite, arch) {
                (true, _) => ArchSpec::granite(),
                (false, Some(p)) => serde_json::from_str(&std::fs::read_to_string(&p)?)
                    .with_context(|| format!("parsing {}", p.display()))?,
                (false, None) => bail!("pass --granite or --arch PATH"),
            };
            let variants: Vec<CostVariant> = if common.variants.is_empty() {
                CostVariant::ALL.to_vec()
            } else {
                common.variants.iter().map(|v| v.parse()).collect::<Result<_, _>>()?
            };
            let (m, r) = cmd_efficiency(&cfg, &spec, &variants, flops)?;
            println!("{:<13} {:>12} {:>9} {:>12}", "variant", "params", "overhead", "macs");
            for row in &r.rows {
                println!(
                    "{:<13} {:>11.1}M {:>8.2}% {:>12}",
                    row.variant.name(),
                    row.params_millions,
                    row.param_overhead_pct,
                    row.macs
                );
            }
            report(&m, &cfg.out_dir);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
