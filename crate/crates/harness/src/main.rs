use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use curl_harness::ablate::{self, Variant};
use curl_harness::config::ExperimentConfig;
use curl_harness::{plots, probe, train};

#[derive(Parser)]
#[command(name = "curl", version, about = "Contrastive representations jointly trained with off-policy RL from pixels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// pointmass | pendulum | gridchase
    #[arg(long)]
    env: Option<String>,
    /// sac | dqn | state_sac_oracle
    #[arg(long)]
    agent: Option<String>,
    /// desk | paper | quick
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    no_curl: bool,
    #[arg(long)]
    detach_encoder: bool,
    #[arg(long)]
    first_frame_contrastive: bool,
    #[arg(long)]
    no_aug_rl: bool,
    #[arg(long)]
    curl_weight: Option<f64>,
    #[arg(long)]
    updates_per_step: Option<usize>,
    /// Extra overrides, e.g. `--set train.env_steps=5000`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<ExperimentConfig> {
        let mut text = match &self.config {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        let mut push = |k: &str, v: &str| text.push_str(&format!("\n{k}={v}"));
        if let Some(v) = &self.profile {
            push("experiment.profile", v);
        }
        if let Some(v) = &self.env {
            push("env.id", v);
        }
        if let Some(v) = &self.agent {
            push("experiment.agent", v);
        }
        if let Some(v) = self.seed {
            push("experiment.seed", &v.to_string());
        }
        for (flag, key) in [
            (self.no_curl, "ablation.no_curl"),
            (self.detach_encoder, "ablation.detach_encoder"),
            (self.first_frame_contrastive, "ablation.first_frame_contrastive"),
            (self.no_aug_rl, "ablation.no_aug_rl"),
        ] {
            if flag {
                push(key, "true");
            }
        }
        if let Some(v) = self.curl_weight {
            push("curl.weight", &v.to_string());
        }
        if let Some(v) = self.updates_per_step {
            push("train.updates_per_step", &v.to_string());
        }
        for kv in &self.set {
            if !kv.contains('=') {
                bail!("--set expects KEY=VALUE, got `{kv}`");
            }
            text.push('\n');
            text.push_str(kv);
        }
        ExperimentConfig::parse(&text)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent and write metrics plus a checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Print the resolved config and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Deterministic evaluation of a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 1)]
        eval_seed: u64,
        #[arg(long)]
        env: Option<String>,
    },
    /// Ridge regression from encoder latents to true state.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        probe_seed: u64,
    },
    /// Variants × seeds matrix.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated: curl, pixel_sac, no_curl, detach_encoder, first_frame, no_aug_rl, state_sac
        #[arg(long, default_value = "curl,pixel_sac,detach_encoder,no_aug_rl", value_delimiter = ',')]
        variants: Vec<String>,
        #[arg(long, default_value = "0,1,2,3,4", value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
    },
    /// Turn metrics CSVs into plain `.dat` series.
    ExportPlots {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train { cfg, out, print_config } => {
            let config = cfg.build()?;
            if print_config {
                print!("{}", config.to_text());
                return Ok(());
            }
            let (last, ckpt) = train::train(config, &out)?;
            println!("{}", curl_harness::metrics::HEADER);
            println!("{}", last.to_csv());
            println!("checkpoint: {}", ckpt.display());
        }
        Command::Evaluate { checkpoint, episodes, eval_seed, env } => {
            let env = env.map(|e| e.parse()).transpose().map_err(|e| anyhow::anyhow!("{e}"))?;
            let (mean, std) = train::evaluate_checkpoint(&checkpoint, episodes, eval_seed, env)?;
            println!("mean={mean:.6} std={std:.6} episodes={episodes}");
        }
        Command::Probe { checkpoint, samples, probe_seed } => {
            let r = probe::probe_checkpoint(&checkpoint, samples, probe_seed)?;
            println!("trained_mse={:.6} random_mse={:.6} ratio={:.4}", r.trained_mse, r.random_mse, r.trained_mse / r.random_mse);
        }
        Command::Ablate { cfg, variants, seeds, workers, out } => {
            let base = cfg.build()?;
            let variants = variants.iter().map(|v| v.parse()).collect::<Result<Vec<Variant>>>()?;
            let results = ablate::run_matrix(&base, &variants, &seeds, workers)?;
            ablate::write_results(&out, &results)?;
            print!("{}", ablate::summary_csv(&results));
        }
        Command::ExportPlots { inputs, out } => {
            for p in plots::export(&inputs, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
