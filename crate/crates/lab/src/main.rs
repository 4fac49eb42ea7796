use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use read_core::world::SuiteKind;
use read_lab::commands::{self, inherit_data_keys};
use read_lab::config::LabConfig;
use read_lab::error::{LabError, Result};
use read_lab::manifest::Manifest;

/// Reconstruction-and-alignment contrastive training laboratory.
#[derive(Parser)]
#[command(name = "readlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training dataset and the evaluation suites.
    Gen,
    /// Pre-train and freeze the decoder on the dataset's captions.
    PretrainDecoder {
        #[arg(long)]
        data: PathBuf,
    },
    /// Fine-tune the encoders with the composite objective.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        decoder: PathBuf,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run the four-row objective ablation over several seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        decoder: PathBuf,
    },
    /// Score a checkpoint on the suites and dump per-item rankings.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Join per-epoch similarity traces of finished runs.
    Analyze {
        /// Run directories holding metrics.jsonl and manifest.json.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Swap,
    Replace,
    Paraphrase,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Alternative,
    Original,
}

#[derive(Args)]
struct Common {
    /// Config file: `key = value` lines, or a manifest.json to re-run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    /// Runs executed concurrently by `ablate`.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    m_negatives: Option<usize>,
    #[arg(long, global = true)]
    k_targets: Option<usize>,
    #[arg(long, global = true, value_enum)]
    recon_target: Option<TargetArg>,
    #[arg(long, global = true)]
    noise_fraction: Option<f64>,
    #[arg(long, global = true)]
    num_paraphrases: Option<usize>,
    #[arg(long, global = true, value_enum, default_value = "all")]
    suite: SuiteArg,
    /// Any other config key, as `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    /// Defaults, then the config file, then flags. Also returns the keys
    /// set explicitly by the file or the flags.
    fn resolve(&self) -> Result<(LabConfig, Vec<String>)> {
        let mut cfg = LabConfig::default();
        let mut explicit = Vec::new();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
            if text.trim_start().starts_with('{') {
                let m: Manifest =
                    serde_json::from_str(&text).map_err(|e| LabError::format(path, e.to_string()))?;
                cfg = m.lab_config()?;
                explicit.extend(m.config.keys().cloned());
            } else {
                cfg.apply_text(&text)?;
                explicit.extend(text.lines().filter_map(|l| {
                    let l = l.split('#').next()?.trim();
                    l.split_once('=').map(|(k, _)| k.trim().to_string())
                }));
            }
        }
        let mut flags: Vec<(&str, String)> = Vec::new();
        if let Some(v) = self.seed {
            flags.push(("seed", v.to_string()));
        }
        if let Some(v) = self.alpha {
            flags.push(("alpha", v.to_string()));
        }
        if let Some(v) = self.beta {
            flags.push(("beta", v.to_string()));
        }
        if let Some(v) = self.m_negatives {
            flags.push(("m_negatives", v.to_string()));
        }
        if let Some(v) = self.k_targets {
            flags.push(("k_targets", v.to_string()));
        }
        if let Some(v) = self.recon_target {
            let s = match v {
                TargetArg::Alternative => "alternative",
                TargetArg::Original => "original",
            };
            flags.push(("recon_target", s.into()));
        }
        if let Some(v) = self.noise_fraction {
            flags.push(("noise_fraction", v.to_string()));
        }
        if let Some(v) = self.num_paraphrases {
            flags.push(("num_paraphrases", v.to_string()));
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| LabError::Config(format!("--set expects key=value, got {kv:?}")))?;
            flags.push((k.trim(), v.trim().to_string()));
        }
        for (k, v) in flags {
            cfg.set(k, &v)?;
            explicit.push(k.to_string());
        }
        Ok((cfg, explicit))
    }

    fn suites(&self) -> Vec<SuiteKind> {
        match self.suite {
            SuiteArg::Swap => vec![SuiteKind::Swap],
            SuiteArg::Replace => vec![SuiteKind::Replace],
            SuiteArg::Paraphrase => vec![SuiteKind::Paraphrase],
            SuiteArg::All => SuiteKind::ALL.to_vec(),
        }
    }
}

fn with_data(data: &Path, common: &Common) -> Result<LabConfig> {
    let (mut cfg, explicit) = common.resolve()?;
    inherit_data_keys(&mut cfg, data, &explicit)?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    match &cli.command {
        Command::Gen => {
            let (cfg, _) = c.resolve()?;
            commands::cmd_gen(&cfg, &c.out, &c.suites(), c.force)
        }
        Command::PretrainDecoder { data } => {
            let cfg = with_data(data, c)?;
            let r = commands::cmd_pretrain(&cfg, data, &c.out, c.force)?;
            for (e, p) in r.held_out_perplexity.iter().enumerate() {
                println!("epoch {} held-out perplexity {p:.4}", e + 1);
            }
            Ok(())
        }
        Command::Train { data, decoder, resume } => {
            let cfg = with_data(data, c)?;
            let h = commands::cmd_train(&cfg, data, decoder, &c.out, resume.as_deref(), c.force)?;
            if let Some(m) = h.last() {
                println!(
                    "epoch {} swap {:.3} replace {:.3} itt {:.3} tot {:.3}",
                    m.epoch, m.acc_swap, m.acc_replace, m.acc_itt, m.acc_tot
                );
            }
            Ok(())
        }
        Command::Ablate { data, decoder } => {
            let cfg = with_data(data, c)?;
            let rows = commands::cmd_ablate(&cfg, data, decoder, &c.out, c.jobs, c.force)?;
            for r in rows.iter().filter(|r| r.seed == "mean") {
                println!(
                    "row {} swap {:.3} replace {:.3} itt {:.3} tot {:.3} avg {:.3}",
                    r.row, r.acc_swap, r.acc_replace, r.acc_itt, r.acc_tot, r.acc_avg
                );
            }
            Ok(())
        }
        Command::Eval { checkpoint, data } => {
            let (cfg, _) = c.resolve()?;
            let rows = commands::cmd_eval(&cfg, checkpoint, data, &c.suites(), &c.out, c.force)?;
            for r in rows.iter().filter(|r| r.category == "all") {
                println!("{} single {:.3} items {}", r.suite, r.acc_single, r.items);
            }
            Ok(())
        }
        Command::Analyze { runs } => {
            let rows = commands::cmd_analyze(runs, &c.out, c.force)?;
            println!("{} rows", rows.len());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("readlab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
