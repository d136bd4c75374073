use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use omnidet::annotations::{read_dataset, write_dataset, Sample, Split};
use omnidet::geometry::Detection;
use omnidet::gradcheck::{self, GradcheckOptions};
use omnidet::model::load_checkpoint;
use omnidet::synthetic::generate;
use omnidet::train::{ablation_grid, evaluate, run_ablation, run_experiment, select_cells, write_json, ExperimentConfig};
use omnidet::{Error, Result};

/// Omni-supervised anchor-free detection on synthetic data.
#[derive(Parser)]
#[command(name = "omnidet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        /// Target directory [default: <output_dir>/data]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model and evaluate it.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, default_value = "test")]
        split: String,
        /// Write every detection, one JSON line per image.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Run the ablation grid over several seeds.
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        run: RunArgs,
        /// Number of seeds, counting up from the config seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Comma-separated cell names [default: all]
        #[arg(long, value_delimiter = ',')]
        cells: Vec<String>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random configurations per check.
        #[arg(long, default_value_t = 100)]
        configs: usize,
        /// Perturb the named check's analytic gradient (negative control).
        #[arg(long)]
        corrupt: Option<String>,
    },
}

#[derive(Args)]
struct ConfigArg {
    /// TOML experiment config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct DataArg {
    /// Dataset directory from gen-data; generated in memory when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Serial execution for reproducibility checks.
    #[arg(long)]
    deterministic: bool,
}

impl ConfigArg {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_env()?;
        Ok(cfg)
    }
}

impl RunArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(i) = self.iterations {
            cfg.iterations = i;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.deterministic |= self.deterministic;
        cfg.validate()
    }
}

fn load_samples(data: &DataArg, cfg: &ExperimentConfig) -> Result<Vec<Sample>> {
    match &data.data {
        Some(dir) => read_dataset(dir),
        None => generate(&cfg.generator),
    }
}

fn split_counts(samples: &[Sample]) -> String {
    let names = [
        (Split::TrainBox, "train_box"),
        (Split::TrainDot, "train_dot"),
        (Split::TrainUnlabeled, "train_unlabeled"),
        (Split::Val, "val"),
        (Split::Test, "test"),
    ];
    names
        .iter()
        .map(|(s, n)| format!("{n}={}", samples.iter().filter(|x| x.split == *s).count()))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Serialize)]
struct ImageDetections<'a> {
    id: u64,
    detections: &'a [Detection],
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = config.load()?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.join("data"));
            let samples = generate(&cfg.generator)?;
            write_dataset(&dir, &samples)?;
            println!("wrote {} samples to {}: {}", samples.len(), dir.display(), split_counts(&samples));
        }
        Command::Train { config, data, run } => {
            let mut cfg = config.load()?;
            run.apply(&mut cfg)?;
            let samples = load_samples(&data, &cfg)?;
            let a = run_experiment(&cfg, &samples, Some(&cfg.output_dir))?;
            println!(
                "trained {} steps in {:.1}s; artifacts in {}",
                a.log.len(),
                a.timings.train_seconds,
                cfg.output_dir.display()
            );
            println!("{}", serde_json::to_string(&a.report).expect("report serializes"));
            print!("{}", a.report.table());
        }
        Command::Eval { checkpoint, config, data, split, dump } => {
            let cfg = config.load()?;
            let state = load_checkpoint(&checkpoint)?;
            let samples = load_samples(&data, &cfg)?;
            let split = Split::parse(&split)?;
            let (report, dets) = evaluate(&state, &samples, split, &cfg.inference_config(), cfg.worker_threads())?;
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
            print!("{}", report.table());
            if let Some(path) = dump {
                let mut text = String::new();
                let ids = samples.iter().filter(|s| s.split == split).map(|s| s.id);
                for (id, d) in ids.zip(&dets) {
                    text.push_str(&serde_json::to_string(&ImageDetections { id, detections: d }).expect("serializes"));
                    text.push('\n');
                }
                fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            }
        }
        Command::Ablate { config, data, run, seeds, cells } => {
            let mut cfg = config.load()?;
            run.apply(&mut cfg)?;
            let cells = if cells.is_empty() { ablation_grid() } else { select_cells(&cells)? };
            let seed_list: Vec<u64> = (0..seeds).map(|r| cfg.seed + r).collect();
            let samples = load_samples(&data, &cfg)?;
            let out = cfg.output_dir.clone();
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let report = run_ablation(&cfg, &samples, &cells, &seed_list, cfg.worker_threads(), Some(&out), &|c, s, r| {
                eprintln!("{:<12} seed {s}: mAP {:.4} AP50 {:.4}", c.name, r.map, r.ap50);
            })?;
            write_json(&out.join("ablation.json"), &report)?;
            print!("{}", report.table());
        }
        Command::Gradcheck { seed, configs, corrupt } => {
            let opts = GradcheckOptions { seed, configurations: configs, corrupt, ..GradcheckOptions::new(seed) };
            let report = gradcheck::run(&opts)?;
            print!("{}", report.table());
            let _ = std::io::stdout().flush();
            let failures = report.failures();
            if !failures.is_empty() {
                let names: Vec<&str> = failures.iter().map(|f| f.name.as_str()).collect();
                return Err(Error::GradcheckFailed(names.join(", ")));
            }
            println!("all {} checks passed over {} configurations", report.checks.len(), report.configurations());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
