use std::path::PathBuf;
use std::process::{Command, ExitCode};

use clap::{Parser, Subcommand};
use log::{error, info};

use purer::config::ExperimentConfig;
use purer::error::{Error, Result};
use purer::runner::{self, ThetaSource, TrainingState};
use purer::{inversion, plot};

/// Data-free meta-learning from a zoo of pre-trained classifiers.
///
/// Any configuration key can also be given as a flag, e.g. `--hp.lambda 2`
/// or `--train.iterations=300`; such flags override `--config`.
#[derive(Parser, Debug)]
#[command(name = "purer", version)]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Evaluation worker threads.
    #[arg(long, global = true)]
    parallel_eval: Option<usize>,
    /// Comma-separated training seeds; each seed runs in its own process.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Pre-train the model zoo and save it under `zoo.path`.
    PretrainZoo,
    /// Run meta-training with the configured ablation switches.
    MetaTrain {
        /// Continue from a training-state snapshot.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate an initialization on the test classes.
    Evaluate {
        /// purer, random or average.
        #[arg(long, default_value = "purer")]
        theta: String,
        /// Training-state snapshot holding the meta-learned initialization.
        #[arg(long)]
        state: Option<PathBuf>,
    },
    /// Write the pseudo-image bank as PNG grids.
    DumpImages {
        #[arg(long)]
        state: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render training curves from a metrics file.
    Plot {
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// EI vs curriculum, each with and without ICFIL, over `--seeds`.
    Ablate,
}

/// Remaining CLI arguments and the extracted `(key, value)` overrides.
type SplitArgs = (Vec<String>, Vec<(String, String)>);

/// Splits `--<config key> value` and `--<config key>=value` pairs out of the
/// argument list.
fn extract_overrides(args: Vec<String>) -> std::result::Result<SplitArgs, String> {
    let keys = ExperimentConfig::keys();
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !keys.contains(&name.as_str()) {
            rest.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| format!("--{name} needs a value"))?,
        };
        overrides.push((name, value));
    }
    Ok((rest, overrides))
}

fn build_config(cli: &Cli, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for (k, v) in overrides {
        cfg.set(k, v).map_err(Error::Config)?;
    }
    if let Some(n) = cli.parallel_eval {
        cfg.eval.workers = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &std::path::Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Re-launches this binary once per seed with its own output directory.
fn fan_out_seeds(cli: &Cli, cfg: &ExperimentConfig, raw: &[String]) -> Result<()> {
    let exe = std::env::current_exe().map_err(|e| Error::io("current executable", e))?;
    let mut children = Vec::new();
    for &seed in &cli.seeds {
        let mut args: Vec<String> = Vec::new();
        let mut skip = false;
        for a in raw {
            if skip {
                skip = false;
                continue;
            }
            if a == "--seeds" {
                skip = true;
                continue;
            }
            if a.starts_with("--seeds=") {
                continue;
            }
            args.push(a.clone());
        }
        if let Some(z) = &cfg.zoo.path {
            args.push(format!("--zoo.path={}", z.display()));
        }
        args.push(format!("--seed.train={seed}"));
        args.push(format!(
            "--output.dir={}",
            cfg.output_dir.join(format!("seed{seed}")).display()
        ));
        info!("launching seed {seed}");
        children.push((
            seed,
            Command::new(&exe).args(&args).spawn().map_err(|e| Error::io(&exe, e))?,
        ));
    }
    let mut failed = Vec::new();
    for (seed, mut c) in children {
        let status = c.wait().map_err(|e| Error::io(&exe, e))?;
        if !status.success() {
            failed.push(seed);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Internal(format!("runs for seeds {failed:?} failed")))
    }
}

fn run(cli: Cli, mut cfg: ExperimentConfig, raw: &[String]) -> Result<()> {
    // every subcommand shares the zoo under the output directory by default
    if cfg.zoo.path.is_none() {
        cfg.zoo.path = Some(cfg.output_dir.join("zoo"));
    }
    match &cli.command {
        Cmd::PretrainZoo => {
            let dir = cfg.zoo.path.clone().expect("set above");
            let data = runner::prepare_data(&cfg)?;
            let zoo = runner::obtain_zoo(&cfg, &data)?;
            println!(
                "zoo: {} models, {} pseudo-classes, saved to {}",
                zoo.entries.len(),
                zoo.num_global_classes(),
                dir.display()
            );
        }
        Cmd::MetaTrain { resume } => {
            if !cli.seeds.is_empty() {
                // build the shared zoo once before the per-seed processes start
                runner::obtain_zoo(&cfg, &runner::prepare_data(&cfg)?)?;
                return fan_out_seeds(&cli, &cfg, raw);
            }
            let data = runner::prepare_data(&cfg)?;
            let zoo = runner::obtain_zoo(&cfg, &data)?;
            let out = match resume {
                Some(p) => runner::resume_training(&cfg, &zoo, p)?,
                None => runner::run_meta_training(&cfg, &zoo)?,
            };
            write(&cfg.output_dir.join("config.txt"), &cfg.to_text())?;
            println!("metrics written to {}", out.metrics_path.display());
        }
        Cmd::Evaluate { theta, state } => {
            let source: ThetaSource = theta.parse()?;
            let data = runner::prepare_data(&cfg)?;
            let zoo = match source {
                ThetaSource::Average => Some(runner::obtain_zoo(&cfg, &data)?),
                _ => None,
            };
            let meta = match source {
                ThetaSource::Purer => {
                    let p = state.clone().unwrap_or_else(|| cfg.output_dir.join(runner::STATE_FILE));
                    Some(TrainingState::load(&p)?.meta.theta)
                }
                _ => None,
            };
            let out = runner::run_evaluation(&cfg, source, meta.as_ref(), zoo.as_ref(), &data)?;
            let path = cfg.output_dir.join(format!("eval_report_{source}.json"));
            write(&path, &out.json)?;
            println!(
                "{source}: {:.2}% ± {:.2} (std {:.2}) over {} tasks",
                100.0 * out.report.mean,
                100.0 * out.report.ci95,
                100.0 * out.report.std,
                out.report.num_tasks
            );
        }
        Cmd::DumpImages { state, out } => {
            let p = state.clone().unwrap_or_else(|| cfg.output_dir.join(runner::STATE_FILE));
            let dir = out.clone().unwrap_or_else(|| cfg.output_dir.join("images"));
            let files = inversion::dump_images(&TrainingState::load(&p)?.dd, &dir)?;
            println!("wrote {} images to {}", files.len(), dir.display());
        }
        Cmd::Plot { metrics, out } => {
            let m = metrics
                .clone()
                .unwrap_or_else(|| cfg.output_dir.join(runner::METRICS_FILE));
            let dir = out.clone().unwrap_or_else(|| cfg.output_dir.join("plots"));
            for f in plot::emit_plots(&m, &dir)? {
                println!("{}", f.display());
            }
        }
        Cmd::Ablate => {
            let seeds = if cli.seeds.is_empty() {
                vec![cfg.seeds.train]
            } else {
                cli.seeds.clone()
            };
            let data = runner::prepare_data(&cfg)?;
            let zoo = runner::obtain_zoo(&cfg, &data)?;
            let mut rows = Vec::new();
            for s in seeds {
                rows.push(runner::ablate_seed(&cfg, &data, &zoo, s)?);
            }
            let table = runner::ablation_table(&rows);
            write(&cfg.output_dir.join("ablation.csv"), &table)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let raw: Vec<String> = std::env::args().collect();
    let (rest, overrides) = match extract_overrides(raw[1..].to_vec()) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(std::iter::once(raw[0].clone()).chain(rest)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = build_config(&cli, &overrides).and_then(|cfg| run(cli, cfg, &raw[1..]));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
