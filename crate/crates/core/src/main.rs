use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use metriclab::checkpoint::{read_checkpoint, write_checkpoint};
use metriclab::config::ExperimentConfig;
use metriclab::dataset::{Dataset, Partition};
use metriclab::experiment::{compare_losses, evaluate_encoder};
use metriclab::losses::LossKind;
use metriclab::scoring::formats::{format_score, render_report, write_scores, write_text};
use metriclab::trainer::{grid_search, select_best, train};
use metriclab::Result;

#[derive(Parser)]
#[command(name = "metriclab", version, about = "Metric-learning losses for speaker verification on synthetic speakers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply to anything it omits.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the dataset seed for gen-data and the training seed otherwise.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DataArg {
    /// Dataset directory written by gen-data; generated from [dataset] when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one configuration and keep the best epoch on dev.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Loss kind; defaults to [loss] kind, then aam.
        #[arg(long)]
        loss: Option<LossKind>,
    },
    /// Score the test trials with a checkpoint, raw and with adaptive s-norm.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Search the hyper-parameter grid of one loss on dev EER.
    GridSearch {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        loss: Option<LossKind>,
    },
    /// Run the full protocol for several losses and tabulate the results.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Comma-separated loss kinds; defaults to [training] losses.
        #[arg(long, value_delimiter = ',')]
        losses: Option<Vec<LossKind>>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    match &common.config {
        Some(path) => ExperimentConfig::load(path),
        None => Ok(ExperimentConfig::default()),
    }
}

fn load_data(data: &DataArg, config: &ExperimentConfig) -> Result<Dataset> {
    match &data.data {
        Some(dir) => Dataset::load(dir),
        None => Dataset::generate(&config.dataset),
    }
}

fn with_training_seed(common: &Common) -> Result<ExperimentConfig> {
    let mut config = load_config(common)?;
    if let Some(seed) = common.seed {
        config.training.seed = seed;
    }
    Ok(config)
}

fn loss_kind(arg: Option<LossKind>, config: &ExperimentConfig) -> LossKind {
    arg.or(config.loss.kind).unwrap_or(LossKind::Aam)
}

fn write_config_echo(out: &Path, config: &ExperimentConfig) -> Result<()> {
    write_text(&out.join("experiment.toml"), &config.to_toml()?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let mut config = load_config(&common)?;
            if let Some(seed) = common.seed {
                config.dataset.seed = seed;
            }
            let dataset = Dataset::generate(&config.dataset)?;
            dataset.save(&common.out)?;
            println!(
                "wrote {} speakers, {} dev and {} test trials to {}",
                dataset.speakers.len(),
                dataset.dev_trials.len(),
                dataset.test_trials.len(),
                common.out.display()
            );
        }
        Command::Train { common, data, loss } => {
            let config = with_training_seed(&common)?;
            let dataset = load_data(&data, &config)?;
            let kind = loss_kind(loss, &config);
            let train_config = config.train_config(kind);
            let run = train(&dataset.train_pool()?, &train_config, &dataset.eval_set(Partition::Dev))?;
            let best = select_best(&run.checkpoints)?;
            write_config_echo(&common.out, &config)?;
            write_checkpoint(&common.out.join("best.ckpt"), best, &train_config)?;
            let mut csv = String::from("epoch,dev_eer,train_loss\n");
            for c in &run.checkpoints {
                let loss = c.train_loss.map_or(String::new(), format_score);
                csv.push_str(&format!("{},{},{loss}\n", c.epoch, format_score(c.dev_eer)));
            }
            write_text(&common.out.join("epochs.csv"), &csv)?;
            println!("{kind}: best epoch {} with dev EER {}", best.epoch, format_score(best.dev_eer));
        }
        Command::Evaluate { common, data, checkpoint } => {
            let config = with_training_seed(&common)?;
            let dataset = load_data(&data, &config)?;
            let (cp, _) = read_checkpoint(&checkpoint)?;
            let ev = evaluate_encoder(&dataset, &cp.encoder, &config, config.training.seed)?;
            write_scores(&common.out.join("test_scores_raw.txt"), &ev.raw_scores)?;
            write_scores(&common.out.join("test_scores_snorm.txt"), &ev.normalized_scores)?;
            write_text(&common.out.join("report_raw.txt"), &render_report(&ev.raw, None))?;
            write_text(&common.out.join("report_snorm.txt"), &render_report(&ev.normalized, Some(ev.top_n)))?;
            println!(
                "EER raw {} [{}, {}], s-norm {} (top_n {})",
                format_score(ev.raw.eer),
                format_score(ev.raw.ci_low),
                format_score(ev.raw.ci_high),
                format_score(ev.normalized.eer),
                ev.top_n
            );
        }
        Command::GridSearch { common, data, loss } => {
            let config = with_training_seed(&common)?;
            let dataset = load_data(&data, &config)?;
            let kind = loss_kind(loss, &config);
            let outcome = grid_search(
                &dataset.train_pool()?,
                &config.grid(kind),
                config.training.grid_epochs,
                &dataset.eval_set(Partition::Dev),
            )?;
            write_config_echo(&common.out, &config)?;
            let best = toml::to_string(&outcome.best)
                .map_err(|e| metriclab::Error::format("train config", e.to_string()))?;
            write_text(&common.out.join("best_config.toml"), &best)?;
            let failed = outcome.entries.iter().filter(|e| e.outcome.is_err()).count();
            println!(
                "{kind}: {} configs ({failed} failed), best dev EER {} at lr {}",
                outcome.entries.len(),
                format_score(outcome.best_dev_eer),
                outcome.best.learning_rate
            );
        }
        Command::Compare { common, data, losses } => {
            let config = with_training_seed(&common)?;
            let dataset = load_data(&data, &config)?;
            let kinds = losses.unwrap_or_else(|| config.training.losses.clone());
            write_config_echo(&common.out, &config)?;
            let comparison = compare_losses(&dataset, &kinds, &config, &common.out)?;
            print!("{}", comparison.csv);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
