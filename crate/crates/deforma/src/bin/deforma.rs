use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use deforma::config::ExperimentConfig;
use deforma::data::FrequencyClass;
use deforma::fusion::train_fforma_n;
use deforma::harness::{
    self, read_score_table, run_experiment, write_forecasts_for_pool, RunPaths,
};
use deforma::learners::LearnerSource;
use deforma::model::{make_training_table, DeformaModel};
use deforma::rank::schulze_rank;
use deforma::Result;

#[derive(Parser)]
#[command(name = "deforma", about = "Late meta-learning forecast fusion experiments")]
struct Cli {
    /// Experiment config file (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the frequency subset (H, D, W, M, Q, Y).
    #[arg(long, global = true)]
    subset: Option<char>,

    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest and validate the configured dataset.
    Prepare,
    /// Run every base learner and write per-learner forecast CSVs.
    BaseForecast,
    /// Build the meta-training table and write the target error matrix.
    BuildTable,
    /// Train a fusion model on the meta-training table.
    Train {
        /// Which fusion model to train.
        #[arg(long, value_parser = ["deforma", "fforma-n"])]
        method: String,
    },
    /// Run the full experiment (CV, final training, test evaluation).
    Evaluate,
    /// Schulze-rank a score table CSV (methods x subsets of mean OWA).
    Rank {
        /// Score table CSV; defaults to the run directory's mean table.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Render the report tables for a completed run.
    Report,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.cv_seed = seed;
        cfg.training.seed = seed;
    }
    if let Some(subset) = cli.subset {
        cfg.subset = FrequencyClass::from_letter(subset)?;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn table_learners_for(cfg: &ExperimentConfig) -> Vec<(String, LearnerSource)> {
    cfg.pool
        .iter()
        .map(|e| (e.id.clone(), e.source.clone()))
        .collect()
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let paths = RunPaths::new(&cfg.out_dir);
    match &cli.command {
        Command::Prepare => {
            let dataset = harness::load_dataset(&cfg)?;
            let with_test = dataset.iter().filter(|s| s.test.is_some()).count();
            let min_len = dataset.iter().map(|s| s.train.len()).min().unwrap_or(0);
            let max_len = dataset.iter().map(|s| s.train.len()).max().unwrap_or(0);
            println!(
                "subset {}: {} series ({} with test holdout), train lengths {}..{}",
                cfg.subset.letter(),
                dataset.len(),
                with_test,
                min_len,
                max_len
            );
        }
        Command::BaseForecast => {
            let dataset = harness::load_dataset(&cfg)?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            let forecasts = deforma::learners::pool_forecasts(&dataset, &table_learners_for(&cfg))?;
            write_forecasts_for_pool(&cfg, &forecasts, &paths)?;
            println!(
                "wrote {} learner forecast files to {}",
                cfg.pool.len(),
                cfg.out_dir.display()
            );
        }
        Command::BuildTable => {
            let dataset = harness::load_dataset(&cfg)?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            let learners = harness::build_table_learners(&cfg, &dataset)?;
            let table = make_training_table(&dataset, &learners, cfg.max_length)?;
            let path = cfg.out_dir.join("training_targets.csv");
            table.targets.write_csv(&path)?;
            println!(
                "training table: {} series ({} skipped); targets at {}",
                table.ids.len(),
                table.skipped,
                path.display()
            );
        }
        Command::Train { method } => {
            let dataset = harness::load_dataset(&cfg)?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            let learners = harness::build_table_learners(&cfg, &dataset)?;
            let table = make_training_table(&dataset, &learners, cfg.max_length)?;
            match method.as_str() {
                "deforma" => {
                    let mut model = DeformaModel::build(
                        harness::arch_for(&cfg),
                        cfg.subset.seasonal_period(),
                        cfg.training.seed,
                    )?;
                    let history = deforma::model::train(&mut model, &table, &cfg.training)?;
                    let mut meta = std::collections::BTreeMap::new();
                    meta.insert("best_epoch".to_string(), history.best_epoch.to_string());
                    model.save(&paths.deforma_checkpoint(), &meta)?;
                    println!(
                        "deforma trained for {} epochs (best {}); checkpoint at {}",
                        history.epochs.len(),
                        history.best_epoch,
                        paths.deforma_checkpoint().display()
                    );
                }
                "fforma-n" => {
                    let (model, history) = train_fforma_n(&dataset, &table.targets, &cfg.training)?;
                    let mut meta = std::collections::BTreeMap::new();
                    meta.insert("best_epoch".to_string(), history.best_epoch.to_string());
                    model.save(&paths.fforma_n_checkpoint(), &meta)?;
                    println!(
                        "fforma-n trained for {} epochs (best {}); checkpoint at {}",
                        history.epochs.len(),
                        history.best_epoch,
                        paths.fforma_n_checkpoint().display()
                    );
                }
                other => unreachable!("clap rejects '{other}'"),
            }
        }
        Command::Evaluate => {
            let run_dir = run_experiment(&cfg)?;
            println!("run complete: {}", run_dir.display());
        }
        Command::Rank { scores } => {
            let path = scores.clone().unwrap_or_else(|| paths.mean_scores());
            let table = read_score_table(&path)?;
            let result = schulze_rank(&table)?;
            let mut rows: Vec<(&String, usize)> = table
                .methods
                .iter()
                .map(|m| (m, result.ranks[m]))
                .collect();
            rows.sort_by_key(|(_, rank)| *rank);
            for (method, rank) in rows {
                println!("{rank:>3}  {method}");
            }
        }
        Command::Report => {
            let text = harness::report(&cfg.out_dir, cfg.external_scores.as_deref())?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
