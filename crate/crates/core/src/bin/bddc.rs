//! Command-line driver for the adaptive-BDDC surrogate experiments.
//!
//! Typical flow:
//! ```text
//! bddc gen-data                # write train/ and test/ datasets
//! bddc train                   # fit the eigenvector surrogate
//! bddc evaluate                # compare surrogate vs exact preconditioner
//! ```
//! Exit codes: 0 on success, 2 for configuration/usage errors, 1 for
//! runtime failures.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use bddc_surrogate::pipeline::{
    desk_preset, generate_dataset, paper_preset, read_dataset, read_records_csv, run_evaluation,
    selftest, solve_once, summarize, train_log_csv, write_dataset, ExperimentConfig,
    GeneratedDataset, RhoSpec,
};
use bddc_surrogate::surrogate::{nrmse, SurrogateModel};
use bddc_surrogate::{Error, Result};

#[derive(Parser)]
#[command(
    name = "bddc",
    version,
    about = "Adaptive BDDC with a learned coarse space: dataset generation, \
             surrogate training and evaluation"
)]
struct Cli {
    /// TOML experiment configuration (overrides the preset).
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,

    /// Built-in configuration scale.
    #[arg(long, global = true, value_parser = ["desk", "paper"])]
    preset: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate datasets of (KL coefficients, edge eigenvector) pairs.
    ///
    /// Without flags, writes `train/` and `test/` under the output
    /// directory using the configured sample counts and seeds. With
    /// --samples/--seed, writes a single dataset instead.
    GenData {
        /// Number of samples for a single custom dataset.
        #[arg(long)]
        samples: Option<usize>,
        /// Base seed for a single custom dataset (sample i uses seed + i).
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: <output.dir> or <output.dir>/dataset).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the eigenvector surrogate on a generated dataset.
    Train {
        /// Dataset directory (default: <output.dir>/train).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory for model.json, train_log.csv and train_summary.json
        /// (default: <output.dir>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a trained surrogate against the exact adaptive
    /// preconditioner on every test realization.
    Evaluate {
        /// Trained model file (default: <output.dir>/model.json).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Test dataset directory (default: <output.dir>/test).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report directory (default: <output.dir>/report).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Feed the stored exact eigenvectors back as predictions
        /// (closure check: metrics must be exactly zero).
        #[arg(long)]
        oracle: bool,
    },
    /// Solve a single realization with the exact adaptive preconditioner
    /// and print the iteration report as JSON.
    Solve {
        /// Coefficient field: constant:<value> or sample:<seed>.
        #[arg(long, default_value = "constant:1")]
        rho: String,
    },
    /// Rebuild summary.json and histograms from an existing records.csv.
    Report {
        /// Path to a records.csv produced by `evaluate`.
        #[arg(long)]
        records: PathBuf,
        /// Report directory (default: <output.dir>/report).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run quick internal consistency checks.
    Selftest,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    if let Some(path) = &cli.config {
        return ExperimentConfig::from_file(path);
    }
    let cfg = match cli.preset.as_deref() {
        Some("paper") => paper_preset(),
        _ => desk_preset(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn describe_dataset(gd: &GeneratedDataset, dir: &Path) {
    println!(
        "wrote {} samples (R = {}, O = {}) to {}; skipped {}",
        gd.dataset.len(),
        gd.dataset.layout.input_dim,
        gd.dataset.layout.output_dim(),
        dir.display(),
        gd.skipped.len()
    );
}

#[derive(Serialize)]
struct TrainSummary {
    config_hash: String,
    layout_hash: String,
    epochs: usize,
    final_mse: f64,
    final_grad_norm: f64,
    converged: bool,
    /// Prediction NRMSE on the training set itself (raw targets).
    nrmse_train: f64,
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let base = PathBuf::from(&cfg.output.dir);
    match &cli.command {
        Command::GenData { samples, seed, out } => {
            if samples.is_some() || seed.is_some() {
                let m = samples.unwrap_or(cfg.samples.m_train);
                let s = seed.unwrap_or(cfg.samples.train_seed);
                let dir = out.clone().unwrap_or_else(|| base.join("dataset"));
                let gd = generate_dataset(&cfg, m, s)?;
                write_dataset(&gd, &dir)?;
                describe_dataset(&gd, &dir);
            } else {
                let root = out.clone().unwrap_or(base);
                let train = generate_dataset(&cfg, cfg.samples.m_train, cfg.samples.train_seed)?;
                let train_dir = root.join("train");
                write_dataset(&train, &train_dir)?;
                describe_dataset(&train, &train_dir);
                let test = generate_dataset(&cfg, cfg.samples.m_test, cfg.samples.test_seed)?;
                let test_dir = root.join("test");
                write_dataset(&test, &test_dir)?;
                describe_dataset(&test, &test_dir);
            }
            Ok(())
        }
        Command::Train { data, out } => {
            let data_dir = data.clone().unwrap_or_else(|| base.join("train"));
            let out_dir = out.clone().unwrap_or(base);
            let gd = read_dataset(&data_dir)?;
            let (model, history) = SurrogateModel::train(
                &gd.dataset,
                &cfg.network.hidden,
                &cfg.train_config(),
                cfg.train.seed,
            )?;
            std::fs::create_dir_all(&out_dir)
                .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
            model.save(&out_dir.join("model.json"))?;
            let log_path = out_dir.join("train_log.csv");
            std::fs::write(&log_path, train_log_csv(&history))
                .map_err(|e| Error::io(log_path.display().to_string(), e))?;
            let predictions = model.predict(&gd.dataset.inputs)?;
            let last = history.final_record();
            let summary = TrainSummary {
                config_hash: cfg.config_hash(),
                layout_hash: model.layout_hash.clone(),
                epochs: last.epoch,
                final_mse: last.mse,
                final_grad_norm: last.grad_norm,
                converged: history.converged,
                nrmse_train: nrmse(&gd.dataset.targets, &predictions)?,
            };
            let text = serde_json::to_string_pretty(&summary)
                .map_err(|e| Error::Message(format!("summary serialization failed: {e}")))?;
            let sum_path = out_dir.join("train_summary.json");
            std::fs::write(&sum_path, &text)
                .map_err(|e| Error::io(sum_path.display().to_string(), e))?;
            println!("{text}");
            Ok(())
        }
        Command::Evaluate {
            model,
            data,
            out,
            oracle,
        } => {
            let data_dir = data.clone().unwrap_or_else(|| base.join("test"));
            let out_dir = out.clone().unwrap_or_else(|| base.join("report"));
            let test = read_dataset(&data_dir)?;
            let loaded;
            let model_ref = if *oracle {
                None
            } else {
                let model_path = model.clone().unwrap_or_else(|| base.join("model.json"));
                loaded = SurrogateModel::load(&model_path)?;
                Some(&loaded)
            };
            let summary = run_evaluation(&cfg, &test, model_ref, &out_dir)?;
            let text = serde_json::to_string_pretty(&summary)
                .map_err(|e| Error::Message(format!("summary serialization failed: {e}")))?;
            println!("{text}");
            Ok(())
        }
        Command::Solve { rho } => {
            let spec = RhoSpec::parse(rho)?;
            let output = solve_once(&cfg, &spec)?;
            let text = serde_json::to_string_pretty(&output)
                .map_err(|e| Error::Message(format!("output serialization failed: {e}")))?;
            println!("{text}");
            Ok(())
        }
        Command::Report { records, out } => {
            let out_dir = out.clone().unwrap_or_else(|| base.join("report"));
            let recs = read_records_csv(records)?;
            let summary = summarize(&recs, None, &cfg.config_hash())?;
            bddc_surrogate::pipeline::emit_report(&out_dir, &summary, &recs)?;
            let text = serde_json::to_string_pretty(&summary)
                .map_err(|e| Error::Message(format!("summary serialization failed: {e}")))?;
            println!("{text}");
            Ok(())
        }
        Command::Selftest => {
            for line in selftest()? {
                println!("{line}");
            }
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
