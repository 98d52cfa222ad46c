//! `bovw`: one subcommand per pipeline stage.
//!
//! Exit codes: 0 on success, 2 for invalid input or insufficient data,
//! 1 for anything else.

mod images;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use bovw_core::neural::TrainConfig;
use bovw_core::pipeline::{self, NeuralTrainConfig};
use bovw_core::synth::{self, SynthConfig};
use bovw_core::{config::ConfigOverrides, Error, PipelineConfig};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "bovw", version, about = "Bag-of-visual-words image classification pipeline")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

/// Pipeline settings. Flags win over the config file, which wins over
/// built-in defaults.
#[derive(Args)]
struct GlobalArgs {
    /// Flat `key = value` config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    memory_budget_bytes: Option<u64>,
    #[arg(long, global = true)]
    sample_cap: Option<usize>,
    #[arg(long, global = true)]
    k_per_category: Option<usize>,
    #[arg(long, global = true)]
    vocab_size: Option<usize>,
    #[arg(long, global = true)]
    image_size: Option<u32>,
    /// Mini-batch size for clustering
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    /// Mini-batch iterations for clustering
    #[arg(long, global = true)]
    iterations: Option<usize>,
    #[arg(long, global = true)]
    top_k: Option<usize>,
    #[arg(long, global = true)]
    detection_threshold: Option<f64>,
    #[arg(long, global = true)]
    max_keypoints: Option<usize>,
    /// More log output (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

impl GlobalArgs {
    fn overrides(&self) -> ConfigOverrides {
        ConfigOverrides {
            sample_cap: self.sample_cap,
            k_per_category: self.k_per_category,
            vocab_size: self.vocab_size,
            image_size: self.image_size,
            memory_budget_bytes: self.memory_budget_bytes,
            batch_size: self.batch_size,
            iterations: self.iterations,
            seed: self.seed,
            workers: self.workers,
            top_k: self.top_k,
            detection_threshold: self.detection_threshold,
            max_keypoints: self.max_keypoints,
        }
    }

    fn resolve(&self) -> Result<PipelineConfig> {
        let file = self.config.as_ref().map(ConfigOverrides::load).transpose()?;
        Ok(PipelineConfig::resolve(file.as_ref(), &self.overrides())?)
    }
}

#[derive(Args)]
struct NeuralArgs {
    #[arg(long, default_value_t = NeuralTrainConfig::default().mapper.learning_rate)]
    mapper_learning_rate: f64,
    #[arg(long, default_value_t = NeuralTrainConfig::default().mapper.epochs)]
    mapper_epochs: usize,
    #[arg(long, default_value_t = NeuralTrainConfig::default().head.learning_rate)]
    head_learning_rate: f64,
    #[arg(long, default_value_t = NeuralTrainConfig::default().head.epochs)]
    head_epochs: usize,
    /// Mini-batch size for both networks
    #[arg(long, default_value_t = NeuralTrainConfig::default().mapper.batch_size)]
    neural_batch_size: usize,
}

impl NeuralArgs {
    fn config(&self, seed: u64) -> NeuralTrainConfig {
        let net = |learning_rate, epochs| TrainConfig {
            learning_rate,
            batch_size: self.neural_batch_size,
            epochs,
            seed,
        };
        NeuralTrainConfig {
            mapper: net(self.mapper_learning_rate, self.mapper_epochs),
            head: net(self.head_learning_rate, self.head_epochs),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Equalize and resize a `<category_id>/<image>` tree
    Preprocess { input: PathBuf, output: PathBuf },
    /// Detect keypoints and write descriptors, a manifest and labels
    Extract { input: PathBuf, output: PathBuf },
    /// Build the visual-word dictionary from a manifest
    Vocab { manifest: PathBuf, output: PathBuf },
    /// Build the category histogram matrix
    Bow {
        manifest: PathBuf,
        dictionary: PathBuf,
        output: PathBuf,
    },
    /// Build one histogram per descriptor file in a directory
    BowTest {
        descriptors: PathBuf,
        dictionary: PathBuf,
        output: PathBuf,
    },
    /// Rank categories for every image histogram by distance
    Classify {
        bows: PathBuf,
        matrix: PathBuf,
        output: PathBuf,
    },
    /// Train the histogram mapper and the softmax head
    TrainNeural {
        labels: PathBuf,
        bows: PathBuf,
        matrix: PathBuf,
        output: PathBuf,
        #[command(flatten)]
        neural: NeuralArgs,
    },
    /// Rank categories with a trained model
    PredictNeural {
        model: PathBuf,
        bows: PathBuf,
        output: PathBuf,
    },
    /// Top-k accuracy of predictions against labels
    Evaluate {
        predictions: PathBuf,
        labels: PathBuf,
        #[arg(short, long, value_delimiter = ',', default_value = "1,5")]
        k: Vec<usize>,
        /// Report path [default: <predictions>.report.json]
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Generate a synthetic descriptor dataset with planted words
    Synth {
        output: PathBuf,
        #[arg(long, default_value_t = SynthConfig::default().categories)]
        categories: usize,
        #[arg(long, default_value_t = SynthConfig::default().words_per_category)]
        words_per_category: usize,
        #[arg(long, default_value_t = SynthConfig::default().train_images)]
        train_images: usize,
        #[arg(long, default_value_t = SynthConfig::default().test_images)]
        test_images: usize,
        #[arg(long, default_value_t = SynthConfig::default().descriptors_per_image)]
        descriptors_per_image: usize,
        #[arg(long, default_value_t = SynthConfig::default().noise_sigma)]
        noise_sigma: f64,
    },
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn report_path(predictions: &Path) -> PathBuf {
    let mut name = predictions.file_stem().unwrap_or_default().to_os_string();
    name.push(".report.json");
    predictions.with_file_name(name)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = cli.global.resolve()?;
    log::debug!("config: {cfg:?}");
    match cli.command {
        Command::Preprocess { input, output } => print_json(&images::run_preprocess(&input, &output, &cfg)?),
        Command::Extract { input, output } => print_json(&images::run_extract(&input, &output, &cfg)?),
        Command::Vocab { manifest, output } => print_json(&pipeline::run_vocab(&manifest, &output, &cfg)?),
        Command::Bow {
            manifest,
            dictionary,
            output,
        } => print_json(&pipeline::run_bow(&manifest, &dictionary, &output, &cfg)?),
        Command::BowTest {
            descriptors,
            dictionary,
            output,
        } => print_json(&pipeline::run_bow_test(&descriptors, &dictionary, &output, &cfg)?),
        Command::Classify { bows, matrix, output } => {
            print_json(&pipeline::run_classify(&bows, &matrix, &output, &cfg)?)
        }
        Command::TrainNeural {
            labels,
            bows,
            matrix,
            output,
            neural,
        } => print_json(&pipeline::run_train_neural(
            &labels,
            &bows,
            &matrix,
            &output,
            &neural.config(cfg.seed),
        )?),
        Command::PredictNeural { model, bows, output } => {
            print_json(&pipeline::run_predict_neural(&model, &bows, &output, cfg.top_k)?)
        }
        Command::Evaluate {
            predictions,
            labels,
            k,
            report,
        } => {
            let r = pipeline::evaluate(&predictions, &labels, &k)?;
            pipeline::write_json(&report.unwrap_or_else(|| report_path(&predictions)), &r)?;
            print_json(&r)
        }
        Command::Synth {
            output,
            categories,
            words_per_category,
            train_images,
            test_images,
            descriptors_per_image,
            noise_sigma,
        } => {
            let scfg = SynthConfig {
                categories,
                words_per_category,
                train_images,
                test_images,
                descriptors_per_image,
                noise_sigma,
                seed: cfg.seed,
            };
            print_json(&pipeline::with_workers(cfg.workers, || synth::generate(&output, &scfg))?)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_invalid_input() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
