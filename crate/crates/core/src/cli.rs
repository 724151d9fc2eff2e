//! The `sfn` command line.
//!
//! Every subcommand reads its inputs from disk, takes all randomness from the
//! seed, and writes the effective configuration next to its outputs.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::analysis::{answer_class_stats, coverage_report, emit_report, ngram_counts, resample_split, AnalysisReport, RESAMPLE_RATIO};
use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::data::{load_dataset, question_files, write_split, DatasetSplit, Sample};
use crate::images::ImageStore;
use crate::model::{HeadKind, ImageSource};
use crate::synthetic::generate_synthetic;
use crate::training::{
    evaluate_model, load_model, pretrain_categorizer, pretrain_input_fusion, predict_samples, train_model, Prepared,
    Pretrained, Stage,
};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "sfn", version, about = "Supporting Facts Network for medical VQA")]
pub struct Cli {
    /// Worker threads. The pipeline runs on one thread, so every value gives
    /// the same deterministic results.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub threads: u32,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice (overrides the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override one config key, e.g. `--set training.epochs=5`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FinalStage {
    If1c,
    Sfn,
}

impl From<FinalStage> for HeadKind {
    fn from(s: FinalStage) -> Self {
        match s {
            FinalStage::If1c => HeadKind::If1c,
            FinalStage::Sfn => HeadKind::Sfn,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset in the question-file layout.
    GenerateSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Answer distributions, n-gram counts and unseen validation answers.
    Analyze {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Merge train and valid and cut a new 19:1 split.
    Resample {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the question categorizer.
    PretrainCategorizer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the input encoders and fusion on C1-C3 and Binary.
    PretrainFusion {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the IF-1C baseline or the SFN model.
    Train {
        #[arg(long, value_enum)]
        stage: FinalStage,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Output directory of `pretrain-categorizer` (needed for sfn).
        #[arg(long)]
        categorizer: Option<PathBuf>,
        /// Output directory of `pretrain-fusion`.
        #[arg(long)]
        input_fusion: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score a trained model on a labelled split.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "valid")]
        split: String,
        #[command(flatten)]
        common: Common,
    },
    /// Print `image_id|answer` for every question of a split.
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Write the lines here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

impl Common {
    fn config(&self) -> Result<Config> {
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("training.seed={seed}"));
            overrides.push(format!("synthetic.seed={seed}"));
        }
        Config::load(self.config.as_deref(), &overrides)
    }
}

/// Loads `C?_<split>.txt` from `data` with images from `data/images`.
pub fn load_split(data: &Path, split: &str) -> Result<DatasetSplit> {
    let files = question_files(data, split)?;
    if files.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no C?_{split}.txt question files in {}",
            data.display()
        )));
    }
    load_dataset(&files, &data.join("images"))
}

fn load_stage(dir: Option<&Path>, stage: Stage) -> Result<Option<Checkpoint<f32>>> {
    let Some(dir) = dir else { return Ok(None) };
    let ck = Checkpoint::load(dir)?;
    if ck.stage != stage.name() {
        return Err(Error::Checkpoint(format!(
            "{} holds a `{}` checkpoint, expected `{}`",
            dir.display(),
            ck.stage,
            stage.name()
        )));
    }
    Ok(Some(ck))
}

fn link_images(data: &Path, out: &Path) -> Result<()> {
    let target = out.join("images");
    if target.exists() {
        return Ok(());
    }
    let source = fs::canonicalize(data.join("images")).map_err(|e| Error::io(data.join("images"), e))?;
    #[cfg(unix)]
    let linked = std::os::unix::fs::symlink(&source, &target);
    #[cfg(not(unix))]
    let linked = std::os::windows::fs::symlink_dir(&source, &target);
    linked.map_err(|e| Error::io(&target, e))
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenerateSynthetic { out, common } => {
            let config = common.config()?;
            let summary = generate_synthetic(&config.synthetic, &out)?;
            config.echo(&out)?;
            println!(
                "wrote {} train and {} valid questions over {} images to {}",
                summary.train_questions,
                summary.valid_questions,
                summary.train_images + summary.valid_images,
                out.display()
            );
        }
        Command::Analyze { data, out, common } => {
            let config = common.config()?;
            let train = load_split(&data, "train")?;
            let valid = load_split(&data, "valid").ok();
            let report = AnalysisReport {
                distribution: answer_class_stats(&train)?,
                ngrams: ngram_counts(&train),
                coverage: valid.as_ref().map(|v| coverage_report(&train, v)),
            };
            let files = emit_report(&report, &out)?;
            config.echo(&out)?;
            println!("wrote {} report files to {}", files.len(), out.display());
        }
        Command::Resample { data, out, common } => {
            let config = common.config()?;
            let train = load_split(&data, "train")?;
            let valid = load_split(&data, "valid")?;
            let (new_train, new_valid) = resample_split(&train, &valid, RESAMPLE_RATIO, config.training.seed)?;
            write_split(&new_train, &out, "train")?;
            write_split(&new_valid, &out, "valid")?;
            link_images(&data, &out)?;
            config.echo(&out)?;
            println!("resampled into {} train and {} valid samples", new_train.len(), new_valid.len());
        }
        Command::PretrainCategorizer { data, out, common } => {
            let config = common.config()?;
            let train = load_split(&data, "train")?;
            let valid = load_split(&data, "valid")?;
            let vocab = crate::data::build_vocabulary(&train);
            let outcome = pretrain_categorizer::<f32>(&train, &valid, &config, &vocab)?;
            outcome.save(&out)?;
            config.echo(&out)?;
            println!("categorizer: best epoch {}, validation F1 {:.4}", outcome.best_epoch, outcome.best_f1);
        }
        Command::PretrainFusion { data, out, common } => {
            let config = common.config()?;
            let train = load_split(&data, "train")?;
            let valid = load_split(&data, "valid")?;
            let prepared = Prepared::<f32>::new(&train, &valid, &config)?;
            let outcome = pretrain_input_fusion(&train, &valid, &config, &prepared, &mut |_| {})?;
            outcome.save(&out)?;
            config.echo(&out)?;
            println!("input fusion: best epoch {}, validation F1 {:.4}", outcome.best_epoch, outcome.best_f1);
        }
        Command::Train {
            stage,
            data,
            out,
            categorizer,
            input_fusion,
            common,
        } => {
            let config = common.config()?;
            let head = HeadKind::from(stage);
            let categorizer = load_stage(categorizer.as_deref(), Stage::Categorizer)?;
            let input_fusion = load_stage(input_fusion.as_deref(), Stage::InputFusion)?;
            // fail before loading images when a required stage is missing
            if input_fusion.is_none() {
                return Err(Error::MissingPretrained(Stage::InputFusion.name().into()));
            }
            if head == HeadKind::Sfn && categorizer.is_none() {
                return Err(Error::MissingPretrained(Stage::Categorizer.name().into()));
            }
            let train = load_split(&data, "train")?;
            let valid = load_split(&data, "valid")?;
            let prepared = Prepared::<f32>::new(&train, &valid, &config)?;
            let pretrained = Pretrained {
                categorizer: categorizer.as_ref(),
                input_fusion: input_fusion.as_ref(),
            };
            let outcome = train_model(head, &train, &valid, &config, &prepared, pretrained)?;
            outcome.save(&out)?;
            config.echo(&out)?;
            println!("{}: best epoch {}, validation F1 {:.4}", head.name(), outcome.best_epoch, outcome.best_f1);
        }
        Command::Evaluate {
            data,
            model,
            out,
            split,
            common,
        } => {
            let config = common.config()?;
            let ck = Checkpoint::<f32>::load(&model)?;
            let net = load_model(&ck)?;
            let samples = load_split(&data, &split)?;
            let images = ImageStore::build(net.spec.dims.backbone, &samples.samples)?;
            let (report, predictions) = evaluate_model(&net, &samples, &images, &ck.vocab, &ck.answers, &config)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let metrics = out.join("metrics.csv");
            fs::write(&metrics, report.to_csv()).map_err(|e| Error::io(&metrics, e))?;
            let lines: String = samples
                .samples
                .iter()
                .filter(|s| s.category_known())
                .zip(&predictions)
                .map(|(s, p)| format!("{}|{}|{}|{:.4}\n", s.image_id, p.category.code(), p.answer, p.confidence))
                .collect();
            let path = out.join("predictions.txt");
            fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
            config.echo(&out)?;
            print!("{}", report.to_table());
        }
        Command::Predict {
            data,
            model,
            split,
            out,
            common,
        } => {
            let config = common.config()?;
            let ck = Checkpoint::<f32>::load(&model)?;
            let net = load_model(&ck)?;
            let samples = load_split(&data, &split)?;
            let images = ImageStore::build(net.spec.dims.backbone, &samples.samples)?;
            let refs: Vec<&Sample> = samples.samples.iter().collect();
            let predictions = predict_samples(
                &net,
                &refs,
                &ck.vocab,
                ImageSource::Prepared(&images),
                &ck.answers,
                config.training.batch_size,
            )?;
            let lines: String = refs
                .iter()
                .zip(&predictions)
                .map(|(s, p)| format!("{}|{}\n", s.image_id, p.answer))
                .collect();
            match out {
                Some(path) => {
                    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                        config.echo(dir)?;
                    }
                    fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
                }
                None => {
                    let mut stdout = std::io::stdout().lock();
                    stdout
                        .write_all(lines.as_bytes())
                        .map_err(|e| Error::io("<stdout>", e))?;
                }
            }
        }
    }
    Ok(())
}

/// Parses `argv` (program name first) and runs the subcommand. Returns the
/// process exit code: 0 on success, 1 on a pipeline error, 2 on a usage
/// error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
