//! Staged training: categorizer pretraining, input-fusion pretraining on the
//! well-posed categories, then the IF-1C or SFN model on top of the
//! pretrained parts.
//!
//! Every stage draws batches with the inverse-frequency sampler (the
//! categorizer uses plain shuffled epochs), optimizes with Adam, evaluates
//! on the validation split after each epoch and keeps the parameters of the
//! epoch with the best macro-F1.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{assign_params, collect_arrays, Checkpoint, NamedArray};
use crate::config::Config;
use crate::data::{
    build_answer_dictionaries, build_vocabulary, AnswerDictionaries, CategoryLabel, DatasetSplit, Sample, Vocabulary,
};
use crate::encoders::{load_embeddings, TokenBatch};
use crate::images::ImageStore;
use crate::metrics::{precision_recall_f1, strict_accuracy, MetricsReport};
use crate::model::{new_categorizer, Batch, FeatureStore, HeadKind, ImageSource, Model, ModelSpec, Target};
use crate::nn::ops::cross_entropy;
use crate::nn::{set_frozen, zero_grads, Adam, AdamConfig, Module, Real};
use crate::reasoning::{Categorizer, Prediction};
use crate::rng;
use crate::sampling::{compute_weights, WeightedSampler};
use crate::{Error, Result};

pub const LOG_FILE: &str = "training_log.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epochs per stage.
    pub epochs: usize,
    /// Optimizer steps per epoch; 0 means enough batches to cover the
    /// training split once.
    pub steps_per_epoch: usize,
    pub seed: u64,
    /// Freeze the image backbone in the if1c and sfn stages (its features
    /// are then computed once and cached).
    pub freeze_backbone: bool,
    pub freeze_embeddings: bool,
    /// Per-stage overrides; 0 keeps the shared value.
    pub categorizer_epochs: usize,
    pub categorizer_learning_rate: f64,
    pub input_fusion_epochs: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 256,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 10,
            steps_per_epoch: 0,
            seed: 0,
            freeze_backbone: false,
            freeze_embeddings: false,
            categorizer_epochs: 0,
            categorizer_learning_rate: 0.0,
            input_fusion_epochs: 0,
        }
    }
}

impl TrainingConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn epochs_for(&self, stage: Stage) -> usize {
        let o = match stage {
            Stage::Categorizer => self.categorizer_epochs,
            Stage::InputFusion => self.input_fusion_epochs,
            _ => 0,
        };
        if o > 0 {
            o
        } else {
            self.epochs
        }
    }

    fn steps(&self, samples: usize) -> usize {
        if self.steps_per_epoch > 0 {
            self.steps_per_epoch
        } else {
            samples.div_ceil(self.batch_size).max(1)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Categorizer,
    InputFusion,
    If1c,
    Sfn,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Categorizer => "categorizer",
            Stage::InputFusion => "input_fusion",
            Stage::If1c => "if1c",
            Stage::Sfn => "sfn",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "categorizer" => Ok(Stage::Categorizer),
            "input_fusion" => Ok(Stage::InputFusion),
            "if1c" => Ok(Stage::If1c),
            "sfn" => Ok(Stage::Sfn),
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: Stage,
    pub train_loss: f64,
    pub val_precision: f64,
    pub val_recall: f64,
    pub val_f1: f64,
    pub val_accuracy: f64,
}

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut out = String::from("epoch,stage,train_loss,val_precision,val_recall,val_f1,val_accuracy\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.epoch,
            r.stage.name(),
            r.train_loss,
            r.val_precision,
            r.val_recall,
            r.val_f1,
            r.val_accuracy
        );
    }
    out
}

pub fn write_log(path: &Path, rows: &[EpochLog]) -> Result<()> {
    fs::write(path, log_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Result of one training stage.
#[derive(Clone, Debug)]
pub struct StageOutcome<F> {
    pub checkpoint: Checkpoint<F>,
    pub log: Vec<EpochLog>,
    /// Epoch whose parameters were kept (0 = initialization).
    pub best_epoch: usize,
    pub best_f1: f64,
}

impl<F: Real> StageOutcome<F> {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.checkpoint.save(dir)?;
        write_log(&dir.join(LOG_FILE), &self.log)
    }
}

/// Vocabulary, dictionaries and prepared images shared by every stage.
#[derive(Clone, Debug)]
pub struct Prepared<F> {
    pub vocab: Vocabulary,
    pub dictionaries: AnswerDictionaries,
    pub images: ImageStore<F>,
}

impl<F: Real> Prepared<F> {
    pub fn new(train: &DatasetSplit, valid: &DatasetSplit, config: &Config) -> Result<Self> {
        let vocab = build_vocabulary(train);
        let dictionaries = build_answer_dictionaries(train)?;
        let images = ImageStore::build(config.model.backbone, train.samples.iter().chain(&valid.samples))?;
        Ok(Prepared {
            vocab,
            dictionaries,
            images,
        })
    }
}

fn scores(predicted: &[String], gold: &[String]) -> Result<(f64, f64, f64, f64)> {
    if gold.is_empty() {
        return Ok((0.0, 0.0, 0.0, 0.0));
    }
    let (p, r, f) = precision_recall_f1(predicted, gold)?;
    Ok((p, r, f, strict_accuracy(predicted, gold)?))
}

fn check_vocab<F: Real>(ck: &Checkpoint<F>, vocab: &Vocabulary, stage: &str) -> Result<()> {
    if &ck.vocab != vocab {
        return Err(Error::Checkpoint(format!(
            "the `{stage}` checkpoint was trained with a different vocabulary"
        )));
    }
    Ok(())
}

fn categorizer_batch(samples: &[&Sample], vocab: &Vocabulary) -> TokenBatch {
    TokenBatch::new(&samples.iter().map(|s| vocab.encode_all(&s.tokens)).collect::<Vec<_>>())
}

/// Predicted category codes for `samples`.
pub fn categorize_samples<F: Real>(
    categorizer: &Categorizer<F>,
    samples: &[&Sample],
    vocab: &Vocabulary,
    batch_size: usize,
) -> Vec<CategoryLabel> {
    samples
        .chunks(batch_size.max(1))
        .flat_map(|chunk| {
            categorizer
                .distributions(&categorizer_batch(chunk, vocab))
                .into_iter()
                .map(|d| d.argmax())
        })
        .collect()
}

/// Trains the question categorizer on every sample with a known category.
pub fn pretrain_categorizer<F: Real>(
    train: &DatasetSplit,
    valid: &DatasetSplit,
    config: &Config,
    vocab: &Vocabulary,
) -> Result<StageOutcome<F>> {
    let t = &config.training;
    let stage = Stage::Categorizer;
    let mut init = rng::derived(t.seed, "init:categorizer");
    let mut model: Categorizer<F> = new_categorizer(&config.model, vocab.len(), &mut init);
    let mut adam_cfg = t.adam();
    if t.categorizer_learning_rate > 0.0 {
        adam_cfg.learning_rate = t.categorizer_learning_rate;
    }
    let epochs = t.epochs_for(stage);
    let mut adam = Adam::new(adam_cfg);
    let mut order_rng = rng::derived(t.seed, "order:categorizer");
    let mut dropout_rng = rng::derived(t.seed, "dropout:categorizer");
    let train_samples: Vec<&Sample> = train.samples.iter().filter(|s| s.category_known()).collect();
    let valid_samples: Vec<&Sample> = valid.samples.iter().filter(|s| s.category_known()).collect();
    let gold: Vec<String> = valid_samples.iter().map(|s| s.derived_category.code().to_string()).collect();

    let mut best = (collect_arrays(&model, "categorizer"), 0usize, -1.0f64);
    let mut log = Vec::new();
    for epoch in 1..=epochs {
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        rng::shuffle(&mut order_rng, &mut order);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(t.batch_size) {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| train_samples[i]).collect();
            let tokens = categorizer_batch(&samples, vocab);
            zero_grads(&mut model);
            let (logits, cache) = model.forward(&tokens, Some(&mut dropout_rng));
            let targets: Vec<(usize, usize)> =
                samples.iter().enumerate().map(|(i, s)| (i, s.derived_category.index())).collect();
            let scale = F::one() / F::lit(samples.len() as f64);
            let (loss, grad) = cross_entropy(logits.view(), &targets, scale);
            model.backward(&cache, grad.view());
            adam.step(&mut model);
            total += loss.to_f64().unwrap_or(f64::NAN);
            batches += 1;
        }
        let predicted: Vec<String> = categorize_samples(&model, &valid_samples, vocab, t.batch_size)
            .iter()
            .map(|c| c.code().to_string())
            .collect();
        let (p, r, f, a) = scores(&predicted, &gold)?;
        log.push(EpochLog {
            epoch,
            stage,
            train_loss: total / batches.max(1) as f64,
            val_precision: p,
            val_recall: r,
            val_f1: f,
            val_accuracy: a,
        });
        if f > best.2 {
            best = (collect_arrays(&model, "categorizer"), epoch, f);
        }
    }
    Ok(StageOutcome {
        checkpoint: Checkpoint {
            stage: stage.name().into(),
            config_fingerprint: config.fingerprint(),
            model: serde_json::to_value(&config.model)?,
            arrays: best.0,
            vocab: vocab.clone(),
            answers: build_answer_dictionaries(train)?,
        },
        log,
        best_epoch: best.1,
        best_f1: best.2.max(0.0),
    })
}

/// Rebuilds a categorizer from its checkpoint.
pub fn load_categorizer<F: Real>(ck: &Checkpoint<F>) -> Result<Categorizer<F>> {
    let dims = serde_json::from_value(ck.model.clone())?;
    let mut model = new_categorizer(&dims, ck.vocab.len(), &mut rng::seeded(0));
    assign_params(&mut model, "categorizer", &ck.arrays, true)?;
    Ok(model)
}

struct Fit<'a, F> {
    stage: Stage,
    train: Vec<&'a Sample>,
    valid: Vec<&'a Sample>,
    source: ImageSource<'a, F>,
}

/// Runs the epochs of a model stage; leaves the best parameters in `model`.
fn fit<F: Real>(
    model: &mut Model<F>,
    fit: Fit<'_, F>,
    config: &Config,
    prepared: &Prepared<F>,
    observer: &mut dyn FnMut(&[&Sample]),
) -> Result<(Vec<EpochLog>, usize, f64)> {
    let t = &config.training;
    let name = fit.stage.name();
    let dicts = &prepared.dictionaries;
    let targets: Vec<Target> = fit
        .train
        .iter()
        .map(|s| Target::for_sample(s, dicts))
        .collect::<Result<_>>()?;
    let split = DatasetSplit::new(fit.train.iter().map(|s| (*s).clone()).collect(), Default::default());
    let weights = compute_weights(&split, dicts)?;
    let mut sampler = WeightedSampler::new(&weights, rng::derived(t.seed, &format!("sampler:{name}")))?;
    let mut dropout_rng = rng::derived(t.seed, &format!("dropout:{name}"));
    let mut adam = Adam::new(t.adam());
    let gold: Vec<String> = fit.valid.iter().map(|s| s.answer.clone().unwrap_or_default()).collect();

    let mut best: (Vec<NamedArray<F>>, usize, f64) = (collect_arrays(model, ""), 0, -1.0);
    let mut log = Vec::new();
    for epoch in 1..=t.epochs_for(fit.stage) {
        let mut total = 0.0;
        let steps = t.steps(fit.train.len());
        for _ in 0..steps {
            let idx = sampler.sample_indices(t.batch_size)?;
            let samples: Vec<&Sample> = idx.iter().map(|&i| fit.train[i]).collect();
            observer(&samples);
            let batch_targets: Vec<Target> = idx.iter().map(|&i| targets[i]).collect();
            let batch = Batch::from_samples(&samples, &prepared.vocab, fit.source)?;
            let loss = model.train_step(&batch, &batch_targets, Some(&mut dropout_rng))?;
            adam.step(model);
            total += loss.to_f64().unwrap_or(f64::NAN);
        }
        let predicted: Vec<String> = predict_samples(model, &fit.valid, &prepared.vocab, fit.source, dicts, t.batch_size)?
            .into_iter()
            .map(|p| p.answer)
            .collect();
        let (p, r, f, a) = scores(&predicted, &gold)?;
        log.push(EpochLog {
            epoch,
            stage: fit.stage,
            train_loss: total / steps as f64,
            val_precision: p,
            val_recall: r,
            val_f1: f,
            val_accuracy: a,
        });
        if f > best.2 {
            best = (collect_arrays(model, ""), epoch, f);
        }
    }
    assign_params(model, "", &best.0, true)?;
    Ok((log, best.1, best.2.max(0.0)))
}

/// Evaluation-mode predictions in sample order.
pub fn predict_samples<F: Real>(
    model: &Model<F>,
    samples: &[&Sample],
    vocab: &Vocabulary,
    source: ImageSource<'_, F>,
    dictionaries: &AnswerDictionaries,
    batch_size: usize,
) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = Batch::from_samples(chunk, vocab, source)?;
        out.extend(model.predict(&batch, dictionaries)?);
    }
    Ok(out)
}

fn model_checkpoint<F: Real>(model: &Model<F>, stage: Stage, prefix: &str, config: &Config, prepared: &Prepared<F>) -> Result<Checkpoint<F>> {
    let arrays = collect_arrays(model, "")
        .into_iter()
        .filter(|a| prefix.is_empty() || a.name.starts_with(&format!("{prefix}.")))
        .collect();
    Ok(Checkpoint {
        stage: stage.name().into(),
        config_fingerprint: config.fingerprint(),
        model: serde_json::to_value(&model.spec)?,
        arrays,
        vocab: prepared.vocab.clone(),
        answers: prepared.dictionaries.clone(),
    })
}

fn initial_embedding<F: Real>(config: &Config, vocab: &Vocabulary) -> Result<Option<crate::nn::Embedding<F>>> {
    config
        .paths
        .embeddings
        .as_deref()
        .map(|p| load_embeddings(p, vocab, config.training.seed))
        .transpose()
}

/// Trains the encoders and Fusion I/II with a temporary global head on every
/// category except C4. `observer` sees each training batch. Only the
/// `input.*` arrays are kept in the checkpoint.
pub fn pretrain_input_fusion<F: Real>(
    train: &DatasetSplit,
    valid: &DatasetSplit,
    config: &Config,
    prepared: &Prepared<F>,
    observer: &mut dyn FnMut(&[&Sample]),
) -> Result<StageOutcome<F>> {
    let stage = Stage::InputFusion;
    let spec = ModelSpec {
        categorizer: false,
        ..ModelSpec::new(config.model.clone(), HeadKind::If1c, &prepared.vocab, &prepared.dictionaries)
    };
    let mut init = rng::derived(config.training.seed, "init:input_fusion");
    let embedding = initial_embedding(config, &prepared.vocab)?;
    let mut model = Model::new(spec, embedding, config.paths.backbone_asset.as_deref(), &mut init)?;
    if config.training.freeze_embeddings {
        set_frozen(&mut model.input.question.embedding, true);
    }
    let keep = |s: &&Sample| s.category_known() && s.derived_category != CategoryLabel::C4Abnormality;
    let fit_args = Fit {
        stage,
        train: train.samples.iter().filter(keep).collect(),
        valid: valid.samples.iter().filter(keep).collect(),
        source: ImageSource::Prepared(&prepared.images),
    };
    let (log, best_epoch, best_f1) = fit(&mut model, fit_args, config, prepared, observer)?;
    Ok(StageOutcome {
        checkpoint: model_checkpoint(&model, stage, "input", config, prepared)?,
        log,
        best_epoch,
        best_f1,
    })
}

/// Pretrained inputs for [`train_model`].
#[derive(Clone, Copy, Debug, Default)]
pub struct Pretrained<'a, F> {
    pub categorizer: Option<&'a Checkpoint<F>>,
    pub input_fusion: Option<&'a Checkpoint<F>>,
}

/// Builds the IF-1C or SFN model from the pretrained parts, ready to train.
pub fn assemble_model<F: Real>(
    head: HeadKind,
    config: &Config,
    prepared: &Prepared<F>,
    pretrained: Pretrained<'_, F>,
) -> Result<Model<F>> {
    let input_ck = pretrained
        .input_fusion
        .ok_or_else(|| Error::MissingPretrained(Stage::InputFusion.name().into()))?;
    let categorizer_ck = match head {
        HeadKind::Sfn => Some(
            pretrained
                .categorizer
                .ok_or_else(|| Error::MissingPretrained(Stage::Categorizer.name().into()))?,
        ),
        HeadKind::If1c => None,
    };
    check_vocab(input_ck, &prepared.vocab, Stage::InputFusion.name())?;
    let spec = ModelSpec::new(config.model.clone(), head, &prepared.vocab, &prepared.dictionaries);
    let stage = if head == HeadKind::Sfn { "sfn" } else { "if1c" };
    let mut init = rng::derived(config.training.seed, &format!("init:{stage}"));
    let mut model = Model::new(spec, None, config.paths.backbone_asset.as_deref(), &mut init)?;
    assign_params(&mut model.input, "input", &input_ck.arrays, true)?;
    if let (Some(ck), Some(cat)) = (categorizer_ck, model.categorizer.as_mut()) {
        check_vocab(ck, &prepared.vocab, Stage::Categorizer.name())?;
        assign_params(cat, "categorizer", &ck.arrays, true)?;
        set_frozen(cat, true);
    }
    if config.training.freeze_backbone {
        set_frozen(&mut model.input.image, true);
    }
    if config.training.freeze_embeddings {
        set_frozen(&mut model.input.question.embedding, true);
    }
    Ok(model)
}

/// Trains the final IF-1C or SFN model.
pub fn train_model<F: Real>(
    head: HeadKind,
    train: &DatasetSplit,
    valid: &DatasetSplit,
    config: &Config,
    prepared: &Prepared<F>,
    pretrained: Pretrained<'_, F>,
) -> Result<StageOutcome<F>> {
    let stage = match head {
        HeadKind::If1c => Stage::If1c,
        HeadKind::Sfn => Stage::Sfn,
    };
    let mut model = assemble_model(head, config, prepared, pretrained)?;
    let features;
    let source = if model.input.backbone_frozen() {
        let ids: Vec<String> = train
            .samples
            .iter()
            .chain(&valid.samples)
            .map(|s| s.image_id.clone())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        features = FeatureStore::compute(&model.input.image, &prepared.images, &ids)?;
        ImageSource::Features(&features)
    } else {
        ImageSource::Prepared(&prepared.images)
    };
    let fit_args = Fit {
        stage,
        train: train.samples.iter().filter(|s| s.category_known()).collect(),
        valid: valid.samples.iter().filter(|s| s.category_known()).collect(),
        source,
    };
    let (log, best_epoch, best_f1) = fit(&mut model, fit_args, config, prepared, &mut |_| {})?;
    Ok(StageOutcome {
        checkpoint: model_checkpoint(&model, stage, "", config, prepared)?,
        log,
        best_epoch,
        best_f1,
    })
}

/// Rebuilds a full IF-1C or SFN model from its checkpoint.
pub fn load_model<F: Real>(ck: &Checkpoint<F>) -> Result<Model<F>> {
    let spec: ModelSpec = serde_json::from_value(ck.model.clone())?;
    spec.check_dictionaries(&ck.answers)?;
    let mut model = Model::skeleton(spec)?;
    assign_params(&mut model, "", &ck.arrays, true)?;
    if let Some(cat) = model.categorizer.as_mut() {
        set_frozen(cat, true);
    }
    Ok(model)
}

/// Scores a model on every answered sample of `split`.
pub fn evaluate_model<F: Real>(
    model: &Model<F>,
    split: &DatasetSplit,
    images: &ImageStore<F>,
    vocab: &Vocabulary,
    dictionaries: &AnswerDictionaries,
    config: &Config,
) -> Result<(MetricsReport, Vec<Prediction>)> {
    let samples: Vec<&Sample> = split.samples.iter().filter(|s| s.category_known()).collect();
    let predictions = predict_samples(
        model,
        &samples,
        vocab,
        ImageSource::Prepared(images),
        dictionaries,
        config.training.batch_size,
    )?;
    let answers: Vec<&str> = predictions.iter().map(|p| p.answer.as_str()).collect();
    let gold: Vec<&str> = samples.iter().map(|s| s.answer.as_deref().unwrap_or("")).collect();
    let categories: Vec<CategoryLabel> = samples.iter().map(|s| s.derived_category).collect();
    let report = MetricsReport::compute(&answers, &gold, &categories, config.metrics.bleu_smoothing)?;
    Ok((report, predictions))
}

/// All four stages for one seed, with both final models sharing the same
/// pretrained parts.
#[derive(Clone, Debug)]
pub struct StagedRun<F> {
    pub categorizer: StageOutcome<F>,
    pub input_fusion: StageOutcome<F>,
    pub if1c: StageOutcome<F>,
    pub sfn: StageOutcome<F>,
}

pub fn run_all_stages<F: Real>(
    train: &DatasetSplit,
    valid: &DatasetSplit,
    config: &Config,
    prepared: &Prepared<F>,
) -> Result<StagedRun<F>> {
    let categorizer = pretrain_categorizer(train, valid, config, &prepared.vocab)?;
    let input_fusion = pretrain_input_fusion(train, valid, config, prepared, &mut |_| {})?;
    let pretrained = Pretrained {
        categorizer: Some(&categorizer.checkpoint),
        input_fusion: Some(&input_fusion.checkpoint),
    };
    let if1c = train_model(HeadKind::If1c, train, valid, config, prepared, pretrained)?;
    let sfn = train_model(HeadKind::Sfn, train, valid, config, prepared, pretrained)?;
    Ok(StagedRun {
        categorizer,
        input_fusion,
        if1c,
        sfn,
    })
}

/// Raw parameter bytes of the categorizer inside `model`.
pub fn categorizer_bytes<F: Real>(model: &impl Module<F>) -> Vec<u8> {
    let mut out = Vec::new();
    model.visit_params("", &mut |name, p| {
        if name.starts_with("categorizer.") {
            for &v in p.value.iter() {
                v.put_le(&mut out);
            }
        }
    });
    out
}
