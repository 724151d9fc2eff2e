//! Full models: the input fusion block (encoders + Fusion I/II) followed by
//! either the IF-1C head or the SFN heads, with an optional frozen
//! categorizer for answer routing.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{s, Array2, Array3, Array4, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{AnswerDictionaries, CategoryLabel, Sample, Vocabulary};
use crate::encoders::{
    BackboneKind, ImageCache, ImageEncoder, ImageFeatureMap, QuestionCache, QuestionEncoder, SizeCache, SizeEncoder,
    TokenBatch,
};
use crate::fusion::{fusion_ii_concat, AttentionCache, FusedRepresentation, GlimpseAttention};
use crate::images::ImageStore;
use crate::nn::linear::{Embedding, Mlp2Cache};
use crate::nn::ops::cross_entropy;
use crate::nn::{join, zero_grads, Module, Param, Real};
use crate::reasoning::{
    answer_fusion, global_prediction, Categorizer, CategoryDistribution, If1cHead, Prediction, SfnCache, SfnHeads,
};
use crate::rng::Rng;
use crate::{Error, Result};

/// Layer widths and switches that do not depend on the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub embed_dim: usize,
    pub question_dim: usize,
    pub size_dim: usize,
    pub glimpses: usize,
    /// Hidden width of every two-layer head.
    pub hidden: usize,
    /// Width of each supporting fact.
    pub support_dim: usize,
    pub categorizer_hidden: usize,
    pub dropout: f64,
    pub backbone: BackboneKind,
    /// Feed the supporting facts into the C4 and Binary heads.
    pub facts: bool,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            embed_dim: 100,
            question_dim: 128,
            size_dim: 32,
            glimpses: 2,
            hidden: 256,
            support_dim: 64,
            categorizer_hidden: 256,
            dropout: 0.5,
            backbone: BackboneKind::Small,
            facts: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    If1c,
    Sfn,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::If1c => "if1c",
            HeadKind::Sfn => "sfn",
        }
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub dims: ModelDims,
    pub head: HeadKind,
    pub vocab_size: usize,
    /// Per-category dictionary sizes in C1, C2, C3, C4, Binary order.
    pub classes: [usize; 5],
    pub global_classes: usize,
    pub categorizer: bool,
}

impl ModelSpec {
    pub fn new(dims: ModelDims, head: HeadKind, vocab: &Vocabulary, dictionaries: &AnswerDictionaries) -> Self {
        ModelSpec {
            dims,
            head,
            vocab_size: vocab.len(),
            classes: dictionaries.class_counts(),
            global_classes: dictionaries.global().len(),
            categorizer: head == HeadKind::Sfn,
        }
    }

    /// Checks that the dictionaries fit the head widths.
    pub fn check_dictionaries(&self, dictionaries: &AnswerDictionaries) -> Result<()> {
        let counts = dictionaries.class_counts();
        for c in CategoryLabel::ALL {
            if counts[c.index()] != self.classes[c.index()] {
                return Err(Error::Shape(format!(
                    "head `{c}` has {} classes but its dictionary has {}",
                    self.classes[c.index()],
                    counts[c.index()]
                )));
            }
        }
        if dictionaries.global().len() != self.global_classes {
            return Err(Error::Shape(format!(
                "head `global` has {} classes but its dictionary has {}",
                self.global_classes,
                dictionaries.global().len()
            )));
        }
        Ok(())
    }
}

/// Image input for a batch: prepared tensors run through the backbone, or
/// backbone features computed ahead of time (frozen backbone).
#[derive(Clone, Debug)]
pub enum BatchImages<F> {
    Prepared(Array4<F>),
    Features(ImageFeatureMap<F>),
}

#[derive(Clone, Debug)]
pub struct Batch<F> {
    pub tokens: TokenBatch,
    pub images: BatchImages<F>,
    pub sizes: Vec<(u32, u32)>,
}

impl<F: Real> Batch<F> {
    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }
}

/// Backbone features per image, for training with a frozen backbone.
#[derive(Clone, Debug, Default)]
pub struct FeatureStore<F> {
    index: HashMap<String, usize>,
    /// (images, positions, channels)
    features: Vec<Array2<F>>,
    grid: (usize, usize),
}

impl<F: Real> FeatureStore<F> {
    pub fn compute(encoder: &ImageEncoder<F>, store: &ImageStore<F>, ids: &[String]) -> Result<Self> {
        let mut out = FeatureStore {
            index: HashMap::new(),
            features: Vec::new(),
            grid: (0, 0),
        };
        for chunk in ids.chunks(64) {
            let refs: Vec<&str> = chunk.iter().map(String::as_str).collect();
            let (fm, _) = encoder.forward(store.batch(&refs)?.view());
            out.grid = fm.grid;
            for (id, f) in chunk.iter().zip(fm.data.outer_iter()) {
                out.index.insert(id.clone(), out.features.len());
                out.features.push(f.to_owned());
            }
        }
        Ok(out)
    }

    pub fn batch(&self, image_ids: &[&str]) -> Result<ImageFeatureMap<F>> {
        let first = self.features.first().ok_or_else(|| Error::InvalidInput("empty feature store".into()))?;
        let mut data = Array3::zeros((image_ids.len(), first.nrows(), first.ncols()));
        for (mut row, id) in data.outer_iter_mut().zip(image_ids) {
            let i = self
                .index
                .get(*id)
                .ok_or_else(|| Error::InvalidInput(format!("image `{id}` has no cached features")))?;
            row.assign(&self.features[*i]);
        }
        ImageFeatureMap::new(data, self.grid)
    }
}

/// Where batch images come from.
#[derive(Clone, Copy, Debug)]
pub enum ImageSource<'a, F> {
    Prepared(&'a ImageStore<F>),
    Features(&'a FeatureStore<F>),
}

impl<F: Real> Batch<F> {
    pub fn from_samples(samples: &[&Sample], vocab: &Vocabulary, images: ImageSource<'_, F>) -> Result<Self> {
        let tokens = TokenBatch::new(&samples.iter().map(|s| vocab.encode_all(&s.tokens)).collect::<Vec<_>>());
        let ids: Vec<&str> = samples.iter().map(|s| s.image_id.as_str()).collect();
        let images = match images {
            ImageSource::Prepared(store) => BatchImages::Prepared(store.batch(&ids)?),
            ImageSource::Features(store) => BatchImages::Features(store.batch(&ids)?),
        };
        Ok(Batch {
            tokens,
            images,
            sizes: samples.iter().map(|s| (s.image_width, s.image_height)).collect(),
        })
    }
}

/// Question, image and size encoders with Fusion I and II.
#[derive(Clone, Debug)]
pub struct InputFusion<F> {
    pub question: QuestionEncoder<F>,
    pub image: ImageEncoder<F>,
    pub size: SizeEncoder<F>,
    pub attention: GlimpseAttention<F>,
}

#[derive(Clone, Debug)]
pub struct InputCache<F> {
    question: QuestionCache<F>,
    image: Option<ImageCache<F>>,
    size: SizeCache<F>,
    attention: AttentionCache<F>,
}

impl<F: Real> InputCache<F> {
    pub fn attention(&self) -> &AttentionCache<F> {
        &self.attention
    }
}

impl<F: Real> InputFusion<F> {
    pub fn new(
        dims: &ModelDims,
        vocab_size: usize,
        embedding: Option<Embedding<F>>,
        image: ImageEncoder<F>,
        rng: &mut Rng,
    ) -> Result<Self> {
        if image.kind() != dims.backbone {
            return Err(Error::Config(format!(
                "backbone `{}` given where `{}` is configured",
                image.kind().name(),
                dims.backbone.name()
            )));
        }
        let question = match embedding {
            Some(e) => {
                if e.vocab_size() != vocab_size {
                    return Err(Error::Shape(format!(
                        "embedding table has {} rows for a vocabulary of {vocab_size}",
                        e.vocab_size()
                    )));
                }
                QuestionEncoder::with_embedding(e, dims.question_dim, rng)
            }
            None => QuestionEncoder::new(vocab_size, dims.embed_dim, dims.question_dim, rng),
        };
        let size = SizeEncoder::new(dims.size_dim, rng);
        let attention = GlimpseAttention::new(image.channels(), dims.question_dim, dims.glimpses, rng);
        Ok(InputFusion {
            question,
            image,
            size,
            attention,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.attention.output_dim() + self.size.output_dim()
    }

    /// True when every backbone parameter is frozen.
    pub fn backbone_frozen(&self) -> bool {
        let mut frozen = true;
        self.image.visit_params("", &mut |_, p| frozen &= p.frozen);
        frozen
    }

    pub fn forward(&self, batch: &Batch<F>) -> Result<(FusedRepresentation<F>, InputCache<F>)> {
        let (q, question) = self.question.forward(&batch.tokens);
        let (features, image) = match &batch.images {
            BatchImages::Prepared(x) => {
                let (f, c) = self.image.forward(x.view());
                (f, Some(c))
            }
            BatchImages::Features(f) => (f.clone(), None),
        };
        let (a, attention) = self.attention.forward(q.view(), &features)?;
        let (s, size) = self.size.forward(&batch.sizes)?;
        let b = fusion_ii_concat(&a, s.view())?;
        Ok((
            b,
            InputCache {
                question,
                image,
                size,
                attention,
            },
        ))
    }

    pub fn backward(&mut self, cache: &InputCache<F>, db: ArrayView2<F>) {
        let split = self.attention.output_dim();
        self.size.backward(&cache.size, db.slice(s![.., split..]));
        let (dq, dfeat) = self.attention.backward(&cache.attention, db.slice(s![.., ..split]));
        self.question.backward(&cache.question, dq.view());
        if let Some(ic) = &cache.image {
            if !self.backbone_frozen() {
                self.image.backward(ic, dfeat.view());
            }
        }
    }
}

impl<F: Real> Module<F> for InputFusion<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        self.question.visit_params(&join(prefix, "question"), f);
        self.image.visit_params(&join(prefix, "image"), f);
        self.size.visit_params(&join(prefix, "size"), f);
        self.attention.visit_params(&join(prefix, "attention"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.question.visit_params_mut(&join(prefix, "question"), f);
        self.image.visit_params_mut(&join(prefix, "image"), f);
        self.size.visit_params_mut(&join(prefix, "size"), f);
        self.attention.visit_params_mut(&join(prefix, "attention"), f);
    }
}

#[derive(Clone, Debug)]
pub enum Heads<F> {
    If1c(If1cHead<F>),
    Sfn(SfnHeads<F>),
}

impl<F: Real> Module<F> for Heads<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        match self {
            Heads::If1c(h) => h.visit_params(prefix, f),
            Heads::Sfn(h) => h.visit_params(prefix, f),
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        match self {
            Heads::If1c(h) => h.visit_params_mut(prefix, f),
            Heads::Sfn(h) => h.visit_params_mut(prefix, f),
        }
    }
}

/// Head outputs: one global logit matrix (IF-1C) or one per category.
#[derive(Clone, Debug, PartialEq)]
pub enum HeadLogits<F> {
    Global(Array2<F>),
    PerCategory([Array2<F>; 5]),
}

#[derive(Clone, Debug)]
enum HeadCache<F> {
    If1c(Mlp2Cache<F>),
    Sfn(SfnCache<F>),
}

#[derive(Clone, Debug)]
pub struct ForwardPass<F> {
    pub logits: HeadLogits<F>,
    pub fused: FusedRepresentation<F>,
    input: InputCache<F>,
    head: HeadCache<F>,
}

impl<F: Real> ForwardPass<F> {
    pub fn input_cache(&self) -> &InputCache<F> {
        &self.input
    }
}

/// Training target for one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Target {
    pub category: CategoryLabel,
    /// Class in the sample's category dictionary.
    pub class: usize,
    /// Class in the global dictionary.
    pub global_class: usize,
}

impl Target {
    pub fn for_sample(sample: &Sample, dictionaries: &AnswerDictionaries) -> Result<Self> {
        let answer = sample
            .answer
            .as_deref()
            .ok_or_else(|| Error::InvalidInput(format!("sample `{}` has no answer", sample.image_id)))?;
        let unknown = || Error::UnknownAnswer {
            sample: sample.image_id.clone(),
            answer: answer.to_owned(),
            category: sample.derived_category.code().into(),
        };
        Ok(Target {
            category: sample.derived_category,
            class: dictionaries.get(sample.derived_category).class_of(answer).ok_or_else(unknown)?,
            global_class: dictionaries.global().class_of(answer).ok_or_else(unknown)?,
        })
    }
}

/// Sum over heads of the mean cross-entropy on the batch rows belonging to
/// that head (global head: all rows). Returns the loss and its gradient.
pub fn multitask_loss<F: Real>(logits: &HeadLogits<F>, targets: &[Target]) -> (F, HeadLogits<F>) {
    match logits {
        HeadLogits::Global(l) => {
            let rows: Vec<(usize, usize)> = targets.iter().enumerate().map(|(i, t)| (i, t.global_class)).collect();
            let scale = F::one() / F::lit(rows.len().max(1) as f64);
            let (loss, grad) = cross_entropy(l.view(), &rows, scale);
            (loss, HeadLogits::Global(grad))
        }
        HeadLogits::PerCategory(heads) => {
            let mut total = F::zero();
            let grads = std::array::from_fn(|k| {
                let rows: Vec<(usize, usize)> = targets
                    .iter()
                    .enumerate()
                    .filter(|(_, t)| t.category.index() == k)
                    .map(|(i, t)| (i, t.class))
                    .collect();
                let scale = F::one() / F::lit(rows.len().max(1) as f64);
                let (loss, grad) = cross_entropy(heads[k].view(), &rows, scale);
                total += loss;
                grad
            });
            (total, HeadLogits::PerCategory(grads))
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model<F> {
    pub spec: ModelSpec,
    pub input: InputFusion<F>,
    pub head: Heads<F>,
    pub categorizer: Option<Categorizer<F>>,
}

impl<F: Real> Model<F> {
    /// Fresh model; the `vgg16` backbone loads its weights from
    /// `backbone_asset`.
    pub fn new(
        spec: ModelSpec,
        embedding: Option<Embedding<F>>,
        backbone_asset: Option<&Path>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let image = ImageEncoder::build(spec.dims.backbone, backbone_asset, rng)?;
        Self::with_image(spec, embedding, image, rng)
    }

    /// Model with random parameters everywhere, to be filled from a
    /// checkpoint.
    pub fn skeleton(spec: ModelSpec) -> Result<Self> {
        let mut rng = crate::rng::seeded(0);
        let image = match spec.dims.backbone {
            BackboneKind::Small => ImageEncoder::small(&mut rng),
            BackboneKind::Vgg16 => ImageEncoder::vgg16_random(&mut rng),
        };
        Self::with_image(spec, None, image, &mut rng)
    }

    pub fn with_image(
        spec: ModelSpec,
        embedding: Option<Embedding<F>>,
        image: ImageEncoder<F>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let d = &spec.dims;
        let input = InputFusion::new(d, spec.vocab_size, embedding, image, rng)?;
        let width = input.output_dim();
        let head = match spec.head {
            HeadKind::If1c => Heads::If1c(If1cHead::new(width, d.hidden, spec.global_classes, d.dropout, rng)),
            HeadKind::Sfn => Heads::Sfn(SfnHeads::new(
                width,
                d.hidden,
                d.support_dim,
                spec.classes,
                d.dropout,
                d.facts,
                rng,
            )),
        };
        let categorizer = spec.categorizer.then(|| new_categorizer(d, spec.vocab_size, rng));
        Ok(Model {
            spec,
            input,
            head,
            categorizer,
        })
    }

    pub fn forward(&self, batch: &Batch<F>, mut rng: Option<&mut Rng>) -> Result<ForwardPass<F>> {
        let (fused, input) = self.input.forward(batch)?;
        let (logits, head) = match &self.head {
            Heads::If1c(h) => {
                let (l, c) = h.forward(&fused, rng.as_deref_mut())?;
                (HeadLogits::Global(l), HeadCache::If1c(c))
            }
            Heads::Sfn(h) => {
                let (out, c) = h.forward(&fused, rng.as_deref_mut())?;
                (HeadLogits::PerCategory(out.logits), HeadCache::Sfn(c))
            }
        };
        Ok(ForwardPass {
            logits,
            fused,
            input,
            head,
        })
    }

    pub fn backward(&mut self, pass: &ForwardPass<F>, dlogits: &HeadLogits<F>) -> Result<()> {
        let db = match (&mut self.head, &pass.head, dlogits) {
            (Heads::If1c(h), HeadCache::If1c(c), HeadLogits::Global(g)) => h.backward(c, g.view()),
            (Heads::Sfn(h), HeadCache::Sfn(c), HeadLogits::PerCategory(g)) => h.backward(c, g),
            _ => return Err(Error::Shape("gradient does not match the model head".into())),
        };
        self.input.backward(&pass.input, db.view());
        Ok(())
    }

    /// Clears gradients, runs forward and backward on one batch and returns
    /// the loss. The optimizer step is left to the caller.
    pub fn train_step(&mut self, batch: &Batch<F>, targets: &[Target], rng: Option<&mut Rng>) -> Result<F> {
        zero_grads(self);
        let pass = self.forward(batch, rng)?;
        let (loss, grads) = multitask_loss(&pass.logits, targets);
        self.backward(&pass, &grads)?;
        Ok(loss)
    }

    /// Evaluation-mode predictions. SFN models route through the categorizer.
    pub fn predict(&self, batch: &Batch<F>, dictionaries: &AnswerDictionaries) -> Result<Vec<Prediction>> {
        let pass = self.forward(batch, None)?;
        match &pass.logits {
            HeadLogits::Global(l) => l.rows().into_iter().map(|row| global_prediction(row, dictionaries)).collect(),
            HeadLogits::PerCategory(heads) => {
                let cat = self
                    .categorizer
                    .as_ref()
                    .ok_or_else(|| Error::MissingPretrained("categorizer".into()))?;
                let dists = cat.distributions(&batch.tokens);
                dists
                    .iter()
                    .enumerate()
                    .map(|(i, d)| {
                        let rows: Vec<_> = heads.iter().map(|h| h.index_axis(Axis(0), i).to_owned()).collect();
                        answer_fusion(d, &rows, dictionaries)
                    })
                    .collect()
            }
        }
    }

    pub fn category_distributions(&self, batch: &Batch<F>) -> Option<Vec<CategoryDistribution>> {
        self.categorizer.as_ref().map(|c| c.distributions(&batch.tokens))
    }
}

/// A categorizer with its own embedding and LSTM.
pub fn new_categorizer<F: Real>(dims: &ModelDims, vocab_size: usize, rng: &mut Rng) -> Categorizer<F> {
    let encoder = QuestionEncoder::new(vocab_size, dims.embed_dim, dims.question_dim, rng);
    Categorizer::new(encoder, dims.categorizer_hidden, dims.dropout, rng)
}

impl<F: Real> Module<F> for Model<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        self.input.visit_params(&join(prefix, "input"), f);
        self.head.visit_params(&join(prefix, "head"), f);
        self.categorizer.visit_params(&join(prefix, "categorizer"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.input.visit_params_mut(&join(prefix, "input"), f);
        self.head.visit_params_mut(&join(prefix, "head"), f);
        self.categorizer.visit_params_mut(&join(prefix, "categorizer"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::AnswerDictionary;
    use crate::rng;

    fn dicts() -> AnswerDictionaries {
        let d = |v: &[&str]| AnswerDictionary::from_answers(v.iter().map(|s| s.to_string()).collect()).unwrap();
        AnswerDictionaries::from_parts(
            [d(&["ct", "mri"]), d(&["axial"]), d(&["skull"]), d(&["cyst", "mass"]), d(&["yes", "no"])],
            d(&["ct", "mri", "axial", "skull", "cyst", "mass", "yes", "no"]),
        )
    }

    fn tiny_dims() -> ModelDims {
        ModelDims {
            embed_dim: 4,
            question_dim: 5,
            size_dim: 3,
            glimpses: 2,
            hidden: 6,
            support_dim: 4,
            categorizer_hidden: 6,
            dropout: 0.0,
            ..ModelDims::default()
        }
    }

    fn batch(n: usize) -> Batch<f64> {
        let mut r = rng::seeded(11);
        Batch {
            tokens: TokenBatch::new(&(0..n).map(|i| vec![2 + i % 3, 3]).collect::<Vec<_>>()),
            images: BatchImages::Prepared(Array4::from_shape_simple_fn((n, 56, 56, 3), || {
                crate::rng::uniform(&mut r, -0.5, 0.5)
            })),
            sizes: (0..n).map(|i| (256 + 64 * i as u32, 300)).collect(),
        }
    }

    #[test]
    fn widths_follow_composition() {
        let vocab = Vocabulary::from_tokens(["a", "b", "c"]).unwrap();
        let spec = ModelSpec::new(tiny_dims(), HeadKind::Sfn, &vocab, &dicts());
        let m = Model::<f64>::new(spec, None, None, &mut rng::seeded(0)).unwrap();
        assert_eq!(m.input.output_dim(), 2 * 64 + 5 + 3);
        let pass = m.forward(&batch(2), None).unwrap();
        let HeadLogits::PerCategory(h) = &pass.logits else { panic!() };
        assert_eq!(h.iter().map(|l| l.ncols()).collect::<Vec<_>>(), vec![2, 1, 1, 2, 2]);
        let preds = m.predict(&batch(2), &dicts()).unwrap();
        for p in preds {
            assert!(dicts().get(p.category).class_of(&p.answer).is_some());
        }
    }

    #[test]
    fn loss_is_sum_of_partitioned_losses() {
        let vocab = Vocabulary::from_tokens(["a", "b", "c"]).unwrap();
        let spec = ModelSpec::new(tiny_dims(), HeadKind::Sfn, &vocab, &dicts());
        let m = Model::<f64>::new(spec, None, None, &mut rng::seeded(0)).unwrap();
        let pass = m.forward(&batch(4), None).unwrap();
        let t = |c: CategoryLabel, class| Target { category: c, class, global_class: 0 };
        let targets = [
            t(CategoryLabel::C1Modality, 1),
            t(CategoryLabel::C4Abnormality, 0),
            t(CategoryLabel::C1Modality, 0),
            t(CategoryLabel::Binary, 1),
        ];
        let (total, grads) = multitask_loss(&pass.logits, &targets);
        let HeadLogits::PerCategory(heads) = &pass.logits else { panic!() };
        let mut sum = 0.0;
        for c in CategoryLabel::ALL {
            let rows: Vec<usize> = (0..4).filter(|&i| targets[i].category == c).collect();
            if rows.is_empty() {
                continue;
            }
            let sub = heads[c.index()].select(Axis(0), &rows);
            let sub_targets: Vec<(usize, usize)> =
                rows.iter().enumerate().map(|(j, &i)| (j, targets[i].class)).collect();
            sum += cross_entropy(sub.view(), &sub_targets, 1.0 / rows.len() as f64).0;
        }
        assert!((total - sum).abs() < 1e-9);
        let HeadLogits::PerCategory(g) = grads else { panic!() };
        assert!(g[1].iter().all(|&v| v == 0.0), "no C2 rows, no C2 gradient");
    }
}
