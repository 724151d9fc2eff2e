//! Question categorizer, the single-classifier baseline head (IF-1C), the
//! SFN multi-head reasoner and answer fusion.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::data::{AnswerDictionaries, CategoryLabel};
use crate::encoders::{QuestionCache, QuestionEncoder, TokenBatch};
use crate::fusion::{fusion_iii_concat, FusedRepresentation, FusionStage};
use crate::nn::linear::Mlp2Cache;
use crate::nn::ops::{argmax, softmax, softmax_rows};
use crate::nn::{join, Linear, Mlp2, Module, Param, Real};
use crate::rng::Rng;
use crate::{Error, Result};

/// Probabilities over the five categories in [`CategoryLabel::ALL`] order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CategoryDistribution(pub [f64; 5]);

impl CategoryDistribution {
    pub fn from_logits<F: Real>(logits: ArrayView1<F>) -> Self {
        let p = softmax(logits);
        let mut out = [0.0; 5];
        for (o, v) in out.iter_mut().zip(p.iter()) {
            *o = v.to_f64().unwrap_or(0.0);
        }
        CategoryDistribution(out)
    }

    /// Most probable category; ties go to the earliest in C1, C2, C3, C4,
    /// Binary order.
    pub fn argmax(&self) -> CategoryLabel {
        let best = argmax(ArrayView1::from(&self.0[..]));
        CategoryLabel::ALL[best]
    }

    pub fn probability(&self, category: CategoryLabel) -> f64 {
        self.0[category.index()]
    }
}

/// Embedding + LSTM question encoder followed by two FC layers over the five
/// categories.
#[derive(Clone, Debug)]
pub struct Categorizer<F> {
    pub encoder: QuestionEncoder<F>,
    pub mlp: Mlp2<F>,
}

#[derive(Clone, Debug)]
pub struct CategorizerCache<F> {
    encoder: QuestionCache<F>,
    mlp: Mlp2Cache<F>,
}

impl<F: Real> Categorizer<F> {
    pub fn new(encoder: QuestionEncoder<F>, hidden: usize, dropout: f64, rng: &mut Rng) -> Self {
        let mlp = Mlp2::new(encoder.output_dim(), hidden, CategoryLabel::ALL.len(), false, dropout, rng);
        Categorizer { encoder, mlp }
    }

    /// Category logits, (B, 5).
    pub fn forward(&self, tokens: &TokenBatch, rng: Option<&mut Rng>) -> (Array2<F>, CategorizerCache<F>) {
        let (q, encoder) = self.encoder.forward(tokens);
        let (logits, mlp) = self.mlp.forward(q.view(), rng);
        (logits, CategorizerCache { encoder, mlp })
    }

    pub fn backward(&mut self, cache: &CategorizerCache<F>, dlogits: ArrayView2<F>) {
        let dq = self.mlp.backward(&cache.mlp, dlogits);
        self.encoder.backward(&cache.encoder, dq.view());
    }

    pub fn distributions(&self, tokens: &TokenBatch) -> Vec<CategoryDistribution> {
        let (logits, _) = self.forward(tokens, None);
        logits.rows().into_iter().map(CategoryDistribution::from_logits).collect()
    }

    pub fn categorize(&self, token_ids: &[usize]) -> CategoryDistribution {
        self.distributions(&TokenBatch::new(&[token_ids.to_vec()]))[0]
    }
}

impl<F: Real> Module<F> for Categorizer<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        self.encoder.visit_params(&join(prefix, "encoder"), f);
        self.mlp.visit_params(&join(prefix, "mlp"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.encoder.visit_params_mut(&join(prefix, "encoder"), f);
        self.mlp.visit_params_mut(&join(prefix, "mlp"), f);
    }
}

/// Two FC layers from the stage II representation to the global dictionary.
#[derive(Clone, Debug)]
pub struct If1cHead<F> {
    pub mlp: Mlp2<F>,
}

impl<F: Real> If1cHead<F> {
    pub fn new(input: usize, hidden: usize, classes: usize, dropout: f64, rng: &mut Rng) -> Self {
        If1cHead {
            mlp: Mlp2::new(input, hidden, classes, false, dropout, rng),
        }
    }

    pub fn forward(&self, b: &FusedRepresentation<F>, rng: Option<&mut Rng>) -> Result<(Array2<F>, Mlp2Cache<F>)> {
        expect_stage_ii(b, self.mlp.in_dim())?;
        Ok(self.mlp.forward(b.data.view(), rng))
    }

    pub fn backward(&mut self, cache: &Mlp2Cache<F>, dlogits: ArrayView2<F>) -> Array2<F> {
        self.mlp.backward(cache, dlogits)
    }
}

impl<F: Real> Module<F> for If1cHead<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        self.mlp.visit_params(prefix, f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.mlp.visit_params_mut(prefix, f);
    }
}

fn expect_stage_ii<F: Real>(b: &FusedRepresentation<F>, width: usize) -> Result<()> {
    if b.stage != FusionStage::II || b.width() != width {
        return Err(Error::Shape(format!(
            "head expects a stage II representation of width {width}, got {:?} of width {}",
            b.stage,
            b.width()
        )));
    }
    Ok(())
}

/// Outputs of the modality, plane and organ support networks, (B, H_s) each.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportingFacts<F> {
    pub modality: Array2<F>,
    pub plane: Array2<F>,
    pub organ: Array2<F>,
}

impl<F: Real> SupportingFacts<F> {
    pub fn named(&self) -> [(&'static str, &Array2<F>); 3] {
        [("C1", &self.modality), ("C2", &self.plane), ("C3", &self.organ)]
    }
}

const SUPPORT_NAMES: [&str; 3] = ["modality", "plane", "organ"];

/// Support networks and final classifiers for C1-C3, plus the C4 and Binary
/// heads over Fusion III.
#[derive(Clone, Debug)]
pub struct SfnHeads<F> {
    pub support: [Mlp2<F>; 3],
    pub classifiers: [Linear<F>; 3],
    pub abnormality: Mlp2<F>,
    pub binary: Mlp2<F>,
    /// With facts off the C4 and Binary heads read the stage II vector.
    pub facts: bool,
}

#[derive(Clone, Debug)]
pub struct SfnOutput<F> {
    /// Logits per head in [`CategoryLabel::ALL`] order.
    pub logits: [Array2<F>; 5],
    pub facts: SupportingFacts<F>,
}

#[derive(Clone, Debug)]
pub struct SfnCache<F> {
    support: Vec<Mlp2Cache<F>>,
    facts: Vec<Array2<F>>,
    abnormality: Mlp2Cache<F>,
    binary: Mlp2Cache<F>,
    input_width: usize,
}

impl<F: Real> SfnHeads<F> {
    /// `classes` are the dictionary sizes in [`CategoryLabel::ALL`] order.
    pub fn new(
        input: usize,
        hidden: usize,
        support_dim: usize,
        classes: [usize; 5],
        dropout: f64,
        facts: bool,
        rng: &mut Rng,
    ) -> Self {
        let support = std::array::from_fn(|_| Mlp2::new(input, hidden, support_dim, false, dropout, rng));
        let classifiers = std::array::from_fn(|i| Linear::new(support_dim, classes[i], rng));
        let late = if facts { input + 3 * support_dim } else { input };
        SfnHeads {
            support,
            classifiers,
            abnormality: Mlp2::new(late, hidden, classes[3], false, dropout, rng),
            binary: Mlp2::new(late, hidden, classes[4], false, dropout, rng),
            facts,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.support[0].in_dim()
    }

    pub fn class_counts(&self) -> [usize; 5] {
        [
            self.classifiers[0].out_dim(),
            self.classifiers[1].out_dim(),
            self.classifiers[2].out_dim(),
            self.abnormality.out_dim(),
            self.binary.out_dim(),
        ]
    }

    pub fn forward(
        &self,
        b: &FusedRepresentation<F>,
        mut rng: Option<&mut Rng>,
    ) -> Result<(SfnOutput<F>, SfnCache<F>)> {
        expect_stage_ii(b, self.input_dim())?;
        let mut support = Vec::with_capacity(3);
        let mut facts = Vec::with_capacity(3);
        let mut logits = Vec::with_capacity(5);
        for (net, clf) in self.support.iter().zip(&self.classifiers) {
            let (fact, cache) = net.forward(b.data.view(), rng.as_deref_mut());
            logits.push(clf.forward(fact.view()));
            facts.push(fact);
            support.push(cache);
        }
        let supporting = SupportingFacts {
            modality: facts[0].clone(),
            plane: facts[1].clone(),
            organ: facts[2].clone(),
        };
        let late = if self.facts {
            fusion_iii_concat(b, &supporting)?.data
        } else {
            b.data.clone()
        };
        let (c4, abnormality) = self.abnormality.forward(late.view(), rng.as_deref_mut());
        let (bin, binary) = self.binary.forward(late.view(), rng);
        logits.push(c4);
        logits.push(bin);
        let logits: [Array2<F>; 5] = logits.try_into().expect("five heads");
        Ok((
            SfnOutput {
                logits,
                facts: supporting,
            },
            SfnCache {
                support,
                facts,
                abnormality,
                binary,
                input_width: b.width(),
            },
        ))
    }

    /// Returns dL/db. Gradients from the C4 and Binary heads flow back into
    /// the support networks through the facts.
    pub fn backward(&mut self, cache: &SfnCache<F>, dlogits: &[Array2<F>; 5]) -> Array2<F> {
        let w = cache.input_width;
        let mut dlate = self.abnormality.backward(&cache.abnormality, dlogits[3].view());
        dlate += &self.binary.backward(&cache.binary, dlogits[4].view());
        let mut db = dlate.slice(ndarray::s![.., ..w]).to_owned();
        for i in 0..3 {
            let mut dfact = self.classifiers[i].backward(cache.facts[i].view(), dlogits[i].view());
            if self.facts {
                let start = w + i * cache.facts[i].ncols();
                dfact += &dlate.slice(ndarray::s![.., start..start + cache.facts[i].ncols()]);
            }
            db += &self.support[i].backward(&cache.support[i], dfact.view());
        }
        db
    }
}

impl<F: Real> Module<F> for SfnHeads<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        for (i, name) in SUPPORT_NAMES.iter().enumerate() {
            self.support[i].visit_params(&join(prefix, &format!("{name}.support")), f);
            self.classifiers[i].visit_params(&join(prefix, &format!("{name}.classifier")), f);
        }
        self.abnormality.visit_params(&join(prefix, "abnormality"), f);
        self.binary.visit_params(&join(prefix, "binary"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        for (i, name) in SUPPORT_NAMES.iter().enumerate() {
            self.support[i].visit_params_mut(&join(prefix, &format!("{name}.support")), f);
            self.classifiers[i].visit_params_mut(&join(prefix, &format!("{name}.classifier")), f);
        }
        self.abnormality.visit_params_mut(&join(prefix, "abnormality"), f);
        self.binary.visit_params_mut(&join(prefix, "binary"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub category: CategoryLabel,
    pub answer: String,
    pub confidence: f64,
    /// Logits of every head that was evaluated.
    pub per_head_logits: Vec<(CategoryLabel, Vec<f64>)>,
}

fn to_f64<F: Real>(v: ArrayView1<F>) -> Vec<f64> {
    v.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()
}

/// Routes to the categorizer's most probable category and returns that
/// head's most likely answer.
pub fn answer_fusion<F: Real>(
    dist: &CategoryDistribution,
    heads: &[Array1<F>],
    dictionaries: &AnswerDictionaries,
) -> Result<Prediction> {
    if heads.len() != 5 {
        return Err(Error::InvalidInput(format!("answer fusion needs 5 heads, got {}", heads.len())));
    }
    let category = dist.argmax();
    let logits = &heads[category.index()];
    let dict = dictionaries.get(category);
    if logits.len() != dict.len() || dict.is_empty() {
        return Err(Error::Shape(format!(
            "head `{category}` has {} logits for {} dictionary entries",
            logits.len(),
            dict.len()
        )));
    }
    let class = argmax(logits.view());
    let confidence = softmax(logits.view())[class].to_f64().unwrap_or(0.0);
    Ok(Prediction {
        category,
        answer: dict.answer(class).expect("class in range").to_owned(),
        confidence,
        per_head_logits: CategoryLabel::ALL.iter().zip(heads).map(|(&c, h)| (c, to_f64(h.view()))).collect(),
    })
}

/// Prediction from a single global-dictionary head. The category is the first
/// per-category dictionary that contains the chosen answer.
pub fn global_prediction<F: Real>(logits: ArrayView1<F>, dictionaries: &AnswerDictionaries) -> Result<Prediction> {
    let global = dictionaries.global();
    if logits.len() != global.len() || global.is_empty() {
        return Err(Error::Shape(format!(
            "global head has {} logits for {} dictionary entries",
            logits.len(),
            global.len()
        )));
    }
    let class = argmax(logits);
    let answer = global.answer(class).expect("class in range").to_owned();
    let category = dictionaries
        .iter()
        .find(|(_, d)| d.class_of(&answer).is_some())
        .map_or(CategoryLabel::C4Abnormality, |(c, _)| c);
    Ok(Prediction {
        category,
        confidence: softmax_rows(logits.insert_axis(ndarray::Axis(0)))[[0, class]].to_f64().unwrap_or(0.0),
        answer,
        per_head_logits: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::AnswerDictionary;
    use crate::nn::set_frozen;
    use crate::rng;
    use ndarray::array;

    fn dicts() -> AnswerDictionaries {
        let d = |v: &[&str]| AnswerDictionary::from_answers(v.iter().map(|s| s.to_string()).collect()).unwrap();
        AnswerDictionaries::from_parts(
            [d(&["ct", "mri"]), d(&["axial", "sagittal"]), d(&["skull"]), d(&["cyst", "mass"]), d(&["yes", "no"])],
            d(&["ct", "mri", "axial", "sagittal", "skull", "cyst", "mass", "yes", "no"]),
        )
    }

    fn zero_heads() -> Vec<Array1<f64>> {
        dicts().class_counts().iter().map(|&n| Array1::zeros(n)).collect()
    }

    #[test]
    fn binary_route_picks_no() {
        let dist = CategoryDistribution([0.05, 0.05, 0.05, 0.05, 0.8]);
        let mut heads = zero_heads();
        heads[4] = array![0.1, 2.0];
        let p = answer_fusion(&dist, &heads, &dicts()).unwrap();
        assert_eq!((p.category, p.answer.as_str()), (CategoryLabel::Binary, "no"));
        let e = (1.9f64).exp();
        assert!((p.confidence - e / (1.0 + e)).abs() < 1e-12);
    }

    #[test]
    fn uniform_distribution_selects_c1() {
        let dist = CategoryDistribution([0.2; 5]);
        let p = answer_fusion(&dist, &zero_heads(), &dicts()).unwrap();
        assert_eq!(p.category, CategoryLabel::C1Modality);
        assert_eq!(p.answer, "ct");
    }

    #[test]
    fn scaling_logits_keeps_answer() {
        let dist = CategoryDistribution([0.0, 1.0, 0.0, 0.0, 0.0]);
        let mut heads = zero_heads();
        heads[1] = array![-0.3, 0.7];
        let a = answer_fusion(&dist, &heads, &dicts()).unwrap().answer;
        heads[1] = heads[1].mapv(|v| v * 7.5 + 3.0);
        assert_eq!(answer_fusion(&dist, &heads, &dicts()).unwrap().answer, a);
    }

    fn stage_ii(rows: usize, width: usize) -> FusedRepresentation<f64> {
        FusedRepresentation {
            data: Array2::from_shape_fn((rows, width), |(i, j)| ((i * 7 + j) as f64 * 0.37).sin()),
            stage: FusionStage::II,
        }
    }

    #[test]
    fn sfn_widths_and_zero_parameters() {
        let mut heads = SfnHeads::<f64>::new(10, 8, 4, [2, 2, 1, 2, 2], 0.5, true, &mut rng::seeded(1));
        assert_eq!(heads.abnormality.in_dim(), 10 + 3 * 4);
        heads.visit_params_mut("", &mut |_, p| p.value.fill(0.0));
        let (out, _) = heads.forward(&stage_ii(3, 10), None).unwrap();
        for l in &out.logits {
            assert!(l.iter().all(|&v| v == 0.0));
        }
        assert!(out.facts.modality.iter().all(|&v| v == 0.0));
        assert!(heads.forward(&FusedRepresentation { stage: FusionStage::I, ..stage_ii(3, 10) }, None).is_err());
    }

    #[test]
    fn facts_off_reads_stage_ii() {
        let heads = SfnHeads::<f64>::new(10, 8, 4, [2, 2, 1, 2, 2], 0.0, false, &mut rng::seeded(1));
        assert_eq!(heads.abnormality.in_dim(), 10);
        let (out, _) = heads.forward(&stage_ii(2, 10), None).unwrap();
        assert_eq!(out.logits[3].dim(), (2, 2));
    }

    #[test]
    fn categorizer_is_a_distribution_and_deterministic() {
        let mut r = rng::seeded(5);
        let enc = QuestionEncoder::<f64>::new(12, 6, 5, &mut r);
        let mut cat = Categorizer::new(enc, 8, 0.5, &mut r);
        set_frozen(&mut cat, true);
        let d = cat.categorize(&[3, 4, 5]);
        assert!((d.0.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(d, cat.categorize(&[3, 4, 5]));
    }

    #[test]
    fn global_prediction_maps_back_to_category() {
        let mut logits = Array1::<f64>::zeros(9);
        logits[3] = 1.0;
        let p = global_prediction(logits.view(), &dicts()).unwrap();
        assert_eq!((p.answer.as_str(), p.category), ("sagittal", CategoryLabel::C2Plane));
    }
}
