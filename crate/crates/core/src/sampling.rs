//! Inverse-class-frequency weighted sampling for batch construction.

use std::collections::HashMap;

use crate::data::{AnswerDictionaries, CategoryLabel, DatasetSplit};
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// Positive, finite per-sample weights aligned with a split.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleWeights(Vec<f64>);

impl SampleWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if let Some((i, w)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !(w.is_finite() && **w > 0.0))
        {
            return Err(Error::InvalidInput(format!(
                "sample weight {i} is {w}; weights must be positive and finite"
            )));
        }
        Ok(SampleWeights(weights))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `1 / count(class)` where the class is the sample's answer within its
/// derived category.
pub fn compute_weights(split: &DatasetSplit, dictionaries: &AnswerDictionaries) -> Result<SampleWeights> {
    let mut classes = Vec::with_capacity(split.len());
    let mut counts: HashMap<(CategoryLabel, usize), usize> = HashMap::new();
    for s in &split.samples {
        let dict = dictionaries.get(s.derived_category);
        let answer = s.answer.as_deref().unwrap_or("");
        let class = dict.class_of(answer).ok_or_else(|| Error::UnknownAnswer {
            sample: format!("{}|{}", s.image_id, s.question),
            answer: answer.to_owned(),
            category: s.derived_category.code().into(),
        })?;
        let key = (s.derived_category, class);
        *counts.entry(key).or_default() += 1;
        classes.push(key);
    }
    SampleWeights::new(classes.iter().map(|k| 1.0 / counts[k] as f64).collect())
}

/// Draws indices i.i.d. with replacement, `P(i) ∝ weights[i]`.
#[derive(Clone, Debug)]
pub struct WeightedSampler {
    cumulative: Vec<f64>,
    rng: Rng,
}

impl WeightedSampler {
    pub fn new(weights: &SampleWeights, rng: Rng) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidInput("cannot sample from an empty split".into()));
        }
        let mut acc = 0.0;
        let cumulative = weights
            .as_slice()
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        Ok(WeightedSampler { cumulative, rng })
    }

    pub fn sample_indices(&mut self, batch_size: usize) -> Result<Vec<usize>> {
        if batch_size == 0 {
            return Err(Error::InvalidInput("batch size must be at least 1".into()));
        }
        let total = *self.cumulative.last().expect("nonempty");
        let last = self.cumulative.len() - 1;
        Ok((0..batch_size)
            .map(|_| {
                let u = rng::unit_f64(&mut self.rng) * total;
                self.cumulative.partition_point(|&c| c <= u).min(last)
            })
            .collect())
    }
}

/// One-shot form: builds a sampler around `rng` and draws a batch.
pub fn sample_indices(weights: &SampleWeights, batch_size: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let mut sampler = WeightedSampler::new(weights, rng.clone())?;
    let out = sampler.sample_indices(batch_size)?;
    *rng = sampler.rng;
    Ok(out)
}
