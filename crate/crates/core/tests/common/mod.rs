//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

pub mod gradcheck;

use std::collections::BTreeSet;
use std::path::PathBuf;

use sfn_core::data::{
    AnswerDictionaries, AnswerDictionary, CategoryLabel, DatasetSplit, Provenance, Sample, Vocabulary,
};
use sfn_core::encoders::TokenBatch;
use sfn_core::model::{Batch, BatchImages, ModelDims};
use sfn_core::nn::Real;
use sfn_core::rng::{self, Rng};

/// Brute-force macro P/R/F1: one pass over the pairs per class.
pub fn oracle_prf(pred: &[&str], gold: &[&str]) -> (f64, f64, f64) {
    let norm = |s: &str| s.trim().to_lowercase();
    let pred: Vec<String> = pred.iter().map(|s| norm(s)).collect();
    let gold: Vec<String> = gold.iter().map(|s| norm(s)).collect();
    let classes: BTreeSet<&String> = pred.iter().chain(&gold).collect();
    let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
    for c in &classes {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fneg = 0.0;
        for (p, g) in pred.iter().zip(&gold) {
            match (p == *c, g == *c) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fneg += 1.0,
                _ => {}
            }
        }
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
        let f = if tp > 0.0 { 2.0 * tp / (2.0 * tp + fp + fneg) } else { 0.0 };
        sp += p;
        sr += r;
        sf += f;
    }
    let n = classes.len() as f64;
    (sp / n, sr / n, sf / n)
}

pub fn oracle_accuracy(pred: &[&str], gold: &[&str]) -> f64 {
    let hits = pred
        .iter()
        .zip(gold)
        .filter(|(p, g)| p.trim().to_lowercase() == g.trim().to_lowercase())
        .count();
    hits as f64 / pred.len() as f64
}

fn tokens(s: &str) -> Vec<String> {
    s.to_lowercase()
        .replace(|c: char| ".,?!;:\"'()[]".contains(c), "")
        .split(' ')
        .filter(|t| !t.is_empty())
        .map(String::from)
        .collect()
}

fn count(haystack: &[String], gram: &[String]) -> usize {
    if haystack.len() < gram.len() {
        return 0;
    }
    (0..=haystack.len() - gram.len())
        .filter(|&i| &haystack[i..i + gram.len()] == gram)
        .count()
}

/// Unsmoothed sentence BLEU, orders 1 to 4 weighted equally, written as a
/// product of clipped precisions.
pub fn oracle_sentence_bleu(candidate: &str, reference: &str) -> f64 {
    let c = tokens(candidate);
    let r = tokens(reference);
    if c.is_empty() {
        return 0.0;
    }
    let mut product = 1.0;
    for n in 1..=4 {
        if c.len() < n {
            return 0.0;
        }
        let mut seen: Vec<&[String]> = Vec::new();
        let mut matched = 0;
        for i in 0..=c.len() - n {
            let gram = &c[i..i + n];
            if seen.contains(&gram) {
                continue;
            }
            seen.push(gram);
            matched += count(&c, gram).min(count(&r, gram));
        }
        if matched == 0 {
            return 0.0;
        }
        product *= matched as f64 / (c.len() - n + 1) as f64;
    }
    let bp = if c.len() > r.len() {
        1.0
    } else {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    };
    bp * product.powf(0.25)
}

pub fn oracle_bleu(pred: &[&str], gold: &[&str]) -> f64 {
    pred.iter().zip(gold).map(|(p, g)| oracle_sentence_bleu(p, g)).sum::<f64>() / pred.len() as f64
}

/// Twenty hand-built (predictions, gold) cases.
pub fn metric_cases() -> Vec<(Vec<&'static str>, Vec<&'static str>)> {
    vec![
        (vec!["ct"], vec!["ct"]),
        (vec!["ct"], vec!["mri"]),
        (vec!["ct", "mri", "ct"], vec!["ct", "ct", "ct"]),
        (vec!["CT ", "mri"], vec!["ct", "MRI"]),
        (vec!["axial", "axial", "axial", "axial"], vec!["axial", "sagittal", "coronal", "axial"]),
        (vec!["yes", "no", "yes", "no"], vec!["no", "yes", "yes", "no"]),
        (vec!["a", "b", "c", "d", "e"], vec!["a", "b", "c", "d", "e"]),
        (vec!["a", "b", "c", "d", "e"], vec!["e", "d", "c", "b", "a"]),
        (vec!["skull and contents", "lung, mediastinum, pleura"], vec!["skull and contents", "lung, mediastinum, pleura"]),
        (vec!["skull", "lung mediastinum"], vec!["skull and contents", "lung, mediastinum, pleura"]),
        (vec!["the cat sat on the mat"], vec!["the cat is on the mat"]),
        (vec!["a b c d e f"], vec!["a b c d e f g h"]),
        (vec!["a b c d e f g h i"], vec!["a b c d e f g h"]),
        (vec!["x y z w", "x y z w"], vec!["x y z w", "w z y x"]),
        (vec!["arachnoid cyst", "meningioma", "arachnoid cyst"], vec!["arachnoid cyst", "arachnoid cyst", "glioma"]),
        (vec!["t2", "t1", "flair", "t2", "t2"], vec!["t2", "t2", "flair", "t1", "t2"]),
        (vec!["the the the the"], vec!["the cat the cat"]),
        (vec!["a b a b a b"], vec!["a b a b"]),
        (vec!["ct with contrast", "mr - flair", "us", "xr - plain film"], vec!["ct with contrast", "mr - flair", "us - d - doppler", "xr - plain film"]),
        (vec!["pulmonary embolism (pe)", "no"], vec!["pulmonary embolism pe", "no"]),
    ]
}

pub fn sample(id: &str, category: CategoryLabel, question: &str, answer: &str) -> Sample {
    Sample::new(id, PathBuf::from(format!("/nonexistent/{id}.jpg")), category, question, Some(answer.into()), 100, 100)
}

pub fn split(samples: Vec<Sample>) -> DatasetSplit {
    DatasetSplit::new(samples, Provenance::default())
}

/// Zipf class sizes `ceil(base / (k + 1))` for `classes` classes.
pub fn zipf_counts(classes: usize, base: usize) -> Vec<usize> {
    (0..classes).map(|k| base.div_ceil(k + 1)).collect()
}

pub fn tiny_dims() -> ModelDims {
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

pub fn tiny_vocab() -> Vocabulary {
    Vocabulary::from_tokens(["what", "plane", "is", "this", "modality", "organ"]).unwrap()
}

pub fn tiny_dictionaries() -> AnswerDictionaries {
    let d = |v: &[&str]| AnswerDictionary::from_answers(v.iter().map(|s| s.to_string()).collect()).unwrap();
    AnswerDictionaries::from_parts(
        [d(&["ct", "mri"]), d(&["axial", "coronal"]), d(&["skull"]), d(&["cyst", "mass", "none"]), d(&["yes", "no"])],
        d(&["ct", "mri", "axial", "coronal", "skull", "cyst", "mass", "none", "yes", "no"]),
    )
}

/// Random token sequences, random `side`-pixel prepared images and sizes.
pub fn random_batch<F: Real>(rng: &mut Rng, rows: usize, vocab: usize, side: usize) -> Batch<F> {
    let seqs: Vec<Vec<usize>> = (0..rows)
        .map(|_| {
            let len = 1 + rng::bounded(rng, 5) as usize;
            (0..len).map(|_| 1 + rng::bounded(rng, vocab as u64 - 1) as usize).collect()
        })
        .collect();
    let images = ndarray::Array4::from_shape_fn((rows, side, side, 3), |_| F::lit(2.0 * rng::unit_f64(rng) - 1.0));
    Batch {
        tokens: TokenBatch::new(&seqs),
        images: BatchImages::Prepared(images),
        sizes: (0..rows)
            .map(|_| (64 + rng::bounded(rng, 900) as u32, 64 + rng::bounded(rng, 900) as u32))
            .collect(),
    }
}
