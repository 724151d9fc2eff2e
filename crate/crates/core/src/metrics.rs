//! Macro precision/recall/F1, strict accuracy and sentence-level BLEU.
//!
//! All string comparisons use the trim+lowercase answer normalization; BLEU
//! tokenizes with the question tokenizer.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{normalize_answer, preprocess_question, CategoryLabel};
use crate::{Error, Result};

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::InvalidInput(format!("{a} predictions for {b} gold answers")));
    }
    if a == 0 {
        return Err(Error::InvalidInput("metrics need at least one pair".into()));
    }
    Ok(())
}

/// Macro-averaged (precision, recall, F1) over every class seen in either
/// list. Classes never predicted have precision 0.
pub fn precision_recall_f1<S: AsRef<str>, T: AsRef<str>>(predictions: &[S], gold: &[T]) -> Result<(f64, f64, f64)> {
    check_lengths(predictions.len(), gold.len())?;
    // class -> (true positives, predicted, gold)
    let mut counts: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    for (p, g) in predictions.iter().zip(gold) {
        let (p, g) = (normalize_answer(p.as_ref()), normalize_answer(g.as_ref()));
        if p == g {
            counts.entry(p.clone()).or_default().0 += 1;
        }
        counts.entry(p).or_default().1 += 1;
        counts.entry(g).or_default().2 += 1;
    }
    let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
    for &(tp, np, ng) in counts.values() {
        let p = if np == 0 { 0.0 } else { tp as f64 / np as f64 };
        let r = if ng == 0 { 0.0 } else { tp as f64 / ng as f64 };
        sp += p;
        sr += r;
        if p + r > 0.0 {
            sf += 2.0 * p * r / (p + r);
        }
    }
    let n = counts.len() as f64;
    Ok((sp / n, sr / n, sf / n))
}

pub fn strict_accuracy<S: AsRef<str>, T: AsRef<str>>(predictions: &[S], gold: &[T]) -> Result<f64> {
    check_lengths(predictions.len(), gold.len())?;
    let hits = predictions
        .iter()
        .zip(gold)
        .filter(|(p, g)| normalize_answer(p.as_ref()) == normalize_answer(g.as_ref()))
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BleuSmoothing {
    /// Any n-gram order without a match makes the sentence score 0.
    #[default]
    None,
    /// Orders with zero matches use `0.1 / total` instead of 0.
    Epsilon,
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Sentence BLEU with uniform weights over orders 1-4.
pub fn sentence_bleu(candidate: &str, reference: &str, smoothing: BleuSmoothing) -> f64 {
    let c = preprocess_question(candidate);
    let r = preprocess_question(reference);
    if c.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngrams(&c, n);
        let refs = ngrams(&r, n);
        let total: usize = cand.values().sum();
        let matched: usize = cand.iter().map(|(g, &k)| k.min(refs.get(g).copied().unwrap_or(0))).sum();
        let p = match (matched, smoothing) {
            (0, BleuSmoothing::None) => return 0.0,
            (0, BleuSmoothing::Epsilon) => 0.1 / total.max(1) as f64,
            (m, _) => m as f64 / total as f64,
        };
        log_sum += 0.25 * p.ln();
    }
    let (cl, rl) = (c.len() as f64, r.len() as f64);
    let bp = if cl > rl { 1.0 } else { (1.0 - rl / cl).exp() };
    bp * log_sum.exp()
}

/// Mean sentence BLEU, unsmoothed.
pub fn bleu<S: AsRef<str>, T: AsRef<str>>(candidates: &[S], references: &[T]) -> Result<f64> {
    bleu_with(candidates, references, BleuSmoothing::None)
}

pub fn bleu_with<S: AsRef<str>, T: AsRef<str>>(
    candidates: &[S],
    references: &[T],
    smoothing: BleuSmoothing,
) -> Result<f64> {
    check_lengths(candidates.len(), references.len())?;
    let sum: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| sentence_bleu(c.as_ref(), r.as_ref(), smoothing))
        .sum();
    Ok(sum / candidates.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub count: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub strict_accuracy: f64,
    pub bleu: f64,
}

impl Scores {
    pub fn compute<S: AsRef<str>, T: AsRef<str>>(predictions: &[S], gold: &[T], smoothing: BleuSmoothing) -> Result<Self> {
        let (precision, recall, f1) = precision_recall_f1(predictions, gold)?;
        Ok(Scores {
            count: predictions.len(),
            precision,
            recall,
            f1,
            strict_accuracy: strict_accuracy(predictions, gold)?,
            bleu: bleu_with(predictions, gold, smoothing)?,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: Scores,
    /// Per derived category of the gold sample; categories with no samples
    /// are omitted.
    pub per_category: Vec<(CategoryLabel, Scores)>,
}

impl MetricsReport {
    pub fn compute<S: AsRef<str>, T: AsRef<str>>(
        predictions: &[S],
        gold: &[T],
        categories: &[CategoryLabel],
        smoothing: BleuSmoothing,
    ) -> Result<Self> {
        check_lengths(categories.len(), gold.len())?;
        let overall = Scores::compute(predictions, gold, smoothing)?;
        let mut per_category = Vec::new();
        for c in CategoryLabel::ALL {
            let idx: Vec<usize> = (0..gold.len()).filter(|&i| categories[i] == c).collect();
            if idx.is_empty() {
                continue;
            }
            let p: Vec<&str> = idx.iter().map(|&i| predictions[i].as_ref()).collect();
            let g: Vec<&str> = idx.iter().map(|&i| gold[i].as_ref()).collect();
            per_category.push((c, Scores::compute(&p, &g, smoothing)?));
        }
        Ok(MetricsReport { overall, per_category })
    }

    fn rows(&self) -> Vec<(String, &Scores)> {
        let mut rows = vec![("all".to_string(), &self.overall)];
        rows.extend(self.per_category.iter().map(|(c, s)| (c.code().to_string(), s)));
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scope,count,precision,recall,f1,strict_accuracy,bleu\n");
        for (name, s) in self.rows() {
            let _ = writeln!(
                out,
                "{name},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                s.count, s.precision, s.recall, s.f1, s.strict_accuracy, s.bleu
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<8} {:>6} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
            "scope", "count", "precision", "recall", "f1", "accuracy", "bleu"
        );
        for (name, s) in self.rows() {
            let _ = writeln!(
                out,
                "{name:<8} {:>6} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                s.count, s.precision, s.recall, s.f1, s.strict_accuracy, s.bleu
            );
        }
        out
    }
}
