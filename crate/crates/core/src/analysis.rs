//! Dataset forensics: answer/question distributions, n-gram tables, split
//! coverage, and the merge + shuffle + 19:1 resample procedure.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::data::{normalize_answer, preprocess_question, CategoryLabel, DatasetSplit, Provenance};
use crate::{plot, rng, Error, Result};

/// Default training:validation proportion for resampling.
pub const RESAMPLE_RATIO: (u32, u32) = (19, 1);

/// Number of leading question tokens used for the question-type histogram.
const QUESTION_PREFIX_TOKENS: usize = 3;

/// Counts in first-occurrence order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Histogram {
    entries: Vec<(String, usize)>,
    index: HashMap<String, usize>,
}

impl Histogram {
    pub fn add(&mut self, key: String) {
        match self.index.get(&key) {
            Some(&i) => self.entries[i].1 += 1,
            None => {
                self.index.insert(key.clone(), self.entries.len());
                self.entries.push((key, 1));
            }
        }
    }

    pub fn get(&self, key: &str) -> usize {
        self.index.get(key).map_or(0, |&i| self.entries[i].1)
    }

    pub fn entries(&self) -> &[(String, usize)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total(&self) -> usize {
        self.entries.iter().map(|(_, c)| c).sum()
    }

    /// Entries sorted by decreasing count, ties in first-occurrence order.
    pub fn sorted_by_count(&self) -> Vec<(String, usize)> {
        let mut v = self.entries.clone();
        v.sort_by(|a, b| b.1.cmp(&a.1));
        v
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CategoryStats {
    pub sample_count: usize,
    pub answers: Histogram,
    pub question_prefixes: Histogram,
    /// Median over the per-class frequencies (mean of the middle two for an
    /// even number of classes); 0 for an empty category.
    pub median_class_frequency: f64,
    pub classes_below_median: usize,
}

impl CategoryStats {
    pub fn class_count(&self) -> usize {
        self.answers.len()
    }

    pub fn fraction_below_median(&self) -> f64 {
        if self.answers.is_empty() {
            0.0
        } else {
            self.classes_below_median as f64 / self.answers.len() as f64
        }
    }
}

/// Per-derived-category statistics, indexed in [`CategoryLabel::ALL`] order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DistributionReport {
    pub per_category: [CategoryStats; 5],
}

impl DistributionReport {
    pub fn get(&self, category: CategoryLabel) -> &CategoryStats {
        &self.per_category[category.index()]
    }
}

fn median(values: &mut [usize]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_unstable();
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2] as f64
    } else {
        (values[n / 2 - 1] + values[n / 2]) as f64 / 2.0
    }
}

/// Answer-class histograms, question-type histograms and skew statistics
/// per derived category.
pub fn answer_class_stats(split: &DatasetSplit) -> Result<DistributionReport> {
    let mut report = DistributionReport::default();
    for s in &split.samples {
        let answer = s.normalized_answer().ok_or_else(|| {
            Error::InvalidInput(format!("sample `{}` has no answer", s.image_id))
        })?;
        let stats = &mut report.per_category[s.derived_category.index()];
        stats.sample_count += 1;
        stats.answers.add(answer);
        let prefix: Vec<&str> = s
            .tokens
            .iter()
            .take(QUESTION_PREFIX_TOKENS)
            .map(String::as_str)
            .collect();
        stats.question_prefixes.add(prefix.join(" "));
    }
    for stats in &mut report.per_category {
        let mut freqs: Vec<usize> = stats.answers.entries().iter().map(|(_, c)| *c).collect();
        let m = median(&mut freqs);
        stats.median_class_frequency = m;
        stats.classes_below_median = freqs.iter().filter(|&&f| (f as f64) < m).count();
    }
    Ok(report)
}

/// Distinct answer n-gram counts (n = 1..4) per ORIGINAL category, so yes/no
/// answers stay inside C1 and C4.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NGramTable {
    /// Distinct normalized answers per original category.
    pub unique_answers: [usize; 4],
    /// `counts[category][n - 1]`.
    pub counts: [[usize; 4]; 4],
}

impl NGramTable {
    pub fn row(&self, category: CategoryLabel) -> [usize; 4] {
        self.counts[category.index()]
    }
}

pub fn ngram_counts(split: &DatasetSplit) -> NGramTable {
    let mut sets: [[HashSet<Vec<String>>; 4]; 4] = Default::default();
    let mut answers: [HashSet<String>; 4] = Default::default();
    for s in &split.samples {
        let Some(answer) = &s.answer else { continue };
        let cat = s.original_category.index();
        answers[cat].insert(normalize_answer(answer));
        let tokens = preprocess_question(answer);
        for n in 1..=4 {
            for gram in tokens.windows(n) {
                sets[cat][n - 1].insert(gram.to_vec());
            }
        }
    }
    NGramTable {
        unique_answers: std::array::from_fn(|c| answers[c].len()),
        counts: std::array::from_fn(|c| std::array::from_fn(|n| sets[c][n].len())),
    }
}

/// Merges both splits, shuffles with the seeded Fisher–Yates of
/// [`crate::rng`], and cuts `floor(N * v / (t + v))` samples off the front as
/// the new validation split.
pub fn resample_split(
    train: &DatasetSplit,
    valid: &DatasetSplit,
    ratio: (u32, u32),
    seed: u64,
) -> Result<(DatasetSplit, DatasetSplit)> {
    let (t, v) = ratio;
    if t == 0 || v == 0 {
        return Err(Error::InvalidInput(format!("invalid ratio {t}:{v}")));
    }
    let mut merged: Vec<_> = train
        .samples
        .iter()
        .chain(valid.samples.iter())
        .cloned()
        .collect();
    let n = merged.len();
    let parts = (t + v) as usize;
    if n < parts {
        return Err(Error::InvalidInput(format!(
            "cannot resample {n} samples at {t}:{v}; need at least {parts}"
        )));
    }
    rng::shuffle(&mut rng::seeded(seed), &mut merged);
    let n_valid = n * v as usize / parts;
    let new_train = merged.split_off(n_valid);
    let mut sources = train.provenance.sources.clone();
    sources.extend(valid.provenance.sources.iter().cloned());
    let provenance = Provenance {
        sources,
        resample_seed: Some(seed),
        ratio: Some(ratio),
    };
    Ok((
        DatasetSplit::new(new_train, provenance.clone()),
        DatasetSplit::new(merged, provenance),
    ))
}

/// Validation answers never seen in training, per derived category, in
/// first-occurrence order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CoverageReport {
    pub unseen: [Vec<String>; 5],
}

impl CoverageReport {
    pub fn get(&self, category: CategoryLabel) -> &[String] {
        &self.unseen[category.index()]
    }

    pub fn is_empty(&self) -> bool {
        self.unseen.iter().all(Vec::is_empty)
    }

    pub fn total(&self) -> usize {
        self.unseen.iter().map(Vec::len).sum()
    }
}

pub fn coverage_report(train: &DatasetSplit, valid: &DatasetSplit) -> CoverageReport {
    let mut seen: [HashSet<String>; 5] = Default::default();
    for s in &train.samples {
        if let Some(a) = s.normalized_answer() {
            seen[s.derived_category.index()].insert(a);
        }
    }
    let mut report = CoverageReport::default();
    let mut reported: [HashSet<String>; 5] = Default::default();
    for s in &valid.samples {
        let Some(a) = s.normalized_answer() else { continue };
        let c = s.derived_category.index();
        if !seen[c].contains(&a) && reported[c].insert(a.clone()) {
            report.unseen[c].push(a);
        }
    }
    report
}

/// Everything `emit_report` can write.
#[derive(Clone, Debug, Default)]
pub struct AnalysisReport {
    pub distribution: DistributionReport,
    pub ngrams: NGramTable,
    pub coverage: Option<CoverageReport>,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Writes CSV tables and PNG bar charts into `out_dir`; returns the paths.
pub fn emit_report(report: &AnalysisReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let mut emit = |name: String, contents: String| -> Result<()> {
        let path = out_dir.join(name);
        write_file(&path, &contents)?;
        written.push(path);
        Ok(())
    };

    let mut categories = String::from("category,count\n");
    for cat in CategoryLabel::ALL {
        let stats = report.distribution.get(cat);
        categories.push_str(&format!("{},{}\n", cat.code(), stats.sample_count));

        let mut answers = String::from("answer,count\n");
        for (a, n) in stats.answers.sorted_by_count() {
            answers.push_str(&format!("{},{n}\n", csv_field(&a)));
        }
        emit(format!("answers_{}.csv", cat.code()), answers)?;

        let mut questions = String::from("question_prefix,count\n");
        for (q, n) in stats.question_prefixes.sorted_by_count() {
            questions.push_str(&format!("{},{n}\n", csv_field(&q)));
        }
        emit(format!("questions_{}.csv", cat.code()), questions)?;
    }
    emit("categories.csv".into(), categories)?;

    let mut skew = String::from("category,samples,classes,median_class_frequency,classes_below_median\n");
    for cat in CategoryLabel::ALL {
        let s = report.distribution.get(cat);
        skew.push_str(&format!(
            "{},{},{},{},{}\n",
            cat.code(),
            s.sample_count,
            s.class_count(),
            s.median_class_frequency,
            s.classes_below_median
        ));
    }
    emit("answer_stats.csv".into(), skew)?;

    let mut ngrams = String::from("category,unique_answers,unigram,bigram,trigram,fourgram\n");
    for cat in CategoryLabel::ORIGINAL {
        let r = report.ngrams.row(cat);
        ngrams.push_str(&format!(
            "{},{},{},{},{},{}\n",
            cat.code(),
            report.ngrams.unique_answers[cat.index()],
            r[0],
            r[1],
            r[2],
            r[3]
        ));
    }
    emit("ngrams.csv".into(), ngrams)?;

    if let Some(cov) = &report.coverage {
        let mut unseen = String::from("category,answer\n");
        for cat in CategoryLabel::ALL {
            for a in cov.get(cat) {
                unseen.push_str(&format!("{},{}\n", cat.code(), csv_field(a)));
            }
        }
        emit("unseen_answers.csv".into(), unseen)?;
    }

    let category_counts: Vec<usize> = CategoryLabel::ALL
        .iter()
        .map(|&c| report.distribution.get(c).sample_count)
        .collect();
    let charts = std::iter::once(("categories.png".to_string(), category_counts)).chain(
        CategoryLabel::ALL.iter().flat_map(|&c| {
            let s = report.distribution.get(c);
            [
                (
                    format!("answers_{}.png", c.code()),
                    s.answers.sorted_by_count().iter().map(|e| e.1).collect(),
                ),
                (
                    format!("questions_{}.png", c.code()),
                    s.question_prefixes.sorted_by_count().iter().map(|e| e.1).collect(),
                ),
            ]
        }),
    );
    for (name, values) in charts {
        let path = out_dir.join(name);
        plot::bar_chart(&values, &path)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;

    fn split(items: &[(CategoryLabel, &str)]) -> DatasetSplit {
        DatasetSplit::new(
            items
                .iter()
                .enumerate()
                .map(|(i, (c, a))| {
                    Sample::new(format!("img{i}"), "x.png", *c, "what is it", Some(a.to_string()), 8, 8)
                })
                .collect(),
            Provenance::default(),
        )
    }

    #[test]
    fn class_stats_on_fixture() {
        let c = CategoryLabel::C4Abnormality;
        let s = split(&[(c, "a"), (c, "a"), (c, "a"), (c, "b"), (c, "c")]);
        let r = answer_class_stats(&s).unwrap();
        let st = r.get(c);
        assert_eq!(st.class_count(), 3);
        assert_eq!(st.median_class_frequency, 1.0);
        assert_eq!(st.answers.get("a"), 3);
        assert_eq!(st.answers.get("b"), 1);
        assert_eq!(st.answers.get("c"), 1);
        assert_eq!(st.answers.total(), st.sample_count);
        assert_eq!(st.classes_below_median, 0);
    }

    #[test]
    fn distinct_answers_have_median_one() {
        let c = CategoryLabel::C1Modality;
        let s = split(&[(c, "a"), (c, "b"), (c, "c"), (c, "d")]);
        assert_eq!(answer_class_stats(&s).unwrap().get(c).median_class_frequency, 1.0);
    }

    #[test]
    fn ngram_counts_on_fixtures() {
        let c = CategoryLabel::C1Modality;
        let t = ngram_counts(&split(&[(c, "yes"), (c, "no")]));
        assert_eq!(t.row(c), [2, 0, 0, 0]);
        // "a b c d" and "a b x": unigrams {a,b,c,d,x}, bigrams {ab,bc,cd,bx},
        // trigrams {abc,bcd,abx}, fourgrams {abcd}
        let c4 = CategoryLabel::C4Abnormality;
        let t = ngram_counts(&split(&[(c4, "a b c d"), (c4, "A b x"), (c4, "yes")]));
        assert_eq!(t.row(c4), [6, 4, 3, 1]);
        assert_eq!(t.unique_answers[c4.index()], 3);
    }

    #[test]
    fn resample_sizes() {
        let c = CategoryLabel::C2Plane;
        let items: Vec<_> = (0..20).map(|_| (c, "axial")).collect();
        let s = split(&items);
        let (t, v) = resample_split(&s, &DatasetSplit::default(), RESAMPLE_RATIO, 1).unwrap();
        assert_eq!((t.len(), v.len()), (19, 1));
        let small = split(&items[..19]);
        assert!(resample_split(&small, &DatasetSplit::default(), RESAMPLE_RATIO, 1).is_err());
    }

    #[test]
    fn coverage_on_fixture() {
        let c = CategoryLabel::C3Organ;
        let r = coverage_report(&split(&[(c, "a"), (c, "b")]), &split(&[(c, "b"), (c, "c")]));
        assert_eq!(r.get(c), ["c"]);
        let t = split(&[(c, "a"), (c, "b")]);
        assert!(coverage_report(&t, &t).is_empty());
    }

    #[test]
    fn emits_headers_for_empty_split() {
        let dir = tempfile::tempdir().unwrap();
        let report = AnalysisReport {
            distribution: answer_class_stats(&DatasetSplit::default()).unwrap(),
            ngrams: ngram_counts(&DatasetSplit::default()),
            coverage: None,
        };
        emit_report(&report, dir.path()).unwrap();
        let answers = fs::read_to_string(dir.path().join("answers_C1.csv")).unwrap();
        assert_eq!(answers, "answer,count\n");
        let ngrams = fs::read_to_string(dir.path().join("ngrams.csv")).unwrap();
        assert_eq!(ngrams.lines().count(), 5);
        assert!(dir.path().join("categories.png").is_file());
    }
}
