//! Samples, question preprocessing, category derivation, vocabularies and
//! per-category answer dictionaries.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Question category. `Binary` is never read from a file; it is derived from
/// yes/no answers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CategoryLabel {
    C1Modality,
    C2Plane,
    C3Organ,
    C4Abnormality,
    Binary,
}

impl CategoryLabel {
    /// Fixed order used for tie-breaking, head layout and reports.
    pub const ALL: [CategoryLabel; 5] = [
        CategoryLabel::C1Modality,
        CategoryLabel::C2Plane,
        CategoryLabel::C3Organ,
        CategoryLabel::C4Abnormality,
        CategoryLabel::Binary,
    ];

    /// The four categories that appear in question files.
    pub const ORIGINAL: [CategoryLabel; 4] = [
        CategoryLabel::C1Modality,
        CategoryLabel::C2Plane,
        CategoryLabel::C3Organ,
        CategoryLabel::C4Abnormality,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Short code used in file names and reports (`C1`..`C4`, `Binary`).
    pub fn code(self) -> &'static str {
        match self {
            CategoryLabel::C1Modality => "C1",
            CategoryLabel::C2Plane => "C2",
            CategoryLabel::C3Organ => "C3",
            CategoryLabel::C4Abnormality => "C4",
            CategoryLabel::Binary => "Binary",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.code().eq_ignore_ascii_case(code))
    }

    pub fn is_original(self) -> bool {
        self != CategoryLabel::Binary
    }
}

impl fmt::Display for CategoryLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

const STRIPPED: &[char] = &['.', ',', '?', '!', ';', ':', '"', '\'', '(', ')', '[', ']'];

/// Lowercases, drops the fixed punctuation set and splits on whitespace.
pub fn preprocess_question(raw: &str) -> Vec<String> {
    raw.to_lowercase()
        .chars()
        .filter(|c| !STRIPPED.contains(c))
        .collect::<String>()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// Answer key used by dictionaries and strict accuracy: trim + lowercase.
pub fn normalize_answer(answer: &str) -> String {
    answer.trim().to_lowercase()
}

pub fn is_binary_answer(answer: &str) -> bool {
    matches!(normalize_answer(answer).as_str(), "yes" | "no")
}

/// `Binary` for yes/no answers, otherwise the original category.
pub fn derive_category(original: CategoryLabel, answer: &str) -> CategoryLabel {
    if is_binary_answer(answer) {
        CategoryLabel::Binary
    } else {
        original
    }
}

/// One (image, question, answer) triple.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub image_id: String,
    pub image_path: PathBuf,
    pub original_category: CategoryLabel,
    pub derived_category: CategoryLabel,
    pub question: String,
    pub tokens: Vec<String>,
    /// Raw answer text; `None` for test files.
    pub answer: Option<String>,
    /// Original on-disk dimensions, before any resize.
    pub image_width: u32,
    pub image_height: u32,
}

impl Sample {
    pub fn new(
        image_id: impl Into<String>,
        image_path: impl Into<PathBuf>,
        original_category: CategoryLabel,
        question: impl Into<String>,
        answer: Option<String>,
        image_width: u32,
        image_height: u32,
    ) -> Self {
        let question = question.into();
        let derived_category = match &answer {
            Some(a) => derive_category(original_category, a),
            None => original_category,
        };
        Sample {
            image_id: image_id.into(),
            image_path: image_path.into(),
            original_category,
            derived_category,
            tokens: preprocess_question(&question),
            question,
            answer,
            image_width,
            image_height,
        }
    }

    /// False for test samples: the derived category is then unknown and the
    /// categorizer decides routing.
    pub fn category_known(&self) -> bool {
        self.answer.is_some()
    }

    pub fn normalized_answer(&self) -> Option<String> {
        self.answer.as_deref().map(normalize_answer)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub sources: Vec<String>,
    /// `None` means the split is the original one.
    pub resample_seed: Option<u64>,
    /// (training, validation) proportion used for resampling.
    pub ratio: Option<(u32, u32)>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub samples: Vec<Sample>,
    pub provenance: Provenance,
}

impl DatasetSplit {
    pub fn new(samples: Vec<Sample>, provenance: Provenance) -> Self {
        DatasetSplit {
            samples,
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn distinct_images(&self) -> usize {
        let mut ids: Vec<&str> = self.samples.iter().map(|s| s.image_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    /// Keeps only samples whose derived category passes `keep`.
    pub fn filter_categories(&self, keep: impl Fn(CategoryLabel) -> bool) -> DatasetSplit {
        DatasetSplit {
            samples: self
                .samples
                .iter()
                .filter(|s| keep(s.derived_category))
                .cloned()
                .collect(),
            provenance: self.provenance.clone(),
        }
    }
}

/// Parses the category from a question file name such as `C2_train.txt` or
/// `C2_Plane_train.txt`.
pub fn category_from_file_name(path: &Path) -> Option<CategoryLabel> {
    let name = path.file_name()?.to_str()?;
    let prefix = name.split(['_', '.']).next()?;
    CategoryLabel::from_code(prefix).filter(|c| c.is_original())
}

/// Locates `<image_dir>/<image_id>.jpg` or `.png`.
pub fn find_image(image_dir: &Path, image_id: &str) -> Option<PathBuf> {
    ["jpg", "png", "jpeg"]
        .iter()
        .map(|ext| image_dir.join(format!("{image_id}.{ext}")))
        .find(|p| p.is_file())
}

/// Loads pipe-delimited question files (`image_id|question|answer`, or
/// `image_id|question` for test files). Files are read in the given order.
pub fn load_dataset(question_files: &[PathBuf], image_dir: &Path) -> Result<DatasetSplit> {
    let mut samples = Vec::new();
    let mut dims_cache: HashMap<String, (PathBuf, u32, u32)> = HashMap::new();
    for file in question_files {
        let category = category_from_file_name(file).ok_or_else(|| Error::Parse {
            file: file.clone(),
            line: 0,
            message: "file name must start with C1_, C2_, C3_ or C4_".into(),
        })?;
        let text = fs::read_to_string(file).map_err(|e| Error::io(file, e))?;
        for (n, raw_line) in text.lines().enumerate() {
            let line = raw_line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.splitn(3, '|');
            let image_id = fields.next().unwrap_or("").trim();
            let question = fields.next();
            let answer = fields.next();
            let (Some(question), false) = (question, image_id.is_empty()) else {
                return Err(Error::Parse {
                    file: file.clone(),
                    line: n + 1,
                    message: "expected `image_id|question[|answer]`".into(),
                });
            };
            let (path, w, h) = match dims_cache.get(image_id) {
                Some(hit) => hit.clone(),
                None => {
                    let path =
                        find_image(image_dir, image_id).ok_or_else(|| Error::MissingImage {
                            image_id: image_id.to_owned(),
                            dir: image_dir.to_owned(),
                        })?;
                    let (w, h) = image::image_dimensions(&path).map_err(|source| {
                        Error::Image {
                            path: path.clone(),
                            source,
                        }
                    })?;
                    dims_cache.insert(image_id.to_owned(), (path.clone(), w, h));
                    (path, w, h)
                }
            };
            samples.push(Sample::new(
                image_id,
                path,
                category,
                question,
                answer.map(str::to_owned),
                w,
                h,
            ));
        }
    }
    Ok(DatasetSplit::new(
        samples,
        Provenance {
            sources: question_files
                .iter()
                .map(|p| p.display().to_string())
                .collect(),
            resample_seed: None,
            ratio: None,
        },
    ))
}

/// Writes `split` back as `C{1..4}_<name>.txt` in `dir`, one file per
/// original category, keeping sample order. Returns the written paths.
pub fn write_split(split: &DatasetSplit, dir: &Path, name: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: [String; 4] = Default::default();
    for s in &split.samples {
        let text = &mut files[s.original_category.index()];
        text.push_str(&s.image_id);
        text.push('|');
        text.push_str(&s.question);
        if let Some(a) = &s.answer {
            text.push('|');
            text.push_str(a);
        }
        text.push('\n');
    }
    let mut written = Vec::new();
    for (cat, text) in CategoryLabel::ORIGINAL.iter().zip(&files) {
        let path = dir.join(format!("{}_{name}.txt", cat.code()));
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// All `C?_*<split>.txt` files in `dir`, sorted by category.
pub fn question_files(dir: &Path, split: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let Some(name) = p.file_name().and_then(|n| n.to_str()) else {
                return false;
            };
            category_from_file_name(p).is_some() && name.ends_with(&format!("_{split}.txt"))
        })
        .collect();
    files.sort();
    Ok(files)
}

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_INDEX: usize = 0;
pub const UNK_INDEX: usize = 1;

/// Question word vocabulary with pad at 0 and unknown at 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(std::iter::empty::<String>()).expect("specials only")
    }
}

impl Vocabulary {
    /// Builds from content tokens in order; duplicates are ignored.
    pub fn from_tokens<I, S>(content: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        vocab.push(PAD.into());
        vocab.push(UNK.into());
        for t in content {
            vocab.push(t.into());
        }
        Ok(vocab)
    }

    /// Restores a vocabulary from its full index-ordered token list.
    pub fn from_index_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(PAD)
            || tokens.get(1).map(String::as_str) != Some(UNK)
        {
            return Err(Error::InvalidInput(
                "vocabulary must start with <pad>, <unk>".into(),
            ));
        }
        let n = tokens.len();
        let vocab = Self::from_tokens(tokens.into_iter().skip(2))?;
        if vocab.len() != n {
            return Err(Error::InvalidInput("vocabulary has duplicate tokens".into()));
        }
        Ok(vocab)
    }

    fn push(&mut self, token: String) {
        if !self.index.contains_key(&token) {
            self.index.insert(token.clone(), self.tokens.len());
            self.tokens.push(token);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of entries excluding pad and unknown.
    pub fn content_len(&self) -> usize {
        self.tokens.len() - 2
    }

    pub fn encode(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_INDEX)
    }

    pub fn encode_all(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.encode(t)).collect()
    }

    pub fn decode(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Distinct training-question tokens in first-occurrence order.
pub fn build_vocabulary(train: &DatasetSplit) -> Vocabulary {
    Vocabulary::from_tokens(train.samples.iter().flat_map(|s| s.tokens.iter().cloned()))
        .expect("vocabulary from tokens")
}

/// Exact-string answer to class index map for one category (or the global
/// union used by the single-classifier baseline).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnswerDictionary {
    answers: Vec<String>,
    index: HashMap<String, usize>,
}

impl AnswerDictionary {
    pub fn new() -> Self {
        AnswerDictionary {
            answers: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// From already-normalized answers in class order; duplicates are an error.
    pub fn from_answers(answers: Vec<String>) -> Result<Self> {
        let mut dict = Self::new();
        for a in answers {
            if dict.index.contains_key(&a) {
                return Err(Error::InvalidInput(format!("duplicate answer `{a}`")));
            }
            dict.insert(a);
        }
        Ok(dict)
    }

    /// Adds a normalized answer if absent; returns its class index.
    pub fn insert(&mut self, normalized: String) -> usize {
        if let Some(&i) = self.index.get(&normalized) {
            return i;
        }
        let i = self.answers.len();
        self.index.insert(normalized.clone(), i);
        self.answers.push(normalized);
        i
    }

    /// Looks up a raw answer after trim + lowercase.
    pub fn class_of(&self, answer: &str) -> Option<usize> {
        self.index.get(&normalize_answer(answer)).copied()
    }

    pub fn answer(&self, class: usize) -> Option<&str> {
        self.answers.get(class).map(String::as_str)
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }
}

impl Default for AnswerDictionary {
    fn default() -> Self {
        Self::new()
    }
}

/// The five per-category dictionaries plus the global union.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnswerDictionaries {
    per_category: [AnswerDictionary; 5],
    global: AnswerDictionary,
}

impl AnswerDictionaries {
    pub fn from_parts(per_category: [AnswerDictionary; 5], global: AnswerDictionary) -> Self {
        AnswerDictionaries {
            per_category,
            global,
        }
    }

    pub fn get(&self, category: CategoryLabel) -> &AnswerDictionary {
        &self.per_category[category.index()]
    }

    /// Union over all categories, for the single-classifier baseline.
    pub fn global(&self) -> &AnswerDictionary {
        &self.global
    }

    pub fn class_counts(&self) -> [usize; 5] {
        std::array::from_fn(|i| self.per_category[i].len())
    }

    pub fn iter(&self) -> impl Iterator<Item = (CategoryLabel, &AnswerDictionary)> {
        CategoryLabel::ALL
            .iter()
            .map(move |&c| (c, &self.per_category[c.index()]))
    }
}

/// Per-derived-category dictionaries, indices by first occurrence. The
/// Binary dictionary is always exactly `["yes", "no"]`.
pub fn build_answer_dictionaries(train: &DatasetSplit) -> Result<AnswerDictionaries> {
    let mut per_category: [AnswerDictionary; 5] = Default::default();
    per_category[CategoryLabel::Binary.index()] =
        AnswerDictionary::from_answers(vec!["yes".into(), "no".into()])?;
    let mut global = AnswerDictionary::new();
    for s in &train.samples {
        let answer = s.normalized_answer().ok_or_else(|| {
            Error::InvalidInput(format!(
                "training sample `{}|{}` has no answer",
                s.image_id, s.question
            ))
        })?;
        per_category[s.derived_category.index()].insert(answer.clone());
        global.insert(answer);
    }
    Ok(AnswerDictionaries {
        per_category,
        global,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(cat: CategoryLabel, q: &str, a: &str) -> Sample {
        Sample::new("img", "img.png", cat, q, Some(a.into()), 10, 10)
    }

    #[test]
    fn tokenizes_questions() {
        assert_eq!(
            preprocess_question("What organ system is pictured here?"),
            ["what", "organ", "system", "is", "pictured", "here"]
        );
        assert!(preprocess_question("").is_empty());
        assert_eq!(
            preprocess_question("Is this image modality T1, T2 or FLAIR?"),
            ["is", "this", "image", "modality", "t1", "t2", "or", "flair"]
        );
        assert_eq!(preprocess_question("  (a) [b]; c: \"d\" 'e'!  "), ["a", "b", "c", "d", "e"]);
    }

    #[test]
    fn derives_binary_category() {
        assert_eq!(derive_category(CategoryLabel::C1Modality, "yes"), CategoryLabel::Binary);
        assert_eq!(derive_category(CategoryLabel::C2Plane, "axial"), CategoryLabel::C2Plane);
        assert_eq!(derive_category(CategoryLabel::C4Abnormality, " No "), CategoryLabel::Binary);
        assert_eq!(derive_category(CategoryLabel::C4Abnormality, "no."), CategoryLabel::C4Abnormality);
    }

    #[test]
    fn test_samples_keep_original_category() {
        let s = Sample::new("i", "i.png", CategoryLabel::C1Modality, "is this a ct?", None, 5, 5);
        assert_eq!(s.derived_category, CategoryLabel::C1Modality);
        assert!(!s.category_known());
    }

    #[test]
    fn vocabulary_layout() {
        let split = DatasetSplit::new(vec![sample(CategoryLabel::C1Modality, "is this ct", "ct")], Provenance::default());
        let v = build_vocabulary(&split);
        assert_eq!(v.len(), 5);
        assert_eq!(v.content_len(), 3);
        assert_eq!(v.encode(PAD), 0);
        assert_eq!(v.encode("is"), 2);
        assert_eq!(v.encode("never-seen"), UNK_INDEX);
        for i in 0..v.len() {
            assert_eq!(v.encode(v.decode(i).unwrap()), i);
        }

        let split = DatasetSplit::new(
            vec![
                sample(CategoryLabel::C1Modality, "what modality is this", "ct"),
                sample(CategoryLabel::C2Plane, "what plane is shown", "axial"),
            ],
            Provenance::default(),
        );
        // {what, modality, is, this} ∪ {what, plane, is, shown}
        assert_eq!(build_vocabulary(&split).content_len(), 6);
        let split = DatasetSplit::new(
            vec![
                sample(CategoryLabel::C1Modality, "a b c", "ct"),
                sample(CategoryLabel::C2Plane, "b c d e", "axial"),
            ],
            Provenance::default(),
        );
        assert_eq!(build_vocabulary(&split).content_len(), 5);
    }

    #[test]
    fn answer_dictionaries_by_derived_category() {
        let split = DatasetSplit::new(
            vec![
                sample(CategoryLabel::C2Plane, "q", "yes"),
                sample(CategoryLabel::C2Plane, "q", "axial"),
                sample(CategoryLabel::C2Plane, "q", "Axial "),
                sample(CategoryLabel::C1Modality, "q", "mri"),
            ],
            Provenance::default(),
        );
        let d = build_answer_dictionaries(&split).unwrap();
        assert_eq!(d.get(CategoryLabel::Binary).answers(), ["yes", "no"]);
        assert_eq!(d.get(CategoryLabel::C2Plane).answers(), ["axial"]);
        assert_eq!(d.get(CategoryLabel::C1Modality).answers(), ["mri"]);
        assert!(d.get(CategoryLabel::C3Organ).is_empty());
        assert_eq!(d.global().answers(), ["yes", "axial", "mri"]);
        assert_eq!(d.get(CategoryLabel::C2Plane).class_of(" AXIAL"), Some(0));
    }

    #[test]
    fn answers_are_not_cleansed() {
        let split = DatasetSplit::new(
            vec![
                sample(CategoryLabel::C1Modality, "q", "ct - gi & iv contrast"),
                sample(CategoryLabel::C1Modality, "q", "ct with gi and iv contrast"),
                sample(CategoryLabel::C1Modality, "q", "gi and iv"),
            ],
            Provenance::default(),
        );
        let d = build_answer_dictionaries(&split).unwrap();
        assert_eq!(d.get(CategoryLabel::C1Modality).len(), 3);
    }

    #[test]
    fn category_from_names() {
        assert_eq!(category_from_file_name(Path::new("x/C3_train.txt")), Some(CategoryLabel::C3Organ));
        assert_eq!(
            category_from_file_name(Path::new("C1_Modality_val.txt")),
            Some(CategoryLabel::C1Modality)
        );
        assert_eq!(category_from_file_name(Path::new("Binary_train.txt")), None);
        assert_eq!(category_from_file_name(Path::new("readme.txt")), None);
    }
}
