//! Checkpoint directories: `manifest.json` + `params.bin` + `vocab.json` +
//! `answers.json`.
//!
//! Arrays are stored little-endian, row-major and concatenated in manifest
//! order. Everything is written deterministically so two saves of the same
//! state are byte-identical.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{AnswerDictionaries, AnswerDictionary, CategoryLabel, Vocabulary};
use crate::nn::{Module, Real};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const VOCAB_FILE: &str = "vocab.json";
pub const ANSWERS_FILE: &str = "answers.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_fingerprint: String,
    /// Architecture description needed to rebuild the model.
    #[serde(default)]
    pub model: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

#[derive(Serialize, Deserialize)]
struct AnswersFile {
    #[serde(rename = "C1")]
    c1: Vec<String>,
    #[serde(rename = "C2")]
    c2: Vec<String>,
    #[serde(rename = "C3")]
    c3: Vec<String>,
    #[serde(rename = "C4")]
    c4: Vec<String>,
    #[serde(rename = "Binary")]
    binary: Vec<String>,
    global: Vec<String>,
}

/// Lowercase hex SHA-256.
pub fn fingerprint(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Every parameter of `module` as a named array, in visiting order.
pub fn collect_arrays<F: Real>(module: &impl Module<F>, prefix: &str) -> Vec<NamedArray<F>> {
    let mut out = Vec::new();
    module.visit_params(prefix, &mut |name, p| {
        out.push(NamedArray {
            name,
            shape: p.shape().to_vec(),
            data: p.value.iter().copied().collect(),
        })
    });
    out
}

/// Copies arrays into the matching parameters of `module`. Every parameter
/// under `prefix` must be present with the right shape; with `strict`, every
/// array under `prefix` must also be consumed.
pub fn assign_params<F: Real>(
    module: &mut impl Module<F>,
    prefix: &str,
    arrays: &[NamedArray<F>],
    strict: bool,
) -> Result<()> {
    let mut error = None;
    let mut used = Vec::new();
    module.visit_params_mut(prefix, &mut |name, p| {
        if error.is_some() {
            return;
        }
        let Some(a) = arrays.iter().find(|a| a.name == name) else {
            error = Some(Error::Checkpoint(format!("array `{name}` missing from checkpoint")));
            return;
        };
        if a.shape != p.shape() {
            error = Some(Error::Checkpoint(format!(
                "array `{name}` has shape {:?}, model expects {:?}",
                a.shape,
                p.shape()
            )));
            return;
        }
        for (dst, &src) in p.value.iter_mut().zip(&a.data) {
            *dst = src;
        }
        used.push(name);
    });
    if let Some(e) = error {
        return Err(e);
    }
    if strict {
        let under = |n: &str| prefix.is_empty() || n == prefix || n.starts_with(&format!("{prefix}."));
        if let Some(extra) = arrays.iter().find(|a| under(&a.name) && !used.contains(&a.name)) {
            return Err(Error::Checkpoint(format!("array `{}` does not belong to the model", extra.name)));
        }
    }
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    read_json(&dir.join(MANIFEST_FILE))
}

fn decode_value<F: Real>(dtype: &str, bytes: &[u8]) -> F {
    match dtype {
        "f64" => F::lit(f64::get_le(bytes)),
        _ => F::lit(f64::from(f32::get_le(bytes))),
    }
}

/// Reads `params.bin` according to the manifest, converting to `F`.
pub fn read_arrays<F: Real>(dir: &Path) -> Result<Vec<NamedArray<F>>> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(PARAMS_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let mut total = 0;
    let mut out = Vec::with_capacity(manifest.arrays.len());
    for e in &manifest.arrays {
        let width = match e.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => {
                return Err(Error::Checkpoint(format!("array `{}` has unsupported dtype `{other}`", e.name)));
            }
        };
        let count: usize = e.shape.iter().product();
        if count * width != e.length {
            return Err(Error::Checkpoint(format!(
                "array `{}`: shape {:?} needs {} bytes, manifest says {}",
                e.name,
                e.shape,
                count * width,
                e.length
            )));
        }
        if e.offset + e.length > bytes.len() {
            return Err(Error::Checkpoint(format!("array `{}` runs past the end of {PARAMS_FILE}", e.name)));
        }
        let data = bytes[e.offset..e.offset + e.length]
            .chunks_exact(width)
            .map(|c| decode_value::<F>(&e.dtype, c))
            .collect();
        total += e.length;
        out.push(NamedArray {
            name: e.name.clone(),
            shape: e.shape.clone(),
            data,
        });
    }
    if total != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{PARAMS_FILE} holds {} bytes but the manifest accounts for {total}",
            bytes.len()
        )));
    }
    Ok(out)
}

/// A saved model state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<F> {
    pub stage: String,
    pub config_fingerprint: String,
    pub model: serde_json::Value,
    pub arrays: Vec<NamedArray<F>>,
    pub vocab: Vocabulary,
    pub answers: AnswerDictionaries,
}

impl<F: Real> Checkpoint<F> {
    pub fn array(&self, name: &str) -> Option<&NamedArray<F>> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut params = Vec::new();
        let mut entries = Vec::with_capacity(self.arrays.len());
        for a in &self.arrays {
            let count: usize = a.shape.iter().product();
            if count != a.data.len() {
                return Err(Error::Checkpoint(format!(
                    "array `{}` has {} values for shape {:?}",
                    a.name,
                    a.data.len(),
                    a.shape
                )));
            }
            let offset = params.len();
            for &v in &a.data {
                v.put_le(&mut params);
            }
            entries.push(ArrayEntry {
                name: a.name.clone(),
                shape: a.shape.clone(),
                dtype: F::DTYPE.into(),
                offset,
                length: params.len() - offset,
            });
        }
        let manifest = Manifest {
            stage: self.stage.clone(),
            config_fingerprint: self.config_fingerprint.clone(),
            model: self.model.clone(),
            arrays: entries,
        };
        write_json(&dir.join(MANIFEST_FILE), &manifest)?;
        let path = dir.join(PARAMS_FILE);
        fs::write(&path, &params).map_err(|e| Error::io(&path, e))?;
        write_json(&dir.join(VOCAB_FILE), &self.vocab.tokens())?;
        let list = |c: CategoryLabel| self.answers.get(c).answers().to_vec();
        let answers = AnswersFile {
            c1: list(CategoryLabel::C1Modality),
            c2: list(CategoryLabel::C2Plane),
            c3: list(CategoryLabel::C3Organ),
            c4: list(CategoryLabel::C4Abnormality),
            binary: list(CategoryLabel::Binary),
            global: self.answers.global().answers().to_vec(),
        };
        write_json(&dir.join(ANSWERS_FILE), &answers)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.join(MANIFEST_FILE).is_file() {
            return Err(Error::Checkpoint(format!("no checkpoint at {}", dir.display())));
        }
        let manifest = read_manifest(dir)?;
        let arrays = read_arrays(dir)?;
        let vocab = Vocabulary::from_index_list(read_json(&dir.join(VOCAB_FILE))?)?;
        let a: AnswersFile = read_json(&dir.join(ANSWERS_FILE))?;
        let answers = AnswerDictionaries::from_parts(
            [
                AnswerDictionary::from_answers(a.c1)?,
                AnswerDictionary::from_answers(a.c2)?,
                AnswerDictionary::from_answers(a.c3)?,
                AnswerDictionary::from_answers(a.c4)?,
                AnswerDictionary::from_answers(a.binary)?,
            ],
            AnswerDictionary::from_answers(a.global)?,
        );
        Ok(Checkpoint {
            stage: manifest.stage,
            config_fingerprint: manifest.config_fingerprint,
            model: manifest.model,
            arrays,
            vocab,
            answers,
        })
    }
}
