//! Seeded generator for a small VQA dataset whose images encode their labels.
//!
//! Background texture gives the modality, an edge bar the plane, the central
//! shape the organ and a small glyph inside the shape the abnormality (glyph
//! kind and organ together pick the name; no glyph means "none"). Canvas
//! sizes depend on the modality. Questions come from fixed templates, with a
//! share of yes/no questions on the modality and abnormality files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::jpeg::JpegEncoder;
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::CategoryLabel;
use crate::rng::{self, Rng};
use crate::{Error, Result};

pub const MODALITIES: [&str; 5] = ["ct", "mri", "x-ray", "ultrasound", "pet"];
pub const PLANES: [&str; 3] = ["axial", "sagittal", "coronal"];
pub const ORGANS: [&str; 4] = [
    "skull and contents",
    "lung, mediastinum, pleura",
    "gastrointestinal",
    "spine and contents",
];
/// Three findings per organ, indexed by glyph kind.
pub const ABNORMALITIES: [[&str; 3]; 4] = [
    ["glioblastoma", "meningioma", "arachnoid cyst"],
    ["pulmonary embolism", "lung abscess", "pneumothorax"],
    ["appendicitis", "small bowel obstruction", "colon carcinoma"],
    ["spinal stenosis", "vertebral fracture", "disc herniation"],
];
pub const NO_ABNORMALITY: &str = "none";

/// Canvas (width, height) per modality before jitter.
const CANVAS: [(u32, u32); 5] = [(320, 320), (256, 256), (360, 440), (400, 300), (288, 288)];

const MODALITY_QUESTIONS: [&str; 4] = [
    "what modality is shown?",
    "what imaging modality was used?",
    "which modality is this?",
    "how was this image taken?",
];
const MODALITY_YES_NO: [&str; 2] = ["is this a {}?", "was this image taken with {}?"];
const PLANE_QUESTIONS: [&str; 3] = [
    "what plane is this?",
    "in what plane was this image taken?",
    "which plane is the image in?",
];
const ORGAN_QUESTIONS: [&str; 3] = [
    "what organ system is pictured here?",
    "what part of the body is being imaged?",
    "which organ system is shown?",
];
const ABNORMALITY_QUESTIONS: [&str; 3] = [
    "what is abnormal in the image?",
    "what is the primary abnormality in this image?",
    "what abnormality is seen?",
];
const ABNORMALITY_YES_NO: [&str; 2] = ["is this image abnormal?", "is there an abnormality in the image?"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_images: usize,
    pub questions_per_image: usize,
    /// Zipf exponent over answer classes; 0 is uniform.
    pub zipf_exponent: f64,
    /// Probability that an image shows no abnormality.
    pub normal_fraction: f64,
    /// Share of C1 and C4 questions asked in yes/no form.
    pub yes_no_fraction: f64,
    /// Share of images held out for validation.
    pub valid_fraction: f64,
    /// Extra single-occurrence C4 answers added to the training files.
    pub rare_tail: usize,
    /// Glyph side as a fraction of the shorter canvas side.
    pub glyph_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_images: 2000,
            questions_per_image: 4,
            zipf_exponent: 1.0,
            normal_fraction: 0.2,
            yes_no_fraction: 0.2,
            valid_fraction: 0.2,
            rare_tail: 0,
            glyph_scale: 0.09,
            seed: 7,
        }
    }
}

/// Ground truth of one rendered image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageLabels {
    pub modality: usize,
    pub plane: usize,
    pub organ: usize,
    /// Glyph kind, `None` for a normal image.
    pub abnormality: Option<usize>,
}

impl ImageLabels {
    pub fn abnormality_name(&self) -> &'static str {
        self.abnormality.map_or(NO_ABNORMALITY, |k| ABNORMALITIES[self.organ][k])
    }
}

/// Summary of a generated dataset.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GeneratedDataset {
    pub root: PathBuf,
    pub train_images: usize,
    pub valid_images: usize,
    pub train_questions: usize,
    pub valid_questions: usize,
}

impl GeneratedDataset {
    pub fn image_dir(&self) -> PathBuf {
        self.root.join("images")
    }
}

fn zipf(rng: &mut Rng, n: usize, exponent: f64) -> usize {
    let weights: Vec<f64> = (1..=n).map(|k| (k as f64).powf(-exponent)).collect();
    rng::weighted_index(rng, &weights)
}

fn pick<'a>(rng: &mut Rng, items: &[&'a str]) -> &'a str {
    items[rng::bounded(rng, items.len() as u64) as usize]
}

pub fn sample_labels(rng: &mut Rng, spec: &SyntheticSpec) -> ImageLabels {
    let s = spec.zipf_exponent;
    let modality = zipf(rng, MODALITIES.len(), s);
    let plane = zipf(rng, PLANES.len(), s);
    let organ = zipf(rng, ORGANS.len(), s);
    let abnormality = (rng::unit_f64(rng) >= spec.normal_fraction).then(|| zipf(rng, 3, s));
    ImageLabels {
        modality,
        plane,
        organ,
        abnormality,
    }
}

/// Draws the canvas, texture, marker, shape and glyph for `labels`.
pub fn render(labels: &ImageLabels, spec: &SyntheticSpec, rng: &mut Rng) -> RgbImage {
    let (bw, bh) = CANVAS[labels.modality];
    let jitter = |rng: &mut Rng, v: u32| (f64::from(v) * rng::uniform(rng, 0.9, 1.1)).round() as u32;
    let (w, h) = (jitter(rng, bw), jitter(rng, bh));
    let m = f64::from(w.min(h));
    let period = (m * 0.08).max(4.0);
    let phase = rng::uniform(rng, 0.0, period);

    let mut img = RgbImage::new(w, h);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let (fx, fy) = (f64::from(x) + phase, f64::from(y) + phase);
        let band = |v: f64| ((v / period).floor() as i64).rem_euclid(2) == 0;
        let tex = match labels.modality {
            0 => 0.0,
            1 => if band(fy) { 28.0 } else { -28.0 },
            2 => if band(fx) { 28.0 } else { -28.0 },
            3 => if band(fx) ^ band(fy) { 28.0 } else { -28.0 },
            _ => if band((fx + fy) / std::f64::consts::SQRT_2) { 28.0 } else { -28.0 },
        };
        let v = 70.0 + tex + rng::uniform(rng, -12.0, 12.0);
        *px = gray(v);
    }

    // Plane marker: a bright bar on the top, left or bottom edge.
    let thick = (m * 0.05).max(3.0);
    let (fw, fh) = (f64::from(w), f64::from(h));
    let bar = match labels.plane {
        0 => (fw * 0.25, 0.0, fw * 0.75, thick),
        1 => (0.0, fh * 0.25, thick, fh * 0.75),
        _ => (fw * 0.25, fh - thick, fw * 0.75, fh),
    };
    fill(&mut img, |x, y| x >= bar.0 && x < bar.2 && y >= bar.1 && y < bar.3, 235.0, rng);

    // Organ shape.
    let cx = fw * 0.5 + rng::uniform(rng, -0.08, 0.08) * m;
    let cy = fh * 0.5 + rng::uniform(rng, -0.08, 0.08) * m;
    let r = m * rng::uniform(rng, 0.28, 0.34);
    let inside = move |x: f64, y: f64| {
        let (dx, dy) = (x - cx, y - cy);
        match labels.organ {
            0 => dx * dx + dy * dy <= r * r,
            1 => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
            2 => dy <= r * 0.8 && dy >= -r && dx.abs() <= (dy + r) * 0.55,
            _ => dx.abs() + dy.abs() <= r,
        }
    };
    fill(&mut img, |x, y| inside(x, y), 170.0, rng);

    // Abnormality glyph, somewhere inside the shape.
    if let Some(kind) = labels.abnormality {
        let g = m * spec.glyph_scale * 0.5;
        let (gx, gy) = loop {
            let gx = cx + rng::uniform(rng, -0.5, 0.5) * r;
            let gy = cy + rng::uniform(rng, -0.4, 0.4) * r;
            if inside(gx, gy) {
                break (gx, gy);
            }
        };
        let level = rng::uniform(rng, 20.0, 70.0);
        fill(
            &mut img,
            |x, y| {
                let (dx, dy) = (x - gx, y - gy);
                match kind {
                    0 => dx * dx + dy * dy <= g * g,
                    1 => (dx.abs() <= g && dy.abs() <= g * 0.35) || (dy.abs() <= g && dx.abs() <= g * 0.35),
                    _ => {
                        let d2 = dx * dx + dy * dy;
                        d2 <= g * g && d2 >= (g * 0.55) * (g * 0.55)
                    }
                }
            },
            level,
            rng,
        );
    }
    img
}

fn gray(v: f64) -> Rgb<u8> {
    let b = v.round().clamp(0.0, 255.0) as u8;
    Rgb([b, b, b])
}

fn fill(img: &mut RgbImage, mask: impl Fn(f64, f64) -> bool, level: f64, rng: &mut Rng) {
    for (x, y, px) in img.enumerate_pixels_mut() {
        if mask(f64::from(x) + 0.5, f64::from(y) + 0.5) {
            *px = gray(level + rng::uniform(rng, -10.0, 10.0));
        }
    }
}

/// One question with its original (file) category.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratedQuestion {
    pub category: CategoryLabel,
    pub question: String,
    pub answer: String,
}

pub fn sample_question(labels: &ImageLabels, spec: &SyntheticSpec, rng: &mut Rng) -> GeneratedQuestion {
    let category = CategoryLabel::ORIGINAL[rng::bounded(rng, 4) as usize];
    let yes_no = rng::unit_f64(rng) < spec.yes_no_fraction;
    let yn = |b: bool| if b { "yes" } else { "no" }.to_string();
    let (question, answer) = match category {
        CategoryLabel::C1Modality if yes_no => {
            let asked = if rng::unit_f64(rng) < 0.5 {
                labels.modality
            } else {
                rng::bounded(rng, MODALITIES.len() as u64) as usize
            };
            let template = pick(rng, &MODALITY_YES_NO);
            (template.replace("{}", MODALITIES[asked]), yn(asked == labels.modality))
        }
        CategoryLabel::C1Modality => (pick(rng, &MODALITY_QUESTIONS).into(), MODALITIES[labels.modality].into()),
        CategoryLabel::C2Plane => (pick(rng, &PLANE_QUESTIONS).into(), PLANES[labels.plane].into()),
        CategoryLabel::C3Organ => (pick(rng, &ORGAN_QUESTIONS).into(), ORGANS[labels.organ].into()),
        _ if yes_no => (pick(rng, &ABNORMALITY_YES_NO).into(), yn(labels.abnormality.is_some())),
        _ => (pick(rng, &ABNORMALITY_QUESTIONS).into(), labels.abnormality_name().into()),
    };
    GeneratedQuestion {
        category,
        question,
        answer,
    }
}

/// Writes `images/<id>.jpg` and `C{1..4}_{train,valid}.txt` under `out_dir`.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<GeneratedDataset> {
    if spec.n_images == 0 {
        return Err(Error::InvalidInput("synthetic dataset needs at least one image".into()));
    }
    let image_dir = out_dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let mut rng = rng::derived(spec.seed, "synthetic");
    let n_valid = ((spec.n_images as f64) * spec.valid_fraction).round() as usize;
    let n_train = spec.n_images - n_valid.min(spec.n_images);
    let mut files: [[String; 2]; 4] = Default::default();
    let mut summary = GeneratedDataset {
        root: out_dir.to_path_buf(),
        train_images: n_train,
        valid_images: spec.n_images - n_train,
        ..Default::default()
    };
    let mut first_train_id = None;
    for i in 0..spec.n_images {
        let id = format!("synpic{i:05}");
        let labels = sample_labels(&mut rng, spec);
        let img = render(&labels, spec, &mut rng);
        let path = image_dir.join(format!("{id}.jpg"));
        let mut bytes = Vec::new();
        JpegEncoder::new_with_quality(&mut bytes, 90)
            .encode_image(&img)
            .map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?;
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        let split = usize::from(i >= n_train);
        if split == 0 && first_train_id.is_none() {
            first_train_id = Some(id.clone());
        }
        for _ in 0..spec.questions_per_image {
            let q = sample_question(&labels, spec, &mut rng);
            let _ = writeln!(files[q.category.index()][split], "{id}|{}|{}", q.question, q.answer);
            if split == 0 {
                summary.train_questions += 1;
            } else {
                summary.valid_questions += 1;
            }
        }
    }
    if let Some(id) = first_train_id {
        for k in 0..spec.rare_tail {
            let q = pick(&mut rng, &ABNORMALITY_QUESTIONS);
            let _ = writeln!(files[3][0], "{id}|{q}|rare finding {k}");
            summary.train_questions += 1;
        }
    }
    for (cat, pair) in CategoryLabel::ORIGINAL.iter().zip(&files) {
        for (split, text) in ["train", "valid"].iter().zip(pair) {
            let path = out_dir.join(format!("{}_{split}.txt", cat.code()));
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(summary)
}
