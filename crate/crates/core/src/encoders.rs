//! The three input encoders: word embeddings + LSTM for questions, a
//! convolutional backbone for images, and a fully connected layer for the
//! original image size.

use std::fs;
use std::path::Path;

use image::RgbImage;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{Vocabulary, PAD_INDEX};
use crate::nn::conv::{ConvCache, MaxPoolCache};
use crate::nn::linear::Embedding;
use crate::nn::lstm::LstmCache;
use crate::nn::ops::relu_backward;
use crate::nn::{join, AvgPool, Conv2d, Linear, Lstm, MaxPool2, Module, Param, Real};
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// Side length every image is resized to before encoding.
pub const IMAGE_SIDE: usize = 224;
/// Image sizes are divided by this before the size layer.
pub const SIZE_NORMALIZER: f64 = 1024.0;

/// Reads a whitespace-separated embedding text file (`token v1 v2 ...`).
///
/// Vocabulary tokens found in the file get their vectors; the rest are drawn
/// from Uniform(±0.05) using `seed`; the pad row is zero.
pub fn load_embeddings<F: Real>(path: &Path, vocab: &Vocabulary, seed: u64) -> Result<Embedding<F>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut width = None;
    let mut found: Vec<Option<Vec<F>>> = vec![None; vocab.len()];
    for (n, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values = parts
            .map(|v| v.parse::<f64>().map(F::lit))
            .collect::<std::result::Result<Vec<F>, _>>()
            .map_err(|e| Error::Parse {
                file: path.to_owned(),
                line: n + 1,
                message: e.to_string(),
            })?;
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(Error::Parse {
                    file: path.to_owned(),
                    line: n + 1,
                    message: format!("vector width {} differs from {w}", values.len()),
                })
            }
            _ => {}
        }
        let idx = vocab.encode(token);
        if vocab.decode(idx) == Some(token) && idx != PAD_INDEX {
            found[idx] = Some(values);
        }
    }
    let dim = width.ok_or_else(|| Error::Parse {
        file: path.to_owned(),
        line: 0,
        message: "empty embedding file".into(),
    })?;
    let mut rng = rng::derived(seed, "embeddings");
    let mut matrix = Array2::zeros((vocab.len(), dim));
    for (i, row) in found.into_iter().enumerate() {
        // Draw for every row so a token's init does not depend on which
        // other tokens happen to be in the file.
        let random: Vec<F> = (0..dim).map(|_| F::lit(rng::uniform(&mut rng, -0.05, 0.05))).collect();
        let values = row.unwrap_or(random);
        matrix.row_mut(i).assign(&Array1::from(values));
    }
    Ok(Embedding::from_matrix(matrix))
}

/// Token index sequences padded to a common length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    /// `steps[t][b]`: token at step `t` for row `b`.
    steps: Vec<Vec<usize>>,
    lengths: Vec<usize>,
}

impl TokenBatch {
    /// An empty sequence is encoded as a single pad token.
    pub fn new(sequences: &[Vec<usize>]) -> Self {
        let lengths: Vec<usize> = sequences.iter().map(|s| s.len().max(1)).collect();
        let max_len = lengths.iter().copied().max().unwrap_or(0);
        let steps = (0..max_len)
            .map(|t| {
                sequences
                    .iter()
                    .map(|s| s.get(t).copied().unwrap_or(PAD_INDEX))
                    .collect()
            })
            .collect();
        TokenBatch { steps, lengths }
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }
}

/// Embedding table followed by a single-layer LSTM; the encoding is the final
/// hidden state.
#[derive(Clone, Debug)]
pub struct QuestionEncoder<F> {
    pub embedding: Embedding<F>,
    pub lstm: Lstm<F>,
}

#[derive(Clone, Debug)]
pub struct QuestionCache<F> {
    steps: Vec<Vec<usize>>,
    lstm: LstmCache<F>,
}

impl<F: Real> QuestionEncoder<F> {
    pub fn new(vocab_size: usize, embed_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        QuestionEncoder {
            embedding: Embedding::new(vocab_size, embed_dim, rng),
            lstm: Lstm::new(embed_dim, hidden, rng),
        }
    }

    pub fn with_embedding(embedding: Embedding<F>, hidden: usize, rng: &mut Rng) -> Self {
        let dim = embedding.dim();
        QuestionEncoder {
            embedding,
            lstm: Lstm::new(dim, hidden, rng),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.lstm.hidden()
    }

    pub fn forward(&self, tokens: &TokenBatch) -> (Array2<F>, QuestionCache<F>) {
        let inputs: Vec<Array2<F>> = tokens.steps.iter().map(|ids| self.embedding.forward(ids)).collect();
        let (h, lstm) = self.lstm.forward(&inputs, &tokens.lengths);
        (
            h,
            QuestionCache {
                steps: tokens.steps.clone(),
                lstm,
            },
        )
    }

    pub fn backward(&mut self, cache: &QuestionCache<F>, dq: ArrayView2<F>) {
        let dxs = self.lstm.backward(&cache.lstm, dq);
        for (ids, dx) in cache.steps.iter().zip(&dxs) {
            self.embedding.backward(ids, dx.view());
        }
    }

    /// Encodes one token-index sequence.
    pub fn encode(&self, tokens: &[usize]) -> Array1<F> {
        let (h, _) = self.forward(&TokenBatch::new(&[tokens.to_vec()]));
        h.row(0).to_owned()
    }
}

impl<F: Real> Module<F> for QuestionEncoder<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        self.embedding.visit_params(&join(prefix, "embedding"), f);
        self.lstm.visit_params(&join(prefix, "lstm"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.embedding.visit_params_mut(&join(prefix, "embedding"), f);
        self.lstm.visit_params_mut(&join(prefix, "lstm"), f);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    /// From-scratch net: fixed 4×4 average-pool stem (224 → 56), then four
    /// 3×3 conv + ReLU blocks with 16/32/64/64 channels and strides 2/2/2/1,
    /// giving a 64×7×7 grid.
    Small,
    /// VGG-16 convolutional part (13 conv layers, 5 max-pools), 512×7×7;
    /// weights come from an asset file.
    Vgg16,
}

impl BackboneKind {
    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::Small => "small",
            BackboneKind::Vgg16 => "vgg16",
        }
    }
}

const VGG16_LAYOUT: &[(usize, bool)] = &[
    (64, false),
    (64, true),
    (128, false),
    (128, true),
    (256, false),
    (256, false),
    (256, true),
    (512, false),
    (512, false),
    (512, true),
    (512, false),
    (512, false),
    (512, true),
];

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug)]
struct ConvBlock<F> {
    conv: Conv2d<F>,
    pool: bool,
}

/// Convolutional image encoder producing a spatial feature grid.
#[derive(Clone, Debug)]
pub struct ImageEncoder<F> {
    kind: BackboneKind,
    blocks: Vec<ConvBlock<F>>,
}

/// Feature grid for a batch, stored as (batch, positions, channels) with
/// positions in row-major order over the (height, width) grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatureMap<F> {
    pub data: Array3<F>,
    pub grid: (usize, usize),
}

impl<F: Real> ImageFeatureMap<F> {
    pub fn new(data: Array3<F>, grid: (usize, usize)) -> Result<Self> {
        if grid.0 * grid.1 == 0 || data.dim().1 != grid.0 * grid.1 {
            return Err(Error::Shape(format!(
                "feature grid {grid:?} does not match {} positions",
                data.dim().1
            )));
        }
        Ok(ImageFeatureMap { data, grid })
    }

    pub fn batch_size(&self) -> usize {
        self.data.dim().0
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn positions(&self) -> usize {
        self.data.dim().1
    }

    /// (C, H', W') for one image.
    pub fn shape_chw(&self) -> (usize, usize, usize) {
        (self.channels(), self.grid.0, self.grid.1)
    }

    /// Rows `rows` of the batch.
    pub fn select(&self, rows: &[usize]) -> Self {
        ImageFeatureMap {
            data: self.data.select(Axis(0), rows),
            grid: self.grid,
        }
    }
}

#[derive(Clone, Debug)]
struct BlockCache<F> {
    conv: ConvCache<F>,
    relu_out: Array4<F>,
    pool: Option<MaxPoolCache>,
}

#[derive(Clone, Debug)]
pub struct ImageCache<F> {
    blocks: Vec<BlockCache<F>>,
    out_hw: (usize, usize),
}

impl<F: Real> ImageEncoder<F> {
    pub fn small(rng: &mut Rng) -> Self {
        let spec = [(3, 16, 2), (16, 32, 2), (32, 64, 2), (64, 64, 1)];
        ImageEncoder {
            kind: BackboneKind::Small,
            blocks: spec
                .iter()
                .map(|&(ci, co, s)| ConvBlock {
                    conv: Conv2d::new(ci, co, 3, s, 1, rng),
                    pool: false,
                })
                .collect(),
        }
    }

    /// VGG-16 layout with random weights (use [`Self::vgg16_from_asset`] for
    /// pretrained ones).
    pub fn vgg16_random(rng: &mut Rng) -> Self {
        let mut c_in = 3;
        let blocks = VGG16_LAYOUT
            .iter()
            .map(|&(c_out, pool)| {
                let conv = Conv2d::new(c_in, c_out, 3, 1, 1, rng);
                c_in = c_out;
                ConvBlock { conv, pool }
            })
            .collect();
        ImageEncoder {
            kind: BackboneKind::Vgg16,
            blocks,
        }
    }

    /// Loads VGG-16 weights from a named-array asset directory (checkpoint
    /// manifest format, arrays `layers.<i>.weight` / `layers.<i>.bias`).
    pub fn vgg16_from_asset(dir: &Path) -> Result<Self> {
        if !dir.join(checkpoint::MANIFEST_FILE).is_file() {
            return Err(Error::Checkpoint(format!(
                "pretrained vgg16 asset not found at {}",
                dir.display()
            )));
        }
        let arrays = checkpoint::read_arrays::<F>(dir)?;
        let mut enc = Self::vgg16_random(&mut rng::seeded(0));
        checkpoint::assign_params(&mut enc, "", &arrays, false)?;
        Ok(enc)
    }

    /// Builds the requested backbone; `vgg16` requires `asset`.
    pub fn build(kind: BackboneKind, asset: Option<&Path>, rng: &mut Rng) -> Result<Self> {
        match kind {
            BackboneKind::Small => Ok(Self::small(rng)),
            BackboneKind::Vgg16 => {
                let dir = asset.ok_or_else(|| {
                    Error::Checkpoint("backbone `vgg16` requested without a pretrained asset path".into())
                })?;
                Self::vgg16_from_asset(dir)
            }
        }
    }

    pub fn kind(&self) -> BackboneKind {
        self.kind
    }

    pub fn channels(&self) -> usize {
        self.blocks.last().map_or(3, |b| b.conv.c_out())
    }

    /// Side length of the tensors [`Self::forward`] expects.
    pub fn input_side(&self) -> usize {
        match self.kind {
            BackboneKind::Small => IMAGE_SIDE / 4,
            BackboneKind::Vgg16 => IMAGE_SIDE,
        }
    }

    /// Per-channel normalization of a 224×224 RGB image.
    pub fn normalize(&self, img: &RgbImage) -> Result<Array3<F>> {
        normalize_image(self.kind, img)
    }

    /// Fixed, parameter-free preprocessing applied before the trainable
    /// layers (the average-pool stem of the small backbone).
    pub fn stem(&self, normalized: ArrayView3<F>) -> Array3<F> {
        stem(self.kind, normalized)
    }

    /// `stem(normalize(img))`, the per-image tensor cached by data loaders.
    pub fn prepare(&self, img: &RgbImage) -> Result<Array3<F>> {
        prepare_image(self.kind, img)
    }

    /// Runs the trainable layers on a batch of prepared tensors.
    pub fn forward(&self, x: ArrayView4<F>) -> (ImageFeatureMap<F>, ImageCache<F>) {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut cur: Array4<F> = x.to_owned();
        for block in &self.blocks {
            let (y, conv) = block.conv.forward(cur.view());
            let y = y.mapv(|v| v.max(F::zero()));
            let (out, pool) = if block.pool {
                let (p, c) = MaxPool2.forward(y.view());
                (p, Some(c))
            } else {
                (y.clone(), None)
            };
            caches.push(BlockCache {
                conv,
                relu_out: y,
                pool,
            });
            cur = out;
        }
        let (b, h, w, c) = cur.dim();
        let data = cur.into_shape_with_order((b, h * w, c)).expect("feature reshape");
        (
            ImageFeatureMap { data, grid: (h, w) },
            ImageCache {
                blocks: caches,
                out_hw: (h, w),
            },
        )
    }

    pub fn backward(&mut self, cache: &ImageCache<F>, dfeatures: ArrayView3<F>) {
        let (b, _, c) = dfeatures.dim();
        let (h, w) = cache.out_hw;
        let mut grad = dfeatures
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((b, h, w, c))
            .expect("feature grad reshape");
        for (i, (block, bc)) in self.blocks.iter_mut().zip(&cache.blocks).enumerate().rev() {
            if let Some(pc) = &bc.pool {
                grad = MaxPool2.backward(pc, grad.view());
            }
            let (gb, gh, gw, gc) = grad.dim();
            let flat = grad.into_shape_with_order((gb * gh * gw, gc)).expect("flat grad");
            let relu_flat = bc
                .relu_out
                .view()
                .into_shape_with_order((gb * gh * gw, gc))
                .expect("flat relu")
                .to_owned();
            let d = relu_backward(&relu_flat, flat.view())
                .into_shape_with_order((gb, gh, gw, gc))
                .expect("grad reshape");
            match block.conv.backward(&bc.conv, d.view(), i > 0) {
                Some(dx) => grad = dx,
                None => break,
            }
        }
    }

    /// Encodes a single normalized 224×224×3 image.
    pub fn encode_image(&self, image: ArrayView3<F>) -> Result<ImageFeatureMap<F>> {
        if image.dim() != (IMAGE_SIDE, IMAGE_SIDE, 3) {
            return Err(Error::Shape(format!(
                "image tensor must be ({IMAGE_SIDE}, {IMAGE_SIDE}, 3), got {:?}",
                image.dim()
            )));
        }
        let x = self.stem(image).insert_axis(Axis(0));
        Ok(self.forward(x.view()).0)
    }
}

impl<F: Real> Module<F> for ImageEncoder<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.conv.visit_params(&join(prefix, &format!("layers.{i}")), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.conv.visit_params_mut(&join(prefix, &format!("layers.{i}")), f);
        }
    }
}

/// One fully connected layer with tanh over `(width, height) / 1024`.
#[derive(Clone, Debug)]
pub struct SizeEncoder<F> {
    pub fc: Linear<F>,
}

#[derive(Clone, Debug)]
pub struct SizeCache<F> {
    input: Array2<F>,
    output: Array2<F>,
}

impl<F: Real> SizeEncoder<F> {
    pub fn new(dim: usize, rng: &mut Rng) -> Self {
        SizeEncoder {
            fc: Linear::new(2, dim, rng),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.fc.out_dim()
    }

    pub fn normalized_input(sizes: &[(u32, u32)]) -> Result<Array2<F>> {
        let mut x = Array2::zeros((sizes.len(), 2));
        for (i, &(w, h)) in sizes.iter().enumerate() {
            if w == 0 || h == 0 {
                return Err(Error::InvalidInput(format!("image size {w}x{h} must be positive")));
            }
            x[[i, 0]] = F::lit(f64::from(w) / SIZE_NORMALIZER);
            x[[i, 1]] = F::lit(f64::from(h) / SIZE_NORMALIZER);
        }
        Ok(x)
    }

    pub fn forward(&self, sizes: &[(u32, u32)]) -> Result<(Array2<F>, SizeCache<F>)> {
        let input = Self::normalized_input(sizes)?;
        let output = self.fc.forward(input.view()).mapv(F::tanh);
        Ok((
            output.clone(),
            SizeCache { input, output },
        ))
    }

    pub fn backward(&mut self, cache: &SizeCache<F>, dy: ArrayView2<F>) {
        let mut dz = dy.to_owned();
        dz.zip_mut_with(&cache.output, |d, &y| *d = *d * (F::one() - y * y));
        self.fc.backward(cache.input.view(), dz.view());
    }

    pub fn encode_image_size(&self, width: u32, height: u32) -> Result<Array1<F>> {
        Ok(self.forward(&[(width, height)])?.0.row(0).to_owned())
    }
}

impl<F: Real> Module<F> for SizeEncoder<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        self.fc.visit_params(&join(prefix, "fc"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.fc.visit_params_mut(&join(prefix, "fc"), f);
    }
}

/// Per-channel normalization of a 224×224 RGB image for `kind`.
pub fn normalize_image<F: Real>(kind: BackboneKind, img: &RgbImage) -> Result<Array3<F>> {
    if img.width() as usize != IMAGE_SIDE || img.height() as usize != IMAGE_SIDE {
        return Err(Error::Shape(format!(
            "image must be {IMAGE_SIDE}x{IMAGE_SIDE}, got {}x{}",
            img.width(),
            img.height()
        )));
    }
    Ok(Array3::from_shape_fn((IMAGE_SIDE, IMAGE_SIDE, 3), |(y, x, c)| {
        let v = f64::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0;
        F::lit(match kind {
            BackboneKind::Small => v - 0.5,
            BackboneKind::Vgg16 => (v - IMAGENET_MEAN[c]) / IMAGENET_STD[c],
        })
    }))
}

fn stem<F: Real>(kind: BackboneKind, normalized: ArrayView3<F>) -> Array3<F> {
    match kind {
        BackboneKind::Small => AvgPool(4).apply(normalized),
        BackboneKind::Vgg16 => normalized.to_owned(),
    }
}

/// Normalized and stemmed tensor for `kind`; depends on no parameters.
pub fn prepare_image<F: Real>(kind: BackboneKind, img: &RgbImage) -> Result<Array3<F>> {
    Ok(stem(kind, normalize_image(kind, img)?.view()))
}

/// Stacks prepared per-image tensors into a batch.
pub fn stack_images<F: Real>(images: &[&Array3<F>]) -> Array4<F> {
    let (h, w, c) = images.first().map_or((0, 0, 0), |i| i.dim());
    let mut out = Array4::zeros((images.len(), h, w, c));
    for (i, img) in images.iter().enumerate() {
        out.slice_mut(s![i, .., .., ..]).assign(img);
    }
    out
}
