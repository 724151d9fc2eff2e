//! Saves a model, reloads it and checks the outputs agree bit for bit.

use sfn_core::checkpoint::{collect_arrays, fingerprint, read_manifest, Checkpoint};
use sfn_core::data::{build_answer_dictionaries, build_vocabulary, CategoryLabel, DatasetSplit, Sample};
use sfn_core::model::{Batch, BatchImages, HeadKind, HeadLogits, Model, ModelDims, ModelSpec};
use sfn_core::encoders::TokenBatch;
use sfn_core::rng;
use sfn_core::training::load_model;

fn main() -> sfn_core::Result<()> {
    let qa = [
        (CategoryLabel::C1Modality, "what modality is shown?", "ct"),
        (CategoryLabel::C2Plane, "in what plane is this image?", "axial"),
        (CategoryLabel::C3Organ, "what organ system is shown?", "skull and contents"),
        (CategoryLabel::C4Abnormality, "what is abnormal?", "meningioma"),
    ];
    let samples = qa
        .iter()
        .enumerate()
        .map(|(i, (c, q, a))| Sample::new(format!("img{i}"), "unused.jpg", *c, *q, Some(a.to_string()), 512, 512))
        .collect();
    let split = DatasetSplit::new(samples, Default::default());
    let vocab = build_vocabulary(&split);
    let answers = build_answer_dictionaries(&split)?;
    let spec = ModelSpec::new(ModelDims::default(), HeadKind::Sfn, &vocab, &answers);
    let model = Model::<f32>::new(spec, None, None, &mut rng::seeded(0))?;

    let dir = tempfile::tempdir().expect("tempdir");
    Checkpoint {
        stage: "sfn".into(),
        config_fingerprint: fingerprint(b"example"),
        model: serde_json::to_value(&model.spec)?,
        arrays: collect_arrays(&model, ""),
        vocab: vocab.clone(),
        answers,
    }
    .save(dir.path())?;
    let manifest = read_manifest(dir.path())?;
    println!("saved {} arrays for stage `{}`", manifest.arrays.len(), manifest.stage);

    let loaded = load_model(&Checkpoint::<f32>::load(dir.path())?)?;
    let side = model.input.image.input_side();
    let mut r = rng::seeded(1);
    let batch = Batch {
        tokens: TokenBatch::new(&split.samples.iter().map(|s| vocab.encode_all(&s.tokens)).collect::<Vec<_>>()),
        images: BatchImages::Prepared(ndarray::Array4::from_shape_fn((4, side, side, 3), |_| {
            rng::uniform(&mut r, -1.0, 1.0) as f32
        })),
        sizes: vec![(512, 512); 4],
    };
    let (a, b) = (model.forward(&batch, None)?, loaded.forward(&batch, None)?);
    let same = match (&a.logits, &b.logits) {
        (HeadLogits::PerCategory(x), HeadLogits::PerCategory(y)) => x == y,
        (HeadLogits::Global(x), HeadLogits::Global(y)) => x == y,
        _ => false,
    };
    println!("reloaded model gives identical logits: {same}");
    Ok(())
}
