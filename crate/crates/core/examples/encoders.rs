//! Runs the question, image and size encoders on one synthetic sample.

use sfn_core::cli::load_split;
use sfn_core::data::build_vocabulary;
use sfn_core::encoders::{normalize_image, BackboneKind, ImageEncoder, QuestionEncoder, SizeEncoder};
use sfn_core::images::load_resized;
use sfn_core::rng;
use sfn_core::synthetic::{generate_synthetic, SyntheticSpec};

fn main() -> sfn_core::Result<()> {
    let dir = tempfile::tempdir().expect("tempdir");
    let spec = SyntheticSpec {
        n_images: 10,
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec, dir.path())?;
    let train = load_split(dir.path(), "train")?;
    let vocab = build_vocabulary(&train);
    let sample = &train.samples[0];
    let mut r = rng::seeded(0);

    let question = QuestionEncoder::<f32>::new(vocab.len(), 100, 128, &mut r);
    let q = question.encode(&vocab.encode_all(&sample.tokens));
    println!("question {:?} -> {} numbers", sample.tokens, q.len());

    let image = ImageEncoder::<f32>::small(&mut r);
    let pixels = normalize_image::<f32>(BackboneKind::Small, &load_resized(&sample.image_path)?)?;
    let grid = image.encode_image(pixels.view())?;
    println!(
        "image {} -> {} channels on a {}x{} grid",
        sample.image_id,
        grid.channels(),
        grid.grid.0,
        grid.grid.1
    );

    let size = SizeEncoder::<f32>::new(32, &mut r);
    let s = size.encode_image_size(sample.image_width, sample.image_height)?;
    println!("size {}x{} -> {} numbers", sample.image_width, sample.image_height, s.len());
    Ok(())
}
