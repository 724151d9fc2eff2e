//! Trains the question categorizer on synthetic questions and routes a few
//! new ones.

use sfn_core::cli::load_split;
use sfn_core::config::Config;
use sfn_core::data::{build_vocabulary, preprocess_question};
use sfn_core::synthetic::{generate_synthetic, SyntheticSpec};
use sfn_core::training::{load_categorizer, pretrain_categorizer};

fn main() -> sfn_core::Result<()> {
    let dir = tempfile::tempdir().expect("tempdir");
    let spec = SyntheticSpec {
        n_images: 300,
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec, dir.path())?;
    let train = load_split(dir.path(), "train")?;
    let valid = load_split(dir.path(), "valid")?;
    let config = Config::from_toml(
        "[training]\ncategorizer_epochs = 3\ncategorizer_learning_rate = 0.003\nbatch_size = 64\n",
        &[],
    )?;
    let vocab = build_vocabulary(&train);
    let outcome = pretrain_categorizer::<f32>(&train, &valid, &config, &vocab)?;
    for row in &outcome.log {
        println!("epoch {} loss {:.4} validation accuracy {:.4}", row.epoch, row.train_loss, row.val_accuracy);
    }
    let categorizer = load_categorizer(&outcome.checkpoint)?;
    for q in ["what imaging method was used?", "in what plane is this image taken?", "is this image abnormal?"] {
        let d = categorizer.categorize(&vocab.encode_all(&preprocess_question(q)));
        println!("{q:<40} -> {} ({:.3})", d.argmax(), d.probability(d.argmax()));
    }
    Ok(())
}
