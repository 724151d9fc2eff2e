//! All four training stages on a small synthetic dataset, then IF-1C and SFN
//! side by side on the validation split.
//!
//! cargo run --release --example staged_training -- [N_IMAGES]

use sfn_core::cli::load_split;
use sfn_core::config::Config;
use sfn_core::synthetic::{generate_synthetic, SyntheticSpec};
use sfn_core::training::{evaluate_model, load_model, run_all_stages, Prepared};

fn main() -> sfn_core::Result<()> {
    let n_images = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(400);
    let dir = tempfile::tempdir().expect("tempdir");
    let spec = SyntheticSpec {
        n_images,
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec, dir.path())?;
    let train = load_split(dir.path(), "train")?;
    let valid = load_split(dir.path(), "valid")?;
    let config = Config::from_toml(
        include_str!("../../../configs/desk.toml"),
        &["training.epochs=15".into(), "training.input_fusion_epochs=15".into(), "training.batch_size=32".into()],
    )?;
    let prepared = Prepared::<f32>::new(&train, &valid, &config)?;
    let run = run_all_stages(&train, &valid, &config, &prepared)?;
    println!(
        "categorizer best epoch {}, input fusion validation F1 {:.3}",
        run.categorizer.best_epoch, run.input_fusion.best_f1
    );
    for (name, stage) in [("IF-1C", &run.if1c), ("SFN", &run.sfn)] {
        let model = load_model(&stage.checkpoint)?;
        let (report, _) = evaluate_model(&model, &valid, &prepared.images, &prepared.vocab, &prepared.dictionaries, &config)?;
        println!("\n{name} (kept epoch {})", stage.best_epoch);
        print!("{}", report.to_table());
    }
    Ok(())
}
