//! Renders a small synthetic dataset and prints a few of its questions.
//!
//! cargo run --release --example synthetic_dataset -- [OUT_DIR]

use std::fs;
use std::path::PathBuf;

use sfn_core::synthetic::{generate_synthetic, SyntheticSpec};

fn main() -> sfn_core::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("sfn-synthetic"));
    let spec = SyntheticSpec {
        n_images: 50,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec, &out)?;
    println!(
        "{} train / {} valid images, {} / {} questions in {}",
        data.train_images,
        data.valid_images,
        data.train_questions,
        data.valid_questions,
        out.display()
    );
    for code in ["C1", "C2", "C3", "C4"] {
        let text = fs::read_to_string(out.join(format!("{code}_train.txt"))).unwrap_or_default();
        if let Some(line) = text.lines().next() {
            println!("{code}: {line}");
        }
    }
    Ok(())
}
