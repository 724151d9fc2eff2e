//! Macro P/R/F1, strict accuracy and BLEU, overall and per category.

use sfn_core::data::CategoryLabel;
use sfn_core::metrics::{sentence_bleu, BleuSmoothing, MetricsReport};

fn main() -> sfn_core::Result<()> {
    let gold = ["ct", "mri", "axial", "skull and contents", "arachnoid cyst", "yes"];
    let predicted = ["ct", "ct", "axial", "skull and contents", "arachnoid cyst with hemorrhage", "no"];
    let categories = [
        CategoryLabel::C1Modality,
        CategoryLabel::C1Modality,
        CategoryLabel::C2Plane,
        CategoryLabel::C3Organ,
        CategoryLabel::C4Abnormality,
        CategoryLabel::Binary,
    ];
    let report = MetricsReport::compute(&predicted, &gold, &categories, BleuSmoothing::None)?;
    print!("{}", report.to_table());

    // short answers rarely have four-grams, so they score 0 even when exact
    for (c, r) in [("ct", "ct"), ("skull and contents", "skull and contents"), ("a b c d e", "a b c d e")] {
        println!("BLEU({c:?}, {r:?}) = {:.3}", sentence_bleu(c, r, BleuSmoothing::None));
    }
    Ok(())
}
