//! Answer distributions, n-gram counts, unseen validation answers and the
//! 19:1 resampling on a synthetic dataset.

use sfn_core::analysis::{answer_class_stats, coverage_report, ngram_counts, resample_split, RESAMPLE_RATIO};
use sfn_core::cli::load_split;
use sfn_core::data::CategoryLabel;
use sfn_core::synthetic::{generate_synthetic, SyntheticSpec};

fn main() -> sfn_core::Result<()> {
    let dir = tempfile::tempdir().expect("tempdir");
    let spec = SyntheticSpec {
        n_images: 200,
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec, dir.path())?;
    let train = load_split(dir.path(), "train")?;
    let valid = load_split(dir.path(), "valid")?;

    let stats = answer_class_stats(&train)?;
    let ngrams = ngram_counts(&train);
    println!("category  samples  classes  median  below-median  ngrams(1..4)");
    for c in CategoryLabel::ALL {
        let s = stats.get(c);
        let grams = if c.is_original() { format!("{:?}", ngrams.row(c)) } else { "-".into() };
        println!(
            "{:<9} {:>7}  {:>7}  {:>6.1}  {:>11.0}%  {grams}",
            c.code(),
            s.sample_count,
            s.class_count(),
            s.median_class_frequency,
            100.0 * s.fraction_below_median()
        );
    }

    let unseen = coverage_report(&train, &valid);
    println!("validation answers never seen in training: {}", unseen.total());

    let (new_train, new_valid) = resample_split(&train, &valid, RESAMPLE_RATIO, 0)?;
    println!(
        "resampled {} + {} samples into {} + {}",
        train.len(),
        valid.len(),
        new_train.len(),
        new_valid.len()
    );
    Ok(())
}
