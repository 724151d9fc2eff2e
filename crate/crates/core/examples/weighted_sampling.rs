//! Inverse-frequency sampling turns a skewed answer distribution into
//! roughly balanced batches.

use std::collections::BTreeMap;

use sfn_core::data::{build_answer_dictionaries, CategoryLabel, DatasetSplit, Sample};
use sfn_core::rng;
use sfn_core::sampling::{compute_weights, WeightedSampler};

fn main() -> sfn_core::Result<()> {
    let sizes = [500, 120, 40, 10, 2];
    let samples: Vec<Sample> = sizes
        .iter()
        .enumerate()
        .flat_map(|(k, &n)| {
            (0..n).map(move |i| {
                Sample::new(
                    format!("img{k}_{i}"),
                    "unused.jpg",
                    CategoryLabel::C4Abnormality,
                    "what is abnormal in the image?",
                    Some(format!("finding {k}")),
                    256,
                    256,
                )
            })
        })
        .collect();
    let split = DatasetSplit::new(samples, Default::default());
    let weights = compute_weights(&split, &build_answer_dictionaries(&split)?)?;
    let mut sampler = WeightedSampler::new(&weights, rng::seeded(1))?;

    let mut drawn: BTreeMap<&str, usize> = BTreeMap::new();
    for i in sampler.sample_indices(10_000)? {
        *drawn.entry(split.samples[i].answer.as_deref().unwrap()).or_default() += 1;
    }
    println!("answer      in data  drawn of 10000");
    for (k, n) in sizes.iter().enumerate() {
        let name = format!("finding {k}");
        println!("{name:<10} {n:>8}  {:>14}", drawn.get(name.as_str()).copied().unwrap_or(0));
    }
    Ok(())
}
