//! Question-driven attention: each glimpse is a softmax over the 7x7 grid.

use ndarray::{s, Array2, Array3};

use sfn_core::encoders::ImageFeatureMap;
use sfn_core::fusion::GlimpseAttention;
use sfn_core::rng;

fn main() -> sfn_core::Result<()> {
    let mut r = rng::seeded(3);
    let (channels, qdim, glimpses) = (64, 128, 2);
    let attention = GlimpseAttention::<f64>::new(channels, qdim, glimpses, &mut r);
    let features = Array3::from_shape_fn((1, 49, channels), |_| rng::uniform(&mut r, 0.0, 2.0));
    let question = Array2::from_shape_fn((1, qdim), |_| rng::uniform(&mut r, -1.0, 1.0));
    let map = ImageFeatureMap::new(features, (7, 7))?;
    let (fused, cache) = attention.forward(question.view(), &map)?;
    println!("fusion I width {}", fused.width());
    for g in 0..glimpses {
        let w = cache.weights().slice(s![0, .., g]);
        println!("glimpse {g} (sums to {:.6}):", w.sum());
        for row in 0..7usize {
            let cells: Vec<String> = (0..7).map(|col| format!("{:.3}", w[row * 7 + col])).collect();
            println!("  {}", cells.join(" "));
        }
    }
    Ok(())
}
