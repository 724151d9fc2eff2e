//! Elementwise activations, softmax, cross-entropy, dropout and column
//! concatenation.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::Real;
use crate::rng::{self, Rng};

pub fn relu<F: Real>(mut x: Array2<F>) -> Array2<F> {
    x.mapv_inplace(|v| v.max(F::zero()));
    x
}

/// Gradient through ReLU given its output.
pub fn relu_backward<F: Real>(y: &Array2<F>, dy: ArrayView2<F>) -> Array2<F> {
    let mut dx = dy.to_owned();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &o| {
        if o <= F::zero() {
            *d = F::zero();
        }
    });
    dx
}

pub fn sigmoid<F: Real>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

pub fn softmax<F: Real>(logits: ArrayView1<F>) -> Array1<F> {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let mut e = logits.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e.mapv_inplace(|v| v / sum);
    e
}

pub fn softmax_rows<F: Real>(logits: ArrayView2<F>) -> Array2<F> {
    let mut out = Array2::zeros(logits.raw_dim());
    for (mut o, row) in out.rows_mut().into_iter().zip(logits.rows()) {
        o.assign(&softmax(row));
    }
    out
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax<F: Real>(v: ArrayView1<F>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Summed cross-entropy over the selected rows, scaled by `scale`, and the
/// gradient with respect to all logits (zero on unselected rows).
pub fn cross_entropy<F: Real>(
    logits: ArrayView2<F>,
    targets: &[(usize, usize)],
    scale: F,
) -> (F, Array2<F>) {
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = F::zero();
    for &(row, class) in targets {
        let p = softmax(logits.row(row));
        loss -= p[class].max(F::min_positive_value()).ln();
        let mut g = grad.row_mut(row);
        g.assign(&p);
        g[class] -= F::one();
        g.mapv_inplace(|v| v * scale);
    }
    (loss * scale, grad)
}

/// Inverted-dropout mask (entries 0 or `1/(1-p)`), or `None` when `rng` is
/// absent (evaluation) or `p == 0`.
pub fn dropout_mask<F: Real>(shape: (usize, usize), p: f64, rng: Option<&mut Rng>) -> Option<Array2<F>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = F::lit(1.0 / (1.0 - p));
    Some(Array2::from_shape_simple_fn(shape, || {
        if rng::unit_f64(rng) < p {
            F::zero()
        } else {
            keep
        }
    }))
}

pub fn concat_cols<F: Real>(parts: &[ArrayView2<F>]) -> Array2<F> {
    concatenate(Axis(1), parts).expect("equal row counts")
}

/// Splits columns into consecutive blocks of the given widths.
pub fn split_cols<F: Real>(x: ArrayView2<F>, widths: &[usize]) -> Vec<Array2<F>> {
    let mut start = 0;
    widths
        .iter()
        .map(|&w| {
            let block = x.slice(s![.., start..start + w]).to_owned();
            start += w;
            block
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_hand_values() {
        let p = softmax(array![3f64.ln(), 0.0].view());
        assert!((p[0] - 0.75).abs() < 1e-12 && (p[1] - 0.25).abs() < 1e-12);
        let p = softmax(array![1000.0f64, 1000.0].view());
        assert_eq!(p, array![0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_uniform() {
        let logits = Array2::<f64>::zeros((2, 4));
        let (loss, grad) = cross_entropy(logits.view(), &[(1, 2)], 1.0);
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert_eq!(grad.row(0).sum(), 0.0);
        assert!((grad[[1, 2]] + 0.75).abs() < 1e-12);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(array![1.0f32, 3.0, 3.0].view()), 1);
    }

    #[test]
    fn dropout_eval_is_identity() {
        assert!(dropout_mask::<f32>((2, 2), 0.5, None).is_none());
        let m = dropout_mask::<f64>((50, 50), 0.5, Some(&mut rng::seeded(1))).unwrap();
        assert!(m.iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
