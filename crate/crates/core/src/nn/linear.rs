use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, Axis};

use super::ops::{dropout_mask, relu, relu_backward};
use super::{join, Module, Param, Real};
use crate::data::PAD_INDEX;
use crate::rng::Rng;

/// Fully connected layer, `y = x W + b` with `W` stored as (in, out).
#[derive(Clone, Debug)]
pub struct Linear<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
}

impl<F: Real> Linear<F> {
    /// Uniform(±1/sqrt(in)) for weight and bias.
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        Linear {
            weight: Param::uniform(&[in_dim, out_dim], bound, rng),
            bias: Param::uniform(&[out_dim], bound, rng),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: Param::zeros(&[in_dim, out_dim]),
            bias: Param::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: ArrayView2<F>) -> Array2<F> {
        let mut y = x.dot(&self.weight.mat());
        y += &self.bias.vec();
        y
    }

    /// Accumulates parameter gradients for input `x`; returns dL/dx.
    pub fn backward(&mut self, x: ArrayView2<F>, dy: ArrayView2<F>) -> Array2<F> {
        if !self.weight.frozen {
            general_mat_mul(F::one(), &x.t(), &dy, F::one(), &mut self.weight.grad_mat());
        }
        if !self.bias.frozen {
            let db = dy.sum_axis(Axis(0));
            self.bias.grad_vec().zip_mut_with(&db, |g, &d| *g += d);
        }
        dy.dot(&self.weight.mat().t())
    }
}

impl<F: Real> Module<F> for Linear<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Token embedding table; row 0 (pad) is zero and never receives gradient.
#[derive(Clone, Debug)]
pub struct Embedding<F> {
    pub weight: Param<F>,
}

impl<F: Real> Embedding<F> {
    /// Uniform(±0.05) rows with a zero pad row.
    pub fn new(vocab: usize, dim: usize, rng: &mut Rng) -> Self {
        let mut weight = Param::uniform(&[vocab, dim], 0.05, rng);
        weight.mat_mut().row_mut(PAD_INDEX).fill(F::zero());
        Embedding { weight }
    }

    pub fn from_matrix(matrix: Array2<F>) -> Self {
        let mut weight = Param::new(matrix.into_dyn());
        weight.mat_mut().row_mut(PAD_INDEX).fill(F::zero());
        Embedding { weight }
    }

    pub fn vocab_size(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, ids: &[usize]) -> Array2<F> {
        self.weight.mat().select(Axis(0), ids)
    }

    pub fn backward(&mut self, ids: &[usize], dy: ArrayView2<F>) {
        if self.weight.frozen {
            return;
        }
        let mut g = self.weight.grad_mat();
        for (&id, row) in ids.iter().zip(dy.rows()) {
            if id != PAD_INDEX {
                g.row_mut(id).zip_mut_with(&row, |a, &b| *a += b);
            }
        }
    }
}

impl<F: Real> Module<F> for Embedding<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        f(join(prefix, "weight"), &self.weight);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        f(join(prefix, "weight"), &mut self.weight);
    }
}

/// Two fully connected layers: `fc1 → ReLU → dropout → fc2`, with an
/// optional ReLU on the output.
#[derive(Clone, Debug)]
pub struct Mlp2<F> {
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
    pub output_relu: bool,
    pub dropout: f64,
}

#[derive(Clone, Debug)]
pub struct Mlp2Cache<F> {
    x: Array2<F>,
    hidden: Array2<F>,
    mask: Option<Array2<F>>,
    dropped: Array2<F>,
    out: Array2<F>,
}

impl<F: Real> Mlp2<F> {
    pub fn new(in_dim: usize, hidden: usize, out_dim: usize, output_relu: bool, dropout: f64, rng: &mut Rng) -> Self {
        Mlp2 {
            fc1: Linear::new(in_dim, hidden, rng),
            fc2: Linear::new(hidden, out_dim, rng),
            output_relu,
            dropout,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.fc1.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.fc2.out_dim()
    }

    /// `rng` enables dropout (training mode); `None` is evaluation mode.
    pub fn forward(&self, x: ArrayView2<F>, rng: Option<&mut Rng>) -> (Array2<F>, Mlp2Cache<F>) {
        let hidden = relu(self.fc1.forward(x));
        let mask = dropout_mask(hidden.dim(), self.dropout, rng);
        let dropped = match &mask {
            Some(m) => &hidden * m,
            None => hidden.clone(),
        };
        let mut out = self.fc2.forward(dropped.view());
        if self.output_relu {
            out = relu(out);
        }
        let cache = Mlp2Cache {
            x: x.to_owned(),
            hidden,
            mask,
            dropped,
            out: out.clone(),
        };
        (out, cache)
    }

    pub fn backward(&mut self, cache: &Mlp2Cache<F>, dy: ArrayView2<F>) -> Array2<F> {
        let dy = if self.output_relu {
            relu_backward(&cache.out, dy)
        } else {
            dy.to_owned()
        };
        let mut dh = self.fc2.backward(cache.dropped.view(), dy.view());
        if let Some(m) = &cache.mask {
            dh *= m;
        }
        let dh = relu_backward(&cache.hidden, dh.view());
        self.fc1.backward(cache.x.view(), dh.view())
    }
}

impl<F: Real> Module<F> for Mlp2<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.fc1.visit_params_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_params_mut(&join(prefix, "fc2"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;

    #[test]
    fn linear_hand_values() {
        let mut l = Linear::<f64>::zeros(2, 2);
        l.weight.mat_mut().assign(&array![[1.0, 2.0], [3.0, 4.0]]);
        l.bias.value = array![0.5, -0.5].into_dyn();
        let y = l.forward(array![[1.0, 0.5]].view());
        assert_eq!(y, array![[3.0, 3.5]]);
        let dx = l.backward(array![[1.0, 0.5]].view(), array![[1.0, 1.0]].view());
        assert_eq!(dx, array![[3.0, 7.0]]);
        assert_eq!(l.weight.grad.clone().into_dimensionality().unwrap(), array![[1.0, 1.0], [0.5, 0.5]]);
    }

    #[test]
    fn frozen_linear_gets_no_gradient() {
        let mut l = Linear::<f64>::new(3, 2, &mut rng::seeded(0));
        l.weight.frozen = true;
        l.bias.frozen = true;
        l.backward(array![[1.0, 2.0, 3.0]].view(), array![[1.0, -1.0]].view());
        assert!(l.weight.grad.iter().all(|&g| g == 0.0));
        assert!(l.bias.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn embedding_pad_row_stays_zero() {
        let mut e = Embedding::<f64>::new(4, 3, &mut rng::seeded(0));
        assert!(e.weight.mat().row(0).iter().all(|&v| v == 0.0));
        e.backward(&[0, 2, 0], Array2::ones((3, 3)).view());
        assert!(e.weight.mat().row(0).iter().all(|&v| v == 0.0));
        assert!(e.weight.grad_mat().row(0).iter().all(|&v| v == 0.0));
        assert!(e.weight.grad_mat().row(2).iter().all(|&v| v == 1.0));
    }
}
