//! Single-layer LSTM over padded batches.
//!
//! Gate columns are laid out `[input | forget | cell | output]`. Rows whose
//! sequence has ended carry their state through unchanged, so the returned
//! hidden state is the one after each sequence's last real token.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis};

use super::ops::sigmoid;
use super::{join, Module, Param, Real};
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct Lstm<F> {
    /// (input, 4·hidden)
    pub w_ih: Param<F>,
    /// (hidden, 4·hidden)
    pub w_hh: Param<F>,
    /// (4·hidden)
    pub bias: Param<F>,
}

#[derive(Clone, Debug)]
struct Step<F> {
    x: Array2<F>,
    h_prev: Array2<F>,
    c_prev: Array2<F>,
    /// Activated gates (B, 4H).
    gates: Array2<F>,
    tanh_c: Array2<F>,
    active: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct LstmCache<F> {
    steps: Vec<Step<F>>,
}

impl<F: Real> Lstm<F> {
    /// Uniform(±1/sqrt(hidden)) for all parameters.
    pub fn new(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Lstm {
            w_ih: Param::uniform(&[input, 4 * hidden], bound, rng),
            w_hh: Param::uniform(&[hidden, 4 * hidden], bound, rng),
            bias: Param::uniform(&[4 * hidden], bound, rng),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Lstm {
            w_ih: Param::zeros(&[input, 4 * hidden]),
            w_hh: Param::zeros(&[hidden, 4 * hidden]),
            bias: Param::zeros(&[4 * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.shape()[0]
    }

    pub fn input(&self) -> usize {
        self.w_ih.shape()[0]
    }

    /// `inputs[t]` is the (B, input) slice for step `t`; `lengths[b]` is the
    /// number of real steps for row `b`. Returns the final hidden state.
    pub fn forward(&self, inputs: &[Array2<F>], lengths: &[usize]) -> (Array2<F>, LstmCache<F>) {
        let hsz = self.hidden();
        let batch = lengths.len();
        let mut h = Array2::zeros((batch, hsz));
        let mut c = Array2::zeros((batch, hsz));
        let mut steps = Vec::with_capacity(inputs.len());
        for (t, x) in inputs.iter().enumerate() {
            let mut z = x.dot(&self.w_ih.mat());
            general_mat_mul(F::one(), &h, &self.w_hh.mat(), F::one(), &mut z);
            z += &self.bias.vec();
            let active: Vec<bool> = lengths.iter().map(|&l| t < l).collect();
            let mut gates = z;
            let mut tanh_c = Array2::zeros((batch, hsz));
            let mut h_new = h.clone();
            let mut c_new = c.clone();
            for b in 0..batch {
                let mut g = gates.row_mut(b);
                for j in 0..hsz {
                    g[j] = sigmoid(g[j]);
                    g[hsz + j] = sigmoid(g[hsz + j]);
                    g[2 * hsz + j] = g[2 * hsz + j].tanh();
                    g[3 * hsz + j] = sigmoid(g[3 * hsz + j]);
                }
                if !active[b] {
                    continue;
                }
                for j in 0..hsz {
                    let cn = g[hsz + j] * c[[b, j]] + g[j] * g[2 * hsz + j];
                    let tc = cn.tanh();
                    c_new[[b, j]] = cn;
                    tanh_c[[b, j]] = tc;
                    h_new[[b, j]] = g[3 * hsz + j] * tc;
                }
            }
            steps.push(Step {
                x: x.clone(),
                h_prev: h,
                c_prev: c,
                gates,
                tanh_c,
                active,
            });
            h = h_new;
            c = c_new;
        }
        (h, LstmCache { steps })
    }

    /// Backpropagation through time from the final hidden state; returns the
    /// gradient for each step's input.
    pub fn backward(&mut self, cache: &LstmCache<F>, dh_final: ArrayView2<F>) -> Vec<Array2<F>> {
        let hsz = self.hidden();
        let mut dh = dh_final.to_owned();
        let mut dc = Array2::<F>::zeros(dh.raw_dim());
        let mut dxs = vec![Array2::zeros((0, 0)); cache.steps.len()];
        for (t, step) in cache.steps.iter().enumerate().rev() {
            let batch = step.active.len();
            let mut dz = Array2::<F>::zeros((batch, 4 * hsz));
            for b in 0..batch {
                if !step.active[b] {
                    continue;
                }
                let g = step.gates.row(b);
                for j in 0..hsz {
                    let (i, f, gg, o) = (g[j], g[hsz + j], g[2 * hsz + j], g[3 * hsz + j]);
                    let tc = step.tanh_c[[b, j]];
                    let dhv = dh[[b, j]];
                    let dcn = dc[[b, j]] + dhv * o * (F::one() - tc * tc);
                    dz[[b, j]] = dcn * gg * i * (F::one() - i);
                    dz[[b, hsz + j]] = dcn * step.c_prev[[b, j]] * f * (F::one() - f);
                    dz[[b, 2 * hsz + j]] = dcn * i * (F::one() - gg * gg);
                    dz[[b, 3 * hsz + j]] = dhv * tc * o * (F::one() - o);
                    dc[[b, j]] = dcn * f;
                }
            }
            if !self.w_ih.frozen {
                general_mat_mul(F::one(), &step.x.t(), &dz, F::one(), &mut self.w_ih.grad_mat());
            }
            if !self.w_hh.frozen {
                general_mat_mul(F::one(), &step.h_prev.t(), &dz, F::one(), &mut self.w_hh.grad_mat());
            }
            if !self.bias.frozen {
                let db = dz.sum_axis(Axis(0));
                self.bias.grad_vec().zip_mut_with(&db, |a, &d| *a += d);
            }
            dxs[t] = dz.dot(&self.w_ih.mat().t());
            let dh_prev = dz.dot(&self.w_hh.mat().t());
            for b in 0..batch {
                if step.active[b] {
                    dh.row_mut(b).assign(&dh_prev.slice(s![b, ..]));
                }
            }
        }
        dxs
    }
}

impl<F: Real> Module<F> for Lstm<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        f(join(prefix, "w_ih"), &self.w_ih);
        f(join(prefix, "w_hh"), &self.w_hh);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        f(join(prefix, "w_ih"), &mut self.w_ih);
        f(join(prefix, "w_hh"), &mut self.w_hh);
        f(join(prefix, "bias"), &mut self.bias);
    }
}
