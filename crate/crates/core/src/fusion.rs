//! Fusion I (question-driven attention over image features), Fusion II
//! (append the size encoding) and Fusion III (append the supporting facts).
//!
//! Layout is fixed: `[glimpse_1 .. glimpse_G ; question ; size ; fact_C1 ;
//! fact_C2 ; fact_C3]`. Checkpoints depend on it.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};

use crate::encoders::ImageFeatureMap;
use crate::nn::ops::concat_cols;
use crate::nn::{join, Linear, Module, Param, Real};
use crate::reasoning::SupportingFacts;
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionStage {
    I,
    II,
    III,
}

/// A batch of fused vectors (one row per sample) tagged with its stage.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedRepresentation<F> {
    pub data: Array2<F>,
    pub stage: FusionStage,
}

impl<F: Real> FusedRepresentation<F> {
    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn batch_size(&self) -> usize {
        self.data.nrows()
    }
}

/// Scores every grid position from `[feature ; question]` with a single 1×1
/// convolution into `G` glimpse logit maps, softmaxes each map over the
/// positions and returns the attention-weighted feature sums followed by the
/// question encoding.
#[derive(Clone, Debug)]
pub struct GlimpseAttention<F> {
    /// (C + D_q, G); rows `0..C` score the feature, the rest the question.
    pub scorer: Linear<F>,
    channels: usize,
}

#[derive(Clone, Debug)]
pub struct AttentionCache<F> {
    features: Array3<F>,
    question: Array2<F>,
    /// (B, P, G)
    weights: Array3<F>,
}

impl<F: Real> AttentionCache<F> {
    /// Attention weights, (batch, positions, glimpses).
    pub fn weights(&self) -> &Array3<F> {
        &self.weights
    }
}

impl<F: Real> GlimpseAttention<F> {
    pub fn new(channels: usize, question_dim: usize, glimpses: usize, rng: &mut Rng) -> Self {
        GlimpseAttention {
            scorer: Linear::new(channels + question_dim, glimpses, rng),
            channels,
        }
    }

    pub fn glimpses(&self) -> usize {
        self.scorer.out_dim()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn question_dim(&self) -> usize {
        self.scorer.in_dim() - self.channels
    }

    pub fn output_dim(&self) -> usize {
        self.glimpses() * self.channels + self.question_dim()
    }

    /// Raw glimpse logits, (B, P, G).
    pub fn logits(&self, question: ArrayView2<F>, features: &ImageFeatureMap<F>) -> Result<Array3<F>> {
        let (b, p, c) = features.data.dim();
        if p == 0 {
            return Err(Error::Shape("attention over an empty spatial grid".into()));
        }
        if c != self.channels || question.ncols() != self.question_dim() || question.nrows() != b {
            return Err(Error::Shape(format!(
                "attention expects {} channels and {}-d questions for {b} rows, got {c} and {:?}",
                self.channels,
                self.question_dim(),
                question.dim()
            )));
        }
        let w = self.scorer.weight.mat();
        let (wf, wq) = (w.slice(s![..c, ..]), w.slice(s![c.., ..]));
        let flat = features
            .data
            .view()
            .into_shape_with_order((b * p, c))
            .expect("contiguous features");
        let mut logits = flat
            .dot(&wf)
            .into_shape_with_order((b, p, self.glimpses()))
            .expect("logit shape");
        let mut per_row = question.dot(&wq);
        per_row += &self.scorer.bias.vec();
        for (mut lb, qb) in logits.outer_iter_mut().zip(per_row.rows()) {
            lb += &qb;
        }
        Ok(logits)
    }

    pub fn forward(
        &self,
        question: ArrayView2<F>,
        features: &ImageFeatureMap<F>,
    ) -> Result<(FusedRepresentation<F>, AttentionCache<F>)> {
        let logits = self.logits(question, features)?;
        let (b, _, c) = features.data.dim();
        let g = self.glimpses();
        let mut weights = logits;
        for mut lb in weights.outer_iter_mut() {
            for mut col in lb.columns_mut() {
                let max = col.iter().copied().fold(F::neg_infinity(), F::max);
                col.mapv_inplace(|v| (v - max).exp());
                let sum = col.sum();
                col.mapv_inplace(|v| v / sum);
            }
        }
        let qd = question.ncols();
        let mut out = Array2::zeros((b, g * c + qd));
        for i in 0..b {
            // (G, P) x (P, C)
            let glimpse = weights.index_axis(Axis(0), i).t().dot(&features.data.index_axis(Axis(0), i));
            let flat = glimpse.into_shape_with_order(g * c).expect("glimpse flat");
            out.slice_mut(s![i, ..g * c]).assign(&flat);
        }
        out.slice_mut(s![.., g * c..]).assign(&question);
        Ok((
            FusedRepresentation {
                data: out,
                stage: FusionStage::I,
            },
            AttentionCache {
                features: features.data.clone(),
                question: question.to_owned(),
                weights,
            },
        ))
    }

    /// Returns (dL/dquestion, dL/dfeatures).
    pub fn backward(&mut self, cache: &AttentionCache<F>, dout: ArrayView2<F>) -> (Array2<F>, Array3<F>) {
        let (b, p, c) = cache.features.dim();
        let g = self.glimpses();
        let mut dq = dout.slice(s![.., g * c..]).to_owned();
        let mut dfeat = Array3::zeros((b, p, c));
        let mut dlogits = Array3::zeros((b, p, g));
        for i in 0..b {
            let fb = cache.features.index_axis(Axis(0), i);
            let ab = cache.weights.index_axis(Axis(0), i);
            let dglimpse = dout
                .slice(s![i, ..g * c])
                .to_owned()
                .into_shape_with_order((g, c))
                .expect("glimpse grad");
            // (P, C) x (C, G)
            let dalpha = fb.dot(&dglimpse.t());
            dfeat.index_axis_mut(Axis(0), i).assign(&ab.dot(&dglimpse));
            let mut dl = dlogits.index_axis_mut(Axis(0), i);
            for k in 0..g {
                let dot: F = (0..p).map(|j| ab[[j, k]] * dalpha[[j, k]]).sum();
                for j in 0..p {
                    dl[[j, k]] = ab[[j, k]] * (dalpha[[j, k]] - dot);
                }
            }
        }
        let flat_feat = cache.features.view().into_shape_with_order((b * p, c)).expect("flat");
        let flat_dl = dlogits.view().into_shape_with_order((b * p, g)).expect("flat");
        let dl_rows = dlogits.sum_axis(Axis(1)); // (B, G)
        let w = self.scorer.weight.mat().to_owned();
        let (wf, wq) = (w.slice(s![..c, ..]), w.slice(s![c.., ..]));
        if !self.scorer.weight.frozen {
            let mut gw = self.scorer.weight.grad_mat();
            let dwf = flat_feat.t().dot(&flat_dl);
            let dwq = cache.question.t().dot(&dl_rows);
            gw.slice_mut(s![..c, ..]).zip_mut_with(&dwf, |a, &v| *a += v);
            gw.slice_mut(s![c.., ..]).zip_mut_with(&dwq, |a, &v| *a += v);
        }
        if !self.scorer.bias.frozen {
            let db = dl_rows.sum_axis(Axis(0));
            self.scorer.bias.grad_vec().zip_mut_with(&db, |a, &v| *a += v);
        }
        let df_scorer = flat_dl.dot(&wf.t()).into_shape_with_order((b, p, c)).expect("shape");
        dfeat += &df_scorer;
        dq += &dl_rows.dot(&wq.t());
        (dq, dfeat)
    }
}

impl<F: Real> Module<F> for GlimpseAttention<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        self.scorer.visit_params(&join(prefix, "scorer"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.scorer.visit_params_mut(&join(prefix, "scorer"), f);
    }
}

/// `[a ; size]`.
pub fn fusion_ii_concat<F: Real>(a: &FusedRepresentation<F>, size: ArrayView2<F>) -> Result<FusedRepresentation<F>> {
    if a.stage != FusionStage::I {
        return Err(Error::Shape(format!("Fusion II expects a stage I input, got {:?}", a.stage)));
    }
    if size.nrows() != a.batch_size() {
        return Err(Error::Shape("size encoding rows differ from the fused batch".into()));
    }
    Ok(FusedRepresentation {
        data: concat_cols(&[a.data.view(), size]),
        stage: FusionStage::II,
    })
}

/// `[b ; fact_C1 ; fact_C2 ; fact_C3]`.
pub fn fusion_iii_concat<F: Real>(
    b: &FusedRepresentation<F>,
    facts: &SupportingFacts<F>,
) -> Result<FusedRepresentation<F>> {
    if b.stage != FusionStage::II {
        return Err(Error::Shape(format!("Fusion III expects a stage II input, got {:?}", b.stage)));
    }
    for (name, fact) in facts.named() {
        if fact.ncols() == 0 || fact.nrows() != b.batch_size() {
            return Err(Error::Shape(format!("supporting fact `{name}` is missing or has the wrong batch size")));
        }
    }
    Ok(FusedRepresentation {
        data: concat_cols(&[b.data.view(), facts.modality.view(), facts.plane.view(), facts.organ.view()]),
        stage: FusionStage::III,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;

    fn attention_with_zero_scorer(c: usize, q: usize) -> GlimpseAttention<f64> {
        GlimpseAttention {
            scorer: Linear::zeros(c + q, 2),
            channels: c,
        }
    }

    #[test]
    fn identical_features_give_that_feature() {
        let att = GlimpseAttention::<f64>::new(3, 2, 2, &mut rng::seeded(4));
        let v = array![0.3, -1.0, 2.0];
        let feats = ImageFeatureMap::new(
            Array3::from_shape_fn((1, 4, 3), |(_, _, k)| v[k]),
            (2, 2),
        )
        .unwrap();
        let (out, _) = att.forward(array![[0.5, 0.1]].view(), &feats).unwrap();
        for g in 0..2 {
            for k in 0..3 {
                assert!((out.data[[0, g * 3 + k]] - v[k]).abs() < 1e-12);
            }
        }
        assert_eq!(out.data.slice(s![0, 6..]), array![0.5, 0.1]);
    }

    #[test]
    fn uniform_and_hand_softmax_weights() {
        let mut att = attention_with_zero_scorer(1, 1);
        let feats = ImageFeatureMap::new(array![[[2.0], [6.0]]], (1, 2)).unwrap();
        let (out, cache) = att.forward(array![[0.0]].view(), &feats).unwrap();
        assert_eq!(out.data[[0, 0]], 4.0);
        assert_eq!(cache.weights()[[0, 0, 0]], 0.5);

        // feature weight w so that logits = (w·f1, w·f2) = (ln 3, 0) with f2 = 0
        att.scorer.weight.mat_mut()[[0, 0]] = 3f64.ln();
        let feats = ImageFeatureMap::new(array![[[1.0], [0.0]]], (1, 2)).unwrap();
        let (_, cache) = att.forward(array![[0.0]].view(), &feats).unwrap();
        assert!((cache.weights()[[0, 0, 0]] - 0.75).abs() < 1e-12);
        assert!((cache.weights()[[0, 1, 0]] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn empty_grid_is_an_error() {
        assert!(ImageFeatureMap::<f64>::new(Array3::zeros((1, 0, 3)), (0, 0)).is_err());
        let att = attention_with_zero_scorer(3, 1);
        let feats = ImageFeatureMap { data: Array3::<f64>::zeros((1, 0, 3)), grid: (0, 0) };
        assert!(att.forward(array![[0.0]].view(), &feats).is_err());
    }

    #[test]
    fn concat_stages_and_layout() {
        let a = FusedRepresentation {
            data: Array2::<f64>::ones((2, 384)),
            stage: FusionStage::I,
        };
        let s = Array2::zeros((2, 32));
        let b = fusion_ii_concat(&a, s.view()).unwrap();
        assert_eq!(b.width(), 416);
        assert!(b.data.slice(s![.., 384..]).iter().all(|&v| v == 0.0));
        assert!(fusion_ii_concat(&b, s.view()).is_err());

        let facts = SupportingFacts {
            modality: Array2::from_elem((2, 64), 1.0),
            plane: Array2::from_elem((2, 64), 2.0),
            organ: Array2::from_elem((2, 64), 3.0),
        };
        let c = fusion_iii_concat(&b, &facts).unwrap();
        assert_eq!(c.width(), 608);
        assert_eq!(c.data[[0, 416]], 1.0);
        assert_eq!(c.data[[0, 480]], 2.0);
        assert_eq!(c.data[[0, 544]], 3.0);
        assert!(fusion_iii_concat(&a, &facts).is_err());

        let missing = SupportingFacts {
            organ: Array2::zeros((2, 0)),
            ..facts
        };
        assert!(fusion_iii_concat(&b, &missing).is_err());
    }
}
