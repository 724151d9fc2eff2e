//! Central finite differences against every backward pass, in f64. Each
//! `pub fn` checks one block and panics on a mismatch.

use ndarray::{Array2, Array3, Array4, ArrayD, IxDyn};
use rand::RngCore;

use sfn_core::data::{CategoryLabel, Vocabulary};
use sfn_core::encoders::{ImageEncoder, QuestionEncoder, SizeEncoder, TokenBatch, ImageFeatureMap};
use sfn_core::fusion::{FusedRepresentation, FusionStage, GlimpseAttention};
use sfn_core::model::{multitask_loss, Batch, BatchImages, HeadKind, Model, ModelSpec, Target};
use sfn_core::nn::{named_params, zero_grads, Embedding, Linear, Mlp2, Module, Param};
use sfn_core::reasoning::{Categorizer, If1cHead, SfnHeads};
use sfn_core::rng::{self, Rng};

const STEP: f64 = 1e-3;
/// Blocks with many ReLU and max-pool switches use a finer stencil.
const FINE_STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
const INSTANCES: u64 = 10;
const ENTRIES_PER_PARAM: usize = 6;

fn randn(rng: &mut Rng, shape: &[usize], scale: f64) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| scale * (2.0 * rng::unit_f64(rng) - 1.0))
}

fn rand2(rng: &mut Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
    randn(rng, &[r, c], scale).into_dimensionality().unwrap()
}

struct Tally {
    step: f64,
    checked: usize,
    kinks: usize,
    worst: f64,
}

impl Default for Tally {
    fn default() -> Self {
        Tally::with_step(STEP)
    }
}

impl Tally {
    fn with_step(step: f64) -> Self {
        Tally {
            step,
            checked: 0,
            kinks: 0,
            worst: 0.0,
        }
    }

    /// Compares one analytic derivative with its finite-difference estimate.
    /// `f` evaluates the loss at `x + delta`.
    fn compare(&mut self, what: &str, analytic: f64, mut f: impl FnMut(f64) -> f64) {
        let central = |f: &mut dyn FnMut(f64) -> f64, h: f64| (f(h) - f(-h)) / (2.0 * h);
        let numeric = central(&mut f, self.step);
        let fine = central(&mut f, self.step / 10.0);
        // a ReLU or max-pool switch inside the stencil makes the estimate
        // depend on the step; smooth points agree to O(h^2)
        let spread = (numeric - fine).abs() / numeric.abs().max(fine.abs()).max(1e-7);
        if spread > TOL / 4.0 {
            self.kinks += 1;
            return;
        }
        let scale = analytic.abs().max(numeric.abs());
        let err = if scale < 1e-7 { 0.0 } else { (analytic - numeric).abs() / scale };
        assert!(
            err < TOL,
            "{what}: analytic {analytic:e} vs numeric {numeric:e} (relative error {err:e})"
        );
        self.checked += 1;
        self.worst = self.worst.max(err);
    }

    fn finish(&self, block: &str) {
        assert!(self.checked > 0, "{block}: nothing checked");
        assert!(
            self.kinks * 10 <= self.checked + self.kinks,
            "{block}: {} of {} entries skipped at kinks",
            self.kinks,
            self.checked + self.kinks
        );
        println!(
            "{block}: {} entries, {} kinks skipped, worst relative error {:.2e}",
            self.checked, self.kinks, self.worst
        );
    }
}

fn nudge<M: Module<f64>>(m: &mut M, name: &str, idx: usize, delta: f64) {
    m.visit_params_mut("", &mut |n, p: &mut Param<f64>| {
        if n == name {
            *p.value.iter_mut().nth(idx).unwrap() += delta;
        }
    });
}

/// Checks every trainable parameter of `model`. `backward` must zero the
/// gradients and fill them for `loss`.
fn check_params<M: Module<f64> + Clone>(
    tally: &mut Tally,
    model: &mut M,
    rng: &mut Rng,
    loss: impl Fn(&M) -> f64,
    backward: impl FnOnce(&mut M),
) {
    backward(model);
    for (name, p) in named_params(model, "") {
        if p.frozen {
            continue;
        }
        for _ in 0..ENTRIES_PER_PARAM.min(p.len()) {
            let idx = rng::bounded(rng, p.len() as u64) as usize;
            let analytic = *p.grad.iter().nth(idx).unwrap();
            let mut probe = model.clone();
            tally.compare(&format!("{name}[{idx}]"), analytic, |d| {
                nudge(&mut probe, &name, idx, d);
                let v = loss(&probe);
                nudge(&mut probe, &name, idx, -d);
                v
            });
        }
    }
}

/// Checks the gradient with respect to an input array.
fn check_input(tally: &mut Tally, what: &str, x: &ArrayD<f64>, grad: &ArrayD<f64>, rng: &mut Rng, loss: impl Fn(&ArrayD<f64>) -> f64) {
    for _ in 0..ENTRIES_PER_PARAM {
        let idx = rng::bounded(rng, x.len() as u64) as usize;
        let analytic = grad.iter().nth(idx).copied().unwrap();
        tally.compare(&format!("{what}[{idx}]"), analytic, |d| {
            let mut y = x.clone();
            *y.iter_mut().nth(idx).unwrap() += d;
            loss(&y)
        });
    }
}

fn tokens(rng: &mut Rng, batch: usize, vocab: usize) -> TokenBatch {
    let seqs: Vec<Vec<usize>> = (0..batch)
        .map(|_| {
            let len = 1 + rng::bounded(rng, 5) as usize;
            (0..len).map(|_| 1 + rng::bounded(rng, vocab as u64 - 1) as usize).collect()
        })
        .collect();
    TokenBatch::new(&seqs)
}

pub fn linear_gradients() {
    let mut tally = Tally::default();
    for seed in 0..INSTANCES {
        let mut rng = rng::seeded(seed);
        let mut lin = Linear::<f64>::new(4, 3, &mut rng);
        let x = rand2(&mut rng, 5, 4, 1.0);
        let r = rand2(&mut rng, 5, 3, 1.0);
        let loss = |l: &Linear<f64>, x: &Array2<f64>| (l.forward(x.view()) * &r).sum();
        let mut dx = Array2::zeros((0, 0));
        check_params(&mut tally, &mut lin, &mut rng, |l| loss(l, &x), |l| {
            zero_grads(l);
            dx = l.backward(x.view(), r.view());
        });
        let probe = lin.clone();
        check_input(&mut tally, "x", &x.clone().into_dyn(), &dx.into_dyn(), &mut rng, |y| {
            loss(&probe, &y.clone().into_dimensionality().unwrap())
        });
    }
    tally.finish("linear");
}

pub fn embedding_gradients() {
    let mut tally = Tally::default();
    for seed in 0..INSTANCES {
        let mut rng = rng::seeded(seed);
        let mut emb = Embedding::<f64>::new(7, 3, &mut rng);
        let ids = [1, 4, 4, 6, 2];
        let r = rand2(&mut rng, ids.len(), 3, 1.0);
        check_params(&mut tally, &mut emb, &mut rng, |e| (e.forward(&ids) * &r).sum(), |e| {
            zero_grads(e);
            e.backward(&ids, r.view());
        });
    }
    tally.finish("embedding");
}

pub fn mlp2_gradients_with_dropout_mask() {
    let mut tally = Tally::default();
    for seed in 0..INSTANCES {
        let mut rng = rng::seeded(seed);
        let output_relu = seed % 2 == 0;
        let mut mlp = Mlp2::<f64>::new(5, 6, 4, output_relu, 0.3, &mut rng);
        let x = rand2(&mut rng, 3, 5, 1.0);
        let r = rand2(&mut rng, 3, 4, 1.0);
        let mask_rng = rng::seeded(100 + seed);
        let loss = |m: &Mlp2<f64>, x: &Array2<f64>| (m.forward(x.view(), Some(&mut mask_rng.clone())).0 * &r).sum();
        let mut dx = Array2::zeros((0, 0));
        check_params(&mut tally, &mut mlp, &mut rng, |m| loss(m, &x), |m| {
            zero_grads(m);
            let (_, cache) = m.forward(x.view(), Some(&mut mask_rng.clone()));
            dx = m.backward(&cache, r.view());
        });
        let probe = mlp.clone();
        check_input(&mut tally, "x", &x.clone().into_dyn(), &dx.into_dyn(), &mut rng, |y| {
            loss(&probe, &y.clone().into_dimensionality().unwrap())
        });
    }
    tally.finish("mlp2");
}

pub fn question_encoder_gradients() {
    let mut tally = Tally::default();
    for seed in 0..INSTANCES {
        let mut rng = rng::seeded(seed);
        let mut enc = QuestionEncoder::<f64>::new(9, 4, 5, &mut rng);
        let t = tokens(&mut rng, 3, 9);
        let r = rand2(&mut rng, 3, 5, 1.0);
        check_params(&mut tally, &mut enc, &mut rng, |e| (e.forward(&t).0 * &r).sum(), |e| {
            zero_grads(e);
            let (_, cache) = e.forward(&t);
            e.backward(&cache, r.view());
        });
    }
    tally.finish("question encoder");
}

pub fn size_encoder_gradients() {
    let mut tally = Tally::default();
    for seed in 0..INSTANCES {
        let mut rng = rng::seeded(seed);
        let mut enc = SizeEncoder::<f64>::new(4, &mut rng);
        let sizes: Vec<(u32, u32)> = (0..3)
            .map(|_| (64 + rng::bounded(&mut rng, 1500) as u32, 64 + rng::bounded(&mut rng, 1500) as u32))
            .collect();
        let r = rand2(&mut rng, 3, 4, 1.0);
        check_params(&mut tally, &mut enc, &mut rng, |e| (e.forward(&sizes).unwrap().0 * &r).sum(), |e| {
            zero_grads(e);
            let (_, cache) = e.forward(&sizes).unwrap();
            e.backward(&cache, r.view());
        });
    }
    tally.finish("size encoder");
}

pub fn image_encoder_gradients() {
    let mut tally = Tally::with_step(FINE_STEP);
    for seed in 0..INSTANCES {
        let mut rng = rng::seeded(seed);
        let mut enc = ImageEncoder::<f64>::small(&mut rng);
        let x: Array4<f64> = randn(&mut rng, &[2, 16, 16, 3], 1.0).into_dimensionality().unwrap();
        let (fm, _) = enc.forward(x.view());
        let r: Array3<f64> = randn(&mut rng, &[2, fm.positions(), fm.channels()], 1.0)
            .into_dimensionality()
            .unwrap();
        check_params(&mut tally, &mut enc, &mut rng, |e| (e.forward(x.view()).0.data * &r).sum(), |e| {
            zero_grads(e);
            let (_, cache) = e.forward(x.view());
            e.backward(&cache, r.view());
        });
    }
    tally.finish("image encoder");
}

pub fn attention_gradients() {
    let mut tally = Tally::default();
    for seed in 0..INSTANCES {
        let mut rng = rng::seeded(seed);
        let (b, p, c, dq, g) = (3, 4, 5, 6, 2);
        let mut att = GlimpseAttention::<f64>::new(c, dq, g, &mut rng);
        let q = rand2(&mut rng, b, dq, 1.0);
        let feat: Array3<f64> = randn(&mut rng, &[b, p, c], 1.0).into_dimensionality().unwrap();
        let r = rand2(&mut rng, b, att.output_dim(), 1.0);
        let loss = |a: &GlimpseAttention<f64>, q: &Array2<f64>, f: &Array3<f64>| {
            let fm = ImageFeatureMap::new(f.clone(), (2, 2)).unwrap();
            (a.forward(q.view(), &fm).unwrap().0.data * &r).sum()
        };
        let (mut dq_a, mut df_a) = (Array2::zeros((0, 0)), Array3::zeros((0, 0, 0)));
        check_params(&mut tally, &mut att, &mut rng, |a| loss(a, &q, &feat), |a| {
            zero_grads(a);
            let fm = ImageFeatureMap::new(feat.clone(), (2, 2)).unwrap();
            let (_, cache) = a.forward(q.view(), &fm).unwrap();
            (dq_a, df_a) = a.backward(&cache, r.view());
        });
        let probe = att.clone();
        check_input(&mut tally, "q", &q.clone().into_dyn(), &dq_a.into_dyn(), &mut rng, |y| {
            loss(&probe, &y.clone().into_dimensionality().unwrap(), &feat)
        });
        check_input(&mut tally, "features", &feat.clone().into_dyn(), &df_a.into_dyn(), &mut rng, |y| {
            loss(&probe, &q, &y.clone().into_dimensionality().unwrap())
        });
    }
    tally.finish("attention");
}

pub fn categorizer_gradients() {
    let mut tally = Tally::default();
    for seed in 0..INSTANCES {
        let mut rng = rng::seeded(seed);
        let enc = QuestionEncoder::<f64>::new(9, 4, 5, &mut rng);
        let mut cat = Categorizer::new(enc, 6, 0.0, &mut rng);
        let t = tokens(&mut rng, 3, 9);
        let r = rand2(&mut rng, 3, 5, 1.0);
        check_params(&mut tally, &mut cat, &mut rng, |c| (c.forward(&t, None).0 * &r).sum(), |c| {
            zero_grads(c);
            let (_, cache) = c.forward(&t, None);
            c.backward(&cache, r.view());
        });
    }
    tally.finish("categorizer");
}

fn stage_ii(x: &Array2<f64>) -> FusedRepresentation<f64> {
    FusedRepresentation {
        data: x.clone(),
        stage: FusionStage::II,
    }
}

pub fn if1c_head_gradients() {
    let mut tally = Tally::default();
    for seed in 0..INSTANCES {
        let mut rng = rng::seeded(seed);
        let mut head = If1cHead::<f64>::new(7, 6, 5, 0.0, &mut rng);
        let x = rand2(&mut rng, 4, 7, 1.0);
        let r = rand2(&mut rng, 4, 5, 1.0);
        let loss = |h: &If1cHead<f64>, x: &Array2<f64>| (h.forward(&stage_ii(x), None).unwrap().0 * &r).sum();
        let mut db = Array2::zeros((0, 0));
        check_params(&mut tally, &mut head, &mut rng, |h| loss(h, &x), |h| {
            zero_grads(h);
            let (_, cache) = h.forward(&stage_ii(&x), None).unwrap();
            db = h.backward(&cache, r.view());
        });
        let probe = head.clone();
        check_input(&mut tally, "b", &x.clone().into_dyn(), &db.into_dyn(), &mut rng, |y| {
            loss(&probe, &y.clone().into_dimensionality().unwrap())
        });
    }
    tally.finish("if1c head");
}

pub fn sfn_head_gradients_with_and_without_facts() {
    let classes = [3, 2, 4, 5, 2];
    for facts in [true, false] {
        let mut tally = Tally::default();
        for seed in 0..INSTANCES {
            let mut rng = rng::seeded(seed);
            let mut heads = SfnHeads::<f64>::new(7, 6, 3, classes, 0.0, facts, &mut rng);
            let x = rand2(&mut rng, 4, 7, 1.0);
            let r: [Array2<f64>; 5] = std::array::from_fn(|k| rand2(&mut rng, 4, classes[k], 1.0));
            let loss = |h: &SfnHeads<f64>, x: &Array2<f64>| {
                let (out, _) = h.forward(&stage_ii(x), None).unwrap();
                out.logits.iter().zip(&r).map(|(l, r)| (l * r).sum()).sum::<f64>()
            };
            let mut db = Array2::zeros((0, 0));
            check_params(&mut tally, &mut heads, &mut rng, |h| loss(h, &x), |h| {
                zero_grads(h);
                let (_, cache) = h.forward(&stage_ii(&x), None).unwrap();
                db = h.backward(&cache, &r);
            });
            let probe = heads.clone();
            check_input(&mut tally, "b", &x.clone().into_dyn(), &db.into_dyn(), &mut rng, |y| {
                loss(&probe, &y.clone().into_dimensionality().unwrap())
            });
        }
        tally.finish(if facts { "sfn heads" } else { "sfn heads without facts" });
    }
}

pub fn full_model_loss_gradients() {
    let vocab = Vocabulary::from_tokens(["what", "plane", "is", "this", "modality", "organ"]).unwrap();
    let dicts = super::tiny_dictionaries();
    for head in [HeadKind::If1c, HeadKind::Sfn] {
        let mut tally = Tally::with_step(FINE_STEP);
        for seed in 0..INSTANCES {
            let mut rng = rng::seeded(seed);
            let spec = ModelSpec::new(super::tiny_dims(), head, &vocab, &dicts);
            let mut model = Model::<f64>::new(spec, None, None, &mut rng).unwrap();
            let b = 5;
            let batch = Batch {
                tokens: tokens(&mut rng, b, vocab.len()),
                images: BatchImages::Prepared(randn(&mut rng, &[b, 16, 16, 3], 1.0).into_dimensionality().unwrap()),
                sizes: (0..b).map(|i| (200 + 50 * i as u32, 300)).collect(),
            };
            let targets: Vec<Target> = (0..b)
                .map(|i| {
                    let category = CategoryLabel::ALL[(i + seed as usize) % 5];
                    let class = (rng.next_u32() as usize) % dicts.get(category).len();
                    let answer = dicts.get(category).answer(class).unwrap();
                    Target {
                        category,
                        class,
                        global_class: dicts.global().class_of(answer).unwrap(),
                    }
                })
                .collect();
            let loss = |m: &Model<f64>| multitask_loss(&m.forward(&batch, None).unwrap().logits, &targets).0;
            check_params(&mut tally, &mut model, &mut rng, loss, |m| {
                m.train_step(&batch, &targets, None).unwrap();
            });
        }
        tally.finish(head.name());
    }
}

/// Every check, by block name.
pub const BLOCKS: &[(&str, fn())] = &[
    ("linear", linear_gradients),
    ("embedding", embedding_gradients),
    ("mlp2", mlp2_gradients_with_dropout_mask),
    ("question_encoder", question_encoder_gradients),
    ("size_encoder", size_encoder_gradients),
    ("image_encoder", image_encoder_gradients),
    ("attention", attention_gradients),
    ("categorizer", categorizer_gradients),
    ("if1c_head", if1c_head_gradients),
    ("sfn_head", sfn_head_gradients_with_and_without_facts),
    ("full_model_loss", full_model_loss_gradients),
];
