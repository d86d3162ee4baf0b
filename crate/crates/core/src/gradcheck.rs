//! Central finite-difference checks of the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::Graph;
use crate::histogram::{sch_loss, sch_loss_with_grad};
use crate::image::{Image, LabelMap};
use crate::nn::ParamStore;
use crate::semantic_embedding::SemanticEmbedding;
use crate::tensor::Tensor;

/// `|a - b| / max(|a|, |b|, 1e-2)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub entries: usize,
    pub max_relative_error: f64,
    pub threshold: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_relative_error <= self.threshold && self.entries > 0
    }
}

/// SCH loss w.r.t. every pixel of a random 8x8 enhanced image.
pub fn check_sch_loss(seed: u64) -> CheckResult {
    const STEP: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (8, 8);
    let enhanced = Image::new(h, w, (0..3 * h * w).map(|_| rng.random::<f64>()).collect()).expect("dims");
    let target = Image::new(h, w, (0..3 * h * w).map(|_| rng.random::<f64>()).collect()).expect("dims");
    // Two vertical bands so the radius-1 erosion leaves pixels in both.
    let labels = LabelMap::new(h, w, (0..h * w).map(|p| u8::from(p % w >= w / 2)).collect()).expect("dims");
    let (alpha, radius) = (400.0, 1);
    let analytic = sch_loss_with_grad(&enhanced, &target, &labels, alpha, radius).expect("valid inputs").grad;
    let eval = |img: &Image| sch_loss(img, &target, &labels, alpha, radius).expect("valid inputs");
    let mut worst: f64 = 0.0;
    for (i, &an) in analytic.iter().enumerate() {
        let mut plus = enhanced.clone();
        plus.data_mut()[i] += STEP;
        let mut minus = enhanced.clone();
        minus.data_mut()[i] -= STEP;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
        worst = worst.max(relative_error(fd, an));
    }
    CheckResult { name: "sch_loss/pixels".into(), entries: analytic.len(), max_relative_error: worst, threshold: 1e-4 }
}

/// Every parameter group of an SE module (C = 4, 4x4), loss `||F_o||^2`.
pub fn check_semantic_embedding(seed: u64) -> Vec<CheckResult> {
    const STEP: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let se = SemanticEmbedding::new(&mut store, &mut rng, "se", 4, 4);
    // Move norms off their identity init so their gradients are exercised.
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let fi = Tensor::new(vec![1, 4, 4, 4], (0..64).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("dims");
    let fs = Tensor::new(vec![1, 4, 4, 4], (0..64).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("dims");
    let eval = |store: &ParamStore, want_grad: bool| {
        let mut g = Graph::new();
        let p = store.bind(&mut g, want_grad);
        let (vi, vs) = (g.constant(fi.clone()), g.constant(fs.clone()));
        let out = se.forward(&mut g, &p, vi, vs).expect("shapes");
        let sq = g.mul(out, out);
        let loss = g.sum(sq);
        let value = g.value(loss).item();
        let grads = want_grad.then(|| p.grads(&g.backward(loss), store));
        (value, grads)
    };
    let analytic = eval(&store, true).1.expect("requested");
    let groups = ["norm_img", "norm_sem", "wq", "wk", "wv", "ffn_in", "ffn_out"];
    groups
        .iter()
        .map(|group| {
            let prefix = format!("se.{group}.");
            let mut worst: f64 = 0.0;
            let mut entries = 0;
            for id in store.ids_with_prefix(&prefix).collect::<Vec<_>>() {
                let idx = store.ids().position(|x| x == id).expect("id in store");
                for j in 0..store.get(id).len() {
                    let mut plus = store.clone();
                    plus.get_mut(id).data_mut()[j] += STEP;
                    let mut minus = store.clone();
                    minus.get_mut(id).data_mut()[j] -= STEP;
                    let fd = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * STEP);
                    worst = worst.max(relative_error(fd, analytic[idx].data()[j]));
                    entries += 1;
                }
            }
            CheckResult { name: format!("se/{group}"), entries, max_relative_error: worst, threshold: 1e-3 }
        })
        .collect()
}

/// All suites shipped with the crate.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    let mut out = vec![check_sch_loss(seed)];
    out.extend(check_semantic_embedding(seed));
    out
}
