//! Semantic-guided adversarial losses: worst-patch local discrimination and
//! segmentation-conditioned global discrimination, least-squares form.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, SparseMap, Var};
use crate::histogram::erode_mask;
use crate::image::{Image, LabelMap};
use crate::nn::{Bound, Conv, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_PATCH_SIZE: usize = 64;
const LEAK: f64 = 0.2;

/// Target values of the least-squares objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GanLabels {
    /// D: real -> 1, fake -> 0; G pushes fakes towards 1.
    #[default]
    Standard,
    /// Literal reading of the published formulas: real -> 0, fake -> 1,
    /// and G pushes fakes towards 0.
    Paper,
}

impl GanLabels {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "paper" => Ok(Self::Paper),
            other => Err(Error::Config(format!("gan label convention {other:?} (expected standard or paper)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Standard => "standard",
            Self::Paper => "paper",
        }
    }

    pub fn real(self) -> f64 {
        match self {
            Self::Standard => 1.0,
            Self::Paper => 0.0,
        }
    }

    pub fn fake(self) -> f64 {
        1.0 - self.real()
    }
}

/// PatchGAN-style scorer: three 4x4 stride-2 convolutions with leaky ReLU,
/// then a 3x3 projection to one channel. A sample's score is the mean of
/// its score map.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub in_channels: usize,
    convs: [Conv; 4],
}

impl Discriminator {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, in_channels: usize, width: usize) -> Self {
        let convs = [
            Conv::new(store, rng, &format!("{name}.c0"), in_channels, width, 4, 2, 1),
            Conv::new(store, rng, &format!("{name}.c1"), width, 2 * width, 4, 2, 1),
            Conv::new(store, rng, &format!("{name}.c2"), 2 * width, 4 * width, 4, 2, 1),
            Conv::with_gain(store, rng, &format!("{name}.c3"), 4 * width, 1, 3, 1, 1, 1.0),
        ];
        Self { in_channels, convs }
    }

    pub fn count(in_channels: usize, width: usize) -> usize {
        Conv::count(in_channels, width, 4) + Conv::count(width, 2 * width, 4) + Conv::count(2 * width, 4 * width, 4) + Conv::count(4 * width, 1, 3)
    }

    /// Scores of shape `[n]` for an `[n, in_channels, h, w]` input.
    pub fn scores(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let (n, c, h, w) = g.value(x).dims4();
        if c != self.in_channels {
            return Err(Error::Config(format!("discriminator expects {} input channels, got {c}", self.in_channels)));
        }
        if h < 8 || w < 8 {
            return Err(Error::Input(format!("discriminator input {h}x{w} is smaller than 8x8")));
        }
        let mut y = x;
        for (i, conv) in self.convs.iter().enumerate() {
            y = conv.forward(g, p, y);
            if i < 3 {
                y = g.leaky_relu(y, LEAK);
            }
        }
        let (_, _, mh, mw) = g.value(y).dims4();
        Ok(g.sparse(y, Rc::new(mean_map(n, mh * mw))))
    }
}

/// Per-sample mean of `n` contiguous blocks of `len` elements.
fn mean_map(n: usize, len: usize) -> SparseMap {
    SparseMap {
        in_len: n * len,
        out_shape: vec![n],
        offsets: (0..=n).map(|i| i * len).collect(),
        index: (0..n * len).collect(),
        weight: vec![1.0 / len as f64; n * len],
    }
}

/// Inclusive bounding box `(y0, x0, y1, x1)`.
pub type BoundingBox = (usize, usize, usize, usize);

/// Fixed linear map from one `[3, H, W]` image to a masked `[3, p, p]`
/// patch of one eroded segment.
#[derive(Debug, Clone)]
pub struct PatchPlan {
    pub class_id: u8,
    pub bbox: BoundingBox,
    /// Eroded segment mask at image resolution.
    pub source_mask: Vec<bool>,
    /// Patch positions that draw on at least one in-mask pixel.
    pub mask: Vec<bool>,
    pub map: Rc<SparseMap>,
}

pub fn bounding_box(mask: &[bool], width: usize) -> Option<BoundingBox> {
    let mut bb: Option<BoundingBox> = None;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (y, x) = (i / width, i % width);
        bb = Some(match bb {
            None => (y, x, y, x),
            Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
        });
    }
    bb
}

/// Linear interpolation taps along one axis, half-pixel centres.
fn taps(start: usize, extent: usize, p: usize) -> Vec<[(usize, f64); 2]> {
    (0..p)
        .map(|i| {
            let s = ((i as f64 + 0.5) * extent as f64 / p as f64 - 0.5).clamp(0.0, (extent - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(extent - 1);
            let f = s - lo as f64;
            [(start + lo, 1.0 - f), (start + hi, f)]
        })
        .collect()
}

/// One plan per class whose eroded segment is non-empty, ascending class id.
pub fn plan_fake_patches(labels: &LabelMap, patch_size: usize, erosion_radius: usize) -> Result<Vec<PatchPlan>> {
    if patch_size < 8 {
        return Err(Error::Input(format!("patch size {patch_size} is below 8")));
    }
    let (h, w) = labels.dims();
    let p = patch_size;
    let mut plans = Vec::new();
    for class_id in labels.classes() {
        let mask: Vec<bool> = labels.labels().iter().map(|&l| l == class_id).collect();
        let source_mask = erode_mask(&mask, h, w, erosion_radius);
        let Some(bbox) = bounding_box(&source_mask, w) else { continue };
        let (y0, x0, y1, x1) = bbox;
        let ty = taps(y0, y1 - y0 + 1, p);
        let tx = taps(x0, x1 - x0 + 1, p);
        let mut offsets = vec![0];
        let (mut index, mut weight) = (Vec::new(), Vec::new());
        let mut patch_mask = vec![false; p * p];
        for ch in 0..3 {
            for (i, ry) in ty.iter().enumerate() {
                for (j, rx) in tx.iter().enumerate() {
                    for &(sy, wy) in ry {
                        for &(sx, wx) in rx {
                            let src = sy * w + sx;
                            let wt = wy * wx;
                            if wt > 0.0 && source_mask[src] {
                                index.push(ch * h * w + src);
                                weight.push(wt);
                                patch_mask[i * p + j] = true;
                            }
                        }
                    }
                    offsets.push(index.len());
                }
            }
        }
        let map = SparseMap { in_len: 3 * h * w, out_shape: vec![1, 3, p, p], offsets, index, weight };
        plans.push(PatchPlan { class_id, bbox, source_mask, mask: patch_mask, map: Rc::new(map) });
    }
    if plans.is_empty() {
        return Err(Error::NoCandidates);
    }
    Ok(plans)
}

/// A discriminator input patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    /// `[3, p, p]`.
    pub pixels: Tensor,
    pub mask: Vec<bool>,
    /// `None` for real crops.
    pub class_id: Option<u8>,
}

pub fn extract_fake_patches(enhanced: &Image, labels: &LabelMap, patch_size: usize, erosion_radius: usize) -> Result<Vec<PatchSample>> {
    if enhanced.dims() != labels.dims() {
        return Err(Error::Input(format!("image {:?} vs label map {:?}", enhanced.dims(), labels.dims())));
    }
    let plans = plan_fake_patches(labels, patch_size, erosion_radius)?;
    Ok(plans
        .into_iter()
        .map(|pl| PatchSample {
            pixels: Tensor::new(vec![3, patch_size, patch_size], pl.map.apply(enhanced.data())).expect("patch shape"),
            mask: pl.mask,
            class_id: Some(pl.class_id),
        })
        .collect())
}

/// Uniform random `p x p` crop (all-ones mask).
pub fn random_real_crop(image: &Image, patch_size: usize, rng: &mut ChaCha8Rng) -> Result<PatchSample> {
    let (h, w) = image.dims();
    if h < patch_size || w < patch_size {
        return Err(Error::Input(format!("image {h}x{w} is smaller than patch {patch_size}")));
    }
    let y0 = rng.random_range(0..=h - patch_size);
    let x0 = rng.random_range(0..=w - patch_size);
    let mut data = Vec::with_capacity(3 * patch_size * patch_size);
    for ch in 0..3 {
        let plane = image.channel(ch);
        for y in y0..y0 + patch_size {
            data.extend_from_slice(&plane[y * w + x0..y * w + x0 + patch_size]);
        }
    }
    Ok(PatchSample {
        pixels: Tensor::new(vec![3, patch_size, patch_size], data).expect("crop shape"),
        mask: vec![true; patch_size * patch_size],
        class_id: None,
    })
}

/// Realness score of every candidate patch of one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DiscriminatorScores {
    pub per_patch: Vec<(u8, f64)>,
}

/// Class of the least-real candidate; ties go to the lowest class id.
pub fn select_target_fake_patch(scores: &DiscriminatorScores) -> Result<u8> {
    let mut best: Option<(u8, f64)> = None;
    for &(c, s) in &scores.per_patch {
        if !s.is_finite() {
            return Err(Error::Input(format!("non-finite score {s} for class {c}")));
        }
        best = match best {
            Some((bc, bs)) if bs < s || (bs == s && bc < c) => Some((bc, bs)),
            _ => Some((c, s)),
        };
    }
    best.map(|(c, _)| c).ok_or_else(|| Error::Input("no candidate scores".into()))
}

/// Discriminator and generator objectives of one adversarial term.
#[derive(Debug, Clone, Copy)]
pub struct AdvLosses {
    pub loss_d: Var,
    pub loss_g: Var,
}

/// Candidate fake patches for a batch, stacked `[k, 3, p, p]`.
pub struct FakeCandidates {
    pub patches: Var,
    /// `(batch item, class id)` for each stacked patch.
    pub owners: Vec<(usize, u8)>,
}

/// Extract candidate patches from each image of a batch on the tape.
/// `images` is `[n, 3, H, W]`; `plans[i]` belongs to batch item `i`.
pub fn fake_candidates(g: &mut Graph, images: Var, plans: &[Vec<PatchPlan>]) -> Result<FakeCandidates> {
    let mut parts = Vec::new();
    let mut owners = Vec::new();
    for (i, item_plans) in plans.iter().enumerate() {
        let item = g.select(images, i);
        for pl in item_plans {
            parts.push(g.sparse(item, pl.map.clone()));
            owners.push((i, pl.class_id));
        }
    }
    if parts.is_empty() {
        return Err(Error::NoCandidates);
    }
    Ok(FakeCandidates { patches: g.stack(&parts), owners })
}

/// Outcome of the local term, including the per-image selection.
pub struct LocalOutcome {
    pub losses: AdvLosses,
    pub scores: Vec<DiscriminatorScores>,
    /// Selected class per batch item that had candidates.
    pub targets: Vec<(usize, u8)>,
}

/// Least-squares local objectives on the worst candidate of each image.
pub fn local_adversarial_losses(
    g: &mut Graph,
    d: &Discriminator,
    pd: &Bound,
    real: Var,
    fake: &FakeCandidates,
    labels: GanLabels,
) -> Result<LocalOutcome> {
    let real_scores = d.scores(g, pd, real)?;
    let fake_scores = d.scores(g, pd, fake.patches)?;
    let values = g.value(fake_scores).data().to_vec();
    let mut scores: Vec<(usize, DiscriminatorScores)> = Vec::new();
    for (k, &(item, class)) in fake.owners.iter().enumerate() {
        match scores.last_mut() {
            Some((i, s)) if *i == item => s.per_patch.push((class, values[k])),
            _ => scores.push((item, DiscriminatorScores { per_patch: vec![(class, values[k])] })),
        }
    }
    let mut targets = Vec::new();
    let mut picked = Vec::new();
    for (item, s) in &scores {
        let class = select_target_fake_patch(s)?;
        let k = fake.owners.iter().position(|&o| o == (*item, class)).expect("selected owner");
        targets.push((*item, class));
        picked.push(k);
    }
    let n_real = g.value(real_scores).len();
    let selected: Vec<Var> = picked
        .iter()
        .map(|&k| {
            let one = g.sparse(fake_scores, Rc::new(pick_map(values.len(), k)));
            g.reshape(one, &[1])
        })
        .collect();
    let target_scores = g.stack(&selected);
    let n_fake = selected.len();
    let losses = ls_losses(g, real_scores, n_real, target_scores, n_fake, labels);
    Ok(LocalOutcome { losses, scores: scores.into_iter().map(|(_, s)| s).collect(), targets })
}

fn pick_map(len: usize, k: usize) -> SparseMap {
    SparseMap { in_len: len, out_shape: vec![1], offsets: vec![0, 1], index: vec![k], weight: vec![1.0] }
}

fn ls_losses(g: &mut Graph, real_scores: Var, n_real: usize, fake_scores: Var, n_fake: usize, labels: GanLabels) -> AdvLosses {
    let lr = g.mse_to(real_scores, Tensor::full(&[n_real], labels.real()));
    let lf = g.mse_to(fake_scores, Tensor::full(&[n_fake], labels.fake()));
    let loss_d = g.add(lr, lf);
    let loss_g = g.mse_to(fake_scores, Tensor::full(&[n_fake], labels.real()));
    AdvLosses { loss_d, loss_g }
}

/// Least-squares global objectives; each input is the image concatenated
/// with segmentation logits along channels.
pub fn global_adversarial_losses(
    g: &mut Graph,
    d: &Discriminator,
    pd: &Bound,
    real_image: Var,
    fake_image: Var,
    logits_real: Var,
    logits_fake: Var,
    labels: GanLabels,
) -> Result<AdvLosses> {
    for (img, lg) in [(real_image, logits_real), (fake_image, logits_fake)] {
        let (n, _, h, w) = g.value(img).dims4();
        let (ln, _, lh, lw) = g.value(lg).dims4();
        if (n, h, w) != (ln, lh, lw) {
            return Err(Error::Shape(format!("image {:?} vs logits {:?}", g.shape(img), g.shape(lg))));
        }
    }
    let real = g.concat_channels(&[real_image, logits_real]);
    let fake = g.concat_channels(&[fake_image, logits_fake]);
    let rs = d.scores(g, pd, real)?;
    let fs = d.scores(g, pd, fake)?;
    let (nr, nf) = (g.value(rs).len(), g.value(fs).len());
    Ok(ls_losses(g, rs, nr, fs, nf, labels))
}

pub fn sa_loss(local_g: f64, global_g: f64) -> f64 {
    global_g + local_g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_disc(store: &mut ParamStore, cin: usize, seed: u64) -> Discriminator {
        Discriminator::new(store, &mut ChaCha8Rng::seed_from_u64(seed), "d", cin, 2)
    }

    /// Overwrite the final conv so every score equals `v`.
    fn constant_disc(store: &mut ParamStore, v: f64) {
        for (name, t) in store.names().to_vec().iter().zip(store.tensors_mut()) {
            if name == "d.c3.weight" {
                t.data_mut().fill(0.0);
            } else if name == "d.c3.bias" {
                t.data_mut().fill(v);
            }
        }
    }

    #[test]
    fn worst_patch_examples() {
        let s = |v: &[(u8, f64)]| DiscriminatorScores { per_patch: v.to_vec() };
        assert_eq!(select_target_fake_patch(&s(&[(3, 0.7)])).unwrap(), 3);
        assert_eq!(select_target_fake_patch(&s(&[(0, 0.9), (1, 0.2), (2, 0.5)])).unwrap(), 1);
        assert_eq!(select_target_fake_patch(&s(&[(4, 0.2), (1, 0.2), (2, 0.5)])).unwrap(), 1);
        assert!(select_target_fake_patch(&s(&[])).is_err());
    }

    #[test]
    fn worst_patch_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let n = rng.random_range(1..8);
            let mut classes: Vec<u8> = (0..16).collect();
            for i in 0..n {
                let j = rng.random_range(i..16);
                classes.swap(i, j);
            }
            let per_patch: Vec<(u8, f64)> = classes[..n].iter().map(|&c| (c, rng.random_range(0..4) as f64 * 0.25)).collect();
            let min = per_patch.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
            let want = per_patch.iter().filter(|p| p.1 == min).map(|p| p.0).min().unwrap();
            assert_eq!(select_target_fake_patch(&DiscriminatorScores { per_patch }).unwrap(), want);
        }
    }

    #[test]
    fn full_frame_segment_is_the_resized_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Image::new(16, 16, (0..768).map(|_| rng.random()).collect()).unwrap();
        let labels = LabelMap::new(16, 16, vec![0; 256]).unwrap();
        let patches = extract_fake_patches(&img, &labels, 16, 0).unwrap();
        assert_eq!(patches.len(), 1);
        for (a, b) in patches[0].pixels.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(patches[0].mask.iter().all(|&m| m));
    }

    #[test]
    fn eroded_away_segment_is_skipped() {
        // One-pixel-wide stripe of class 1 vanishes under radius 1.
        let labels = LabelMap::new(16, 16, (0..256).map(|p| u8::from(p % 16 == 8)).collect()).unwrap();
        let img = Image::filled(16, 16, [0.5; 3]);
        let patches = extract_fake_patches(&img, &labels, 8, 1).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0].class_id, Some(0));
        let all_one = LabelMap::new(16, 16, vec![1; 256]).unwrap();
        let thin = LabelMap::new(1, 16, vec![0; 16]).unwrap();
        assert!(extract_fake_patches(&img, &all_one, 8, 1).is_ok());
        assert!(matches!(extract_fake_patches(&Image::filled(1, 16, [0.1; 3]), &thin, 8, 1), Err(Error::NoCandidates)));
    }

    #[test]
    fn bounding_boxes_match_coordinate_scan() {
        let (img, labels) = crate::data::generate_scene(7, &crate::data::SceneConfig { class_count: 3, ..Default::default() }).unwrap();
        let (h, w) = labels.dims();
        for plan in plan_fake_patches(&labels, 64, 2).unwrap() {
            let mask = erode_mask(&labels.labels().iter().map(|&l| l == plan.class_id).collect::<Vec<_>>(), h, w, 2);
            let ys: Vec<usize> = (0..h * w).filter(|&i| mask[i]).map(|i| i / w).collect();
            let xs: Vec<usize> = (0..h * w).filter(|&i| mask[i]).map(|i| i % w).collect();
            let want = (*ys.iter().min().unwrap(), *xs.iter().min().unwrap(), *ys.iter().max().unwrap(), *xs.iter().max().unwrap());
            assert_eq!(plan.bbox, want);
        }
        // Pixels outside the patch mask are exactly zero.
        for p in extract_fake_patches(&img, &labels, 64, 2).unwrap() {
            for ch in 0..3 {
                for (i, &m) in p.mask.iter().enumerate() {
                    if !m {
                        assert_eq!(p.pixels.data()[ch * 4096 + i], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn midpoint_discriminator_arithmetic() {
        let mut store = ParamStore::new();
        let d = tiny_disc(&mut store, 3, 0);
        constant_disc(&mut store, 0.5);
        let mut g = Graph::new();
        let pd = store.bind(&mut g, true);
        let real = g.constant(Tensor::full(&[2, 3, 16, 16], 0.3));
        let fake = g.constant(Tensor::full(&[3, 3, 16, 16], 0.6));
        let cands = FakeCandidates { patches: fake, owners: vec![(0, 0), (0, 2), (1, 1)] };
        let out = local_adversarial_losses(&mut g, &d, &pd, real, &cands, GanLabels::Standard).unwrap();
        assert!((g.value(out.losses.loss_d).item() - 0.5).abs() < 1e-15);
        assert!((g.value(out.losses.loss_g).item() - 0.25).abs() < 1e-15);
        assert_eq!(out.targets, vec![(0, 0), (1, 1)]);

        let mut store = ParamStore::new();
        let dg = tiny_disc(&mut store, 5, 0);
        constant_disc(&mut store, 0.5);
        let mut g = Graph::new();
        let pd = store.bind(&mut g, true);
        let im = g.constant(Tensor::full(&[1, 3, 16, 16], 0.3));
        let lg = g.constant(Tensor::full(&[1, 2, 16, 16], 1.0));
        let l = global_adversarial_losses(&mut g, &dg, &pd, im, im, lg, lg, GanLabels::Standard).unwrap();
        assert!((g.value(l.loss_d).item() - 0.5).abs() < 1e-15);
        assert!((g.value(l.loss_g).item() - 0.25).abs() < 1e-15);
        let bad = g.constant(Tensor::full(&[1, 3, 16, 16], 1.0));
        assert!(matches!(global_adversarial_losses(&mut g, &dg, &pd, im, im, bad, bad, GanLabels::Standard), Err(Error::Config(_))));
    }

    #[test]
    fn perfect_discriminator_has_zero_d_loss() {
        for labels in [GanLabels::Standard, GanLabels::Paper] {
            let mut g = Graph::new();
            let rs = g.constant(Tensor::full(&[3], labels.real()));
            let fs = g.constant(Tensor::full(&[2], labels.fake()));
            let l = ls_losses(&mut g, rs, 3, fs, 2, labels);
            assert_eq!(g.value(l.loss_d).item(), 0.0);
            assert_eq!(g.value(l.loss_g).item(), 1.0);
        }
    }

    #[test]
    fn random_discriminator_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let d = tiny_disc(&mut store, 3, 4);
        let real_t = Tensor::new(vec![2, 3, 16, 16], (0..1536).map(|_| rng.random()).collect()).unwrap();
        let fake_t = Tensor::new(vec![3, 3, 16, 16], (0..2304).map(|_| rng.random()).collect()).unwrap();
        for labels in [GanLabels::Standard, GanLabels::Paper] {
            let mut g = Graph::new();
            let pd = store.bind(&mut g, false);
            let (real, fake) = (g.constant(real_t.clone()), g.constant(fake_t.clone()));
            let rs = d.scores(&mut g, &pd, real).unwrap();
            let rv = g.value(rs).data().to_vec();
            let cands = FakeCandidates { patches: fake, owners: vec![(0, 0), (0, 1), (0, 5)] };
            let out = local_adversarial_losses(&mut g, &d, &pd, real, &cands, labels).unwrap();
            let fv = &out.scores[0].per_patch;
            let worst = fv.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
            let (r, f) = (labels.real(), labels.fake());
            let want_d = rv.iter().map(|s| (s - r).powi(2)).sum::<f64>() / 2.0 + (worst - f).powi(2);
            let want_g = (worst - r).powi(2);
            assert!((g.value(out.losses.loss_d).item() - want_d).abs() < 1e-12);
            assert!((g.value(out.losses.loss_g).item() - want_g).abs() < 1e-12);
        }
    }

    #[test]
    fn generator_gradient_stays_inside_selected_mask() {
        let (_, labels) = crate::data::generate_scene(11, &crate::data::SceneConfig { height: 32, width: 32, ..Default::default() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let d = tiny_disc(&mut store, 3, 6);
        let plans = plan_fake_patches(&labels, 16, 1).unwrap();
        let mut g = Graph::new();
        let pd = store.bind(&mut g, false);
        let img = g.leaf(Tensor::new(vec![1, 3, 32, 32], (0..3072).map(|_| rng.random()).collect()).unwrap(), true);
        let real = g.constant(Tensor::full(&[plans.len(), 3, 16, 16], 0.5));
        let cands = fake_candidates(&mut g, img, std::slice::from_ref(&plans)).unwrap();
        let out = local_adversarial_losses(&mut g, &d, &pd, real, &cands, GanLabels::Standard).unwrap();
        let grads = g.backward(out.losses.loss_g);
        let gi = grads.get(img).unwrap();
        let class = out.targets[0].1;
        let mask = &plans.iter().find(|p| p.class_id == class).unwrap().source_mask;
        let mut inside = 0.0;
        for ch in 0..3 {
            for (i, &m) in mask.iter().enumerate() {
                let v = gi.data()[ch * 1024 + i];
                if m {
                    inside += v.abs();
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
        assert!(inside > 0.0);
    }
}
