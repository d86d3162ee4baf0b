//! Per-segment differentiable color histograms and the histogram-matching loss.
//!
//! A pixel value `x` contributes to bin `i` the difference of two sigmoids
//! anchored half a bin below and above `i / 255`:
//!
//! ```text
//! H_i = sum_j sigmoid(a * (x_j - (i - 0.5) / 255)) - sigmoid(a * (x_j - (i + 0.5) / 255))
//! ```
//!
//! Adjacent bins share an anchor, so the 256 bins are evaluated from the
//! 257 boundary sigmoids of each pixel. Sigmoids further than
//! [`SATURATION`] from zero are taken as exactly 0 or 1, which bounds the
//! per-bin error by `exp(-SATURATION)` per pixel.

use crate::error::{Error, Result};
use crate::image::{Image, LabelMap};

pub const BINS: usize = 256;

/// Default sharpness of the sigmoid kernels.
pub const DEFAULT_ALPHA: f64 = 400.0;

/// Default erosion radius applied to segment masks before histogramming.
pub const DEFAULT_EROSION_RADIUS: usize = 2;

/// Sigmoid arguments beyond this magnitude are treated as saturated.
const SATURATION: f64 = 40.0;

/// Pixels of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentPatch {
    pub class_id: u8,
    /// `height * width` membership mask.
    pub mask: Vec<bool>,
    /// Flat indices of the member pixels, ascending.
    pub pixels: Vec<usize>,
    /// RGB values of the member pixels, aligned with `pixels`.
    pub values: Vec<[f64; 3]>,
    /// Set when erosion removed every pixel of the class.
    pub emptied: bool,
}

impl SegmentPatch {
    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentPatchSet {
    pub patches: Vec<SegmentPatch>,
    pub source_dims: (usize, usize),
}

impl SegmentPatchSet {
    pub fn get(&self, class_id: u8) -> Option<&SegmentPatch> {
        self.patches.iter().find(|p| p.class_id == class_id)
    }
}

fn check_dims(image: &Image, labels: &LabelMap) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::Input("empty label map".into()));
    }
    if image.dims() != labels.dims() {
        return Err(Error::Input(format!(
            "image dims {:?} do not match label map dims {:?}",
            image.dims(),
            labels.dims()
        )));
    }
    Ok(())
}

/// Group pixels by class: one patch per class present in `labels`.
pub fn split_into_patches(image: &Image, labels: &LabelMap) -> Result<SegmentPatchSet> {
    check_dims(image, labels)?;
    let n = labels.labels().len();
    let patches = labels
        .classes()
        .into_iter()
        .map(|class_id| {
            let mask: Vec<bool> = labels.labels().iter().map(|&l| l == class_id).collect();
            let pixels: Vec<usize> = (0..n).filter(|&p| mask[p]).collect();
            let values = pixels.iter().map(|&p| image.rgb(p)).collect();
            SegmentPatch { class_id, mask, pixels, values, emptied: false }
        })
        .collect();
    Ok(SegmentPatchSet { patches, source_dims: labels.dims() })
}

/// Binary erosion with a `(2r+1)^2` square element. Out-of-frame counts as
/// background, so pixels within `r` of the border are removed.
pub fn erode_mask(mask: &[bool], height: usize, width: usize, radius: usize) -> Vec<bool> {
    if radius == 0 {
        return mask.to_vec();
    }
    let r = radius;
    // Separable: horizontal pass then vertical pass.
    let mut horiz = vec![false; mask.len()];
    for y in 0..height {
        let row = &mask[y * width..(y + 1) * width];
        // run[x] = length of the run of `true` ending at x.
        let mut run = vec![0usize; width];
        let mut acc = 0;
        for x in 0..width {
            acc = if row[x] { acc + 1 } else { 0 };
            run[x] = acc;
        }
        for x in r..width.saturating_sub(r) {
            horiz[y * width + x] = run[x + r] > 2 * r;
        }
    }
    let mut out = vec![false; mask.len()];
    for x in 0..width {
        let mut acc = 0;
        let mut run = vec![0usize; height];
        for y in 0..height {
            acc = if horiz[y * width + x] { acc + 1 } else { 0 };
            run[y] = acc;
        }
        for y in r..height.saturating_sub(r) {
            out[y * width + x] = run[y + r] > 2 * r;
        }
    }
    out
}

/// Drop pixels near segment boundaries and the frame border.
pub fn erode_segment_masks(set: &SegmentPatchSet, radius: usize) -> SegmentPatchSet {
    let (h, w) = set.source_dims;
    let patches = set
        .patches
        .iter()
        .map(|p| {
            let mask = erode_mask(&p.mask, h, w, radius);
            let (pixels, values): (Vec<usize>, Vec<[f64; 3]>) =
                p.pixels.iter().zip(&p.values).filter(|(&px, _)| mask[px]).map(|(&px, &v)| (px, v)).unzip();
            let emptied = p.emptied || (pixels.is_empty() && !p.pixels.is_empty());
            SegmentPatch { class_id: p.class_id, mask, pixels, values, emptied }
        })
        .collect();
    SegmentPatchSet { patches, source_dims: set.source_dims }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftHistogram {
    pub bins: Vec<f64>,
    pub alpha: f64,
    pub pixel_count: usize,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Boundary sigmoids `S_k = sigmoid(alpha * (x - (k - 0.5) / 255))`,
/// `k = 0..=256`, for one value. Saturated entries are exact 0/1 and only
/// the window `[lo, hi)` is evaluated; entries below `lo` are 1, from
/// `hi` on they are 0.
struct Boundaries {
    lo: usize,
    hi: usize,
    s: [f64; BINS + 1],
}

/// `exp(k * alpha / 255)` powers used to walk boundary sigmoids without
/// calling `exp` per boundary.
struct Kernel {
    alpha: f64,
    step: f64,
    ratio: f64,
}

impl Kernel {
    fn new(alpha: f64) -> Self {
        let step = alpha / 255.0;
        Self { alpha, step, ratio: step.exp() }
    }

    fn boundaries(&self, x: f64, out: &mut Boundaries) {
        // z_k = z0 - k * step, decreasing in k.
        let z0 = self.alpha * (x + 0.5 / 255.0);
        let first = ((z0 - SATURATION) / self.step).ceil().clamp(0.0, (BINS + 1) as f64);
        let last = ((z0 + SATURATION) / self.step).floor().clamp(-1.0, BINS as f64);
        let lo = first as usize;
        let hi = ((last + 1.0) as usize).max(lo);
        out.lo = lo;
        out.hi = hi;
        if hi == lo {
            return;
        }
        if hi - lo <= 2 || self.ratio > 1e8 {
            for k in lo..hi {
                out.s[k] = sigmoid(z0 - k as f64 * self.step);
            }
            return;
        }
        // exp(-z_k) grows geometrically with ratio exp(step).
        let mut e = (-(z0 - lo as f64 * self.step)).exp();
        for k in lo..hi {
            out.s[k] = 1.0 / (1.0 + e);
            e *= self.ratio;
        }
    }
}

impl Boundaries {
    fn new() -> Self {
        Self { lo: 0, hi: 0, s: [0.0; BINS + 1] }
    }

    fn get(&self, k: usize) -> f64 {
        if k < self.lo {
            1.0
        } else if k >= self.hi {
            0.0
        } else {
            self.s[k]
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Input(format!("alpha must be positive and finite, got {alpha}")));
    }
    Ok(())
}

fn accumulate(kernel: &Kernel, scratch: &mut Boundaries, x: f64, bins: &mut [f64]) {
    kernel.boundaries(x, scratch);
    // Bins strictly inside the saturated-one region get 1 - 1 = 0; only
    // bins touching the window (or straddling lo/hi) are non-zero.
    let from = scratch.lo.saturating_sub(1);
    let to = scratch.hi.min(BINS);
    for (i, bin) in bins.iter_mut().enumerate().take(to + 1).skip(from) {
        if i < BINS {
            *bin += scratch.get(i) - scratch.get(i + 1);
        }
    }
}

/// Differentiable 256-bin histogram of `values`.
pub fn soft_histogram(values: &[f64], alpha: f64) -> Result<SoftHistogram> {
    check_alpha(alpha)?;
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Input(format!("non-finite histogram input {v}")));
    }
    let kernel = Kernel::new(alpha);
    let mut scratch = Boundaries::new();
    let mut bins = vec![0.0; BINS];
    for &x in values {
        accumulate(&kernel, &mut scratch, x, &mut bins);
    }
    Ok(SoftHistogram { bins, alpha, pixel_count: values.len() })
}

/// `d(sum_i w_i * H_i) / dx` for one value, where `w` are per-bin weights.
fn value_gradient(kernel: &Kernel, scratch: &mut Boundaries, x: f64, bin_weight: &[f64]) -> f64 {
    kernel.boundaries(x, scratch);
    let mut g = 0.0;
    // Boundary k is the lower anchor of bin k (+) and upper anchor of bin k-1 (-).
    for k in scratch.lo..scratch.hi {
        let s = scratch.s[k];
        let upper = if k < BINS { bin_weight[k] } else { 0.0 };
        let lower = if k > 0 { bin_weight[k - 1] } else { 0.0 };
        g += (upper - lower) * kernel.alpha * s * (1.0 - s);
    }
    g
}

/// Loss value with its gradient w.r.t. the enhanced image (planar layout).
#[derive(Debug, Clone)]
pub struct SchLoss {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Sum over classes and RGB channels of the L1 distance between the soft
/// histograms of `enhanced` and `target`, restricted to eroded segments of
/// `labels`. The same label map selects pixels in both images.
pub fn sch_loss(enhanced: &Image, target: &Image, labels: &LabelMap, alpha: f64, erosion_radius: usize) -> Result<f64> {
    sch_loss_inner(enhanced, target, labels, alpha, erosion_radius, false).map(|l| l.value)
}

pub fn sch_loss_with_grad(
    enhanced: &Image,
    target: &Image,
    labels: &LabelMap,
    alpha: f64,
    erosion_radius: usize,
) -> Result<SchLoss> {
    sch_loss_inner(enhanced, target, labels, alpha, erosion_radius, true)
}

fn sch_loss_inner(
    enhanced: &Image,
    target: &Image,
    labels: &LabelMap,
    alpha: f64,
    erosion_radius: usize,
    with_grad: bool,
) -> Result<SchLoss> {
    check_alpha(alpha)?;
    enhanced.check_same_dims(target, "sch_loss enhanced/target")?;
    check_dims(enhanced, labels)?;
    let eroded = erode_segment_masks(&split_into_patches(enhanced, labels)?, erosion_radius);
    let n = enhanced.pixel_count();
    let kernel = Kernel::new(alpha);
    let mut scratch = Boundaries::new();
    let mut value = 0.0;
    let mut grad = if with_grad { vec![0.0; 3 * n] } else { Vec::new() };
    for patch in eroded.patches.iter().filter(|p| !p.is_empty()) {
        for ch in 0..3 {
            let (enh, tgt) = (enhanced.channel(ch), target.channel(ch));
            let mut h_enh = vec![0.0; BINS];
            let mut h_tgt = vec![0.0; BINS];
            for &p in &patch.pixels {
                accumulate(&kernel, &mut scratch, enh[p], &mut h_enh);
                accumulate(&kernel, &mut scratch, tgt[p], &mut h_tgt);
            }
            let sign: Vec<f64> = h_enh
                .iter()
                .zip(&h_tgt)
                .map(|(a, b)| {
                    value += (a - b).abs();
                    if a > b {
                        1.0
                    } else if a < b {
                        -1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            if with_grad {
                for &p in &patch.pixels {
                    grad[ch * n + p] = value_gradient(&kernel, &mut scratch, enh[p], &sign);
                }
            }
        }
    }
    Ok(SchLoss { value, grad })
}
