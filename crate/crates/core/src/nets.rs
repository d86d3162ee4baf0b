//! Reference enhancement network and semantic prior providers.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::{Image, LabelMap};
use crate::nn::{Bound, Conv, ParamStore};
use crate::semantic_embedding::{resolution_for_level, FeatureKind, FeatureMap, SemanticEmbedding, LEVELS};
use crate::tensor::Tensor;
use crate::tensor_file;

/// Logit assigned to the true class by the oracle provider.
pub const ORACLE_CONFIDENCE: f64 = 6.0;

/// Segmentation and multi-scale features for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticPrior {
    pub labels: LabelMap,
    /// `[classes, H, W]` pre-softmax scores.
    pub logits: Tensor,
    /// Levels 0, 1, 2 at `H / 2^(4-b)`.
    pub features: Vec<FeatureMap>,
}

impl SemanticPrior {
    pub fn class_count(&self) -> usize {
        self.logits.shape()[0]
    }

    /// Check label/logit agreement and the level contract.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.labels.dims();
        let s = self.logits.shape();
        if s.len() != 3 || s[1] != h || s[2] != w {
            return Err(Error::Input(format!("logits shape {s:?} vs label map {h}x{w}")));
        }
        if self.labels != argmax_labels(&self.logits)? {
            return Err(Error::Input("label map is not the argmax of the logits".into()));
        }
        if self.features.len() != LEVELS {
            return Err(Error::Input(format!("expected {LEVELS} feature levels, got {}", self.features.len())));
        }
        for (b, f) in self.features.iter().enumerate() {
            if f.level != b || !f.obeys_level_contract(h, w) {
                return Err(Error::Input(format!("feature level {b} has size {:?}", f.spatial())));
            }
        }
        Ok(())
    }

    /// Logits as a `[1, classes, H, W]` tensor.
    pub fn logits_batched(&self) -> Tensor {
        let s = self.logits.shape();
        self.logits.clone().reshaped(&[1, s[0], s[1], s[2]]).expect("logit reshape")
    }
}

/// Argmax over the leading (class) axis; ties resolve to the lowest class.
pub fn argmax_labels(logits: &Tensor) -> Result<LabelMap> {
    let s = logits.shape();
    if s.len() != 3 || s[0] == 0 || s[0] > 256 {
        return Err(Error::Input(format!("logits must be [classes<=256, H, W], got {s:?}")));
    }
    let (k, hw) = (s[0], s[1] * s[2]);
    let d = logits.data();
    let labels = (0..hw)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if d[c * hw + p] > d[best * hw + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(s[1], s[2], labels)
}

/// What a provider sees for one sample.
pub struct ProviderInput<'a> {
    pub id: &'a str,
    pub image: &'a Image,
    /// Ground-truth segmentation, when the dataset has one.
    pub ground_truth: Option<&'a LabelMap>,
}

/// Source of frozen semantic priors.
pub trait SemanticProvider {
    fn name(&self) -> &'static str;

    fn provide(&self, input: &ProviderInput<'_>) -> Result<SemanticPrior>;

    /// Digest of every parameter the provider uses; constant over training.
    fn param_digest(&self) -> [u8; 32];
}

/// Feature widths of the provider at levels 0, 1, 2.
pub type SemanticWidths = [usize; LEVELS];

/// Ground-truth labels as the prior, with features from a frozen
/// randomly-initialized encoder applied to the one-hot map.
pub struct OracleProvider {
    class_count: usize,
    widths: SemanticWidths,
    store: ParamStore,
    convs: [Conv; 3],
}

impl OracleProvider {
    pub fn new(class_count: usize, widths: SemanticWidths, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        // Packed one-hot at H/4 -> level 2, then two stride-2 steps.
        let c2 = Conv::new(&mut store, &mut rng, "oracle.l2", 16 * class_count, widths[2], 3, 1, 1);
        let c1 = Conv::new(&mut store, &mut rng, "oracle.l1", widths[2], widths[1], 3, 2, 1);
        let c0 = Conv::new(&mut store, &mut rng, "oracle.l0", widths[1], widths[0], 3, 2, 1);
        Self { class_count, widths, store, convs: [c0, c1, c2] }
    }

    pub fn widths(&self) -> SemanticWidths {
        self.widths
    }

    pub fn one_hot_logits(&self, labels: &LabelMap) -> Result<Tensor> {
        let (h, w) = labels.dims();
        let mut data = vec![0.0; self.class_count * h * w];
        for (p, &l) in labels.labels().iter().enumerate() {
            if l as usize >= self.class_count {
                return Err(Error::Input(format!("label {l} outside provider's {} classes", self.class_count)));
            }
            data[l as usize * h * w + p] = ORACLE_CONFIDENCE;
        }
        Tensor::new(vec![self.class_count, h, w], data)
    }
}

impl SemanticProvider for OracleProvider {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn provide(&self, input: &ProviderInput<'_>) -> Result<SemanticPrior> {
        let labels = input
            .ground_truth
            .ok_or_else(|| Error::Input(format!("oracle provider needs ground-truth labels for {}", input.id)))?;
        let (h, w) = labels.dims();
        resolution_for_level(0, h, w)?;
        let logits = self.one_hot_logits(labels)?;
        let one_hot = logits.map(|v| v / ORACLE_CONFIDENCE).reshaped(&[1, self.class_count, h, w])?;
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let x = g.constant(one_hot);
        let x = g.pixel_unshuffle(x, 4);
        let [c0, c1, c2] = &self.convs;
        let l2 = c2.forward(&mut g, &p, x);
        let l2 = g.relu(l2);
        let l1 = c1.forward(&mut g, &p, l2);
        let l1 = g.relu(l1);
        let l0 = c0.forward(&mut g, &p, l1);
        let l0 = g.relu(l0);
        let features = [l0, l1, l2]
            .iter()
            .enumerate()
            .map(|(b, &v)| {
                let (_, c, fh, fw) = g.value(v).dims4();
                FeatureMap::new(g.value(v).clone().reshaped(&[c, fh, fw])?, b, FeatureKind::Semantic)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SemanticPrior { labels: labels.clone(), logits, features })
    }

    fn param_digest(&self) -> [u8; 32] {
        self.store.digest()
    }
}

/// Priors precomputed elsewhere, one `<id>.prior` tensor file per sample
/// holding `logits` and `features.0` .. `features.2`.
pub struct FileProvider {
    root: PathBuf,
}

impl FileProvider {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path_for(&self, id: &str) -> PathBuf {
        self.root.join(format!("{id}.prior"))
    }

    /// Write a prior in the layout this provider reads.
    pub fn write(root: &Path, id: &str, prior: &SemanticPrior) -> Result<()> {
        let mut entries = vec![("logits".to_string(), prior.logits.clone())];
        for f in &prior.features {
            entries.push((format!("features.{}", f.level), f.data.clone()));
        }
        tensor_file::write(&root.join(format!("{id}.prior")), &entries)
    }
}

impl SemanticProvider for FileProvider {
    fn name(&self) -> &'static str {
        "file"
    }

    fn provide(&self, input: &ProviderInput<'_>) -> Result<SemanticPrior> {
        let path = self.path_for(input.id);
        let entries = tensor_file::read(&path)?;
        let find = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Input(format!("{}: missing array {name}", path.display())))
        };
        let logits = find("logits")?;
        let features = (0..LEVELS)
            .map(|b| FeatureMap::new(find(&format!("features.{b}"))?, b, FeatureKind::Semantic))
            .collect::<Result<Vec<_>>>()?;
        let prior = SemanticPrior { labels: argmax_labels(&logits)?, logits, features };
        if prior.labels.dims() != input.image.dims() {
            return Err(Error::Input(format!("{}: prior dims {:?} vs image {:?}", path.display(), prior.labels.dims(), input.image.dims())));
        }
        prior.validate()?;
        Ok(prior)
    }

    fn param_digest(&self) -> [u8; 32] {
        // No parameters: priors are read-only files.
        [0; 32]
    }
}

/// Build a provider by name.
pub fn provider_by_name(name: &str, class_count: usize, widths: SemanticWidths, seed: u64, root: Option<&Path>) -> Result<Box<dyn SemanticProvider>> {
    match name {
        "oracle" => Ok(Box::new(OracleProvider::new(class_count, widths, seed))),
        "file" => {
            let root = root.ok_or_else(|| Error::Config("file provider needs a prior directory".into()))?;
            Ok(Box::new(FileProvider::new(root)))
        }
        other => Err(Error::Config(format!("unknown semantic provider {other:?} (expected oracle or file)"))),
    }
}

/// Shape of the enhancement network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnhancerConfig {
    /// Feature widths at H/4, H/8, H/16.
    pub widths: [usize; 3],
    /// Semantic feature widths at levels 0, 1, 2.
    pub semantic_widths: SemanticWidths,
    /// Allocate SE modules in the decoder.
    pub use_se: bool,
}

impl Default for EnhancerConfig {
    fn default() -> Self {
        Self { widths: [32, 64, 128], semantic_widths: [16, 16, 16], use_se: true }
    }
}

/// Channels after 4x pixel-unshuffle of an RGB image.
const PACKED: usize = 48;

/// Width at decoder level `b` (level 0 is the coarsest, H/16).
fn level_width(widths: &[usize; 3], b: usize) -> usize {
    widths[2 - b]
}

impl EnhancerConfig {
    /// Analytic scalar parameter count.
    pub fn param_count(&self) -> usize {
        let [w0, w1, w2] = self.widths;
        let encoder = Conv::count(PACKED, w0, 3)
            + Conv::count(w0, w0, 3)
            + Conv::count(w0, w1, 3)
            + Conv::count(w1, w1, 3)
            + Conv::count(w1, w2, 3)
            + Conv::count(w2, w2, 3);
        let decoder = Conv::count(w2, w2, 3)
            + Conv::count(2 * w2, w2, 1)
            + Conv::count(w2, w1, 3)
            + Conv::count(2 * w1, w1, 1)
            + Conv::count(w1, w0, 3)
            + Conv::count(2 * w0, w0, 1)
            + Conv::count(w0, PACKED, 3);
        let se = if self.use_se {
            (0..LEVELS).map(|b| SemanticEmbedding::count(level_width(&self.widths, b), self.semantic_widths[b])).sum()
        } else {
            0
        };
        encoder + decoder + se
    }

    /// Widest no-SE configuration whose parameter count is closest to
    /// `target`, widths scaled jointly from `self.widths`.
    pub fn parameter_matched_without_se(&self, target: usize) -> EnhancerConfig {
        let mut best = EnhancerConfig { use_se: false, ..*self };
        let mut best_gap = usize::MAX;
        for step in 0..=400 {
            let m = 1.0 + step as f64 * 0.005;
            let widths = self.widths.map(|w| ((w as f64 * m).round() as usize).max(1));
            let cand = EnhancerConfig { widths, use_se: false, ..*self };
            let gap = cand.param_count().abs_diff(target);
            if gap < best_gap {
                best_gap = gap;
                best = cand;
            }
        }
        best
    }
}

#[derive(Debug, Clone)]
pub struct Enhancer {
    pub config: EnhancerConfig,
    enc: [Conv; 6],
    dec: [Conv; 7],
    se: Option<[SemanticEmbedding; LEVELS]>,
}

impl Enhancer {
    /// Allocate parameters into `store` with a deterministic init from `seed`.
    pub fn new(store: &mut ParamStore, config: EnhancerConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [w0, w1, w2] = config.widths;
        let r = &mut rng;
        let enc = [
            Conv::new(store, r, "enc.0a", PACKED, w0, 3, 1, 1),
            Conv::new(store, r, "enc.0b", w0, w0, 3, 1, 1),
            Conv::new(store, r, "enc.1a", w0, w1, 3, 2, 1),
            Conv::new(store, r, "enc.1b", w1, w1, 3, 1, 1),
            Conv::new(store, r, "enc.2a", w1, w2, 3, 2, 1),
            Conv::new(store, r, "enc.2b", w2, w2, 3, 1, 1),
        ];
        let dec = [
            Conv::new(store, r, "dec.0.conv", w2, w2, 3, 1, 1),
            Conv::new(store, r, "dec.0.fuse", 2 * w2, w2, 1, 1, 0),
            Conv::new(store, r, "dec.1.conv", w2, w1, 3, 1, 1),
            Conv::new(store, r, "dec.1.fuse", 2 * w1, w1, 1, 1, 0),
            Conv::new(store, r, "dec.2.conv", w1, w0, 3, 1, 1),
            Conv::new(store, r, "dec.2.fuse", 2 * w0, w0, 1, 1, 0),
            Conv::with_gain(store, r, "head", w0, PACKED, 3, 1, 1, 0.1),
        ];
        // SE init draws from its own stream so toggling SE leaves the rest
        // of the network's initialization unchanged.
        let se = config.use_se.then(|| {
            let mut se_rng = ChaCha8Rng::seed_from_u64(seed);
            se_rng.set_stream(1);
            [0, 1, 2].map(|b| {
                SemanticEmbedding::new(store, &mut se_rng, &format!("se.{b}"), level_width(&config.widths, b), config.semantic_widths[b])
            })
        });
        Self { config, enc, dec, se }
    }

    pub fn has_se(&self) -> bool {
        self.se.is_some()
    }

    /// `low` is `[n, 3, H, W]` with H, W multiples of 16; `semantic` holds
    /// batched features for levels 0..3. SE runs only when allocated,
    /// `se_active` is set and features are supplied.
    pub fn forward(&self, g: &mut Graph, p: &Bound, low: Var, semantic: Option<&[Var; LEVELS]>, se_active: bool) -> Result<Var> {
        let (_, c, h, w) = g.value(low).dims4();
        if c != 3 {
            return Err(Error::Input(format!("enhancer expects 3 channels, got {c}")));
        }
        resolution_for_level(0, h, w)?;
        let x0 = g.pixel_unshuffle(low, 4);
        let conv_relu = |g: &mut Graph, conv: &Conv, x: Var| {
            let y = conv.forward(g, p, x);
            g.relu(y)
        };
        let e2 = conv_relu(g, &self.enc[0], x0);
        let e2 = conv_relu(g, &self.enc[1], e2);
        let e1 = conv_relu(g, &self.enc[2], e2);
        let e1 = conv_relu(g, &self.enc[3], e1);
        let e0 = conv_relu(g, &self.enc[4], e1);
        let e0 = conv_relu(g, &self.enc[5], e0);
        let skips = [e0, e1, e2];
        let se = match (&self.se, semantic) {
            (Some(se), Some(feats)) if se_active => Some((se, feats)),
            _ => None,
        };
        let mut d = e0;
        for b in 0..LEVELS {
            if b > 0 {
                d = g.upsample2x(d);
            }
            d = conv_relu(g, &self.dec[2 * b], d);
            let cat = g.concat_channels(&[d, skips[b]]);
            d = conv_relu(g, &self.dec[2 * b + 1], cat);
            if let Some((modules, feats)) = se {
                d = modules[b].forward(g, p, d, feats[b])?;
            }
        }
        let out = self.dec[6].forward(g, p, d);
        let out = g.pixel_shuffle(out, 4);
        Ok(g.sigmoid(out))
    }

    /// Inference on a single image.
    pub fn enhance(&self, store: &ParamStore, low: &Image, prior: Option<&SemanticPrior>) -> Result<Image> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(low.to_tensor());
        let feats = prior.map(|pr| semantic_vars(&mut g, std::slice::from_ref(pr)));
        let out = self.forward(&mut g, &p, x, feats.as_ref(), true)?;
        Image::from_tensor(g.value(out))
    }
}

/// Stack per-sample prior features into batched constants on the tape.
pub fn semantic_vars(g: &mut Graph, priors: &[SemanticPrior]) -> [Var; LEVELS] {
    [0, 1, 2].map(|b| {
        let parts: Vec<Tensor> = priors
            .iter()
            .map(|pr| {
                let f = &pr.features[b];
                let s = f.data.shape();
                f.data.clone().reshaped(&[1, s[0], s[1], s[2]]).expect("feature reshape")
            })
            .collect();
        g.constant(Tensor::stack(&parts).expect("uniform feature shapes"))
    })
}
