//! Semantic-aware embedding: channel-transposed cross attention that mixes
//! image feature channels under guidance of semantic features.
//!
//! For image features `F_i` and semantic features `F_s` at one decoder
//! level, both `C x h x w` after projection:
//!
//! ```text
//! Q = W_q(LN(F_s)), K = W_k(LN(F_i)), V = W_v(LN(F_i))     (1x1 convs)
//! A = softmax_rows(Q K^T / sqrt(C))                         (C x C)
//! F_o = FN(A V + F_i)
//! ```
//!
//! The attention map contracts over spatial positions, so its cost is linear
//! in resolution and it is invariant to any joint spatial permutation of the
//! inputs.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Bound, ChannelNorm, Conv, ParamStore};
use crate::tensor::Tensor;

/// Number of decoder levels carrying an SE module.
pub const LEVELS: usize = 3;

/// Spatial size of level `b`: `(H / 2^(4-b), W / 2^(4-b))`.
pub fn resolution_for_level(level: usize, height: usize, width: usize) -> Result<(usize, usize)> {
    if level >= LEVELS {
        return Err(Error::Input(format!("level {level} outside 0..{LEVELS}")));
    }
    if !height.is_multiple_of(16) || !width.is_multiple_of(16) || height == 0 || width == 0 {
        return Err(Error::Input(format!("dims {height}x{width} must be positive multiples of 16")));
    }
    let f = 1 << (4 - level);
    Ok((height / f, width / f))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Image,
    Semantic,
}

/// Single-sample feature map `C x h x w` tagged with its decoder level.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Tensor,
    pub level: usize,
    pub kind: FeatureKind,
}

impl FeatureMap {
    pub fn new(data: Tensor, level: usize, kind: FeatureKind) -> Result<Self> {
        if data.shape().len() != 3 {
            return Err(Error::Shape(format!("feature map must be C x h x w, got {:?}", data.shape())));
        }
        if level >= LEVELS {
            return Err(Error::Input(format!("level {level} outside 0..{LEVELS}")));
        }
        Ok(Self { data, level, kind })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.data.shape()[1], self.data.shape()[2])
    }

    /// Whether this map has the size level `level` implies for an
    /// `height x width` source image.
    pub fn obeys_level_contract(&self, height: usize, width: usize) -> bool {
        resolution_for_level(self.level, height, width).is_ok_and(|hw| hw == self.spatial())
    }

    fn batched(&self) -> Tensor {
        let s = self.data.shape();
        self.data.clone().reshaped(&[1, s[0], s[1], s[2]]).expect("feature reshape")
    }
}

/// Row-stochastic `C x C` channel attention.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub data: Tensor,
}

impl AttentionMap {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let c = self.channels();
        self.data.data().chunks(c).map(|r| r.iter().sum()).collect()
    }
}

/// `softmax_rows(Q K^T / sqrt(C))` for batched `[n, C, h, w]` projections.
pub fn transposed_attention(g: &mut Graph, q: Var, k: Var) -> Var {
    let (n, c, h, w) = g.value(q).dims4();
    let q = g.reshape(q, &[n, c, h * w]);
    let k = g.reshape(k, &[n, c, h * w]);
    let logits = g.batch_matmul(q, k, false, true);
    let scaled = g.scale(logits, 1.0 / (c as f64).sqrt());
    g.softmax_rows(scaled)
}

/// Parameter handles of one SE module.
#[derive(Debug, Clone)]
pub struct SemanticEmbedding {
    pub channels: usize,
    pub semantic_channels: usize,
    norm_image: ChannelNorm,
    norm_semantic: ChannelNorm,
    query: Conv,
    key: Conv,
    value: Conv,
    ffn_in: Conv,
    ffn_out: Conv,
    /// Skip the feed-forward block (`FN` = identity). Test mode.
    pub passthrough: bool,
}

/// Hidden width of the feed-forward block relative to `C`.
const FFN_EXPANSION: usize = 2;

impl SemanticEmbedding {
    /// Parameter names are `{name}.{norm_img,norm_sem,wq,wk,wv,ffn_in,ffn_out}.*`.
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, channels: usize, semantic_channels: usize) -> Self {
        let c = channels;
        let hidden = FFN_EXPANSION * c;
        Self {
            channels,
            semantic_channels,
            norm_image: ChannelNorm::new(store, &format!("{name}.norm_img"), c),
            norm_semantic: ChannelNorm::new(store, &format!("{name}.norm_sem"), semantic_channels),
            query: Conv::with_gain(store, rng, &format!("{name}.wq"), semantic_channels, c, 1, 1, 0, 1.0),
            key: Conv::with_gain(store, rng, &format!("{name}.wk"), c, c, 1, 1, 0, 1.0),
            value: Conv::with_gain(store, rng, &format!("{name}.wv"), c, c, 1, 1, 0, 1.0),
            ffn_in: Conv::new(store, rng, &format!("{name}.ffn_in"), c, hidden, 1, 1, 0),
            ffn_out: Conv::with_gain(store, rng, &format!("{name}.ffn_out"), hidden, c, 1, 1, 0, 0.5),
            passthrough: false,
        }
    }

    /// Scalar parameter count for a module of this shape.
    pub fn count(channels: usize, semantic_channels: usize) -> usize {
        let c = channels;
        let hidden = FFN_EXPANSION * c;
        ChannelNorm::count(c)
            + ChannelNorm::count(semantic_channels)
            + Conv::count(semantic_channels, c, 1)
            + 2 * Conv::count(c, c, 1)
            + Conv::count(c, hidden, 1)
            + Conv::count(hidden, c, 1)
    }

    /// Ids of the value projection (weight and bias).
    pub fn value_params(&self) -> [crate::nn::ParamId; 2] {
        [self.value.weight, self.value.bias.expect("value bias")]
    }

    fn check(&self, g: &Graph, fi: Var, fs: Var) -> Result<()> {
        let (n, c, h, w) = g.value(fi).dims4();
        let (sn, sc, sh, sw) = g.value(fs).dims4();
        if c != self.channels || sc != self.semantic_channels {
            return Err(Error::Input(format!(
                "SE expects {}/{} channels, got image {c}, semantic {sc}",
                self.channels, self.semantic_channels
            )));
        }
        if (n, h, w) != (sn, sh, sw) {
            return Err(Error::Input(format!("SE spatial mismatch: image {n}x{h}x{w} vs semantic {sn}x{sh}x{sw}")));
        }
        Ok(())
    }

    /// Attention map `[n, C, C]` on the tape.
    pub fn attention(&self, g: &mut Graph, p: &Bound, fi: Var, fs: Var) -> Result<Var> {
        self.check(g, fi, fs)?;
        let ns = self.norm_semantic.forward(g, p, fs);
        let ni = self.norm_image.forward(g, p, fi);
        let q = self.query.forward(g, p, ns);
        let k = self.key.forward(g, p, ni);
        Ok(transposed_attention(g, q, k))
    }

    /// Refined features, same shape as `fi`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, fi: Var, fs: Var) -> Result<Var> {
        self.check(g, fi, fs)?;
        let (n, c, h, w) = g.value(fi).dims4();
        let ns = self.norm_semantic.forward(g, p, fs);
        let ni = self.norm_image.forward(g, p, fi);
        let q = self.query.forward(g, p, ns);
        let k = self.key.forward(g, p, ni);
        let attn = transposed_attention(g, q, k);
        let v = self.value.forward(g, p, ni);
        let v = g.reshape(v, &[n, c, h * w]);
        let mixed = g.batch_matmul(attn, v, false, false);
        let mixed = g.reshape(mixed, &[n, c, h, w]);
        let x = g.add(mixed, fi);
        if self.passthrough {
            return Ok(x);
        }
        let hdn = self.ffn_in.forward(g, p, x);
        let hdn = g.gelu(hdn);
        let out = self.ffn_out.forward(g, p, hdn);
        Ok(g.add(x, out))
    }

    fn check_pair(&self, fi: &FeatureMap, fs: &FeatureMap) -> Result<()> {
        if fi.level != fs.level {
            return Err(Error::Input(format!("level mismatch: {} vs {}", fi.level, fs.level)));
        }
        if fi.spatial() != fs.spatial() {
            return Err(Error::Input(format!("spatial mismatch: {:?} vs {:?}", fi.spatial(), fs.spatial())));
        }
        Ok(())
    }

    /// Evaluate the attention map for one pair of feature maps.
    pub fn semantic_attention(&self, store: &ParamStore, fi: &FeatureMap, fs: &FeatureMap) -> Result<AttentionMap> {
        self.check_pair(fi, fs)?;
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let (vi, vs) = (g.constant(fi.batched()), g.constant(fs.batched()));
        let a = self.attention(&mut g, &p, vi, vs)?;
        let c = self.channels;
        Ok(AttentionMap { data: g.value(a).clone().reshaped(&[c, c])? })
    }

    /// Evaluate the module on one pair of feature maps.
    pub fn se_forward(&self, store: &ParamStore, fi: &FeatureMap, fs: &FeatureMap) -> Result<FeatureMap> {
        self.check_pair(fi, fs)?;
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let (vi, vs) = (g.constant(fi.batched()), g.constant(fs.batched()));
        let out = self.forward(&mut g, &p, vi, vs)?;
        let data = g.value(out).clone().reshaped(fi.data.shape())?;
        FeatureMap::new(data, fi.level, FeatureKind::Image)
    }
}
