//! Synthetic paired low/normal-light dataset with ground-truth segmentation,
//! and its on-disk layout.
//!
//! Each scene is a background plus `class_count - 1` painted ellipses or
//! rectangles. Class `c` always takes its color from a fixed palette entry,
//! jittered per scene, so class identity predicts color: the property the
//! semantic prior is meant to carry.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.txt
//! pairs/<id>.normal   16-byte header + 3*H*W u16 LE (planar RGB)
//! pairs/<id>.low      same
//! pairs/<id>.labels   16-byte header + H*W u8
//! ```
//!
//! Header: magic `SKFA`, u16 version, u16 kind (1 = rgb16, 2 = labels8),
//! u32 height, u32 width, all little-endian.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::{Image, LabelMap};

pub const FORMAT_VERSION: u16 = 1;
const MAGIC: &[u8; 4] = b"SKFA";
const KIND_RGB16: u16 = 1;
const KIND_LABELS8: u16 = 2;
const HEADER_LEN: usize = 16;
pub const MAX_CLASSES: usize = 8;

/// Base colors per class id, pairwise L-inf separation 0.35.
const PALETTE: [[f64; 3]; MAX_CLASSES] = [
    [0.50, 0.50, 0.50],
    [0.85, 0.15, 0.15],
    [0.15, 0.85, 0.15],
    [0.15, 0.15, 0.85],
    [0.85, 0.85, 0.15],
    [0.15, 0.85, 0.85],
    [0.85, 0.15, 0.85],
    [0.85, 0.50, 0.15],
];

/// Per-scene uniform jitter applied to each palette channel.
const PALETTE_JITTER: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub class_count: usize,
    pub texture_sigma: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { height: 64, width: 64, class_count: 4, texture_sigma: 0.03 }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_CLASSES).contains(&self.class_count) {
            return Err(Error::Config(format!("class_count {} outside [2, {MAX_CLASSES}]", self.class_count)));
        }
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(16) || !self.width.is_multiple_of(16) {
            return Err(Error::Config(format!("dims {}x{} must be positive multiples of 16", self.height, self.width)));
        }
        if !(self.texture_sigma >= 0.0 && self.texture_sigma.is_finite()) {
            return Err(Error::Config(format!("texture_sigma {} must be >= 0", self.texture_sigma)));
        }
        Ok(())
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Base colors actually used for a scene, before texture.
pub fn scene_base_colors(seed: u64, class_count: usize) -> Vec<[f64; 3]> {
    let mut rng = rng_for(seed, 2);
    PALETTE[..class_count]
        .iter()
        .map(|c| c.map(|v| v + rng.random_range(-PALETTE_JITTER..PALETTE_JITTER)))
        .collect()
}

/// Smallest pixel area a painted class must keep.
fn min_area(cfg: &SceneConfig) -> usize {
    (cfg.height * cfg.width / 40).max(25)
}

/// Draw a scene and its label map. Deterministic in `seed`.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<(Image, LabelMap)> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = rng_for(seed, 0);
    let labels = loop {
        let mut labels = vec![0u8; h * w];
        for class in 1..cfg.class_count {
            let cy = rng.random_range(0.15..0.85) * h as f64;
            let cx = rng.random_range(0.15..0.85) * w as f64;
            let ry = rng.random_range(0.12..0.3) * h as f64;
            let rx = rng.random_range(0.12..0.3) * w as f64;
            let ellipse = rng.random_bool(0.5);
            for y in 0..h {
                for x in 0..w {
                    let dy = (y as f64 + 0.5 - cy) / ry;
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    let inside = if ellipse { dy * dy + dx * dx <= 1.0 } else { dy.abs() <= 1.0 && dx.abs() <= 1.0 };
                    if inside {
                        labels[y * w + x] = class as u8;
                    }
                }
            }
        }
        let mut area = vec![0usize; cfg.class_count];
        for &l in &labels {
            area[l as usize] += 1;
        }
        if area.iter().all(|&a| a >= min_area(cfg)) {
            break labels;
        }
    };
    let colors = scene_base_colors(seed, cfg.class_count);
    let mut tex = rng_for(seed, 1);
    let noise = Normal::new(0.0, cfg.texture_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = vec![0.0; 3 * h * w];
    for ch in 0..3 {
        for p in 0..h * w {
            let base = colors[labels[p] as usize][ch];
            data[ch * h * w + p] = (base + noise.sample(&mut tex)).clamp(0.0, 1.0);
        }
    }
    Ok((Image::new(h, w, data)?, LabelMap::new(h, w, labels)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegradeConfig {
    pub gamma_range: (f64, f64),
    pub scale_range: (f64, f64),
    pub noise_sigma: f64,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        Self { gamma_range: (1.5, 3.0), scale_range: (0.1, 0.4), noise_sigma: 0.01 }
    }
}

impl DegradeConfig {
    pub fn validate(&self) -> Result<()> {
        let (g0, g1) = self.gamma_range;
        let (s0, s1) = self.scale_range;
        if !(1.5 <= g0 && g0 <= g1 && g1 <= 6.0) {
            return Err(Error::Config(format!("gamma range {g0}..{g1} must lie within [1.5, 6]")));
        }
        if !(0.05 <= s0 && s0 <= s1 && s1 <= 0.6) {
            return Err(Error::Config(format!("scale range {s0}..{s1} must lie within [0.05, 0.6]")));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise sigma {} must be >= 0", self.noise_sigma)));
        }
        Ok(())
    }
}

/// Parameters of one degradation, sufficient to reproduce it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegradeParams {
    pub seed: u64,
    pub gamma: f64,
    pub scale: f64,
    pub noise_sigma: f64,
}

/// Draw gamma and scale from `cfg` under `seed`, then apply them.
pub fn degrade(normal: &Image, seed: u64, cfg: &DegradeConfig) -> (Image, DegradeParams) {
    let mut rng = rng_for(seed, 3);
    let gamma = sample_range(&mut rng, cfg.gamma_range);
    let scale = sample_range(&mut rng, cfg.scale_range);
    let params = DegradeParams { seed, gamma, scale, noise_sigma: cfg.noise_sigma };
    (degrade_with(normal, &params), params)
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// `clamp(scale * normal^gamma + N(0, sigma^2), 0, 1)` with noise drawn from
/// `params.seed`.
pub fn degrade_with(normal: &Image, params: &DegradeParams) -> Image {
    let mut rng = rng_for(params.seed, 4);
    let noise = (params.noise_sigma > 0.0).then(|| Normal::new(0.0, params.noise_sigma).expect("sigma > 0"));
    let data = normal
        .data()
        .iter()
        .map(|&v| {
            let n = noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
            (params.scale * v.powf(params.gamma) + n).clamp(0.0, 1.0)
        })
        .collect();
    Image::new(normal.height(), normal.width(), data).expect("same dims")
}

/// Round to the 16-bit storage grid.
pub fn quantize16(img: &Image) -> Image {
    let data = img.data().iter().map(|&v| to_u16(v) as f64 / 65535.0).collect();
    Image::new(img.height(), img.width(), data).expect("same dims")
}

fn to_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairMeta {
    pub seed: u64,
    pub gamma: f64,
    pub scale: f64,
    pub noise_sigma: f64,
    pub class_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub normal: Image,
    pub low: Image,
    pub labels: LabelMap,
    /// Absent for imported pairs.
    pub meta: Option<PairMeta>,
}

impl ScenePair {
    /// Generate a pair on the 16-bit storage grid.
    pub fn generate(seed: u64, scene: &SceneConfig, degradation: &DegradeConfig) -> Result<Self> {
        let (normal, labels) = generate_scene(seed, scene)?;
        let normal = quantize16(&normal);
        let (low, p) = degrade(&normal, seed, degradation);
        Ok(Self {
            normal,
            low: quantize16(&low),
            labels,
            meta: Some(PairMeta {
                seed,
                gamma: p.gamma,
                scale: p.scale,
                noise_sigma: p.noise_sigma,
                class_count: scene.class_count,
            }),
        })
    }

    /// Re-run the degradation from stored metadata.
    pub fn rederive_low(&self) -> Option<Image> {
        let m = self.meta?;
        let params = DegradeParams { seed: m.seed, gamma: m.gamma, scale: m.scale, noise_sigma: m.noise_sigma };
        Some(quantize16(&degrade_with(&self.normal, &params)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub master_seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub scene: SceneConfig,
    pub degrade: DegradeConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            train: 400,
            val: 50,
            test: 50,
            scene: SceneConfig::default(),
            degrade: DegradeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub id: String,
    pub split: Split,
    pub pair: ScenePair,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub entries: Vec<DatasetEntry>,
}

impl Dataset {
    /// Whole dataset from one master seed: per-pair seeds come from a
    /// ChaCha stream; the first `train` pairs are train, then val, then test.
    pub fn generate(cfg: &DatasetConfig) -> Result<Self> {
        cfg.scene.validate()?;
        cfg.degrade.validate()?;
        let mut seeds = ChaCha8Rng::seed_from_u64(cfg.master_seed);
        let total = cfg.train + cfg.val + cfg.test;
        let entries = (0..total)
            .map(|i| {
                let split = if i < cfg.train {
                    Split::Train
                } else if i < cfg.train + cfg.val {
                    Split::Val
                } else {
                    Split::Test
                };
                let seed = seeds.next_u64();
                Ok(DatasetEntry { id: format!("{i:05}"), split, pair: ScenePair::generate(seed, &cfg.scene, &cfg.degrade)? })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { entries })
    }

    pub fn split(&self, split: Split) -> Vec<&DatasetEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }
}

fn header(kind: u16, h: usize, w: usize) -> [u8; HEADER_LEN] {
    let mut out = [0u8; HEADER_LEN];
    out[..4].copy_from_slice(MAGIC);
    out[4..6].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
    out[6..8].copy_from_slice(&kind.to_le_bytes());
    out[8..12].copy_from_slice(&(h as u32).to_le_bytes());
    out[12..16].copy_from_slice(&(w as u32).to_le_bytes());
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_image(img: &Image) -> Vec<u8> {
    let mut out = header(KIND_RGB16, img.height(), img.width()).to_vec();
    out.reserve(img.data().len() * 2);
    for &v in img.data() {
        out.extend_from_slice(&to_u16(v).to_le_bytes());
    }
    out
}

pub fn encode_labels(labels: &LabelMap) -> Vec<u8> {
    let mut out = header(KIND_LABELS8, labels.height(), labels.width()).to_vec();
    out.extend_from_slice(labels.labels());
    out
}

fn parse_header(path: &Path, bytes: &[u8], kind: u16) -> Result<(usize, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::load(path, format!("file is {} bytes, shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::load(path, "bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::load(path, format!("unsupported version {version}, expected {FORMAT_VERSION}")));
    }
    let got = u16::from_le_bytes([bytes[6], bytes[7]]);
    if got != kind {
        return Err(Error::load(path, format!("array kind {got}, expected {kind}")));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    Ok((h, w))
}

pub fn decode_image(path: &Path, bytes: &[u8]) -> Result<Image> {
    let (h, w) = parse_header(path, bytes, KIND_RGB16)?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != 6 * h * w {
        return Err(Error::load(path, format!("payload is {} bytes, expected {} for {h}x{w}", body.len(), 6 * h * w)));
    }
    let data = body.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as f64 / 65535.0).collect();
    Image::new(h, w, data)
}

pub fn decode_labels(path: &Path, bytes: &[u8]) -> Result<LabelMap> {
    let (h, w) = parse_header(path, bytes, KIND_LABELS8)?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != h * w {
        return Err(Error::load(path, format!("payload is {} bytes, expected {} for {h}x{w}", body.len(), h * w)));
    }
    LabelMap::new(h, w, body.to_vec())
}

pub fn read_image(path: &Path) -> Result<Image> {
    decode_image(path, &fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    write_file(path, &encode_image(img))
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    decode_labels(path, &fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    write_file(path, &encode_labels(labels))
}

pub fn pair_path(root: &Path, id: &str, ext: &str) -> PathBuf {
    root.join("pairs").join(format!("{id}.{ext}"))
}

const MANIFEST_HEADER: &str = "# skf dataset manifest\n# id split seed gamma scale noise_sigma class_count\n";

/// Write `manifest.txt` and the per-pair arrays.
pub fn save_dataset(root: &Path, dataset: &Dataset) -> Result<()> {
    let pairs = root.join("pairs");
    fs::create_dir_all(&pairs).map_err(|e| Error::io(&pairs, e))?;
    let mut manifest = format!("{MANIFEST_HEADER}version {FORMAT_VERSION}\n");
    for e in &dataset.entries {
        write_image(&pair_path(root, &e.id, "normal"), &e.pair.normal)?;
        write_image(&pair_path(root, &e.id, "low"), &e.pair.low)?;
        write_labels(&pair_path(root, &e.id, "labels"), &e.pair.labels)?;
        let meta = match e.pair.meta {
            Some(m) => format!("{} {} {} {} {}", m.seed, m.gamma, m.scale, m.noise_sigma, m.class_count),
            None => "- - - - -".to_string(),
        };
        manifest.push_str(&format!("pair {} {} {meta}\n", e.id, e.split.as_str()));
    }
    write_file(&root.join("manifest.txt"), manifest.as_bytes())
}

fn parse_meta(fields: &[&str]) -> Option<Option<PairMeta>> {
    if fields.iter().all(|f| *f == "-") {
        return Some(None);
    }
    Some(Some(PairMeta {
        seed: fields[0].parse().ok()?,
        gamma: fields[1].parse().ok()?,
        scale: fields[2].parse().ok()?,
        noise_sigma: fields[3].parse().ok()?,
        class_count: fields[4].parse().ok()?,
    }))
}

/// Load a dataset directory. Also the import path for externally prepared
/// pairs: their manifest lines carry `-` for every metadata field.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let mpath = root.join("manifest.txt");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut version = None;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = |why: &str| Error::load(&mpath, format!("line {}: {why}", lineno + 1));
        match fields[0] {
            "version" => {
                let v: u16 = fields.get(1).and_then(|v| v.parse().ok()).ok_or_else(|| bad("bad version line"))?;
                if v != FORMAT_VERSION {
                    return Err(bad(&format!("unsupported version {v}, expected {FORMAT_VERSION}")));
                }
                version = Some(v);
            }
            "pair" => {
                if fields.len() != 8 {
                    return Err(bad("pair lines need 7 fields"));
                }
                let id = fields[1].to_string();
                let split = Split::parse(fields[2]).ok_or_else(|| bad(&format!("unknown split {}", fields[2])))?;
                let meta = parse_meta(&fields[3..8]).ok_or_else(|| bad("unparsable metadata"))?;
                let normal = read_image(&pair_path(root, &id, "normal"))?;
                let low = read_image(&pair_path(root, &id, "low"))?;
                let labels = read_labels(&pair_path(root, &id, "labels"))?;
                if normal.dims() != low.dims() || normal.dims() != labels.dims() {
                    return Err(Error::load(pair_path(root, &id, "low"), format!("pair {id}: arrays disagree on dims")));
                }
                entries.push(DatasetEntry { id, split, pair: ScenePair { normal, low, labels, meta } });
            }
            other => return Err(bad(&format!("unknown record {other}"))),
        }
    }
    if version.is_none() {
        return Err(Error::load(&mpath, "missing version line"));
    }
    Ok(Dataset { entries })
}
