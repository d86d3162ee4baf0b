//! RGB images and label maps.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Planar RGB image (`3 x height x width`), nominal range [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Input(format!(
                "image {height}x{width} needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, height * width));
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    /// Planar data, channel-major.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.pixel_count();
        &self.data[c * n..(c + 1) * n]
    }

    /// RGB triple at flat pixel index `p = y * width + x`.
    pub fn rgb(&self, p: usize) -> [f64; 3] {
        let n = self.pixel_count();
        [self.data[p], self.data[n + p], self.data[2 * n + p]]
    }

    pub fn set_rgb(&mut self, p: usize, rgb: [f64; 3]) {
        let n = self.pixel_count();
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[c * n + p] = v;
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// `[1, 3, h, w]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 3, self.height, self.width], self.data.clone()).expect("image tensor shape")
    }

    /// From a `[1, 3, h, w]` (or `[3, h, w]`) tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        let (c, h, w) = match s.len() {
            4 if s[0] == 1 => (s[1], s[2], s[3]),
            3 => (s[0], s[1], s[2]),
            _ => return Err(Error::Shape(format!("not a single image tensor: {s:?}"))),
        };
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        Self::new(h, w, t.data().to_vec())
    }

    pub(crate) fn check_same_dims(&self, other: &Image, what: &str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Input(format!("{what}: dims {:?} vs {:?}", self.dims(), other.dims())));
        }
        Ok(())
    }
}

/// Per-pixel class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Input(format!(
                "label map {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Sorted distinct class ids.
    pub fn classes(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (0..=255u8).filter(|&c| seen[c as usize]).collect()
    }
}
