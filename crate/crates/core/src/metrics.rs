//! Full-reference image quality metrics and the per-segment color error.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image::{Image, LabelMap};

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Rec. 601 luma weights.
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_dims(b, "mse")?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// PSNR in dB for unit peak, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

fn luma(img: &Image) -> Vec<f64> {
    let n = img.pixel_count();
    (0..n).map(|p| LUMA[0] * img.data()[p] + LUMA[1] * img.data()[n + p] + LUMA[2] * img.data()[2 * n + p]).collect()
}

/// Normalized 1-d Gaussian taps.
fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - c;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.map(|t| t / s)
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * src[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM on luma: 11x11 Gaussian window (sigma 1.5), valid
/// windows only, mean-pooled.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_dims(b, "ssim")?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Input(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let (x, y) = (luma(a), luma(b));
    let taps = gaussian_taps();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let (mx, my) = (filter_valid(&x, h, w, &taps), filter_valid(&y, h, w, &taps));
    let (sxx, syy, sxy) = (filter_valid(&xx, h, w, &taps), filter_valid(&yy, h, w, &taps), filter_valid(&xy, h, w, &taps));
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// Mean over classes of the L2 distance between per-class mean RGB values.
pub fn segment_color_error(enhanced: &Image, target: &Image, labels: &LabelMap) -> Result<f64> {
    enhanced.check_same_dims(target, "segment_color_error")?;
    if enhanced.dims() != labels.dims() {
        return Err(Error::Input(format!("label dims {:?} vs image {:?}", labels.dims(), enhanced.dims())));
    }
    let mut sums = vec![([0.0f64; 3], [0.0f64; 3], 0usize); 256];
    for (p, &l) in labels.labels().iter().enumerate() {
        let (e, t) = (enhanced.rgb(p), target.rgb(p));
        let s = &mut sums[l as usize];
        for c in 0..3 {
            s.0[c] += e[c];
            s.1[c] += t[c];
        }
        s.2 += 1;
    }
    let per_class: Vec<f64> = sums
        .iter()
        .filter(|s| s.2 > 0)
        .map(|(e, t, n)| (0..3).map(|c| ((e[c] - t[c]) / *n as f64).powi(2)).sum::<f64>().sqrt())
        .collect();
    if per_class.is_empty() {
        return Err(Error::Input("empty label map".into()));
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub segment_color_error: f64,
}

impl ImageMetrics {
    pub fn compute(id: impl Into<String>, enhanced: &Image, target: &Image, labels: &LabelMap) -> Result<Self> {
        Ok(Self {
            id: id.into(),
            psnr: psnr(enhanced, target)?,
            ssim: ssim(enhanced, target)?,
            segment_color_error: segment_color_error(enhanced, target, labels)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub per_image: Vec<ImageMetrics>,
}

/// Fixed column order of the CSV report. NIQE and LPIPS are kept as `n/a`
/// columns for table-shape parity with published comparisons.
pub const CSV_HEADER: &str = "id,psnr_db,ssim,segment_color_error,niqe,lpips";

impl MetricsReport {
    fn mean_of(&self, f: impl Fn(&ImageMetrics) -> f64) -> f64 {
        if self.per_image.is_empty() {
            return f64::NAN;
        }
        self.per_image.iter().map(f).sum::<f64>() / self.per_image.len() as f64
    }

    pub fn psnr(&self) -> f64 {
        self.mean_of(|m| m.psnr)
    }

    pub fn ssim(&self) -> f64 {
        self.mean_of(|m| m.ssim)
    }

    pub fn segment_color_error(&self) -> f64 {
        self.mean_of(|m| m.segment_color_error)
    }

    /// One row per image and a `mean` footer.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for m in &self.per_image {
            writeln!(out, "{},{:.6},{:.6},{:.6},n/a,n/a", m.id, m.psnr, m.ssim, m.segment_color_error).expect("string write");
        }
        writeln!(out, "mean,{:.6},{:.6},{:.6},n/a,n/a", self.psnr(), self.ssim(), self.segment_color_error()).expect("string write");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
        Image::new(h, w, (0..3 * h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn oracle_psnr(a: &Image, b: &Image) -> f64 {
        let (h, w) = a.dims();
        let mut s = 0.0;
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let d = a.channel(c)[y * w + x] - b.channel(c)[y * w + x];
                    s += d * d;
                }
            }
        }
        10.0 * (1.0 / (s / (3 * h * w) as f64)).log10()
    }

    /// Direct 2-d windowed evaluation, no separable filtering.
    fn oracle_ssim(a: &Image, b: &Image) -> f64 {
        let (h, w) = a.dims();
        let lum = |img: &Image, p: usize| 0.299 * img.channel(0)[p] + 0.587 * img.channel(1)[p] + 0.114 * img.channel(2)[p];
        let mut kernel = [[0.0; 11]; 11];
        let mut ks = 0.0;
        for (i, row) in kernel.iter_mut().enumerate() {
            for (j, k) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                *k = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
                ks += *k;
            }
        }
        let (c1, c2) = (0.0001, 0.0009);
        let mut total = 0.0;
        let mut count = 0;
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let p = (y0 + i) * w + x0 + j;
                        let k = kernel[i][j] / ks;
                        let (u, v) = (lum(a, p), lum(b, p));
                        mx += k * u;
                        my += k * v;
                        sxx += k * u * u;
                        syy += k * v * v;
                        sxy += k * u * v;
                    }
                }
                let (vx, vy, cv) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                total += ((2.0 * mx * my + c1) * (2.0 * cv + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn psnr_cases() {
        let a = Image::filled(16, 16, [0.3, 0.4, 0.5]);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        let b = Image::filled(16, 16, [0.4, 0.5, 0.6]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let (x, y) = (random_image(&mut rng, 13, 17), random_image(&mut rng, 13, 17));
            assert!((psnr(&x, &y).unwrap() - oracle_psnr(&x, &y)).abs() < 1e-9);
        }
        assert!(psnr(&a, &Image::filled(16, 8, [0.0; 3])).is_err());
    }

    #[test]
    fn ssim_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(&mut rng, 16, 16);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg = Image::new(16, 16, a.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&a, &neg).unwrap() < 1.0);
        for _ in 0..5 {
            let (x, y) = (random_image(&mut rng, 16, 20), random_image(&mut rng, 16, 20));
            assert!((ssim(&x, &y).unwrap() - oracle_ssim(&x, &y)).abs() < 1e-6);
        }
        let small = Image::filled(10, 16, [0.0; 3]);
        assert!(matches!(ssim(&small, &small), Err(Error::Input(_))));
    }

    #[test]
    fn segment_color_error_cases() {
        let labels = LabelMap::new(4, 4, vec![0; 16]).unwrap();
        let t = Image::filled(4, 4, [0.2, 0.3, 0.4]);
        assert_eq!(segment_color_error(&t, &t, &labels).unwrap(), 0.0);
        let e = Image::filled(4, 4, [0.3, 0.3, 0.4]);
        assert!((segment_color_error(&e, &t, &labels).unwrap() - 0.1).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b) = (random_image(&mut rng, 8, 8), random_image(&mut rng, 8, 8));
        let labels = LabelMap::new(8, 8, (0..64).map(|_| rng.random_range(0..3u8)).collect()).unwrap();
        let mut want = 0.0;
        for c in 0..3u8 {
            let mut acc = [0.0; 3];
            let mut n = 0.0;
            for p in 0..64 {
                if labels.labels()[p] == c {
                    for ch in 0..3 {
                        acc[ch] += a.channel(ch)[p] - b.channel(ch)[p];
                    }
                    n += 1.0;
                }
            }
            want += acc.iter().map(|v| (v / n) * (v / n)).sum::<f64>().sqrt() / 3.0;
        }
        assert!((segment_color_error(&a, &b, &labels).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn csv_has_fixed_columns_and_footer() {
        let t = Image::filled(16, 16, [0.5; 3]);
        let labels = LabelMap::new(16, 16, vec![0; 256]).unwrap();
        let report = MetricsReport { per_image: vec![ImageMetrics::compute("a", &t, &t, &labels).unwrap()] };
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert!(lines[1].starts_with("a,100.000000,1.000000,0.000000,n/a,n/a"));
        assert!(lines[2].starts_with("mean,100.000000"));
    }

    proptest! {
        #[test]
        fn psnr_and_ssim_are_symmetric(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = (random_image(&mut rng, 12, 12), random_image(&mut rng, 12, 12));
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn larger_error_lowers_psnr(seed in 0u64..500, k in 1.01f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_image(&mut rng, 8, 8);
            let err: Vec<f64> = (0..192).map(|_| rng.random_range(-0.1..0.1)).collect();
            let b1 = Image::new(8, 8, a.data().iter().zip(&err).map(|(x, e)| x + e).collect()).unwrap();
            let b2 = Image::new(8, 8, a.data().iter().zip(&err).map(|(x, e)| x + k * e).collect()).unwrap();
            prop_assert!(psnr(&a, &b2).unwrap() < psnr(&a, &b1).unwrap());
        }

        #[test]
        fn color_error_ignores_within_segment_order(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = (random_image(&mut rng, 8, 8), random_image(&mut rng, 8, 8));
            let labels = LabelMap::new(8, 8, (0..64).map(|_| rng.random_range(0..3u8)).collect()).unwrap();
            let (mut pa, mut pb) = (a.clone(), b.clone());
            for c in 0..3u8 {
                let idx: Vec<usize> = (0..64).filter(|&p| labels.labels()[p] == c).collect();
                let mut perm = idx.clone();
                for i in (1..perm.len()).rev() {
                    perm.swap(i, rng.random_range(0..=i));
                }
                for (&d, &s) in idx.iter().zip(&perm) {
                    pa.set_rgb(d, a.rgb(s));
                }
                for i in (1..perm.len()).rev() {
                    perm.swap(i, rng.random_range(0..=i));
                }
                for (&d, &s) in idx.iter().zip(&perm) {
                    pb.set_rgb(d, b.rgb(s));
                }
            }
            let x = segment_color_error(&a, &b, &labels).unwrap();
            let y = segment_color_error(&pa, &pb, &labels).unwrap();
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
