//! Evaluation metrics: NMI colour constancy, CW-SSIM, SSIM and structure Dice.

use std::collections::BTreeMap;

use log::warn;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{ColorImage, Mask};
use crate::tensor::{Real, Tensor};

/// Pixels brighter than this on every channel count as background.
pub const BACKGROUND_LEVEL: f64 = 235.0;

pub fn is_background(p: [f64; 3]) -> bool {
    p.iter().all(|&v| v > BACKGROUND_LEVEL)
}

/// Nearest-rank percentile of sorted data (`p` in percent).
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil().max(1.0) as usize;
    sorted[rank.min(n) - 1]
}

/// Median over the 95th percentile of mean-RGB intensity of tissue pixels.
pub fn nmi(image: &ColorImage) -> Result<f64> {
    let mut v: Vec<f64> = image
        .pixels()
        .filter(|&p| !is_background(p))
        .map(|p| (p[0] + p[1] + p[2]) / 3.0)
        .collect();
    if v.is_empty() {
        return Err(Error::NoTissue("every pixel is background".into()));
    }
    v.sort_by(f64::total_cmp);
    let p95 = nearest_rank(&v, 95.0);
    if p95 <= 0.0 {
        return Err(Error::InvalidInput(
            "tissue intensity percentile is zero".into(),
        ));
    }
    Ok(nearest_rank(&v, 50.0) / p95)
}

/// Mean, population SD and CV.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub sd: f64,
    pub cv: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("no values to aggregate".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let cv = if mean != 0.0 { sd / mean } else { 0.0 };
        Ok(Self { mean, sd, cv })
    }
}

/// Population SD and CV of per-image NMI. Images without tissue are skipped.
pub fn nmi_aggregate(images: &[ColorImage]) -> Result<(f64, f64)> {
    if images.len() < 2 {
        return Err(Error::InvalidInput(
            "NMI dispersion needs at least two images".into(),
        ));
    }
    let mut values = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        match nmi(img) {
            Ok(v) => values.push(v),
            Err(Error::NoTissue(msg)) => warn!("image {i} skipped for NMI: {msg}"),
            Err(e) => return Err(e),
        }
    }
    if values.is_empty() {
        return Err(Error::InvalidInput("no image contains tissue".into()));
    }
    let a = Aggregate::of(&values)?;
    Ok((a.sd, a.cv))
}

fn check_pair(x: &ColorImage, y: &ColorImage, min: usize) -> Result<()> {
    if (x.width(), x.height()) != (y.width(), y.height()) {
        return Err(Error::ShapeMismatch(format!(
            "{}×{} vs {}×{}",
            x.width(),
            x.height(),
            y.width(),
            y.height()
        )));
    }
    if x.width() < min || x.height() < min {
        return Err(Error::InvalidInput(format!(
            "images must be at least {min}×{min}"
        )));
    }
    Ok(())
}

/// Complex steerable decomposition settings for [`cwssim_with`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CwSsimConfig {
    pub levels: usize,
    pub orientations: usize,
    pub window: usize,
    pub k: f64,
}

impl Default for CwSsimConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            orientations: 6,
            window: 7,
            k: 0.01,
        }
    }
}

fn fft2(data: &mut [Complex<f64>], w: usize, h: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in data.chunks_exact_mut(w) {
        row.process(r);
    }
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = data[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            data[y * w + x] = column[y];
        }
    }
    if inverse {
        let s = 1.0 / (w * h) as f64;
        data.iter_mut().for_each(|v| *v *= s);
    }
}

/// Full-resolution complex subbands. Each filter is a log-radial raised-cosine
/// band (centre `π/2^(l+1)`, one octave either side) times a one-sided angular
/// window `cos^(K−1)(θ−θ_k)`, which makes the response analytic.
fn steerable_subbands(
    gray: &[f64],
    w: usize,
    h: usize,
    cfg: &CwSsimConfig,
) -> Vec<Vec<Complex<f64>>> {
    let mut spectrum: Vec<Complex<f64>> = gray.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft2(&mut spectrum, w, h, false);
    let freq = |i: usize, n: usize| {
        let k = if i <= n / 2 {
            i as f64
        } else {
            i as f64 - n as f64
        };
        2.0 * std::f64::consts::PI * k / n as f64
    };
    let order = cfg.orientations.saturating_sub(1) as i32;
    let mut bands = Vec::with_capacity(cfg.levels * cfg.orientations);
    for l in 0..cfg.levels {
        let centre = std::f64::consts::PI / f64::powi(2.0, l as i32 + 1);
        for o in 0..cfg.orientations {
            let theta_o = o as f64 * std::f64::consts::PI / cfg.orientations as f64;
            let mut band = spectrum.clone();
            for y in 0..h {
                let wy = freq(y, h);
                for x in 0..w {
                    let wx = freq(x, w);
                    let r = wx.hypot(wy);
                    let mut gain = 0.0;
                    if r > 0.0 {
                        let lr = (r / centre).log2();
                        if lr.abs() < 1.0 {
                            let mut d = wy.atan2(wx) - theta_o;
                            d = (d + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI)
                                - std::f64::consts::PI;
                            if d.abs() < std::f64::consts::FRAC_PI_2 {
                                gain =
                                    (std::f64::consts::FRAC_PI_2 * lr).cos() * d.cos().powi(order);
                            }
                        }
                    }
                    band[y * w + x] *= gain;
                }
            }
            fft2(&mut band, w, h, true);
            bands.push(band);
        }
    }
    bands
}

/// Sums over every `win×win` window (valid positions only) via an integral image.
fn window_sums<V>(v: &[V], w: usize, h: usize, win: usize) -> Vec<V>
where
    V: Copy + Default + std::ops::Add<Output = V> + std::ops::Sub<Output = V>,
{
    let iw = w + 1;
    let mut integral = vec![V::default(); iw * (h + 1)];
    for y in 0..h {
        let mut row = V::default();
        for x in 0..w {
            row = row + v[y * w + x];
            integral[(y + 1) * iw + x + 1] = integral[y * iw + x + 1] + row;
        }
    }
    let mut out = Vec::with_capacity((w + 1 - win) * (h + 1 - win));
    for y in 0..=h - win {
        for x in 0..=w - win {
            let s = integral[(y + win) * iw + x + win]
                - integral[y * iw + x + win]
                - integral[(y + win) * iw + x]
                + integral[y * iw + x];
            out.push(s);
        }
    }
    out
}

/// Complex-wavelet structural similarity of the luminance channels.
pub fn cwssim(x: &ColorImage, y: &ColorImage) -> Result<f64> {
    cwssim_with(x, y, &CwSsimConfig::default())
}

pub fn cwssim_with(x: &ColorImage, y: &ColorImage, cfg: &CwSsimConfig) -> Result<f64> {
    check_pair(x, y, 32)?;
    let (w, h) = (x.width(), x.height());
    let bx = steerable_subbands(&x.grayscale(), w, h, cfg);
    let by = steerable_subbands(&y.grayscale(), w, h, cfg);
    let mut total = 0.0;
    for (cx, cy) in bx.iter().zip(&by) {
        let cross: Vec<Complex<f64>> = cx.iter().zip(cy).map(|(a, b)| a * b.conj()).collect();
        let energy: Vec<f64> = cx
            .iter()
            .zip(cy)
            .map(|(a, b)| a.norm_sqr() + b.norm_sqr())
            .collect();
        let cs = window_sums(&cross, w, h, cfg.window);
        let es = window_sums(&energy, w, h, cfg.window);
        let band: f64 = cs
            .iter()
            .zip(&es)
            .map(|(c, &e)| ((2.0 * c.norm() + cfg.k) / (e + cfg.k)).min(1.0))
            .sum();
        total += band / cs.len() as f64;
    }
    Ok(total / bx.len() as f64)
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Gaussian-weighted means over valid windows (separable).
fn filter_valid(v: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let ow = w + 1 - n;
    let oh = h + 1 - n;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * v[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of the luminance channels: 11×11 Gaussian window (σ = 1.5),
/// dynamic range 255, `K1 = 0.01`, `K2 = 0.03`.
pub fn ssim(x: &ColorImage, y: &ColorImage) -> Result<f64> {
    check_pair(x, y, 11)?;
    let (w, h) = (x.width(), x.height());
    let gx = x.grayscale();
    let gy = y.grayscale();
    let k = gaussian_window(11, 1.5);
    let prod = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p * q).collect() };
    let mx = filter_valid(&gx, w, h, &k);
    let my = filter_valid(&gy, w, h, &k);
    let sxx = filter_valid(&prod(&gx, &gx), w, h, &k);
    let syy = filter_valid(&prod(&gy, &gy), w, h, &k);
    let sxy = filter_valid(&prod(&gx, &gy), w, h, &k);
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// `2|X∩Y| / (|X|+|Y|)`; 1 when both masks are empty.
pub fn structure_dice(x: &Mask, y: &Mask) -> Result<f64> {
    if (x.width, x.height) != (y.width, y.height) {
        return Err(Error::ShapeMismatch(format!(
            "masks {}×{} and {}×{}",
            x.width, x.height, y.width, y.height
        )));
    }
    Ok(dice_counts(x.data.iter().copied(), y.data.iter().copied()))
}

fn dice_counts(x: impl Iterator<Item = bool>, y: impl Iterator<Item = bool>) -> f64 {
    let (mut both, mut total) = (0usize, 0usize);
    for (a, b) in x.zip(y) {
        both += (a && b) as usize;
        total += a as usize + b as usize;
    }
    if total == 0 {
        1.0
    } else {
        2.0 * both as f64 / total as f64
    }
}

/// Mean per-image Dice of two `N×1×H×W` mask batches thresholded at 0.5.
pub fn structure_dice_tensor<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let n = x.batch();
    if n == 0 {
        return Err(Error::InvalidInput("empty mask batch".into()));
    }
    let per = x.len() / n;
    let half = T::lit(0.5);
    let total: f64 = (0..n)
        .map(|i| {
            let r = i * per..(i + 1) * per;
            dice_counts(
                x.data()[r.clone()].iter().map(|&v| v > half),
                y.data()[r].iter().map(|&v| v > half),
            )
        })
        .sum();
    Ok(total / n as f64)
}

/// Metrics for one image; absent entries were not computed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub nmi: Option<f64>,
    pub cwssim: Option<f64>,
    pub ssim: Option<f64>,
    pub dice: Option<f64>,
}

/// Per-image metrics plus aggregates, as written by `evaluate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub dataset: String,
    pub seed: u64,
    pub per_image: Vec<ImageMetrics>,
    /// Keyed by metric name: `nmi`, `cwssim`, `ssim`, `dice`.
    pub aggregates: BTreeMap<String, Aggregate>,
}

impl MetricReport {
    pub const METRICS: [&'static str; 4] = ["nmi", "cwssim", "ssim", "dice"];

    pub fn new(
        method: &str,
        dataset: &str,
        seed: u64,
        per_image: Vec<ImageMetrics>,
    ) -> Result<Self> {
        let mut aggregates = BTreeMap::new();
        for name in Self::METRICS {
            let values: Vec<f64> = per_image
                .iter()
                .filter_map(|m| match name {
                    "nmi" => m.nmi,
                    "cwssim" => m.cwssim,
                    "ssim" => m.ssim,
                    _ => m.dice,
                })
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("non-finite {name} value")));
            }
            if !values.is_empty() {
                aggregates.insert(name.to_string(), Aggregate::of(&values)?);
            }
        }
        Ok(Self {
            method: method.into(),
            dataset: dataset.into(),
            seed,
            per_image,
            aggregates,
        })
    }

    /// One row per image plus `mean`, `sd` and `cv` rows; empty cells for missing values.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|v| format!("{v:.9}")).unwrap_or_default();
        let mut out = String::from("name,nmi,cwssim,ssim,dice\n");
        for m in &self.per_image {
            out += &format!(
                "{},{},{},{},{}\n",
                m.name,
                cell(m.nmi),
                cell(m.cwssim),
                cell(m.ssim),
                cell(m.dice)
            );
        }
        for (row, pick) in [
            ("mean", (|a: &Aggregate| a.mean) as fn(&Aggregate) -> f64),
            ("sd", |a| a.sd),
            ("cv", |a| a.cv),
        ] {
            out += row;
            for name in Self::METRICS {
                out += ",";
                out += &cell(self.aggregates.get(name).map(pick));
            }
            out += "\n";
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tissue(w: usize, h: usize, f: impl Fn(usize) -> f64) -> ColorImage {
        ColorImage::new(w, h, (0..w * h).flat_map(|i| [f(i); 3]).collect()).unwrap()
    }

    #[test]
    fn nmi_of_constant_tissue_is_one() {
        assert_eq!(nmi(&tissue(4, 4, |_| 120.0)).unwrap(), 1.0);
    }

    #[test]
    fn nmi_two_level_tissue() {
        // Half the tissue at 100, half at 200: median 100, P95 200.
        let img = tissue(10, 10, |i| if i < 50 { 100.0 } else { 200.0 });
        assert!((nmi(&img).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn nmi_ignores_background_and_rejects_white() {
        let img = tissue(10, 1, |i| if i < 5 { 250.0 } else { 90.0 });
        assert_eq!(nmi(&img).unwrap(), 1.0);
        assert!(matches!(
            nmi(&tissue(3, 3, |_| 255.0)),
            Err(Error::NoTissue(_))
        ));
    }

    #[test]
    fn aggregate_by_hand() {
        let a = Aggregate::of(&[0.5, 0.7]).unwrap();
        assert!((a.mean - 0.6).abs() < 1e-15);
        assert!((a.sd - 0.1).abs() < 1e-15);
        assert!((a.cv - 0.1 / 0.6).abs() < 1e-15);
    }

    #[test]
    fn nmi_aggregate_needs_tissue() {
        let white = tissue(2, 2, |_| 255.0);
        assert!(matches!(
            nmi_aggregate(&[white.clone(), white]),
            Err(Error::InvalidInput(_))
        ));
        let img = tissue(2, 2, |i| 50.0 + i as f64);
        assert_eq!(nmi_aggregate(&[img.clone(), img]).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn dice_by_hand() {
        let m =
            |bits: &[u8]| Mask::new(bits.len(), 1, bits.iter().map(|&b| b == 1).collect()).unwrap();
        assert_eq!(
            structure_dice(&m(&[1, 1, 0, 0]), &m(&[1, 1, 0, 0])).unwrap(),
            1.0
        );
        assert_eq!(
            structure_dice(&m(&[1, 1, 0, 0]), &m(&[0, 0, 1, 1])).unwrap(),
            0.0
        );
        assert_eq!(
            structure_dice(&m(&[1, 1, 0, 0]), &m(&[0, 1, 1, 0])).unwrap(),
            0.5
        );
        assert_eq!(structure_dice(&m(&[0, 0]), &m(&[0, 0])).unwrap(), 1.0);
        assert!(structure_dice(&m(&[0, 0]), &m(&[0])).is_err());
    }

    #[test]
    fn cwssim_identity_and_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = ColorImage::new(
            32,
            32,
            (0..32 * 32 * 3)
                .map(|_| rng.gen_range(0.0..255.0))
                .collect(),
        )
        .unwrap();
        assert!((cwssim(&img, &img).unwrap() - 1.0).abs() < 1e-6);
        let small = ColorImage::filled(32, 16, [0.0; 3]);
        assert!(matches!(cwssim(&img, &small), Err(Error::ShapeMismatch(_))));
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn report_csv_has_aggregate_rows() {
        let per = vec![
            ImageMetrics {
                name: "a".into(),
                nmi: Some(0.5),
                ..Default::default()
            },
            ImageMetrics {
                name: "b".into(),
                nmi: Some(0.7),
                ..Default::default()
            },
        ];
        let r = MetricReport::new("m", "d", 0, per).unwrap();
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.contains("sd,0.100000000,,,"));
    }
}
