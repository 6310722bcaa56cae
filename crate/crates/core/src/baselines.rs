//! Classical stain normalizers: Reinhard colour-statistics transfer and
//! Macenko stain-vector normalization.

use nalgebra::{Matrix2, Matrix3, SymmetricEigen, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ColorImage;
use crate::metrics::is_background;

/// RGB → LMS cone response (Reinhard et al.).
pub const RGB_TO_LMS: [[f64; 3]; 3] = [
    [0.3811, 0.5783, 0.0402],
    [0.1967, 0.7244, 0.0782],
    [0.0241, 0.1288, 0.8444],
];

fn lms_matrix() -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| RGB_TO_LMS[r][c])
}

/// log-LMS → lαβ decorrelation.
fn lab_matrix() -> Matrix3<f64> {
    let (a, b, c) = (1.0 / 3f64.sqrt(), 1.0 / 6f64.sqrt(), 1.0 / 2f64.sqrt());
    Matrix3::new(a, a, a, b, b, -2.0 * b, c, -c, 0.0)
}

/// Forward and inverse colour transforms between 8-bit RGB and lαβ.
///
/// RGB samples enter as `(I + 1)/256` so that black pixels have a finite log.
#[derive(Clone, Debug)]
pub struct LabTransform {
    to_lms: Matrix3<f64>,
    from_lms: Matrix3<f64>,
    to_lab: Matrix3<f64>,
    from_lab: Matrix3<f64>,
}

impl Default for LabTransform {
    fn default() -> Self {
        let to_lms = lms_matrix();
        let to_lab = lab_matrix();
        Self {
            from_lms: to_lms.try_inverse().expect("LMS matrix is invertible"),
            from_lab: to_lab.try_inverse().expect("lαβ matrix is invertible"),
            to_lms,
            to_lab,
        }
    }
}

impl LabTransform {
    pub fn rgb_to_lab(&self, p: [f64; 3]) -> [f64; 3] {
        let rgb = Vector3::from(p.map(|v| (v + 1.0) / 256.0));
        let lms = (self.to_lms * rgb).map(|v| v.max(1e-10).log10());
        let lab = self.to_lab * lms;
        [lab[0], lab[1], lab[2]]
    }

    pub fn lab_to_rgb(&self, p: [f64; 3]) -> [f64; 3] {
        let lms = (self.from_lab * Vector3::from(p)).map(|v| 10f64.powf(v));
        let rgb = self.from_lms * lms;
        [rgb[0], rgb[1], rgb[2]].map(|v| 256.0 * v - 1.0)
    }
}

/// Per-channel lαβ mean and standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

fn lab_pixels(image: &ColorImage, t: &LabTransform) -> Vec<[f64; 3]> {
    image.pixels().map(|p| t.rgb_to_lab(p)).collect()
}

fn stats_of(lab: &[[f64; 3]]) -> LabStats {
    let n = lab.len() as f64;
    let mut mean = [0.0; 3];
    for p in lab {
        for c in 0..3 {
            mean[c] += p[c] / n;
        }
    }
    let mut var = [0.0; 3];
    for p in lab {
        for c in 0..3 {
            var[c] += (p[c] - mean[c]).powi(2) / n;
        }
    }
    LabStats {
        mean,
        std: var.map(f64::sqrt),
    }
}

/// lαβ statistics of every pixel.
pub fn lab_stats(image: &ColorImage) -> LabStats {
    stats_of(&lab_pixels(image, &LabTransform::default()))
}

/// Shifts and scales each lαβ channel to `target` without clipping the result.
/// A channel with zero spread is only mean-shifted.
pub fn reinhard_transfer(source: &ColorImage, target: &LabStats) -> ColorImage {
    let t = LabTransform::default();
    let lab = lab_pixels(source, &t);
    let src = stats_of(&lab);
    let data = lab
        .iter()
        .flat_map(|p| {
            let mut q = [0.0; 3];
            for c in 0..3 {
                let centred = p[c] - src.mean[c];
                let scaled = if src.std[c] > 0.0 {
                    centred * target.std[c] / src.std[c]
                } else {
                    centred
                };
                q[c] = scaled + target.mean[c];
            }
            t.lab_to_rgb(q)
        })
        .collect();
    ColorImage::new(source.width(), source.height(), data).expect("same size")
}

/// Reinhard normalization, clipped to `[0,255]`.
pub fn reinhard_normalize(source: &ColorImage, target: &LabStats) -> ColorImage {
    reinhard_transfer(source, target).clamped()
}

/// Unit optical-density stain vectors (columns: hematoxylin, eosin) and the
/// 99th-percentile concentration of each stain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StainBasis {
    pub vectors: [[f64; 3]; 2],
    pub max_concentrations: [f64; 2],
}

impl StainBasis {
    /// Normalizes the given columns; concentrations default to 1.
    pub fn from_vectors(h: [f64; 3], e: [f64; 3]) -> Result<Self> {
        let unit = |v: [f64; 3]| -> Result<[f64; 3]> {
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if !(n > 0.0) || v.iter().any(|&x| x < 0.0 || !x.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "stain vector {v:?} must be non-negative and non-zero"
                )));
            }
            Ok(v.map(|x| x / n))
        };
        Ok(Self {
            vectors: [unit(h)?, unit(e)?],
            max_concentrations: [1.0, 1.0],
        })
    }

    pub fn matrix(&self) -> nalgebra::Matrix3x2<f64> {
        nalgebra::Matrix3x2::from_fn(|r, c| self.vectors[c][r])
    }

    /// Optical density `B·c`.
    pub fn mix(&self, c: [f64; 2]) -> [f64; 3] {
        let [h, e] = self.vectors;
        [0, 1, 2].map(|i| h[i] * c[0] + e[i] * c[1])
    }
}

/// Angle between two vectors in degrees.
pub fn angle_deg(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dot: f64 = (0..3).map(|i| a[i] * b[i]).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MacenkoConfig {
    /// Minimum OD norm for a pixel to count as tissue.
    pub od_threshold: f64,
    /// Percentile (and its complement) used for the extreme stain angles.
    pub angle_percentile: f64,
    pub min_tissue_pixels: usize,
    /// Angular spread below which the image is treated as single-stain.
    pub min_spread_deg: f64,
}

impl Default for MacenkoConfig {
    fn default() -> Self {
        Self {
            od_threshold: 0.15,
            angle_percentile: 1.0,
            min_tissue_pixels: 50,
            min_spread_deg: 3.0,
        }
    }
}

/// `−log10((I + 1)/256)` per channel.
pub fn optical_density(p: [f64; 3]) -> [f64; 3] {
    p.map(|v| -((v.clamp(0.0, 255.0) + 1.0) / 256.0).log10())
}

fn od_to_rgb(od: [f64; 3]) -> [f64; 3] {
    od.map(|v| 256.0 * 10f64.powf(-v) - 1.0)
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Linear-interpolated percentile of sorted data.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = (p / 100.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn tissue_od(image: &ColorImage, cfg: &MacenkoConfig) -> Vec<[f64; 3]> {
    image
        .pixels()
        .filter(|&p| !is_background(p))
        .map(optical_density)
        .filter(|od| norm3(*od) > cfg.od_threshold)
        .collect()
}

/// Non-negative least-squares concentrations of one OD pixel.
fn nnls2(gram_inv: &Matrix2<f64>, basis: &StainBasis, od: [f64; 3]) -> [f64; 2] {
    let [h, e] = basis.vectors;
    let bh: f64 = (0..3).map(|i| h[i] * od[i]).sum();
    let be: f64 = (0..3).map(|i| e[i] * od[i]).sum();
    let c = gram_inv * Vector2::new(bh, be);
    if c[0] >= 0.0 && c[1] >= 0.0 {
        return [c[0], c[1]];
    }
    // Active set: one stain alone (unit vectors), or neither.
    let residual = |c: [f64; 2]| norm3([0, 1, 2].map(|i| od[i] - h[i] * c[0] - e[i] * c[1]));
    let candidates = [[bh.max(0.0), 0.0], [0.0, be.max(0.0)]];
    if residual(candidates[0]) <= residual(candidates[1]) {
        candidates[0]
    } else {
        candidates[1]
    }
}

fn gram_inverse(basis: &StainBasis) -> Result<Matrix2<f64>> {
    let m = basis.matrix();
    (m.transpose() * m)
        .try_inverse()
        .ok_or_else(|| Error::DegenerateStains("stain vectors are parallel".into()))
}

/// Per-pixel stain concentrations against `basis`.
pub fn concentrations(image: &ColorImage, basis: &StainBasis) -> Result<Vec<[f64; 2]>> {
    let gi = gram_inverse(basis)?;
    Ok(image
        .pixels()
        .map(|p| nnls2(&gi, basis, optical_density(p)))
        .collect())
}

fn max_concentrations(conc: &[[f64; 2]], cfg: &MacenkoConfig) -> [f64; 2] {
    [0, 1].map(|s| {
        let mut v: Vec<f64> = conc.iter().map(|c| c[s]).collect();
        v.sort_by(f64::total_cmp);
        percentile(&v, 100.0 - cfg.angle_percentile)
    })
}

pub fn macenko_fit(image: &ColorImage) -> Result<StainBasis> {
    macenko_fit_with(image, &MacenkoConfig::default())
}

/// Estimates the two stain vectors from the plane of the tissue OD values and
/// the robust extreme angles within it.
pub fn macenko_fit_with(image: &ColorImage, cfg: &MacenkoConfig) -> Result<StainBasis> {
    let od = tissue_od(image, cfg);
    if od.len() < cfg.min_tissue_pixels {
        return Err(Error::NoTissue(format!(
            "{} tissue pixels, need {}",
            od.len(),
            cfg.min_tissue_pixels
        )));
    }
    let n = od.len() as f64;
    let mut mean = Vector3::zeros();
    for p in &od {
        mean += Vector3::from(*p) / n;
    }
    let mut cov = Matrix3::zeros();
    for p in &od {
        let d = Vector3::from(*p) - mean;
        cov += d * d.transpose() / n;
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let orient = |v: Vector3<f64>| if v.sum() < 0.0 { -v } else { v };
    let v1 = orient(eig.eigenvectors.column(order[0]).into_owned());
    let v2 = orient(eig.eigenvectors.column(order[1]).into_owned());

    let mut angles: Vec<f64> = od
        .iter()
        .map(|p| {
            let p = Vector3::from(*p);
            p.dot(&v2).atan2(p.dot(&v1))
        })
        .collect();
    angles.sort_by(f64::total_cmp);
    let lo = percentile(&angles, cfg.angle_percentile);
    let hi = percentile(&angles, 100.0 - cfg.angle_percentile);
    if (hi - lo).to_degrees() < cfg.min_spread_deg {
        return Err(Error::DegenerateStains(format!(
            "OD angles span only {:.2}°",
            (hi - lo).to_degrees()
        )));
    }
    let unit = |phi: f64| -> [f64; 3] {
        let v = (v1 * phi.cos() + v2 * phi.sin()).map(|x| x.max(0.0));
        let n = v.norm();
        [v[0] / n, v[1] / n, v[2] / n]
    };
    let (a, b) = (unit(lo), unit(hi));
    if !(a.iter().all(|v| v.is_finite()) && b.iter().all(|v| v.is_finite())) {
        return Err(Error::DegenerateStains(
            "a stain vector has no positive component".into(),
        ));
    }
    let (h, e) = if a[2] >= b[2] { (a, b) } else { (b, a) };
    let mut basis = StainBasis {
        vectors: [h, e],
        max_concentrations: [1.0, 1.0],
    };
    let gi = gram_inverse(&basis)?;
    let conc: Vec<[f64; 2]> = od.iter().map(|p| nnls2(&gi, &basis, *p)).collect();
    basis.max_concentrations = max_concentrations(&conc, cfg);
    Ok(basis)
}

/// Re-renders `source` through `target`: concentrations are fitted against the
/// source's own basis, rescaled by the ratio of maximum concentrations and mixed
/// with the target vectors.
pub fn macenko_normalize(source: &ColorImage, target: &StainBasis) -> Result<ColorImage> {
    let src = macenko_fit(source)?;
    macenko_normalize_with_basis(source, &src, target)
}

pub fn macenko_normalize_with_basis(
    source: &ColorImage,
    src: &StainBasis,
    target: &StainBasis,
) -> Result<ColorImage> {
    let gi = gram_inverse(src)?;
    let scale = [0, 1].map(|s| {
        if src.max_concentrations[s] > 0.0 {
            target.max_concentrations[s] / src.max_concentrations[s]
        } else {
            1.0
        }
    });
    Ok(source
        .map_pixels(|p| {
            let c = nnls2(&gi, src, optical_density(p));
            od_to_rgb(target.mix([c[0] * scale[0], c[1] * scale[1]]))
        })
        .clamped())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lab_roundtrip() {
        let t = LabTransform::default();
        for p in [[0.0, 0.0, 0.0], [255.0, 255.0, 255.0], [200.0, 80.0, 150.0]] {
            let q = t.lab_to_rgb(t.rgb_to_lab(p));
            for c in 0..3 {
                assert!((p[c] - q[c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn white_is_achromatic_in_lab() {
        // Rows of the LMS matrix sum to ~1, so grey maps to α ≈ β ≈ 0.
        let lab = LabTransform::default().rgb_to_lab([255.0; 3]);
        assert!(lab[1].abs() < 1e-3 && lab[2].abs() < 1e-3);
    }

    #[test]
    fn constant_grey_follows_target_mean() {
        let img = ColorImage::filled(4, 4, [128.0; 3]);
        let mut target = lab_stats(&img);
        target.mean[0] += 0.05;
        let out = reinhard_transfer(&img, &target);
        let first = out.pixel(0, 0);
        assert!(out.pixels().all(|p| p == first));
        let got = lab_stats(&out);
        assert!((got.mean[0] - target.mean[0]).abs() < 1e-9);
    }

    #[test]
    fn od_of_white_is_zero() {
        assert_eq!(optical_density([255.0; 3]), [0.0; 3]);
    }

    #[test]
    fn white_image_has_no_tissue() {
        let img = ColorImage::filled(16, 16, [255.0; 3]);
        assert!(matches!(macenko_fit(&img), Err(Error::NoTissue(_))));
    }

    #[test]
    fn nnls_recovers_mixture_and_clips() {
        let b = StainBasis::from_vectors([0.65, 0.70, 0.29], [0.07, 0.99, 0.11]).unwrap();
        let gi = gram_inverse(&b).unwrap();
        let c = nnls2(&gi, &b, b.mix([0.4, 0.3]));
        assert!((c[0] - 0.4).abs() < 1e-12 && (c[1] - 0.3).abs() < 1e-12);
        let outside = b.mix([0.5, -0.1]);
        let c = nnls2(&gi, &b, outside);
        assert!(c[0] > 0.0 && c[1] == 0.0);
    }
}
