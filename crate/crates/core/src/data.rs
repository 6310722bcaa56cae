//! Patch datasets on disk and the synthetic two-domain stain generator.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::baselines::{angle_deg, StainBasis};
use crate::error::{Error, Result};
use crate::imaging::{ColorImage, Mask};
use crate::tensor::{Real, Tensor};

/// Conventional H&E optical-density directions (before normalization).
pub const HEMATOXYLIN: [f64; 3] = [0.65, 0.70, 0.29];
pub const EOSIN: [f64; 3] = [0.07, 0.99, 0.11];

/// The default domain-A basis.
pub fn default_basis_a() -> StainBasis {
    StainBasis::from_vectors(HEMATOXYLIN, EOSIN).expect("positive stain vectors")
}

/// Rotates both stain vectors by `degrees` within the plane they span.
pub fn rotate_basis(basis: &StainBasis, degrees: f64) -> Result<StainBasis> {
    let [h, e] = basis.vectors;
    let dot: f64 = (0..3).map(|i| h[i] * e[i]).sum();
    let perp = [0, 1, 2].map(|i| e[i] - dot * h[i]);
    let pn = perp.iter().map(|v| v * v).sum::<f64>().sqrt();
    let u2 = perp.map(|v| v / pn);
    let (s, c) = degrees.to_radians().sin_cos();
    // In (h, u2) coordinates h = (1, 0) and e = (dot, pn); rotate both.
    let rot = |x: f64, y: f64| [0, 1, 2].map(|i| (c * x - s * y) * h[i] + (s * x + c * y) * u2[i]);
    StainBasis::from_vectors(rot(1.0, 0.0), rot(dot, pn))
}

/// The default domain-B basis: domain A turned 15° towards the red end.
pub fn default_basis_b() -> StainBasis {
    rotate_basis(&default_basis_a(), -15.0).expect("rotated basis stays non-negative")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Images per domain.
    pub n_images: usize,
    pub size: usize,
    pub seed: u64,
    pub stain_basis_a: StainBasis,
    pub stain_basis_b: StainBasis,
    /// Expected number of blobs per 64×64 area.
    pub blob_density: f64,
    /// Blobs are added until they cover at least this fraction of the image
    /// (when the density is positive), so that both stains are well represented.
    pub min_coverage: f64,
    /// Semi-axis range of the elliptical blobs, in pixels.
    pub radius_range: [f64; 2],
    /// Width of the Gaussian that softens blob edges.
    pub edge_sigma: f64,
    /// Relative multiplicative noise on the main stain of each pixel.
    pub concentration_noise: f64,
    /// Concentration of hematoxylin inside blobs and eosin outside.
    pub blob_concentration: f64,
    pub stroma_concentration: f64,
    /// Spread of the zero-mean, clipped secondary stain.
    pub secondary_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_images: 200,
            size: 64,
            seed: 0,
            stain_basis_a: default_basis_a(),
            stain_basis_b: default_basis_b(),
            blob_density: 6.0,
            min_coverage: 0.06,
            radius_range: [3.0, 7.0],
            edge_sigma: 1.0,
            concentration_noise: 0.15,
            blob_concentration: 0.9,
            stroma_concentration: 0.45,
            secondary_noise: 0.12,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::Config(
                "synthetic images must be at least 8×8".into(),
            ));
        }
        let [r0, r1] = self.radius_range;
        if !(r0 > 0.0 && r1 >= r0) {
            return Err(Error::Config(
                "radius_range must be positive and ordered".into(),
            ));
        }
        if !(self.blob_density >= 0.0) || !(self.edge_sigma >= 0.0) {
            return Err(Error::Config(
                "blob_density and edge_sigma must be non-negative".into(),
            ));
        }
        if !(0.0..=0.5).contains(&self.min_coverage) {
            return Err(Error::Config("min_coverage must lie in [0, 0.5]".into()));
        }
        for (name, v) in [
            ("concentration_noise", self.concentration_noise),
            ("blob_concentration", self.blob_concentration),
            ("stroma_concentration", self.stroma_concentration),
            ("secondary_noise", self.secondary_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative"
                )));
            }
        }
        for basis in [&self.stain_basis_a, &self.stain_basis_b] {
            StainBasis::from_vectors(basis.vectors[0], basis.vectors[1])
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        for s in 0..2 {
            let d = angle_deg(self.stain_basis_a.vectors[s], self.stain_basis_b.vectors[s]);
            if d < 10.0 {
                return Err(Error::Config(format!(
                    "stain {s} differs by only {d:.1}° between domains (need ≥ 10°)"
                )));
            }
        }
        Ok(())
    }
}

/// One synthetic image with its structure mask and stain concentrations.
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub image: ColorImage,
    pub mask: Mask,
    pub concentrations: Vec<[f64; 2]>,
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub domain_a: Vec<SynthSample>,
    pub domain_b: Vec<SynthSample>,
}

fn gaussian_blur(v: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return v.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let ks: f64 = k.iter().sum();
    let k: Vec<f64> = k.into_iter().map(|x| x / ks).collect();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * v[y * w + clamp(x as isize + d, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * tmp[clamp(y as isize + d, h) * w + x])
                .sum();
        }
    }
    out
}

/// Beer–Lambert rendering `I = 255·10^(−B·c)`, unquantized.
pub fn render(basis: &StainBasis, c: [f64; 2]) -> [f64; 3] {
    basis.mix(c).map(|od| 255.0 * 10f64.powf(-od))
}

/// `−log10(I/255)`, the inverse of [`render`].
pub fn render_od(p: [f64; 3]) -> [f64; 3] {
    p.map(|v| -(v / 255.0).log10())
}

/// Blob layout and concentrations for one image (independent of the basis).
fn sample_structure(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (Mask, Vec<[f64; 2]>) {
    let n = cfg.size;
    let area = (n * n) as f64 / 4096.0;
    let expected = cfg.blob_density * area;
    let blobs = if expected > 0.0 {
        rng.gen_range(0.5 * expected..=1.5 * expected).round() as usize
    } else {
        0
    };
    let mut hard = vec![0.0; n * n];
    let mut covered = 0;
    let mut drawn = 0;
    while drawn < blobs || (blobs > 0 && (covered as f64) < cfg.min_coverage * (n * n) as f64) {
        drawn += 1;
        let (cx, cy) = (rng.gen_range(0.0..n as f64), rng.gen_range(0.0..n as f64));
        let rx = rng.gen_range(cfg.radius_range[0]..=cfg.radius_range[1]);
        let ry = rng.gen_range(cfg.radius_range[0]..=cfg.radius_range[1]);
        let (s, c) = rng.gen_range(0.0..std::f64::consts::PI).sin_cos();
        for y in 0..n {
            for x in 0..n {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
                if (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 && hard[y * n + x] == 0.0 {
                    hard[y * n + x] = 1.0;
                    covered += 1;
                }
            }
        }
    }
    let soft = gaussian_blur(&hard, n, n, cfg.edge_sigma);
    let mask = Mask::new(n, n, soft.iter().map(|&s| s > 0.5).collect()).expect("square mask");

    // Slowly varying stroma density: two random low-frequency cosines.
    let waves: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let freq = rng.gen_range(0.5..1.5) * std::f64::consts::TAU / n as f64;
            (theta, freq, rng.gen_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let main_noise = Normal::new(0.0, cfg.concentration_noise).expect("finite noise");
    let minor_noise = Normal::new(0.0, cfg.secondary_noise).expect("finite noise");
    let conc = (0..n * n)
        .map(|i| {
            let (x, y) = ((i % n) as f64, (i / n) as f64);
            let field = 1.0
                + 0.2
                    * waves
                        .iter()
                        .map(|(t, f, p)| (f * (x * t.cos() + y * t.sin()) + p).cos())
                        .sum::<f64>()
                    / 2.0;
            let s = soft[i];
            let h = s * cfg.blob_concentration * (1.0 + main_noise.sample(rng)).max(0.0);
            let e = (1.0 - s)
                * cfg.stroma_concentration
                * field
                * (1.0 + main_noise.sample(rng)).max(0.0);
            // Each pixel also carries a little of the other stain; clipping the
            // zero-mean noise leaves many pixels with exactly one stain.
            let minor = minor_noise.sample(rng).max(0.0);
            if s > 0.5 {
                [h, e + minor]
            } else {
                [h + minor, e]
            }
        })
        .collect();
    (mask, conc)
}

fn domain(cfg: &SynthConfig, basis: &StainBasis, tag: u64) -> Vec<SynthSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (tag << 48));
    (0..cfg.n_images)
        .map(|_| {
            let (mask, concentrations) = sample_structure(cfg, &mut rng);
            let data = concentrations
                .iter()
                .flat_map(|&c| render(basis, c))
                .collect();
            let image = ColorImage::new(cfg.size, cfg.size, data).expect("square image");
            SynthSample {
                image,
                mask,
                concentrations,
            }
        })
        .collect()
}

/// Generates both domains. Domain A renders through `stain_basis_a`, domain B
/// through `stain_basis_b`; structures are drawn independently per domain.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let ds = SynthDataset {
        domain_a: domain(cfg, &cfg.stain_basis_a, 1),
        domain_b: domain(cfg, &cfg.stain_basis_b, 2),
    };
    if cfg.n_images > 0 && cfg.blob_density > 0.0 {
        let mean = |d: &[SynthSample]| {
            let mut m = [0.0; 3];
            for s in d {
                let c = s.image.channel_means();
                for i in 0..3 {
                    m[i] += c[i] / d.len() as f64;
                }
            }
            m
        };
        let (ma, mb) = (mean(&ds.domain_a), mean(&ds.domain_b));
        let gap = (0..3).map(|i| (ma[i] - mb[i]).abs()).fold(0.0, f64::max);
        if gap < 10.0 {
            return Err(Error::Config(format!(
                "domain colour gap is only {gap:.1} (need ≥ 10)"
            )));
        }
    }
    Ok(ds)
}

pub const DOMAIN_DIRS: [&str; 2] = ["domain_a", "domain_b"];

fn file_name(i: usize) -> String {
    format!("{i:04}.png")
}

/// Writes `root/{domain_a,domain_b}/{images,masks}/NNNN.png`.
pub fn write_synthetic(ds: &SynthDataset, root: &Path) -> Result<()> {
    for (dir, samples) in DOMAIN_DIRS.iter().zip([&ds.domain_a, &ds.domain_b]) {
        let base = root.join(dir);
        for sub in ["images", "masks"] {
            let d = base.join(sub);
            if d.exists() {
                fs::remove_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            }
        }
        for (i, s) in samples.iter().enumerate() {
            s.image.save(&base.join("images").join(file_name(i)))?;
            s.mask.save(&base.join("masks").join(file_name(i)))?;
        }
    }
    Ok(())
}

/// Which stain domain a dataset belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

impl Domain {
    /// Recognizes the `domain_a` / `domain_b` directory names.
    pub fn from_dir(path: &Path) -> Option<Self> {
        match path.file_name()?.to_str()? {
            n if n == DOMAIN_DIRS[0] => Some(Domain::A),
            n if n == DOMAIN_DIRS[1] => Some(Domain::B),
            _ => None,
        }
    }
}

/// Images (and masks, when a sibling `masks/` directory has them) of one domain.
#[derive(Clone, Debug)]
pub struct PatchDataset {
    pub root: PathBuf,
    /// Taken from the directory name when it is `domain_a` or `domain_b`.
    pub domain: Option<Domain>,
    pub paths: Vec<PathBuf>,
    pub patch_size: usize,
    pub images: Vec<ColorImage>,
    pub masks: Option<Vec<Mask>>,
}

impl PatchDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `N×3×P×P` batch in `[−1,1]`.
    pub fn to_symmetric<T: Real>(&self) -> Result<Tensor<T>> {
        stack_images(&self.images, 2.0 / 255.0, -1.0)
    }

    /// `N×3×P×P` batch in `[0,1]`.
    pub fn to_unit<T: Real>(&self) -> Result<Tensor<T>> {
        stack_images(&self.images, 1.0 / 255.0, 0.0)
    }

    pub fn mask_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        let masks = self
            .masks
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("{} has no masks", self.root.display())))?;
        Tensor::stack(&masks.iter().map(Mask::to_tensor).collect::<Vec<_>>())
    }
}

/// Images in `[0,1]` and their masks, pooled over every domain that has masks,
/// for fitting the semantic net.
pub fn semantic_training_set<T: Real>(domains: &[&PatchDataset]) -> Result<(Tensor<T>, Tensor<T>)> {
    let (mut images, mut masks) = (Vec::new(), Vec::new());
    for d in domains {
        match &d.masks {
            Some(m) => {
                images.extend(d.images.iter().cloned());
                masks.extend(m.iter().map(Mask::to_tensor));
            }
            None => warn!(
                "{} has no masks; not used for semantic pretraining",
                d.root.display()
            ),
        }
    }
    if images.is_empty() {
        return Err(Error::InvalidInput(
            "semantic pretraining needs masks in at least one domain".into(),
        ));
    }
    Ok((
        stack_images(&images, 1.0 / 255.0, 0.0)?,
        Tensor::stack(&masks)?,
    ))
}

pub fn stack_images<T: Real>(images: &[ColorImage], scale: f64, shift: f64) -> Result<Tensor<T>> {
    Tensor::stack(
        &images
            .iter()
            .map(|i| i.to_tensor(scale, shift))
            .collect::<Vec<_>>(),
    )
}

/// Sorted PNG files directly inside `dir`.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file()
            && path
                .extension()
                .is_some_and(|x| x.eq_ignore_ascii_case("png"))
        {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Loads a domain directory: either `root/images` (+ optional `root/masks`) or
/// PNGs directly under `root`. Larger images are centre-cropped to
/// `patch_size`; smaller ones are skipped with a warning.
pub fn load_patches(root: &Path, patch_size: usize) -> Result<PatchDataset> {
    let image_dir = if root.join("images").is_dir() {
        root.join("images")
    } else {
        root.to_path_buf()
    };
    let mask_dir = root.join("masks");
    let files = list_pngs(&image_dir)?;
    if files.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no PNG images in {}",
            image_dir.display()
        )));
    }
    let with_masks = mask_dir.is_dir();
    let (mut paths, mut images, mut masks) = (Vec::new(), Vec::new(), Vec::new());
    for path in files {
        let img = ColorImage::load(&path)?;
        let Some(crop) = img.center_crop(patch_size, patch_size) else {
            warn!(
                "skipping {}: {}×{} is smaller than {patch_size}",
                path.display(),
                img.width(),
                img.height()
            );
            continue;
        };
        if with_masks {
            let mp = mask_dir.join(path.file_name().expect("file name"));
            let mask = Mask::load(&mp)?;
            masks.push(mask.center_crop(patch_size, patch_size).ok_or_else(|| {
                Error::ShapeMismatch(format!("{} is smaller than its image", mp.display()))
            })?);
        }
        images.push(crop);
        paths.push(path);
    }
    if images.is_empty() {
        return Err(Error::InvalidInput(format!(
            "every image in {} is smaller than {patch_size}",
            image_dir.display()
        )));
    }
    Ok(PatchDataset {
        root: root.to_path_buf(),
        domain: Domain::from_dir(root),
        paths,
        patch_size,
        images,
        masks: with_masks.then_some(masks),
    })
}

/// Seeded disjoint split by fractions (largest-remainder rounding).
pub fn split<T: Clone>(
    items: &[T],
    fractions: [f64; 3],
    seed: u64,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || fractions.iter().any(|f| *f < 0.0) {
        return Err(Error::InvalidInput(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let n = items.len();
    let exact = fractions.map(|f| f * n as f64);
    let mut sizes = exact.map(|x| x.floor() as usize);
    let mut rest = n - sizes.iter().sum::<usize>();
    let mut by_remainder = [0, 1, 2];
    by_remainder
        .sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    for &i in by_remainder.iter().cycle() {
        if rest == 0 {
            break;
        }
        sizes[i] += 1;
        rest -= 1;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take =
        |r: std::ops::Range<usize>| idx[r].iter().map(|&i| items[i].clone()).collect::<Vec<T>>();
    Ok((
        take(0..sizes[0]),
        take(sizes[0]..sizes[0] + sizes[1]),
        take(sizes[0] + sizes[1]..n),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_images: 3,
            size: 32,
            ..Default::default()
        }
    }

    #[test]
    fn default_b_basis_is_rotated_fifteen_degrees() {
        let (a, b) = (default_basis_a(), default_basis_b());
        for s in 0..2 {
            assert!((angle_deg(a.vectors[s], b.vectors[s]) - 15.0).abs() < 1e-9);
            assert!(b.vectors[s].iter().all(|&v| v >= 0.0));
        }
        // The angle between the two stains is preserved by the rotation.
        let ab = angle_deg(a.vectors[0], a.vectors[1]);
        assert!((angle_deg(b.vectors[0], b.vectors[1]) - ab).abs() < 1e-9);
    }

    #[test]
    fn zero_density_gives_empty_masks() {
        let ds = generate_synthetic(&SynthConfig {
            blob_density: 0.0,
            ..small()
        })
        .unwrap();
        assert!(ds.domain_a.iter().all(|s| s.mask.count() == 0));
        // Only the clipped secondary noise remains for hematoxylin.
        let h: Vec<f64> = ds
            .domain_a
            .iter()
            .flat_map(|s| s.concentrations.iter().map(|c| c[0]))
            .collect();
        let mean = h.iter().sum::<f64>() / h.len() as f64;
        assert!(mean < 0.08, "mean hematoxylin {mean}");
    }

    #[test]
    fn generation_is_deterministic() {
        let x = generate_synthetic(&small()).unwrap();
        let y = generate_synthetic(&small()).unwrap();
        for (a, b) in x.domain_a.iter().zip(&y.domain_a) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.mask, b.mask);
        }
    }

    #[test]
    fn images_in_range_and_od_roundtrips() {
        let ds = generate_synthetic(&small()).unwrap();
        let basis = small().stain_basis_a;
        for s in &ds.domain_a {
            for (p, c) in s.image.pixels().zip(&s.concentrations) {
                assert!(p.iter().all(|v| (0.0..=255.0).contains(v)));
                let od = render_od(p);
                let want = basis.mix(*c);
                for i in 0..3 {
                    assert!((od[i] - want[i]).abs() < 1e-3);
                }
            }
        }
    }

    #[test]
    fn too_similar_bases_are_rejected() {
        let cfg = SynthConfig {
            stain_basis_b: rotate_basis(&default_basis_a(), -5.0).unwrap(),
            ..small()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let items: Vec<usize> = (0..100).collect();
        let (a, b, c) = split(&items, [0.5, 0.3, 0.2], 4).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (50, 30, 20));
        let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort();
        assert_eq!(all, items);
        assert_eq!(split(&items, [0.5, 0.3, 0.2], 4).unwrap().0, a);
        assert!(split(&items, [0.5, 0.3, 0.3], 4).is_err());
    }

    #[test]
    fn structures_reach_min_coverage() {
        let cfg = SynthConfig {
            n_images: 20,
            blob_density: 8.0,
            min_coverage: 0.1,
            ..small()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        for s in ds.domain_a.iter().chain(&ds.domain_b) {
            // Blurring moves the 0.5 contour only slightly; allow for it.
            assert!(
                s.mask.count() as f64 >= 0.08 * 32.0 * 32.0,
                "{}",
                s.mask.count()
            );
        }
        assert!(matches!(
            generate_synthetic(&SynthConfig {
                min_coverage: 0.9,
                ..small()
            }),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn written_layout_loads_with_labels_and_masks() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&small()).unwrap();
        write_synthetic(&ds, dir.path()).unwrap();
        let a = load_patches(&dir.path().join("domain_a"), 32).unwrap();
        let b = load_patches(&dir.path().join("domain_b"), 32).unwrap();
        assert_eq!((a.domain, b.domain), (Some(Domain::A), Some(Domain::B)));
        assert_eq!(a.masks.as_ref().unwrap()[1], ds.domain_a[1].mask);
        assert!(a.images[2].max_abs_diff(&ds.domain_a[2].image) <= 0.5);
        let (x, m) = semantic_training_set::<f32>(&[&a, &b]).unwrap();
        assert_eq!((x.shape(), m.shape()), ([6, 3, 32, 32], [6, 1, 32, 32]));
    }

    #[test]
    fn load_crops_and_skips() {
        let dir = tempfile::tempdir().unwrap();
        ColorImage::filled(300, 300, [10.0, 20.0, 30.0])
            .save(&dir.path().join("a.png"))
            .unwrap();
        ColorImage::filled(100, 100, [1.0; 3])
            .save(&dir.path().join("b.png"))
            .unwrap();
        let ds = load_patches(dir.path(), 256).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.domain, None);
        assert_eq!((ds.images[0].width(), ds.images[0].height()), (256, 256));
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_patches(empty.path(), 8),
            Err(Error::InvalidInput(_))
        ));
    }
}
