//! Pixel-adaptive convolution.
//!
//! Output pixel `i` sums its `k×k` neighbourhood `j`, each neighbour weighted
//! by the spatial kernel `W[p_i − p_j]` and by a Gaussian affinity
//! `K(f_i, f_j) = exp(−‖f_i − f_j‖² / 2σ²)` between guidance features. With
//! `K ≡ 1` the operator reduces to a standard convolution.
//!
//! Each output filter owns its own σ, stored and optimized as `log σ`.

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Real, Tensor};

pub use crate::kernels::AffinityMode;

/// Declared value range of a [`FeatureGrid`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueRange {
    Unbounded,
    UnitInterval,
    Symmetric,
}

impl ValueRange {
    fn bounds(self) -> Option<(f64, f64)> {
        match self {
            ValueRange::Unbounded => None,
            ValueRange::UnitInterval => Some((0.0, 1.0)),
            ValueRange::Symmetric => Some((-1.0, 1.0)),
        }
    }
}

/// A single `H×W×C` feature map with finite entries inside its declared range.
///
/// Storage is channel-planar; use [`FeatureGrid::get`] for `(y, x, c)` access.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid<T: Real> {
    tensor: Tensor<T>,
    range: ValueRange,
}

impl<T: Real> FeatureGrid<T> {
    /// Builds a grid from interleaved `H×W×C` data.
    pub fn from_hwc(h: usize, w: usize, c: usize, hwc: &[T], range: ValueRange) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::ShapeMismatch(format!("empty grid {h}×{w}×{c}")));
        }
        if hwc.len() != h * w * c {
            return Err(Error::ShapeMismatch(format!(
                "{} values cannot fill {h}×{w}×{c}",
                hwc.len()
            )));
        }
        let mut planar = vec![T::zero(); hwc.len()];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    planar[(ch * h + y) * w + x] = hwc[(y * w + x) * c + ch];
                }
            }
        }
        Self::from_tensor(Tensor::from_vec([1, c, h, w], planar)?, range)
    }

    /// Wraps a batch-of-one tensor, validating finiteness and range.
    pub fn from_tensor(tensor: Tensor<T>, range: ValueRange) -> Result<Self> {
        let [n, c, h, w] = tensor.shape();
        if n != 1 || c == 0 || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch(format!(
                "feature grid needs a single non-empty image, got {:?}",
                tensor.shape()
            )));
        }
        if !tensor.is_finite() {
            return Err(Error::InvalidInput(
                "feature grid contains non-finite values".into(),
            ));
        }
        if let Some((lo, hi)) = range.bounds() {
            let (lo, hi) = (T::lit(lo), T::lit(hi));
            if tensor.data().iter().any(|&v| v < lo || v > hi) {
                return Err(Error::InvalidInput(format!(
                    "values fall outside the declared {range:?} range"
                )));
            }
        }
        Ok(Self { tensor, range })
    }

    pub fn height(&self) -> usize {
        self.tensor.height()
    }

    pub fn width(&self) -> usize {
        self.tensor.width()
    }

    pub fn channels(&self) -> usize {
        self.tensor.channels()
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.tensor.at(0, c, y, x)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }
}

/// Configuration of one pixel-adaptive convolution layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PacLayerSpec {
    pub kernel_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub sigma_init: f64,
    pub affinity_mode: AffinityMode,
}

impl PacLayerSpec {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        Self {
            kernel_size: 3,
            in_channels,
            out_channels,
            sigma_init: 1.0,
            affinity_mode: AffinityMode::Gaussian,
        }
    }

    /// Zero padding that keeps the spatial size unchanged.
    pub fn padding(&self) -> usize {
        (self.kernel_size - 1) / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidParameter(
                "channel counts must be positive".into(),
            ));
        }
        if !(self.sigma_init > 0.0 && self.sigma_init.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sigma must be positive and finite, got {}",
                self.sigma_init
            )));
        }
        Ok(())
    }
}

/// Affinities `K(f_i, f_j)` for every centre `i` and every window offset.
#[derive(Clone, Debug)]
pub struct AffinityWindow<T> {
    pub height: usize,
    pub width: usize,
    pub kernel_size: usize,
    /// `[y][x][ky][kx]`.
    pub values: Vec<T>,
}

impl<T: Real> AffinityWindow<T> {
    pub fn get(&self, y: usize, x: usize, ky: usize, kx: usize) -> T {
        let k = self.kernel_size;
        self.values[((y * self.width + x) * k + ky) * k + kx]
    }
}

/// Gaussian affinities of a guidance map at bandwidth `spec.sigma_init`.
pub fn gaussian_affinity<T: Real>(
    guidance: &FeatureGrid<T>,
    spec: &PacLayerSpec,
) -> Result<AffinityWindow<T>> {
    spec.validate()?;
    if spec.affinity_mode != AffinityMode::Gaussian {
        return Err(Error::InvalidParameter(
            "affinity requested for a constant-one layer".into(),
        ));
    }
    let k = spec.kernel_size;
    let (h, w) = (guidance.height(), guidance.width());
    let dist = kernels::guidance_distances(guidance.tensor(), k);
    let coef = T::lit(-0.5 / (spec.sigma_init * spec.sigma_init));
    let p = h * w;
    let mut values = vec![T::zero(); p * k * k];
    for off in 0..k * k {
        for i in 0..p {
            values[i * k * k + off] = (coef * dist[off * p + i]).exp();
        }
    }
    Ok(AffinityWindow {
        height: h,
        width: w,
        kernel_size: k,
        values,
    })
}

/// Trainable state of a PAC layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PacWeights<T: Real> {
    /// `[out][in][k][k]`.
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
    /// One `log σ` per output filter.
    pub log_sigma: Vec<T>,
}

impl<T: Real> PacWeights<T> {
    /// Zero kernels with every σ at `spec.sigma_init`.
    pub fn zeros(spec: &PacLayerSpec) -> Self {
        let k = spec.kernel_size;
        Self {
            weight: Tensor::zeros([spec.out_channels, spec.in_channels, k, k]),
            bias: vec![T::zero(); spec.out_channels],
            log_sigma: vec![T::lit(spec.sigma_init.ln()); spec.out_channels],
        }
    }

    pub fn sigma(&self) -> Vec<T> {
        self.log_sigma.iter().map(|v| v.exp()).collect()
    }

    fn check(&self, spec: &PacLayerSpec) -> Result<()> {
        let k = spec.kernel_size;
        let expected = [spec.out_channels, spec.in_channels, k, k];
        if self.weight.shape() != expected
            || self.bias.len() != spec.out_channels
            || self.log_sigma.len() != spec.out_channels
        {
            return Err(Error::ShapeMismatch(format!(
                "weights {:?} do not match layer {:?}",
                self.weight.shape(),
                expected
            )));
        }
        if self.log_sigma.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "sigma must be positive and finite".into(),
            ));
        }
        Ok(())
    }
}

fn check_inputs<T: Real>(
    input: &FeatureGrid<T>,
    guidance: Option<&FeatureGrid<T>>,
    spec: &PacLayerSpec,
    weights: &PacWeights<T>,
) -> Result<()> {
    spec.validate()?;
    weights.check(spec)?;
    if input.channels() != spec.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "input has {} channels, layer expects {}",
            input.channels(),
            spec.in_channels
        )));
    }
    if spec.affinity_mode == AffinityMode::Gaussian {
        let g = guidance
            .ok_or_else(|| Error::InvalidInput("gaussian affinity needs guidance".into()))?;
        if (g.height(), g.width()) != (input.height(), input.width()) {
            return Err(Error::ShapeMismatch(format!(
                "guidance {}×{} vs input {}×{}",
                g.height(),
                g.width(),
                input.height(),
                input.width()
            )));
        }
    }
    Ok(())
}

/// Applies one PAC layer; output keeps the input's spatial size.
pub fn pac_forward<T: Real>(
    input: &FeatureGrid<T>,
    guidance: Option<&FeatureGrid<T>>,
    spec: &PacLayerSpec,
    weights: &PacWeights<T>,
) -> Result<FeatureGrid<T>> {
    check_inputs(input, guidance, spec, weights)?;
    let (out, _) = kernels::pac_forward(
        input.tensor(),
        guidance.map(FeatureGrid::tensor),
        weights.weight.data(),
        Some(&weights.bias),
        &weights.log_sigma,
        spec.out_channels,
        spec.kernel_size,
        spec.affinity_mode,
    );
    FeatureGrid::from_tensor(out, ValueRange::Unbounded)
}

/// Gradients of `⟨upstream, pac_forward(...)⟩` with respect to every argument.
#[derive(Clone, Debug)]
pub struct PacGradients<T: Real> {
    pub input: Tensor<T>,
    /// `None` for constant-one layers, which ignore guidance.
    pub guidance: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
    pub sigma: Vec<T>,
    pub log_sigma: Vec<T>,
}

pub fn pac_gradients<T: Real>(
    input: &FeatureGrid<T>,
    guidance: Option<&FeatureGrid<T>>,
    spec: &PacLayerSpec,
    weights: &PacWeights<T>,
    upstream: &Tensor<T>,
) -> Result<PacGradients<T>> {
    check_inputs(input, guidance, spec, weights)?;
    let expected = [1, spec.out_channels, input.height(), input.width()];
    if upstream.shape() != expected {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient {:?}, expected {:?}",
            upstream.shape(),
            expected
        )));
    }
    let mut g = Graph::new();
    let x = g.param(input.tensor().clone());
    let gv = guidance.map(|f| g.param(f.tensor().clone()));
    let w = g.param(weights.weight.clone());
    let b = g.param(Tensor::from_vec(
        [1, spec.out_channels, 1, 1],
        weights.bias.clone(),
    )?);
    let ls = g.param(Tensor::from_vec(
        [1, spec.out_channels, 1, 1],
        weights.log_sigma.clone(),
    )?);
    let y = g.pac2d(x, gv, w, Some(b), ls, spec.affinity_mode);
    let mut grads = g.backward_with(y, upstream.clone());
    let log_sigma = grads.take(ls).map(Tensor::into_vec).unwrap_or_default();
    let sigma = log_sigma
        .iter()
        .zip(&weights.log_sigma)
        .map(|(&d, &l)| d / l.exp())
        .collect();
    Ok(PacGradients {
        input: grads.take(x).expect("input gradient"),
        guidance: match spec.affinity_mode {
            AffinityMode::Gaussian => gv.and_then(|v| grads.take(v)),
            AffinityMode::ConstantOne => None,
        },
        weight: grads.take(w).expect("weight gradient"),
        bias: grads.take(b).map(Tensor::into_vec).unwrap_or_default(),
        sigma,
        log_sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, c: usize, f: impl Fn(usize) -> f64) -> FeatureGrid<f64> {
        let v: Vec<f64> = (0..h * w * c).map(f).collect();
        FeatureGrid::from_hwc(h, w, c, &v, ValueRange::Unbounded).unwrap()
    }

    #[test]
    fn affinity_of_identical_features_is_one() {
        let g = grid(4, 4, 2, |_| 0.3);
        let a = gaussian_affinity(&g, &PacLayerSpec::new(1, 1)).unwrap();
        for y in 1..3 {
            for x in 1..3 {
                for ky in 0..3 {
                    for kx in 0..3 {
                        assert_eq!(a.get(y, x, ky, kx), 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn affinity_hand_values() {
        // D = 1, σ = 1, |f_i − f_j| = √2  →  exp(−1)
        let s2 = 2f64.sqrt();
        let g = FeatureGrid::from_hwc(1, 2, 1, &[0.0, s2], ValueRange::Unbounded).unwrap();
        let a = gaussian_affinity(&g, &PacLayerSpec::new(1, 1)).unwrap();
        assert!((a.get(0, 0, 1, 2) - (-1f64).exp()).abs() < 1e-15);
        assert!((a.get(0, 0, 1, 2) - 0.367879).abs() < 1e-6);

        // D = 2, σ = 0.5, f_i − f_j = (3, 4)  →  exp(−50)
        let g =
            FeatureGrid::from_hwc(1, 2, 2, &[0.0, 0.0, 3.0, 4.0], ValueRange::Unbounded).unwrap();
        let mut spec = PacLayerSpec::new(1, 1);
        spec.sigma_init = 0.5;
        let a = gaussian_affinity(&g, &spec).unwrap();
        let k = a.get(0, 0, 1, 2);
        assert!(k > 0.0);
        assert!((k - (-50f64).exp()).abs() < 1e-35);
    }

    #[test]
    fn affinity_rejects_bad_sigma() {
        let g = grid(2, 2, 1, |i| i as f64);
        let mut spec = PacLayerSpec::new(1, 1);
        spec.sigma_init = 0.0;
        assert!(matches!(
            gaussian_affinity(&g, &spec),
            Err(Error::InvalidParameter(_))
        ));
        spec.sigma_init = -1.0;
        assert!(matches!(
            gaussian_affinity(&g, &spec),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn non_finite_guidance_is_invalid_input() {
        let err = FeatureGrid::from_hwc(1, 1, 1, &[f64::NAN], ValueRange::Unbounded).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn declared_range_is_enforced() {
        assert!(FeatureGrid::from_hwc(1, 2, 1, &[0.0, 1.5], ValueRange::UnitInterval).is_err());
        assert!(FeatureGrid::from_hwc(1, 2, 1, &[-1.0, 1.0], ValueRange::Symmetric).is_ok());
    }

    #[test]
    fn one_by_one_kernel_is_affine() {
        let mut spec = PacLayerSpec::new(1, 1);
        spec.kernel_size = 1;
        let mut wts = PacWeights::zeros(&spec);
        wts.weight.data_mut()[0] = 2.5;
        wts.bias[0] = -0.75;
        let x = grid(1, 1, 1, |_| 3.0);
        let g = grid(1, 1, 1, |_| 0.2);
        let y = pac_forward(&x, Some(&g), &spec, &wts).unwrap();
        assert_eq!(y.get(0, 0, 0), 2.5 * 3.0 - 0.75);
    }

    #[test]
    fn all_ones_window_counts_neighbours() {
        let spec = PacLayerSpec::new(1, 1);
        let mut wts = PacWeights::zeros(&spec);
        wts.weight.data_mut().fill(1.0);
        let x = grid(3, 3, 1, |_| 1.0);
        let g = grid(3, 3, 1, |_| 0.0);
        let y = pac_forward(&x, Some(&g), &spec, &wts).unwrap();
        assert_eq!(y.get(1, 1, 0), 9.0);
        for (yy, xx) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(y.get(yy, xx, 0), 4.0);
        }
        assert_eq!(y.get(0, 1, 0), 6.0);
    }

    #[test]
    fn spatial_mismatch_is_rejected() {
        let spec = PacLayerSpec::new(1, 1);
        let wts = PacWeights::zeros(&spec);
        let x = grid(4, 4, 1, |_| 1.0);
        let g = grid(2, 2, 1, |_| 0.0);
        assert!(matches!(
            pac_forward(&x, Some(&g), &spec, &wts),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn bias_gradient_sums_upstream() {
        let spec = PacLayerSpec::new(2, 3);
        let wts = PacWeights::zeros(&spec);
        let x = grid(4, 5, 2, |_| 0.7);
        let g = grid(4, 5, 2, |_| 0.1);
        let up =
            Tensor::from_vec([1, 3, 4, 5], (0..60).map(|i| i as f64 * 0.01).collect()).unwrap();
        let grads = pac_gradients(&x, Some(&g), &spec, &wts, &up).unwrap();
        for o in 0..3 {
            let expected: f64 = up.data()[o * 20..(o + 1) * 20].iter().sum();
            assert!((grads.bias[o] - expected).abs() < 1e-12);
        }
    }

    /// Loss `⟨u, pac(x, f)⟩` evaluated directly, for finite differences.
    fn pairing(
        x: &FeatureGrid<f64>,
        f: &FeatureGrid<f64>,
        spec: &PacLayerSpec,
        w: &PacWeights<f64>,
        u: &Tensor<f64>,
    ) -> f64 {
        let y = pac_forward(x, Some(f), spec, w).unwrap();
        y.tensor()
            .data()
            .iter()
            .zip(u.data())
            .map(|(a, b)| a * b)
            .sum()
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut spec = PacLayerSpec::new(2, 3);
        spec.sigma_init = 0.8;
        let (h, wd) = (5, 4);
        let x = grid(h, wd, 2, |i| ((i * 7 % 13) as f64 / 13.0) - 0.5);
        let f = grid(h, wd, 2, |i| ((i * 5 % 11) as f64 / 11.0) * 0.9);
        let mut w = PacWeights::zeros(&spec);
        for (i, v) in w.weight.data_mut().iter_mut().enumerate() {
            *v = ((i * 17 % 23) as f64 / 23.0) - 0.5;
        }
        w.bias = vec![0.1, -0.2, 0.05];
        w.log_sigma = vec![-0.2, 0.1, 0.3];
        let u = Tensor::from_vec(
            [1, 3, h, wd],
            (0..3 * h * wd)
                .map(|i| ((i * 3 % 7) as f64) - 3.0)
                .collect(),
        )
        .unwrap();
        let grads = pac_gradients(&x, Some(&f), &spec, &w, &u).unwrap();
        let eps = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / n.abs().max(1e-3);

        for i in 0..x.tensor().len() {
            let mut t = x.tensor().clone();
            t.data_mut()[i] += eps;
            let p = pairing(
                &FeatureGrid::from_tensor(t.clone(), ValueRange::Unbounded).unwrap(),
                &f,
                &spec,
                &w,
                &u,
            );
            t.data_mut()[i] -= 2.0 * eps;
            let m = pairing(
                &FeatureGrid::from_tensor(t, ValueRange::Unbounded).unwrap(),
                &f,
                &spec,
                &w,
                &u,
            );
            assert!(rel(grads.input.data()[i], (p - m) / (2.0 * eps)) < 1e-6);
        }
        let gg = grads.guidance.as_ref().unwrap();
        for i in 0..f.tensor().len() {
            let mut t = f.tensor().clone();
            t.data_mut()[i] += eps;
            let p = pairing(
                &x,
                &FeatureGrid::from_tensor(t.clone(), ValueRange::Unbounded).unwrap(),
                &spec,
                &w,
                &u,
            );
            t.data_mut()[i] -= 2.0 * eps;
            let m = pairing(
                &x,
                &FeatureGrid::from_tensor(t, ValueRange::Unbounded).unwrap(),
                &spec,
                &w,
                &u,
            );
            assert!(
                rel(gg.data()[i], (p - m) / (2.0 * eps)) < 1e-5,
                "guidance {i}"
            );
        }
        for i in 0..w.weight.len() {
            let mut wp = w.clone();
            wp.weight.data_mut()[i] += eps;
            let mut wm = w.clone();
            wm.weight.data_mut()[i] -= eps;
            let fd =
                (pairing(&x, &f, &spec, &wp, &u) - pairing(&x, &f, &spec, &wm, &u)) / (2.0 * eps);
            assert!(rel(grads.weight.data()[i], fd) < 1e-6);
        }
        for o in 0..3 {
            let sigma = w.log_sigma[o].exp();
            let mut wp = w.clone();
            wp.log_sigma[o] = (sigma + eps).ln();
            let mut wm = w.clone();
            wm.log_sigma[o] = (sigma - eps).ln();
            let fd =
                (pairing(&x, &f, &spec, &wp, &u) - pairing(&x, &f, &spec, &wm, &u)) / (2.0 * eps);
            assert!(
                rel(grads.sigma[o], fd) < 1e-5,
                "sigma {o}: {} vs {fd}",
                grads.sigma[o]
            );
        }
    }
}
