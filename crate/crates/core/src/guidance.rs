//! Frozen semantic network, multiscale feature extraction and guidance adapters.
//!
//! The semantic net is a small UNet trained once on structure masks and then
//! frozen. Its contracting-stage activations, min–max normalized to `[0,1]`
//! per channel, form a [`GuidanceStack`]. Each generator passes every map
//! through its own adapter (3×3 conv → 1×1 conv → group norm → ELU) before the
//! map steers that resolution's pixel-adaptive layers.

use std::collections::HashMap;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::networks::UNetLayout;
use crate::nn::{add_conv, add_norm, norm_groups, Bound, LayerConv, ParamSet};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Real, Tensor};

/// Multiscale semantic feature maps, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceStack<T: Real> {
    maps: Vec<Tensor<T>>,
}

impl<T: Real> GuidanceStack<T> {
    /// Validates batch agreement, `[0,1]` values and halving spatial sizes.
    pub fn new(maps: Vec<Tensor<T>>) -> Result<Self> {
        if let Some(first) = maps.first() {
            let [n, _, h, w] = first.shape();
            for (s, m) in maps.iter().enumerate() {
                let [ns, _, hs, ws] = m.shape();
                if ns != n || hs != h >> s || ws != w >> s || (hs << s) != h || (ws << s) != w {
                    return Err(Error::ShapeMismatch(format!(
                        "guidance map {s} is {:?}, expected {}×{}",
                        m.shape(),
                        h >> s,
                        w >> s
                    )));
                }
                if m.data().iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
                    return Err(Error::InvalidInput(format!(
                        "guidance map {s} leaves [0,1]"
                    )));
                }
            }
        }
        Ok(Self { maps })
    }

    /// A single map (e.g. a final segmentation map) with no scale structure.
    pub fn single(map: Tensor<T>) -> Result<Self> {
        Self::new(vec![map])
    }

    pub fn maps(&self) -> &[Tensor<T>] {
        &self.maps
    }

    pub fn scales(&self) -> Vec<(usize, usize)> {
        self.maps.iter().map(|m| (m.height(), m.width())).collect()
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegNetSpec {
    pub widths: Vec<usize>,
    pub layers_per_block: usize,
    pub kernel_size: usize,
    pub residual: bool,
}

impl Default for SegNetSpec {
    fn default() -> Self {
        Self {
            widths: vec![8, 16, 32, 64],
            layers_per_block: 3,
            kernel_size: 3,
            residual: true,
        }
    }
}

impl SegNetSpec {
    fn layout(&self) -> UNetLayout {
        UNetLayout {
            in_channels: 3,
            out_channels: 1,
            widths: self.widths.clone(),
            layers: self.layers_per_block,
            kernel: self.kernel_size,
            residual: self.residual,
        }
    }
}

/// The segmentation network that supplies semantic guidance.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticNet<T: Real> {
    pub spec: SegNetSpec,
    pub params: ParamSet<T>,
}

impl<T: Real> SemanticNet<T> {
    pub fn new(spec: SegNetSpec, seed: u64) -> Result<Self> {
        if spec.widths.is_empty() || spec.layers_per_block == 0 {
            return Err(Error::Config("semantic net needs stages and layers".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        spec.layout().add_params(&mut params, &mut rng, None);
        Ok(Self { spec, params })
    }

    pub fn stages(&self) -> usize {
        self.spec.widths.len()
    }

    /// Channel count of every guidance map.
    pub fn feature_dims(&self) -> Vec<usize> {
        self.spec.widths.clone()
    }

    fn check_input(&self, shape: [usize; 4]) -> Result<()> {
        let [_, c, h, w] = shape;
        let m = 1usize << (self.stages() - 1);
        if c != 3 {
            return Err(Error::ShapeMismatch(format!(
                "semantic net input has {c} channels"
            )));
        }
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{h}×{w} is not divisible by {m}"
            )));
        }
        Ok(())
    }

    /// Normalized contracting-stage features of a `[0,1]` image batch.
    pub fn features(&self, g: &mut Graph<T>, b: &Bound, x01: Var) -> Result<Vec<Var>> {
        self.check_input(g.value(x01).shape())?;
        let feats = self
            .spec
            .layout()
            .encode(g, b, x01, LayerConv::Standard, &[]);
        Ok(feats.into_iter().map(|f| g.min_max_norm(f)).collect())
    }

    /// Mask logits for a `[0,1]` image batch.
    pub fn logits(&self, g: &mut Graph<T>, b: &Bound, x01: Var) -> Result<Var> {
        self.check_input(g.value(x01).shape())?;
        let layout = self.spec.layout();
        let feats = layout.encode(g, b, x01, LayerConv::Standard, &[]);
        Ok(layout.decode(g, b, &feats, LayerConv::Standard, &[]))
    }

    /// Foreground probability map.
    pub fn final_map(&self, g: &mut Graph<T>, b: &Bound, x01: Var) -> Result<Var> {
        let z = self.logits(g, b, x01)?;
        Ok(g.sigmoid(z))
    }

    pub fn predict_probabilities(&self, image01: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let x = g.constant(image01.clone());
        let p = self.final_map(&mut g, &b, x)?;
        Ok(g.value(p).clone())
    }

    /// Binary mask (`p > 0.5`) as `0/1` values.
    pub fn predict_mask(&self, image01: &Tensor<T>) -> Result<Tensor<T>> {
        let half = T::lit(0.5);
        Ok(self
            .predict_probabilities(image01)?
            .map(|p| if p > half { T::one() } else { T::zero() }))
    }
}

/// Multiscale guidance for an `N×3×H×W` batch with values in `[0,1]`.
pub fn extract_multiscale_features<T: Real>(
    image01: &Tensor<T>,
    net: &SemanticNet<T>,
) -> Result<GuidanceStack<T>> {
    let mut g = Graph::new();
    let b = net.params.bind(&mut g, false);
    let x = g.constant(image01.clone());
    let feats = net.features(&mut g, &b, x)?;
    GuidanceStack::new(feats.into_iter().map(|v| g.value(v).clone()).collect())
}

pub(crate) fn add_adapter_params<T: Real>(
    ps: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cin: usize,
    cout: usize,
) {
    add_conv(ps, rng, &format!("{prefix}.c3"), cin, cout, 3);
    add_conv(ps, rng, &format!("{prefix}.c1"), cout, cout, 1);
    add_norm(ps, &format!("{prefix}.gn"), cout);
}

/// 3×3 conv → 1×1 conv → group norm (optional) → ELU.
pub(crate) fn adapter_forward<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    prefix: &str,
    x: Var,
    normalize: bool,
) -> Var {
    let c3 = g.conv2d(
        x,
        b.var(&format!("{prefix}.c3.w")),
        Some(b.var(&format!("{prefix}.c3.b"))),
        1,
        1,
    );
    let mut h = g.conv2d(
        c3,
        b.var(&format!("{prefix}.c1.w")),
        Some(b.var(&format!("{prefix}.c1.b"))),
        1,
        0,
    );
    if normalize {
        let c = g.value(h).channels();
        h = g.group_norm(
            h,
            b.var(&format!("{prefix}.gn.gamma")),
            b.var(&format!("{prefix}.gn.beta")),
            norm_groups(c),
        );
    }
    g.elu(h)
}

/// Per-scale adapter weights, as stored inside a generator (`adapt{s}.*`).
#[derive(Clone, Debug)]
pub struct AdapterParams<T: Real> {
    pub params: ParamSet<T>,
    pub scales: usize,
    /// Group normalization on; off only for inspection.
    pub normalize: bool,
}

impl<T: Real> AdapterParams<T> {
    pub fn new(input_dims: &[usize], channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (s, &d) in input_dims.iter().enumerate() {
            add_adapter_params(&mut params, &mut rng, &format!("adapt{s}"), d, channels);
        }
        Self {
            params,
            scales: input_dims.len(),
            normalize: true,
        }
    }
}

/// Runs every guidance map through its adapter; spatial sizes are preserved.
pub fn adapt_guidance<T: Real>(
    stack: &GuidanceStack<T>,
    adapters: &AdapterParams<T>,
) -> Result<Vec<Tensor<T>>> {
    if stack.len() != adapters.scales {
        return Err(Error::Config(format!(
            "{} guidance maps but {} adapters",
            stack.len(),
            adapters.scales
        )));
    }
    let mut g = Graph::new();
    let b = adapters.params.bind(&mut g, false);
    let mut out = Vec::with_capacity(stack.len());
    for (s, m) in stack.maps().iter().enumerate() {
        let w = adapters.params.require(&format!("adapt{s}.c3.w"))?;
        if w.shape()[1] != m.channels() {
            return Err(Error::Config(format!(
                "adapter {s} expects {} channels, map has {}",
                w.shape()[1],
                m.channels()
            )));
        }
        let x = g.constant(m.clone());
        let y = adapter_forward(&mut g, &b, &format!("adapt{s}"), x, adapters.normalize);
        out.push(g.value(y).clone());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of images held out for the Dice check.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            learning_rate: 0.002,
            holdout_fraction: 0.2,
            seed: 7,
        }
    }
}

/// Outcome of semantic-net pretraining.
#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    pub holdout_dice: f64,
    pub holdout_count: usize,
}

/// Trains the semantic net on images in `[0,1]` (`N×3×H×W`) and binary masks
/// (`N×1×H×W`) with per-pixel binary cross-entropy, then returns it frozen.
pub fn pretrain_semantic_net(
    images01: &Tensor<f32>,
    masks: &Tensor<f32>,
    spec: SegNetSpec,
    config: &PretrainConfig,
) -> Result<(SemanticNet<f32>, PretrainReport)> {
    let n = images01.batch();
    if n == 0 {
        return Err(Error::InvalidInput("no images to pretrain on".into()));
    }
    if masks.shape() != [n, 1, images01.height(), images01.width()] {
        return Err(Error::ShapeMismatch(format!(
            "masks {:?} do not match images {:?}",
            masks.shape(),
            images01.shape()
        )));
    }
    if config.batch_size == 0 || config.learning_rate < 0.0 {
        return Err(Error::Config(
            "pretraining needs batch_size ≥ 1 and learning_rate ≥ 0".into(),
        ));
    }
    let mut net = SemanticNet::new(spec, config.seed)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed));
    let holdout = ((n as f64 * config.holdout_fraction).round() as usize).min(n.saturating_sub(1));
    let (held, train) = order.split_at(holdout);
    let mut opt = Adam::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
        &net.params,
    );
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut idx = train.to_vec();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(
            config.seed.wrapping_add(epoch as u64 + 1),
        ));
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in idx.chunks(config.batch_size) {
            let x = gather(images01, chunk)?;
            let y = gather(masks, chunk)?;
            let mut g = Graph::new();
            let b = net.params.bind(&mut g, true);
            let xv = g.constant(x);
            let z = net.logits(&mut g, &b, xv)?;
            let loss = g.bce_with_logits(z, &y);
            let lv = g.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(Error::Numerical {
                    component: "semantic_bce".into(),
                    step: epoch as u64,
                });
            }
            let mut grads = g.backward(loss);
            let grads: HashMap<String, Tensor<f32>> = b
                .iter()
                .filter_map(|(name, v)| grads.take(v).map(|t| (name.to_string(), t)))
                .collect();
            opt.update(&mut net.params, &grads);
            total += lv;
            batches += 1;
        }
        let mean = total / batches.max(1) as f64;
        info!("semantic pretraining epoch {epoch}: bce {mean:.4}");
        epoch_losses.push(mean);
    }
    let holdout_dice = if held.is_empty() {
        f64::NAN
    } else {
        let x = gather(images01, held)?;
        let y = gather(masks, held)?;
        let pred = net.predict_mask(&x)?;
        crate::metrics::structure_dice_tensor(&pred, &y)?
    };
    Ok((
        net,
        PretrainReport {
            epoch_losses,
            holdout_dice,
            holdout_count: held.len(),
        },
    ))
}

pub(crate) fn gather<T: Real>(t: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let parts: Vec<Tensor<T>> = idx.iter().map(|&i| t.narrow_batch(i, 1)).collect();
    Tensor::stack(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_image(n: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            [n, 3, h, w],
            (0..n * 3 * h * w)
                .map(|_| rng.gen_range(0.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn stack_sizes_halve() {
        let net = SemanticNet::<f64>::new(
            SegNetSpec {
                widths: vec![2, 3, 4, 5],
                ..SegNetSpec::default()
            },
            1,
        )
        .unwrap();
        let stack = extract_multiscale_features(&rand_image(1, 64, 64, 2), &net).unwrap();
        assert_eq!(stack.scales(), vec![(64, 64), (32, 32), (16, 16), (8, 8)]);
        assert_eq!(stack.maps()[3].channels(), 5);
    }

    #[test]
    fn normalized_channels_span_unit_interval() {
        let net = SemanticNet::<f64>::new(
            SegNetSpec {
                widths: vec![2, 3],
                ..SegNetSpec::default()
            },
            3,
        )
        .unwrap();
        let stack = extract_multiscale_features(&rand_image(2, 8, 8, 4), &net).unwrap();
        for m in stack.maps() {
            for plane in m.data().chunks(m.plane()) {
                let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                assert!(lo == 0.0 && (hi == 1.0 || hi == 0.0));
            }
        }
    }

    #[test]
    fn zero_image_gives_zero_maps() {
        let mut net = SemanticNet::<f64>::new(
            SegNetSpec {
                widths: vec![2, 3, 4, 5],
                ..SegNetSpec::default()
            },
            1,
        )
        .unwrap();
        for (name, t) in net.params.iter_mut() {
            if name.ends_with(".b") || name.ends_with(".beta") {
                t.data_mut().fill(0.0);
            }
        }
        let stack = extract_multiscale_features(&Tensor::zeros([1, 3, 16, 16]), &net).unwrap();
        for m in stack.maps() {
            assert!(m.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn indivisible_input_is_shape_mismatch() {
        let net = SemanticNet::<f64>::new(SegNetSpec::default(), 1).unwrap();
        let err = extract_multiscale_features(&rand_image(1, 20, 20, 1), &net).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    #[test]
    fn zero_adapters_give_zero_maps() {
        let net = SemanticNet::<f64>::new(
            SegNetSpec {
                widths: vec![2, 3],
                ..SegNetSpec::default()
            },
            3,
        )
        .unwrap();
        let stack = extract_multiscale_features(&rand_image(1, 8, 8, 4), &net).unwrap();
        let mut ad = AdapterParams::<f64>::new(&[2, 3], 4, 0);
        for (name, t) in ad.params.iter_mut() {
            if !name.ends_with(".gamma") {
                t.data_mut().fill(0.0);
            }
        }
        let out = adapt_guidance(&stack, &ad).unwrap();
        assert_eq!(out.len(), 2);
        for (o, m) in out.iter().zip(stack.maps()) {
            assert_eq!((o.height(), o.width()), (m.height(), m.width()));
            assert_eq!(o.channels(), 4);
            assert!(o.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn identity_pointwise_adapter_is_elu_of_3x3_conv() {
        // 4×4 single-channel map; 3×3 kernel with centre 1 and right neighbour −2.
        let map: Vec<f64> = (0..16).map(|i| i as f64 / 15.0).collect();
        let stack =
            GuidanceStack::new(vec![Tensor::from_vec([1, 1, 4, 4], map.clone()).unwrap()]).unwrap();
        let mut ad = AdapterParams::<f64>::new(&[1], 1, 0);
        ad.normalize = false;
        let mut k3 = vec![0.0; 9];
        k3[4] = 1.0;
        k3[5] = -2.0;
        ad.params
            .insert("adapt0.c3.w", Tensor::from_vec([1, 1, 3, 3], k3).unwrap());
        ad.params.insert("adapt0.c3.b", Tensor::scalar(0.0));
        ad.params.insert("adapt0.c1.w", Tensor::scalar(1.0));
        ad.params.insert("adapt0.c1.b", Tensor::scalar(0.0));
        let out = adapt_guidance(&stack, &ad).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let right = if x + 1 < 4 { map[y * 4 + x + 1] } else { 0.0 };
                let conv = map[y * 4 + x] - 2.0 * right;
                let elu = if conv > 0.0 { conv } else { conv.exp_m1() };
                assert!((out[0].at(0, 0, y, x) - elu).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn adapter_count_mismatch_is_config_error() {
        let stack = GuidanceStack::new(vec![Tensor::<f64>::zeros([1, 1, 4, 4])]).unwrap();
        let ad = AdapterParams::<f64>::new(&[1, 1], 2, 0);
        assert!(matches!(adapt_guidance(&stack, &ad), Err(Error::Config(_))));
    }

    #[test]
    fn empty_dataset_is_invalid_input() {
        let err = pretrain_semantic_net(
            &Tensor::zeros([0, 3, 8, 8]),
            &Tensor::zeros([0, 1, 8, 8]),
            SegNetSpec::default(),
            &PretrainConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }
}
