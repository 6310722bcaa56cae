//! Generators (semantic-guided UNets) and patch discriminators.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::guidance::{self, GuidanceStack};
use crate::nn::{add_conv, add_norm, add_pac, conv_norm, Bound, LayerConv, ParamSet};
use crate::pac::AffinityMode;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvMode {
    PixelAdaptive,
    Standard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// One semantic map per resolution.
    Multiscale,
    /// Only the semantic net's final mask, pooled to every resolution.
    FinalMapOnly,
    None,
}

/// Generator architecture, including the ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    /// Channel width of each contracting stage; the expanding path mirrors it.
    pub widths: Vec<usize>,
    pub layers_per_block: usize,
    pub kernel_size: usize,
    pub conv_mode: ConvMode,
    pub guidance_mode: GuidanceMode,
    pub affinity_mode: AffinityMode,
    pub sigma_init: f64,
    /// Channels produced by each guidance adapter.
    pub guidance_channels: usize,
    pub residual: bool,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64, 128],
            layers_per_block: 3,
            kernel_size: 3,
            conv_mode: ConvMode::PixelAdaptive,
            guidance_mode: GuidanceMode::Multiscale,
            affinity_mode: AffinityMode::Gaussian,
            sigma_init: 1.0,
            guidance_channels: 4,
            residual: true,
        }
    }
}

impl GeneratorSpec {
    /// Standard convolutions, guidance only through the semantic losses.
    pub fn conv_ablation() -> Self {
        Self {
            conv_mode: ConvMode::Standard,
            ..Self::default()
        }
    }

    /// Pixel-adaptive layers guided by the final segmentation map only.
    pub fn seg_only_ablation() -> Self {
        Self {
            guidance_mode: GuidanceMode::FinalMapOnly,
            ..Self::default()
        }
    }

    /// Plain CycleGAN: standard convolutions, no semantic guidance at all.
    pub fn plain_cyclegan() -> Self {
        Self {
            conv_mode: ConvMode::Standard,
            guidance_mode: GuidanceMode::None,
            ..Self::default()
        }
    }

    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    /// Whether generator layers read semantic guidance.
    pub fn uses_guidance(&self) -> bool {
        self.conv_mode == ConvMode::PixelAdaptive
            && self.affinity_mode == AffinityMode::Gaussian
            && self.guidance_mode != GuidanceMode::None
    }

    /// Whether the semantic feature-map losses enter the objective.
    pub fn uses_semantic_loss(&self) -> bool {
        self.guidance_mode != GuidanceMode::None
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(
                "generator widths must be non-empty and positive".into(),
            ));
        }
        if self.layers_per_block == 0 {
            return Err(Error::Config("layers_per_block must be at least 1".into()));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config("kernel_size must be odd".into()));
        }
        if !(self.sigma_init > 0.0) {
            return Err(Error::Config("sigma_init must be positive".into()));
        }
        if self.guidance_channels == 0 {
            return Err(Error::Config("guidance_channels must be positive".into()));
        }
        if self.conv_mode == ConvMode::PixelAdaptive
            && self.affinity_mode == AffinityMode::Gaussian
            && self.guidance_mode == GuidanceMode::None
        {
            return Err(Error::Config(
                "gaussian pixel-adaptive layers need guidance (use conv_mode = standard for guidance_mode = none)".into(),
            ));
        }
        Ok(())
    }

    fn layer_conv(&self) -> LayerConv {
        match self.conv_mode {
            ConvMode::Standard => LayerConv::Standard,
            ConvMode::PixelAdaptive => LayerConv::PixelAdaptive(self.affinity_mode),
        }
    }
}

/// Encoder/decoder geometry shared by the generators and the semantic net.
#[derive(Clone, Debug)]
pub(crate) struct UNetLayout {
    pub in_channels: usize,
    pub out_channels: usize,
    pub widths: Vec<usize>,
    pub layers: usize,
    pub kernel: usize,
    pub residual: bool,
}

impl UNetLayout {
    fn block_inputs(&self) -> (Vec<usize>, Vec<usize>) {
        let s = self.widths.len();
        let enc = (0..s)
            .map(|i| {
                if i == 0 {
                    self.in_channels
                } else {
                    self.widths[i - 1]
                }
            })
            .collect();
        let dec = (0..s)
            .map(|i| {
                if i == s - 1 {
                    self.widths[i]
                } else {
                    self.widths[i + 1] + self.widths[i]
                }
            })
            .collect();
        (enc, dec)
    }

    pub fn add_params<T: Real>(
        &self,
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        pac_sigma: Option<f64>,
    ) {
        let (enc_in, dec_in) = self.block_inputs();
        for (path, inputs) in [("enc", &enc_in), ("dec", &dec_in)] {
            for (s, &cin) in inputs.iter().enumerate() {
                let c = self.widths[s];
                for l in 0..self.layers {
                    let name = format!("{path}{s}.{l}");
                    let cin = if l == 0 { cin } else { c };
                    match pac_sigma {
                        Some(sigma) => add_pac(ps, rng, &name, cin, c, self.kernel, sigma),
                        None => add_conv(ps, rng, &name, cin, c, self.kernel),
                    }
                    add_norm(ps, &name, c);
                }
            }
        }
        add_conv(ps, rng, "head", self.widths[0], self.out_channels, 1);
    }

    fn block<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        name: &str,
        x: Var,
        conv: LayerConv,
        guide: Option<Var>,
    ) -> Var {
        let first = conv_norm(g, b, &format!("{name}.0"), x, conv, guide);
        let first = g.elu(first);
        let mut h = first;
        for l in 1..self.layers {
            let mut pre = conv_norm(g, b, &format!("{name}.{l}"), h, conv, guide);
            if self.residual && l == self.layers - 1 {
                pre = g.add(pre, first);
            }
            h = g.elu(pre);
        }
        h
    }

    /// Output of every contracting stage, before its pooling step.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        x: Var,
        conv: LayerConv,
        guides: &[Option<Var>],
    ) -> Vec<Var> {
        let mut feats = Vec::with_capacity(self.widths.len());
        let mut h = x;
        for s in 0..self.widths.len() {
            if s > 0 {
                h = g.max_pool2(h);
            }
            h = self.block(
                g,
                b,
                &format!("enc{s}"),
                h,
                conv,
                guides.get(s).copied().flatten(),
            );
            feats.push(h);
        }
        feats
    }

    /// Expanding path plus the 1×1 head; returns pre-activation outputs.
    pub fn decode<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        feats: &[Var],
        conv: LayerConv,
        guides: &[Option<Var>],
    ) -> Var {
        let s_count = self.widths.len();
        let mut h = feats[s_count - 1];
        for s in (0..s_count).rev() {
            if s < s_count - 1 {
                let up = g.upsample2(h);
                h = g.concat(up, feats[s]);
            }
            h = self.block(
                g,
                b,
                &format!("dec{s}"),
                h,
                conv,
                guides.get(s).copied().flatten(),
            );
        }
        g.conv2d(h, b.var("head.w"), Some(b.var("head.b")), 1, 0)
    }
}

fn check_divisible(h: usize, w: usize, stages: usize) -> Result<()> {
    let m = 1usize << (stages - 1);
    if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
        return Err(Error::ShapeMismatch(format!(
            "spatial size {h}×{w} is not divisible by {m}"
        )));
    }
    Ok(())
}

/// A semantic-guided UNet generator together with its guidance adapters.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T: Real> {
    pub spec: GeneratorSpec,
    pub params: ParamSet<T>,
}

impl<T: Real> Generator<T> {
    /// Xavier-initialized generator. `guidance_dims` gives the channel count of
    /// each raw guidance map it will receive (one per stage for multiscale
    /// guidance, a single entry for final-map guidance).
    pub fn new(spec: GeneratorSpec, guidance_dims: &[usize], seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let sigma = (spec.conv_mode == ConvMode::PixelAdaptive).then_some(spec.sigma_init);
        spec_layout(&spec).add_params(&mut params, &mut rng, sigma);
        if spec.uses_guidance() {
            let dims: Vec<usize> = match spec.guidance_mode {
                GuidanceMode::Multiscale => {
                    if guidance_dims.len() != spec.stages() {
                        return Err(Error::Config(format!(
                            "{} guidance maps for {} generator stages",
                            guidance_dims.len(),
                            spec.stages()
                        )));
                    }
                    guidance_dims.to_vec()
                }
                GuidanceMode::FinalMapOnly => {
                    let d = *guidance_dims
                        .first()
                        .ok_or_else(|| Error::Config("final-map guidance needs one map".into()))?;
                    vec![d; spec.stages()]
                }
                GuidanceMode::None => unreachable!("validated"),
            };
            for (s, d) in dims.into_iter().enumerate() {
                guidance::add_adapter_params(
                    &mut params,
                    &mut rng,
                    &format!("adapt{s}"),
                    d,
                    spec.guidance_channels,
                );
            }
        }
        Ok(Self { spec, params })
    }

    /// Builds the forward pass on `g`. `x` is an `N×3×H×W` batch in `[−1,1]`;
    /// `guidance` holds the raw semantic maps for the same batch.
    pub fn forward(&self, g: &mut Graph<T>, b: &Bound, x: Var, guidance: &[Var]) -> Result<Var> {
        let spec = &self.spec;
        let [_, c, h, w] = g.value(x).shape();
        if c != 3 {
            return Err(Error::ShapeMismatch(format!(
                "generator input has {c} channels, expected 3"
            )));
        }
        check_divisible(h, w, spec.stages())?;
        let guides: Vec<Option<Var>> = if spec.uses_guidance() {
            let raw = self.stage_guidance(g, guidance, h, w)?;
            raw.into_iter()
                .enumerate()
                .map(|(s, m)| {
                    Some(guidance::adapter_forward(
                        g,
                        b,
                        &format!("adapt{s}"),
                        m,
                        true,
                    ))
                })
                .collect()
        } else {
            vec![None; spec.stages()]
        };
        let layout = spec_layout(spec);
        let feats = layout.encode(g, b, x, spec.layer_conv(), &guides);
        let out = layout.decode(g, b, &feats, spec.layer_conv(), &guides);
        Ok(g.tanh(out))
    }

    fn stage_guidance(
        &self,
        g: &mut Graph<T>,
        guidance: &[Var],
        h: usize,
        w: usize,
    ) -> Result<Vec<Var>> {
        let stages = self.spec.stages();
        match self.spec.guidance_mode {
            GuidanceMode::Multiscale => {
                if guidance.len() != stages {
                    return Err(Error::Config(format!(
                        "{} guidance maps for {stages} generator stages",
                        guidance.len()
                    )));
                }
                for (s, &m) in guidance.iter().enumerate() {
                    let shape = g.value(m).shape();
                    if (shape[2], shape[3]) != (h >> s, w >> s) {
                        return Err(Error::Config(format!(
                            "guidance map {s} is {}×{}, stage expects {}×{}",
                            shape[2],
                            shape[3],
                            h >> s,
                            w >> s
                        )));
                    }
                }
                Ok(guidance.to_vec())
            }
            GuidanceMode::FinalMapOnly => {
                let &[m] = guidance else {
                    return Err(Error::Config(
                        "final-map guidance takes exactly one map".into(),
                    ));
                };
                let shape = g.value(m).shape();
                if (shape[2], shape[3]) != (h, w) {
                    return Err(Error::Config(
                        "final segmentation map must match the input size".into(),
                    ));
                }
                let mut maps = vec![m];
                for _ in 1..stages {
                    let last = *maps.last().unwrap();
                    maps.push(g.max_pool2(last));
                }
                Ok(maps)
            }
            GuidanceMode::None => Ok(Vec::new()),
        }
    }

    /// Single-batch inference without recording gradients.
    pub fn generate(&self, image: &Tensor<T>, guidance: &GuidanceStack<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let x = g.constant(image.clone());
        let maps: Vec<Var> = guidance
            .maps()
            .iter()
            .map(|m| g.constant(m.clone()))
            .collect();
        let y = self.forward(&mut g, &b, x, &maps)?;
        Ok(g.value(y).clone())
    }
}

fn spec_layout(spec: &GeneratorSpec) -> UNetLayout {
    UNetLayout {
        in_channels: 3,
        out_channels: 3,
        widths: spec.widths.clone(),
        layers: spec.layers_per_block,
        kernel: spec.kernel_size,
        residual: spec.residual,
    }
}

/// Patch discriminator architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorSpec {
    /// Width of each stride-2 layer.
    pub widths: Vec<usize>,
    pub kernel_size: usize,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64, 128],
            kernel_size: 4,
            leaky_slope: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T: Real> {
    pub spec: DiscriminatorSpec,
    pub params: ParamSet<T>,
}

impl<T: Real> Discriminator<T> {
    pub fn new(spec: DiscriminatorSpec, seed: u64) -> Result<Self> {
        if spec.widths.is_empty() || spec.kernel_size < 2 {
            return Err(Error::Config(
                "discriminator needs layers and kernel_size ≥ 2".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut cin = 3;
        for (i, &c) in spec.widths.iter().enumerate() {
            add_conv(
                &mut params,
                &mut rng,
                &format!("d{i}"),
                cin,
                c,
                spec.kernel_size,
            );
            cin = c;
        }
        add_conv(&mut params, &mut rng, "out", cin, 1, 3);
        Ok(Self { spec, params })
    }

    /// Per-patch probability of "real", each entry in `(0,1)`.
    pub fn forward(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Var {
        let mut h = x;
        let pad = (self.spec.kernel_size - 1) / 2;
        for i in 0..self.spec.widths.len() {
            h = g.conv2d(
                h,
                b.var(&format!("d{i}.w")),
                Some(b.var(&format!("d{i}.b"))),
                2,
                pad,
            );
            h = g.leaky_relu(h, T::lit(self.spec.leaky_slope));
        }
        let logits = g.conv2d(h, b.var("out.w"), Some(b.var("out.b")), 1, 1);
        g.sigmoid(logits)
    }

    pub fn probabilities(&self, image: &Tensor<T>) -> Tensor<T> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let x = g.constant(image.clone());
        let y = self.forward(&mut g, &b, x);
        g.value(y).clone()
    }
}

/// Generator output for one image in `[−1,1]`.
pub fn generator_forward<T: Real>(
    image: &Tensor<T>,
    guidance: &GuidanceStack<T>,
    generator: &Generator<T>,
) -> Result<Tensor<T>> {
    generator.generate(image, guidance)
}

/// Patch probabilities and their mean.
pub fn discriminator_forward<T: Real>(
    image: &Tensor<T>,
    disc: &Discriminator<T>,
) -> (Tensor<T>, T) {
    let p = disc.probabilities(image);
    let mean = p.sum() / T::from_usize(p.len()).unwrap();
    (p, mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            [1, 3, h, w],
            (0..3 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn random_stack(h: usize, w: usize, dims: &[usize], seed: u64) -> GuidanceStack<f32> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let maps = dims
            .iter()
            .enumerate()
            .map(|(s, &d)| {
                let (hs, ws) = (h >> s, w >> s);
                Tensor::from_vec(
                    [1, d, hs, ws],
                    (0..d * hs * ws).map(|_| rng.gen_range(0.0..1.0)).collect(),
                )
                .unwrap()
            })
            .collect();
        GuidanceStack::new(maps).unwrap()
    }

    fn small_spec() -> GeneratorSpec {
        GeneratorSpec {
            widths: vec![4, 8, 8, 8],
            ..GeneratorSpec::default()
        }
    }

    #[test]
    fn generator_preserves_shape_and_range() {
        let spec = small_spec();
        let dims = [2, 2, 4, 4];
        let gen = Generator::<f32>::new(spec, &dims, 1).unwrap();
        for size in [32, 64] {
            let x = image(size, size, 2);
            let y = generator_forward(&x, &random_stack(size, size, &dims, 3), &gen).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn guidance_scale_mismatch_is_config_error() {
        let dims = [2, 2, 4, 4];
        let gen = Generator::<f32>::new(small_spec(), &dims, 1).unwrap();
        let stack = random_stack(16, 16, &dims, 3);
        let err = generator_forward(&image(32, 32, 2), &stack, &gen).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn constant_one_pac_generator_equals_standard() {
        let dims = [2, 2, 4, 4];
        let pac_spec = GeneratorSpec {
            affinity_mode: AffinityMode::ConstantOne,
            ..small_spec()
        };
        let pac = Generator::<f32>::new(pac_spec, &dims, 5).unwrap();
        let std_spec = GeneratorSpec {
            conv_mode: ConvMode::Standard,
            ..small_spec()
        };
        let mut standard = Generator::<f32>::new(std_spec, &dims, 9).unwrap();
        for (name, t) in pac.params.iter() {
            if let Some(dst) = standard.params.get_mut(name) {
                *dst = t.clone();
            }
        }
        let x = image(16, 16, 4);
        let stack = random_stack(16, 16, &dims, 6);
        let a = pac.generate(&x, &stack).unwrap();
        let b = standard.generate(&x, &stack).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-5, "diff {}", a.max_abs_diff(&b));
    }

    #[test]
    fn ablation_configurations_construct() {
        let dims = [2, 2, 4, 4];
        for spec in [
            GeneratorSpec::default(),
            GeneratorSpec::conv_ablation(),
            GeneratorSpec::plain_cyclegan(),
        ] {
            Generator::<f32>::new(spec, &dims, 0).unwrap();
        }
        Generator::<f32>::new(GeneratorSpec::seg_only_ablation(), &[1], 0).unwrap();
        let bad = GeneratorSpec {
            guidance_mode: GuidanceMode::None,
            ..GeneratorSpec::default()
        };
        assert!(matches!(
            Generator::<f32>::new(bad, &dims, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn twin_generators_have_equal_parameter_counts() {
        let dims = [4, 8, 16, 32];
        let ab = Generator::<f32>::new(GeneratorSpec::default(), &dims, 1).unwrap();
        let ba = Generator::<f32>::new(GeneratorSpec::default(), &dims, 2).unwrap();
        assert_eq!(ab.params.count(), ba.params.count());
        assert_ne!(ab.params.checksum(), ba.params.checksum());
    }

    #[test]
    fn residual_wiring_is_active() {
        let dims = [2, 2, 4, 4];
        let with = Generator::<f32>::new(small_spec(), &dims, 3).unwrap();
        let without = Generator {
            spec: GeneratorSpec {
                residual: false,
                ..small_spec()
            },
            params: with.params.clone(),
        };
        let x = image(16, 16, 1);
        let stack = random_stack(16, 16, &dims, 2);
        let a = with.generate(&x, &stack).unwrap();
        let b = without.generate(&x, &stack).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-4);
    }

    #[test]
    fn zero_discriminator_outputs_one_half() {
        let mut d = Discriminator::<f32>::new(DiscriminatorSpec::default(), 0).unwrap();
        for (_, t) in d.params.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let (p, mean) = discriminator_forward(&image(64, 64, 1), &d);
        assert_eq!(p.shape(), [1, 1, 4, 4]);
        assert!(p.data().iter().all(|&v| v == 0.5));
        assert_eq!(mean, 0.5);
    }

    #[test]
    fn discriminator_is_deterministic_and_open_unit() {
        let d1 = Discriminator::<f32>::new(DiscriminatorSpec::default(), 11).unwrap();
        let d2 = Discriminator::<f32>::new(DiscriminatorSpec::default(), 11).unwrap();
        let x = image(64, 64, 8);
        let (p1, _) = discriminator_forward(&x, &d1);
        let (p2, _) = discriminator_forward(&x, &d2);
        assert_eq!(p1, p2);
        assert!(p1.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
