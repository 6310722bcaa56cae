//! CycleGAN optimization: one discriminator update then one generator update
//! per step, deterministic batch order, loss logging and inference.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::guidance::{
    extract_multiscale_features, gather, GuidanceStack, PretrainConfig, SegNetSpec, SemanticNet,
};
use crate::imaging::{ColorImage, Mask};
use crate::losses::{
    feat_map_loss_graph, total_objective, FeatureLossKind, LossBreakdown, LossWeights, PROB_EPS,
};
use crate::networks::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, GuidanceMode};
use crate::nn::{Bound, ParamSet};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Real, Tensor};

/// Architectures of every network in a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    pub semantic: SegNetSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patch_size: usize,
    pub seed: u64,
    pub lambda_cyc: f64,
    pub lambda_seg: f64,
    pub feature_loss: FeatureLossKind,
    /// How the frozen semantic net is fitted before adversarial training.
    pub semantic_pretraining: PretrainConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.002,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            batch_size: 4,
            epochs: 20,
            patch_size: 64,
            seed: 0,
            lambda_cyc: 10.0,
            lambda_seg: 1.0,
            feature_loss: FeatureLossKind::SummedRmse,
            semantic_pretraining: PretrainConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(
                "learning_rate must be finite and non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("adam betas must lie in [0,1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let m = 1usize << (model.generator.stages().max(model.semantic.widths.len()) - 1).max(3);
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(m) {
            return Err(Error::Config(format!(
                "patch_size must be a positive multiple of {m}"
            )));
        }
        if !(self.lambda_cyc >= 0.0 && self.lambda_seg >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        model.generator.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: 1e-8,
        }
    }
}

/// Everything that evolves during training, plus the frozen semantic net.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub g_ab: Generator<f32>,
    pub g_ba: Generator<f32>,
    pub d_a: Discriminator<f32>,
    pub d_b: Discriminator<f32>,
    pub opt_g_ab: Adam<f32>,
    pub opt_g_ba: Adam<f32>,
    pub opt_d_a: Adam<f32>,
    pub opt_d_b: Adam<f32>,
    pub seg: SemanticNet<f32>,
    /// Completed optimization steps.
    pub step: u64,
}

/// Raw guidance dimensions a generator of `spec` expects from `seg`.
fn guidance_dims(spec: &GeneratorSpec, seg: &SemanticNet<f32>) -> Vec<usize> {
    match spec.guidance_mode {
        GuidanceMode::Multiscale => seg.feature_dims(),
        GuidanceMode::FinalMapOnly => vec![1],
        GuidanceMode::None => Vec::new(),
    }
}

impl TrainState {
    /// Fresh Xavier-initialized networks around a pretrained semantic net.
    pub fn new(
        model: ModelConfig,
        training: TrainingConfig,
        seg: SemanticNet<f32>,
    ) -> Result<Self> {
        training.validate(&model)?;
        if seg.spec != model.semantic {
            return Err(Error::Config(
                "semantic net does not match the model's semantic spec".into(),
            ));
        }
        let gs = &model.generator;
        if gs.guidance_mode == GuidanceMode::Multiscale
            && gs.uses_guidance()
            && gs.stages() != seg.stages()
        {
            return Err(Error::Config(format!(
                "{} generator stages but {} semantic stages",
                gs.stages(),
                seg.stages()
            )));
        }
        let dims = guidance_dims(gs, &seg);
        let s = training.seed;
        let g_ab = Generator::new(gs.clone(), &dims, s.wrapping_mul(4) + 1)?;
        let g_ba = Generator::new(gs.clone(), &dims, s.wrapping_mul(4) + 2)?;
        let d_a = Discriminator::new(model.discriminator.clone(), s.wrapping_mul(4) + 3)?;
        let d_b = Discriminator::new(model.discriminator.clone(), s.wrapping_mul(4) + 4)?;
        let adam = training.adam();
        Ok(Self {
            opt_g_ab: Adam::new(adam, &g_ab.params),
            opt_g_ba: Adam::new(adam, &g_ba.params),
            opt_d_a: Adam::new(adam, &d_a.params),
            opt_d_b: Adam::new(adam, &d_b.params),
            g_ab,
            g_ba,
            d_a,
            d_b,
            seg,
            model,
            training,
            step: 0,
        })
    }

    /// Loss weights with the semantic terms switched by the guidance mode.
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_cyc: self.training.lambda_cyc,
            lambda_seg: self.training.lambda_seg,
            feature_loss: self.training.feature_loss,
            include_seg: self.model.generator.uses_semantic_loss(),
        }
    }

    pub fn steps_per_epoch(&self, n_a: usize, n_b: usize) -> u64 {
        n_a.max(n_b).div_ceil(self.training.batch_size) as u64
    }
}

/// Which generator to apply.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[default]
    #[serde(rename = "a_to_b")]
    AToB,
    #[serde(rename = "b_to_a")]
    BToA,
}

/// Guidance for `gen` computed from its `[−1,1]` input batch.
pub fn generator_guidance<T: Real>(
    gen: &Generator<T>,
    x_sym: &Tensor<T>,
    seg: &SemanticNet<T>,
) -> Result<GuidanceStack<T>> {
    if !gen.spec.uses_guidance() {
        return GuidanceStack::new(Vec::new());
    }
    let x01 = x_sym.map(|v| (v + T::one()) * T::lit(0.5));
    match gen.spec.guidance_mode {
        GuidanceMode::Multiscale => extract_multiscale_features(&x01, seg),
        GuidanceMode::FinalMapOnly => GuidanceStack::single(seg.predict_probabilities(&x01)?),
        GuidanceMode::None => GuidanceStack::new(Vec::new()),
    }
}

/// Semantic features (for the losses) and raw generator guidance of one image node.
struct Semantics {
    features: Vec<Var>,
    guidance: Vec<Var>,
}

fn semantics(
    g: &mut Graph<f32>,
    seg: &SemanticNet<f32>,
    sb: &Bound,
    spec: &GeneratorSpec,
    x_sym: Var,
    need_features: bool,
) -> Result<Semantics> {
    let x01 = g.affine(x_sym, 0.5, 0.5);
    let features = if need_features
        || (spec.uses_guidance() && spec.guidance_mode == GuidanceMode::Multiscale)
    {
        seg.features(g, sb, x01)?
    } else {
        Vec::new()
    };
    let guidance = if !spec.uses_guidance() {
        Vec::new()
    } else if spec.guidance_mode == GuidanceMode::Multiscale {
        features.clone()
    } else {
        vec![seg.final_map(g, sb, x01)?]
    };
    Ok(Semantics { features, guidance })
}

fn check_finite(component: &str, step: u64, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical {
            component: component.into(),
            step,
        })
    }
}

fn collect_grads(
    grads: &mut crate::autograd::Gradients<f32>,
    b: &Bound,
    component: &str,
    step: u64,
) -> Result<HashMap<String, Tensor<f32>>> {
    let mut out = HashMap::new();
    for (name, v) in b.iter() {
        if let Some(t) = grads.take(v) {
            if !t.is_finite() {
                return Err(Error::Numerical {
                    component: format!("{component} gradient {name}"),
                    step,
                });
            }
            out.insert(name.to_string(), t);
        }
    }
    Ok(out)
}

/// `−mean ln p` (or `−mean ln(1−p)`) with the usual clamp.
fn neg_mean_log(g: &mut Graph<f32>, p: Var, complement: bool) -> Var {
    let m = g.mean_log(p, complement, PROB_EPS as f32);
    g.weighted_sum(&[(m, -1.0)])
}

/// One discriminator update followed by one generator update on `[−1,1]` batches.
pub fn train_step(
    state: &mut TrainState,
    batch_a: &Tensor<f32>,
    batch_b: &Tensor<f32>,
) -> Result<LossBreakdown> {
    if batch_a.shape() != batch_b.shape() || batch_a.channels() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "batches {:?} and {:?} must be equal N×3×H×W stacks",
            batch_a.shape(),
            batch_b.shape()
        )));
    }
    let step = state.step + 1;
    let weights = state.weights();
    let spec = state.model.generator.clone();
    let seg_in_objective = weights.include_seg;

    // Generator forward pass: ab̂ = G_AB(a), bâ = G_BA(b), â = G_BA(ab̂), b̂ = G_AB(bâ).
    let mut g = Graph::new();
    let bab = state.g_ab.params.bind(&mut g, true);
    let bba = state.g_ba.params.bind(&mut g, true);
    let sb = state.seg.params.bind(&mut g, false);
    let a = g.constant(batch_a.clone());
    let b = g.constant(batch_b.clone());
    let sem_a = semantics(&mut g, &state.seg, &sb, &spec, a, true)?;
    let sem_b = semantics(&mut g, &state.seg, &sb, &spec, b, true)?;
    let ab = state.g_ab.forward(&mut g, &bab, a, &sem_a.guidance)?;
    let ba = state.g_ba.forward(&mut g, &bba, b, &sem_b.guidance)?;
    // Without semantic terms in the objective, features of generated images are
    // only logged, so they are taken from detached copies unless guidance needs them.
    let (ab_src, ba_src) = if seg_in_objective || spec.uses_guidance() {
        (ab, ba)
    } else {
        (g.detach(ab), g.detach(ba))
    };
    let sem_ab = semantics(&mut g, &state.seg, &sb, &spec, ab_src, true)?;
    let sem_ba = semantics(&mut g, &state.seg, &sb, &spec, ba_src, true)?;
    let a_hat = state.g_ba.forward(&mut g, &bba, ab, &sem_ab.guidance)?;
    let b_hat = state.g_ab.forward(&mut g, &bab, ba, &sem_ba.guidance)?;
    let (a_hat_src, b_hat_src) = if seg_in_objective {
        (a_hat, b_hat)
    } else {
        (g.detach(a_hat), g.detach(b_hat))
    };
    let sem_a_hat = semantics(&mut g, &state.seg, &sb, &spec, a_hat_src, true)?;
    let sem_b_hat = semantics(&mut g, &state.seg, &sb, &spec, b_hat_src, true)?;

    // Discriminator update on detached fakes.
    let (d_loss_a, d_loss_b) = {
        let mut gd = Graph::new();
        let bda = state.d_a.params.bind(&mut gd, true);
        let bdb = state.d_b.params.bind(&mut gd, true);
        let real_a = gd.constant(batch_a.clone());
        let real_b = gd.constant(batch_b.clone());
        let fake_a = gd.constant(g.value(ba).clone());
        let fake_b = gd.constant(g.value(ab).clone());
        let disc_loss =
            |gd: &mut Graph<f32>, d: &Discriminator<f32>, bd: &Bound, real: Var, fake: Var| {
                let pr = d.forward(gd, bd, real);
                let pf = d.forward(gd, bd, fake);
                let lr = neg_mean_log(gd, pr, false);
                let lf = neg_mean_log(gd, pf, true);
                gd.weighted_sum(&[(lr, 1.0), (lf, 1.0)])
            };
        let la = disc_loss(&mut gd, &state.d_a, &bda, real_a, fake_a);
        let lb = disc_loss(&mut gd, &state.d_b, &bdb, real_b, fake_b);
        let d_loss_a = check_finite("d_loss_a", step, gd.value(la).item() as f64)?;
        let d_loss_b = check_finite("d_loss_b", step, gd.value(lb).item() as f64)?;
        let total = gd.weighted_sum(&[(la, 1.0), (lb, 1.0)]);
        let mut grads = gd.backward(total);
        let ga = collect_grads(&mut grads, &bda, "d_a", step)?;
        let gb = collect_grads(&mut grads, &bdb, "d_b", step)?;
        state.opt_d_a.update(&mut state.d_a.params, &ga);
        state.opt_d_b.update(&mut state.d_b.params, &gb);
        (d_loss_a, d_loss_b)
    };

    // Generator objective against the updated, frozen discriminators.
    let bda = state.d_a.params.bind(&mut g, false);
    let bdb = state.d_b.params.bind(&mut g, false);
    let p_ab = state.d_b.forward(&mut g, &bdb, ab);
    let p_ba = state.d_a.forward(&mut g, &bda, ba);
    let adv_ab = neg_mean_log(&mut g, p_ab, false);
    let adv_ba = neg_mean_log(&mut g, p_ba, false);
    let l1_f = g.mean_abs_diff(a, a_hat);
    let l1_b = g.mean_abs_diff(b, b_hat);
    let kind = weights.feature_loss;
    let seg1_a = feat_map_loss_graph(&mut g, &sem_a.features, &sem_a_hat.features, kind);
    let seg1_b = feat_map_loss_graph(&mut g, &sem_b.features, &sem_b_hat.features, kind);
    let seg1 = g.weighted_sum(&[(seg1_a, 1.0), (seg1_b, 1.0)]);
    let seg2_a = feat_map_loss_graph(&mut g, &sem_a.features, &sem_ab.features, kind);
    let seg2_b = feat_map_loss_graph(&mut g, &sem_b.features, &sem_ba.features, kind);
    let seg2 = g.weighted_sum(&[(seg2_a, 1.0), (seg2_b, 1.0)]);

    let val = |g: &Graph<f32>, v: Var| g.value(v).item() as f64;
    let mut breakdown = LossBreakdown {
        step,
        l_cycle_l1_forward: val(&g, l1_f),
        l_cycle_l1_backward: val(&g, l1_b),
        l_seg1: val(&g, seg1),
        l_seg2: val(&g, seg2),
        l_adv_ab: val(&g, adv_ab),
        l_adv_ba: val(&g, adv_ba),
        d_loss_a,
        d_loss_b,
        total: 0.0,
    };
    breakdown.total = total_objective(&breakdown, &weights)?;

    let (lc, ls) = (weights.lambda_cyc as f32, weights.lambda_seg as f32);
    let mut terms = vec![(adv_ab, 1.0), (adv_ba, 1.0), (l1_f, lc), (l1_b, lc)];
    if seg_in_objective {
        terms.extend([(seg1, ls), (seg2, ls)]);
    }
    let objective = g.weighted_sum(&terms);
    let mut grads = g.backward(objective);
    let gab = collect_grads(&mut grads, &bab, "g_ab", step)?;
    let gba = collect_grads(&mut grads, &bba, "g_ba", step)?;
    state.opt_g_ab.update(&mut state.g_ab.params, &gab);
    state.opt_g_ba.update(&mut state.g_ba.params, &gba);
    state.step = step;
    Ok(breakdown)
}

/// Batch order seed for one domain and epoch; independent of where a run resumes.
fn epoch_order(seed: u64, domain: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let s = seed ^ (domain << 56) ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
    idx
}

/// Indices of the batch used at 0-based global step `k`.
pub fn batch_indices(
    seed: u64,
    domain: u64,
    k: u64,
    n: usize,
    batch: usize,
    steps_per_epoch: u64,
) -> Vec<usize> {
    let epoch = k / steps_per_epoch;
    let pos = (k % steps_per_epoch) as usize;
    let order = epoch_order(seed, domain, epoch, n);
    (0..batch).map(|j| order[(pos * batch + j) % n]).collect()
}

/// Where `fit` writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Directory receiving `losses.csv` and `checkpoint/`.
    pub out_dir: Option<PathBuf>,
    /// Stop early once this many steps are complete.
    pub stop_at_step: Option<u64>,
}

pub const LOSS_LOG: &str = "losses.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Runs the configured epochs from `state.step` onward. Domains are `N×3×H×W`
/// tensors in `[−1,1]`. Returns the breakdowns of the steps run here.
pub fn fit(
    state: &mut TrainState,
    data_a: &Tensor<f32>,
    data_b: &Tensor<f32>,
    options: &FitOptions,
) -> Result<Vec<LossBreakdown>> {
    let (na, nb) = (data_a.batch(), data_b.batch());
    if na == 0 || nb == 0 {
        return Err(Error::InvalidInput(
            "both domains need at least one patch".into(),
        ));
    }
    let p = state.training.patch_size;
    for (name, d) in [("A", data_a), ("B", data_b)] {
        if (d.channels(), d.height(), d.width()) != (3, p, p) {
            return Err(Error::ShapeMismatch(format!(
                "domain {name} patches are {:?}, expected 3×{p}×{p}",
                d.shape()
            )));
        }
    }
    let spe = state.steps_per_epoch(na, nb);
    let mut total = spe * state.training.epochs as u64;
    if let Some(stop) = options.stop_at_step {
        total = total.min(stop);
    }
    let mut log = match &options.out_dir {
        Some(dir) => Some(open_loss_log(dir, state.step)?),
        None => None,
    };
    let bs = state.training.batch_size;
    let seed = state.training.seed;
    let mut out = Vec::new();
    while state.step < total {
        let k = state.step;
        let xa = gather(data_a, &batch_indices(seed, 0, k, na, bs, spe))?;
        let xb = gather(data_b, &batch_indices(seed, 1, k, nb, bs, spe))?;
        let br = train_step(state, &xa, &xb)?;
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", br.csv_row()).map_err(|e| Error::io(LOSS_LOG, e))?;
        }
        if br.step % spe == 0 {
            info!(
                "epoch {} done (step {}): total {:.4}, cycle {:.4}/{:.4}, seg {:.4}/{:.4}",
                br.step / spe,
                br.step,
                br.total,
                br.l_cycle_l1_forward,
                br.l_cycle_l1_backward,
                br.l_seg1,
                br.l_seg2
            );
        }
        out.push(br);
    }
    if let Some(dir) = &options.out_dir {
        if let Some(f) = log.as_mut() {
            f.flush().map_err(|e| Error::io(dir.join(LOSS_LOG), e))?;
        }
        crate::checkpoint::save(state, &dir.join(CHECKPOINT_DIR))?;
    }
    Ok(out)
}

/// Opens the loss log for appending after `step`, dropping any later rows left
/// by an interrupted run.
fn open_loss_log(dir: &Path, step: u64) -> Result<File> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(LOSS_LOG);
    let mut keep = vec![LossBreakdown::CSV_HEADER.to_string()];
    if step > 0 && path.exists() {
        let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
        for line in BufReader::new(f).lines().skip(1) {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            if LossBreakdown::parse_csv_row(&line)?.step <= step {
                keep.push(line);
            }
        }
    }
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    for line in keep {
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    Ok(f)
}

/// Reads a loss log written by [`fit`].
pub fn read_loss_log(path: &Path) -> Result<Vec<LossBreakdown>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for line in BufReader::new(f).lines().skip(1) {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            rows.push(LossBreakdown::parse_csv_row(&line)?);
        }
    }
    Ok(rows)
}

/// Translates an RGB image (`[0,255]`) with the chosen generator. Sizes not
/// divisible by the network's pooling factor are reflect-padded and cropped back.
pub fn normalize_image(
    image: &ColorImage,
    state: &TrainState,
    direction: Direction,
) -> Result<ColorImage> {
    let gen = match direction {
        Direction::AToB => &state.g_ab,
        Direction::BToA => &state.g_ba,
    };
    normalize_with(image, gen, &state.seg)
}

pub fn normalize_with(
    image: &ColorImage,
    gen: &Generator<f32>,
    seg: &SemanticNet<f32>,
) -> Result<ColorImage> {
    let m = 1usize << (gen.spec.stages().max(seg.stages()) - 1);
    let (w, h) = (image.width(), image.height());
    let (pw, ph) = (w.div_ceil(m) * m, h.div_ceil(m) * m);
    let padded = if (pw, ph) != (w, h) {
        warn!("{w}×{h} is not divisible by {m}; reflect-padding to {pw}×{ph}");
        image.reflect_pad(pw, ph)
    } else {
        image.clone()
    };
    let x = padded.to_symmetric::<f32>();
    let guide = generator_guidance(gen, &x, seg)?;
    let y = gen.generate(&x, &guide)?;
    let out = ColorImage::from_symmetric(&y, 0).clamped();
    Ok(out.crop(0, 0, w, h))
}

/// Foreground mask the frozen semantic net predicts for an RGB image, padded
/// like [`normalize_with`] when the size does not divide its pooling factor.
pub fn predict_structure(image: &ColorImage, seg: &SemanticNet<f32>) -> Result<Mask> {
    let m = 1usize << (seg.stages() - 1);
    let (w, h) = (image.width(), image.height());
    let padded = image.reflect_pad(w.div_ceil(m) * m, h.div_ceil(m) * m);
    let p = seg.predict_mask(&padded.to_tensor::<f32>(1.0 / 255.0, 0.0))?;
    let full = Mask::from_tensor(&p, 0);
    let data = (0..h)
        .flat_map(|y| {
            full.data[y * full.width..y * full.width + w]
                .iter()
                .copied()
        })
        .collect();
    Mask::new(w, h, data)
}

/// Parameter count of every trainable network, for logging.
pub fn parameter_summary(state: &TrainState) -> Vec<(&'static str, usize)> {
    let count = |p: &ParamSet<f32>| p.count();
    vec![
        ("g_ab", count(&state.g_ab.params)),
        ("g_ba", count(&state.g_ba.params)),
        ("d_a", count(&state.d_a.params)),
        ("d_b", count(&state.d_b.params)),
        ("seg", count(&state.seg.params)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::ConvMode;
    use rand::Rng;

    fn tiny_model(generator: GeneratorSpec) -> ModelConfig {
        ModelConfig {
            generator: GeneratorSpec {
                widths: vec![4, 8],
                ..generator
            },
            discriminator: DiscriminatorSpec {
                widths: vec![4, 8],
                ..Default::default()
            },
            semantic: SegNetSpec {
                widths: vec![2, 4],
                ..Default::default()
            },
        }
    }

    fn tiny_state(generator: GeneratorSpec, lr: f64) -> TrainState {
        let model = tiny_model(generator);
        let seg = SemanticNet::new(model.semantic.clone(), 9).unwrap();
        let training = TrainingConfig {
            learning_rate: lr,
            batch_size: 2,
            patch_size: 8,
            ..Default::default()
        };
        TrainState::new(model, training, seg).unwrap()
    }

    fn batch(seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            [2, 3, 8, 8],
            (0..2 * 3 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut s = tiny_state(GeneratorSpec::default(), 0.0);
        let before = (
            s.g_ab.params.clone(),
            s.g_ba.params.clone(),
            s.d_a.params.clone(),
            s.d_b.params.clone(),
        );
        train_step(&mut s, &batch(1), &batch(2)).unwrap();
        assert_eq!(
            before,
            (
                s.g_ab.params.clone(),
                s.g_ba.params.clone(),
                s.d_a.params.clone(),
                s.d_b.params.clone()
            )
        );
    }

    #[test]
    fn step_is_deterministic_and_recomposes() {
        let run = || {
            let mut s = tiny_state(GeneratorSpec::default(), 0.002);
            train_step(&mut s, &batch(1), &batch(2)).unwrap()
        };
        let (x, y) = (run(), run());
        assert_eq!(x, y);
        let w = LossWeights::default();
        let manual = x.l_adv_ab
            + x.l_adv_ba
            + w.lambda_cyc * (x.l_cycle_l1_forward + x.l_cycle_l1_backward)
            + w.lambda_seg * (x.l_seg1 + x.l_seg2);
        assert!((manual - x.total).abs() < 1e-12);
    }

    #[test]
    fn every_ablation_trains() {
        for spec in [
            GeneratorSpec::conv_ablation(),
            GeneratorSpec::seg_only_ablation(),
            GeneratorSpec::plain_cyclegan(),
        ] {
            let mut s = tiny_state(spec, 0.002);
            let seg_before = s.seg.params.checksum();
            let br = train_step(&mut s, &batch(3), &batch(4)).unwrap();
            assert!(br.total.is_finite());
            assert!(br.l_seg2 > 0.0);
            assert_eq!(seg_before, s.seg.params.checksum());
        }
    }

    #[test]
    fn plain_cyclegan_objective_excludes_seg_terms() {
        let mut s = tiny_state(
            GeneratorSpec {
                conv_mode: ConvMode::Standard,
                ..GeneratorSpec::plain_cyclegan()
            },
            0.002,
        );
        let br = train_step(&mut s, &batch(3), &batch(4)).unwrap();
        let w = s.weights();
        let manual = br.l_adv_ab
            + br.l_adv_ba
            + w.lambda_cyc * (br.l_cycle_l1_forward + br.l_cycle_l1_backward);
        assert!((manual - br.total).abs() < 1e-12);
    }

    #[test]
    fn batch_order_is_a_permutation_per_epoch() {
        let spe = 5;
        let mut seen: Vec<usize> = (0..spe)
            .flat_map(|k| batch_indices(3, 0, k, 10, 2, spe))
            .collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_ne!(
            batch_indices(3, 0, 0, 10, 2, spe),
            batch_indices(3, 0, spe, 10, 2, spe)
        );
    }

    #[test]
    fn normalize_keeps_size_and_range() {
        let s = tiny_state(GeneratorSpec::default(), 0.002);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = ColorImage::new(
            10,
            7,
            (0..10 * 7 * 3).map(|_| rng.gen_range(0.0..255.0)).collect(),
        )
        .unwrap();
        let out = normalize_image(&img, &s, Direction::AToB).unwrap();
        assert_eq!((out.width(), out.height()), (10, 7));
        assert!(out.data().iter().all(|v| (0.0..=255.0).contains(v)));
        assert_eq!(out, normalize_image(&img, &s, Direction::AToB).unwrap());
    }

    #[test]
    fn empty_domain_is_invalid_input() {
        let mut s = tiny_state(GeneratorSpec::default(), 0.002);
        let err = fit(
            &mut s,
            &Tensor::zeros([0, 3, 8, 8]),
            &batch(1),
            &FitOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }
}
