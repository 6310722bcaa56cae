//! Objective terms: semantic feature-map loss, cycle consistency, adversarial
//! losses and their weighted total.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::guidance::{extract_multiscale_features, GuidanceStack, SemanticNet};
use crate::networks::Generator;
use crate::tensor::{Real, Tensor};

/// Clamp applied to discriminator probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Per-scale reduction used by the feature-map loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureLossKind {
    /// `Σ_s sqrt(mean((f_s(x) − f_s(y))²))`.
    #[default]
    SummedRmse,
    /// `Σ_s mean((f_s(x) − f_s(y))²)`.
    SummedMse,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_cyc: f64,
    pub lambda_seg: f64,
    pub feature_loss: FeatureLossKind,
    /// Whether the semantic terms enter the objective (they are logged either way).
    #[serde(skip, default = "yes")]
    pub include_seg: bool,
}

fn yes() -> bool {
    true
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cyc: 10.0,
            lambda_seg: 1.0,
            feature_loss: FeatureLossKind::SummedRmse,
            include_seg: true,
        }
    }
}

/// Every logged objective component of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: u64,
    pub l_cycle_l1_forward: f64,
    pub l_cycle_l1_backward: f64,
    pub l_seg1: f64,
    pub l_seg2: f64,
    pub l_adv_ab: f64,
    pub l_adv_ba: f64,
    pub d_loss_a: f64,
    pub d_loss_b: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str =
        "step,l_cycle_l1_forward,l_cycle_l1_backward,l_seg1,l_seg2,l_adv_ab,l_adv_ba,d_loss_a,d_loss_b,total";

    /// Generator-side components by name, in log order.
    pub fn components(&self) -> [(&'static str, f64); 6] {
        [
            ("l_cycle_l1_forward", self.l_cycle_l1_forward),
            ("l_cycle_l1_backward", self.l_cycle_l1_backward),
            ("l_seg1", self.l_seg1),
            ("l_seg2", self.l_seg2),
            ("l_adv_ab", self.l_adv_ab),
            ("l_adv_ba", self.l_adv_ba),
        ]
    }

    /// CSV row; `{:e}` formatting round-trips every `f64` exactly.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.step,
            self.l_cycle_l1_forward,
            self.l_cycle_l1_backward,
            self.l_seg1,
            self.l_seg2,
            self.l_adv_ab,
            self.l_adv_ba,
            self.d_loss_a,
            self.d_loss_b,
            self.total
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let cells: Vec<&str> = line.trim().split(',').collect();
        if cells.len() != 10 {
            return Err(Error::InvalidInput(format!(
                "loss row has {} cells",
                cells.len()
            )));
        }
        let f = |i: usize| -> Result<f64> {
            cells[i]
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad loss cell `{}`", cells[i])))
        };
        Ok(Self {
            step: cells[0]
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad step `{}`", cells[0])))?,
            l_cycle_l1_forward: f(1)?,
            l_cycle_l1_backward: f(2)?,
            l_seg1: f(3)?,
            l_seg2: f(4)?,
            l_adv_ab: f(5)?,
            l_adv_ba: f(6)?,
            d_loss_a: f(7)?,
            d_loss_b: f(8)?,
            total: f(9)?,
        })
    }
}

/// Summed per-scale feature-map distance between two guidance stacks.
pub fn feat_map_loss<T: Real>(
    x: &GuidanceStack<T>,
    y: &GuidanceStack<T>,
    kind: FeatureLossKind,
) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scales vs {}",
            x.len(),
            y.len()
        )));
    }
    let mut total = 0.0;
    for (s, (a, b)) in x.maps().iter().zip(y.maps()).enumerate() {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch(format!(
                "scale {s}: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let mse = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&p, &q)| (p - q).to_f64().unwrap().powi(2))
            .sum::<f64>()
            / a.len() as f64;
        total += match kind {
            FeatureLossKind::SummedRmse => mse.sqrt(),
            FeatureLossKind::SummedMse => mse,
        };
    }
    Ok(total)
}

/// Differentiable feature-map loss over matching per-scale nodes.
pub(crate) fn feat_map_loss_graph<T: Real>(
    g: &mut Graph<T>,
    x: &[Var],
    y: &[Var],
    kind: FeatureLossKind,
) -> Var {
    let terms: Vec<(Var, T)> = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| {
            let t = match kind {
                FeatureLossKind::SummedRmse => g.rmse(a, b),
                FeatureLossKind::SummedMse => g.mse(a, b),
            };
            (t, T::one())
        })
        .collect();
    g.weighted_sum(&terms)
}

fn features<T: Real>(image_sym: &Tensor<T>, net: &SemanticNet<T>) -> Result<GuidanceStack<T>> {
    extract_multiscale_features(&image_sym.map(|v| (v + T::one()) * T::lit(0.5)), net)
}

/// `(l_seg1, l_seg2)` for images in `[−1,1]`: reconstructions against their
/// sources, then translations against their sources.
#[allow(clippy::too_many_arguments)]
pub fn seg_loss<T: Real>(
    a: &Tensor<T>,
    a_hat: &Tensor<T>,
    b: &Tensor<T>,
    b_hat: &Tensor<T>,
    ab_hat: &Tensor<T>,
    ba_hat: &Tensor<T>,
    net: &SemanticNet<T>,
    kind: FeatureLossKind,
) -> Result<(f64, f64)> {
    let shape = a.shape();
    if [a_hat, b, b_hat, ab_hat, ba_hat]
        .iter()
        .any(|t| t.shape() != shape)
    {
        return Err(Error::ShapeMismatch(
            "semantic loss images differ in shape".into(),
        ));
    }
    let (fa, fb) = (features(a, net)?, features(b, net)?);
    let seg1 = feat_map_loss(&fa, &features(a_hat, net)?, kind)?
        + feat_map_loss(&fb, &features(b_hat, net)?, kind)?;
    let seg2 = feat_map_loss(&fa, &features(ab_hat, net)?, kind)?
        + feat_map_loss(&fb, &features(ba_hat, net)?, kind)?;
    Ok((seg1, seg2))
}

/// Mean absolute error per element.
pub fn l1_mean<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    Ok(x.data()
        .iter()
        .zip(y.data())
        .map(|(&p, &q)| (p - q).abs().to_f64().unwrap())
        .sum::<f64>()
        / x.len() as f64)
}

/// `λ_cyc·(L1(a,â) + L1(b,b̂)) + λ_seg·l_seg` from already-computed images.
pub fn cycle_loss_terms<T: Real>(
    a: &Tensor<T>,
    a_hat: &Tensor<T>,
    b: &Tensor<T>,
    b_hat: &Tensor<T>,
    l_seg: f64,
    weights: &LossWeights,
) -> Result<f64> {
    let l1 = l1_mean(a, a_hat)? + l1_mean(b, b_hat)?;
    let seg = if weights.include_seg {
        weights.lambda_seg * l_seg
    } else {
        0.0
    };
    Ok(weights.lambda_cyc * l1 + seg)
}

/// Full cycle-consistency loss: runs both generators on `a` and `b` (in `[−1,1]`),
/// with guidance recomputed from each generator's input.
pub fn cycle_loss<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g_ab: &Generator<T>,
    g_ba: &Generator<T>,
    net: &SemanticNet<T>,
    weights: &LossWeights,
) -> Result<f64> {
    let run = |gen: &Generator<T>, x: &Tensor<T>| -> Result<Tensor<T>> {
        let guide = crate::trainer::generator_guidance(gen, x, net)?;
        gen.generate(x, &guide)
    };
    let ab_hat = run(g_ab, a)?;
    let ba_hat = run(g_ba, b)?;
    let a_hat = run(g_ba, &ab_hat)?;
    let b_hat = run(g_ab, &ba_hat)?;
    let (s1, s2) = seg_loss(
        a,
        &a_hat,
        b,
        &b_hat,
        &ab_hat,
        &ba_hat,
        net,
        weights.feature_loss,
    )?;
    cycle_loss_terms(a, &a_hat, b, &b_hat, s1 + s2, weights)
}

fn mean_log(p: &[f64], complement: bool) -> f64 {
    p.iter()
        .map(|&v| {
            let v = v.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if complement {
                (1.0 - v).ln()
            } else {
                v.ln()
            }
        })
        .sum::<f64>()
        / p.len() as f64
}

/// `(d_loss, g_loss)`: `−[mean ln real + mean ln(1 − fake)]` and `−mean ln fake`.
pub fn adversarial_loss(real_probs: &[f64], fake_probs: &[f64]) -> Result<(f64, f64)> {
    if real_probs.is_empty() || fake_probs.is_empty() {
        return Err(Error::InvalidInput("empty probability map".into()));
    }
    if real_probs
        .iter()
        .chain(fake_probs)
        .any(|p| !(0.0..=1.0).contains(p))
    {
        return Err(Error::InvalidInput(
            "probabilities must lie in [0,1]".into(),
        ));
    }
    let d = -(mean_log(real_probs, false) + mean_log(fake_probs, true));
    let g = -mean_log(fake_probs, false);
    Ok((d, g))
}

/// Generator objective: both adversarial terms plus the weighted cycle loss.
pub fn total_objective(c: &LossBreakdown, w: &LossWeights) -> Result<f64> {
    for (name, v) in c.components() {
        if !v.is_finite() {
            return Err(Error::Numerical {
                component: name.into(),
                step: c.step,
            });
        }
    }
    let seg = if w.include_seg {
        w.lambda_seg * (c.l_seg1 + c.l_seg2)
    } else {
        0.0
    };
    Ok(c.l_adv_ab
        + c.l_adv_ba
        + w.lambda_cyc * (c.l_cycle_l1_forward + c.l_cycle_l1_backward)
        + seg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack(maps: Vec<(usize, Vec<f64>)>) -> GuidanceStack<f64> {
        GuidanceStack::new(
            maps.into_iter()
                .map(|(side, v)| Tensor::from_vec([1, 1, side, side], v).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn feature_loss_constant_offsets_add() {
        let x = stack(vec![(2, vec![0.75; 4]), (1, vec![0.5])]);
        let y = stack(vec![(2, vec![0.25; 4]), (1, vec![0.25])]);
        assert!((feat_map_loss(&x, &y, FeatureLossKind::SummedRmse).unwrap() - 0.75).abs() < 1e-12);
        assert!(
            (feat_map_loss(&x, &y, FeatureLossKind::SummedMse).unwrap() - 0.3125).abs() < 1e-12
        );
    }

    #[test]
    fn feature_loss_rejects_mismatched_stacks() {
        let x = stack(vec![(2, vec![0.0; 4])]);
        let y = stack(vec![(2, vec![0.0; 4]), (1, vec![0.0])]);
        assert!(matches!(
            feat_map_loss(&x, &y, FeatureLossKind::SummedRmse),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn adversarial_extremes_are_finite() {
        let (d, g) = adversarial_loss(&[0.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!(d.is_finite() && g.is_finite());
        assert!(adversarial_loss(&[1.5], &[0.5]).is_err());
    }

    #[test]
    fn objective_flags_non_finite_component() {
        let c = LossBreakdown {
            step: 7,
            l_seg2: f64::NAN,
            ..Default::default()
        };
        match total_objective(&c, &LossWeights::default()) {
            Err(Error::Numerical { component, step }) => {
                assert_eq!((component.as_str(), step), ("l_seg2", 7))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_row_roundtrips() {
        let c = LossBreakdown {
            step: 3,
            l_cycle_l1_forward: 0.1,
            l_cycle_l1_backward: 1.0 / 3.0,
            l_seg1: 2.5e-9,
            l_seg2: 7.0,
            l_adv_ab: 0.69,
            l_adv_ba: 0.7,
            d_loss_a: 1.3,
            d_loss_b: 1.4,
            total: 12.0,
        };
        assert_eq!(LossBreakdown::parse_csv_row(&c.csv_row()).unwrap(), c);
        assert_eq!(LossBreakdown::CSV_HEADER.split(',').count(), 10);
    }
}
