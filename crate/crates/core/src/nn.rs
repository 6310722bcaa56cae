//! Named parameter storage and the layer primitives shared by every network.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::pac::AffinityMode;
use crate::tensor::{Real, Tensor};

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Real> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = value,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, value));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// SHA-256 over names, shapes and little-endian `f64` values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_f64().unwrap_or(f64::NAN).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Sub-collection of entries under `prefix.`, with the prefix stripped.
    pub fn scoped(&self, prefix: &str) -> ParamSet<T> {
        let mut out = ParamSet::new();
        let p = format!("{prefix}.");
        for (name, t) in &self.entries {
            if let Some(rest) = name.strip_prefix(&p) {
                out.insert(rest, t.clone());
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for (n, t) in &self.entries {
            out.insert(n.clone(), t.cast());
        }
        out
    }

    /// Places every tensor on `g`, trainable or frozen.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (n.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Graph handles of a bound [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Xavier-uniform kernel `[out][in][k][k]`.
pub fn xavier<T: Real>(rng: &mut ChaCha8Rng, cout: usize, cin: usize, k: usize) -> Tensor<T> {
    let fan_in = (cin * k * k) as f64;
    let fan_out = (cout * k * k) as f64;
    let bound = (6.0 / (fan_in + fan_out)).sqrt();
    let data = (0..cout * cin * k * k)
        .map(|_| T::lit(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec([cout, cin, k, k], data).expect("kernel shape")
}

pub(crate) fn channel_vec<T: Real>(c: usize, v: f64) -> Tensor<T> {
    Tensor::full([1, c, 1, 1], T::lit(v))
}

/// Group count for a group norm over `c` channels: 8, or fewer when `c` is small.
pub fn norm_groups(c: usize) -> usize {
    [8, 4, 2, 1]
        .into_iter()
        .find(|g| *g <= c && c.is_multiple_of(*g))
        .unwrap_or(1)
}

/// How a network layer convolves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum LayerConv {
    Standard,
    PixelAdaptive(AffinityMode),
}

pub(crate) fn add_conv<T: Real>(
    ps: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
) {
    ps.insert(format!("{name}.w"), xavier(rng, cout, cin, k));
    ps.insert(format!("{name}.b"), channel_vec(cout, 0.0));
}

pub(crate) fn add_pac<T: Real>(
    ps: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    sigma_init: f64,
) {
    add_conv(ps, rng, name, cin, cout, k);
    ps.insert(
        format!("{name}.log_sigma"),
        channel_vec(cout, sigma_init.ln()),
    );
}

pub(crate) fn add_norm<T: Real>(ps: &mut ParamSet<T>, name: &str, c: usize) {
    ps.insert(format!("{name}.gamma"), channel_vec(c, 1.0));
    ps.insert(format!("{name}.beta"), channel_vec(c, 0.0));
}

/// Convolution (standard or pixel-adaptive) followed by group norm, no activation.
pub(crate) fn conv_norm<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    name: &str,
    x: Var,
    conv: LayerConv,
    guide: Option<Var>,
) -> Var {
    let w = b.var(&format!("{name}.w"));
    let bias = b.try_var(&format!("{name}.b"));
    let k = g.value(w).shape()[2];
    let y = match conv {
        LayerConv::Standard => g.conv2d(x, w, bias, 1, (k - 1) / 2),
        LayerConv::PixelAdaptive(mode) => {
            let ls = b.var(&format!("{name}.log_sigma"));
            g.pac2d(x, guide, w, bias, ls, mode)
        }
    };
    let c = g.value(y).channels();
    g.group_norm(
        y,
        b.var(&format!("{name}.gamma")),
        b.var(&format!("{name}.beta")),
        norm_groups(c),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn xavier_respects_bound_and_seed() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a: Tensor<f32> = xavier(&mut r1, 8, 4, 3);
        let b: Tensor<f32> = xavier(&mut r2, 8, 4, 3);
        assert_eq!(a, b);
        let bound = (6.0f32 / (36.0 + 72.0)).sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn groups_divide_channels() {
        assert_eq!(norm_groups(16), 8);
        assert_eq!(norm_groups(4), 4);
        assert_eq!(norm_groups(6), 2);
        assert_eq!(norm_groups(1), 1);
    }

    #[test]
    fn checksum_tracks_values() {
        let mut ps = ParamSet::<f32>::new();
        ps.insert("a", Tensor::scalar(1.0));
        let c0 = ps.checksum();
        ps.get_mut("a").unwrap().data_mut()[0] = 1.5;
        assert_ne!(c0, ps.checksum());
        assert_eq!(ps.scoped("a").len(), 0);
    }
}
