//! On-disk checkpoints: `manifest.json` plus one little-endian `f32` file per array.
//!
//! A checkpoint is written into a sibling temporary directory and renamed into
//! place, so readers never observe a half-written one.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::guidance::SemanticNet;
use crate::networks::{Discriminator, Generator};
use crate::nn::ParamSet;
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::trainer::{ModelConfig, TrainState, TrainingConfig};

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "segcn-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub file: String,
    pub shape: [usize; 4],
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub step: u64,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    /// Adam step counters by optimizer name.
    pub optimizer_steps: BTreeMap<String, u64>,
    pub arrays: Vec<ArrayEntry>,
    /// SHA-256 over every array's name and content hash, in manifest order.
    pub content_sha256: String,
}

fn encode(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn sha(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn content_hash(arrays: &[ArrayEntry]) -> String {
    let mut h = Sha256::new();
    for a in arrays {
        h.update(a.name.as_bytes());
        h.update([0]);
        h.update(a.sha256.as_bytes());
    }
    hex::encode(h.finalize())
}

fn groups(state: &TrainState) -> Vec<(String, &ParamSet<f32>)> {
    let mut g: Vec<(String, &ParamSet<f32>)> = vec![
        ("g_ab".into(), &state.g_ab.params),
        ("g_ba".into(), &state.g_ba.params),
        ("d_a".into(), &state.d_a.params),
        ("d_b".into(), &state.d_b.params),
        ("seg".into(), &state.seg.params),
    ];
    for (name, opt) in optimizers(state) {
        g.push((format!("adam_{name}_m"), &opt.m));
        g.push((format!("adam_{name}_v"), &opt.v));
    }
    g
}

fn optimizers(state: &TrainState) -> [(&'static str, &Adam<f32>); 4] {
    [
        ("g_ab", &state.opt_g_ab),
        ("g_ba", &state.opt_g_ba),
        ("d_a", &state.opt_d_a),
        ("d_b", &state.opt_d_b),
    ]
}

/// Writes `state` to `dir`, replacing any previous checkpoint there.
pub fn save(state: &TrainState, dir: &Path) -> Result<()> {
    let parent = dir
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let base = dir
        .file_name()
        .ok_or_else(|| Error::Checkpoint(format!("{} has no directory name", dir.display())))?
        .to_string_lossy()
        .to_string();
    let tmp = parent.join(format!(".{base}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;

    let mut arrays = Vec::new();
    for (group, params) in groups(state) {
        for (name, t) in params.iter() {
            let file = format!("{:05}.bin", arrays.len());
            let bytes = encode(t);
            let path = tmp.join(&file);
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            arrays.push(ArrayEntry {
                name: format!("{group}/{name}"),
                file,
                shape: t.shape(),
                sha256: sha(&bytes),
            });
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        step: state.step,
        model: state.model.clone(),
        training: state.training.clone(),
        optimizer_steps: optimizers(state)
            .iter()
            .map(|(n, o)| (n.to_string(), o.step))
            .collect(),
        content_sha256: content_hash(&arrays),
        arrays,
    };
    let path = tmp.join(MANIFEST);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;

    let old = parent.join(format!(".{base}.old-{}", std::process::id()));
    if dir.exists() {
        fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    if old.exists() {
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_slice(&text)?;
    if m.format != FORMAT || m.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint {} v{}",
            m.format, m.version
        )));
    }
    if content_hash(&m.arrays) != m.content_sha256 {
        return Err(Error::Checkpoint(
            "manifest content hash does not match its arrays".into(),
        ));
    }
    Ok(m)
}

fn read_array(dir: &Path, e: &ArrayEntry) -> Result<Tensor<f32>> {
    let path: PathBuf = dir.join(&e.file);
    let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
    if sha(&bytes) != e.sha256 {
        return Err(Error::Checkpoint(format!(
            "{} does not match its recorded hash",
            e.name
        )));
    }
    let n: usize = e.shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::Checkpoint(format!(
            "{} holds {} bytes, expected {}",
            e.name,
            bytes.len(),
            n * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::from_vec(e.shape, data)
}

/// Loads a checkpoint, verifying every array against the manifest.
pub fn load(dir: &Path) -> Result<TrainState> {
    let m = read_manifest(dir)?;
    let mut sets: BTreeMap<String, ParamSet<f32>> = BTreeMap::new();
    for e in &m.arrays {
        let (group, name) = e
            .name
            .split_once('/')
            .ok_or_else(|| Error::Checkpoint(format!("array name `{}` lacks a group", e.name)))?;
        sets.entry(group.to_string())
            .or_default()
            .insert(name, read_array(dir, e)?);
    }
    let mut take = |g: &str| sets.remove(g).unwrap_or_default();
    let adam = m.training.adam();
    let opt = |name: &str, take: &mut dyn FnMut(&str) -> ParamSet<f32>| -> Result<Adam<f32>> {
        let step = *m
            .optimizer_steps
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("no step counter for optimizer {name}")))?;
        Ok(Adam {
            config: adam,
            step,
            m: take(&format!("adam_{name}_m")),
            v: take(&format!("adam_{name}_v")),
        })
    };
    let state = TrainState {
        g_ab: Generator {
            spec: m.model.generator.clone(),
            params: take("g_ab"),
        },
        g_ba: Generator {
            spec: m.model.generator.clone(),
            params: take("g_ba"),
        },
        d_a: Discriminator {
            spec: m.model.discriminator.clone(),
            params: take("d_a"),
        },
        d_b: Discriminator {
            spec: m.model.discriminator.clone(),
            params: take("d_b"),
        },
        seg: SemanticNet {
            spec: m.model.semantic.clone(),
            params: take("seg"),
        },
        opt_g_ab: opt("g_ab", &mut take)?,
        opt_g_ba: opt("g_ba", &mut take)?,
        opt_d_a: opt("d_a", &mut take)?,
        opt_d_b: opt("d_b", &mut take)?,
        model: m.model.clone(),
        training: m.training.clone(),
        step: m.step,
    };
    verify_structure(&state)?;
    Ok(state)
}

/// Checks that every network holds exactly the parameters its spec creates.
fn verify_structure(state: &TrainState) -> Result<()> {
    let fresh_seg = SemanticNet::<f32>::new(state.model.semantic.clone(), 0)?;
    let fresh = TrainState::new(state.model.clone(), state.training.clone(), fresh_seg)?;
    let pairs: [(&str, &ParamSet<f32>, &ParamSet<f32>); 9] = [
        ("g_ab", &state.g_ab.params, &fresh.g_ab.params),
        ("g_ba", &state.g_ba.params, &fresh.g_ba.params),
        ("d_a", &state.d_a.params, &fresh.d_a.params),
        ("d_b", &state.d_b.params, &fresh.d_b.params),
        ("seg", &state.seg.params, &fresh.seg.params),
        ("adam_g_ab_m", &state.opt_g_ab.m, &fresh.g_ab.params),
        ("adam_g_ab_v", &state.opt_g_ab.v, &fresh.g_ab.params),
        ("adam_d_a_m", &state.opt_d_a.m, &fresh.d_a.params),
        ("adam_d_b_v", &state.opt_d_b.v, &fresh.d_b.params),
    ];
    for (group, got, want) in pairs {
        if got.len() != want.len() {
            return Err(Error::Checkpoint(format!(
                "{group}: {} arrays, expected {}",
                got.len(),
                want.len()
            )));
        }
        for (name, t) in want.iter() {
            match got.get(name) {
                Some(g) if g.shape() == t.shape() => {}
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "{group}: missing or misshapen `{name}`"
                    )))
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::SegNetSpec;
    use crate::networks::{DiscriminatorSpec, GeneratorSpec};

    fn state() -> TrainState {
        let model = ModelConfig {
            generator: GeneratorSpec {
                widths: vec![4, 8],
                ..Default::default()
            },
            discriminator: DiscriminatorSpec {
                widths: vec![4],
                ..Default::default()
            },
            semantic: SegNetSpec {
                widths: vec![2, 4],
                ..Default::default()
            },
        };
        let seg = SemanticNet::new(model.semantic.clone(), 1).unwrap();
        TrainState::new(
            model,
            TrainingConfig {
                patch_size: 8,
                ..Default::default()
            },
            seg,
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = state();
        s.step = 42;
        s.opt_g_ab.step = 42;
        s.opt_d_a.m.iter_mut().next().unwrap().1.data_mut()[0] = 0.125;
        let path = dir.path().join("ckpt");
        save(&s, &path).unwrap();
        save(&s, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.step, 42);
        assert_eq!(back.g_ab.params, s.g_ab.params);
        assert_eq!(back.seg.params, s.seg.params);
        assert_eq!(back.opt_d_a, s.opt_d_a);
        assert_eq!(back.opt_g_ab, s.opt_g_ab);
        assert_eq!(back.model, s.model);
    }

    #[test]
    fn corrupted_array_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save(&state(), &path).unwrap();
        let m = read_manifest(&path).unwrap();
        let f = path.join(&m.arrays[0].file);
        let mut bytes = fs::read(&f).unwrap();
        bytes[0] ^= 1;
        fs::write(&f, bytes).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }
}
