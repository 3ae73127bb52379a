//! Versioned checkpoint container.
//!
//! A checkpoint is a directory holding `params.bin` (named parameter entries
//! as raw little-endian data), an optional `optimizer.bin` with Adam
//! moments, a copy of the vocabulary, and `manifest.json` listing entries,
//! the architecture, the vocabulary digest and a content digest of
//! `params.bin`.

use std::fs;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::hex;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SmaliBert};
use crate::optim::{Adam, AdamParams, Moments};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

const CONTAINER_MAGIC: &[u8; 4] = b"SBCP";
const CONTAINER_VERSION: u8 = 1;

pub const PARAMS_FILE: &str = "params.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EntryInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u8,
    pub config: ModelConfig,
    pub vocab_digest: String,
    pub params_digest: String,
    pub entries: Vec<EntryInfo>,
    pub adam_step: Option<u64>,
    pub seed: u64,
}

/// One named tensor in a container file.
pub struct ContainerEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub dtype: Dtype,
}

fn write_container<S: Scalar>(
    path: &Path,
    entries: &[(String, Vec<usize>, Vec<S>)],
) -> Result<()> {
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    file.write_all(CONTAINER_MAGIC)?;
    file.write_all(&[CONTAINER_VERSION])?;
    file.write_all(&[S::dtype().byte_width() as u8])?;
    file.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, shape, data) in entries {
        let name_bytes = name.as_bytes();
        file.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        file.write_all(name_bytes)?;
        file.write_all(&[shape.len() as u8])?;
        for &d in shape {
            file.write_all(&(d as u64).to_le_bytes())?;
        }
        match S::dtype() {
            Dtype::F32 => {
                for v in data {
                    file.write_all(&(v.into_f64() as f32).to_le_bytes())?;
                }
            }
            Dtype::F64 => {
                for v in data {
                    file.write_all(&v.into_f64().to_le_bytes())?;
                }
            }
        }
    }
    file.flush()?;
    Ok(())
}

fn read_container(path: &Path) -> Result<Vec<ContainerEntry>> {
    let mut file = BufReader::new(fs::File::open(path)?);
    let mut head = [0u8; 10];
    file.read_exact(&mut head)
        .map_err(|_| Error::Format(format!("{}: truncated header", path.display())))?;
    if &head[0..4] != CONTAINER_MAGIC {
        return Err(Error::Format(format!("{}: not a checkpoint container", path.display())));
    }
    if head[4] != CONTAINER_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported container version {}",
            path.display(),
            head[4]
        )));
    }
    let dtype = match head[5] {
        4 => Dtype::F32,
        8 => Dtype::F64,
        other => {
            return Err(Error::Format(format!(
                "{}: unknown dtype width {other}",
                path.display()
            )))
        }
    };
    let count = u32::from_le_bytes(head[6..10].try_into().unwrap());
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut len_buf = [0u8; 2];
        file.read_exact(&mut len_buf)?;
        let mut name_buf = vec![0u8; u16::from_le_bytes(len_buf) as usize];
        file.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Format(format!("{}: bad entry name", path.display())))?;
        let mut ndim = [0u8; 1];
        file.read_exact(&mut ndim)?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            let mut dim = [0u8; 8];
            file.read_exact(&mut dim)?;
            shape.push(u64::from_le_bytes(dim) as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        match dtype {
            Dtype::F32 => {
                let mut buf = vec![0u8; len * 4];
                file.read_exact(&mut buf)?;
                for chunk in buf.chunks_exact(4) {
                    data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
                }
            }
            Dtype::F64 => {
                let mut buf = vec![0u8; len * 8];
                file.read_exact(&mut buf)?;
                for chunk in buf.chunks_exact(8) {
                    data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
                }
            }
        }
        entries.push(ContainerEntry {
            name,
            shape,
            data,
            dtype,
        });
    }
    Ok(entries)
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Save model parameters, manifest, optimizer state and the vocabulary copy.
pub fn save_checkpoint<S: Scalar>(
    dir: &Path,
    model: &mut SmaliBert<S>,
    optimizer: Option<&Adam<S>>,
    vocab_text: &str,
    seed: u64,
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir)?;
    let mut entries: Vec<(String, Vec<usize>, Vec<S>)> = Vec::new();
    model.visit_params(&mut |name, p| {
        entries.push((
            name.to_string(),
            p.value.shape().to_vec(),
            p.value.data().to_vec(),
        ));
    });
    let params_path = dir.join(PARAMS_FILE);
    write_container(&params_path, &entries)?;

    let vocab_path = dir.join(VOCAB_FILE);
    fs::write(&vocab_path, vocab_text)?;

    let mut adam_step = None;
    if let Some(adam) = optimizer {
        let mut opt_entries: Vec<(String, Vec<usize>, Vec<S>)> = Vec::new();
        for (name, moments) in adam.moments() {
            opt_entries.push((format!("m.{name}"), vec![moments.m.len()], moments.m.clone()));
            opt_entries.push((format!("v.{name}"), vec![moments.v.len()], moments.v.clone()));
        }
        write_container(&dir.join(OPTIMIZER_FILE), &opt_entries)?;
        adam_step = Some(adam.step);
    }

    let manifest = CheckpointManifest {
        format_version: CONTAINER_VERSION,
        config: model.config.clone(),
        vocab_digest: file_digest(&vocab_path)?,
        params_digest: file_digest(&params_path)?,
        entries: entries
            .iter()
            .map(|(name, shape, _)| EntryInfo {
                name: name.clone(),
                shape: shape.clone(),
                dtype: S::dtype().name().to_string(),
            })
            .collect(),
        adam_step,
        seed,
    };
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::MissingInput(path));
    }
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    Ok(manifest)
}

/// Load a model, converting stored values to the requested scalar type.
/// Verifies the parameter-file digest recorded in the manifest.
pub fn load_model<S: Scalar>(dir: &Path, seed_for_missing: u64) -> Result<(SmaliBert<S>, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    let params_path = dir.join(PARAMS_FILE);
    let found = file_digest(&params_path)?;
    if found != manifest.params_digest {
        return Err(Error::StaleArtifact {
            path: params_path,
            expected: manifest.params_digest.clone(),
            found,
        });
    }
    let mut model = SmaliBert::<S>::new(manifest.config.clone(), seed_for_missing)?;
    let entries = read_container(&params_path)?;
    let mut by_name: std::collections::HashMap<String, ContainerEntry> =
        entries.into_iter().map(|e| (e.name.clone(), e)).collect();
    let mut missing = Vec::new();
    model.visit_params(&mut |name, p| match by_name.remove(name) {
        Some(entry) => {
            if entry.shape == p.value.shape() {
                let data: Vec<S> = entry.data.iter().map(|&v| S::from_f64(v)).collect();
                p.value = Tensor::from_vec(&entry.shape, data).expect("shape checked");
            } else {
                missing.push(format!("{name}: shape {:?} vs {:?}", entry.shape, p.value.shape()));
            }
        }
        None => missing.push(name.to_string()),
    });
    if !missing.is_empty() {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint entries do not match the architecture: {}",
            missing.join(", ")
        )));
    }
    if !by_name.is_empty() {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint holds {} unused entries",
            by_name.len()
        )));
    }
    Ok((model, manifest))
}

/// Restore optimizer state saved next to the parameters.
pub fn load_optimizer<S: Scalar>(dir: &Path, lr: f64) -> Result<Adam<S>> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(OPTIMIZER_FILE);
    if !path.exists() {
        return Err(Error::MissingInput(path));
    }
    let mut adam = Adam::new(AdamParams {
        lr,
        ..AdamParams::default()
    });
    adam.step = manifest.adam_step.unwrap_or(0);
    let mut first: std::collections::BTreeMap<String, Vec<S>> = Default::default();
    let mut second: std::collections::BTreeMap<String, Vec<S>> = Default::default();
    for entry in read_container(&path)? {
        let data: Vec<S> = entry.data.iter().map(|&v| S::from_f64(v)).collect();
        if let Some(name) = entry.name.strip_prefix("m.") {
            first.insert(name.to_string(), data);
        } else if let Some(name) = entry.name.strip_prefix("v.") {
            second.insert(name.to_string(), data);
        }
    }
    for (name, m) in first {
        let v = second.remove(&name).ok_or_else(|| {
            Error::Format(format!("optimizer entry {name} lacks second moments"))
        })?;
        adam.insert_moments(name, Moments { m, v });
    }
    Ok(adam)
}

/// Content digest identifying a checkpoint (its parameter file).
pub fn checkpoint_digest(dir: &Path) -> Result<String> {
    file_digest(&dir.join(PARAMS_FILE))
}

/// Vocabulary text stored inside the checkpoint.
pub fn checkpoint_vocab_path(dir: &Path) -> PathBuf {
    dir.join(VOCAB_FILE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeadSet, ModelConfig};
    use crate::pretrain::build_sequence;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            layers: 1,
            heads: 2,
            hidden: 8,
            ffn: 12,
            seq_len: 10,
            vocab_size: 17,
            ae_intermediate: 6,
            ae_hidden: 4,
            enabled_heads: HeadSet::all(),
            tie_mlm_decoder: true,
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("ckpt");
        let mut model = SmaliBert::<f32>::new(tiny_config(), 21).unwrap();
        let manifest = save_checkpoint(&ckpt, &mut model, None, "[PAD]\n[UNK]\n", 21).unwrap();
        assert_eq!(manifest.params_digest, checkpoint_digest(&ckpt).unwrap());

        let (mut back, manifest2) = load_model::<f32>(&ckpt, 0).unwrap();
        assert_eq!(manifest2.config, model.config);

        let mut ex = build_sequence(&[7, 8], &[9, 10], 10);
        ex.is_next = true;
        ex.mask_positions = vec![1];
        ex.mask_targets = vec![7];
        let a = model.joint_loss(&ex).unwrap();
        let b = back.joint_loss(&ex).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cross_precision_load_widens_losslessly() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("ckpt");
        let mut model = SmaliBert::<f32>::new(tiny_config(), 22).unwrap();
        save_checkpoint(&ckpt, &mut model, None, "x\n", 22).unwrap();
        let (mut wide, _) = load_model::<f64>(&ckpt, 0).unwrap();
        let mut expect = Vec::new();
        model.visit_params(&mut |_, p| expect.extend(p.value.data().iter().map(|&v| v as f64)));
        let mut got = Vec::new();
        wide.visit_params(&mut |_, p| got.extend(p.value.data().iter().copied()));
        assert_eq!(expect, got);
    }

    #[test]
    fn tampered_params_are_stale() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("ckpt");
        let mut model = SmaliBert::<f32>::new(tiny_config(), 23).unwrap();
        save_checkpoint(&ckpt, &mut model, None, "x\n", 23).unwrap();
        let params = ckpt.join(PARAMS_FILE);
        let mut bytes = fs::read(&params).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        fs::write(&params, bytes).unwrap();
        assert!(matches!(
            load_model::<f32>(&ckpt, 0),
            Err(Error::StaleArtifact { .. })
        ));
    }

    #[test]
    fn optimizer_state_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("ckpt");
        let mut model = SmaliBert::<f32>::new(tiny_config(), 24).unwrap();
        let mut ex = build_sequence(&[7, 8], &[9, 10], 10);
        ex.mask_positions = vec![1];
        ex.mask_targets = vec![7];
        let (_, adam) = crate::model::train::pretrain(
            &mut model,
            &[ex],
            &crate::model::train::TrainParams {
                batch: 1,
                lr: 1e-3,
                epochs: 2,
                seed: 1,
                warmup_steps: 0,
            },
        )
        .unwrap();
        save_checkpoint(&ckpt, &mut model, Some(&adam), "x\n", 24).unwrap();
        let restored = load_optimizer::<f32>(&ckpt, 1e-3).unwrap();
        assert_eq!(restored.step, adam.step);
        assert_eq!(restored.moments().len(), adam.moments().len());
        for (name, m) in adam.moments() {
            let r = &restored.moments()[name];
            assert_eq!(r.m, m.m);
            assert_eq!(r.v, m.v);
        }
    }

    #[test]
    fn config_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("ckpt");
        let mut model = SmaliBert::<f32>::new(tiny_config(), 25).unwrap();
        save_checkpoint(&ckpt, &mut model, None, "x\n", 25).unwrap();
        // Rewrite the manifest with a different architecture but keep digests.
        let mut manifest = read_manifest(&ckpt).unwrap();
        manifest.config.hidden = 16;
        manifest.config.ffn = 24;
        fs::write(
            ckpt.join(MANIFEST_FILE),
            serde_json::to_string(&manifest).unwrap(),
        )
        .unwrap();
        assert!(matches!(
            load_model::<f32>(&ckpt, 0),
            Err(Error::ConfigMismatch(_))
        ));
    }
}
