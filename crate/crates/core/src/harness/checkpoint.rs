//! Checkpoints: `params.json` (structure, flags, digest) next to
//! `params.bin` (magic + little-endian f64 payload).
//!
//! Values are stored in double precision so that a reload reproduces the
//! in-memory state bit for bit. Loading validates the magic, the length and
//! the SHA-256 of the payload before any tensor is built, so a damaged file
//! never yields a partial [`ParamSet`].

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Decoder, Group, Head, HeadArchitecture, NuiMode, ParamSet, DEC, EMB};
use crate::training::OptimizerState;

pub const PARAMS_JSON: &str = "params.json";
pub const PARAMS_BIN: &str = "params.bin";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EMBCKPT1";
const FORMAT: &str = "embae-checkpoint";
const VERSION: u32 = 1;

/// Everything a stage hands to the next one.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub optimizer: Option<OptimizerState>,
    /// Free-form provenance, e.g. the stage name and config fingerprint.
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(params: ParamSet) -> Self {
        Checkpoint {
            params,
            optimizer: None,
            meta: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct GroupEntry {
    name: String,
    frozen: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    group: String,
    name: String,
    buffer: bool,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct MomentRecord {
    key: String,
    len: usize,
    /// Offset of `m`; `v` follows immediately.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerRecord {
    step: u64,
    /// Offset of `[beta1, beta2, eps]`.
    hyper_offset: usize,
    moments: Vec<MomentRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    arch: HeadArchitecture,
    mode: NuiMode,
    groups: Vec<GroupEntry>,
    tensors: Vec<TensorRecord>,
    optimizer: Option<OptimizerRecord>,
    meta: BTreeMap<String, String>,
    payload_values: usize,
    sha256: String,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes `dir/params.json` and `dir/params.bin`, creating `dir`.
pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let params = &ckpt.params;
    let mut payload: Vec<f64> = Vec::with_capacity(params.parameter_count() * 2);
    let mut tensors = Vec::new();
    for e in params.entries() {
        let (_, shape) = params.tensor(e.group, e.name).expect("entry exists");
        tensors.push(TensorRecord {
            group: e.group.to_string(),
            name: e.name.to_string(),
            buffer: e.is_buffer,
            shape,
            offset: payload.len(),
            len: e.data.len(),
        });
        payload.extend_from_slice(e.data);
    }
    let optimizer = ckpt.optimizer.as_ref().map(|opt| {
        let hyper_offset = payload.len();
        payload.extend_from_slice(&[opt.beta1, opt.beta2, opt.eps]);
        let moments = opt
            .moments
            .iter()
            .map(|(key, (m, v))| {
                let offset = payload.len();
                payload.extend_from_slice(m);
                payload.extend_from_slice(v);
                MomentRecord {
                    key: key.clone(),
                    len: m.len(),
                    offset,
                }
            })
            .collect();
        OptimizerRecord {
            step: opt.step,
            hyper_offset,
            moments,
        }
    });
    let mut bin = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 8 * payload.len());
    bin.extend_from_slice(CHECKPOINT_MAGIC);
    for v in &payload {
        bin.extend_from_slice(&v.to_le_bytes());
    }
    let mut groups = vec![
        GroupEntry {
            name: EMB.into(),
            frozen: params.emb.frozen,
        },
        GroupEntry {
            name: DEC.into(),
            frozen: params.dec.frozen,
        },
    ];
    groups.extend(params.nui.iter().map(|(name, g)| GroupEntry {
        name: name.clone(),
        frozen: g.frozen,
    }));
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        arch: params.arch,
        mode: params.mode,
        groups,
        tensors,
        optimizer,
        meta: ckpt.meta.clone(),
        payload_values: payload.len(),
        sha256: hex::encode(Sha256::digest(&bin)),
    };
    write_atomic(&dir.join(PARAMS_BIN), &bin)?;
    write_atomic(&dir.join(PARAMS_JSON), &serde_json::to_vec_pretty(&header)?)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn slice<'a>(payload: &'a [f64], offset: usize, len: usize, what: &str) -> Result<&'a [f64]> {
    offset
        .checked_add(len)
        .and_then(|end| payload.get(offset..end))
        .ok_or_else(|| corrupt(format!("{what} lies outside the payload")))
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let json_path = dir.join(PARAMS_JSON);
    let bin_path = dir.join(PARAMS_BIN);
    let header_bytes = std::fs::read(&json_path).map_err(|e| Error::load(&json_path, e.to_string()))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::load(&json_path, format!("invalid checkpoint header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(corrupt(format!(
            "unsupported checkpoint format {} v{}",
            header.format, header.version
        )));
    }
    let bin = std::fs::read(&bin_path).map_err(|e| Error::load(&bin_path, e.to_string()))?;
    if bin.len() < CHECKPOINT_MAGIC.len() || &bin[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(corrupt(format!("{} has a bad magic number", bin_path.display())));
    }
    let expected = CHECKPOINT_MAGIC.len() + 8 * header.payload_values;
    if bin.len() != expected {
        return Err(corrupt(format!(
            "{} holds {} bytes, expected {expected}",
            bin_path.display(),
            bin.len()
        )));
    }
    if hex::encode(Sha256::digest(&bin)) != header.sha256 {
        return Err(corrupt(format!("{} fails its checksum", bin_path.display())));
    }
    let payload: Vec<f64> = bin[CHECKPOINT_MAGIC.len()..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();

    let arch = header.arch;
    arch.validate()?;
    let flags: BTreeMap<&str, bool> = header.groups.iter().map(|g| (g.name.as_str(), g.frozen)).collect();
    let flag = |name: &str| {
        flags
            .get(name)
            .copied()
            .ok_or_else(|| corrupt(format!("group `{name}` missing from header")))
    };
    let mut params = ParamSet {
        arch,
        mode: header.mode,
        emb: Group {
            module: Head::zeros(arch.input_dim, arch.hidden_dim, arch.embedding_dim),
            frozen: flag(EMB)?,
        },
        nui: BTreeMap::new(),
        dec: Group {
            module: Decoder::zeros(
                arch.embedding_dim + arch.nuisance_dim,
                arch.decoder_hidden_dim,
                arch.input_dim,
            ),
            frozen: flag(DEC)?,
        },
    };
    for g in &header.groups {
        if g.name != EMB && g.name != DEC {
            params.nui.insert(
                g.name.clone(),
                Group {
                    module: Head::zeros(arch.input_dim, arch.hidden_dim, arch.nuisance_dim),
                    frozen: g.frozen,
                },
            );
        }
    }
    let expected_entries = params.entries().len();
    if header.tensors.len() != expected_entries {
        return Err(corrupt(format!(
            "header lists {} tensors, model has {expected_entries}",
            header.tensors.len()
        )));
    }
    for t in &header.tensors {
        let what = format!("{}/{}", t.group, t.name);
        let (_, shape) = params
            .tensor(&t.group, &t.name)
            .ok_or_else(|| corrupt(format!("unknown tensor {what}")))?;
        if shape != t.shape {
            return Err(corrupt(format!("{what} has shape {:?}, expected {shape:?}", t.shape)));
        }
        let src = slice(&payload, t.offset, t.len, &what)?;
        let dst = params.tensor_mut(&t.group, &t.name).expect("checked above");
        if dst.len() != src.len() {
            return Err(corrupt(format!("{what} has {} values, expected {}", src.len(), dst.len())));
        }
        dst.copy_from_slice(src);
    }
    let optimizer = match &header.optimizer {
        None => None,
        Some(rec) => {
            let hyper = slice(&payload, rec.hyper_offset, 3, "optimizer hyper-parameters")?;
            let mut moments = BTreeMap::new();
            for m in &rec.moments {
                let both = slice(&payload, m.offset, 2 * m.len, &m.key)?;
                let (mm, vv) = both.split_at(m.len);
                moments.insert(m.key.clone(), (mm.to_vec(), vv.to_vec()));
            }
            Some(OptimizerState {
                beta1: hyper[0],
                beta2: hyper[1],
                eps: hyper[2],
                step: rec.step,
                moments,
            })
        }
    };
    Ok(Checkpoint {
        params,
        optimizer,
        meta: header.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, reconstruction_gradients, CameraKey};
    use crate::training::adam_step;
    use crate::types::RngSeed;
    use ndarray::Array2;

    fn arch() -> HeadArchitecture {
        HeadArchitecture {
            input_dim: 5,
            hidden_dim: 6,
            embedding_dim: 3,
            nuisance_dim: 2,
            decoder_hidden_dim: 7,
        }
    }

    fn trained() -> Checkpoint {
        let cams = [CameraKey::new("a", 0), CameraKey::new("a", 1)];
        let mut p = init_params(arch(), NuiMode::PerCamera, &cams, RngSeed(3)).unwrap();
        p.set_frozen(EMB, true).unwrap();
        let x = Array2::from_shape_fn((4, 5), |(i, j)| ((i * 5 + j) as f64).sin());
        let keys = vec![cams[0].clone(), cams[1].clone(), cams[0].clone(), cams[1].clone()];
        let mut opt = OptimizerState::default();
        for _ in 0..3 {
            let ev = reconstruction_gradients(&p, x.view(), &keys).unwrap();
            adam_step(&mut p, &ev.grads, &mut opt, 1e-2).unwrap();
            p.apply_bn_stats(&ev.bn_stats);
        }
        let mut c = Checkpoint::new(p);
        c.optimizer = Some(opt);
        c.meta.insert("stage".into(), "test".into());
        c
    }

    #[test]
    fn fresh_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let c = Checkpoint::new(init_params(arch(), NuiMode::Shared, &[], RngSeed(1)).unwrap());
        save_checkpoint(dir.path(), &c).unwrap();
        assert_eq!(load_checkpoint(dir.path()).unwrap(), c);
    }

    #[test]
    fn trained_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let c = trained();
        save_checkpoint(dir.path(), &c).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        for (a, b) in c.params.entries().iter().zip(back.params.entries().iter()) {
            assert_eq!(a.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
        assert_eq!(back, c);
    }

    #[test]
    fn damaged_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &trained()).unwrap();
        let bin = dir.path().join(PARAMS_BIN);
        let good = std::fs::read(&bin).unwrap();

        std::fs::write(&bin, &good[..good.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&bin, &bad).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));

        let mut flipped = good.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 1;
        std::fs::write(&bin, &flipped).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));

        std::fs::write(&bin, &good).unwrap();
        assert!(load_checkpoint(dir.path()).is_ok());
        std::fs::write(dir.path().join(PARAMS_JSON), b"{").unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
