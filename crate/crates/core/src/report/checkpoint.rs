//! Checkpoint directories: `manifest.json` plus `layers/<id>.bin`.
//!
//! Layer file layout, all integers little-endian `u32`:
//! `"MUNL"`, version, then for every tensor of the layer (count fixed by its
//! kind): rank, dims, and `f32` data.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::TaskDef;
use crate::error::{io_err, Error, Result};
use crate::evolution::RunConfig;
use crate::layers::{LayerConfig, LayerParams};
use crate::store::{LayerId, LayerStore, ModelSpec, SystemState, TrainingRecord};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MUNL";
const VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LayerEntry {
    id: LayerId,
    config: LayerConfig,
    parent: Option<LayerId>,
    history: Vec<TrainingRecord>,
    hash: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: Option<RunConfig>,
    tasks: Vec<TaskDef>,
    root: ModelSpec,
    best: BTreeMap<String, ModelSpec>,
    next_model: u64,
    layers: Vec<LayerEntry>,
}

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub system: SystemState,
    pub config: Option<RunConfig>,
    pub tasks: Vec<TaskDef>,
}

pub fn encode_layer(params: &LayerParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + params.scalar_count() * 4 + params.tensors.len() * 12);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for t in &params.tensors {
        out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Decodes a layer file. `None` means the byte stream is truncated or malformed.
fn decode_tensors(bytes: &[u8], count: usize) -> Option<Vec<Tensor>> {
    let mut pos = 0;
    let u32_at = |pos: &mut usize| -> Option<u32> {
        let b = bytes.get(*pos..*pos + 4)?;
        *pos += 4;
        Some(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let rank = u32_at(&mut pos)? as usize;
        if rank > 8 {
            return None;
        }
        let dims: Vec<usize> = (0..rank)
            .map(|_| u32_at(&mut pos).map(|d| d as usize))
            .collect::<Option<_>>()?;
        let len: usize = dims.iter().product();
        let raw = bytes.get(pos..pos + len * 4)?;
        pos += len * 4;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(Tensor::new(dims, data).ok()?);
    }
    (pos == bytes.len()).then_some(tensors)
}

pub fn decode_layer(id: LayerId, config: &LayerConfig, bytes: &[u8]) -> Result<LayerParams> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint(format!("layer {id}: bad magic")));
    }
    let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "layer {id}: unsupported version {version}"
        )));
    }
    let count = config.tensor_specs().len();
    let tensors = decode_tensors(&bytes[8..], count).ok_or(Error::HashMismatch { id })?;
    Ok(LayerParams { tensors })
}

fn layer_path(dir: &Path, id: LayerId) -> std::path::PathBuf {
    dir.join("layers").join(format!("{}.bin", id.0))
}

/// Layers referenced by the root and best models, plus their lineage.
pub fn reachable_layers(system: &SystemState) -> Result<BTreeSet<LayerId>> {
    let mut out = BTreeSet::new();
    for m in system.models() {
        for &id in &m.layers {
            out.extend(system.store.lineage(id)?);
        }
    }
    Ok(out)
}

/// Writes `system` to `dir`. Layers no model can reach are not written.
pub fn save_checkpoint(
    system: &SystemState,
    config: Option<&RunConfig>,
    tasks: &[TaskDef],
    dir: &Path,
) -> Result<()> {
    let layer_dir = dir.join("layers");
    fs::create_dir_all(&layer_dir).map_err(io_err(&layer_dir))?;
    let mut entries = Vec::new();
    for id in reachable_layers(system)? {
        let l = system.store.get(id)?;
        let path = layer_path(dir, id);
        fs::write(&path, encode_layer(l.params())).map_err(io_err(&path))?;
        entries.push(LayerEntry {
            id,
            config: l.config().clone(),
            parent: l.parent(),
            history: l.history().to_vec(),
            hash: l.hash(),
        });
    }
    let manifest = Manifest {
        version: VERSION,
        config: config.cloned(),
        tasks: tasks.to_vec(),
        root: system.root.clone(),
        best: system.best.clone(),
        next_model: system.next_model_id(),
        layers: entries,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(io_err(&path))?;
    Ok(())
}

/// Reads a checkpoint, verifying every layer's content hash.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    let mut store = LayerStore::new();
    for e in &manifest.layers {
        let path = layer_path(dir, e.id);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let params = decode_layer(e.id, &e.config, &bytes)?;
        store.restore(
            e.id,
            e.config.clone(),
            params,
            e.parent,
            e.history.clone(),
            e.hash,
        )?;
    }
    for e in &manifest.layers {
        if let Some(p) = e.parent {
            store.get(p)?;
        }
    }
    let mut system = SystemState::new(store, manifest.root)?.with_next_model(manifest.next_model);
    for (task, m) in manifest.best {
        system.check_model(&m)?;
        system.best.insert(task, m);
    }
    Ok(Checkpoint {
        system,
        config: manifest.config,
        tasks: manifest.tasks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::tests::tiny_system;

    #[test]
    fn layer_encoding_round_trip_and_truncation() {
        let sys = tiny_system(1, 0);
        let l = sys.store.get(sys.root.layers[3]).unwrap();
        let bytes = encode_layer(l.params());
        assert_eq!(
            decode_layer(l.id(), l.config(), &bytes).unwrap(),
            *l.params()
        );
        assert!(matches!(
            decode_layer(l.id(), l.config(), &bytes[..bytes.len() - 3]),
            Err(Error::HashMismatch { id }) if id == l.id()
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_layer(l.id(), l.config(), &bad),
            Err(Error::Checkpoint(_))
        ));
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(matches!(
            decode_layer(l.id(), l.config(), &v2),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn header_layout() {
        let p = LayerParams {
            tensors: vec![Tensor::new(vec![2], vec![1.0, -2.0]).unwrap()],
        };
        let b = encode_layer(&p);
        assert_eq!(&b[..4], b"MUNL");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..12], &[1, 0, 0, 0]);
        assert_eq!(&b[12..16], &[2, 0, 0, 0]);
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 24);
    }

    #[test]
    fn save_load_round_trip_drops_unreferenced() {
        let mut sys = tiny_system(2, 1);
        let l = sys.store.get(sys.root.layers[3]).unwrap().clone();
        let orphan = sys
            .store
            .commit(l.config().clone(), l.params().clone(), None, vec![])
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&sys, None, &[], dir.path()).unwrap();
        let ck = load_checkpoint(dir.path()).unwrap();
        assert!(!ck.system.store.contains(orphan));
        for &id in &sys.root.layers {
            let (a, b) = (sys.store.get(id).unwrap(), ck.system.store.get(id).unwrap());
            assert_eq!(a.params(), b.params());
            assert_eq!(a.hash(), b.hash());
        }
        let mut baseline = sys.store.hashes();
        baseline.remove(&orphan);
        assert!(ck.system.audit_immutability(&baseline).is_empty());
        assert_eq!(ck.system.root, sys.root);
    }

    #[test]
    fn truncated_file_names_the_layer() {
        let sys = tiny_system(1, 2);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&sys, None, &[], dir.path()).unwrap();
        let victim = sys.root.layers[3];
        let path = layer_path(dir.path(), victim);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(matches!(err, Error::HashMismatch { id } if id == victim));
        assert!(err.to_string().contains(&victim.to_string()));

        // Same length, different bits.
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 0x40;
        fs::write(&path, &flipped).unwrap();
        assert!(
            matches!(load_checkpoint(dir.path()), Err(Error::HashMismatch { id }) if id == victim)
        );
    }
}
