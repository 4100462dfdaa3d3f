use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NnError, ParamStore, Tensor};
use crate::io::{read_checkpoint_container, write_checkpoint_container, IoError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// JSON header of a checkpoint. Blobs follow in `params` order: all values,
/// then (if `has_optimizer_state`) all first moments, then all second moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model_kind: String,
    pub config: serde_json::Value,
    pub step: u64,
    pub seeds: Vec<u64>,
    pub params: Vec<ParamEntry>,
    pub has_optimizer_state: bool,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn save_checkpoint(
    path: &Path,
    model_kind: &str,
    config: serde_json::Value,
    seeds: Vec<u64>,
    store: &ParamStore,
    extra: serde_json::Value,
) -> Result<(), NnError> {
    let header = CheckpointHeader {
        model_kind: model_kind.into(),
        config,
        step: store.step(),
        seeds,
        params: store
            .params()
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        has_optimizer_state: true,
        extra,
    };
    let mut blobs: Vec<&[f64]> = store.params().iter().map(|p| p.value.data()).collect();
    blobs.extend(store.params().iter().map(|p| p.m.as_slice()));
    blobs.extend(store.params().iter().map(|p| p.v.as_slice()));
    write_checkpoint_container(path, &header, &blobs)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ParamStore), NnError> {
    let (header, blobs) = read_checkpoint_container(path, |h: &CheckpointHeader| {
        let sizes: Vec<usize> = h.params.iter().map(|p| p.shape.iter().product()).collect();
        let reps = if h.has_optimizer_state { 3 } else { 1 };
        sizes
            .iter()
            .cycle()
            .take(sizes.len() * reps)
            .copied()
            .collect()
    })?;
    let n = header.params.len();
    let mut store = ParamStore::new();
    for (k, entry) in header.params.iter().enumerate() {
        let t = Tensor::from_vec(&entry.shape, blobs[k].clone())
            .map_err(|e| NnError::Io(IoError::Format(e.to_string())))?;
        store.add(entry.name.clone(), t);
    }
    if header.has_optimizer_state {
        for (k, p) in store.params_mut().iter_mut().enumerate() {
            p.m.clone_from(&blobs[n + k]);
            p.v.clone_from(&blobs[2 * n + k]);
        }
    }
    store.set_step(header.step);
    Ok((header, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_keeps_values_and_state() {
        let mut s = ParamStore::new();
        s.add(
            "a",
            Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.5, 1e-300]).unwrap(),
        );
        s.add("b", Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap());
        s.params_mut()[1].m[2] = 4.0;
        s.set_step(17);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(
            &path,
            "surrogate",
            serde_json::json!({"d": 8}),
            vec![1, 2],
            &s,
            serde_json::Value::Null,
        )
        .unwrap();
        let (h, back) = load_checkpoint(&path).unwrap();
        assert_eq!(h.model_kind, "surrogate");
        assert_eq!(h.step, 17);
        assert_eq!(back.step(), 17);
        assert_eq!(
            back.value(super::super::ParamId(0)),
            s.value(super::super::ParamId(0))
        );
        assert_eq!(back.params()[1].m, vec![0.0, 0.0, 4.0]);
        let raw = std::fs::read(&path).unwrap();
        assert_eq!(&raw[..8], b"PDETTCPM");
    }
}
