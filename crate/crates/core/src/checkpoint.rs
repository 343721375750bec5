//! Checkpoint directories: `meta.json` plus one raw little-endian `f64`
//! file per tensor, named by parameter path (`expert{k}.{tensor}.bin`,
//! `gate.values.bin`, `gate.source_losses.bin`).
//!
//! Writes go to a sibling temporary directory that is renamed into place,
//! so a reader never observes a partial checkpoint.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::{ExpertDims, ExpertParams, TENSOR_NAMES};
use crate::mixture::{EnsembleConfig, EnsembleModel, GateTable};
use crate::scalar::Scalar;
use crate::tensor::DenseMatrix;

pub const FORMAT: &str = "tall-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub scalar: String,
    pub items: usize,
    pub hidden: usize,
    pub latent: usize,
    pub n_experts: usize,
    pub n_users: usize,
    pub epoch: usize,
    pub config_hash: String,
    pub data_hash: String,
    pub ensemble: EnsembleConfig,
    pub gate_epoch: usize,
    pub gate_fallback_users: Vec<usize>,
    pub tensors: Vec<TensorEntry>,
}

impl CheckpointMeta {
    pub fn dims(&self) -> Result<ExpertDims> {
        ExpertDims::new(self.items, self.hidden, self.latent)
    }
}

/// Provenance recorded next to the tensors.
#[derive(Clone, Debug)]
pub struct Provenance {
    pub epoch: usize,
    pub config_hash: String,
    pub data_hash: String,
}

fn encode<T: Scalar>(values: &[T]) -> Vec<u8> {
    values
        .iter()
        .flat_map(|v| v.as_f64().to_le_bytes())
        .collect()
}

fn decode<T: Scalar>(path: &Path, bytes: &[u8], expected: usize) -> Result<Vec<T>> {
    if bytes.len() != expected * 8 {
        return Err(Error::format(
            path,
            format!("{} bytes, expected {} f64 values", bytes.len(), expected),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
        .collect())
}

fn tensor_list<T: Scalar>(model: &EnsembleModel<T>) -> Vec<(TensorEntry, Vec<u8>)> {
    let mut out = Vec::new();
    for (k, expert) in model.experts.iter().enumerate() {
        let shapes = expert.dims().tensor_shapes();
        for ((name, values), (rows, cols)) in TENSOR_NAMES.iter().zip(expert.tensors()).zip(shapes)
        {
            let name = format!("expert{k}.{name}");
            out.push((
                TensorEntry {
                    file: format!("{name}.bin"),
                    name,
                    rows,
                    cols,
                },
                encode(values),
            ));
        }
    }
    for (name, m) in [
        ("gate.values", model.gate.values()),
        ("gate.source_losses", model.gate.source_losses()),
    ] {
        out.push((
            TensorEntry {
                name: name.to_string(),
                file: format!("{name}.bin"),
                rows: m.rows(),
                cols: m.cols(),
            },
            encode(m.as_slice()),
        ));
    }
    out
}

fn sibling(dir: &Path, suffix: &str) -> Result<PathBuf> {
    let name = dir
        .file_name()
        .ok_or_else(|| Error::Config(format!("checkpoint path {} has no name", dir.display())))?;
    let mut s = name.to_os_string();
    s.push(suffix);
    Ok(dir.with_file_name(s))
}

/// Writes `model` to `dir`, replacing any previous checkpoint there.
pub fn save<T: Scalar>(dir: &Path, model: &EnsembleModel<T>, prov: &Provenance) -> Result<()> {
    let dims = model.dims();
    let tensors = tensor_list(model);
    let meta = CheckpointMeta {
        format: FORMAT.to_string(),
        scalar: "f64le".to_string(),
        items: dims.items,
        hidden: dims.hidden,
        latent: dims.latent,
        n_experts: model.n_experts(),
        n_users: model.gate.n_users(),
        epoch: prov.epoch,
        config_hash: prov.config_hash.clone(),
        data_hash: prov.data_hash.clone(),
        ensemble: model.config.clone(),
        gate_epoch: model.gate.epoch_computed(),
        gate_fallback_users: (0..model.gate.n_users())
            .filter(|&u| model.gate.fallback()[u])
            .collect(),
        tensors: tensors.iter().map(|(e, _)| e.clone()).collect(),
    };
    write_dir_atomically(dir, |tmp| {
        for (entry, bytes) in &tensors {
            let p = tmp.join(&entry.file);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        }
        let meta_path = tmp.join("meta.json");
        let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
        fs::write(&meta_path, json + "\n").map_err(|e| Error::io(&meta_path, e))
    })
}

/// Fills a fresh sibling directory with `fill`, then swaps it in for `dir`.
pub(crate) fn write_dir_atomically(
    dir: &Path,
    fill: impl FnOnce(&Path) -> Result<()>,
) -> Result<()> {
    let parent = dir
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let tmp = sibling(dir, ".tmp")?;
    let old = sibling(dir, ".old")?;
    for stale in [&tmp, &old] {
        if stale.exists() {
            fs::remove_dir_all(stale).map_err(|e| Error::io(stale, e))?;
        }
    }
    fs::create_dir(&tmp).map_err(|e| Error::io(&tmp, e))?;
    if let Err(e) = fill(&tmp) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if dir.exists() {
        fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    if old.exists() {
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    }
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if meta.format != FORMAT || meta.scalar != "f64le" {
        return Err(Error::format(
            &path,
            format!("unsupported format {} / {}", meta.format, meta.scalar),
        ));
    }
    Ok(meta)
}

/// Loads a checkpoint written by [`save`].
pub fn load<T: Scalar>(dir: &Path) -> Result<(EnsembleModel<T>, CheckpointMeta)> {
    let meta = read_meta(dir)?;
    let dims = meta.dims()?;
    let read = |name: &str, rows: usize, cols: usize| -> Result<Vec<T>> {
        let entry = meta
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::format(dir, format!("missing tensor {name}")))?;
        if (entry.rows, entry.cols) != (rows, cols) {
            return Err(Error::format(
                dir,
                format!(
                    "tensor {name} is {}x{}, expected {rows}x{cols}",
                    entry.rows, entry.cols
                ),
            ));
        }
        let p = dir.join(&entry.file);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        decode(&p, &bytes, rows * cols)
    };
    let mut experts = Vec::with_capacity(meta.n_experts);
    for k in 0..meta.n_experts {
        let mut p = ExpertParams::<T>::zeros(dims);
        let shapes = dims.tensor_shapes();
        for ((slot, name), (rows, cols)) in
            p.tensors_mut().into_iter().zip(TENSOR_NAMES).zip(shapes)
        {
            slot.copy_from_slice(&read(&format!("expert{k}.{name}"), rows, cols)?);
        }
        experts.push(p);
    }
    let (n, e) = (meta.n_users, meta.n_experts);
    let values = DenseMatrix::from_vec(n, e, read("gate.values", n, e)?)?;
    let source = DenseMatrix::from_vec(n, e, read("gate.source_losses", n, e)?)?;
    let mut fallback = vec![false; n];
    for &u in &meta.gate_fallback_users {
        *fallback
            .get_mut(u)
            .ok_or_else(|| Error::format(dir, format!("fallback user {u} out of range")))? = true;
    }
    let gate = GateTable::from_parts(values, source, fallback, meta.gate_epoch)?;
    let model = EnsembleModel {
        experts,
        gate,
        config: meta.ensemble.clone(),
    };
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::{KlWeighting, DEFAULT_GATE_EPS};
    use crate::training::TrainConfig;

    fn model() -> EnsembleModel<f64> {
        let dims = ExpertDims::new(7, 5, 3).unwrap();
        let cfg = EnsembleConfig {
            n_experts: 2,
            gate_eps: DEFAULT_GATE_EPS,
            kl_weighting: KlWeighting::Full,
            train: TrainConfig::default(),
            sync: None,
        };
        let mut m = EnsembleModel::new(dims, 4, cfg).unwrap();
        m.experts[1].dec_b2[3] = 0.1 + 0.2;
        m.experts[0].enc_b1[0] = f64::MIN_POSITIVE / 3.0;
        let values = DenseMatrix::from_fn(4, 2, |u, k| {
            if k == 0 {
                0.3 + u as f64 / 10.0
            } else {
                0.7 - u as f64 / 10.0
            }
        });
        let losses = DenseMatrix::from_fn(4, 2, |u, k| (u * 2 + k) as f64 / 7.0);
        m.gate = GateTable::from_parts(values, losses, vec![false, true, false, false], 5).unwrap();
        m
    }

    fn prov() -> Provenance {
        Provenance {
            epoch: 5,
            config_hash: "c".repeat(64),
            data_hash: "d".repeat(64),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        let m = model();
        save(&path, &m, &prov()).unwrap();
        let (back, meta) = load::<f64>(&path).unwrap();
        assert_eq!(meta.epoch, 5);
        for (a, b) in m.experts.iter().zip(&back.experts) {
            let bits =
                |p: &ExpertParams<f64>| p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back.gate, m.gate);
        assert_eq!(back.config, m.config);
    }

    #[test]
    fn overwrite_replaces_and_leaves_no_temporaries() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save(&path, &model(), &prov()).unwrap();
        let mut m = model();
        m.experts[0].dec_b2[0] = 42.0;
        save(&path, &m, &prov()).unwrap();
        let (back, _) = load::<f64>(&path).unwrap();
        assert_eq!(back.experts[0].dec_b2[0], 42.0);
        let names: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names, vec![std::ffi::OsString::from("ckpt")]);
    }

    #[test]
    fn truncated_tensor_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save(&path, &model(), &prov()).unwrap();
        fs::write(path.join("expert1.dec_w2.bin"), [0u8; 12]).unwrap();
        let err = load::<f64>(&path).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        assert!(err.to_string().contains("expert1.dec_w2.bin"));
    }

    #[test]
    fn missing_directory_names_path() {
        let err = load::<f64>(Path::new("/nonexistent/ckpt")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/ckpt"));
    }
}
