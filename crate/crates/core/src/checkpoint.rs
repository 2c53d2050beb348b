//! Checkpoint container and checkpoint averaging.
//!
//! Container layout: magic `LLAB1` (5 bytes), u32-LE entry count, then
//! entries sorted by name: u32-LE name length, UTF-8 name, u8 rank,
//! rank x u64-LE dims, product(dims) x f32-LE payload. Payload bytes are
//! preserved exactly, so write -> read round-trips are bit-exact.
//!
//! Besides the model parameters a checkpoint carries two metadata entries:
//! `meta.step` (rank 0) and `meta.config` (rank 1, the architecture echo
//! `[enc, dec, d_model, heads, d_ff, vocab, max_len, norm, dropout]`).

use crate::error::{Error, Result};
use crate::model::{ModelConfig, NormPlacement, TransformerModel};
use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 5] = b"LLAB1";
pub const STEP_KEY: &str = "meta.step";
pub const CONFIG_KEY: &str = "meta.config";

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub dims: Vec<u64>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub entries: BTreeMap<String, Entry>,
}

impl Checkpoint {
    pub fn from_model(model: &TransformerModel, step: u64) -> Checkpoint {
        let mut entries = BTreeMap::new();
        for (name, t) in model.named_parameters() {
            entries.insert(
                name,
                Entry {
                    dims: t.shape().iter().map(|&d| d as u64).collect(),
                    data: t.to_vec(),
                },
            );
        }
        let c = model.config();
        entries.insert(STEP_KEY.into(), Entry { dims: vec![], data: vec![step as f32] });
        entries.insert(
            CONFIG_KEY.into(),
            Entry {
                dims: vec![9],
                data: vec![
                    c.encoder_depth as f32,
                    c.decoder_depth as f32,
                    c.d_model as f32,
                    c.heads as f32,
                    c.d_ff as f32,
                    c.vocab_size as f32,
                    c.max_len as f32,
                    match c.norm_placement {
                        NormPlacement::Pre => 0.0,
                        NormPlacement::Post => 1.0,
                    },
                    c.dropout,
                ],
            },
        );
        Checkpoint { entries }
    }

    pub fn step(&self) -> u64 {
        self.entries.get(STEP_KEY).map_or(0, |e| e.data[0] as u64)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let e = self.entries.get(CONFIG_KEY).ok_or_else(|| Error::CheckpointMismatch {
            name: CONFIG_KEY.into(),
            msg: "missing architecture echo".into(),
        })?;
        if e.data.len() != 9 {
            return Err(Error::CheckpointMismatch {
                name: CONFIG_KEY.into(),
                msg: format!("expected 9 fields, found {}", e.data.len()),
            });
        }
        Ok(ModelConfig {
            encoder_depth: e.data[0] as usize,
            decoder_depth: e.data[1] as usize,
            d_model: e.data[2] as usize,
            heads: e.data[3] as usize,
            d_ff: e.data[4] as usize,
            vocab_size: e.data[5] as usize,
            max_len: e.data[6] as usize,
            norm_placement: if e.data[7] == 0.0 { NormPlacement::Pre } else { NormPlacement::Post },
            dropout: e.data[8],
            seed: 0,
        })
    }

    /// Rebuild a model carrying exactly this checkpoint's parameters.
    pub fn to_model(&self) -> Result<TransformerModel> {
        let model = TransformerModel::build(self.model_config()?)?;
        self.load_into(&model)?;
        Ok(model)
    }

    pub fn load_into(&self, model: &TransformerModel) -> Result<()> {
        for (name, t) in model.named_parameters() {
            let e = self.entries.get(&name).ok_or_else(|| Error::CheckpointMismatch {
                name: name.clone(),
                msg: "missing from checkpoint".into(),
            })?;
            if e.data.len() != t.numel() {
                return Err(Error::CheckpointMismatch {
                    name,
                    msg: format!("expected {} values, found {}", t.numel(), e.data.len()),
                });
            }
            t.set_data(e.data.clone());
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes: Vec<u8> = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
            bytes.extend_from_slice(name.as_bytes());
            bytes.push(e.dims.len() as u8);
            for d in &e.dims {
                bytes.extend_from_slice(&d.to_le_bytes());
            }
            for v in &e.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |msg: &str| Error::CheckpointMismatch {
            name: path.display().to_string(),
            msg: msg.into(),
        };
        if bytes.len() < 9 || &bytes[..5] != MAGIC {
            return Err(bad("missing LLAB1 magic"));
        }
        let mut at = 5usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if at + n > bytes.len() {
                return Err(bad("truncated container"));
            }
            let s = &bytes[at..at + n];
            at += n;
            Ok(s)
        };
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap());
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(name_len)?.to_vec())
                .map_err(|_| bad("entry name is not UTF-8"))?;
            let rank = take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u64::from_le_bytes(take(8)?.try_into().unwrap()));
            }
            let numel: u64 = dims.iter().product();
            let payload = take(numel as usize * 4)?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.insert(name, Entry { dims, data });
        }
        if at != bytes.len() {
            return Err(bad("trailing bytes after the last entry"));
        }
        Ok(Checkpoint { entries })
    }
}

/// Elementwise arithmetic mean of the `n_last` newest checkpoints (by
/// recorded step). Parameter tensors are averaged; the `meta.*` entries
/// are taken from the newest checkpoint so the result advertises the
/// step and architecture it was built from.
pub fn average_checkpoints(paths: &[PathBuf], n_last: usize) -> Result<Checkpoint> {
    if n_last == 0 {
        return Err(Error::Config("cannot average zero checkpoints".into()));
    }
    if paths.len() < n_last {
        return Err(Error::Config(format!(
            "asked for the last {n_last} checkpoints but only {} exist",
            paths.len()
        )));
    }
    let mut loaded: Vec<Checkpoint> = paths.iter().map(|p| Checkpoint::load(p)).collect::<Result<_>>()?;
    loaded.sort_by_key(|c| c.step());
    let selected = &loaded[loaded.len() - n_last..];
    let newest = &selected[n_last - 1];

    let mut out = Checkpoint::default();
    for (name, first) in &selected[0].entries {
        if name.starts_with("meta.") {
            continue;
        }
        let mut sum: Vec<f64> = first.data.iter().map(|&v| v as f64).collect();
        for other in &selected[1..] {
            let e = other.entries.get(name).ok_or_else(|| Error::CheckpointMismatch {
                name: name.clone(),
                msg: "missing from a sibling checkpoint".into(),
            })?;
            if e.dims != first.dims {
                return Err(Error::CheckpointMismatch {
                    name: name.clone(),
                    msg: format!("shape {:?} vs {:?}", e.dims, first.dims),
                });
            }
            for (s, &v) in sum.iter_mut().zip(e.data.iter()) {
                *s += v as f64;
            }
        }
        let data: Vec<f32> = sum.iter().map(|&s| (s / n_last as f64) as f32).collect();
        out.entries.insert(name.clone(), Entry { dims: first.dims.clone(), data });
    }
    for other in &selected[1..] {
        for name in other.entries.keys() {
            if !name.starts_with("meta.") && !selected[0].entries.contains_key(name) {
                return Err(Error::CheckpointMismatch {
                    name: name.clone(),
                    msg: "missing from the oldest selected checkpoint".into(),
                });
            }
        }
    }
    for (name, e) in &newest.entries {
        if name.starts_with("meta.") {
            out.entries.insert(name.clone(), e.clone());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use tempfile::tempdir;

    fn toy_model() -> TransformerModel {
        TransformerModel::build(ModelConfig::desk(1, 1, 12, 3)).unwrap()
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let model = toy_model();
        let ckpt = Checkpoint::from_model(&model, 17);
        let path = dir.path().join("a.bin");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.step(), 17);
        for (name, e) in &ckpt.entries {
            let l = &loaded.entries[name];
            assert_eq!(l.dims, e.dims);
            let a: Vec<u32> = e.data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = l.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "{name} not bit-exact");
        }
        // and the rebuilt model carries identical parameters
        let rebuilt = loaded.to_model().unwrap();
        assert_eq!(rebuilt.param_bytes(), model.param_bytes());
    }

    #[test]
    fn averaging_identical_checkpoints_is_idempotent() {
        let dir = tempdir().unwrap();
        let model = toy_model();
        let mut paths = Vec::new();
        for i in 0..3 {
            let p = dir.path().join(format!("c{i}.bin"));
            Checkpoint::from_model(&model, 100).save(&p).unwrap();
            paths.push(p);
        }
        let avg = average_checkpoints(&paths, 3).unwrap();
        for (name, e) in &Checkpoint::from_model(&model, 100).entries {
            assert_eq!(&avg.entries[name].data, &e.data, "{name}");
        }
    }

    #[test]
    fn averaging_takes_the_elementwise_mean() {
        let dir = tempdir().unwrap();
        let mut a = Checkpoint::from_model(&toy_model(), 1);
        let mut b = Checkpoint::from_model(&toy_model(), 2);
        let name = "embedding.weight";
        let n = a.entries[name].data.len();
        a.entries.get_mut(name).unwrap().data = vec![0.0; n];
        b.entries.get_mut(name).unwrap().data = vec![2.0; n];
        let pa = dir.path().join("a.bin");
        let pb = dir.path().join("b.bin");
        a.save(&pa).unwrap();
        b.save(&pb).unwrap();
        let avg = average_checkpoints(&[pa, pb], 2).unwrap();
        assert!(avg.entries[name].data.iter().all(|&v| v == 1.0));
        assert_eq!(avg.step(), 2, "meta comes from the newest checkpoint");
    }

    #[test]
    fn shape_mismatch_is_reported_with_the_tensor_name() {
        let dir = tempdir().unwrap();
        let a = Checkpoint::from_model(&toy_model(), 1);
        let mut b = Checkpoint::from_model(&toy_model(), 2);
        let e = b.entries.get_mut("embedding.weight").unwrap();
        e.dims = vec![3, 4];
        e.data = vec![0.0; 12];
        let pa = dir.path().join("a.bin");
        let pb = dir.path().join("b.bin");
        a.save(&pa).unwrap();
        b.save(&pb).unwrap();
        match average_checkpoints(&[pa, pb], 2) {
            Err(Error::CheckpointMismatch { name, .. }) => assert_eq!(name, "embedding.weight"),
            other => panic!("expected checkpoint mismatch, got {other:?}"),
        }
    }

    #[test]
    fn garbage_files_are_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("no.bin");
        fs::write(&p, b"not a checkpoint").unwrap();
        assert!(Checkpoint::load(&p).is_err());
    }
}
