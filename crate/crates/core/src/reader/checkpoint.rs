//! Self-describing checkpoint container: config, vocabulary, training
//! history, and named shape-tagged parameter tensors as little-endian f32.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::model::{Params, ReaderModel};
use super::train::EpochLoss;
use super::vocab::Vocab;
use super::{ReaderConfig, ReaderError};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"CQAREAD1";

/// Precision-independent snapshot of a trained reader.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ReaderConfig,
    pub vocab: Vocab,
    pub history: Vec<EpochLoss>,
    /// `(name, rows, cols, row-major f32 data)` in visit order.
    pub tensors: Vec<(String, u32, u32, Vec<f32>)>,
}

impl Checkpoint {
    pub fn from_model<S: Scalar>(model: &ReaderModel<S>, history: Vec<EpochLoss>) -> Self {
        let tensors = model
            .params()
            .visit()
            .into_iter()
            .map(|(name, mat)| {
                (
                    name,
                    mat.rows() as u32,
                    mat.cols() as u32,
                    mat.data().iter().map(|v| v.to_f32_lossy()).collect(),
                )
            })
            .collect();
        Checkpoint {
            config: model.config.clone(),
            vocab: model.vocab.clone(),
            history,
            tensors,
        }
    }

    /// Reconstructs a model, converting stored f32 values into `S`.
    pub fn to_model<S: Scalar>(&self) -> Result<ReaderModel<S>, ReaderError> {
        self.config.validate()?;
        let mut vocab = self.vocab.clone();
        vocab.rebuild_index();
        let mut params: Params<S> = Params::zeros(&self.config);
        let mut stored = std::collections::HashMap::new();
        for (name, rows, cols, data) in &self.tensors {
            stored.insert(name.as_str(), (*rows, *cols, data));
        }
        for (name, mat) in params.visit_mut() {
            let Some((rows, cols, data)) = stored.remove(name.as_str()) else {
                return Err(ReaderError::Checkpoint(format!("missing tensor {name}")));
            };
            if (rows as usize, cols as usize) != (mat.rows(), mat.cols()) {
                return Err(ReaderError::Checkpoint(format!(
                    "tensor {name} has shape {rows}x{cols}, expected {}x{}",
                    mat.rows(),
                    mat.cols()
                )));
            }
            for (slot, value) in mat.data_mut().iter_mut().zip(data) {
                *slot = S::from_f32(*value);
            }
        }
        if !stored.is_empty() {
            return Err(ReaderError::Checkpoint(format!(
                "unexpected tensors in checkpoint: {:?}",
                stored.keys().collect::<Vec<_>>()
            )));
        }
        Ok(ReaderModel::from_parts(self.config.clone(), vocab, params))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ReaderError> {
        let mut w = BufWriter::new(File::create(path.as_ref())?);
        w.write_all(MAGIC)?;
        write_json(&mut w, &self.config)?;
        write_json(&mut w, &self.vocab)?;
        write_json(&mut w, &self.history)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, rows, cols, data) in &self.tensors {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&rows.to_le_bytes())?;
            w.write_all(&cols.to_le_bytes())?;
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ReaderError> {
        let mut r = BufReader::new(File::open(path.as_ref())?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ReaderError::Checkpoint("bad magic bytes".into()));
        }
        let config: ReaderConfig = read_json(&mut r)?;
        let mut vocab: Vocab = read_json(&mut r)?;
        vocab.rebuild_index();
        let history: Vec<EpochLoss> = read_json(&mut r)?;
        let n = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = read_u32(&mut r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|e| ReaderError::Checkpoint(format!("tensor name: {e}")))?;
            let rows = read_u32(&mut r)?;
            let cols = read_u32(&mut r)?;
            let count = rows as usize * cols as usize;
            let mut data = Vec::with_capacity(count);
            let mut buf = [0u8; 4];
            for _ in 0..count {
                r.read_exact(&mut buf)?;
                data.push(f32::from_le_bytes(buf));
            }
            tensors.push((name, rows, cols, data));
        }
        Ok(Checkpoint {
            config,
            vocab,
            history,
            tensors,
        })
    }
}

fn write_json<W: Write, T: serde::Serialize>(w: &mut W, value: &T) -> Result<(), ReaderError> {
    let json = serde_json::to_vec(value)
        .map_err(|e| ReaderError::Checkpoint(format!("serialize: {e}")))?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    Ok(())
}

fn read_json<R: Read, T: serde::de::DeserializeOwned>(r: &mut R) -> Result<T, ReaderError> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    serde_json::from_slice(&buf).map_err(|e| ReaderError::Checkpoint(format!("parse: {e}")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ReaderError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_model_and_history() {
        let config = ReaderConfig {
            vocab_size: 12,
            embed_dim: 8,
            max_seq_len: 6,
            num_docs: 2,
            max_answer_len: 4,
            ..ReaderConfig::default()
        };
        let vocab = Vocab::build(["a b c d e f"], 12);
        let model: ReaderModel<f32> = ReaderModel::init(config, vocab).unwrap();
        let history = vec![EpochLoss {
            epoch: 0,
            l_qa: 2.0,
            l_bce: 0.7,
            l_contra: 0.6,
            total: 3.3,
        }];
        let checkpoint = Checkpoint::from_model(&model, history.clone());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reader.ckpt");
        checkpoint.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, checkpoint);
        assert_eq!(loaded.history, history);

        // f32 source, f32 storage: bit-identical parameters after reload
        let restored: ReaderModel<f32> = loaded.to_model().unwrap();
        assert_eq!(restored.params(), model.params());

        let batch_a = model.encode(&[4, 5], &[vec![6]]).unwrap();
        let batch_b = restored.encode(&[4, 5], &[vec![6]]).unwrap();
        assert_eq!(batch_a.disc_logits, batch_b.disc_logits);
    }

    #[test]
    fn rejects_garbage_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
