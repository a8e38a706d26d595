//! Binary checkpoint container.
//!
//! Layout: `SIGMACKP`, u32 version, u64 header length, JSON header, then every
//! tensor as raw little-endian values in header order (parameters, then the two
//! optimizer moment sets when present).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Adam, AdamConfig};
use crate::config::TrainConfig;
use crate::corpus::{IdMap, PreparedCorpus};
use crate::error::{Result, SigmaError};
use crate::model::SigmaModel;
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::trainer::TrainState;

const MAGIC: &[u8; 8] = b"SIGMACKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub config: AdamConfig,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub dtype: String,
    pub config: TrainConfig,
    pub config_hash: String,
    pub dataset: String,
    pub corpus_fingerprint: String,
    pub num_items: usize,
    pub users: IdMap,
    pub items: IdMap,
    pub state: TrainState,
    pub tensors: Vec<TensorEntry>,
    pub optimizer: Option<OptimizerEntry>,
}

pub struct Checkpoint<T: Scalar> {
    pub header: CheckpointHeader,
    pub model: SigmaModel<T>,
    pub optimizer: Option<Adam<T>>,
}

fn ckp_err(path: &Path, msg: impl std::fmt::Display) -> SigmaError {
    SigmaError::Checkpoint(format!("{}: {msg}", path.display()))
}

/// Writes atomically through a sibling temporary file.
pub fn save<T: Scalar>(
    path: &Path,
    model: &SigmaModel<T>,
    corpus: &PreparedCorpus,
    optimizer: Option<&Adam<T>>,
    state: TrainState,
) -> Result<()> {
    let header = CheckpointHeader {
        version: VERSION,
        dtype: T::DTYPE.to_string(),
        config: model.config.clone(),
        config_hash: model.config.hash(),
        dataset: corpus.dataset.clone(),
        corpus_fingerprint: corpus.fingerprint(),
        num_items: model.num_items(),
        users: corpus.users.clone(),
        items: corpus.items.clone(),
        state,
        tensors: model
            .params
            .iter()
            .map(|(_, name, m)| TensorEntry {
                name: name.to_string(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
        optimizer: optimizer.map(|o| OptimizerEntry {
            config: o.config(),
            steps: o.steps_taken(),
        }),
    };
    let json = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| SigmaError::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let io = |e| SigmaError::io(&tmp, e);
    {
        let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        let mut buf = Vec::new();
        let mut put = |m: &Matrix<T>, w: &mut BufWriter<File>| -> std::io::Result<()> {
            buf.clear();
            for &v in m.data() {
                v.write_le(&mut buf);
            }
            w.write_all(&buf)
        };
        for (_, _, m) in model.params.iter() {
            put(m, &mut w).map_err(io)?;
        }
        if let Some(o) = optimizer {
            let (first, second) = o.moments();
            for m in first.iter().chain(second) {
                put(m, &mut w).map_err(io)?;
            }
        }
        w.flush().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(|e| SigmaError::io(path, e))
}

fn read_prefix(path: &Path, r: &mut impl Read) -> Result<CheckpointHeader> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| ckp_err(path, "truncated file"))?;
    if &magic != MAGIC {
        return Err(ckp_err(path, "not a checkpoint (bad magic)"));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v).map_err(|_| ckp_err(path, "truncated file"))?;
    let version = u32::from_le_bytes(v);
    if version != VERSION {
        return Err(ckp_err(path, format!("unsupported version {version}")));
    }
    let mut n = [0u8; 8];
    r.read_exact(&mut n).map_err(|_| ckp_err(path, "truncated file"))?;
    let len = u64::from_le_bytes(n) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| ckp_err(path, "truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&json).map_err(|e| ckp_err(path, e))?;
    if header.config.hash() != header.config_hash {
        return Err(ckp_err(path, "config hash does not match the stored config"));
    }
    Ok(header)
}

/// Header only, e.g. to pick the scalar type before loading.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let mut r = BufReader::new(File::open(path).map_err(|e| SigmaError::io(path, e))?);
    read_prefix(path, &mut r)
}

fn read_tensor<T: Scalar>(path: &Path, r: &mut impl Read, dtype: &str, e: &TensorEntry) -> Result<Matrix<T>> {
    let n = e.rows * e.cols;
    let data: Vec<T> = match dtype {
        "f32" => {
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf)
                .map_err(|_| ckp_err(path, format!("truncated tensor {}", e.name)))?;
            buf.chunks_exact(4).map(|c| T::of(f32::read_le(c).as_f64())).collect()
        }
        "f64" => {
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)
                .map_err(|_| ckp_err(path, format!("truncated tensor {}", e.name)))?;
            buf.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect()
        }
        other => return Err(ckp_err(path, format!("unknown dtype {other}"))),
    };
    Ok(Matrix::from_vec(e.rows, e.cols, data))
}

/// Loads and validates a checkpoint; values are converted to `T` if the stored
/// precision differs.
pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let mut r = BufReader::new(File::open(path).map_err(|e| SigmaError::io(path, e))?);
    let header = read_prefix(path, &mut r)?;
    let mut model = SigmaModel::<T>::new(&header.config, header.num_items, header.config.seed)?;
    if model.params.len() != header.tensors.len() {
        return Err(SigmaError::Incompatible(format!(
            "checkpoint has {} tensors, model expects {}",
            header.tensors.len(),
            model.params.len()
        )));
    }
    for e in &header.tensors {
        let id = model
            .params
            .find(&e.name)
            .ok_or_else(|| SigmaError::Incompatible(format!("unexpected tensor `{}`", e.name)))?;
        let want = model.params.value(id).shape();
        if want != (e.rows, e.cols) {
            return Err(SigmaError::Incompatible(format!(
                "tensor `{}` is {}x{}, model expects {}x{}",
                e.name, e.rows, e.cols, want.0, want.1
            )));
        }
        *model.params.value_mut(id) = read_tensor(path, &mut r, &header.dtype, e)?;
    }
    let optimizer = match &header.optimizer {
        Some(o) => {
            let mut first = Vec::with_capacity(header.tensors.len());
            let mut second = Vec::with_capacity(header.tensors.len());
            for e in &header.tensors {
                first.push(read_tensor(path, &mut r, &header.dtype, e)?);
            }
            for e in &header.tensors {
                second.push(read_tensor(path, &mut r, &header.dtype, e)?);
            }
            Some(Adam::restore(o.config, o.steps, first, second))
        }
        None => None,
    };
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| SigmaError::io(path, e))?;
    if !rest.is_empty() {
        return Err(ckp_err(path, format!("{} trailing bytes", rest.len())));
    }
    let mut header = header;
    header.users.reindex();
    header.items.reindex();
    Ok(Checkpoint {
        header,
        model,
        optimizer,
    })
}

/// Refuses a corpus other than the one the checkpoint was trained on.
pub fn check_corpus(header: &CheckpointHeader, corpus: &PreparedCorpus) -> Result<()> {
    let fp = corpus.fingerprint();
    if fp != header.corpus_fingerprint {
        return Err(SigmaError::Incompatible(format!(
            "checkpoint was trained on corpus {} ({}), got {} ({fp})",
            header.dataset, header.corpus_fingerprint, corpus.dataset
        )));
    }
    if corpus.num_items() != header.num_items {
        return Err(SigmaError::Incompatible(format!(
            "checkpoint scores {} items, corpus has {}",
            header.num_items,
            corpus.num_items()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Precision;

    fn setup() -> (TrainConfig, PreparedCorpus) {
        let cfg = TrainConfig {
            k: 2,
            dim: 8,
            heads: 2,
            blocks: 1,
            max_len: 6,
            precision: Precision::F32,
            ..Default::default()
        };
        let seqs: Vec<Vec<u32>> = (0..10u32).map(|u| (0..5).map(|t| (u + t) % 9 + 1).collect()).collect();
        (cfg, PreparedCorpus::from_sequences("toy", 9, &seqs).unwrap())
    }

    #[test]
    fn round_trip_preserves_tensors_and_moments() {
        let (cfg, corpus) = setup();
        let model = SigmaModel::<f32>::new(&cfg, 9, 3).unwrap();
        let opt = Adam::new(AdamConfig::default(), &model.params);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&p, &model, &corpus, Some(&opt), TrainState::default()).unwrap();
        let back = load::<f32>(&p).unwrap();
        for ((_, n1, a), (_, n2, b)) in model.params.iter().zip(back.model.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a, b);
        }
        assert!(back.optimizer.is_some());
        check_corpus(&back.header, &corpus).unwrap();

        // widened to f64 without loss
        let wide = load::<f64>(&p).unwrap();
        let a = model.params.value(model.items);
        let b = wide.model.params.value(wide.model.items);
        assert_eq!(a.cast::<f64>(), *b);
    }

    #[test]
    fn tampering_is_detected() {
        let (cfg, corpus) = setup();
        let model = SigmaModel::<f32>::new(&cfg, 9, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&p, &model, &corpus, None, TrainState::default()).unwrap();
        let bytes = std::fs::read(&p).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(load::<f32>(&p), Err(SigmaError::Checkpoint(_))));

        let mut short = bytes.clone();
        short.truncate(bytes.len() - 3);
        std::fs::write(&p, &short).unwrap();
        assert!(load::<f32>(&p).is_err());

        // edit the stored config without updating its hash
        let at = bytes.windows(5).position(|w| w == b"\"k\":2").unwrap();
        let mut edited = bytes.clone();
        edited[at + 4] = b'3';
        std::fs::write(&p, &edited).unwrap();
        let e = load::<f32>(&p).err().unwrap();
        assert!(e.to_string().contains("hash"), "{e}");

        let other = PreparedCorpus::from_sequences("other", 9, &[vec![1, 2, 3, 4]]).unwrap();
        std::fs::write(&p, &bytes).unwrap();
        let h = read_header(&p).unwrap();
        assert!(matches!(check_corpus(&h, &other), Err(SigmaError::Incompatible(_))));
    }
}
