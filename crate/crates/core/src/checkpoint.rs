//! JSON checkpoints for encoder parameters, optimizer state and intents.
//!
//! Floats are written with shortest round-trip formatting and parsed with
//! exact rounding, so a reload reproduces every parameter bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clustering::IntentModel;
use crate::encoder::{layout, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::tensor::Matrix;
use crate::trainer::TrainConfig;

pub const CHECKPOINT_FORMAT: &str = "iclrec-checkpoint";
pub const INTENTS_FORMAT: &str = "iclrec-intents";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: [usize; 2],
    values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    encoder: EncoderConfig,
    train: Option<TrainConfig>,
    tensors: Vec<NamedTensor>,
    optimizer: Option<AdamState>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IntentsFile {
    format: String,
    version: u32,
    model: IntentModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub train: Option<TrainConfig>,
    pub optimizer: Option<AdamState>,
}

fn check_header(format: &str, version: u32, expected: &str) -> Result<()> {
    if format != expected {
        return Err(Error::Format(format!("expected a {expected} file, found {format:?}")));
    }
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported {expected} version {version} (this build reads version {FORMAT_VERSION})"
        )));
    }
    Ok(())
}

fn write(path: &Path, bytes: Vec<u8>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads the `format` and `version` fields first so that a file from a
/// different version is reported as such rather than as a field error.
fn parse<T: serde::de::DeserializeOwned>(bytes: &[u8], path: &Path, expected: &str) -> Result<T> {
    #[derive(Deserialize)]
    struct Header {
        format: String,
        version: u32,
    }
    let header: Header = serde_json::from_slice(bytes)
        .map_err(|e| Error::Format(format!("{}: not a {expected} file: {e}", path.display())))?;
    check_header(&header.format, header.version, expected)?;
    serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn save_checkpoint(
    path: &Path,
    params: &EncoderParams,
    train: Option<&TrainConfig>,
    optimizer: Option<&AdamState>,
) -> Result<()> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: FORMAT_VERSION,
        encoder: params.config.clone(),
        train: train.cloned(),
        tensors: params
            .names
            .iter()
            .zip(&params.tensors)
            .map(|(name, t)| NamedTensor {
                name: name.clone(),
                shape: [t.rows, t.cols],
                values: t.data.clone(),
            })
            .collect(),
        optimizer: optimizer.cloned(),
    };
    let bytes = serde_json::to_vec(&file).map_err(|e| Error::Format(e.to_string()))?;
    write(path, bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file: CheckpointFile = parse(&read(path)?, path, CHECKPOINT_FORMAT)?;
    file.encoder
        .validate()
        .map_err(|e| Error::Format(format!("encoder config: {e}")))?;
    let expected = layout(&file.encoder);
    if expected.len() != file.tensors.len() {
        return Err(Error::Format(format!(
            "{} tensors stored, encoder layout has {}",
            file.tensors.len(),
            expected.len()
        )));
    }
    let mut names = Vec::with_capacity(expected.len());
    let mut tensors = Vec::with_capacity(expected.len());
    for ((name, r, c), t) in expected.into_iter().zip(file.tensors) {
        if t.name != name || t.shape != [r, c] || t.values.len() != r * c {
            return Err(Error::Format(format!(
                "tensor {:?} {:?} does not match expected {name:?} [{r}, {c}]",
                t.name, t.shape
            )));
        }
        names.push(t.name);
        tensors.push(Matrix::from_vec(r, c, t.values));
    }
    let params = EncoderParams {
        config: file.encoder,
        names,
        tensors,
    };
    params.check_layout()?;
    if let Some(opt) = &file.optimizer {
        let fits = |ms: &[Matrix]| {
            ms.len() == params.tensors.len() && ms.iter().zip(&params.tensors).all(|(m, p)| m.shape() == p.shape())
        };
        if !fits(&opt.m) || !fits(&opt.v) {
            return Err(Error::Format("optimizer moments do not match the parameter shapes".into()));
        }
    }
    Ok(Checkpoint {
        params,
        train: file.train,
        optimizer: file.optimizer,
    })
}

pub fn save_intents(path: &Path, model: &IntentModel) -> Result<()> {
    let file = IntentsFile {
        format: INTENTS_FORMAT.into(),
        version: FORMAT_VERSION,
        model: model.clone(),
    };
    let bytes = serde_json::to_vec(&file).map_err(|e| Error::Format(e.to_string()))?;
    write(path, bytes)
}

pub fn load_intents(path: &Path) -> Result<IntentModel> {
    let file: IntentsFile = parse(&read(path)?, path, INTENTS_FORMAT)?;
    let m = file.model;
    if m.centroids.rows != m.k || m.centroids.data.len() != m.centroids.rows * m.centroids.cols {
        return Err(Error::Format(format!(
            "intent model declares k = {} but stores {} centroids",
            m.k, m.centroids.rows
        )));
    }
    if let Some(&a) = m.assignments.iter().find(|&&a| a >= m.k) {
        return Err(Error::Format(format!("assignment {a} outside k = {}", m.k)));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::kmeans_fit;
    use crate::rng;

    fn params() -> EncoderParams {
        let mut cfg = EncoderConfig::new(15);
        cfg.dim = 8;
        cfg.max_len = 5;
        cfg.n_blocks = 1;
        EncoderParams::init(&cfg, 9).unwrap()
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut p = params();
        // Awkward values that a lossy float printer would disturb.
        p.tensors[2].data[0] = 0.1 + 0.2;
        p.tensors[3].data[0] = 1.0 / 3.0;
        p.tensors[4].data[0] = 5e-324;
        let opt = AdamState::new(&p.tensors);
        let mut tc = TrainConfig::new(15);
        tc.encoder = p.config.clone();
        save_checkpoint(&path, &p, Some(&tc), Some(&opt)).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.params, p);
        assert_eq!(back.optimizer.as_ref(), Some(&opt));
        assert_eq!(back.train.as_ref(), Some(&tc));
    }

    #[test]
    fn corrupt_or_foreign_files_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        fs::write(&path, b"{ not json").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));

        save_checkpoint(&path, &params(), None, None).unwrap();
        let text = fs::read_to_string(&path).unwrap().replace("\"version\":1", "\"version\":7");
        fs::write(&path, text).unwrap();
        let e = load_checkpoint(&path).unwrap_err();
        assert!(matches!(&e, Error::Format(m) if m.contains("version 7")), "{e}");

        save_checkpoint(&path, &params(), None, None).unwrap();
        let text = fs::read_to_string(&path).unwrap().replace("\"pos_emb\"", "\"renamed\"");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));

        let intents = dir.path().join("intents.json");
        save_checkpoint(&intents, &params(), None, None).unwrap();
        assert!(matches!(load_intents(&intents), Err(Error::Format(_))));
        assert!(matches!(load_checkpoint(&dir.path().join("missing.json")), Err(Error::Io { .. })));
    }

    #[test]
    fn intents_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("intents.json");
        let pts = Matrix::uniform(30, 4, -1.0, 1.0, &mut rng::seeded(2));
        let m = kmeans_fit(&pts, 3, 20, 4).unwrap();
        save_intents(&path, &m).unwrap();
        assert_eq!(load_intents(&path).unwrap(), m);
    }
}
