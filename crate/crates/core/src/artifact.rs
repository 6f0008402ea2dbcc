//! Binary model files: a JSON manifest followed by one payload of
//! little-endian `f64` arrays, row-major, covered by a SHA-256 digest.
//!
//! ```text
//! magic (8 bytes) | manifest length (u64 LE) | manifest JSON | payload
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::inference::{DenseLayer, Encoder, HiddenLayer, TrainedModel};
use crate::model::{EnvDeviations, GenSpec, GlobalTopics, ModelConfig, PriorSpec, TrueParams};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 8] = b"MTOPIC\r\n";
pub const FORMAT_MAJOR: u32 = 1;
pub const FORMAT_MINOR: u32 = 0;

pub const KIND_MODEL: &str = "model";
pub const KIND_TRUTH: &str = "ground_truth";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    /// Byte offset into the payload.
    pub offset: u64,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: String,
    pub kind: String,
    pub num_topics: usize,
    pub vocab_size: usize,
    pub num_envs: usize,
    pub env_names: Vec<String>,
    /// Echo of the configuration that produced the arrays.
    pub config: Value,
    pub vocabulary: Vec<String>,
    /// Small non-array values (prior hyperparameters and the like).
    pub extra: Value,
    pub arrays: Vec<ArrayEntry>,
    pub payload_bytes: u64,
    pub sha256: String,
}

/// Named arrays plus everything the manifest carries besides the directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Artifact {
    pub kind: String,
    pub num_topics: usize,
    pub vocab_size: usize,
    pub num_envs: usize,
    pub env_names: Vec<String>,
    pub config: Value,
    pub vocabulary: Vec<String>,
    pub extra: Value,
    pub arrays: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl Artifact {
    fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.insert(name.into(), (shape, data));
    }

    fn push_matrix(&mut self, name: impl Into<String>, m: &Matrix) {
        self.push(name, vec![m.rows(), m.cols()], m.as_slice().to_vec());
    }

    fn push_vec(&mut self, name: impl Into<String>, v: &[f64]) {
        self.push(name, vec![v.len()], v.to_vec());
    }

    pub fn array(&self, name: &str) -> Result<&(Vec<usize>, Vec<f64>)> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Format(format!("artifact has no array '{name}'")))
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let (shape, data) = self.array(name)?;
        match shape.as_slice() {
            [r, c] => Matrix::from_vec(*r, *c, data.clone()),
            _ => Err(Error::Format(format!("array '{name}' is not two-dimensional"))),
        }
    }

    pub fn vector(&self, name: &str) -> Result<Vec<f64>> {
        let (shape, data) = self.array(name)?;
        if shape.len() != 1 {
            return Err(Error::Format(format!("array '{name}' is not one-dimensional")));
        }
        Ok(data.clone())
    }

    /// Serialize to bytes. Arrays are laid out in name order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.arrays.len());
        for (name, (shape, data)) in &self.arrays {
            entries.push(ArrayEntry {
                name: name.clone(),
                offset: payload.len() as u64,
                shape: shape.clone(),
            });
            for x in data {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format_version: format!("{FORMAT_MAJOR}.{FORMAT_MINOR}"),
            kind: self.kind.clone(),
            num_topics: self.num_topics,
            vocab_size: self.vocab_size,
            num_envs: self.num_envs,
            env_names: self.env_names.clone(),
            config: self.config.clone(),
            vocabulary: self.vocabulary.clone(),
            extra: self.extra.clone(),
            arrays: entries,
            payload_bytes: payload.len() as u64,
            sha256: hex::encode(Sha256::digest(&payload)),
        };
        let header = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Truncated {
                offset: bytes.len() as u64,
                expected: 16,
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Format("not a model artifact (bad magic bytes)".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize.saturating_add(header_len);
        if bytes.len() < header_end {
            return Err(Error::Truncated {
                offset: bytes.len() as u64,
                expected: header_len as u64,
            });
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[16..header_end])?;
        check_version(&manifest.format_version)?;
        let payload = &bytes[header_end..];
        if (payload.len() as u64) < manifest.payload_bytes {
            return Err(Error::Truncated {
                offset: bytes.len() as u64,
                expected: manifest.payload_bytes,
            });
        }
        if payload.len() as u64 > manifest.payload_bytes {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                payload.len() as u64 - manifest.payload_bytes
            )));
        }
        if hex::encode(Sha256::digest(payload)) != manifest.sha256 {
            return Err(Error::ChecksumMismatch {
                len: manifest.payload_bytes,
            });
        }
        let mut arrays = BTreeMap::new();
        let mut cursor = 0u64;
        for entry in &manifest.arrays {
            if entry.offset != cursor {
                return Err(Error::Format(format!(
                    "array '{}' starts at {} but the previous one ends at {cursor}",
                    entry.name, entry.offset
                )));
            }
            let len = entry.shape.iter().product::<usize>();
            let end = cursor + 8 * len as u64;
            if end > manifest.payload_bytes {
                return Err(Error::Format(format!("array '{}' overruns the payload", entry.name)));
            }
            let data = payload[cursor as usize..end as usize]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.insert(entry.name.clone(), (entry.shape.clone(), data));
            cursor = end;
        }
        if cursor != manifest.payload_bytes {
            return Err(Error::Format("arrays do not cover the payload".into()));
        }
        Ok(Artifact {
            kind: manifest.kind,
            num_topics: manifest.num_topics,
            vocab_size: manifest.vocab_size,
            num_envs: manifest.num_envs,
            env_names: manifest.env_names,
            config: manifest.config,
            vocabulary: manifest.vocabulary,
            extra: manifest.extra,
            arrays,
        })
    }

    /// Write via a sibling temporary file and rename.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".partial");
        let tmp = std::path::PathBuf::from(tmp);
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn check_version(v: &str) -> Result<()> {
    let major: u32 = v
        .split('.')
        .next()
        .and_then(|m| m.parse().ok())
        .ok_or_else(|| Error::Format(format!("unreadable format version '{v}'")))?;
    if major != FORMAT_MAJOR {
        return Err(Error::Format(format!(
            "artifact format {v} is not readable by this build (major version {FORMAT_MAJOR})"
        )));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ModelExtra {
    prior: PriorSpec,
    hidden_layers: usize,
}

pub fn model_to_artifact(model: &TrainedModel) -> Result<Artifact> {
    let mut art = Artifact {
        kind: KIND_MODEL.into(),
        num_topics: model.num_topics(),
        vocab_size: model.vocab_size(),
        num_envs: model.num_envs(),
        env_names: model.env_names.clone(),
        config: serde_json::to_value(&model.config)?,
        vocabulary: model.vocab.terms().to_vec(),
        extra: serde_json::to_value(ModelExtra {
            prior: model.prior.clone(),
            hidden_layers: model.encoder.hidden.len(),
        })?,
        arrays: BTreeMap::new(),
    };
    art.push_matrix("beta_hat", &model.beta_hat.beta);
    if let Some(g) = &model.gamma_hat {
        art.push(
            "gamma_hat",
            vec![g.num_envs(), g.num_topics(), g.vocab_size()],
            g.matrix().as_slice().to_vec(),
        );
    }
    for (i, h) in model.encoder.hidden.iter().enumerate() {
        art.push_matrix(format!("encoder.hidden{i}.weight"), &h.dense.weight);
        art.push_vec(format!("encoder.hidden{i}.bias"), &h.dense.bias);
        art.push_vec(format!("encoder.hidden{i}.running_mean"), &h.running_mean);
        art.push_vec(format!("encoder.hidden{i}.running_var"), &h.running_var);
    }
    art.push_matrix("encoder.mu.weight", &model.encoder.mu_head.weight);
    art.push_vec("encoder.mu.bias", &model.encoder.mu_head.bias);
    art.push_matrix("encoder.log_sigma.weight", &model.encoder.log_sigma_head.weight);
    art.push_vec("encoder.log_sigma.bias", &model.encoder.log_sigma_head.bias);
    art.push_vec("training_log", &model.training_log);
    Ok(art)
}

pub fn model_from_artifact(art: &Artifact) -> Result<TrainedModel> {
    if art.kind != KIND_MODEL {
        return Err(Error::Format(format!("expected a model artifact, found '{}'", art.kind)));
    }
    let config: ModelConfig = serde_json::from_value(art.config.clone())?;
    let extra: ModelExtra = serde_json::from_value(art.extra.clone())?;
    let dense = |prefix: &str| -> Result<DenseLayer> {
        Ok(DenseLayer {
            weight: art.matrix(&format!("{prefix}.weight"))?,
            bias: art.vector(&format!("{prefix}.bias"))?,
        })
    };
    let hidden = (0..extra.hidden_layers)
        .map(|i| {
            let p = format!("encoder.hidden{i}");
            Ok(HiddenLayer {
                dense: dense(&p)?,
                running_mean: art.vector(&format!("{p}.running_mean"))?,
                running_var: art.vector(&format!("{p}.running_var"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let gamma_hat = match art.arrays.get("gamma_hat") {
        Some((shape, data)) => {
            let [e, k, v] = shape.as_slice() else {
                return Err(Error::Format("gamma_hat must be three-dimensional".into()));
            };
            Some(EnvDeviations::from_matrix(*e, *k, Matrix::from_vec(e * k, *v, data.clone())?)?)
        }
        None => None,
    };
    let beta = art.matrix("beta_hat")?;
    if beta.shape() != (art.num_topics, art.vocab_size) || art.vocabulary.len() != art.vocab_size {
        return Err(Error::Format("manifest dimensions disagree with beta_hat".into()));
    }
    Ok(TrainedModel {
        config,
        vocab: Vocabulary::from_terms(art.vocabulary.clone())?,
        env_names: art.env_names.clone(),
        beta_hat: GlobalTopics { beta },
        gamma_hat,
        encoder: Encoder {
            hidden,
            mu_head: dense("encoder.mu")?,
            log_sigma_head: dense("encoder.log_sigma")?,
        },
        prior: extra.prior,
        training_log: art.vector("training_log")?,
    })
}

pub fn save_model(model: &TrainedModel, path: &Path) -> Result<()> {
    model_to_artifact(model)?.write(path)
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    model_from_artifact(&Artifact::read(path)?)
}

/// Ground truth of a simulation, stored in the same container format.
pub fn truth_to_artifact(
    truth: &TrueParams,
    spec: &GenSpec,
    vocab: &Vocabulary,
    env_names: &[String],
) -> Result<Artifact> {
    let g = &truth.gamma;
    let mut art = Artifact {
        kind: KIND_TRUTH.into(),
        num_topics: truth.beta.num_topics(),
        vocab_size: truth.beta.vocab_size(),
        num_envs: g.num_envs(),
        env_names: env_names.to_vec(),
        config: serde_json::to_value(spec)?,
        vocabulary: vocab.terms().to_vec(),
        extra: Value::Null,
        arrays: BTreeMap::new(),
    };
    let dims = vec![g.num_envs(), g.num_topics(), g.vocab_size()];
    art.push_matrix("beta", &truth.beta.beta);
    art.push("gamma", dims.clone(), g.matrix().as_slice().to_vec());
    art.push_matrix("doc_thetas", &truth.doc_thetas);
    art.push(
        "support_mask",
        dims,
        truth.support_mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    );
    Ok(art)
}

pub fn truth_from_artifact(art: &Artifact) -> Result<TrueParams> {
    if art.kind != KIND_TRUTH {
        return Err(Error::Format(format!("expected a ground-truth artifact, found '{}'", art.kind)));
    }
    let (shape, data) = art.array("gamma")?;
    let [e, k, v] = shape.as_slice() else {
        return Err(Error::Format("gamma must be three-dimensional".into()));
    };
    Ok(TrueParams {
        beta: GlobalTopics {
            beta: art.matrix("beta")?,
        },
        gamma: EnvDeviations::from_matrix(*e, *k, Matrix::from_vec(e * k, *v, data.clone())?)?,
        doc_thetas: art.matrix("doc_thetas")?,
        support_mask: art.array("support_mask")?.1.iter().map(|&x| x != 0.0).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::generate_synthetic;

    fn sample_artifact() -> Artifact {
        let mut a = Artifact {
            kind: "test".into(),
            num_topics: 2,
            vocab_size: 3,
            num_envs: 1,
            env_names: vec!["e".into()],
            config: Value::Null,
            vocabulary: vec!["a".into(), "b".into(), "c".into()],
            extra: Value::Null,
            arrays: BTreeMap::new(),
        };
        a.push_matrix("m", &Matrix::from_fn(2, 3, |i, j| i as f64 - 0.1 * j as f64));
        a.push_vec("v", &[f64::MIN_POSITIVE, -0.0, 1e300]);
        a
    }

    #[test]
    fn round_trip_is_exact() {
        let a = sample_artifact();
        let b = Artifact::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.vector("v").unwrap()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample_artifact().to_bytes().unwrap();
        let cut = bytes.len() - 5;
        match Artifact::from_bytes(&bytes[..cut]) {
            Err(Error::Truncated { offset, expected }) => {
                assert_eq!(offset, cut as u64);
                assert_eq!(expected, 72);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let mut bytes = sample_artifact().to_bytes().unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        assert!(matches!(Artifact::from_bytes(&bytes), Err(Error::ChecksumMismatch { len: 72 })));
    }

    #[test]
    fn newer_major_version_is_rejected() {
        let bytes = sample_artifact().to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes).replace("\"format_version\":\"1.0\"", "\"format_version\":\"2.0\"");
        assert!(matches!(Artifact::from_bytes(text.as_bytes()), Err(Error::Format(_))));
        assert!(check_version("1.7").is_ok());
    }

    #[test]
    fn bad_magic() {
        assert!(matches!(Artifact::from_bytes(&[0u8; 32]), Err(Error::Format(_))));
    }

    #[test]
    fn truth_round_trip() {
        let spec = GenSpec {
            num_docs: 10,
            vocab_size: 8,
            num_topics: 2,
            seed: 3,
            ..GenSpec::default()
        };
        let (corpus, truth) = generate_synthetic(&spec).unwrap();
        let art = truth_to_artifact(&truth, &spec, &corpus.vocab, &corpus.env_names).unwrap();
        let back = Artifact::from_bytes(&art.to_bytes().unwrap()).unwrap();
        assert_eq!(truth_from_artifact(&back).unwrap(), truth);
        let echoed: GenSpec = serde_json::from_value(back.config).unwrap();
        assert_eq!(echoed, spec);
    }
}
