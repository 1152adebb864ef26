use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::container::{self, AtomicFile};
use crate::mixers::MixerKind;
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{Precision, Scalar, Tensor};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HYSC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One tensor in the payload. `kind` is absent for training-state tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<ParamKind>,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub precision: Precision,
    pub config: ModelConfig,
    /// SHA-256 of the parameters, see [`ParamStore::digest`].
    pub digest: String,
    pub payload_bytes: u64,
    pub tensors: Vec<TensorRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_state: Option<serde_json::Value>,
}

/// Optimizer and progress state stored next to the parameters so a run can
/// resume exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSnapshot<F: Scalar> {
    pub state: serde_json::Value,
    pub tensors: Vec<(String, Tensor<F>)>,
}

pub(super) fn save<F: Scalar>(
    model: &Model<F>,
    state: Option<&TrainSnapshot<F>>,
    path: &Path,
) -> Result<()> {
    let width = F::PRECISION.byte_width() as u64;
    let mut records = Vec::new();
    let mut offset = 0u64;
    let mut push = |name: &str, kind: Option<ParamKind>, t: &Tensor<F>| {
        let nbytes = t.len() as u64 * width;
        records.push(TensorRecord {
            name: name.to_string(),
            kind,
            shape: t.shape().to_vec(),
            offset,
            nbytes,
        });
        offset += nbytes;
    };
    for e in model.params().entries() {
        push(&e.name, Some(e.kind), &e.tensor);
    }
    if let Some(s) = state {
        for (name, t) in &s.tensors {
            push(name, None, t);
        }
    }
    let manifest = CheckpointManifest {
        precision: F::PRECISION,
        config: model.config().clone(),
        digest: model.digest(),
        payload_bytes: offset,
        tensors: records,
        train_state: state.map(|s| s.state.clone()),
    };
    let mut file = AtomicFile::create(path)?;
    container::write_header(
        &mut file.writer,
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        &manifest,
    )?;
    let mut buf = Vec::new();
    let tensors = model.params().entries().iter().map(|e| &e.tensor).chain(
        state
            .into_iter()
            .flat_map(|s| s.tensors.iter().map(|(_, t)| t)),
    );
    for t in tensors {
        buf.clear();
        t.data().iter().for_each(|v| v.write_le(&mut buf));
        file.writer.write_all(&buf)?;
    }
    file.commit()
}

fn check_kind(raw: &serde_json::Value, expected: Option<MixerKind>) -> Result<()> {
    let found = raw
        .pointer("/config/mixer/kind")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::corrupt("manifest has no config.mixer.kind"))?;
    let parsed = match found {
        "attention" => MixerKind::Attention,
        "hyena" => MixerKind::Hyena,
        other => {
            return Err(Error::MixerKind {
                expected: expected.map_or("attention or hyena".into(), |k| k.to_string()),
                found: other.to_string(),
            })
        }
    };
    match expected {
        Some(k) if k != parsed => Err(Error::MixerKind {
            expected: k.to_string(),
            found: parsed.to_string(),
        }),
        _ => Ok(()),
    }
}

fn decode<G: Scalar>(bytes: &[u8]) -> Vec<G> {
    bytes
        .chunks_exact(G::PRECISION.byte_width())
        .map(G::read_le)
        .collect()
}

struct Decoded<G: Scalar> {
    params: ParamStore<G>,
    state: Vec<(String, Tensor<G>)>,
}

fn decode_all<G: Scalar>(m: &CheckpointManifest, payload: &[u8]) -> Result<Decoded<G>> {
    let mut params = ParamStore::new();
    let mut state = Vec::new();
    for r in &m.tensors {
        let bytes = &payload[r.offset as usize..(r.offset + r.nbytes) as usize];
        let t = Tensor::new(r.shape.clone(), decode::<G>(bytes))
            .map_err(|e| Error::corrupt(format!("{}: {e}", r.name)))?;
        match r.kind {
            Some(kind) => {
                params.add(r.name.clone(), kind, t)?;
            }
            None => state.push((r.name.clone(), t)),
        }
    }
    if params.digest() != m.digest {
        return Err(Error::corrupt(
            "parameter digest does not match the manifest",
        ));
    }
    Ok(Decoded { params, state })
}

fn cast_store<G: Scalar, F: Scalar>(
    d: Decoded<G>,
) -> Result<(ParamStore<F>, Vec<(String, Tensor<F>)>)> {
    let mut params = ParamStore::new();
    for e in d.params.entries() {
        params.add(e.name.clone(), e.kind, e.tensor.cast())?;
    }
    let state = d.state.into_iter().map(|(n, t)| (n, t.cast())).collect();
    Ok((params, state))
}

pub(super) fn load<F: Scalar>(
    path: &Path,
    expected: Option<MixerKind>,
) -> Result<(Model<F>, Option<TrainSnapshot<F>>)> {
    let mut opened =
        container::open::<CheckpointManifest>(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, |raw| {
            check_kind(raw, expected)
        })?;
    let m = opened.manifest.clone();
    if m.precision == Precision::F64 && F::PRECISION == Precision::F32 {
        return Err(Error::Precision {
            expected: F::PRECISION.to_string(),
            found: m.precision.to_string(),
        });
    }
    if opened.payload_len != m.payload_bytes {
        return Err(Error::corrupt(format!(
            "payload is {} bytes, manifest declares {}",
            opened.payload_len, m.payload_bytes
        )));
    }
    let width = m.precision.byte_width() as u64;
    let mut seen = HashSet::new();
    let mut offset = 0u64;
    for r in &m.tensors {
        if !seen.insert(r.name.as_str()) {
            return Err(Error::corrupt(format!("tensor {:?} listed twice", r.name)));
        }
        let numel: u64 = r.shape.iter().map(|&d| d as u64).product();
        if r.offset != offset || r.nbytes != numel * width {
            return Err(Error::corrupt(format!(
                "tensor {:?}: offset {} / {} bytes inconsistent with shape {:?}",
                r.name, r.offset, r.nbytes, r.shape
            )));
        }
        offset += r.nbytes;
    }
    if offset != m.payload_bytes {
        return Err(Error::corrupt(
            "tensor directory does not cover the payload",
        ));
    }
    let mut payload = vec![0u8; m.payload_bytes as usize];
    opened.read_payload(&mut payload)?;
    let (params, state) = match m.precision {
        Precision::F32 => cast_store(decode_all::<f32>(&m, &payload)?)?,
        Precision::F64 => cast_store(decode_all::<f64>(&m, &payload)?)?,
    };
    let model = Model::attach(m.config.clone(), params)?;
    let snapshot = m.train_state.clone().map(|state_json| TrainSnapshot {
        state: state_json,
        tensors: state,
    });
    Ok((model, snapshot))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Capture;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = Model::<f32>::build(ModelConfig::attention(8, 2, 2, 8)).unwrap();
        m.save(&path).unwrap();
        let back = Model::<f32>::load(&path).unwrap();
        assert!(back.params().bitwise_eq(m.params()));
        let a = m.forward(&[1, 2, 3], Capture::None).unwrap().logits;
        let b = back.forward(&[1, 2, 3], Capture::None).unwrap().logits;
        assert!(a.bitwise_eq(&b));
        let wide = Model::<f64>::load(&path).unwrap();
        assert_eq!(wide.params().len(), m.params().len());
    }

    #[test]
    fn narrowing_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        Model::<f64>::build(ModelConfig::hyena(8, 1, 8))
            .unwrap()
            .save(&path)
            .unwrap();
        assert!(matches!(
            Model::<f32>::load(&path),
            Err(Error::Precision { .. })
        ));
    }

    #[test]
    fn state_tensors_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = Model::<f32>::build(ModelConfig::hyena(8, 1, 8)).unwrap();
        let snap = TrainSnapshot {
            state: serde_json::json!({"step": 3}),
            tensors: vec![(
                "optim.m.embed.weight".into(),
                Tensor::new([2], vec![1.5f32, -2.0]).unwrap(),
            )],
        };
        m.save_with_state(&snap, &path).unwrap();
        let (back, got) = Model::<f32>::load_with_state(&path).unwrap();
        assert!(back.params().bitwise_eq(m.params()));
        assert_eq!(got.unwrap(), snap);
    }
}
