use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::WindowSet;
use crate::container::{self, AtomicFile};
use crate::model::Model;
use crate::tensor::{Precision, Scalar, Tensor};
use crate::{Error, Result};

pub const ACTIVATION_MAGIC: &[u8; 4] = b"HYAD";
pub const ACTIVATION_VERSION: u32 = 1;

/// Header of an activation file. The payload is a sequence of fixed-size
/// records: `context_len` tokens as u32, then the `[context_len, d_model]`
/// hidden state as f32, both little-endian. The record count follows from
/// the payload length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationManifest {
    pub layer: usize,
    pub d_model: usize,
    pub context_len: usize,
    pub teacher_digest: String,
    pub windows_digest: String,
    pub precision: Precision,
    pub record_bytes: u64,
}

impl ActivationManifest {
    pub fn new(
        layer: usize,
        d_model: usize,
        context_len: usize,
        teacher_digest: String,
        windows_digest: String,
    ) -> Self {
        ActivationManifest {
            layer,
            d_model,
            context_len,
            teacher_digest,
            windows_digest,
            precision: Precision::F32,
            record_bytes: (4 * context_len + 4 * context_len * d_model) as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub tokens: Vec<u16>,
    pub hidden: Tensor<f32>,
}

/// Streaming writer; records go straight to disk.
pub struct ActivationWriter {
    file: AtomicFile,
    manifest: ActivationManifest,
    count: usize,
    buf: Vec<u8>,
}

impl ActivationWriter {
    pub fn create(path: impl AsRef<Path>, manifest: ActivationManifest) -> Result<Self> {
        let mut file = AtomicFile::create(path.as_ref())?;
        container::write_header(
            &mut file.writer,
            ACTIVATION_MAGIC,
            ACTIVATION_VERSION,
            &manifest,
        )?;
        Ok(ActivationWriter {
            file,
            manifest,
            count: 0,
            buf: Vec::new(),
        })
    }

    /// Appends one record; hidden values are stored at 32-bit.
    pub fn push<F: Scalar>(&mut self, tokens: &[u16], hidden: &[F]) -> Result<()> {
        let (l, d) = (self.manifest.context_len, self.manifest.d_model);
        if tokens.len() != l || hidden.len() != l * d {
            return Err(Error::shape(format!(
                "record has {} tokens and {} values, expected {l} and {}",
                tokens.len(),
                hidden.len(),
                l * d
            )));
        }
        self.buf.clear();
        tokens
            .iter()
            .for_each(|&t| self.buf.extend_from_slice(&(t as u32).to_le_bytes()));
        hidden
            .iter()
            .for_each(|&v| self.buf.extend_from_slice(&(v.f64() as f32).to_le_bytes()));
        self.file.writer.write_all(&self.buf)?;
        self.count += 1;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Flushes and moves the file into place; returns the record count.
    pub fn finish(self) -> Result<usize> {
        let n = self.count;
        self.file.commit()?;
        Ok(n)
    }
}

/// Read-only view of an activation file with random access by record.
pub struct ActivationDataset {
    path: PathBuf,
    manifest: ActivationManifest,
    len: usize,
    payload_start: u64,
    reader: Mutex<BufReader<File>>,
}

impl std::fmt::Debug for ActivationDataset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ActivationDataset")
            .field("path", &self.path)
            .field("manifest", &self.manifest)
            .field("len", &self.len)
            .finish()
    }
}

impl ActivationDataset {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let opened = container::open::<ActivationManifest>(
            path,
            ACTIVATION_MAGIC,
            ACTIVATION_VERSION,
            |_| Ok(()),
        )?;
        let m = opened.manifest;
        if m.precision != Precision::F32 {
            return Err(Error::Precision {
                expected: "f32".into(),
                found: m.precision.to_string(),
            });
        }
        let expected = ActivationManifest::new(
            m.layer,
            m.d_model,
            m.context_len,
            String::new(),
            String::new(),
        );
        if m.record_bytes != expected.record_bytes || m.record_bytes == 0 {
            return Err(Error::corrupt(format!(
                "record size {} does not match context_len {} and d_model {}",
                m.record_bytes, m.context_len, m.d_model
            )));
        }
        if opened.payload_len % m.record_bytes != 0 {
            return Err(Error::corrupt(format!(
                "payload of {} bytes is not a whole number of {}-byte records",
                opened.payload_len, m.record_bytes
            )));
        }
        Ok(ActivationDataset {
            path: path.to_path_buf(),
            len: (opened.payload_len / m.record_bytes) as usize,
            manifest: m,
            payload_start: opened.payload_start,
            reader: Mutex::new(opened.reader),
        })
    }

    /// Opens and checks that the file was produced by the teacher with the
    /// given parameter digest.
    pub fn open_for_teacher(path: impl AsRef<Path>, teacher_digest: &str) -> Result<Self> {
        let ds = Self::open(path)?;
        ds.verify_teacher(teacher_digest)?;
        Ok(ds)
    }

    pub fn verify_teacher(&self, teacher_digest: &str) -> Result<()> {
        if self.manifest.teacher_digest != teacher_digest {
            return Err(Error::Provenance(format!(
                "{} was generated by teacher {}, expected {}",
                self.path.display(),
                self.manifest.teacher_digest,
                teacher_digest
            )));
        }
        Ok(())
    }

    pub fn manifest(&self) -> &ActivationManifest {
        &self.manifest
    }

    pub fn layer(&self) -> usize {
        self.manifest.layer
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn read(&self, i: usize) -> Result<ActivationRecord> {
        use std::io::{Read, Seek, SeekFrom};
        if i >= self.len {
            return Err(Error::Data(format!(
                "record {i} out of range for {} records",
                self.len
            )));
        }
        let (l, d) = (self.manifest.context_len, self.manifest.d_model);
        let mut bytes = vec![0u8; self.manifest.record_bytes as usize];
        {
            let mut r = self.reader.lock().unwrap_or_else(|e| e.into_inner());
            r.seek(SeekFrom::Start(
                self.payload_start + i as u64 * self.manifest.record_bytes,
            ))?;
            r.read_exact(&mut bytes).map_err(|e| match e.kind() {
                std::io::ErrorKind::UnexpectedEof => Error::corrupt("record truncated"),
                _ => Error::Io(e),
            })?;
        }
        let (tb, hb) = bytes.split_at(4 * l);
        let tokens = tb
            .chunks_exact(4)
            .map(|c| {
                let t = u32::from_le_bytes(c.try_into().expect("4 bytes"));
                u16::try_from(t).map_err(|_| Error::corrupt(format!("token {t} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        let hidden = hb.chunks_exact(4).map(f32::read_le).collect();
        Ok(ActivationRecord {
            tokens,
            hidden: Tensor::new([l, d], hidden)?,
        })
    }

    /// Records in storage order.
    pub fn iter(&self) -> impl Iterator<Item = Result<ActivationRecord>> + '_ {
        (0..self.len).map(|i| self.read(i))
    }
}

fn check_windows<F: Scalar>(teacher: &Model<F>, windows: &WindowSet) -> Result<()> {
    if windows.context_len() > teacher.config().context_len {
        return Err(Error::config(format!(
            "windows of {} tokens exceed the teacher context {}",
            windows.context_len(),
            teacher.config().context_len
        )));
    }
    Ok(())
}

/// Runs the teacher over every window and stores its output at `layer`.
pub fn build_activation_dataset<F: Scalar>(
    teacher: &Model<F>,
    windows: &WindowSet,
    layer: usize,
    path: impl AsRef<Path>,
) -> Result<ActivationDataset> {
    let path = path.as_ref().to_path_buf();
    let mut built = build_activation_datasets(teacher, windows, &[(layer, path)])?;
    Ok(built.remove(0))
}

/// One pass over the windows producing a dataset per `(layer, path)`.
pub fn build_activation_datasets<F: Scalar>(
    teacher: &Model<F>,
    windows: &WindowSet,
    targets: &[(usize, PathBuf)],
) -> Result<Vec<ActivationDataset>> {
    check_windows(teacher, windows)?;
    let n_layers = teacher.n_layers();
    if let Some((l, _)) = targets.iter().find(|(l, _)| *l >= n_layers) {
        return Err(Error::config(format!(
            "layer {l} out of range for a {n_layers}-layer teacher"
        )));
    }
    let deepest = targets.iter().map(|(l, _)| l + 1).max().unwrap_or(0);
    let digest = teacher.digest();
    let wdigest = windows.digest();
    let mut writers = targets
        .iter()
        .map(|(l, p)| {
            let m = ActivationManifest::new(
                *l,
                teacher.config().d_model,
                windows.context_len(),
                digest.clone(),
                wdigest.clone(),
            );
            ActivationWriter::create(p, m)
        })
        .collect::<Result<Vec<_>>>()?;
    for i in 0..windows.len() {
        let hidden = teacher.hidden_states(&windows.indices(i), deepest)?;
        for ((l, _), w) in targets.iter().zip(writers.iter_mut()) {
            w.push(windows.window(i), hidden[*l].data())?;
        }
    }
    for w in writers {
        w.finish()?;
    }
    targets
        .iter()
        .map(|(_, p)| ActivationDataset::open(p))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writer_reader_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.hyad");
        let m = ActivationManifest::new(0, 2, 3, "t".into(), "w".into());
        let mut w = ActivationWriter::create(&path, m.clone()).unwrap();
        w.push(&[1, 2, 3], &[0.5f64, 1.0, 1.5, 2.0, 2.5, 3.0])
            .unwrap();
        w.push(&[4, 5, 6], &[0.0f32; 6]).unwrap();
        assert!(w.push(&[1, 2], &[0.0f32; 6]).is_err());
        assert_eq!(w.finish().unwrap(), 2);
        let ds = ActivationDataset::open(&path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.manifest(), &m);
        let r = ds.read(0).unwrap();
        assert_eq!(r.tokens, vec![1, 2, 3]);
        assert_eq!(r.hidden.data(), &[0.5, 1.0, 1.5, 2.0, 2.5, 3.0]);
        assert!(ds.read(2).is_err());
        assert!(matches!(
            ds.verify_teacher("other"),
            Err(Error::Provenance(_))
        ));
    }

    #[test]
    fn partial_record_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.hyad");
        let mut w = ActivationWriter::create(
            &path,
            ActivationManifest::new(0, 2, 3, "t".into(), "w".into()),
        )
        .unwrap();
        w.push(&[1, 2, 3], &[0.0f32; 6]).unwrap();
        w.finish().unwrap();
        let len = std::fs::metadata(&path).unwrap().len();
        let f = std::fs::OpenOptions::new().write(true).open(&path).unwrap();
        f.set_len(len - 1).unwrap();
        assert!(matches!(
            ActivationDataset::open(&path),
            Err(Error::Corrupt(_))
        ));
    }
}
