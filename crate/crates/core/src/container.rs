//! Shared binary framing for checkpoint and activation files:
//!
//! ```text
//! magic      4 bytes
//! version    u32 little-endian
//! manifest   u64 little-endian byte length, then UTF-8 JSON
//! payload    raw little-endian values to end of file
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{Error, Result};

/// Manifests larger than this are rejected as corrupt before allocation.
const MAX_MANIFEST: u64 = 64 << 20;

pub(crate) fn header_len(manifest_len: usize) -> u64 {
    4 + 4 + 8 + manifest_len as u64
}

pub(crate) fn write_header<W: Write, M: Serialize>(
    w: &mut W,
    magic: &[u8; 4],
    version: u32,
    manifest: &M,
) -> Result<u64> {
    let json = serde_json::to_vec_pretty(manifest)
        .map_err(|e| Error::corrupt(format!("manifest encoding: {e}")))?;
    w.write_all(magic)?;
    w.write_all(&version.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    Ok(header_len(json.len()))
}

/// Opened file positioned at the start of the payload.
pub(crate) struct Opened<M> {
    pub manifest: M,
    pub payload_start: u64,
    pub payload_len: u64,
    pub reader: BufReader<File>,
}

fn read_exact_or_corrupt<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => {
            Error::corrupt(format!("file truncated inside the {what}"))
        }
        _ => Error::Io(e),
    })
}

pub(crate) fn open<M: DeserializeOwned>(
    path: &Path,
    magic: &[u8; 4],
    version: u32,
    check: impl FnOnce(&serde_json::Value) -> Result<()>,
) -> Result<Opened<M>> {
    let file = File::open(path)?;
    let total = file.metadata()?.len();
    let mut reader = BufReader::new(file);
    let mut found = [0u8; 4];
    read_exact_or_corrupt(&mut reader, &mut found, "header")?;
    if &found != magic {
        return Err(Error::Magic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&found).into_owned(),
        });
    }
    let mut word = [0u8; 4];
    read_exact_or_corrupt(&mut reader, &mut word, "header")?;
    let got = u32::from_le_bytes(word);
    if got != version {
        return Err(Error::corrupt(format!(
            "unsupported format version {got}, expected {version}"
        )));
    }
    let mut len = [0u8; 8];
    read_exact_or_corrupt(&mut reader, &mut len, "header")?;
    let mlen = u64::from_le_bytes(len);
    if mlen > MAX_MANIFEST || header_len(0) + mlen > total {
        return Err(Error::corrupt(format!(
            "manifest length {mlen} exceeds file size {total}"
        )));
    }
    let mut json = vec![0u8; mlen as usize];
    read_exact_or_corrupt(&mut reader, &mut json, "manifest")?;
    let raw_manifest: serde_json::Value = serde_json::from_slice(&json)
        .map_err(|e| Error::corrupt(format!("manifest is not valid JSON: {e}")))?;
    check(&raw_manifest)?;
    let manifest = serde_json::from_value(raw_manifest)
        .map_err(|e| Error::corrupt(format!("manifest: {e}")))?;
    let payload_start = header_len(mlen as usize);
    Ok(Opened {
        manifest,
        payload_start,
        payload_len: total - payload_start,
        reader,
    })
}

impl<M> Opened<M> {
    pub fn read_payload(&mut self, buf: &mut [u8]) -> Result<()> {
        read_exact_or_corrupt(&mut self.reader, buf, "payload")
    }
}

/// Writes to `path.tmp` and renames into place on [`AtomicFile::commit`].
pub(crate) struct AtomicFile {
    tmp: std::path::PathBuf,
    dest: std::path::PathBuf,
    pub writer: BufWriter<File>,
}

impl AtomicFile {
    pub fn create(path: &Path) -> Result<Self> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        let writer = BufWriter::new(File::create(&tmp)?);
        Ok(AtomicFile {
            tmp,
            dest: path.to_path_buf(),
            writer,
        })
    }

    pub fn commit(self) -> Result<()> {
        let file = self
            .writer
            .into_inner()
            .map_err(|e| Error::Io(e.into_error()))?;
        file.sync_all()?;
        drop(file);
        std::fs::rename(&self.tmp, &self.dest)?;
        Ok(())
    }
}
