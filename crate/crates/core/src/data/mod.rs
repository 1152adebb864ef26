//! Byte-level tokenization, window sampling with a held-out validation
//! tail, and the on-disk teacher activation datasets used for distillation.

mod activations;
mod synthetic;
mod windows;

pub use activations::{
    build_activation_dataset, build_activation_datasets, ActivationDataset, ActivationManifest,
    ActivationRecord, ActivationWriter, ACTIVATION_MAGIC, ACTIVATION_VERSION,
};
pub use synthetic::synthetic_corpus;
pub use windows::{sample_windows, Split, WindowSet};

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{self, AtomicFile};
use crate::{Error, Result};

pub const CORPUS_MAGIC: &[u8; 4] = b"HYTK";
pub const CORPUS_VERSION: u32 = 1;

/// Manifest of a saved token stream; the payload is `tokens` u16 LE values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub tokens: u64,
    pub digest: String,
    /// SHA-256 of the payload bytes.
    pub payload_sha256: String,
}

pub const BOS: u16 = 256;
pub const EOS: u16 = 257;
pub const VOCAB_SIZE: usize = 258;

/// Token stream of one or more documents, each wrapped in BOS/EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedCorpus {
    tokens: Vec<u16>,
    digest: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl TokenizedCorpus {
    pub fn from_documents<'a>(docs: impl IntoIterator<Item = &'a [u8]>) -> Self {
        let mut tokens = Vec::new();
        let mut h = Sha256::new();
        for doc in docs {
            h.update((doc.len() as u64).to_le_bytes());
            h.update(doc);
            tokens.push(BOS);
            tokens.extend(doc.iter().map(|&b| b as u16));
            tokens.push(EOS);
        }
        TokenizedCorpus {
            tokens,
            digest: hex::encode(h.finalize()),
        }
    }

    /// Concatenates the given text files, one document per file.
    pub fn from_files<P: AsRef<Path>>(paths: &[P]) -> Result<Self> {
        if paths.is_empty() {
            return Err(Error::Data("no corpus files given".into()));
        }
        let docs = paths
            .iter()
            .map(|p| {
                std::fs::read(p).map_err(|e| {
                    std::io::Error::new(e.kind(), format!("{}: {e}", p.as_ref().display()))
                })
            })
            .collect::<std::io::Result<Vec<_>>>()?;
        Ok(Self::from_documents(docs.iter().map(Vec::as_slice)))
    }

    /// Rebuilds a corpus from raw token ids, validating the range.
    pub fn from_tokens(tokens: Vec<u16>) -> Result<Self> {
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
            return Err(Error::Data(format!("token {t} out of range")));
        }
        let mut bytes = Vec::with_capacity(tokens.len() * 2);
        tokens
            .iter()
            .for_each(|t| bytes.extend_from_slice(&t.to_le_bytes()));
        Ok(TokenizedCorpus {
            digest: sha256_hex(&bytes),
            tokens,
        })
    }

    pub fn tokens(&self) -> &[u16] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    /// SHA-256 of the source documents.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn detokenize(&self) -> Vec<u8> {
        detokenize(&self.tokens)
    }

    fn payload(&self) -> Vec<u8> {
        self.tokens.iter().flat_map(|t| t.to_le_bytes()).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let payload = self.payload();
        let manifest = CorpusManifest {
            tokens: self.tokens.len() as u64,
            digest: self.digest.clone(),
            payload_sha256: sha256_hex(&payload),
        };
        let mut f = AtomicFile::create(path.as_ref())?;
        container::write_header(&mut f.writer, CORPUS_MAGIC, CORPUS_VERSION, &manifest)?;
        f.writer.write_all(&payload)?;
        f.commit()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut opened =
            container::open::<CorpusManifest>(path.as_ref(), CORPUS_MAGIC, CORPUS_VERSION, |_| {
                Ok(())
            })?;
        let m = opened.manifest.clone();
        if opened.payload_len != m.tokens * 2 {
            return Err(Error::corrupt(format!(
                "corpus payload is {} bytes, manifest says {} tokens",
                opened.payload_len, m.tokens
            )));
        }
        let mut payload = vec![0u8; opened.payload_len as usize];
        opened.read_payload(&mut payload)?;
        if sha256_hex(&payload) != m.payload_sha256 {
            return Err(Error::corrupt("corpus payload checksum mismatch"));
        }
        let tokens: Vec<u16> = payload
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
            return Err(Error::corrupt(format!("token {t} out of range")));
        }
        Ok(TokenizedCorpus {
            tokens,
            digest: m.digest,
        })
    }
}

/// `[BOS, bytes.., EOS]`.
pub fn tokenize(text: &[u8]) -> TokenizedCorpus {
    TokenizedCorpus::from_documents([text])
}

/// Bytes of every non-special token, in order.
pub fn detokenize(tokens: &[u16]) -> Vec<u8> {
    tokens
        .iter()
        .filter(|&&t| t < 256)
        .map(|&t| t as u8)
        .collect()
}
