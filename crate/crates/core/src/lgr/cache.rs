//! Precomputed anchor text embeddings.
//!
//! ```text
//! magic "VLAE" | version u32 | C u32 | M u32 | D u32 | checkpoint hash 32 bytes
//! | C*M*D x f64
//! ```

use std::fs;
use std::path::Path;

use crate::anss::AnchorSet;
use crate::datasynth::io::Reader;
use crate::datasynth::ClassCorpus;
use crate::encoders::LinguisticEncoder;
use crate::error::{Error, Result};
use crate::hashing::Hash32;
use crate::numcore::Tensor;

pub const CACHE_MAGIC: &[u8; 4] = b"VLAE";
pub const CACHE_VERSION: u32 = 1;
pub const CACHE_HEADER_BYTES: usize = 4 + 4 + 3 * 4 + 32;

/// `C x M x D` anchor embeddings from the frozen linguistic encoder, tagged
/// with the hash of the checkpoint that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorEmbeddings {
    pub embeddings: Tensor,
    pub checkpoint: Hash32,
}

impl AnchorEmbeddings {
    pub fn new(embeddings: Tensor, checkpoint: Hash32) -> Result<Self> {
        if embeddings.rank() != 3 {
            return Err(Error::shape("anchor embeddings", embeddings.shape(), &[0, 0, 0]));
        }
        Ok(AnchorEmbeddings {
            embeddings,
            checkpoint,
        })
    }

    /// Encodes the anchors' sentences once.
    pub fn compute(
        anchors: &AnchorSet,
        corpus: &ClassCorpus,
        linguistic: &LinguisticEncoder,
        checkpoint: Hash32,
    ) -> Result<Self> {
        let toks = anchors.tokens(corpus)?;
        let flat = linguistic.encode_texts(&toks)?;
        let (c, m, d) = (anchors.num_classes(), anchors.m, linguistic.dim());
        Self::new(flat.reshape(&[c, m, d])?, checkpoint)
    }

    pub fn classes(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn m(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[2]
    }

    /// Embedding of anchor `j` of class `c`.
    pub fn anchor(&self, c: usize, j: usize) -> &[f64] {
        let (m, d) = (self.m(), self.dim());
        &self.embeddings.data()[(c * m + j) * d..(c * m + j + 1) * d]
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CACHE_HEADER_BYTES + self.embeddings.len() * 8);
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        for d in self.embeddings.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.checkpoint);
        for v in self.embeddings.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, "anchor embedding cache");
        r.magic(CACHE_MAGIC)?;
        let version = r.u32()?;
        if version != CACHE_VERSION {
            return Err(Error::format(
                "anchor embedding cache",
                format!("unsupported version {version}"),
            ));
        }
        let (c, m, d) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let checkpoint: Hash32 = r.bytes(32)?.try_into().expect("32 bytes");
        let data = (0..c * m * d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Self::new(Tensor::new(&[c, m, d], data)?, checkpoint)
    }
}

pub fn write_cache(cache: &AnchorEmbeddings, path: &Path) -> Result<()> {
    fs::write(path, cache.encode())?;
    Ok(())
}

pub fn read_cache(path: &Path) -> Result<AnchorEmbeddings> {
    let buf = fs::read(path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
    AnchorEmbeddings::decode(&buf)
}
