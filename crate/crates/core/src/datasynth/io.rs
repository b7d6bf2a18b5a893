//! On-disk formats for datasets and corpora.
//!
//! Dataset (`VLLT`, little-endian):
//!
//! ```text
//! magic "VLLT" | version u32 | C u32 | d_img u32 | counts C x u32
//! | train rows sum(counts) x d_img x f32
//! | test counts C x u32 | test rows sum(test counts) x d_img x f32
//! ```
//!
//! Rows are class-contiguous, so labels are implied by the counts.
//!
//! Corpus: one UTF-8 line per sentence, `class_id<TAB>source<TAB>tokens`,
//! tokens space-separated. A sentence's id is its line index.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

use super::corpus::{ClassCorpus, Sentence};
use super::LongTailDataset;

pub const DATASET_MAGIC: &[u8; 4] = b"VLLT";
pub const DATASET_VERSION: u32 = 1;

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'static str) -> Self {
        Reader { buf, pos: 0, what }
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.what, "unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.bytes(4)? != magic {
            return Err(Error::format(self.what, "bad magic"));
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(self.what, "trailing bytes"));
        }
        Ok(())
    }
}

fn push_rows(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

pub fn encode_dataset(ds: &LongTailDataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.classes as u32).to_le_bytes());
    out.extend_from_slice(&(ds.d_img as u32).to_le_bytes());
    for &c in &ds.counts {
        out.extend_from_slice(&(c as u32).to_le_bytes());
    }
    push_rows(&mut out, &ds.train);
    for &c in &ds.test_counts {
        out.extend_from_slice(&(c as u32).to_le_bytes());
    }
    push_rows(&mut out, &ds.test);
    out
}

fn read_rows(r: &mut Reader, counts: &[usize], d: usize) -> Result<(Tensor, Vec<usize>)> {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return Err(Error::format("dataset", "empty split"));
    }
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        data.push(r.f32()? as f64);
    }
    let labels = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &k)| std::iter::repeat_n(c, k))
        .collect();
    Ok((Tensor::new(&[n, d], data)?, labels))
}

pub fn decode_dataset(buf: &[u8]) -> Result<LongTailDataset> {
    let mut r = Reader::new(buf, "dataset");
    r.magic(DATASET_MAGIC)?;
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::format("dataset", format!("unsupported version {version}")));
    }
    let classes = r.u32()? as usize;
    let d_img = r.u32()? as usize;
    if classes == 0 || d_img == 0 {
        return Err(Error::format("dataset", "zero classes or dimension"));
    }
    let counts = (0..classes)
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let (train, train_labels) = read_rows(&mut r, &counts, d_img)?;
    let test_counts = (0..classes)
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let (test, test_labels) = read_rows(&mut r, &test_counts, d_img)?;
    r.finish()?;
    Ok(LongTailDataset {
        classes,
        d_img,
        counts,
        train,
        train_labels,
        test_counts,
        test,
        test_labels,
        alpha: None,
    })
}

pub fn write_dataset(ds: &LongTailDataset, path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(ds))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<LongTailDataset> {
    let buf = fs::read(path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
    decode_dataset(&buf)
}

pub fn encode_corpus(corpus: &ClassCorpus) -> String {
    let mut out = String::new();
    let mut sentences: Vec<(usize, &Sentence)> = corpus
        .classes
        .iter()
        .enumerate()
        .flat_map(|(c, ss)| ss.iter().map(move |s| (c, s)))
        .collect();
    sentences.sort_by_key(|(_, s)| s.id);
    for (c, s) in sentences {
        let toks: Vec<String> = s.tokens.iter().map(u32::to_string).collect();
        writeln!(out, "{c}\t{}\t{}", s.source, toks.join(" ")).expect("string write");
    }
    out
}

/// Parses a corpus. Sentence ids are assigned from line order.
pub fn decode_corpus(text: &str, max_tokens: usize) -> Result<ClassCorpus> {
    let mut classes: Vec<Vec<Sentence>> = Vec::new();
    for (id, line) in text.lines().enumerate() {
        let mut cols = line.split('\t');
        let (Some(c), Some(src), Some(toks), None) =
            (cols.next(), cols.next(), cols.next(), cols.next())
        else {
            return Err(Error::format("corpus", format!("line {}: expected 3 columns", id + 1)));
        };
        let c: usize = c
            .parse()
            .map_err(|_| Error::format("corpus", format!("line {}: bad class id", id + 1)))?;
        let tokens = toks
            .split(' ')
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<u32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::format("corpus", format!("line {}: bad token", id + 1)))?;
        if classes.len() <= c {
            classes.resize_with(c + 1, Vec::new);
        }
        classes[c].push(Sentence {
            id,
            tokens,
            source: src.parse()?,
        });
    }
    ClassCorpus::new(classes, max_tokens)
}

pub fn write_corpus(corpus: &ClassCorpus, path: &Path) -> Result<()> {
    fs::write(path, encode_corpus(corpus))?;
    Ok(())
}

pub fn read_corpus(path: &Path, max_tokens: usize) -> Result<ClassCorpus> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
    decode_corpus(&text, max_tokens)
}
