//! Anchor file.
//!
//! ```text
//! # mode=anss
//! # m=64
//! # checkpoint=<64 hex chars>
//! class_id<TAB>rank<TAB>sentence_id<TAB>score
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::hashing::{from_hex, to_hex};

use super::{AnchorEntry, AnchorSet};

pub fn encode_anchors(set: &AnchorSet) -> String {
    let mut out = String::new();
    writeln!(out, "# mode={}", set.mode).expect("string write");
    writeln!(out, "# m={}", set.m).expect("string write");
    writeln!(out, "# checkpoint={}", to_hex(&set.checkpoint)).expect("string write");
    for (c, entries) in set.classes.iter().enumerate() {
        for (rank, e) in entries.iter().enumerate() {
            writeln!(out, "{c}\t{rank}\t{}\t{}", e.sentence_id, e.score).expect("string write");
        }
    }
    out
}

pub fn decode_anchors(text: &str) -> Result<AnchorSet> {
    let bad = |n: usize, what: &str| Error::format("anchor file", format!("line {n}: {what}"));
    let (mut mode, mut m, mut checkpoint) = (None, None, None);
    let mut classes: Vec<Vec<AnchorEntry>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if let Some(h) = line.strip_prefix('#') {
            let (k, v) = h.trim().split_once('=').ok_or_else(|| bad(n, "bad header"))?;
            match k.trim() {
                "mode" => mode = Some(v.trim().parse()?),
                "m" => m = Some(v.trim().parse::<usize>().map_err(|_| bad(n, "bad M"))?),
                "checkpoint" => {
                    checkpoint = Some(from_hex(v.trim()).ok_or_else(|| bad(n, "bad hash"))?)
                }
                _ => return Err(bad(n, "unknown header key")),
            }
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad(n, "expected 4 columns"));
        }
        let c: usize = f[0].parse().map_err(|_| bad(n, "bad class"))?;
        let rank: usize = f[1].parse().map_err(|_| bad(n, "bad rank"))?;
        let sentence_id = f[2].parse().map_err(|_| bad(n, "bad sentence id"))?;
        let score = f[3].parse().map_err(|_| bad(n, "bad score"))?;
        if c > classes.len() || (c + 1 < classes.len()) {
            return Err(bad(n, "classes out of order"));
        }
        if c == classes.len() {
            classes.push(Vec::new());
        }
        if rank != classes[c].len() {
            return Err(bad(n, "ranks out of order"));
        }
        classes[c].push(AnchorEntry { sentence_id, score });
    }
    let (Some(mode), Some(m), Some(checkpoint)) = (mode, m, checkpoint) else {
        return Err(Error::format("anchor file", "missing header"));
    };
    if classes.is_empty() || classes.iter().any(|c| c.len() != m) {
        return Err(Error::format("anchor file", format!("every class needs exactly {m} rows")));
    }
    Ok(AnchorSet {
        mode,
        m,
        checkpoint,
        classes,
    })
}

pub fn write_anchors(set: &AnchorSet, path: &Path) -> Result<()> {
    fs::write(path, encode_anchors(set))?;
    Ok(())
}

pub fn read_anchors(path: &Path) -> Result<AnchorSet> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
    decode_anchors(&text)
}
