//! Loss trace: one line per epoch, `epoch<TAB>step<TAB>L_ccl<TAB>L_dis<TAB>L_pre<TAB>tau`.
//!
//! `L_dis` is written as `-` when the distillation term was never evaluated.
//! Floats use Rust's shortest round-trip formatting.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    /// Global step count at the end of the epoch.
    pub step: usize,
    pub l_ccl: f64,
    pub l_dis: Option<f64>,
    pub l_pre: f64,
    pub tau: f64,
}

pub fn encode_trace(rows: &[TraceRow]) -> String {
    let mut out = String::new();
    for r in rows {
        let dis = r.l_dis.map_or_else(|| "-".to_string(), |v| v.to_string());
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.epoch, r.step, r.l_ccl, dis, r.l_pre, r.tau
        )
        .expect("string write");
    }
    out
}

pub fn decode_trace(text: &str) -> Result<Vec<TraceRow>> {
    let bad = |n: usize| Error::format("loss trace", format!("line {n}"));
    text.lines()
        .enumerate()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(bad(n + 1));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(n + 1));
            Ok(TraceRow {
                epoch: f[0].parse().map_err(|_| bad(n + 1))?,
                step: f[1].parse().map_err(|_| bad(n + 1))?,
                l_ccl: num(f[2])?,
                l_dis: if f[3] == "-" { None } else { Some(num(f[3])?) },
                l_pre: num(f[4])?,
                tau: num(f[5])?,
            })
        })
        .collect()
}

pub fn write_trace(rows: &[TraceRow], path: &Path) -> Result<()> {
    fs::write(path, encode_trace(rows))?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
    decode_trace(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let rows = vec![
            TraceRow { epoch: 0, step: 3, l_ccl: 1.25, l_dis: None, l_pre: 1.25, tau: 0.07 },
            TraceRow { epoch: 1, step: 6, l_ccl: 0.1, l_dis: Some(0.3), l_pre: 0.2, tau: 0.0712 },
        ];
        let text = encode_trace(&rows);
        assert!(text.lines().next().unwrap().contains("\t-\t"));
        assert_eq!(decode_trace(&text).unwrap(), rows);
        assert!(decode_trace("1\t2\t3\n").is_err());
    }
}
