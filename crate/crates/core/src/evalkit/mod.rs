//! Overall and per-band top-1 accuracy, concept retrieval and the ablation
//! table.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasynth::{Band, ShotBands};
use crate::encoders::Encoders;
use crate::error::{Error, Result};
use crate::numcore::ops::normalize_rows_raw;
use crate::numcore::Tensor;

/// Correct and total sample counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    /// `None` for an empty tally.
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }

    fn add(&mut self, hit: bool) {
        self.total += 1;
        self.correct += usize::from(hit);
    }
}

/// Accuracies are `None` when the band (or class) has no test samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: f64,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    pub per_class: Vec<Option<f64>>,
    pub tallies: BandTallies,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BandTallies {
    pub overall: Tally,
    pub many: Tally,
    pub medium: Tally,
    pub few: Tally,
}

impl EvalReport {
    pub fn band(&self, band: Band) -> Option<f64> {
        match band {
            Band::Many => self.many,
            Band::Medium => self.medium,
            Band::Few => self.few,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

/// Micro-averaged top-1 accuracy overall and within each shot band.
pub fn evaluate(predictions: &[usize], labels: &[usize], bands: &ShotBands) -> Result<EvalReport> {
    if predictions.len() != labels.len() {
        return Err(Error::shape("evaluate", &[predictions.len()], &[labels.len()]));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("no samples to evaluate".into()));
    }
    let classes = bands.bands.len();
    let mut t = BandTallies::default();
    let mut per_class = vec![Tally::default(); classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        let band = bands.band(y).ok_or(Error::LabelOutOfRange { label: y, classes })?;
        let hit = p == y;
        t.overall.add(hit);
        per_class[y].add(hit);
        match band {
            Band::Many => t.many.add(hit),
            Band::Medium => t.medium.add(hit),
            Band::Few => t.few.add(hit),
        }
    }
    Ok(EvalReport {
        overall: t.overall.accuracy().expect("non-empty"),
        many: t.many.accuracy(),
        medium: t.medium.accuracy(),
        few: t.few.accuracy(),
        per_class: per_class.iter().map(Tally::accuracy).collect(),
        tallies: t,
        fingerprint: String::new(),
    })
}

/// Mean of the per-class accuracies over classes that have test samples.
pub fn class_macro(report: &EvalReport) -> f64 {
    let accs: Vec<f64> = report.per_class.iter().flatten().copied().collect();
    accs.iter().sum::<f64>() / accs.len() as f64
}

/// The `k` images closest to a sentence by cosine, best first, smaller id on
/// ties.
pub fn concept_retrieval(query: &[u32], images: &Tensor, encoders: &Encoders, k: usize) -> Result<Vec<usize>> {
    let n = images.dims2()?.0;
    if k > n {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds the {n} images")));
    }
    let t = encoders.linguistic.encode_texts(&[query.to_vec()])?;
    let e = encoders.visual.encode_images(images)?;
    let d = encoders.dim();
    let tn = normalize_rows_raw(t.data(), d, 0)?;
    let en = normalize_rows_raw(e.data(), d, 0)?;
    let sims: Vec<f64> = en
        .chunks_exact(d)
        .map(|r| r.iter().zip(&tn).map(|(a, b)| a * b).sum())
        .collect();
    Ok(rank_desc(&sims, k))
}

/// Indices of the `k` largest values, descending, smaller index on ties.
pub fn rank_desc(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x))
}

/// Plain-text table with one row per configuration, in input order, and
/// columns overall / many / medium / few (percent, two decimals).
pub fn ablation_report(entries: &[(String, EvalReport)]) -> Result<String> {
    if entries.is_empty() {
        return Err(Error::InvalidArgument("ablation report needs at least one row".into()));
    }
    let header = ["config", "overall", "many", "medium", "few"];
    let rows: Vec<[String; 5]> = entries
        .iter()
        .map(|(label, r)| {
            [
                label.clone(),
                pct(Some(r.overall)),
                pct(r.many),
                pct(r.medium),
                pct(r.few),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[&str]| {
        let mut s = format!("{:<w$}", cells[0], w = widths[0]);
        for (cell, w) in cells[1..].iter().zip(&widths[1..]) {
            write!(s, "  {cell:>w$}").expect("string write");
        }
        out.push_str(s.trim_end());
        out.push('\n');
    };
    line(&mut out, &header);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    line(&mut out, &rule.iter().map(String::as_str).collect::<Vec<_>>());
    for row in &rows {
        line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
    }
    Ok(out)
}
