//! Per-pair evaluation records and per-class reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Metrics of one (image, label) prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub image_id: String,
    pub label: String,
    /// Ground truth contains the class.
    pub present: bool,
    pub dsc: f64,
    pub iou: f64,
    /// Fraction of predicted foreground pixels.
    pub predicted_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub label: String,
    pub dsc: f64,
    pub iou: f64,
    pub pairs: usize,
}

/// Per-class means over images plus unweighted class averages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub classes: Vec<ClassScore>,
    pub average_dsc: f64,
    pub average_iou: f64,
    pub records: Vec<PairRecord>,
}

impl ClassReport {
    /// Aggregates `records` in `vocab` order.
    pub fn from_records(vocab: &[String], records: Vec<PairRecord>) -> Result<Self> {
        if vocab.is_empty() {
            return Err(Error::Config("empty class vocabulary".into()));
        }
        let mut classes = Vec::with_capacity(vocab.len());
        for label in vocab {
            let (mut d, mut i, mut n) = (0.0, 0.0, 0usize);
            for r in records.iter().filter(|r| &r.label == label) {
                d += r.dsc;
                i += r.iou;
                n += 1;
            }
            if n == 0 {
                return Err(Error::EmptyDataset);
            }
            classes.push(ClassScore {
                label: label.clone(),
                dsc: d / n as f64,
                iou: i / n as f64,
                pairs: n,
            });
        }
        let k = classes.len() as f64;
        let average_dsc = classes.iter().map(|c| c.dsc).sum::<f64>() / k;
        let average_iou = classes.iter().map(|c| c.iou).sum::<f64>() / k;
        Ok(Self {
            classes,
            average_dsc,
            average_iou,
            records,
        })
    }

    pub fn class(&self, label: &str) -> Option<&ClassScore> {
        self.classes.iter().find(|c| c.label == label)
    }

    /// Mean DSC over pairs whose ground truth contains the class.
    pub fn present_dsc(&self) -> Option<f64> {
        mean(self.records.iter().filter(|r| r.present).map(|r| r.dsc))
    }

    /// Largest predicted foreground fraction over absent-class pairs.
    pub fn max_blank_fraction(&self) -> Option<f64> {
        self.records
            .iter()
            .filter(|r| !r.present)
            .map(|r| r.predicted_fraction)
            .reduce(f64::max)
    }

    /// `label,dsc,iou` rows followed by an `average` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,dsc,iou\n");
        for c in &self.classes {
            let _ = writeln!(s, "{},{},{}", csv_field(&c.label), c.dsc, c.iou);
        }
        let _ = writeln!(s, "average,{},{}", self.average_dsc, self.average_iou);
        s
    }

    /// One row of `DSC[IoU]` cells, one column per class plus `Avg.`.
    pub fn to_table(&self) -> String {
        let cell = |d: f64, i: f64| format!("{d:.3}[{i:.3}]");
        let mut heads: Vec<String> = self.classes.iter().map(|c| c.label.clone()).collect();
        heads.push("Avg.".into());
        let mut cells: Vec<String> = self.classes.iter().map(|c| cell(c.dsc, c.iou)).collect();
        cells.push(cell(self.average_dsc, self.average_iou));
        let widths: Vec<usize> = heads
            .iter()
            .zip(&cells)
            .map(|(h, c)| h.chars().count().max(c.len()))
            .collect();
        let row = |xs: &[String]| {
            xs.iter()
                .zip(&widths)
                .map(|(x, &w)| format!("{x:<w$}"))
                .collect::<Vec<_>>()
                .join(" | ")
        };
        format!("{}\n{}\n", row(&heads), row(&cells))
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}
