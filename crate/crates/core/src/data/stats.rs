//! Per-split counts of the three visibility classes.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::coco::Dataset;
use super::split::{Split, SplitAssignment};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisibilityRow {
    pub split: String,
    /// Counts of `v = 0, 1, 2`.
    pub counts: [u64; 3],
}

impl VisibilityRow {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Share of class `v` in percent; zero for an empty row.
    pub fn percent(&self, v: usize) -> f64 {
        let t = self.total();
        if t == 0 {
            0.0
        } else {
            100.0 * self.counts[v] as f64 / t as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisibilityStats {
    pub rows: Vec<VisibilityRow>,
}

/// Counts every keypoint by visibility, per split, or as a single `all` row.
pub fn visibility_stats(dataset: &Dataset, splits: Option<&SplitAssignment>) -> Result<VisibilityStats> {
    let mut rows: Vec<VisibilityRow> = match splits {
        Some(_) => Split::ALL.iter().map(|s| VisibilityRow { split: s.name().into(), counts: [0; 3] }).collect(),
        None => vec![VisibilityRow { split: "all".into(), counts: [0; 3] }],
    };
    for (idx, inst) in dataset.instances.iter().enumerate() {
        let row = match splits {
            None => 0,
            Some(a) => match a.get(inst.image_id) {
                Some(s) => Split::ALL.iter().position(|&x| x == s).unwrap_or(0),
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "instance {idx} (id {}, image {}) is not assigned to any split",
                        inst.id, inst.image_id
                    )))
                }
            },
        };
        for kp in &inst.keypoints {
            rows[row].counts[usize::from(kp.v.min(2))] += 1;
        }
    }
    Ok(VisibilityStats { rows })
}

/// `52965` → `"52,965"`.
pub fn thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// `count (xx.xx%)`.
pub fn count_with_percent(count: u64, percent: f64) -> String {
    format!("{} ({percent:.2}%)", thousands(count))
}

impl VisibilityStats {
    pub fn to_table(&self) -> String {
        let cells: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.split.clone(),
                    count_with_percent(r.counts[0], r.percent(0)),
                    count_with_percent(r.counts[1], r.percent(1)),
                    count_with_percent(r.counts[2], r.percent(2)),
                    thousands(r.total()),
                ]
            })
            .collect();
        let header = ["split", "invisible", "partially visible", "visible", "total"];
        let widths: Vec<usize> =
            (0..5).map(|c| cells.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0)).collect();
        let mut out = String::new();
        let line = |cols: [&str; 5], out: &mut String| {
            let _ = writeln!(
                out,
                "{:<w0$}  {:>w1$}  {:>w2$}  {:>w3$}  {:>w4$}",
                cols[0],
                cols[1],
                cols[2],
                cols[3],
                cols[4],
                w0 = widths[0],
                w1 = widths[1],
                w2 = widths[2],
                w3 = widths[3],
                w4 = widths[4]
            );
        };
        line(header, &mut out);
        for r in &cells {
            line([&r[0], &r[1], &r[2], &r[3], &r[4]], &mut out);
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
