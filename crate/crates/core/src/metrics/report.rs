//! Report rows and their CSV form.
//!
//! ```text
//! variant,order,fold,au,f1
//! full,"F(alpha,beta)",1,1,87.50
//! full,"F(alpha,beta)",1,avg,80.12
//! ```
//!
//! `au` is a 1-based AU index or `avg`; `fold` is a 1-based fold index or
//! `all` for rows aggregated over folds. F1 values carry two decimals.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

use super::f1::F1Scores;

pub const CSV_HEADER: [&str; 5] = ["variant", "order", "fold", "au", "f1"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum FoldId {
    Index(usize),
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum AuId {
    Index(usize),
    Avg,
}

impl fmt::Display for FoldId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FoldId::Index(i) => write!(f, "{i}"),
            FoldId::All => f.write_str("all"),
        }
    }
}

impl fmt::Display for AuId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AuId::Index(i) => write!(f, "{i}"),
            AuId::Avg => f.write_str("avg"),
        }
    }
}

fn positive(field: &str) -> Option<usize> {
    field.parse::<usize>().ok().filter(|&v| v >= 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub variant: String,
    pub order: String,
    pub fold: FoldId,
    pub au: AuId,
    pub f1: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
}

impl MetricsReport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends one row per AU followed by the `avg` row.
    pub fn push_scores(&mut self, variant: &str, order: &str, fold: FoldId, scores: &F1Scores) {
        let row = |au, f1| ReportRow {
            variant: variant.to_string(),
            order: order.to_string(),
            fold,
            au,
            f1,
        };
        for (k, &f1) in scores.per_au.iter().enumerate() {
            self.rows.push(row(AuId::Index(k + 1), f1));
        }
        self.rows.push(row(AuId::Avg, scores.avg));
    }

    pub fn extend(&mut self, other: MetricsReport) {
        self.rows.extend(other.rows);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// The `avg` value of `(variant, order, fold)`.
    pub fn avg(&self, variant: &str, order: &str, fold: FoldId) -> Option<f64> {
        self.find(variant, order, fold, AuId::Avg)
    }

    pub fn find(&self, variant: &str, order: &str, fold: FoldId, au: AuId) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.order == order && r.fold == fold && r.au == au)
            .map(|r| r.f1)
    }

    /// Distinct `(variant, order)` pairs in first-appearance order.
    pub fn groups(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        for r in &self.rows {
            if !out.iter().any(|(v, o)| *v == r.variant && *o == r.order) {
                out.push((r.variant.clone(), r.order.clone()));
            }
        }
        out
    }

    /// Every `(variant, order, fold)` group has exactly one `avg` row, and
    /// it is within `tol` of the mean of the group's per-AU rows.
    pub fn check_consistency(&self, tol: f64) -> Result<()> {
        let mut keys: Vec<(&str, &str, FoldId)> = self
            .rows
            .iter()
            .map(|r| (r.variant.as_str(), r.order.as_str(), r.fold))
            .collect();
        keys.sort();
        keys.dedup();
        for (v, o, f) in keys {
            let group: Vec<&ReportRow> = self
                .rows
                .iter()
                .filter(|r| r.variant == v && r.order == o && r.fold == f)
                .collect();
            let avgs: Vec<f64> = group
                .iter()
                .filter(|r| r.au == AuId::Avg)
                .map(|r| r.f1)
                .collect();
            let per: Vec<f64> = group
                .iter()
                .filter(|r| r.au != AuId::Avg)
                .map(|r| r.f1)
                .collect();
            let [avg] = avgs[..] else {
                return Err(Error::Format(format!(
                    "{v}/{o}/fold {f}: {} avg rows, expected 1",
                    avgs.len()
                )));
            };
            if per.is_empty() {
                return Err(Error::Format(format!("{v}/{o}/fold {f}: no per-AU rows")));
            }
            let mean = per.iter().sum::<f64>() / per.len() as f64;
            if (mean - avg).abs() > tol {
                return Err(Error::Format(format!(
                    "{v}/{o}/fold {f}: avg {avg} differs from per-AU mean {mean}"
                )));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(CSV_HEADER).expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.variant.clone(),
                r.order.clone(),
                r.fold.to_string(),
                r.au.to_string(),
                format!("{:.2}", r.f1),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("UTF-8 fields")
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let header = rd
            .headers()
            .map_err(|e| Error::Format(format!("report header: {e}")))?;
        if header.iter().ne(CSV_HEADER) {
            return Err(Error::Format(format!(
                "report header must be {}, got {}",
                CSV_HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut rows = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Format(format!("report line {line}: {e}")))?;
            let bad = |what: &str| Error::Format(format!("report line {line}: bad {what}"));
            let fold = match &rec[2] {
                "all" => FoldId::All,
                s => FoldId::Index(positive(s).ok_or_else(|| bad("fold"))?),
            };
            let au = match &rec[3] {
                "avg" => AuId::Avg,
                s => AuId::Index(positive(s).ok_or_else(|| bad("au"))?),
            };
            let f1: f64 = rec[4].parse().map_err(|_| bad("f1"))?;
            if !(0.0..=100.0).contains(&f1) {
                return Err(bad("f1 (outside [0, 100])"));
            }
            if rec[0].is_empty() {
                return Err(bad("variant"));
            }
            rows.push(ReportRow {
                variant: rec[0].to_string(),
                order: rec[1].to_string(),
                fold,
                au,
                f1,
            });
        }
        Ok(MetricsReport { rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MetricsReport {
        let mut r = MetricsReport::new();
        r.push_scores(
            "full",
            "F(a,b)",
            FoldId::Index(1),
            &F1Scores::from_per_au(vec![50.0, 75.5, 100.0]),
        );
        r.push_scores(
            "single_a",
            "a",
            FoldId::All,
            &F1Scores::from_per_au(vec![0.0, 12.25, 33.0]),
        );
        r
    }

    #[test]
    fn csv_layout() {
        let text = sample().to_csv();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("variant,order,fold,au,f1"));
        assert_eq!(lines.next(), Some("full,\"F(a,b)\",1,1,50.00"));
        assert!(text.contains("full,\"F(a,b)\",1,avg,75.17\n"));
        assert!(text.contains("single_a,a,all,avg,15.08\n"));
        assert!(!text.contains('\r'));
    }

    #[test]
    fn round_trip_at_two_decimals() {
        let r = sample();
        let back = MetricsReport::from_csv(&r.to_csv()).unwrap();
        assert_eq!(back.len(), r.len());
        for (a, b) in r.rows.iter().zip(&back.rows) {
            assert_eq!(
                (&a.variant, &a.order, a.fold, a.au),
                (&b.variant, &b.order, b.fold, b.au)
            );
            assert!((a.f1 - b.f1).abs() <= 0.005 + 1e-12);
        }
        assert_eq!(MetricsReport::from_csv(&back.to_csv()).unwrap(), back);
        back.check_consistency(0.01).unwrap();
    }

    #[test]
    fn consistency_checks() {
        let r = sample();
        r.check_consistency(1e-9).unwrap();
        let mut broken = r.clone();
        broken
            .rows
            .retain(|row| !(row.au == AuId::Avg && row.fold == FoldId::All));
        assert!(broken.check_consistency(1e-9).is_err());
        let mut skewed = r;
        skewed.rows[0].f1 = 90.0;
        assert!(skewed.check_consistency(1e-9).is_err());
    }

    #[test]
    fn rejects_malformed() {
        for bad in [
            "variant,order,fold,au\n",
            "variant,order,fold,au,f1\nfull,x,0,1,50\n",
            "variant,order,fold,au,f1\nfull,x,1,avgx,50\n",
            "variant,order,fold,au,f1\nfull,x,1,1,150\n",
            "variant,order,fold,au,f1\nfull,x,1,1,nan\n",
            "variant,order,fold,au,f1\nfull,x,1,1\n",
        ] {
            assert!(MetricsReport::from_csv(bad).is_err(), "{bad:?}");
        }
    }
}
