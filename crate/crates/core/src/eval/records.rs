//! Prediction CSVs and report files.

use std::fmt::Write as _;
use std::path::Path;

use super::metrics::{EvalReport, F1_AVERAGE_CLASSES};
use crate::data::store::{csv_rows, parse_field};
use crate::data::PatchOrigin;
use crate::error::{Error, Result};
use crate::kv::KvDoc;
use crate::labels::ClassLabel;

pub const REPORT_TEXT: &str = "report.txt";
pub const REPORT_KV: &str = "report.kv";
pub const ROC_CSV: &str = "roc.csv";
pub const ROC_HEADER: &str = "class,threshold,fpr,tpr";

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    /// Row of the patch store the prediction belongs to.
    pub index: usize,
    pub origin: PatchOrigin,
    pub predicted: ClassLabel,
    /// `ClassLabel::ALL` order.
    pub scores: [f64; 5],
}

fn prediction_header() -> String {
    let mut h = "index,slice_id,cell_row,cell_col,predicted".to_string();
    for c in ClassLabel::ALL {
        let _ = write!(h, ",score_{}", c.short());
    }
    h
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut out = prediction_header();
    out.push('\n');
    for r in records {
        let o = &r.origin;
        let _ = write!(out, "{},{},{},{},{}", r.index, o.slice_id, o.cell_row, o.cell_col, r.predicted.short());
        for s in r.scores {
            let _ = write!(out, ",{s}");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header = prediction_header();
    let rows: Vec<_> = csv_rows(&text, &header, path)?.collect();
    rows.into_iter()
        .map(|(line, f)| {
            let mut scores = [0.0; 5];
            for (k, s) in scores.iter_mut().enumerate() {
                *s = parse_field(f[5 + k], "score", line, path)?;
            }
            Ok(PredictionRecord {
                index: parse_field(f[0], "index", line, path)?,
                origin: PatchOrigin {
                    slice_id: f[1].to_string(),
                    cell_row: parse_field(f[2], "cell row", line, path)?,
                    cell_col: parse_field(f[3], "cell column", line, path)?,
                },
                predicted: parse_field(f[4], "label", line, path)?,
                scores,
            })
        })
        .collect()
}

pub fn report_kv(report: &EvalReport) -> KvDoc {
    let mut doc = KvDoc::new();
    doc.set("total", report.total());
    doc.set("tpr", report.tpr);
    doc.set("tnr", report.tnr);
    doc.set("accuracy", report.accuracy);
    doc.set("class_accuracy", report.class_accuracy);
    doc.set("f1_class_avg", report.f1_class_avg);
    for (t, row) in ClassLabel::ALL.iter().zip(&report.confusion) {
        for (p, n) in ClassLabel::ALL.iter().zip(row) {
            doc.set(format!("confusion.{}.{}", t.short(), p.short()), n);
        }
    }
    for c in ClassLabel::ALL {
        let m = report.metrics(c);
        let s = c.short();
        doc.set(format!("precision.{s}"), m.precision);
        doc.set(format!("recall.{s}"), m.recall);
        doc.set(format!("f1.{s}"), m.f1);
        doc.set(format!("support.{s}"), m.support);
    }
    for (c, roc) in &report.roc {
        doc.set(format!("roc_area.{}", c.short()), roc.area);
    }
    doc
}

pub fn report_text(report: &EvalReport) -> String {
    let mut t = String::new();
    let _ = writeln!(t, "patches: {}", report.total());
    let _ = writeln!(t, "\nconfusion (rows: truth, columns: prediction)");
    let _ = write!(t, "{:>6}", "");
    for c in ClassLabel::ALL {
        let _ = write!(t, "{:>8}", c.short());
    }
    t.push('\n');
    for (c, row) in ClassLabel::ALL.iter().zip(&report.confusion) {
        let _ = write!(t, "{:>6}", c.short());
        for n in row {
            let _ = write!(t, "{n:>8}");
        }
        t.push('\n');
    }
    let _ = writeln!(t, "\n{:<16}{:>10}{:>10}{:>10}{:>10}{:>10}", "class", "precision", "recall", "f1", "support", "roc_auc");
    for c in ClassLabel::ALL {
        let m = report.metrics(c);
        let auc = report.roc.get(&c).map_or("-".to_string(), |r| format!("{:.4}", r.area));
        let _ = writeln!(
            t,
            "{:<16}{:>10.4}{:>10.4}{:>10.4}{:>10}{:>10}",
            c.name(),
            m.precision,
            m.recall,
            m.f1,
            m.support,
            auc
        );
    }
    let avg: Vec<&str> = F1_AVERAGE_CLASSES.iter().map(|c| c.short()).collect();
    let _ = writeln!(t, "\nhealthy vs disease: TPR {:.4}  TNR {:.4}  accuracy {:.4}", report.tpr, report.tnr, report.accuracy);
    let _ = writeln!(t, "exact-class accuracy: {:.4}", report.class_accuracy);
    let _ = writeln!(t, "class-averaged F1 ({}): {:.4}", avg.join(", "), report.f1_class_avg);
    t
}

pub fn roc_csv(report: &EvalReport) -> String {
    let mut out = format!("{ROC_HEADER}\n");
    for (c, roc) in &report.roc {
        for p in &roc.points {
            let _ = writeln!(out, "{},{},{},{}", c.short(), p.threshold, p.fpr, p.tpr);
        }
    }
    out
}

/// Writes `report.txt`, `report.kv` and `roc.csv` into `dir`.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write(REPORT_TEXT, report_text(report))?;
    report_kv(report).save(dir.join(REPORT_KV))?;
    write(ROC_CSV, roc_csv(report))
}
