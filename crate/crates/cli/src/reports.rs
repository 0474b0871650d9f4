//! On-disk evaluation results shared by `eval` and `report`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tritower::evaluation::EvalReport;
use tritower::towers::HeadVariant;

use crate::failure::{CliResult, Failure};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const PREDICTIONS_CSV: &str = "predictions.csv";
pub const PREDICTIONS_ALPHA_CSV: &str = "predictions_alpha.csv";

/// Metric row of one evaluated view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub alpha: Option<f64>,
    pub recall1_img2txt: f64,
    pub recall1_txt2img: f64,
    pub zeroshot_acc: f64,
    pub fewshot_acc: f64,
    pub nll: f64,
    pub brier: f64,
    pub ece: f64,
    pub auroc: Option<f64>,
    pub aupr: Option<f64>,
    pub fpr95: Option<f64>,
}

impl From<&EvalReport> for ReportRow {
    fn from(r: &EvalReport) -> Self {
        Self {
            alpha: r.alpha,
            recall1_img2txt: r.recall1_img2txt,
            recall1_txt2img: r.recall1_txt2img,
            zeroshot_acc: r.zeroshot_acc,
            fewshot_acc: r.fewshot_acc,
            nll: r.nll,
            brier: r.brier,
            ece: r.ece,
            auroc: r.auroc,
            aupr: r.aupr,
            fpr95: r.fpr95,
        }
    }
}

impl ReportRow {
    /// Values in [`EvalReport::CSV_HEADER`] order, empty where absent.
    pub fn csv_fields(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.recall1_img2txt,
            self.recall1_txt2img,
            self.zeroshot_acc,
            self.fewshot_acc,
            self.nll,
            self.brier,
            self.ece,
            opt(self.auroc),
            opt(self.aupr),
            opt(self.fpr95)
        )
    }
}

/// Contents of `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    /// `baseline`, `lit` or `3t`.
    pub mode: String,
    pub head_variant: HeadVariant,
    pub ece_bins: usize,
    pub rows: Vec<ReportRow>,
}

/// `report.csv`: the ten metric columns, preceded by `alpha` for a sweep.
pub fn report_csv(rows: &[ReportRow], sweep: bool) -> String {
    let mut s = String::new();
    if sweep {
        s.push_str("alpha,");
    }
    s.push_str(EvalReport::CSV_HEADER);
    s.push('\n');
    for r in rows {
        if sweep {
            write!(s, "{},", r.alpha.map(|a| a.to_string()).unwrap_or_default()).expect("string write");
        }
        s.push_str(&r.csv_fields());
        s.push('\n');
    }
    s
}

/// `alpha,id,y,pred` lines for every point of a sweep.
pub fn predictions_alpha_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from("alpha,id,y,pred\n");
    for r in reports {
        let a = r.alpha.map(|a| a.to_string()).unwrap_or_default();
        for ((id, y), p) in r.ids.iter().zip(&r.labels).zip(&r.predictions) {
            writeln!(s, "{a},{id},{y},{p}").expect("string write");
        }
    }
    s
}

#[derive(Debug, Deserialize)]
struct PredictionRecord {
    id: usize,
    y: usize,
    pred: usize,
}

/// Per-example zero-shot predictions of one run.
#[derive(Debug, Default, PartialEq)]
pub struct Predictions {
    pub ids: Vec<usize>,
    pub labels: Vec<usize>,
    pub preds: Vec<usize>,
}

pub fn read_predictions(path: &Path) -> CliResult<Predictions> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Failure::usage(format!("cannot read predictions {}: {e}", path.display())))?;
    let mut out = Predictions::default();
    for rec in reader.deserialize() {
        let rec: PredictionRecord =
            rec.map_err(|e| Failure::usage(format!("malformed predictions {}: {e}", path.display())))?;
        out.ids.push(rec.id);
        out.labels.push(rec.y);
        out.preds.push(rec.pred);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(alpha: Option<f64>) -> ReportRow {
        ReportRow {
            alpha,
            recall1_img2txt: 0.5,
            recall1_txt2img: 0.25,
            zeroshot_acc: 1.0,
            fewshot_acc: 0.0,
            nll: 2.0,
            brier: 0.125,
            ece: 0.0625,
            auroc: None,
            aupr: Some(0.75),
            fpr95: None,
        }
    }

    #[test]
    fn csv_layouts() {
        let plain = report_csv(&[row(None)], false);
        assert_eq!(
            plain,
            format!("{}\n0.5,0.25,1,0,2,0.125,0.0625,,0.75,\n", EvalReport::CSV_HEADER)
        );
        let sweep = report_csv(&[row(Some(0.0)), row(Some(0.5))], true);
        let lines: Vec<&str> = sweep.lines().collect();
        assert!(lines[0].starts_with("alpha,recall1_img2txt"));
        assert!(lines[1].starts_with("0,0.5,"));
        assert!(lines[2].starts_with("0.5,0.5,"));
    }

    #[test]
    fn predictions_parse() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        std::fs::write(&path, "id,y,pred\n4,1,1\n9,0,2\n").unwrap();
        let p = read_predictions(&path).unwrap();
        assert_eq!(p.ids, vec![4, 9]);
        assert_eq!(p.labels, vec![1, 0]);
        assert_eq!(p.preds, vec![1, 2]);
        std::fs::write(&path, "id,y,pred\n4,x,1\n").unwrap();
        assert_eq!(read_predictions(&path).unwrap_err().code, 2);
        assert_eq!(read_predictions(&dir.path().join("none.csv")).unwrap_err().code, 2);
    }
}
