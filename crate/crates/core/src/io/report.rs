//! JSON reports and reliability-diagram emitters. Files carry raw fractions
//! next to the presentation scaling (percent, AURC ×10³).

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::GeometryDiagnostics;
use crate::error::{Error, Result};
use crate::metrics::{BinStat, CalibrationReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawMetrics {
    pub accuracy: f64,
    pub ece: f64,
    pub aece: f64,
    pub mce: f64,
    pub aurc: f64,
    pub mean_confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledMetrics {
    pub accuracy_pct: f64,
    pub ece_pct: f64,
    pub aece_pct: f64,
    pub mce_pct: f64,
    pub aurc_x1e3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub method: Option<String>,
    pub num_samples: usize,
    pub num_bins: usize,
    pub raw: RawMetrics,
    pub scaled: ScaledMetrics,
    pub equal_width_bins: Vec<BinStat>,
    pub adaptive_bins: Vec<BinStat>,
    pub diagnostics: Option<GeometryDiagnostics>,
    /// Free-form run settings (hyperparameters, bundle path, ...).
    pub settings: Option<serde_json::Value>,
}

impl ReportFile {
    pub fn new(report: &CalibrationReport, method: Option<String>, settings: Option<serde_json::Value>) -> Self {
        Self {
            method,
            num_samples: report.num_samples,
            num_bins: report.num_bins,
            raw: RawMetrics {
                accuracy: report.accuracy,
                ece: report.ece,
                aece: report.aece,
                mce: report.mce,
                aurc: report.aurc,
                mean_confidence: report.mean_confidence,
            },
            scaled: scaled(report),
            equal_width_bins: report.equal_width_bins.clone(),
            adaptive_bins: report.adaptive_bins.clone(),
            diagnostics: report.diagnostics.clone(),
            settings,
        }
    }
}

pub fn scaled(report: &CalibrationReport) -> ScaledMetrics {
    ScaledMetrics {
        accuracy_pct: 100.0 * report.accuracy,
        ece_pct: 100.0 * report.ece,
        aece_pct: 100.0 * report.aece,
        mce_pct: 100.0 * report.mce,
        aurc_x1e3: 1000.0 * report.aurc,
    }
}

/// `Acc 44.33 | ECE 8.09 | AECE 8.01 | MCE 20.11 | AURC 184.28`
pub fn summary_line(report: &CalibrationReport) -> String {
    let s = scaled(report);
    format!(
        "Acc {:.2} | ECE {:.2} | AECE {:.2} | MCE {:.2} | AURC {:.2}",
        s.accuracy_pct, s.ece_pct, s.aece_pct, s.mce_pct, s.aurc_x1e3
    )
}

pub fn write_report(report: &ReportFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_report(path: impl AsRef<Path>) -> Result<ReportFile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.16e}")).unwrap_or_default()
}

pub fn reliability_csv_string(bins: &[BinStat]) -> String {
    let mut out = String::from("bin_lower,bin_upper,count,mean_conf,mean_acc,gap\n");
    for b in bins {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            b.lower,
            b.upper,
            b.count,
            opt(b.mean_confidence),
            opt(b.mean_accuracy),
            opt(b.gap())
        )
        .unwrap();
    }
    out
}

pub fn reliability_csv(bins: &[BinStat], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, reliability_csv_string(bins)).map_err(|e| Error::io(path, e))
}

/// Confidence histogram on top, reliability bars below, identity diagonal
/// and the per-bin gap shaded.
pub fn reliability_svg_string(bins: &[BinStat], title: &str) -> String {
    const W: f64 = 360.0;
    const LEFT: f64 = 50.0;
    const PLOT: f64 = 280.0;
    const HIST_TOP: f64 = 40.0;
    const HIST_H: f64 = 110.0;
    const REL_TOP: f64 = 190.0;
    let total: usize = bins.iter().map(|b| b.count).sum::<usize>().max(1);
    let max_frac = bins
        .iter()
        .map(|b| b.count as f64 / total as f64)
        .fold(0.0, f64::max)
        .max(1e-12);
    let x = |v: f64| LEFT + v * PLOT;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{h}" viewBox="0 0 {W} {h}" font-family="sans-serif" font-size="11">"#,
        h = REL_TOP + PLOT + 40.0
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
        x(0.5),
        xml_escape(title)
    )
    .unwrap();

    // Histogram.
    writeln!(s, r#"<g id="histogram">"#).unwrap();
    for b in bins {
        let frac = b.count as f64 / total as f64;
        let h = HIST_H * frac / max_frac;
        writeln!(
            s,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4c72b0" stroke="white"/>"##,
            x(b.lower),
            HIST_TOP + HIST_H - h,
            (b.upper - b.lower) * PLOT,
            h
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="12" y="{}" transform="rotate(-90 12 {})" text-anchor="middle">% of samples</text>"#,
        HIST_TOP + HIST_H / 2.0,
        HIST_TOP + HIST_H / 2.0
    )
    .unwrap();
    writeln!(s, "</g>").unwrap();

    // Reliability diagram.
    let y = |v: f64| REL_TOP + PLOT - v * PLOT;
    writeln!(s, r#"<g id="reliability">"#).unwrap();
    writeln!(
        s,
        r#"<rect x="{LEFT}" y="{REL_TOP}" width="{PLOT}" height="{PLOT}" fill="none" stroke="black"/>"#
    )
    .unwrap();
    for b in bins {
        let (Some(acc), Some(conf)) = (b.mean_accuracy, b.mean_confidence) else {
            continue;
        };
        let w = (b.upper - b.lower) * PLOT;
        writeln!(
            s,
            r##"<rect class="acc" x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4c72b0" stroke="white"/>"##,
            x(b.lower),
            y(acc),
            w,
            acc * PLOT
        )
        .unwrap();
        let (top, bottom) = (acc.max(conf), acc.min(conf));
        writeln!(
            s,
            r##"<rect class="gap" x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#dd8452" fill-opacity="0.45"/>"##,
            x(b.lower),
            y(top),
            w,
            (top - bottom) * PLOT
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="gray" stroke-dasharray="4 3"/>"#,
        x(0.0),
        y(0.0),
        x(1.0),
        y(1.0)
    )
    .unwrap();
    for t in [0.0, 0.5, 1.0] {
        writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{t}</text>"#,
            x(t),
            REL_TOP + PLOT + 15.0
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{t}</text>"#,
            LEFT - 4.0,
            y(t) + 4.0
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">confidence</text>"#,
        x(0.5),
        REL_TOP + PLOT + 32.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="12" y="{m}" transform="rotate(-90 12 {m})" text-anchor="middle">accuracy</text>"#,
        m = REL_TOP + PLOT / 2.0
    )
    .unwrap();
    writeln!(s, "</g>\n</svg>").unwrap();
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn reliability_svg(bins: &[BinStat], title: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, reliability_svg_string(bins, title)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adaptation::PredictionRecord;
    use crate::objectives::Method;

    fn records(n: usize, correct: impl Fn(usize) -> bool, conf: impl Fn(usize) -> f64) -> Vec<PredictionRecord> {
        (0..n)
            .map(|i| PredictionRecord {
                sample_id: i,
                method: Method::Tpt,
                true_label: 0,
                predicted_label: usize::from(!correct(i)),
                confidence: conf(i),
                logit_min: 0.0,
                logit_max: 1.0,
                logit_mean: 0.5,
                correct: correct(i),
            })
            .collect()
    }

    #[test]
    fn perfect_predictor_report() {
        let r = CalibrationReport::from_records(&records(10, |_| true, |_| 1.0), 20).unwrap();
        let f = ReportFile::new(&r, None, None);
        assert_eq!(f.raw.ece, 0.0);
        assert_eq!(f.scaled.accuracy_pct, 100.0);
        let json = serde_json::to_value(&f).unwrap();
        assert_eq!(json["raw"]["ece"], 0.0);
    }

    #[test]
    fn aurc_scaling() {
        let mut r = CalibrationReport::from_records(&records(2, |_| true, |_| 0.5), 20).unwrap();
        r.aurc = 0.18428;
        assert!((scaled(&r).aurc_x1e3 - 184.28).abs() < 1e-9);
        assert!(summary_line(&r).ends_with("AURC 184.28"));
    }

    #[test]
    fn csv_has_one_row_per_bin() {
        let r = CalibrationReport::from_records(&records(50, |i| i % 2 == 0, |i| i as f64 / 50.0), 20).unwrap();
        let csv = reliability_csv_string(&r.equal_width_bins);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "bin_lower,bin_upper,count,mean_conf,mean_acc,gap");
        assert_eq!(lines.len(), 21);
    }

    #[test]
    fn svg_has_histogram_and_bars() {
        let r = CalibrationReport::from_records(&records(50, |i| i % 3 == 0, |i| 0.3 + i as f64 / 80.0), 10).unwrap();
        let svg = reliability_svg_string(&r.equal_width_bins, "tpt <synthetic>");
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        let nonempty = r.equal_width_bins.iter().filter(|b| b.count > 0).count();
        assert_eq!(svg.matches("class=\"acc\"").count(), nonempty);
        assert!(svg.contains("id=\"histogram\"") && svg.contains("&lt;synthetic&gt;"));
    }
}
