//! ROC/AUC, confusion matrix and derived classification metrics, plus the
//! CSV / text / SVG report files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("both classes must be present (got {positives} positives, {negatives} negatives)")]
    SingleClass { positives: usize, negatives: usize },
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("label {0} is not 0 or 1")]
    InvalidLabel(u8),
    #[error("score {0} is not finite")]
    NonFiniteScore(f64),
    #[error("malformed report: {0}")]
    BadReport(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl MetricsError {
    pub fn category(&self) -> &'static str {
        match self {
            MetricsError::SingleClass { .. } => "SingleClass",
            MetricsError::LengthMismatch { .. } => "LengthMismatch",
            MetricsError::InvalidLabel(_) => "InvalidLabel",
            MetricsError::NonFiniteScore(_) => "NonFiniteScore",
            MetricsError::BadReport(_) => "BadReport",
            MetricsError::Io { .. } => "IoError",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MetricsError + '_ {
    move |source| MetricsError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores at or above this value are called positive. The first point
    /// uses +inf.
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// `None` marks a 0/0 ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassificationMetrics {
    pub precision: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: Option<f64>,
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch { scores: scores.len(), labels: labels.len() });
    }
    if let Some(&s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(MetricsError::NonFiniteScore(s));
    }
    let mut positives = 0;
    for &y in labels {
        match y {
            0 => {}
            1 => positives += 1,
            other => return Err(MetricsError::InvalidLabel(other)),
        }
    }
    Ok((positives, labels.len() - positives))
}

/// Mann-Whitney AUC (ties count one half) and the ROC curve with one point
/// per distinct score.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<(f64, Vec<RocPoint>), MetricsError> {
    let (positives, negatives) = check_inputs(scores, labels)?;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::SingleClass { positives, negatives });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (p, n) = (positives as f64, negatives as f64);
    let mut roc = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: f64::INFINITY }];
    // twice the pair count, kept integral so the statistic is exact
    let mut twice_pairs: u128 = 0;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let score = scores[order[i]];
        let (mut pos_g, mut neg_g) = (0usize, 0usize);
        while i < order.len() && scores[order[i]] == score {
            if labels[order[i]] == 1 {
                pos_g += 1;
            } else {
                neg_g += 1;
            }
            i += 1;
        }
        // positives in this group beat every negative below it
        let neg_below = negatives - fp - neg_g;
        twice_pairs += 2 * (pos_g as u128) * (neg_below as u128) + (pos_g as u128) * (neg_g as u128);
        tp += pos_g;
        fp += neg_g;
        roc.push(RocPoint { fpr: fp as f64 / n, tpr: tp as f64 / p, threshold: score });
    }
    let auc = twice_pairs as f64 / (2.0 * p * n);
    Ok((auc, roc))
}

/// Trapezoidal area under a ROC polyline.
pub fn trapezoid_area(roc: &[RocPoint]) -> f64 {
    roc.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum()
}

/// Predicted positive iff `score >= threshold`.
pub fn confusion_matrix(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Confusion, MetricsError> {
    check_inputs(scores, labels)?;
    let mut c = Confusion::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn classification_metrics(c: &Confusion) -> ClassificationMetrics {
    ClassificationMetrics {
        precision: ratio(c.tp, c.tp + c.fp),
        sensitivity: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn, c.tn + c.fp),
        accuracy: ratio(c.tp + c.tn, c.total()),
    }
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Which partition the scores came from, e.g. "validation" or "test".
    pub split: String,
    pub auc: f64,
    pub roc: Vec<RocPoint>,
    pub threshold: f64,
    pub confusion: Confusion,
    pub metrics: ClassificationMetrics,
}

impl MetricsReport {
    pub fn compute(scores: &[f64], labels: &[u8], split: &str) -> Result<Self, MetricsError> {
        let (auc, roc) = roc_auc(scores, labels)?;
        let confusion = confusion_matrix(scores, labels, DEFAULT_THRESHOLD)?;
        Ok(MetricsReport {
            split: split.to_string(),
            auc,
            roc,
            threshold: DEFAULT_THRESHOLD,
            confusion,
            metrics: classification_metrics(&confusion),
        })
    }
}

#[derive(Debug, Clone)]
pub struct ReportPaths {
    pub roc_csv: PathBuf,
    pub report: PathBuf,
    pub svg: PathBuf,
}

impl ReportPaths {
    pub fn in_dir(dir: &Path) -> Self {
        ReportPaths { roc_csv: dir.join("roc.csv"), report: dir.join("report.txt"), svg: dir.join("roc.svg") }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| x.to_string())
}

pub fn roc_csv(roc: &[RocPoint]) -> String {
    let mut out = String::from("fpr,tpr,threshold\n");
    for p in roc {
        let _ = writeln!(out, "{},{},{}", p.fpr, p.tpr, p.threshold);
    }
    out
}

/// `key = value` lines; floats use the shortest representation that parses
/// back to the same bits.
pub fn report_text(r: &MetricsReport) -> String {
    let c = &r.confusion;
    let m = &r.metrics;
    let mut out = String::new();
    let _ = writeln!(out, "split = {}", r.split);
    let _ = writeln!(out, "subjects = {}", c.total());
    let _ = writeln!(out, "auc = {}", r.auc);
    let _ = writeln!(out, "threshold = {}", r.threshold);
    let _ = writeln!(out, "tp = {}", c.tp);
    let _ = writeln!(out, "fp = {}", c.fp);
    let _ = writeln!(out, "fn = {}", c.fn_);
    let _ = writeln!(out, "tn = {}", c.tn);
    let _ = writeln!(out, "precision = {}", fmt_opt(m.precision));
    let _ = writeln!(out, "sensitivity = {}", fmt_opt(m.sensitivity));
    let _ = writeln!(out, "specificity = {}", fmt_opt(m.specificity));
    let _ = writeln!(out, "accuracy = {}", fmt_opt(m.accuracy));
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub fn roc_svg(r: &MetricsReport) -> String {
    const SIZE: f64 = 400.0;
    const MARGIN: f64 = 40.0;
    let span = SIZE - 2.0 * MARGIN;
    let x = |fpr: f64| MARGIN + fpr * span;
    let y = |tpr: f64| SIZE - MARGIN - tpr * span;
    let points: Vec<String> = r.roc.iter().map(|p| format!("{:.3},{:.3}", x(p.fpr), y(p.tpr))).collect();

    let mut out = String::new();
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#);
    let _ = writeln!(out, "  <title>ROC ({})</title>", xml_escape(&r.split));
    let _ = writeln!(out, r#"  <rect x="{MARGIN}" y="{MARGIN}" width="{span}" height="{span}" fill="none" stroke="black"/>"#);
    let _ = writeln!(
        out,
        r##"  <line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#999999" stroke-dasharray="4 4"/>"##,
        x(0.0),
        y(0.0),
        x(1.0),
        y(1.0)
    );
    let _ = writeln!(out, r##"  <polyline fill="none" stroke="#1f77b4" stroke-width="2" points="{}"/>"##, points.join(" "));
    let _ = writeln!(out, r#"  <text x="{}" y="{}" font-size="14">AUC = {:.4}</text>"#, x(0.55), y(0.1), r.auc);
    let _ = writeln!(out, r#"  <text x="{}" y="{}" font-size="12" text-anchor="middle">False positive rate</text>"#, SIZE / 2.0, SIZE - 10.0);
    let _ = writeln!(
        out,
        r#"  <text x="14" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {})">True positive rate</text>"#,
        SIZE / 2.0,
        SIZE / 2.0
    );
    out.push_str("</svg>\n");
    out
}

pub fn emit_report(r: &MetricsReport, paths: &ReportPaths) -> Result<(), MetricsError> {
    for p in [&paths.roc_csv, &paths.report, &paths.svg] {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    fs::write(&paths.roc_csv, roc_csv(&r.roc)).map_err(io_err(&paths.roc_csv))?;
    fs::write(&paths.report, report_text(r)).map_err(io_err(&paths.report))?;
    fs::write(&paths.svg, roc_svg(r)).map_err(io_err(&paths.svg))?;
    Ok(())
}

pub fn parse_roc_csv(text: &str) -> Result<Vec<RocPoint>, MetricsError> {
    let mut lines = text.lines();
    if lines.next() != Some("fpr,tpr,threshold") {
        return Err(MetricsError::BadReport("missing ROC header".into()));
    }
    lines
        .map(|line| {
            let f: Vec<f64> = line
                .split(',')
                .map(|s| s.parse::<f64>().map_err(|e| MetricsError::BadReport(format!("{line:?}: {e}"))))
                .collect::<Result<_, _>>()?;
            match f[..] {
                [fpr, tpr, threshold] => Ok(RocPoint { fpr, tpr, threshold }),
                _ => Err(MetricsError::BadReport(format!("expected 3 fields in {line:?}"))),
            }
        })
        .collect()
}

/// Inverse of [`report_text`] plus [`roc_csv`].
pub fn parse_report(text: &str, roc_csv: &str) -> Result<MetricsReport, MetricsError> {
    let mut fields = std::collections::HashMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
        let (k, v) = line.split_once(" = ").ok_or_else(|| MetricsError::BadReport(format!("no '=' in {line:?}")))?;
        fields.insert(k.trim(), v.trim());
    }
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| MetricsError::BadReport(format!("missing {k}")));
    let num = |k: &str| -> Result<f64, MetricsError> { get(k)?.parse().map_err(|_| MetricsError::BadReport(format!("bad {k}"))) };
    let count = |k: &str| -> Result<usize, MetricsError> { get(k)?.parse().map_err(|_| MetricsError::BadReport(format!("bad {k}"))) };
    let opt = |k: &str| -> Result<Option<f64>, MetricsError> {
        match get(k)? {
            "undefined" => Ok(None),
            v => v.parse().map(Some).map_err(|_| MetricsError::BadReport(format!("bad {k}"))),
        }
    };
    Ok(MetricsReport {
        split: get("split")?.to_string(),
        auc: num("auc")?,
        roc: parse_roc_csv(roc_csv)?,
        threshold: num("threshold")?,
        confusion: Confusion { tp: count("tp")?, fp: count("fp")?, fn_: count("fn")?, tn: count("tn")? },
        metrics: ClassificationMetrics {
            precision: opt("precision")?,
            sensitivity: opt("sensitivity")?,
            specificity: opt("specificity")?,
            accuracy: opt("accuracy")?,
        },
    })
}

pub fn read_report(paths: &ReportPaths) -> Result<MetricsReport, MetricsError> {
    let text = fs::read_to_string(&paths.report).map_err(io_err(&paths.report))?;
    let roc = fs::read_to_string(&paths.roc_csv).map_err(io_err(&paths.roc_csv))?;
    parse_report(&text, &roc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair_oracle(scores: &[f64], labels: &[u8]) -> f64 {
        let mut total = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    total += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        total / pairs
    }

    #[test]
    fn worked_examples() {
        let (auc, _) = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
        assert_eq!(auc, 0.75);
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap().0, 1.0);
        assert_eq!(roc_auc(&[0.3; 5], &[0, 1, 0, 1, 1]).unwrap().0, 0.5);
    }

    #[test]
    fn roc_errors() {
        assert!(matches!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(MetricsError::SingleClass { positives: 2, negatives: 0 })));
        assert!(matches!(roc_auc(&[0.1], &[1, 0]), Err(MetricsError::LengthMismatch { .. })));
        assert!(matches!(roc_auc(&[0.1, 0.2], &[1, 2]), Err(MetricsError::InvalidLabel(2))));
        assert!(matches!(roc_auc(&[f64::NAN, 0.2], &[1, 0]), Err(MetricsError::NonFiniteScore(_))));
        assert!(matches!(confusion_matrix(&[0.1], &[], 0.5), Err(MetricsError::LengthMismatch { .. })));
    }

    #[test]
    fn confusion_examples() {
        assert_eq!(confusion_matrix(&[0.6, 0.4], &[1, 0], 0.5).unwrap(), Confusion { tp: 1, fp: 0, fn_: 0, tn: 1 });
        assert_eq!(confusion_matrix(&[0.5], &[1], 0.5).unwrap().tp, 1);
        assert_eq!(confusion_matrix(&[0.9; 6], &[0; 6], 0.5).unwrap(), Confusion { tp: 0, fp: 6, fn_: 0, tn: 0 });
    }

    #[test]
    fn metric_examples() {
        let m = classification_metrics(&Confusion { tp: 3, fp: 1, fn_: 2, tn: 4 });
        assert_eq!(m.precision, Some(0.75));
        assert_eq!(m.sensitivity, Some(0.6));
        assert_eq!(m.specificity, Some(0.8));
        assert_eq!(m.accuracy, Some(0.7));

        let m = classification_metrics(&Confusion { tp: 0, fp: 0, fn_: 3, tn: 5 });
        assert_eq!(m.precision, None);
        assert_eq!(m.specificity, Some(1.0));
        assert_eq!(m.sensitivity, Some(0.0));

        let m = classification_metrics(&Confusion { tp: 4, fp: 0, fn_: 0, tn: 2 });
        assert_eq!([m.precision, m.sensitivity, m.specificity, m.accuracy], [Some(1.0); 4]);
    }

    #[test]
    fn perfect_classifier_passes_through_top_left() {
        let r = MetricsReport::compute(&[0.1, 0.2, 0.7, 0.9], &[0, 0, 1, 1], "test").unwrap();
        let csv = roc_csv(&r.roc);
        assert!(csv.lines().any(|l| l.starts_with("0,1,")));
        assert_eq!(csv.lines().nth(1), Some("0,0,inf"));
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (2usize..60).prop_flat_map(|n| {
            (prop::collection::vec((0u8..12).prop_map(|k| k as f64 / 11.0), n), prop::collection::vec(0u8..2, n))
        })
        .prop_filter("both classes", |(_, y)| y.contains(&0) && y.contains(&1))
    }

    proptest! {
        #[test]
        fn matches_pair_oracle((s, y) in instance()) {
            let (auc, roc) = roc_auc(&s, &y).unwrap();
            prop_assert!((auc - pair_oracle(&s, &y)).abs() <= 1e-12);
            prop_assert!((trapezoid_area(&roc) - auc).abs() <= 1e-9);
            prop_assert_eq!((roc[0].fpr, roc[0].tpr), (0.0, 0.0));
            let last = roc.last().unwrap();
            prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
            for w in roc.windows(2) {
                prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr && w[1].threshold < w[0].threshold);
            }
        }

        #[test]
        fn invariant_under_monotone_transform((s, y) in instance()) {
            let t: Vec<f64> = s.iter().map(|x| (3.0 * x - 1.0).exp()).collect();
            prop_assert_eq!(roc_auc(&s, &y).unwrap().0, roc_auc(&t, &y).unwrap().0);
        }

        #[test]
        fn flipping_labels_complements((s, y) in instance()) {
            let flipped: Vec<u8> = y.iter().map(|v| 1 - v).collect();
            let a = roc_auc(&s, &y).unwrap().0;
            let b = roc_auc(&s, &flipped).unwrap().0;
            prop_assert!((a + b - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn confusion_partitions((s, y) in instance(), t in 0.0f64..1.0) {
            let c = confusion_matrix(&s, &y, t).unwrap();
            prop_assert_eq!(c.total(), s.len());
            prop_assert_eq!(c.tp + c.fn_, y.iter().filter(|&&v| v == 1).count());
        }
    }

    #[test]
    fn report_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scores = [0.05, 0.5, 0.45, 0.91, 0.2, 0.33, 0.6];
        let labels = [0, 1, 0, 1, 0, 1, 0];
        let r = MetricsReport::compute(&scores, &labels, "validation").unwrap();
        let paths = ReportPaths::in_dir(&dir.path().join("out"));
        emit_report(&r, &paths).unwrap();
        assert_eq!(read_report(&paths).unwrap(), r);

        let degenerate = MetricsReport::compute(&[0.1, 0.2, 0.3], &[1, 0, 1], "test").unwrap();
        assert_eq!(degenerate.metrics.precision, None);
        let text = report_text(&degenerate);
        assert!(text.contains("precision = undefined"));
        assert_eq!(parse_report(&text, &roc_csv(&degenerate.roc)).unwrap(), degenerate);
    }

    #[test]
    fn svg_is_well_formed_with_one_polyline() {
        let r = MetricsReport::compute(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1], "a<b & c").unwrap();
        let svg = roc_svg(&r);
        let mut reader = quick_xml::Reader::from_str(&svg);
        let (mut polylines, mut lines, mut auc_text) = (0, 0, false);
        loop {
            match reader.read_event().expect("well-formed xml") {
                quick_xml::events::Event::Eof => break,
                quick_xml::events::Event::Start(e) | quick_xml::events::Event::Empty(e) => match e.name().as_ref() {
                    b"polyline" => polylines += 1,
                    b"line" => lines += 1,
                    _ => {}
                },
                quick_xml::events::Event::Text(t) => auc_text |= t.unescape().unwrap().contains("AUC = 0.7500"),
                _ => {}
            }
        }
        assert_eq!((polylines, lines), (1, 1));
        assert!(auc_text);
    }
}
