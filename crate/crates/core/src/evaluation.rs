//! Point matching error, inlier-threshold robustness curves and category
//! reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::homography::{Correspondences, Homography};

/// Scene category of a labelled pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "RE-L")]
    Regular,
    #[serde(rename = "LT-L")]
    LowTexture,
    #[serde(rename = "LL-L")]
    LowLight,
    #[serde(rename = "LF-L")]
    LargeForeground,
    #[serde(rename = "SF-L")]
    SmallForeground,
    #[serde(rename = "synthetic")]
    Synthetic,
}

impl Category {
    /// Report column order.
    pub const ALL: [Category; 6] = [
        Category::Regular,
        Category::LowTexture,
        Category::LowLight,
        Category::LargeForeground,
        Category::SmallForeground,
        Category::Synthetic,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Category::Regular => "RE-L",
            Category::LowTexture => "LT-L",
            Category::LowLight => "LL-L",
            Category::LargeForeground => "LF-L",
            Category::SmallForeground => "SF-L",
            Category::Synthetic => "synthetic",
        }
    }

    pub fn from_label(s: &str) -> Option<Category> {
        Category::ALL.into_iter().find(|c| c.label() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub pair_id: String,
    pub category: Category,
    pub pme: f64,
    pub errors: Vec<f64>,
}

impl EvalRecord {
    pub fn with_id(mut self, id: impl Into<String>, category: Category) -> Self {
        self.pair_id = id.into();
        self.category = category;
        self
    }
}

/// Mean Euclidean distance between `h(p_s)` and the labelled `p_t`.
pub fn pme(h: &Homography, pts: &Correspondences) -> Result<EvalRecord> {
    if pts.is_empty() {
        return Err(Error::EmptyInput("no labelled points".into()));
    }
    let errors = pts
        .pairs()
        .iter()
        .map(|c| Ok((h.apply_point(c.src)? - c.dst).norm()))
        .collect::<Result<Vec<f64>>>()?;
    let pme = errors.iter().sum::<f64>() / errors.len() as f64;
    Ok(EvalRecord {
        pair_id: String::new(),
        category: Category::Synthetic,
        pme,
        errors,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCurve {
    pub thresholds: Vec<f64>,
    pub proportions: Vec<f64>,
}

/// Thresholds `1.0, 2.0, …, 50.0`.
pub fn default_thresholds() -> Vec<f64> {
    (1..=50).map(|t| t as f64).collect()
}

/// Fraction of errors strictly below each threshold.
pub fn inlier_curve(errors: &[f64], thresholds: &[f64]) -> Result<RobustnessCurve> {
    if errors.is_empty() {
        return Err(Error::EmptyInput("no errors".into()));
    }
    if thresholds.is_empty() {
        return Err(Error::EmptyInput("no thresholds".into()));
    }
    if errors.iter().any(|e| !(*e >= 0.0)) {
        return Err(Error::Validation("errors must be non-negative".into()));
    }
    if thresholds.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Validation("thresholds must be strictly ascending".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let proportions = thresholds
        .iter()
        .map(|t| sorted.partition_point(|e| e < t) as f64 / n)
        .collect();
    Ok(RobustnessCurve {
        thresholds: thresholds.to_vec(),
        proportions,
    })
}

impl RobustnessCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,proportion\n");
        for (t, p) in self.thresholds.iter().zip(&self.proportions) {
            let _ = writeln!(s, "{t},{p}");
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let (mut thresholds, mut proportions) = (Vec::new(), Vec::new());
        for (i, row) in rdr.records().enumerate() {
            let row = row.map_err(|e| Error::Parse {
                context: format!("curve line {}", i + 2),
                message: e.to_string(),
            })?;
            let field = |k: usize| -> Result<f64> {
                row.get(k).and_then(|v| v.trim().parse().ok()).ok_or_else(|| Error::Parse {
                    context: format!("curve line {}", i + 2),
                    message: format!("column {k} is not a number"),
                })
            };
            thresholds.push(field(0)?);
            proportions.push(field(1)?);
        }
        Ok(Self {
            thresholds,
            proportions,
        })
    }
}

/// One method's row: per-category mean PME and the average column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub values: BTreeMap<Category, f64>,
    pub avg: f64,
}

impl ReportRow {
    /// Row with explicit values, e.g. a published fixture.
    pub fn fixed(method: &str, values: &[(Category, f64)], avg: f64) -> Self {
        Self {
            method: method.to_string(),
            values: values.iter().copied().collect(),
            avg,
        }
    }
}

/// Per-category mean PME of `records`; `avg` is the unweighted mean of the
/// category means. Empty categories are omitted.
pub fn category_report(method: &str, records: &[EvalRecord]) -> ReportRow {
    let mut sums: BTreeMap<Category, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = sums.entry(r.category).or_default();
        e.0 += r.pme;
        e.1 += 1;
    }
    let values: BTreeMap<Category, f64> = sums.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect();
    let avg = if values.is_empty() {
        f64::NAN
    } else {
        values.values().sum::<f64>() / values.len() as f64
    };
    ReportRow {
        method: method.to_string(),
        values,
        avg,
    }
}

/// Rows sharing the category columns, with optional relative changes
/// against a reference row.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub rows: Vec<ReportRow>,
    pub reference: Option<usize>,
}

/// `(+x.xx%)` style relative change of `value` against `reference`.
pub fn relative_change(value: f64, reference: f64) -> String {
    let pct = (value - reference) / reference * 100.0;
    if pct < 0.0 {
        format!("\u{2212}{:.2}%", -pct)
    } else {
        format!("+{pct:.2}%")
    }
}

impl ReportTable {
    pub fn new(rows: Vec<ReportRow>) -> Self {
        Self { rows, reference: None }
    }

    pub fn with_reference(mut self, index: usize) -> Self {
        self.reference = Some(index);
        self
    }

    /// Categories present in any row, in report order.
    pub fn columns(&self) -> Vec<Category> {
        Category::ALL
            .into_iter()
            .filter(|c| self.rows.iter().any(|r| r.values.contains_key(c)))
            .collect()
    }

    fn cell(&self, row: &ReportRow, value: Option<f64>, reference: Option<f64>) -> String {
        let _ = row;
        match (value, reference) {
            (Some(v), Some(r)) if r != 0.0 => format!("{v:.2} ({})", relative_change(v, r)),
            (Some(v), _) => format!("{v:.2}"),
            (None, _) => "-".to_string(),
        }
    }

    fn cells(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let cols = self.columns();
        let mut header = vec!["method".to_string()];
        header.extend(cols.iter().map(|c| c.label().to_string()));
        header.push("Avg".to_string());
        let reference = self.reference.and_then(|i| self.rows.get(i));
        let body = self
            .rows
            .iter()
            .map(|row| {
                let mut line = vec![row.method.clone()];
                for c in &cols {
                    let r = reference.and_then(|r| r.values.get(c).copied());
                    line.push(self.cell(row, row.values.get(c).copied(), r));
                }
                line.push(self.cell(row, Some(row.avg), reference.map(|r| r.avg)));
                line
            })
            .collect();
        (header, body)
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let (header, body) = self.cells();
        let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
        for line in &body {
            for (w, c) in widths.iter_mut().zip(line) {
                *w = (*w).max(c.chars().count());
            }
        }
        let fmt = |line: &[String]| -> String {
            let parts: Vec<String> = line
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| {
                    let pad = w - c.chars().count();
                    if i == 0 {
                        format!("{c}{}", " ".repeat(pad))
                    } else {
                        format!("{}{c}", " ".repeat(pad))
                    }
                })
                .collect();
            parts.join("  ").trim_end().to_string()
        };
        let mut s = fmt(&header);
        s.push('\n');
        for line in &body {
            s.push_str(&fmt(line));
            s.push('\n');
        }
        s
    }

    /// CSV with one numeric column per category, the average, and the
    /// relative changes when a reference row is set.
    pub fn to_csv(&self) -> Result<String> {
        let cols = self.columns();
        let reference = self.reference.and_then(|i| self.rows.get(i));
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["method".to_string()];
        for c in &cols {
            header.push(c.label().to_string());
        }
        header.push("Avg".to_string());
        if reference.is_some() {
            for c in &cols {
                header.push(format!("{} rel", c.label()));
            }
            header.push("Avg rel".to_string());
        }
        w.write_record(&header).map_err(|e| Error::Io(e.to_string()))?;
        for row in &self.rows {
            let mut rec = vec![row.method.clone()];
            let vals: Vec<Option<f64>> = cols.iter().map(|c| row.values.get(c).copied()).chain([Some(row.avg)]).collect();
            for v in &vals {
                rec.push(v.map(|v| format!("{v:.4}")).unwrap_or_default());
            }
            if let Some(r) = reference {
                let refs: Vec<Option<f64>> = cols.iter().map(|c| r.values.get(c).copied()).chain([Some(r.avg)]).collect();
                for (v, r) in vals.iter().zip(&refs) {
                    rec.push(match (v, r) {
                        (Some(v), Some(r)) if *r != 0.0 => relative_change(*v, *r),
                        _ => String::new(),
                    });
                }
            }
            w.write_record(&rec).map_err(|e| Error::Io(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
    }
}

/// Records as CSV: `pair_id,category,pme`.
pub fn records_to_csv(records: &[EvalRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["pair_id", "category", "pme"]).map_err(|e| Error::Io(e.to_string()))?;
    for r in records {
        w.write_record([r.pair_id.as_str(), r.category.label(), &format!("{}", r.pme)])
            .map_err(|e| Error::Io(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Line plot of inlier proportion against threshold.
pub fn curves_to_svg(curves: &[(String, RobustnessCurve)]) -> String {
    let (w, h, m) = (640.0, 400.0, 50.0);
    let t_max = curves
        .iter()
        .flat_map(|(_, c)| c.thresholds.iter().copied())
        .fold(1.0, f64::max);
    let x = |t: f64| m + t / t_max * (w - 2.0 * m);
    let y = |p: f64| h - m - p * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{m} {m} L{m} {b} L{r} {b}" stroke="black" fill="none"/>"#,
        b = h - m,
        r = w - m
    );
    for k in 0..=5 {
        let p = k as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{p:.1}</text>"#,
            m - 6.0,
            y(p) + 4.0
        );
    }
    for k in 0..=5 {
        let t = t_max * k as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{t:.0}</text>"#,
            x(t),
            h - m + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">threshold (px)</text>"#,
        w / 2.0,
        h - 10.0
    );
    for (i, (name, c)) in curves.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = c
            .thresholds
            .iter()
            .zip(&c.proportions)
            .map(|(t, p)| format!("{:.2},{:.2}", x(*t), y(*p)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" stroke="{colour}" stroke-width="2" fill="none"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" fill="{colour}">{}</text>"#,
            w - m - 120.0,
            m + 16.0 * (i as f64 + 1.0),
            xml_escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthesis::uniform_points;

    #[test]
    fn pme_examples() {
        let h = Homography::from_row_slice(&[1.02, 0.01, 4.0, 0.0, 0.99, -2.0, 1e-5, 0.0, 1.0]).unwrap();
        let pts = Correspondences::generate(&h, &uniform_points(100, 80, 4, 3)).unwrap();
        assert!(pme(&h, &pts).unwrap().pme < 1e-12);
        let shifted = Correspondences::from_tuples(&[[0.0, 0.0, 3.0, 4.0], [10.0, 5.0, 13.0, 9.0]]).unwrap();
        let r = pme(&Homography::identity(), &shifted).unwrap();
        assert!((r.pme - 5.0).abs() < 1e-12);
        assert_eq!(r.errors.len(), 2);
    }

    #[test]
    fn curve_examples() {
        let c = inlier_curve(&[0.0; 5], &default_thresholds()).unwrap();
        assert!(c.proportions.iter().all(|p| *p == 1.0));
        let c = inlier_curve(&[0.5, 5.0, 50.0], &[10.0, 50.0, 51.0]).unwrap();
        assert_eq!(c.proportions, vec![2.0 / 3.0, 2.0 / 3.0, 1.0]);
        assert!(matches!(inlier_curve(&[], &[1.0]), Err(Error::EmptyInput(_))));
        let back = RobustnessCurve::from_csv(&c.to_csv()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn report_means_and_percentages() {
        let rec = |v: f64, c: Category| EvalRecord {
            pair_id: String::new(),
            category: c,
            pme: v,
            errors: vec![v],
        };
        let row = category_report("m", &[rec(2.0, Category::Regular), rec(4.0, Category::Regular)]);
        assert_eq!(row.values[&Category::Regular], 3.0);
        assert_eq!(row.avg, 3.0);
        assert_eq!(relative_change(5.0, 10.0), "\u{2212}50.00%");
        let row = category_report(
            "m",
            &[rec(2.0, Category::Regular), rec(4.0, Category::Regular), rec(9.0, Category::LowLight)],
        );
        assert_eq!(row.avg, 6.0);
        assert!(!row.values.contains_key(&Category::LowTexture));
    }

    #[test]
    fn table_text_and_csv() {
        let base = ReportRow::fixed("base", &[(Category::Regular, 10.0)], 10.0);
        let ours = ReportRow::fixed("ours", &[(Category::Regular, 5.0)], 5.0);
        let t = ReportTable::new(vec![base, ours]).with_reference(0);
        let text = t.to_text();
        assert!(text.contains("5.00 (\u{2212}50.00%)"), "{text}");
        assert!(text.contains("10.00 (+0.00%)"));
        let csv = t.to_csv().unwrap();
        assert!(csv.starts_with("method,RE-L,Avg,RE-L rel,Avg rel\n"), "{csv}");
    }

    #[test]
    fn svg_has_one_polyline_per_curve() {
        let c = inlier_curve(&[1.0, 2.0, 3.0], &default_thresholds()).unwrap();
        let svg = curves_to_svg(&[("a".into(), c.clone()), ("b<c".into(), c)]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("b&lt;c"));
    }
}
