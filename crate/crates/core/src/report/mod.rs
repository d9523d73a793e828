//! CSV tables, SVG charts and the HTML run summary.
//!
//! Every number that appears in a chart is formatted with [`fmt_num`], the
//! same formatter used for the backing CSV, so the two can be compared as
//! strings.

mod svg;

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub use svg::{parse_svg_values, BarChart, LineChart, LineSeries, Series};

/// Fixed six-decimal rendering with negative zero folded to zero.
pub fn fmt_num(x: f64) -> String {
    let s = format!("{x:.6}");
    if s.strip_prefix('-').is_some_and(|rest| rest.chars().all(|c| c == '0' || c == '.')) {
        s[1..].to_string()
    } else {
        s
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Format(format!("csv: {e}"));
        w.write_record(&self.header).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record(r).map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self> {
        let mut r = csv::Reader::from_reader(bytes);
        let csv_err = |e: csv::Error| Error::Format(format!("csv: {e}"));
        let header = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|x| x.iter().map(String::from).collect()).map_err(csv_err))
            .collect::<Result<_>>()?;
        Ok(Self { header, rows })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&bytes)
    }

    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i].as_str()).collect())
    }

    pub fn to_html(&self) -> String {
        let mut s = String::from("<table>\n<thead><tr>");
        for h in &self.header {
            let _ = write!(s, "<th>{}</th>", escape(h));
        }
        s.push_str("</tr></thead>\n<tbody>\n");
        for r in &self.rows {
            s.push_str("<tr>");
            for c in r {
                let _ = write!(s, "<td>{}</td>", escape(c));
            }
            s.push_str("</tr>\n");
        }
        s.push_str("</tbody>\n</table>\n");
        s
    }
}

pub fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// One study section of the HTML report.
#[derive(Debug, Clone)]
pub struct Section {
    pub title: String,
    pub body: SectionBody,
}

#[derive(Debug, Clone)]
pub enum SectionBody {
    NotRun,
    Run {
        svgs: Vec<String>,
        tables: Vec<(String, Table)>,
    },
}

const STYLE: &str = "body{font-family:sans-serif;max-width:960px;margin:2em auto;color:#222}\
table{border-collapse:collapse;margin:1em 0;font-size:13px}\
td,th{border:1px solid #bbb;padding:2px 6px;text-align:right}\
pre{background:#f4f4f4;padding:1em;overflow-x:auto;font-size:12px}\
.notrun{color:#999;font-style:italic}";

pub fn render_html(title: &str, sections: &[Section], manifest_json: Option<&str>) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{t}</title><style>{STYLE}</style></head>\n<body>\n<h1>{t}</h1>\n",
        t = escape(title)
    );
    for sec in sections {
        let _ = writeln!(s, "<section>\n<h2>{}</h2>", escape(&sec.title));
        match &sec.body {
            SectionBody::NotRun => s.push_str("<p class=\"notrun\">not run</p>\n"),
            SectionBody::Run { svgs, tables } => {
                for svg in svgs {
                    s.push_str(svg);
                    s.push('\n');
                }
                for (name, t) in tables {
                    let _ = writeln!(s, "<h3>{}</h3>", escape(name));
                    s.push_str(&t.to_html());
                }
            }
        }
        s.push_str("</section>\n");
    }
    s.push_str("<section>\n<h2>Manifest</h2>\n");
    match manifest_json {
        Some(m) => {
            let _ = writeln!(s, "<pre>{}</pre>", escape(m));
        }
        None => s.push_str("<p class=\"notrun\">no manifest</p>\n"),
    }
    s.push_str("</section>\n</body></html>\n");
    s
}

/// Pulls the cell text out of an HTML table rendered by [`Table::to_html`].
pub fn parse_html_cells(html: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = html;
    while let Some(i) = rest.find("<td>") {
        rest = &rest[i + 4..];
        let j = rest.find("</td>").unwrap_or(rest.len());
        out.push(rest[..j].to_string());
        rest = &rest[j..];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negative_zero_folds() {
        assert_eq!(fmt_num(-1e-13), "0.000000");
        assert_eq!(fmt_num(-0.5), "-0.500000");
        assert_eq!(fmt_num(2.0), "2.000000");
    }

    #[test]
    fn csv_round_trip() {
        let mut t = Table::new(["layer", "note"]);
        t.push(vec!["0".into(), "has, comma".into()]);
        t.push(vec!["1".into(), "quote \"x\"".into()]);
        let back = Table::from_csv(&t.to_csv().unwrap()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.column("layer").unwrap(), vec!["0", "1"]);
    }

    #[test]
    fn html_marks_missing_sections() {
        let mut t = Table::new(["a"]);
        t.push(vec!["1.000000".into()]);
        let html = render_html(
            "r",
            &[
                Section {
                    title: "sweep".into(),
                    body: SectionBody::Run { svgs: vec![], tables: vec![("sweep.csv".into(), t)] },
                },
                Section { title: "alpha".into(), body: SectionBody::NotRun },
            ],
            None,
        );
        assert!(html.contains("not run"));
        assert_eq!(parse_html_cells(&html), vec!["1.000000"]);
    }
}
