//! Result tables and their CSV / Markdown / JSON renderings.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::Config;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub values: Vec<f64>,
}

/// Provenance embedded in every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub seed: u64,
    pub config_hash: String,
    pub config: Config,
}

impl ReportMeta {
    pub fn for_config(config: &Config) -> Self {
        Self {
            seed: config.train.seed,
            config_hash: config.hash(),
            config: config.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
    pub meta: ReportMeta,
}

impl ReportTable {
    pub fn new(title: impl Into<String>, columns: &[&str], config: &Config) -> Self {
        Self {
            title: title.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            meta: ReportMeta::for_config(config),
        }
    }

    pub fn push(&mut self, label: impl Into<String>, values: Vec<f64>) {
        self.rows.push(ReportRow {
            label: label.into(),
            values,
        });
    }

    pub fn row(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn value(&self, label: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.row(label)?.values.get(c).copied()
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.rows {
            if r.values.len() != self.columns.len() {
                return Err(Error::ShapeMismatch(format!(
                    "row {:?} has {} values for {} columns",
                    r.label,
                    r.values.len(),
                    self.columns.len()
                )));
            }
            if let Some(v) = r.values.iter().find(|v| !v.is_finite()) {
                return Err(Error::invalid("report cell", format!("row {:?} holds {v}", r.label)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Markdown,
    Json,
}

impl ReportFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Markdown => "md",
            ReportFormat::Json => "json",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            "json" => Ok(ReportFormat::Json),
            _ => Err(Error::invalid("report format", format!("unknown format {s:?}"))),
        }
    }
}

fn meta_lines(t: &ReportTable) -> Result<Vec<(&'static str, String)>> {
    Ok(vec![
        ("title", t.title.clone()),
        ("seed", t.meta.seed.to_string()),
        ("config_hash", t.meta.config_hash.clone()),
        ("config", serde_json::to_string(&t.meta.config)?),
    ])
}

/// Renders a table. Output is a pure function of the table.
pub fn render_report(t: &ReportTable, format: ReportFormat) -> Result<String> {
    t.validate()?;
    match format {
        ReportFormat::Csv => {
            let mut out = String::new();
            for (k, v) in meta_lines(t)? {
                writeln!(out, "# {k}: {v}").unwrap();
            }
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header = vec!["label".to_string()];
            header.extend(t.columns.iter().cloned());
            w.write_record(&header)?;
            for r in &t.rows {
                let mut rec = vec![r.label.clone()];
                rec.extend(r.values.iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::invalid("csv buffer", e.to_string()))?;
            out.push_str(&String::from_utf8(bytes).expect("csv output is utf-8"));
            Ok(out)
        }
        ReportFormat::Markdown => {
            let mut out = format!("# {}\n\n", t.title);
            writeln!(out, "- seed: {}", t.meta.seed).unwrap();
            writeln!(out, "- config hash: `{}`\n", t.meta.config_hash).unwrap();
            writeln!(out, "| label | {} |", t.columns.join(" | ")).unwrap();
            writeln!(out, "|---|{}", "---:|".repeat(t.columns.len())).unwrap();
            for r in &t.rows {
                let cells: Vec<String> = r.values.iter().map(|v| format!("{v:.4}")).collect();
                writeln!(out, "| {} | {} |", r.label, cells.join(" | ")).unwrap();
            }
            writeln!(out, "\n<details><summary>config</summary>\n\n```toml\n{}```\n</details>", t.meta.config.to_toml_string()?).unwrap();
            Ok(out)
        }
        ReportFormat::Json => Ok(serde_json::to_string_pretty(t)? + "\n"),
    }
}

pub fn emit_report(t: &ReportTable, format: ReportFormat, path: &Path) -> Result<()> {
    let s = render_report(t, format)?;
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Parses the CSV rendering back into a table.
pub fn parse_csv_report(s: &str) -> Result<ReportTable> {
    let mut title = None;
    let mut seed = None;
    let mut hash = None;
    let mut config = None;
    for line in s.lines().take_while(|l| l.starts_with('#')) {
        let Some((k, v)) = line[1..].trim_start().split_once(": ") else {
            continue;
        };
        match k {
            "title" => title = Some(v.to_string()),
            "seed" => seed = v.parse().ok(),
            "config_hash" => hash = Some(v.to_string()),
            "config" => config = Some(serde_json::from_str::<Config>(v)?),
            _ => {}
        }
    }
    let missing = |what: &str| Error::invalid("csv report", format!("missing {what} metadata"));
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(s.as_bytes());
    let columns: Vec<String> = r.headers()?.iter().skip(1).map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let values = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>().map_err(|e| Error::invalid("csv report cell", format!("{v:?}: {e}"))))
            .collect::<Result<_>>()?;
        rows.push(ReportRow {
            label: rec.get(0).unwrap_or_default().to_string(),
            values,
        });
    }
    Ok(ReportTable {
        title: title.ok_or_else(|| missing("title"))?,
        columns,
        rows,
        meta: ReportMeta {
            seed: seed.ok_or_else(|| missing("seed"))?,
            config_hash: hash.ok_or_else(|| missing("config_hash"))?,
            config: config.ok_or_else(|| missing("config"))?,
        },
    })
}

pub fn parse_json_report(s: &str) -> Result<ReportTable> {
    Ok(serde_json::from_str(s)?)
}
