use std::str::FromStr;

use serde::Serialize;

use super::experiment::{ExperimentReport, ReportRow};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("unknown format {other:?} (expected table, csv or json)")),
        }
    }
}

pub const COLUMNS: [&str; 8] = [
    "Method",
    "Data",
    "CER_source",
    "CER_accent",
    "Δsource%",
    "Δaccent%",
    "wall_s",
    "trainable%",
];

#[derive(Serialize)]
struct CsvRow<'a> {
    method: &'a str,
    data: &'a str,
    cer_source: String,
    cer_accent: String,
    delta_source: String,
    delta_accent: String,
    wall_s: String,
    trainable: String,
}

fn cells(row: &ReportRow) -> [String; 8] {
    [
        row.method.label().to_string(),
        row.data.name().to_string(),
        format!("{:.4}", row.cer_source),
        format!("{:.4}", row.cer_accent),
        format!("{:.2}", row.delta_source_pct),
        format!("{:.2}", row.delta_accent_pct),
        row.wall_s.map_or("-".to_string(), |w| format!("{w:.1}")),
        format!("{:.2}", row.trainable_fraction * 100.0),
    ]
}

fn sorted(report: &ExperimentReport) -> Vec<&ReportRow> {
    let mut rows: Vec<&ReportRow> = report.rows.iter().collect();
    rows.sort_by_key(|r| (r.method, r.data));
    rows
}

/// Renders the report. Rows follow method declaration order (baselines
/// first), then recipe order; columns are fixed.
pub fn render_report(report: &ExperimentReport, format: ReportFormat) -> String {
    let rows: Vec<[String; 8]> = sorted(report).into_iter().map(cells).collect();
    match format {
        ReportFormat::Table => {
            let mut widths: Vec<usize> = COLUMNS.iter().map(|c| c.chars().count()).collect();
            for r in &rows {
                for (w, c) in widths.iter_mut().zip(r) {
                    *w = (*w).max(c.chars().count());
                }
            }
            let line = |cols: Vec<&str>| {
                let parts: Vec<String> = cols
                    .iter()
                    .zip(&widths)
                    .enumerate()
                    .map(|(i, (c, w))| {
                        let pad = w - c.chars().count();
                        if i < 2 {
                            format!("{c}{}", " ".repeat(pad))
                        } else {
                            format!("{}{c}", " ".repeat(pad))
                        }
                    })
                    .collect();
                parts.join("  ").trim_end().to_string()
            };
            let mut out = String::new();
            out.push_str(&line(COLUMNS.to_vec()));
            out.push('\n');
            let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
            for r in &rows {
                out.push_str(&line(r.iter().map(String::as_str).collect()));
                out.push('\n');
            }
            out.push_str(&format!("deltas relative to {}; positive is better\n", report.reference));
            out
        }
        ReportFormat::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
            w.write_record(COLUMNS).expect("in-memory write");
            for r in &rows {
                w.serialize(CsvRow {
                    method: &r[0],
                    data: &r[1],
                    cer_source: r[2].clone(),
                    cer_accent: r[3].clone(),
                    delta_source: r[4].clone(),
                    delta_accent: r[5].clone(),
                    wall_s: r[6].clone(),
                    trainable: r[7].clone(),
                })
                .expect("in-memory write");
            }
            String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
        }
        ReportFormat::Json => {
            let mut ordered = report.clone();
            ordered.rows = sorted(report).into_iter().cloned().collect();
            let mut s = serde_json::to_string_pretty(&ordered).expect("serializable");
            s.push('\n');
            s
        }
    }
}
