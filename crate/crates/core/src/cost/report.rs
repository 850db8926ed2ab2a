//! Text, CSV and JSON rendering of [`CostReport`]s.
//!
//! The table uses Table-2-style units: MACs in millions, ACE in 1e9, CPU64 in
//! 1e6 and size in MiB, one decimal each. CSV and JSON keep exact values.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{CostReport, ElementwiseCount};
use crate::graphir::DType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    #[default]
    Table,
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("unknown format `{other}` (expected table, csv or json)")),
        }
    }
}

const COLUMNS: [(&str, DType); 5] = [
    ("FP32", DType::Fp32),
    ("BF16", DType::Bf16),
    ("INT8", DType::Int8),
    ("INT4", DType::Int4),
    ("Binary", DType::Binary),
];

pub fn render_report(r: &CostReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(r).expect("report serializes") + "\n",
        ReportFormat::Table => {
            let mut out = render_reports(std::slice::from_ref(r), format);
            if let Some(e) = &r.elementwise {
                out.push('\n');
                out.push_str(&render_elementwise(e));
            }
            out
        }
        ReportFormat::Csv => render_reports(std::slice::from_ref(r), format),
    }
}

/// Per-component adds and muls in millions, one decimal, with a total row.
pub fn render_elementwise(e: &ElementwiseCount) -> String {
    let mut out = format!("{:<16} {:>10} {:>10}\n", "Elementwise op", "Adds (M)", "Muls (M)");
    for (name, c) in e.parts() {
        let _ = writeln!(out, "{name:<16} {:>10.1} {:>10.1}", c.adds as f64 / 1e6, c.muls as f64 / 1e6);
    }
    let _ = writeln!(out, "{:<16} {:>10.1} {:>10.1}", "total", e.adds() as f64 / 1e6, e.muls() as f64 / 1e6);
    out
}

/// Rows are sorted by model name so output is stable across runs.
pub fn render_reports(reports: &[CostReport], format: ReportFormat) -> String {
    let mut rs: Vec<&CostReport> = reports.iter().collect();
    rs.sort_by(|a, b| a.model.cmp(&b.model));
    match format {
        ReportFormat::Table => table(&rs),
        ReportFormat::Csv => csv(&rs),
        ReportFormat::Json => serde_json::to_string_pretty(&rs).expect("reports serialize") + "\n",
    }
}

fn table(rs: &[&CostReport]) -> String {
    let with_int2 = rs.iter().any(|r| r.macs_by_widest(DType::Int2) > 0);
    let with_elem = rs.iter().any(|r| r.elementwise_ace.is_some());
    let mut header: Vec<String> = vec!["Model".into()];
    let mut cols: Vec<DType> = Vec::new();
    for (name, d) in COLUMNS {
        header.push(name.into());
        cols.push(d);
        if with_int2 && d == DType::Int4 {
            header.push("INT2".into());
            cols.push(DType::Int2);
        }
    }
    header.extend(["ACE".into(), "CPU64".into(), "Size".into()]);
    if with_elem {
        header.push("Elem ACE".into());
    }
    let mut rows = vec![header];
    for r in rs {
        let mut row = vec![r.model.clone()];
        for &d in &cols {
            row.push(millions(r.macs_by_widest(d)));
        }
        row.push(format!("{:.1}", r.ace as f64 / 1e9));
        row.push(format!("{:.1}", r.cpu64_f64() / 1e6));
        row.push(format!("{:.1}", r.size_mib()));
        if with_elem {
            row.push(r.elementwise_ace.map_or("-".into(), |a| format!("{:.1}", a as f64 / 1e9)));
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, v)| {
                if c == 0 {
                    format!("{v:<w$}", w = widths[c])
                } else {
                    format!("{v:>w$}", w = widths[c])
                }
            })
            .collect();
        writeln!(out, "{}", cells.join("  ").trim_end()).unwrap();
        if i == 0 {
            writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1))).unwrap();
        }
    }
    out.push_str("MACs in millions, ACE in 1e9, CPU64 in 1e6, size in MiB\n");
    out
}

fn millions(n: u64) -> String {
    if n == 0 {
        "-".into()
    } else {
        format!("{:.1}", n as f64 / 1e6)
    }
}

fn csv(rs: &[&CostReport]) -> String {
    let mut out = String::from(
        "model,fp32_macs,bf16_macs,int8_macs,int4_macs,int2_macs,binary_macs,ace,cpu64,cpu64_exact,size_bytes,elementwise_ace\n",
    );
    for r in rs {
        let macs: Vec<String> = DType::ALL.iter().map(|&d| r.macs_by_widest(d).to_string()).collect();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.model,
            macs.join(","),
            r.ace,
            r.cpu64_f64(),
            r.cpu64,
            r.size_bytes,
            r.elementwise_ace.map_or(String::new(), |a| a.to_string())
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{analyze, AnalyzeOptions};
    use crate::graphir::builtin;

    #[test]
    fn json_round_trip() {
        let r = analyze(&builtin("pokebnn-toy").unwrap(), AnalyzeOptions::default()).unwrap();
        let text = render_report(&r, ReportFormat::Json);
        let back: CostReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn table_is_sorted_and_stable() {
        let a = analyze(&builtin("resnet50-fp32").unwrap(), AnalyzeOptions::default()).unwrap();
        let b = analyze(&builtin("pokebnn-1.0x").unwrap(), AnalyzeOptions::default()).unwrap();
        let t1 = render_reports(&[a.clone(), b.clone()], ReportFormat::Table);
        let t2 = render_reports(&[b, a], ReportFormat::Table);
        assert_eq!(t1, t2);
        let lines: Vec<&str> = t1.lines().collect();
        assert!(lines[0].starts_with("Model"));
        assert!(lines[2].starts_with("pokebnn-1.0x"));
        assert!(lines[3].starts_with("resnet50-fp32"));
    }
}
