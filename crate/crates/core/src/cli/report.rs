use std::fmt::Write as _;

use crate::model::parse_pairs;

use super::pipeline::EvalReport;
use super::CliError;

pub const COLUMNS: [&str; 8] = ["BLEU", "Average", "Extreme", "Greedy", "uRank", "uPPL", "uDist-1", "uDist-2"];

/// One table row: a label and the eight metric columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub label: String,
    pub values: [Option<f64>; 8],
}

const KEYS: [&str; 8] = ["bleu1", "embed_average", "embed_extrema", "embed_greedy", "urank", "uppl", "udist1", "udist2"];

impl Row {
    pub fn from_report(r: &EvalReport) -> Self {
        Self {
            label: r.label.clone(),
            values: [
                r.bleu1,
                r.embed.map(|e| e.average),
                r.embed.map(|e| e.extrema),
                r.embed.map(|e| e.greedy),
                r.urank.as_ref().map(|u| u.value),
                r.uppl.as_ref().map(|u| u.value),
                r.udistinct.map(|d| d.distinct1),
                r.udistinct.map(|d| d.distinct2),
            ],
        }
    }

    /// Reads the summary written by [`EvalReport::to_text`].
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let pairs = parse_pairs(text).map_err(|e| CliError::Report(e.to_string()))?;
        let get = |key: &str| pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let label = get("label").ok_or_else(|| CliError::Report("missing `label`".into()))?.to_owned();
        let mut values = [None; 8];
        for (v, key) in values.iter_mut().zip(KEYS) {
            *v = match get(key) {
                None | Some("NA") => None,
                Some(s) => Some(s.parse().map_err(|_| CliError::Report(format!("{key}={s} is not a number")))?),
            };
        }
        Ok(Self { label, values })
    }
}

fn cell(v: Option<f64>, col: usize) -> String {
    match v {
        None => "NA".to_owned(),
        Some(v) if COLUMNS[col] == "uPPL" => format!("{v:.2}"),
        Some(v) => format!("{v:.4}"),
    }
}

/// Fixed-width text table in the given row order.
pub fn render_table(rows: &[Row]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max("Model".len());
    let mut s = String::new();
    write!(s, "{:<width$}", "Model").expect("writing to a String");
    for c in COLUMNS {
        write!(s, "  {c:>8}").expect("writing to a String");
    }
    s.push('\n');
    for r in rows {
        write!(s, "{:<width$}", r.label).expect("writing to a String");
        for (i, v) in r.values.iter().enumerate() {
            write!(s, "  {:>8}", cell(*v, i)).expect("writing to a String");
        }
        s.push('\n');
    }
    s
}

/// Raw values, full precision.
pub fn render_csv(rows: &[Row]) -> String {
    let mut s = String::from("model");
    for c in COLUMNS {
        s.push(',');
        s.push_str(c);
    }
    s.push('\n');
    for r in rows {
        s.push_str(&r.label);
        for v in r.values {
            s.push(',');
            s.push_str(&v.map_or_else(|| "NA".to_owned(), |v| format!("{v:?}")));
        }
        s.push('\n');
    }
    s
}

/// Rows ordered by uRank, best first; rows without uRank go last and ties
/// keep their input order.
pub fn ranked(rows: &[Row]) -> Vec<Row> {
    let mut out = rows.to_vec();
    out.sort_by(|a, b| {
        let key = |r: &Row| r.values[4].unwrap_or(f64::NEG_INFINITY);
        key(b).total_cmp(&key(a))
    });
    out
}
