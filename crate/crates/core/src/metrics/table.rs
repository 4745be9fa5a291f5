use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::MetricError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    Tsv,
    Markdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Better {
    Lower,
    Higher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreColumn {
    pub name: String,
    pub better: Better,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub label: String,
    /// `None` renders as `-` and never wins.
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub label_header: String,
    pub columns: Vec<ScoreColumn>,
    pub rows: Vec<ScoreRow>,
}

const DECIMALS: usize = 2;

fn rounded(v: f64) -> f64 {
    let scale = 10f64.powi(DECIMALS as i32);
    (v * scale).round() / scale
}

/// Renders the table with the best value of every column flagged (`*` suffix
/// in TSV, bold in Markdown). Values compare after rounding to two decimals,
/// so displayed ties are all flagged.
pub fn emit_score_table(table: &ScoreTable, format: TableFormat) -> Result<String, MetricError> {
    let expected = table.columns.len();
    if let Some((row, r)) = table.rows.iter().enumerate().find(|(_, r)| r.values.len() != expected) {
        return Err(MetricError::RaggedRow {
            row,
            found: r.values.len(),
            expected,
        });
    }

    let best: Vec<Option<f64>> = table
        .columns
        .iter()
        .enumerate()
        .map(|(c, col)| {
            let values = table.rows.iter().filter_map(|r| r.values[c]).filter(|v| v.is_finite()).map(rounded);
            match col.better {
                Better::Lower => values.reduce(f64::min),
                Better::Higher => values.reduce(f64::max),
            }
        })
        .collect();

    let cell = |c: usize, v: Option<f64>| -> (String, bool) {
        match v {
            None => ("-".to_string(), false),
            Some(v) => (format!("{v:.DECIMALS$}"), v.is_finite() && Some(rounded(v)) == best[c]),
        }
    };

    let mut out = String::new();
    match format {
        TableFormat::Tsv => {
            out.push_str(&table.label_header);
            for col in &table.columns {
                write!(out, "\t{}", col.name).unwrap();
            }
            out.push('\n');
            for row in &table.rows {
                out.push_str(&row.label);
                for (c, v) in row.values.iter().enumerate() {
                    let (text, is_best) = cell(c, *v);
                    write!(out, "\t{text}{}", if is_best { "*" } else { "" }).unwrap();
                }
                out.push('\n');
            }
        }
        TableFormat::Markdown => {
            write!(out, "| {} |", table.label_header).unwrap();
            for col in &table.columns {
                write!(out, " {} |", col.name).unwrap();
            }
            out.push_str("\n| --- |");
            for _ in &table.columns {
                out.push_str(" --- |");
            }
            out.push('\n');
            for row in &table.rows {
                write!(out, "| {} |", row.label).unwrap();
                for (c, v) in row.values.iter().enumerate() {
                    let (text, is_best) = cell(c, *v);
                    if is_best {
                        write!(out, " **{text}** |").unwrap();
                    } else {
                        write!(out, " {text} |").unwrap();
                    }
                }
                out.push('\n');
            }
        }
    }
    Ok(out)
}
