//! Feature export: `#kwd-embeddings v1,dim=<s>` followed by one
//! `<id>,<label>,<f1>,…,<fs>` line per patch.

use std::fmt::Write as _;

use aerocon_core::numerics::Tensor;

pub const HEADER_PREFIX: &str = "#kwd-embeddings v1,dim=";

/// One exported row: an identifier (no commas), an optional label and the
/// feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub id: String,
    pub label: Option<u8>,
    pub features: Vec<f64>,
}

/// Renders rows with 17 significant digits, enough to recover every f64.
pub fn render(dim: usize, rows: &[Row]) -> Result<String, String> {
    let mut out = format!("{HEADER_PREFIX}{dim}\n");
    for r in rows {
        if r.id.contains([',', '\n']) {
            return Err(format!("id {:?} contains a separator", r.id));
        }
        if r.features.len() != dim {
            return Err(format!("{} has {} features, expected {dim}", r.id, r.features.len()));
        }
        out.push_str(&r.id);
        match r.label {
            Some(l) => write!(out, ",{l}").unwrap(),
            None => out.push_str(",-"),
        }
        for f in &r.features {
            write!(out, ",{f:.16e}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn rows_from(ids: Vec<String>, labels: Vec<Option<u8>>, features: &Tensor) -> Vec<Row> {
    ids.into_iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (id, label))| Row {
            id,
            label,
            features: features.row(i).to_vec(),
        })
        .collect()
}

pub fn parse(text: &str) -> Result<(usize, Vec<Row>), String> {
    let mut lines = text.lines();
    let dim: usize = lines
        .next()
        .and_then(|h| h.strip_prefix(HEADER_PREFIX))
        .and_then(|d| d.parse().ok())
        .ok_or_else(|| format!("header must be {HEADER_PREFIX}<dim>"))?;
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let mut f = line.split(',');
        let id = f.next().unwrap_or_default().to_string();
        let label = match f.next() {
            Some("-") => None,
            Some(l) => Some(l.parse().map_err(|_| format!("line {}: bad label {l:?}", i + 2))?),
            None => return Err(format!("line {}: missing label", i + 2)),
        };
        let features = f
            .map(|v| v.parse::<f64>().map_err(|_| format!("line {}: bad value {v:?}", i + 2)))
            .collect::<Result<Vec<f64>, String>>()?;
        if features.len() != dim {
            return Err(format!("line {}: {} values, expected {dim}", i + 2, features.len()));
        }
        rows.push(Row { id, label, features });
    }
    Ok((dim, rows))
}
