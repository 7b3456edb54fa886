//! Comma-separated numeric tables with a mandatory header line.

use std::fs;
use std::path::Path;

use crate::error::{GpoError, Result};

/// Reads a table whose rows have between `min_cols` and `max_cols` numeric
/// fields. Blank lines and lines starting with `#` are skipped; the first
/// remaining line is the header and is returned verbatim.
pub fn read_numeric(
    path: &Path,
    min_cols: usize,
    max_cols: usize,
) -> Result<(String, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path).map_err(|e| GpoError::io(path, e))?;
    parse_numeric(&text, min_cols, max_cols).map_err(|msg| GpoError::format(path, msg))
}

pub fn parse_numeric(
    text: &str,
    min_cols: usize,
    max_cols: usize,
) -> std::result::Result<(String, Vec<Vec<f64>>), String> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (_, header) = lines.next().ok_or("missing header line")?;
    if header.split(',').next().is_some_and(|f| f.trim().parse::<f64>().is_ok()) {
        return Err("first line must be a header, found numbers".into());
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < min_cols || fields.len() > max_cols {
            return Err(format!(
                "line {lineno}: expected {min_cols}..={max_cols} fields, found {}",
                fields.len()
            ));
        }
        let row = fields
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| format!("line {lineno}: bad number {f:?}"))
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok((header.to_string(), rows))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| GpoError::io(path, e))
}
