//! Eigenvalue-gap heuristic for the number of common axes.

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const DEFAULT_GAP_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct ScreeSuggestion {
    /// d_j - d_{j+1}, j = 1..K-1
    pub gaps: Vec<f64>,
    pub q: usize,
    /// every gap is zero (to rounding); q defaults to 1
    pub flat: bool,
}

/// Largest j whose gap d_j - d_{j+1} exceeds `fraction` of the largest gap.
pub fn suggest_q(values: &[f64], fraction: f64) -> Result<ScreeSuggestion> {
    if values.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "scree needs at least 2 eigenvalues, got {}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("eigenvalues must be finite".into()));
    }
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("gap fraction {fraction} must lie in [0, 1)")));
    }
    let gaps: Vec<f64> = values.windows(2).map(|w| w[0] - w[1]).collect();
    let max_gap = gaps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_gap <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
        return Ok(ScreeSuggestion { gaps, q: 1, flat: true });
    }
    let q = gaps
        .iter()
        .rposition(|&g| g > fraction * max_gap)
        .map_or(1, |j| j + 1);
    Ok(ScreeSuggestion { gaps, q, flat: false })
}

/// Parse a `study,d_1..d_q` table.
pub fn parse_eigenvalue_table(text: &str) -> Result<Vec<(String, Vec<f64>)>> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Schema("empty eigenvalue table".into()))?;
    let width = header.split(',').count();
    if width < 2 {
        return Err(Error::Schema("eigenvalue table has no value columns".into()));
    }
    let mut rows = Vec::new();
    for (line_no, line) in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != width {
            return Err(Error::Parse {
                row: line_no + 1,
                column: cells.len(),
                detail: format!("expected {width} columns"),
            });
        }
        let values = cells[1..]
            .iter()
            .enumerate()
            .map(|(c, v)| {
                v.trim().parse::<f64>().map_err(|e| Error::Parse {
                    row: line_no + 1,
                    column: c + 2,
                    detail: format!("`{v}`: {e}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push((cells[0].to_string(), values));
    }
    Ok(rows)
}

/// Gap table `study,j,eigenvalue,gap,suggested_q` plus the suggestions.
pub fn gap_table(rows: &[(String, Vec<f64>)], fraction: f64) -> Result<(String, Vec<ScreeSuggestion>)> {
    let mut out = String::from("study,j,eigenvalue,gap,suggested_q\n");
    let mut suggestions = Vec::with_capacity(rows.len());
    for (study, values) in rows {
        let s = suggest_q(values, fraction)?;
        if s.flat {
            log::warn!("study `{study}`: flat spectrum, defaulting to q = 1");
        }
        for (j, v) in values.iter().enumerate() {
            let gap = s.gaps.get(j).map_or(String::new(), |g| g.to_string());
            let _ = writeln!(out, "{study},{},{v},{gap},{}", j + 1, s.q);
        }
        suggestions.push(s);
    }
    Ok((out, suggestions))
}
