//! CSV ingestion. Empty cells and `NA` mark a missing outcome.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{MultiSample, Sample};
use crate::error::{Error, Result};

/// Column roles in an input table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ColumnRoles {
    /// One outcome gives a [`Sample`], several give a [`MultiSample`].
    pub outcomes: Vec<String>,
    /// Covariate columns; `None` takes every column that has no other role.
    pub covariates: Option<Vec<String>>,
    /// Optional 0/1 response indicator. Without it, response is the presence
    /// of the outcome value.
    pub response: Option<String>,
}

/// Parsed input.
#[derive(Clone, Debug, PartialEq)]
pub enum Loaded {
    Single(Sample),
    Multi(MultiSample),
}

impl Loaded {
    pub fn n(&self) -> usize {
        match self {
            Loaded::Single(s) => s.n(),
            Loaded::Multi(m) => m.n(),
        }
    }

    /// Share of missing outcome cells.
    pub fn missing_rate(&self) -> f64 {
        match self {
            Loaded::Single(s) => s.n_nonrespondents() as f64 / s.n() as f64,
            Loaded::Multi(m) => {
                let missing = (0..m.n())
                    .map(|i| (0..m.p()).filter(|&k| m.y_cell(i, k).is_none()).count())
                    .sum::<usize>();
                missing as f64 / (m.n() * m.p()) as f64
            }
        }
    }
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c == "NA"
}

fn parse_cell(cell: &str, column: &str, line: usize) -> Result<f64> {
    let v: f64 = cell.trim().parse().map_err(|_| Error::NonNumeric {
        column: column.to_string(),
        line,
        value: cell.to_string(),
    })?;
    if !v.is_finite() {
        return Err(Error::NonNumeric {
            column: column.to_string(),
            line,
            value: cell.to_string(),
        });
    }
    Ok(v)
}

pub fn load_csv(path: impl AsRef<Path>, roles: &ColumnRoles) -> Result<Loaded> {
    let file = File::open(path.as_ref())
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.as_ref().display())))?;
    let loaded = read_csv(file, roles)?;
    log::info!(
        "read {} rows from {}; {:.1}% of outcome cells missing",
        loaded.n(),
        path.as_ref().display(),
        100.0 * loaded.missing_rate()
    );
    Ok(loaded)
}

/// Parse a CSV stream with a header row. Line numbers in errors count the
/// header as line 1.
pub fn read_csv<R: Read>(input: R, roles: &ColumnRoles) -> Result<Loaded> {
    if roles.outcomes.is_empty() {
        return Err(Error::InvalidArgument("no outcome column given".into()));
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(input);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_parse_error(&e))?
        .iter()
        .map(str::to_string)
        .collect();
    let index = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::BadColumn(name.to_string()))
    };
    let outcome_idx: Vec<usize> = roles.outcomes.iter().map(|c| index(c)).collect::<Result<_>>()?;
    let response_idx = roles.response.as_deref().map(index).transpose()?;
    let covariate_idx: Vec<usize> = match &roles.covariates {
        Some(cols) => cols.iter().map(|c| index(c)).collect::<Result<_>>()?,
        None => (0..header.len())
            .filter(|j| !outcome_idx.contains(j) && Some(*j) != response_idx)
            .collect(),
    };
    if roles.outcomes.len() > 1 && response_idx.is_some() {
        return Err(Error::InvalidArgument(
            "a response column applies to a single outcome only".into(),
        ));
    }

    let p = outcome_idx.len();
    let d = covariate_idx.len();
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut delta = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_parse_error(&e))?;
        let line = rec.position().map_or(0, |pos| pos.line() as usize);
        for &j in &covariate_idx {
            let cell = &rec[j];
            if is_missing(cell) {
                return Err(Error::Parse {
                    line,
                    message: format!("covariate `{}` is missing", header[j]),
                });
            }
            x.push(parse_cell(cell, &header[j], line)?);
        }
        for &j in &outcome_idx {
            let cell = &rec[j];
            y.push(if is_missing(cell) { None } else { Some(parse_cell(cell, &header[j], line)?) });
        }
        if let Some(j) = response_idx {
            let v = parse_cell(&rec[j], &header[j], line)?;
            if v != 0.0 && v != 1.0 {
                return Err(Error::Parse {
                    line,
                    message: format!("response indicator `{}` must be 0 or 1, got {v}", header[j]),
                });
            }
            delta.push(v == 1.0);
        }
    }
    let n = y.len() / p;
    if n == 0 {
        return Err(Error::Parse {
            line: 1,
            message: "no data rows".into(),
        });
    }
    let covariate_names: Vec<String> = covariate_idx.iter().map(|&j| header[j].clone()).collect();
    if p == 1 {
        if response_idx.is_none() {
            delta = y.iter().map(Option::is_some).collect();
        }
        Ok(Loaded::Single(Sample::from_flat(n, d, x, y, delta)?.with_names(covariate_names)?))
    } else {
        let ms = MultiSample::new(n, p, y, d, x)?.with_names(roles.outcomes.clone(), covariate_names)?;
        Ok(Loaded::Multi(ms))
    }
}

fn csv_parse_error(e: &csv::Error) -> Error {
    Error::Parse {
        line: e.position().map_or(0, |p| p.line() as usize),
        message: e.to_string(),
    }
}
