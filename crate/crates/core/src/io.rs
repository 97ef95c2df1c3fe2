//! CSV dataset ingestion and export.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Observation, OutcomeKind};
use crate::error::{Error, Result};

/// Which CSV columns hold the structural variables and covariates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub y: String,
    pub a: String,
    pub s: String,
    pub b: String,
    /// Covariate columns; `None` selects every `x<k>` header, ordered by `k`.
    pub x: Option<Vec<String>>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self { y: "y".into(), a: "a".into(), s: "s".into(), b: "b".into(), x: None }
    }
}

fn default_covariates(headers: &[String]) -> Vec<String> {
    let mut found: Vec<(u32, String)> = headers
        .iter()
        .filter_map(|h| {
            let k = h.strip_prefix('x')?.parse::<u32>().ok()?;
            Some((k, h.clone()))
        })
        .collect();
    found.sort();
    found.into_iter().map(|(_, h)| h).collect()
}

fn parse_error(line: usize, column: &str, message: impl Into<String>) -> Error {
    Error::Parse { row: Some(line), column: Some(column.to_string()), message: message.into() }
}

/// Reads a headed CSV. Row numbers in errors are file line numbers (header is line 1).
///
/// The outcome is binary when every value is 0 or 1, unless `outcome_kind` says otherwise.
pub fn load_dataset(path: impl AsRef<Path>, columns: &ColumnMap, outcome_kind: Option<OutcomeKind>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path.as_ref())?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();
    let covariates = columns.x.clone().unwrap_or_else(|| default_covariates(&headers));
    let locate = |name: &str| {
        index.get(name).copied().ok_or_else(|| Error::Parse {
            row: None,
            column: Some(name.to_string()),
            message: "missing column".into(),
        })
    };
    let (iy, ia, is, ib) = (locate(&columns.y)?, locate(&columns.a)?, locate(&columns.s)?, locate(&columns.b)?);
    let ix = covariates.iter().map(|c| locate(c)).collect::<Result<Vec<_>>>()?;

    let mut observations = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let line = k + 2;
        let record = record?;
        let cell = |i: usize, name: &str| -> Result<f64> {
            let raw = record.get(i).ok_or_else(|| parse_error(line, name, "missing value"))?;
            let v: f64 = raw.parse().map_err(|_| parse_error(line, name, format!("non-numeric value '{raw}'")))?;
            if !v.is_finite() {
                return Err(parse_error(line, name, format!("non-finite value '{raw}'")));
            }
            Ok(v)
        };
        let a = match cell(ia, &columns.a)? {
            0.0 => 0,
            1.0 => 1,
            v => return Err(parse_error(line, &columns.a, format!("treatment must be 0 or 1, got {v}"))),
        };
        let x = ix
            .iter()
            .zip(&covariates)
            .map(|(&i, name)| cell(i, name))
            .collect::<Result<Vec<_>>>()?;
        observations.push(Observation { y: cell(iy, &columns.y)?, a, s: cell(is, &columns.s)?, b: cell(ib, &columns.b)?, x });
    }
    if observations.is_empty() {
        return Err(Error::Parse { row: None, column: None, message: "no data rows".into() });
    }

    let kind = outcome_kind.unwrap_or_else(|| {
        if observations.iter().all(|o| o.y == 0.0 || o.y == 1.0) {
            OutcomeKind::Binary
        } else {
            OutcomeKind::Continuous
        }
    });
    if kind == OutcomeKind::Binary {
        if let Some(k) = observations.iter().position(|o| o.y != 0.0 && o.y != 1.0) {
            return Err(parse_error(k + 2, &columns.y, "binary outcome must be 0 or 1"));
        }
    }
    Dataset::new(observations, kind, covariates)
}

/// Writes `y,a,s,b` and the covariates with full round-trip precision.
pub fn write_dataset<W: std::io::Write>(data: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["y".to_string(), "a".into(), "s".into(), "b".into()];
    header.extend(data.covariate_names().iter().cloned());
    w.write_record(&header)?;
    for o in data.observations() {
        let mut row = vec![format!("{:?}", o.y), o.a.to_string(), format!("{:?}", o.s), format!("{:?}", o.b)];
        row.extend(o.x.iter().map(|v| format!("{v:?}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn csv_file(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn reads_well_formed_file() {
        let f = csv_file("y,a,s,b,x2,x1\n1,1,7.5,2,0.3,0\n0,0,6.25,3,0.9,1\n1,0,5,1,0.1,0\n");
        let d = load_dataset(f.path(), &ColumnMap::default(), None).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.outcome_kind(), OutcomeKind::Binary);
        assert_eq!(d.covariate_names(), ["x1", "x2"]);
        let o = &d.observations()[1];
        assert_eq!((o.y, o.a, o.s, o.b), (0.0, 0, 6.25, 3.0));
        assert_eq!(o.x, vec![1.0, 0.9]);
    }

    #[test]
    fn bad_treatment_names_row_and_column() {
        let f = csv_file("y,a,s,b\n1,1,7,2\n0,2,6,3\n");
        match load_dataset(f.path(), &ColumnMap::default(), None).unwrap_err() {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, Some(3));
                assert_eq!(column.as_deref(), Some("a"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn missing_column_and_non_numeric_cell() {
        let f = csv_file("y,a,b\n1,1,2\n");
        let err = load_dataset(f.path(), &ColumnMap::default(), None).unwrap_err();
        assert!(err.to_string().contains("'s'"), "{err}");
        let f = csv_file("y,a,s,b\n1,1,abc,2\n");
        let err = load_dataset(f.path(), &ColumnMap::default(), None).unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
    }

    #[test]
    fn column_mapping_and_continuous_outcome() {
        let f = csv_file("outcome,arm,marker,base,age\n2.5,1,7,2,40\n-1,0,6,3,50\n");
        let map = ColumnMap {
            y: "outcome".into(),
            a: "arm".into(),
            s: "marker".into(),
            b: "base".into(),
            x: Some(vec!["age".into()]),
        };
        let d = load_dataset(f.path(), &map, None).unwrap();
        assert_eq!(d.outcome_kind(), OutcomeKind::Continuous);
        assert_eq!(d.observations()[1].x, vec![50.0]);
        assert!(load_dataset(f.path(), &map, Some(OutcomeKind::Binary)).is_err());
    }

    #[test]
    fn write_then_read_is_identity() {
        let obs = vec![
            Observation { y: 1.0, a: 1, s: 7.123_456_789_012_345, b: 2.0, x: vec![0.1, 1.0 / 3.0] },
            Observation { y: 0.0, a: 0, s: -0.5, b: 1e-17, x: vec![0.0, 2.0] },
        ];
        let d = Dataset::new(obs, OutcomeKind::Binary, vec!["x1".into(), "x2".into()]).unwrap();
        let mut buf = Vec::new();
        write_dataset(&d, &mut buf).unwrap();
        let f = csv_file(std::str::from_utf8(&buf).unwrap());
        assert_eq!(load_dataset(f.path(), &ColumnMap::default(), None).unwrap(), d);
    }
}
