//! Feature CSV ingestion and export.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use jemcal_core::data::Dataset;
use jemcal_core::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum CsvError {
    #[error("{path}: {cause}")]
    Io {
        path: PathBuf,
        cause: std::io::Error,
    },
    #[error("{path}: {cause}")]
    Csv { path: PathBuf, cause: csv::Error },
    #[error("{path}: file contains no data rows")]
    Empty { path: PathBuf },
    #[error("{path}: row {row}: expected {expected} columns, found {found}")]
    Ragged {
        path: PathBuf,
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("{path}: row {row}, column {column}: `{cell}` is not a number")]
    NotNumeric {
        path: PathBuf,
        row: usize,
        column: usize,
        cell: String,
    },
    #[error("{path}: row {row}: label `{cell}` is not in 0..{classes}")]
    BadLabel {
        path: PathBuf,
        row: usize,
        cell: String,
        classes: usize,
    },
    #[error("{path}: label column {column} does not exist ({width} columns)")]
    LabelColumn { path: PathBuf, column: usize, width: usize },
    #[error("{path}: need at least one feature column")]
    NoFeatures { path: PathBuf },
    #[error("{path}: {cause}")]
    Dataset {
        path: PathBuf,
        cause: jemcal_core::Error,
    },
}

fn is_numeric(cell: &str) -> bool {
    cell.trim().parse::<f64>().is_ok()
}

/// Optional header plus `(line number, cells)` rows.
pub type Table = (Option<Vec<String>>, Vec<(usize, Vec<String>)>);

/// Reads a numeric table. The first row is treated as a header when any
/// of its cells fails to parse as a number. Rows are numbered from 1 as
/// they appear in the file.
pub fn read_table<R: Read>(reader: R, path: &Path) -> Result<Table, CsvError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|cause| CsvError::Csv {
            path: path.to_path_buf(),
            cause,
        })?;
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        let line = rec.position().map_or(rows.len() + 1, |p| p.line() as usize);
        rows.push((line, rec.iter().map(str::to_owned).collect::<Vec<_>>()));
    }
    let header = match rows.first() {
        Some((_, first)) if !first.iter().all(|c| is_numeric(c)) => Some(rows.remove(0).1),
        _ => None,
    };
    if rows.is_empty() {
        return Err(CsvError::Empty { path: path.to_path_buf() });
    }
    let width = header.as_ref().map_or(rows[0].1.len(), Vec::len);
    for (row, cells) in &rows {
        if cells.len() != width {
            return Err(CsvError::Ragged {
                path: path.to_path_buf(),
                row: *row,
                expected: width,
                found: cells.len(),
            });
        }
    }
    Ok((header, rows))
}

pub fn parse_cell(cell: &str, path: &Path, row: usize, column: usize) -> Result<f64, CsvError> {
    cell.parse::<f64>().map_err(|_| CsvError::NotNumeric {
        path: path.to_path_buf(),
        row,
        column: column + 1,
        cell: cell.to_owned(),
    })
}

fn parse_label(cell: &str, classes: usize, path: &Path, row: usize) -> Result<usize, CsvError> {
    let bad = || CsvError::BadLabel {
        path: path.to_path_buf(),
        row,
        cell: cell.to_owned(),
        classes,
    };
    let v: f64 = cell.parse().map_err(|_| bad())?;
    if v.fract() != 0.0 || v < 0.0 || v >= classes as f64 {
        return Err(bad());
    }
    Ok(v as usize)
}

/// Parses labelled feature rows; `label_column` defaults to the last column.
pub fn parse_dataset<R: Read>(
    reader: R,
    path: &Path,
    label_column: Option<usize>,
    classes: usize,
) -> Result<Dataset, CsvError> {
    let (_, rows) = read_table(reader, path)?;
    let width = rows[0].1.len();
    let label_col = label_column.unwrap_or(width.saturating_sub(1));
    if label_col >= width {
        return Err(CsvError::LabelColumn {
            path: path.to_path_buf(),
            column: label_col,
            width,
        });
    }
    if width < 2 {
        return Err(CsvError::NoFeatures { path: path.to_path_buf() });
    }
    let mut features = Vec::with_capacity(rows.len() * (width - 1));
    let mut labels = Vec::with_capacity(rows.len());
    for (row, cells) in &rows {
        for (j, cell) in cells.iter().enumerate() {
            if j == label_col {
                labels.push(parse_label(cell, classes, path, *row)?);
            } else {
                features.push(parse_cell(cell, path, *row, j)?);
            }
        }
    }
    let x = Tensor::new(&[rows.len(), width - 1], features).expect("row widths were checked");
    Dataset::new(x, labels, classes).map_err(|cause| CsvError::Dataset {
        path: path.to_path_buf(),
        cause,
    })
}

pub fn ingest_csv(path: &Path, label_column: Option<usize>, classes: usize) -> Result<Dataset, CsvError> {
    let file = std::fs::File::open(path).map_err(|cause| CsvError::Io {
        path: path.to_path_buf(),
        cause,
    })?;
    parse_dataset(std::io::BufReader::new(file), path, label_column, classes)
}

/// Writes `f0,…,label` rows; floats round-trip exactly.
pub fn write_dataset<W: Write>(out: W, ds: &Dataset) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = ds.input_dim();
    let mut header: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.features().row(i).iter().map(|&v| crate::report::num(v)).collect();
        rec.push(ds.labels()[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush()
}

pub fn export_csv(path: &Path, ds: &Dataset) -> std::io::Result<()> {
    write_dataset(std::io::BufWriter::new(std::fs::File::create(path)?), ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use jemcal_core::data::gen_gaussian_mixture;

    fn parse(text: &str, label: Option<usize>, k: usize) -> Result<Dataset, CsvError> {
        parse_dataset(text.as_bytes(), Path::new("t.csv"), label, k)
    }

    #[test]
    fn export_round_trips_bit_exactly() {
        let ds = gen_gaussian_mixture(3, 4, 30, 1.7, 3).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds).unwrap();
        let back = parse(std::str::from_utf8(&buf).unwrap(), None, 3).unwrap();
        assert_eq!(back.features(), ds.features());
        assert_eq!(back.labels(), ds.labels());
    }

    #[test]
    fn header_is_detected() {
        let with = parse("a,b,y\n1,2,0\n3,4,1\n", None, 2).unwrap();
        let without = parse("1,2,0\n3,4,1\n", None, 2).unwrap();
        assert_eq!(with, without);
        assert_eq!(with.len(), 2);
    }

    #[test]
    fn label_column_can_be_first() {
        let ds = parse("1,0.5,0.25\n0,1.5,2.5\n", Some(0), 2).unwrap();
        assert_eq!(ds.labels(), &[1, 0]);
        assert_eq!(ds.features().row(1), &[1.5, 2.5]);
    }

    #[test]
    fn errors_carry_row_numbers() {
        let e = parse("x,y\n1,0\n1,2,0\n", None, 2).unwrap_err();
        assert!(matches!(e, CsvError::Ragged { row: 3, expected: 2, found: 3, .. }), "{e}");
        let e = parse("1,0\nabc,1\n", None, 2).unwrap_err();
        assert!(matches!(e, CsvError::NotNumeric { row: 2, column: 1, .. }), "{e}");
        let e = parse("1,0\n2,5\n", None, 2).unwrap_err();
        assert!(matches!(e, CsvError::BadLabel { row: 2, .. }), "{e}");
        assert!(e.to_string().contains("row 2"));
        let e = parse("1,0\n2,0.5\n", None, 2).unwrap_err();
        assert!(matches!(e, CsvError::BadLabel { row: 2, .. }));
    }

    #[test]
    fn empty_inputs_are_rejected() {
        assert!(matches!(parse("", None, 2), Err(CsvError::Empty { .. })));
        assert!(matches!(parse("a,b\n", None, 2), Err(CsvError::Empty { .. })));
        assert!(matches!(parse("1\n2\n", None, 2), Err(CsvError::NoFeatures { .. })));
        assert!(matches!(parse("1,0\n", Some(5), 2), Err(CsvError::LabelColumn { .. })));
    }
}
