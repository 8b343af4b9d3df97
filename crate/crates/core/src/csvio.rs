//! The five-file annotation layout plus companion feature files.
//!
//! ```text
//! labels-train.csv, labels-validation.csv            <image_id>,<label_1>,...,<label_M>
//! confidences-train.csv, confidences-validation.csv  <image_id>,<confidence_1>,...,<confidence_M>
//! annotator-features.csv                             <model_accuracy>,<number_of_model_parameters>
//! ```
//!
//! No header rows, LF line endings, integers in base 10, confidences with six
//! decimals.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::relabel::{AnnotatorMeta, LabeledDataset, RelabelRecord, Split};
use crate::tensor::Tensor;

pub const ANNOTATOR_FEATURES: &str = "annotator-features.csv";

/// Training and validation annotations sharing one annotator table.
#[derive(Clone, Debug, PartialEq)]
pub struct PiCsv {
    pub train: RelabelRecord,
    pub validation: RelabelRecord,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn labels_body(record: &RelabelRecord) -> String {
    let mut s = String::new();
    for (id, row) in record.ids.iter().zip(&record.labels) {
        write!(s, "{id}").unwrap();
        for l in row {
            write!(s, ",{l}").unwrap();
        }
        s.push('\n');
    }
    s
}

fn confidences_body(record: &RelabelRecord) -> String {
    let mut s = String::new();
    for (i, id) in record.ids.iter().enumerate() {
        write!(s, "{id}").unwrap();
        for &c in record.confidences.row(i) {
            // keep serialized confidences strictly positive
            write!(s, ",{:.6}", c.max(1e-6)).unwrap();
        }
        s.push('\n');
    }
    s
}

fn annotators_body(annotators: &[AnnotatorMeta]) -> String {
    let mut s = String::new();
    for a in annotators {
        writeln!(s, "{:.6},{}", a.accuracy, a.parameters).unwrap();
    }
    s
}

pub fn write_pi_csv(files: &PiCsv, dir: &Path) -> Result<()> {
    if files.train.annotators != files.validation.annotators {
        return Err(Error::invalid(
            "annotators",
            "train and validation records must share annotator metadata",
        ));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, rec) in [("train", &files.train), ("validation", &files.validation)] {
        write_file(&dir.join(format!("labels-{name}.csv")), &labels_body(rec))?;
        write_file(&dir.join(format!("confidences-{name}.csv")), &confidences_body(rec))?;
    }
    write_file(&dir.join(ANNOTATOR_FEATURES), &annotators_body(&files.train.annotators))
}

/// Rows of a header-less CSV file with their 1-based line numbers.
fn read_rows(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let file = path.file_name().map_or_else(String::new, |f| f.to_string_lossy().into_owned());
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Csv {
            file: file.clone(),
            line: 0,
            reason: e.to_string(),
        })?;
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Csv {
            file: file.clone(),
            line: e.position().map_or(0, |p| p.line() as usize),
            reason: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        rows.push((line, rec.iter().map(|f| f.trim().to_owned()).collect()));
    }
    Ok(rows)
}

fn parse<T: std::str::FromStr>(field: &str, file: &str, line: usize) -> Result<T> {
    field.parse::<T>().map_err(|_| Error::Csv {
        file: file.to_owned(),
        line,
        reason: format!("cannot parse field `{field}`"),
    })
}

pub fn read_annotator_features(dir: &Path) -> Result<Vec<AnnotatorMeta>> {
    let rows = read_rows(&dir.join(ANNOTATOR_FEATURES))?;
    rows.iter()
        .map(|(line, f)| {
            if f.len() != 2 {
                return Err(Error::Csv {
                    file: ANNOTATOR_FEATURES.into(),
                    line: *line,
                    reason: format!("expected 2 fields, got {}", f.len()),
                });
            }
            Ok(AnnotatorMeta {
                accuracy: parse(&f[0], ANNOTATOR_FEATURES, *line)?,
                parameters: parse(&f[1], ANNOTATOR_FEATURES, *line)?,
            })
        })
        .collect()
}

fn read_split(dir: &Path, name: &str, annotators: &[AnnotatorMeta]) -> Result<RelabelRecord> {
    let m = annotators.len();
    let labels_file = format!("labels-{name}.csv");
    let conf_file = format!("confidences-{name}.csv");
    let label_rows = read_rows(&dir.join(&labels_file))?;
    let conf_rows = read_rows(&dir.join(&conf_file))?;
    let mut ids = Vec::with_capacity(label_rows.len());
    let mut labels = Vec::with_capacity(label_rows.len());
    for (line, f) in &label_rows {
        if f.len() != m + 1 {
            return Err(Error::Csv {
                file: labels_file.clone(),
                line: *line,
                reason: format!("expected {} annotator columns, got {}", m, f.len().saturating_sub(1)),
            });
        }
        ids.push(parse::<u64>(&f[0], &labels_file, *line)?);
        labels.push(
            f[1..]
                .iter()
                .map(|v| parse::<usize>(v, &labels_file, *line))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    if conf_rows.len() != label_rows.len() {
        return Err(Error::Csv {
            file: conf_file,
            line: conf_rows.len().min(label_rows.len()) + 1,
            reason: format!("{} rows vs {} label rows", conf_rows.len(), label_rows.len()),
        });
    }
    let mut confidences = Tensor::zeros(label_rows.len(), m);
    for (i, (line, f)) in conf_rows.iter().enumerate() {
        if f.len() != m + 1 {
            return Err(Error::Csv {
                file: conf_file.clone(),
                line: *line,
                reason: format!("expected {} annotator columns, got {}", m, f.len().saturating_sub(1)),
            });
        }
        let id: u64 = parse(&f[0], &conf_file, *line)?;
        if id != ids[i] {
            return Err(Error::Csv {
                file: conf_file.clone(),
                line: *line,
                reason: format!("image id {id} does not match label row id {}", ids[i]),
            });
        }
        for (a, v) in f[1..].iter().enumerate() {
            let c: f64 = parse(v, &conf_file, *line)?;
            if !(c > 0.0 && c <= 1.0) {
                return Err(Error::Csv {
                    file: conf_file.clone(),
                    line: *line,
                    reason: format!("confidence {c} outside (0, 1]"),
                });
            }
            confidences.set(i, a, c);
        }
    }
    Ok(RelabelRecord {
        ids,
        labels,
        confidences,
        annotators: annotators.to_vec(),
    })
}

pub fn read_pi_csv(dir: &Path) -> Result<PiCsv> {
    let annotators = read_annotator_features(dir)?;
    Ok(PiCsv {
        train: read_split(dir, "train", &annotators)?,
        validation: read_split(dir, "validation", &annotators)?,
    })
}

/// `<image_id>,<clean_label>,<noisy_label>,<x_1>,...,<x_d>` with shortest
/// round-trip float formatting.
pub fn write_features(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let mut s = String::new();
    for i in 0..dataset.len() {
        write!(s, "{},{},{}", dataset.ids[i], dataset.y_clean[i], dataset.y_noisy[i]).unwrap();
        for v in dataset.x.row(i) {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    write_file(path, &s)
}

pub fn read_features(path: &Path, classes: usize, split: Split) -> Result<LabeledDataset> {
    let file = path.file_name().map_or_else(String::new, |f| f.to_string_lossy().into_owned());
    let rows = read_rows(path)?;
    let dims = rows.first().map_or(0, |(_, f)| f.len().saturating_sub(3));
    let mut ids = Vec::new();
    let mut clean = Vec::new();
    let mut noisy = Vec::new();
    let mut data = Vec::new();
    for (line, f) in &rows {
        if f.len() != dims + 3 {
            return Err(Error::Csv {
                file: file.clone(),
                line: *line,
                reason: format!("expected {} fields, got {}", dims + 3, f.len()),
            });
        }
        ids.push(parse::<u64>(&f[0], &file, *line)?);
        clean.push(parse::<usize>(&f[1], &file, *line)?);
        noisy.push(parse::<usize>(&f[2], &file, *line)?);
        for v in &f[3..] {
            data.push(parse::<f64>(v, &file, *line)?);
        }
    }
    let x = Tensor::from_vec(rows.len(), dims, data)?;
    let mut ds = LabeledDataset::new(x, clean, noisy, classes, split)?;
    ds.ids = ids;
    Ok(ds)
}

/// `<image_id>,<annotator_index>` for the annotation kept by the selection policy.
pub fn write_selection(ids: &[u64], chosen: &[usize], path: &Path) -> Result<()> {
    let mut s = String::new();
    for (id, m) in ids.iter().zip(chosen) {
        writeln!(s, "{id},{m}").unwrap();
    }
    write_file(path, &s)
}

pub fn read_selection(path: &Path) -> Result<Vec<(u64, usize)>> {
    let file = path.file_name().map_or_else(String::new, |f| f.to_string_lossy().into_owned());
    read_rows(path)?
        .iter()
        .map(|(line, f)| {
            if f.len() != 2 {
                return Err(Error::Csv {
                    file: file.clone(),
                    line: *line,
                    reason: format!("expected 2 fields, got {}", f.len()),
                });
            }
            Ok((parse(&f[0], &file, *line)?, parse(&f[1], &file, *line)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(ids: Vec<u64>) -> RelabelRecord {
        let n = ids.len();
        RelabelRecord {
            labels: (0..n).map(|i| vec![i % 3, (i + 1) % 3]).collect(),
            confidences: Tensor::from_vec(n, 2, (0..2 * n).map(|k| 0.1 + 0.01 * k as f64).collect())
                .unwrap(),
            ids,
            annotators: vec![
                AnnotatorMeta { accuracy: 0.75, parameters: 1234 },
                AnnotatorMeta { accuracy: 0.5, parameters: 99 },
            ],
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let files = PiCsv {
            train: record(vec![0, 1, 2, 3]),
            validation: record(vec![10, 11]),
        };
        write_pi_csv(&files, dir.path()).unwrap();
        let back = read_pi_csv(dir.path()).unwrap();
        for (a, b) in [(&back.train, &files.train), (&back.validation, &files.validation)] {
            assert_eq!(a.ids, b.ids);
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.annotators, b.annotators);
            for (x, y) in a.confidences.data().iter().zip(b.confidences.data()) {
                assert!((x - y).abs() <= 5e-7);
            }
        }
        let text = fs::read_to_string(dir.path().join("labels-train.csv")).unwrap();
        assert_eq!(text.lines().next().unwrap(), "0,0,1");
        let meta = fs::read_to_string(dir.path().join(ANNOTATOR_FEATURES)).unwrap();
        assert_eq!(meta, "0.750000,1234\n0.500000,99\n");
    }

    #[test]
    fn column_count_mismatch_names_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let files = PiCsv {
            train: record(vec![0, 1]),
            validation: record(vec![5]),
        };
        write_pi_csv(&files, dir.path()).unwrap();
        fs::write(dir.path().join("labels-train.csv"), "0,1,2\n1,2\n").unwrap();
        let err = read_pi_csv(dir.path()).unwrap_err().to_string();
        assert!(err.starts_with("labels-train.csv:2:"), "{err}");
    }

    #[test]
    fn malformed_field_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let files = PiCsv {
            train: record(vec![0, 1]),
            validation: record(vec![5]),
        };
        write_pi_csv(&files, dir.path()).unwrap();
        fs::write(dir.path().join("confidences-validation.csv"), "5,0.2,abc\n").unwrap();
        let err = read_pi_csv(dir.path()).unwrap_err().to_string();
        assert!(err.starts_with("confidences-validation.csv:1:"), "{err}");
    }

    #[test]
    fn features_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let x = Tensor::from_vec(2, 2, vec![0.1, -3.5e-7, 1.0 / 3.0, 2.0]).unwrap();
        let ds = LabeledDataset::new(x, vec![0, 1], vec![1, 1], 2, Split::Train).unwrap();
        let path = dir.path().join("features-train.csv");
        write_features(&ds, &path).unwrap();
        assert_eq!(read_features(&path, 2, Split::Train).unwrap(), ds);
    }
}
