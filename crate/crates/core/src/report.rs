//! Memorization traces, multi-seed aggregation with significance marking,
//! and CSV/JSON emission.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// One epoch of a dynamics trace. Train accuracies are measured against the
/// noisy labels, split by whether the noisy label is correct.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub lr: f64,
    pub test_acc: f64,
    pub clean_pi: Option<f64>,
    pub mislabeled_pi: Option<f64>,
    pub clean_nopi: Option<f64>,
    pub mislabeled_nopi: Option<f64>,
}

pub const TRACE_HEADER: [&str; 7] = [
    "epoch",
    "lr",
    "test_acc",
    "clean@pi",
    "mislabeled@pi",
    "clean@nopi",
    "mislabeled@nopi",
];

/// `(accuracy on clean rows, accuracy on mislabeled rows)` of `pred` against
/// `y_noisy`; an empty partition is `None`.
pub fn partition_accuracy(
    pred: &[usize],
    y_noisy: &[usize],
    mislabeled: &[bool],
) -> (Option<f64>, Option<f64>) {
    let mut hits = [0usize; 2];
    let mut counts = [0usize; 2];
    for ((p, y), &m) in pred.iter().zip(y_noisy).zip(mislabeled) {
        let k = m as usize;
        counts[k] += 1;
        hits[k] += (p == y) as usize;
    }
    let acc = |k: usize| (counts[k] > 0).then(|| hits[k] as f64 / counts[k] as f64);
    (acc(0), acc(1))
}

/// Trace row from head predictions on the train split. `pi_pred` is `None`
/// for single-head methods.
pub fn trace_epoch(
    epoch: usize,
    lr: f64,
    pi_pred: Option<&[usize]>,
    nopi_pred: Option<&[usize]>,
    y_noisy: &[usize],
    mislabeled: &[bool],
    test_acc: f64,
) -> TraceRow {
    let (clean_pi, mislabeled_pi) =
        pi_pred.map_or((None, None), |p| partition_accuracy(p, y_noisy, mislabeled));
    let (clean_nopi, mislabeled_nopi) =
        nopi_pred.map_or((None, None), |p| partition_accuracy(p, y_noisy, mislabeled));
    TraceRow {
        epoch,
        lr,
        test_acc,
        clean_pi,
        mislabeled_pi,
        clean_nopi,
        mislabeled_nopi,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn write_trace_csv(rows: &[TraceRow], path: &Path) -> Result<()> {
    let mut out = TRACE_HEADER.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch,
            r.lr,
            r.test_acc,
            opt(r.clean_pi),
            opt(r.mislabeled_pi),
            opt(r.clean_nopi),
            opt(r.mislabeled_nopi)
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRow>> {
    let file = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Csv {
            file: file.clone(),
            line: 0,
            reason: e.to_string(),
        })?;
    let header = reader.headers().map_err(|e| Error::Csv {
        file: file.clone(),
        line: 1,
        reason: e.to_string(),
    })?;
    if header.iter().ne(TRACE_HEADER) {
        return Err(Error::Csv {
            file,
            line: 1,
            reason: "unexpected trace header".into(),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let bad = |reason: String| Error::Csv {
            file: file.clone(),
            line,
            reason,
        };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let num = |k: usize| -> Result<f64> {
            rec[k]
                .parse::<f64>()
                .map_err(|e| bad(format!("column {}: {e}", TRACE_HEADER[k])))
        };
        let maybe = |k: usize| -> Result<Option<f64>> {
            if rec[k].is_empty() {
                Ok(None)
            } else {
                num(k).map(Some)
            }
        };
        rows.push(TraceRow {
            epoch: rec[0]
                .parse()
                .map_err(|e| bad(format!("column epoch: {e}")))?,
            lr: num(1)?,
            test_acc: num(2)?,
            clean_pi: maybe(3)?,
            mislabeled_pi: maybe(4)?,
            clean_nopi: maybe(5)?,
            mislabeled_nopi: maybe(6)?,
        });
    }
    Ok(rows)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample standard deviation; `None` below two samples.
pub fn sample_std(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    Some((ss / (xs.len() - 1) as f64).sqrt())
}

/// Two-sided Welch t-test p-value.
///
/// Samples with fewer than two values cannot support a claim and return 1.
/// Two zero-variance samples return 1 when the means agree and 0 otherwise.
pub fn welch_p_value(a: &[f64], b: &[f64]) -> f64 {
    if a.len() < 2 || b.len() < 2 {
        return 1.0;
    }
    let (ma, mb) = (mean(a), mean(b));
    let va = sample_std(a).unwrap().powi(2) / a.len() as f64;
    let vb = sample_std(b).unwrap().powi(2) / b.len() as f64;
    let se2 = va + vb;
    if se2 == 0.0 {
        return if ma == mb { 1.0 } else { 0.0 };
    }
    let t = (ma - mb).abs() / se2.sqrt();
    let df = se2 * se2
        / (va * va / (a.len() - 1) as f64 + vb * vb / (b.len() - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * (1.0 - dist.cdf(t))).clamp(0.0, 1.0)
}

pub const SIGNIFICANCE: f64 = 0.05;

/// Per-seed accuracies of one (group, method, PI kind) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellInput {
    pub group: String,
    pub method: String,
    pub pi: String,
    pub accuracies: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableCell {
    pub group: String,
    pub method: String,
    pub pi: String,
    pub seeds: usize,
    pub mean: f64,
    pub std: Option<f64>,
    pub bold: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub cells: Vec<TableCell>,
}

/// Mean ± unbiased std per cell; within each group the max-mean cell and every
/// cell whose Welch p-value against it is ≥ 0.05 are bold. Accuracies are
/// sorted before use, so seed order never matters; cells come out sorted by
/// (group, method, pi).
pub fn aggregate(inputs: &[CellInput]) -> Result<ResultTable> {
    let mut groups: BTreeMap<&str, Vec<(&CellInput, Vec<f64>)>> = BTreeMap::new();
    for c in inputs {
        if c.accuracies.is_empty() {
            return Err(Error::invalid(
                "cell",
                format!("{}/{}/{} has no seeds", c.group, c.method, c.pi),
            ));
        }
        let mut acc = c.accuracies.clone();
        acc.sort_by(f64::total_cmp);
        groups.entry(&c.group).or_default().push((c, acc));
    }
    let mut cells = Vec::new();
    for (_, mut members) in groups {
        members.sort_by(|a, b| (&a.0.method, &a.0.pi).cmp(&(&b.0.method, &b.0.pi)));
        let means: Vec<f64> = members.iter().map(|(_, a)| mean(a)).collect();
        let top = (0..members.len())
            .max_by(|&i, &j| means[i].total_cmp(&means[j]).then(j.cmp(&i)))
            .expect("non-empty group");
        for (i, (c, acc)) in members.iter().enumerate() {
            let bold = i == top || welch_p_value(acc, &members[top].1) >= SIGNIFICANCE;
            cells.push(TableCell {
                group: c.group.clone(),
                method: c.method.clone(),
                pi: c.pi.clone(),
                seeds: acc.len(),
                mean: means[i],
                std: sample_std(acc),
                bold,
            });
        }
    }
    Ok(ResultTable { cells })
}

pub fn write_table_json(table: &ResultTable, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(table)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_table_json(path: &Path) -> Result<ResultTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_table_csv(table: &ResultTable, path: &Path) -> Result<()> {
    let mut out = String::from("group,method,pi,seeds,mean,std,bold\n");
    for c in &table.cells {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            c.group,
            c.method,
            c.pi,
            c.seeds,
            c.mean,
            opt(c.std),
            c.bold
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Area under the ROC curve of `scores` for the positives in `labels`,
/// with tied scores counted as one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "scores vs labels",
            left: scores.len(),
            right: labels.len(),
        });
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("labels", "need both positives and negatives"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks over ties, ranks start at 1
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(group: &str, method: &str, acc: &[f64]) -> CellInput {
        CellInput {
            group: group.into(),
            method: method.into(),
            pi: "none".into(),
            accuracies: acc.to_vec(),
        }
    }

    #[test]
    fn partitions() {
        let (c, m) = partition_accuracy(&[0, 1, 2, 3], &[0, 1, 1, 3], &[false, false, true, true]);
        assert_eq!((c, m), (Some(1.0), Some(0.5)));
        let (c, m) = partition_accuracy(&[0, 1], &[0, 0], &[false, false]);
        assert_eq!((c, m), (Some(0.5), None));
    }

    #[test]
    fn single_head_trace_marks_pi_absent() {
        let row = trace_epoch(3, 0.1, None, Some(&[0, 1]), &[0, 1], &[false, false], 0.7);
        assert_eq!(row.clean_pi, None);
        assert_eq!(row.mislabeled_nopi, None);
        assert_eq!(row.clean_nopi, Some(1.0));
    }

    #[test]
    fn mean_and_std() {
        let t = aggregate(&[cell("g", "m", &[0.60, 0.62, 0.61])]).unwrap();
        let c = &t.cells[0];
        assert!((c.mean - 0.61).abs() < 1e-12);
        assert!((c.std.unwrap() - 0.01).abs() < 1e-12);
        assert!(c.bold);
    }

    #[test]
    fn identical_samples_both_bold() {
        let t = aggregate(&[cell("g", "a", &[0.5, 0.6, 0.7]), cell("g", "b", &[0.7, 0.5, 0.6])])
            .unwrap();
        assert!(t.cells.iter().all(|c| c.bold));
    }

    #[test]
    fn clearly_worse_not_bold() {
        let t = aggregate(&[
            cell("g", "a", &[0.90, 0.91, 0.92, 0.90, 0.91]),
            cell("g", "b", &[0.50, 0.51, 0.52, 0.50, 0.49]),
            cell("h", "b", &[0.1, 0.2]),
        ])
        .unwrap();
        let bold: Vec<_> = t.cells.iter().map(|c| (c.group.as_str(), c.method.as_str(), c.bold)).collect();
        assert_eq!(bold, vec![("g", "a", true), ("g", "b", false), ("h", "b", true)]);
    }

    #[test]
    fn welch_reference_value() {
        // t = -2.0, df = 8 (equal n and variances) -> p = 0.0805
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [3.0, 4.0, 5.0, 6.0, 7.0];
        let p = welch_p_value(&a, &b);
        assert!((p - 0.080_516).abs() < 1e-5, "{p}");
    }

    #[test]
    fn welch_degenerate() {
        assert_eq!(welch_p_value(&[1.0, 1.0], &[1.0, 1.0]), 1.0);
        assert_eq!(welch_p_value(&[1.0, 1.0], &[2.0, 2.0]), 0.0);
        assert_eq!(welch_p_value(&[1.0], &[2.0, 2.5]), 1.0);
    }

    #[test]
    fn empty_cell_errors() {
        assert!(aggregate(&[cell("g", "m", &[])]).is_err());
    }

    #[test]
    fn trace_csv_round_trip_with_absent() {
        let rows = vec![
            TraceRow {
                epoch: 0,
                lr: 0.1,
                test_acc: 0.25,
                clean_pi: None,
                mislabeled_pi: None,
                clean_nopi: Some(0.3),
                mislabeled_nopi: None,
            },
            TraceRow {
                epoch: 1,
                lr: 0.02,
                test_acc: 0.5,
                clean_pi: Some(0.1),
                mislabeled_pi: Some(1.0),
                clean_nopi: Some(1.0 / 3.0),
                mislabeled_nopi: Some(0.0),
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_trace_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,lr,test_acc,clean@pi,mislabeled@pi,clean@nopi,mislabeled@nopi\n"));
        assert!(text.contains("0,0.1,0.25,,,0.3,\n"));
        assert_eq!(read_trace_csv(&path).unwrap(), rows);
    }

    #[test]
    fn table_json_round_trip_uses_null() {
        let t = aggregate(&[cell("g", "m", &[0.5])]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        write_table_json(&t, &path).unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().contains("\"std\": null"));
        assert_eq!(read_table_json(&path).unwrap(), t);
    }

    #[test]
    fn auroc_values() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]).unwrap(), 0.0);
        assert_eq!(auroc(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
        assert!(auroc(&[0.5], &[true]).is_err());
    }
}
