//! Privileged-information feature families.
//!
//! Every family is materialized as a [`PiMatrix`]: one row per training
//! example, fixed width per kind.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relabel::RelabelRecord;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PiKind {
    Original,
    Indicator,
    Labels,
    NearOptimal,
    RandomId,
    Composite,
}

impl PiKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PiKind::Original => "original",
            PiKind::Indicator => "indicator",
            PiKind::Labels => "labels",
            PiKind::NearOptimal => "near_optimal",
            PiKind::RandomId => "random_id",
            PiKind::Composite => "composite",
        }
    }

    /// Kinds whose entries are indicator / one-hot codes.
    pub fn is_categorical(self) -> bool {
        matches!(self, PiKind::Indicator | PiKind::Labels | PiKind::NearOptimal)
    }
}

impl std::str::FromStr for PiKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "original" => PiKind::Original,
            "indicator" => PiKind::Indicator,
            "labels" => PiKind::Labels,
            "near_optimal" => PiKind::NearOptimal,
            "random_id" => PiKind::RandomId,
            "composite" => PiKind::Composite,
            other => return Err(Error::invalid("pi", format!("unknown PI kind `{other}`"))),
        })
    }
}

impl std::fmt::Display for PiKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PiMatrix {
    pub kind: PiKind,
    pub values: Tensor,
}

impl PiMatrix {
    pub fn new(kind: PiKind, values: Tensor) -> Self {
        Self { kind, values }
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn width(&self) -> usize {
        self.values.cols()
    }

    pub fn select_rows(&self, idx: &[usize]) -> PiMatrix {
        PiMatrix::new(self.kind, self.values.select_rows(idx))
    }
}

fn check_same_len(clean: &[usize], noisy: &[usize]) -> Result<()> {
    if clean.len() != noisy.len() {
        return Err(Error::LengthMismatch {
            what: "clean vs noisy labels",
            left: clean.len(),
            right: noisy.len(),
        });
    }
    Ok(())
}

fn check_range(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

/// 1 where the clean and noisy labels agree, 0 otherwise.
pub fn indicator_pi(y_clean: &[usize], y_noisy: &[usize]) -> Result<PiMatrix> {
    check_same_len(y_clean, y_noisy)?;
    let data = y_clean
        .iter()
        .zip(y_noisy)
        .map(|(c, n)| if c == n { 1.0 } else { 0.0 })
        .collect();
    Ok(PiMatrix::new(
        PiKind::Indicator,
        Tensor::from_vec(y_clean.len(), 1, data)?,
    ))
}

/// One-hot encoding of the noisy labels.
pub fn labels_pi(y_noisy: &[usize], classes: usize) -> Result<PiMatrix> {
    Ok(PiMatrix::new(
        PiKind::Labels,
        crate::autodiff::one_hot(y_noisy, classes)?,
    ))
}

/// `[indicator] ++ one-hot(noisy)` on mislabeled rows, `[1] ++ zeros(K)` on clean rows.
pub fn near_optimal_pi(y_clean: &[usize], y_noisy: &[usize], classes: usize) -> Result<PiMatrix> {
    check_same_len(y_clean, y_noisy)?;
    check_range(y_clean, classes)?;
    check_range(y_noisy, classes)?;
    let mut t = Tensor::zeros(y_clean.len(), classes + 1);
    for (i, (&c, &n)) in y_clean.iter().zip(y_noisy).enumerate() {
        if c == n {
            t.set(i, 0, 1.0);
        } else {
            t.set(i, 1 + n, 1.0);
        }
    }
    Ok(PiMatrix::new(PiKind::NearOptimal, t))
}

/// I.i.d. standard-normal rows, one unique vector per example.
pub fn random_id_pi(rows: usize, width: usize, seed: u64) -> Result<PiMatrix> {
    if width == 0 {
        return Err(Error::invalid("width", "random PI width must be >= 1"));
    }
    let mut rng = rng::from_seed(seed);
    let data = (0..rows * width)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Ok(PiMatrix::new(
        PiKind::RandomId,
        Tensor::from_vec(rows, width, data)?,
    ))
}

/// `[confidence, annotator accuracy, log10(annotator parameter count)]` for the
/// annotation chosen on each example.
pub fn annotator_pi(record: &RelabelRecord, chosen: &[usize]) -> Result<PiMatrix> {
    if chosen.len() != record.examples() {
        return Err(Error::LengthMismatch {
            what: "chosen annotators vs relabeled examples",
            left: chosen.len(),
            right: record.examples(),
        });
    }
    if record.annotators.len() != record.annotator_count() {
        return Err(Error::invalid(
            "annotators",
            format!(
                "metadata has {} rows for {} annotators",
                record.annotators.len(),
                record.annotator_count()
            ),
        ));
    }
    let mut t = Tensor::zeros(chosen.len(), 3);
    for (i, &m) in chosen.iter().enumerate() {
        let meta = record.annotators.get(m).ok_or(Error::MissingPi)?;
        t.set(i, 0, record.confidences.get(i, m));
        t.set(i, 1, meta.accuracy);
        t.set(i, 2, (meta.parameters as f64).log10());
    }
    Ok(PiMatrix::new(PiKind::Original, t))
}

/// Column-wise concatenation; a zero-width operand is the identity.
pub fn concat_pi(a: &PiMatrix, b: &PiMatrix) -> Result<PiMatrix> {
    if a.rows() != b.rows() {
        return Err(Error::LengthMismatch {
            what: "PI row counts",
            left: a.rows(),
            right: b.rows(),
        });
    }
    if b.width() == 0 {
        return Ok(a.clone());
    }
    if a.width() == 0 {
        return Ok(b.clone());
    }
    Ok(PiMatrix::new(
        PiKind::Composite,
        a.values.concat_cols(&b.values)?,
    ))
}

/// Per-column affine normalization fitted on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiStats {
    /// `None` marks a zero-variance column that passes through unchanged.
    pub columns: Vec<Option<(f64, f64)>>,
}

impl PiStats {
    pub fn fit(values: &Tensor) -> Self {
        let n = values.rows() as f64;
        let columns = (0..values.cols())
            .map(|c| {
                let mean = (0..values.rows()).map(|r| values.get(r, c)).sum::<f64>() / n;
                let var = (0..values.rows())
                    .map(|r| (values.get(r, c) - mean).powi(2))
                    .sum::<f64>()
                    / n;
                (var > 1e-24).then(|| (mean, var.sqrt()))
            })
            .collect();
        Self { columns }
    }

    pub fn identity(width: usize) -> Self {
        Self {
            columns: vec![None; width],
        }
    }

    pub fn apply(&self, values: &Tensor) -> Result<Tensor> {
        if values.cols() != self.columns.len() {
            return Err(Error::LengthMismatch {
                what: "PI width vs fitted stats",
                left: values.cols(),
                right: self.columns.len(),
            });
        }
        let mut out = values.clone();
        for r in 0..out.rows() {
            for (v, col) in out.row_mut(r).iter_mut().zip(&self.columns) {
                if let Some((mean, std)) = col {
                    *v = (*v - mean) / std;
                }
            }
        }
        Ok(out)
    }
}

/// Standardizes columns with the given stats, or fits them on `a` first.
/// Categorical kinds come back unchanged.
pub fn standardize_pi(a: &PiMatrix, stats: Option<&PiStats>) -> Result<(PiMatrix, PiStats)> {
    if a.kind.is_categorical() {
        return Ok((a.clone(), PiStats::identity(a.width())));
    }
    let stats = match stats {
        Some(s) => s.clone(),
        None => PiStats::fit(&a.values),
    };
    let values = stats.apply(&a.values)?;
    Ok((PiMatrix::new(a.kind, values), stats))
}
