//! Synthetic datasets and annotator-ensemble relabeling.
//!
//! Clean data comes from [`make_synthetic`]. Each annotator's predictive
//! distribution is sharpened or flattened by a random temperature drawn from
//! an exponential distribution with rate `beta`, one draw per (example,
//! annotator) pair, and a label is sampled from the result. A selection
//! policy then keeps one annotation per example.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pi::PiMatrix;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Probabilities below this are clamped before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub ids: Vec<u64>,
    pub x: Tensor,
    pub y_clean: Vec<usize>,
    pub y_noisy: Vec<usize>,
    pub pi: Option<PiMatrix>,
    pub classes: usize,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(
        x: Tensor,
        y_clean: Vec<usize>,
        y_noisy: Vec<usize>,
        classes: usize,
        split: Split,
    ) -> Result<Self> {
        let n = x.rows();
        for (what, len) in [("clean labels vs rows", y_clean.len()), ("noisy labels vs rows", y_noisy.len())] {
            if len != n {
                return Err(Error::LengthMismatch { what, left: len, right: n });
            }
        }
        if let Some(&label) = y_clean.iter().chain(&y_noisy).find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Self {
            ids: (0..n as u64).collect(),
            x,
            y_clean,
            y_noisy,
            pi: None,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn dims(&self) -> usize {
        self.x.cols()
    }

    pub fn with_pi(mut self, pi: PiMatrix) -> Result<Self> {
        if self.split == Split::Test {
            return Err(Error::invalid("pi", "test split never carries PI"));
        }
        if pi.rows() != self.len() {
            return Err(Error::LengthMismatch {
                what: "PI rows vs examples",
                left: pi.rows(),
                right: self.len(),
            });
        }
        self.pi = Some(pi);
        Ok(self)
    }

    pub fn with_noisy(mut self, y_noisy: Vec<usize>) -> Result<Self> {
        if y_noisy.len() != self.len() {
            return Err(Error::LengthMismatch {
                what: "noisy labels vs rows",
                left: y_noisy.len(),
                right: self.len(),
            });
        }
        self.y_noisy = y_noisy;
        Ok(self)
    }

    /// Rows `idx` as a new dataset tagged `split`.
    pub fn subset(&self, idx: &[usize], split: Split) -> LabeledDataset {
        LabeledDataset {
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
            x: self.x.select_rows(idx),
            y_clean: idx.iter().map(|&i| self.y_clean[i]).collect(),
            y_noisy: idx.iter().map(|&i| self.y_noisy[i]).collect(),
            pi: if split == Split::Test {
                None
            } else {
                self.pi.as_ref().map(|p| p.select_rows(idx))
            },
            classes: self.classes,
            split,
        }
    }

    /// Fraction of examples whose noisy label equals the clean label.
    pub fn agreement(&self) -> f64 {
        agreement(&self.y_clean, &self.y_noisy)
    }

    pub fn mislabeled_mask(&self) -> Vec<bool> {
        self.y_clean
            .iter()
            .zip(&self.y_noisy)
            .map(|(c, n)| c != n)
            .collect()
    }
}

pub fn agreement(a: &[usize], b: &[usize]) -> f64 {
    if a.is_empty() {
        return 1.0;
    }
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
}

/// Parameters of the Gaussian-cluster generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub size: usize,
    pub dims: usize,
    /// Standard deviation of each cluster around its centroid.
    pub cluster_spread: f64,
    /// Distance scale of the centroids from the origin.
    pub centroid_scale: f64,
    /// Sub-clusters per class; above 1 the classes stop being linearly separable.
    #[serde(default = "one")]
    pub modes: usize,
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl SyntheticSpec {
    pub fn new(classes: usize, size: usize, dims: usize, cluster_spread: f64, seed: u64) -> Self {
        Self {
            classes,
            size,
            dims,
            cluster_spread,
            centroid_scale: 1.0,
            modes: 1,
            seed,
        }
    }
}

/// Centroids of the generator. Row `c` belongs to class `c % classes`.
pub fn synthetic_centroids(spec: &SyntheticSpec) -> Tensor {
    let mut rng = rng::stream(spec.seed, "centroids", 0);
    let rows = spec.classes * spec.modes;
    let data = (0..rows * spec.dims)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * spec.centroid_scale
        })
        .collect();
    Tensor::from_vec(rows, spec.dims, data).expect("centroid shape")
}

/// Draws `spec.size` points, `spec.classes` isotropic Gaussian clusters with
/// uniformly drawn cluster index as the clean label. Noisy labels start equal
/// to the clean ones.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    make_synthetic_stream(spec, 0, spec.size, Split::Train)
}

/// As [`make_synthetic`], drawing an independent sample from the same
/// clusters on stream `stream` (e.g. a held-out split).
pub fn make_synthetic_stream(
    spec: &SyntheticSpec,
    stream: u64,
    size: usize,
    split: Split,
) -> Result<LabeledDataset> {
    if spec.classes < 2 {
        return Err(Error::invalid("classes", "need at least 2 classes"));
    }
    if spec.dims < 2 {
        return Err(Error::invalid("dims", "need at least 2 dimensions"));
    }
    if !(spec.cluster_spread >= 0.0) {
        return Err(Error::invalid("cluster_spread", "must be non-negative"));
    }
    if spec.modes == 0 {
        return Err(Error::invalid("modes", "need at least one mode per class"));
    }
    let centroids = synthetic_centroids(spec);
    let mut rng = rng::stream(spec.seed, "points", stream);
    let mut x = Tensor::zeros(size, spec.dims);
    let mut y = Vec::with_capacity(size);
    for i in 0..size {
        let c = rng.random_range(0..spec.classes * spec.modes);
        y.push(c % spec.classes);
        for (v, mu) in x.row_mut(i).iter_mut().zip(centroids.row(c)) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = mu + spec.cluster_spread * z;
        }
    }
    LabeledDataset::new(x, y.clone(), y, spec.classes, split)
}

/// Metadata describing one annotator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorMeta {
    /// Accuracy on clean held-out data.
    pub accuracy: f64,
    pub parameters: u64,
}

/// Anything that maps inputs to a predictive distribution over classes.
pub trait Annotator {
    /// One probability row per input row.
    fn predict_proba(&self, x: &Tensor) -> Result<Tensor>;
    fn meta(&self) -> AnnotatorMeta;
}

/// Sampled annotations for every (example, annotator) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct RelabelRecord {
    pub ids: Vec<u64>,
    /// `labels[i][m]`: label given to example `i` by annotator `m`.
    pub labels: Vec<Vec<usize>>,
    /// Tempered probability of the sampled label, N×M.
    pub confidences: Tensor,
    pub annotators: Vec<AnnotatorMeta>,
}

impl RelabelRecord {
    pub fn examples(&self) -> usize {
        self.labels.len()
    }

    pub fn annotator_count(&self) -> usize {
        self.confidences.cols()
    }
}

/// Temperature with shape-1 Gamma law and inverse scale `beta`, i.e. an
/// exponential with rate `beta`.
pub fn sample_temperature(beta: f64, rng: &mut Rng) -> Result<f64> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::invalid("beta", format!("must be > 0, got {beta}")));
    }
    // 1 - U lies in (0, 1]
    let u = 1.0 - rng.random::<f64>();
    let t = -u.ln() / beta;
    // u == 1 gives exactly 0; nudge to the smallest positive temperature
    Ok(if t > 0.0 { t } else { f64::MIN_POSITIVE })
}

/// `softmax(log(p) / T)` with zeros clamped to [`PROB_FLOOR`].
pub fn temper_distribution(p: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(
            "temperature",
            format!("must be > 0, got {temperature}"),
        ));
    }
    let logits: Vec<f64> = p
        .iter()
        .map(|&v| v.max(PROB_FLOOR).ln() / temperature)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Inverse-CDF draw from a probability row.
pub fn sample_categorical(p: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random::<f64>();
    let mut acc = 0.0;
    for (k, &v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return k;
        }
    }
    // rounding left mass at the top; take the last class with positive mass
    p.iter().rposition(|&v| v > 0.0).unwrap_or(p.len() - 1)
}

/// Relabels from precomputed predictive matrices, one N×K matrix per annotator.
pub fn relabel_from_probs(
    ids: &[u64],
    probs: &[Tensor],
    annotators: Vec<AnnotatorMeta>,
    beta: f64,
    rng: &mut Rng,
) -> Result<RelabelRecord> {
    if probs.is_empty() {
        return Err(Error::invalid("annotators", "need at least one annotator"));
    }
    let n = ids.len();
    let m = probs.len();
    if let Some(p) = probs.iter().find(|p| p.rows() != n) {
        return Err(Error::LengthMismatch {
            what: "annotator predictions vs examples",
            left: p.rows(),
            right: n,
        });
    }
    let mut labels = vec![vec![0usize; m]; n];
    let mut confidences = Tensor::zeros(n, m);
    for i in 0..n {
        for (a, p) in probs.iter().enumerate() {
            let t = sample_temperature(beta, rng)?;
            let tempered = temper_distribution(p.row(i), t)?;
            let label = sample_categorical(&tempered, rng);
            labels[i][a] = label;
            confidences.set(i, a, tempered[label]);
        }
    }
    Ok(RelabelRecord {
        ids: ids.to_vec(),
        labels,
        confidences,
        annotators,
    })
}

/// Samples one label per (example, annotator) from tempered predictions.
pub fn relabel<A: Annotator + ?Sized>(
    clean: &LabeledDataset,
    annotators: &[Box<A>],
    beta: f64,
    rng: &mut Rng,
) -> Result<RelabelRecord> {
    let probs = annotators
        .iter()
        .map(|a| a.predict_proba(&clean.x))
        .collect::<Result<Vec<_>>>()?;
    let metas = annotators.iter().map(|a| a.meta()).collect();
    relabel_from_probs(&clean.ids, &probs, metas, beta, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// One available annotation, uniformly at random.
    Uniform,
    /// An incorrect annotation whenever one exists.
    Worst,
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Policy::Uniform),
            "worst" => Ok(Policy::Worst),
            other => Err(Error::invalid("policy", format!("unknown policy `{other}`"))),
        }
    }
}

/// Keeps one annotation per example; returns the noisy labels and the index
/// of the annotator that supplied each.
pub fn select_policy(
    record: &RelabelRecord,
    y_clean: &[usize],
    policy: Policy,
    rng: &mut Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if y_clean.len() != record.examples() {
        return Err(Error::LengthMismatch {
            what: "clean labels vs relabeled examples",
            left: y_clean.len(),
            right: record.examples(),
        });
    }
    let mut noisy = Vec::with_capacity(y_clean.len());
    let mut chosen = Vec::with_capacity(y_clean.len());
    for (row, &y) in record.labels.iter().zip(y_clean) {
        let m = match policy {
            Policy::Uniform => rng.random_range(0..row.len()),
            Policy::Worst => {
                let wrong: Vec<usize> = (0..row.len()).filter(|&a| row[a] != y).collect();
                if wrong.is_empty() {
                    rng.random_range(0..row.len())
                } else {
                    wrong[rng.random_range(0..wrong.len())]
                }
            }
        };
        noisy.push(row[m]);
        chosen.push(m);
    }
    Ok((noisy, chosen))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn temperature_mean_matches_gamma_mean() {
        let mut rng = rng::from_seed(1);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let t = sample_temperature(0.5, &mut rng).unwrap();
            assert!(t > 0.0);
            sum += t;
        }
        let mean = sum / n as f64;
        assert!((mean - 2.0).abs() / 2.0 < 0.02, "mean {mean}");
    }

    #[test]
    fn smaller_beta_gives_hotter_temperatures() {
        let median = |beta: f64| {
            let mut rng = rng::from_seed(2);
            let mut v: Vec<f64> = (0..20_001)
                .map(|_| sample_temperature(beta, &mut rng).unwrap())
                .collect();
            v.sort_by(f64::total_cmp);
            v[10_000]
        };
        assert!(median(0.1) > median(0.5));
    }

    #[test]
    fn invalid_beta_and_temperature() {
        let mut rng = rng::from_seed(0);
        assert!(sample_temperature(0.0, &mut rng).is_err());
        assert!(temper_distribution(&[0.5, 0.5], 0.0).is_err());
        assert!(temper_distribution(&[0.5, 0.5], -1.0).is_err());
    }

    #[test]
    fn tempering_identity_and_uniform() {
        let p = [0.7, 0.2, 0.1];
        let q = temper_distribution(&p, 1.0).unwrap();
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
        let u = temper_distribution(&[0.25; 4], 7.5).unwrap();
        assert!(u.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn hot_temperature_flattens() {
        // 0.7^(1/100) etc. normalized, evaluated by hand
        let p = [0.7f64, 0.2, 0.1];
        let w: Vec<f64> = p.iter().map(|v| v.powf(0.01)).collect();
        let z: f64 = w.iter().sum();
        let q = temper_distribution(&p, 100.0).unwrap();
        for (qi, wi) in q.iter().zip(&w) {
            assert!((qi - wi / z).abs() < 1e-12);
            assert!((qi - 1.0 / 3.0).abs() < 0.01);
        }
    }

    #[test]
    fn zero_probabilities_are_clamped() {
        let q = temper_distribution(&[1.0, 0.0], 2.0).unwrap();
        assert!(q.iter().all(|v| v.is_finite()));
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(q[1] > 0.0);
    }

    #[test]
    fn synthetic_is_deterministic_and_separable_in_the_limit() {
        let spec = SyntheticSpec::new(4, 400, 5, 0.0, 9);
        let a = make_synthetic(&spec).unwrap();
        assert_eq!(a, make_synthetic(&spec).unwrap());
        let centroids = synthetic_centroids(&spec);
        for i in 0..a.len() {
            let nearest = (0..4)
                .min_by(|&p, &q| {
                    let d = |c: usize| {
                        a.x.row(i)
                            .iter()
                            .zip(centroids.row(c))
                            .map(|(x, m)| (x - m).powi(2))
                            .sum::<f64>()
                    };
                    d(p).total_cmp(&d(q))
                })
                .unwrap();
            assert_eq!(nearest, a.y_clean[i]);
        }
    }

    #[test]
    fn synthetic_rejects_degenerate_specs() {
        assert!(make_synthetic(&SyntheticSpec::new(1, 10, 4, 1.0, 0)).is_err());
        assert!(make_synthetic(&SyntheticSpec::new(3, 10, 1, 1.0, 0)).is_err());
        let no_modes = SyntheticSpec { modes: 0, ..SyntheticSpec::new(3, 10, 2, 1.0, 0) };
        assert!(make_synthetic(&no_modes).is_err());
    }

    #[test]
    fn modes_share_labels_modulo_classes() {
        let spec = SyntheticSpec { modes: 3, ..SyntheticSpec::new(4, 600, 5, 0.0, 2) };
        let a = make_synthetic(&spec).unwrap();
        let centroids = synthetic_centroids(&spec);
        assert_eq!(centroids.rows(), 12);
        for i in 0..a.len() {
            let c = (0..12)
                .find(|&c| a.x.row(i) == centroids.row(c))
                .expect("zero spread puts points on a centroid");
            assert_eq!(c % 4, a.y_clean[i]);
        }
    }

    fn toy_record() -> RelabelRecord {
        RelabelRecord {
            ids: vec![0, 1],
            labels: vec![vec![1, 1, 1], vec![0, 2, 1]],
            confidences: Tensor::filled(2, 3, 0.5),
            annotators: vec![
                AnnotatorMeta { accuracy: 0.9, parameters: 10 };
                3
            ],
        }
    }

    #[test]
    fn worst_policy_falls_back_when_all_correct() {
        let rec = toy_record();
        let mut rng = rng::from_seed(4);
        for _ in 0..50 {
            let (noisy, _) = select_policy(&rec, &[1, 1], Policy::Worst, &mut rng).unwrap();
            assert_eq!(noisy[0], 1);
            assert_ne!(noisy[1], 1);
        }
    }

    #[test]
    fn chosen_annotator_supplies_the_label() {
        let rec = toy_record();
        let mut rng = rng::from_seed(5);
        let (noisy, chosen) = select_policy(&rec, &[1, 1], Policy::Uniform, &mut rng).unwrap();
        for i in 0..2 {
            assert_eq!(rec.labels[i][chosen[i]], noisy[i]);
        }
    }

    #[test]
    fn dataset_rejects_pi_on_test_split() {
        let d = LabeledDataset::new(Tensor::zeros(2, 2), vec![0, 1], vec![0, 1], 2, Split::Test).unwrap();
        let pi = crate::pi::labels_pi(&[0, 1], 2).unwrap();
        assert!(d.with_pi(pi).is_err());
    }
}
