//! Benchmarks and end-to-end method pipelines.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{cross_entropy, one_hot, Tape};
use crate::csvio::{self, PiCsv};
use crate::error::{Error, Result};
use crate::models::{
    afm_predict, distill_targets, sop_logits, tram_loss, MlpSpec, Network, NetworkSpec,
    ParamCounts, PiTowerSpec, SopParams,
};
use crate::pi::{
    annotator_pi, concat_pi, indicator_pi, labels_pi, near_optimal_pi, random_id_pi,
    standardize_pi, PiKind, PiMatrix,
};
use crate::relabel::{
    make_synthetic_stream, relabel, select_policy, Annotator, AnnotatorMeta, LabeledDataset,
    Policy, RelabelRecord, Split, SyntheticSpec,
};
use crate::report::{auroc, trace_epoch, TraceRow};
use crate::rng::{self, derive_seed};
use crate::tensor::Tensor;
use crate::train::{
    accuracy, fit, grid_search, split_train_val, EarlyStop, Evaluation, Fit,
    TrainConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    NoPi,
    DistillNoPi,
    DistillPi,
    Tram,
    TramPp,
    Afm,
    AfmPp,
    TramSop,
    /// No-PI training with per-example residuals from scratch.
    Sop,
    LsNoPi,
    LsTram,
}

impl MethodKind {
    pub const ALL: [MethodKind; 11] = [
        MethodKind::NoPi,
        MethodKind::DistillNoPi,
        MethodKind::DistillPi,
        MethodKind::Tram,
        MethodKind::TramPp,
        MethodKind::Afm,
        MethodKind::AfmPp,
        MethodKind::TramSop,
        MethodKind::Sop,
        MethodKind::LsNoPi,
        MethodKind::LsTram,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodKind::NoPi => "no_pi",
            MethodKind::DistillNoPi => "distill_no_pi",
            MethodKind::DistillPi => "distill_pi",
            MethodKind::Tram => "tram",
            MethodKind::TramPp => "tram_pp",
            MethodKind::Afm => "afm",
            MethodKind::AfmPp => "afm_pp",
            MethodKind::TramSop => "tram_sop",
            MethodKind::Sop => "sop",
            MethodKind::LsNoPi => "ls_no_pi",
            MethodKind::LsTram => "ls_tram",
        }
    }

    /// Whether the method consumes a PI matrix during training.
    pub fn uses_pi(self) -> bool {
        !matches!(
            self,
            MethodKind::NoPi | MethodKind::DistillNoPi | MethodKind::Sop | MethodKind::LsNoPi
        )
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodKind::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid("method", format!("unknown method `{s}`")))
    }
}

impl std::fmt::Display for MethodKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum NoiseSpec {
    /// Relabel with an ensemble of small MLP annotators.
    Annotators {
        /// Hidden width of each annotator (one annotator per entry).
        hidden: Vec<usize>,
        /// Training epochs of each annotator.
        epochs: Vec<usize>,
        /// Clean examples used to train the annotators.
        train_size: usize,
        /// Multiplier on annotator logits before the softmax.
        logit_scale: f64,
        beta: f64,
        policy: Policy,
    },
    /// Replace a fraction of labels by a uniformly drawn different class.
    Flips { rate: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresetSpec {
    pub name: String,
    pub data: SyntheticSpec,
    pub test_size: usize,
    pub noise: NoiseSpec,
}

pub const PRESETS: [&str; 3] = ["synth-highnoise", "synth-sparse", "synth-separable"];

/// Named benchmark instances with fixed dataset seeds.
pub fn preset(name: &str) -> Result<PresetSpec> {
    let spec = match name {
        "synth-highnoise" => PresetSpec {
            name: name.into(),
            // three modes per class, so a linear read-out of untrained features is weak
            data: SyntheticSpec {
                modes: 3,
                ..SyntheticSpec::new(4, 2000, 16, 1.0, 11)
            },
            test_size: 2000,
            noise: NoiseSpec::Annotators {
                hidden: vec![4, 8, 16, 32, 64],
                epochs: vec![8, 12, 16, 24, 32],
                train_size: 1000,
                logit_scale: 10.0,
                beta: 0.1,
                policy: Policy::Worst,
            },
        },
        "synth-sparse" => PresetSpec {
            name: name.into(),
            data: SyntheticSpec::new(4, 2000, 16, 1.0, 23),
            test_size: 2000,
            noise: NoiseSpec::Flips { rate: 0.1 },
        },
        "synth-separable" => PresetSpec {
            name: name.into(),
            data: SyntheticSpec::new(4, 1000, 16, 0.3, 5),
            test_size: 1000,
            noise: NoiseSpec::Flips { rate: 0.0 },
        },
        other => {
            return Err(Error::invalid(
                "preset",
                format!("unknown preset `{other}` (known: {})", PRESETS.join(", ")),
            ))
        }
    };
    Ok(spec)
}

/// Small MLP annotator trained on clean data.
pub struct MlpAnnotator {
    pub net: Network,
    pub meta: AnnotatorMeta,
    pub logit_scale: f64,
}

impl Annotator for MlpAnnotator {
    fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        let s = self.logit_scale;
        Ok(self.net.predict_no_pi(x)?.map(|v| s * v).softmax_rows())
    }

    fn meta(&self) -> AnnotatorMeta {
        self.meta.clone()
    }
}

/// Trains one annotator per hidden width on `train`, scoring it on `holdout`.
pub fn train_annotators(
    train: &LabeledDataset,
    holdout: &LabeledDataset,
    hidden: &[usize],
    epochs: &[usize],
    logit_scale: f64,
    seed: u64,
) -> Result<Vec<Box<MlpAnnotator>>> {
    if hidden.len() != epochs.len() || hidden.is_empty() {
        return Err(Error::invalid("annotators", "need one epoch count per hidden width"));
    }
    hidden
        .iter()
        .zip(epochs)
        .enumerate()
        .map(|(m, (&h, &e))| {
            let spec = NetworkSpec {
                mlp: MlpSpec::new(train.dims(), vec![h])?,
                classes: train.classes,
                tower: None,
                no_pi_head: true,
            };
            let mut net = Network::new(spec, derive_seed(seed, "annotator", m as u64))?;
            let cfg = TrainConfig {
                batch_size: 32,
                lr: 0.05,
                l2: 0.0,
                seed: derive_seed(seed, "annotator-shuffle", m as u64),
                early_stop: EarlyStop::None,
                ..TrainConfig::default().with_epochs(e.max(1))
            };
            let targets = one_hot(&train.y_clean, train.classes)?;
            fit(
                &mut net,
                &cfg,
                train.len(),
                |net, tape, batch| {
                    let x = tape.leaf(train.x.select_rows(batch));
                    let phi = net.features(tape, x)?;
                    let z = net.no_pi_logits(tape, phi)?;
                    cross_entropy(tape, z, &targets.select_rows(batch))
                },
                |_, _| {
                    Ok(Evaluation {
                        val_acc: 0.0,
                        clean_val_acc: 0.0,
                        test_acc: 0.0,
                        trace: TraceRow::default(),
                    })
                },
            )?;
            let pred = net.predict_no_pi(&holdout.x)?.argmax_rows();
            let meta = AnnotatorMeta {
                accuracy: accuracy(&pred, &holdout.y_clean),
                parameters: net.store.count(net.store.ids()) as u64,
            };
            Ok(Box::new(MlpAnnotator {
                net,
                meta,
                logit_scale,
            }))
        })
        .collect()
}

/// A benchmark instance: a noisy training pool, a clean test set and the
/// original PI of the pool.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub name: String,
    pub pool: LabeledDataset,
    pub test: LabeledDataset,
    /// Annotator PI of the pool; zero width when the noise has no annotators.
    pub original_pi: PiMatrix,
    pub annotations: Option<PiCsv>,
    pub chosen: Option<Vec<usize>>,
}

impl Benchmark {
    pub fn classes(&self) -> usize {
        self.pool.classes
    }

    pub fn dims(&self) -> usize {
        self.pool.dims()
    }

    pub fn agreement(&self) -> f64 {
        self.pool.agreement()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NoiseOverrides {
    pub beta: Option<f64>,
    pub policy: Option<Policy>,
}

/// Builds a benchmark from a preset, optionally overriding β and the policy.
pub fn build_benchmark(spec: &PresetSpec, overrides: NoiseOverrides) -> Result<Benchmark> {
    let data = &spec.data;
    let mut pool = make_synthetic_stream(data, 0, data.size, Split::Train)?;
    let mut test = make_synthetic_stream(data, 1, spec.test_size, Split::Test)?;
    test.ids = (0..test.len() as u64).map(|i| 1_000_000 + i).collect();
    match &spec.noise {
        NoiseSpec::Annotators {
            hidden,
            epochs,
            train_size,
            logit_scale,
            beta,
            policy,
        } => {
            let beta = overrides.beta.unwrap_or(*beta);
            let policy = overrides.policy.unwrap_or(*policy);
            let ann_train = make_synthetic_stream(data, 2, *train_size, Split::Train)?;
            let annotators = train_annotators(&ann_train, &test, hidden, epochs, *logit_scale, data.seed)?;
            let mut r = rng::stream(data.seed, "relabel", 0);
            let train_rec = relabel(&pool, &annotators, beta, &mut r)?;
            let test_rec = relabel(&test, &annotators, beta, &mut r)?;
            let mut sel = rng::stream(data.seed, "policy", 0);
            let (noisy, chosen) = select_policy(&train_rec, &pool.y_clean, policy, &mut sel)?;
            pool = pool.with_noisy(noisy)?;
            let original_pi = annotator_pi(&train_rec, &chosen)?;
            Ok(Benchmark {
                name: spec.name.clone(),
                pool,
                test,
                original_pi,
                annotations: Some(PiCsv {
                    train: train_rec,
                    validation: test_rec,
                }),
                chosen: Some(chosen),
            })
        }
        NoiseSpec::Flips { rate } => {
            if !(0.0..=1.0).contains(rate) {
                return Err(Error::invalid("rate", "flip rate must be in [0, 1]"));
            }
            let k = data.classes;
            let mut r = rng::stream(data.seed, "flips", 0);
            let noisy = pool
                .y_clean
                .iter()
                .map(|&y| {
                    if r.random::<f64>() < *rate {
                        (y + r.random_range(1..k)) % k
                    } else {
                        y
                    }
                })
                .collect();
            pool = pool.with_noisy(noisy)?;
            let rows = pool.len();
            Ok(Benchmark {
                name: spec.name.clone(),
                pool,
                test,
                original_pi: PiMatrix::new(PiKind::Original, Tensor::zeros(rows, 0)),
                annotations: None,
                chosen: None,
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DatasetMeta {
    name: String,
    classes: usize,
}

pub const DATASET_META: &str = "dataset.json";
pub const FEATURES_TRAIN: &str = "features-train.csv";
pub const FEATURES_TEST: &str = "features-validation.csv";
pub const SELECTION_TRAIN: &str = "selection-train.csv";

/// Writes the annotation files (when present), features and selection.
pub fn write_benchmark(bench: &Benchmark, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if let Some(files) = &bench.annotations {
        csvio::write_pi_csv(files, dir)?;
    }
    if let Some(chosen) = &bench.chosen {
        csvio::write_selection(&bench.pool.ids, chosen, &dir.join(SELECTION_TRAIN))?;
    }
    csvio::write_features(&bench.pool, &dir.join(FEATURES_TRAIN))?;
    csvio::write_features(&bench.test, &dir.join(FEATURES_TEST))?;
    let meta = DatasetMeta {
        name: bench.name.clone(),
        classes: bench.classes(),
    };
    let path = dir.join(DATASET_META);
    std::fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n")
        .map_err(|e| Error::io(&path, e))
}

/// Loads a directory written by [`write_benchmark`].
pub fn load_benchmark(dir: &Path) -> Result<Benchmark> {
    let path = dir.join(DATASET_META);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&text)?;
    let pool = csvio::read_features(&dir.join(FEATURES_TRAIN), meta.classes, Split::Train)?;
    let test = csvio::read_features(&dir.join(FEATURES_TEST), meta.classes, Split::Test)?;
    let rows = pool.len();
    let (original_pi, annotations, chosen) = if dir.join(csvio::ANNOTATOR_FEATURES).exists() {
        let files = csvio::read_pi_csv(dir)?;
        let sel = csvio::read_selection(&dir.join(SELECTION_TRAIN))?;
        if sel.len() != rows || sel.iter().zip(&pool.ids).any(|((a, _), b)| a != b) {
            return Err(Error::invalid(SELECTION_TRAIN, "ids do not match the features file"));
        }
        if files.train.ids != pool.ids {
            return Err(Error::invalid("labels-train.csv", "ids do not match the features file"));
        }
        let chosen: Vec<usize> = sel.into_iter().map(|(_, m)| m).collect();
        let pi = annotator_pi(&files.train, &chosen)?;
        (pi, Some(files), Some(chosen))
    } else {
        (PiMatrix::new(PiKind::Original, Tensor::zeros(rows, 0)), None, None)
    };
    Ok(Benchmark {
        name: meta.name,
        pool,
        test,
        original_pi,
        annotations,
        chosen,
    })
}

/// Architecture and method hyperparameters outside the optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSettings {
    pub fx_hidden: Vec<usize>,
    pub tower_width: usize,
    pub mc_samples: usize,
    /// Distillation temperatures tried on noisy validation.
    pub taus: Vec<f64>,
    /// Label-smoothing strengths tried on noisy validation.
    pub eps_grid: Vec<f64>,
    /// Random-PI widths tried by the `++` variants.
    pub random_widths: Vec<usize>,
    /// No-PI loss weights tried by TRAM++.
    pub lambda_grid: Vec<f64>,
    /// Initial value of both residual factors `u` and `v`.
    pub sop_init: f64,
    /// Learning-rate multiplier on `u` and `v`.
    pub sop_lr_scale: f64,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
}

impl Default for MethodSettings {
    fn default() -> Self {
        Self {
            fx_hidden: vec![64, 64],
            tower_width: 64,
            mc_samples: crate::models::DEFAULT_MC_SAMPLES,
            taus: vec![0.5, 2.0, 10.0],
            eps_grid: vec![0.2, 0.4, 0.6, 0.8],
            random_widths: vec![8, 14, 28],
            lambda_grid: vec![0.1, 0.5],
            sop_init: 0.1,
            sop_lr_scale: 10.0,
            finetune_epochs: 20,
            finetune_lr: 0.01,
        }
    }
}

/// Desk-scale optimizer defaults used by the presets.
pub fn desk_config() -> TrainConfig {
    TrainConfig {
        batch_size: 64,
        lr: 0.05,
        l2: 1e-2,
        val_fraction: 0.1,
        ..TrainConfig::default().with_epochs(40)
    }
}

/// Outcome of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub test_acc: f64,
    pub val_acc: f64,
    pub selected_epoch: usize,
    /// Hyperparameters picked by inner grid searches.
    pub chosen: BTreeMap<String, f64>,
    /// AUROC of residual norms against the flip mask (residual methods only).
    pub residual_auroc: Option<f64>,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
    /// Residual norm per training example (residual methods only).
    #[serde(skip)]
    pub residual_norms: Option<Vec<f64>>,
    #[serde(skip)]
    pub train_mislabeled: Vec<bool>,
    #[serde(skip)]
    pub param_counts: Option<ParamCounts>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub dataset: String,
    pub method: MethodKind,
    pub pi: Option<PiKind>,
    pub config: TrainConfig,
    pub settings: MethodSettings,
    pub runs: Vec<SeedRun>,
}

impl ExperimentResult {
    pub fn accuracies(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.test_acc).collect()
    }

    pub fn mean_accuracy(&self) -> f64 {
        crate::report::mean(&self.accuracies())
    }
}

/// Train/val/test splits for one seed with PI attached to train and val.
struct Prepared {
    train: LabeledDataset,
    val: LabeledDataset,
    test: LabeledDataset,
    classes: usize,
}

impl Prepared {
    fn pi(&self) -> Result<&PiMatrix> {
        self.train.pi.as_ref().ok_or(Error::MissingPi)
    }

    fn val_pi(&self) -> Result<&PiMatrix> {
        self.val.pi.as_ref().ok_or(Error::MissingPi)
    }
}

/// PI matrix of kind `kind` for every pool row. Random identifiers use
/// `random_width` columns.
pub fn build_pi(bench: &Benchmark, kind: PiKind, random_width: usize, seed: u64) -> Result<PiMatrix> {
    let p = &bench.pool;
    match kind {
        PiKind::Original => Ok(bench.original_pi.clone()),
        PiKind::Indicator => indicator_pi(&p.y_clean, &p.y_noisy),
        PiKind::Labels => labels_pi(&p.y_noisy, p.classes),
        PiKind::NearOptimal => near_optimal_pi(&p.y_clean, &p.y_noisy, p.classes),
        PiKind::RandomId => random_id_pi(p.len(), random_width, seed),
        PiKind::Composite => Err(Error::invalid("pi", "composite PI is built by the ++ methods")),
    }
}

fn prepare(bench: &Benchmark, pi: Option<PiMatrix>, cfg: &TrainConfig) -> Result<Prepared> {
    let mut pool = bench.pool.clone();
    if let Some(pi) = pi {
        pool = pool.with_pi(pi)?;
    }
    let (mut train, mut val) = split_train_val(&pool, cfg.val_fraction, cfg.seed)?;
    // standardize continuous PI with train statistics
    if let (Some(tp), Some(vp)) = (train.pi.take(), val.pi.take()) {
        let (tp, stats) = standardize_pi(&tp, None)?;
        let (vp, _) = standardize_pi(&vp, Some(&stats))?;
        train.pi = Some(tp);
        val.pi = Some(vp);
    }
    Ok(Prepared {
        train,
        val,
        test: bench.test.clone(),
        classes: bench.classes(),
    })
}

fn network(
    prep: &Prepared,
    s: &MethodSettings,
    tower: bool,
    no_pi_head: bool,
    seed: u64,
) -> Result<Network> {
    let tower = if tower {
        Some(PiTowerSpec {
            width: s.tower_width,
            pi_width: prep.pi()?.width(),
        })
    } else {
        None
    };
    Network::new(
        NetworkSpec {
            mlp: MlpSpec::new(prep.train.dims(), s.fx_hidden.clone())?,
            classes: prep.classes,
            tower,
            no_pi_head,
        },
        seed,
    )
}

/// `(1 − eps)·onehot + eps/K`.
pub fn smooth_targets(labels: &[usize], classes: usize, eps: f64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::invalid("eps", format!("must be in [0, 1), got {eps}")));
    }
    Ok(one_hot(labels, classes)?.map(|v| (1.0 - eps) * v + eps / classes as f64))
}

fn labels_of(logits: &Tensor) -> Vec<usize> {
    logits.argmax_rows()
}

/// Evaluation of a no-PI head network (optionally with the PI head traced).
fn eval_heads(net: &Network, prep: &Prepared, with_pi: bool) -> Result<Evaluation> {
    let val = labels_of(&net.predict_no_pi(&prep.val.x)?);
    let test = labels_of(&net.predict_no_pi(&prep.test.x)?);
    let nopi = labels_of(&net.predict_no_pi(&prep.train.x)?);
    let pi = if with_pi {
        Some(labels_of(&net.predict_pi(&prep.train.x, &prep.pi()?.values)?))
    } else {
        None
    };
    let test_acc = accuracy(&test, &prep.test.y_clean);
    Ok(Evaluation {
        val_acc: accuracy(&val, &prep.val.y_noisy),
        clean_val_acc: accuracy(&val, &prep.val.y_clean),
        test_acc,
        trace: trace_epoch(
            0,
            0.0,
            pi.as_deref(),
            Some(&nopi),
            &prep.train.y_noisy,
            &prep.train.mislabeled_mask(),
            test_acc,
        ),
    })
}

fn no_pi_fit(
    prep: &Prepared,
    cfg: &TrainConfig,
    s: &MethodSettings,
    targets: &Tensor,
    seed: u64,
) -> Result<(Network, Fit)> {
    let mut net = network(prep, s, false, true, seed)?;
    let fit = fit(
        &mut net,
        cfg,
        prep.train.len(),
        |net, tape, batch| {
            let x = tape.leaf(prep.train.x.select_rows(batch));
            let phi = net.features(tape, x)?;
            let z = net.no_pi_logits(tape, phi)?;
            cross_entropy(tape, z, &targets.select_rows(batch))
        },
        |net, _| eval_heads(net, prep, false),
    )?;
    Ok((net, fit))
}

fn tram_fit(
    prep: &Prepared,
    cfg: &TrainConfig,
    s: &MethodSettings,
    targets: &Tensor,
) -> Result<(Network, Fit)> {
    let mut net = network(prep, s, true, true, cfg.seed)?;
    let pi = prep.pi()?;
    let fit = fit(
        &mut net,
        cfg,
        prep.train.len(),
        |net, tape, batch| {
            let x = prep.train.x.select_rows(batch);
            let a = pi.values.select_rows(batch);
            tram_loss(net, tape, &x, Some(&a), &targets.select_rows(batch), cfg.lambda)
        },
        |net, _| eval_heads(net, prep, true),
    )?;
    Ok((net, fit))
}

/// Network trained on `(x, a, ỹ)` with a PI tower only.
fn pi_network_fit<E>(
    prep: &Prepared,
    cfg: &TrainConfig,
    s: &MethodSettings,
    targets: &Tensor,
    seed: u64,
    evaluate: E,
) -> Result<(Network, Fit)>
where
    E: FnMut(&Network, usize) -> Result<Evaluation>,
{
    let mut net = network(prep, s, true, false, seed)?;
    let pi = prep.pi()?;
    let fit = fit(
        &mut net,
        cfg,
        prep.train.len(),
        |net, tape, batch| {
            let x = tape.leaf(prep.train.x.select_rows(batch));
            let a = tape.leaf(pi.values.select_rows(batch));
            let phi = net.features(tape, x)?;
            let z = net.pi_logits(tape, phi, a)?;
            cross_entropy(tape, z, &targets.select_rows(batch))
        },
        evaluate,
    )?;
    Ok((net, fit))
}

fn seed_run(cfg: &TrainConfig, fit: &Fit, prep: &Prepared) -> SeedRun {
    let rec = fit.selected_record();
    SeedRun {
        seed: cfg.seed,
        test_acc: rec.test_acc,
        val_acc: score_of(cfg, fit),
        selected_epoch: fit.selected,
        chosen: BTreeMap::new(),
        residual_auroc: None,
        trace: fit.history.iter().map(|r| r.trace.clone()).collect(),
        residual_norms: None,
        train_mislabeled: prep.train.mislabeled_mask(),
        param_counts: None,
    }
}

/// Validation score used for selection across configurations: the noisy
/// (or clean, in clean-validation mode) accuracy at the selected epoch.
fn score_of(cfg: &TrainConfig, fit: &Fit) -> f64 {
    let rec = fit.selected_record();
    match cfg.early_stop {
        EarlyStop::CleanVal => rec.clean_val_acc,
        _ => rec.val_acc,
    }
}

pub fn run_no_pi_seed(bench: &Benchmark, cfg: &TrainConfig, s: &MethodSettings) -> Result<SeedRun> {
    let prep = prepare(bench, None, cfg)?;
    let targets = one_hot(&prep.train.y_noisy, prep.classes)?;
    let (net, fit) = no_pi_fit(&prep, cfg, s, &targets, cfg.seed)?;
    let mut run = seed_run(cfg, &fit, &prep);
    run.param_counts = Some(net.param_counts());
    Ok(run)
}

pub fn run_tram_seed(
    bench: &Benchmark,
    pi: PiMatrix,
    cfg: &TrainConfig,
    s: &MethodSettings,
) -> Result<SeedRun> {
    if pi.rows() != bench.pool.len() {
        return Err(Error::LengthMismatch {
            what: "PI rows vs training examples",
            left: pi.rows(),
            right: bench.pool.len(),
        });
    }
    let prep = prepare(bench, Some(pi), cfg)?;
    let targets = one_hot(&prep.train.y_noisy, prep.classes)?;
    let (net, fit) = tram_fit(&prep, cfg, s, &targets)?;
    let mut run = seed_run(cfg, &fit, &prep);
    run.param_counts = Some(net.param_counts());
    Ok(run)
}

fn afm_eval(
    net: &Network,
    prep: &Prepared,
    s: &MethodSettings,
    seed: u64,
    epoch: usize,
) -> Result<Evaluation> {
    let bank = prep.pi()?;
    let mut r = rng::stream(seed, "afm-eval", epoch as u64);
    let val = afm_predict(net, &prep.val.x, bank, s.mc_samples, &mut r)?.argmax_rows();
    let test = afm_predict(net, &prep.test.x, bank, s.mc_samples, &mut r)?.argmax_rows();
    let marg = afm_predict(net, &prep.train.x, bank, s.mc_samples, &mut r)?.argmax_rows();
    let cond = labels_of(&net.predict_pi(&prep.train.x, &bank.values)?);
    let test_acc = accuracy(&test, &prep.test.y_clean);
    Ok(Evaluation {
        val_acc: accuracy(&val, &prep.val.y_noisy),
        clean_val_acc: accuracy(&val, &prep.val.y_clean),
        test_acc,
        trace: trace_epoch(
            0,
            0.0,
            Some(&cond),
            Some(&marg),
            &prep.train.y_noisy,
            &prep.train.mislabeled_mask(),
            test_acc,
        ),
    })
}

pub fn run_afm_seed(
    bench: &Benchmark,
    pi: PiMatrix,
    cfg: &TrainConfig,
    s: &MethodSettings,
) -> Result<SeedRun> {
    let prep = prepare(bench, Some(pi), cfg)?;
    let targets = one_hot(&prep.train.y_noisy, prep.classes)?;
    let (net, fit) = pi_network_fit(&prep, cfg, s, &targets, cfg.seed, |net, epoch| {
        afm_eval(net, &prep, s, cfg.seed, epoch)
    })?;
    let mut run = seed_run(cfg, &fit, &prep);
    run.param_counts = Some(net.param_counts());
    Ok(run)
}

/// Distillation: a teacher (with a PI tower iff `teacher_uses_pi`) trained on
/// noisy labels, then a no-PI student trained on its softened outputs only.
pub fn run_distillation_seed(
    bench: &Benchmark,
    pi: Option<PiMatrix>,
    cfg: &TrainConfig,
    s: &MethodSettings,
    tau: f64,
) -> Result<(SeedRun, DistillCheck)> {
    let teacher_uses_pi = pi.is_some();
    let prep = prepare(bench, pi, cfg)?;
    let targets = one_hot(&prep.train.y_noisy, prep.classes)?;
    let teacher_seed = derive_seed(cfg.seed, "teacher", 0);
    let (mut teacher, tfit) = if teacher_uses_pi {
        pi_network_fit(&prep, cfg, s, &targets, teacher_seed, |net, _| {
            let pi = prep.pi()?;
            let vpi = prep.val_pi()?;
            let val = labels_of(&net.predict_pi(&prep.val.x, &vpi.values)?);
            let train = labels_of(&net.predict_pi(&prep.train.x, &pi.values)?);
            Ok(Evaluation {
                val_acc: accuracy(&val, &prep.val.y_noisy),
                clean_val_acc: accuracy(&val, &prep.val.y_clean),
                test_acc: 0.0,
                trace: trace_epoch(
                    0,
                    0.0,
                    Some(&train),
                    None,
                    &prep.train.y_noisy,
                    &prep.train.mislabeled_mask(),
                    0.0,
                ),
            })
        })?
    } else {
        no_pi_fit(&prep, cfg, s, &targets, teacher_seed)?
    };
    tfit.restore(&mut teacher);
    let teacher_logits = if teacher_uses_pi {
        teacher.predict_pi(&prep.train.x, &prep.pi()?.values)?
    } else {
        teacher.predict_no_pi(&prep.train.x)?
    };
    let frozen = teacher.snapshot();
    let soft = distill_targets(&teacher_logits, tau)?;
    let (student, sfit) = no_pi_fit(&prep, cfg, s, &soft, cfg.seed)?;
    // initial student loss against the soft targets
    let init = network(&prep, s, false, true, cfg.seed)?;
    let mut tape = Tape::new();
    let x = tape.leaf(prep.train.x.clone());
    let phi = init.features(&mut tape, x)?;
    let z = init.no_pi_logits(&mut tape, phi)?;
    let l0 = cross_entropy(&mut tape, z, &soft)?;
    let mut run = seed_run(cfg, &sfit, &prep);
    run.chosen.insert("tau".into(), tau);
    run.param_counts = Some(student.param_counts());
    Ok((
        run,
        DistillCheck {
            initial_student_loss: tape.value(l0).item(),
            teacher_unchanged: teacher.snapshot() == frozen,
        },
    ))
}

/// Side observations of a distillation run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillCheck {
    pub initial_student_loss: f64,
    pub teacher_unchanged: bool,
}

fn with_random(bench: &Benchmark, base: &PiMatrix, width: usize, seed: u64) -> Result<PiMatrix> {
    let r = random_id_pi(bench.pool.len(), width, derive_seed(seed, "random-pi", width as u64))?;
    concat_pi(base, &r)
}

pub fn run_tram_pp_seed(
    bench: &Benchmark,
    original: &PiMatrix,
    cfg: &TrainConfig,
    s: &MethodSettings,
) -> Result<SeedRun> {
    tram_pp_model(bench, original, cfg, s).map(|(run, _, _)| run)
}

/// TRAM++ grid search over (λ, random width); returns the best run, its
/// trained network (at the selected epoch) and the prepared splits.
fn tram_pp_model(
    bench: &Benchmark,
    original: &PiMatrix,
    cfg: &TrainConfig,
    s: &MethodSettings,
) -> Result<(SeedRun, Network, Prepared)> {
    let grid: Vec<(f64, usize)> = s
        .lambda_grid
        .iter()
        .flat_map(|&l| s.random_widths.iter().map(move |&w| (l, w)))
        .collect();
    let (best, points) = grid_search(&grid, |&(lambda, width)| {
        let pi = with_random(bench, original, width, cfg.seed)?;
        let c = TrainConfig {
            lambda,
            ..cfg.clone()
        };
        let prep = prepare(bench, Some(pi), &c)?;
        let targets = one_hot(&prep.train.y_noisy, prep.classes)?;
        let (mut net, fit) = tram_fit(&prep, &c, s, &targets)?;
        let mut run = seed_run(&c, &fit, &prep);
        run.chosen.insert("lambda".into(), lambda);
        run.chosen.insert("random_width".into(), width as f64);
        run.param_counts = Some(net.param_counts());
        fit.restore(&mut net);
        Ok((run.val_acc, (run, net, prep)))
    })?;
    Ok(points.into_iter().nth(best).expect("best index").result)
}

/// Residual training of the no-PI pathway with per-example `u, v`.
fn sop_fit(
    net: &mut Network,
    prep: &Prepared,
    cfg: &TrainConfig,
    s: &MethodSettings,
    targets: &Tensor,
) -> Result<(Fit, SopParams)> {
    let sop = SopParams::new(&mut net.store, prep.train.len(), prep.classes, s.sop_init);
    for id in [sop.u, sop.v] {
        net.store.get_mut(id).lr_scale = s.sop_lr_scale;
    }
    for id in net.tower_params() {
        net.store.get_mut(id).frozen = true;
    }
    let fit = fit(
        net,
        cfg,
        prep.train.len(),
        |net, tape, batch| {
            let x = tape.leaf(prep.train.x.select_rows(batch));
            let phi = net.features(tape, x)?;
            let z = net.no_pi_logits(tape, phi)?;
            let z = sop_logits(tape, &net.store, &sop, z, batch, Split::Train)?;
            cross_entropy(tape, z, &targets.select_rows(batch))
        },
        |net, _| eval_heads(net, prep, false),
    )?;
    Ok((fit, sop))
}

fn residual_norms(net: &Network, sop: &SopParams) -> Vec<f64> {
    let r = sop.residuals(&net.store);
    (0..r.rows())
        .map(|i| r.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

fn attach_residuals(run: &mut SeedRun, norms: Vec<f64>, mask: &[bool]) {
    run.residual_auroc = auroc(&norms, mask).ok();
    run.residual_norms = Some(norms);
}

/// SOP baseline: no-PI training with residuals from scratch.
pub fn run_sop_seed(bench: &Benchmark, cfg: &TrainConfig, s: &MethodSettings) -> Result<SeedRun> {
    let prep = prepare(bench, None, cfg)?;
    let targets = one_hot(&prep.train.y_noisy, prep.classes)?;
    let mut net = network(&prep, s, false, true, cfg.seed)?;
    let (fit, sop) = sop_fit(&mut net, &prep, cfg, s, &targets)?;
    let mut run = seed_run(cfg, &fit, &prep);
    fit.restore(&mut net);
    attach_residuals(&mut run, residual_norms(&net, &sop), &prep.train.mislabeled_mask());
    run.param_counts = Some(net.param_counts());
    Ok(run)
}

/// TRAM++ pretraining followed by residual fine-tuning of φ and ψ.
pub fn run_tram_sop_seed(
    bench: &Benchmark,
    original: &PiMatrix,
    cfg: &TrainConfig,
    s: &MethodSettings,
) -> Result<SeedRun> {
    let (pre, mut net, prep) = tram_pp_model(bench, original, cfg, s)?;
    let targets = one_hot(&prep.train.y_noisy, prep.classes)?;
    let ft = TrainConfig {
        lr: s.finetune_lr,
        seed: derive_seed(cfg.seed, "finetune", 0),
        ..cfg.clone().with_epochs(s.finetune_epochs)
    };
    let (fit, sop) = sop_fit(&mut net, &prep, &ft, s, &targets)?;
    let mut run = seed_run(&ft, &fit, &prep);
    run.seed = cfg.seed;
    run.chosen = pre.chosen;
    fit.restore(&mut net);
    attach_residuals(&mut run, residual_norms(&net, &sop), &prep.train.mislabeled_mask());
    run.param_counts = Some(net.param_counts());
    Ok(run)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothingBase {
    NoPi,
    Tram,
}

pub fn run_label_smoothing_seed(
    bench: &Benchmark,
    pi: Option<PiMatrix>,
    cfg: &TrainConfig,
    s: &MethodSettings,
    base: SmoothingBase,
    eps: f64,
) -> Result<SeedRun> {
    let prep = prepare(bench, pi, cfg)?;
    let targets = smooth_targets(&prep.train.y_noisy, prep.classes, eps)?;
    let (net, fit) = match base {
        SmoothingBase::NoPi => no_pi_fit(&prep, cfg, s, &targets, cfg.seed)?,
        SmoothingBase::Tram => tram_fit(&prep, cfg, s, &targets)?,
    };
    let mut run = seed_run(cfg, &fit, &prep);
    run.chosen.insert("eps".into(), eps);
    run.param_counts = Some(net.param_counts());
    Ok(run)
}

/// Best of `candidates` by validation score; ties go to the first.
fn tuned<T: Sync>(candidates: &[T], f: impl Fn(&T) -> Result<SeedRun> + Sync) -> Result<SeedRun> {
    let (best, points) = grid_search(
        &(0..candidates.len()).collect::<Vec<_>>(),
        |&i| f(&candidates[i]).map(|r| (r.val_acc, r)),
    )?;
    Ok(points.into_iter().nth(best).expect("best index").result)
}

/// One seed of `method` with PI kind `pi` (ignored by methods without PI).
pub fn run_seed(
    bench: &Benchmark,
    method: MethodKind,
    pi_kind: Option<PiKind>,
    cfg: &TrainConfig,
    s: &MethodSettings,
) -> Result<SeedRun> {
    let pi = |kind: Option<PiKind>| -> Result<PiMatrix> {
        let kind = kind.ok_or_else(|| Error::invalid("pi", format!("method {method} needs a PI kind")))?;
        let w = s.random_widths.first().copied().unwrap_or(8);
        build_pi(bench, kind, w, derive_seed(cfg.seed, "random-pi", w as u64))
    };
    match method {
        MethodKind::NoPi => run_no_pi_seed(bench, cfg, s),
        MethodKind::Tram => run_tram_seed(bench, pi(pi_kind)?, cfg, s),
        MethodKind::Afm => run_afm_seed(bench, pi(pi_kind)?, cfg, s),
        MethodKind::DistillNoPi | MethodKind::DistillPi => {
            let teacher_pi = if method == MethodKind::DistillPi {
                Some(pi(pi_kind)?)
            } else {
                None
            };
            tuned(&s.taus, |&tau| {
                run_distillation_seed(bench, teacher_pi.clone(), cfg, s, tau).map(|(r, _)| r)
            })
        }
        MethodKind::TramPp => run_tram_pp_seed(bench, &pi(pi_kind.or(Some(PiKind::Original)))?, cfg, s),
        MethodKind::AfmPp => {
            let base = pi(pi_kind.or(Some(PiKind::Original)))?;
            tuned(&s.random_widths, |&w| {
                let p = with_random(bench, &base, w, cfg.seed)?;
                let mut run = run_afm_seed(bench, p, cfg, s)?;
                run.chosen.insert("random_width".into(), w as f64);
                Ok(run)
            })
        }
        MethodKind::TramSop => {
            run_tram_sop_seed(bench, &pi(pi_kind.or(Some(PiKind::Original)))?, cfg, s)
        }
        MethodKind::Sop => run_sop_seed(bench, cfg, s),
        MethodKind::LsNoPi => tuned(&s.eps_grid, |&eps| {
            run_label_smoothing_seed(bench, None, cfg, s, SmoothingBase::NoPi, eps)
        }),
        MethodKind::LsTram => {
            let p = pi(pi_kind)?;
            tuned(&s.eps_grid, |&eps| {
                run_label_smoothing_seed(bench, Some(p.clone()), cfg, s, SmoothingBase::Tram, eps)
            })
        }
    }
}

/// Runs `method` for every seed in parallel; runs come back in seed order.
pub fn run_method(
    bench: &Benchmark,
    method: MethodKind,
    pi_kind: Option<PiKind>,
    cfg: &TrainConfig,
    s: &MethodSettings,
    seeds: &[u64],
) -> Result<ExperimentResult> {
    if seeds.is_empty() {
        return Err(Error::invalid("seeds", "need at least one seed"));
    }
    cfg.validate()?;
    let pi_kind = if method.uses_pi() {
        Some(pi_kind.unwrap_or(PiKind::Original))
    } else {
        None
    };
    let runs = seeds
        .par_iter()
        .map(|&seed| {
            let c = TrainConfig {
                seed,
                ..cfg.clone()
            };
            run_seed(bench, method, pi_kind, &c, s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentResult {
        dataset: bench.name.clone(),
        method,
        pi: pi_kind,
        config: cfg.clone(),
        settings: s.clone(),
        runs,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeAxis {
    FeatureExtractor,
    PiHead,
}

/// One point of a size ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct SizePoint {
    pub size: usize,
    pub param_counts: ParamCounts,
    pub result: ExperimentResult,
    /// Mean final-epoch no-PI-head train accuracy on mislabeled examples.
    pub mislabeled_nopi: Option<f64>,
}

/// Reruns `method` (TRAM or AFM) across widths of one architecture axis.
#[allow(clippy::too_many_arguments)]
pub fn run_size_ablation(
    bench: &Benchmark,
    method: MethodKind,
    pi_kind: PiKind,
    cfg: &TrainConfig,
    s: &MethodSettings,
    axis: SizeAxis,
    sizes: &[usize],
    seeds: &[u64],
) -> Result<Vec<SizePoint>> {
    if sizes.is_empty() {
        return Err(Error::invalid("sizes", "need at least one size"));
    }
    if !matches!(method, MethodKind::Tram | MethodKind::Afm) {
        return Err(Error::invalid("method", "size ablation runs tram or afm"));
    }
    sizes
        .iter()
        .map(|&size| {
            let mut s = s.clone();
            match axis {
                SizeAxis::FeatureExtractor => s.fx_hidden = vec![size; s.fx_hidden.len().max(1)],
                SizeAxis::PiHead => s.tower_width = size,
            }
            let result = run_method(bench, method, Some(pi_kind), cfg, &s, seeds)?;
            let param_counts = result.runs[0].param_counts.expect("counts recorded");
            let finals: Vec<f64> = result
                .runs
                .iter()
                .filter_map(|r| r.trace.last().and_then(|t| t.mislabeled_nopi))
                .collect();
            let mislabeled_nopi = (!finals.is_empty()).then(|| crate::report::mean(&finals));
            Ok(SizePoint {
                size,
                param_counts,
                result,
                mislabeled_nopi,
            })
        })
        .collect()
}

/// Relabel record for `bench`'s training pool, when it has annotators.
pub fn train_record(bench: &Benchmark) -> Option<&RelabelRecord> {
    bench.annotations.as_ref().map(|a| &a.train)
}
