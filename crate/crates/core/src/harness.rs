//! Cross-validated comparison of four training strategies: the full training
//! fold, one random sample, the linear average and the learned template.
//!
//! Folds, strategy arms and random draws are independent jobs run on the
//! rayon pool; results are gathered in job order so reports do not depend on
//! scheduling.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classification::{classify, train_classifier, ClassificationError, ClassifierConfig};
use crate::evolution::{predict_trajectory, train_cascade, EvolutionError, EvolutionHyperparams};
use crate::graph::{mean_absolute_error, validate_connectivity, ConnectivityMatrix, GraphError, Population, Trajectory};
use crate::seed;
use crate::templates::{
    estimate_cbt, linear_average_template, random_one_shot_select, TemplateConfig, TemplateError,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{n} samples cannot be split into {k} folds")]
    TooFewSamples { n: usize, k: usize },
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),
    #[error("metric inputs have mismatched lengths")]
    LengthMismatch,
    #[error("labels contain a single class; AUC is undefined")]
    SingleClassLabels,
    #[error("classification benchmark needs a labelled population")]
    MissingLabels,
    #[error("fold {fold}: sample {index} outside the training fold reached a template estimator")]
    Leakage { fold: usize, index: usize },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
    #[error(transparent)]
    Classification(#[from] ClassificationError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    TrainOnAll,
    RandomOneShot,
    LinearAverageOneShot,
    CbtOneShot,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::TrainOnAll,
        StrategyKind::RandomOneShot,
        StrategyKind::LinearAverageOneShot,
        StrategyKind::CbtOneShot,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            StrategyKind::TrainOnAll => "all",
            StrategyKind::RandomOneShot => "random",
            StrategyKind::LinearAverageOneShot => "avg",
            StrategyKind::CbtOneShot => "cbt",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            StrategyKind::TrainOnAll => "Train on all",
            StrategyKind::RandomOneShot => "Random one-shot",
            StrategyKind::LinearAverageOneShot => "Linear average one-shot",
            StrategyKind::CbtOneShot => "CBT one-shot",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for StrategyKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "all" | "train_on_all" => Ok(StrategyKind::TrainOnAll),
            "random" | "random_one_shot" => Ok(StrategyKind::RandomOneShot),
            "avg" | "average" | "linear_average" | "linear_average_one_shot" => Ok(StrategyKind::LinearAverageOneShot),
            "cbt" | "cbt_one_shot" => Ok(StrategyKind::CbtOneShot),
            _ => Err(HarnessError::UnknownStrategy(s.to_string())),
        }
    }
}

pub const DEFAULT_RANDOM_REPEATS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    pub repeats: usize,
}

impl StrategySpec {
    pub fn new(kind: StrategyKind) -> Self {
        let repeats = if kind == StrategyKind::RandomOneShot {
            DEFAULT_RANDOM_REPEATS
        } else {
            1
        };
        Self { kind, repeats }
    }

    pub fn all() -> Vec<Self> {
        StrategyKind::ALL.iter().map(|&k| Self::new(k)).collect()
    }
}

/// Parses a comma-separated list such as `all,cbt,avg,random`.
pub fn parse_strategies(list: &str) -> Result<Vec<StrategySpec>, HarnessError> {
    let mut out: Vec<StrategySpec> = Vec::new();
    for part in list.split(',').filter(|p| !p.trim().is_empty()) {
        let kind: StrategyKind = part.parse()?;
        if !out.iter().any(|s| s.kind == kind) {
            out.push(StrategySpec::new(kind));
        }
    }
    if out.is_empty() {
        return Err(HarnessError::InvalidSpec("empty strategy list".into()));
    }
    Ok(out)
}

fn check_strategies(strategies: &[StrategySpec]) -> Result<(), HarnessError> {
    if strategies.is_empty() {
        return Err(HarnessError::InvalidSpec("no strategies".into()));
    }
    if strategies.iter().any(|s| s.repeats == 0) {
        return Err(HarnessError::InvalidSpec("repeats must be at least 1".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

/// Shuffles indices (within each label group when labels are given) and
/// deals them round-robin onto `k` test folds, continuing the deal across
/// groups so fold sizes differ by at most one.
pub fn kfold_split(n: usize, labels: Option<&[String]>, k: usize, seed: u64) -> Result<FoldSplit, HarnessError> {
    if k == 0 {
        return Err(HarnessError::InvalidSpec("k must be positive".into()));
    }
    if n < k {
        return Err(HarnessError::TooFewSamples { n, k });
    }
    let groups: Vec<Vec<usize>> = match labels {
        Some(l) => {
            if l.len() != n {
                return Err(HarnessError::LengthMismatch);
            }
            let mut names: Vec<&String> = l.iter().collect();
            names.sort();
            names.dedup();
            names
                .into_iter()
                .map(|name| (0..n).filter(|&i| &l[i] == name).collect())
                .collect()
        }
        None => vec![(0..n).collect()],
    };
    let mut rng = seed::rng(seed);
    let mut tests = vec![Vec::new(); k];
    let mut slot = 0;
    for mut g in groups {
        g.shuffle(&mut rng);
        for i in g {
            tests[slot % k].push(i);
            slot += 1;
        }
    }
    let folds = tests
        .into_iter()
        .map(|mut test| {
            test.sort_unstable();
            let train = (0..n).filter(|i| test.binary_search(i).is_err()).collect();
            Fold { train, test }
        })
        .collect();
    Ok(FoldSplit { k, seed, folds })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub auc: Option<f64>,
}

/// Mann-Whitney statistic: probability that a positive score outranks a
/// negative one, ties counting one half. Computed from midranks.
pub fn rank_auc(positive: &[f64], negative: &[f64]) -> Option<f64> {
    if positive.is_empty() || negative.is_empty() {
        return None;
    }
    let mut all: Vec<(f64, bool)> = positive
        .iter()
        .map(|&s| (s, true))
        .chain(negative.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Ranks doubled so midranks stay integral.
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u64;
        rank_sum2 += mid2 * all[i..=j].iter().filter(|e| e.1).count() as u64;
        i = j + 1;
    }
    let (np, nn) = (positive.len() as u64, negative.len() as u64);
    let u2 = rank_sum2 - np * (np + 1);
    Some(u2 as f64 / 2.0 / (np * nn) as f64)
}

/// Accuracy, sensitivity and specificity of `predictions` against `labels`
/// with `positive_class` as the positive label, and the rank AUC of the
/// positive-class `scores`. Ratios with an empty denominator are `None`.
pub fn classification_metrics(
    predictions: &[String],
    scores: &[f64],
    labels: &[String],
    positive_class: &str,
) -> Result<ClassificationMetrics, HarnessError> {
    if predictions.len() != labels.len() || scores.len() != labels.len() || labels.is_empty() {
        return Err(HarnessError::LengthMismatch);
    }
    let (mut tp, mut tn, mut fp, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    let mut correct = 0usize;
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for ((p, &s), l) in predictions.iter().zip(scores).zip(labels) {
        if p == l {
            correct += 1;
        }
        let (pred_pos, actual_pos) = (p == positive_class, l == positive_class);
        match (pred_pos, actual_pos) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
        }
        if actual_pos {
            pos.push(s);
        } else {
            neg.push(s);
        }
    }
    let ratio = |a: usize, b: usize| (a + b > 0).then(|| a as f64 / (a + b) as f64);
    Ok(ClassificationMetrics {
        accuracy: correct as f64 / labels.len() as f64,
        sensitivity: ratio(tp, fn_),
        specificity: ratio(tn, fp),
        auc: rank_auc(&pos, &neg),
    })
}

/// Label of the base class in synthetic populations.
pub const SYNTH_BASE_CLASS: &str = "LMCI";
/// Label of the shifted class in synthetic populations.
pub const SYNTH_SHIFTED_CLASS: &str = "AD";

/// Synthetic data generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_subjects: usize,
    pub r: usize,
    /// Weight of the class direction added to the shifted class's mean.
    pub class_separation: f64,
    /// Per-subject Gaussian deviation from the mean.
    pub noise_std: f64,
    /// Weight of the fixed drift added at each follow-up.
    pub drift_magnitude: f64,
    /// Fresh Gaussian noise added at each follow-up.
    pub step_noise_std: f64,
    /// Number of visits including the baseline.
    pub timepoints: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_subjects: 40,
            r: 8,
            class_separation: 0.3,
            noise_std: 0.05,
            drift_magnitude: 0.1,
            step_noise_std: 0.01,
            timepoints: 3,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::InvalidSpec(m.to_string()));
        if self.num_subjects == 0 || self.r < 2 {
            return bad("need at least one subject and two ROIs");
        }
        if !(self.class_separation >= 0.0) || !self.class_separation.is_finite() {
            return bad("class_separation must be a finite nonnegative number");
        }
        if !(self.noise_std >= 0.0) || !(self.step_noise_std >= 0.0) {
            return bad("noise levels must be nonnegative");
        }
        if !self.drift_magnitude.is_finite() {
            return bad("drift_magnitude must be finite");
        }
        if self.timepoints < 2 {
            return bad("timepoints must be at least 2");
        }
        Ok(())
    }
}

/// Fixed random structure shared by every subject of a synthetic dataset.
struct SynthStructure {
    base: Array2<f64>,
    direction: Array2<f64>,
    drift: Array2<f64>,
}

impl SynthStructure {
    fn new(spec: &SynthSpec) -> Self {
        let mut rng = seed::rng(seed::derive(spec.seed, "synth/structure"));
        let r = spec.r;
        let f: Vec<f64> = (0..r).map(|_| rng.random()).collect();
        let g: Vec<f64> = (0..r).map(|_| rng.random()).collect();
        let offdiag = |v: f64, i: usize, j: usize| if i == j { 0.0 } else { v };
        Self {
            base: Array2::from_shape_fn((r, r), |(i, j)| offdiag(0.05 + 0.9 * (f[i] - f[j]).abs(), i, j)),
            direction: Array2::from_shape_fn((r, r), |(i, j)| offdiag((g[i] - g[j]).abs(), i, j)),
            drift: Array2::from_shape_fn((r, r), |(i, j)| offdiag(0.5 * (f[i] + f[j]), i, j)),
        }
    }
}

fn clamp_symmetric(w: Array2<f64>) -> ConnectivityMatrix {
    let w = w.mapv(|v| v.clamp(0.0, 1.0));
    validate_connectivity(w).expect("symmetric by construction")
}

fn add_noise(m: &Array2<f64>, std: f64, normal: &Normal<f64>, rng: &mut rand_chacha::ChaCha8Rng) -> Array2<f64> {
    let r = m.nrows();
    let mut w = m.clone();
    if std > 0.0 {
        for i in 0..r {
            for j in (i + 1)..r {
                let v = w[[i, j]] + std * normal.sample(rng);
                w[[i, j]] = v;
                w[[j, i]] = v;
            }
        }
    }
    w
}

/// Class means `[base, shifted]`: the base structure, and the base plus
/// `class_separation` times a fixed direction, both clamped to [0, 1].
pub fn synth_class_means(spec: &SynthSpec) -> Result<[ConnectivityMatrix; 2], HarnessError> {
    spec.validate()?;
    let s = SynthStructure::new(spec);
    let shifted = &s.base + &(&s.direction * spec.class_separation);
    Ok([clamp_symmetric(s.base), clamp_symmetric(shifted)])
}

/// Balanced two-class population: subject `k` belongs to the base class for
/// even `k` and to the shifted class for odd `k`.
pub fn synth_population(spec: &SynthSpec) -> Result<Population, HarnessError> {
    let means = synth_class_means(spec)?;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = seed::rng(seed::derive(spec.seed, "synth/members"));
    let mut members = Vec::with_capacity(spec.num_subjects);
    let mut labels = Vec::with_capacity(spec.num_subjects);
    for k in 0..spec.num_subjects {
        let c = k % 2;
        members.push(clamp_symmetric(add_noise(means[c].weights(), spec.noise_std, &normal, &mut rng)));
        labels.push(if c == 0 { SYNTH_BASE_CLASS } else { SYNTH_SHIFTED_CLASS }.to_string());
    }
    Ok(Population::labeled(members, labels)?)
}

/// Trajectories over `timepoints` visits: a noisy baseline around the base
/// structure, then at each visit the fixed drift scaled by
/// `drift_magnitude` plus fresh noise.
pub fn synth_trajectories(spec: &SynthSpec) -> Result<Vec<Trajectory>, HarnessError> {
    spec.validate()?;
    let s = SynthStructure::new(spec);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = seed::rng(seed::derive(spec.seed, "synth/trajectories"));
    let step = &s.drift * spec.drift_magnitude;
    (0..spec.num_subjects)
        .map(|k| {
            let mut states = vec![clamp_symmetric(add_noise(&s.base, spec.noise_std, &normal, &mut rng))];
            for _ in 1..spec.timepoints {
                let prev = states.last().expect("baseline present").weights() + &step;
                states.push(clamp_symmetric(add_noise(&prev, spec.step_noise_std, &normal, &mut rng)));
            }
            Ok(Trajectory::new(format!("subject{k:03}"), states)?)
        })
        .collect()
}

/// One call into a template estimator, recorded for the leakage audit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub fold: usize,
    pub strategy: StrategyKind,
    /// Timepoint (`t0`, ...) or class the template stands for.
    pub group: String,
    pub indices: Vec<usize>,
}

fn audit(
    log: &mut Vec<AuditRecord>,
    fold_index: usize,
    fold: &Fold,
    strategy: StrategyKind,
    group: String,
    indices: &[usize],
) -> Result<(), HarnessError> {
    if let Some(&index) = indices.iter().find(|i| fold.train.binary_search(i).is_err()) {
        return Err(HarnessError::Leakage {
            fold: fold_index,
            index,
        });
    }
    log.push(AuditRecord {
        fold: fold_index,
        strategy,
        group,
        indices: indices.to_vec(),
    });
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub fn population_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

fn draw_seed(global: u64, task: &str, fold: usize, kind: StrategyKind, draw: usize) -> u64 {
    seed::derive(global, &format!("{task}/fold{fold}/{kind}/draw{draw}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionBenchmarkConfig {
    pub folds: usize,
    pub strategies: Vec<StrategySpec>,
    pub template: TemplateConfig,
    pub evolution: EvolutionHyperparams,
    pub seed: u64,
}

impl Default for RegressionBenchmarkConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            strategies: StrategySpec::all(),
            template: TemplateConfig::default(),
            evolution: EvolutionHyperparams::default(),
            seed: 0,
        }
    }
}

/// Test-fold result of one regression arm run.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionOutcome {
    /// Mean test MAE at each follow-up.
    pub mae: Vec<f64>,
    pub audit: Vec<AuditRecord>,
}

fn check_lengths(trajectories: &[Trajectory]) -> Result<usize, HarnessError> {
    let first = trajectories.first().ok_or(EvolutionError::EmptyTrainingSet)?;
    let len = first.states().len();
    if let Some(t) = trajectories.iter().find(|t| t.states().len() != len) {
        return Err(EvolutionError::InconsistentTrajectoryLength {
            subject: t.subject_id().to_string(),
            expected: len,
            found: t.states().len(),
        }
        .into());
    }
    Ok(len)
}

/// Template input groups of a training set: `(group, population indices)`.
pub type TemplateGroups = Vec<(String, Vec<usize>)>;

/// Training trajectories of one strategy built from `trajectories[train]`,
/// plus the index groups every template was computed from.
pub fn regression_training_set(
    trajectories: &[Trajectory],
    train: &[usize],
    kind: StrategyKind,
    run_seed: u64,
    template: &TemplateConfig,
) -> Result<(Vec<Trajectory>, TemplateGroups), HarnessError> {
    let len = check_lengths(trajectories)?;
    let mut groups = Vec::new();
    let per_timepoint = |t: usize| -> Result<Population, HarnessError> {
        Ok(Population::new(train.iter().map(|&i| trajectories[i].states()[t].clone()).collect())?)
    };
    let set = match kind {
        StrategyKind::TrainOnAll => train.iter().map(|&i| trajectories[i].clone()).collect(),
        StrategyKind::RandomOneShot => {
            let pick = random_one_shot_select(&per_timepoint(0)?, seed::derive(run_seed, "pick"))?;
            vec![trajectories[train[pick]].clone()]
        }
        StrategyKind::LinearAverageOneShot | StrategyKind::CbtOneShot => {
            let mut states = Vec::with_capacity(len);
            for t in 0..len {
                groups.push((format!("t{t}"), train.to_vec()));
                let pop = per_timepoint(t)?;
                states.push(if kind == StrategyKind::CbtOneShot {
                    let tc = TemplateConfig {
                        rng_seed: seed::derive(run_seed, &format!("template/t{t}")),
                        ..template.clone()
                    };
                    estimate_cbt(&pop, &tc)?
                } else {
                    linear_average_template(&pop)?
                });
            }
            let id = if kind == StrategyKind::CbtOneShot { "cbt" } else { "linear-average" };
            vec![Trajectory::new(id, states)?]
        }
    };
    Ok((set, groups))
}

/// Builds the training trajectories of one arm on `fold`, trains a cascade
/// and scores it on the test trajectories. `run_seed` fixes the random pick,
/// the template estimators and the cascade initialisation.
pub fn evaluate_regression_arm(
    trajectories: &[Trajectory],
    fold_index: usize,
    fold: &Fold,
    kind: StrategyKind,
    run_seed: u64,
    cfg: &RegressionBenchmarkConfig,
) -> Result<RegressionOutcome, HarnessError> {
    let len = check_lengths(trajectories)?;
    let mut log = Vec::new();
    let (train, groups) = regression_training_set(trajectories, &fold.train, kind, run_seed, &cfg.template)?;
    for (group, indices) in groups {
        audit(&mut log, fold_index, fold, kind, group, &indices)?;
    }
    let hp = EvolutionHyperparams {
        rng_seed: seed::derive(run_seed, "cascade"),
        ..cfg.evolution.clone()
    };
    let model = train_cascade(&train, &hp)?;
    let mut mae = vec![0.0; len - 1];
    for &i in &fold.test {
        let t = &trajectories[i];
        let preds = predict_trajectory(&model, t.baseline())?;
        for (k, (p, truth)) in preds.iter().zip(&t.states()[1..]).enumerate() {
            mae[k] += mean_absolute_error(p, truth)?;
        }
    }
    for m in &mut mae {
        *m /= fold.test.len() as f64;
    }
    Ok(RegressionOutcome { mae, audit: log })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionArmReport {
    pub strategy: StrategyKind,
    pub repeats: usize,
    /// `[fold][draw][follow-up]` test MAE.
    pub draw_mae: Vec<Vec<Vec<f64>>>,
    /// `[fold][follow-up]` test MAE averaged over draws.
    pub fold_mae: Vec<Vec<f64>>,
    /// Across-fold mean per follow-up.
    pub mean: Vec<f64>,
    /// Across-fold population standard deviation per follow-up.
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub num_subjects: usize,
    pub num_follow_ups: usize,
    pub split: FoldSplit,
    pub config: RegressionBenchmarkConfig,
    pub arms: Vec<RegressionArmReport>,
    pub audit: Vec<AuditRecord>,
}

impl RegressionReport {
    pub fn arm(&self, kind: StrategyKind) -> Option<&RegressionArmReport> {
        self.arms.iter().find(|a| a.strategy == kind)
    }
}

/// Runs every strategy on every fold and summarises the test MAE at each
/// follow-up.
pub fn run_regression_benchmark(
    trajectories: &[Trajectory],
    cfg: &RegressionBenchmarkConfig,
) -> Result<RegressionReport, HarnessError> {
    check_strategies(&cfg.strategies)?;
    let len = check_lengths(trajectories)?;
    let split = kfold_split(trajectories.len(), None, cfg.folds, seed::derive(cfg.seed, "regression/folds"))?;
    let jobs: Vec<(usize, usize, usize)> = (0..cfg.folds)
        .flat_map(|f| {
            cfg.strategies
                .iter()
                .enumerate()
                .flat_map(move |(a, s)| (0..s.repeats).map(move |d| (f, a, d)))
        })
        .collect();
    let outcomes: Vec<RegressionOutcome> = jobs
        .par_iter()
        .map(|&(f, a, d)| {
            let kind = cfg.strategies[a].kind;
            let run_seed = draw_seed(cfg.seed, "regression", f, kind, d);
            evaluate_regression_arm(trajectories, f, &split.folds[f], kind, run_seed, cfg)
        })
        .collect::<Result<_, _>>()?;

    let mut arms: Vec<RegressionArmReport> = cfg
        .strategies
        .iter()
        .map(|s| RegressionArmReport {
            strategy: s.kind,
            repeats: s.repeats,
            draw_mae: vec![Vec::new(); cfg.folds],
            fold_mae: Vec::new(),
            mean: Vec::new(),
            std: Vec::new(),
        })
        .collect();
    let mut audit_log = Vec::new();
    for (&(f, a, _), outcome) in jobs.iter().zip(outcomes) {
        arms[a].draw_mae[f].push(outcome.mae);
        audit_log.extend(outcome.audit);
    }
    for arm in &mut arms {
        arm.fold_mae = arm
            .draw_mae
            .iter()
            .map(|draws| (0..len - 1).map(|t| mean(&draws.iter().map(|d| d[t]).collect::<Vec<_>>())).collect())
            .collect();
        for t in 0..len - 1 {
            let col: Vec<f64> = arm.fold_mae.iter().map(|m| m[t]).collect();
            arm.mean.push(mean(&col));
            arm.std.push(population_std(&col));
        }
    }
    Ok(RegressionReport {
        num_subjects: trajectories.len(),
        num_follow_ups: len - 1,
        split,
        config: cfg.clone(),
        arms,
        audit: audit_log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassificationBenchmarkConfig {
    pub folds: usize,
    pub strategies: Vec<StrategySpec>,
    pub template: TemplateConfig,
    pub classifier: ClassifierConfig,
    pub positive_class: String,
    /// Predict the positive class iff its probability exceeds this value;
    /// argmax when absent.
    pub decision_threshold: Option<f64>,
    pub seed: u64,
}

impl Default for ClassificationBenchmarkConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            strategies: StrategySpec::all(),
            template: TemplateConfig::default(),
            classifier: ClassifierConfig::default(),
            positive_class: SYNTH_SHIFTED_CLASS.to_string(),
            decision_threshold: None,
            seed: 0,
        }
    }
}

/// Test-fold result of one classification arm run.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationOutcome {
    pub metrics: ClassificationMetrics,
    /// `(positive-class probability, is positive)` per test sample.
    pub scores: Vec<(f64, bool)>,
    pub audit: Vec<AuditRecord>,
}

/// The sorted class pair of a labelled population that contains `positive`.
pub fn two_classes(pop: &Population, positive: &str) -> Result<[String; 2], HarnessError> {
    if pop.labels().is_none() {
        return Err(HarnessError::MissingLabels);
    }
    let classes = pop.classes();
    if classes.len() != 2 {
        return Err(HarnessError::InvalidSpec(format!("expected 2 classes, found {}", classes.len())));
    }
    if !classes.iter().any(|c| c == positive) {
        return Err(HarnessError::InvalidSpec(format!("positive class `{positive}` not among labels")));
    }
    Ok([classes[0].clone(), classes[1].clone()])
}

/// Two-class training population of one strategy built from `pop[train]`:
/// the whole subset, or one graph per class. Also returns the index groups
/// every template was computed from.
pub fn classification_training_set(
    pop: &Population,
    train: &[usize],
    classes: &[String; 2],
    kind: StrategyKind,
    run_seed: u64,
    template: &TemplateConfig,
) -> Result<(Population, TemplateGroups), HarnessError> {
    let labels = pop.labels().ok_or(HarnessError::MissingLabels)?;
    if kind == StrategyKind::TrainOnAll {
        return Ok((pop.subset(train)?, Vec::new()));
    }
    let mut groups = Vec::new();
    let mut members = Vec::with_capacity(2);
    for c in classes {
        let idx: Vec<usize> = train.iter().copied().filter(|&i| labels[i] == *c).collect();
        if idx.is_empty() {
            return Err(ClassificationError::MissingClass(c.clone()).into());
        }
        let sub = pop.subset(&idx)?;
        let member = match kind {
            StrategyKind::RandomOneShot => {
                let pick = random_one_shot_select(&sub, seed::derive(run_seed, &format!("pick/{c}")))?;
                sub.members()[pick].clone()
            }
            StrategyKind::LinearAverageOneShot => linear_average_template(&sub)?,
            _ => {
                let tc = TemplateConfig {
                    rng_seed: seed::derive(run_seed, &format!("template/{c}")),
                    ..template.clone()
                };
                estimate_cbt(&sub, &tc)?
            }
        };
        if kind != StrategyKind::RandomOneShot {
            groups.push((c.clone(), idx));
        }
        members.push(member);
    }
    Ok((Population::labeled(members, classes.to_vec())?, groups))
}

/// Builds the training set of one arm on `fold`, trains a classifier and
/// scores it on the test fold.
pub fn evaluate_classification_arm(
    pop: &Population,
    fold_index: usize,
    fold: &Fold,
    kind: StrategyKind,
    run_seed: u64,
    cfg: &ClassificationBenchmarkConfig,
) -> Result<ClassificationOutcome, HarnessError> {
    let classes = two_classes(pop, &cfg.positive_class)?;
    let labels = pop.labels().ok_or(HarnessError::MissingLabels)?;
    let mut log = Vec::new();
    let (train, groups) = classification_training_set(pop, &fold.train, &classes, kind, run_seed, &cfg.template)?;
    for (group, indices) in groups {
        audit(&mut log, fold_index, fold, kind, group, &indices)?;
    }
    let cc = ClassifierConfig {
        rng_seed: seed::derive(run_seed, "classifier"),
        ..cfg.classifier.clone()
    };
    let model = train_classifier(&train, &classes, &cc)?;
    let positive_index = classes.iter().position(|c| *c == cfg.positive_class).expect("checked");
    let (mut preds, mut scores, mut truth, mut pairs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &i in &fold.test {
        let g = &pop.members()[i];
        let mut pred = classify(&model, g)?;
        if let Some(t) = cfg.decision_threshold {
            let index = if pred.probabilities[positive_index] > t {
                positive_index
            } else {
                1 - positive_index
            };
            pred.class_index = index;
            pred.label = classes[index].clone();
        }
        let score = pred.probabilities[positive_index];
        scores.push(score);
        pairs.push((score, labels[i] == cfg.positive_class));
        preds.push(pred.label);
        truth.push(labels[i].clone());
    }
    let metrics = classification_metrics(&preds, &scores, &truth, &cfg.positive_class)?;
    Ok(ClassificationOutcome {
        metrics,
        scores: pairs,
        audit: log,
    })
}

/// Mean and population standard deviation across folds; `None` when the
/// metric was undefined on every fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

impl MetricSummary {
    fn of(values: &[Option<f64>]) -> Self {
        let v: Vec<f64> = values.iter().flatten().copied().collect();
        if v.is_empty() {
            Self { mean: None, std: None }
        } else {
            Self {
                mean: Some(mean(&v)),
                std: Some(population_std(&v)),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationArmReport {
    pub strategy: StrategyKind,
    pub repeats: usize,
    /// `[fold][draw]` metrics.
    pub draw_metrics: Vec<Vec<ClassificationMetrics>>,
    /// Per-fold metrics averaged over draws.
    pub fold_metrics: Vec<ClassificationMetrics>,
    pub accuracy: MetricSummary,
    pub sensitivity: MetricSummary,
    pub specificity: MetricSummary,
    pub auc: MetricSummary,
    /// Test scores pooled over folds and draws, for ROC curves.
    pub pooled_scores: Vec<(f64, bool)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub num_subjects: usize,
    pub classes: [String; 2],
    pub split: FoldSplit,
    pub config: ClassificationBenchmarkConfig,
    pub arms: Vec<ClassificationArmReport>,
    pub audit: Vec<AuditRecord>,
}

impl ClassificationReport {
    pub fn arm(&self, kind: StrategyKind) -> Option<&ClassificationArmReport> {
        self.arms.iter().find(|a| a.strategy == kind)
    }
}

fn average_metrics(draws: &[ClassificationMetrics]) -> ClassificationMetrics {
    let avg = |f: &dyn Fn(&ClassificationMetrics) -> Option<f64>| {
        let v: Vec<f64> = draws.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| mean(&v))
    };
    ClassificationMetrics {
        accuracy: mean(&draws.iter().map(|m| m.accuracy).collect::<Vec<_>>()),
        sensitivity: avg(&|m| m.sensitivity),
        specificity: avg(&|m| m.specificity),
        auc: avg(&|m| m.auc),
    }
}

/// Runs every strategy on every stratified fold of a two-class population.
pub fn run_classification_benchmark(
    pop: &Population,
    cfg: &ClassificationBenchmarkConfig,
) -> Result<ClassificationReport, HarnessError> {
    check_strategies(&cfg.strategies)?;
    let classes = two_classes(pop, &cfg.positive_class)?;
    let split = kfold_split(pop.len(), pop.labels(), cfg.folds, seed::derive(cfg.seed, "classification/folds"))?;
    let jobs: Vec<(usize, usize, usize)> = (0..cfg.folds)
        .flat_map(|f| {
            cfg.strategies
                .iter()
                .enumerate()
                .flat_map(move |(a, s)| (0..s.repeats).map(move |d| (f, a, d)))
        })
        .collect();
    let outcomes: Vec<ClassificationOutcome> = jobs
        .par_iter()
        .map(|&(f, a, d)| {
            let kind = cfg.strategies[a].kind;
            let run_seed = draw_seed(cfg.seed, "classification", f, kind, d);
            evaluate_classification_arm(pop, f, &split.folds[f], kind, run_seed, cfg)
        })
        .collect::<Result<_, _>>()?;

    let mut draws: Vec<Vec<Vec<ClassificationMetrics>>> = vec![vec![Vec::new(); cfg.folds]; cfg.strategies.len()];
    let mut pooled: Vec<Vec<(f64, bool)>> = vec![Vec::new(); cfg.strategies.len()];
    let mut audit_log = Vec::new();
    for (&(f, a, _), outcome) in jobs.iter().zip(outcomes) {
        draws[a][f].push(outcome.metrics);
        pooled[a].extend(outcome.scores);
        audit_log.extend(outcome.audit);
    }
    let arms = cfg
        .strategies
        .iter()
        .zip(draws)
        .zip(pooled)
        .map(|((s, draw_metrics), pooled_scores)| {
            let fold_metrics: Vec<ClassificationMetrics> = draw_metrics.iter().map(|d| average_metrics(d)).collect();
            ClassificationArmReport {
                strategy: s.kind,
                repeats: s.repeats,
                accuracy: MetricSummary::of(&fold_metrics.iter().map(|m| Some(m.accuracy)).collect::<Vec<_>>()),
                sensitivity: MetricSummary::of(&fold_metrics.iter().map(|m| m.sensitivity).collect::<Vec<_>>()),
                specificity: MetricSummary::of(&fold_metrics.iter().map(|m| m.specificity).collect::<Vec<_>>()),
                auc: MetricSummary::of(&fold_metrics.iter().map(|m| m.auc).collect::<Vec<_>>()),
                draw_metrics,
                fold_metrics,
                pooled_scores,
            }
        })
        .collect();
    Ok(ClassificationReport {
        num_subjects: pop.len(),
        classes,
        split,
        config: cfg.clone(),
        arms,
        audit: audit_log,
    })
}
