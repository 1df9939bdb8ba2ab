//! Files: matrix text, template sidecars, binary checkpoints, dataset
//! manifests, run configs and report bundles.
//!
//! Matrices are written with 17 significant digits, so a save/load cycle is
//! value-exact. Checkpoints store raw little-endian `f64` words and end with
//! a SHA-256 digest of everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classification::{ClassifierConfig, GatModel};
use crate::evolution::{CascadeModel, EvolutionHyperparams};
use crate::graph::{normalize_min_max, validate_connectivity, ConnectivityMatrix, Population, Template, Trajectory};
use crate::harness::{
    parse_strategies, ClassificationBenchmarkConfig, ClassificationReport, RegressionBenchmarkConfig,
    RegressionReport, StrategyKind, SynthSpec, SYNTH_SHIFTED_CLASS,
};
use crate::nn::Module;
use crate::report;
use crate::templates::TemplateConfig;

pub const SCHEMA_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 8] = b"REPSHOT\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("file not found: {0}")]
    FileMissing(PathBuf),
    #[error("schema error in {path}: {message}")]
    Schema { path: PathBuf, message: String },
    #[error("invalid matrix {path}: {reason}")]
    MatrixInvalid { path: PathBuf, reason: String },
    #[error("{path} has {found} ROIs, expected {expected}")]
    InconsistentR { path: PathBuf, expected: usize, found: usize },
    #[error("subject `{subject}` has {found} timepoints, expected {expected}")]
    InconsistentTrajectoryLength { subject: String, expected: usize, found: usize },
    #[error("bad checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            IoError::FileMissing(path.to_path_buf())
        } else {
            IoError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn schema(path: &Path, message: impl ToString) -> IoError {
    IoError::Schema {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

/// One row per line, entries separated by single spaces.
pub fn format_matrix(m: &ConnectivityMatrix) -> String {
    let mut out = String::new();
    for row in m.weights().rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    out
}

/// Parses comma- or whitespace-separated rows. Blank lines and lines
/// starting with `#` are skipped.
pub fn parse_matrix(text: &str) -> Result<ConnectivityMatrix, String> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>().map_err(|e| format!("line {}: `{t}`: {e}", lineno + 1)))
            .collect::<Result<Vec<f64>, String>>()?;
        rows.push(row);
    }
    let r = rows.len();
    if r == 0 {
        return Err("no rows".into());
    }
    if let Some((i, row)) = rows.iter().enumerate().find(|(_, row)| row.len() != r) {
        return Err(format!("row {} has {} entries, expected {r}", i + 1, row.len()));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let raw = Array2::from_shape_vec((r, r), flat).map_err(|e| e.to_string())?;
    validate_connectivity(raw).map_err(|e| e.to_string())
}

pub fn read_matrix(path: &Path) -> Result<ConnectivityMatrix, IoError> {
    parse_matrix(&read_text(path)?).map_err(|reason| IoError::MatrixInvalid {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn write_matrix(path: &Path, m: &ConnectivityMatrix) -> Result<(), IoError> {
    write_bytes(path, format_matrix(m).as_bytes())
}

/// Hex SHA-256 over the population's shape, labels and raw weights.
pub fn population_hash(pop: &Population) -> String {
    let mut h = Sha256::new();
    h.update((pop.len() as u64).to_le_bytes());
    h.update((pop.num_rois() as u64).to_le_bytes());
    for m in pop.members() {
        for v in m.weights() {
            h.update(v.to_le_bytes());
        }
    }
    if let Some(labels) = pop.labels() {
        for l in labels {
            h.update((l.len() as u64).to_le_bytes());
            h.update(l.as_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateSource {
    Cbt,
    LinearAverage,
    RandomMember { index: usize },
}

/// Sidecar stored next to a template file as `<file>.meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateMeta {
    pub source: TemplateSource,
    pub population_hash: String,
    pub num_members: usize,
    pub num_rois: usize,
    pub config: Option<TemplateConfig>,
    pub seed: u64,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn write_template(path: &Path, t: &Template, meta: &TemplateMeta) -> Result<(), IoError> {
    write_matrix(path, t)?;
    let json = serde_json::to_string_pretty(meta).expect("metadata serializes");
    write_bytes(&sidecar_path(path), json.as_bytes())
}

pub fn read_template(path: &Path) -> Result<(Template, TemplateMeta), IoError> {
    let t = read_matrix(path)?;
    let side = sidecar_path(path);
    let meta: TemplateMeta = serde_json::from_str(&read_text(&side)?).map_err(|e| schema(&side, e))?;
    if meta.num_rois != t.num_rois() {
        return Err(IoError::InconsistentR {
            path: path.to_path_buf(),
            expected: meta.num_rois,
            found: t.num_rois(),
        });
    }
    Ok((t, meta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum CheckpointHeader {
    Cascade {
        num_rois: usize,
        num_stages: usize,
        hyperparams: EvolutionHyperparams,
    },
    Classifier {
        num_rois: usize,
        hidden_dims: Vec<usize>,
        classes: [String; 2],
        dropout_rate: f64,
        leaky_relu_alpha: f64,
    },
}

/// A trained model as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Cascade {
        model: CascadeModel,
        hyperparams: EvolutionHyperparams,
    },
    Classifier(GatModel),
}

impl Checkpoint {
    fn header(&self) -> CheckpointHeader {
        match self {
            Checkpoint::Cascade { model, hyperparams } => CheckpointHeader::Cascade {
                num_rois: model.num_rois(),
                num_stages: model.num_stages(),
                hyperparams: hyperparams.clone(),
            },
            Checkpoint::Classifier(m) => CheckpointHeader::Classifier {
                num_rois: m.num_rois(),
                hidden_dims: m.layers.iter().map(|l| l.out_dim()).collect(),
                classes: m.classes.clone(),
                dropout_rate: m.dropout_rate,
                leaky_relu_alpha: m.layers.first().map_or(0.2, |l| l.leaky_relu_alpha),
            },
        }
    }

    fn named_parameters(&self) -> Vec<(String, &Array2<f64>)> {
        match self {
            Checkpoint::Cascade { model, .. } => model.named_parameters(),
            Checkpoint::Classifier(m) => m.named_parameters(),
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Layout: magic, version, JSON header, parameter arrays (name, shape, raw
/// `f64` words), SHA-256 of all preceding bytes.
pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    let header = serde_json::to_vec(&c.header()).expect("header serializes");
    put_u64(&mut out, header.len() as u64);
    out.extend_from_slice(&header);
    let params = c.named_parameters();
    put_u64(&mut out, params.len() as u64);
    for (name, p) in params {
        put_u64(&mut out, name.len() as u64);
        out.extend_from_slice(name.as_bytes());
        let (rows, cols) = p.dim();
        put_u64(&mut out, rows as u64);
        put_u64(&mut out, cols as u64);
        for v in p.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize, String> {
        usize::try_from(self.u64()?).map_err(|_| "length overflow".to_string())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, String> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 32 {
        return Err("truncated".into());
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err("checksum mismatch".into());
    }
    let mut rd = Reader { bytes: body, pos: 0 };
    if rd.take(8)? != CHECKPOINT_MAGIC {
        return Err("not a checkpoint file".into());
    }
    let version = rd.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let n = rd.len()?;
    let header: CheckpointHeader = serde_json::from_slice(rd.take(n)?).map_err(|e| e.to_string())?;
    let count = rd.len()?;
    let mut arrays = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let n = rd.len()?;
        let name = String::from_utf8(rd.take(n)?.to_vec()).map_err(|e| e.to_string())?;
        let rows = rd.len()?;
        let cols = rd.len()?;
        let words = rows.checked_mul(cols).and_then(|w| w.checked_mul(8)).ok_or("shape overflow")?;
        let data: Vec<f64> = rd
            .take(words)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let arr = Array2::from_shape_vec((rows, cols), data).map_err(|e| e.to_string())?;
        arrays.push((name, arr));
    }
    if rd.pos != body.len() {
        return Err("trailing bytes".into());
    }
    match header {
        CheckpointHeader::Cascade {
            num_rois,
            num_stages,
            hyperparams,
        } => {
            let mut model = CascadeModel::new(num_rois, num_stages, &hyperparams);
            model.load_parameters(&arrays)?;
            Ok(Checkpoint::Cascade { model, hyperparams })
        }
        CheckpointHeader::Classifier {
            num_rois,
            hidden_dims,
            classes,
            dropout_rate,
            leaky_relu_alpha,
        } => {
            let mut model = GatModel::new(num_rois, &hidden_dims, classes, dropout_rate, leaky_relu_alpha, 0);
            model.load_parameters(&arrays)?;
            Ok(Checkpoint::Classifier(model))
        }
    }
}

pub fn write_checkpoint(path: &Path, c: &Checkpoint) -> Result<(), IoError> {
    write_bytes(path, &encode_checkpoint(c))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(&bytes).map_err(|reason| IoError::Checkpoint {
        path: path.to_path_buf(),
        reason,
    })
}

/// One matrix file in a manifest. Paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub subject: String,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub timepoint: Option<usize>,
}

/// TOML dataset manifest.
///
/// ```toml
/// schema_version = 1
/// normalize = true
///
/// [[entries]]
/// path = "s01_t0.txt"
/// subject = "s01"
/// label = "AD"
/// timepoint = 0
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    /// Min-max scale all weights of the dataset into `[0, 1]`.
    #[serde(default = "yes")]
    pub normalize: bool,
    pub entries: Vec<ManifestEntry>,
}

fn yes() -> bool {
    true
}

impl Manifest {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }
}

/// What a manifest describes: cross-sectional graphs or trajectories.
#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Population(Population),
    Trajectories(Vec<Trajectory>),
}

impl Dataset {
    pub fn into_population(self, path: &Path) -> Result<Population, IoError> {
        match self {
            Dataset::Population(p) => Ok(p),
            Dataset::Trajectories(_) => Err(schema(path, "expected one graph per subject, found timepoints")),
        }
    }

    pub fn into_trajectories(self, path: &Path) -> Result<Vec<Trajectory>, IoError> {
        match self {
            Dataset::Trajectories(t) => Ok(t),
            Dataset::Population(_) => Err(schema(path, "expected trajectories; entries need a timepoint")),
        }
    }
}

pub fn parse_manifest(path: &Path, text: &str) -> Result<Manifest, IoError> {
    let m: Manifest = toml::from_str(text).map_err(|e| schema(path, e.message()))?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(schema(path, format!("unsupported schema_version {}", m.schema_version)));
    }
    if m.entries.is_empty() {
        return Err(schema(path, "no entries"));
    }
    let with_tp = m.entries.iter().filter(|e| e.timepoint.is_some()).count();
    if with_tp != 0 && with_tp != m.entries.len() {
        return Err(schema(path, "either every entry has a timepoint or none does"));
    }
    Ok(m)
}

/// Reads a manifest and every matrix it lists.
pub fn load_manifest(path: &Path) -> Result<Dataset, IoError> {
    let manifest = parse_manifest(path, &read_text(path)?)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut matrices = Vec::with_capacity(manifest.entries.len());
    let mut r = None;
    for e in &manifest.entries {
        let file = base.join(&e.path);
        let m = read_matrix(&file)?;
        match r {
            None => r = Some(m.num_rois()),
            Some(expected) if expected != m.num_rois() => {
                return Err(IoError::InconsistentR {
                    path: file,
                    expected,
                    found: m.num_rois(),
                })
            }
            _ => {}
        }
        matrices.push(m);
    }
    if manifest.normalize {
        normalize_min_max(&mut matrices);
    }

    if manifest.entries[0].timepoint.is_none() {
        let labels: Vec<Option<String>> = manifest.entries.iter().map(|e| e.label.clone()).collect();
        let pop = if labels.iter().all(Option::is_some) {
            Population::labeled(matrices, labels.into_iter().flatten().collect())
        } else if labels.iter().all(Option::is_none) {
            Population::new(matrices)
        } else {
            return Err(schema(path, "either every entry has a label or none does"));
        }
        .map_err(|e| schema(path, e))?;
        return Ok(Dataset::Population(pop));
    }

    let mut by_subject: BTreeMap<&str, BTreeMap<usize, ConnectivityMatrix>> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    for (e, m) in manifest.entries.iter().zip(matrices) {
        let slots = by_subject.entry(e.subject.as_str()).or_insert_with(|| {
            order.push(e.subject.as_str());
            BTreeMap::new()
        });
        let tp = e.timepoint.expect("checked above");
        if slots.insert(tp, m).is_some() {
            return Err(schema(path, format!("subject `{}` lists timepoint {tp} twice", e.subject)));
        }
    }
    let expected = by_subject.values().map(|s| s.keys().max().map_or(0, |&k| k + 1)).max().unwrap_or(0);
    let mut out = Vec::with_capacity(order.len());
    for subject in order {
        let slots = by_subject.remove(subject).expect("subject present");
        if slots.len() != expected || slots.keys().copied().ne(0..expected) {
            return Err(IoError::InconsistentTrajectoryLength {
                subject: subject.to_string(),
                expected,
                found: slots.len(),
            });
        }
        out.push(Trajectory::new(subject, slots.into_values().collect()).map_err(|e| schema(path, e))?);
    }
    Ok(Dataset::Trajectories(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SynthSpec),
    Manifest(PathBuf),
}

/// Everything a benchmark run needs, loaded from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub task: Task,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<String>,
    #[serde(default = "default_repeats")]
    pub random_repeats: usize,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_positive")]
    pub positive_class: String,
    #[serde(default)]
    pub decision_threshold: Option<f64>,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub template: TemplateConfig,
    #[serde(default)]
    pub evolution: EvolutionHyperparams,
    #[serde(default)]
    pub classifier: ClassifierConfig,
}

fn default_strategies() -> Vec<String> {
    StrategyKind::ALL.iter().map(|k| k.short_name().to_string()).collect()
}

fn default_repeats() -> usize {
    crate::harness::DEFAULT_RANDOM_REPEATS
}

fn default_folds() -> usize {
    5
}

fn default_positive() -> String {
    SYNTH_SHIFTED_CLASS.to_string()
}

impl RunConfig {
    pub fn new(task: Task, dataset: DatasetSource) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            task,
            strategies: default_strategies(),
            random_repeats: default_repeats(),
            folds: default_folds(),
            seed: 0,
            output_dir: None,
            positive_class: default_positive(),
            decision_threshold: None,
            dataset,
            template: TemplateConfig::default(),
            evolution: EvolutionHyperparams::default(),
            classifier: ClassifierConfig::default(),
        }
    }

    /// Parses and checks the schema version and strategy names. Relative
    /// manifest paths are resolved against `base`.
    pub fn from_toml(text: &str, origin: &Path, base: Option<&Path>) -> Result<Self, IoError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| schema(origin, e.message()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(schema(origin, format!("unsupported schema_version {}", cfg.schema_version)));
        }
        parse_strategies(&cfg.strategies.join(",")).map_err(|e| schema(origin, e))?;
        if cfg.random_repeats == 0 || cfg.folds < 2 {
            return Err(schema(origin, "random_repeats must be positive and folds at least 2"));
        }
        if let (DatasetSource::Manifest(p), Some(base)) = (&mut cfg.dataset, base) {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Loads a config file; a referenced manifest must exist.
    pub fn load(path: &Path) -> Result<Self, IoError> {
        let cfg = Self::from_toml(&read_text(path)?, path, path.parent())?;
        if let DatasetSource::Manifest(p) = &cfg.dataset {
            if !p.exists() {
                return Err(IoError::FileMissing(p.clone()));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn strategy_specs(&self) -> Vec<crate::harness::StrategySpec> {
        let mut specs = parse_strategies(&self.strategies.join(",")).expect("validated at load");
        for s in &mut specs {
            if s.kind == StrategyKind::RandomOneShot {
                s.repeats = self.random_repeats;
            }
        }
        specs
    }

    pub fn regression(&self) -> RegressionBenchmarkConfig {
        RegressionBenchmarkConfig {
            folds: self.folds,
            strategies: self.strategy_specs(),
            template: self.template.clone(),
            evolution: self.evolution.clone(),
            seed: self.seed,
        }
    }

    pub fn classification(&self) -> ClassificationBenchmarkConfig {
        ClassificationBenchmarkConfig {
            folds: self.folds,
            strategies: self.strategy_specs(),
            template: self.template.clone(),
            classifier: self.classifier.clone(),
            positive_class: self.positive_class.clone(),
            decision_threshold: self.decision_threshold,
            seed: self.seed,
        }
    }
}

/// Writes `report.json`, `report.md` and one bar chart per follow-up into
/// `dir`. Returns the written paths.
pub fn write_regression_report(dir: &Path, rep: &RegressionReport) -> Result<Vec<PathBuf>, IoError> {
    let mut files = vec![
        (dir.join("report.json"), serde_json::to_string_pretty(rep).expect("report serializes")),
        (
            dir.join("report.md"),
            format!(
                "# Test MAE at follow-up timepoints\n\n{} subjects, {} folds, mean ± std across folds.\n\n{}",
                rep.num_subjects,
                rep.split.k,
                report::regression_table(rep)
            ),
        ),
    ];
    for t in 0..rep.num_follow_ups {
        files.push((
            dir.join(format!("mae_folds_t{}.svg", t + 1)),
            report::regression_fold_bars_svg(rep, t),
        ));
    }
    write_all(files)
}

/// Writes `report.json`, `report.md` and `roc.svg` into `dir`.
pub fn write_classification_report(dir: &Path, rep: &ClassificationReport) -> Result<Vec<PathBuf>, IoError> {
    write_all(vec![
        (dir.join("report.json"), serde_json::to_string_pretty(rep).expect("report serializes")),
        (
            dir.join("report.md"),
            format!(
                "# {} vs {} classification\n\n{} subjects, {} folds, averages over folds; positive class {}.\n\n{}",
                rep.classes[0],
                rep.classes[1],
                rep.num_subjects,
                rep.split.k,
                rep.config.positive_class,
                report::classification_table(rep)
            ),
        ),
        (dir.join("roc.svg"), report::classification_roc_svg(rep)),
    ])
}

fn write_all(files: Vec<(PathBuf, String)>) -> Result<Vec<PathBuf>, IoError> {
    let mut out = Vec::with_capacity(files.len());
    for (path, text) in files {
        write_bytes(&path, text.as_bytes())?;
        out.push(path);
    }
    Ok(out)
}

pub fn read_regression_report(path: &Path) -> Result<RegressionReport, IoError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| schema(path, e))
}

pub fn read_classification_report(path: &Path) -> Result<ClassificationReport, IoError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| schema(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_text_accepts_commas_and_comments() {
        let m = parse_matrix("# two nodes\n0, 0.5\n0.5 ,0\n\n").unwrap();
        assert_eq!(m.get(0, 1), 0.5);
        assert!(parse_matrix("0 1\n1").is_err());
        assert!(parse_matrix("0 x\n1 0").is_err());
        assert!(parse_matrix("").is_err());
        assert!(parse_matrix("0 1\n2 0").is_err());
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let model = GatModel::new(3, &[2], ["a".into(), "b".into()], 0.6, 0.2, 1);
        let mut bytes = encode_checkpoint(&Checkpoint::Classifier(model.clone()));
        assert_eq!(decode_checkpoint(&bytes).unwrap(), Checkpoint::Classifier(model));
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(decode_checkpoint(&bytes).unwrap_err().contains("checksum"));
        assert!(decode_checkpoint(&bytes[..10]).is_err());
    }

    #[test]
    fn manifest_requires_consistent_timepoints() {
        let p = Path::new("m.toml");
        let mixed = "schema_version = 1\n[[entries]]\npath = \"a\"\nsubject = \"s\"\ntimepoint = 0\n[[entries]]\npath = \"b\"\nsubject = \"s\"\n";
        assert!(matches!(parse_manifest(p, mixed), Err(IoError::Schema { .. })));
        assert!(matches!(parse_manifest(p, "schema_version = 2\nentries = []"), Err(IoError::Schema { .. })));
        assert!(matches!(parse_manifest(p, "schema_version = 1\nentries = []"), Err(IoError::Schema { .. })));
    }

    #[test]
    fn run_config_defaults_and_strategies() {
        let text = "schema_version = 1\ntask = \"classification\"\nseed = 3\n[dataset.synthetic]\nnum_subjects = 10\n";
        let cfg = RunConfig::from_toml(text, Path::new("c.toml"), None).unwrap();
        assert_eq!(cfg.folds, 5);
        let b = cfg.classification();
        assert_eq!(b.strategies.len(), 4);
        assert_eq!(b.seed, 3);
        let back = RunConfig::from_toml(&cfg.to_toml(), Path::new("c.toml"), None).unwrap();
        assert_eq!(back, cfg);
        let bad = text.replace("seed = 3", "strategies = [\"cbt\", \"nope\"]");
        assert!(RunConfig::from_toml(&bad, Path::new("c.toml"), None).is_err());
        let unknown = format!("{text}extra = 1\n");
        assert!(RunConfig::from_toml(&unknown, Path::new("c.toml"), None).is_err());
    }
}
