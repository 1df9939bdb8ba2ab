//! Dense weighted brain graphs and the elementary operations shared by every
//! other module: validation, distances, mean-thresholding and node
//! relabelling.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest `|a[i][j] - a[j][i]|` accepted (and averaged away) at ingestion.
pub const ASYMMETRY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("matrix is not square ({rows}x{cols})")]
    NonSquare { rows: usize, cols: usize },
    #[error("matrix is empty")]
    Empty,
    #[error("entry ({row}, {col}) is not finite")]
    NonFiniteEntry { row: usize, col: usize },
    #[error("entry ({row}, {col}) is negative ({value})")]
    NegativeEntry { row: usize, col: usize, value: f64 },
    #[error("asymmetry {asymmetry:e} at ({row}, {col}) exceeds tolerance")]
    AsymmetryTooLarge { row: usize, col: usize, asymmetry: f64 },
    #[error("dimension mismatch: {left} ROIs vs {right} ROIs")]
    DimensionMismatch { left: usize, right: usize },
    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),
    #[error("population is empty")]
    EmptyPopulation,
    #[error("label count {labels} does not match member count {members}")]
    LabelCountMismatch { labels: usize, members: usize },
    #[error("trajectory `{0}` needs at least two timepoints")]
    TrajectoryTooShort(String),
}

/// A validated `r x r` connectivity matrix: symmetric, zero diagonal, finite
/// and nonnegative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Array2<f64>", into = "Array2<f64>")]
pub struct ConnectivityMatrix {
    weights: Array2<f64>,
}

/// A matrix standing for a whole population or class.
pub type Template = ConnectivityMatrix;

impl TryFrom<Array2<f64>> for ConnectivityMatrix {
    type Error = GraphError;

    fn try_from(raw: Array2<f64>) -> Result<Self, Self::Error> {
        validate_connectivity(raw)
    }
}

impl From<ConnectivityMatrix> for Array2<f64> {
    fn from(m: ConnectivityMatrix) -> Self {
        m.weights
    }
}

impl ConnectivityMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, GraphError> {
        let n = rows.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(GraphError::NonSquare {
                rows: n,
                cols: bad.len(),
            });
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let raw = Array2::from_shape_vec((n, n), flat).expect("shape checked above");
        validate_connectivity(raw)
    }

    /// Wraps a matrix whose invariants were established structurally by the
    /// caller (model output heads). Invariants are still checked in debug builds.
    pub(crate) fn from_trusted(weights: Array2<f64>) -> Self {
        debug_assert!(validate_connectivity(weights.clone()).map(|m| m.weights == weights).unwrap_or(false));
        Self { weights }
    }

    pub fn zeros(num_rois: usize) -> Self {
        Self {
            weights: Array2::zeros((num_rois, num_rois)),
        }
    }

    pub fn num_rois(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[[i, j]]
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.weights
    }

    /// Strict upper-triangle entries in row-major order.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let r = self.num_rois();
        let mut out = Vec::with_capacity(r * r.saturating_sub(1) / 2);
        for i in 0..r {
            for j in (i + 1)..r {
                out.push(self.weights[[i, j]]);
            }
        }
        out
    }

    fn check_same_size(&self, other: &Self) -> Result<(), GraphError> {
        if self.num_rois() != other.num_rois() {
            return Err(GraphError::DimensionMismatch {
                left: self.num_rois(),
                right: other.num_rois(),
            });
        }
        Ok(())
    }
}

/// Checks a raw matrix and returns it as a [`ConnectivityMatrix`].
///
/// Pairs whose asymmetry is within [`ASYMMETRY_TOLERANCE`] are averaged and
/// the diagonal is forced to zero.
pub fn validate_connectivity(raw: Array2<f64>) -> Result<ConnectivityMatrix, GraphError> {
    let (rows, cols) = raw.dim();
    if rows != cols {
        return Err(GraphError::NonSquare { rows, cols });
    }
    if rows == 0 {
        return Err(GraphError::Empty);
    }
    for ((row, col), v) in raw.indexed_iter() {
        if !v.is_finite() {
            return Err(GraphError::NonFiniteEntry { row, col });
        }
    }
    let mut weights = raw;
    for i in 0..rows {
        weights[[i, i]] = 0.0;
        for j in (i + 1)..rows {
            let (a, b) = (weights[[i, j]], weights[[j, i]]);
            let asymmetry = (a - b).abs();
            if asymmetry > ASYMMETRY_TOLERANCE {
                return Err(GraphError::AsymmetryTooLarge {
                    row: i,
                    col: j,
                    asymmetry,
                });
            }
            if a < 0.0 || b < 0.0 {
                return Err(GraphError::NegativeEntry {
                    row: i,
                    col: j,
                    value: a.min(b),
                });
            }
            if a != b {
                let mean = 0.5 * (a + b);
                weights[[i, j]] = mean;
                weights[[j, i]] = mean;
            }
        }
    }
    Ok(ConnectivityMatrix { weights })
}

pub fn frobenius_distance(a: &ConnectivityMatrix, b: &ConnectivityMatrix) -> Result<f64, GraphError> {
    a.check_same_size(b)?;
    let sq: f64 = a
        .weights
        .iter()
        .zip(b.weights.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sq.sqrt())
}

/// Mean absolute difference over the strict upper triangle.
pub fn mean_absolute_error(a: &ConnectivityMatrix, b: &ConnectivityMatrix) -> Result<f64, GraphError> {
    a.check_same_size(b)?;
    let r = a.num_rois();
    if r < 2 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..r {
        for j in (i + 1)..r {
            total += (a.weights[[i, j]] - b.weights[[i, j]]).abs();
        }
    }
    Ok(total / (r * (r - 1) / 2) as f64)
}

/// Boolean adjacency: symmetric with a false diagonal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyMask {
    mask: Array2<bool>,
}

impl AdjacencyMask {
    pub fn from_array(mask: Array2<bool>) -> Result<Self, GraphError> {
        let (rows, cols) = mask.dim();
        if rows != cols {
            return Err(GraphError::NonSquare { rows, cols });
        }
        let mut mask = mask;
        for i in 0..rows {
            mask[[i, i]] = false;
            for j in (i + 1)..rows {
                let v = mask[[i, j]] || mask[[j, i]];
                mask[[i, j]] = v;
                mask[[j, i]] = v;
            }
        }
        Ok(Self { mask })
    }

    pub fn num_rois(&self) -> usize {
        self.mask.nrows()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.mask[[i, j]]
    }

    pub fn as_array(&self) -> &Array2<bool> {
        &self.mask
    }

    pub fn edge_count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count() / 2
    }

    /// Neighbourhood matrix with every node also adjacent to itself.
    pub fn with_self_loops(&self) -> Array2<bool> {
        let mut m = self.mask.clone();
        for i in 0..m.nrows() {
            m[[i, i]] = true;
        }
        m
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Self, GraphError> {
        check_permutation(perm, self.num_rois())?;
        let r = self.num_rois();
        let mask = Array2::from_shape_fn((r, r), |(i, j)| self.mask[[perm[i], perm[j]]]);
        Ok(Self { mask })
    }
}

const MEAN_THRESHOLD_SLACK: f64 = 1e-12;

/// Keeps edges strictly above the mean of the strict upper triangle.
pub fn threshold_by_mean(a: &ConnectivityMatrix) -> AdjacencyMask {
    let upper = a.upper_triangle();
    let r = a.num_rois();
    if upper.is_empty() {
        return AdjacencyMask {
            mask: Array2::from_elem((r, r), false),
        };
    }
    let mean = upper.iter().sum::<f64>() / upper.len() as f64;
    // Entries within rounding of the mean count as equal to it.
    let cut = mean + MEAN_THRESHOLD_SLACK * mean.abs().max(1.0);
    let mask = Array2::from_shape_fn((r, r), |(i, j)| i != j && a.weights[[i, j]] > cut);
    AdjacencyMask { mask }
}

fn check_permutation(perm: &[usize], r: usize) -> Result<(), GraphError> {
    if perm.len() != r {
        return Err(GraphError::InvalidPermutation(format!(
            "length {} for {} nodes",
            perm.len(),
            r
        )));
    }
    let mut seen = vec![false; r];
    for &p in perm {
        if p >= r || seen[p] {
            return Err(GraphError::InvalidPermutation(format!("index {p} repeated or out of range")));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Relabels nodes so that `result[i][j] = a[perm[i]][perm[j]]`.
pub fn permute_nodes(a: &ConnectivityMatrix, perm: &[usize]) -> Result<ConnectivityMatrix, GraphError> {
    check_permutation(perm, a.num_rois())?;
    let r = a.num_rois();
    let weights = Array2::from_shape_fn((r, r), |(i, j)| a.weights[[perm[i], perm[j]]]);
    Ok(ConnectivityMatrix { weights })
}

/// Rescales all off-diagonal weights of a dataset jointly into `[0, 1]`.
/// A constant dataset is left unchanged.
pub fn normalize_min_max(matrices: &mut [ConnectivityMatrix]) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for m in matrices.iter() {
        for v in m.upper_triangle() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let span = hi - lo;
    if !(span > 0.0) {
        return;
    }
    for m in matrices.iter_mut() {
        let r = m.num_rois();
        for i in 0..r {
            for j in 0..r {
                if i != j {
                    m.weights[[i, j]] = (m.weights[[i, j]] - lo) / span;
                }
            }
        }
    }
}

/// Labelled set of same-sized connectivity matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    members: Vec<ConnectivityMatrix>,
    labels: Option<Vec<String>>,
}

impl Population {
    pub fn new(members: Vec<ConnectivityMatrix>) -> Result<Self, GraphError> {
        Self::build(members, None)
    }

    pub fn labeled(members: Vec<ConnectivityMatrix>, labels: Vec<String>) -> Result<Self, GraphError> {
        Self::build(members, Some(labels))
    }

    fn build(members: Vec<ConnectivityMatrix>, labels: Option<Vec<String>>) -> Result<Self, GraphError> {
        let first = members.first().ok_or(GraphError::EmptyPopulation)?;
        let r = first.num_rois();
        if let Some(bad) = members.iter().find(|m| m.num_rois() != r) {
            return Err(GraphError::DimensionMismatch {
                left: r,
                right: bad.num_rois(),
            });
        }
        if let Some(l) = &labels {
            if l.len() != members.len() {
                return Err(GraphError::LabelCountMismatch {
                    labels: l.len(),
                    members: members.len(),
                });
            }
        }
        Ok(Self { members, labels })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn num_rois(&self) -> usize {
        self.members[0].num_rois()
    }

    pub fn members(&self) -> &[ConnectivityMatrix] {
        &self.members
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    /// Sub-population at the given indices, labels carried along.
    pub fn subset(&self, indices: &[usize]) -> Result<Self, GraphError> {
        let members = indices.iter().map(|&i| self.members[i].clone()).collect();
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i].clone()).collect());
        Self::build(members, labels)
    }

    /// Distinct labels in sorted order.
    pub fn classes(&self) -> Vec<String> {
        let mut c: Vec<String> = self.labels.iter().flatten().cloned().collect();
        c.sort();
        c.dedup();
        c
    }

    /// Members carrying `label`.
    pub fn class_members(&self, label: &str) -> Vec<ConnectivityMatrix> {
        match &self.labels {
            None => Vec::new(),
            Some(l) => self
                .members
                .iter()
                .zip(l)
                .filter(|(_, lab)| lab.as_str() == label)
                .map(|(m, _)| m.clone())
                .collect(),
        }
    }
}

/// One subject's graphs ordered by timepoint (baseline first).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    subject_id: String,
    states: Vec<ConnectivityMatrix>,
}

impl Trajectory {
    pub fn new(subject_id: impl Into<String>, states: Vec<ConnectivityMatrix>) -> Result<Self, GraphError> {
        let subject_id = subject_id.into();
        if states.len() < 2 {
            return Err(GraphError::TrajectoryTooShort(subject_id));
        }
        let r = states[0].num_rois();
        if let Some(bad) = states.iter().find(|m| m.num_rois() != r) {
            return Err(GraphError::DimensionMismatch {
                left: r,
                right: bad.num_rois(),
            });
        }
        Ok(Self { subject_id, states })
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn states(&self) -> &[ConnectivityMatrix] {
        &self.states
    }

    pub fn baseline(&self) -> &ConnectivityMatrix {
        &self.states[0]
    }

    /// Number of follow-up timepoints.
    pub fn follow_ups(&self) -> usize {
        self.states.len() - 1
    }

    pub fn num_rois(&self) -> usize {
        self.states[0].num_rois()
    }
}
