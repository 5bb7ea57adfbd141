//! EEG graph construction: electrode layouts, spatial and functional
//! adjacency, the symmetric normalized Laplacian, and eigenvector
//! positional encodings.
//!
//! Graphs here are static per dataset: adjacency and its eigendecomposition
//! are computed once and reused for every sequence.

use std::io::Read;
use std::path::Path;

use thiserror::Error;

use crate::tensor::{sym_eigen, EigenDecomposition, Matrix, TensorError};

/// Eigenvalues at or below this are treated as trivial (one per connected
/// component); the scale matches the Jacobi residual.
pub const TRIVIAL_EIGENVALUE_THRESHOLD: f64 = 1e-8;

/// Tolerance used for the Laplacian eigendecomposition.
pub const LAPLACIAN_EIGEN_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("layout needs at least 2 electrodes, got {0}")]
    TooFewElectrodes(usize),
    #[error("duplicate electrode name {0:?}")]
    DuplicateName(String),
    #[error("electrodes {0} and {1} share an identical position")]
    DuplicatePosition(usize, usize),
    #[error("electrode {0} has a non-finite coordinate")]
    NonFinitePosition(usize),
    #[error("kNN parameter k={k} out of range [1, {max}]")]
    KOutOfRange { k: usize, max: usize },
    #[error("radius must be positive, got {0}")]
    NonPositiveRadius(f64),
    #[error("correlation threshold must lie in [0, 1], got {0}")]
    ThresholdOutOfRange(f64),
    #[error("channel {0} has zero variance; correlation is undefined")]
    ZeroVarianceChannel(usize),
    #[error("signals need at least 2 time samples, got {0}")]
    TooFewSamples(usize),
    #[error("adjacency is not symmetric: max |a_ij - a_ji| = {max_asym:.3e}")]
    AsymmetricAdjacency { max_asym: f64 },
    #[error("adjacency union requires binary inputs")]
    UnionNeedsBinary,
    #[error("requested K={requested} positional encodings, but only {max_feasible} non-trivial eigenvectors exist")]
    PeCapacity { requested: usize, max_feasible: usize },
    #[error("K must satisfy 1 <= K <= J-1 (J = {j}), got {k}")]
    PeRange { k: usize, j: usize },
    #[error("layout csv: {0}")]
    LayoutCsv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One recording site: a named scalp position in head-model units.
#[derive(Debug, Clone, PartialEq)]
pub struct Electrode {
    pub name: String,
    pub position: [f64; 3],
}

/// Ordered electrode set; the node set of every EEG graph.
#[derive(Debug, Clone)]
pub struct ElectrodeLayout {
    electrodes: Vec<Electrode>,
}

impl ElectrodeLayout {
    pub fn new(electrodes: Vec<Electrode>) -> Result<Self, GraphError> {
        if electrodes.len() < 2 {
            return Err(GraphError::TooFewElectrodes(electrodes.len()));
        }
        for (i, e) in electrodes.iter().enumerate() {
            if !e.position.iter().all(|v| v.is_finite()) {
                return Err(GraphError::NonFinitePosition(i));
            }
            for (j, other) in electrodes.iter().enumerate().take(i) {
                if other.name == e.name {
                    return Err(GraphError::DuplicateName(e.name.clone()));
                }
                if other.position == e.position {
                    return Err(GraphError::DuplicatePosition(j, i));
                }
            }
        }
        Ok(Self { electrodes })
    }

    /// Deterministic cap-like layout: `j` points on the upper unit
    /// hemisphere along a golden-angle spiral, named E00, E01, ...
    pub fn synthetic_cap(j: usize) -> Self {
        let golden = std::f64::consts::PI * (3.0 - 5.0_f64.sqrt());
        let electrodes = (0..j)
            .map(|i| {
                let t = (i as f64 + 0.5) / j as f64;
                let polar = (1.0 - t).acos();
                let azimuth = golden * i as f64;
                Electrode {
                    name: format!("E{i:02}"),
                    position: [
                        polar.sin() * azimuth.cos(),
                        polar.sin() * azimuth.sin(),
                        polar.cos(),
                    ],
                }
            })
            .collect();
        Self::new(electrodes).expect("spiral points are distinct")
    }

    pub fn len(&self) -> usize {
        self.electrodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.electrodes.is_empty()
    }

    pub fn electrodes(&self) -> &[Electrode] {
        &self.electrodes
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let a = &self.electrodes[i].position;
        let b = &self.electrodes[j].position;
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }

    /// Returns a layout with electrodes reordered by `perm` (new index i
    /// takes old electrode perm[i]); used by permutation-consistency tests.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self, GraphError> {
        let electrodes = perm.iter().map(|&p| self.electrodes[p].clone()).collect();
        Self::new(electrodes)
    }

    /// Parses `name,x,y,z` CSV (header required, file order preserved).
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self, GraphError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(|e| GraphError::LayoutCsv(e.to_string()))?;
        let expect = ["name", "x", "y", "z"];
        if headers.len() != 4 || headers.iter().zip(expect).any(|(h, e)| h != e) {
            return Err(GraphError::LayoutCsv(format!(
                "expected header name,x,y,z, got {:?}",
                headers.iter().collect::<Vec<_>>()
            )));
        }
        let mut electrodes = Vec::new();
        for (line, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| GraphError::LayoutCsv(e.to_string()))?;
            if record.len() != 4 {
                return Err(GraphError::LayoutCsv(format!("row {line}: expected 4 fields")));
            }
            let coord = |idx: usize| -> Result<f64, GraphError> {
                record[idx]
                    .parse::<f64>()
                    .map_err(|e| GraphError::LayoutCsv(format!("row {line}: {e}")))
            };
            electrodes.push(Electrode {
                name: record[0].to_string(),
                position: [coord(1)?, coord(2)?, coord(3)?],
            });
        }
        Self::new(electrodes)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self, GraphError> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn write_csv(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        writeln!(w, "name,x,y,z")?;
        for e in &self.electrodes {
            writeln!(w, "{},{},{},{}", e.name, e.position[0], e.position[1], e.position[2])?;
        }
        Ok(())
    }
}

/// How an adjacency was built; functional matrices may carry signed
/// correlation weights, everything else is binary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnectivityMode {
    Spatial,
    FunctionalBinary,
    FunctionalWeighted,
    /// Union of a spatial and a functional binary adjacency.
    Combined,
}

/// Symmetric, zero-diagonal channel adjacency.
#[derive(Debug, Clone)]
pub struct Adjacency {
    pub matrix: Matrix,
    pub mode: ConnectivityMode,
}

/// Neighbor rule for spatial connectivity.
#[derive(Debug, Clone, Copy)]
pub enum SpatialRule {
    /// Edge i->j when j is among the k nearest of i, symmetrized by union.
    Knn(usize),
    /// Edge iff Euclidean distance <= r.
    Radius(f64),
}

impl Adjacency {
    pub fn n_nodes(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_binary(&self) -> bool {
        self.matrix.data().iter().all(|&v| v == 0.0 || v == 1.0)
    }

    fn check_symmetric(m: &Matrix) -> Result<(), GraphError> {
        let mut max_asym: f64 = 0.0;
        for i in 0..m.rows() {
            for j in (i + 1)..m.cols() {
                max_asym = max_asym.max((m.at(i, j) - m.at(j, i)).abs());
            }
        }
        if max_asym > 0.0 {
            return Err(GraphError::AsymmetricAdjacency { max_asym });
        }
        Ok(())
    }

    /// Logical OR of two binary adjacencies (the default combined
    /// spatial-plus-functional graph).
    pub fn union(&self, other: &Adjacency) -> Result<Adjacency, GraphError> {
        if !self.is_binary() || !other.is_binary() {
            return Err(GraphError::UnionNeedsBinary);
        }
        let m = &self.matrix;
        let o = &other.matrix;
        if m.shape() != o.shape() {
            return Err(GraphError::Tensor(TensorError::ShapeMismatch {
                op: "adjacency union",
                lhs_rows: m.rows(),
                lhs_cols: m.cols(),
                rhs_rows: o.rows(),
                rhs_cols: o.cols(),
            }));
        }
        let matrix = Matrix::from_fn(m.rows(), m.cols(), |i, j| {
            if m.at(i, j) != 0.0 || o.at(i, j) != 0.0 { 1.0 } else { 0.0 }
        });
        Ok(Adjacency { matrix, mode: ConnectivityMode::Combined })
    }

    /// Plain CSV dump of the JxJ matrix for inspection.
    pub fn write_csv(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        for i in 0..self.matrix.rows() {
            let row: Vec<String> = self.matrix.row(i).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Connected components of the graph (self-loops implied), as a label
    /// per node. Weighted entries count as edges when nonzero.
    pub fn connected_components(&self) -> Vec<usize> {
        let n = self.n_nodes();
        let mut label = vec![usize::MAX; n];
        let mut next = 0;
        for start in 0..n {
            if label[start] != usize::MAX {
                continue;
            }
            let mut stack = vec![start];
            label[start] = next;
            while let Some(u) = stack.pop() {
                for (v, lv) in label.iter_mut().enumerate() {
                    if *lv == usize::MAX && self.matrix.at(u, v) != 0.0 {
                        *lv = next;
                        stack.push(v);
                    }
                }
            }
            next += 1;
        }
        label
    }

    pub fn n_components(&self) -> usize {
        self.connected_components().iter().max().map_or(0, |m| m + 1)
    }
}

/// Builds a binary spatial adjacency from electrode geometry. Distance ties
/// break toward the lower electrode index, so the graph is deterministic.
pub fn build_spatial_adjacency(
    layout: &ElectrodeLayout,
    rule: SpatialRule,
) -> Result<Adjacency, GraphError> {
    let j = layout.len();
    let mut m = Matrix::zeros(j, j);
    match rule {
        SpatialRule::Knn(k) => {
            if k < 1 || k > j - 1 {
                return Err(GraphError::KOutOfRange { k, max: j - 1 });
            }
            for i in 0..j {
                let mut order: Vec<usize> = (0..j).filter(|&q| q != i).collect();
                order.sort_by(|&a, &b| {
                    layout
                        .distance(i, a)
                        .total_cmp(&layout.distance(i, b))
                        .then(a.cmp(&b))
                });
                for &q in order.iter().take(k) {
                    m.set(i, q, 1.0);
                    m.set(q, i, 1.0);
                }
            }
        }
        SpatialRule::Radius(r) => {
            if r <= 0.0 {
                return Err(GraphError::NonPositiveRadius(r));
            }
            for i in 0..j {
                for q in (i + 1)..j {
                    if layout.distance(i, q) <= r {
                        m.set(i, q, 1.0);
                        m.set(q, i, 1.0);
                    }
                }
            }
        }
    }
    Ok(Adjacency { matrix: m, mode: ConnectivityMode::Spatial })
}

/// Pairwise Pearson correlation over time for one `CxT` signal block.
pub fn pearson_correlation(signals: &Matrix) -> Result<Matrix, GraphError> {
    let (c, t) = signals.shape();
    if t < 2 {
        return Err(GraphError::TooFewSamples(t));
    }
    let mut means = vec![0.0; c];
    for (i, m) in means.iter_mut().enumerate() {
        *m = signals.row(i).iter().sum::<f64>() / t as f64;
    }
    let mut sds = vec![0.0; c];
    for i in 0..c {
        let ss: f64 = signals.row(i).iter().map(|v| (v - means[i]) * (v - means[i])).sum();
        if ss == 0.0 {
            return Err(GraphError::ZeroVarianceChannel(i));
        }
        sds[i] = ss.sqrt();
    }
    let mut rho = Matrix::identity(c);
    for i in 0..c {
        for q in (i + 1)..c {
            let cov: f64 = signals
                .row(i)
                .iter()
                .zip(signals.row(q))
                .map(|(a, b)| (a - means[i]) * (b - means[q]))
                .sum();
            let r = (cov / (sds[i] * sds[q])).clamp(-1.0, 1.0);
            rho.set(i, q, r);
            rho.set(q, i, r);
        }
    }
    Ok(rho)
}

/// Builds a functional adjacency from Pearson correlation. Binary mode puts
/// an edge where `|rho| >= threshold`; weighted mode stores `rho` itself at
/// those positions. The diagonal is zero either way.
pub fn build_functional_adjacency(
    signals: &Matrix,
    threshold: f64,
    weighted: bool,
) -> Result<Adjacency, GraphError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(GraphError::ThresholdOutOfRange(threshold));
    }
    let rho = pearson_correlation(signals)?;
    let c = rho.rows();
    let mut m = Matrix::zeros(c, c);
    for i in 0..c {
        for q in 0..c {
            if i == q {
                continue;
            }
            let r = rho.at(i, q);
            if r.abs() >= threshold {
                m.set(i, q, if weighted { r } else { 1.0 });
            }
        }
    }
    let mode = if weighted {
        ConnectivityMode::FunctionalWeighted
    } else {
        ConnectivityMode::FunctionalBinary
    };
    Ok(Adjacency { matrix: m, mode })
}

/// Symmetric normalized Laplacian of a self-loop-augmented adjacency,
/// with its eigendecomposition cached.
#[derive(Debug, Clone)]
pub struct GraphLaplacian {
    pub laplacian: Matrix,
    pub degree: Vec<f64>,
    pub eig: EigenDecomposition,
}

impl GraphLaplacian {
    pub fn n_nodes(&self) -> usize {
        self.degree.len()
    }

    /// Count of trivial (numerically zero) eigenvalues; equals the number
    /// of connected components.
    pub fn n_trivial(&self) -> usize {
        self.eig
            .eigenvalues
            .iter()
            .filter(|&&v| v <= TRIVIAL_EIGENVALUE_THRESHOLD)
            .count()
    }
}

/// `I - D^{-1/2} A~ D^{-1/2}` with `A~ = |A| + I`. Weighted entries enter
/// through their absolute value (anticorrelation still couples channels and
/// the spectrum stays in [0, 2] with positive degrees).
pub fn normalized_laplacian(adjacency: &Adjacency) -> Result<GraphLaplacian, GraphError> {
    let m = &adjacency.matrix;
    Adjacency::check_symmetric(m)?;
    let n = m.rows();
    let mut aug = Matrix::identity(n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                aug.set(i, j, m.at(i, j).abs());
            }
        }
    }
    let degree: Vec<f64> = (0..n).map(|i| aug.row(i).iter().sum()).collect();
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut laplacian = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let base = if i == j { 1.0 } else { 0.0 };
            let v = base - inv_sqrt[i] * aug.at(i, j) * inv_sqrt[j];
            laplacian.set(i, j, v);
            laplacian.set(j, i, v);
        }
    }
    let eig = sym_eigen(&laplacian, LAPLACIAN_EIGEN_TOLERANCE)?;
    Ok(GraphLaplacian { laplacian, degree, eig })
}

/// Per-node spectral coordinates: the K smallest non-trivial Laplacian
/// eigenvectors, ascending by eigenvalue, signs fixed by the eigensolver.
#[derive(Debug, Clone)]
pub struct PositionalEncodings {
    pub k: usize,
    /// JxK matrix; row i is electrode i's encoding.
    pub vectors: Matrix,
}

impl PositionalEncodings {
    pub fn n_nodes(&self) -> usize {
        self.vectors.rows()
    }

    /// Rows reordered by `perm` (new row i = old row perm[i]).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let vectors =
            Matrix::from_fn(self.vectors.rows(), self.k, |i, c| self.vectors.at(perm[i], c));
        Self { k: self.k, vectors }
    }
}

/// Selects the K smallest non-trivial eigenvectors as positional encodings,
/// skipping one eigenvector per (numerically) zero eigenvalue.
pub fn positional_encodings(
    g: &GraphLaplacian,
    k: usize,
) -> Result<PositionalEncodings, GraphError> {
    let j = g.n_nodes();
    if k < 1 || k > j - 1 {
        return Err(GraphError::PeRange { k, j });
    }
    let skip = g.n_trivial();
    let available = j - skip;
    if k > available {
        return Err(GraphError::PeCapacity { requested: k, max_feasible: available });
    }
    let vectors = Matrix::from_fn(j, k, |i, c| g.eig.eigenvectors.at(i, skip + c));
    Ok(PositionalEncodings { k, vectors })
}
