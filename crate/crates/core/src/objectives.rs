//! Per-agent gradient oracles, their sector bounds `(m, L)`, and a
//! centralized reference solver.

use std::fmt;
use std::io::Read;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;

pub const DEFAULT_SOLVER_TOL: f64 = 1e-12;
pub const SOLVER_MAX_ITER: usize = 10_000_000;
pub const DEFAULT_EMBED_DEGREE: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("expected a row of length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("agent {agent} out of range (n = {n})")]
    AgentOutOfRange { agent: usize, n: usize },
    #[error("sector bounds cannot be estimated for {0} objectives; supply them explicitly")]
    Unsupported(&'static str),
    #[error("invalid sector bounds m = {m}, L = {l} (need 0 < m <= L)")]
    InvalidBounds { m: f64, l: f64 },
    #[error("reference solver stopped after {iterations} iterations with residual {residual:e}")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("model has no agents")]
    Empty,
    #[error("dataset: {0}")]
    Dataset(String),
}

pub type GradientFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type ValueFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;

/// One agent's private objective `f_i`.
#[derive(Clone)]
pub enum LocalObjective {
    /// `½ (x - c)ᵀ H (x - c)` with symmetric positive definite `H`.
    Quadratic { hessian: DMatrix<f64>, center: DVector<f64> },
    /// `Σ_j log(1 + exp(-l_j xᵀ M_j)) + reg ‖x‖²`; rows of `features` are the embedded points.
    Logistic { features: DMatrix<f64>, labels: Vec<f64>, reg: f64 },
    /// Caller-supplied gradient; the caller also owns the sector bounds.
    Custom { gradient: GradientFn, value: Option<ValueFn> },
}

impl fmt::Debug for LocalObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Quadratic { hessian, center } => {
                f.debug_struct("Quadratic").field("hessian", hessian).field("center", center).finish()
            }
            Self::Logistic { features, labels, reg } => f
                .debug_struct("Logistic")
                .field("points", &features.nrows())
                .field("features", &features.ncols())
                .field("labels", &labels.len())
                .field("reg", reg)
                .finish(),
            Self::Custom { .. } => f.write_str("Custom"),
        }
    }
}

impl LocalObjective {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Quadratic { .. } => "quadratic",
            Self::Logistic { .. } => "logistic",
            Self::Custom { .. } => "custom",
        }
    }

    pub fn dim(&self) -> Option<usize> {
        match self {
            Self::Quadratic { center, .. } => Some(center.len()),
            Self::Logistic { features, .. } => Some(features.ncols()),
            Self::Custom { .. } => None,
        }
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::Quadratic { hessian, center } => hessian * (x - center),
            Self::Logistic { features, labels, reg } => {
                let mut g = x * (2.0 * reg);
                for (row, &l) in features.row_iter().zip(labels) {
                    let t = l * row.dot(&x.transpose());
                    let coeff = -l * sigmoid(-t);
                    g += row.transpose() * coeff;
                }
                g
            }
            Self::Custom { gradient, .. } => gradient(x),
        }
    }

    pub fn value(&self, x: &DVector<f64>) -> Option<f64> {
        match self {
            Self::Quadratic { hessian, center } => {
                let d = x - center;
                Some(0.5 * d.dot(&(hessian * &d)))
            }
            Self::Logistic { features, labels, reg } => {
                let loss: f64 =
                    features.row_iter().zip(labels).map(|(row, &l)| softplus(-l * row.dot(&x.transpose()))).sum();
                Some(loss + reg * x.norm_squared())
            }
            Self::Custom { value, .. } => value.as_ref().map(|v| v(x)),
        }
    }

    /// Exact Hessian where available.
    pub fn hessian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        match self {
            Self::Quadratic { hessian, .. } => Some(hessian.clone()),
            Self::Logistic { features, labels, reg } => {
                let d = features.ncols();
                let mut h = DMatrix::identity(d, d) * (2.0 * reg);
                for (row, &l) in features.row_iter().zip(labels) {
                    let s = sigmoid(l * row.dot(&x.transpose()));
                    h += row.transpose() * row * (s * (1.0 - s));
                }
                Some(h)
            }
            Self::Custom { .. } => None,
        }
    }

    /// Closed-form `(m_i, L_i)` for this agent.
    pub fn sector_bounds(&self) -> Result<(f64, f64), ObjectiveError> {
        match self {
            Self::Quadratic { hessian, .. } => Ok(linalg::sym_extreme_eigenvalues(&linalg::symmetrize(hessian))),
            Self::Logistic { features, reg, .. } => {
                let d = features.ncols();
                let m = 2.0 * reg;
                let h = DMatrix::identity(d, d) * m + features.transpose() * features * 0.25;
                Ok((m, linalg::spectral_norm(&h)))
            }
            Self::Custom { .. } => Err(ObjectiveError::Unsupported("custom")),
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SectorBounds {
    pub m: f64,
    pub l: f64,
}

impl SectorBounds {
    pub fn new(m: f64, l: f64) -> Result<Self, ObjectiveError> {
        if !(m > 0.0 && m <= l && l.is_finite()) {
            return Err(ObjectiveError::InvalidBounds { m, l });
        }
        Ok(Self { m, l })
    }

    pub fn kappa(&self) -> f64 {
        self.l / self.m
    }
}

/// The global problem `Σ_i f_i` split across agents.
#[derive(Debug, Clone)]
pub struct ObjectiveModel {
    dim: usize,
    agents: Vec<LocalObjective>,
    bounds: SectorBounds,
}

impl ObjectiveModel {
    /// Builds a model whose bounds come from [`estimate_sector_bounds`].
    pub fn new(dim: usize, agents: Vec<LocalObjective>) -> Result<Self, ObjectiveError> {
        let bounds = aggregate_bounds(&agents)?;
        Self::with_bounds(dim, agents, bounds)
    }

    /// Builds a model with caller-supplied bounds (required for custom objectives).
    pub fn with_bounds(dim: usize, agents: Vec<LocalObjective>, bounds: SectorBounds) -> Result<Self, ObjectiveError> {
        if agents.is_empty() {
            return Err(ObjectiveError::Empty);
        }
        for a in &agents {
            if let Some(d) = a.dim() {
                if d != dim {
                    return Err(ObjectiveError::DimensionMismatch { expected: dim, got: d });
                }
            }
        }
        let bounds = SectorBounds::new(bounds.m, bounds.l)?;
        Ok(Self { dim, agents, bounds })
    }

    /// Identity-Hessian quadratics `½‖x - c_i‖²`.
    pub fn isotropic_quadratics(centers: &[DVector<f64>]) -> Result<Self, ObjectiveError> {
        let dim = centers.first().ok_or(ObjectiveError::Empty)?.len();
        let agents = centers
            .iter()
            .map(|c| LocalObjective::Quadratic { hessian: DMatrix::identity(c.len(), c.len()), center: c.clone() })
            .collect();
        Self::new(dim, agents)
    }

    /// Logistic regression with `(1/n)‖x‖²` regularization on every agent.
    pub fn logistic(dataset: &LabeledDataset) -> Result<Self, ObjectiveError> {
        let n = dataset.partition.len();
        if n == 0 {
            return Err(ObjectiveError::Empty);
        }
        let reg = 1.0 / n as f64;
        let embedded: Vec<Vec<f64>> = dataset.points.iter().map(|p| embed_polynomial(p, dataset.degree)).collect();
        let dim = embedded.first().map(Vec::len).ok_or(ObjectiveError::Dataset("no points".into()))?;
        let agents = dataset
            .partition
            .iter()
            .map(|idx| {
                let features = DMatrix::from_fn(idx.len(), dim, |r, c| embedded[idx[r]][c]);
                let labels = idx.iter().map(|&j| dataset.labels[j]).collect();
                LocalObjective::Logistic { features, labels, reg }
            })
            .collect();
        Self::new(dim, agents)
    }

    pub fn n(&self) -> usize {
        self.agents.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bounds(&self) -> SectorBounds {
        self.bounds
    }

    pub fn agents(&self) -> &[LocalObjective] {
        &self.agents
    }

    pub fn agent(&self, i: usize) -> Result<&LocalObjective, ObjectiveError> {
        self.agents.get(i).ok_or(ObjectiveError::AgentOutOfRange { agent: i, n: self.agents.len() })
    }

    pub fn kinds(&self) -> Vec<&'static str> {
        let mut k: Vec<_> = self.agents.iter().map(LocalObjective::kind).collect();
        k.dedup();
        k
    }

    pub fn gradient(&self, agent: usize, x: &DVector<f64>) -> Result<DVector<f64>, ObjectiveError> {
        if x.len() != self.dim {
            return Err(ObjectiveError::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        let g = self.agent(agent)?.gradient(x);
        if g.len() != self.dim {
            return Err(ObjectiveError::DimensionMismatch { expected: self.dim, got: g.len() });
        }
        Ok(g)
    }

    /// Row-stacked gradients `∇F(x)` for an `n × d` matrix of estimates.
    pub fn stacked_gradient(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, ObjectiveError> {
        if x.nrows() != self.n() {
            return Err(ObjectiveError::DimensionMismatch { expected: self.n(), got: x.nrows() });
        }
        let mut out = DMatrix::zeros(x.nrows(), self.dim);
        for i in 0..x.nrows() {
            let g = self.gradient(i, &x.row(i).transpose())?;
            out.set_row(i, &g.transpose());
        }
        Ok(out)
    }

    /// `Σ_i ∇f_i(x)`.
    pub fn total_gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>, ObjectiveError> {
        let mut g = DVector::zeros(self.dim);
        for i in 0..self.n() {
            g += self.gradient(i, x)?;
        }
        Ok(g)
    }

    /// Replaces agent `i`'s objective and recomputes bounds where possible.
    /// A custom replacement keeps the previous bounds.
    pub fn replace_agent(&self, i: usize, objective: LocalObjective) -> Result<Self, ObjectiveError> {
        self.agent(i)?;
        let mut agents = self.agents.clone();
        agents[i] = objective;
        let bounds = aggregate_bounds(&agents).unwrap_or(self.bounds);
        Self::with_bounds(self.dim, agents, bounds)
    }

    pub fn without_agent(&self, i: usize) -> Result<Self, ObjectiveError> {
        self.agent(i)?;
        let mut agents = self.agents.clone();
        agents.remove(i);
        let bounds = aggregate_bounds(&agents).unwrap_or(self.bounds);
        Self::with_bounds(self.dim, agents, bounds)
    }

    pub fn with_agent(&self, i: usize, objective: LocalObjective) -> Result<Self, ObjectiveError> {
        if i > self.n() {
            return Err(ObjectiveError::AgentOutOfRange { agent: i, n: self.n() + 1 });
        }
        let mut agents = self.agents.clone();
        agents.insert(i, objective);
        let bounds = aggregate_bounds(&agents).unwrap_or(self.bounds);
        Self::with_bounds(self.dim, agents, bounds)
    }

    /// Smallest/largest Hessian eigenvalue over agents at `x`; a tighter,
    /// point-dependent diagnostic next to the closed-form bounds.
    pub fn empirical_curvature_at(&self, x: &DVector<f64>) -> Option<SectorBounds> {
        let mut lo = f64::INFINITY;
        let mut hi = 0.0_f64;
        for a in &self.agents {
            let h = a.hessian(x)?;
            let (mn, mx) = linalg::sym_extreme_eigenvalues(&linalg::symmetrize(&h));
            lo = lo.min(mn);
            hi = hi.max(mx);
        }
        SectorBounds::new(lo, hi).ok()
    }

    /// Per-agent Lipschitz constants summed; a valid Lipschitz bound for `Σ f_i`.
    fn total_lipschitz(&self) -> f64 {
        self.agents.iter().map(|a| a.sector_bounds().map(|(_, l)| l).unwrap_or(self.bounds.l)).sum()
    }
}

fn aggregate_bounds(agents: &[LocalObjective]) -> Result<SectorBounds, ObjectiveError> {
    if agents.is_empty() {
        return Err(ObjectiveError::Empty);
    }
    let mut m = f64::INFINITY;
    let mut l = 0.0_f64;
    for a in agents {
        let (mi, li) = a.sector_bounds()?;
        m = m.min(mi);
        l = l.max(li);
    }
    SectorBounds::new(m, l)
}

/// Closed-form `(m, L)`: exact Hessian extremes for quadratics, `m = 2/n` and
/// `L = max_i ‖(2/n) I + ¼ M_iᵀ M_i‖` for logistic agents.
pub fn estimate_sector_bounds(model: &ObjectiveModel) -> Result<SectorBounds, ObjectiveError> {
    aggregate_bounds(model.agents())
}

/// Gradient descent with step `1 / Σ_i L_i` from the origin until
/// `‖Σ_i ∇f_i(x)‖ < tol`.
pub fn solve_centralized(model: &ObjectiveModel, tol: f64) -> Result<DVector<f64>, ObjectiveError> {
    solve_centralized_capped(model, tol, SOLVER_MAX_ITER)
}

pub fn solve_centralized_capped(
    model: &ObjectiveModel,
    tol: f64,
    max_iter: usize,
) -> Result<DVector<f64>, ObjectiveError> {
    let step = 1.0 / model.total_lipschitz();
    let mut x = DVector::zeros(model.dim());
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let g = model.total_gradient(&x)?;
        residual = g.norm();
        if residual < tol {
            return Ok(x);
        }
        x -= g * step;
    }
    Err(ObjectiveError::NotConverged { iterations: max_iter, residual })
}

/// All monomials of total degree `<= degree`, graded, lexicographic within a degree:
/// `(a, b), 2 -> (1, a, b, a², ab, b²)`.
pub fn embed_polynomial(point: &[f64], degree: usize) -> Vec<f64> {
    let mut out = vec![1.0];
    for total in 1..=degree {
        let mut exps = vec![0usize; point.len()];
        push_monomials(point, total, 0, &mut exps, &mut out);
    }
    out
}

fn push_monomials(point: &[f64], remaining: usize, var: usize, exps: &mut Vec<usize>, out: &mut Vec<f64>) {
    if var + 1 == point.len() {
        exps[var] = remaining;
        out.push(exps.iter().zip(point).map(|(&e, &p)| p.powi(e as i32)).product());
        exps[var] = 0;
        return;
    }
    if point.is_empty() {
        return;
    }
    for e in (0..=remaining).rev() {
        exps[var] = e;
        push_monomials(point, remaining - e, var + 1, exps, out);
    }
    exps[var] = 0;
}

/// Labeled 2-D points split across agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
    /// `partition[i]` lists the point indices held by agent `i`.
    pub partition: Vec<Vec<usize>>,
    pub degree: usize,
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    x1: f64,
    x2: f64,
    label: f64,
}

impl LabeledDataset {
    pub fn new(
        points: Vec<Vec<f64>>,
        labels: Vec<f64>,
        partition: Vec<Vec<usize>>,
        degree: usize,
    ) -> Result<Self, ObjectiveError> {
        let ds = Self { points, labels, partition, degree };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let bad = |m: String| Err(ObjectiveError::Dataset(m));
        if self.points.len() != self.labels.len() {
            return bad(format!("{} points but {} labels", self.points.len(), self.labels.len()));
        }
        if self.degree == 0 {
            return bad("embedding degree must be at least 1".into());
        }
        if let Some(l) = self.labels.iter().find(|&&l| l != 1.0 && l != -1.0) {
            return bad(format!("label {l} is not ±1"));
        }
        let mut seen = vec![false; self.points.len()];
        for idx in self.partition.iter().flatten() {
            match seen.get_mut(*idx) {
                None => return bad(format!("partition index {idx} out of range")),
                Some(true) => return bad(format!("point {idx} assigned twice")),
                Some(s) => *s = true,
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return bad(format!("point {missing} not assigned to any agent"));
        }
        Ok(())
    }

    /// Reads `x1,x2,label` CSV; the partition is assigned round-robin over `agents`.
    pub fn from_csv<R: Read>(reader: R, agents: usize, degree: usize) -> Result<Self, ObjectiveError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(|e| ObjectiveError::Dataset(e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["x1", "x2", "label"] {
            return Err(ObjectiveError::Dataset(format!("expected header x1,x2,label, got {:?}", headers)));
        }
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for (i, row) in rdr.deserialize::<CsvRow>().enumerate() {
            let row = row.map_err(|e| ObjectiveError::Dataset(format!("record {}: {e}", i + 1)))?;
            points.push(vec![row.x1, row.x2]);
            labels.push(row.label);
        }
        let partition = round_robin(points.len(), agents);
        Self::new(points, labels, partition, degree)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x1,x2,label\n");
        for (p, l) in self.points.iter().zip(&self.labels) {
            out.push_str(&format!("{},{},{}\n", p[0], p[1], l));
        }
        out
    }

    /// Seeded two-class set: label +1 in an inner disc, label -1 on an outer
    /// annulus, alternating so a round-robin split gives every agent both classes.
    pub fn two_ring(seed: u64, points: usize, agents: usize, degree: usize) -> Result<Self, ObjectiveError> {
        const INNER_RADIUS: f64 = 0.35;
        const OUTER_BAND: (f64, f64) = (0.5, 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::with_capacity(points);
        let mut labels = Vec::with_capacity(points);
        for j in 0..points {
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let (r, label) = if j % 2 == 0 {
                (INNER_RADIUS * rng.gen::<f64>().sqrt(), 1.0)
            } else {
                (rng.gen_range(OUTER_BAND.0..OUTER_BAND.1), -1.0)
            };
            pts.push(vec![r * theta.cos(), r * theta.sin()]);
            labels.push(label);
        }
        // A few points on the wrong side keep the optimum away from the origin but finite.
        for j in (0..points).step_by(7) {
            if j + 3 < points {
                labels.swap(j, j + 3);
            }
        }
        Self::new(pts, labels, round_robin(points, agents), degree)
    }
}

/// Point `j` goes to agent `j mod agents`.
pub fn round_robin(points: usize, agents: usize) -> Vec<Vec<usize>> {
    let mut parts = vec![Vec::new(); agents];
    for j in 0..points {
        parts[j % agents].push(j);
    }
    parts
}

/// Sector inequality value for one agent: `[⋆]ᵀ [[-2mL, L+m],[L+m, -2]] [dx; dg] >= 0`.
pub fn sector_margin(bounds: SectorBounds, dx: &DVector<f64>, dg: &DVector<f64>) -> f64 {
    let (m, l) = (bounds.m, bounds.l);
    -2.0 * m * l * dx.norm_squared() + 2.0 * (l + m) * dx.dot(dg) - 2.0 * dg.norm_squared()
}
