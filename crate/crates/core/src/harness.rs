//! Scenario files, the simulation driver, trace output, rate sweeps and the
//! built-in invariant suite.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::certify::{
    default_alpha_range, optimize_alpha_with, AlphaSearchOptions, BarrierSearch, Certificate, CertifyError,
    DEFAULT_RHO_TOL,
};
use crate::engine::{
    construct_fixed_point, fixed_point_residual, inject, project_disagreement, step_alg1, step_gm, step_svl,
    AlgorithmParams, EngineError, Fault, NetworkState, Problem,
};
use crate::graph::{check_assumptions, complete, ring_lattice, AssumptionReport, Edge, GraphError, Topology};
use crate::objectives::{
    LabeledDataset, LocalObjective, ObjectiveError, ObjectiveModel, SectorBounds, DEFAULT_EMBED_DEGREE,
    DEFAULT_SOLVER_TOL,
};
use crate::resilience::{
    step_alg2, step_svl_holdlast, EdgeMemory, ExchangeStats, ForgettingConfig, LossError, LossModel, LossSchedule,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("graph assumptions violated ({0}); set `force = true` to run anyway")]
    Assumptions(AssumptionReport),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Certify(#[from] CertifyError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io { path: path.display().to_string(), msg: e.to_string() }
}

// ---------------------------------------------------------------------------
// Scenario schema

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmKind {
    Alg1,
    Alg2,
    Svl,
    SvlHoldlast,
}

impl AlgorithmKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Alg1 => "alg1",
            Self::Alg2 => "alg2",
            Self::Svl => "svl",
            Self::SvlHoldlast => "svl_holdlast",
        }
    }

    fn lossy(self) -> bool {
        matches!(self, Self::Alg2 | Self::SvlHoldlast)
    }
}

/// Triples are `(to, from, weight)` with zero-based indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TopologySpec {
    RingLattice {
        n: usize,
        offsets: Vec<usize>,
        weight: f64,
    },
    Complete {
        n: usize,
        weight: f64,
    },
    /// Text format of [`Topology::to_text`].
    File {
        path: PathBuf,
    },
    Edges {
        n: usize,
        edges: Vec<(usize, usize, f64)>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectiveSpec {
    /// `f_i(x) = ½ (x - c_i)ᵀ H_i (x - c_i)`; `H_i = I` when `hessians` is absent.
    Quadratic {
        centers: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        hessians: Option<Vec<Vec<Vec<f64>>>>,
    },
    /// Regularized logistic loss. Data comes from `dataset` (CSV with header
    /// `x1,x2,label`) or from the seeded two-ring generator.
    Logistic {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dataset: Option<PathBuf>,
        #[serde(default = "default_points")]
        points: usize,
        #[serde(default = "default_degree")]
        degree: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dataset_seed: Option<u64>,
    },
}

fn default_points() -> usize {
    35
}

fn default_degree() -> usize {
    DEFAULT_EMBED_DEGREE
}

/// Objective for a joining agent or a swap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LocalObjectiveSpec {
    Quadratic {
        center: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        hessian: Option<Vec<Vec<f64>>>,
    },
    Logistic {
        points: Vec<Vec<f64>>,
        labels: Vec<f64>,
        #[serde(default = "default_degree")]
        degree: usize,
        /// Defaults to `1/n` for the post-fault agent count.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reg: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaKeyword {
    Optimize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlphaSpec {
    Value(f64),
    Keyword(AlphaKeyword),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsSpec {
    #[serde(default = "default_alpha")]
    pub alpha: AlphaSpec,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
}

fn default_alpha() -> AlphaSpec {
    AlphaSpec::Keyword(AlphaKeyword::Optimize)
}
fn default_beta() -> f64 {
    0.5
}
fn default_gamma() -> f64 {
    1.0
}
fn default_delta() -> f64 {
    0.5
}

impl Default for ParamsSpec {
    fn default() -> Self {
        Self { alpha: default_alpha(), beta: default_beta(), gamma: default_gamma(), delta: default_delta() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSpec {
    #[default]
    Zeros,
    Uniform {
        lo: f64,
        hi: f64,
    },
    Explicit {
        w1: Vec<Vec<f64>>,
        w2: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossSpec {
    Bernoulli {
        rate: f64,
    },
    /// One line per step of one-based `i:j` pairs.
    Schedule {
        path: PathBuf,
    },
}

/// Faults fire after the update of step `step`. Agent indices are zero-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FaultSpec {
    Perturb { step: usize, scale: f64 },
    DropAgent { step: usize, agent: usize },
    AddAgent { step: usize, index: usize, edges: Vec<(usize, usize, f64)>, objective: LocalObjectiveSpec },
    SwapObjective { step: usize, agent: usize, objective: LocalObjectiveSpec },
}

impl FaultSpec {
    pub fn step(&self) -> usize {
        match self {
            Self::Perturb { step, .. }
            | Self::DropAgent { step, .. }
            | Self::AddAgent { step, .. }
            | Self::SwapObjective { step, .. } => *step,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopSpec {
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    /// Checked only after the last scheduled fault.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_max_steps() -> usize {
    100_000
}
fn default_tolerance() -> f64 {
    1e-10
}

impl Default for StopSpec {
    fn default() -> Self {
        Self { max_steps: default_max_steps(), tolerance: default_tolerance() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub full_states: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_name")]
    pub name: String,
    /// Master seed; init, loss, fault and dataset streams are derived from it.
    #[serde(default)]
    pub seed: u64,
    pub algorithm: AlgorithmKind,
    /// Run even when the graph assumptions fail.
    #[serde(default)]
    pub force: bool,
    pub topology: TopologySpec,
    pub objective: ObjectiveSpec,
    #[serde(default)]
    pub params: ParamsSpec,
    #[serde(default)]
    pub init: InitSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forgetting: Option<ForgettingConfig>,
    #[serde(default)]
    pub stop: StopSpec,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub faults: Vec<FaultSpec>,
}

fn default_name() -> String {
    "scenario".into()
}

impl std::str::FromStr for Scenario {
    type Err = HarnessError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        toml::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))
    }
}

impl Scenario {
    /// Parses a scenario file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut sc: Scenario = text.parse()?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let TopologySpec::File { path } = &mut sc.topology {
            fix(path);
        }
        if let ObjectiveSpec::Logistic { dataset: Some(p), .. } = &mut sc.objective {
            fix(p);
        }
        if let Some(LossSpec::Schedule { path }) = &mut sc.loss {
            fix(path);
        }
        if let Some(dir) = &mut sc.output.dir {
            fix(dir);
        }
        Ok(sc)
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Parse(e.to_string()))
    }

    /// SHA-256 of the canonical serialization.
    pub fn digest(&self) -> Result<String, HarnessError> {
        Ok(format!("{:x}", Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.loss.is_some() && !self.algorithm.lossy() {
            return Err(HarnessError::Invalid(format!(
                "a loss model needs alg2 or svl_holdlast, not {}",
                self.algorithm.name()
            )));
        }
        if self.forgetting.is_some_and(|f| f.q.is_some()) && self.algorithm != AlgorithmKind::Alg2 {
            return Err(HarnessError::Invalid("forgetting applies to alg2 only".into()));
        }
        if let Some(cfg) = self.forgetting {
            if cfg.q == Some(0) {
                return Err(LossError::BadForgetting.into());
            }
        }
        let must_exist = |p: &Path| {
            if p.exists() {
                Ok(())
            } else {
                Err(HarnessError::Invalid(format!("referenced file {} does not exist", p.display())))
            }
        };
        if let TopologySpec::File { path } = &self.topology {
            must_exist(path)?;
        }
        if let ObjectiveSpec::Logistic { dataset: Some(p), .. } = &self.objective {
            must_exist(p)?;
        }
        if let Some(LossSpec::Schedule { path }) = &self.loss {
            must_exist(path)?;
        }
        if let InitSpec::Uniform { lo, hi } = self.init {
            if !(lo < hi) {
                return Err(HarnessError::Invalid(format!("uniform init needs lo < hi, got [{lo}, {hi}]")));
            }
        }
        if !(self.stop.tolerance >= 0.0) {
            return Err(HarnessError::Invalid("stop tolerance must be nonnegative".into()));
        }
        Ok(())
    }
}

const STREAM_INIT: u64 = 1;
const STREAM_LOSS: u64 = 2;
const STREAM_FAULT: u64 = 3;
const STREAM_DATASET: u64 = 4;

/// Independent sub-seed for one stream of the master seed.
pub fn sub_seed(master: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng.next_u64()
}

fn build_topology(spec: &TopologySpec) -> Result<Topology, HarnessError> {
    Ok(match spec {
        TopologySpec::RingLattice { n, offsets, weight } => ring_lattice(*n, offsets, *weight)?,
        TopologySpec::Complete { n, weight } => complete(*n, *weight)?,
        TopologySpec::File { path } => fs::read_to_string(path).map_err(|e| io_err(path, e))?.parse()?,
        TopologySpec::Edges { n, edges } => Topology::from_triples(*n, edges)?,
    })
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, HarnessError> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(HarnessError::Invalid(format!("{what} must be a non-empty rectangular array")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn quadratic(center: &[f64], hessian: Option<&Vec<Vec<f64>>>) -> Result<LocalObjective, HarnessError> {
    let d = center.len();
    let h = match hessian {
        Some(rows) => matrix_from_rows(rows, "hessian")?,
        None => DMatrix::identity(d, d),
    };
    if h.shape() != (d, d) {
        return Err(HarnessError::Invalid(format!("hessian must be {d}x{d}")));
    }
    Ok(LocalObjective::Quadratic { hessian: h, center: DVector::from_column_slice(center) })
}

fn build_model(spec: &ObjectiveSpec, n: usize, seed: u64) -> Result<ObjectiveModel, HarnessError> {
    match spec {
        ObjectiveSpec::Quadratic { centers, hessians } => {
            if centers.len() != n {
                return Err(HarnessError::Invalid(format!("{} centers for {n} agents", centers.len())));
            }
            if hessians.as_ref().is_some_and(|h| h.len() != n) {
                return Err(HarnessError::Invalid(format!("hessian count does not match {n} agents")));
            }
            let dim = centers[0].len();
            let agents = centers
                .iter()
                .enumerate()
                .map(|(i, c)| quadratic(c, hessians.as_ref().map(|h| &h[i])))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(ObjectiveModel::new(dim, agents)?)
        }
        ObjectiveSpec::Logistic { dataset, points, degree, dataset_seed } => {
            let ds = match dataset {
                Some(path) => {
                    let f = fs::File::open(path).map_err(|e| io_err(path, e))?;
                    LabeledDataset::from_csv(f, n, *degree)?
                }
                None => LabeledDataset::two_ring(
                    dataset_seed.unwrap_or(sub_seed(seed, STREAM_DATASET)),
                    *points,
                    n,
                    *degree,
                )?,
            };
            Ok(ObjectiveModel::logistic(&ds)?)
        }
    }
}

fn build_local(spec: &LocalObjectiveSpec, n_after: usize) -> Result<LocalObjective, HarnessError> {
    match spec {
        LocalObjectiveSpec::Quadratic { center, hessian } => quadratic(center, hessian.as_ref()),
        LocalObjectiveSpec::Logistic { points, labels, degree, reg } => {
            if points.len() != labels.len() || points.is_empty() {
                return Err(HarnessError::Invalid("logistic objective needs one label per point".into()));
            }
            let rows: Vec<Vec<f64>> = points.iter().map(|p| crate::objectives::embed_polynomial(p, *degree)).collect();
            Ok(LocalObjective::Logistic {
                features: matrix_from_rows(&rows, "features")?,
                labels: labels.clone(),
                reg: reg.unwrap_or(1.0 / n_after as f64),
            })
        }
    }
}

fn build_fault(spec: &FaultSpec, index: usize, seed: u64, n_now: usize) -> Result<Fault, HarnessError> {
    Ok(match spec {
        FaultSpec::Perturb { scale, .. } => {
            Fault::Perturb { scale: *scale, seed: sub_seed(sub_seed(seed, STREAM_FAULT), index as u64) }
        }
        FaultSpec::DropAgent { agent, .. } => Fault::DropAgent { agent: *agent },
        FaultSpec::AddAgent { index: at, edges, objective, .. } => Fault::AddAgent {
            index: *at,
            edges: edges.iter().map(|&(to, from, weight)| Edge { to, from, weight }).collect(),
            objective: build_local(objective, n_now + 1)?,
        },
        FaultSpec::SwapObjective { agent, objective, .. } => {
            Fault::SwapObjective { agent: *agent, objective: build_local(objective, n_now)? }
        }
    })
}

fn build_init(spec: &InitSpec, n: usize, d: usize, seed: u64) -> Result<NetworkState, HarnessError> {
    Ok(match spec {
        InitSpec::Zeros => NetworkState::zeros(n, d),
        InitSpec::Uniform { lo, hi } => {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, STREAM_INIT));
            NetworkState::uniform(n, d, *lo, *hi, &mut rng)
        }
        InitSpec::Explicit { w1, w2 } => {
            let w1 = matrix_from_rows(w1, "w1")?;
            let w2 = matrix_from_rows(w2, "w2")?;
            if w1.shape() != (n, d) || w2.shape() != (n, d) {
                return Err(HarnessError::Invalid(format!("explicit init must be {n}x{d}")));
            }
            NetworkState { w1, w2, k: 0 }
        }
    })
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub k: usize,
    pub max_error: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w1: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w2: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<Vec<Vec<f64>>>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    MaxSteps,
    /// The state left the finite range while computing step `k`.
    Diverged {
        k: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailFit {
    /// Per-step contraction factor `exp(slope)`.
    pub rate: f64,
    pub r_squared: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultEvent {
    pub step: usize,
    pub kind: String,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateRef {
    pub alpha: f64,
    pub rho: f64,
    pub transient_factor: f64,
    pub certificate: Certificate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub digest: String,
    pub seed: u64,
    pub algorithm: AlgorithmKind,
    pub params: AlgorithmParams,
    pub bounds: SectorBounds,
    pub status: RunStatus,
    pub iterations: usize,
    pub final_max_error: f64,
    pub last_finite_step: Option<usize>,
    pub tail: Option<TailFit>,
    pub assumptions: AssumptionReport,
    pub warnings: Vec<String>,
    pub faults: Vec<FaultEvent>,
    pub loss_stats: Option<ExchangeStats>,
    pub certificate: Option<CertificateRef>,
    #[serde(skip)]
    pub trace: Vec<TraceRecord>,
}

/// Least-squares fit of `ln(max_error)` against `k` over the last 30% of the
/// records after `after` whose error is still above `tol`.
pub fn fit_tail_rate(trace: &[TraceRecord], after: Option<usize>, tol: f64) -> Option<TailFit> {
    let pts: Vec<(f64, f64)> = trace
        .iter()
        .filter(|r| after.is_none_or(|a| r.k > a))
        .filter(|r| r.max_error >= tol && r.max_error > 0.0 && r.max_error.is_finite())
        .map(|r| (r.k as f64, r.max_error.ln()))
        .collect();
    let take = ((pts.len() as f64) * 0.3).ceil() as usize;
    if take < 3 {
        return None;
    }
    let tail = &pts[pts.len() - take..];
    let n = tail.len() as f64;
    let mx = tail.iter().map(|p| p.0).sum::<f64>() / n;
    let my = tail.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = tail.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = tail.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = tail.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Some(TailFit { rate: slope.exp(), r_squared, samples: tail.len() })
}

/// Certifies the step size for the problem's `(m, L, σ)` and returns it with the certificate.
pub fn certify_problem(problem: &Problem, spec: &ParamsSpec) -> Result<CertificateRef, HarnessError> {
    let b = problem.model.bounds();
    let sigma = problem.laplacian.sigma();
    let base = AlgorithmParams::new(1.0, spec.beta, spec.gamma, spec.delta)?;
    let opt = optimize_alpha_with(
        &base,
        b.m,
        b.l,
        sigma,
        default_alpha_range(b.m, b.l),
        &AlphaSearchOptions::default(),
        &BarrierSearch::default(),
    )?;
    Ok(CertificateRef {
        alpha: opt.alpha,
        rho: opt.rho,
        transient_factor: crate::certify::transient_factor(&opt.certificate),
        certificate: opt.certificate,
    })
}

/// Runs a scenario to its stop condition. Divergence is reported through
/// [`RunStatus::Diverged`] rather than as an error.
pub fn run_scenario(scenario: &Scenario) -> Result<RunReport, HarnessError> {
    scenario.validate()?;
    let seed = scenario.seed;
    let topology = build_topology(&scenario.topology)?;
    let model = build_model(&scenario.objective, topology.n(), seed)?;
    let mut problem = Problem::with_tolerance(topology, model, DEFAULT_SOLVER_TOL)?;
    let assumptions = check_assumptions(&problem.laplacian);
    let mut warnings = Vec::new();
    if !assumptions.all_pass() {
        if !scenario.force {
            return Err(HarnessError::Assumptions(assumptions));
        }
        warnings.push(format!("running despite failed assumptions: {assumptions}"));
    }

    let (params, certificate) = match scenario.params.alpha {
        AlphaSpec::Value(alpha) => {
            (AlgorithmParams::new(alpha, scenario.params.beta, scenario.params.gamma, scenario.params.delta)?, None)
        }
        AlphaSpec::Keyword(AlphaKeyword::Optimize) => {
            let cert = certify_problem(&problem, &scenario.params)?;
            let p =
                AlgorithmParams::new(cert.alpha, scenario.params.beta, scenario.params.gamma, scenario.params.delta)?;
            (p, Some(cert))
        }
    };
    let svl = params.svl();

    let mut state = build_init(&scenario.init, problem.n(), problem.dim(), seed)?;
    if matches!(scenario.algorithm, AlgorithmKind::Svl | AlgorithmKind::SvlHoldlast) && state.w2.sum().abs() > 1e-12 {
        warnings.push("SVL reaches the optimum only when the entries of w2 sum to zero at start".into());
    }
    let loss = match &scenario.loss {
        None => LossModel::none(),
        Some(LossSpec::Bernoulli { rate }) => LossModel::bernoulli(*rate, sub_seed(seed, STREAM_LOSS))?,
        Some(LossSpec::Schedule { path }) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            LossModel::schedule(text.parse::<LossSchedule>()?)
        }
    };
    let forgetting = scenario.forgetting.unwrap_or_default();
    let mut memory = EdgeMemory::new(&problem.topology);

    let mut faults: Vec<(usize, &FaultSpec)> = scenario.faults.iter().enumerate().collect();
    faults.sort_by_key(|(i, f)| (f.step(), *i));
    let last_fault = faults.last().map(|(_, f)| f.step());
    let mut next_fault = 0;
    let mut fault_log = Vec::new();

    let full = scenario.output.full_states;
    let mut trace = Vec::new();
    let mut status = RunStatus::MaxSteps;
    for k in 0..scenario.stop.max_steps {
        let result = match scenario.algorithm {
            AlgorithmKind::Alg1 => step_alg1(&state, &params, &problem),
            AlgorithmKind::Alg2 => step_alg2(&state, &mut memory, &params, &problem, &loss, &forgetting),
            AlgorithmKind::Svl => step_svl(&state, &svl, &problem),
            AlgorithmKind::SvlHoldlast => step_svl_holdlast(&state, &mut memory, &svl, &problem, &loss),
        };
        let (mut next, rec) = match result {
            Ok(r) => r,
            Err(EngineError::Diverged { .. }) => {
                status = RunStatus::Diverged { k };
                break;
            }
            Err(e) => return Err(e.into()),
        };
        if !rec.max_error.is_finite() {
            status = RunStatus::Diverged { k };
            break;
        }
        trace.push(TraceRecord {
            k,
            max_error: rec.max_error,
            w1: full.then(|| rows_of(&state.w1)),
            w2: full.then(|| rows_of(&state.w2)),
            x: full.then(|| rows_of(&rec.x)),
        });
        let mut structural = false;
        while next_fault < faults.len() && faults[next_fault].1.step() == k {
            let (idx, spec) = faults[next_fault];
            let fault = build_fault(spec, idx, seed, problem.n())?;
            structural |= matches!(fault, Fault::DropAgent { .. } | Fault::AddAgent { .. });
            let outcome = inject(&fault, &mut next, &mut problem)?;
            warnings.extend(outcome.warnings.iter().cloned());
            fault_log.push(FaultEvent { step: k, kind: fault.label().into(), warnings: outcome.warnings });
            next_fault += 1;
        }
        if structural {
            // Edges of a changed graph start fresh; the first exchange re-initializes them.
            memory = EdgeMemory::new(&problem.topology);
        }
        state = next;
        let faults_done = last_fault.is_none_or(|s| k >= s);
        if faults_done && rec.max_error < scenario.stop.tolerance {
            status = RunStatus::Converged;
            break;
        }
    }

    let final_max_error = trace.last().map_or(f64::NAN, |r| r.max_error);
    Ok(RunReport {
        name: scenario.name.clone(),
        digest: scenario.digest()?,
        seed,
        algorithm: scenario.algorithm,
        params,
        bounds: problem.model.bounds(),
        status,
        iterations: trace.len(),
        final_max_error,
        last_finite_step: trace.last().map(|r| r.k),
        tail: fit_tail_rate(&trace, last_fault, scenario.stop.tolerance),
        assumptions,
        warnings,
        faults: fault_log,
        loss_stats: scenario.algorithm.lossy().then(|| memory.stats()),
        certificate,
        trace,
    })
}

pub fn write_trace_ndjson<W: Write>(report: &RunReport, mut out: W) -> std::io::Result<()> {
    for rec in &report.trace {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct SummaryRow<'a> {
    name: &'a str,
    algorithm: &'a str,
    status: &'a str,
    iterations: usize,
    final_max_error: f64,
    tail_rate: Option<f64>,
    tail_r_squared: Option<f64>,
    certified_rho: Option<f64>,
    alpha: f64,
    digest: &'a str,
}

pub fn write_summary_csv<W: Write>(report: &RunReport, out: W) -> Result<(), HarnessError> {
    let status = match report.status {
        RunStatus::Converged => "converged",
        RunStatus::MaxSteps => "max_steps",
        RunStatus::Diverged { .. } => "diverged",
    };
    let mut w = csv::Writer::from_writer(out);
    w.serialize(SummaryRow {
        name: &report.name,
        algorithm: report.algorithm.name(),
        status,
        iterations: report.iterations,
        final_max_error: report.final_max_error,
        tail_rate: report.tail.map(|t| t.rate),
        tail_r_squared: report.tail.map(|t| t.r_squared),
        certified_rho: report.certificate.as_ref().map(|c| c.rho),
        alpha: report.params.alpha,
        digest: &report.digest,
    })
    .map_err(|e| HarnessError::Parse(e.to_string()))?;
    w.flush().map_err(|e| HarnessError::Parse(e.to_string()))
}

/// Writes `trace.ndjson`, `summary.csv` and `report.json` into `dir`.
pub fn write_outputs(report: &RunReport, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let open = |name: &str| {
        let p = dir.join(name);
        fs::File::create(&p).map(std::io::BufWriter::new).map_err(|e| io_err(&p, e))
    };
    let mut t = open("trace.ndjson")?;
    write_trace_ndjson(report, &mut t).map_err(|e| io_err(dir, e))?;
    t.flush().map_err(|e| io_err(dir, e))?;
    write_summary_csv(report, open("summary.csv")?)?;
    let mut r = open("report.json")?;
    serde_json::to_writer_pretty(&mut r, report).map_err(|e| io_err(dir, e))?;
    r.write_all(b"\n").map_err(|e| io_err(dir, e))?;
    r.flush().map_err(|e| io_err(dir, e))
}

// ---------------------------------------------------------------------------
// Rate sweeps

/// One certification row; numeric fields are empty when no certificate was found.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub kappa: f64,
    pub sigma: f64,
    pub alpha: Option<f64>,
    pub rho: Option<f64>,
    pub lambda0: Option<f64>,
    pub lambda1: Option<f64>,
    #[serde(rename = "cond_T")]
    pub cond_t: Option<f64>,
    pub feasible: bool,
    #[serde(skip)]
    pub certificate: Option<Certificate>,
    #[serde(skip)]
    pub error: Option<String>,
}

/// Certifies one `(κ, σ)` pair with `m = 1`, `L = κ`. `alpha = None` optimizes it.
pub fn certify_row(kappa: f64, sigma: f64, params: &AlgorithmParams, alpha: Option<f64>, tol: f64) -> RateRow {
    let outcome = (|| -> Result<(f64, f64, Certificate), CertifyError> {
        match alpha {
            Some(a) => {
                let p = params.with_alpha(a)?;
                let (rho, cert) = crate::certify::bisect_rho(&p, 1.0, kappa, sigma, tol)?;
                Ok((a, rho, cert))
            }
            None => {
                let opts = AlphaSearchOptions { tol, ..AlphaSearchOptions::default() };
                let o = optimize_alpha_with(
                    params,
                    1.0,
                    kappa,
                    sigma,
                    default_alpha_range(1.0, kappa),
                    &opts,
                    &BarrierSearch::default(),
                )?;
                Ok((o.alpha, o.rho, o.certificate))
            }
        }
    })();
    match outcome {
        Ok((a, rho, cert)) => RateRow {
            kappa,
            sigma,
            alpha: Some(a),
            rho: Some(rho),
            lambda0: Some(cert.lambda0),
            lambda1: Some(cert.lambda1),
            cond_t: Some(cert.cond_t),
            feasible: true,
            certificate: Some(cert),
            error: None,
        },
        Err(e) => RateRow {
            kappa,
            sigma,
            alpha,
            rho: None,
            lambda0: None,
            lambda1: None,
            cond_t: None,
            feasible: false,
            certificate: None,
            error: Some(e.to_string()),
        },
    }
}

/// Optimal step size and certified rate for each σ, sorted by σ. Failures
/// are reported per row.
pub fn sweep_rates(kappa: f64, sigmas: &[f64], params: &AlgorithmParams, tol: f64) -> Vec<RateRow> {
    let mut sorted = sigmas.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.par_iter().map(|&s| certify_row(kappa, s, params, None, tol)).collect()
}

pub fn write_rate_csv<W: Write>(rows: &[RateRow], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| HarnessError::Parse(e.to_string()))?;
    }
    w.flush().map_err(|e| HarnessError::Parse(e.to_string()))
}

// ---------------------------------------------------------------------------
// Transient bound and the invariant suite

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransientCheck {
    /// Largest `‖ξᵏ − ξ*‖ / (√cond(T) ρᵏ ‖ξ⁰ − ξ*‖ + slack)`; at most 1 when the bound holds.
    pub worst_ratio: f64,
    pub violations: usize,
    pub steps: usize,
}

/// Runs the projected system from `init` and compares the distance to the
/// fixed point against `√cond(T)·ρᵏ` times the initial distance.
pub fn check_transient_bound(
    problem: &Problem,
    params: &AlgorithmParams,
    cert: &Certificate,
    init: &NetworkState,
    steps: usize,
) -> Result<TransientCheck, HarnessError> {
    let fp = construct_fixed_point(params, problem)?;
    let factor = crate::certify::transient_factor(cert);
    let dist = |s: &NetworkState| {
        let a = &s.w1 - &fp.w1_star;
        let b = project_disagreement(&s.w2) - &fp.w2hat_star;
        (a.norm_squared() + b.norm_squared()).sqrt()
    };
    let mut state = init.projected();
    let d0 = dist(&state);
    let mut worst: f64 = 0.0;
    let mut violations = 0;
    for k in 0..=steps {
        let bound = factor * cert.rho.powi(k as i32) * d0;
        let d = dist(&state);
        // Relative slack for rounding once the error is near machine precision.
        let slack = 1e-9 * d0 + 1e-12;
        if d > bound + slack {
            violations += 1;
        }
        worst = worst.max(d / (bound + slack));
        if k < steps {
            state = step_gm(&state, params, problem)?.0;
        }
    }
    Ok(TransientCheck { worst_ratio: worst, violations, steps })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvariantCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvariantReport {
    pub checks: Vec<InvariantCheck>,
}

impl InvariantReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Seven-agent lattice with diagonal quadratics, the reference problem for the suite.
pub fn lattice_quadratic_problem(dim: usize) -> Result<Problem, HarnessError> {
    let agents = (0..7)
        .map(|i| LocalObjective::Quadratic {
            hessian: DMatrix::from_fn(dim, dim, |r, c| if r == c { 1.0 + ((i + r) % 3) as f64 } else { 0.0 }),
            center: DVector::from_fn(dim, |r, _| (i as f64 - 3.0) * 0.7 + r as f64),
        })
        .collect();
    let model = ObjectiveModel::new(dim, agents)?;
    Ok(Problem::with_tolerance(ring_lattice(7, &[1, 3, 5], 0.25)?, model, DEFAULT_SOLVER_TOL)?)
}

fn check(name: &str, run: impl FnOnce() -> Result<(bool, String), HarnessError>) -> InvariantCheck {
    match run() {
        Ok((passed, detail)) => InvariantCheck { name: name.into(), passed, detail },
        Err(e) => InvariantCheck { name: name.into(), passed: false, detail: format!("error: {e}") },
    }
}

/// Fixed point, consensus shift, lossless equivalence, lattice σ and the transient bound.
pub fn verify_invariants() -> InvariantReport {
    let mut checks = Vec::new();

    checks.push(check("lattice sigma", || {
        let lap = crate::graph::build_laplacian(&ring_lattice(7, &[1, 3, 5], 0.25)?)?;
        let s = lap.sigma();
        Ok(((s - 0.562).abs() < 1e-3, format!("sigma = {s:.6}")))
    }));

    checks.push(check("fixed point", || {
        let problem = lattice_quadratic_problem(2)?;
        let params = AlgorithmParams::nids_like(0.2)?;
        let fp = construct_fixed_point(&params, &problem)?;
        let res = fixed_point_residual(&fp, &params, &problem)?;
        let xerr = problem.max_error(&fp.x_star);
        Ok((res < 1e-9 && xerr < 1e-9, format!("residual {res:.2e}, x* error {xerr:.2e}")))
    }));

    checks.push(check("consensus shift", || {
        let problem = lattice_quadratic_problem(2)?;
        let params = AlgorithmParams::nids_like(0.2)?;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = NetworkState::uniform(7, 2, 0.0, 1.0, &mut rng);
        let mut b = a.clone();
        b.w2.add_scalar_mut(5.0);
        let mut worst: f64 = 0.0;
        for _ in 0..=200 {
            let (na, ra) = step_alg1(&a, &params, &problem)?;
            let (nb, rb) = step_alg1(&b, &params, &problem)?;
            worst = worst.max((&ra.x - &rb.x).amax());
            a = na;
            b = nb;
        }
        Ok((worst < 1e-12, format!("max |dx| = {worst:.2e}")))
    }));

    checks.push(check("zero-loss equivalence", || {
        let problem = lattice_quadratic_problem(2)?;
        let params = AlgorithmParams::nids_like(0.2)?;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut a = NetworkState::uniform(7, 2, 0.0, 1.0, &mut rng);
        let mut b = a.clone();
        let mut memory = EdgeMemory::new(&problem.topology);
        let loss = LossModel::bernoulli(0.0, 1)?;
        let mut identical = true;
        for _ in 0..500 {
            let (na, ra) = step_alg1(&a, &params, &problem)?;
            let (nb, rb) = step_alg2(&b, &mut memory, &params, &problem, &loss, &ForgettingConfig::disabled())?;
            identical &= na == nb && ra == rb;
            a = na;
            b = nb;
        }
        Ok((identical, if identical { "bit-identical over 500 steps".into() } else { "trajectories differ".into() }))
    }));

    checks.push(check("transient bound", || {
        let problem = lattice_quadratic_problem(2)?;
        let cert = certify_problem(&problem, &ParamsSpec::default())?;
        let params = AlgorithmParams::nids_like(cert.alpha)?;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let init = NetworkState::uniform(7, 2, 0.0, 1.0, &mut rng);
        let tc = check_transient_bound(&problem, &params, &cert.certificate, &init, 300)?;
        Ok((
            tc.violations == 0,
            format!("rho {:.4}, worst ratio {:.3}, {} violations", cert.rho, tc.worst_ratio, tc.violations),
        ))
    }));

    InvariantReport { checks }
}

/// Default bisection tolerance for CLI rate queries.
pub const DEFAULT_TOL: f64 = DEFAULT_RHO_TOL;
