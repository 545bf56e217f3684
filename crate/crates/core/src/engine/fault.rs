//! Runtime disturbances: state corruption, agents leaving or joining, and
//! objectives changing mid-run.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EngineError, NetworkState, Problem};
use crate::graph::{check_assumptions, AssumptionReport, Edge};
use crate::objectives::LocalObjective;

#[derive(Debug, Clone)]
pub enum Fault {
    /// Adds `U[-scale, scale]` noise to every entry of `w₁` and `w₂`.
    Perturb { scale: f64, seed: u64 },
    /// Removes the agent, its state rows, and every edge touching it.
    DropAgent { agent: usize },
    /// Inserts an agent at `index` with zero state; `edges` use post-insertion indices.
    AddAgent { index: usize, edges: Vec<Edge>, objective: LocalObjective },
    /// Replaces one agent's objective; bounds and the reference optimum are recomputed.
    SwapObjective { agent: usize, objective: LocalObjective },
}

impl Fault {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Perturb { .. } => "perturb",
            Self::DropAgent { .. } => "drop_agent",
            Self::AddAgent { .. } => "add_agent",
            Self::SwapObjective { .. } => "swap_objective",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaultOutcome {
    pub assumptions: AssumptionReport,
    /// Non-fatal problems, e.g. a drop that disconnected the graph.
    pub warnings: Vec<String>,
}

fn remove_row(m: &DMatrix<f64>, i: usize) -> DMatrix<f64> {
    m.clone().remove_row(i)
}

fn insert_zero_row(m: &DMatrix<f64>, i: usize) -> DMatrix<f64> {
    m.clone().insert_row(i, 0.0)
}

/// Applies `fault` in place. Structural faults rebuild the Laplacian and the
/// reference optimum; assumption violations are reported as warnings and the
/// caller decides whether to continue.
pub fn inject(fault: &Fault, state: &mut NetworkState, problem: &mut Problem) -> Result<FaultOutcome, EngineError> {
    match fault {
        Fault::Perturb { scale, seed } => {
            if *scale > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                for v in state.w1.iter_mut().chain(state.w2.iter_mut()) {
                    *v += rng.gen_range(-*scale..=*scale);
                }
            }
        }
        Fault::DropAgent { agent } => {
            let i = *agent;
            if i >= problem.n() {
                return Err(EngineError::BadFault(format!("cannot drop agent {i} of {}", problem.n())));
            }
            if problem.n() == 1 {
                return Err(EngineError::BadFault("cannot drop the last agent".into()));
            }
            let topology = problem.topology.without_agent(i)?;
            let model = problem.model.without_agent(i)?;
            *problem = Problem::with_tolerance(topology, model, problem.solver_tol)?;
            state.w1 = remove_row(&state.w1, i);
            state.w2 = remove_row(&state.w2, i);
        }
        Fault::AddAgent { index, edges, objective } => {
            let i = *index;
            if i > problem.n() {
                return Err(EngineError::BadFault(format!("cannot insert at {i} with {} agents", problem.n())));
            }
            let topology = problem.topology.with_agent(i, edges)?;
            let model = problem.model.with_agent(i, objective.clone())?;
            *problem = Problem::with_tolerance(topology, model, problem.solver_tol)?;
            state.w1 = insert_zero_row(&state.w1, i);
            state.w2 = insert_zero_row(&state.w2, i);
        }
        Fault::SwapObjective { agent, objective } => {
            let model = problem.model.replace_agent(*agent, objective.clone())?;
            *problem = Problem::with_tolerance(problem.topology.clone(), model, problem.solver_tol)?;
        }
    }
    let assumptions = check_assumptions(&problem.laplacian);
    let mut warnings = Vec::new();
    if !assumptions.strongly_connected {
        warnings.push(format!(
            "after {}: graph is not strongly connected; convergence is no longer guaranteed",
            fault.label()
        ));
    }
    if !assumptions.balanced {
        warnings.push(format!("after {}: graph is not weight balanced", fault.label()));
    }
    if !assumptions.sigma_below_one {
        warnings.push(format!("after {}: sigma = {:.6} >= 1", fault.label(), assumptions.sigma));
    }
    Ok(FaultOutcome { assumptions, warnings })
}
