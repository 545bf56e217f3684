//! Lossy message exchange: per-edge memory, loss models, the extrapolating
//! protocol for Algorithm 1 (Algorithm 2), and the hold-last SVL baseline.

use std::collections::HashMap;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{
    alg1_finish, alg1_message, svl_finish, AlgorithmParams, EngineError, NetworkState, Problem, StepRecord, SvlParams,
};
use crate::graph::{Laplacian, Topology};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("loss rate {0} outside [0, 1)")]
    BadRate(f64),
    #[error("forgetting factor must be at least 1")]
    BadForgetting,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Memory slot for one directed edge `to <- from`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSlot {
    pub to: usize,
    pub from: usize,
    /// `e_ij`; `None` until the first packet arrives or after the edge is cleared.
    pub value: Option<Vec<f64>>,
    pub last_received_step: Option<usize>,
    /// Set when the forgetting rule removed the edge; cleared edges stay out
    /// of `v_i` until a packet arrives.
    pub cleared: bool,
}

impl EdgeSlot {
    pub fn initialized(&self) -> bool {
        self.value.is_some()
    }

    fn is_fresh(&self) -> bool {
        self.value.is_none() && !self.cleared
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExchangeStats {
    pub delivered: u64,
    pub lost: u64,
    pub cleared: u64,
}

/// Per-edge state for every in-edge of every agent, plus the receivers'
/// previous estimates used for extrapolation.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMemory {
    slots: Vec<EdgeSlot>,
    index: HashMap<(usize, usize), usize>,
    prev_x: Option<DMatrix<f64>>,
    stats: ExchangeStats,
}

impl EdgeMemory {
    /// Fresh memory: every edge uninitialized. A lost packet on a fresh edge is
    /// treated as delivered, which covers `k = 0` and newly added edges.
    pub fn new(topology: &Topology) -> Self {
        let slots: Vec<EdgeSlot> = topology
            .edges()
            .iter()
            .map(|e| EdgeSlot { to: e.to, from: e.from, value: None, last_received_step: None, cleared: false })
            .collect();
        let index = slots.iter().enumerate().map(|(k, s)| ((s.to, s.from), k)).collect();
        Self { slots, index, prev_x: None, stats: ExchangeStats::default() }
    }

    pub fn slots(&self) -> &[EdgeSlot] {
        &self.slots
    }

    pub fn slot(&self, to: usize, from: usize) -> Option<&EdgeSlot> {
        self.index.get(&(to, from)).map(|&k| &self.slots[k])
    }

    pub fn stats(&self) -> ExchangeStats {
        self.stats
    }

    pub fn active(&self, to: usize, from: usize) -> bool {
        self.slot(to, from).is_some_and(EdgeSlot::initialized)
    }

    /// Seeds every edge with the given messages, as if all packets at `step` arrived.
    pub fn prime(&mut self, y: &DMatrix<f64>, step: usize) {
        for s in &mut self.slots {
            s.value = Some(y.row(s.from).iter().copied().collect());
            s.last_received_step = Some(step);
            s.cleared = false;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LossMode {
    /// Every directed edge drops its packet independently with probability `rate` each step.
    Bernoulli { rate: f64 },
    /// `lost[k]` lists the `(to, from)` edges that drop at step `k`; steps past the end lose nothing.
    Schedule { lost: Vec<Vec<(usize, usize)>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossModel {
    pub mode: LossMode,
    pub seed: u64,
}

impl LossModel {
    pub fn none() -> Self {
        Self { mode: LossMode::Bernoulli { rate: 0.0 }, seed: 0 }
    }

    pub fn bernoulli(rate: f64, seed: u64) -> Result<Self, LossError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(LossError::BadRate(rate));
        }
        Ok(Self { mode: LossMode::Bernoulli { rate }, seed })
    }

    pub fn schedule(schedule: LossSchedule) -> Self {
        Self { mode: LossMode::Schedule { lost: schedule.0 }, seed: 0 }
    }

    /// `true` where the packet on `edges[e]` is lost at step `k`. A pure
    /// function of `(seed, k)`, so two algorithms see identical masks.
    pub fn mask(&self, k: usize, slots: &[EdgeSlot]) -> Vec<bool> {
        match &self.mode {
            LossMode::Bernoulli { rate } => {
                if *rate <= 0.0 {
                    return vec![false; slots.len()];
                }
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(k as u64);
                slots.iter().map(|_| rng.gen::<f64>() < *rate).collect()
            }
            LossMode::Schedule { lost } => match lost.get(k) {
                None => vec![false; slots.len()],
                Some(step) => slots.iter().map(|s| step.contains(&(s.to, s.from))).collect(),
            },
        }
    }
}

/// Loss mask file: one line per step, comma-separated one-based `i:j` pairs
/// (receiver `i`, sender `j`); an empty line means nothing is lost.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossSchedule(pub Vec<Vec<(usize, usize)>>);

impl FromStr for LossSchedule {
    type Err = LossError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut steps = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            let mut lost = Vec::new();
            if !line.is_empty() {
                for pair in line.split(',') {
                    let perr = |msg: String| LossError::Parse { line: idx + 1, msg };
                    let (a, b) =
                        pair.trim().split_once(':').ok_or_else(|| perr(format!("expected `i:j`, got {pair:?}")))?;
                    let to: usize = a.trim().parse().map_err(|_| perr(format!("bad index {a:?}")))?;
                    let from: usize = b.trim().parse().map_err(|_| perr(format!("bad index {b:?}")))?;
                    if to == 0 || from == 0 {
                        return Err(perr("indices are one-based".into()));
                    }
                    lost.push((to - 1, from - 1));
                }
            }
            steps.push(lost);
        }
        Ok(Self(steps))
    }
}

impl LossSchedule {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for step in &self.0 {
            let pairs: Vec<String> = step.iter().map(|(i, j)| format!("{}:{}", i + 1, j + 1)).collect();
            out.push_str(&pairs.join(","));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForgettingConfig {
    /// Steps of silence after which an edge is cleared; `None` disables forgetting.
    pub q: Option<usize>,
    /// When set, receivers drop cleared edges from their own Laplacian row
    /// (diagonal = sum of active in-weights) so rows keep summing to zero.
    #[serde(default)]
    pub reweight: bool,
}

impl ForgettingConfig {
    pub fn disabled() -> Self {
        Self::default()
    }

    pub fn new(q: usize, reweight: bool) -> Result<Self, LossError> {
        if q == 0 {
            return Err(LossError::BadForgetting);
        }
        Ok(Self { q: Some(q), reweight })
    }
}

/// Clears every edge silent for at least `q` steps at step `k`.
pub fn apply_forgetting(memory: &mut EdgeMemory, k: usize, cfg: &ForgettingConfig) {
    let Some(q) = cfg.q else { return };
    for s in &mut memory.slots {
        if let (Some(last), true) = (s.last_received_step, s.value.is_some()) {
            if k.saturating_sub(last) >= q {
                s.value = None;
                s.cleared = true;
                memory.stats.cleared += 1;
            }
        }
    }
}

/// How a lost packet is replaced.
enum Substitute<'a> {
    /// `e_ij ← η x_i^{k-1} + e_ij`.
    Extrapolate { eta: f64, prev_x: Option<&'a DMatrix<f64>> },
    /// Keep the last value.
    Hold,
}

/// Updates edge memory for step `k` and returns `v_i = Σ_j L_ij e_ij` (with
/// `e_ii = y_i`), summed in the same order as the lossless path.
fn exchange(
    memory: &mut EdgeMemory,
    lap: &Laplacian,
    y: &DMatrix<f64>,
    k: usize,
    loss: &LossModel,
    substitute: Substitute<'_>,
    forgetting: &ForgettingConfig,
) -> DMatrix<f64> {
    let (n, d) = y.shape();
    let mask = loss.mask(k, &memory.slots);
    for (slot, lost) in memory.slots.iter_mut().zip(mask) {
        let deliver = !lost || slot.is_fresh();
        if deliver {
            slot.value = Some(y.row(slot.from).iter().copied().collect());
            slot.last_received_step = Some(k);
            slot.cleared = false;
            memory.stats.delivered += 1;
            continue;
        }
        memory.stats.lost += 1;
        let Some(e) = slot.value.as_mut() else { continue };
        match substitute {
            Substitute::Hold => {}
            Substitute::Extrapolate { eta, prev_x: Some(px) } => {
                for (c, ec) in e.iter_mut().enumerate() {
                    *ec += eta * px[(slot.to, c)];
                }
            }
            Substitute::Extrapolate { prev_x: None, .. } => {
                *e = y.row(slot.from).iter().copied().collect();
            }
        }
    }
    apply_forgetting(memory, k, forgetting);

    let entries = lap.entries();
    let mut v = DMatrix::zeros(n, d);
    for i in 0..n {
        let diag = if forgetting.reweight {
            let mut off = 0.0;
            for j in 0..n {
                if j != i && (entries[(i, j)] == 0.0 || memory.active(i, j)) {
                    off += entries[(i, j)];
                }
            }
            -off
        } else {
            entries[(i, i)]
        };
        for j in 0..n {
            if j == i {
                if diag != 0.0 {
                    for c in 0..d {
                        v[(i, c)] += diag * y[(i, c)];
                    }
                }
                continue;
            }
            let w = entries[(i, j)];
            if w == 0.0 {
                continue;
            }
            if let Some(e) = memory.slot(i, j).and_then(|s| s.value.as_ref()) {
                for c in 0..d {
                    v[(i, c)] += w * e[c];
                }
            }
        }
    }
    v
}

/// One round of Algorithm 2. Lost packets are replaced by `η x_i^{k-1} + e_ij^{k-1}`.
pub fn step_alg2(
    state: &NetworkState,
    memory: &mut EdgeMemory,
    params: &AlgorithmParams,
    problem: &Problem,
    loss: &LossModel,
    forgetting: &ForgettingConfig,
) -> Result<(NetworkState, StepRecord), EngineError> {
    let expected = (problem.n(), problem.dim());
    if state.shape() != expected {
        return Err(EngineError::Shape { expected, got: state.shape() });
    }
    let y = alg1_message(state, params);
    let prev_x = memory.prev_x.take();
    let v = exchange(
        memory,
        &problem.laplacian,
        &y,
        state.k,
        loss,
        Substitute::Extrapolate { eta: params.eta, prev_x: prev_x.as_ref() },
        forgetting,
    );
    let (next, rec) = alg1_finish(state, params, problem, y, v)?;
    memory.prev_x = Some(rec.x.clone());
    Ok((next, rec))
}

/// One round of the SVL template where a lost packet repeats the last received message.
pub fn step_svl_holdlast(
    state: &NetworkState,
    memory: &mut EdgeMemory,
    params: &SvlParams,
    problem: &Problem,
    loss: &LossModel,
) -> Result<(NetworkState, StepRecord), EngineError> {
    let expected = (problem.n(), problem.dim());
    if state.shape() != expected {
        return Err(EngineError::Shape { expected, got: state.shape() });
    }
    let y = state.w1.clone();
    let v = exchange(memory, &problem.laplacian, &y, state.k, loss, Substitute::Hold, &ForgettingConfig::disabled());
    svl_finish(state, params, problem, y, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{construct_fixed_point, step_alg1, step_svl};
    use crate::graph::ring_lattice;
    use crate::objectives::{LabeledDataset, LocalObjective, ObjectiveModel};
    use nalgebra::DVector;

    fn lattice_quadratic() -> Problem {
        let agents = (0..7)
            .map(|i| LocalObjective::Quadratic {
                hessian: DMatrix::from_element(1, 1, 1.0 + (i % 3) as f64),
                center: DVector::from_vec(vec![i as f64 - 2.0]),
            })
            .collect();
        Problem::new(ring_lattice(7, &[1, 3, 5], 0.25).unwrap(), ObjectiveModel::new(1, agents).unwrap()).unwrap()
    }

    fn params() -> AlgorithmParams {
        AlgorithmParams::nids_like(0.2).unwrap()
    }

    #[test]
    fn lossless_alg2_is_bit_identical_to_alg1() {
        let prob = lattice_quadratic();
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut a = NetworkState::uniform(7, 1, 0.0, 1.0, &mut rng);
        let mut b = a.clone();
        let mut mem = EdgeMemory::new(&prob.topology);
        let loss = LossModel::bernoulli(0.0, 1).unwrap();
        for _ in 0..200 {
            let (na, ra) = step_alg1(&a, &p, &prob).unwrap();
            let (nb, rb) = step_alg2(&b, &mut mem, &p, &prob, &loss, &ForgettingConfig::disabled()).unwrap();
            assert_eq!(ra, rb);
            assert_eq!(na, nb);
            a = na;
            b = nb;
        }
    }

    #[test]
    fn lossless_holdlast_is_bit_identical_to_svl() {
        let prob = lattice_quadratic();
        let p = params().svl();
        let mut a = NetworkState::zeros(7, 1);
        let mut b = a.clone();
        let mut mem = EdgeMemory::new(&prob.topology);
        for _ in 0..200 {
            let (na, ra) = step_svl(&a, &p, &prob).unwrap();
            let (nb, rb) = step_svl_holdlast(&b, &mut mem, &p, &prob, &LossModel::none()).unwrap();
            assert_eq!(ra, rb);
            a = na;
            b = nb;
        }
    }

    #[test]
    fn extrapolation_arithmetic() {
        // Two agents, 0 <- 1 only lost at step 1.
        let topo = Topology::from_triples(2, &[(0, 1, 0.5), (1, 0, 0.5)]).unwrap();
        let model = ObjectiveModel::isotropic_quadratics(&[DVector::zeros(1), DVector::zeros(1)]).unwrap();
        let prob = Problem::new(topo, model).unwrap();
        let mut mem = EdgeMemory::new(&prob.topology);
        mem.slots[0].value = Some(vec![1.0]);
        mem.slots[0].last_received_step = Some(0);
        mem.prev_x = Some(DMatrix::from_element(2, 1, 2.0));
        let schedule = LossModel::schedule(LossSchedule(vec![vec![], vec![(0, 1)]]));
        let y = DMatrix::from_element(2, 1, 7.0);
        let px = mem.prev_x.clone();
        exchange(
            &mut mem,
            &prob.laplacian,
            &y,
            1,
            &schedule,
            Substitute::Extrapolate { eta: 0.5, prev_x: px.as_ref() },
            &ForgettingConfig::disabled(),
        );
        assert_eq!(mem.slot(0, 1).unwrap().value, Some(vec![2.0]));
        assert_eq!(mem.slot(1, 0).unwrap().value, Some(vec![7.0]));
        assert_eq!(mem.stats(), ExchangeStats { delivered: 1, lost: 1, cleared: 0 });
    }

    #[test]
    fn first_contact_loss_counts_as_delivery() {
        let prob = lattice_quadratic();
        let mut mem = EdgeMemory::new(&prob.topology);
        let all: Vec<(usize, usize)> = prob.topology.edges().iter().map(|e| (e.to, e.from)).collect();
        let loss = LossModel::schedule(LossSchedule(vec![all]));
        let s = NetworkState::zeros(7, 1);
        step_alg2(&s, &mut mem, &params(), &prob, &loss, &ForgettingConfig::disabled()).unwrap();
        assert!(mem.slots().iter().all(|s| s.initialized() && s.last_received_step == Some(0)));
    }

    #[test]
    fn quasi_fixed_point_extrapolation_is_exact_for_consensus() {
        // At a fixed point every x_i equals x_opt, so y_j grows by exactly η x_opt
        // per step and the extrapolated message equals the true one.
        let prob = lattice_quadratic();
        let p = params();
        let fp = construct_fixed_point(&p, &prob).unwrap();
        let mut s = fp.state();
        let mut mem = EdgeMemory::new(&prob.topology);
        for _ in 0..3 {
            let (n, _) = step_alg2(&s, &mut mem, &p, &prob, &LossModel::none(), &ForgettingConfig::disabled()).unwrap();
            s = n;
        }
        let loss = LossModel::schedule(LossSchedule(vec![vec![], vec![], vec![], vec![(0, 1)]]));
        let y_true = alg1_message(&s, &p);
        step_alg2(&s, &mut mem, &p, &prob, &loss, &ForgettingConfig::disabled()).unwrap();
        let e = mem.slot(0, 1).unwrap().value.clone().unwrap();
        assert!((e[0] - y_true[(1, 0)]).abs() < 1e-9, "{} vs {}", e[0], y_true[(1, 0)]);
    }

    #[test]
    fn forgetting_rules() {
        let prob = lattice_quadratic();
        let mut mem = EdgeMemory::new(&prob.topology);
        mem.prime(&DMatrix::zeros(7, 1), 5);
        let before = mem.clone();
        apply_forgetting(&mut mem, 5, &ForgettingConfig::new(1, false).unwrap());
        assert_eq!(mem, before);

        // Edge (0, 1) silent for q = 3 steps.
        let q = ForgettingConfig::new(3, false).unwrap();
        mem.slots[0].last_received_step = Some(2);
        apply_forgetting(&mut mem, 4, &q);
        assert!(mem.active(0, 1));
        apply_forgetting(&mut mem, 5, &q);
        assert!(!mem.active(0, 1));
        assert!(mem.slot(0, 1).unwrap().cleared);
        assert_eq!(mem.stats().cleared, 1);
        assert!(ForgettingConfig::new(0, false).is_err());
    }

    #[test]
    fn cleared_edge_drops_out_of_v() {
        let prob = lattice_quadratic();
        let p = params();
        let mut mem = EdgeMemory::new(&prob.topology);
        let s = NetworkState { w1: DMatrix::from_fn(7, 1, |i, _| i as f64), w2: DMatrix::zeros(7, 1), k: 0 };
        let (s1, _) = step_alg2(&s, &mut mem, &p, &prob, &LossModel::none(), &ForgettingConfig::disabled()).unwrap();
        // Lose (0, 1) forever from step 1 on; q = 1 clears it immediately.
        let loss = LossModel::schedule(LossSchedule(vec![vec![], vec![(0, 1)]]));
        let cfg = ForgettingConfig::new(1, true).unwrap();
        let (_, rec) = step_alg2(&s1, &mut mem, &p, &prob, &loss, &cfg).unwrap();
        let y = alg1_message(&s1, &p);
        // Row 0 receives from 1, 3, 5; only 3 and 5 remain, diagonal reweighted to 0.5.
        let expected = 0.5 * y[(0, 0)] - 0.25 * y[(3, 0)] - 0.25 * y[(5, 0)];
        assert!((rec.v[(0, 0)] - expected).abs() < 1e-12);
    }

    #[test]
    fn masks_are_deterministic_and_roughly_calibrated() {
        let prob = lattice_quadratic();
        let mem = EdgeMemory::new(&prob.topology);
        let loss = LossModel::bernoulli(0.3, 42).unwrap();
        let total: usize = (0..2000).map(|k| loss.mask(k, mem.slots()).iter().filter(|&&l| l).count()).sum();
        let rate = total as f64 / (2000.0 * 21.0);
        assert!((rate - 0.3).abs() < 0.01, "{rate}");
        assert_eq!(loss.mask(17, mem.slots()), loss.mask(17, mem.slots()));
        assert_ne!(loss.mask(17, mem.slots()), LossModel::bernoulli(0.3, 43).unwrap().mask(17, mem.slots()));
        assert!(LossModel::bernoulli(1.0, 0).is_err());
    }

    #[test]
    fn schedule_file_round_trip_and_errors() {
        let text = "1:2,3:4\n\n7:1\n";
        let sched: LossSchedule = text.parse().unwrap();
        assert_eq!(sched.0, vec![vec![(0, 1), (2, 3)], vec![], vec![(6, 0)]]);
        assert_eq!(sched.to_text(), text);
        assert!(matches!("1:2\n3-4\n".parse::<LossSchedule>(), Err(LossError::Parse { line: 2, .. })));
        assert!(matches!("0:2\n".parse::<LossSchedule>(), Err(LossError::Parse { line: 1, .. })));
    }

    #[test]
    fn holdlast_after_convergence_with_identical_objectives_stays_put() {
        let centers = vec![DVector::from_vec(vec![1.5]); 7];
        let model = ObjectiveModel::isotropic_quadratics(&centers).unwrap();
        let prob = Problem::new(ring_lattice(7, &[1, 3, 5], 0.25).unwrap(), model).unwrap();
        let p = params().svl();
        let mut s = NetworkState::zeros(7, 1);
        let mut mem = EdgeMemory::new(&prob.topology);
        for _ in 0..300 {
            s = step_svl_holdlast(&s, &mut mem, &p, &prob, &LossModel::none()).unwrap().0;
        }
        let all: Vec<(usize, usize)> = prob.topology.edges().iter().map(|e| (e.to, e.from)).collect();
        let loss = LossModel::schedule(LossSchedule(vec![all; 400]));
        let reference = s.clone();
        for _ in 0..50 {
            let (n, rec) = step_svl_holdlast(&s, &mut mem, &p, &prob, &loss).unwrap();
            assert!(rec.max_error < 1e-9);
            s = n;
        }
        assert!((&s.w1 - &reference.w1).amax() < 1e-9);
    }

    #[test]
    fn alg2_converges_under_heavy_loss_on_logistic_lattice() {
        let ds = LabeledDataset::two_ring(11, 35, 7, 2).unwrap();
        let model = ObjectiveModel::logistic(&ds).unwrap();
        let prob = Problem::with_tolerance(ring_lattice(7, &[1, 3, 5], 0.25).unwrap(), model, 1e-11).unwrap();
        // Small steps are not robust to loss here; 2/(m+L) is close to the certified optimum.
        let b = prob.model.bounds();
        let alpha = 2.0 / (b.m + b.l);
        let p = AlgorithmParams::nids_like(alpha).unwrap();
        let loss = LossModel::bernoulli(0.3, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = NetworkState::uniform(7, 6, 0.0, 1.0, &mut rng);
        let mut mem = EdgeMemory::new(&prob.topology);
        let mut last = f64::INFINITY;
        for _ in 0..6000 {
            let (n, rec) = step_alg2(&s, &mut mem, &p, &prob, &loss, &ForgettingConfig::disabled()).unwrap();
            s = n;
            last = rec.max_error;
        }
        assert!(last < 1e-6, "final error {last}");
    }
}
