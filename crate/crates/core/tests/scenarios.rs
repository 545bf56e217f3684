use std::fs;
use std::path::Path;

use selfheal::harness::{run_scenario, write_outputs, HarnessError, RunStatus, Scenario, TraceRecord};

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

const QUADRATIC_LATTICE: &str = r#"
name = "lattice"
seed = 7
algorithm = "alg1"

[topology]
kind = "ring_lattice"
n = 7
offsets = [1, 3, 5]
weight = 0.25

[objective]
kind = "quadratic"
centers = [[-2.0], [-1.0], [0.0], [1.0], [2.0], [3.0], [4.0]]

[params]
alpha = 0.4

[init]
kind = "uniform"
lo = -1.0
hi = 1.0

[stop]
max_steps = 2000
tolerance = 1e-11
"#;

#[test]
fn quadratic_lattice_converges_and_is_reproducible() {
    let sc: Scenario = QUADRATIC_LATTICE.parse().unwrap();
    let a = run_scenario(&sc).unwrap();
    let b = run_scenario(&sc).unwrap();
    assert_eq!(a.status, RunStatus::Converged);
    assert!(a.final_max_error < 1e-11);
    assert_eq!(a, b);
    assert_eq!(a.trace, b.trace);
    let tail = a.tail.expect("tail fit");
    assert!(tail.rate > 0.0 && tail.rate < 1.0 && tail.r_squared > 0.9);

    let mut other = sc.clone();
    other.seed = 8;
    assert_ne!(sc.digest().unwrap(), other.digest().unwrap());
    let c = run_scenario(&other).unwrap();
    assert_ne!(a.trace[0], c.trace[0]);
}

#[test]
fn digest_survives_a_toml_round_trip() {
    let sc: Scenario = QUADRATIC_LATTICE.parse().unwrap();
    let back: Scenario = sc.to_toml().unwrap().parse().unwrap();
    assert_eq!(sc, back);
    assert_eq!(sc.digest().unwrap(), back.digest().unwrap());
}

#[test]
fn file_references_resolve_next_to_the_scenario() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "ring.txt",
        "# directed ring with chords\n4\n1 2 0.3\n2 3 0.3\n3 4 0.3\n4 1 0.3\n1 3 0.2\n3 1 0.2\n2 4 0.2\n4 2 0.2\n",
    );
    let mut csv = String::from("x1,x2,label\n");
    for i in 0..24 {
        let t = i as f64 * 0.7;
        let r = if i % 2 == 0 { 0.5 } else { 1.5 };
        csv.push_str(&format!("{},{},{}\n", r * t.cos(), r * t.sin(), if i % 2 == 0 { 1 } else { -1 }));
    }
    write(dir.path(), "points.csv", &csv);
    let sched: String = (0..50).map(|k| if k % 3 == 0 { "1:2,3:4\n" } else { "\n" }).collect();
    write(dir.path(), "loss.txt", &sched);
    let scenario = write(
        dir.path(),
        "run.toml",
        r#"
algorithm = "alg2"
[topology]
kind = "file"
path = "ring.txt"
[objective]
kind = "logistic"
dataset = "points.csv"
[params]
alpha = "optimize"
[loss]
kind = "schedule"
path = "loss.txt"
[stop]
max_steps = 4000
tolerance = 1e-9
[output]
dir = "out"
full_states = true
"#,
    );
    let sc = Scenario::load(&scenario).unwrap();
    let report = run_scenario(&sc).unwrap();
    assert_eq!(report.status, RunStatus::Converged, "ended at {:e}", report.final_max_error);
    let stats = report.loss_stats.unwrap();
    // Losses at k = 0 hit edges that never received anything and count as deliveries.
    assert_eq!(stats.lost, 16 * 2);

    let out = sc.output.dir.clone().unwrap();
    assert!(out.starts_with(dir.path()));
    write_outputs(&report, &out).unwrap();
    let ndjson = fs::read_to_string(out.join("trace.ndjson")).unwrap();
    let first: TraceRecord = serde_json::from_str(ndjson.lines().next().unwrap()).unwrap();
    assert_eq!(ndjson.lines().count(), report.iterations);
    assert_eq!(first.k, 0);
    assert_eq!(first.w1.as_ref().unwrap().len(), 4);
    assert!(first.x.is_some() && first.w2.is_some());
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("name,algorithm,status,iterations"));
    assert!(summary.contains(",alg2,converged,"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["digest"], report.digest);
    assert!(json.get("trace").is_none());
}

const COMPLETE_WITH_FAULTS: &str = r#"
seed = 3
algorithm = "alg1"

[topology]
kind = "complete"
n = 5
weight = 0.15

[objective]
kind = "quadratic"
centers = [[0.0, 1.0], [1.0, 0.0], [2.0, 2.0], [-1.0, 0.5], [0.5, -2.0]]

[params]
alpha = 0.3

[stop]
max_steps = 5000
tolerance = 1e-10

[[faults]]
kind = "perturb"
step = 40
scale = 5.0

[[faults]]
kind = "drop_agent"
step = 120
agent = 2

[[faults]]
kind = "add_agent"
step = 200
index = 0
edges = [[0, 1, 0.15], [1, 0, 0.15], [0, 2, 0.15], [2, 0, 0.15], [0, 3, 0.15], [3, 0, 0.15], [0, 4, 0.15], [4, 0, 0.15]]
objective = { kind = "quadratic", center = [10.0, 10.0] }

[[faults]]
kind = "swap_objective"
step = 300
agent = 1
objective = { kind = "quadratic", center = [-4.0, 4.0], hessian = [[2.0, 0.0], [0.0, 1.0]] }
"#;

#[test]
fn heals_after_every_kind_of_fault() {
    let sc: Scenario = COMPLETE_WITH_FAULTS.parse().unwrap();
    let report = run_scenario(&sc).unwrap();
    assert_eq!(report.status, RunStatus::Converged, "ended at {:e}", report.final_max_error);
    let kinds: Vec<&str> = report.faults.iter().map(|f| f.kind.as_str()).collect();
    assert_eq!(kinds, ["perturb", "drop_agent", "add_agent", "swap_objective"]);
    assert!(report.iterations > 300);
    assert!(report.warnings.is_empty(), "{:?}", report.warnings);
    // The error jumps at each fault and decays again before the next one.
    let at = |k: usize| report.trace[k].max_error;
    assert!(at(41) > 1e-2 && at(119) < 1e-6);
    assert!(at(201) > 1.0 && at(299) < 1e-6);
}

#[test]
fn lossy_alg2_also_heals_structural_faults() {
    let mut sc: Scenario = COMPLETE_WITH_FAULTS.parse().unwrap();
    sc.algorithm = selfheal::harness::AlgorithmKind::Alg2;
    sc.loss = Some(selfheal::harness::LossSpec::Bernoulli { rate: 0.2 });
    sc.stop.max_steps = 20_000;
    let report = run_scenario(&sc).unwrap();
    assert_eq!(report.status, RunStatus::Converged, "ended at {:e}", report.final_max_error);
}

#[test]
fn invalid_scenarios_are_rejected() {
    let mut sc: Scenario = QUADRATIC_LATTICE.parse().unwrap();
    sc.loss = Some(selfheal::harness::LossSpec::Bernoulli { rate: 0.1 });
    assert!(matches!(run_scenario(&sc), Err(HarnessError::Invalid(_))));

    let typo = QUADRATIC_LATTICE.replace("tolerance", "tolerence");
    assert!(matches!(typo.parse::<Scenario>(), Err(HarnessError::Parse(_))));

    let few_centers = QUADRATIC_LATTICE.replace("[-2.0], ", "");
    assert!(run_scenario(&few_centers.parse().unwrap()).is_err());

    // One-way chain: not strongly connected.
    let chain = r#"
algorithm = "alg1"
[topology]
kind = "edges"
n = 3
edges = [[0, 1, 0.5], [1, 2, 0.5]]
[objective]
kind = "quadratic"
centers = [[0.0], [1.0], [2.0]]
[params]
alpha = 0.1
[stop]
max_steps = 10
"#;
    let sc: Scenario = chain.parse().unwrap();
    assert!(matches!(run_scenario(&sc), Err(HarnessError::Assumptions(_))));
    let forced = Scenario { force: true, ..sc };
    let report = run_scenario(&forced).unwrap();
    assert!(!report.warnings.is_empty());
}

#[test]
fn divergence_is_reported_not_raised() {
    let mut sc: Scenario = QUADRATIC_LATTICE.parse().unwrap();
    sc.params.alpha = selfheal::harness::AlphaSpec::Value(5.0);
    let report = run_scenario(&sc).unwrap();
    assert!(matches!(report.status, RunStatus::Diverged { .. }));
    assert!(report.last_finite_step.is_some());
}

#[test]
fn optimized_step_size_comes_with_a_certificate() {
    let mut sc: Scenario = QUADRATIC_LATTICE.parse().unwrap();
    sc.params.alpha = selfheal::harness::AlphaSpec::Keyword(selfheal::harness::AlphaKeyword::Optimize);
    let report = run_scenario(&sc).unwrap();
    let cert = report.certificate.expect("certificate");
    assert!(cert.rho < 1.0 && cert.alpha == report.params.alpha);
    assert_eq!(report.status, RunStatus::Converged);
    let tail = report.tail.unwrap();
    assert!(tail.rate <= cert.rho + 1e-3, "observed {} vs certified {}", tail.rate, cert.rho);
}
