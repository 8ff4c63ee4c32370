//! Acceptance suite: one PASS/FAIL line per criterion.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use mecp_core::engine::{EngineError, Simulation};
use mecp_core::experiment::{compare_modes, run_experiment, sign_test_p, write_outputs};
use mecp_core::mobility::{MobilityConfig, MobilityModel};
use mecp_core::protocol::{
    compute_ccf, compute_ch_prob, compute_va, compute_vf, max_iterations, node_cost, CostMode, NodeId, ProtocolConfig, Role,
    MAX_COST,
};
use mecp_core::scenario::{FailurePolicy, Mode, ScenarioConfig, WorldConfig};

/// Relative tolerance for closed-form values.
const REL_TOL: f64 = 1e-12;
/// Wall-clock budget for the termination sweep.
const SWEEP_BUDGET: Duration = Duration::from_secs(60);
const SWEEP_SEEDS: u64 = 1000;
const RECOVERY_SEEDS: u64 = 100;
const MOBILITY_SEEDS: u64 = 24;
const SIGN_TEST_ALPHA: f64 = 0.05;
const GUARD_SEEDS: u64 = 50;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn static_mobility() -> MobilityConfig {
    MobilityConfig {
        model: MobilityModel::Static,
        ..MobilityConfig::default()
    }
}

#[derive(Default)]
struct SweepTally {
    epochs: u64,
    termination: u64,
    coverage: u64,
    uniqueness: u64,
    other: Vec<String>,
}

/// Clustering epochs with random initial energy, checked from raw node state.
fn lemma_sweep() -> (SweepTally, Duration) {
    let start = Instant::now();
    let p_mins = [1.0 / 16.0, 1.0 / 256.0, 1.0 / 1024.0];
    let jobs: Vec<(f64, u64)> = p_mins.iter().flat_map(|&p| (0..SWEEP_SEEDS).map(move |s| (p, s))).collect();
    let results: Vec<SweepTally> = jobs
        .par_iter()
        .map(|&(p_min, seed)| {
            let mut cfg = ScenarioConfig {
                node_count: 100,
                seeds: vec![seed],
                rounds: 1,
                ..ScenarioConfig::default()
            };
            cfg.protocol.p_min = p_min;
            cfg.energy.initial_min_fraction = 0.05;
            let bound = (1.0f64 / p_min).log2().ceil() as u32 + 1;
            let mut t = SweepTally {
                epochs: 1,
                ..SweepTally::default()
            };
            let mut sim = Simulation::new(&cfg, seed, false).expect("valid scenario");
            match sim.run_clustering_epoch() {
                Ok(_) => {}
                Err(EngineError::Invariant { property, detail }) => {
                    t.other.push(format!("p_min={p_min} seed={seed}: {property}: {detail}"));
                }
                Err(e) => t.other.push(format!("p_min={p_min} seed={seed}: {e}")),
            }
            let w = sim.world();
            let alive: Vec<NodeId> = w.nodes.iter().map(|n| n.id).filter(|&id| w.is_alive(id)).collect();
            let mut owner: BTreeMap<NodeId, u32> = BTreeMap::new();
            for &id in &alive {
                let s = &w.node(id).state;
                if s.iteration > bound {
                    t.termination += 1;
                }
                let covered = match s.role {
                    Role::FinalCh => s.my_ch == Some(id),
                    Role::Member => s.my_ch.is_some_and(|c| c != id),
                    _ => false,
                };
                if !covered {
                    t.coverage += 1;
                }
                if s.role == Role::FinalCh {
                    for m in s.l_members.iter().filter(|m| w.is_alive(m.id)) {
                        *owner.entry(m.id).or_default() += 1;
                    }
                }
            }
            t.uniqueness += owner.values().filter(|&&c| c > 1).count() as u64;
            t
        })
        .collect();
    let mut total = SweepTally::default();
    for r in results {
        total.epochs += r.epochs;
        total.termination += r.termination;
        total.coverage += r.coverage;
        total.uniqueness += r.uniqueness;
        total.other.extend(r.other);
    }
    (total, start.elapsed())
}

fn recovery() -> Verdict {
    let cfg = ScenarioConfig {
        node_count: 100,
        seeds: (0..RECOVERY_SEEDS).collect(),
        rounds: 2,
        mobility: static_mobility(),
        failure_policy: FailurePolicy {
            crash_ch_each_round: true,
            at_frame: 5,
        },
        ..ScenarioConfig::default()
    };
    let runs = match run_experiment(&cfg) {
        Ok(r) => r,
        Err(e) => return verdict(false, e.to_string()),
    };
    let mut failures = 0;
    let mut members = 0;
    let mut violations = Vec::new();
    for run in &runs {
        for rep in &run.reports {
            for f in &rep.failures {
                failures += 1;
                for m in f.members.iter().filter(|m| m.ach_reachable) {
                    members += 1;
                    if m.lost_frames > 1 || m.lost_after_failure_frame > 0 {
                        violations.push(format!("seed {} round {} member {}: {:?}", run.seed, rep.round, m.id, m));
                    }
                }
            }
        }
    }
    let pass = violations.is_empty() && failures > 0 && members > 0;
    verdict(
        pass,
        format!(
            "{failures} head crashes, {members} members with a reachable assistant, {} violations{}",
            violations.len(),
            violations.first().map(|v| format!(" (first: {v})")).unwrap_or_default()
        ),
    )
}

fn mobility_claim() -> Verdict {
    let base = ScenarioConfig {
        node_count: 100,
        seeds: (1..=MOBILITY_SEEDS).collect(),
        rounds: 5,
        mobility: MobilityConfig {
            model: MobilityModel::RandomWaypoint,
            v_min: 0.0,
            v_max: 5.0,
            ..MobilityConfig::default()
        },
        ..ScenarioConfig::default()
    };
    let plain = match compare_modes(&base, &[Mode::Mecp, Mode::HeedMode]) {
        Ok(c) => c,
        Err(e) => return verdict(false, e.to_string()),
    };
    let mut failing = base.clone();
    failing.failure_policy = FailurePolicy {
        crash_ch_each_round: true,
        at_frame: 5,
    };
    let faulty = match compare_modes(&failing, &[Mode::Mecp, Mode::HeedMode]) {
        Ok(c) => c,
        Err(e) => return verdict(false, e.to_string()),
    };
    let (m, h) = (plain.mean_delivery(0), plain.mean_delivery(1));
    let p = sign_test_p(&faulty.paired_differences(0, 1));
    verdict(
        m >= h && p < SIGN_TEST_ALPHA,
        format!(
            "no failures: mecp {m:.4} vs heed_mode {h:.4}; with failures: mecp {:.4} vs heed_mode {:.4}, sign test p = {p:.2e} (alpha {SIGN_TEST_ALPHA})",
            faulty.mean_delivery(0),
            faulty.mean_delivery(1)
        ),
    )
}

/// Two groups 120 m apart, the sink beside the first. A bridge node sits
/// 35 m from the first group and 85 m from the second; tail nodes behind the
/// first group give its nodes a higher degree than the bridge.
fn guard_layout() -> Vec<[f64; 2]> {
    let mut p = Vec::new();
    for i in 0..9 {
        p.push([20.0 + (i % 3) as f64 * 3.0, 27.0 + (i / 3) as f64 * 3.0]);
    }
    p.push([58.0, 30.0]);
    for i in 0..4 {
        p.push([2.0, 24.0 + i as f64 * 4.0]);
    }
    for i in 0..9 {
        p.push([140.0 + (i % 3) as f64 * 3.0, 27.0 + (i / 3) as f64 * 3.0]);
    }
    p
}

fn guard_claim() -> Verdict {
    let positions = guard_layout();
    let base = ScenarioConfig {
        node_count: positions.len(),
        seeds: (0..GUARD_SEEDS).collect(),
        rounds: 1,
        positions: Some(positions),
        world: WorldConfig {
            width: 160.0,
            height: 60.0,
            sink: Some([10.0, 30.0]),
        },
        mobility: static_mobility(),
        ..ScenarioConfig::default()
    };
    let mut worse = Vec::new();
    let mut bridged = 0;
    let (mut with_sum, mut without_sum) = (0.0, 0.0);
    for seed in 0..GUARD_SEEDS {
        let run = |guards: bool| {
            let cfg = ScenarioConfig {
                guards,
                ..base.clone()
            };
            let mut sim = Simulation::new(&cfg, seed, false).expect("valid scenario");
            let reports = sim.run().expect("run completes");
            let guard_edges = sim.overlay().map(|o| o.guard_edges().len()).unwrap_or(0);
            let sent: u32 = reports.iter().map(|r| r.aggregates_sent).sum();
            let ok: u32 = reports.iter().map(|r| r.aggregates_delivered).sum();
            (ok as f64 / sent.max(1) as f64, guard_edges)
        };
        let (with, edges) = run(true);
        let (without, _) = run(false);
        with_sum += with;
        without_sum += without;
        if edges > 0 {
            bridged += 1;
        }
        if with < without {
            worse.push(seed);
        }
    }
    let n = GUARD_SEEDS as f64;
    verdict(
        worse.is_empty() && bridged > 0,
        format!(
            "{GUARD_SEEDS} seeds, {bridged} with a guard-bridged pair; mean aggregate delivery {:.4} with guards vs {:.4} without; seeds worse with guards: {worse:?}",
            with_sum / n,
            without_sum / n
        ),
    )
}

fn determinism() -> Verdict {
    let cfg = ScenarioConfig {
        node_count: 80,
        seeds: vec![11, 12, 13],
        rounds: 3,
        p_loss: 0.05,
        failure_policy: FailurePolicy {
            crash_ch_each_round: true,
            at_frame: 4,
        },
        output: mecp_core::scenario::OutputConfig {
            dir: "unused".into(),
            trace: true,
        },
        ..ScenarioConfig::default()
    };
    let a = tempfile::tempdir().expect("tempdir");
    let b = tempfile::tempdir().expect("tempdir");
    let files_a = write_outputs(a.path(), &run_experiment(&cfg).expect("run")).expect("write");
    write_outputs(b.path(), &run_experiment(&cfg).expect("run")).expect("write");
    let mut differing = Vec::new();
    let mut bytes = 0;
    for f in &files_a {
        let name = f.file_name().expect("file name");
        let x = std::fs::read(f).expect("read");
        let y = std::fs::read(b.path().join(name)).expect("read");
        bytes += x.len();
        if x != y {
            differing.push(name.to_string_lossy().into_owned());
        }
    }
    verdict(
        differing.is_empty() && files_a.len() == 4,
        format!("{} files, {bytes} bytes compared; differing: {differing:?}", files_a.len()),
    )
}

fn energy_accounting() -> Verdict {
    let mut problems = Vec::new();
    let lossy = ScenarioConfig {
        node_count: 100,
        seeds: vec![1],
        rounds: 4,
        p_loss: 0.1,
        failure_policy: FailurePolicy {
            crash_ch_each_round: true,
            at_frame: 2,
        },
        ..ScenarioConfig::default()
    };
    for seed in 1..=5 {
        let mut sim = Simulation::new(&lossy, seed, false).expect("valid");
        sim.run().expect("run");
        let l = &sim.world().ledger;
        if l.total_residual_fj() + l.total_debited_fj() != l.initial_total_fj() {
            problems.push(format!("seed {seed}: ledger does not balance"));
        }
        if sim.trace().energy_total_fj() != l.total_debited_fj() || sim.trace().debit_lines() != l.debit_count() {
            problems.push(format!("seed {seed}: trace and ledger debits differ"));
        }
        if sim.world().nodes.iter().any(|n| l.e_res(n.id) < 0.0 || l.e_res(n.id) > l.e_max()) {
            problems.push(format!("seed {seed}: residual out of range"));
        }
    }
    let ideal = ScenarioConfig {
        node_count: 100,
        seeds: (1..=10).collect(),
        rounds: 3,
        mobility: static_mobility(),
        ..ScenarioConfig::default()
    };
    for run in run_experiment(&ideal).expect("run") {
        if run.records.iter().any(|r| r.delivery_ratio != 1.0) {
            problems.push(format!("static seed {}: delivery below 1.0", run.seed));
        }
    }
    verdict(problems.is_empty(), if problems.is_empty() { "exact balance on 5 lossy runs; static delivery 1.0 on 10 seeds".to_string() } else { problems.join("; ") })
}

fn close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= REL_TOL * a.abs().max(b.abs())
}

fn formulas() -> Verdict {
    let k = |k_fraction, p_min| ProtocolConfig {
        k_fraction,
        p_min,
        ..ProtocolConfig::default()
    };
    let c = ProtocolConfig::default();
    let degree = ProtocolConfig {
        cost_mode: CostMode::Degree,
        ..ProtocolConfig::default()
    };
    let checks: Vec<(&str, bool)> = vec![
        ("ccf [1,2,3]", close(compute_ccf(&[1.0, 2.0, 3.0]).unwrap(), 2.0)),
        ("ccf [5]", close(compute_ccf(&[5.0]).unwrap(), 5.0)),
        ("ccf [0.5..3.5]", close(compute_ccf(&[0.5, 1.5, 2.5, 3.5]).unwrap(), 2.0)),
        ("va [0,0,0]", close(compute_va(&[0.0, 0.0, 0.0]).unwrap(), 0.0)),
        ("va [2,4]", close(compute_va(&[2.0, 4.0]).unwrap(), 3.0)),
        ("va [1]", close(compute_va(&[1.0]).unwrap(), 1.0)),
        ("vf 0.5", close(compute_vf(0.5, 1.0), 1.0)),
        ("vf 1.0", close(compute_vf(1.0, 1.0), 1.0)),
        ("vf 4.0", close(compute_vf(4.0, 1.0), 0.25)),
        ("ch_prob full", close(compute_ch_prob(&k(0.1, 1.0 / 1024.0), 2.0, 1.0).unwrap(), 0.1)),
        ("ch_prob clamp", close(compute_ch_prob(&k(0.1, 0.0001), 0.002, 0.01).unwrap(), 0.0001)),
        ("ch_prob clamp up", close(compute_ch_prob(&k(0.1, 0.2), 2.0, 1.0).unwrap(), 0.2)),
        ("cost 1/D", close(node_cost(&c, 4, 0.0), 0.25)),
        ("cost D", close(node_cost(&degree, 4, 0.0), 4.0)),
        ("cost isolated", node_cost(&c, 0, 0.0) == MAX_COST),
        ("iterations p_min=1", max_iterations(1.0).unwrap() == 1),
        ("iterations p_min=1/1024", max_iterations(1.0 / 1024.0).unwrap() == 11),
        ("iterations p_min=0.3", max_iterations(0.3).unwrap() == 3),
    ];
    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    verdict(failed.is_empty(), format!("{} examples, failed: {failed:?}", checks.len()))
}

fn main() -> ExitCode {
    let mut lines: Vec<(u32, &str, Verdict)> = Vec::new();

    let (sweep, elapsed) = lemma_sweep();
    let runtime_ok = elapsed < SWEEP_BUDGET;
    let engine_note = if sweep.other.is_empty() {
        String::new()
    } else {
        format!("; engine reported {} violations, first: {}", sweep.other.len(), sweep.other[0])
    };
    lines.push((
        1,
        "termination bound",
        verdict(
            sweep.termination == 0 && runtime_ok && sweep.other.is_empty(),
            format!("{} epochs, {} violations, {:.1}s (budget {}s){engine_note}", sweep.epochs, sweep.termination, elapsed.as_secs_f64(), SWEEP_BUDGET.as_secs()),
        ),
    ));
    lines.push((2, "coverage", verdict(sweep.coverage == 0, format!("{} uncovered nodes", sweep.coverage))));
    lines.push((3, "uniqueness", verdict(sweep.uniqueness == 0, format!("{} nodes in more than one cluster", sweep.uniqueness))));
    lines.push((4, "assistant recovery", recovery()));
    lines.push((5, "mobility direction", mobility_claim()));
    lines.push((6, "guard improvement", guard_claim()));
    lines.push((7, "determinism", determinism()));
    lines.push((8, "energy accounting", energy_accounting()));
    lines.push((9, "formula examples", formulas()));

    let mut all = true;
    for (n, name, v) in &lines {
        all &= v.pass;
        println!("criterion {n} [{name}]: {} - {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
