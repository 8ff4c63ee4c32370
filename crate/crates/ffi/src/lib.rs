//! C interface to the MECP simulator.
//!
//! Handles are opaque pointers created and released by this library. Every
//! fallible call returns a [`MecpStatus`]; on failure the message is available
//! from [`mecp_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use mecp_core::engine::{EngineError, Simulation};
use mecp_core::metrics::MetricsRecord;
use mecp_core::protocol::{compute_ch_prob, max_iterations, ProtocolConfig};
use mecp_core::scenario::{parse_scenario, ScenarioConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MecpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    ConfigError = 3,
    InvariantViolation = 4,
    Finished = 5,
    IoError = 6,
    InvalidArgument = 7,
    Panic = 8,
}

/// Parsed scenario.
pub struct MecpScenario {
    cfg: ScenarioConfig,
}

/// One running simulation.
pub struct MecpSimulation {
    sim: Simulation,
    seed: u64,
}

/// Metrics for one completed round.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MecpRoundMetrics {
    pub round: u32,
    pub frames_sent: u32,
    pub frames_delivered: u32,
    pub aggregates_sent: u32,
    pub aggregates_delivered: u32,
    pub ch_count: u32,
    pub alive_count: u32,
    pub orphan_count: u32,
    pub recovery_frames_lost: u32,
    pub promotions: u32,
    pub clustering_iterations_max: u32,
    pub delivery_ratio: f64,
    pub aggregate_delivery_ratio: f64,
    pub energy_consumed_j: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn fail(status: MecpStatus, msg: impl Into<String>) -> MecpStatus {
    set_error(msg);
    status
}

fn guarded(f: impl FnOnce() -> MecpStatus) -> MecpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(MecpStatus::Panic, "internal panic"),
    }
}

fn engine_status(e: &EngineError) -> MecpStatus {
    match e {
        EngineError::Invariant { .. } => MecpStatus::InvariantViolation,
        EngineError::Finished => MecpStatus::Finished,
        _ => MecpStatus::ConfigError,
    }
}

unsafe fn read_str<'a>(s: *const c_char) -> Result<&'a str, MecpStatus> {
    if s.is_null() {
        return Err(fail(MecpStatus::NullPointer, "null string"));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| fail(MecpStatus::InvalidUtf8, "string is not valid UTF-8"))
}

/// Message for the last failed call on this thread. Valid until the next
/// failing call on the same thread; empty if nothing has failed.
#[no_mangle]
pub extern "C" fn mecp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mecp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parse a scenario document.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mecp_scenario_parse(text: *const c_char, out: *mut *mut MecpScenario) -> MecpStatus {
    guarded(|| {
        if out.is_null() {
            return fail(MecpStatus::NullPointer, "null output pointer");
        }
        *out = ptr::null_mut();
        let text = match read_str(text) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match parse_scenario(text) {
            Ok(cfg) => {
                *out = Box::into_raw(Box::new(MecpScenario { cfg }));
                MecpStatus::Ok
            }
            Err(e) => fail(MecpStatus::ConfigError, e.to_string()),
        }
    })
}

/// Seed at `index` in the scenario's seed list.
///
/// # Safety
/// `scenario` must come from [`mecp_scenario_parse`]; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mecp_scenario_seed(scenario: *const MecpScenario, index: usize, out: *mut u64) -> MecpStatus {
    guarded(|| {
        if scenario.is_null() || out.is_null() {
            return fail(MecpStatus::NullPointer, "null pointer");
        }
        let scenario = &*scenario;
        match scenario.cfg.seeds.get(index) {
            Some(&s) => {
                *out = s;
                MecpStatus::Ok
            }
            None => fail(MecpStatus::InvalidArgument, format!("seed index {index} out of range")),
        }
    })
}

/// Number of seeds in the scenario, or 0 for a null handle.
///
/// # Safety
/// `scenario` must be null or come from [`mecp_scenario_parse`].
#[no_mangle]
pub unsafe extern "C" fn mecp_scenario_seed_count(scenario: *const MecpScenario) -> usize {
    if scenario.is_null() {
        0
    } else {
        (&*scenario).cfg.seeds.len()
    }
}

/// # Safety
/// `scenario` must be null or come from [`mecp_scenario_parse`], and must not
/// be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mecp_scenario_free(scenario: *mut MecpScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Build a simulation of `scenario` for one seed. Trace recording is
/// enabled when `trace` is true.
///
/// # Safety
/// `scenario` must come from [`mecp_scenario_parse`]; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mecp_sim_new(scenario: *const MecpScenario, seed: u64, trace: bool, out: *mut *mut MecpSimulation) -> MecpStatus {
    guarded(|| {
        if scenario.is_null() || out.is_null() {
            return fail(MecpStatus::NullPointer, "null pointer");
        }
        *out = ptr::null_mut();
        match Simulation::new(&(&*scenario).cfg, seed, trace) {
            Ok(sim) => {
                *out = Box::into_raw(Box::new(MecpSimulation { sim, seed }));
                MecpStatus::Ok
            }
            Err(e) => fail(engine_status(&e), e.to_string()),
        }
    })
}

/// Run the next round. Returns `Finished` once every round has run.
///
/// # Safety
/// `sim` must come from [`mecp_sim_new`]; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mecp_sim_run_round(sim: *mut MecpSimulation, out: *mut MecpRoundMetrics) -> MecpStatus {
    guarded(|| {
        if sim.is_null() || out.is_null() {
            return fail(MecpStatus::NullPointer, "null pointer");
        }
        let h = &mut *sim;
        if h.sim.is_finished() {
            return fail(MecpStatus::Finished, "all rounds have run");
        }
        match h.sim.run_data_round() {
            Ok(r) => {
                let m = MetricsRecord::from_report(h.seed, &r);
                *out = MecpRoundMetrics {
                    round: r.round,
                    frames_sent: r.frames_sent,
                    frames_delivered: r.frames_delivered,
                    aggregates_sent: r.aggregates_sent,
                    aggregates_delivered: r.aggregates_delivered,
                    ch_count: m.ch_count,
                    alive_count: r.alive_count,
                    orphan_count: r.orphan_count,
                    recovery_frames_lost: r.recovery_frames_lost,
                    promotions: r.promotions,
                    clustering_iterations_max: m.clustering_iterations_max,
                    delivery_ratio: m.delivery_ratio,
                    aggregate_delivery_ratio: m.aggregate_delivery_ratio,
                    energy_consumed_j: m.energy_consumed_j,
                };
                MecpStatus::Ok
            }
            Err(e) => fail(engine_status(&e), e.to_string()),
        }
    })
}

/// Write the recorded trace as JSON lines to `path`.
///
/// # Safety
/// `sim` must come from [`mecp_sim_new`]; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mecp_sim_write_trace(sim: *const MecpSimulation, path: *const c_char) -> MecpStatus {
    guarded(|| {
        if sim.is_null() {
            return fail(MecpStatus::NullPointer, "null simulation");
        }
        let path = match read_str(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let written = std::fs::File::create(path).and_then(|f| {
            let mut w = std::io::BufWriter::new(f);
            (&*sim).sim.trace().write_jsonl(&mut w)?;
            std::io::Write::flush(&mut w)
        });
        match written {
            Ok(()) => MecpStatus::Ok,
            Err(e) => fail(MecpStatus::IoError, format!("{path}: {e}")),
        }
    })
}

/// # Safety
/// `sim` must be null or come from [`mecp_sim_new`], and must not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn mecp_sim_free(sim: *mut MecpSimulation) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Upper bound on Phase II iterations for `p_min`.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mecp_max_iterations(p_min: f64, out: *mut u32) -> MecpStatus {
    guarded(|| {
        if out.is_null() {
            return fail(MecpStatus::NullPointer, "null output pointer");
        }
        match max_iterations(p_min) {
            Ok(n) => {
                *out = n;
                MecpStatus::Ok
            }
            Err(e) => fail(MecpStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Initial cluster-head probability for residual energy `e_res` out of
/// `e_max` and velocity factor `vf`.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mecp_compute_ch_prob(k_fraction: f64, p_min: f64, e_max: f64, e_res: f64, vf: f64, out: *mut f64) -> MecpStatus {
    guarded(|| {
        if out.is_null() {
            return fail(MecpStatus::NullPointer, "null output pointer");
        }
        let cfg = ProtocolConfig {
            k_fraction,
            p_min,
            e_max,
            ..ProtocolConfig::default()
        };
        if let Err((_, msg)) = cfg.validate() {
            return fail(MecpStatus::InvalidArgument, msg);
        }
        match compute_ch_prob(&cfg, e_res, vf) {
            Ok(p) => {
                *out = p;
                MecpStatus::Ok
            }
            Err(e) => fail(MecpStatus::InvalidArgument, e.to_string()),
        }
    })
}
