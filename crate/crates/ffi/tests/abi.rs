use std::ffi::{CStr, CString};
use std::ptr;

use mecp_ffi::*;

const SCENARIO: &str = "node_count = 25\nseeds = [3, 4]\nrounds = 2\n[mobility]\nmodel = \"static\"\n";

fn last_error() -> String {
    unsafe { CStr::from_ptr(mecp_last_error_message()) }.to_string_lossy().into_owned()
}

fn parse(text: &str) -> Result<*mut MecpScenario, MecpStatus> {
    let c = CString::new(text).unwrap();
    let mut out = ptr::null_mut();
    match unsafe { mecp_scenario_parse(c.as_ptr(), &mut out) } {
        MecpStatus::Ok => Ok(out),
        s => {
            assert!(out.is_null());
            Err(s)
        }
    }
}

#[test]
fn runs_every_round_then_reports_finished() {
    let sc = parse(SCENARIO).unwrap();
    assert_eq!(unsafe { mecp_scenario_seed_count(sc) }, 2);
    let mut seed = 0;
    assert_eq!(unsafe { mecp_scenario_seed(sc, 1, &mut seed) }, MecpStatus::Ok);
    assert_eq!(seed, 4);
    assert_eq!(unsafe { mecp_scenario_seed(sc, 2, &mut seed) }, MecpStatus::InvalidArgument);
    assert!(last_error().contains("out of range"));

    let mut sim = ptr::null_mut();
    assert_eq!(unsafe { mecp_sim_new(sc, seed, true, &mut sim) }, MecpStatus::Ok);
    unsafe { mecp_scenario_free(sc) };

    let mut m = MecpRoundMetrics::default();
    for round in 0..2 {
        assert_eq!(unsafe { mecp_sim_run_round(sim, &mut m) }, MecpStatus::Ok);
        assert_eq!(m.round, round);
        assert_eq!(m.frames_sent, m.frames_delivered);
        assert_eq!(m.delivery_ratio, 1.0);
        assert!(m.ch_count >= 1 && m.alive_count == 25);
        assert!(m.energy_consumed_j > 0.0);
    }
    assert_eq!(unsafe { mecp_sim_run_round(sim, &mut m) }, MecpStatus::Finished);

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("t.jsonl").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { mecp_sim_write_trace(sim, path.as_ptr()) }, MecpStatus::Ok);
    let text = std::fs::read_to_string(dir.path().join("t.jsonl")).unwrap();
    assert!(text.lines().count() > 0 && text.contains("event.round_end"));

    let bad = CString::new(dir.path().join("missing/t.jsonl").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { mecp_sim_write_trace(sim, bad.as_ptr()) }, MecpStatus::IoError);
    unsafe { mecp_sim_free(sim) };
}

#[test]
fn matches_the_library_run() {
    let cfg = mecp_core::parse_scenario(SCENARIO).unwrap();
    let runs = mecp_core::experiment::run_experiment(&cfg).unwrap();
    let sc = parse(SCENARIO).unwrap();
    let mut sim = ptr::null_mut();
    assert_eq!(unsafe { mecp_sim_new(sc, 3, false, &mut sim) }, MecpStatus::Ok);
    let mut m = MecpRoundMetrics::default();
    for rec in &runs[0].records {
        assert_eq!(unsafe { mecp_sim_run_round(sim, &mut m) }, MecpStatus::Ok);
        assert_eq!(m.ch_count, rec.ch_count);
        assert_eq!(m.frames_sent, rec.frames_sent);
        assert_eq!(m.energy_consumed_j, rec.energy_consumed_j);
    }
    unsafe {
        mecp_sim_free(sim);
        mecp_scenario_free(sc);
    }
}

#[test]
fn config_errors_carry_messages() {
    assert_eq!(parse("node_count = 5\nseeds = [1]\n[protocol]\nk_fraction = 2.0\n").unwrap_err(), MecpStatus::ConfigError);
    assert!(last_error().contains("k_fraction"));
    assert_eq!(parse("not toml [").unwrap_err(), MecpStatus::ConfigError);

    let invalid = [0x66u8, 0xff, 0x00];
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { mecp_scenario_parse(invalid.as_ptr().cast(), &mut out) }, MecpStatus::InvalidUtf8);
}

#[test]
fn null_pointers_are_rejected() {
    let mut sc = ptr::null_mut();
    let mut sim = ptr::null_mut();
    let mut m = MecpRoundMetrics::default();
    let mut n = 0u32;
    unsafe {
        assert_eq!(mecp_scenario_parse(ptr::null(), &mut sc), MecpStatus::NullPointer);
        assert_eq!(mecp_sim_new(ptr::null(), 1, false, &mut sim), MecpStatus::NullPointer);
        assert_eq!(mecp_sim_run_round(ptr::null_mut(), &mut m), MecpStatus::NullPointer);
        assert_eq!(mecp_sim_write_trace(ptr::null(), ptr::null()), MecpStatus::NullPointer);
        assert_eq!(mecp_max_iterations(0.5, ptr::null_mut()), MecpStatus::NullPointer);
        assert_eq!(mecp_scenario_seed_count(ptr::null()), 0);
        mecp_scenario_free(ptr::null_mut());
        mecp_sim_free(ptr::null_mut());
        assert_eq!(mecp_max_iterations(1.0 / 1024.0, &mut n), MecpStatus::Ok);
    }
    assert_eq!(n, 11);
}

#[test]
fn ch_prob_matches_closed_form() {
    let mut p = 0.0;
    let e_max = 2.0;
    assert_eq!(unsafe { mecp_compute_ch_prob(0.1, 0.001, e_max, 1.0, 0.5, &mut p) }, MecpStatus::Ok);
    assert!((p - 0.1 * 0.5 * 0.5).abs() < 1e-15);
    assert_eq!(unsafe { mecp_compute_ch_prob(0.1, 0.001, e_max, 0.0, 1.0, &mut p) }, MecpStatus::Ok);
    assert_eq!(p, 0.001);
    assert_eq!(unsafe { mecp_compute_ch_prob(0.1, 0.5, e_max, 1.0, 1.0, &mut p) }, MecpStatus::InvalidArgument);
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/mecp.h")).unwrap();
    for name in [
        "mecp_last_error_message",
        "mecp_version",
        "mecp_scenario_parse",
        "mecp_scenario_seed",
        "mecp_scenario_seed_count",
        "mecp_scenario_free",
        "mecp_sim_new",
        "mecp_sim_run_round",
        "mecp_sim_write_trace",
        "mecp_sim_free",
        "mecp_max_iterations",
        "mecp_compute_ch_prob",
        "MECP_STATUS_INVARIANT_VIOLATION = 4",
        "typedef struct MecpSimulation MecpSimulation;",
    ] {
        assert!(header.contains(name), "{name}");
    }
}
