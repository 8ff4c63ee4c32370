//! Seed sweeps and paired comparisons between protocol modes.
//!
//! Seeds run in parallel on separate worlds; results are always folded in
//! seed-list order.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::engine::{EngineError, RoundReport, Simulation};
use crate::metrics::{write_metrics_csv, MetricsRecord};
use crate::scenario::{Mode, ScenarioConfig};
use crate::trace::Trace;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("seed {seed}: {source}")]
    Engine { seed: u64, source: EngineError },
    #[error("seed {seed}: {detail}")]
    Metrics { seed: u64, detail: String },
    #[error("at least two modes are required")]
    TooFewModes,
    #[error("mode {0} listed twice")]
    DuplicateMode(Mode),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl ExperimentError {
    /// Whether the failure is an internal invariant violation.
    pub fn is_invariant(&self) -> bool {
        matches!(
            self,
            ExperimentError::Engine { source: EngineError::Invariant { .. }, .. } | ExperimentError::Metrics { .. }
        )
    }
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub records: Vec<MetricsRecord>,
    pub reports: Vec<RoundReport>,
    pub trace: Trace,
}

impl SeedRun {
    /// Member frames delivered over sent, pooled over all rounds.
    pub fn delivery_ratio(&self) -> f64 {
        let sent: u64 = self.reports.iter().map(|r| r.frames_sent as u64).sum();
        let ok: u64 = self.reports.iter().map(|r| r.frames_delivered as u64).sum();
        if sent == 0 {
            1.0
        } else {
            ok as f64 / sent as f64
        }
    }

    pub fn aggregate_delivery_ratio(&self) -> f64 {
        let sent: u64 = self.reports.iter().map(|r| r.aggregates_sent as u64).sum();
        let ok: u64 = self.reports.iter().map(|r| r.aggregates_delivered as u64).sum();
        if sent == 0 {
            1.0
        } else {
            ok as f64 / sent as f64
        }
    }

    pub fn recovery_frames_lost(&self) -> u64 {
        self.reports.iter().map(|r| r.recovery_frames_lost as u64).sum()
    }
}

/// Run one seed to completion and check every metrics row.
pub fn run_seed(cfg: &ScenarioConfig, seed: u64, trace: bool) -> Result<SeedRun, ExperimentError> {
    let engine = |source| ExperimentError::Engine { seed, source };
    let mut sim = Simulation::new(cfg, seed, trace).map_err(engine)?;
    let reports = sim.run().map_err(engine)?;
    let limit = sim.iteration_limit();
    let records: Vec<MetricsRecord> = reports.iter().map(|r| MetricsRecord::from_report(seed, r)).collect();
    for r in &records {
        r.check(limit).map_err(|detail| ExperimentError::Metrics { seed, detail })?;
    }
    Ok(SeedRun {
        seed,
        records,
        reports,
        trace: sim.trace().clone(),
    })
}

pub fn run_experiment(cfg: &ScenarioConfig) -> Result<Vec<SeedRun>, ExperimentError> {
    let trace = cfg.output.trace;
    let results: Vec<Result<SeedRun, ExperimentError>> = cfg.seeds.par_iter().map(|&s| run_seed(cfg, s, trace)).collect();
    results.into_iter().collect()
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, ExperimentError> {
    fs::File::create(path).map(BufWriter::new).map_err(io_err(path))
}

/// Write `metrics.csv` and, for traced runs, one `trace_seed<N>.jsonl` per seed.
pub fn write_outputs(dir: &Path, runs: &[SeedRun]) -> Result<Vec<PathBuf>, ExperimentError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    let metrics = dir.join("metrics.csv");
    let records: Vec<MetricsRecord> = runs.iter().flat_map(|r| r.records.iter().cloned()).collect();
    let mut w = create(&metrics)?;
    write_metrics_csv(&mut w, &records)
        .and_then(|_| w.flush())
        .map_err(io_err(&metrics))?;
    written.push(metrics);
    for run in runs.iter().filter(|r| r.trace.enabled()) {
        let path = dir.join(format!("trace_seed{}.jsonl", run.seed));
        let mut w = create(&path)?;
        run.trace.write_jsonl(&mut w).and_then(|_| w.flush()).map_err(io_err(&path))?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeResult {
    pub mode: Mode,
    pub delivery_ratio: f64,
    pub aggregate_delivery_ratio: f64,
    pub recovery_frames_lost: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedComparison {
    pub seed: u64,
    /// Same order as [`Comparison::modes`].
    pub results: Vec<ModeResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub modes: Vec<Mode>,
    pub seeds: Vec<SeedComparison>,
}

impl Comparison {
    pub fn mean_delivery(&self, mode_index: usize) -> f64 {
        mean(self.seeds.iter().map(|s| s.results[mode_index].delivery_ratio))
    }

    pub fn mean_aggregate_delivery(&self, mode_index: usize) -> f64 {
        mean(self.seeds.iter().map(|s| s.results[mode_index].aggregate_delivery_ratio))
    }

    pub fn mean_recovery_lost(&self, mode_index: usize) -> f64 {
        mean(self.seeds.iter().map(|s| s.results[mode_index].recovery_frames_lost as f64))
    }

    /// Per-seed delivery-ratio differences `mode[a] - mode[b]`.
    pub fn paired_differences(&self, a: usize, b: usize) -> Vec<f64> {
        self.seeds
            .iter()
            .map(|s| s.results[a].delivery_ratio - s.results[b].delivery_ratio)
            .collect()
    }

    /// CSV: one row per seed and mode, then a `mean` row per mode. The
    /// `diff_delivery_ratio` column is relative to the first mode.
    pub fn write_csv<W: Write>(&self, w: W) -> io::Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["seed", "mode", "delivery_ratio", "aggregate_delivery_ratio", "recovery_frames_lost", "diff_delivery_ratio"])?;
        for s in &self.seeds {
            let base = s.results[0].delivery_ratio;
            for r in &s.results {
                csv.write_record([
                    s.seed.to_string(),
                    r.mode.to_string(),
                    r.delivery_ratio.to_string(),
                    r.aggregate_delivery_ratio.to_string(),
                    r.recovery_frames_lost.to_string(),
                    (r.delivery_ratio - base).to_string(),
                ])?;
            }
        }
        let base = self.mean_delivery(0);
        for (i, m) in self.modes.iter().enumerate() {
            csv.write_record([
                "mean".to_string(),
                m.to_string(),
                self.mean_delivery(i).to_string(),
                self.mean_aggregate_delivery(i).to_string(),
                self.mean_recovery_lost(i).to_string(),
                (self.mean_delivery(i) - base).to_string(),
            ])?;
        }
        csv.flush()
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Run every mode over the scenario's seeds.
pub fn compare_modes(cfg: &ScenarioConfig, modes: &[Mode]) -> Result<Comparison, ExperimentError> {
    if modes.len() < 2 {
        return Err(ExperimentError::TooFewModes);
    }
    let mut seen = BTreeSet::new();
    for m in modes {
        if !seen.insert(*m) {
            return Err(ExperimentError::DuplicateMode(*m));
        }
    }
    let mut per_mode = Vec::with_capacity(modes.len());
    for &m in modes {
        let mut c = cfg.with_mode(m);
        c.output.trace = false;
        per_mode.push(run_experiment(&c)?);
    }
    let seeds = cfg
        .seeds
        .iter()
        .enumerate()
        .map(|(i, &seed)| SeedComparison {
            seed,
            results: modes
                .iter()
                .zip(&per_mode)
                .map(|(&mode, runs)| ModeResult {
                    mode,
                    delivery_ratio: runs[i].delivery_ratio(),
                    aggregate_delivery_ratio: runs[i].aggregate_delivery_ratio(),
                    recovery_frames_lost: runs[i].recovery_frames_lost(),
                })
                .collect(),
        })
        .collect();
    Ok(Comparison {
        modes: modes.to_vec(),
        seeds,
    })
}

/// One-sided exact sign test: probability of at least this many positive
/// differences among the nonzero ones if signs were fair coin flips.
pub fn sign_test_p(diffs: &[f64]) -> f64 {
    let n = diffs.iter().filter(|d| **d != 0.0).count() as u64;
    let k = diffs.iter().filter(|d| **d > 0.0).count() as u64;
    if n == 0 {
        return 1.0;
    }
    // Sum C(n, i) / 2^n for i >= k, with terms built incrementally.
    let mut term = 0.5f64.powi(n as i32);
    let mut tail = 0.0;
    for i in 0..=n {
        if i >= k {
            tail += term;
        }
        term = term * (n - i) as f64 / (i + 1) as f64;
    }
    tail.min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_test_matches_binomial_tail() {
        // 10 of 10 positive: 2^-10.
        assert!((sign_test_p(&[1.0; 10]) - 1.0 / 1024.0).abs() < 1e-15);
        // 8 of 10: (45 + 10 + 1) / 1024.
        let d = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, -1.0, -1.0, 0.0];
        assert!((sign_test_p(&d) - 56.0 / 1024.0).abs() < 1e-15);
        assert_eq!(sign_test_p(&[0.0, 0.0]), 1.0);
        assert!((sign_test_p(&[-1.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mode_list_validation() {
        let cfg = ScenarioConfig {
            seeds: vec![1],
            node_count: 2,
            ..ScenarioConfig::default()
        };
        assert!(matches!(compare_modes(&cfg, &[Mode::Mecp]), Err(ExperimentError::TooFewModes)));
        assert!(matches!(
            compare_modes(&cfg, &[Mode::Mecp, Mode::Mecp]),
            Err(ExperimentError::DuplicateMode(Mode::Mecp))
        ));
    }
}
