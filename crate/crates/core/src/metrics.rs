//! Per-round metrics rows and their CSV form.
//!
//! The file starts with a version comment followed by the header:
//!
//! ```text
//! # mecp-metrics v1
//! seed,round,delivery_ratio,aggregate_delivery_ratio,ch_count,mean_cluster_size,max_cluster_size,clustering_iterations_max,energy_consumed_j,alive_count,orphan_count,recovery_frames_lost,frames_sent,frames_delivered
//! ```

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::engine::RoundReport;
use crate::radio::FEMTOJOULES_PER_JOULE;

pub const METRICS_VERSION_LINE: &str = "# mecp-metrics v1";

pub const METRICS_HEADER: [&str; 14] = [
    "seed",
    "round",
    "delivery_ratio",
    "aggregate_delivery_ratio",
    "ch_count",
    "mean_cluster_size",
    "max_cluster_size",
    "clustering_iterations_max",
    "energy_consumed_j",
    "alive_count",
    "orphan_count",
    "recovery_frames_lost",
    "frames_sent",
    "frames_delivered",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub seed: u64,
    pub round: u32,
    /// Member frames delivered over frames sent; 1.0 when nothing was sent.
    pub delivery_ratio: f64,
    /// Aggregates reaching the sink over aggregates attempted; 1.0 when none.
    pub aggregate_delivery_ratio: f64,
    pub ch_count: u32,
    pub mean_cluster_size: f64,
    pub max_cluster_size: u32,
    pub clustering_iterations_max: u32,
    pub energy_consumed_j: f64,
    pub alive_count: u32,
    pub orphan_count: u32,
    pub recovery_frames_lost: u32,
    pub frames_sent: u32,
    pub frames_delivered: u32,
}

impl MetricsRecord {
    pub fn from_report(seed: u64, r: &RoundReport) -> Self {
        let sizes = r.snapshot.cluster_sizes();
        let mean = if sizes.is_empty() {
            0.0
        } else {
            sizes.iter().sum::<usize>() as f64 / sizes.len() as f64
        };
        MetricsRecord {
            seed,
            round: r.round,
            delivery_ratio: r.delivery_ratio(),
            aggregate_delivery_ratio: r.aggregate_delivery_ratio(),
            ch_count: r.snapshot.chs.len() as u32,
            mean_cluster_size: mean,
            max_cluster_size: sizes.iter().copied().max().unwrap_or(0) as u32,
            clustering_iterations_max: r.snapshot.max_iterations_observed,
            energy_consumed_j: r.energy_consumed_fj as f64 / FEMTOJOULES_PER_JOULE,
            alive_count: r.alive_count,
            orphan_count: r.orphan_count,
            recovery_frames_lost: r.recovery_frames_lost,
            frames_sent: r.frames_sent,
            frames_delivered: r.frames_delivered,
        }
    }

    /// Row invariants; returns a description of the first one violated.
    pub fn check(&self, iteration_limit: u32) -> Result<(), String> {
        for (name, v) in [
            ("delivery_ratio", self.delivery_ratio),
            ("aggregate_delivery_ratio", self.aggregate_delivery_ratio),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} = {v} outside [0, 1] (seed {}, round {})", self.seed, self.round));
            }
        }
        if self.clustering_iterations_max > iteration_limit {
            return Err(format!(
                "clustering_iterations_max = {} exceeds {} (seed {}, round {})",
                self.clustering_iterations_max, iteration_limit, self.seed, self.round
            ));
        }
        if self.frames_delivered > self.frames_sent {
            return Err(format!("more frames delivered than sent (seed {}, round {})", self.seed, self.round));
        }
        Ok(())
    }
}

pub fn write_metrics_csv<W: Write>(mut w: W, records: &[MetricsRecord]) -> io::Result<()> {
    writeln!(w, "{METRICS_VERSION_LINE}")?;
    let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    csv.write_record(METRICS_HEADER)?;
    for r in records {
        csv.serialize(r)?;
    }
    csv.flush()
}

pub fn read_metrics_csv<R: io::Read>(r: R) -> Result<Vec<MetricsRecord>, csv::Error> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(r)
        .deserialize()
        .collect()
}
