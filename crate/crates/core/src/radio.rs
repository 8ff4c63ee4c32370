//! Transmit power levels, link range and the per-node energy ledger.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mobility::Vec2;
use crate::protocol::NodeId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RadioError {
    #[error("unreachable: {distance} m exceeds the {band:?} band maximum of {max_range} m")]
    Unreachable { distance: f64, band: Band, max_range: f64 },
    #[error("bit count must be positive")]
    ZeroBits,
    #[error("negative distance {0}")]
    NegativeDistance(f64),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("negative energy amount {0}")]
    NegativeAmount(f64),
    #[error("invalid power table: {0}")]
    InvalidTable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    /// Member to cluster head.
    Intra,
    /// Cluster head to cluster head, guard and sink.
    Inter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerLevel {
    pub tx_power_mw: f64,
    pub range_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PowerTable {
    pub levels: Vec<PowerLevel>,
    pub intra_cluster_max_level: usize,
    pub inter_cluster_min_level: usize,
}

impl Default for PowerTable {
    fn default() -> Self {
        Self {
            levels: vec![
                PowerLevel { tx_power_mw: 1.0, range_m: 25.0 },
                PowerLevel { tx_power_mw: 4.0, range_m: 50.0 },
                PowerLevel { tx_power_mw: 16.0, range_m: 100.0 },
            ],
            intra_cluster_max_level: 1,
            inter_cluster_min_level: 2,
        }
    }
}

impl PowerTable {
    pub fn validate(&self) -> Result<(), RadioError> {
        if self.levels.is_empty() {
            return Err(RadioError::InvalidTable("no power levels".into()));
        }
        for (i, l) in self.levels.iter().enumerate() {
            if !(l.tx_power_mw > 0.0 && l.range_m > 0.0) {
                return Err(RadioError::InvalidTable(format!("level {i} must have positive power and range")));
            }
        }
        for w in self.levels.windows(2) {
            if !(w[1].tx_power_mw > w[0].tx_power_mw && w[1].range_m > w[0].range_m) {
                return Err(RadioError::InvalidTable("levels must be strictly ascending in power and range".into()));
            }
        }
        let last = self.levels.len() - 1;
        if self.intra_cluster_max_level > last || self.inter_cluster_min_level > last {
            return Err(RadioError::InvalidTable("band limit beyond the last level".into()));
        }
        let single_band = self.levels.len() == 1;
        let separated = self.intra_cluster_max_level < self.inter_cluster_min_level;
        let shared = self.intra_cluster_max_level == self.inter_cluster_min_level;
        if !(separated || (single_band && shared)) {
            return Err(RadioError::InvalidTable(
                "intra_cluster_max_level must be below inter_cluster_min_level".into(),
            ));
        }
        Ok(())
    }

    /// Inclusive range of level indices in a band.
    pub fn band_levels(&self, band: Band) -> std::ops::RangeInclusive<usize> {
        match band {
            Band::Intra => 0..=self.intra_cluster_max_level,
            Band::Inter => self.inter_cluster_min_level..=self.levels.len() - 1,
        }
    }

    pub fn range(&self, level: usize) -> f64 {
        self.levels[level].range_m
    }

    pub fn power_mw(&self, level: usize) -> f64 {
        self.levels[level].tx_power_mw
    }

    pub fn max_level(&self, band: Band) -> usize {
        *self.band_levels(band).end()
    }

    pub fn max_range(&self, band: Band) -> f64 {
        self.range(self.max_level(band))
    }

    pub fn in_band(&self, level: usize, band: Band) -> bool {
        self.band_levels(band).contains(&level)
    }

    /// Smallest level in `band` whose range covers `distance`.
    pub fn min_power_level(&self, distance: f64, band: Band) -> Result<usize, RadioError> {
        if distance < 0.0 {
            return Err(RadioError::NegativeDistance(distance));
        }
        self.band_levels(band)
            .find(|&l| self.levels[l].range_m >= distance)
            .ok_or(RadioError::Unreachable {
                distance,
                band,
                max_range: self.max_range(band),
            })
    }

    /// Boundary inclusive: a node exactly at the range limit is reachable.
    pub fn in_range(&self, a: Vec2, b: Vec2, level: usize) -> bool {
        a.distance(b) <= self.levels[level].range_m
    }
}

/// First-order radio model constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyModel {
    /// Electronics energy, J/bit.
    pub e_elec: f64,
    /// Free-space amplifier energy, J/bit/m^2.
    pub eps_amp: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self {
            e_elec: 50e-9,
            eps_amp: 100e-12,
        }
    }
}

impl EnergyModel {
    pub fn tx_energy(&self, bits: u64, distance: f64) -> Result<f64, RadioError> {
        if bits == 0 {
            return Err(RadioError::ZeroBits);
        }
        if distance < 0.0 {
            return Err(RadioError::NegativeDistance(distance));
        }
        let b = bits as f64;
        Ok(self.e_elec * b + self.eps_amp * b * distance * distance)
    }

    pub fn rx_energy(&self, bits: u64) -> Result<f64, RadioError> {
        if bits == 0 {
            return Err(RadioError::ZeroBits);
        }
        Ok(self.e_elec * bits as f64)
    }
}

/// Energy quantum used by the ledger: one femtojoule.
pub const FEMTOJOULES_PER_JOULE: f64 = 1e15;

pub fn joules_to_fj(j: f64) -> u64 {
    (j * FEMTOJOULES_PER_JOULE).round() as u64
}

pub fn fj_to_joules(fj: u64) -> f64 {
    fj as f64 / FEMTOJOULES_PER_JOULE
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Liveness {
    Alive,
    Died,
}

/// Battery state for every node.
///
/// Balances are integers in femtojoules so that
/// `sum(e_res) + sum(debits) == sum(initial)` holds exactly.
#[derive(Debug, Clone)]
pub struct EnergyLedger {
    e_res: Vec<u64>,
    e_max: u64,
    initial_total: u128,
    debited: u128,
    debit_count: u64,
}

impl EnergyLedger {
    pub fn new(initial_j: &[f64], e_max_j: f64) -> Self {
        let e_max = joules_to_fj(e_max_j);
        let e_res: Vec<u64> = initial_j.iter().map(|&j| joules_to_fj(j).min(e_max)).collect();
        let initial_total = e_res.iter().map(|&e| e as u128).sum();
        Self {
            e_res,
            e_max,
            initial_total,
            debited: 0,
            debit_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.e_res.len()
    }

    pub fn is_empty(&self) -> bool {
        self.e_res.is_empty()
    }

    fn slot(&self, node: NodeId) -> Result<usize, RadioError> {
        let i = node.0 as usize;
        if i < self.e_res.len() {
            Ok(i)
        } else {
            Err(RadioError::UnknownNode(node))
        }
    }

    pub fn is_alive(&self, node: NodeId) -> bool {
        self.slot(node).map(|i| self.e_res[i] > 0).unwrap_or(false)
    }

    pub fn e_res_fj(&self, node: NodeId) -> u64 {
        self.slot(node).map(|i| self.e_res[i]).unwrap_or(0)
    }

    pub fn e_res(&self, node: NodeId) -> f64 {
        fj_to_joules(self.e_res_fj(node))
    }

    pub fn e_max(&self) -> f64 {
        fj_to_joules(self.e_max)
    }

    /// Debit `amount` joules. Returns the femtojoules actually taken.
    pub fn consume(&mut self, node: NodeId, amount: f64) -> Result<(Liveness, u64), RadioError> {
        if amount < 0.0 {
            return Err(RadioError::NegativeAmount(amount));
        }
        self.consume_fj(node, joules_to_fj(amount))
    }

    pub fn consume_fj(&mut self, node: NodeId, amount: u64) -> Result<(Liveness, u64), RadioError> {
        let i = self.slot(node)?;
        let taken = amount.min(self.e_res[i]);
        self.e_res[i] -= taken;
        if taken > 0 {
            self.debited += taken as u128;
            self.debit_count += 1;
        }
        let state = if self.e_res[i] == 0 { Liveness::Died } else { Liveness::Alive };
        Ok((state, taken))
    }

    /// Empty a battery completely.
    pub fn drain(&mut self, node: NodeId) -> Result<u64, RadioError> {
        let i = self.slot(node)?;
        let all = self.e_res[i];
        self.consume_fj(node, all).map(|(_, t)| t)
    }

    pub fn total_residual_fj(&self) -> u128 {
        self.e_res.iter().map(|&e| e as u128).sum()
    }

    pub fn initial_total_fj(&self) -> u128 {
        self.initial_total
    }

    pub fn total_debited_fj(&self) -> u128 {
        self.debited
    }

    /// Number of nonzero debits recorded.
    pub fn debit_count(&self) -> u64 {
        self.debit_count
    }
}
