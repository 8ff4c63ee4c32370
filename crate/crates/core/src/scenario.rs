//! Scenario files.
//!
//! A scenario is a TOML document. Every key is optional except where noted;
//! missing keys take the defaults below and unknown keys are rejected.
//!
//! ```toml
//! node_count = 100            # required
//! seeds = [1, 2, 3]           # required, nonempty (alias: `seed`)
//! rounds = 20
//! p_loss = 0.0                # independent per-transmission loss probability
//! guards = true               # guard nodes on the cluster-head overlay
//! positions = [[x, y], ...]   # optional fixed layout, one entry per node
//!
//! [world]
//! width = 200.0
//! height = 200.0
//! sink = [100.0, 100.0]       # default: world centre
//!
//! [mobility]
//! model = "random_waypoint"   # static | constant_velocity | random_waypoint
//! v_min = 0.0
//! v_max = 5.0
//! pause_time = 0.0
//! sensing_noise = 0.0
//!
//! [power]
//! levels = [{ tx_power_mw = 1.0, range_m = 25.0 }, { tx_power_mw = 4.0, range_m = 50.0 },
//!           { tx_power_mw = 16.0, range_m = 100.0 }]
//! intra_cluster_max_level = 1
//! inter_cluster_min_level = 2
//!
//! [energy]
//! e_elec = 5e-8               # J/bit
//! eps_amp = 1e-10             # J/bit/m^2
//! idle_per_round = 0.0        # J charged to every live node per round
//! initial_min_fraction = 1.0  # initial charge drawn from [fraction, 1] * e_max
//!
//! [traffic]
//! data_bits = 2000
//! control_bits = 200
//!
//! [protocol]
//! k_fraction = 0.1
//! p_min = 0.0009765625
//! e_max = 2.0
//! cost_mode = "inverse_degree" # inverse_degree | degree | ccf
//! heed_mode = false
//! va_threshold = 1.0
//! ach_enabled = true
//!
//! [schedule]
//! t_cluster = 1.0
//! t_p = 10.0
//! frames_per_round = 10
//! ack_timeout = 1.0           # default: one frame
//!
//! [failure_policy]
//! crash_ch_each_round = false # crash one CH with members per round
//! at_frame = 5
//!
//! [[failures]]
//! node = 3
//! time = 12.0
//! mode = "crash"              # crash | drain
//!
//! [output]
//! dir = "out"
//! trace = false
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::RoundSchedule;
use crate::mobility::{MobilityConfig, World};
use crate::protocol::ProtocolConfig;
use crate::radio::{EnergyModel, PowerTable};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("malformed scenario: {0}")]
    Malformed(String),
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub width: f64,
    pub height: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sink: Option<[f64; 2]>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            width: 200.0,
            height: 200.0,
            sink: None,
        }
    }
}

impl WorldConfig {
    pub fn world(&self) -> World {
        World {
            width: self.width,
            height: self.height,
        }
    }

    pub fn sink_position(&self) -> [f64; 2] {
        self.sink.unwrap_or([self.width / 2.0, self.height / 2.0])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyConfig {
    pub e_elec: f64,
    pub eps_amp: f64,
    pub idle_per_round: f64,
    pub initial_min_fraction: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        let m = EnergyModel::default();
        Self {
            e_elec: m.e_elec,
            eps_amp: m.eps_amp,
            idle_per_round: 0.0,
            initial_min_fraction: 1.0,
        }
    }
}

impl EnergyConfig {
    pub fn model(&self) -> EnergyModel {
        EnergyModel {
            e_elec: self.e_elec,
            eps_amp: self.eps_amp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrafficConfig {
    pub data_bits: u64,
    pub control_bits: u64,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        Self {
            data_bits: 2000,
            control_bits: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureMode {
    Crash,
    Drain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureSpec {
    pub node: u32,
    pub time: f64,
    pub mode: FailureMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FailurePolicy {
    pub crash_ch_each_round: bool,
    pub at_frame: u32,
}

impl Default for FailurePolicy {
    fn default() -> Self {
        Self {
            crash_ch_each_round: false,
            at_frame: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: String,
    pub trace: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: "out".into(),
            trace: false,
        }
    }
}

/// Protocol variant being simulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Mecp,
    HeedMode,
    MecpNoAch,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Mecp => "mecp",
            Mode::HeedMode => "heed_mode",
            Mode::MecpNoAch => "mecp_no_ach",
        }
    }

    pub fn apply(self, cfg: &mut ProtocolConfig) {
        let (heed, ach) = match self {
            Mode::Mecp => (false, true),
            Mode::HeedMode => (true, false),
            Mode::MecpNoAch => (false, false),
        };
        cfg.heed_mode = heed;
        cfg.ach_enabled = ach;
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mecp" => Ok(Mode::Mecp),
            "heed_mode" | "heed" => Ok(Mode::HeedMode),
            "mecp_no_ach" => Ok(Mode::MecpNoAch),
            other => Err(format!("unknown mode `{other}` (expected mecp, heed_mode or mecp_no_ach)")),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub node_count: usize,
    #[serde(alias = "seed")]
    pub seeds: Vec<u64>,
    pub rounds: u32,
    pub p_loss: f64,
    pub guards: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub positions: Option<Vec<[f64; 2]>>,
    pub world: WorldConfig,
    pub mobility: MobilityConfig,
    pub power: PowerTable,
    pub energy: EnergyConfig,
    pub traffic: TrafficConfig,
    pub protocol: ProtocolConfig,
    pub schedule: RoundSchedule,
    pub failure_policy: FailurePolicy,
    pub output: OutputConfig,
    pub failures: Vec<FailureSpec>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            node_count: 100,
            seeds: Vec::new(),
            rounds: 20,
            p_loss: 0.0,
            guards: true,
            positions: None,
            world: WorldConfig::default(),
            mobility: MobilityConfig::default(),
            power: PowerTable::default(),
            energy: EnergyConfig::default(),
            traffic: TrafficConfig::default(),
            protocol: ProtocolConfig::default(),
            schedule: RoundSchedule::default(),
            failure_policy: FailurePolicy::default(),
            output: OutputConfig::default(),
            failures: Vec::new(),
        }
    }
}

/// Parse and validate a scenario document.
pub fn parse_scenario(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Malformed(e.message().to_string()))?;
    for required in ["node_count", "seeds"] {
        let present = table.contains_key(required) || (required == "seeds" && table.contains_key("seed"));
        if !present {
            return Err(invalid(required, "missing required key"));
        }
    }
    let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| ConfigError::Malformed(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_scenario(path: &Path) -> Result<ScenarioConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_scenario(&text)
}

fn check(ok: bool, path: &str, message: impl FnOnce() -> String) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(invalid(path, message()))
    }
}

fn positive(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

impl ScenarioConfig {
    /// Serialize back to the scenario grammar.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario is always representable")
    }

    pub fn with_mode(&self, mode: Mode) -> ScenarioConfig {
        let mut c = self.clone();
        mode.apply(&mut c.protocol);
        c
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        check(self.node_count >= 1, "node_count", || "node_count must be at least 1".into())?;
        check(self.node_count < u32::MAX as usize, "node_count", || "node_count too large".into())?;
        check(!self.seeds.is_empty(), "seeds", || "seed list must be nonempty".into())?;
        check(self.seeds.iter().all(|&s| s <= i64::MAX as u64), "seeds", || {
            format!("seeds must not exceed {}", i64::MAX)
        })?;
        check(self.rounds >= 1, "rounds", || "rounds must be at least 1".into())?;
        check((0.0..=1.0).contains(&self.p_loss), "p_loss", || format!("p_loss out of range [0, 1]: {}", self.p_loss))?;

        let w = &self.world;
        check(positive(w.width), "world.width", || format!("width must be positive: {}", w.width))?;
        check(positive(w.height), "world.height", || format!("height must be positive: {}", w.height))?;
        if let Some(positions) = &self.positions {
            check(positions.len() == self.node_count, "positions", || {
                format!("{} positions given for {} nodes", positions.len(), self.node_count)
            })?;
            for (i, p) in positions.iter().enumerate() {
                check(w.world().contains((*p).into()), &format!("positions[{i}]"), || {
                    format!("({}, {}) lies outside the world", p[0], p[1])
                })?;
            }
        }

        let m = &self.mobility;
        check(m.v_min >= 0.0 && m.v_min <= m.v_max && m.v_max.is_finite(), "mobility.v_min", || {
            format!("need 0 <= v_min <= v_max, got v_min={} v_max={}", m.v_min, m.v_max)
        })?;
        check(m.pause_time >= 0.0, "mobility.pause_time", || "pause_time must be nonnegative".into())?;
        check(m.sensing_noise >= 0.0, "mobility.sensing_noise", || "sensing_noise must be nonnegative".into())?;

        self.power.validate().map_err(|e| invalid("power", e.to_string()))?;

        let e = &self.energy;
        check(e.e_elec >= 0.0, "energy.e_elec", || "e_elec must be nonnegative".into())?;
        check(e.eps_amp >= 0.0, "energy.eps_amp", || "eps_amp must be nonnegative".into())?;
        check(e.idle_per_round >= 0.0, "energy.idle_per_round", || "idle_per_round must be nonnegative".into())?;
        check(
            e.initial_min_fraction > 0.0 && e.initial_min_fraction <= 1.0,
            "energy.initial_min_fraction",
            || format!("initial_min_fraction out of range (0, 1]: {}", e.initial_min_fraction),
        )?;

        check(self.traffic.data_bits > 0, "traffic.data_bits", || "data_bits must be positive".into())?;
        check(self.traffic.control_bits > 0, "traffic.control_bits", || "control_bits must be positive".into())?;

        self.protocol
            .validate()
            .map_err(|(field, msg)| invalid(format!("protocol.{field}"), msg))?;

        let s = &self.schedule;
        check(positive(s.t_cluster), "schedule.t_cluster", || "t_cluster must be positive".into())?;
        check(positive(s.t_p), "schedule.t_p", || "t_p must be positive".into())?;
        check(s.frames_per_round >= 1, "schedule.frames_per_round", || "frames_per_round must be at least 1".into())?;
        if let Some(t) = s.ack_timeout {
            check(positive(t), "schedule.ack_timeout", || "ack_timeout must be positive".into())?;
        }

        check(
            self.failure_policy.at_frame < s.frames_per_round,
            "failure_policy.at_frame",
            || format!("at_frame {} is not below frames_per_round {}", self.failure_policy.at_frame, s.frames_per_round),
        )?;
        let mut seen = BTreeSet::new();
        for (i, f) in self.failures.iter().enumerate() {
            let path = format!("failures[{i}]");
            check((f.node as usize) < self.node_count, &path, || format!("node {} does not exist", f.node))?;
            check(f.time >= 0.0 && f.time.is_finite(), &path, || format!("invalid time {}", f.time))?;
            check(seen.insert((f.node, f.time.to_bits())), &path, || {
                format!("duplicate injection for node {} at t={}", f.node, f.time)
            })?;
        }
        check(!self.output.dir.is_empty(), "output.dir", || "output directory must be nonempty".into())?;
        Ok(())
    }
}
