//! Matrix configuration, read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::catalog::Regime;
use crate::machine::{MachineConfig, Technique};
use crate::scheduler::{MitigationConfig, SchedulerKind};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// How the synthetic attacker is calibrated relative to its victim.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Induced misses per victim tick, as a multiple of the victim's own miss rate.
    pub flush_reload_multiple: f64,
    pub flush_flush_multiple: f64,
    pub prime_probe_multiple: f64,
    pub flush_ramp_ticks: u64,
    pub prime_probe_ramp_ticks: u64,
    /// Tick at which the attacker arrives.
    pub arrival: u64,
    /// Attacker cache occupancy as a fraction of one process's share of the LLC.
    pub footprint_share: f64,
    pub flush_mpki: f64,
    pub prime_probe_mpki: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            flush_reload_multiple: 25.0,
            flush_flush_multiple: 25.0,
            prime_probe_multiple: 5.0,
            flush_ramp_ticks: 10,
            prime_probe_ramp_ticks: 150,
            arrival: 5,
            footprint_share: 0.5,
            flush_mpki: 20.0,
            prime_probe_mpki: 12.0,
        }
    }
}

impl AttackConfig {
    pub fn multiple(&self, t: Technique) -> f64 {
        match t {
            Technique::FlushReload => self.flush_reload_multiple,
            Technique::FlushFlush => self.flush_flush_multiple,
            Technique::PrimeProbe => self.prime_probe_multiple,
        }
    }

    pub fn ramp(&self, t: Technique) -> u64 {
        match t {
            Technique::PrimeProbe => self.prime_probe_ramp_ticks,
            _ => self.flush_ramp_ticks,
        }
    }

    pub fn mpki(&self, t: Technique) -> f64 {
        match t {
            Technique::PrimeProbe => self.prime_probe_mpki,
            _ => self.flush_mpki,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub regime: Regime,
    pub schedulers: Vec<SchedulerKind>,
    /// Technique names, plus `none` for runs without an attacker.
    pub techniques: Vec<String>,
    /// Total processes per scenario, attacker included.
    pub process_counts: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Use the long-running stress program as the victim.
    pub stress: bool,
    /// Parallel scenario workers; 0 lets the pool decide.
    pub workers: usize,
    pub max_ticks: u64,
    pub training_seed: u64,
    /// Per-tick instruction tax charged to every process under the footprint-aware scheduler.
    pub monitoring_tax: f64,
    /// LLC capacity as this many mean region footprints; 0 keeps `machine.llc_capacity`.
    pub capacity_regions: f64,
    /// Co-runner arrival ticks are drawn from `0..=arrival_jitter`.
    pub arrival_jitter: u64,
    pub machine: MachineConfig,
    pub mitigation: MitigationConfig,
    pub attack: AttackConfig,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            regime: Regime::Accurate,
            schedulers: vec![SchedulerKind::Biscuit, SchedulerKind::Baseline],
            techniques: vec![
                "flush_reload".into(),
                "flush_flush".into(),
                "prime_probe".into(),
                "none".into(),
            ],
            process_counts: vec![3, 6, 12, 18],
            seeds: (1..=10).collect(),
            stress: false,
            workers: 0,
            max_ticks: 100_000,
            training_seed: 7,
            monitoring_tax: 0.05,
            capacity_regions: 9.0,
            arrival_jitter: 40,
            machine: MachineConfig::default(),
            mitigation: MitigationConfig::default(),
            attack: AttackConfig::default(),
        }
    }
}

impl HarnessConfig {
    pub fn from_toml(text: &str, path: &str) -> Result<Self, ConfigError> {
        let cfg: HarnessConfig = toml::from_str(text).map_err(|e| ConfigError::Schema {
            path: path.to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text, &path.display().to_string())
    }

    /// Attack techniques in config order; `None` stands for a run without attacker.
    pub fn attacks(&self) -> Result<Vec<Option<Technique>>, ConfigError> {
        self.techniques
            .iter()
            .map(|t| match t.as_str() {
                "none" => Ok(None),
                other => Technique::parse(other)
                    .map(Some)
                    .ok_or_else(|| ConfigError::Invalid(format!("unknown technique `{other}`"))),
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.machine.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.attacks()?;
        if self.schedulers.is_empty() || self.techniques.is_empty() || self.seeds.is_empty() || self.process_counts.is_empty() {
            return bad("schedulers, techniques, process_counts and seeds must be non-empty".into());
        }
        let cores = self.machine.sockets * self.machine.cores_per_socket;
        if let Some(n) = self.process_counts.iter().find(|&&n| n < 2 || n > cores) {
            return bad(format!("process count {n} must be between 2 and {cores}"));
        }
        if !(0.0..1.0).contains(&self.monitoring_tax) {
            return bad("monitoring_tax must be in [0, 1)".into());
        }
        if self.capacity_regions < 0.0 || self.max_ticks == 0 {
            return bad("capacity_regions must be >= 0 and max_ticks > 0".into());
        }
        if self.mitigation.linear_limit == 0 || self.mitigation.halving_window == 0 || self.mitigation.linear_window == 0 {
            return bad("mitigation windows and linear_limit must be >= 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = HarnessConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(HarnessConfig::from_toml(&text, "x").unwrap(), cfg);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = HarnessConfig::from_toml("regime = \"degraded\"\nseeds = [1, 2]\n[attack]\narrival = 9\n", "m.toml").unwrap();
        assert_eq!(cfg.regime, Regime::Degraded);
        assert_eq!(cfg.seeds, vec![1, 2]);
        assert_eq!(cfg.attack.arrival, 9);
        assert_eq!(cfg.attack.prime_probe_multiple, 5.0);
    }

    #[test]
    fn schema_errors_name_the_line() {
        let err = HarnessConfig::from_toml("seeds = [1]\nbogus = 3\n", "m.toml").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("m.toml") && msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn rejects_unknown_technique_and_bad_counts() {
        assert!(HarnessConfig::from_toml("techniques = [\"rowhammer\"]", "m").is_err());
        assert!(HarnessConfig::from_toml("process_counts = [1]", "m").is_err());
        assert!(HarnessConfig::from_toml("process_counts = [29]", "m").is_err());
    }
}
