//! Experiment configuration read from TOML. Every key has a default, so an
//! empty document is the reference scenario.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::ChannelParams;
use crate::geometry::WaypointParams;
use crate::rl::RlParams;
use crate::units;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Tql,
    Qlearning,
    Bsdc,
    Baseline,
}

impl Policy {
    pub const ALL: [Policy; 4] = [
        Policy::Tql,
        Policy::Qlearning,
        Policy::Bsdc,
        Policy::Baseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Tql => "tql",
            Policy::Qlearning => "qlearning",
            Policy::Bsdc => "bsdc",
            Policy::Baseline => "baseline",
        }
    }

    pub fn is_learning(self) -> bool {
        matches!(self, Policy::Tql | Policy::Qlearning)
    }
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config("experiment.policy", format!("unknown policy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mobility {
    Stationary,
    RandomWaypoint,
}

impl Mobility {
    pub fn name(self) -> &'static str {
        match self {
            Mobility::Stationary => "stationary",
            Mobility::RandomWaypoint => "random_waypoint",
        }
    }
}

impl std::str::FromStr for Mobility {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stationary" => Ok(Mobility::Stationary),
            "random_waypoint" => Ok(Mobility::RandomWaypoint),
            _ => Err(Error::config(
                "experiment.mobility",
                format!("unknown mobility model `{s}`"),
            )),
        }
    }
}

/// Network layout and radio constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_learner_gnbs: usize,
    pub n_expert_gnbs: usize,
    pub inter_gnb_distance_m: f64,
    pub learner_clusters: usize,
    pub users_per_learner_cluster: usize,
    /// Experts get one cluster each.
    pub users_per_expert_gnb: usize,
    pub cluster_radius_m: f64,
    /// Distance between the learner row and the expert row of gNBs.
    pub expert_offset_m: f64,
    pub n_antennas: usize,
    pub max_power_dbm: f64,
    pub bandwidth_hz: f64,
    pub noise_density_dbm_hz: f64,
    pub noise_figure_db: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            n_learner_gnbs: 2,
            n_expert_gnbs: 2,
            inter_gnb_distance_m: 150.0,
            learner_clusters: 2,
            users_per_learner_cluster: 6,
            users_per_expert_gnb: 3,
            cluster_radius_m: 30.0,
            expert_offset_m: 1000.0,
            n_antennas: 16,
            max_power_dbm: 28.0,
            bandwidth_hz: 20e6,
            noise_density_dbm_hz: -174.0,
            noise_figure_db: 7.0,
        }
    }
}

impl ScenarioConfig {
    pub fn noise_w(&self) -> f64 {
        units::dbm_to_watts(self.noise_density_dbm_hz)
            * self.bandwidth_hz
            * units::db_to_linear(self.noise_figure_db)
    }
}

/// Traffic, HARQ and link adaptation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MacConfig {
    pub packet_bytes: usize,
    pub symbols_per_tti: usize,
    pub subcarrier_spacing_khz: f64,
    pub harq_processes: usize,
    pub harq_rtt_tti: u64,
    pub max_retx: u32,
    pub decode_margin_db: f64,
    /// SINR below which link adaptation schedules nothing.
    pub se_min_sinr_db: f64,
    pub se_cap: f64,
    /// Fraction of the Shannon bound achieved by the coding scheme.
    pub shannon_fraction: f64,
}

impl Default for MacConfig {
    fn default() -> Self {
        MacConfig {
            packet_bytes: 32,
            symbols_per_tti: 2,
            subcarrier_spacing_khz: 15.0,
            harq_processes: 6,
            harq_rtt_tti: 4,
            max_retx: 1,
            decode_margin_db: 1.0,
            se_min_sinr_db: -10.0,
            se_cap: 7.4,
            shannon_fraction: 0.75,
        }
    }
}

impl MacConfig {
    /// TTI length in seconds, with the normal cyclic prefix folded into
    /// 14 symbols per slot.
    pub fn tti_s(&self) -> f64 {
        let slot_s = 1e-3 * 15.0 / self.subcarrier_spacing_khz;
        self.symbols_per_tti as f64 * slot_s / 14.0
    }

    pub fn packet_bits(&self) -> f64 {
        8.0 * self.packet_bytes as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DbscanConfig {
    pub eps_m: f64,
    pub minpts: usize,
}

impl Default for DbscanConfig {
    fn default() -> Self {
        DbscanConfig {
            eps_m: 40.0,
            minpts: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub n_sectors: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { n_sectors: 3 }
    }
}

/// Expert pre-training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertConfig {
    pub seed: u64,
    pub tti_budget: usize,
    pub window: usize,
    pub slope_tol: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig {
            seed: 1_000,
            tti_budget: 6000,
            window: 500,
            slope_tol: 1e-4,
        }
    }
}

/// What to run and where to write it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub policy: Policy,
    pub mobility: Mobility,
    pub loads_mbps: Vec<f64>,
    pub seeds: Vec<u64>,
    pub tti_count: usize,
    pub output_dir: PathBuf,
    pub bundle: Option<PathBuf>,
    /// Parallel runs; 0 uses every core.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            policy: Policy::Qlearning,
            mobility: Mobility::Stationary,
            loads_mbps: vec![0.4, 0.7, 1.0, 1.3],
            seeds: (1..=10).collect(),
            tti_count: 2000,
            output_dir: PathBuf::from("out"),
            bundle: None,
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub channel: ChannelParams,
    pub mac: MacConfig,
    pub rl: RlParams,
    pub dbscan: DbscanConfig,
    pub baseline: BaselineConfig,
    pub mobility: WaypointParams,
    pub expert: ExpertConfig,
    pub experiment: RunConfig,
}

impl ExperimentConfig {
    /// Full-length profile: 40 runs of 6000 TTIs.
    pub fn full_profile(mut self) -> Self {
        self.experiment.seeds = (1..=40).collect();
        self.experiment.tti_count = 6000;
        self
    }

    /// Bundle to read for TQL runs and to write after expert training.
    pub fn bundle_path(&self) -> PathBuf {
        self.experiment
            .bundle
            .clone()
            .unwrap_or_else(|| self.experiment.output_dir.join("expert_bundle.json"))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| toml_error(text, &e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.scenario;
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be positive, got {v}")))
            }
        };
        let nonzero = |field: &str, v: usize| {
            if v > 0 {
                Ok(())
            } else {
                Err(Error::config(field, "must be at least 1"))
            }
        };
        nonzero("scenario.n_learner_gnbs", s.n_learner_gnbs)?;
        nonzero("scenario.n_antennas", s.n_antennas)?;
        positive("scenario.inter_gnb_distance_m", s.inter_gnb_distance_m)?;
        positive("scenario.cluster_radius_m", s.cluster_radius_m)?;
        positive("scenario.bandwidth_hz", s.bandwidth_hz)?;
        if s.n_expert_gnbs > 0 {
            positive("scenario.expert_offset_m", s.expert_offset_m)?;
        }
        if s.learner_clusters * s.users_per_learner_cluster > crate::rl::MAX_CANDIDATES {
            return Err(Error::config(
                "scenario.users_per_learner_cluster",
                format!(
                    "at most {} learner users fit an action code",
                    crate::rl::MAX_CANDIDATES
                ),
            ));
        }
        if s.n_expert_gnbs * s.users_per_expert_gnb > crate::rl::MAX_CANDIDATES {
            return Err(Error::config(
                "scenario.users_per_expert_gnb",
                format!(
                    "at most {} expert users fit an action code",
                    crate::rl::MAX_CANDIDATES
                ),
            ));
        }

        let c = &self.channel;
        positive("channel.eta", c.eta)?;
        positive("channel.pathloss_l", c.pathloss_l)?;
        positive("channel.sigma_alpha_sq", c.sigma_alpha_sq)?;
        positive("channel.spacing_ratio", c.spacing_ratio)?;

        let m = &self.mac;
        nonzero("mac.packet_bytes", m.packet_bytes)?;
        nonzero("mac.symbols_per_tti", m.symbols_per_tti)?;
        nonzero("mac.harq_processes", m.harq_processes)?;
        positive("mac.subcarrier_spacing_khz", m.subcarrier_spacing_khz)?;
        positive("mac.se_cap", m.se_cap)?;
        positive("mac.shannon_fraction", m.shannon_fraction)?;
        if m.harq_rtt_tti == 0 {
            return Err(Error::config("mac.harq_rtt_tti", "must be at least 1"));
        }
        if !(m.decode_margin_db >= 0.0) {
            return Err(Error::config("mac.decode_margin_db", "must be nonnegative"));
        }

        let r = &self.rl;
        if !(0.0..=1.0).contains(&r.alpha) {
            return Err(Error::config("rl.alpha", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&r.gamma) {
            return Err(Error::config("rl.gamma", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&r.epsilon) {
            return Err(Error::config("rl.epsilon", "must lie in [0, 1]"));
        }
        if !r.threshold_db.is_finite() {
            return Err(Error::config("rl.threshold_db", "must be finite"));
        }
        nonzero("rl.k_max", r.k_max)?;

        positive("dbscan.eps_m", self.dbscan.eps_m)?;
        nonzero("dbscan.minpts", self.dbscan.minpts)?;
        nonzero("baseline.n_sectors", self.baseline.n_sectors)?;

        let w = &self.mobility;
        if !(w.speed_min > 0.0 && w.speed_max >= w.speed_min) {
            return Err(Error::config(
                "mobility.speed_max",
                "need 0 < speed_min <= speed_max",
            ));
        }
        if !(w.pause_min >= 0.0 && w.pause_max >= w.pause_min) {
            return Err(Error::config(
                "mobility.pause_max",
                "need 0 <= pause_min <= pause_max",
            ));
        }

        let x = &self.expert;
        nonzero("expert.tti_budget", x.tti_budget)?;
        if x.window < 2 {
            return Err(Error::config("expert.window", "must be at least 2"));
        }
        positive("expert.slope_tol", x.slope_tol)?;

        let e = &self.experiment;
        if e.seeds.is_empty() {
            return Err(Error::config("experiment.seeds", "must not be empty"));
        }
        if e.loads_mbps.is_empty() {
            return Err(Error::config("experiment.loads_mbps", "must not be empty"));
        }
        for &l in &e.loads_mbps {
            positive("experiment.loads_mbps", l)?;
        }
        nonzero("experiment.tti_count", e.tti_count)?;
        Ok(())
    }
}

/// Turn a TOML error into a config error naming the key on the failing line.
fn toml_error(text: &str, err: &toml::de::Error) -> Error {
    let reason = err.message().trim().to_string();
    let Some(span) = err.span() else {
        return Error::config("<document>", reason);
    };
    let mut section = String::new();
    let mut key = None;
    let mut offset = 0;
    for line in text.lines() {
        let t = line.trim();
        if t.starts_with('[') {
            section = t.trim_matches(|c| c == '[' || c == ']').trim().to_string();
        }
        if span.start < offset + line.len() + 1 {
            key = t.split('=').next().map(|k| k.trim().to_string());
            if t.starts_with('[') {
                key = None;
            }
            break;
        }
        offset += line.len() + 1;
    }
    let field = match (section.is_empty(), key) {
        (_, Some(k)) if !k.is_empty() && section.is_empty() => k,
        (false, Some(k)) if !k.is_empty() => format!("{section}.{k}"),
        (false, _) => section,
        _ => "<document>".into(),
    };
    Error::config(field, reason)
}
