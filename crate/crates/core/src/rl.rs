//! Tabular Q-learning shared by expert and learner agents.
//!
//! States are the two interference levels `s0` (average SINR meets the
//! threshold) and `s1`; rewards are a sigmoid of the average SINR in dB.
//! Actions pack association bits over a gNB's candidate users and, for
//! learners, the number of beams.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result, SimRng};

pub const N_STATES: usize = 2;

/// Largest candidate set an action code can address.
pub const MAX_CANDIDATES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AgentState {
    S0,
    S1,
}

impl AgentState {
    pub fn index(self) -> usize {
        match self {
            AgentState::S0 => 0,
            AgentState::S1 => 1,
        }
    }
}

/// `s0` iff the average SINR reaches the threshold (inclusive).
pub fn observe_state(avg_sinr_db: f64, threshold_db: f64) -> AgentState {
    if avg_sinr_db >= threshold_db {
        AgentState::S0
    } else {
        AgentState::S1
    }
}

/// Mean of per-UE SINRs in dB; `-inf` when nobody is served.
pub fn avg_sinr_db(per_ue_sinr_db: &[f64]) -> f64 {
    if per_ue_sinr_db.is_empty() {
        return f64::NEG_INFINITY;
    }
    per_ue_sinr_db.iter().sum::<f64>() / per_ue_sinr_db.len() as f64
}

/// Sigmoid reward centered at half the threshold. `-inf` maps to 0.
pub fn reward(avg_sinr_db: f64, threshold_db: f64) -> f64 {
    1.0 / (1.0 + (-0.5 * (avg_sinr_db - 0.5 * threshold_db)).exp())
}

/// Shape of an agent's action space.
///
/// `k_max = None` is an expert action set (association bits only).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSet {
    pub n_candidates: usize,
    pub k_max: Option<usize>,
}

/// One decoded action: bit `i` of `association` claims candidate `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ActionCode {
    pub association: u32,
    pub beams: Option<usize>,
}

impl ActionCode {
    pub fn claims(&self, candidate: usize) -> bool {
        self.association >> candidate & 1 == 1
    }

    pub fn n_associated(&self) -> usize {
        self.association.count_ones() as usize
    }
}

impl ActionSet {
    pub fn expert(n_candidates: usize) -> Result<Self> {
        Self::checked(n_candidates, None)
    }

    pub fn learner(n_candidates: usize, k_max: usize) -> Result<Self> {
        if k_max == 0 {
            return Err(Error::config("rl.k_max", "must be at least 1"));
        }
        Self::checked(n_candidates, Some(k_max))
    }

    fn checked(n_candidates: usize, k_max: Option<usize>) -> Result<Self> {
        if n_candidates > MAX_CANDIDATES {
            return Err(Error::domain(format!(
                "{n_candidates} candidates exceed the {MAX_CANDIDATES}-bit action code"
            )));
        }
        Ok(ActionSet {
            n_candidates,
            k_max,
        })
    }

    fn n_associations(&self) -> usize {
        1 << self.n_candidates
    }

    pub fn n_actions(&self) -> usize {
        self.n_associations() * self.k_max.unwrap_or(1)
    }

    /// Mixed-radix index with the beam count as the fastest digit.
    pub fn encode(&self, code: &ActionCode) -> Result<usize> {
        if code.association as usize >= self.n_associations() {
            return Err(Error::domain("association bits beyond the candidate set"));
        }
        match (self.k_max, code.beams) {
            (None, None) => Ok(code.association as usize),
            (Some(k_max), Some(k)) if (1..=k_max).contains(&k) => {
                Ok(code.association as usize * k_max + (k - 1))
            }
            _ => Err(Error::domain("beam count does not fit the action set")),
        }
    }

    pub fn decode(&self, index: usize) -> Result<ActionCode> {
        if index >= self.n_actions() {
            return Err(Error::domain(format!("action {index} out of range")));
        }
        Ok(match self.k_max {
            None => ActionCode {
                association: index as u32,
                beams: None,
            },
            Some(k_max) => ActionCode {
                association: (index / k_max) as u32,
                beams: Some(index % k_max + 1),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
    visits: Vec<u64>,
}

impl QTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        QTable {
            n_states,
            n_actions,
            values: vec![0.0; n_states * n_actions],
            visits: vec![0; n_states * n_actions],
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn cell(&self, s: usize, a: usize) -> Result<usize> {
        if s >= self.n_states || a >= self.n_actions {
            return Err(Error::domain(format!(
                "({s}, {a}) outside a {}x{} table",
                self.n_states, self.n_actions
            )));
        }
        Ok(s * self.n_actions + a)
    }

    pub fn get(&self, s: usize, a: usize) -> Result<f64> {
        Ok(self.values[self.cell(s, a)?])
    }

    pub fn set(&mut self, s: usize, a: usize, v: f64) -> Result<()> {
        let c = self.cell(s, a)?;
        self.values[c] = v;
        Ok(())
    }

    pub fn visits(&self, s: usize, a: usize) -> Result<u64> {
        Ok(self.visits[self.cell(s, a)?])
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max_value(&self, s: usize) -> f64 {
        self.row(s)
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Apply `v -> v + c` to every cell.
    pub fn shifted(&self, c: f64) -> QTable {
        QTable {
            values: self.values.iter().map(|v| v + c).collect(),
            ..self.clone()
        }
    }

    /// One temporal-difference step on cell `(s, a)`.
    pub fn q_update(
        &mut self,
        s: usize,
        a: usize,
        r: f64,
        s_next: usize,
        alpha: f64,
        gamma: f64,
    ) -> Result<()> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::domain(format!(
                "learning rate {alpha} outside [0, 1]"
            )));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::domain(format!("discount {gamma} outside [0, 1)")));
        }
        let c = self.cell(s, a)?;
        self.cell(s_next, 0)?;
        let target = r + gamma * self.max_value(s_next);
        self.values[c] += alpha * (target - self.values[c]);
        self.visits[c] += 1;
        Ok(())
    }

    /// SHA-256 over the value bits, row-major.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.n_states as u64).to_le_bytes());
        h.update((self.n_actions as u64).to_le_bytes());
        for v in &self.values {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize().into()
    }

    fn check(&self) -> Result<()> {
        let cells = self.n_states * self.n_actions;
        if self.values.len() != cells || self.visits.len() != cells {
            return Err(Error::Format {
                what: "Q-table",
                reason: format!("expected {cells} cells"),
            });
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format {
                what: "Q-table",
                reason: "non-finite value".into(),
            });
        }
        Ok(())
    }
}

/// Lowest index among the maxima of `row`.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Epsilon-greedy choice over a row of action values.
///
/// Exactly one uniform draw decides exploration and, when exploring, one
/// more picks the action, so twin agents with equal rows consume their
/// generators identically.
pub fn select_action<R: Rng + ?Sized>(row: &[f64], epsilon: f64, rng: &mut R) -> usize {
    if rng.random::<f64>() < epsilon {
        rng.random_range(0..row.len())
    } else {
        argmax(row)
    }
}

/// Versioned on-disk form of a Q-table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTableSnapshot {
    pub format: String,
    pub version: u32,
    pub n_states: usize,
    pub n_actions: usize,
    pub descriptor: ActionSet,
    pub values: Vec<f64>,
    pub visits: Vec<u64>,
}

pub const SNAPSHOT_FORMAT: &str = "tqlsim-qtable";
pub const SNAPSHOT_VERSION: u32 = 1;

impl QTableSnapshot {
    pub fn capture(table: &QTable, descriptor: ActionSet) -> Self {
        QTableSnapshot {
            format: SNAPSHOT_FORMAT.into(),
            version: SNAPSHOT_VERSION,
            n_states: table.n_states,
            n_actions: table.n_actions,
            descriptor,
            values: table.values.clone(),
            visits: table.visits.clone(),
        }
    }

    pub fn restore(self) -> Result<(QTable, ActionSet)> {
        if self.format != SNAPSHOT_FORMAT || self.version != SNAPSHOT_VERSION {
            return Err(Error::Format {
                what: "Q-table snapshot",
                reason: format!("unsupported {} v{}", self.format, self.version),
            });
        }
        if self.descriptor.n_actions() != self.n_actions || self.n_states != N_STATES {
            return Err(Error::Format {
                what: "Q-table snapshot",
                reason: "dimensions disagree with the action-set descriptor".into(),
            });
        }
        let table = QTable {
            n_states: self.n_states,
            n_actions: self.n_actions,
            values: self.values,
            visits: self.visits,
        };
        table.check()?;
        Ok((table, self.descriptor))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("snapshot serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format {
            what: "Q-table snapshot",
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_json())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Hyperparameters of the tabular learners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlParams {
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub threshold_db: f64,
    pub k_max: usize,
}

impl Default for RlParams {
    fn default() -> Self {
        RlParams {
            alpha: 0.5,
            gamma: 0.9,
            epsilon: 0.05,
            threshold_db: 20.0,
            k_max: 3,
        }
    }
}

/// Anything the TTI loop can drive as a learning gNB.
pub trait Agent: Send {
    fn actions(&self) -> &ActionSet;

    /// Choose an action index for `state`.
    fn select(&mut self, state: AgentState, epsilon: f64, rng: &mut SimRng) -> usize;

    /// Learn from the transition `(s, a, r, s_next)`.
    fn learn(
        &mut self,
        s: AgentState,
        a: usize,
        r: f64,
        s_next: AgentState,
        params: &RlParams,
    ) -> Result<()>;

    /// The table this agent updates.
    fn table(&self) -> &QTable;
}

/// Plain Q-learning agent.
#[derive(Debug, Clone)]
pub struct QAgent {
    table: QTable,
    actions: ActionSet,
}

impl QAgent {
    pub fn new(actions: ActionSet) -> Self {
        QAgent {
            table: QTable::zeros(N_STATES, actions.n_actions()),
            actions,
        }
    }
}

impl Agent for QAgent {
    fn actions(&self) -> &ActionSet {
        &self.actions
    }

    fn select(&mut self, state: AgentState, epsilon: f64, rng: &mut SimRng) -> usize {
        select_action(self.table.row(state.index()), epsilon, rng)
    }

    fn learn(
        &mut self,
        s: AgentState,
        a: usize,
        r: f64,
        s_next: AgentState,
        p: &RlParams,
    ) -> Result<()> {
        self.table
            .q_update(s.index(), a, r, s_next.index(), p.alpha, p.gamma)
    }

    fn table(&self) -> &QTable {
        &self.table
    }
}
