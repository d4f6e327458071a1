//! Transfer via inter-task mapping from an expert Q-table to a learner.
//!
//! A learner action is classified by the interference it causes, each class
//! maps to one representative expert action, and the expert value of that
//! action is added to the learner's local value. Only the local table learns.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::rl::{
    select_action, ActionCode, ActionSet, Agent, AgentState, QTable, QTableSnapshot, RlParams,
};
use crate::{Error, Result, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InterferenceClass {
    IntraOnly,
    InterOnly,
    Both,
}

/// Interference class of a learner action covering `n_associated` users.
///
/// One beam means pure NOMA sharing; at least one beam per user means pure
/// inter-beam interference; anything in between mixes both.
pub fn classify_interference(action: &ActionCode, n_associated: usize) -> InterferenceClass {
    let k = action.beams.unwrap_or(1);
    if k <= 1 {
        InterferenceClass::IntraOnly
    } else if k >= n_associated {
        InterferenceClass::InterOnly
    } else {
        InterferenceClass::Both
    }
}

/// Representative expert action index for each interference class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionMapping {
    pub intra_only: usize,
    pub inter_only: usize,
    pub both: usize,
}

impl ActionMapping {
    /// All candidates for intra-cell sharing; the lower half for the rest.
    pub fn half_split(expert: &ActionSet) -> Result<Self> {
        if expert.k_max.is_some() {
            return Err(Error::domain("mapping targets must be expert action sets"));
        }
        let n = expert.n_candidates;
        let all = ActionCode {
            association: (1u32 << n) - 1,
            beams: None,
        };
        let half = ActionCode {
            association: (1u32 << (n / 2)) - 1,
            beams: None,
        };
        Ok(ActionMapping {
            intra_only: expert.encode(&all)?,
            inter_only: expert.encode(&half)?,
            both: expert.encode(&half)?,
        })
    }

    pub fn representative(&self, class: InterferenceClass) -> usize {
        match class {
            InterferenceClass::IntraOnly => self.intra_only,
            InterferenceClass::InterOnly => self.inter_only,
            InterferenceClass::Both => self.both,
        }
    }
}

/// Frozen expert knowledge handed to learners.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferBundle {
    pub table: QTable,
    pub descriptor: ActionSet,
    pub mapping: ActionMapping,
    /// Whether expert training met its convergence test.
    pub converged: bool,
}

pub const BUNDLE_FORMAT: &str = "tqlsim-bundle";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BundleFile {
    format: String,
    version: u32,
    converged: bool,
    /// Present and true when training ran out of budget.
    #[serde(default)]
    warning_not_converged: bool,
    mapping: ActionMapping,
    expert: QTableSnapshot,
}

impl TransferBundle {
    pub fn new(table: QTable, descriptor: ActionSet, converged: bool) -> Result<Self> {
        let mapping = ActionMapping::half_split(&descriptor)?;
        let bundle = TransferBundle {
            table,
            descriptor,
            mapping,
            converged,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::Format {
            what: "transfer bundle",
            reason,
        };
        if self.descriptor.k_max.is_some() {
            return Err(bad("expert descriptor carries a beam count".into()));
        }
        if self.table.n_actions() != self.descriptor.n_actions() {
            return Err(bad(format!(
                "table has {} actions, descriptor {}",
                self.table.n_actions(),
                self.descriptor.n_actions()
            )));
        }
        let m = self.mapping;
        for a in [m.intra_only, m.inter_only, m.both] {
            if a >= self.descriptor.n_actions() {
                return Err(bad(format!("representative {a} is not an expert action")));
            }
        }
        Ok(())
    }

    /// Expert action standing in for a learner action.
    pub fn map_action(&self, action: &ActionCode) -> Result<ActionCode> {
        let class = classify_interference(action, action.n_associated());
        self.descriptor.decode(self.mapping.representative(class))
    }

    /// Imported value `Q_t(s, a)` of a learner action.
    pub fn transferred(&self, s: AgentState, action: &ActionCode) -> Result<f64> {
        let class = classify_interference(action, action.n_associated());
        self.table
            .get(s.index(), self.mapping.representative(class))
    }

    pub fn to_json(&self) -> String {
        let file = BundleFile {
            format: BUNDLE_FORMAT.into(),
            version: BUNDLE_VERSION,
            converged: self.converged,
            warning_not_converged: !self.converged,
            mapping: self.mapping,
            expert: QTableSnapshot::capture(&self.table, self.descriptor),
        };
        serde_json::to_string_pretty(&file).expect("bundle serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: BundleFile = serde_json::from_str(s).map_err(|e| Error::Format {
            what: "transfer bundle",
            reason: e.to_string(),
        })?;
        if file.format != BUNDLE_FORMAT || file.version != BUNDLE_VERSION {
            return Err(Error::Format {
                what: "transfer bundle",
                reason: format!("unsupported {} v{}", file.format, file.version),
            });
        }
        let (table, descriptor) = file.expert.restore()?;
        let bundle = TransferBundle {
            table,
            descriptor,
            mapping: file.mapping,
            converged: file.converged,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_json())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingBundle(path.to_path_buf()),
            _ => e.into(),
        })?;
        Self::from_json(&text)
    }
}

/// Learner agent selecting on `Q_l + Q_t` and updating `Q_l` only.
///
/// Without a bundle it behaves exactly like [`crate::rl::QAgent`].
#[derive(Debug, Clone)]
pub struct TqlAgent {
    local: QTable,
    actions: ActionSet,
    bundle: Option<Arc<TransferBundle>>,
    /// Expert representative of every learner action.
    mapped: Vec<usize>,
    scratch: Vec<f64>,
}

impl TqlAgent {
    pub fn new(actions: ActionSet, bundle: Option<Arc<TransferBundle>>) -> Result<Self> {
        let mapped = match &bundle {
            Some(b) => (0..actions.n_actions())
                .map(|a| {
                    let code = actions.decode(a)?;
                    let class = classify_interference(&code, code.n_associated());
                    Ok(b.mapping.representative(class))
                })
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        Ok(TqlAgent {
            local: QTable::zeros(crate::rl::N_STATES, actions.n_actions()),
            actions,
            bundle,
            mapped,
            scratch: vec![0.0; actions.n_actions()],
        })
    }

    pub fn bundle(&self) -> Option<&TransferBundle> {
        self.bundle.as_deref()
    }

    /// Combined value `Q_l(s, a) + Q_t(s, a)`.
    pub fn combined_q(&self, s: AgentState, a: usize) -> Result<f64> {
        let local = self.local.get(s.index(), a)?;
        Ok(match &self.bundle {
            Some(b) => local + b.table.get(s.index(), self.mapped[a])?,
            None => local,
        })
    }

    /// Combined values of every action in state `s`.
    pub fn combined_row(&mut self, s: AgentState) -> &[f64] {
        let local = self.local.row(s.index());
        match &self.bundle {
            Some(b) => {
                let expert = b.table.row(s.index());
                for ((out, l), m) in self.scratch.iter_mut().zip(local).zip(&self.mapped) {
                    *out = l + expert[*m];
                }
            }
            None => self.scratch.copy_from_slice(local),
        }
        &self.scratch
    }

    /// Local temporal-difference step.
    pub fn tql_step(
        &mut self,
        s: AgentState,
        a: usize,
        r: f64,
        s_next: AgentState,
        alpha: f64,
        gamma: f64,
    ) -> Result<()> {
        self.local
            .q_update(s.index(), a, r, s_next.index(), alpha, gamma)
    }
}

impl Agent for TqlAgent {
    fn actions(&self) -> &ActionSet {
        &self.actions
    }

    fn select(&mut self, state: AgentState, epsilon: f64, rng: &mut SimRng) -> usize {
        let row = self.combined_row(state);
        select_action(row, epsilon, rng)
    }

    fn learn(
        &mut self,
        s: AgentState,
        a: usize,
        r: f64,
        s_next: AgentState,
        p: &RlParams,
    ) -> Result<()> {
        self.tql_step(s, a, r, s_next, p.alpha, p.gamma)
    }

    fn table(&self) -> &QTable {
        &self.local
    }
}
