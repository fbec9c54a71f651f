//! Multiply-accumulate bookkeeping.
//!
//! The counter is the ground truth the analytical accountant is checked
//! against: every `matmul` charges exactly `rows * inner * cols` MACs to the
//! active scope. Norms, softmax, and embedding lookups are never charged.

use serde::{Deserialize, Serialize};

/// Labeled cost scopes. `Other` collects output-head and miscellaneous
/// matmuls that the per-layer formulas deliberately exclude.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scope {
    AttentionProj,
    AttentionScore,
    Ffn,
    Other,
}

impl Scope {
    pub const ALL: [Scope; 4] = [
        Scope::AttentionProj,
        Scope::AttentionScore,
        Scope::Ffn,
        Scope::Other,
    ];

    fn index(self) -> usize {
        match self {
            Scope::AttentionProj => 0,
            Scope::AttentionScore => 1,
            Scope::Ffn => 2,
            Scope::Other => 3,
        }
    }
}

/// Cumulative MAC counts per scope. Counts only grow within a run; `reset`
/// is for reuse between runs.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MacCounter {
    macs: [u64; 4],
    #[serde(skip)]
    active: usize,
}

impl MacCounter {
    pub fn new() -> Self {
        MacCounter {
            macs: [0; 4],
            active: Scope::Other.index(),
        }
    }

    /// Select the scope subsequent MACs are charged to.
    pub fn enter(&mut self, scope: Scope) {
        self.active = scope.index();
    }

    pub(crate) fn add(&mut self, delta: u64) {
        self.macs[self.active] += delta;
    }

    pub fn scope_total(&self, scope: Scope) -> u64 {
        self.macs[scope.index()]
    }

    /// Total across every scope.
    pub fn total(&self) -> u64 {
        self.macs.iter().sum()
    }

    /// Attention + FFN scopes only; the slice the analytical formulas cover.
    pub fn modeled_total(&self) -> u64 {
        self.macs[0] + self.macs[1] + self.macs[2]
    }

    pub fn reset(&mut self) {
        self.macs = [0; 4];
        self.active = Scope::Other.index();
    }
}
