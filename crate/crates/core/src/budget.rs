//! Evaluation budget accounting.
//!
//! Every call to the binary reward oracle costs one unit. Trainers share a
//! single [`BudgetLedger`] so that comparisons between optimizers are matched
//! on the number of oracle calls, not on wall time or iteration counts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum BudgetError {
    #[error("budget exhausted: requested {requested}, remaining {remaining} of {limit}")]
    Exhausted {
        requested: u64,
        remaining: u64,
        limit: u64,
    },
}

/// Hard cap on reward-oracle calls. `consumed <= limit` always holds; a charge
/// that would overdraw fails without consuming anything.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetLedger {
    limit: u64,
    consumed: u64,
}

impl BudgetLedger {
    pub fn new(limit: u64) -> Self {
        BudgetLedger { limit, consumed: 0 }
    }

    pub fn limit(&self) -> u64 {
        self.limit
    }

    pub fn consumed(&self) -> u64 {
        self.consumed
    }

    pub fn remaining(&self) -> u64 {
        self.limit - self.consumed
    }

    /// Charge `n` oracle calls, atomically.
    pub fn charge(&mut self, n: u64) -> Result<(), BudgetError> {
        let remaining = self.remaining();
        if n > remaining {
            return Err(BudgetError::Exhausted {
                requested: n,
                remaining,
                limit: self.limit,
            });
        }
        self.consumed += n;
        Ok(())
    }
}
