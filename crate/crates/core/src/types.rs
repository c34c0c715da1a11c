use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One labeled comparison: under `context`, `winner` was preferred to `loser`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub pair_id: u64,
    pub context: Vec<f64>,
    pub winner: Vec<f64>,
    pub loser: Vec<f64>,
    /// Synthetic provenance: `Some(true)` when the label was deliberately
    /// swapped. Absent for pairs that did not come from the generator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flipped: Option<bool>,
}

impl PreferencePair {
    pub fn check(&self) -> Result<()> {
        if self.winner.len() != self.loser.len() {
            return Err(Error::ShapeMismatch(format!(
                "pair {}: winner has {} entries, loser {}",
                self.pair_id,
                self.winner.len(),
                self.loser.len()
            )));
        }
        Ok(())
    }

    pub fn is_flipped(&self) -> bool {
        self.flipped == Some(true)
    }

    /// The same comparison with the label reversed. The flag is untouched.
    pub fn swapped(&self) -> Self {
        Self {
            winner: self.loser.clone(),
            loser: self.winner.clone(),
            ..self.clone()
        }
    }
}

/// Periodic summary of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub step: u64,
    pub mean_loss: f64,
    pub mean_u: f64,
    pub mean_w: f64,
    pub mean_margin: f64,
    pub heldout_accuracy: Option<f64>,
}
