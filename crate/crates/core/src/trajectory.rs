//! Weekly engagement/intervention sequences and lag bookkeeping.
//!
//! Weeks are 1-based. Enrollment counts as an intervention at week 0, and an
//! intervention delivered in week `t` first shows up in the context of week
//! `t + 1` (lag 1).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ibl::Context;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub engagement: f64,
    pub intervention: bool,
}

impl Step {
    pub const fn new(engagement: f64, intervention: bool) -> Self {
        Self {
            engagement,
            intervention,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub beneficiary_id: String,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn new(beneficiary_id: impl Into<String>, steps: Vec<Step>) -> Result<Self> {
        let beneficiary_id = beneficiary_id.into();
        if steps.is_empty() {
            return Err(Error::Ingestion {
                row: 0,
                message: format!("trajectory `{beneficiary_id}` is empty"),
            });
        }
        if let Some(pos) = steps
            .iter()
            .position(|s| !(0.0..=1.0).contains(&s.engagement))
        {
            return Err(Error::Ingestion {
                row: 0,
                message: format!(
                    "trajectory `{beneficiary_id}` week {} engagement {} outside [0, 1]",
                    pos + 1,
                    steps[pos].engagement
                ),
            });
        }
        Ok(Self {
            beneficiary_id,
            steps,
        })
    }

    /// Builds a trajectory from engagement values and the weeks (1-based)
    /// in which an intervention was delivered.
    pub fn from_parts(
        beneficiary_id: impl Into<String>,
        engagement: &[f64],
        intervention_weeks: &[usize],
    ) -> Result<Self> {
        let steps = engagement
            .iter()
            .enumerate()
            .map(|(i, &e)| Step::new(e, intervention_weeks.contains(&(i + 1))))
            .collect();
        Self::new(beneficiary_id, steps)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Engagement at 1-based `week`.
    pub fn engagement(&self, week: usize) -> f64 {
        self.steps[week - 1].engagement
    }

    pub fn engagements(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.engagement).collect()
    }
}

/// Weeks since the most recent intervention strictly before `week`.
pub fn lag_at(steps: &[Step], week: usize) -> u32 {
    debug_assert!(week >= 1);
    let last = steps[..(week - 1).min(steps.len())]
        .iter()
        .rposition(|s| s.intervention)
        .map_or(0, |i| i + 1);
    (week - last) as u32
}

/// Context used to predict `week`: last week's engagement and the current lag.
/// `week` may be one past the end of `steps`. Week 1 uses its own engagement
/// as the previous value.
pub fn context_for_week(steps: &[Step], week: usize) -> Result<Context> {
    if week == 0 || week > steps.len() + 1 || steps.is_empty() {
        return Err(Error::usage(format!(
            "week {week} has no context in a history of {} steps",
            steps.len()
        )));
    }
    let prev = if week == 1 {
        steps[0].engagement
    } else {
        steps[week - 2].engagement
    };
    Context::new(prev, lag_at(steps, week))
}
