//! Per-beneficiary model tracing and attribute-weight grid search.
//!
//! A trajectory is replayed week by week into a fresh memory store. Each
//! week from 2 on is first predicted from the earlier weeks' instances, then
//! recorded. The squared errors are combined with recency weights
//! `q_t = exp(t/10) / sum_i exp(t_i/10)`, and the grid point with the
//! smallest weighted loss becomes the individual's weight profile.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ibl::{IblParams, MemoryStore, WeightProfile};
use crate::trajectory::{context_for_week, Trajectory};

pub const GRID_MAX: f64 = 5.0;
pub const GRID_STEP: f64 = 0.5;
/// Eleven values per axis.
pub const GRID_POINTS_PER_AXIS: usize = 11;

/// All weight profiles on the search grid, row-major over
/// (w_prev_engagement, w_intervention_lag).
pub fn weight_grid() -> Vec<WeightProfile> {
    let axis = |i: usize| i as f64 * GRID_STEP;
    (0..GRID_POINTS_PER_AXIS)
        .flat_map(|i| {
            (0..GRID_POINTS_PER_AXIS).map(move |j| WeightProfile::new(axis(i), axis(j)))
        })
        .collect()
}

/// Normalized recency weights for the given scored weeks.
pub fn recency_weights(weeks: &[usize]) -> Vec<f64> {
    let Some(&latest) = weeks.iter().max() else {
        return Vec::new();
    };
    // shifting by the latest week leaves the normalized weights unchanged
    let raw: Vec<f64> = weeks
        .iter()
        .map(|&t| ((t as f64 - latest as f64) / 10.0).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|q| q / total).collect()
}

fn check_train_weeks(traj: &Trajectory, train_weeks: usize) -> Result<()> {
    if traj.is_empty() {
        return Err(Error::Ingestion {
            row: 0,
            message: format!("trajectory `{}` is empty", traj.beneficiary_id),
        });
    }
    if train_weeks == 0 || train_weeks > traj.len() {
        return Err(Error::config(format!(
            "train_weeks {train_weeks} must be in 1..={} for `{}`",
            traj.len(),
            traj.beneficiary_id
        )));
    }
    Ok(())
}

/// Records weeks `1..=train_weeks` as instances and returns the store.
pub fn trace_trajectory(
    traj: &Trajectory,
    train_weeks: usize,
    params: &IblParams,
) -> Result<MemoryStore> {
    check_train_weeks(traj, train_weeks)?;
    let mut store = MemoryStore::new(*params)?;
    for week in 1..=train_weeks {
        let ctx = context_for_week(&traj.steps, week)?;
        store.record(ctx, traj.engagement(week), week as u32)?;
    }
    Ok(store)
}

/// One-step predictions made during a replay: `(week, predicted, observed)`
/// for every week from 2 through `train_weeks`.
pub fn replay_predictions(
    traj: &Trajectory,
    train_weeks: usize,
    params: &IblParams,
) -> Result<Vec<(usize, f64, f64)>> {
    check_train_weeks(traj, train_weeks)?;
    let mut store = MemoryStore::new(*params)?;
    let mut out = Vec::with_capacity(train_weeks.saturating_sub(1));
    for week in 1..=train_weeks {
        let ctx = context_for_week(&traj.steps, week)?;
        let observed = traj.engagement(week);
        if week >= 2 {
            let predicted = store.blended_value(&ctx, week as u32)?;
            out.push((week, predicted, observed));
        }
        store.record(ctx, observed, week as u32)?;
    }
    Ok(out)
}

/// Recency-weighted squared one-step error of the replay under `profile`.
pub fn weighted_loss(
    traj: &Trajectory,
    profile: WeightProfile,
    train_weeks: usize,
    params: &IblParams,
) -> Result<f64> {
    if train_weeks < 2 {
        return Err(Error::config("weighted loss needs at least 2 training weeks"));
    }
    let preds = replay_predictions(traj, train_weeks, &params.with_weights(profile))?;
    let weeks: Vec<usize> = preds.iter().map(|p| p.0).collect();
    let q = recency_weights(&weeks);
    Ok(preds
        .iter()
        .zip(q)
        .map(|(&(_, pred, obs), q)| q * (pred - obs).powi(2))
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitResult {
    pub beneficiary_id: String,
    pub best_profile: WeightProfile,
    pub best_loss: f64,
    /// Loss at every grid profile, in grid order.
    pub loss_surface: Vec<(WeightProfile, f64)>,
}

/// Exhaustive search over [`weight_grid`]. Ties go to the smaller
/// w_prev_engagement, then the smaller w_intervention_lag.
pub fn grid_search_weights(
    traj: &Trajectory,
    train_weeks: usize,
    params: &IblParams,
) -> Result<FitResult> {
    let loss_surface = weight_grid()
        .into_iter()
        .map(|w| weighted_loss(traj, w, train_weeks, params).map(|l| (w, l)))
        .collect::<Result<Vec<_>>>()?;
    // grid order is lexicographic, so the first strict minimum wins ties
    let (best_profile, best_loss) = loss_surface
        .iter()
        .copied()
        .fold(None::<(WeightProfile, f64)>, |best, (w, l)| match best {
            Some((_, bl)) if bl <= l => best,
            _ => Some((w, l)),
        })
        .expect("grid is nonempty");
    Ok(FitResult {
        beneficiary_id: traj.beneficiary_id.clone(),
        best_profile,
        best_loss,
        loss_surface,
    })
}

/// Fits every trajectory independently, in parallel; output order matches input.
pub fn fit_cohort(
    trajectories: &[Trajectory],
    train_weeks: usize,
    params: &IblParams,
) -> Result<Vec<FitResult>> {
    trajectories
        .par_iter()
        .map(|t| grid_search_weights(t, train_weeks, params))
        .collect()
}
