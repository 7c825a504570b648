//! Time-to-disengagement, the TARI index, and allocation policies.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecast::{forecast_iterated, ForecastQuery, Forecaster};
use crate::trajectory::Step;

pub const DEFAULT_THRESHOLD: f64 = 0.25;
pub const DEFAULT_HORIZON: usize = 14;

/// 1-based index of the first forecast below `threshold`, or `len + 1`.
pub fn first_crossing(forecast: &[f64], threshold: f64) -> u32 {
    forecast
        .iter()
        .position(|&e| e < threshold)
        .map_or(forecast.len() + 1, |i| i + 1) as u32
}

/// Weeks until predicted disengagement when intervening now (or not) and
/// never again. Censored at `horizon + 1`.
pub fn time_to_disengagement<F: Forecaster + ?Sized>(
    model: &F,
    history: &[Step],
    intervene_now: bool,
    horizon: usize,
    threshold: f64,
) -> Result<u32> {
    if horizon == 0 {
        return Err(Error::config("TARI horizon must be at least 1"));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config(format!("threshold {threshold} must be in (0, 1)")));
    }
    let query = ForecastQuery::single_intervention(history.to_vec(), intervene_now, horizon)?;
    let forecast = forecast_iterated(model, &query)?;
    Ok(first_crossing(&forecast, threshold))
}

pub fn tari_index(u: u32, v: u32) -> f64 {
    f64::from(u) / f64::from(v)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TariScore {
    pub beneficiary_id: String,
    /// Time to disengagement with an intervention now.
    pub u: u32,
    /// Time to disengagement without any intervention.
    pub v: u32,
    pub index: f64,
}

pub fn tari_score<F: Forecaster + ?Sized>(
    model: &F,
    beneficiary_id: &str,
    history: &[Step],
    horizon: usize,
    threshold: f64,
) -> Result<TariScore> {
    let u = time_to_disengagement(model, history, true, horizon, threshold)?;
    let v = time_to_disengagement(model, history, false, horizon, threshold)?;
    Ok(TariScore {
        beneficiary_id: beneficiary_id.to_owned(),
        u,
        v,
        index: tari_index(u, v),
    })
}

/// Scores every beneficiary in parallel with its own model.
pub fn score_cohort<F: Forecaster>(
    models: &[F],
    ids: &[String],
    histories: &[Vec<Step>],
    horizon: usize,
    threshold: f64,
) -> Result<Vec<TariScore>> {
    (0..ids.len())
        .into_par_iter()
        .map(|i| tari_score(&models[i], &ids[i], &histories[i], horizon, threshold))
        .collect()
}

/// Like [`score_cohort`] with one shared model.
pub fn score_cohort_shared<F: Forecaster>(
    model: &F,
    ids: &[String],
    histories: &[Vec<Step>],
    horizon: usize,
    threshold: f64,
) -> Result<Vec<TariScore>> {
    (0..ids.len())
        .into_par_iter()
        .map(|i| tari_score(model, &ids[i], &histories[i], horizon, threshold))
        .collect()
}

/// Positions (ascending) of the `min(k, n)` highest indices. Ties prefer the
/// larger `u`, then the lexicographically smaller id.
pub fn select_top_k(scores: &[TariScore], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (&scores[a], &scores[b]);
        sb.index
            .total_cmp(&sa.index)
            .then(sb.u.cmp(&sa.u))
            .then_with(|| sa.beneficiary_id.cmp(&sb.beneficiary_id))
    });
    order.truncate(k);
    order.sort_unstable();
    order
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    TariIbl,
    TariLstm,
    Random,
    RoundRobin,
    #[serde(rename = "none")]
    NoIntervention,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::TariIbl,
        PolicyKind::TariLstm,
        PolicyKind::Random,
        PolicyKind::RoundRobin,
        PolicyKind::NoIntervention,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PolicyKind::TariIbl => "tari_ibl",
            PolicyKind::TariLstm => "tari_lstm",
            PolicyKind::Random => "random",
            PolicyKind::RoundRobin => "round_robin",
            PolicyKind::NoIntervention => "none",
        }
    }

    pub fn is_tari(&self) -> bool {
        matches!(self, PolicyKind::TariIbl | PolicyKind::TariLstm)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown policy `{s}`")))
    }
}

/// State for the model-free policies.
#[derive(Clone, Debug)]
pub struct BaselinePolicy {
    kind: PolicyKind,
    /// Beneficiary positions in id order.
    order: Vec<usize>,
    cursor: usize,
}

impl BaselinePolicy {
    pub fn new(kind: PolicyKind, ids: &[String]) -> Result<Self> {
        if kind.is_tari() {
            return Err(Error::config(format!("`{kind}` is not a baseline policy")));
        }
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
        Ok(Self {
            kind,
            order,
            cursor: 0,
        })
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    /// Positions (ascending) selected this round.
    pub fn select<R: Rng + ?Sized>(&mut self, k: usize, rng: &mut R) -> Vec<usize> {
        let n = self.order.len();
        let k = k.min(n);
        let mut out = match self.kind {
            PolicyKind::NoIntervention => Vec::new(),
            PolicyKind::Random => rand::seq::index::sample(rng, n, k).into_vec(),
            PolicyKind::RoundRobin => {
                let picked = (0..k).map(|j| self.order[(self.cursor + j) % n]).collect();
                if n > 0 {
                    self.cursor = (self.cursor + k) % n;
                }
                picked
            }
            PolicyKind::TariIbl | PolicyKind::TariLstm => unreachable!("rejected in new"),
        };
        out.sort_unstable();
        out
    }
}

/// One-shot form of [`BaselinePolicy::select`].
pub fn baseline_select<R: Rng + ?Sized>(
    policy: &mut BaselinePolicy,
    k: usize,
    rng: &mut R,
) -> Vec<usize> {
    policy.select(k, rng)
}
