//! Forecaster contract and iterated multi-step forecasting.

use crate::error::{Error, Result};
use crate::ibl::{Context, MemoryStore};
use crate::trajectory::{context_for_week, Step};

/// A one-step engagement model.
///
/// `history` holds weeks `1..=t`; the intervention flag on week `t` is the
/// action taken that week. The prediction is for week `t + 1`.
pub trait Forecaster: Sync {
    fn predict_next(&self, history: &[Step]) -> Result<f64>;
}

impl<F: Forecaster + ?Sized> Forecaster for &F {
    fn predict_next(&self, history: &[Step]) -> Result<f64> {
        (**self).predict_next(history)
    }
}

/// A traced IBL memory used as a forecaster. The store is frozen; predicting
/// week `t + 1` evaluates activations at time `t + 1`.
#[derive(Clone, Debug)]
pub struct IblForecaster {
    store: MemoryStore,
}

impl IblForecaster {
    pub fn new(store: MemoryStore) -> Self {
        Self { store }
    }

    pub fn store(&self) -> &MemoryStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut MemoryStore {
        &mut self.store
    }

    /// Prediction from an explicit context at time `now`.
    pub fn predict_context(&self, ctx: &Context, now: u32) -> Result<f64> {
        if self.store.is_empty() {
            return Err(Error::usage("IBL forecaster has not been traced"));
        }
        Ok(self.store.blended_value(ctx, now)?.clamp(0.0, 1.0))
    }
}

impl Forecaster for IblForecaster {
    fn predict_next(&self, history: &[Step]) -> Result<f64> {
        let week = history.len() + 1;
        let ctx = context_for_week(history, week)?;
        self.predict_context(&ctx, week as u32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastQuery {
    /// Observed weeks up to the decision week, inclusive.
    pub history: Vec<Step>,
    /// `schedule[j]` is whether to intervene `j` weeks after the decision week.
    pub schedule: Vec<bool>,
}

impl ForecastQuery {
    pub fn new(history: Vec<Step>, schedule: Vec<bool>) -> Result<Self> {
        if history.is_empty() {
            return Err(Error::usage("forecast history is empty"));
        }
        if schedule.is_empty() {
            return Err(Error::usage("forecast horizon must be at least 1"));
        }
        Ok(Self { history, schedule })
    }

    /// Intervene now (or not) and never again, over `horizon` weeks.
    pub fn single_intervention(history: Vec<Step>, intervene_now: bool, horizon: usize) -> Result<Self> {
        let mut schedule = vec![false; horizon];
        if let Some(first) = schedule.first_mut() {
            *first = intervene_now;
        }
        Self::new(history, schedule)
    }

    pub fn horizon(&self) -> usize {
        self.schedule.len()
    }

    pub fn last_engagement(&self) -> f64 {
        self.history.last().map_or(0.0, |s| s.engagement)
    }
}

/// Feeds each prediction back as the next week's previous engagement.
pub fn forecast_iterated<F: Forecaster + ?Sized>(model: &F, query: &ForecastQuery) -> Result<Vec<f64>> {
    if query.schedule.is_empty() || query.history.is_empty() {
        return Err(Error::usage("forecast needs a nonempty history and horizon"));
    }
    let mut buf = Vec::with_capacity(query.history.len() + query.horizon());
    buf.extend_from_slice(&query.history);
    let mut out = Vec::with_capacity(query.horizon());
    for &act in &query.schedule {
        buf.last_mut().expect("nonempty").intervention = act;
        let e = model.predict_next(&buf)?.clamp(0.0, 1.0);
        out.push(e);
        buf.push(Step::new(e, false));
    }
    Ok(out)
}
