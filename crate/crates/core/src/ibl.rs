//! Instance-based memory: similarity, activation, retrieval, and blending.
//!
//! An instance's activation combines a power-law recency/frequency term, a
//! weighted partial-matching penalty against the query context, and optional
//! logistic noise:
//!
//! ```text
//! A_i = ln(sum_j (now - t_ij)^-d) + mu * sum_k w_k * (Sim(s_ik, q_k) - 1) + sigma * xi
//! P_i = exp(A_i / tau) / sum_j exp(A_j / tau)
//! V   = sum_i P_i * u_i
//! ```

use std::collections::HashMap;
use std::str::FromStr;

use rand::distr::Open01;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lags that differ by this many weeks or more are maximally dissimilar.
pub const DEFAULT_LAG_CAP: u32 = 13;
pub const DEFAULT_DECAY: f64 = 0.5;
pub const DEFAULT_MISMATCH: f64 = 1.0;
/// Temperature used when activation noise is disabled.
pub const TEMPERATURE_FLOOR: f64 = 0.2;

/// The two context attributes an instance is matched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Attribute {
    PrevEngagement,
    InterventionLag,
}

impl FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "engagement" | "prev_engagement" => Ok(Attribute::PrevEngagement),
            "lag" | "intervention_lag" => Ok(Attribute::InterventionLag),
            other => Err(Error::config(format!("unknown attribute kind `{other}`"))),
        }
    }
}

/// Linear, bounded similarity. Engagement uses `1 - |a - b|`; lag uses
/// `1 - min(|a - b|, cap) / cap`.
pub fn similarity(kind: Attribute, a: f64, b: f64, lag_cap: u32) -> Result<f64> {
    match kind {
        Attribute::PrevEngagement => {
            for v in [a, b] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::config(format!("engagement {v} outside [0, 1]")));
                }
            }
            Ok(1.0 - (a - b).abs())
        }
        Attribute::InterventionLag => {
            for v in [a, b] {
                if !(v >= 0.0 && v.fract() == 0.0) {
                    return Err(Error::config(format!("lag {v} is not a non-negative integer")));
                }
            }
            if lag_cap == 0 {
                return Err(Error::config("lag similarity cap must be at least 1"));
            }
            let cap = f64::from(lag_cap);
            Ok(1.0 - (a - b).abs().min(cap) / cap)
        }
    }
}

#[inline]
fn engagement_similarity(a: f64, b: f64) -> f64 {
    1.0 - (a - b).abs()
}

#[inline]
fn lag_similarity(a: u32, b: u32, cap: u32) -> f64 {
    let cap_f = f64::from(cap);
    1.0 - f64::from(a.abs_diff(b).min(cap)) / cap_f
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Context {
    /// Last week's listening fraction.
    pub prev_engagement: f64,
    /// Weeks since the last intervention; enrollment counts as one.
    pub intervention_lag: u32,
}

impl Context {
    pub fn new(prev_engagement: f64, intervention_lag: u32) -> Result<Self> {
        if !(0.0..=1.0).contains(&prev_engagement) {
            return Err(Error::config(format!(
                "previous engagement {prev_engagement} outside [0, 1]"
            )));
        }
        Ok(Self {
            prev_engagement,
            intervention_lag,
        })
    }
}

/// Per-attribute similarity weights; the individually fitted parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightProfile {
    pub w_prev_engagement: f64,
    pub w_intervention_lag: f64,
}

impl WeightProfile {
    pub const fn new(w_prev_engagement: f64, w_intervention_lag: f64) -> Self {
        Self {
            w_prev_engagement,
            w_intervention_lag,
        }
    }

    pub fn as_point(&self) -> [f64; 2] {
        [self.w_prev_engagement, self.w_intervention_lag]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IblParams {
    pub decay: f64,
    pub mismatch: f64,
    pub noise: f64,
    pub temperature: f64,
    pub weights: WeightProfile,
    pub lag_cap: u32,
}

impl Default for IblParams {
    fn default() -> Self {
        Self {
            decay: DEFAULT_DECAY,
            mismatch: DEFAULT_MISMATCH,
            noise: 0.0,
            temperature: default_temperature(0.0),
            weights: WeightProfile::default(),
            lag_cap: DEFAULT_LAG_CAP,
        }
    }
}

/// `sigma * sqrt(2)`, never below [`TEMPERATURE_FLOOR`].
pub fn default_temperature(noise: f64) -> f64 {
    (noise * std::f64::consts::SQRT_2).max(TEMPERATURE_FLOOR)
}

impl IblParams {
    /// Defaults with the given noise scale and the matching temperature.
    pub fn with_noise(noise: f64) -> Self {
        Self {
            noise,
            temperature: default_temperature(noise),
            ..Self::default()
        }
    }

    pub fn with_weights(mut self, weights: WeightProfile) -> Self {
        self.weights = weights;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.decay, self.mismatch, self.noise, self.temperature]
            .iter()
            .chain(&[self.weights.w_prev_engagement, self.weights.w_intervention_lag])
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::config("IBL parameters must be finite"));
        }
        if self.decay <= 0.0 {
            return Err(Error::config("decay must be > 0"));
        }
        if self.mismatch < 0.0 || self.noise < 0.0 {
            return Err(Error::config("mismatch scale and noise must be >= 0"));
        }
        if self.temperature <= 0.0 {
            return Err(Error::config("temperature must be > 0"));
        }
        if self.weights.w_prev_engagement < 0.0 || self.weights.w_intervention_lag < 0.0 {
            return Err(Error::config("attribute weights must be >= 0"));
        }
        if self.lag_cap == 0 {
            return Err(Error::config("lag similarity cap must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub context: Context,
    pub utility: f64,
    /// Strictly ascending timestamps at which this exact instance was observed.
    pub occurrences: Vec<u32>,
}

/// `ln(sum_j (now - t_j)^-d)`. Every occurrence must precede `now`.
pub fn base_level(occurrences: &[u32], now: u32, decay: f64) -> Result<f64> {
    if occurrences.is_empty() {
        return Err(Error::EmptyMemory);
    }
    let mut sum = 0.0;
    for &t in occurrences {
        if t >= now {
            return Err(Error::TemporalOrder(format!(
                "occurrence at {t} is not before evaluation time {now}"
            )));
        }
        sum += f64::from(now - t).powf(-decay);
    }
    Ok(sum.ln())
}

/// Boltzmann softmax over activations, shifted by the maximum.
pub fn retrieval_probabilities(activations: &[f64], tau: f64) -> Result<Vec<f64>> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::config(format!("temperature must be > 0, got {tau}")));
    }
    if activations.is_empty() {
        return Err(Error::EmptyMemory);
    }
    let max = activations
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = activations
        .iter()
        .map(|a| ((a - max) / tau).exp())
        .collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    Ok(out)
}

type InstanceKey = (u64, u32, u64);

fn bits(v: f64) -> u64 {
    // -0.0 and 0.0 are the same engagement level
    if v == 0.0 {
        0.0f64.to_bits()
    } else {
        v.to_bits()
    }
}

/// One individual's declarative memory plus the parameters used to read it.
#[derive(Clone, Debug)]
pub struct MemoryStore {
    instances: Vec<Instance>,
    params: IblParams,
    clock: u32,
    index: HashMap<InstanceKey, usize>,
}

impl MemoryStore {
    pub fn new(params: IblParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            instances: Vec::new(),
            params,
            clock: 0,
            index: HashMap::new(),
        })
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn params(&self) -> &IblParams {
        &self.params
    }

    pub fn clock(&self) -> u32 {
        self.clock
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    /// Swaps the attribute weights without touching memory contents.
    pub fn set_weights(&mut self, weights: WeightProfile) -> Result<()> {
        let params = self.params.with_weights(weights);
        params.validate()?;
        self.params = params;
        Ok(())
    }

    /// Stores an observation at time `t`. An identical (context, utility)
    /// pair gains a new occurrence instead of a second instance.
    pub fn record(&mut self, context: Context, utility: f64, t: u32) -> Result<()> {
        if !(0.0..=1.0).contains(&utility) {
            return Err(Error::config(format!("utility {utility} outside [0, 1]")));
        }
        Context::new(context.prev_engagement, context.intervention_lag)?;
        if t < self.clock {
            return Err(Error::TemporalOrder(format!(
                "cannot record at {t}: store clock is already {}",
                self.clock
            )));
        }
        let key = (
            bits(context.prev_engagement),
            context.intervention_lag,
            bits(utility),
        );
        match self.index.get(&key) {
            Some(&i) => {
                let inst = &mut self.instances[i];
                let latest = *inst.occurrences.last().expect("occurrences are nonempty");
                if t <= latest {
                    return Err(Error::TemporalOrder(format!(
                        "instance already observed at {latest}, cannot append {t}"
                    )));
                }
                inst.occurrences.push(t);
            }
            None => {
                self.index.insert(key, self.instances.len());
                self.instances.push(Instance {
                    context,
                    utility,
                    occurrences: vec![t],
                });
            }
        }
        self.clock = t;
        Ok(())
    }

    fn mismatch_penalty(&self, inst: &Instance, query: &Context) -> f64 {
        let w = &self.params.weights;
        let s_eng = engagement_similarity(inst.context.prev_engagement, query.prev_engagement);
        let s_lag = lag_similarity(
            inst.context.intervention_lag,
            query.intervention_lag,
            self.params.lag_cap,
        );
        self.params.mismatch
            * (w.w_prev_engagement * (s_eng - 1.0) + w.w_intervention_lag * (s_lag - 1.0))
    }

    fn check_query(&self, query: &Context, now: u32) -> Result<()> {
        if self.instances.is_empty() {
            return Err(Error::EmptyMemory);
        }
        if now <= self.clock {
            return Err(Error::TemporalOrder(format!(
                "evaluation time {now} must follow the latest occurrence {}",
                self.clock
            )));
        }
        Context::new(query.prev_engagement, query.intervention_lag).map(|_| ())
    }

    fn noise_draw(&self, rng: &mut Option<&mut dyn RngCore>) -> Result<f64> {
        if self.params.noise == 0.0 {
            return Ok(0.0);
        }
        let rng = rng
            .as_deref_mut()
            .ok_or_else(|| Error::config("activation noise is enabled but no generator was supplied"))?;
        let u: f64 = rng.sample(Open01);
        Ok(self.params.noise * (u / (1.0 - u)).ln())
    }

    /// Activation of the instance at `index` for `query` evaluated at `now`.
    pub fn activation(
        &self,
        index: usize,
        query: &Context,
        now: u32,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<f64> {
        let inst = self
            .instances
            .get(index)
            .ok_or_else(|| Error::usage(format!("no instance at index {index}")))?;
        let base = base_level(&inst.occurrences, now, self.params.decay)?;
        Ok(base + self.mismatch_penalty(inst, query) + self.noise_draw(&mut rng)?)
    }

    /// Activations of every instance, one noise draw per instance.
    pub fn activations(
        &self,
        query: &Context,
        now: u32,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Vec<f64>> {
        self.check_query(query, now)?;
        self.instances
            .iter()
            .map(|inst| {
                let base = base_level(&inst.occurrences, now, self.params.decay)?;
                Ok(base + self.mismatch_penalty(inst, query) + self.noise_draw(&mut rng)?)
            })
            .collect()
    }

    /// Blended value with an explicit noise generator (required when noise > 0).
    pub fn blend(&self, query: &Context, now: u32, rng: Option<&mut dyn RngCore>) -> Result<f64> {
        let acts = self.activations(query, now, rng)?;
        let probs = retrieval_probabilities(&acts, self.params.temperature)?;
        let (lo, hi) = self.utility_range();
        let v: f64 = probs
            .iter()
            .zip(&self.instances)
            .map(|(p, inst)| p * inst.utility)
            .sum();
        Ok(v.clamp(lo, hi))
    }

    /// Deterministic blended value; errors if the store was configured with noise.
    pub fn blended_value(&self, query: &Context, now: u32) -> Result<f64> {
        self.blend(query, now, None)
    }

    fn utility_range(&self) -> (f64, f64) {
        self.instances
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
                (lo.min(i.utility), hi.max(i.utility))
            })
    }
}
