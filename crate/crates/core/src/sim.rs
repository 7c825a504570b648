//! Synthetic cohorts, counterfactual generation, and budgeted policy runs.
//!
//! Three behavioral archetypes are planted:
//!
//! - state-stable: `next = current + r * (level - current) + noise`, a random
//!   walk with weak reversion `r` toward the individual's own level
//! - transition-consistent: `next = sigmoid(logit(s) - g * (current - s)) + noise`,
//!   a logistic map through the setpoint `s` that overshoots for large gain `g`
//! - intervention-sensitive: `next = baseline + amplitude * exp(-lag / lambda) + noise`
//!
//! Noise is a zero-mean Gaussian truncated at two standard deviations, and
//! every value is clipped to `[0, 1]`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecast::{Forecaster, IblForecaster};
use crate::lstm::{lstm_train, make_windows, LstmConfig, LstmModel, TrainReport};
use crate::rng::{stream, tag};
use crate::tari::{score_cohort, score_cohort_shared, select_top_k, BaselinePolicy, PolicyKind, TariScore};
use crate::trajectory::{lag_at, Step, Trajectory};

/// Interventions in recorded data only happen in the first this-many weeks.
pub const EARLY_INTERVENTION_WEEKS: usize = 14;
pub const DEFAULT_NOISE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    StateStable,
    TransitionConsistent,
    InterventionSensitive,
}

impl Archetype {
    pub const ALL: [Archetype; 3] = [
        Archetype::StateStable,
        Archetype::TransitionConsistent,
        Archetype::InterventionSensitive,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Archetype::StateStable => "state_stable",
            Archetype::TransitionConsistent => "transition_consistent",
            Archetype::InterventionSensitive => "intervention_sensitive",
        }
    }
}

/// Hidden per-beneficiary dynamics. Fields unused by an archetype are zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchetypeLaw {
    pub archetype: Archetype,
    pub initial: f64,
    pub setpoint: f64,
    pub gain: f64,
    pub baseline: f64,
    pub amplitude: f64,
    pub decay: f64,
    pub noise: f64,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Zero-mean Gaussian draw rejected outside `±2 scale`.
pub fn truncated_noise<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> f64 {
    if scale <= 0.0 {
        return 0.0;
    }
    let normal = Normal::new(0.0, scale).expect("positive scale");
    loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 * scale {
            return x;
        }
    }
}

impl ArchetypeLaw {
    pub fn state_stable(initial: f64, noise: f64) -> Self {
        Self {
            archetype: Archetype::StateStable,
            initial,
            setpoint: 0.0,
            gain: 0.0,
            baseline: 0.0,
            amplitude: 0.0,
            decay: 0.0,
            noise,
        }
    }

    /// Pulls a state-stable walk back toward `initial` by `reversion` per week.
    pub fn with_reversion(mut self, reversion: f64) -> Self {
        self.gain = reversion;
        self
    }

    pub fn transition_consistent(initial: f64, setpoint: f64, gain: f64, noise: f64) -> Self {
        Self {
            archetype: Archetype::TransitionConsistent,
            initial,
            setpoint,
            gain,
            ..Self::state_stable(0.0, noise)
        }
    }

    pub fn intervention_sensitive(baseline: f64, amplitude: f64, decay: f64, noise: f64) -> Self {
        Self {
            archetype: Archetype::InterventionSensitive,
            baseline,
            amplitude,
            decay,
            ..Self::state_stable(0.0, noise)
        }
    }

    /// Noise-free next engagement given the current level and the lag that
    /// will hold in the next week.
    pub fn mean_next(&self, current: f64, lag_next: u32) -> f64 {
        let raw = match self.archetype {
            Archetype::StateStable => current + self.gain * (self.initial - current),
            Archetype::TransitionConsistent => {
                sigmoid(logit(self.setpoint) - self.gain * (current - self.setpoint))
            }
            Archetype::InterventionSensitive => {
                self.baseline + self.amplitude * (-f64::from(lag_next) / self.decay).exp()
            }
        };
        raw.clamp(0.0, 1.0)
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, current: f64, lag_next: u32, rng: &mut R) -> f64 {
        (self.mean_next(current, lag_next) + truncated_noise(self.noise, rng)).clamp(0.0, 1.0)
    }

    fn sample_first<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.archetype {
            // enrollment counts as an intervention, so week 1 sits at lag 1
            Archetype::InterventionSensitive => self.sample_next(0.0, 1, rng),
            _ => (self.initial + truncated_noise(self.noise, rng)).clamp(0.0, 1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mix {
    pub state_stable: f64,
    pub transition_consistent: f64,
    pub intervention_sensitive: f64,
}

impl Default for Mix {
    /// 82 / 66 / 62 out of 210.
    fn default() -> Self {
        Self {
            state_stable: 82.0 / 210.0,
            transition_consistent: 66.0 / 210.0,
            intervention_sensitive: 62.0 / 210.0,
        }
    }
}

impl Mix {
    fn as_array(&self) -> [f64; 3] {
        [
            self.state_stable,
            self.transition_consistent,
            self.intervention_sensitive,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.as_array();
        if a.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (a.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::config(format!(
                "archetype proportions {a:?} must be non-negative and sum to 1"
            )));
        }
        Ok(())
    }

    /// Largest-remainder apportionment of `n` beneficiaries.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let a = self.as_array();
        let mut counts = [0usize; 3];
        let mut rema = [(0.0, 0usize); 3];
        for i in 0..3 {
            let exact = a[i] * n as f64;
            counts[i] = exact.floor() as usize;
            rema[i] = (exact - exact.floor(), i);
        }
        let short = n - counts.iter().sum::<usize>();
        rema.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        for &(_, i) in rema.iter().take(short) {
            counts[i] += 1;
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortSpec {
    pub n: usize,
    pub weeks: usize,
    pub mix: Mix,
    pub noise: f64,
    /// Scales how far apart the archetypes' dynamics are, in `(0, 1]`.
    /// Above 0.5 the state-stable walk also reverts toward its initial
    /// level; see [`stable_reversion`].
    pub separation: f64,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            n: 210,
            weeks: 39,
            mix: Mix::default(),
            noise: DEFAULT_NOISE,
            separation: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub trajectories: Vec<Trajectory>,
    pub laws: Vec<ArchetypeLaw>,
}

impl Cohort {
    pub fn labels(&self) -> Vec<Archetype> {
        self.laws.iter().map(|l| l.archetype).collect()
    }

    pub fn ids(&self) -> Vec<String> {
        self.trajectories.iter().map(|t| t.beneficiary_id.clone()).collect()
    }
}

pub fn beneficiary_id(i: usize) -> String {
    format!("b{i:04}")
}

/// Zero up to separation 0.5, so default cohorts keep a pure random walk,
/// then rising linearly to 0.5 at full separation.
pub fn stable_reversion(separation: f64) -> f64 {
    (2.0 * separation - 1.0).max(0.0) * 0.5
}

fn sample_law<R: Rng + ?Sized>(kind: Archetype, spec: &CohortSpec, rng: &mut R) -> ArchetypeLaw {
    let s = spec.separation;
    match kind {
        Archetype::StateStable => ArchetypeLaw::state_stable(rng.random_range(0.35..0.9), spec.noise)
            .with_reversion(stable_reversion(s)),
        Archetype::TransitionConsistent => ArchetypeLaw::transition_consistent(
            rng.random_range(0.05..0.95),
            rng.random_range(0.4..0.6),
            3.0 + s * rng.random_range(0.0..4.0),
            spec.noise,
        ),
        Archetype::InterventionSensitive => ArchetypeLaw::intervention_sensitive(
            rng.random_range(0.02..0.15),
            0.2 + s * rng.random_range(0.8..1.2),
            rng.random_range(2.0..4.0),
            spec.noise,
        ),
    }
}

/// Simulates one recorded trajectory under `law` with the given intervention weeks.
pub fn simulate_law<R: Rng + ?Sized>(
    id: &str,
    law: &ArchetypeLaw,
    weeks: usize,
    intervention_weeks: &[usize],
    rng: &mut R,
) -> Result<Trajectory> {
    let mut steps: Vec<Step> = Vec::with_capacity(weeks);
    for week in 1..=weeks {
        let e = if week == 1 {
            law.sample_first(rng)
        } else {
            let lag = lag_at(&steps, week);
            law.sample_next(steps[week - 2].engagement, lag, rng)
        };
        steps.push(Step::new(e, intervention_weeks.contains(&week)));
    }
    Trajectory::new(id, steps)
}

/// Seeded synthetic cohort; every beneficiary receives 1 to 3 interventions
/// within the first 14 weeks and none after.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Cohort> {
    spec.mix.validate()?;
    if spec.n == 0 || spec.weeks == 0 {
        return Err(Error::config("cohort needs n >= 1 and weeks >= 1"));
    }
    if !(spec.noise >= 0.0 && spec.separation > 0.0 && spec.separation <= 1.0) {
        return Err(Error::config("noise must be >= 0 and separation in (0, 1]"));
    }
    let counts = spec.mix.counts(spec.n);
    let mut labels: Vec<Archetype> = Archetype::ALL
        .iter()
        .zip(counts)
        .flat_map(|(a, c)| std::iter::repeat_n(*a, c))
        .collect();
    labels.shuffle(&mut stream(spec.seed, tag::COHORT, u32::MAX as u64));

    let early = EARLY_INTERVENTION_WEEKS.min(spec.weeks);
    let mut trajectories = Vec::with_capacity(spec.n);
    let mut laws = Vec::with_capacity(spec.n);
    for (i, kind) in labels.into_iter().enumerate() {
        let mut rng = stream(spec.seed, tag::COHORT, i as u64);
        let law = sample_law(kind, spec, &mut rng);
        let count = rng.random_range(1..=3usize).min(early);
        let weeks_hit = rand::seq::index::sample(&mut rng, early, count)
            .into_iter()
            .map(|w| w + 1)
            .collect::<Vec<_>>();
        trajectories.push(simulate_law(&beneficiary_id(i), &law, spec.weeks, &weeks_hit, &mut rng)?);
        laws.push(law);
    }
    Ok(Cohort { trajectories, laws })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CounterfactualMode {
    ExactSynthetic,
    LstmGenerator,
}

impl std::str::FromStr for CounterfactualMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact_synthetic" => Ok(Self::ExactSynthetic),
            "lstm_generator" => Ok(Self::LstmGenerator),
            other => Err(Error::config(format!("unknown counterfactual mode `{other}`"))),
        }
    }
}

/// Source of next states once a simulated trajectory leaves the record.
#[derive(Clone, Copy, Debug)]
pub enum Generator<'a> {
    Exact(&'a [ArchetypeLaw]),
    Lstm(&'a LstmModel),
}

impl Generator<'_> {
    pub fn mode(&self) -> CounterfactualMode {
        match self {
            Generator::Exact(_) => CounterfactualMode::ExactSynthetic,
            Generator::Lstm(_) => CounterfactualMode::LstmGenerator,
        }
    }
}

/// Trains the counterfactual LSTM on every available week of the cohort.
pub fn train_generator(trajectories: &[Trajectory], config: &LstmConfig) -> Result<(LstmModel, TrainReport)> {
    lstm_train(&make_windows(trajectories, usize::MAX), config)
}

/// Next engagement for beneficiary `index`. `history` covers weeks `1..=t`
/// with the week-`t` action set on its last step. Recorded values are replayed
/// until the simulated actions first differ from the recorded ones.
pub fn counterfactual_next<R: Rng + ?Sized>(
    generator: Generator<'_>,
    index: usize,
    recorded: &Trajectory,
    history: &[Step],
    deviated: &mut bool,
    rng: &mut R,
) -> Result<f64> {
    let t = history.len();
    if t == 0 {
        return Err(Error::usage("counterfactual step needs a nonempty history"));
    }
    if !*deviated {
        if t >= recorded.len() {
            return Err(Error::config(format!(
                "no recorded week {} for `{}`",
                t + 1,
                recorded.beneficiary_id
            )));
        }
        if history[t - 1].intervention == recorded.steps[t - 1].intervention {
            return Ok(recorded.steps[t].engagement);
        }
        *deviated = true;
    }
    match generator {
        Generator::Exact(laws) => {
            let law = laws
                .get(index)
                .ok_or_else(|| Error::usage(format!("no archetype law for beneficiary {index}")))?;
            Ok(law.sample_next(history[t - 1].engagement, lag_at(history, t + 1), rng))
        }
        Generator::Lstm(model) => model.predict_next(history),
    }
}

pub fn engaged_fraction(states: &[f64], threshold: f64) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::usage("engaged fraction of an empty cohort"));
    }
    Ok(states.iter().filter(|&&e| e >= threshold).count() as f64 / states.len() as f64)
}

pub fn default_budget(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).max(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub policy: PolicyKind,
    pub budget_k: usize,
    pub train_weeks: usize,
    pub test_weeks: usize,
    pub horizon: usize,
    pub threshold: f64,
    pub seed: u64,
}

/// Forecasters needed by the TARI policies.
#[derive(Clone, Copy, Debug, Default)]
pub struct PolicyModels<'a> {
    pub ibl: Option<&'a [IblForecaster]>,
    pub lstm: Option<&'a LstmModel>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WeekMetric {
    pub week: usize,
    pub engaged_fraction: f64,
    pub interventions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub week: usize,
    pub beneficiary: usize,
    pub engagement: f64,
    pub intervened: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PolicyRound {
    /// Decision week.
    pub week: usize,
    /// Empty for model-free policies.
    pub scores: Vec<TariScore>,
    pub selected: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimOutcome {
    pub policy: PolicyKind,
    pub mode: CounterfactualMode,
    /// Engaged fraction for each test week `train_weeks + 1 ..= train_weeks + test_weeks`.
    pub weekly: Vec<WeekMetric>,
    /// Weeks `train_weeks ..= train_weeks + test_weeks`; `intervened` is the
    /// action taken in that week.
    pub trace: Vec<TraceRow>,
    pub rounds: Vec<PolicyRound>,
    pub histories: Vec<Vec<Step>>,
    pub deviated: Vec<bool>,
}

impl SimOutcome {
    pub fn mean_engaged(&self) -> f64 {
        self.weekly.iter().map(|w| w.engaged_fraction).sum::<f64>() / self.weekly.len().max(1) as f64
    }
}

/// Runs one policy over the test weeks. Histories start as the recorded
/// first `train_weeks` weeks; each round the policy picks at most `budget_k`
/// beneficiaries, then every beneficiary advances one week.
pub fn run_policy_simulation(
    trajectories: &[Trajectory],
    generator: Generator<'_>,
    models: PolicyModels<'_>,
    config: &SimConfig,
) -> Result<SimOutcome> {
    let n = trajectories.len();
    if n == 0 {
        return Err(Error::config("simulation needs at least one beneficiary"));
    }
    if config.train_weeks == 0 || config.test_weeks == 0 {
        return Err(Error::config("train_weeks and test_weeks must be positive"));
    }
    let needed = config.train_weeks + config.test_weeks;
    if let Some(short) = trajectories.iter().find(|t| t.len() < needed) {
        return Err(Error::config(format!(
            "`{}` has {} recorded weeks; replay needs {needed}",
            short.beneficiary_id,
            short.len()
        )));
    }
    if let Generator::Exact(laws) = generator {
        if laws.len() != n {
            return Err(Error::config("exact counterfactuals need one archetype law per beneficiary"));
        }
    }
    let ids: Vec<String> = trajectories.iter().map(|t| t.beneficiary_id.clone()).collect();
    let ibl = match config.policy {
        PolicyKind::TariIbl => {
            let m = models.ibl.ok_or_else(|| Error::config("tari_ibl needs fitted IBL models"))?;
            if m.len() != n {
                return Err(Error::config("tari_ibl needs one IBL model per beneficiary"));
            }
            Some(m)
        }
        _ => None,
    };
    let lstm = match config.policy {
        PolicyKind::TariLstm => {
            Some(models.lstm.ok_or_else(|| Error::config("tari_lstm needs a trained LSTM"))?)
        }
        _ => None,
    };
    let mut baseline = if config.policy.is_tari() {
        None
    } else {
        Some(BaselinePolicy::new(config.policy, &ids)?)
    };
    let mut policy_rng = stream(config.seed, tag::POLICY, 0);

    let mut histories: Vec<Vec<Step>> = trajectories
        .iter()
        .map(|t| t.steps[..config.train_weeks].to_vec())
        .collect();
    let mut deviated = vec![false; n];
    let mut rngs: Vec<ChaCha8Rng> = (0..n)
        .map(|i| stream(config.seed, tag::COUNTERFACTUAL, i as u64))
        .collect();
    let mut weekly = Vec::with_capacity(config.test_weeks);
    let mut trace = Vec::with_capacity(n * (config.test_weeks + 1));
    let mut rounds = Vec::with_capacity(config.test_weeks);

    for round in 0..config.test_weeks {
        let week = config.train_weeks + round;
        let (scores, mut selected) = match (ibl, lstm, baseline.as_mut()) {
            (Some(models), _, _) => {
                let s = score_cohort(models, &ids, &histories, config.horizon, config.threshold)?;
                let sel = select_top_k(&s, config.budget_k);
                (s, sel)
            }
            (_, Some(model), _) => {
                let s = score_cohort_shared(model, &ids, &histories, config.horizon, config.threshold)?;
                let sel = select_top_k(&s, config.budget_k);
                (s, sel)
            }
            (_, _, Some(b)) => (Vec::new(), b.select(config.budget_k, &mut policy_rng)),
            _ => unreachable!("policy resolved above"),
        };
        selected.truncate(config.budget_k);
        for (i, h) in histories.iter_mut().enumerate() {
            h.last_mut().expect("nonempty").intervention = selected.binary_search(&i).is_ok();
        }
        for (i, h) in histories.iter().enumerate() {
            let last = h.last().expect("nonempty");
            trace.push(TraceRow {
                week,
                beneficiary: i,
                engagement: last.engagement,
                intervened: last.intervention,
            });
        }
        let next: Vec<f64> = histories
            .par_iter()
            .zip(deviated.par_iter_mut())
            .zip(rngs.par_iter_mut())
            .enumerate()
            .map(|(i, ((h, dev), rng))| counterfactual_next(generator, i, &trajectories[i], h, dev, rng))
            .collect::<Result<_>>()?;
        for (h, e) in histories.iter_mut().zip(&next) {
            h.push(Step::new(*e, false));
        }
        weekly.push(WeekMetric {
            week: week + 1,
            engaged_fraction: engaged_fraction(&next, config.threshold)?,
            interventions: selected.len(),
        });
        rounds.push(PolicyRound {
            week,
            scores,
            selected,
        });
    }
    let final_week = config.train_weeks + config.test_weeks;
    for (i, h) in histories.iter().enumerate() {
        let last = h.last().expect("nonempty");
        trace.push(TraceRow {
            week: final_week,
            beneficiary: i,
            engagement: last.engagement,
            intervened: last.intervention,
        });
    }
    Ok(SimOutcome {
        policy: config.policy,
        mode: generator.mode(),
        weekly,
        trace,
        rounds,
        histories,
        deviated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ibl::IblParams;
    use crate::personalize::trace_trajectory;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn spec(n: usize, seed: u64) -> CohortSpec {
        CohortSpec {
            n,
            seed,
            ..CohortSpec::default()
        }
    }

    fn sim_config(policy: PolicyKind, k: usize) -> SimConfig {
        SimConfig {
            policy,
            budget_k: k,
            train_weeks: 25,
            test_weeks: 14,
            horizon: 14,
            threshold: 0.25,
            seed: 3,
        }
    }

    #[test]
    fn default_cohort_shape() {
        let c = generate_cohort(&spec(210, 1)).unwrap();
        assert_eq!(c.trajectories.len(), 210);
        assert!(c.trajectories.iter().all(|t| t.len() == 39));
        let count = |a| c.labels().iter().filter(|&&l| l == a).count();
        assert_eq!(count(Archetype::StateStable), 82);
        assert_eq!(count(Archetype::TransitionConsistent), 66);
        assert_eq!(count(Archetype::InterventionSensitive), 62);
        for t in &c.trajectories {
            let hits: Vec<usize> = (1..=39).filter(|&w| t.steps[w - 1].intervention).collect();
            assert!(!hits.is_empty() && hits.iter().all(|&w| w <= 14));
        }
    }

    #[test]
    fn cohort_is_seeded() {
        assert_eq!(generate_cohort(&spec(30, 5)).unwrap(), generate_cohort(&spec(30, 5)).unwrap());
        assert_ne!(generate_cohort(&spec(30, 5)).unwrap(), generate_cohort(&spec(30, 6)).unwrap());
    }

    #[test]
    fn bad_mix_is_rejected() {
        let mut s = spec(10, 0);
        s.mix.state_stable = 0.9;
        assert!(matches!(generate_cohort(&s), Err(Error::Config(_))));
    }

    #[test]
    fn zero_noise_state_stable_is_constant() {
        let s = CohortSpec {
            n: 5,
            noise: 0.0,
            mix: Mix {
                state_stable: 1.0,
                transition_consistent: 0.0,
                intervention_sensitive: 0.0,
            },
            ..CohortSpec::default()
        };
        for t in generate_cohort(&s).unwrap().trajectories {
            let first = t.steps[0].engagement;
            assert!(t.steps.iter().all(|st| st.engagement == first));
        }
    }

    #[test]
    fn reversion_schedule() {
        assert_eq!(stable_reversion(0.3), 0.0);
        assert_eq!(stable_reversion(0.5), 0.0);
        assert_abs_diff_eq!(stable_reversion(0.75), 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(stable_reversion(1.0), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn archetype_law_values() {
        let is = ArchetypeLaw::intervention_sensitive(0.2, 0.4, 3.0, 0.0);
        assert_abs_diff_eq!(is.mean_next(0.9, 1), 0.2 + 0.4 * (-1.0f64 / 3.0).exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(is.mean_next(0.9, 1), 0.4866, epsilon = 1e-4);
        let ss = ArchetypeLaw::state_stable(0.4, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(ss.sample_next(0.63, 7, &mut rng), 0.63);
        let pulled = ArchetypeLaw::state_stable(0.4, 0.0).with_reversion(0.5);
        assert_abs_diff_eq!(pulled.mean_next(0.8, 2), 0.6, epsilon = 1e-12);
        let tc = ArchetypeLaw::transition_consistent(0.5, 0.5, 8.0, 0.0);
        assert_abs_diff_eq!(tc.mean_next(0.5, 3), 0.5, epsilon = 1e-12);
        assert!(tc.mean_next(0.7, 3) < 0.5 && tc.mean_next(0.3, 3) > 0.5);
    }

    #[test]
    fn replay_until_deviation() {
        let c = generate_cohort(&spec(3, 2)).unwrap();
        let rec = &c.trajectories[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut dev = false;
        let hist = rec.steps[..25].to_vec();
        let e = counterfactual_next(Generator::Exact(&c.laws), 0, rec, &hist, &mut dev, &mut rng).unwrap();
        assert_eq!(e.to_bits(), rec.steps[25].engagement.to_bits());
        assert!(!dev);
        let mut hist2 = hist.clone();
        hist2.last_mut().unwrap().intervention = !hist2.last().unwrap().intervention;
        counterfactual_next(Generator::Exact(&c.laws), 0, rec, &hist2, &mut dev, &mut rng).unwrap();
        assert!(dev);
    }

    #[test]
    fn replay_past_record_is_config_error() {
        let c = generate_cohort(&CohortSpec { n: 2, weeks: 30, ..CohortSpec::default() }).unwrap();
        let cfg = sim_config(PolicyKind::NoIntervention, 1);
        assert!(matches!(
            run_policy_simulation(&c.trajectories, Generator::Exact(&c.laws), PolicyModels::default(), &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn no_intervention_replays_record() {
        let c = generate_cohort(&spec(40, 4)).unwrap();
        let cfg = sim_config(PolicyKind::NoIntervention, 1);
        let out = run_policy_simulation(&c.trajectories, Generator::Exact(&c.laws), PolicyModels::default(), &cfg).unwrap();
        assert_eq!(out.weekly.len(), 14);
        for (h, t) in out.histories.iter().zip(&c.trajectories) {
            let a: Vec<u64> = h.iter().map(|s| s.engagement.to_bits()).collect();
            let b: Vec<u64> = t.steps.iter().map(|s| s.engagement.to_bits()).collect();
            assert_eq!(a, b);
        }
        assert!(out.deviated.iter().all(|d| !d));
    }

    #[test]
    fn budget_is_respected_and_runs_are_seeded() {
        let c = generate_cohort(&spec(50, 4)).unwrap();
        let stores: Vec<IblForecaster> = c
            .trajectories
            .iter()
            .map(|t| IblForecaster::new(trace_trajectory(t, 25, &IblParams::default()).unwrap()))
            .collect();
        let models = PolicyModels { ibl: Some(&stores), lstm: None };
        for policy in [PolicyKind::TariIbl, PolicyKind::Random, PolicyKind::RoundRobin] {
            let cfg = sim_config(policy, 2);
            let a = run_policy_simulation(&c.trajectories, Generator::Exact(&c.laws), models, &cfg).unwrap();
            assert!(a.rounds.iter().all(|r| r.selected.len() <= 2));
            assert!(a.weekly.iter().all(|w| w.interventions <= 2));
            let b = run_policy_simulation(&c.trajectories, Generator::Exact(&c.laws), models, &cfg).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn tari_policy_without_models_is_config_error() {
        let c = generate_cohort(&spec(5, 4)).unwrap();
        let cfg = sim_config(PolicyKind::TariLstm, 1);
        assert!(run_policy_simulation(&c.trajectories, Generator::Exact(&c.laws), PolicyModels::default(), &cfg).is_err());
    }

    #[test]
    fn engaged_fraction_examples() {
        assert_eq!(engaged_fraction(&[1.0; 4], 0.25).unwrap(), 1.0);
        assert_eq!(engaged_fraction(&[0.25, 0.24], 0.25).unwrap(), 0.5);
        assert_eq!(engaged_fraction(&[0.3, 0.1, 0.5, 0.2], 0.25).unwrap(), 0.5);
        assert!(engaged_fraction(&[], 0.25).is_err());
    }

    #[test]
    fn budget_default() {
        assert_eq!(default_budget(210, 0.03), 6);
        assert_eq!(default_budget(10, 0.03), 1);
        assert_eq!(default_budget(100, 0.03), 3);
    }

    proptest! {
        #[test]
        fn intervening_raises_sensitive_mean(b in 0.0f64..0.5, amp in 0.01f64..0.5, lam in 0.5f64..6.0, lag in 2u32..30) {
            let law = ArchetypeLaw::intervention_sensitive(b, amp, lam, 0.05);
            prop_assert!(law.mean_next(0.3, 1) > law.mean_next(0.3, lag));
        }

        #[test]
        fn engaged_fraction_monotone(states in prop::collection::vec(0.0f64..=1.0, 1..50), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(engaged_fraction(&states, hi).unwrap() <= engaged_fraction(&states, lo).unwrap());
        }

        #[test]
        fn generated_values_in_unit_interval(seed in 0u64..50) {
            let c = generate_cohort(&CohortSpec { n: 12, weeks: 20, noise: 0.3, seed, ..CohortSpec::default() }).unwrap();
            for t in c.trajectories {
                prop_assert!(t.steps.iter().all(|s| (0.0..=1.0).contains(&s.engagement)));
            }
        }
    }
}
