//! Weight-profile clustering, cluster-quality scores, one-step error
//! reports, and cluster-guided LSTM training regimens.

use std::fmt;
use std::ops::RangeInclusive;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecast::{Forecaster, IblForecaster};
use crate::lstm::{lstm_train, make_windows, LstmConfig, LstmModel};
use crate::rng::{derive_seed, stream, tag};
use crate::trajectory::Trajectory;

pub type Point = [f64; 2];

fn sq_dist(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn distinct_count(points: &[Point]) -> usize {
    let mut keys: Vec<(u64, u64)> = points
        .iter()
        .map(|p| ((p[0] + 0.0).to_bits(), (p[1] + 0.0).to_bits()))
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Clustering {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub centroids: Vec<Point>,
    pub inertia: f64,
}

impl Clustering {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    pub fn distance_to_centroid(&self, points: &[Point]) -> Vec<f64> {
        points
            .iter()
            .zip(&self.assignments)
            .map(|(p, &a)| sq_dist(p, &self.centroids[a]).sqrt())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iterations: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            restarts: 100,
            max_iterations: 300,
        }
    }
}

fn nearest(p: &Point, centroids: &[Point]) -> (usize, f64) {
    centroids
        .iter()
        .enumerate()
        .map(|(i, c)| (i, sq_dist(p, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// Greedy probabilistic seeding: each new centroid is a data point drawn with
/// probability proportional to its squared distance from the chosen ones.
fn seed_centroids(points: &[Point], k: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let mut centroids = vec![points[rng.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = d2.iter().rposition(|&d| d > 0.0).expect("positive mass");
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && r < d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[pick];
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd iterations from `centroids` until the assignment is a fixed point.
fn lloyd(points: &[Point], mut centroids: Vec<Point>, max_iterations: usize) -> Clustering {
    let k = centroids.len();
    let mut assignments = vec![usize::MAX; points.len()];
    for _ in 0..max_iterations {
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        if next == assignments {
            break;
        }
        assignments = next;
        let mut sums = vec![[0.0, 0.0]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            sums[a][0] += p[0];
            sums[a][1] += p[1];
            counts[a] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = [sums[j][0] / counts[j] as f64, sums[j][1] / counts[j] as f64];
            }
        }
        // an empty cluster takes over the point farthest from its centroid
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        let da = sq_dist(&points[a], &centroids[assignments[a]]);
                        let db = sq_dist(&points[b], &centroids[assignments[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("nonempty");
                centroids[j] = points[far];
                assignments[far] = usize::MAX;
            }
        }
    }
    let inertia = points
        .iter()
        .zip(&assignments)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum();
    Clustering {
        k,
        assignments,
        centroids,
        inertia,
    }
}

fn check_k(points: &[Point], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    let distinct = distinct_count(points);
    if k > distinct {
        return Err(Error::config(format!(
            "k = {k} exceeds the {distinct} distinct points"
        )));
    }
    Ok(())
}

/// One seeded k-means run.
pub fn kmeans_single(points: &[Point], k: usize, rng: &mut ChaCha8Rng, max_iterations: usize) -> Result<Clustering> {
    check_k(points, k)?;
    Ok(lloyd(points, seed_centroids(points, k, rng), max_iterations))
}

/// Best-of-restarts k-means by inertia; ties go to the earliest restart.
pub fn kmeans_with(points: &[Point], k: usize, seed: u64, config: &KMeansConfig) -> Result<Clustering> {
    check_k(points, k)?;
    let runs: Vec<Clustering> = (0..config.restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(seed, tag::KMEANS, r as u64);
            lloyd(points, seed_centroids(points, k, &mut rng), config.max_iterations)
        })
        .collect();
    Ok(runs
        .into_iter()
        .reduce(|best, c| if c.inertia < best.inertia { c } else { best })
        .expect("at least one restart"))
}

pub fn kmeans_cluster(points: &[Point], k: usize, seed: u64) -> Result<Clustering> {
    kmeans_with(points, k, seed, &KMeansConfig::default())
}

/// Mean silhouette; members of singleton clusters score 0.
pub fn silhouette(points: &[Point], clustering: &Clustering) -> f64 {
    let sizes = clustering.cluster_sizes();
    let n = points.len();
    let total: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = clustering.assignments[i];
            if sizes[own] <= 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; clustering.k];
            for j in 0..n {
                if j != i {
                    sums[clustering.assignments[j]] += sq_dist(&points[i], &points[j]).sqrt();
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..clustering.k)
                .filter(|&c| c != own && sizes[c] > 0)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            if !b.is_finite() {
                return 0.0;
            }
            let m = a.max(b);
            if m == 0.0 {
                0.0
            } else {
                (b - a) / m
            }
        })
        .sum();
    total / n as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QualityConfig {
    pub kmeans: KMeansConfig,
    /// Number of uniform reference sets for the gap statistic.
    pub references: usize,
    /// Restarts used when clustering each reference set.
    pub reference_restarts: usize,
}

impl Default for QualityConfig {
    fn default() -> Self {
        Self {
            kmeans: KMeansConfig::default(),
            references: 50,
            reference_restarts: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KScore {
    pub k: usize,
    pub silhouette: f64,
    pub wss: f64,
    pub gap: f64,
    /// `sd * sqrt(1 + 1/B)` of the reference log-dispersions.
    pub gap_se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QualityReport {
    pub scores: Vec<KScore>,
    pub silhouette_k: usize,
    pub elbow_k: usize,
    pub gap_k: usize,
}

/// WSS for `1..=k_max`. Each k also tries a warm start from the best
/// (k-1)-solution plus its farthest point, so the curve never increases.
fn wss_curve(points: &[Point], k_max: usize, seed: u64, config: &KMeansConfig) -> Result<Vec<Clustering>> {
    let mut out: Vec<Clustering> = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        let mut best = kmeans_with(points, k, seed, config)?;
        if let Some(prev) = out.last() {
            let far = points
                .iter()
                .zip(&prev.assignments)
                .map(|(p, &a)| sq_dist(p, &prev.centroids[a]))
                .enumerate()
                .fold((0, -1.0), |b, (i, d)| if d > b.1 { (i, d) } else { b })
                .0;
            let mut init = prev.centroids.clone();
            init.push(points[far]);
            let warm = lloyd(points, init, config.max_iterations);
            if warm.inertia < best.inertia {
                best = warm;
            }
        }
        out.push(best);
    }
    Ok(out)
}

fn uniform_reference(lo: Point, hi: Point, n: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let draw = |rng: &mut ChaCha8Rng, d: usize| {
        if hi[d] > lo[d] {
            rng.random_range(lo[d]..hi[d])
        } else {
            lo[d]
        }
    };
    (0..n).map(|_| [draw(rng, 0), draw(rng, 1)]).collect()
}

/// Silhouette, elbow (largest discrete curvature of WSS), and gap statistic
/// with the one-standard-error rule, for each k in `k_range`.
pub fn cluster_quality(
    points: &[Point],
    k_range: RangeInclusive<usize>,
    seed: u64,
    config: &QualityConfig,
) -> Result<QualityReport> {
    let n = points.len();
    let distinct = distinct_count(points);
    if distinct <= 1 {
        return Err(Error::QualityUndefined("all profiles are identical".into()));
    }
    let (k_min, k_max) = (*k_range.start(), *k_range.end());
    if k_min < 2 || k_max < k_min || k_max + 1 > n {
        return Err(Error::config(format!(
            "k range {k_min}..={k_max} must lie within [2, {}]",
            n.saturating_sub(1)
        )));
    }
    if k_max > distinct {
        return Err(Error::config(format!("k = {k_max} exceeds the {distinct} distinct points")));
    }
    // one past the range when possible, for the elbow and gap comparisons
    let k_top = (k_max + 1).min(distinct).min(n - 1);
    let curve = wss_curve(points, k_top, seed, &config.kmeans)?;
    let wss: Vec<f64> = curve.iter().map(|c| c.inertia).collect();

    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in points {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let ref_cfg = KMeansConfig {
        restarts: config.reference_restarts,
        max_iterations: config.kmeans.max_iterations,
    };
    let b = config.references.max(1);
    let ref_logs: Vec<Vec<f64>> = (0..b)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(seed, tag::GAP_REFERENCE, r as u64);
            let reference = uniform_reference(lo, hi, n, &mut rng);
            let ref_seed = derive_seed(seed, tag::GAP_REFERENCE, (r + b) as u64);
            (k_min..=k_top)
                .map(|k| {
                    let dk = k.min(distinct_count(&reference));
                    kmeans_with(&reference, dk, ref_seed, &ref_cfg).map(|c| c.inertia.max(f64::MIN_POSITIVE).ln())
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;

    let gap_at = |k: usize| -> (f64, f64) {
        let idx = k - k_min;
        let logs: Vec<f64> = ref_logs.iter().map(|v| v[idx]).collect();
        let mean = logs.iter().sum::<f64>() / b as f64;
        let sd = (logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / b as f64).sqrt();
        let observed = wss[k - 1].max(f64::MIN_POSITIVE).ln();
        (mean - observed, sd * (1.0 + 1.0 / b as f64).sqrt())
    };

    let mut scores = Vec::new();
    for k in k_min..=k_max {
        let (gap, gap_se) = gap_at(k);
        scores.push(KScore {
            k,
            silhouette: silhouette(points, &curve[k - 1]),
            wss: wss[k - 1],
            gap,
            gap_se,
        });
    }
    let silhouette_k = scores
        .iter()
        .fold((k_min, f64::NEG_INFINITY), |b, s| if s.silhouette > b.1 { (s.k, s.silhouette) } else { b })
        .0;
    let elbow_k = (k_min..=k_max)
        .filter(|&k| k >= 2 && k < wss.len())
        .map(|k| (k, wss[k - 2] - 2.0 * wss[k - 1] + wss[k]))
        .fold((k_min, f64::NEG_INFINITY), |b, c| if c.1 > b.1 { c } else { b })
        .0;
    let gap_k = (k_min..=k_max)
        .find(|&k| {
            k < k_top && {
                let (g, _) = gap_at(k);
                let (g1, s1) = gap_at(k + 1);
                g >= g1 - s1
            }
        })
        .unwrap_or(k_max);
    Ok(QualityReport {
        scores,
        silhouette_k,
        elbow_k,
        gap_k,
    })
}

/// Fraction of points whose cluster's majority label matches their own label.
pub fn purity<L: Eq + Copy + std::hash::Hash>(assignments: &[usize], labels: &[L]) -> f64 {
    use std::collections::HashMap;
    let mut table: HashMap<(usize, L), usize> = HashMap::new();
    for (&a, &l) in assignments.iter().zip(labels) {
        *table.entry((a, l)).or_default() += 1;
    }
    let mut best: HashMap<usize, usize> = HashMap::new();
    for ((a, _), c) in table {
        let e = best.entry(a).or_default();
        *e = (*e).max(c);
    }
    best.values().sum::<usize>() as f64 / assignments.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorReport {
    /// Mean absolute error per test week across beneficiaries.
    pub per_week: Vec<f64>,
    /// Mean absolute error per beneficiary across test weeks.
    pub per_beneficiary: Vec<f64>,
    pub overall: f64,
}

/// Absolute-error summary of aligned prediction and truth matrices
/// (`[beneficiary][week]`).
pub fn error_report(predictions: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<ErrorReport> {
    if predictions.len() != truth.len() || predictions.is_empty() {
        return Err(Error::usage(format!(
            "{} prediction rows vs {} truth rows",
            predictions.len(),
            truth.len()
        )));
    }
    let weeks = truth[0].len();
    for (p, t) in predictions.iter().zip(truth) {
        if p.len() != t.len() || t.len() != weeks || weeks == 0 {
            return Err(Error::usage("prediction and truth sequences are misaligned"));
        }
    }
    let errs: Vec<Vec<f64>> = predictions
        .iter()
        .zip(truth)
        .map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b).abs()).collect())
        .collect();
    Ok(error_report_from_errors(&errs))
}

fn error_report_from_errors(errs: &[Vec<f64>]) -> ErrorReport {
    let n = errs.len() as f64;
    let weeks = errs[0].len();
    let per_week: Vec<f64> = (0..weeks).map(|w| errs.iter().map(|e| e[w]).sum::<f64>() / n).collect();
    let per_beneficiary: Vec<f64> = errs.iter().map(|e| e.iter().sum::<f64>() / weeks as f64).collect();
    let overall = per_week.iter().sum::<f64>() / weeks as f64;
    ErrorReport {
        per_week,
        per_beneficiary,
        overall,
    }
}

/// One-step predictions for weeks `train_weeks + 1 ..= train_weeks + test_weeks`,
/// each from the recorded history up to the previous week.
pub fn one_step_predictions<F: Forecaster + ?Sized>(
    model: &F,
    traj: &Trajectory,
    train_weeks: usize,
    test_weeks: usize,
) -> Result<Vec<f64>> {
    check_horizon(traj, train_weeks, test_weeks)?;
    (train_weeks + 1..=train_weeks + test_weeks)
        .map(|week| model.predict_next(&traj.steps[..week - 1]))
        .collect()
}

/// IBL one-step predictions; with `online`, each observed test week is
/// recorded into memory after it is predicted. Weights stay fixed either way.
pub fn ibl_one_step_predictions(
    model: &IblForecaster,
    traj: &Trajectory,
    train_weeks: usize,
    test_weeks: usize,
    online: bool,
) -> Result<Vec<f64>> {
    if !online {
        return one_step_predictions(model, traj, train_weeks, test_weeks);
    }
    check_horizon(traj, train_weeks, test_weeks)?;
    let mut live = model.clone();
    let mut out = Vec::with_capacity(test_weeks);
    for week in train_weeks + 1..=train_weeks + test_weeks {
        let history = &traj.steps[..week - 1];
        out.push(live.predict_next(history)?);
        let ctx = crate::trajectory::context_for_week(&traj.steps, week)?;
        live.store_mut().record(ctx, traj.engagement(week), week as u32)?;
    }
    Ok(out)
}

fn check_horizon(traj: &Trajectory, train_weeks: usize, test_weeks: usize) -> Result<()> {
    if train_weeks == 0 || test_weeks == 0 || train_weeks + test_weeks > traj.len() {
        return Err(Error::config(format!(
            "`{}` has {} weeks; evaluation needs {train_weeks} + {test_weeks}",
            traj.beneficiary_id,
            traj.len()
        )));
    }
    Ok(())
}

pub fn test_truth(traj: &Trajectory, train_weeks: usize, test_weeks: usize) -> Vec<f64> {
    traj.steps[train_weeks..train_weeks + test_weeks]
        .iter()
        .map(|s| s.engagement)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regimen {
    Entire,
    WithinCluster,
    OutsideCluster,
    Random,
}

impl Regimen {
    pub const ALL: [Regimen; 4] = [
        Regimen::Entire,
        Regimen::WithinCluster,
        Regimen::OutsideCluster,
        Regimen::Random,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Regimen::Entire => "entire",
            Regimen::WithinCluster => "within_cluster",
            Regimen::OutsideCluster => "outside_cluster",
            Regimen::Random => "random",
        }
    }
}

impl fmt::Display for Regimen {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegimenReport {
    pub regimen: Regimen,
    pub errors: ErrorReport,
    /// How many trained models contributed to each test beneficiary's error.
    pub models_per_beneficiary: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WinCount {
    pub a: Regimen,
    pub b: Regimen,
    pub a_wins: usize,
    pub b_wins: usize,
    pub ties: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CentroidRow {
    pub beneficiary: usize,
    pub cluster: usize,
    pub distance: f64,
    pub within_error: f64,
    pub entire_error: f64,
    pub within_better: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegimenExperiment {
    /// Trajectory indices of the training half of every cluster.
    pub train: Vec<usize>,
    /// Test beneficiaries; report rows follow this order.
    pub test: Vec<usize>,
    pub random_subset: Vec<usize>,
    pub within_models: usize,
    pub reports: Vec<RegimenReport>,
    pub wins: Vec<WinCount>,
    pub centroid_rows: Vec<CentroidRow>,
}

impl RegimenExperiment {
    pub fn report(&self, regimen: Regimen) -> &RegimenReport {
        self.reports
            .iter()
            .find(|r| r.regimen == regimen)
            .expect("every regimen is reported")
    }

    pub fn wins(&self, a: Regimen, b: Regimen) -> Option<&WinCount> {
        self.wins.iter().find(|w| w.a == a && w.b == b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegimenConfig {
    pub lstm: LstmConfig,
    pub train_weeks: usize,
    pub test_weeks: usize,
    pub seed: u64,
}

/// Splits each cluster in half (extra member to training), trains the
/// Entire, per-cluster, and one-third Random LSTMs, and scores one-step test
/// errors. `points` are the weight profiles used for centroid distances.
pub fn regimen_experiment(
    trajectories: &[Trajectory],
    clustering: &Clustering,
    points: &[Point],
    config: &RegimenConfig,
) -> Result<RegimenExperiment> {
    let n = trajectories.len();
    if clustering.assignments.len() != n || points.len() != n {
        return Err(Error::usage("clustering does not match the cohort"));
    }
    let k = clustering.k;
    if k < 2 {
        return Err(Error::config("regimen comparison needs at least 2 clusters"));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut train_by_cluster = vec![Vec::new(); k];
    for (c, slot) in train_by_cluster.iter_mut().enumerate() {
        let mut members: Vec<usize> = (0..n).filter(|&i| clustering.assignments[i] == c).collect();
        if members.len() < 2 {
            return Err(Error::config(format!(
                "cluster {c} has {} member(s); cannot split into train and test",
                members.len()
            )));
        }
        members.shuffle(&mut stream(config.seed, tag::SPLIT, c as u64));
        let cut = members.len().div_ceil(2);
        *slot = members[..cut].to_vec();
        train.extend_from_slice(&members[..cut]);
        test.extend_from_slice(&members[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    let random_size = train.len() / 3;
    if random_size == 0 {
        return Err(Error::config("training set too small for a one-third random subset"));
    }
    let mut random_subset = train.clone();
    random_subset.shuffle(&mut stream(config.seed, tag::SPLIT, u32::MAX as u64));
    random_subset.truncate(random_size);
    random_subset.sort_unstable();

    let pick = |idx: &[usize]| -> Vec<Trajectory> { idx.iter().map(|&i| trajectories[i].clone()).collect() };
    let mut jobs: Vec<(usize, Vec<Trajectory>)> = vec![(0, pick(&train)), (1, pick(&random_subset))];
    for (c, members) in train_by_cluster.iter().enumerate() {
        jobs.push((2 + c, pick(members)));
    }
    let models: Vec<LstmModel> = jobs
        .par_iter()
        .map(|(slot, trajs)| {
            let cfg = LstmConfig {
                seed: derive_seed(config.seed, tag::LSTM, *slot as u64),
                ..config.lstm.clone()
            };
            lstm_train(&make_windows(trajs, config.train_weeks), &cfg).map(|(m, _)| m)
        })
        .collect::<Result<_>>()?;
    let (entire, random, within) = (&models[0], &models[1], &models[2..]);

    let abs_err = |model: &LstmModel, i: usize| -> Result<Vec<f64>> {
        let traj = &trajectories[i];
        let preds = one_step_predictions(model, traj, config.train_weeks, config.test_weeks)?;
        let truth = test_truth(traj, config.train_weeks, config.test_weeks);
        Ok(preds.iter().zip(&truth).map(|(p, t)| (p - t).abs()).collect())
    };
    let rows: Vec<[Vec<f64>; 4]> = test
        .par_iter()
        .map(|&i| {
            let own = clustering.assignments[i];
            let e_entire = abs_err(entire, i)?;
            let e_within = abs_err(&within[own], i)?;
            let e_random = abs_err(random, i)?;
            let foreign: Vec<Vec<f64>> = (0..k)
                .filter(|&c| c != own)
                .map(|c| abs_err(&within[c], i))
                .collect::<Result<_>>()?;
            let m = foreign.len() as f64;
            let e_outside: Vec<f64> = (0..config.test_weeks)
                .map(|w| foreign.iter().map(|e| e[w]).sum::<f64>() / m)
                .collect();
            Ok([e_entire, e_within, e_outside, e_random])
        })
        .collect::<Result<_>>()?;

    let reports: Vec<RegimenReport> = Regimen::ALL
        .iter()
        .enumerate()
        .map(|(slot, &regimen)| {
            let errs: Vec<Vec<f64>> = rows.iter().map(|r| r[slot].clone()).collect();
            RegimenReport {
                regimen,
                errors: error_report_from_errors(&errs),
                models_per_beneficiary: if regimen == Regimen::OutsideCluster { k - 1 } else { 1 },
            }
        })
        .collect();

    let mut wins = Vec::new();
    for a in 0..4 {
        for b in a + 1..4 {
            let (ea, eb) = (&reports[a].errors.per_beneficiary, &reports[b].errors.per_beneficiary);
            let mut w = WinCount {
                a: reports[a].regimen,
                b: reports[b].regimen,
                a_wins: 0,
                b_wins: 0,
                ties: 0,
            };
            for (x, y) in ea.iter().zip(eb) {
                match x.partial_cmp(y) {
                    Some(std::cmp::Ordering::Less) => w.a_wins += 1,
                    Some(std::cmp::Ordering::Greater) => w.b_wins += 1,
                    _ => w.ties += 1,
                }
            }
            wins.push(w);
        }
    }

    let dist = clustering.distance_to_centroid(points);
    let centroid_rows = test
        .iter()
        .enumerate()
        .map(|(row, &i)| {
            let within_error = reports[1].errors.per_beneficiary[row];
            let entire_error = reports[0].errors.per_beneficiary[row];
            CentroidRow {
                beneficiary: i,
                cluster: clustering.assignments[i],
                distance: dist[i],
                within_error,
                entire_error,
                within_better: within_error < entire_error,
            }
        })
        .collect();

    Ok(RegimenExperiment {
        train,
        test,
        random_subset,
        within_models: within.len(),
        reports,
        wins,
        centroid_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn blobs(centers: &[Point], per: usize, sd: f64, seed: u64) -> (Vec<Point>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sd).unwrap();
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for (l, c) in centers.iter().enumerate() {
            for _ in 0..per {
                pts.push([c[0] + normal.sample(&mut rng), c[1] + normal.sample(&mut rng)]);
                labels.push(l);
            }
        }
        (pts, labels)
    }

    #[test]
    fn single_cluster_is_grand_mean() {
        let pts = vec![[0.0, 0.0], [2.0, 0.0], [1.0, 3.0], [1.0, 1.0]];
        let c = kmeans_cluster(&pts, 1, 0).unwrap();
        assert_abs_diff_eq!(c.centroids[0][0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.centroids[0][1], 1.0, epsilon = 1e-12);
        let var: f64 = pts.iter().map(|p| sq_dist(p, &[1.0, 1.0])).sum::<f64>() / 4.0;
        assert_abs_diff_eq!(c.inertia, var * 4.0, epsilon = 1e-12);
    }

    #[test]
    fn planted_blobs_recovered() {
        let (pts, labels) = blobs(&[[0.0, 0.0], [4.0, 0.5], [1.0, 4.5]], 30, 0.1, 1);
        let c = kmeans_cluster(&pts, 3, 7).unwrap();
        assert_eq!(purity(&c.assignments, &labels), 1.0);
        // fixed-point invariants
        for (p, &a) in pts.iter().zip(&c.assignments) {
            assert_eq!(nearest(p, &c.centroids).0, a);
        }
        for j in 0..3 {
            let members: Vec<&Point> = pts.iter().zip(&c.assignments).filter(|(_, &a)| a == j).map(|(p, _)| p).collect();
            let mx = members.iter().map(|p| p[0]).sum::<f64>() / members.len() as f64;
            assert_abs_diff_eq!(c.centroids[j][0], mx, epsilon = 1e-9);
        }
    }

    #[test]
    fn restart_monotonicity() {
        let (pts, _) = blobs(&[[0.0, 0.0], [1.0, 1.0], [2.0, 0.0], [0.5, 2.0]], 15, 0.5, 3);
        let best = kmeans_cluster(&pts, 4, 11).unwrap();
        for r in 0..100 {
            let mut rng = stream(11, tag::KMEANS, r);
            let single = kmeans_single(&pts, 4, &mut rng, 300).unwrap();
            assert!(best.inertia <= single.inertia + 1e-12);
        }
    }

    #[test]
    fn too_many_clusters_is_config_error() {
        let pts = vec![[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]];
        assert!(matches!(kmeans_cluster(&pts, 3, 0), Err(Error::Config(_))));
        assert!(kmeans_cluster(&pts, 2, 0).is_ok());
    }

    #[test]
    fn kmeans_is_seeded() {
        let (pts, _) = blobs(&[[0.0, 0.0], [3.0, 3.0]], 20, 1.0, 5);
        assert_eq!(kmeans_cluster(&pts, 2, 9).unwrap(), kmeans_cluster(&pts, 2, 9).unwrap());
    }

    fn quick() -> QualityConfig {
        QualityConfig {
            kmeans: KMeansConfig { restarts: 20, max_iterations: 300 },
            references: 50,
            reference_restarts: 5,
        }
    }

    #[test]
    fn two_blobs_silhouette_picks_two() {
        let (pts, _) = blobs(&[[0.0, 0.0], [5.0, 5.0]], 25, 0.2, 2);
        let q = cluster_quality(&pts, 2..=6, 1, &quick()).unwrap();
        assert_eq!(q.silhouette_k, 2);
    }

    #[test]
    fn three_blobs_gap_picks_three() {
        let (pts, _) = blobs(&[[0.0, 0.0], [4.0, 0.0], [2.0, 3.5]], 30, 0.2, 4);
        let q = cluster_quality(&pts, 2..=6, 3, &quick()).unwrap();
        assert_eq!(q.gap_k, 3);
        assert_eq!(q.elbow_k, 3);
    }

    #[test]
    fn identical_points_have_no_quality() {
        let pts = vec![[1.0, 1.0]; 10];
        assert!(matches!(cluster_quality(&pts, 2..=3, 0, &quick()), Err(Error::QualityUndefined(_))));
        let (pts, _) = blobs(&[[0.0, 0.0]], 5, 1.0, 0);
        assert!(matches!(cluster_quality(&pts, 1..=3, 0, &quick()), Err(Error::Config(_))));
        assert!(matches!(cluster_quality(&pts, 2..=5, 0, &quick()), Err(Error::Config(_))));
    }

    #[test]
    fn error_report_examples() {
        let truth = vec![vec![0.2, 0.4, 0.6], vec![0.1, 0.1, 0.9]];
        let r = error_report(&truth, &truth).unwrap();
        assert!(r.per_week.iter().all(|&e| e == 0.0) && r.overall == 0.0);
        let off: Vec<Vec<f64>> = truth.iter().map(|t| t.iter().map(|v| v + 0.1).collect()).collect();
        let r = error_report(&off, &truth).unwrap();
        for e in r.per_week.iter().chain(&r.per_beneficiary) {
            assert_abs_diff_eq!(*e, 0.1, epsilon = 1e-12);
        }
        assert!(error_report(&off[..1], &truth).is_err());
        assert!(error_report(&[vec![0.1]], &[vec![0.1, 0.2]]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn wss_non_increasing(raw in prop::collection::vec((0.0f64..5.0, 0.0f64..5.0), 8..30), seed in 0u64..100) {
            let pts: Vec<Point> = raw.into_iter().map(|(a, b)| [a, b]).collect();
            let top = 6.min(distinct_count(&pts));
            let curve = wss_curve(&pts, top, seed, &KMeansConfig { restarts: 5, max_iterations: 300 }).unwrap();
            prop_assert!(curve.windows(2).all(|w| w[1].inertia <= w[0].inertia + 1e-12));
        }
    }
}
