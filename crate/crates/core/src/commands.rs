//! Command dispatch for the `ibl-engage` binary.
//!
//! Each verb resolves its configuration, loads or generates a cohort, runs
//! the relevant pipeline, and writes its reports plus a copy of the resolved
//! configuration into a fresh run directory named
//! `{verb}-{timestamp}-seed{seed}` under the output root.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::analyze::{
    cluster_quality, error_report, ibl_one_step_predictions, kmeans_with, one_step_predictions, purity,
    regimen_experiment, test_truth, Clustering, ErrorReport, Point, QualityReport, RegimenConfig,
    RegimenExperiment,
};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::forecast::IblForecaster;
use crate::lstm::{gradient_check, lstm_train, make_windows, Checkpoint, GradientCheck, LstmConfig, LstmModel, Window, WINDOW};
use crate::personalize::{fit_cohort, trace_trajectory, FitResult};
use crate::report::{emit_report, Field, Format, Record};
use crate::rng::{derive_seed, stream, tag};
use crate::sim::{
    default_budget, generate_cohort, run_policy_simulation, train_generator, ArchetypeLaw, CounterfactualMode,
    Generator, PolicyModels, SimConfig, SimOutcome,
};
use crate::tari::PolicyKind;
use crate::trajectory::Trajectory;

/// Seed slots for the LSTMs trained by the commands.
mod slot {
    pub const SHARED_FORECASTER: u64 = 0;
    pub const GENERATOR: u64 = 1000;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verb {
    Fit,
    Predict,
    Simulate,
    Cluster,
    Experiment,
    Gradcheck,
    Synth,
}

impl Verb {
    pub const ALL: [Verb; 7] = [
        Verb::Fit,
        Verb::Predict,
        Verb::Simulate,
        Verb::Cluster,
        Verb::Experiment,
        Verb::Gradcheck,
        Verb::Synth,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Verb::Fit => "fit",
            Verb::Predict => "predict",
            Verb::Simulate => "simulate",
            Verb::Cluster => "cluster",
            Verb::Experiment => "experiment",
            Verb::Gradcheck => "gradcheck",
            Verb::Synth => "synth",
        }
    }
}

impl fmt::Display for Verb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Verb {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Verb::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::usage(format!("unknown verb `{s}`")))
    }
}

// ---------------------------------------------------------------------------
// report records

pub struct FitRow<'a>(pub &'a FitResult);

impl Record for FitRow<'_> {
    fn columns() -> &'static [&'static str] {
        &["beneficiary_id", "w_prev", "w_lag", "loss"]
    }
    fn fields(&self) -> Vec<Field> {
        vec![
            Field::text(&self.0.beneficiary_id),
            Field::Real(self.0.best_profile.w_prev_engagement),
            Field::Real(self.0.best_profile.w_intervention_lag),
            Field::Real(self.0.best_loss),
        ]
    }
}

pub struct SurfaceRow<'a> {
    pub beneficiary_id: &'a str,
    pub w_prev: f64,
    pub w_lag: f64,
    pub loss: f64,
}

impl Record for SurfaceRow<'_> {
    fn columns() -> &'static [&'static str] {
        FitRow::columns()
    }
    fn fields(&self) -> Vec<Field> {
        vec![
            Field::text(self.beneficiary_id),
            Field::Real(self.w_prev),
            Field::Real(self.w_lag),
            Field::Real(self.loss),
        ]
    }
}

pub struct LawRow<'a> {
    pub beneficiary_id: &'a str,
    pub law: &'a ArchetypeLaw,
}

impl Record for LawRow<'_> {
    fn columns() -> &'static [&'static str] {
        &[
            "beneficiary_id",
            "archetype",
            "initial",
            "setpoint",
            "gain",
            "baseline",
            "amplitude",
            "decay",
            "noise",
        ]
    }
    fn fields(&self) -> Vec<Field> {
        let l = self.law;
        vec![
            Field::text(self.beneficiary_id),
            Field::text(l.archetype.as_str()),
            Field::Real(l.initial),
            Field::Real(l.setpoint),
            Field::Real(l.gain),
            Field::Real(l.baseline),
            Field::Real(l.amplitude),
            Field::Real(l.decay),
            Field::Real(l.noise),
        ]
    }
}

pub struct WeekErrorRow<'a> {
    pub model: &'a str,
    pub week: usize,
    pub mae: f64,
}

impl Record for WeekErrorRow<'_> {
    fn columns() -> &'static [&'static str] {
        &["model", "week", "mae"]
    }
    fn fields(&self) -> Vec<Field> {
        vec![Field::text(self.model), Field::count(self.week), Field::Real(self.mae)]
    }
}

pub struct BeneficiaryErrorRow<'a> {
    pub beneficiary_id: &'a str,
    pub cluster: Option<usize>,
    pub model: &'a str,
    pub mae: f64,
}

impl Record for BeneficiaryErrorRow<'_> {
    fn columns() -> &'static [&'static str] {
        &["beneficiary_id", "cluster", "model", "mae"]
    }
    fn fields(&self) -> Vec<Field> {
        vec![
            Field::text(self.beneficiary_id),
            self.cluster.map_or(Field::text(""), Field::count),
            Field::text(self.model),
            Field::Real(self.mae),
        ]
    }
}

pub struct SummaryRow<'a> {
    pub model: &'a str,
    pub mae: f64,
    pub models_trained: usize,
}

impl Record for SummaryRow<'_> {
    fn columns() -> &'static [&'static str] {
        &["model", "mae", "models_trained"]
    }
    fn fields(&self) -> Vec<Field> {
        vec![Field::text(self.model), Field::Real(self.mae), Field::count(self.models_trained)]
    }
}

pub struct PredictionRow<'a> {
    pub beneficiary_id: &'a str,
    pub week: usize,
    pub observed: f64,
    pub ibl: f64,
    pub lstm: f64,
}

impl Record for PredictionRow<'_> {
    fn columns() -> &'static [&'static str] {
        &["beneficiary_id", "week", "observed", "ibl", "lstm"]
    }
    fn fields(&self) -> Vec<Field> {
        vec![
            Field::text(self.beneficiary_id),
            Field::count(self.week),
            Field::Real(self.observed),
            Field::Real(self.ibl),
            Field::Real(self.lstm),
        ]
    }
}

pub struct TrainingRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
    pub best: bool,
}

impl Record for TrainingRow {
    fn columns() -> &'static [&'static str] {
        &["epoch", "train_loss", "validation_loss", "best"]
    }
    fn fields(&self) -> Vec<Field> {
        vec![
            Field::count(self.epoch),
            Field::Real(self.train_loss),
            self.validation_loss.map_or(Field::text(""), Field::Real),
            Field::Flag(self.best),
        ]
    }
}

pub struct MetricRow {
    pub week: usize,
    pub policy: PolicyKind,
    pub engaged_fraction: f64,
}

impl Record for MetricRow {
    fn columns() -> &'static [&'static str] {
        &["week", "policy", "engaged_fraction"]
    }
    fn fields(&self) -> Vec<Field> {
        vec![
            Field::count(self.week),
            Field::text(self.policy.as_str()),
            Field::Real(self.engaged_fraction),
        ]
    }
}

pub struct TraceRecord<'a> {
    pub week: usize,
    pub beneficiary_id: &'a str,
    pub engagement: f64,
    pub intervened: bool,
    pub policy: PolicyKind,
    pub seed: u64,
}

impl Record for TraceRecord<'_> {
    fn columns() -> &'static [&'static str] {
        &["week", "beneficiary_id", "engagement", "intervened", "policy", "seed"]
    }
    fn fields(&self) -> Vec<Field> {
        vec![
            Field::count(self.week),
            Field::text(self.beneficiary_id),
            Field::Real(self.engagement),
            Field::Flag(self.intervened),
            Field::text(self.policy.as_str()),
            Field::Str(self.seed.to_string()),
        ]
    }
}

pub struct ScoreRow<'a> {
    pub week: usize,
    pub policy: PolicyKind,
    pub beneficiary_id: &'a str,
    pub u: u32,
    pub v: u32,
    pub index: f64,
    pub selected: bool,
}

impl Record for ScoreRow<'_> {
    fn columns() -> &'static [&'static str] {
        &["week", "policy", "beneficiary_id", "u", "v", "index", "selected"]
    }
    fn fields(&self) -> Vec<Field> {
        vec![
            Field::count(self.week),
            Field::text(self.policy.as_str()),
            Field::text(self.beneficiary_id),
            Field::Int(self.u.into()),
            Field::Int(self.v.into()),
            Field::Real(self.index),
            Field::Flag(self.selected),
        ]
    }
}

pub struct PolicySummaryRow {
    pub policy: PolicyKind,
    pub mean_engaged_fraction: f64,
    pub interventions: usize,
    pub deviated: usize,
}

impl Record for PolicySummaryRow {
    fn columns() -> &'static [&'static str] {
        &["policy", "mean_engaged_fraction", "interventions", "deviated"]
    }
    fn fields(&self) -> Vec<Field> {
        vec![
            Field::text(self.policy.as_str()),
            Field::Real(self.mean_engaged_fraction),
            Field::count(self.interventions),
            Field::count(self.deviated),
        ]
    }
}

pub struct AssignmentRow<'a> {
    pub beneficiary_id: &'a str,
    pub w_prev: f64,
    pub w_lag: f64,
    pub cluster: usize,
    pub dist_to_centroid: f64,
}

impl Record for AssignmentRow<'_> {
    fn columns() -> &'static [&'static str] {
        &["beneficiary_id", "w_prev", "w_lag", "cluster", "dist_to_centroid"]
    }
    fn fields(&self) -> Vec<Field> {
        vec![
            Field::text(self.beneficiary_id),
            Field::Real(self.w_prev),
            Field::Real(self.w_lag),
            Field::count(self.cluster),
            Field::Real(self.dist_to_centroid),
        ]
    }
}

pub struct CentroidRecord {
    pub cluster: usize,
    pub w_prev: f64,
    pub w_lag: f64,
    pub size: usize,
}

impl Record for CentroidRecord {
    fn columns() -> &'static [&'static str] {
        &["cluster", "w_prev", "w_lag", "size"]
    }
    fn fields(&self) -> Vec<Field> {
        vec![
            Field::count(self.cluster),
            Field::Real(self.w_prev),
            Field::Real(self.w_lag),
            Field::count(self.size),
        ]
    }
}

pub struct QualityRow {
    pub k: usize,
    pub silhouette: f64,
    pub wss: f64,
    pub gap: f64,
    pub gap_se: f64,
}

impl Record for QualityRow {
    fn columns() -> &'static [&'static str] {
        &["k", "silhouette", "wss", "gap", "gap_se"]
    }
    fn fields(&self) -> Vec<Field> {
        vec![
            Field::count(self.k),
            Field::Real(self.silhouette),
            Field::Real(self.wss),
            Field::Real(self.gap),
            Field::Real(self.gap_se),
        ]
    }
}

pub struct SelectionRow {
    pub criterion: &'static str,
    pub value: f64,
}

impl Record for SelectionRow {
    fn columns() -> &'static [&'static str] {
        &["criterion", "value"]
    }
    fn fields(&self) -> Vec<Field> {
        vec![Field::text(self.criterion), Field::Real(self.value)]
    }
}

pub struct WinRow {
    pub a: &'static str,
    pub b: &'static str,
    pub a_wins: usize,
    pub b_wins: usize,
    pub ties: usize,
}

impl Record for WinRow {
    fn columns() -> &'static [&'static str] {
        &["regimen_a", "regimen_b", "a_wins", "b_wins", "ties"]
    }
    fn fields(&self) -> Vec<Field> {
        vec![
            Field::text(self.a),
            Field::text(self.b),
            Field::count(self.a_wins),
            Field::count(self.b_wins),
            Field::count(self.ties),
        ]
    }
}

pub struct DistanceRow<'a> {
    pub beneficiary_id: &'a str,
    pub cluster: usize,
    pub dist_to_centroid: f64,
    pub within_mae: f64,
    pub entire_mae: f64,
    pub within_better: bool,
}

impl Record for DistanceRow<'_> {
    fn columns() -> &'static [&'static str] {
        &["beneficiary_id", "cluster", "dist_to_centroid", "within_mae", "entire_mae", "within_better"]
    }
    fn fields(&self) -> Vec<Field> {
        vec![
            Field::text(self.beneficiary_id),
            Field::count(self.cluster),
            Field::Real(self.dist_to_centroid),
            Field::Real(self.within_mae),
            Field::Real(self.entire_mae),
            Field::Flag(self.within_better),
        ]
    }
}

pub struct GradcheckRow {
    pub model: usize,
    pub hidden: usize,
    pub parameters_checked: usize,
    pub max_relative_error: f64,
}

impl Record for GradcheckRow {
    fn columns() -> &'static [&'static str] {
        &["model", "hidden", "parameters_checked", "max_relative_error"]
    }
    fn fields(&self) -> Vec<Field> {
        // six decimals would flatten errors near 1e-9 to zero
        vec![
            Field::count(self.model),
            Field::count(self.hidden),
            Field::count(self.parameters_checked),
            Field::Str(format!("{:.6e}", self.max_relative_error)),
        ]
    }
}

// ---------------------------------------------------------------------------
// pipelines

/// A loaded cohort; `laws` is present only for synthetic cohorts.
pub struct CohortData {
    pub trajectories: Vec<Trajectory>,
    pub laws: Option<Vec<ArchetypeLaw>>,
}

pub fn load_cohort(config: &RunConfig) -> Result<CohortData> {
    match &config.input {
        Some(path) => Ok(CohortData {
            trajectories: crate::data::parse_trajectory_csv(path)?,
            laws: None,
        }),
        None => {
            let c = generate_cohort(&config.cohort_spec())?;
            Ok(CohortData {
                trajectories: c.trajectories,
                laws: Some(c.laws),
            })
        }
    }
}

fn check_cohort(config: &RunConfig, trajectories: &[Trajectory]) -> Result<()> {
    let shortest = trajectories
        .iter()
        .map(Trajectory::len)
        .min()
        .ok_or_else(|| Error::config("cohort is empty"))?;
    config.check_length(shortest)
}

pub fn lstm_config(config: &RunConfig, slot: u64) -> LstmConfig {
    LstmConfig {
        seed: derive_seed(config.seed, tag::LSTM, slot),
        ..config.lstm.clone()
    }
}

/// Per-beneficiary IBL forecasters whose memories hold the training weeks
/// under each fitted profile.
pub fn fitted_forecasters(trajectories: &[Trajectory], fits: &[FitResult], config: &RunConfig) -> Result<Vec<IblForecaster>> {
    trajectories
        .par_iter()
        .zip(fits)
        .map(|(t, f)| {
            let params = config.ibl.with_weights(f.best_profile);
            trace_trajectory(t, config.train_weeks, &params).map(IblForecaster::new)
        })
        .collect()
}

pub fn profile_points(fits: &[FitResult]) -> Vec<Point> {
    fits.iter().map(|f| f.best_profile.as_point()).collect()
}

pub struct PredictOutcome {
    pub fits: Vec<FitResult>,
    pub truth: Vec<Vec<f64>>,
    pub ibl_predictions: Vec<Vec<f64>>,
    pub lstm_predictions: Vec<Vec<f64>>,
    pub ibl: ErrorReport,
    pub lstm: ErrorReport,
    pub lstm_model: LstmModel,
    pub lstm_config: LstmConfig,
    pub lstm_training: crate::lstm::TrainReport,
}

/// Personalized IBL versus the shared LSTM on one-step test predictions.
pub fn predict_comparison(trajectories: &[Trajectory], config: &RunConfig) -> Result<PredictOutcome> {
    check_cohort(config, trajectories)?;
    let (train, test) = (config.train_weeks, config.test_weeks);
    let fits = fit_cohort(trajectories, train, &config.ibl)?;
    let forecasters = fitted_forecasters(trajectories, &fits, config)?;
    let ibl_predictions: Vec<Vec<f64>> = trajectories
        .par_iter()
        .zip(&forecasters)
        .map(|(t, m)| ibl_one_step_predictions(m, t, train, test, config.online_ibl))
        .collect::<Result<_>>()?;
    let lstm_cfg = lstm_config(config, slot::SHARED_FORECASTER);
    let (lstm_model, lstm_training) = lstm_train(&make_windows(trajectories, train), &lstm_cfg)?;
    let lstm_predictions: Vec<Vec<f64>> = trajectories
        .par_iter()
        .map(|t| one_step_predictions(&lstm_model, t, train, test))
        .collect::<Result<_>>()?;
    let truth: Vec<Vec<f64>> = trajectories.iter().map(|t| test_truth(t, train, test)).collect();
    Ok(PredictOutcome {
        ibl: error_report(&ibl_predictions, &truth)?,
        lstm: error_report(&lstm_predictions, &truth)?,
        fits,
        truth,
        ibl_predictions,
        lstm_predictions,
        lstm_model,
        lstm_config: lstm_cfg,
        lstm_training,
    })
}

pub struct SimulateOutcome {
    pub budget_k: usize,
    pub outcomes: Vec<SimOutcome>,
}

/// Runs all five policies against the same counterfactual streams.
pub fn simulate_policies(cohort: &CohortData, config: &RunConfig) -> Result<SimulateOutcome> {
    let trajectories = &cohort.trajectories;
    check_cohort(config, trajectories)?;
    let fits = fit_cohort(trajectories, config.train_weeks, &config.ibl)?;
    let forecasters = fitted_forecasters(trajectories, &fits, config)?;
    let (shared, _) = lstm_train(
        &make_windows(trajectories, config.train_weeks),
        &lstm_config(config, slot::SHARED_FORECASTER),
    )?;
    let generator_model;
    let generator = match config.counterfactual {
        CounterfactualMode::ExactSynthetic => Generator::Exact(cohort.laws.as_deref().ok_or_else(|| {
            Error::config("exact_synthetic counterfactuals need a synthetic cohort; use lstm_generator for CSV input")
        })?),
        CounterfactualMode::LstmGenerator => {
            generator_model = train_generator(trajectories, &lstm_config(config, slot::GENERATOR))?.0;
            Generator::Lstm(&generator_model)
        }
    };
    let models = PolicyModels {
        ibl: Some(&forecasters),
        lstm: Some(&shared),
    };
    let budget_k = default_budget(trajectories.len(), config.budget_fraction);
    let outcomes = PolicyKind::ALL
        .iter()
        .map(|&policy| {
            log::info!("simulating policy {policy}");
            let sim = SimConfig {
                policy,
                budget_k,
                train_weeks: config.train_weeks,
                test_weeks: config.test_weeks,
                horizon: config.horizon,
                threshold: config.threshold,
                seed: config.seed,
            };
            run_policy_simulation(trajectories, generator, models, &sim)
        })
        .collect::<Result<_>>()?;
    Ok(SimulateOutcome { budget_k, outcomes })
}

pub struct ClusterOutcome {
    pub fits: Vec<FitResult>,
    pub points: Vec<Point>,
    pub clustering: Clustering,
    pub quality: Option<QualityReport>,
}

/// Fits profiles and clusters them at the configured k. With `with_quality`,
/// also scores the configured k range, clamped to what the data allows.
pub fn cluster_profiles(trajectories: &[Trajectory], config: &RunConfig, with_quality: bool) -> Result<ClusterOutcome> {
    check_cohort(config, trajectories)?;
    let fits = fit_cohort(trajectories, config.train_weeks, &config.ibl)?;
    let points = profile_points(&fits);
    let settings = &config.cluster;
    let clustering = kmeans_with(&points, settings.k, derive_seed(config.seed, tag::KMEANS, 0), &settings.kmeans)?;
    let quality = if with_quality {
        let k_max = settings.k_max.min(points.len().saturating_sub(1));
        Some(cluster_quality(
            &points,
            settings.k_min..=k_max,
            derive_seed(config.seed, tag::KMEANS, 1),
            &settings.quality(),
        )?)
    } else {
        None
    };
    Ok(ClusterOutcome {
        fits,
        points,
        clustering,
        quality,
    })
}

pub fn experiment_pipeline(trajectories: &[Trajectory], config: &RunConfig) -> Result<(ClusterOutcome, RegimenExperiment)> {
    let clusters = cluster_profiles(trajectories, config, false)?;
    let regimen = RegimenConfig {
        lstm: config.lstm.clone(),
        train_weeks: config.train_weeks,
        test_weeks: config.test_weeks,
        seed: config.seed,
    };
    let exp = regimen_experiment(trajectories, &clusters.clustering, &clusters.points, &regimen)?;
    Ok((clusters, exp))
}

/// A random window with engagement inputs in `[0, 1]` and binary lag flags.
pub fn random_window<R: Rng + ?Sized>(rng: &mut R) -> Window {
    let mut inputs = [[0.0; 2]; WINDOW];
    for row in inputs.iter_mut() {
        *row = [rng.random::<f64>(), if rng.random_bool(0.3) { 1.0 } else { 0.0 }];
    }
    Window {
        beneficiary: 0,
        inputs,
        target: rng.random::<f64>(),
    }
}

/// Gradient checks on `models` seeded random networks.
pub fn gradcheck_suite(seed: u64, models: usize, hidden: usize, samples: usize) -> Vec<GradientCheck> {
    (0..models)
        .into_par_iter()
        .map(|m| {
            let mut rng = stream(seed, tag::GRADCHECK, m as u64);
            let model = LstmModel::random(hidden, rng.random());
            let window = random_window(&mut rng);
            gradient_check(&model, &window, samples, rng.random())
        })
        .collect()
}

// ---------------------------------------------------------------------------
// artifacts

struct Artifacts<'a> {
    dir: &'a Path,
    format: Format,
    files: Vec<PathBuf>,
}

impl Artifacts<'_> {
    fn report<R: Record>(&mut self, stem: &str, records: &[R]) -> Result<()> {
        let path = self.dir.join(format!("{stem}.{}", self.format.extension()));
        emit_report(records, &path, self.format)?;
        self.files.push(path);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, serde_json::to_string_pretty(value)? + "\n")?;
        self.files.push(path);
        Ok(())
    }
}

fn error_rows<'a>(model: &'a str, report: &ErrorReport, first_week: usize) -> Vec<WeekErrorRow<'a>> {
    report
        .per_week
        .iter()
        .enumerate()
        .map(|(i, &mae)| WeekErrorRow {
            model,
            week: first_week + i,
            mae,
        })
        .collect()
}

fn write_fit(a: &mut Artifacts<'_>, trajectories: &[Trajectory], config: &RunConfig) -> Result<()> {
    let fits = fit_cohort(trajectories, config.train_weeks, &config.ibl)?;
    a.report("fits", &fits.iter().map(FitRow).collect::<Vec<_>>())?;
    let surface: Vec<SurfaceRow> = fits
        .iter()
        .flat_map(|f| {
            f.loss_surface.iter().map(move |(w, l)| SurfaceRow {
                beneficiary_id: &f.beneficiary_id,
                w_prev: w.w_prev_engagement,
                w_lag: w.w_intervention_lag,
                loss: *l,
            })
        })
        .collect();
    a.report("loss_surface", &surface)
}

fn write_predict(a: &mut Artifacts<'_>, trajectories: &[Trajectory], config: &RunConfig) -> Result<()> {
    let out = predict_comparison(trajectories, config)?;
    let first = config.train_weeks + 1;
    let mut weeks = error_rows("ibl", &out.ibl, first);
    weeks.extend(error_rows("lstm", &out.lstm, first));
    a.report("errors_by_week", &weeks)?;
    let mut per = Vec::new();
    for (model, report) in [("ibl", &out.ibl), ("lstm", &out.lstm)] {
        for (t, &mae) in trajectories.iter().zip(&report.per_beneficiary) {
            per.push(BeneficiaryErrorRow {
                beneficiary_id: &t.beneficiary_id,
                cluster: None,
                model,
                mae,
            });
        }
    }
    a.report("errors_by_beneficiary", &per)?;
    a.report(
        "summary",
        &[
            SummaryRow { model: "ibl", mae: out.ibl.overall, models_trained: trajectories.len() },
            SummaryRow { model: "lstm", mae: out.lstm.overall, models_trained: 1 },
        ],
    )?;
    let mut preds = Vec::new();
    for (i, t) in trajectories.iter().enumerate() {
        for w in 0..config.test_weeks {
            preds.push(PredictionRow {
                beneficiary_id: &t.beneficiary_id,
                week: first + w,
                observed: out.truth[i][w],
                ibl: out.ibl_predictions[i][w],
                lstm: out.lstm_predictions[i][w],
            });
        }
    }
    a.report("predictions", &preds)?;
    a.report("fits", &out.fits.iter().map(FitRow).collect::<Vec<_>>())?;
    let tr = &out.lstm_training;
    let curve: Vec<TrainingRow> = tr
        .train_loss
        .iter()
        .enumerate()
        .map(|(e, &train_loss)| TrainingRow {
            epoch: e + 1,
            train_loss,
            validation_loss: tr.validation_loss.get(e).copied(),
            best: e + 1 == tr.best_epoch,
        })
        .collect();
    a.report("lstm_training", &curve)?;
    let path = a.dir.join("lstm_checkpoint.json");
    Checkpoint::new(&out.lstm_model, &out.lstm_config).save(&path)?;
    a.files.push(path);
    Ok(())
}

fn write_simulate(a: &mut Artifacts<'_>, cohort: &CohortData, config: &RunConfig) -> Result<()> {
    let sim = simulate_policies(cohort, config)?;
    let ids: Vec<&str> = cohort.trajectories.iter().map(|t| t.beneficiary_id.as_str()).collect();
    let mut metrics = Vec::new();
    let mut trace = Vec::new();
    let mut scores = Vec::new();
    let mut summary = Vec::new();
    for o in &sim.outcomes {
        metrics.extend(o.weekly.iter().map(|w| MetricRow {
            week: w.week,
            policy: o.policy,
            engaged_fraction: w.engaged_fraction,
        }));
        trace.extend(o.trace.iter().map(|r| TraceRecord {
            week: r.week,
            beneficiary_id: ids[r.beneficiary],
            engagement: r.engagement,
            intervened: r.intervened,
            policy: o.policy,
            seed: config.seed,
        }));
        for round in &o.rounds {
            scores.extend(round.scores.iter().enumerate().map(|(i, s)| ScoreRow {
                week: round.week,
                policy: o.policy,
                beneficiary_id: ids[i],
                u: s.u,
                v: s.v,
                index: s.index,
                selected: round.selected.binary_search(&i).is_ok(),
            }));
        }
        summary.push(PolicySummaryRow {
            policy: o.policy,
            mean_engaged_fraction: o.mean_engaged(),
            interventions: o.weekly.iter().map(|w| w.interventions).sum(),
            deviated: o.deviated.iter().filter(|&&d| d).count(),
        });
    }
    a.report("metrics", &metrics)?;
    a.report("trace", &trace)?;
    a.report("scores", &scores)?;
    a.report("summary", &summary)
}

fn write_assignments(a: &mut Artifacts<'_>, trajectories: &[Trajectory], c: &ClusterOutcome) -> Result<()> {
    let dist = c.clustering.distance_to_centroid(&c.points);
    let rows: Vec<AssignmentRow> = trajectories
        .iter()
        .enumerate()
        .map(|(i, t)| AssignmentRow {
            beneficiary_id: &t.beneficiary_id,
            w_prev: c.points[i][0],
            w_lag: c.points[i][1],
            cluster: c.clustering.assignments[i],
            dist_to_centroid: dist[i],
        })
        .collect();
    a.report("assignments", &rows)?;
    let sizes = c.clustering.cluster_sizes();
    let centroids: Vec<CentroidRecord> = c
        .clustering
        .centroids
        .iter()
        .enumerate()
        .map(|(j, p)| CentroidRecord {
            cluster: j,
            w_prev: p[0],
            w_lag: p[1],
            size: sizes[j],
        })
        .collect();
    a.report("centroids", &centroids)
}

fn write_cluster(a: &mut Artifacts<'_>, cohort: &CohortData, config: &RunConfig) -> Result<()> {
    let c = cluster_profiles(&cohort.trajectories, config, true)?;
    write_assignments(a, &cohort.trajectories, &c)?;
    let q = c.quality.as_ref().expect("quality requested");
    let rows: Vec<QualityRow> = q
        .scores
        .iter()
        .map(|s| QualityRow {
            k: s.k,
            silhouette: s.silhouette,
            wss: s.wss,
            gap: s.gap,
            gap_se: s.gap_se,
        })
        .collect();
    a.report("quality", &rows)?;
    let mut selection = vec![
        SelectionRow { criterion: "silhouette_k", value: q.silhouette_k as f64 },
        SelectionRow { criterion: "elbow_k", value: q.elbow_k as f64 },
        SelectionRow { criterion: "gap_k", value: q.gap_k as f64 },
        SelectionRow { criterion: "inertia", value: c.clustering.inertia },
    ];
    if let Some(laws) = &cohort.laws {
        let labels: Vec<_> = laws.iter().map(|l| l.archetype).collect();
        selection.push(SelectionRow {
            criterion: "archetype_purity",
            value: purity(&c.clustering.assignments, &labels),
        });
    }
    a.report("selection", &selection)
}

fn write_experiment(a: &mut Artifacts<'_>, trajectories: &[Trajectory], config: &RunConfig) -> Result<()> {
    let (c, exp) = experiment_pipeline(trajectories, config)?;
    write_assignments(a, trajectories, &c)?;
    let first = config.train_weeks + 1;
    let mut weeks = Vec::new();
    let mut per = Vec::new();
    let mut summary = Vec::new();
    for r in &exp.reports {
        let name = r.regimen.as_str();
        weeks.extend(error_rows(name, &r.errors, first));
        for (row, &i) in exp.test.iter().enumerate() {
            per.push(BeneficiaryErrorRow {
                beneficiary_id: &trajectories[i].beneficiary_id,
                cluster: Some(c.clustering.assignments[i]),
                model: name,
                mae: r.errors.per_beneficiary[row],
            });
        }
        let trained = match r.regimen {
            crate::analyze::Regimen::WithinCluster | crate::analyze::Regimen::OutsideCluster => exp.within_models,
            _ => 1,
        };
        summary.push(SummaryRow {
            model: name,
            mae: r.errors.overall,
            models_trained: trained,
        });
    }
    a.report("regimen_by_week", &weeks)?;
    a.report("regimen_by_beneficiary", &per)?;
    a.report("regimen_summary", &summary)?;
    let wins: Vec<WinRow> = exp
        .wins
        .iter()
        .map(|w| WinRow {
            a: w.a.as_str(),
            b: w.b.as_str(),
            a_wins: w.a_wins,
            b_wins: w.b_wins,
            ties: w.ties,
        })
        .collect();
    a.report("regimen_wins", &wins)?;
    let dist: Vec<DistanceRow> = exp
        .centroid_rows
        .iter()
        .map(|r| DistanceRow {
            beneficiary_id: &trajectories[r.beneficiary].beneficiary_id,
            cluster: r.cluster,
            dist_to_centroid: r.distance,
            within_mae: r.within_error,
            entire_mae: r.entire_error,
            within_better: r.within_better,
        })
        .collect();
    a.report("centroid_distance", &dist)
}

fn write_gradcheck(a: &mut Artifacts<'_>, config: &RunConfig) -> Result<f64> {
    let g = &config.gradcheck;
    let checks = gradcheck_suite(config.seed, g.models, g.hidden, g.samples);
    let rows: Vec<GradcheckRow> = checks
        .iter()
        .enumerate()
        .map(|(m, c)| GradcheckRow {
            model: m,
            hidden: g.hidden,
            parameters_checked: c.parameters_checked,
            max_relative_error: c.max_relative_error,
        })
        .collect();
    a.report("gradcheck", &rows)?;
    Ok(checks.iter().map(|c| c.max_relative_error).fold(0.0, f64::max))
}

fn write_synth(a: &mut Artifacts<'_>, config: &RunConfig) -> Result<()> {
    let cohort = generate_cohort(&config.cohort_spec())?;
    let path = a.dir.join("cohort.csv");
    crate::data::write_trajectory_csv(&cohort.trajectories, &path)?;
    a.files.push(path);
    let laws: Vec<LawRow> = cohort
        .trajectories
        .iter()
        .zip(&cohort.laws)
        .map(|(t, law)| LawRow {
            beneficiary_id: &t.beneficiary_id,
            law,
        })
        .collect();
    a.report("archetypes", &laws)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunOutput {
    pub verb: String,
    pub run_dir: PathBuf,
    pub files: Vec<PathBuf>,
    /// Verb-specific headline number (the worst gradient error for `gradcheck`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub headline: Option<f64>,
}

/// Runs `verb` writing every artifact into `dir`, which must exist.
pub fn run_command_in(verb: Verb, config: &RunConfig, dir: &Path) -> Result<RunOutput> {
    config.validate()?;
    let mut a = Artifacts {
        dir,
        format: config.format,
        files: Vec::new(),
    };
    a.json("config.json", config)?;
    let mut headline = None;
    match verb {
        Verb::Synth => write_synth(&mut a, config)?,
        Verb::Gradcheck => headline = Some(write_gradcheck(&mut a, config)?),
        _ => {
            let cohort = load_cohort(config)?;
            match verb {
                Verb::Fit => write_fit(&mut a, &cohort.trajectories, config)?,
                Verb::Predict => write_predict(&mut a, &cohort.trajectories, config)?,
                Verb::Simulate => write_simulate(&mut a, &cohort, config)?,
                Verb::Cluster => write_cluster(&mut a, &cohort, config)?,
                Verb::Experiment => write_experiment(&mut a, &cohort.trajectories, config)?,
                Verb::Synth | Verb::Gradcheck => unreachable!(),
            }
        }
    }
    Ok(RunOutput {
        verb: verb.to_string(),
        run_dir: dir.to_path_buf(),
        files: a.files,
        headline,
    })
}

/// Creates `{out_dir}/{verb}-{timestamp}-seed{seed}` (with a numeric suffix
/// if that name is taken) and runs the verb there.
pub fn run_command(verb: Verb, config: &RunConfig) -> Result<RunOutput> {
    config.validate()?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string();
    let base = format!("{verb}-{stamp}-seed{}", config.seed);
    fs::create_dir_all(&config.out_dir)?;
    let mut dir = config.out_dir.join(&base);
    let mut n = 1;
    while dir.exists() {
        n += 1;
        dir = config.out_dir.join(format!("{base}-{n}"));
    }
    fs::create_dir(&dir)?;
    run_command_in(verb, config, &dir)
}

// ---------------------------------------------------------------------------
// command line

#[derive(Debug, Parser)]
#[command(name = "ibl-engage", version, about = "Personalized IBL engagement forecasting and intervention allocation")]
pub struct Cli {
    #[command(subcommand)]
    pub verb: VerbArgs,
}

#[derive(Debug, Subcommand)]
pub enum VerbArgs {
    /// Fit per-beneficiary attribute weights by grid search.
    Fit(Flags),
    /// Compare one-step test errors of personalized IBL and the shared LSTM.
    Predict(Flags),
    /// Simulate all allocation policies over the test weeks.
    Simulate(Flags),
    /// Cluster fitted weight profiles and score cluster counts.
    Cluster(Flags),
    /// Compare cluster-guided LSTM training regimens.
    Experiment(Flags),
    /// Check LSTM gradients against central differences.
    Gradcheck(Flags),
    /// Generate a synthetic cohort CSV.
    Synth(Flags),
}

impl VerbArgs {
    pub fn split(self) -> (Verb, Flags) {
        match self {
            VerbArgs::Fit(f) => (Verb::Fit, f),
            VerbArgs::Predict(f) => (Verb::Predict, f),
            VerbArgs::Simulate(f) => (Verb::Simulate, f),
            VerbArgs::Cluster(f) => (Verb::Cluster, f),
            VerbArgs::Experiment(f) => (Verb::Experiment, f),
            VerbArgs::Gradcheck(f) => (Verb::Gradcheck, f),
            VerbArgs::Synth(f) => (Verb::Synth, f),
        }
    }
}

/// Flags shared by every verb; each overrides the matching config value.
#[derive(Debug, Default, Args)]
pub struct Flags {
    /// JSON run configuration; flags take precedence over its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output root for run directories.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Cohort CSV (`beneficiary_id,week,engagement,intervention`).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Synthetic cohort size.
    #[arg(long)]
    pub n: Option<usize>,
    /// Synthetic trajectory length.
    #[arg(long)]
    pub weeks: Option<usize>,
    /// Synthetic archetype noise scale.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long)]
    pub train_weeks: Option<usize>,
    #[arg(long)]
    pub test_weeks: Option<usize>,
    /// Fraction of the cohort that may receive an intervention each week.
    #[arg(long)]
    pub budget: Option<f64>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// `exact_synthetic` or `lstm_generator`.
    #[arg(long)]
    pub counterfactual: Option<String>,
    /// Cluster count for assignments and regimens.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub k_min: Option<usize>,
    #[arg(long)]
    pub k_max: Option<usize>,
    #[arg(long)]
    pub restarts: Option<usize>,
    /// Keep IBL memory at the training weeks during one-step evaluation.
    #[arg(long)]
    pub frozen_ibl: bool,
    /// Report format, `csv` or `json`.
    #[arg(long)]
    pub format: Option<String>,
    /// Number of random models for `gradcheck`.
    #[arg(long)]
    pub models: Option<usize>,
}

impl Flags {
    /// Defaults, then the config file, then these flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($flag:expr => $($target:tt)+) => {
                if let Some(v) = $flag.clone() {
                    $($target)+ = v;
                }
            };
        }
        set!(self.seed => c.seed);
        set!(self.out => c.out_dir);
        if self.input.is_some() {
            c.input = self.input.clone();
        }
        set!(self.n => c.cohort.n);
        set!(self.weeks => c.cohort.weeks);
        set!(self.noise => c.cohort.noise);
        set!(self.separation => c.cohort.separation);
        set!(self.train_weeks => c.train_weeks);
        set!(self.test_weeks => c.test_weeks);
        set!(self.budget => c.budget_fraction);
        set!(self.threshold => c.threshold);
        set!(self.horizon => c.horizon);
        set!(self.epochs => c.lstm.epochs);
        set!(self.hidden => c.lstm.hidden);
        set!(self.k => c.cluster.k);
        set!(self.k_min => c.cluster.k_min);
        set!(self.k_max => c.cluster.k_max);
        set!(self.restarts => c.cluster.kmeans.restarts);
        set!(self.models => c.gradcheck.models);
        if self.frozen_ibl {
            c.online_ibl = false;
        }
        if let Some(mode) = &self.counterfactual {
            c.counterfactual = mode.parse()?;
        }
        if let Some(fmt) = &self.format {
            c.format = fmt.parse()?;
        }
        Ok(c)
    }
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    status: &'static str,
    error: &'a str,
    message: String,
    exit_code: i32,
}

/// Usage and configuration problems exit with 2, everything else with 1.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Usage(_) | Error::Config(_) => 2,
        _ => 1,
    }
}

pub fn error_record(err: &Error) -> String {
    serde_json::to_string(&ErrorRecord {
        status: "error",
        error: err.kind(),
        message: err.to_string(),
        exit_code: exit_code(err),
    })
    .expect("error record serializes")
}

/// Entry point shared by the binary and tests: parses `args`, runs the verb,
/// prints a JSON status record, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let err = Error::Usage(e.render().to_string().trim().to_owned());
            eprintln!("{}", error_record(&err));
            return 2;
        }
    };
    let (verb, flags) = cli.verb.split();
    match flags.resolve().and_then(|c| run_command(verb, &c)) {
        Ok(out) => {
            println!("{}", serde_json::json!({ "status": "ok", "verb": out.verb, "run_dir": out.run_dir, "files": out.files, "headline": out.headline }));
            0
        }
        Err(err) => {
            eprintln!("{}", error_record(&err));
            exit_code(&err)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verbs_parse() {
        for v in Verb::ALL {
            assert_eq!(v.as_str().parse::<Verb>().unwrap(), v);
        }
        assert!(matches!("train".parse::<Verb>(), Err(Error::Usage(_))));
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"seed": 3, "train_weeks": 20, "lstm": {"epochs": 7}}"#).unwrap();
        let flags = Flags {
            config: Some(path),
            seed: Some(11),
            counterfactual: Some("lstm_generator".into()),
            ..Flags::default()
        };
        let c = flags.resolve().unwrap();
        assert_eq!(c.seed, 11);
        assert_eq!(c.train_weeks, 20);
        assert_eq!(c.lstm.epochs, 7);
        assert_eq!(c.test_weeks, 14);
        assert_eq!(c.counterfactual, CounterfactualMode::LstmGenerator);
    }

    #[test]
    fn error_records_are_json() {
        let rec: serde_json::Value = serde_json::from_str(&error_record(&Error::config("bad"))).unwrap();
        assert_eq!(rec["error"], "config");
        assert_eq!(rec["exit_code"], 2);
        assert_eq!(exit_code(&Error::EmptyMemory), 1);
    }

    #[test]
    fn gradcheck_suite_is_tight() {
        for c in gradcheck_suite(5, 3, 4, 50) {
            assert!(c.max_relative_error < 1e-4, "{c:?}");
        }
    }
}
