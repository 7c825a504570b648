//! Personalized instance-based learning (IBL) forecasters for weekly
//! engagement, TARI ranking for budgeted interventions, and simulation and
//! analysis tooling around them.
//!
//! Module map:
//!
//! - [`ibl`]: memory activation, retrieval probabilities, and blending
//! - [`personalize`]: model tracing and attribute-weight grid search
//! - [`forecast`]: the forecaster contract and iterated forecasting
//! - [`lstm`]: the shared recurrent baseline and gradient checker
//! - [`tari`]: time-to-disengagement, TARI scores, and allocation policies
//! - [`sim`]: synthetic cohorts, counterfactuals, and policy simulation
//! - [`analyze`]: weight-profile clustering and LSTM training regimens
//! - [`data`], [`report`], [`config`], [`commands`]: the CLI surface

pub mod analyze;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod forecast;
pub mod ibl;
pub mod lstm;
pub mod personalize;
pub mod report;
pub mod rng;
pub mod sim;
pub mod tari;
pub mod trajectory;

pub use error::{Error, Result};
pub use forecast::{forecast_iterated, ForecastQuery, Forecaster, IblForecaster};
pub use ibl::{Context, IblParams, Instance, MemoryStore, WeightProfile};
pub use trajectory::{Step, Trajectory};
