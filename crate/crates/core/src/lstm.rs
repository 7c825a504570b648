//! Single-layer LSTM baseline over 7-week windows of (engagement, action).
//!
//! Gate rows are stacked in the order input, forget, output, candidate. The
//! final hidden state is mapped through a sigmoid readout, so predictions
//! always land in (0, 1). Training uses mini-batch Adam on mean squared error
//! and keeps the parameters with the best held-out loss.

use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecast::Forecaster;
use crate::trajectory::{Step, Trajectory};

pub const WINDOW: usize = 7;
pub const INPUT_SIZE: usize = 2;
pub const CHECKPOINT_VERSION: u32 = 1;

pub type WindowInputs = [[f64; INPUT_SIZE]; WINDOW];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    /// Index of the source trajectory; windows never span two of them.
    pub beneficiary: usize,
    pub inputs: WindowInputs,
    pub target: f64,
}

fn encode(step: &Step) -> [f64; INPUT_SIZE] {
    [step.engagement, if step.intervention { 1.0 } else { 0.0 }]
}

/// The last seven steps of `steps`, oldest first.
pub fn window_inputs(steps: &[Step]) -> Result<WindowInputs> {
    if steps.len() < WINDOW {
        return Err(Error::usage(format!(
            "LSTM input needs {WINDOW} steps, got {}",
            steps.len()
        )));
    }
    let mut out = [[0.0; INPUT_SIZE]; WINDOW];
    for (slot, step) in out.iter_mut().zip(&steps[steps.len() - WINDOW..]) {
        *slot = encode(step);
    }
    Ok(out)
}

/// Windows whose inputs and target all fall within the first `upto` weeks of
/// trajectory `index`.
pub fn trajectory_windows(traj: &Trajectory, index: usize, upto: usize) -> Vec<Window> {
    let len = upto.min(traj.len());
    (0..len.saturating_sub(WINDOW))
        .map(|s| {
            let mut inputs = [[0.0; INPUT_SIZE]; WINDOW];
            for (k, slot) in inputs.iter_mut().enumerate() {
                *slot = encode(&traj.steps[s + k]);
            }
            Window {
                beneficiary: index,
                inputs,
                target: traj.steps[s + WINDOW].engagement,
            }
        })
        .collect()
}

/// Sliding windows over the first `train_weeks` weeks of each trajectory.
pub fn make_windows(trajectories: &[Trajectory], train_weeks: usize) -> Vec<Window> {
    let mut out = Vec::new();
    for (i, traj) in trajectories.iter().enumerate() {
        if train_weeks.min(traj.len()) <= WINDOW {
            warn!(
                "skipping `{}`: {} usable weeks is too short for a {}-step window",
                traj.beneficiary_id,
                train_weeks.min(traj.len()),
                WINDOW
            );
            continue;
        }
        out.extend(trajectory_windows(traj, i, train_weeks));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LstmConfig {
    pub hidden: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Fraction of beneficiaries held out for model selection.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for LstmConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            batch_size: 32,
            epochs: 200,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl LstmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("hidden size, batch size and epochs must be positive"));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::config("learning rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("moment decays must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config("validation fraction must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    h: usize,
    wx: usize,
    wh: usize,
    b: usize,
    v: usize,
    c: usize,
    total: usize,
}

impl Layout {
    fn new(h: usize) -> Self {
        let wx = 0;
        let wh = wx + 4 * h * INPUT_SIZE;
        let b = wh + 4 * h * h;
        let v = b + 4 * h;
        let c = v + h;
        Self {
            h,
            wx,
            wh,
            b,
            v,
            c,
            total: c + 1,
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-step activations kept for backpropagation.
struct Trace {
    /// Post-activation gates per step, `4h` each: i, f, o, g.
    gates: Vec<Vec<f64>>,
    /// Cell states; `cells[0]` is the zero initial state.
    cells: Vec<Vec<f64>>,
    hiddens: Vec<Vec<f64>>,
    output: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmModel {
    layout: Layout,
    params: Vec<f64>,
}

impl PartialEq for Layout {
    fn eq(&self, other: &Self) -> bool {
        self.h == other.h
    }
}

impl LstmModel {
    pub fn zeros(hidden: usize) -> Self {
        let layout = Layout::new(hidden);
        Self {
            layout,
            params: vec![0.0; layout.total],
        }
    }

    /// Uniform initialization in `±1/sqrt(hidden)`.
    pub fn random(hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Self::zeros(hidden);
        let bound = 1.0 / (hidden as f64).sqrt();
        for p in &mut model.params {
            *p = rng.random_range(-bound..bound);
        }
        model
    }

    pub fn from_params(hidden: usize, params: Vec<f64>) -> Result<Self> {
        let layout = Layout::new(hidden);
        if params.len() != layout.total {
            return Err(Error::usage(format!(
                "hidden size {hidden} needs {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::usage("LSTM parameters must be finite"));
        }
        Ok(Self { layout, params })
    }

    pub fn hidden(&self) -> usize {
        self.layout.h
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    fn trace(&self, inputs: &WindowInputs) -> Trace {
        let Layout { h, wx, wh, b, v, c, .. } = self.layout;
        let p = &self.params;
        let mut gates = Vec::with_capacity(WINDOW);
        let mut cells = vec![vec![0.0; h]];
        let mut hiddens = vec![vec![0.0; h]];
        for x in inputs {
            let h_prev = hiddens.last().unwrap();
            let c_prev = cells.last().unwrap();
            let mut z = vec![0.0; 4 * h];
            for (r, zr) in z.iter_mut().enumerate() {
                let mut acc = p[b + r] + p[wx + r * INPUT_SIZE] * x[0] + p[wx + r * INPUT_SIZE + 1] * x[1];
                let row = &p[wh + r * h..wh + (r + 1) * h];
                for (w, hp) in row.iter().zip(h_prev) {
                    acc += w * hp;
                }
                *zr = acc;
            }
            for (r, zr) in z.iter_mut().enumerate() {
                *zr = if r < 3 * h { sigmoid(*zr) } else { zr.tanh() };
            }
            let mut c_new = vec![0.0; h];
            let mut h_new = vec![0.0; h];
            for j in 0..h {
                let (i, f, o, g) = (z[j], z[h + j], z[2 * h + j], z[3 * h + j]);
                c_new[j] = f * c_prev[j] + i * g;
                h_new[j] = o * c_new[j].tanh();
            }
            gates.push(z);
            cells.push(c_new);
            hiddens.push(h_new);
        }
        let h_last = hiddens.last().unwrap();
        let logit = p[c] + p[v..v + h].iter().zip(h_last).map(|(a, b)| a * b).sum::<f64>();
        Trace {
            gates,
            cells,
            hiddens,
            output: sigmoid(logit),
        }
    }

    /// Prediction in (0, 1) for a 7-step window, from zero initial state.
    pub fn forward(&self, inputs: &WindowInputs) -> f64 {
        self.trace(inputs).output
    }

    /// Adds `scale * d(output)/d(theta)` into `grad`.
    fn backward(&self, inputs: &WindowInputs, trace: &Trace, scale: f64, grad: &mut [f64]) {
        let Layout { h, wx, wh, b, v, c, .. } = self.layout;
        let p = &self.params;
        let y = trace.output;
        let dlogit = scale * y * (1.0 - y);
        let h_last = trace.hiddens.last().unwrap();
        grad[c] += dlogit;
        let mut dh = vec![0.0; h];
        for j in 0..h {
            grad[v + j] += dlogit * h_last[j];
            dh[j] = dlogit * p[v + j];
        }
        let mut dc = vec![0.0; h];
        let mut dz = vec![0.0; 4 * h];
        for t in (0..WINDOW).rev() {
            let z = &trace.gates[t];
            let c_t = &trace.cells[t + 1];
            let c_prev = &trace.cells[t];
            let h_prev = &trace.hiddens[t];
            for j in 0..h {
                let (i, f, o, g) = (z[j], z[h + j], z[2 * h + j], z[3 * h + j]);
                let tc = c_t[j].tanh();
                let d_o = dh[j] * tc;
                dc[j] += dh[j] * o * (1.0 - tc * tc);
                let d_i = dc[j] * g;
                let d_g = dc[j] * i;
                let d_f = dc[j] * c_prev[j];
                dz[j] = d_i * i * (1.0 - i);
                dz[h + j] = d_f * f * (1.0 - f);
                dz[2 * h + j] = d_o * o * (1.0 - o);
                dz[3 * h + j] = d_g * (1.0 - g * g);
                dc[j] *= f;
            }
            let x = &inputs[t];
            dh.iter_mut().for_each(|d| *d = 0.0);
            for (r, &dzr) in dz.iter().enumerate() {
                grad[b + r] += dzr;
                grad[wx + r * INPUT_SIZE] += dzr * x[0];
                grad[wx + r * INPUT_SIZE + 1] += dzr * x[1];
                let row = wh + r * h;
                for k in 0..h {
                    grad[row + k] += dzr * h_prev[k];
                    dh[k] += p[row + k] * dzr;
                }
            }
        }
    }

    /// Squared error of one window and its gradient.
    pub fn loss_and_gradient(&self, window: &Window) -> (f64, Vec<f64>) {
        let trace = self.trace(&window.inputs);
        let err = trace.output - window.target;
        let mut grad = vec![0.0; self.layout.total];
        self.backward(&window.inputs, &trace, 2.0 * err, &mut grad);
        (err * err, grad)
    }

    pub fn predict_windows(&self, windows: &[Window]) -> Vec<f64> {
        windows.par_iter().map(|w| self.forward(&w.inputs)).collect()
    }

    pub fn mse(&self, windows: &[Window]) -> f64 {
        if windows.is_empty() {
            return 0.0;
        }
        let preds = self.predict_windows(windows);
        preds
            .iter()
            .zip(windows)
            .map(|(p, w)| (p - w.target).powi(2))
            .sum::<f64>()
            / windows.len() as f64
    }
}

impl Forecaster for LstmModel {
    fn predict_next(&self, history: &[Step]) -> Result<f64> {
        Ok(self.forward(&window_inputs(history)?).clamp(0.0, 1.0))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub train_windows: usize,
    pub validation_windows: usize,
}

fn split_by_beneficiary(windows: &[Window], fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut ids: Vec<usize> = windows.iter().map(|w| w.beneficiary).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.shuffle(rng);
    let n_val = if ids.len() < 2 || fraction == 0.0 {
        0
    } else {
        ((ids.len() as f64 * fraction).round() as usize).clamp(1, ids.len() - 1)
    };
    let held: std::collections::HashSet<usize> = ids[..n_val].iter().copied().collect();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, w) in windows.iter().enumerate() {
        if held.contains(&w.beneficiary) {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    (train, val)
}

/// Trains a fresh model. With a single beneficiary (or a zero validation
/// fraction) the training windows double as the selection set.
pub fn lstm_train(windows: &[Window], config: &LstmConfig) -> Result<(LstmModel, TrainReport)> {
    config.validate()?;
    if windows.is_empty() {
        return Err(Error::usage("cannot train an LSTM on zero windows"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = LstmModel::random(config.hidden, rng.random());
    let (mut train_idx, val_idx) = split_by_beneficiary(windows, config.validation_fraction, &mut rng);
    let val_windows: Vec<Window> = if val_idx.is_empty() {
        train_idx.iter().map(|&i| windows[i].clone()).collect()
    } else {
        val_idx.iter().map(|&i| windows[i].clone()).collect()
    };

    let n = model.param_count();
    let mut m = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut step = 0usize;
    let mut best = (f64::INFINITY, model.clone(), 0usize);
    let mut report = TrainReport {
        train_windows: train_idx.len(),
        validation_windows: val_idx.len(),
        ..TrainReport::default()
    };

    for epoch in 1..=config.epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_se = 0.0;
        for batch in train_idx.chunks(config.batch_size) {
            step += 1;
            let parts: Vec<(f64, Vec<f64>)> = batch
                .par_iter()
                .map(|&i| model.loss_and_gradient(&windows[i]))
                .collect();
            let mut grad = vec![0.0; n];
            let mut batch_se = 0.0;
            for (se, g) in &parts {
                batch_se += se;
                for (acc, gi) in grad.iter_mut().zip(g) {
                    *acc += gi;
                }
            }
            if !batch_se.is_finite() {
                return Err(Error::TrainingDivergence { step });
            }
            epoch_se += batch_se;
            let inv = 1.0 / batch.len() as f64;
            let bc1 = 1.0 - config.beta1.powi(step as i32);
            let bc2 = 1.0 - config.beta2.powi(step as i32);
            for k in 0..n {
                let g = grad[k] * inv;
                m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g;
                s[k] = config.beta2 * s[k] + (1.0 - config.beta2) * g * g;
                let mh = m[k] / bc1;
                let sh = s[k] / bc2;
                model.params[k] -= config.learning_rate * mh / (sh.sqrt() + config.epsilon);
            }
            if model.params.iter().any(|p| !p.is_finite()) {
                return Err(Error::TrainingDivergence { step });
            }
        }
        report.train_loss.push(epoch_se / train_idx.len() as f64);
        let val = model.mse(&val_windows);
        if !val.is_finite() {
            return Err(Error::TrainingDivergence { step });
        }
        report.validation_loss.push(val);
        if val < best.0 {
            best = (val, model.clone(), epoch);
        }
    }
    report.best_epoch = best.2;
    Ok((best.1, report))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    pub parameters_checked: usize,
}

/// Absolute error is used when both gradients are below this magnitude.
pub const GRADCHECK_ABS_FLOOR: f64 = 1e-8;
pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_MIN_SAMPLES: usize = 50;

/// Compares backpropagated gradients of the squared error against central
/// differences on a seeded random subset of parameters.
pub fn gradient_check(model: &LstmModel, window: &Window, samples: usize, seed: u64) -> GradientCheck {
    let (_, analytic) = model.loss_and_gradient(window);
    let n = model.param_count();
    let count = samples.max(GRADCHECK_MIN_SAMPLES).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, n, count).into_vec();
    let loss = |m: &LstmModel| (m.forward(&window.inputs) - window.target).powi(2);
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for &k in &picks {
        let orig = probe.params[k];
        probe.params[k] = orig + GRADCHECK_STEP;
        let up = loss(&probe);
        probe.params[k] = orig - GRADCHECK_STEP;
        let down = loss(&probe);
        probe.params[k] = orig;
        let numeric = (up - down) / (2.0 * GRADCHECK_STEP);
        let a = analytic[k];
        let denom = a.abs().max(numeric.abs());
        let err = if denom < GRADCHECK_ABS_FLOOR {
            (a - numeric).abs()
        } else {
            (a - numeric).abs() / denom
        };
        worst = worst.max(err);
    }
    GradientCheck {
        max_relative_error: worst,
        parameters_checked: count,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub input_size: usize,
    pub window: usize,
    pub hidden: usize,
    pub param_count: usize,
    pub seed: u64,
    pub config: LstmConfig,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(model: &LstmModel, config: &LstmConfig) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            input_size: INPUT_SIZE,
            window: WINDOW,
            hidden: model.hidden(),
            param_count: model.param_count(),
            seed: config.seed,
            config: config.clone(),
            params: model.params.clone(),
        }
    }

    pub fn into_model(self) -> Result<LstmModel> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::usage(format!(
                "unsupported checkpoint version {}",
                self.format_version
            )));
        }
        if self.input_size != INPUT_SIZE || self.window != WINDOW {
            return Err(Error::usage("checkpoint shape does not match this build"));
        }
        LstmModel::from_params(self.hidden, self.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
