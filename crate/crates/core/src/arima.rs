//! Subset ARIMA with conditional-sum-of-squares estimation.
//!
//! The model for the `d`-times differenced, mean-centred series `z` is
//!
//! ```text
//! z[t] = sum_i alpha_i * z[t - ar_lag_i] + e[t] + sum_j theta_j * e[t - ma_lag_j]
//! ```
//!
//! with lags in 15-minute steps. Estimation conditions on the first
//! `max(ar_lags)` observations and sets pre-sample innovations to zero, then
//! minimises the sum of squared innovations with a damped Gauss-Newton
//! (Levenberg-Marquardt) iteration whose Jacobian comes from differentiating
//! the innovation recursion. A small ridge term `RIDGE * S0 * |beta|^2`,
//! with `S0` the sum of squares at zero coefficients, keeps the normal
//! equations well posed when AR and MA factors nearly cancel. Steps whose
//! inputs are masked contribute no residual and reset their innovation to
//! zero.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{MarketDataset, Timestamp, STEPS_PER_DAY};
use crate::error::{Error, Result};
use crate::metrics::EvalResult;
use crate::numeric::{compensated_sum, KahanSum};

pub const MAX_ITERATIONS: usize = 200;
pub const RELATIVE_TOLERANCE: f64 = 1e-8;
/// Characteristic roots closer to the unit circle than this (in modulus of
/// the reciprocal root) trigger a warning.
pub const ROOT_WARNING_MODULUS: f64 = 1.0 / 1.05;
/// Ridge weight relative to the objective at zero coefficients. It selects a
/// point on the flat ridge of near-cancelling AR and MA factors and shrinks
/// well-identified coefficients by about this fraction.
pub const RIDGE: f64 = 2e-3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetArimaSpec {
    pub ar_lags: Vec<usize>,
    pub ma_lags: Vec<usize>,
    pub d: usize,
}

impl Default for SubsetArimaSpec {
    /// Lags at 15 and 30 minutes and one day, first differences.
    fn default() -> Self {
        Self {
            ar_lags: vec![1, 2, STEPS_PER_DAY],
            ma_lags: vec![1, 2, STEPS_PER_DAY],
            d: 1,
        }
    }
}

impl SubsetArimaSpec {
    pub fn new(ar_lags: Vec<usize>, ma_lags: Vec<usize>, d: usize) -> Result<Self> {
        let spec = Self { ar_lags, ma_lags, d };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, lags) in [("ar_lags", &self.ar_lags), ("ma_lags", &self.ma_lags)] {
            if lags.contains(&0) || lags.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(format!(
                    "{name} must be positive, sorted and distinct: {lags:?}"
                )));
            }
        }
        if self.d > 1 {
            return Err(Error::Config(format!("differencing order must be 0 or 1, got {}", self.d)));
        }
        Ok(())
    }

    pub fn max_ar_lag(&self) -> usize {
        self.ar_lags.last().copied().unwrap_or(0)
    }

    pub fn max_lag(&self) -> usize {
        self.max_ar_lag().max(self.ma_lags.last().copied().unwrap_or(0))
    }

    fn n_params(&self) -> usize {
        self.ar_lags.len() + self.ma_lags.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub iterations: usize,
    /// Final conditional sum of squared innovations.
    pub objective: f64,
    /// Ridge weight applied to `|beta|^2` during the fit.
    pub ridge: f64,
    pub converged: bool,
    /// Innovations that entered the objective.
    pub n_residuals: usize,
    pub warnings: Vec<String>,
    pub presample: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArimaModel {
    pub spec: SubsetArimaSpec,
    pub alpha: Vec<f64>,
    pub theta: Vec<f64>,
    /// Innovation variance, USD^2/MWh^2.
    pub sigma2: f64,
    /// Mean of the differenced training series, restored at forecast time.
    pub mean: f64,
    pub fit_report: FitReport,
}

impl ArimaModel {
    /// A model with given coefficients and no fit history.
    pub fn with_coefficients(spec: SubsetArimaSpec, alpha: Vec<f64>, theta: Vec<f64>, mean: f64) -> Result<Self> {
        spec.validate()?;
        if alpha.len() != spec.ar_lags.len() || theta.len() != spec.ma_lags.len() {
            return Err(Error::Config("coefficient counts do not match the lag sets".into()));
        }
        Ok(Self {
            spec,
            alpha,
            theta,
            sigma2: 0.0,
            mean,
            fit_report: FitReport {
                iterations: 0,
                objective: 0.0,
                ridge: 0.0,
                converged: true,
                n_residuals: 0,
                warnings: Vec::new(),
                presample: PRESAMPLE_NOTE.into(),
            },
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

const PRESAMPLE_NOTE: &str =
    "conditioned on the first max(ar_lags) observations; pre-sample innovations set to 0";

/// `d`-th order forward difference.
pub fn difference(series: &[f64], d: usize) -> Result<Vec<f64>> {
    if series.len() <= d {
        return Err(Error::InsufficientData(format!(
            "cannot difference {} values at order {d}",
            series.len()
        )));
    }
    let mut out = series.to_vec();
    for _ in 0..d {
        out = out.windows(2).map(|w| w[1] - w[0]).collect();
    }
    Ok(out)
}

/// Inverse of first-order [`difference`] given the first original value.
pub fn undifference(diffs: &[f64], initial: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(diffs.len() + 1);
    let mut level = initial;
    out.push(level);
    for &dv in diffs {
        level += dv;
        out.push(level);
    }
    out
}

fn difference_masked(x: &[f64], ok: &[bool], d: usize) -> (Vec<f64>, Vec<bool>) {
    match d {
        0 => (x.to_vec(), ok.to_vec()),
        _ => (
            x.windows(2).map(|w| w[1] - w[0]).collect(),
            ok.windows(2).map(|w| w[0] && w[1]).collect(),
        ),
    }
}

/// Innovation recursion over a centred series.
struct Recursion<'a> {
    spec: &'a SubsetArimaSpec,
    alpha: &'a [f64],
    theta: &'a [f64],
}

impl Recursion<'_> {
    /// Conditional one-step prediction of `z[t]` from earlier values, if
    /// every required observation is available.
    #[inline]
    fn predict(&self, z: &[f64], ok: &[bool], e: &[f64], t: usize) -> Option<f64> {
        if t < self.spec.max_ar_lag() {
            return None;
        }
        let mut acc = 0.0;
        for (a, &lag) in self.alpha.iter().zip(&self.spec.ar_lags) {
            if !ok[t - lag] {
                return None;
            }
            acc += a * z[t - lag];
        }
        for (th, &lag) in self.theta.iter().zip(&self.spec.ma_lags) {
            if t >= lag {
                acc += th * e[t - lag];
            }
        }
        Some(acc)
    }

    /// Innovations, with `used[t]` marking those that enter the objective.
    fn innovations(&self, z: &[f64], ok: &[bool]) -> (Vec<f64>, Vec<bool>) {
        let n = z.len();
        let mut e = vec![0.0; n];
        let mut used = vec![false; n];
        for t in 0..n {
            if !ok[t] {
                continue;
            }
            if let Some(p) = self.predict(z, ok, &e, t) {
                e[t] = z[t] - p;
                used[t] = true;
            }
        }
        (e, used)
    }

    /// Innovations plus `d e[t] / d params`, row-major `n x k`.
    fn innovations_with_jacobian(&self, z: &[f64], ok: &[bool]) -> (Vec<f64>, Vec<bool>, Vec<f64>) {
        let (e, used) = self.innovations(z, ok);
        let n = z.len();
        let p = self.alpha.len();
        let k = p + self.theta.len();
        let mut jac = vec![0.0; n * k];
        for t in 0..n {
            if !used[t] {
                continue;
            }
            for (i, &lag) in self.spec.ar_lags.iter().enumerate() {
                jac[t * k + i] = -z[t - lag];
            }
            for (j, &lag) in self.spec.ma_lags.iter().enumerate() {
                if t >= lag {
                    jac[t * k + p + j] = -e[t - lag];
                }
            }
            for (th, &lag) in self.theta.iter().zip(&self.spec.ma_lags) {
                if t >= lag {
                    for c in 0..k {
                        jac[t * k + c] -= th * jac[(t - lag) * k + c];
                    }
                }
            }
        }
        (e, used, jac)
    }
}

fn sse(e: &[f64], used: &[bool]) -> f64 {
    compensated_sum(e.iter().zip(used).filter(|(_, u)| **u).map(|(v, _)| v * v))
}

/// Conditional sum of squares and its gradient in `(alpha, theta)`, exposed
/// for gradient checks.
pub fn css_objective(series: &[f64], spec: &SubsetArimaSpec, alpha: &[f64], theta: &[f64]) -> Result<(f64, Vec<f64>)> {
    spec.validate()?;
    let y = difference(series, spec.d)?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let z: Vec<f64> = y.iter().map(|v| v - mean).collect();
    let ok = vec![true; z.len()];
    let rec = Recursion { spec, alpha, theta };
    let (e, used, jac) = rec.innovations_with_jacobian(&z, &ok);
    let k = spec.n_params();
    let mut grad = vec![0.0; k];
    for t in 0..z.len() {
        if used[t] {
            for c in 0..k {
                grad[c] += 2.0 * e[t] * jac[t * k + c];
            }
        }
    }
    Ok((sse(&e, &used), grad))
}

/// Fits a fully observed series.
pub fn fit(series: &[f64], spec: &SubsetArimaSpec) -> Result<ArimaModel> {
    fit_masked(series, &vec![true; series.len()], spec)
}

/// Fits a series whose invalid steps are marked `false` in `valid`.
pub fn fit_masked(series: &[f64], valid: &[bool], spec: &SubsetArimaSpec) -> Result<ArimaModel> {
    spec.validate()?;
    if series.len() != valid.len() {
        return Err(Error::Data("series and mask lengths differ".into()));
    }
    let need = 3 * spec.max_lag().max(1) + spec.d;
    if series.len() < need {
        return Err(Error::InsufficientData(format!(
            "{} observations, need at least {need} for lags {:?}/{:?}",
            series.len(),
            spec.ar_lags,
            spec.ma_lags
        )));
    }
    if series.iter().zip(valid).any(|(v, ok)| *ok && !v.is_finite()) {
        return Err(Error::Data("non-finite value marked valid".into()));
    }
    let (y, ok) = difference_masked(series, valid, spec.d);
    let mut acc = KahanSum::new();
    let mut n_ok = 0usize;
    for (v, o) in y.iter().zip(&ok) {
        if *o {
            acc.add(*v);
            n_ok += 1;
        }
    }
    let k = spec.n_params();
    if n_ok <= k {
        return Err(Error::InsufficientData(format!(
            "{n_ok} valid differenced observations for {k} parameters"
        )));
    }
    let mean = acc.total() / n_ok as f64;
    let z: Vec<f64> = y
        .iter()
        .zip(&ok)
        .map(|(v, o)| if *o { v - mean } else { 0.0 })
        .collect();

    let p = spec.ar_lags.len();
    let mut beta = vec![0.0; k];
    let sse_at = |beta: &[f64]| {
        let rec = Recursion {
            spec,
            alpha: &beta[..p],
            theta: &beta[p..],
        };
        let (e, used) = rec.innovations(&z, &ok);
        sse(&e, &used)
    };
    let ridge = RIDGE * sse_at(&beta);
    let eval = |beta: &[f64]| sse_at(beta) + ridge * beta.iter().map(|b| b * b).sum::<f64>();

    let mut objective = eval(&beta);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let rec = Recursion {
            spec,
            alpha: &beta[..p],
            theta: &beta[p..],
        };
        let (e, used, jac) = rec.innovations_with_jacobian(&z, &ok);
        let mut jtj = DMatrix::<f64>::zeros(k, k);
        let mut jte = DVector::<f64>::zeros(k);
        for t in 0..z.len() {
            if !used[t] {
                continue;
            }
            let row = &jac[t * k..(t + 1) * k];
            for a in 0..k {
                jte[a] += row[a] * e[t];
                for b in a..k {
                    jtj[(a, b)] += row[a] * row[b];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                jtj[(a, b)] = jtj[(b, a)];
            }
            jtj[(a, a)] += ridge;
            jte[a] += ridge * beta[a];
        }
        if jte.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite gradient during CSS fit".into()));
        }
        let scale = (jtj.trace() / k.max(1) as f64).max(1.0);
        if jte.norm() <= 1e-12 * scale * (1.0 + objective.sqrt()) {
            converged = true;
            break;
        }

        let mut accepted = None;
        while lambda < 1e12 {
            let mut lhs = jtj.clone();
            for a in 0..k {
                lhs[(a, a)] += lambda * (jtj[(a, a)] + 1e-12 * scale);
            }
            let Some(chol) = lhs.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = chol.solve(&(-&jte));
            let trial: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + s).collect();
            let trial_obj = eval(&trial);
            if trial_obj.is_finite() && trial_obj <= objective {
                accepted = Some((trial, trial_obj));
                lambda = (lambda / 10.0).max(1e-12);
                break;
            }
            lambda *= 10.0;
        }
        let Some((trial, trial_obj)) = accepted else {
            // No damped step improves the objective: a stationary point.
            converged = true;
            break;
        };
        let rel = (objective - trial_obj) / objective.max(f64::MIN_POSITIVE);
        beta = trial;
        objective = trial_obj;
        if rel < RELATIVE_TOLERANCE {
            converged = true;
            break;
        }
    }
    if !objective.is_finite() {
        return Err(Error::Numerical("CSS objective is not finite".into()));
    }

    let rec = Recursion {
        spec,
        alpha: &beta[..p],
        theta: &beta[p..],
    };
    let (e, used) = rec.innovations(&z, &ok);
    let n_res = used.iter().filter(|u| **u).count();
    let final_sse = sse(&e, &used);
    if n_res == 0 {
        return Err(Error::InsufficientData("no innovations could be formed".into()));
    }
    let mut warnings = root_warnings(spec, &beta[..p], &beta[p..]);
    if !converged {
        warnings.push(format!("no convergence after {MAX_ITERATIONS} iterations"));
        log::warn!("ARIMA fit did not converge after {MAX_ITERATIONS} iterations");
    }
    Ok(ArimaModel {
        spec: spec.clone(),
        alpha: beta[..p].to_vec(),
        theta: beta[p..].to_vec(),
        sigma2: final_sse / n_res as f64,
        mean,
        fit_report: FitReport {
            iterations,
            objective: final_sse,
            ridge,
            converged,
            n_residuals: n_res,
            warnings,
            presample: PRESAMPLE_NOTE.into(),
        },
    })
}

/// Largest modulus among the reciprocal roots of `1 - sum c_l B^l`.
fn max_reciprocal_root(lags: &[usize], coefs: &[f64]) -> Option<f64> {
    let order = *lags.last()?;
    if order > 512 || coefs.iter().all(|c| *c == 0.0) {
        return Some(0.0);
    }
    let mut companion = DMatrix::<f64>::zeros(order, order);
    for (&lag, &c) in lags.iter().zip(coefs) {
        companion[(0, lag - 1)] = c;
    }
    for i in 1..order {
        companion[(i, i - 1)] = 1.0;
    }
    companion
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
}

fn root_warnings(spec: &SubsetArimaSpec, alpha: &[f64], theta: &[f64]) -> Vec<String> {
    let mut out = Vec::new();
    if let Some(r) = max_reciprocal_root(&spec.ar_lags, alpha) {
        if r >= ROOT_WARNING_MODULUS {
            out.push(format!("AR polynomial near or outside stationarity (max |reciprocal root| = {r:.4})"));
        }
    }
    let neg: Vec<f64> = theta.iter().map(|t| -t).collect();
    if let Some(r) = max_reciprocal_root(&spec.ma_lags, &neg) {
        if r >= ROOT_WARNING_MODULUS {
            out.push(format!("MA polynomial near or outside invertibility (max |reciprocal root| = {r:.4})"));
        }
    }
    out
}

/// One-step-ahead predictions on the original scale.
///
/// Entry `t` (for `t` in `0..=len`) predicts `series[t]` from observations
/// strictly before `t`; entry `len` is the out-of-sample forecast. `None`
/// marks steps whose inputs are masked or precede the lag margin.
pub fn one_step_predictions(model: &ArimaModel, series: &[f64], valid: &[bool]) -> Vec<Option<f64>> {
    let d = model.spec.d;
    let n = series.len();
    let mut out = vec![None; n + 1];
    if n < d {
        return out;
    }
    let (y, ok) = difference_masked(series, valid, d);
    let z: Vec<f64> = y
        .iter()
        .zip(&ok)
        .map(|(v, o)| if *o { v - model.mean } else { 0.0 })
        .collect();
    let rec = Recursion {
        spec: &model.spec,
        alpha: &model.alpha,
        theta: &model.theta,
    };
    let m = z.len();
    let mut e = vec![0.0; m];
    for t in 0..=m {
        let zhat = rec.predict(&z, &ok, &e, t);
        if t < m && ok[t] {
            if let Some(p) = zhat {
                e[t] = z[t] - p;
            }
        }
        let level_idx = t + d;
        let level = if d == 0 {
            Some(0.0)
        } else {
            valid[level_idx - 1].then(|| series[level_idx - 1])
        };
        if let (Some(zh), Some(level)) = (zhat, level) {
            out[level_idx] = Some(level + model.mean + zh);
        }
    }
    out
}

/// Forecast of the value following `history`.
pub fn forecast_one(model: &ArimaModel, history: &[f64]) -> Result<f64> {
    let need = model.spec.max_lag() + model.spec.d;
    if history.len() < need.max(1) {
        return Err(Error::InsufficientData(format!(
            "forecast needs {need} observations, got {}",
            history.len()
        )));
    }
    if history.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("history contains non-finite values".into()));
    }
    let valid = vec![true; history.len()];
    one_step_predictions(model, history, &valid)[history.len()]
        .ok_or_else(|| Error::InsufficientData("history too short for the lag set".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RollingConfig {
    pub train_days: usize,
    pub test_days: usize,
}

impl Default for RollingConfig {
    fn default() -> Self {
        Self {
            train_days: 20,
            test_days: 5,
        }
    }
}

impl RollingConfig {
    pub fn validate(&self, spec: &SubsetArimaSpec) -> Result<()> {
        if self.test_days == 0 {
            return Err(Error::Config("test window must be at least one day".into()));
        }
        let train = self.train_days * STEPS_PER_DAY;
        if train < 3 * spec.max_lag().max(1) + spec.d {
            return Err(Error::Config(format!(
                "training window of {} days is too short for lag {}",
                self.train_days,
                spec.max_lag()
            )));
        }
        Ok(())
    }
}

/// Step ranges of one rolling-origin window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowBounds {
    pub train: std::ops::Range<usize>,
    pub test: std::ops::Range<usize>,
}

/// Windows over `n_steps` observations: each window trains on
/// `train_days` and tests on the following `test_days`, and origins advance
/// by `test_days` while the test window fits entirely in the data.
pub fn rolling_windows(n_steps: usize, cfg: &RollingConfig) -> Vec<WindowBounds> {
    let train = cfg.train_days * STEPS_PER_DAY;
    let test = cfg.test_days * STEPS_PER_DAY;
    if test == 0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut origin = 0;
    while origin + train + test <= n_steps {
        out.push(WindowBounds {
            train: origin..origin + train,
            test: origin + train..origin + train + test,
        });
        origin += test;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowTrace {
    pub origin: Timestamp,
    pub test_start: Timestamp,
    pub test_end: Timestamp,
    pub n_predictions: usize,
    pub mae: Option<f64>,
    pub model: Option<ArimaModel>,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RollingResult {
    pub eval: EvalResult,
    /// Persistence forecast (previous observed price) on the same test points.
    pub persistence: EvalResult,
    pub windows: Vec<WindowTrace>,
}

/// Rolling-origin backtest of one-step-ahead forecasts on the real-time price.
///
/// Windows are fitted in parallel and merged in origin order. Test steps
/// whose target or inputs are masked are skipped; a window whose training
/// block cannot be fitted is skipped and recorded in its trace.
pub fn rolling_evaluate(ds: &MarketDataset, spec: &SubsetArimaSpec, cfg: &RollingConfig) -> Result<RollingResult> {
    spec.validate()?;
    cfg.validate(spec)?;
    let x = ds.rt_price.values();
    let ok = ds.rt_price.valid();
    let windows = rolling_windows(x.len(), cfg);
    if windows.is_empty() {
        return Err(Error::InsufficientData(format!(
            "span of {} days is shorter than train + test = {} days",
            x.len() / STEPS_PER_DAY,
            cfg.train_days + cfg.test_days
        )));
    }

    type WindowOut = (WindowTrace, Vec<(Timestamp, f64, f64)>, Vec<(Timestamp, f64, f64)>);
    let results: Vec<WindowOut> = windows
        .par_iter()
        .map(|w| {
            let mut trace = WindowTrace {
                origin: ds.timestamp(w.train.start),
                test_start: ds.timestamp(w.test.start),
                test_end: ds.timestamp(w.test.end - 1),
                n_predictions: 0,
                mae: None,
                model: None,
                skipped: None,
            };
            let model = match fit_masked(&x[w.train.clone()], &ok[w.train.clone()], spec) {
                Ok(m) => m,
                Err(e) => {
                    log::warn!("rolling window at {} skipped: {e}", trace.origin);
                    trace.skipped = Some(e.to_string());
                    return (trace, Vec::new(), Vec::new());
                }
            };
            let span = w.train.start..w.test.end;
            let preds = one_step_predictions(&model, &x[span.clone()], &ok[span]);
            let mut points = Vec::new();
            let mut naive = Vec::new();
            for t in w.test.clone() {
                let local = t - w.train.start;
                if !ok[t] {
                    continue;
                }
                if let Some(p) = preds[local] {
                    let ts = ds.timestamp(t);
                    points.push((ts, x[t], p));
                    if ok[t - 1] {
                        naive.push((ts, x[t], x[t - 1]));
                    }
                }
            }
            if points.is_empty() {
                log::warn!("rolling window at {} has no valid test points", trace.origin);
                trace.skipped = Some("no valid test points".into());
            } else {
                let m: f64 = points.iter().map(|(_, r, p)| (r - p).abs()).sum::<f64>() / points.len() as f64;
                trace.mae = Some(m);
            }
            trace.n_predictions = points.len();
            trace.model = Some(model);
            (trace, points, naive)
        })
        .collect();

    let mut traces = Vec::with_capacity(results.len());
    let mut all = Vec::new();
    let mut all_naive = Vec::new();
    for (t, p, n) in results {
        traces.push(t);
        all.extend(p);
        all_naive.extend(n);
    }
    if all.is_empty() {
        return Err(Error::InsufficientData("no rolling window produced a valid forecast".into()));
    }
    Ok(RollingResult {
        eval: EvalResult::from_points(all)?,
        persistence: EvalResult::from_points(all_naive)?,
        windows: traces,
    })
}
