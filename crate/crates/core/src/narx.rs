//! Feedforward network with an exogenous window and a price/demand history.
//!
//! The input for target step `t` is the exogenous feature row of each step
//! `t-W+1..=t` followed by the observed (price, demand) pairs of steps
//! `t-D..t-1`, oldest first. Exogenous rows reuse the feature builder with the
//! real-time streams removed, one past hour and four future hours, which gives
//! 19 values per step. Prediction is always teacher-forced: the history holds
//! observed values, never the network's own output.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{MarketDataset, StreamKind, Timestamp};
use crate::error::{Error, Result};
use crate::features::{fill_row, FeatureSpec};
use crate::metrics::EvalResult;
use crate::numeric::KahanSum;

/// Standard deviations below this are treated as this value.
pub const SD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mae,
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NarxConfig {
    /// Exogenous window width in steps.
    pub window: usize,
    /// History depth in steps.
    pub history: usize,
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub loss: LossKind,
    /// Consecutive epochs of rising validation loss before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Epochs without a new best validation loss before the rate is halved.
    pub lr_plateau_epochs: usize,
    pub seed: u64,
}

impl Default for NarxConfig {
    fn default() -> Self {
        Self {
            window: 16,
            history: 16,
            hidden_layers: 1,
            hidden_units: 10,
            loss: LossKind::Mae,
            patience: 6,
            max_epochs: 60,
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 64,
            lr_plateau_epochs: 3,
            seed: 42,
        }
    }
}

impl NarxConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.window == 0 || self.history == 0 {
            return bad("narx window and history must be >= 1");
        }
        if !(1..=3).contains(&self.hidden_layers) || self.hidden_units == 0 {
            return bad("narx needs 1..=3 hidden layers of >= 1 unit");
        }
        if self.patience == 0 || self.batch_size == 0 || self.lr_plateau_epochs == 0 {
            return bad("patience, batch_size and lr_plateau_epochs must be >= 1");
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("learning_rate must be > 0 and momentum in [0, 1)");
        }
        Ok(())
    }

    /// Exogenous per-step feature layout.
    pub fn exogenous_spec() -> FeatureSpec {
        FeatureSpec::new(1, 4).with_streams([StreamKind::DemandForecast, StreamKind::DaPrice, StreamKind::Wind])
    }

    pub fn input_len(&self) -> usize {
        Self::exogenous_spec().len() * self.window + 2 * self.history
    }

    /// First and last target step with a full input window.
    pub fn usable_steps(&self, ds: &MarketDataset) -> Option<(usize, usize)> {
        let exo = Self::exogenous_spec().usable_steps(ds)?;
        let first = (*exo.start() + self.window - 1).max(self.history);
        (first <= *exo.end()).then_some((first, *exo.end()))
    }
}

/// Multilayer perceptron with sigmoid hidden layers and one linear output.
/// Parameters are stored flat, layer by layer: weights row-major
/// (out x in), then biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub params: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Mlp {
    pub fn zeros(sizes: Vec<usize>) -> Self {
        let n = sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum();
        Self {
            sizes,
            params: vec![0.0; n],
        }
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn random(sizes: Vec<usize>, rng: &mut impl Rng) -> Self {
        let mut net = Self::zeros(sizes);
        let mut off = 0;
        for l in 0..net.sizes.len() - 1 {
            let (n_in, n_out) = (net.sizes[l], net.sizes[l + 1]);
            let bound = 1.0 / (n_in as f64).sqrt();
            for p in &mut net.params[off..off + n_out * n_in + n_out] {
                *p = rng.random_range(-bound..bound);
            }
            off += n_out * n_in + n_out;
        }
        net
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn layer(&self, l: usize, off: usize) -> (&[f64], &[f64]) {
        let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
        let w = &self.params[off..off + n_out * n_in];
        let b = &self.params[off + n_out * n_in..off + n_out * n_in + n_out];
        (w, b)
    }

    /// Activations of every layer, input first.
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let last = self.sizes.len() - 2;
        let mut acts = vec![x.to_vec()];
        let mut off = 0;
        for l in 0..=last {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (w, b) = self.layer(l, off);
            let input = &acts[l];
            let out: Vec<f64> = (0..n_out)
                .map(|j| {
                    let z = b[j] + w[j * n_in..(j + 1) * n_in].iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                    if l == last { z } else { sigmoid(z) }
                })
                .collect();
            acts.push(out);
            off += n_out * n_in + n_out;
        }
        acts
    }

    pub fn forward(&self, x: &[f64]) -> f64 {
        self.activations(x).last().expect("output layer")[0]
    }

    /// Accumulates into `grad` the parameter gradient given `dout`, the
    /// derivative of the loss with respect to the output.
    fn backprop(&self, acts: &[Vec<f64>], dout: f64, grad: &mut [f64]) {
        let n_layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for l in 0..n_layers {
            offsets.push(off);
            off += self.sizes[l + 1] * self.sizes[l] + self.sizes[l + 1];
        }
        let mut delta = vec![dout];
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let input = &acts[l];
            for j in 0..n_out {
                let row = &mut grad[off + j * n_in..off + (j + 1) * n_in];
                for (g, a) in row.iter_mut().zip(input) {
                    *g += delta[j] * a;
                }
                grad[off + n_out * n_in + j] += delta[j];
            }
            if l > 0 {
                let (w, _) = self.layer(l, off);
                delta = (0..n_in)
                    .map(|i| {
                        let back: f64 = (0..n_out).map(|j| w[j * n_in + i] * delta[j]).sum();
                        let a = input[i];
                        back * a * (1.0 - a)
                    })
                    .collect();
            }
        }
    }
}

/// Borrowed scaled inputs and targets.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub width: usize,
}

impl<'a> Batch<'a> {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.x[i * self.width..(i + 1) * self.width]
    }
}

fn point_loss(err: f64, kind: LossKind) -> f64 {
    match kind {
        LossKind::Mae => err.abs(),
        LossKind::Mse => err * err,
    }
}

/// Derivative of the point loss; the MAE subgradient at zero error is 0.
fn point_dloss(err: f64, kind: LossKind) -> f64 {
    match kind {
        LossKind::Mae if err == 0.0 => 0.0,
        LossKind::Mae => err.signum(),
        LossKind::Mse => 2.0 * err,
    }
}

/// Mean loss over the rows of `batch` (in scaled target units).
pub fn loss(net: &Mlp, batch: Batch<'_>, kind: LossKind) -> f64 {
    let rows: Vec<usize> = (0..batch.len()).collect();
    loss_on(net, batch, &rows, kind)
}

fn loss_on(net: &Mlp, batch: Batch<'_>, rows: &[usize], kind: LossKind) -> f64 {
    let mut acc = KahanSum::new();
    for &r in rows {
        acc.add(point_loss(net.forward(batch.row(r)) - batch.y[r], kind));
    }
    acc.total() / rows.len() as f64
}

/// Loss and its exact gradient with respect to `net.params`.
pub fn gradient(net: &Mlp, batch: Batch<'_>, kind: LossKind) -> (f64, Vec<f64>) {
    let rows: Vec<usize> = (0..batch.len()).collect();
    gradient_on(net, batch, &rows, kind)
}

fn gradient_on(net: &Mlp, batch: Batch<'_>, rows: &[usize], kind: LossKind) -> (f64, Vec<f64>) {
    let n = rows.len() as f64;
    let mut grad = vec![0.0; net.n_params()];
    let mut acc = KahanSum::new();
    for &r in rows {
        let acts = net.activations(batch.row(r));
        let err = acts.last().expect("output layer")[0] - batch.y[r];
        acc.add(point_loss(err, kind));
        net.backprop(&acts, point_dloss(err, kind) / n, &mut grad);
    }
    (acc.total() / n, grad)
}

/// Per-column z-score constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Scaler {
    /// Fits on the given rows of a row-major matrix.
    pub fn fit(x: &[f64], width: usize, rows: impl Iterator<Item = usize> + Clone) -> Self {
        let n = rows.clone().count() as f64;
        let mut mean = vec![0.0; width];
        let mut sd = vec![0.0; width];
        for c in 0..width {
            let mut s = KahanSum::new();
            for r in rows.clone() {
                s.add(x[r * width + c]);
            }
            let m = s.total() / n;
            let mut v = KahanSum::new();
            for r in rows.clone() {
                let d = x[r * width + c] - m;
                v.add(d * d);
            }
            mean[c] = m;
            sd[c] = (v.total() / n).sqrt().max(SD_FLOOR);
        }
        Self { mean, sd }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.sd))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NarxNetwork {
    pub config: NarxConfig,
    pub exogenous: FeatureSpec,
    pub mlp: Mlp,
    pub input_scaler: Scaler,
    pub target_mean: f64,
    pub target_sd: f64,
}

impl NarxNetwork {
    pub fn scale_target(&self, y: f64) -> f64 {
        (y - self.target_mean) / self.target_sd
    }

    pub fn unscale_target(&self, z: f64) -> f64 {
        z * self.target_sd + self.target_mean
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Prediction in USD/MWh for an unscaled input vector.
pub fn forward(net: &NarxNetwork, input: &[f64]) -> f64 {
    net.unscale_target(net.mlp.forward(&net.input_scaler.apply(input)))
}

/// Per-step exogenous rows, `None` where the row touches invalid data or
/// lacks margin.
struct ExogenousRows {
    rows: Vec<Option<Vec<f64>>>,
}

impl ExogenousRows {
    fn new(ds: &MarketDataset, spec: &FeatureSpec) -> Self {
        let usable = spec.usable_steps(ds);
        let rows = (0..ds.steps())
            .map(|step| {
                let usable = usable.as_ref()?;
                if !usable.contains(&step) {
                    return None;
                }
                let mut out = Vec::with_capacity(spec.len());
                fill_row(ds, spec, step, &mut out).then_some(out)
            })
            .collect();
        Self { rows }
    }

    fn append(&self, t: usize, window: usize, out: &mut Vec<f64>) -> bool {
        for step in t + 1 - window..=t {
            match &self.rows[step] {
                Some(r) => out.extend_from_slice(r),
                None => return false,
            }
        }
        true
    }
}

fn check_step(ds: &MarketDataset, step: usize, cfg: &NarxConfig) -> Result<()> {
    match cfg.usable_steps(ds) {
        Some((a, b)) if (a..=b).contains(&step) => Ok(()),
        _ => Err(Error::Range(format!(
            "{} lacks the window/history margin",
            ds.timestamp(step)
        ))),
    }
}

/// Unscaled network input for target time `t`, or `None` when any entry is
/// invalid.
pub fn assemble_input(ds: &MarketDataset, t: Timestamp, cfg: &NarxConfig) -> Result<Option<Vec<f64>>> {
    cfg.validate()?;
    let step = ds.step_of(t)?;
    check_step(ds, step, cfg)?;
    let spec = NarxConfig::exogenous_spec();
    let mut out = Vec::with_capacity(cfg.input_len());
    for s in step + 1 - cfg.window..=step {
        if !fill_row(ds, &spec, s, &mut out) {
            return Ok(None);
        }
    }
    for s in step - cfg.history..step {
        let (p, pv) = ds.rt_price.get(s).expect("in span");
        let (d, dv) = ds.rt_demand.get(s).expect("in span");
        if !(pv && dv) {
            return Ok(None);
        }
        out.push(p);
        out.push(d);
    }
    Ok(Some(out))
}

/// Unscaled inputs and targets for every usable step with a valid target.
#[derive(Debug, Clone)]
pub struct NarxData {
    pub width: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub timestamps: Vec<Timestamp>,
}

impl NarxData {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.width..(i + 1) * self.width]
    }
}

pub fn assemble_all(ds: &MarketDataset, cfg: &NarxConfig) -> Result<NarxData> {
    cfg.validate()?;
    let (first, last) = cfg.usable_steps(ds).ok_or_else(|| {
        Error::InsufficientData("dataset too short for the narx window and history".into())
    })?;
    let exo = ExogenousRows::new(ds, &NarxConfig::exogenous_spec());
    let width = cfg.input_len();
    let mut data = NarxData {
        width,
        x: Vec::new(),
        y: Vec::new(),
        timestamps: Vec::new(),
    };
    let mut history = HistoryBuffer::prefill(ds, first, cfg.history);
    let mut row = Vec::with_capacity(width);
    for step in first..=last {
        let (target, target_ok) = ds.rt_price.get(step).expect("in span");
        row.clear();
        if target_ok && exo.append(step, cfg.window, &mut row) && history.append(&mut row) {
            data.x.extend_from_slice(&row);
            data.y.push(target);
            data.timestamps.push(ds.timestamp(step));
        }
        history.push(ds, step);
    }
    Ok(data)
}

/// Observed (price, demand) pairs of the last `D` steps.
#[derive(Debug, Clone)]
struct HistoryBuffer {
    entries: VecDeque<Option<(f64, f64)>>,
}

impl HistoryBuffer {
    fn observed(ds: &MarketDataset, step: usize) -> Option<(f64, f64)> {
        let (p, pv) = ds.rt_price.get(step)?;
        let (d, dv) = ds.rt_demand.get(step)?;
        (pv && dv).then_some((p, d))
    }

    /// Buffer for target `step`: steps `step-depth..step`.
    fn prefill(ds: &MarketDataset, step: usize, depth: usize) -> Self {
        Self {
            entries: (step - depth..step).map(|s| Self::observed(ds, s)).collect(),
        }
    }

    /// Shifts out the oldest pair and appends the observation at `step`.
    fn push(&mut self, ds: &MarketDataset, step: usize) {
        self.entries.pop_front();
        self.entries.push_back(Self::observed(ds, step));
    }

    fn append(&self, out: &mut Vec<f64>) -> bool {
        for e in &self.entries {
            match e {
                Some((p, d)) => {
                    out.push(*p);
                    out.push(*d);
                }
                None => return false,
            }
        }
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights were returned.
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainTrace {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "train_loss", "val_loss"])?;
        for e in &self.epochs {
            w.write_record([e.epoch.to_string(), e.train_loss.to_string(), e.val_loss.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Mini-batch gradient descent with momentum. `validate` scores the network
/// after each epoch; training stops once that score has risen for
/// `patience` consecutive epochs and returns the best-scoring weights.
pub fn train_mlp(
    init: Mlp,
    train: Batch<'_>,
    cfg: &NarxConfig,
    mut validate: impl FnMut(&Mlp, usize) -> f64,
) -> Result<(Mlp, TrainTrace)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InsufficientData("empty training block".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut net = init;
    let mut velocity = vec![0.0; net.n_params()];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut lr = cfg.learning_rate;
    let mut best: Option<(f64, usize, Mlp)> = None;
    let mut since_best = 0;
    let mut rises = 0;
    let mut prev_val = f64::INFINITY;
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (_, g) = gradient_on(&net, train, chunk, cfg.loss);
            for ((p, v), g) in net.params.iter_mut().zip(&mut velocity).zip(&g) {
                *v = cfg.momentum * *v - lr * g;
                *p += *v;
            }
        }
        let train_loss = loss(&net, train, cfg.loss);
        let val_loss = validate(&net, epoch);
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            learning_rate: lr,
        });
        if best.as_ref().is_none_or(|b| val_loss < b.0) {
            best = Some((val_loss, epoch, net.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.lr_plateau_epochs {
                lr *= 0.5;
                since_best = 0;
            }
        }
        rises = if val_loss > prev_val { rises + 1 } else { 0 };
        prev_val = val_loss;
        if rises >= cfg.patience {
            stop_reason = StopReason::Patience;
            break;
        }
    }
    let (_, best_epoch, best_net) = best.ok_or_else(|| Error::Config("max_epochs must be >= 1".into()))?;
    Ok((
        best_net,
        TrainTrace {
            epochs,
            best_epoch,
            stop_reason,
        },
    ))
}

/// Row ranges of a temporal 70/15/15 split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalSplit {
    pub train: std::ops::Range<usize>,
    pub validation: std::ops::Range<usize>,
    pub test: std::ops::Range<usize>,
}

impl TemporalSplit {
    pub fn new(n: usize) -> Result<Self> {
        let a = (n as f64 * 0.70).round() as usize;
        let b = (n as f64 * 0.85).round() as usize;
        if a == 0 || b == a || b == n {
            return Err(Error::InsufficientData(format!("{n} rows cannot fill a 70/15/15 split")));
        }
        Ok(Self {
            train: 0..a,
            validation: a..b,
            test: b..n,
        })
    }
}

#[derive(Debug, Clone)]
pub struct NarxFit {
    pub network: NarxNetwork,
    pub trace: TrainTrace,
    pub split: TemporalSplit,
    pub data: NarxData,
}

fn scaled(data: &NarxData, rows: std::ops::Range<usize>, scaler: &Scaler, t_mean: f64, t_sd: f64) -> (Vec<f64>, Vec<f64>) {
    let mut x = Vec::with_capacity(rows.len() * data.width);
    let mut y = Vec::with_capacity(rows.len());
    for r in rows {
        x.extend(scaler.apply(data.row(r)));
        y.push((data.y[r] - t_mean) / t_sd);
    }
    (x, y)
}

/// Fits scaling on the training block, then trains with validation-based
/// early stopping.
pub fn train(ds: &MarketDataset, cfg: &NarxConfig) -> Result<NarxFit> {
    let data = assemble_all(ds, cfg)?;
    let split = TemporalSplit::new(data.len())?;
    let (network, trace) = train_on(&data, split.train.clone(), split.validation.clone(), cfg)?;
    Ok(NarxFit {
        network,
        trace,
        split,
        data,
    })
}

/// Trains on rows `train` of `data`, early-stopping on rows `validation`.
/// Scaling constants come from the training rows only.
pub fn train_on(
    data: &NarxData,
    train: std::ops::Range<usize>,
    validation: std::ops::Range<usize>,
    cfg: &NarxConfig,
) -> Result<(NarxNetwork, TrainTrace)> {
    cfg.validate()?;
    if train.is_empty() || validation.is_empty() || train.end > data.len() || validation.end > data.len() {
        return Err(Error::InsufficientData("narx needs nonempty training and validation blocks".into()));
    }
    let scaler = Scaler::fit(&data.x, data.width, train.clone());
    let target = Scaler::fit(&data.y, 1, train.clone());
    let (t_mean, t_sd) = (target.mean[0], target.sd[0]);
    let (tx, ty) = scaled(data, train, &scaler, t_mean, t_sd);
    let (vx, vy) = scaled(data, validation, &scaler, t_mean, t_sd);
    let width = data.width;
    let train_batch = Batch { x: &tx, y: &ty, width };
    let val_batch = Batch { x: &vx, y: &vy, width };
    let mut sizes = vec![width];
    sizes.extend(std::iter::repeat_n(cfg.hidden_units, cfg.hidden_layers));
    sizes.push(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Mlp::random(sizes, &mut rng);
    let (mlp, trace) = train_mlp(init, train_batch, cfg, |net, _| loss(net, val_batch, cfg.loss))?;
    Ok((
        NarxNetwork {
            config: cfg.clone(),
            exogenous: NarxConfig::exogenous_spec(),
            mlp,
            input_scaler: scaler,
            target_mean: t_mean,
            target_sd: t_sd,
        },
        trace,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPrediction {
    pub predictions: Vec<(Timestamp, f64)>,
    pub eval: EvalResult,
}

/// Teacher-forced one-step predictions over `from..=to`.
pub fn predict_series(net: &NarxNetwork, ds: &MarketDataset, from: Timestamp, to: Timestamp) -> Result<SeriesPrediction> {
    predict_series_with(net, ds, from, to, |input| forward(net, input), |_, _| {})
}

/// As [`predict_series`], with the forward pass supplied by the caller and
/// `observe` shown each assembled input before it is used.
pub fn predict_series_with(
    net: &NarxNetwork,
    ds: &MarketDataset,
    from: Timestamp,
    to: Timestamp,
    mut forward: impl FnMut(&[f64]) -> f64,
    mut observe: impl FnMut(Timestamp, &[f64]),
) -> Result<SeriesPrediction> {
    let cfg = &net.config;
    if from > to {
        return Err(Error::EmptyMatrix);
    }
    let (a, b) = (ds.step_of(from)?, ds.step_of(to)?);
    check_step(ds, a, cfg)?;
    check_step(ds, b, cfg)?;
    let exo = ExogenousRows::new(ds, &net.exogenous);
    let mut history = HistoryBuffer::prefill(ds, a, cfg.history);
    let mut predictions = Vec::new();
    let mut points = Vec::new();
    let mut row = Vec::with_capacity(cfg.input_len());
    for step in a..=b {
        row.clear();
        let (target, target_ok) = ds.rt_price.get(step).expect("in span");
        if target_ok && exo.append(step, cfg.window, &mut row) && history.append(&mut row) {
            let t = ds.timestamp(step);
            observe(t, &row);
            let p = forward(&row);
            predictions.push((t, p));
            points.push((t, target, p));
        }
        history.push(ds, step);
    }
    let eval = EvalResult::from_points(points)?;
    Ok(SeriesPrediction { predictions, eval })
}

/// Writes `timestamp,real,predicted` rows.
pub fn write_predictions_csv(pred: &SeriesPrediction, ds: &MarketDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let io = |e| Error::io(path, e);
    writeln!(f, "timestamp,real,predicted").map_err(io)?;
    for (t, p) in &pred.predictions {
        let real = ds.rt_price.values()[ds.step_of(*t)?];
        writeln!(f, "{t},{real},{p}").map_err(io)?;
    }
    f.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{generate_synthetic, SyntheticConfig};
    use crate::metrics::mae;
    use rand::Rng;

    fn small_ds(days: usize) -> MarketDataset {
        generate_synthetic(&SyntheticConfig {
            days,
            ..Default::default()
        })
        .unwrap()
    }

    fn random_batch(n: usize, width: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = (0..n * width).map(|_| rng.random_range(-1.5..1.5)).collect();
        let y = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        (x, y)
    }

    fn fd_check(kind: LossKind, tol: f64) {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let layers = 1 + seed as usize % 3;
            let mut sizes = vec![3];
            sizes.extend(std::iter::repeat_n(3, layers));
            sizes.push(1);
            let net = Mlp::random(sizes, &mut rng);
            assert!(net.n_params() <= 50);
            let (x, y) = random_batch(6, 3, seed + 100);
            let batch = Batch { x: &x, y: &y, width: 3 };
            let (_, g) = gradient(&net, batch, kind);
            let h = 1e-6;
            for i in 0..net.n_params() {
                let mut plus = net.clone();
                plus.params[i] += h;
                let mut minus = net.clone();
                minus.params[i] -= h;
                let fd = (loss(&plus, batch, kind) - loss(&minus, batch, kind)) / (2.0 * h);
                let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-3);
                assert!(rel < tol, "seed {seed} param {i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences_mse() {
        fd_check(LossKind::Mse, 1e-6);
    }

    #[test]
    fn gradient_matches_finite_differences_mae() {
        // Random targets in +-2 keep every error well away from zero.
        fd_check(LossKind::Mae, 1e-4);
    }

    #[test]
    fn zero_error_mae_gradient_is_zero() {
        let net = Mlp::random(vec![2, 3, 1], &mut ChaCha8Rng::seed_from_u64(1));
        let x = vec![0.3, -0.2, 1.0, 0.5];
        let y: Vec<f64> = [0, 1].iter().map(|&r| net.forward(&x[r * 2..r * 2 + 2])).collect();
        let (l, g) = gradient(&net, Batch { x: &x, y: &y, width: 2 }, LossKind::Mae);
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn loss_examples() {
        let net = Mlp::zeros(vec![1, 1, 1]);
        let x = [0.0];
        assert_eq!(loss(&net, Batch { x: &x, y: &[0.0], width: 1 }, LossKind::Mae), 0.0);
        assert_eq!(loss(&net, Batch { x: &x, y: &[-0.5], width: 1 }, LossKind::Mae), 0.5);
        assert_eq!(loss(&net, Batch { x: &x, y: &[-0.5], width: 1 }, LossKind::Mse), 0.25);
    }

    #[test]
    fn hand_computed_forward() {
        // input (1, 2), hidden z = 0.5 - 0.25*2 + 0.1 = 0.1, output 2*sigmoid(0.1) - 1
        let net = Mlp {
            sizes: vec![2, 1, 1],
            params: vec![0.5, -0.25, 0.1, 2.0, -1.0],
        };
        let expected = 2.0 / (1.0 + (-0.1f64).exp()) - 1.0;
        assert!((net.forward(&[1.0, 2.0]) - expected).abs() < 1e-15);
        let mut doubled = net.clone();
        doubled.params[3] *= 2.0;
        doubled.params[4] *= 2.0;
        assert!((doubled.forward(&[1.0, 2.0]) - 2.0 * expected).abs() < 1e-15);
    }

    #[test]
    fn zero_network_predicts_target_mean() {
        let ds = small_ds(4);
        let cfg = NarxConfig { window: 2, history: 2, ..Default::default() };
        let data = assemble_all(&ds, &cfg).unwrap();
        let scaler = Scaler::fit(&data.x, data.width, 0..data.len());
        let net = NarxNetwork {
            config: cfg.clone(),
            exogenous: NarxConfig::exogenous_spec(),
            mlp: Mlp::zeros(vec![data.width, 4, 1]),
            input_scaler: scaler,
            target_mean: 17.5,
            target_sd: 3.0,
        };
        assert_eq!(forward(&net, data.row(0)), 17.5);
    }

    #[test]
    fn input_layout_length() {
        let ds = small_ds(3);
        let cfg = NarxConfig { window: 1, history: 1, ..Default::default() };
        assert_eq!(cfg.input_len(), 19 + 2);
        let (first, _) = cfg.usable_steps(&ds).unwrap();
        let v = assemble_input(&ds, ds.timestamp(first), &cfg).unwrap().unwrap();
        assert_eq!(v.len(), 21);
        assert!(assemble_input(&ds, ds.timestamp(0), &cfg).is_err());
    }

    #[test]
    fn assembled_rows_match_pointwise_inputs() {
        let ds = small_ds(3);
        let cfg = NarxConfig { window: 3, history: 5, ..Default::default() };
        let data = assemble_all(&ds, &cfg).unwrap();
        for i in (0..data.len()).step_by(17) {
            let v = assemble_input(&ds, data.timestamps[i], &cfg).unwrap().unwrap();
            assert_eq!(v.as_slice(), data.row(i));
        }
    }

    #[test]
    fn constant_inputs_scale_to_zero() {
        let x = vec![5.0; 12];
        let s = Scaler::fit(&x, 3, 0..4);
        assert_eq!(s.apply(&[5.0, 5.0, 5.0]), vec![0.0; 3]);
        assert_eq!(s.sd, vec![SD_FLOOR; 3]);
    }

    #[test]
    fn forced_rising_validation_stops_early() {
        let (x, y) = random_batch(20, 2, 3);
        let init = Mlp::random(vec![2, 3, 1], &mut ChaCha8Rng::seed_from_u64(4));
        let cfg = NarxConfig { patience: 1, max_epochs: 50, ..Default::default() };
        let mut snapshots = Vec::new();
        let (net, trace) = train_mlp(init, Batch { x: &x, y: &y, width: 2 }, &cfg, |net, epoch| {
            snapshots.push(net.clone());
            epoch as f64
        })
        .unwrap();
        assert_eq!(trace.epochs.len(), 2);
        assert_eq!(trace.best_epoch, 1);
        assert_eq!(trace.stop_reason, StopReason::Patience);
        assert_eq!(net, snapshots[0]);
        assert_ne!(net, snapshots[1]);
    }

    #[test]
    fn learns_a_linear_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 400;
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let raw: Vec<f64> = u.iter().map(|v| 3.0 * v + 1.0).collect();
        let ts = Scaler::fit(&raw, 1, 0..n);
        let xs = Scaler::fit(&u, 1, 0..n);
        let x: Vec<f64> = u.iter().map(|v| xs.apply(&[*v])[0]).collect();
        let y: Vec<f64> = raw.iter().map(|v| ts.apply(&[*v])[0]).collect();
        let cfg = NarxConfig {
            loss: LossKind::Mse,
            learning_rate: 0.05,
            batch_size: 16,
            max_epochs: 300,
            patience: 300,
            lr_plateau_epochs: 20,
            ..Default::default()
        };
        let batch = Batch { x: &x, y: &y, width: 1 };
        let init = Mlp::random(vec![1, 10, 1], &mut ChaCha8Rng::seed_from_u64(1));
        let (net, _) = train_mlp(init, batch, &cfg, |net, _| loss(net, batch, LossKind::Mse)).unwrap();
        // Scaled targets have unit SD, so the MAE is already relative to the SD.
        let mae = loss(&net, batch, LossKind::Mae);
        assert!(mae < 0.01, "train MAE {mae}");
    }

    #[test]
    fn training_is_deterministic_and_scaling_uses_train_only() {
        let ds = small_ds(6);
        let cfg = NarxConfig { window: 2, history: 4, max_epochs: 4, hidden_units: 4, ..Default::default() };
        let a = train(&ds, &cfg).unwrap();
        let b = train(&ds, &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.network, b.network);
        let s = Scaler::fit(&a.data.x, a.data.width, a.split.train.clone());
        assert_eq!(s, a.network.input_scaler);
        let t = Scaler::fit(&a.data.y, 1, a.split.train.clone());
        assert_eq!((t.mean[0], t.sd[0]), (a.network.target_mean, a.network.target_sd));
        let all = Scaler::fit(&a.data.y, 1, 0..a.data.len());
        assert_ne!(all.mean[0], a.network.target_mean);
        let best = &a.trace.epochs[a.trace.best_epoch - 1];
        assert!(a.trace.epochs.iter().all(|e| e.val_loss >= best.val_loss));
    }

    fn untrained(ds: &MarketDataset, cfg: NarxConfig) -> NarxNetwork {
        let data = assemble_all(ds, &cfg).unwrap();
        NarxNetwork {
            input_scaler: Scaler::fit(&data.x, data.width, 0..data.len()),
            mlp: Mlp::random(vec![data.width, 3, 1], &mut ChaCha8Rng::seed_from_u64(2)),
            config: cfg,
            exogenous: NarxConfig::exogenous_spec(),
            target_mean: 0.0,
            target_sd: 1.0,
        }
    }

    #[test]
    fn series_matches_pointwise_forward_and_mae() {
        let ds = small_ds(3);
        let cfg = NarxConfig { window: 2, history: 3, ..Default::default() };
        let net = untrained(&ds, cfg.clone());
        let (a, b) = cfg.usable_steps(&ds).unwrap();
        let pred = predict_series(&net, &ds, ds.timestamp(a), ds.timestamp(b)).unwrap();
        let mut pairs = Vec::new();
        for (t, p) in &pred.predictions {
            let v = assemble_input(&ds, *t, &cfg).unwrap().unwrap();
            assert_eq!(forward(&net, &v), *p);
            pairs.push((ds.rt_price.values()[ds.step_of(*t).unwrap()], *p));
        }
        assert_eq!(pred.eval.mae, mae(&pairs).unwrap());
    }

    #[test]
    fn history_is_teacher_forced() {
        let ds = small_ds(3);
        let cfg = NarxConfig { window: 1, history: 4, ..Default::default() };
        let net = untrained(&ds, cfg.clone());
        let (a, b) = cfg.usable_steps(&ds).unwrap();
        let sentinel = 9.87654321e12;
        let exo_len = 19;
        let mut prev: Option<(Timestamp, Vec<f64>)> = None;
        let mut seen = 0;
        predict_series_with(
            &net,
            &ds,
            ds.timestamp(a),
            ds.timestamp(b),
            |_| sentinel,
            |t, input| {
                assert!(input.iter().all(|v| *v != sentinel));
                let hist = input[exo_len..].to_vec();
                if let Some((pt, ph)) = &prev {
                    if pt.steps_until(t) == 1 {
                        let s = ds.step_of(*pt).unwrap();
                        let mut expected = ph[2..].to_vec();
                        expected.push(ds.rt_price.values()[s]);
                        expected.push(ds.rt_demand.values()[s]);
                        assert_eq!(hist, expected);
                        seen += 1;
                    }
                }
                prev = Some((t, hist));
            },
        )
        .unwrap();
        assert!(seen > 100);
    }

    #[test]
    fn invalid_targets_are_skipped() {
        let mut ds = small_ds(3);
        let cfg = NarxConfig { window: 1, history: 1, ..Default::default() };
        let (a, b) = cfg.usable_steps(&ds).unwrap();
        let full = assemble_all(&ds, &cfg).unwrap().len();
        let mut values = ds.rt_price.values().to_vec();
        let mut valid = ds.rt_price.valid().to_vec();
        values[b] = f64::NAN;
        valid[b] = false;
        ds.rt_price = crate::data::Stream::new("rt_price", ds.rt_price.resolution(), ds.rt_price.start(), values, valid).unwrap();
        let net = untrained(&ds, cfg.clone());
        let pred = predict_series(&net, &ds, ds.timestamp(a), ds.timestamp(b)).unwrap();
        assert_eq!(pred.eval.n, full - 1);
    }

    #[test]
    fn network_json_and_trace_csv() {
        let ds = small_ds(5);
        let cfg = NarxConfig { window: 1, history: 2, max_epochs: 2, hidden_units: 2, ..Default::default() };
        let fit = train(&ds, &cfg).unwrap();
        let back = NarxNetwork::from_json(&fit.network.to_json().unwrap()).unwrap();
        assert_eq!(back, fit.network);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trace.csv");
        fit.trace.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(text.lines().count(), 1 + fit.trace.epochs.len());
        assert!(text.starts_with("epoch,train_loss,val_loss"));
    }
}
