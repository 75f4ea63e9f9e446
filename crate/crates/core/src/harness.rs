//! Experiment runs: configuration, method dispatch, reports and plot data.
//!
//! Each method keeps its own evaluation protocol by default: ARIMA is
//! backtested with rolling origins, the tree methods (and the persistence
//! and perfect baselines) are scored on a seeded 70/30 row split, and the
//! network on the last 15% of a temporal 70/15/15 split. With `unified_eval`
//! every method is scored on the ARIMA rolling-origin windows instead.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arima::{rolling_evaluate, rolling_windows, RollingConfig, SubsetArimaSpec, WindowBounds};
use crate::data::{MarketDataset, Timestamp};
use crate::error::{Error, Result};
use crate::features::{build_matrix, FeatureMatrix, FeatureSpec};
use crate::ingest::{generate_synthetic, load_csv, price_stats, DedupMode, GapMode, GapPolicy, LoadReport, PriceStats, StreamPaths, SyntheticConfig};
use crate::metrics::EvalResult;
use crate::narx::{self, NarxConfig, TrainTrace};
use crate::trees::{
    self, feature_importance, fit_bagged, fit_lsboost, fit_tree, kfold_cv, oob_curve, oob_error, predict_bagged, predict_boosted, predict_tree, staged_mae, BoostParams, OobReport, TreeParams,
};

/// Environment variable overriding `run.seed`.
pub const SEED_ENV: &str = "GRIDCAST_SEED";

/// Share of points, farthest from the median price, left out of the trimmed
/// error-vs-price data.
pub const TRIM_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodKind {
    Arima,
    Tree,
    Bagged,
    Boosted,
    Narx,
    Persistence,
    /// Predicts the observed value; checks the evaluation plumbing.
    Perfect,
}

impl MethodKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Arima => "arima",
            Self::Tree => "tree",
            Self::Bagged => "bagged",
            Self::Boosted => "boosted",
            Self::Narx => "narx",
            Self::Persistence => "persistence",
            Self::Perfect => "perfect",
        }
    }

    fn uses_tree_rows(self) -> bool {
        matches!(self, Self::Tree | Self::Bagged | Self::Boosted | Self::Persistence | Self::Perfect)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Master seed for every stochastic method.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub methods: Vec<MethodKind>,
    pub unified_eval: bool,
    pub parallel_methods: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 42,
            output_dir: PathBuf::from("gridcast-run"),
            methods: vec![
                MethodKind::Arima,
                MethodKind::Tree,
                MethodKind::Bagged,
                MethodKind::Boosted,
                MethodKind::Narx,
                MethodKind::Persistence,
            ],
            unified_eval: false,
            parallel_methods: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// Directory holding `<stream>.csv` files.
    pub csv_dir: PathBuf,
    pub gap_mode: GapMode,
    pub dedup: DedupMode,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            csv_dir: PathBuf::from("data"),
            gap_mode: GapMode::MarkInvalid,
            dedup: DedupMode::KeepFirst,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSection {
    pub w_past: usize,
    pub w_future: usize,
}

impl Default for FeatureSection {
    fn default() -> Self {
        Self { w_past: 8, w_future: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArimaSection {
    pub ar_lags: Vec<usize>,
    pub ma_lags: Vec<usize>,
    pub d: usize,
    pub train_days: usize,
    pub test_days: usize,
}

impl Default for ArimaSection {
    fn default() -> Self {
        let spec = SubsetArimaSpec::default();
        let rolling = RollingConfig::default();
        Self {
            ar_lags: spec.ar_lags,
            ma_lags: spec.ma_lags,
            d: spec.d,
            train_days: rolling.train_days,
            test_days: rolling.test_days,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeSection {
    pub min_leaf: usize,
    /// 0 grows until no split helps.
    pub max_splits: usize,
    pub train_fraction: f64,
    pub cv_folds: usize,
    /// Minimum leaf sizes scored by cross-validation.
    pub cv_min_leaf: Vec<usize>,
}

impl Default for TreeSection {
    fn default() -> Self {
        Self {
            min_leaf: 6,
            max_splits: 50,
            train_fraction: 0.7,
            cv_folds: 5,
            cv_min_leaf: vec![1, 2, 4, 6, 8, 12, 16, 24, 32, 48, 64],
        }
    }
}

impl TreeSection {
    fn params(&self) -> TreeParams {
        TreeParams {
            min_leaf: self.min_leaf,
            max_splits: (self.max_splits > 0).then_some(self.max_splits),
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaggedSection {
    pub trees: usize,
}

impl Default for BaggedSection {
    fn default() -> Self {
        Self { trees: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoostedSection {
    pub learning_rate: f64,
    pub max_splits_weak: usize,
    pub iterations: usize,
    pub min_leaf: usize,
    /// Extra learning-curve settings, crossed with `curve_max_splits`.
    pub curve_learning_rates: Vec<f64>,
    pub curve_max_splits: Vec<usize>,
}

impl Default for BoostedSection {
    fn default() -> Self {
        let p = BoostParams::default();
        Self {
            learning_rate: p.nu,
            max_splits_weak: p.max_splits_weak,
            iterations: p.iterations,
            min_leaf: p.min_leaf,
            curve_learning_rates: vec![p.nu],
            curve_max_splits: vec![p.max_splits_weak],
        }
    }
}

impl BoostedSection {
    fn params(&self) -> BoostParams {
        BoostParams {
            nu: self.learning_rate,
            max_splits_weak: self.max_splits_weak,
            iterations: self.iterations,
            min_leaf: self.min_leaf,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub synthetic: SyntheticConfig,
    pub features: FeatureSection,
    pub arima: ArimaSection,
    pub tree: TreeSection,
    pub bagged: BaggedSection,
    pub boosted: BoostedSection,
    pub narx: NarxConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn arima_spec(&self) -> SubsetArimaSpec {
        SubsetArimaSpec {
            ar_lags: self.arima.ar_lags.clone(),
            ma_lags: self.arima.ma_lags.clone(),
            d: self.arima.d,
        }
    }

    pub fn rolling(&self) -> RollingConfig {
        RollingConfig {
            train_days: self.arima.train_days,
            test_days: self.arima.test_days,
        }
    }

    pub fn feature_spec(&self) -> FeatureSpec {
        FeatureSpec::new(self.features.w_past, self.features.w_future)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for m in &self.run.methods {
            if !seen.insert(*m) {
                return Err(Error::Config(format!("method {} listed twice", m.name())));
            }
        }
        if self.data.source == DataSource::Synthetic {
            self.synthetic.validate()?;
        }
        self.feature_spec().validate()?;
        let spec = self.arima_spec();
        spec.validate()?;
        self.rolling().validate(&spec)?;
        self.tree.params().validate()?;
        if !(self.tree.train_fraction > 0.0 && self.tree.train_fraction < 1.0) {
            return Err(Error::Config("tree.train_fraction must be in (0, 1)".into()));
        }
        if self.tree.cv_folds < 2 || self.tree.cv_min_leaf.contains(&0) {
            return Err(Error::Config("tree.cv_folds must be >= 2 and cv_min_leaf entries >= 1".into()));
        }
        if self.bagged.trees == 0 {
            return Err(Error::Config("bagged.trees must be >= 1".into()));
        }
        self.boosted.params().validate()?;
        for &nu in &self.boosted.curve_learning_rates {
            BoostParams { nu, ..self.boosted.params() }.validate()?;
        }
        if self.boosted.curve_max_splits.contains(&0) {
            return Err(Error::Config("boosted.curve_max_splits entries must be >= 1".into()));
        }
        self.narx.validate()
    }

    /// Hex SHA-256 of the settings that determine results (the output
    /// directory and method scheduling are left out).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.run.output_dir = PathBuf::new();
        c.run.parallel_methods = false;
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Parses `GRIDCAST_SEED` if set.
pub fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Config(format!("{SEED_ENV}: {e}"))),
    }
}

/// Independent seed for one consumer of the master seed.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng.next_u64()
}

const TREE_SPLIT_STREAM: u64 = 1;
const BAG_STREAM: u64 = 2;
const NARX_STREAM: u64 = 3;
const CV_STREAM: u64 = 4;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("configuration error: {0}")]
    Config(#[source] Error),
    #[error("data error: {0}")]
    Data(#[source] Error),
    #[error("cannot write outputs: {0}")]
    Output(#[source] Error),
}

impl RunError {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) | Self::Output(_) => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub start: Timestamp,
    pub end: Timestamp,
    pub steps: usize,
    pub invalid_fraction: f64,
    pub price: PriceStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub master_seed: u64,
    pub data_source: DataSource,
    pub synthetic_seed: Option<u64>,
    pub unified_eval: bool,
    pub dataset: DatasetSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRow {
    pub feature: String,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPoint {
    pub min_leaf: usize,
    pub mean_mae: f64,
    pub mean_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostCurve {
    pub learning_rate: f64,
    pub max_splits_weak: usize,
    /// Entry `i` is the MAE after `i` stages.
    pub train_mae: Vec<f64>,
    pub test_mae: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArimaWindow {
    pub origin: Timestamp,
    pub test_start: Timestamp,
    pub test_end: Timestamp,
    pub n_predictions: usize,
    pub mae: Option<f64>,
    pub alpha: Vec<f64>,
    pub theta: Vec<f64>,
    pub sigma2: Option<f64>,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: MethodKind,
    pub protocol: String,
    pub status: MethodStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalResult>,
    /// Hash of the evaluated timestamps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub importance: Option<Vec<ImportanceRow>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cv: Option<Vec<CvPoint>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oob: Option<OobReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oob_curve: Option<Vec<Option<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boost_curves: Option<Vec<BoostCurve>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub narx_trace: Option<TrainTrace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arima_windows: Option<Vec<ArimaWindow>>,
    /// Persistence scored on the ARIMA test points.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub persistence_on_windows: Option<EvalResult>,
}

impl MethodReport {
    fn new(method: MethodKind, protocol: &str) -> Self {
        Self {
            method,
            protocol: protocol.to_string(),
            status: MethodStatus::Ok,
            error: None,
            eval: None,
            test_fingerprint: None,
            importance: None,
            cv: None,
            oob: None,
            oob_curve: None,
            boost_curves: None,
            narx_trace: None,
            arima_windows: None,
            persistence_on_windows: None,
        }
    }

    fn with_eval(mut self, eval: EvalResult) -> Self {
        self.test_fingerprint = eval.per_point.as_ref().map(|pts| fingerprint(pts.iter().map(|p| p.timestamp)));
        self.eval = Some(eval);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub provenance: Provenance,
    pub methods: Vec<MethodReport>,
    /// Whether every successful method was scored on the same timestamps.
    pub shared_test_points: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caveat: Option<String>,
    /// Tree feature names, when a tree method ran.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registry: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub load_report: Option<LoadReport>,
}

impl Report {
    pub fn method(&self, kind: MethodKind) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == kind)
    }

    pub fn failed(&self) -> Vec<MethodKind> {
        self.methods
            .iter()
            .filter(|m| m.status == MethodStatus::Failed)
            .map(|m| m.method)
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Checks that `config` hashes to the recorded provenance.
    pub fn verify(&self, config: &ExperimentConfig) -> bool {
        self.provenance.config_hash == config.hash() && self.provenance.master_seed == config.run.seed
    }
}

fn fingerprint(timestamps: impl Iterator<Item = Timestamp>) -> String {
    let mut h = Sha256::new();
    for t in timestamps {
        h.update(t.to_string().as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Loads or generates the configured dataset.
pub fn load_data(config: &ExperimentConfig) -> Result<(MarketDataset, Option<LoadReport>)> {
    match config.data.source {
        DataSource::Synthetic => Ok((generate_synthetic(&config.synthetic)?, None)),
        DataSource::Csv => {
            let policy = GapPolicy {
                mode: config.data.gap_mode,
                dedup: config.data.dedup,
            };
            let (ds, report) = load_csv(&StreamPaths::in_dir(&config.data.csv_dir), policy)?;
            Ok((ds, Some(report)))
        }
    }
}

struct Context<'a> {
    ds: &'a MarketDataset,
    config: &'a ExperimentConfig,
    matrix: Option<std::result::Result<FeatureMatrix, String>>,
}

impl Context<'_> {
    fn matrix(&self) -> Result<&FeatureMatrix> {
        match &self.matrix {
            Some(Ok(m)) => Ok(m),
            Some(Err(e)) => Err(Error::Data(format!("feature matrix: {e}"))),
            None => Err(Error::Data("feature matrix was not built".into())),
        }
    }

    /// Train and test row indices of the seeded row split.
    fn row_split(&self, n: usize) -> (Vec<usize>, Vec<usize>) {
        trees::train_test_split(n, self.config.tree.train_fraction, derive_seed(self.config.run.seed, TREE_SPLIT_STREAM))
    }

    /// Row indices of `rows` (ordered by time) falling in each rolling window.
    fn window_rows(&self, timestamps: &[Timestamp]) -> Vec<(Range<usize>, Range<usize>)> {
        let windows = rolling_windows(self.ds.steps(), &self.config.rolling());
        let pos = |step: usize| timestamps.partition_point(|t| *t < self.ds.timestamp(step));
        windows
            .iter()
            .map(|WindowBounds { train, test }| {
                let (a, b, c) = (pos(train.start), pos(test.start), pos(test.end));
                (a..b, b..c)
            })
            .collect()
    }
}

fn tree_params_with(config: &ExperimentConfig, min_leaf: usize) -> TreeParams {
    TreeParams {
        min_leaf,
        ..config.tree.params()
    }
}

fn importance_rows(shares: Vec<f64>, registry: &[String]) -> Vec<ImportanceRow> {
    registry
        .iter()
        .zip(shares)
        .map(|(f, share)| ImportanceRow {
            feature: f.clone(),
            share,
        })
        .collect()
}

fn points_for(m: &FeatureMatrix, rows: impl IntoIterator<Item = usize>, predict: impl Fn(&[f64]) -> f64) -> Vec<(Timestamp, f64, f64)> {
    rows.into_iter()
        .map(|r| (m.timestamps[r], m.targets[r], predict(m.row(r))))
        .collect()
}

fn persistence_points(ds: &MarketDataset, m: &FeatureMatrix, rows: impl IntoIterator<Item = usize>) -> Result<Vec<(Timestamp, f64, f64)>> {
    let mut out = Vec::new();
    for r in rows {
        let t = m.timestamps[r];
        let step = ds.step_of(t)?;
        if step == 0 {
            continue;
        }
        if let Some((prev, true)) = ds.rt_price.get(step - 1) {
            out.push((t, m.targets[r], prev));
        }
    }
    Ok(out)
}

fn run_tree_method(kind: MethodKind, ctx: &Context<'_>) -> Result<MethodReport> {
    let cfg = ctx.config;
    let m = ctx.matrix()?;
    if cfg.run.unified_eval {
        return run_tree_method_unified(kind, ctx, m);
    }
    let (train_idx, test_idx) = ctx.row_split(m.n_rows());
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::InsufficientData("row split leaves an empty block".into()));
    }
    let train = m.select(&train_idx);
    let s = train.samples();
    let test = m.select(&test_idx);
    let test_rows = 0..test.n_rows();
    let protocol = format!("seeded {:.0}/{:.0} row split", cfg.tree.train_fraction * 100.0, (1.0 - cfg.tree.train_fraction) * 100.0);
    let mut report = MethodReport::new(kind, &protocol);
    match kind {
        MethodKind::Tree => {
            let grid: Vec<TreeParams> = cfg.tree.cv_min_leaf.iter().map(|&ml| tree_params_with(cfg, ml)).collect();
            let cv = kfold_cv(&s, &grid, cfg.tree.cv_folds, derive_seed(cfg.run.seed, CV_STREAM))?;
            report.cv = Some(
                cv.rows
                    .iter()
                    .map(|r| CvPoint {
                        min_leaf: r.params.min_leaf,
                        mean_mae: r.mean_mae,
                        mean_mse: r.mean_mse,
                    })
                    .collect(),
            );
            let tree = fit_tree(&s, &cfg.tree.params());
            report.importance = Some(importance_rows(feature_importance(&tree), &m.registry));
            report = report.with_eval(EvalResult::from_points(points_for(&test, test_rows, |x| predict_tree(&tree, x)))?);
        }
        MethodKind::Bagged => {
            let bag = fit_bagged(&s, cfg.bagged.trees, derive_seed(cfg.run.seed, BAG_STREAM))?;
            report.oob = Some(oob_error(&bag, &s)?);
            report.oob_curve = Some(oob_curve(&bag, &s));
            report.importance = Some(importance_rows(feature_importance(&bag), &m.registry));
            report = report.with_eval(EvalResult::from_points(points_for(&test, test_rows, |x| predict_bagged(&bag, x)))?);
        }
        MethodKind::Boosted => {
            let main = cfg.boosted.params();
            let model = fit_lsboost(&s, &main)?;
            let test_s = test.samples();
            let mut curves = Vec::new();
            for &nu in &cfg.boosted.curve_learning_rates {
                for &splits in &cfg.boosted.curve_max_splits {
                    let p = BoostParams {
                        nu,
                        max_splits_weak: splits,
                        ..main
                    };
                    let fitted;
                    let curve_model = if p == main {
                        &model
                    } else {
                        fitted = fit_lsboost(&s, &p)?;
                        &fitted
                    };
                    curves.push(BoostCurve {
                        learning_rate: nu,
                        max_splits_weak: splits,
                        train_mae: curve_model.train_mae.clone(),
                        test_mae: staged_mae(curve_model, &test_s),
                    });
                }
            }
            report.boost_curves = Some(curves);
            report.importance = Some(importance_rows(feature_importance(&model), &m.registry));
            report = report.with_eval(EvalResult::from_points(points_for(&test, test_rows, |x| predict_boosted(&model, x)))?);
        }
        MethodKind::Persistence => {
            report = report.with_eval(EvalResult::from_points(persistence_points(ctx.ds, &test, test_rows)?)?);
        }
        MethodKind::Perfect => {
            report = report.with_eval(EvalResult::from_points(test_rows.map(|r| (test.timestamps[r], test.targets[r], test.targets[r])))?);
        }
        MethodKind::Arima | MethodKind::Narx => unreachable!("not a row-split method"),
    }
    Ok(report)
}

fn run_tree_method_unified(kind: MethodKind, ctx: &Context<'_>, m: &FeatureMatrix) -> Result<MethodReport> {
    let cfg = ctx.config;
    let mut points = Vec::new();
    for (i, (train_r, test_r)) in ctx.window_rows(&m.timestamps).into_iter().enumerate() {
        if test_r.is_empty() {
            continue;
        }
        if train_r.is_empty() && kind != MethodKind::Persistence && kind != MethodKind::Perfect {
            log::warn!("{}: window {i} has no training rows", kind.name());
            continue;
        }
        let train: Vec<usize> = train_r.collect();
        let sub = m.select(&train);
        let s = sub.samples();
        let window_points = match kind {
            MethodKind::Tree => {
                let tree = fit_tree(&s, &cfg.tree.params());
                points_for(m, test_r, |x| predict_tree(&tree, x))
            }
            MethodKind::Bagged => {
                let bag = fit_bagged(&s, cfg.bagged.trees, derive_seed(cfg.run.seed, BAG_STREAM).wrapping_add(i as u64))?;
                points_for(m, test_r, |x| predict_bagged(&bag, x))
            }
            MethodKind::Boosted => {
                let model = fit_lsboost(&s, &cfg.boosted.params())?;
                points_for(m, test_r, |x| predict_boosted(&model, x))
            }
            MethodKind::Persistence => persistence_points(ctx.ds, m, test_r)?,
            MethodKind::Perfect => test_r.map(|r| (m.timestamps[r], m.targets[r], m.targets[r])).collect(),
            MethodKind::Arima | MethodKind::Narx => unreachable!("not a tree-row method"),
        };
        points.extend(window_points);
    }
    let report = MethodReport::new(kind, "rolling origin");
    Ok(report.with_eval(EvalResult::from_points(points)?))
}

fn run_arima(ctx: &Context<'_>) -> Result<MethodReport> {
    let result = rolling_evaluate(ctx.ds, &ctx.config.arima_spec(), &ctx.config.rolling())?;
    let mut report = MethodReport::new(MethodKind::Arima, "rolling origin");
    report.arima_windows = Some(
        result
            .windows
            .iter()
            .map(|w| ArimaWindow {
                origin: w.origin,
                test_start: w.test_start,
                test_end: w.test_end,
                n_predictions: w.n_predictions,
                mae: w.mae,
                alpha: w.model.as_ref().map(|m| m.alpha.clone()).unwrap_or_default(),
                theta: w.model.as_ref().map(|m| m.theta.clone()).unwrap_or_default(),
                sigma2: w.model.as_ref().map(|m| m.sigma2),
                skipped: w.skipped.clone(),
            })
            .collect(),
    );
    report.persistence_on_windows = Some(result.persistence.without_points());
    Ok(report.with_eval(result.eval))
}

fn run_narx(ctx: &Context<'_>) -> Result<MethodReport> {
    let cfg = NarxConfig {
        seed: derive_seed(ctx.config.run.seed, NARX_STREAM),
        ..ctx.config.narx.clone()
    };
    if ctx.config.run.unified_eval {
        let data = narx::assemble_all(ctx.ds, &cfg)?;
        let mut points = Vec::new();
        for (train_r, test_r) in ctx.window_rows(&data.timestamps) {
            if test_r.is_empty() || train_r.len() < 8 {
                continue;
            }
            let cut = train_r.start + (train_r.len() as f64 * 0.85).round() as usize;
            let (net, _) = narx::train_on(&data, train_r.start..cut, cut..train_r.end, &cfg)?;
            points.extend(test_r.map(|r| (data.timestamps[r], data.y[r], narx::forward(&net, data.row(r)))));
        }
        let report = MethodReport::new(MethodKind::Narx, "rolling origin");
        return Ok(report.with_eval(EvalResult::from_points(points)?));
    }
    let fit = narx::train(ctx.ds, &cfg)?;
    let test = fit.split.test.clone();
    let pred = narx::predict_series(&fit.network, ctx.ds, fit.data.timestamps[test.start], fit.data.timestamps[test.end - 1])?;
    let mut report = MethodReport::new(MethodKind::Narx, "temporal 70/15/15 split");
    report.narx_trace = Some(fit.trace);
    Ok(report.with_eval(pred.eval))
}

fn run_method(kind: MethodKind, ctx: &Context<'_>) -> MethodReport {
    let outcome = match kind {
        MethodKind::Arima => run_arima(ctx),
        MethodKind::Narx => run_narx(ctx),
        _ => run_tree_method(kind, ctx),
    };
    match outcome {
        Ok(r) => r,
        Err(e) => {
            log::error!("method {} failed: {e}", kind.name());
            let mut r = MethodReport::new(kind, "");
            r.status = MethodStatus::Failed;
            r.error = Some(e.to_string());
            r
        }
    }
}

/// Runs every configured method on the configured data.
pub fn run(config: &ExperimentConfig) -> std::result::Result<Report, RunError> {
    config.validate().map_err(RunError::Config)?;
    let (ds, load_report) = load_data(config).map_err(RunError::Data)?;
    run_on(config, &ds, load_report)
}

/// Runs every configured method on an already loaded dataset.
pub fn run_on(config: &ExperimentConfig, ds: &MarketDataset, load_report: Option<LoadReport>) -> std::result::Result<Report, RunError> {
    config.validate().map_err(RunError::Config)?;
    let methods = &config.run.methods;
    let needs_matrix = methods.iter().any(|m| m.uses_tree_rows());
    let matrix = needs_matrix.then(|| build_matrix(ds, &config.feature_spec(), None).map_err(|e| e.to_string()));
    let ctx = Context { ds, config, matrix };
    let reports: Vec<MethodReport> = if config.run.parallel_methods {
        methods.par_iter().map(|&k| run_method(k, &ctx)).collect()
    } else {
        methods.iter().map(|&k| run_method(k, &ctx)).collect()
    };
    let prints: BTreeSet<&str> = reports.iter().filter_map(|r| r.test_fingerprint.as_deref()).collect();
    let shared = prints.len() <= 1;
    let caveat = (!shared).then(|| {
        let parts: Vec<String> = reports
            .iter()
            .filter(|r| r.status == MethodStatus::Ok)
            .map(|r| format!("{} ({}, n = {})", r.method.name(), r.protocol, r.eval.as_ref().map_or(0, |e| e.n)))
            .collect();
        format!("methods were scored on different test points: {}; compare errors with care", parts.join(", "))
    });
    let stats = price_stats(ds);
    Ok(Report {
        provenance: Provenance {
            config_hash: config.hash(),
            master_seed: config.run.seed,
            data_source: config.data.source,
            synthetic_seed: (config.data.source == DataSource::Synthetic).then_some(config.synthetic.seed),
            unified_eval: config.run.unified_eval,
            dataset: DatasetSummary {
                start: ds.start(),
                end: ds.end(),
                steps: ds.steps(),
                invalid_fraction: ds.invalid_fraction(),
                price: stats,
            },
        },
        methods: reports,
        shared_test_points: shared,
        caveat,
        registry: needs_matrix.then(|| config.feature_spec().registry()),
        load_report,
    })
}

/// Runs and writes `report.json`, `config.toml` and the `plots/` bundle
/// under `out_dir`.
pub fn run_to_dir(config: &ExperimentConfig, out_dir: impl AsRef<Path>) -> std::result::Result<Report, RunError> {
    let report = run(config)?;
    write_run(&report, config, out_dir).map_err(RunError::Output)?;
    Ok(report)
}

pub fn write_run(report: &Report, config: &ExperimentConfig, out_dir: impl AsRef<Path>) -> Result<()> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, body: String| {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(p, e))
    };
    write("report.json", report.to_json()?)?;
    write("config.toml", config.to_toml()?)?;
    emit_plot_data(report, dir.join("plots"))?;
    Ok(())
}

pub fn read_report(run_dir: impl AsRef<Path>) -> Result<Report> {
    let p = run_dir.as_ref().join("report.json");
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Report::from_json(&text)
}

/// Points kept after dropping the `TRIM_FRACTION` whose real price is
/// farthest from the median real price.
pub fn trim_outliers(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    if points.is_empty() {
        return Vec::new();
    }
    let mut reals: Vec<f64> = points.iter().map(|p| p.0).collect();
    reals.sort_by(f64::total_cmp);
    let n = reals.len();
    let median = if n % 2 == 1 { reals[n / 2] } else { 0.5 * (reals[n / 2 - 1] + reals[n / 2]) };
    let drop = (n as f64 * TRIM_FRACTION).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| (points[a].0 - median).abs().total_cmp(&(points[b].0 - median).abs()).then(a.cmp(&b)));
    let mut keep: Vec<usize> = order[..n - drop].to_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| points[i]).collect()
}

fn write_rows<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes one CSV per figure family into `dir` and returns the files
/// written. Methods that failed or have no data contribute nothing.
pub fn emit_plot_data(report: &Report, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let ok: Vec<&MethodReport> = report.methods.iter().filter(|m| m.status == MethodStatus::Ok).collect();
    let mut written = Vec::new();
    if ok.is_empty() {
        return Ok(written);
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = |name: String| {
        let p = dir.join(name);
        written.push(p.clone());
        p
    };
    for m in &ok {
        let name = m.method.name();
        if let Some(pts) = m.eval.as_ref().and_then(|e| e.per_point.as_ref()) {
            let mut sorted = pts.clone();
            sorted.sort_by_key(|p| p.timestamp);
            write_rows(
                &out(format!("forecast_{name}.csv")),
                &["timestamp", "real", "predicted"],
                sorted.iter().map(|p| [p.timestamp.to_string(), p.real.to_string(), p.predicted.to_string()]),
            )?;
            let scatter: Vec<(f64, f64)> = pts.iter().map(|p| (p.real, p.abs_error)).collect();
            write_rows(
                &out(format!("error_vs_price_{name}.csv")),
                &["real", "abs_error"],
                scatter.iter().map(|(r, e)| [r.to_string(), e.to_string()]),
            )?;
            write_rows(
                &out(format!("error_vs_price_trimmed_{name}.csv")),
                &["real", "abs_error"],
                trim_outliers(&scatter).iter().map(|(r, e)| [r.to_string(), e.to_string()]),
            )?;
        }
        if let Some(imp) = &m.importance {
            write_rows(
                &out(format!("importance_{name}.csv")),
                &["feature", "share"],
                imp.iter().map(|r| [r.feature.clone(), r.share.to_string()]),
            )?;
        }
        if let Some(cv) = &m.cv {
            write_rows(
                &out("cv_min_leaf.csv".into()),
                &["min_leaf", "mean_mae", "mean_mse"],
                cv.iter().map(|c| [c.min_leaf.to_string(), c.mean_mae.to_string(), c.mean_mse.to_string()]),
            )?;
        }
        if let Some(curve) = &m.oob_curve {
            write_rows(
                &out("oob.csv".into()),
                &["trees", "oob_mae"],
                curve.iter().enumerate().map(|(i, v)| [(i + 1).to_string(), opt(*v)]),
            )?;
        }
        if let Some(curves) = &m.boost_curves {
            let rows = curves.iter().flat_map(|c| {
                (0..c.train_mae.len()).map(move |i| {
                    [
                        c.learning_rate.to_string(),
                        c.max_splits_weak.to_string(),
                        i.to_string(),
                        c.train_mae[i].to_string(),
                        opt(c.test_mae.get(i).copied()),
                    ]
                })
            });
            write_rows(&out("boost_train.csv".into()), &["learning_rate", "max_splits_weak", "stages", "train_mae", "test_mae"], rows)?;
        }
        if let Some(trace) = &m.narx_trace {
            trace.write_csv(out("narx_trace.csv".into()))?;
        }
    }
    if let Some(reg) = &report.registry {
        let p = out("registry.json".into());
        std::fs::write(&p, serde_json::to_string_pretty(reg)?).map_err(|e| Error::io(&p, e))?;
    }
    Ok(written)
}

/// Plain-text table of per-method errors.
pub fn summary(report: &Report) -> String {
    let mut s = String::new();
    let p = &report.provenance;
    let _ = writeln!(
        s,
        "data {} .. {} ({} steps), price mean {:.2} sd {:.2} max {:.2}",
        p.dataset.start, p.dataset.end, p.dataset.steps, p.dataset.price.mean, p.dataset.price.sd, p.dataset.price.max
    );
    let _ = writeln!(s, "seed {}  config {}", p.master_seed, &p.config_hash[..12.min(p.config_hash.len())]);
    let _ = writeln!(s, "{:<12} {:>10} {:>10} {:>8}  protocol", "method", "mae", "rmse", "n");
    for m in &report.methods {
        match (&m.status, &m.eval) {
            (MethodStatus::Ok, Some(e)) => {
                let _ = writeln!(s, "{:<12} {:>10.4} {:>10.4} {:>8}  {}", m.method.name(), e.mae, e.rmse, e.n, m.protocol);
            }
            _ => {
                let _ = writeln!(s, "{:<12} FAILED: {}", m.method.name(), m.error.as_deref().unwrap_or("unknown error"));
            }
        }
    }
    if let Some(c) = &report.caveat {
        let _ = writeln!(s, "note: {c}");
    }
    s
}
