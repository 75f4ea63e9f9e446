//! Loading aligned market data from CSV and generating synthetic datasets.
//!
//! Every stream lives in its own CSV file with a `timestamp,value` header.
//! Missing or ambiguous entries are masked, never imputed.

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Pareto};
use serde::{Deserialize, Serialize};

use crate::data::{MarketDataset, Resolution, Stream, StreamKind, Timestamp, STEPS_PER_DAY, STEPS_PER_HOUR};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GapMode {
    #[default]
    MarkInvalid,
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DedupMode {
    #[default]
    KeepFirst,
    Fail,
}

/// How gaps and repeated timestamps in source files are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GapPolicy {
    pub mode: GapMode,
    pub dedup: DedupMode,
}

/// One CSV file per stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamPaths {
    pub rt_price: PathBuf,
    pub rt_demand: PathBuf,
    pub demand_forecast: PathBuf,
    pub da_price: PathBuf,
    pub wind: PathBuf,
}

impl StreamPaths {
    /// `<dir>/<stream>.csv` for every stream.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        let p = |k: StreamKind| dir.join(format!("{}.csv", k.name()));
        Self {
            rt_price: p(StreamKind::RtPrice),
            rt_demand: p(StreamKind::RtDemand),
            demand_forecast: p(StreamKind::DemandForecast),
            da_price: p(StreamKind::DaPrice),
            wind: p(StreamKind::Wind),
        }
    }

    pub fn get(&self, kind: StreamKind) -> &Path {
        match kind {
            StreamKind::RtPrice => &self.rt_price,
            StreamKind::RtDemand => &self.rt_demand,
            StreamKind::DemandForecast => &self.demand_forecast,
            StreamKind::DaPrice => &self.da_price,
            StreamKind::Wind => &self.wind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamReport {
    pub stream: String,
    pub rows: usize,
    pub duplicates: usize,
    pub gaps: usize,
    pub invalid_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LoadReport {
    pub streams: Vec<StreamReport>,
    pub invalid_fraction: f64,
    pub warnings: Vec<String>,
}

struct RawStream {
    rows: usize,
    entries: Vec<(Timestamp, Option<f64>, usize)>,
}

fn read_raw(path: &Path, kind: StreamKind) -> Result<RawStream> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let (Some(ts_col), Some(val_col)) = (col("timestamp"), col("value")) else {
        return Err(parse_err(1, "header must contain `timestamp` and `value`".into()));
    };

    let mut entries = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let raw_ts = record.get(ts_col).unwrap_or_default();
        let t: Timestamp = raw_ts
            .parse()
            .map_err(|e: Error| parse_err(line, e.to_string()))?;
        if kind.resolution() == Resolution::Hourly && t.quarter_of_hour() != 0 {
            return Err(parse_err(line, format!("hourly stream row at {t} is not on the hour")));
        }
        let raw_val = record.get(val_col).unwrap_or_default();
        let value = if raw_val.is_empty() {
            None
        } else {
            let v: f64 = raw_val
                .parse()
                .map_err(|_| parse_err(line, format!("malformed value {raw_val:?}")))?;
            v.is_finite().then_some(v)
        };
        entries.push((t, value, line));
    }
    Ok(RawStream {
        rows: entries.len(),
        entries,
    })
}

/// Loads five stream files and aligns them on their common span.
///
/// The span runs from the earliest hour seen in any file to the end of the
/// latest hour seen; entries absent from a file are masked. A repeated
/// timestamp with an identical value collapses to one valid entry. A repeated
/// timestamp with a different value keeps the first value, masks the step and
/// records a warning under [`DedupMode::KeepFirst`], or fails under
/// [`DedupMode::Fail`].
pub fn load_csv(paths: &StreamPaths, policy: GapPolicy) -> Result<(MarketDataset, LoadReport)> {
    let mut raw = HashMap::new();
    for kind in StreamKind::ALL {
        raw.insert(kind, read_raw(paths.get(kind), kind)?);
    }
    let first = raw
        .values()
        .flat_map(|r| r.entries.iter().map(|e| e.0))
        .min()
        .ok_or_else(|| Error::Data("all stream files are empty".into()))?;
    let last = raw
        .iter()
        .flat_map(|(k, r)| {
            let extra = (k.resolution().steps() - 1) as i64;
            r.entries.iter().map(move |e| e.0.add_steps(extra))
        })
        .max()
        .expect("nonempty");
    let start = first.floor_hour();
    let end = last.floor_hour().add_steps(STEPS_PER_HOUR as i64 - 1);
    let steps = (start.steps_until(end) + 1) as usize;

    let mut report = LoadReport::default();
    let mut streams = HashMap::new();
    for kind in StreamKind::ALL {
        let src = &raw[&kind];
        let per = kind.resolution().steps();
        let len = steps / per;
        let mut values = vec![f64::NAN; len];
        let mut seen = vec![false; len];
        let mut valid = vec![false; len];
        let mut duplicates = 0;
        for &(t, value, line) in &src.entries {
            let idx = (start.steps_until(t) as usize) / per;
            if seen[idx] {
                duplicates += 1;
                let same = match (values[idx], value) {
                    (a, Some(b)) if valid[idx] => a == b,
                    (_, None) => !valid[idx],
                    _ => false,
                };
                if same {
                    continue;
                }
                match policy.dedup {
                    DedupMode::Fail => {
                        return Err(Error::Parse {
                            path: paths.get(kind).to_path_buf(),
                            line,
                            msg: format!("conflicting duplicate for {t}"),
                        })
                    }
                    DedupMode::KeepFirst => {
                        valid[idx] = false;
                        report.warnings.push(format!(
                            "{}: conflicting duplicate at {t} (line {line}); first value kept, step masked",
                            kind.name()
                        ));
                    }
                }
                continue;
            }
            seen[idx] = true;
            if let Some(v) = value {
                values[idx] = v;
                valid[idx] = true;
            }
        }
        let gaps = seen.iter().filter(|s| !**s).count();
        if policy.mode == GapMode::Fail && gaps > 0 {
            return Err(Error::Data(format!(
                "{}: {gaps} missing entries in span {start} .. {end}",
                kind.name()
            )));
        }
        let stream = Stream::new(kind.name(), kind.resolution(), start, values, valid)?;
        report.streams.push(StreamReport {
            stream: kind.name().to_string(),
            rows: src.rows,
            duplicates,
            gaps,
            invalid_fraction: stream.invalid_count() as f64 / len as f64,
        });
        streams.insert(kind, stream);
    }
    let mut take = |k| streams.remove(&k).expect("all streams loaded");
    let ds = MarketDataset::new(
        take(StreamKind::RtPrice),
        take(StreamKind::RtDemand),
        take(StreamKind::DemandForecast),
        take(StreamKind::DaPrice),
        take(StreamKind::Wind),
    )?;
    report.invalid_fraction = ds.invalid_fraction();
    for w in &report.warnings {
        log::warn!("{w}");
    }
    Ok((ds, report))
}

/// Writes the valid entries of a stream as `timestamp,value` rows.
pub fn write_csv(stream: &Stream, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["timestamp", "value"])?;
    for i in 0..stream.len() {
        let (v, ok) = stream.get(i).expect("in range");
        if ok {
            w.write_record([stream.timestamp(i).to_string(), v.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Writes every stream of `ds` into `dir` using the [`StreamPaths::in_dir`] layout.
pub fn write_dataset(ds: &MarketDataset, dir: impl AsRef<Path>) -> Result<StreamPaths> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = StreamPaths::in_dir(dir);
    for kind in StreamKind::ALL {
        write_csv(ds.stream(kind), paths.get(kind))?;
    }
    Ok(paths)
}

/// Writes a load report as pretty JSON.
pub fn write_load_report(report: &LoadReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(&mut f, report)?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Parameters of the synthetic market generator.
///
/// Defaults are calibrated so that two simulated years land near a
/// high-variance nodal price series: mean around 20 USD/MWh, standard
/// deviation around 50 and a maximum far above the mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub start: Timestamp,
    pub days: usize,
    /// Price at mean demand, USD/MWh.
    pub base_price: f64,
    /// Price response to relative demand deviation, USD/MWh per unit.
    pub demand_slope: f64,
    /// Quadratic (convex) price response, USD/MWh per unit squared.
    pub demand_curvature: f64,
    /// Mean demand, MW.
    pub base_demand: f64,
    pub daily_amplitude: f64,
    pub weekly_amplitude: f64,
    pub demand_noise_sd: f64,
    pub forecast_noise_sd: f64,
    /// Innovation SD of the AR(1) price noise, USD/MWh.
    pub noise_sd: f64,
    pub noise_ar: f64,
    /// Probability per step that a spike starts.
    pub spike_rate: f64,
    /// Pareto scale of the excess spike multiplier.
    pub spike_scale: f64,
    /// Pareto shape of the excess spike multiplier.
    pub spike_shape: f64,
    /// Spike persistence is uniform on `1..=spike_max_steps`.
    pub spike_max_steps: usize,
    pub price_cap: f64,
    /// Installed wind capacity, MW.
    pub wind_capacity: f64,
    pub wind_noise_sd: f64,
    /// Price drop at full wind relative to half capacity, USD/MWh.
    pub wind_price_effect: f64,
    pub da_noise_sd: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            start: Timestamp::from_ymd_hm(2014, 1, 1, 0, 0).expect("valid"),
            days: 730,
            base_price: 14.0,
            demand_slope: 40.0,
            demand_curvature: 200.0,
            base_demand: 40_000.0,
            daily_amplitude: 8_000.0,
            weekly_amplitude: 2_000.0,
            demand_noise_sd: 400.0,
            forecast_noise_sd: 600.0,
            noise_sd: 3.0,
            noise_ar: 0.5,
            spike_rate: 0.0005,
            spike_scale: 40.0,
            spike_shape: 2.5,
            spike_max_steps: 4,
            price_cap: 5_000.0,
            wind_capacity: 10_000.0,
            wind_noise_sd: 0.15,
            wind_price_effect: 6.0,
            da_noise_sd: 1.0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("base_demand", self.base_demand),
            ("daily_amplitude", self.daily_amplitude),
            ("weekly_amplitude", self.weekly_amplitude),
            ("demand_noise_sd", self.demand_noise_sd),
            ("forecast_noise_sd", self.forecast_noise_sd),
            ("noise_sd", self.noise_sd),
            ("spike_scale", self.spike_scale),
            ("wind_capacity", self.wind_capacity),
            ("wind_noise_sd", self.wind_noise_sd),
            ("da_noise_sd", self.da_noise_sd),
            ("price_cap", self.price_cap),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.spike_rate) {
            return Err(Error::Config(format!("spike_rate must be in [0, 1], got {}", self.spike_rate)));
        }
        if self.base_demand <= 0.0 {
            return Err(Error::Config("base_demand must be positive".into()));
        }
        if !(self.spike_shape > 0.0) || self.spike_max_steps == 0 {
            return Err(Error::Config("spike_shape must be positive and spike_max_steps >= 1".into()));
        }
        if !(self.noise_ar.abs() < 1.0) {
            return Err(Error::Config("noise_ar must lie in (-1, 1)".into()));
        }
        if self.days == 0 {
            return Err(Error::Config("days must be >= 1".into()));
        }
        if self.start.quarter_of_hour() != 0 {
            return Err(Error::Config("start must be on an hour boundary".into()));
        }
        Ok(())
    }

    /// Deterministic demand deviation from `base_demand` at a step, MW.
    pub fn demand_profile(&self, t: Timestamp) -> f64 {
        let days = self.start.steps_until(t) as f64 / STEPS_PER_DAY as f64;
        let daily = (2.0 * std::f64::consts::PI * (days - 9.0 / 24.0)).sin();
        let weekly = (2.0 * std::f64::consts::PI * days / 7.0).sin();
        self.daily_amplitude * daily + self.weekly_amplitude * weekly
    }

    fn smooth_price(&self, rel_demand: f64, wind_share: f64) -> f64 {
        self.base_price + self.demand_slope * rel_demand + self.demand_curvature * rel_demand * rel_demand
            - self.wind_price_effect * (wind_share - 0.5) * 2.0
    }
}

/// Per-stream RNG substreams, so adding a stream never perturbs the others.
#[derive(Clone, Copy)]
enum SubSeed {
    Demand = 1,
    Forecast = 2,
    PriceNoise = 3,
    Spikes = 4,
    Wind = 5,
    DayAhead = 6,
}

fn substream(seed: u64, which: SubSeed) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Latent quantities behind a synthetic dataset, exposed for tests.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTrace {
    /// `true` where a spike started at that 15-minute step.
    pub spike_onsets: Vec<bool>,
    /// Price before noise and spikes.
    pub smooth_price: Vec<f64>,
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<MarketDataset> {
    generate_synthetic_with_trace(cfg).map(|(ds, _)| ds)
}

/// Deterministic synthetic market for a fixed seed.
///
/// Demand is a daily plus weekly sinusoid with noise. Price is a convex
/// function of relative demand, lowered by wind, plus AR(1) noise, multiplied
/// by a Pareto spike process that persists for a few steps once triggered.
/// Day-ahead prices are the hourly mean of the noise-free price (spikes
/// included) plus noise, and the demand forecast is the hourly mean of the
/// realized demand plus noise.
pub fn generate_synthetic_with_trace(cfg: &SyntheticConfig) -> Result<(MarketDataset, SyntheticTrace)> {
    cfg.validate()?;
    let steps = cfg.days * STEPS_PER_DAY;
    let hours = steps / STEPS_PER_HOUR;

    let normal = |sd: f64| Normal::new(0.0, sd).expect("sd validated");

    // Wind: bounded positive, logistic transform of a persistent hourly AR(1).
    let mut wind_rng = substream(cfg.seed, SubSeed::Wind);
    let wind_innov = normal(cfg.wind_noise_sd);
    let mut latent = 0.0;
    let wind: Vec<f64> = (0..hours)
        .map(|_| {
            latent = 0.97 * latent + wind_innov.sample(&mut wind_rng);
            cfg.wind_capacity / (1.0 + (-latent).exp())
        })
        .collect();
    let wind_share = |step: usize| {
        if cfg.wind_capacity > 0.0 {
            wind[step / STEPS_PER_HOUR] / cfg.wind_capacity
        } else {
            0.5
        }
    };

    let mut demand_rng = substream(cfg.seed, SubSeed::Demand);
    let demand_noise = normal(cfg.demand_noise_sd);
    let profile: Vec<f64> = (0..steps)
        .map(|i| cfg.base_demand + cfg.demand_profile(cfg.start.add_steps(i as i64)))
        .collect();
    let demand: Vec<f64> = profile
        .iter()
        .map(|d| d + demand_noise.sample(&mut demand_rng))
        .collect();

    let smooth: Vec<f64> = (0..steps)
        .map(|i| cfg.smooth_price((demand[i] - cfg.base_demand) / cfg.base_demand, wind_share(i)))
        .collect();

    let mut spike_rng = substream(cfg.seed, SubSeed::Spikes);
    let pareto = Pareto::new(cfg.spike_scale.max(f64::MIN_POSITIVE), cfg.spike_shape)
        .map_err(|e| Error::Config(format!("spike distribution: {e}")))?;
    let mut multiplier = vec![1.0f64; steps];
    let mut onsets = vec![false; steps];
    for i in 0..steps {
        if spike_rng.random::<f64>() < cfg.spike_rate {
            onsets[i] = true;
            let m = 1.0 + pareto.sample(&mut spike_rng);
            let len = spike_rng.random_range(1..=cfg.spike_max_steps);
            for slot in multiplier.iter_mut().skip(i).take(len) {
                *slot = slot.max(m);
            }
        }
    }

    let mut noise_rng = substream(cfg.seed, SubSeed::PriceNoise);
    let price_innov = normal(cfg.noise_sd);
    let mut ar = 0.0;
    let price: Vec<f64> = (0..steps)
        .map(|i| {
            ar = cfg.noise_ar * ar + price_innov.sample(&mut noise_rng);
            (smooth[i] * multiplier[i] + ar).min(cfg.price_cap)
        })
        .collect();

    let mut fc_rng = substream(cfg.seed, SubSeed::Forecast);
    let fc_noise = normal(cfg.forecast_noise_sd);
    let demand_forecast: Vec<f64> = demand
        .chunks(STEPS_PER_HOUR)
        .map(|h| h.iter().sum::<f64>() / h.len() as f64 + fc_noise.sample(&mut fc_rng))
        .collect();

    let mut da_rng = substream(cfg.seed, SubSeed::DayAhead);
    let da_noise = normal(cfg.da_noise_sd);
    // The day-ahead market anticipates the hour's noise-free price, spikes included.
    let da_price: Vec<f64> = (0..hours)
        .map(|h| {
            let range = h * STEPS_PER_HOUR..(h + 1) * STEPS_PER_HOUR;
            let expected: f64 = range
                .map(|i| (smooth[i] * multiplier[i]).min(cfg.price_cap))
                .sum::<f64>()
                / STEPS_PER_HOUR as f64;
            expected + da_noise.sample(&mut da_rng)
        })
        .collect();

    let q = Resolution::QuarterHour;
    let hr = Resolution::Hourly;
    let ds = MarketDataset::new(
        Stream::from_values(StreamKind::RtPrice.name(), q, cfg.start, price)?,
        Stream::from_values(StreamKind::RtDemand.name(), q, cfg.start, demand)?,
        Stream::from_values(StreamKind::DemandForecast.name(), hr, cfg.start, demand_forecast)?,
        Stream::from_values(StreamKind::DaPrice.name(), hr, cfg.start, da_price)?,
        Stream::from_values(StreamKind::Wind.name(), hr, cfg.start, wind)?,
    )?;
    Ok((
        ds,
        SyntheticTrace {
            spike_onsets: onsets,
            smooth_price: smooth,
        },
    ))
}

/// Mean, population SD and max of the valid real-time prices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceStats {
    pub mean: f64,
    pub sd: f64,
    pub max: f64,
    pub n_valid: usize,
}

pub fn price_stats(ds: &MarketDataset) -> PriceStats {
    let vals: Vec<f64> = ds
        .rt_price
        .values()
        .iter()
        .zip(ds.rt_price.valid())
        .filter(|(_, ok)| **ok)
        .map(|(v, _)| *v)
        .collect();
    let (mean, sd) = crate::numeric::mean_sd(&vals);
    PriceStats {
        mean,
        sd,
        max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        n_valid: vals.len(),
    }
}
