//! Time-series data model shared by every forecasting method.
//!
//! Timestamps are naive local market time at 15-minute resolution. A
//! [`Stream`] is a regularly spaced sequence with a validity mask; a
//! [`MarketDataset`] aligns the five market streams over one span. All types
//! are immutable once built.

use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Minutes per native step of the finest stream.
pub const STEP_MINUTES: i64 = 15;
/// 15-minute steps per hour.
pub const STEPS_PER_HOUR: usize = 4;
/// 15-minute steps per day.
pub const STEPS_PER_DAY: usize = 96;

/// A calendar instant on the 15-minute grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(NaiveDateTime);

impl Timestamp {
    pub fn new(instant: NaiveDateTime) -> Result<Self> {
        if instant.second() != 0 || instant.nanosecond() != 0 || !instant.minute().is_multiple_of(15) {
            return Err(Error::Timestamp(format!(
                "{instant} is not on the 15-minute grid"
            )));
        }
        Ok(Self(instant))
    }

    pub fn from_ymd_hm(year: i32, month: u32, day: u32, hour: u32, minute: u32) -> Result<Self> {
        let date = NaiveDate::from_ymd_opt(year, month, day)
            .ok_or_else(|| Error::Timestamp(format!("invalid date {year}-{month}-{day}")))?;
        let instant = date
            .and_hms_opt(hour, minute, 0)
            .ok_or_else(|| Error::Timestamp(format!("invalid time {hour}:{minute}")))?;
        Self::new(instant)
    }

    pub fn instant(&self) -> NaiveDateTime {
        self.0
    }

    pub fn year(&self) -> i32 {
        self.0.year()
    }

    /// 1-12.
    pub fn month(&self) -> u32 {
        self.0.month()
    }

    /// 1-366.
    pub fn day_of_year(&self) -> u32 {
        self.0.ordinal()
    }

    /// 0-6, Monday = 0.
    pub fn day_of_week(&self) -> u32 {
        self.0.weekday().num_days_from_monday()
    }

    pub fn hour(&self) -> u32 {
        self.0.hour()
    }

    /// 0-3.
    pub fn quarter_of_hour(&self) -> u32 {
        self.0.minute() / 15
    }

    pub fn add_steps(&self, steps: i64) -> Self {
        Self(self.0 + Duration::minutes(steps * STEP_MINUTES))
    }

    /// Signed number of 15-minute steps from `self` to `later`.
    pub fn steps_until(&self, later: Timestamp) -> i64 {
        (later.0 - self.0).num_minutes() / STEP_MINUTES
    }

    /// Start of the hour containing this timestamp.
    pub fn floor_hour(&self) -> Self {
        Self(self.0 - Duration::minutes(i64::from(self.0.minute())))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.format("%Y-%m-%dT%H:%M"))
    }
}

impl FromStr for Timestamp {
    type Err = Error;

    /// Accepts `YYYY-MM-DDTHH:MM` with an optional `:SS` and either `T` or a
    /// space as separator.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        const FORMATS: [&str; 4] = [
            "%Y-%m-%dT%H:%M",
            "%Y-%m-%d %H:%M",
            "%Y-%m-%dT%H:%M:%S",
            "%Y-%m-%d %H:%M:%S",
        ];
        for fmt in FORMATS {
            if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
                return Self::new(dt);
            }
        }
        Err(Error::Timestamp(format!("cannot parse {s:?}")))
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    QuarterHour,
    Hourly,
}

impl Resolution {
    pub fn minutes(self) -> i64 {
        match self {
            Resolution::QuarterHour => 15,
            Resolution::Hourly => 60,
        }
    }

    /// Number of 15-minute steps per native step.
    pub fn steps(self) -> usize {
        match self {
            Resolution::QuarterHour => 1,
            Resolution::Hourly => STEPS_PER_HOUR,
        }
    }
}

/// The five market streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    RtPrice,
    RtDemand,
    DemandForecast,
    DaPrice,
    Wind,
}

impl StreamKind {
    pub const ALL: [StreamKind; 5] = [
        StreamKind::RtPrice,
        StreamKind::RtDemand,
        StreamKind::DemandForecast,
        StreamKind::DaPrice,
        StreamKind::Wind,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StreamKind::RtPrice => "rt_price",
            StreamKind::RtDemand => "rt_demand",
            StreamKind::DemandForecast => "demand_forecast",
            StreamKind::DaPrice => "da_price",
            StreamKind::Wind => "wind",
        }
    }

    pub fn resolution(self) -> Resolution {
        match self {
            StreamKind::RtPrice | StreamKind::RtDemand => Resolution::QuarterHour,
            _ => Resolution::Hourly,
        }
    }
}

impl FromStr for StreamKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StreamKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stream {s:?}")))
    }
}

/// Regularly spaced values with a validity mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stream {
    name: String,
    resolution: Resolution,
    start: Timestamp,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl Stream {
    pub fn new(
        name: impl Into<String>,
        resolution: Resolution,
        start: Timestamp,
        values: Vec<f64>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        if values.len() != valid.len() {
            return Err(Error::Data(format!(
                "stream has {} values but {} mask entries",
                values.len(),
                valid.len()
            )));
        }
        if resolution == Resolution::Hourly && start.quarter_of_hour() != 0 {
            return Err(Error::Timestamp(format!(
                "hourly stream must start on the hour, got {start}"
            )));
        }
        Ok(Self {
            name: name.into(),
            resolution,
            start,
            values,
            valid,
        })
    }

    /// A stream with every entry valid.
    pub fn from_values(
        name: impl Into<String>,
        resolution: Resolution,
        start: Timestamp,
        values: Vec<f64>,
    ) -> Result<Self> {
        let valid = vec![true; values.len()];
        Self::new(name, resolution, start, values, valid)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    pub fn start(&self) -> Timestamp {
        self.start
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn get(&self, index: usize) -> Option<(f64, bool)> {
        Some((*self.values.get(index)?, self.valid[index]))
    }

    pub fn timestamp(&self, index: usize) -> Timestamp {
        self.start
            .add_steps(index as i64 * self.resolution.steps() as i64)
    }

    pub fn invalid_count(&self) -> usize {
        self.valid.iter().filter(|v| !**v).count()
    }

    /// Native-resolution index of the step containing `t`.
    pub fn index_of(&self, t: Timestamp) -> Result<usize> {
        let offset = self.start.steps_until(t);
        let per = self.resolution.steps() as i64;
        let idx = offset.div_euclid(per);
        if offset < 0 || idx >= self.len() as i64 {
            return Err(Error::Range(format!(
                "{t} outside stream {} ({} .. {} steps)",
                self.name,
                self.start,
                self.len()
            )));
        }
        Ok(idx as usize)
    }
}

/// Values around `t` at the stream's native resolution.
///
/// The past slice covers steps `t-past_steps ..= t-1`. When `include_t` is set
/// the step containing `t` follows, then `t+1 ..= t+future_steps`. Without
/// `include_t` the future slice still starts at `t+1`.
pub fn slice_window(
    stream: &Stream,
    t: Timestamp,
    past_steps: usize,
    future_steps: usize,
    include_t: bool,
) -> Result<Vec<(f64, bool)>> {
    let center = stream.index_of(t)?;
    if past_steps > center {
        return Err(Error::Range(format!(
            "window of {past_steps} past steps at {t} starts before {}",
            stream.start
        )));
    }
    let last = center + future_steps;
    if last >= stream.len() {
        return Err(Error::Range(format!(
            "window of {future_steps} future steps at {t} runs past the end of {}",
            stream.name
        )));
    }
    let mut out = Vec::with_capacity(past_steps + future_steps + usize::from(include_t));
    let idx = (center - past_steps..center)
        .chain(include_t.then_some(center))
        .chain(center + 1..=last);
    for i in idx {
        out.push((stream.values[i], stream.valid[i]));
    }
    Ok(out)
}

/// Value of an hourly stream for the hour enclosing a 15-minute timestamp.
pub fn hourly_at(stream: &Stream, t: Timestamp) -> Result<(f64, bool)> {
    let i = stream.index_of(t)?;
    Ok((stream.values[i], stream.valid[i]))
}

/// Aligned real-time, forecast and wind streams over one span.
///
/// The span starts on an hour boundary and covers whole hours, so every hourly
/// stream has exactly `steps / 4` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketDataset {
    pub rt_price: Stream,
    pub rt_demand: Stream,
    pub demand_forecast: Stream,
    pub da_price: Stream,
    pub wind: Stream,
    start: Timestamp,
    steps: usize,
}

impl MarketDataset {
    pub fn new(
        rt_price: Stream,
        rt_demand: Stream,
        demand_forecast: Stream,
        da_price: Stream,
        wind: Stream,
    ) -> Result<Self> {
        let start = rt_price.start();
        let steps = rt_price.len();
        if start.quarter_of_hour() != 0 || !steps.is_multiple_of(STEPS_PER_HOUR) || steps == 0 {
            return Err(Error::Data(format!(
                "dataset span must cover whole hours from an hour boundary (start {start}, {steps} steps)"
            )));
        }
        let ds = Self {
            rt_price,
            rt_demand,
            demand_forecast,
            da_price,
            wind,
            start,
            steps,
        };
        for kind in StreamKind::ALL {
            let s = ds.stream(kind);
            let expected = steps / kind.resolution().steps();
            if s.start() != start || s.len() != expected || s.resolution() != kind.resolution() {
                return Err(Error::Data(format!(
                    "stream {} does not cover the dataset span ({} entries from {}, expected {} from {})",
                    kind.name(),
                    s.len(),
                    s.start(),
                    expected,
                    start
                )));
            }
        }
        Ok(ds)
    }

    pub fn stream(&self, kind: StreamKind) -> &Stream {
        match kind {
            StreamKind::RtPrice => &self.rt_price,
            StreamKind::RtDemand => &self.rt_demand,
            StreamKind::DemandForecast => &self.demand_forecast,
            StreamKind::DaPrice => &self.da_price,
            StreamKind::Wind => &self.wind,
        }
    }

    pub fn start(&self) -> Timestamp {
        self.start
    }

    /// Last 15-minute step of the span (inclusive).
    pub fn end(&self) -> Timestamp {
        self.start.add_steps(self.steps as i64 - 1)
    }

    /// Number of 15-minute steps.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn hours(&self) -> usize {
        self.steps / STEPS_PER_HOUR
    }

    pub fn timestamp(&self, step: usize) -> Timestamp {
        self.start.add_steps(step as i64)
    }

    pub fn step_of(&self, t: Timestamp) -> Result<usize> {
        self.rt_price.index_of(t)
    }

    /// Fraction of invalid entries across all streams, weighted by entry count.
    pub fn invalid_fraction(&self) -> f64 {
        let (bad, total) = StreamKind::ALL.iter().fold((0, 0), |(b, n), k| {
            let s = self.stream(*k);
            (b + s.invalid_count(), n + s.len())
        });
        bad as f64 / total as f64
    }
}
