//! Windowed feature vectors for a target timestamp.
//!
//! For a target step `t` a vector holds, in registry order: calendar fields of
//! `t`; real-time price and demand at the 15-minute steps `t-4*W_P ..= t-1`;
//! wind for the `W_P` completed hours before the hour of `t`; demand forecast
//! and day-ahead price for hours `h(t)-W_P ..= h(t)+W_F`. Real-time values at
//! or after `t` are never read.

use std::collections::BTreeSet;
use std::ops::RangeInclusive;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{MarketDataset, StreamKind, Timestamp, STEPS_PER_HOUR};
use crate::error::{Error, Result};

/// Forward-looking streams are published at most a day ahead.
pub const MAX_FUTURE_HOURS: usize = 24;

pub const CALENDAR_FIELDS: [&str; 6] = ["year", "month", "day_of_year", "day_of_week", "hour", "quarter"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    /// Past window in hours.
    pub w_past: usize,
    /// Future window in hours.
    pub w_future: usize,
    pub include: BTreeSet<StreamKind>,
    pub calendar: bool,
}

impl FeatureSpec {
    pub fn new(w_past: usize, w_future: usize) -> Self {
        Self {
            w_past,
            w_future,
            include: StreamKind::ALL.into_iter().collect(),
            calendar: true,
        }
    }

    /// Eight hours back and four ahead.
    pub fn trees_default() -> Self {
        Self::new(8, 4)
    }

    pub fn with_streams(mut self, streams: impl IntoIterator<Item = StreamKind>) -> Self {
        self.include = streams.into_iter().collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.w_future > MAX_FUTURE_HOURS {
            return Err(Error::Config(format!(
                "w_future = {} exceeds the {MAX_FUTURE_HOURS} h day-ahead horizon",
                self.w_future
            )));
        }
        Ok(())
    }

    fn has(&self, kind: StreamKind) -> bool {
        self.include.contains(&kind)
    }

    /// Ordered feature names.
    pub fn registry(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.calendar {
            names.extend(CALENDAR_FIELDS.iter().map(|s| s.to_string()));
        }
        for kind in [StreamKind::RtPrice, StreamKind::RtDemand] {
            if self.has(kind) {
                for lag in (1..=STEPS_PER_HOUR * self.w_past).rev() {
                    names.push(format!("{}_lag_{lag}", kind.name()));
                }
            }
        }
        if self.has(StreamKind::Wind) {
            for lag in (1..=self.w_past).rev() {
                names.push(format!("wind_lag_h{lag}"));
            }
        }
        for kind in [StreamKind::DemandForecast, StreamKind::DaPrice] {
            if self.has(kind) {
                for off in -(self.w_past as i64)..=self.w_future as i64 {
                    names.push(format!("{}_h{off:+}", kind.name()));
                }
            }
        }
        names
    }

    pub fn len(&self) -> usize {
        let mut n = if self.calendar { CALENDAR_FIELDS.len() } else { 0 };
        for kind in [StreamKind::RtPrice, StreamKind::RtDemand] {
            if self.has(kind) {
                n += STEPS_PER_HOUR * self.w_past;
            }
        }
        if self.has(StreamKind::Wind) {
            n += self.w_past;
        }
        for kind in [StreamKind::DemandForecast, StreamKind::DaPrice] {
            if self.has(kind) {
                n += self.w_past + 1 + self.w_future;
            }
        }
        n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// 15-minute steps of `ds` with enough margin on both sides.
    pub fn usable_steps(&self, ds: &MarketDataset) -> Option<RangeInclusive<usize>> {
        let first = STEPS_PER_HOUR * self.w_past;
        let last_hour = ds.hours().checked_sub(1 + self.w_future)?;
        let last = last_hour * STEPS_PER_HOUR + STEPS_PER_HOUR - 1;
        (first <= last).then_some(first..=last)
    }

    pub fn write_registry(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(&self.registry())?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

/// Calendar fields of `t` as raw integers, in [`CALENDAR_FIELDS`] order.
pub fn calendar_fields(t: Timestamp) -> [f64; 6] {
    [
        f64::from(t.year()),
        f64::from(t.month()),
        f64::from(t.day_of_year()),
        f64::from(t.day_of_week()),
        f64::from(t.hour()),
        f64::from(t.quarter_of_hour()),
    ]
}

/// Appends the features for step `step` to `out`. Returns `false` (leaving
/// `out` partially written) when any touched entry is invalid.
pub(crate) fn fill_row(ds: &MarketDataset, spec: &FeatureSpec, step: usize, out: &mut Vec<f64>) -> bool {
    let hour = step / STEPS_PER_HOUR;
    if spec.calendar {
        out.extend_from_slice(&calendar_fields(ds.timestamp(step)));
    }
    let push_range = |kind: StreamKind, range: std::ops::Range<usize>, out: &mut Vec<f64>| {
        let s = ds.stream(kind);
        let vals = &s.values()[range.clone()];
        if s.valid()[range].iter().any(|v| !v) {
            return false;
        }
        out.extend_from_slice(vals);
        true
    };
    let past = STEPS_PER_HOUR * spec.w_past;
    for kind in [StreamKind::RtPrice, StreamKind::RtDemand] {
        if spec.has(kind) && !push_range(kind, step - past..step, out) {
            return false;
        }
    }
    if spec.has(StreamKind::Wind) && !push_range(StreamKind::Wind, hour - spec.w_past..hour, out) {
        return false;
    }
    for kind in [StreamKind::DemandForecast, StreamKind::DaPrice] {
        if spec.has(kind) && !push_range(kind, hour - spec.w_past..hour + spec.w_future + 1, out) {
            return false;
        }
    }
    true
}

/// Feature vector for target `t`, or `None` when the window touches invalid data.
pub fn build_vector(ds: &MarketDataset, t: Timestamp, spec: &FeatureSpec) -> Result<Option<Vec<f64>>> {
    spec.validate()?;
    let step = ds.step_of(t)?;
    let ok = spec
        .usable_steps(ds)
        .is_some_and(|r| r.contains(&step));
    if !ok {
        return Err(Error::Range(format!(
            "{t} lacks the {} h / {} h window margin",
            spec.w_past, spec.w_future
        )));
    }
    let mut out = Vec::with_capacity(spec.len());
    Ok(fill_row(ds, spec, step, &mut out).then_some(out))
}

/// Borrowed row-major design matrix with targets.
#[derive(Debug, Clone, Copy)]
pub struct Samples<'a> {
    x: &'a [f64],
    n_features: usize,
    y: &'a [f64],
}

impl<'a> Samples<'a> {
    pub fn new(x: &'a [f64], n_features: usize, y: &'a [f64]) -> Result<Self> {
        if n_features == 0 && !y.is_empty() || x.len() != n_features * y.len() {
            return Err(Error::Data(format!(
                "design matrix has {} cells, expected {} rows x {n_features} features",
                x.len(),
                y.len()
            )));
        }
        Ok(Self { x, n_features, y })
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    #[inline]
    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.x[i * self.n_features..(i + 1) * self.n_features]
    }

    #[inline]
    pub fn value(&self, row: usize, feature: usize) -> f64 {
        self.x[row * self.n_features + feature]
    }

    pub fn targets(&self) -> &'a [f64] {
        self.y
    }
}

/// One row per usable target timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub registry: Vec<String>,
    data: Vec<f64>,
    pub targets: Vec<f64>,
    pub timestamps: Vec<Timestamp>,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.targets.len()
    }

    pub fn n_cols(&self) -> usize {
        self.registry.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.n_cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn samples(&self) -> Samples<'_> {
        Samples {
            x: &self.data,
            n_features: self.n_cols(),
            y: &self.targets,
        }
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.n_cols());
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            registry: self.registry.clone(),
            data,
            targets: indices.iter().map(|&i| self.targets[i]).collect(),
            timestamps: indices.iter().map(|&i| self.timestamps[i]).collect(),
        }
    }

    /// Rows whose timestamps fall in `[from, to]`.
    pub fn between(&self, from: Timestamp, to: Timestamp) -> FeatureMatrix {
        let idx: Vec<usize> = (0..self.n_rows())
            .filter(|&i| self.timestamps[i] >= from && self.timestamps[i] <= to)
            .collect();
        self.select(&idx)
    }
}

/// Feature rows for every 15-minute step in `range` (inclusive) whose window
/// and target are valid. `None` means every step with a full margin.
pub fn build_matrix(
    ds: &MarketDataset,
    spec: &FeatureSpec,
    range: Option<(Timestamp, Timestamp)>,
) -> Result<FeatureMatrix> {
    spec.validate()?;
    let usable = spec.usable_steps(ds).ok_or(Error::EmptyMatrix)?;
    let steps = match range {
        None => usable,
        Some((from, to)) => {
            if from > to {
                return Err(Error::EmptyMatrix);
            }
            let (a, b) = (ds.step_of(from)?, ds.step_of(to)?);
            if !usable.contains(&a) || !usable.contains(&b) {
                return Err(Error::Range(format!(
                    "range {from} .. {to} lacks the {} h / {} h window margin",
                    spec.w_past, spec.w_future
                )));
            }
            a..=b
        }
    };
    let width = spec.len();
    let mut data = Vec::new();
    let mut targets = Vec::new();
    let mut timestamps = Vec::new();
    let mut row = Vec::with_capacity(width);
    for step in steps {
        let (target, target_ok) = ds.rt_price.get(step).expect("step in span");
        if !target_ok {
            continue;
        }
        row.clear();
        if fill_row(ds, spec, step, &mut row) {
            data.extend_from_slice(&row);
            targets.push(target);
            timestamps.push(ds.timestamp(step));
        }
    }
    if targets.is_empty() {
        return Err(Error::EmptyMatrix);
    }
    Ok(FeatureMatrix {
        registry: spec.registry(),
        data,
        targets,
        timestamps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Resolution, Stream};

    fn constant_dataset(hours: usize) -> MarketDataset {
        let start = Timestamp::from_ymd_hm(2014, 3, 5, 0, 0).unwrap();
        let q = |v: f64| Stream::from_values("q", Resolution::QuarterHour, start, vec![v; hours * 4]).unwrap();
        let h = |v: f64| Stream::from_values("h", Resolution::Hourly, start, vec![v; hours]).unwrap();
        MarketDataset::new(q(10.0), q(100.0), h(5.0), h(5.0), h(5.0)).unwrap()
    }

    #[test]
    fn constant_dataset_vector_layout() {
        let ds = constant_dataset(6);
        let spec = FeatureSpec::new(1, 1);
        let t = Timestamp::from_ymd_hm(2014, 3, 5, 2, 15).unwrap();
        let v = build_vector(&ds, t, &spec).unwrap().unwrap();
        // 6 calendar + 4 price + 4 demand + 1 wind + 3 forecast + 3 day-ahead
        assert_eq!(v.len(), 21);
        assert_eq!(spec.registry().len(), 21);
        let mut expected = calendar_fields(t).to_vec();
        expected.extend([10.0; 4]);
        expected.extend([100.0; 4]);
        expected.extend([5.0; 7]);
        assert_eq!(v, expected);
        assert_eq!(&v[..6], &[2014.0, 3.0, 64.0, 2.0, 2.0, 1.0]);
    }

    #[test]
    fn registry_names_follow_layout() {
        let reg = FeatureSpec::new(1, 1).registry();
        assert_eq!(reg[6], "rt_price_lag_4");
        assert_eq!(reg[9], "rt_price_lag_1");
        assert_eq!(reg[14], "wind_lag_h1");
        assert_eq!(reg[15], "demand_forecast_h-1");
        assert_eq!(reg[17], "demand_forecast_h+1");
        assert_eq!(reg[20], "da_price_h+1");
    }

    #[test]
    fn calendar_only_spec() {
        let ds = constant_dataset(2);
        let spec = FeatureSpec::new(0, 0).with_streams([]);
        let t = Timestamp::from_ymd_hm(2014, 3, 5, 1, 30).unwrap();
        let v = build_vector(&ds, t, &spec).unwrap().unwrap();
        assert_eq!(v, calendar_fields(t).to_vec());
    }

    #[test]
    fn invalid_step_gives_skip_marker() {
        let mut ds = constant_dataset(6);
        let mut valid = vec![true; 24];
        valid[5] = false;
        ds.rt_demand = Stream::new("q", Resolution::QuarterHour, ds.start(), vec![100.0; 24], valid).unwrap();
        let spec = FeatureSpec::new(1, 1);
        assert_eq!(build_vector(&ds, ds.timestamp(6), &spec).unwrap(), None);
        assert!(build_vector(&ds, ds.timestamp(10), &spec).unwrap().is_some());
    }

    #[test]
    fn margins_are_enforced() {
        let ds = constant_dataset(6);
        let spec = FeatureSpec::new(1, 1);
        assert!(matches!(build_vector(&ds, ds.timestamp(3), &spec), Err(Error::Range(_))));
        assert!(matches!(build_vector(&ds, ds.timestamp(20), &spec), Err(Error::Range(_))));
        assert!(build_vector(&ds, ds.timestamp(19), &spec).is_ok());
        assert!(FeatureSpec::new(1, 25).validate().is_err());
    }

    #[test]
    fn empty_range_signals_empty_matrix() {
        let ds = constant_dataset(6);
        let spec = FeatureSpec::new(1, 1);
        let r = build_matrix(&ds, &spec, Some((ds.timestamp(10), ds.timestamp(9))));
        assert!(matches!(r, Err(Error::EmptyMatrix)));
    }
}
