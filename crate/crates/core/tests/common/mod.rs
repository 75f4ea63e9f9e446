#![allow(dead_code)]

use gridcast_core::data::{STEPS_PER_HOUR};
use gridcast_core::{MarketDataset, Resolution, Stream, StreamKind, Timestamp};

pub fn start() -> Timestamp {
    Timestamp::from_ymd_hm(2014, 1, 1, 0, 0).unwrap()
}

fn quarter(kind: StreamKind, values: Vec<f64>) -> Stream {
    Stream::from_values(kind.name(), Resolution::QuarterHour, start(), values).unwrap()
}

fn hourly(kind: StreamKind, values: Vec<f64>) -> Stream {
    Stream::from_values(kind.name(), Resolution::Hourly, start(), values).unwrap()
}

/// Dataset with the given real-time prices and simple, distinct side streams.
pub fn dataset_with_price(prices: Vec<f64>) -> MarketDataset {
    let steps = prices.len();
    assert_eq!(steps % STEPS_PER_HOUR, 0);
    let hours = steps / STEPS_PER_HOUR;
    MarketDataset::new(
        quarter(StreamKind::RtPrice, prices),
        quarter(StreamKind::RtDemand, (0..steps).map(|i| 40_000.0 + (i % 96) as f64).collect()),
        hourly(StreamKind::DemandForecast, (0..hours).map(|h| 40_000.0 + h as f64).collect()),
        hourly(StreamKind::DaPrice, (0..hours).map(|h| 20.0 + (h % 24) as f64).collect()),
        hourly(StreamKind::Wind, (0..hours).map(|h| 3_000.0 + (h % 7) as f64).collect()),
    )
    .unwrap()
}

/// Replaces every value a forecast for `step` may not see with `sentinel`:
/// real-time streams from `step` on, wind from the hour of `step` on, and the
/// hourly forecasts beyond `future_hours` after that hour.
pub fn poison_from(ds: &MarketDataset, step: usize, future_hours: usize, sentinel: f64) -> MarketDataset {
    let hour = step / STEPS_PER_HOUR;
    let cut = |s: &Stream, from: usize| {
        let mut v = s.values().to_vec();
        for x in v.iter_mut().skip(from) {
            *x = sentinel;
        }
        Stream::new(s.name(), s.resolution(), s.start(), v, s.valid().to_vec()).unwrap()
    };
    MarketDataset::new(
        cut(&ds.rt_price, step),
        cut(&ds.rt_demand, step),
        cut(&ds.demand_forecast, hour + future_hours + 1),
        cut(&ds.da_price, hour + future_hours + 1),
        cut(&ds.wind, hour),
    )
    .unwrap()
}
