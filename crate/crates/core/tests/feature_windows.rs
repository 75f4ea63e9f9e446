mod common;

use gridcast_core::data::STEPS_PER_HOUR;
use gridcast_core::features::{build_matrix, build_vector, FeatureSpec};
use gridcast_core::ingest::{generate_synthetic, SyntheticConfig};
use gridcast_core::Stream;

fn two_days() -> gridcast_core::MarketDataset {
    generate_synthetic(&SyntheticConfig { days: 2, ..Default::default() }).unwrap()
}

#[test]
fn clean_two_days_give_all_margin_free_rows() {
    let ds = two_days();
    let spec = FeatureSpec::trees_default();
    let m = build_matrix(&ds, &spec, None).unwrap();
    let head = STEPS_PER_HOUR * spec.w_past;
    let tail = STEPS_PER_HOUR * spec.w_future;
    assert_eq!(m.n_rows(), ds.steps() - head - tail);
    assert_eq!(m.n_rows(), 144);
    assert_eq!(m.n_cols(), spec.len());
}

#[test]
fn one_invalid_price_drops_exactly_the_rows_that_touch_it() {
    let ds = two_days();
    let spec = FeatureSpec::trees_default();
    let bad = 100;
    let mut valid = ds.rt_price.valid().to_vec();
    valid[bad] = false;
    let mut poisoned = ds.clone();
    poisoned.rt_price = Stream::new("rt_price", ds.rt_price.resolution(), ds.rt_price.start(), ds.rt_price.values().to_vec(), valid).unwrap();
    let usable = spec.usable_steps(&ds).unwrap();
    let lags = STEPS_PER_HOUR * spec.w_past;
    let touched = usable.clone().filter(|&t| t == bad || (t - lags..t).contains(&bad)).count();
    let full = build_matrix(&ds, &spec, None).unwrap().n_rows();
    let kept = build_matrix(&poisoned, &spec, None).unwrap().n_rows();
    assert_eq!(full - kept, touched);
    assert_eq!(touched, 33);
}

#[test]
fn matrix_rows_equal_individual_vectors() {
    let ds = two_days();
    let spec = FeatureSpec::new(2, 3);
    let m = build_matrix(&ds, &spec, None).unwrap();
    for (i, t) in m.timestamps.iter().enumerate() {
        let v = build_vector(&ds, *t, &spec).unwrap().unwrap();
        assert_eq!(v.as_slice(), m.row(i));
    }
}

#[test]
fn future_values_never_reach_a_feature_vector() {
    let ds = two_days();
    let spec = FeatureSpec::new(2, 3);
    let sentinel = -7.77e11;
    for step in spec.usable_steps(&ds).unwrap() {
        let poisoned = common::poison_from(&ds, step, spec.w_future, sentinel);
        let t = ds.timestamp(step);
        let v = build_vector(&poisoned, t, &spec).unwrap().unwrap();
        assert!(v.iter().all(|x| *x != sentinel), "leak at {t}");
        assert_eq!(v, build_vector(&ds, t, &spec).unwrap().unwrap());
    }
}

#[test]
fn registry_is_stable_and_written_verbatim() {
    let spec = FeatureSpec::trees_default();
    let names = spec.registry();
    assert_eq!(names, FeatureSpec::trees_default().registry());
    assert_eq!(names.len(), spec.len());
    assert_eq!(&names[..7], ["year", "month", "day_of_year", "day_of_week", "hour", "quarter", "rt_price_lag_32"]);
    assert_eq!(names.last().unwrap(), "da_price_h+4");
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("registry.json");
    spec.write_registry(&p).unwrap();
    let back: Vec<String> = serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
    assert_eq!(back, names);
}
