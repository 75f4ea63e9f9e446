//! Shared fixtures for the gridcast benchmarks.

use gridcast_core::features::{build_matrix, FeatureMatrix, FeatureSpec};
use gridcast_core::ingest::{generate_synthetic, SyntheticConfig};
use gridcast_core::MarketDataset;

pub fn dataset(days: usize) -> MarketDataset {
    generate_synthetic(&SyntheticConfig { days, ..Default::default() }).expect("synthetic defaults are valid")
}

/// Tree design matrix over `days` of synthetic data.
pub fn tree_matrix(days: usize) -> FeatureMatrix {
    build_matrix(&dataset(days), &FeatureSpec::trees_default(), None).expect("synthetic data has no gaps")
}
