//! Short-term electricity price forecasting.
//!
//! `gridcast-core` implements three families of one-step-ahead real-time price
//! predictors and the machinery needed to compare them on aligned market data:
//!
//! * [`arima`]: subset ARIMA with first-order differencing, conditional sum of
//!   squares estimation and rolling-origin backtesting.
//! * [`trees`]: best-first CART regression trees, bootstrap bagging with
//!   out-of-bag analysis, and least-squares gradient boosting with shrinkage.
//! * [`narx`]: a feedforward network over an exogenous input window plus a
//!   teacher-forced price/demand history buffer, trained on MAE or MSE with
//!   patience-based early stopping.
//!
//! Data flows through [`data`] (multi-resolution streams with validity masks),
//! [`ingest`] (CSV loading and a calibrated synthetic generator) and
//! [`features`] (windowed feature vectors). [`metrics`] holds MAE/RMSE and
//! [`harness`] runs configured experiments and emits reports.
//!
//! ```
//! use gridcast_core::ingest::{generate_synthetic, SyntheticConfig};
//! use gridcast_core::features::{build_matrix, FeatureSpec};
//! use gridcast_core::trees::{fit_tree, predict_tree, TreeParams};
//!
//! let ds = generate_synthetic(&SyntheticConfig { days: 3, ..Default::default() }).unwrap();
//! let x = build_matrix(&ds, &FeatureSpec::trees_default(), None).unwrap();
//! let tree = fit_tree(&x.samples(), &TreeParams::default());
//! let p = predict_tree(&tree, x.row(0));
//! assert!(p.is_finite());
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod arima;
pub mod data;
mod error;
pub mod features;
pub mod harness;
pub mod ingest;
pub mod metrics;
pub mod narx;
mod numeric;
pub mod trees;

pub use data::{MarketDataset, Resolution, Stream, StreamKind, Timestamp};
pub use error::{Error, Result};
pub use metrics::EvalResult;
