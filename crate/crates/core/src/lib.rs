//! Rare-event frequency extrapolation for gridded precipitation runs.
//!
//! A 25-location daily panel is reduced to univariate targets. Each target
//! gets a seasonal peaks-over-threshold model with an exponential tail above
//! an empirical quantile. The quantile level is picked by a betting game on
//! the top order statistics, and the fitted model is turned into a Monte
//! Carlo frequency estimate with a minimal-length Poisson interval.
//!
//! | module       | contents                                             |
//! |--------------|------------------------------------------------------|
//! | [`ingest`]   | run panels, CSV I/O, synthetic generator and oracle  |
//! | [`reduce`]   | univariate targets, event counts, angular diagnostic |
//! | [`potmodel`] | quantile, exceedances, cyclic spline scale, sampling |
//! | [`betting`]  | order-statistic game, EWA wealth, level selection    |
//! | [`estimate`] | replication counts and Poisson intervals             |
//! | [`pipeline`] | end-to-end run and artifact writing                  |

pub mod betting;
pub mod error;
pub mod estimate;
pub mod ingest;
pub mod pipeline;
pub mod potmodel;
pub mod reduce;
pub mod seed;

pub use error::{Error, Result};
