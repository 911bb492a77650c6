//! End-to-end differentiable factor investing.
//!
//! One differentiable pipeline runs from raw factor exposures to portfolio
//! weights: factor selection, a graph-attention multifactor model over
//! industry and universe stock relations, a directional interpretation of
//! the learned factors, and gated portfolio construction — all trained
//! under a single composite objective and evaluated with a chronological
//! walk-forward backtest.

pub mod backtest;
pub mod cli;
pub mod diffcore;
pub mod marketdata;
pub mod model;
pub mod stockgraph;
pub mod training;
