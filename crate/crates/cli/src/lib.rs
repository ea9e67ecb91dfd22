//! Batch entry points for the `fwm` command-line tool.
//!
//! Exit codes: 0 success, 2 configuration error, 3 file or format error,
//! 4 numerical failure (fit, insufficient signal, infeasible constraints).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
