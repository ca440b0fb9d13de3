//! Library side of the `spde-lab` binary: configuration, subcommand
//! execution and report aggregation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod report;
pub mod run;
