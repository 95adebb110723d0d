//! Experiment orchestration behind the `kanvox` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod compare;
pub mod config;
pub mod report;
pub mod run;
pub mod seeds;
pub mod svg;
pub mod synth;
pub mod tables;
