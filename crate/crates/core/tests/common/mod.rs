//! Independent oracles shared by the integration tests. Nothing here calls
//! into the OPF.

#![allow(dead_code)]

pub mod gauss_seidel;
pub mod setpoint_search;
