//! Tracing, ranking and pricing the flexibility of distributed energy
//! resources in radial distribution networks.
pub mod coalition;
pub mod coopgame;
pub mod flexarea;
pub mod net_model;
pub mod opf;
pub mod powerflow;
pub mod pricing;
pub mod sweep;
