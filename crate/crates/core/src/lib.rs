//! Desk-scale laboratory for hierarchical (grouped) mixture-of-experts routing.
//!
//! The crate implements a grouped MoE residual layer with group-local Top-K
//! dispatch, the load-balancing loss and the inter-/intra-group regularizers
//! that shape it, bias-corrected routing, diagnostic metrics (load CV, routing
//! overlap, collision entropy and mutual information, group coverage),
//! randomized certification sweeps for the governing identities and
//! inequalities, and a deterministic synthetic training harness with baseline
//! comparison and Pareto sweeps.
//!
//! All arithmetic is `f64`. Every run is reproducible bit for bit from its
//! seed: random draws come from a counter-based generator with a fixed
//! cross-platform stream, and artifact writers format deterministically.

pub mod config;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod moe;
pub mod numerics;
pub mod objectives;
pub mod router;
pub mod theory;

pub use error::{Error, Result};
