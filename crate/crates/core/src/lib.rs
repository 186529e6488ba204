//! Power allocation for device-to-device networks with full-duplex nodes.
//!
//! The crate covers the whole pipeline: random network generation
//! ([`netgen`]), the rate model ([`phy`]), the pair-graph representation
//! ([`graphrep`]), a small reverse-mode engine ([`autodiff`]), the
//! message-passing power allocator ([`fgnn`]), classical baselines
//! ([`baselines`]) and the edge-truncation analysis ([`threshold`]).

pub mod autodiff;
pub mod baselines;
pub mod fgnn;
pub mod graphrep;
pub mod netgen;
pub mod phy;
pub mod rng;
pub mod threshold;

pub use baselines::{greedy_top_l, wmmse, WmmseConfig};
pub use fgnn::{FgnnConfig, Sample};
pub use graphrep::{build_pair_graph, truncate_edges, PairGraph};
pub use netgen::{sample_instance, ExperimentConfig, NetworkInstance, WeightMode};
pub use phy::{rates, sinr, weighted_sum_rate, PowerAllocation, SelfInterferenceSpec};
