//! Deterministic simulator for personalized federated learning with
//! per-client parameter selection.
//!
//! Each client owns a binary mask over the flat parameter vector of a small
//! MLP classifier. Masked positions are personalized: trained at their own
//! rate, never uploaded, never overwritten by the server. Unmasked positions
//! are global: trained at a second rate, averaged across exactly the clients
//! that share them, and redistributed every round. Masks start empty and
//! grow by promoting the global positions that moved the most during local
//! training, until a configured personalized fraction is reached.
//!
//! The crate is organized around that loop:
//!
//! * [`model`] is the MLP itself: flat parameters, loss, analytic gradient.
//! * [`data`] generates or loads datasets and deals them to clients.
//! * [`mask`] holds the binary mask algebra and the top-fraction selector.
//! * [`local_update`] is the client side: alternating block training plus
//!   mask growth.
//! * [`server`] is the coordinator: masked aggregation, distribution, the
//!   round loop.
//! * [`baselines`] wires the comparison algorithms through the same round.
//! * [`oracle`] re-derives the structural guarantees independently so runs
//!   can be audited.
//! * [`harness`] and [`config`] run configured experiments and sweeps and
//!   write their artifacts.
//!
//! Every source of randomness is a counter-derived stream of a single
//! master seed, so any run, including a parallel one, is bit-reproducible.

pub mod baselines;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod local_update;
pub mod mask;
pub mod model;
pub mod oracle;
pub mod report;
pub mod seed;
pub mod server;

pub use config::{AlgorithmSpec, FLConfig, SweepSpec};
pub use error::{FedError, Result};
pub use mask::BinaryMask;
pub use model::ParamVector;
pub use report::RoundReport;
pub use server::{run_federation, FederationRun};
