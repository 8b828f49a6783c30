//! Conformative filtering for implicit-feedback recommendation.
//!
//! The pipeline goes: ingest a (user, item, timestamp) event log, learn a
//! hierarchy of binary latent taste variables over item co-consumption
//! ([`hlta`]), characterize each taste group by the recent behavior of its
//! members and score items per user by combining group profiles with the
//! user's group memberships ([`cof`]), then evaluate top-N recommendation
//! quality against time-ordered held-out splits ([`eval`]).

pub mod cof;
pub mod eval;
pub mod hlta;
pub mod ingest;
pub mod ltm;

pub use ingest::{Event, EventLog, InteractionMatrix};
pub use ltm::LatentTreeModel;
