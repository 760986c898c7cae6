//! Multivariate normal approximation for exchangeable-pair embeddings.
//!
//! [`stein`] evaluates the generic bounds, [`graphs`], [`ustats`] and
//! [`chaos`] provide the three embeddings with their exact identities, and
//! [`mc`] runs seeded, thread-count independent Monte Carlo checks.

pub mod chaos;
pub mod cli;
pub mod graphs;
pub mod matlite;
pub mod mc;
pub mod report;
pub mod stein;
pub mod ustats;
