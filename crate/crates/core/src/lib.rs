//! Attack, defense and Stackelberg game for graph community detection.
//!
//! A surrogate detector ([`detector`]) is trained with an unsupervised
//! normalized-cut objective. The attacker ([`attack`]) flips edges near a
//! target set so that the targets scatter across communities; the
//! defender ([`defense`]) flips edges to lower the Rayleigh quotient of the
//! node features. [`game`] couples the two as leader and follower.

pub mod attack;
pub mod baselines;
pub mod config;
pub mod defense;
pub mod detector;
pub mod error;
pub mod game;
pub mod grad;
pub mod harness;
pub mod graph;
pub mod image;
pub mod mask;
pub mod metrics;
pub mod sbm;
pub mod scope;
pub mod selftest;

pub use error::{Error, Result};
pub use graph::Graph;
