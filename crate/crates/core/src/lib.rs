//! Flow-based menu learning for single-bidder combinatorial auctions.
//!
//! A menu element's bundle distribution is the pushforward of a finite
//! mixture of Dirac points through a learned ODE flow. Stage one fits the
//! flow so that it carries starting points onto feasible bundles; stage two
//! freezes the flow and learns prices and Dirac mixtures that maximize
//! revenue. Utilities over the finite support are exact, so the learned menu
//! is strategy-proof and individually rational under hard argmax selection.

pub mod baselines;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod flow;
pub mod menu;
pub mod nn;
pub mod rng;
pub mod stage1;
pub mod valuations;

pub use error::{Error, Result};
