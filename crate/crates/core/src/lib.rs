//! Multi-view heterogeneous graph recommender for API usage.
//!
//! The pipeline: ingest a call corpus ([`corpus`]), build the interaction,
//! co-occurrence and hierarchy graphs ([`graphs`]), train the attentive
//! graph model ([`model`], [`training`]) and score top-K recommendations
//! ([`evaluation`], [`baselines`]).

pub mod baselines;
mod binio;
pub mod corpus;
pub mod dataset;
pub mod evaluation;
pub mod graphs;
pub mod model;
pub mod numerics;
pub mod training;
