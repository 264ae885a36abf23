//! User simulation and synthetic dialogue generation for conversational
//! recommender systems.
//!
//! The crate is organised along the data flow: [`corpus`] learns embeddings
//! and attribute directions, [`behavior`] holds the stochastic user response
//! models, [`belief`] tracks the recommender's posterior, [`agent`] chooses
//! queries and recommendations, [`trajectory`] runs the interaction loop,
//! [`dialogue`] turns trajectories into text, and [`eval`] measures how well
//! a language model recommends when conditioned on those dialogues.

pub mod agent;
pub mod behavior;
pub mod belief;
pub mod corpus;
pub mod dialogue;
pub mod error;
pub mod eval;
pub mod lm;
pub mod math;
pub mod trajectory;

pub use error::{Error, LmError, Result};
