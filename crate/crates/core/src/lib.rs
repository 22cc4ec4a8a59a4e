//! Group-chat technical assistant engine.
//!
//! Raw chat traffic is filtered and packed per user ([`preprocess`]), triaged
//! by a two-stage refusal filter ([`rejection`]), and only genuine domain
//! questions reach retrieval ([`retrieval`]) and gated answer generation
//! ([`response`]). [`service`] wires everything to configuration, persistence
//! and an HTTP API.

pub mod error;
pub mod llm;
pub mod moderation;
pub mod preprocess;
pub mod rejection;
pub mod response;
pub mod retrieval;
pub mod service;
pub mod store;
#[doc(hidden)]
pub mod testing;
mod util;

pub use error::{Error, Result};
