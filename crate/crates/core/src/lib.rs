//! Hybrid similar-item recommender for marketplace ads.
//!
//! The engine trains four item embeddings from heterogeneous marketplace
//! data — collaborative filtering ([`mf`]), text ([`textpipe`]), images
//! ([`imagepipe`]) and location ([`mf::location_fit`]) — then fuses them
//! with an attention-gated Siamese model ([`hybrid`]) into unit-norm 100-d
//! item representations served by cosine similarity ([`serve`]). Offline
//! quality is measured with hit-rate evaluation ([`eval`]), and [`synthgen`]
//! produces a synthetic marketplace with known latent structure for testing
//! every stage at desk scale.

pub mod datamodel;
pub mod error;
pub mod eval;
pub mod hybrid;
pub mod imagepipe;
pub mod linalg;
pub mod mf;
pub mod nn;
pub mod serve;
pub mod synthgen;
pub mod textpipe;

pub use error::{Error, Result};
