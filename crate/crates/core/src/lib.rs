//! Multimodal sleep-signal alignment.
//!
//! The crate covers the whole desk-scale workflow: EDF ingestion
//! ([`edf`]), canonical-rate preprocessing into 30-second epoch tokens
//! ([`prep`]), a small reverse-mode numeric engine ([`autodiff`]), the
//! rotary-attention alignment encoder ([`model`]), the metadata-weighted
//! contrastive objective ([`dash`]), pre-training ([`pretrain`]),
//! downstream evaluation ([`eval`]) and a synthetic corpus generator
//! ([`synth`]).

pub mod autodiff;
pub mod corpus;
pub mod dash;
pub mod io_util;
pub mod edf;
pub mod eval;
pub mod modality;
pub mod model;
pub mod prep;
pub mod pretrain;
pub mod recording;
pub mod rng;
pub mod synth;

pub use modality::Modality;
pub use recording::{Channel, Gender, Recording, SubjectMeta};
