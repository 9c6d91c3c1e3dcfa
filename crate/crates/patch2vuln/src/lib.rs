//! patch2vuln: a local, resumable pipeline that reconstructs the security
//! meaning of old/new binary package updates.
//!
//! The library is organized around the pipeline stages: package extraction,
//! ELF inspection, function-level diffing, candidate ranking, dossier
//! packing, the staged audit agent, bounded old/new validation, and scoring
//! against sealed ground truth.

pub mod agent;
pub mod config;
pub mod diff;
pub mod digest;
pub mod dossier;
pub mod elf;
pub mod extract;
pub mod pipeline;
pub mod rank;
pub mod score;
pub mod store;
pub mod validate;
