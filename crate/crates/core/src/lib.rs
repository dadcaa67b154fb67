//! Zero-trust memory service for AI agents.
//!
//! Memories are stored, consolidated, recalled and forgotten inside a
//! simulated trusted execution environment so the host only ever sees
//! sealed, fixed-size, uniformly rewritten ciphertext. See the guide in
//! `book/` for a narrative walk through every layer.

pub mod canonical;
pub mod clock;
pub mod crypto;
pub mod durable;
pub mod error;
pub mod governance;
pub mod hexser;
pub mod ingest;
pub mod keyvault;
pub mod memory_engine;
pub mod privacy_proxy;
pub mod retrieval;
pub mod sealed_store;
pub mod tee_sim;
pub mod ump_service;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/running.md")]
    mod running {}
    #[doc = include_str!("../../../book/src/decay.md")]
    mod decay {}
    #[doc = include_str!("../../../book/src/storage.md")]
    mod storage {}
    #[doc = include_str!("../../../book/src/privacy.md")]
    mod privacy {}
    #[doc = include_str!("../../../book/src/recall.md")]
    mod recall {}
    #[doc = include_str!("../../../book/src/audit.md")]
    mod audit {}
    #[doc = include_str!("../../../book/src/protocol.md")]
    mod protocol {}
}
