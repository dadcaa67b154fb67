//! Session establishment, PII sanitization and the fixed-rate update queue.

pub mod handshake;
pub mod queue;
pub mod sanitize;

pub use handshake::{handshake, ClientHandshake, ClientHello, ClientSession, Role, SecureChannel, ServerHello, SessionContext};
pub use queue::{Ack, QueueConfig, UpdateBatch, UpdateQueue};
pub use sanitize::{restore, sanitize, MappingTable, RuleSet, SanitizedEvent, Span};
