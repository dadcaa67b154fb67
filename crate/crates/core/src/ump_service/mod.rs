//! The Universal Memory Protocol service: configuration, wire framing, the
//! remember / recall / forget / migrate operations, the TCP server and a
//! reference client.

pub mod client;
pub mod config;
pub mod embed;
pub mod migration;
pub mod server;
pub mod service;
pub mod wire;

pub use client::{Client, PinnedTrust};
pub use config::ServiceConfig;
pub use migration::{MigrateRequest, MigrationReport, MigrationStatus};
pub use server::Server;
pub use service::{ForgetRequest, ForgetResponse, RecallRequest, RememberRequest, RememberResponse, ServiceCore};
pub use wire::{WireMessage, WireResponse};
