//! Command-line tool and HTTP server around `awm-core`.
//!
//! [`server`] exposes the pattern API over HTTP and [`http_embedder`] is a
//! client for an external embedding service.

pub mod http_embedder;
pub mod server;
