//! Client for an external embedding service.
//!
//! Wire format:
//!
//! - `GET /info` returns `{"dim": d, "timeout_ms": t}` and is called once on
//!   connect.
//! - `POST /embed` takes `{"queries": [sql, ...]}` and returns
//!   `{"embeddings": [[f32; d], ...]}`, one row per query in order.

use std::time::Duration;

use awm_core::embedding::{Embedder, Matrix};
use awm_core::{Error, Result};
use serde::{Deserialize, Serialize};
use ureq::Agent;

pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;
const CONNECT_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Info {
    pub dim: usize,
    #[serde(default)]
    pub timeout_ms: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub queries: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub embeddings: Vec<Vec<f32>>,
}

fn remote(e: ureq::Error) -> Error {
    Error::Embedder(e.to_string())
}

#[derive(Debug)]
pub struct HttpEmbedder {
    base: String,
    dim: usize,
    agent: Agent,
}

impl HttpEmbedder {
    /// Negotiate dimension and timeout with the service at `base_url`.
    pub fn connect(base_url: &str) -> Result<Self> {
        let base = base_url.trim_end_matches('/').to_string();
        let probe: Agent = Agent::config_builder()
            .timeout_global(Some(CONNECT_TIMEOUT))
            .build()
            .into();
        let info: Info = probe
            .get(format!("{base}/info"))
            .call()
            .map_err(remote)?
            .body_mut()
            .read_json()
            .map_err(remote)?;
        if info.dim == 0 {
            return Err(Error::Embedder("service reported dimension 0".into()));
        }
        let timeout = Duration::from_millis(info.timeout_ms.unwrap_or(DEFAULT_TIMEOUT_MS));
        let agent = Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Ok(Self {
            base,
            dim: info.dim,
            agent,
        })
    }
}

impl Embedder for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, queries: &[&str]) -> Result<Matrix> {
        if queries.is_empty() {
            return Ok(Matrix::new(self.dim));
        }
        let request = EmbedRequest {
            queries: queries.iter().map(|q| q.to_string()).collect(),
        };
        let response: EmbedResponse = self
            .agent
            .post(format!("{}/embed", self.base))
            .send_json(&request)
            .map_err(remote)?
            .body_mut()
            .read_json()
            .map_err(remote)?;
        if response.embeddings.len() != queries.len() {
            return Err(Error::Embedder(format!(
                "sent {} queries, received {} vectors",
                queries.len(),
                response.embeddings.len()
            )));
        }
        Matrix::from_rows(self.dim, response.embeddings)
    }
}
