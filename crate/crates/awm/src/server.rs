//! HTTP transport for the pattern API and a reference embedding service.

use std::sync::Arc;

use awm_core::embedding::Embedder;
use awm_core::service::{Api, Request};
use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderValue, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::net::TcpListener;

use crate::http_embedder::{EmbedRequest, EmbedResponse, Info};

/// Every request is forwarded to [`Api::handle`].
pub fn router(api: Arc<Api>) -> Router {
    Router::new().fallback(forward).with_state(api)
}

async fn forward(State(api): State<Arc<Api>>, method: Method, uri: Uri, body: Bytes) -> Response {
    let mut response = if method == Method::OPTIONS {
        StatusCode::NO_CONTENT.into_response()
    } else {
        let path = uri
            .path_and_query()
            .map_or(uri.path(), |pq| pq.as_str())
            .to_string();
        let request = Request {
            method: method.to_string(),
            path,
            body: String::from_utf8_lossy(&body).into_owned(),
        };
        let reply = match tokio::task::spawn_blocking(move || api.handle(&request)).await {
            Ok(reply) => reply,
            Err(e) => return (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
        };
        let status =
            StatusCode::from_u16(reply.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (
            status,
            [(header::CONTENT_TYPE, reply.content_type)],
            reply.body,
        )
            .into_response()
    };
    // the pattern browser may be served from another origin
    let headers = response.headers_mut();
    headers.insert(
        header::ACCESS_CONTROL_ALLOW_ORIGIN,
        HeaderValue::from_static("*"),
    );
    headers.insert(
        header::ACCESS_CONTROL_ALLOW_METHODS,
        HeaderValue::from_static("GET, POST, DELETE, OPTIONS"),
    );
    headers.insert(
        header::ACCESS_CONTROL_ALLOW_HEADERS,
        HeaderValue::from_static("content-type"),
    );
    response
}

pub async fn serve(api: Arc<Api>, listener: TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(api)).await
}

/// Serve any [`Embedder`] over the external-embedder wire format.
pub fn embedder_router<E: Embedder + Send + Sync + 'static>(
    embedder: Arc<E>,
    timeout_ms: u64,
) -> Router {
    let info = Info {
        dim: embedder.dim(),
        timeout_ms: Some(timeout_ms),
    };
    Router::new()
        .route("/info", get(move || async move { Json(info) }))
        .route(
            "/embed",
            post(move |Json(req): Json<EmbedRequest>| async move {
                let queries: Vec<&str> = req.queries.iter().map(String::as_str).collect();
                match embedder.embed(&queries) {
                    Ok(m) => Json(EmbedResponse {
                        embeddings: m.rows().map(<[f32]>::to_vec).collect(),
                    })
                    .into_response(),
                    Err(e) => (StatusCode::BAD_REQUEST, e.to_string()).into_response(),
                }
            }),
        )
}
