use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::to_bytes;
use axum::extract::{Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::any;
use axum::Router;
use tower_http::services::ServeDir;

use crate::api::{route_request, ApiError, ApiResponse, AppState};

/// Largest request body accepted; bigger ones get a 400.
pub const MAX_BODY_BYTES: usize = 8 << 20;

fn into_http(r: ApiResponse) -> Response {
    let status = StatusCode::from_u16(r.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, [(header::CONTENT_TYPE, "application/json")], r.body.to_string()).into_response()
}

async fn api(State(app): State<Arc<AppState>>, req: Request) -> Response {
    let method = req.method().as_str().to_string();
    let path = req
        .uri()
        .path_and_query()
        .map(|p| p.as_str().to_string())
        .unwrap_or_else(|| req.uri().path().to_string());
    let body = match to_bytes(req.into_body(), MAX_BODY_BYTES).await {
        Ok(b) => b,
        Err(e) => {
            return into_http(ApiError::bad_request("body_too_large", format!("could not read body: {e}")).into());
        }
    };
    // Inference is CPU-bound; keep it off the async workers.
    let response = tokio::task::spawn_blocking(move || route_request(&app, &method, &path, &body))
        .await
        .unwrap_or_else(|e| ApiResponse {
            status: 503,
            body: serde_json::json!({ "status": 503, "code": "internal", "message": e.to_string() }),
        });
    into_http(response)
}

/// `/api/*` goes to [`route_request`]; everything else is served from
/// `console_dir` when given, or answered with a JSON 404.
pub fn router(app: Arc<AppState>, console_dir: Option<PathBuf>) -> Router {
    let router = Router::new()
        .route("/api", any(api))
        .route("/api/{*rest}", any(api));
    match console_dir {
        Some(dir) => router.fallback_service(ServeDir::new(dir)).with_state(app),
        None => router.fallback(api).with_state(app),
    }
}

pub async fn serve(app: Arc<AppState>, addr: SocketAddr, console_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(app, console_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
