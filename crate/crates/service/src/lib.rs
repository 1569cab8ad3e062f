//! HTTP/JSON API and command-line front end over `newvision-core`.

pub mod api;
pub mod cli;
pub mod http;

pub use api::{route_request, ApiError, ApiImage, ApiResponse, AppState, ModelPerception, STATUSES};
pub use cli::{run_cli, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};
