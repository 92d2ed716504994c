use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("{0}")]
    BadRequest(String),
    #[error("unknown or expired anchor id `{0}`")]
    UnknownAnchor(String),
    #[error("no checkpoint is loaded")]
    Unavailable,
    #[error(transparent)]
    Core(#[from] galip_core::Error),
    #[error("image encoding failed: {0}")]
    Encode(#[from] image::ImageError),
    #[error("worker failed: {0}")]
    Worker(String),
}

pub type ServeResult<T> = std::result::Result<T, ServeError>;

impl ServeError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServeError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServeError::UnknownAnchor(_) => StatusCode::NOT_FOUND,
            ServeError::Unavailable => StatusCode::SERVICE_UNAVAILABLE,
            ServeError::Core(galip_core::Error::InvalidArgument(_)) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServeError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.to_string() });
        (self.status(), Json(body)).into_response()
    }
}
