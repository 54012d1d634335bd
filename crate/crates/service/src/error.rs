use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use gdr_core::GdrError;
use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("session cap of {0} reached")]
    TooManySessions(usize),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::TooManySessions(_) => StatusCode::TOO_MANY_REQUESTS,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<GdrError> for ServiceError {
    fn from(e: GdrError) -> Self {
        match e {
            GdrError::InvalidSpec(_)
            | GdrError::ShapeError(_)
            | GdrError::InvalidStep(_)
            | GdrError::ZeroVector
            | GdrError::EmptyInput(_)
            | GdrError::InvalidMatrix(_)
            | GdrError::NoOracle => ServiceError::Unprocessable(e.to_string()),
            other => ServiceError::Internal(other.to_string()),
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status(), Json(json!({ "error": self.to_string() }))).into_response()
    }
}
