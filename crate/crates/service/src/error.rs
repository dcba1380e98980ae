//! Request failures and their HTTP mapping.

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0}")]
    BadRequest(String),

    #[error("batch of {got} images exceeds the limit of {max}")]
    TooManyImages { got: usize, max: usize },

    #[error("unsupported content type {0:?}; send multipart/form-data or application/json")]
    UnsupportedMedia(String),

    /// Details stay in the server log; the client only sees the id.
    #[error("internal error {id}")]
    Internal { id: uuid::Uuid, detail: String },
}

impl ServiceError {
    pub fn internal(detail: impl Into<String>) -> Self {
        let id = uuid::Uuid::new_v4();
        let detail = detail.into();
        tracing::error!(%id, %detail, "request failed");
        ServiceError::Internal { id, detail }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::TooManyImages { .. } => StatusCode::PAYLOAD_TOO_LARGE,
            ServiceError::UnsupportedMedia(_) => StatusCode::UNSUPPORTED_MEDIA_TYPE,
            ServiceError::Internal { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

/// JSON body of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let id = match &self {
            ServiceError::Internal { id, .. } => Some(id.to_string()),
            _ => None,
        };
        let body = ErrorBody {
            error: self.to_string(),
            id,
        };
        (self.status(), Json(body)).into_response()
    }
}
