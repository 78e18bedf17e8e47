use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};
use voxsnap_core::Error as CoreError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadRequest,
    ModelNotFound,
    ResolutionMismatch,
    Internal,
}

impl ErrorCode {
    pub fn status(self) -> StatusCode {
        match self {
            ErrorCode::BadRequest => StatusCode::BAD_REQUEST,
            ErrorCode::ModelNotFound => StatusCode::NOT_FOUND,
            ErrorCode::ResolutionMismatch => StatusCode::CONFLICT,
            ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

/// Body of every non-200 response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    pub request_id: String,
    #[serde(skip)]
    pub status: Option<StatusCode>,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>, request_id: &str) -> Self {
        Self {
            code,
            message: message.into(),
            request_id: request_id.to_string(),
            status: None,
        }
    }

    pub fn bad_request(message: impl Into<String>, request_id: &str) -> Self {
        Self::new(ErrorCode::BadRequest, message, request_id)
    }

    pub fn internal(request_id: &str) -> Self {
        Self::new(ErrorCode::Internal, "internal error", request_id)
    }

    /// Keeps the code but answers with a more specific HTTP status.
    pub fn with_status(mut self, status: StatusCode) -> Self {
        self.status = Some(status);
        self
    }

    /// Maps a library error; details of unexpected failures are logged, not returned.
    pub fn from_core(e: CoreError, request_id: &str) -> Self {
        match e {
            CoreError::ResolutionMismatch { .. } => Self::new(ErrorCode::ResolutionMismatch, e.to_string(), request_id),
            CoreError::InvalidArgument(_) | CoreError::LatentDimMismatch { .. } | CoreError::Format(_) => {
                Self::bad_request(e.to_string(), request_id)
            }
            other => {
                tracing::error!(request_id, error = %other, "request failed");
                Self::internal(request_id)
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = self.status.unwrap_or_else(|| self.code.status());
        (status, Json(self)).into_response()
    }
}
