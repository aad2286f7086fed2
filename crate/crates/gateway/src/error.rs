use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use hilo_core::config::FieldError;
use hilo_core::hitl::{AnnotationError, LearnError};
use serde::Serialize;

/// Error body: `{code, field, message}`, plus every field failure for
/// invalid configs.
#[derive(Debug, Clone, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub code: &'static str,
    pub field: Option<String>,
    pub message: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<FieldError>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            field: None,
            message: message.into(),
            errors: Vec::new(),
        }
    }

    pub fn with_field(mut self, field: impl Into<String>) -> Self {
        self.field = Some(field.into());
        self
    }

    pub fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("unknown {what} `{id}`"))
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn invalid_config(errors: Vec<FieldError>) -> Self {
        let first = errors.first().cloned().unwrap_or(FieldError {
            field: String::new(),
            message: "invalid config".into(),
        });
        ApiError {
            status: StatusCode::CONFLICT,
            code: "invalid_config",
            field: Some(first.field),
            message: first.message,
            errors,
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<AnnotationError> for ApiError {
    fn from(e: AnnotationError) -> Self {
        let msg = e.to_string();
        match e {
            AnnotationError::BudgetExhausted => Self::new(StatusCode::GONE, "budget_exhausted", msg),
            AnnotationError::AlreadyLabeled(_) => Self::new(StatusCode::CONFLICT, "already_labeled", msg),
            AnnotationError::NotClaimed(_) => Self::new(StatusCode::CONFLICT, "not_claimed", msg),
            AnnotationError::UnknownTask(_) => Self::new(StatusCode::NOT_FOUND, "not_found", msg),
            AnnotationError::Learn(LearnError::InvalidClass(_)) => {
                Self::new(StatusCode::BAD_REQUEST, "invalid_label", msg).with_field("class_id")
            }
            AnnotationError::Learn(_) => Self::internal(msg),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}
