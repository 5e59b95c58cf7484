use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use gsseg_core::pipeline::{PipelineError, PipelineStage};
use gsseg_core::Error;
use serde::Serialize;

/// Error body: `{"error": {"kind", "message", "stage"?}}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub kind: &'static str,
    pub message: String,
    pub stage: Option<PipelineStage>,
}

#[derive(Serialize)]
struct Body<'a> {
    error: Detail<'a>,
}

#[derive(Serialize)]
struct Detail<'a> {
    kind: &'a str,
    message: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    stage: Option<PipelineStage>,
}

impl ApiError {
    pub fn not_found(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::NOT_FOUND,
            kind: "not_found",
            message: message.into(),
            stage: None,
        }
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::CONFLICT,
            kind: "conflict",
            message: message.into(),
            stage: None,
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            kind: "invalid_argument",
            message: message.into(),
            stage: None,
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            kind: "internal",
            message: message.into(),
            stage: None,
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, kind) = match &e {
            Error::Argument(_) => (StatusCode::BAD_REQUEST, "invalid_argument"),
            Error::State(_) => (StatusCode::CONFLICT, "invalid_state"),
            Error::Format(_) | Error::Data(_) | Error::Json(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_data"),
            Error::Io { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "io"),
        };
        ApiError {
            status,
            kind,
            message: e.to_string(),
            stage: None,
        }
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let stage = e.stage;
        let mut out = ApiError::from(e.error);
        out.message = format!("{} stage: {}", stage, out.message);
        out.stage = Some(stage);
        out
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Body {
            error: Detail {
                kind: self.kind,
                message: &self.message,
                stage: self.stage,
            },
        };
        (self.status, Json(body)).into_response()
    }
}
