use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;

use crate::wire::{ErrorBody, ErrorDetail};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    Invalid(String),

    #[error("unknown image_id `{0}`")]
    NotFound(String),

    #[error("model is loading")]
    Loading,

    #[error("server is at capacity")]
    OverCapacity { retry_after: u64 },

    #[error("synthesis failed: {reason}")]
    Internal { incident: String, reason: String },
}

impl ServiceError {
    pub fn invalid(reason: impl Into<String>) -> Self {
        Self::Invalid(reason.into())
    }

    /// Logs the failure under a fresh incident id.
    pub fn internal(reason: impl std::fmt::Display) -> Self {
        let incident = uuid::Uuid::new_v4().to_string();
        log::error!("incident {incident}: {reason}");
        Self::Internal {
            incident,
            reason: reason.to_string(),
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            Self::Invalid(_) => StatusCode::BAD_REQUEST,
            Self::NotFound(_) => StatusCode::NOT_FOUND,
            Self::Loading | Self::OverCapacity { .. } => StatusCode::SERVICE_UNAVAILABLE,
            Self::Internal { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            Self::Invalid(_) => "invalid_request",
            Self::NotFound(_) => "not_found",
            Self::Loading => "loading",
            Self::OverCapacity { .. } => "over_capacity",
            Self::Internal { .. } => "synthesis_failed",
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: ErrorDetail {
                code: self.code().to_string(),
                reason: self.to_string(),
                incident: match &self {
                    Self::Internal { incident, .. } => Some(incident.clone()),
                    _ => None,
                },
            },
        };
        let mut res = (self.status(), Json(body)).into_response();
        let retry = match self {
            Self::OverCapacity { retry_after } => Some(retry_after),
            Self::Loading => Some(1),
            _ => None,
        };
        if let Some(secs) = retry {
            res.headers_mut().insert(header::RETRY_AFTER, HeaderValue::from(secs));
        }
        res
    }
}
