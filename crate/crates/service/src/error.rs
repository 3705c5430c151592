use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("session {0} not found")]
    NotFound(String),
    #[error("invalid `{field}`: {reason}")]
    Validation { field: String, reason: String },
    #[error("{0}")]
    OutOfOrder(String),
    #[error("{0}")]
    MissingPrerequisite(String),
    #[error(transparent)]
    Core(#[from] mipd_core::Error),
    #[error("storage: {0}")]
    Storage(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error("internal: {0}")]
    Internal(String),
}

impl ServiceError {
    pub fn validation(field: &str, reason: impl Into<String>) -> Self {
        Self::Validation {
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    pub fn status(&self) -> StatusCode {
        use mipd_core::Error as E;
        match self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Validation { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::OutOfOrder(_) => StatusCode::CONFLICT,
            ServiceError::MissingPrerequisite(_) => StatusCode::FAILED_DEPENDENCY,
            ServiceError::Core(e) => match e {
                E::InvalidCovariate { .. } | E::InvalidInput(_) | E::Domain(_) | E::LeafState => {
                    StatusCode::UNPROCESSABLE_ENTITY
                }
                E::MissingPrerequisite(_) | E::MissingExposure { .. } => StatusCode::FAILED_DEPENDENCY,
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            },
            ServiceError::Storage(_) | ServiceError::Json(_) | ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let field = match &self {
            ServiceError::Validation { field, .. } => Some(field.clone()),
            ServiceError::Core(mipd_core::Error::InvalidCovariate { field, .. }) => Some(field.to_string()),
            _ => None,
        };
        let body = json!({ "error": self.to_string(), "field": field });
        (self.status(), Json(body)).into_response()
    }
}

pub type ServiceResult<T> = Result<T, ServiceError>;
