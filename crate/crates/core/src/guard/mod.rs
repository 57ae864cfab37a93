//! Verification service and the guarded-retry loop.

mod retry;
mod service;

pub use retry::{run_guarded_step, AttemptRecord, FailedStage, GuardedError, GuardedOutcome, RetryPolicy, RetryTarget};
pub use service::{
    build_verify_query, router, serve, AppState, ErrorResponse, Health, ImagePayload, ImageSet, RunningServer,
    ServiceConfig, ServiceError, TemplateIds, VerifyOptions, VerifyRequest, VerifyResponse,
};
