//! Network clients: an OpenAI-compatible chat-completion client with retries,
//! audit logging and bounded batching, deterministic mock backends, and a
//! client for external quality-estimation services.

pub mod llm;
pub mod mock;
pub mod qe;

pub use llm::{
    AttemptError, AuditLog, AuditRecord, Backend, BackendReply, Completion, GenParams, LlmClient, LlmError,
    OpenAiBackend, RetryPolicy, WireRequest,
};
pub use mock::{synthesize_reply, Fallback, MockBackend};
pub use qe::{DetectError, Detector, QeClient, QeOutput};
