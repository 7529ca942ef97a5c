//! Wire protocol between the pipeline and a model process.
//!
//! Newline-delimited JSON, one request per line answered by one response
//! line. Every message carries `type` and `session_id`. Tensors travel as
//! file paths into a shared directory, never inline. A session starts with
//! `hello`, which fixes the protocol version, and ends with `bye`.
//!
//! Every successful response echoes the sampling settings the model uses.

pub mod conformance;
mod transport;

pub use transport::{connect, open_transport, serve_lines, serve_tcp, CaptureSpec, Client, InProcess, LineTransport, ModelInfo, Transport};

use serde::{Deserialize, Serialize};

use crate::tokenizer::ScalingParams;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sampling {
    pub temperature: f64,
    pub top_k: u32,
    pub top_p: f64,
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling {
            temperature: 1.0,
            top_k: 50,
            top_p: 0.9,
        }
    }
}

/// Where a prompt came from. Models may ignore it; the mock model uses it to
/// look up the physical state behind each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptContext {
    pub trajectory: String,
    pub channel: String,
    /// Trajectory state index of the first prompt step.
    pub window_start: usize,
    pub scaling: ScalingParams,
    pub precision: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// `x' = x - sum_i c_i * W_d[:, i]` over the ablated units.
    #[default]
    DeltaPatch,
    /// `x' = decode(c)` with the ablated units zeroed.
    FullReplace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Request {
    Hello {
        session_id: String,
        protocol_version: u32,
        #[serde(default)]
        client: String,
    },
    Generate {
        session_id: String,
        prompt: String,
        n_samples: u32,
        /// Number of time steps (comma-separated numbers) to continue.
        steps: u32,
        seed: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        context: Option<PromptContext>,
    },
    Capture {
        session_id: String,
        prompt: String,
        blocks: Vec<u32>,
        /// Directory the tensor files are written into.
        output_dir: String,
        /// File stem; files are named `<stem>_b<block>.picl`.
        stem: String,
        trajectory_id: String,
        channel: String,
        context_length: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        context: Option<PromptContext>,
    },
    Intervene {
        session_id: String,
        block: u32,
        checkpoint: String,
        units: Vec<usize>,
        #[serde(default)]
        mode: AblationMode,
    },
    Clear {
        session_id: String,
    },
    Bye {
        session_id: String,
    },
}

impl Request {
    pub fn session_id(&self) -> &str {
        match self {
            Request::Hello { session_id, .. }
            | Request::Generate { session_id, .. }
            | Request::Capture { session_id, .. }
            | Request::Intervene { session_id, .. }
            | Request::Clear { session_id }
            | Request::Bye { session_id } => session_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSample {
    pub seed: u64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapturedTensor {
    pub block: u32,
    pub path: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Malformed,
    VersionMismatch,
    NoSession,
    UnknownModel,
    BadBlock,
    BadRequest,
    Io,
    Internal,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::Malformed => "malformed",
            ErrorCode::VersionMismatch => "version_mismatch",
            ErrorCode::NoSession => "no_session",
            ErrorCode::UnknownModel => "unknown_model",
            ErrorCode::BadBlock => "bad_block",
            ErrorCode::BadRequest => "bad_request",
            ErrorCode::Io => "io",
            ErrorCode::Internal => "internal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Response {
    Hello {
        session_id: String,
        protocol_version: u32,
        model_id: String,
        n_blocks: u32,
        hidden_dim: u32,
        sampling: Sampling,
    },
    Generated {
        session_id: String,
        samples: Vec<GeneratedSample>,
        sampling: Sampling,
    },
    Captured {
        session_id: String,
        tensors: Vec<CapturedTensor>,
        /// Characters covered by each prompt token, in order.
        token_lengths: Vec<usize>,
        sampling: Sampling,
    },
    Intervened {
        session_id: String,
        active_edits: usize,
        sampling: Sampling,
    },
    Cleared {
        session_id: String,
        sampling: Sampling,
    },
    Goodbye {
        session_id: String,
        sampling: Sampling,
    },
    Error {
        #[serde(default)]
        session_id: String,
        code: ErrorCode,
        message: String,
    },
}

impl Response {
    pub fn error(session_id: &str, code: ErrorCode, message: impl Into<String>) -> Self {
        Response::Error {
            session_id: session_id.to_owned(),
            code,
            message: message.into(),
        }
    }

    pub fn sampling(&self) -> Option<&Sampling> {
        match self {
            Response::Hello { sampling, .. }
            | Response::Generated { sampling, .. }
            | Response::Captured { sampling, .. }
            | Response::Intervened { sampling, .. }
            | Response::Cleared { sampling, .. }
            | Response::Goodbye { sampling, .. } => Some(sampling),
            Response::Error { .. } => None,
        }
    }
}

/// Seed of the `i`-th sample of a generate request.
pub fn sample_seed(base: u64, i: u32) -> u64 {
    base.wrapping_add(i as u64)
}

/// Name of the tensor file a capture writes for one block.
pub fn tensor_file_name(stem: &str, block: u32) -> String {
    format!("{stem}_b{block}.picl")
}

/// Anything that answers requests: the mock model, or a test double.
pub trait Handler {
    fn handle(&mut self, request: Request) -> Response;
}

/// Decodes one request line and encodes the answer. Undecodable input gets
/// a `malformed` error and leaves the handler untouched.
pub fn handle_line<H: Handler + ?Sized>(handler: &mut H, line: &str) -> String {
    serde_json::to_string(&respond(handler, line)).expect("responses serialize")
}

pub(crate) fn respond<H: Handler + ?Sized>(handler: &mut H, line: &str) -> Response {
    match serde_json::from_str::<Request>(line) {
        Ok(request) => handler.handle(request),
        Err(e) => {
            let session_id = serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("session_id").and_then(|s| s.as_str()).map(str::to_owned))
                .unwrap_or_default();
            Response::error(&session_id, ErrorCode::Malformed, e.to_string())
        }
    }
}
