//! Behavioural checks any model endpoint must pass, run over a live
//! transport. The same suite applies to the mock model and to real adapters.

use std::fmt;
use std::path::Path;

use super::{sample_seed, AblationMode, Client, ErrorCode, Request, Response, Transport, PROTOCOL_VERSION};
use crate::activation::read_tensor;
use crate::error::{Error, Result};
use crate::protocol::transport::{CaptureSpec, ModelInfo};
use crate::sae::{save_checkpoint, SaeParams};
use crate::tokenizer::{align_tokens, DigitSeries};

/// History used by every generate check.
pub const GENERATE_PROMPT: &str = "1000,1100,1200,1300,";
/// Prompt used by every capture check: a series without trailing separator.
pub const CAPTURE_PROMPT: &str = "1000,-1100,1200,-1300";
pub const GENERATE_SEED: u64 = 11;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConformanceReport {
    pub checks: Vec<CheckResult>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    fn record(&mut self, name: &'static str, outcome: Result<()>) {
        let (passed, detail) = match outcome {
            Ok(()) => (true, String::new()),
            Err(e) => (false, e.to_string()),
        };
        self.checks.push(CheckResult { name, passed, detail });
    }
}

impl fmt::Display for ConformanceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            if c.passed {
                writeln!(f, "PASS {}", c.name)?;
            } else {
                writeln!(f, "FAIL {}: {}", c.name, c.detail)?;
            }
        }
        Ok(())
    }
}

fn fail(message: impl Into<String>) -> Error {
    Error::Protocol {
        code: "conformance".into(),
        message: message.into(),
    }
}

fn expect_code(result: Result<Response>, code: ErrorCode) -> Result<()> {
    match result? {
        Response::Error { code: got, .. } if got == code => Ok(()),
        other => Err(fail(format!("expected {} error, got {other:?}", code.as_str()))),
    }
}

fn expect_protocol_error<T: fmt::Debug>(result: Result<T>, code: ErrorCode) -> Result<()> {
    match result {
        Err(Error::Protocol { code: got, .. }) if got == code.as_str() => Ok(()),
        other => Err(fail(format!("expected {} error, got {other:?}", code.as_str()))),
    }
}

fn generate(client: &mut Client) -> Result<Vec<String>> {
    let samples = client.generate(GENERATE_PROMPT, 3, 4, GENERATE_SEED, None)?;
    for (i, s) in samples.iter().enumerate() {
        if s.seed != sample_seed(GENERATE_SEED, i as u32) {
            return Err(fail(format!("sample {i} reports seed {}", s.seed)));
        }
    }
    Ok(samples.into_iter().map(|s| s.text).collect())
}

fn check_capture(client: &mut Client, info: &ModelInfo, scratch: &Path) -> Result<()> {
    let blocks = vec![0, info.n_blocks - 1];
    let (tensors, token_lengths) = client.capture(CaptureSpec {
        prompt: CAPTURE_PROMPT.into(),
        blocks: blocks.clone(),
        output_dir: scratch.to_string_lossy().into_owned(),
        stem: "conformance".into(),
        trajectory_id: "conformance".into(),
        channel: "x1".into(),
        context_length: 4,
        context: None,
    })?;
    let digits = DigitSeries::from_text(CAPTURE_PROMPT, 3)?;
    align_tokens(&digits, &token_lengths)?;
    if tensors.iter().map(|t| t.block).collect::<Vec<_>>() != blocks {
        return Err(fail(format!("captured blocks {tensors:?}, requested {blocks:?}")));
    }
    for t in &tensors {
        let tensor = read_tensor(Path::new(&t.path))?;
        if tensor.block_index != t.block
            || tensor.hidden_dim != info.hidden_dim
            || tensor.seq_len as usize != token_lengths.len()
            || tensor.context_length != 4
        {
            return Err(fail(format!(
                "{}: block {} seq_len {} hidden {} context {}, expected block {} seq_len {} hidden {} context 4",
                t.path,
                tensor.block_index,
                tensor.seq_len,
                tensor.hidden_dim,
                tensor.context_length,
                t.block,
                token_lengths.len(),
                info.hidden_dim
            )));
        }
    }
    Ok(())
}

/// Runs every check in order over one session. The scratch directory
/// receives tensor files and a throwaway SAE checkpoint.
pub fn run_conformance(transport: Box<dyn Transport>, scratch: &Path) -> ConformanceReport {
    let mut report = ConformanceReport::default();
    let mut client = Client::new(transport, "conformance");

    let stray = Request::Clear {
        session_id: "conformance-unknown".into(),
    };
    report.record(
        "no_session_before_hello",
        serde_json::to_string(&stray)
            .map_err(Error::from)
            .and_then(|line| expect_code(client.raw(&line), ErrorCode::NoSession)),
    );

    let info = match client.hello() {
        Ok(info) if info.n_blocks > 0 && info.hidden_dim > 0 => {
            report.record("hello", Ok(()));
            info
        }
        Ok(info) => {
            report.record("hello", Err(fail(format!("degenerate model shape {info:?}"))));
            return report;
        }
        Err(e) => {
            report.record("hello", Err(e));
            return report;
        }
    };

    let bad_version = Request::Hello {
        session_id: "conformance-v0".into(),
        protocol_version: PROTOCOL_VERSION + 1000,
        client: String::new(),
    };
    report.record(
        "version_mismatch",
        serde_json::to_string(&bad_version)
            .map_err(Error::from)
            .and_then(|line| expect_code(client.raw(&line), ErrorCode::VersionMismatch)),
    );

    report.record(
        "malformed_keeps_session",
        expect_code(client.raw(r#"{"type":"generate","session_id":"conformance""#), ErrorCode::Malformed)
            .and_then(|()| expect_code(client.raw(r#"{"type":"teleport","session_id":"conformance"}"#), ErrorCode::Malformed))
            .and_then(|()| client.clear()),
    );

    let clean = generate(&mut client);
    report.record(
        "generate_deterministic",
        clean.as_ref().map_err(|e| fail(e.to_string())).and_then(|a| {
            let b = generate(&mut client)?;
            if *a == b {
                Ok(())
            } else {
                Err(fail(format!("{a:?} then {b:?}")))
            }
        }),
    );

    report.record("capture_shapes", check_capture(&mut client, &info, scratch));

    let checkpoint = scratch.join("conformance.psae");
    let sae = SaeParams::<f32>::init(info.hidden_dim as usize, 0).and_then(|p| save_checkpoint(&checkpoint, &p, None).map(|()| p));
    let clean = clean.ok();
    report.record(
        "empty_intervention_is_identity",
        sae.as_ref().map_err(|e| fail(e.to_string())).and_then(|_| {
            let n = client.intervene(0, &checkpoint, &[], AblationMode::DeltaPatch)?;
            if n != 1 {
                return Err(fail(format!("{n} active edits after one intervene")));
            }
            let edited = generate(&mut client)?;
            client.clear()?;
            if Some(&edited) == clean.as_ref() {
                Ok(())
            } else {
                Err(fail(format!("clean {clean:?}, with empty edit {edited:?}")))
            }
        }),
    );

    report.record(
        "clear_restores_clean",
        sae.as_ref().map_err(|e| fail(e.to_string())).and_then(|p| {
            let all: Vec<usize> = (0..p.code_dim()).collect();
            client.intervene(0, &checkpoint, &all, AblationMode::FullReplace)?;
            generate(&mut client)?;
            client.clear()?;
            let after = generate(&mut client)?;
            if Some(&after) == clean.as_ref() {
                Ok(())
            } else {
                Err(fail(format!("clean {clean:?}, after clear {after:?}")))
            }
        }),
    );

    report.record(
        "bad_block",
        expect_protocol_error(
            client.capture(CaptureSpec {
                prompt: CAPTURE_PROMPT.into(),
                blocks: vec![info.n_blocks],
                output_dir: scratch.to_string_lossy().into_owned(),
                stem: "conformance_bad".into(),
                trajectory_id: "conformance".into(),
                channel: "x1".into(),
                context_length: 4,
                context: None,
            }),
            ErrorCode::BadBlock,
        )
        .and_then(|()| {
            expect_protocol_error(
                client.intervene(info.n_blocks, &checkpoint, &[], AblationMode::DeltaPatch),
                ErrorCode::BadBlock,
            )
        }),
    );

    report.record("bye", client.bye());
    report
}
