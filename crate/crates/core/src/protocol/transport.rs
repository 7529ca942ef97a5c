//! Line transports, the protocol server loop and the typed client.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use super::{
    respond, AblationMode, CapturedTensor, GeneratedSample, Handler, PromptContext, Request, Response, Sampling,
    PROTOCOL_VERSION,
};
use crate::error::{Error, Result};

/// Sends one request line and returns the response line.
pub trait Transport: Send {
    fn exchange(&mut self, line: &str) -> Result<String>;
}

fn closed(message: impl Into<String>) -> Error {
    Error::Protocol {
        code: "closed".into(),
        message: message.into(),
    }
}

/// Newline-delimited exchange over any reader/writer pair.
pub struct LineTransport<R, W> {
    reader: R,
    writer: W,
    child: Option<Child>,
}

impl<R: BufRead + Send, W: Write + Send> LineTransport<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        LineTransport {
            reader,
            writer,
            child: None,
        }
    }
}

impl LineTransport<BufReader<TcpStream>, TcpStream> {
    pub fn tcp(addr: impl ToSocketAddrs) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        let reader = BufReader::new(stream.try_clone()?);
        Ok(LineTransport::new(reader, stream))
    }
}

impl LineTransport<BufReader<ChildStdout>, ChildStdin> {
    /// Starts `program` and talks to it over its stdin and stdout.
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::io(Path::new(program), e))?;
        let stdin = child.stdin.take().ok_or_else(|| closed("child has no stdin"))?;
        let stdout = child.stdout.take().ok_or_else(|| closed("child has no stdout"))?;
        Ok(LineTransport {
            reader: BufReader::new(stdout),
            writer: stdin,
            child: Some(child),
        })
    }
}

impl<R: BufRead + Send, W: Write + Send> Transport for LineTransport<R, W> {
    fn exchange(&mut self, line: &str) -> Result<String> {
        debug_assert!(!line.contains('\n'));
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        let mut reply = String::new();
        if self.reader.read_line(&mut reply)? == 0 {
            return Err(closed("peer closed the stream"));
        }
        Ok(reply.trim_end_matches(['\r', '\n']).to_owned())
    }
}

impl<R, W> Drop for LineTransport<R, W> {
    fn drop(&mut self) {
        if let Some(child) = self.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// Calls a handler directly, still going through the JSON encoding.
pub struct InProcess<H> {
    pub handler: H,
}

impl<H: Handler + Send> Transport for InProcess<H> {
    fn exchange(&mut self, line: &str) -> Result<String> {
        Ok(super::handle_line(&mut self.handler, line))
    }
}

/// Answers requests from `reader` until `bye` or end of input.
pub fn serve_lines<H: Handler + ?Sized>(handler: &mut H, reader: impl BufRead, mut writer: impl Write) -> Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = respond(handler, &line);
        serde_json::to_writer(&mut writer, &response)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        if matches!(response, Response::Goodbye { .. }) {
            break;
        }
    }
    Ok(())
}

/// One handler per connection, each on its own thread. Returns after
/// `max_connections` connections have finished, or never when `None`.
pub fn serve_tcp<H, F>(listener: TcpListener, make_handler: F, max_connections: Option<usize>) -> Result<()>
where
    H: Handler + Send + 'static,
    F: Fn() -> H,
{
    let mut workers = Vec::new();
    for (i, stream) in listener.incoming().enumerate() {
        let stream = stream?;
        let mut handler = make_handler();
        workers.push(std::thread::spawn(move || -> Result<()> {
            let reader = BufReader::new(stream.try_clone()?);
            serve_lines(&mut handler, reader, stream)
        }));
        if max_connections.is_some_and(|m| i + 1 >= m) {
            break;
        }
    }
    for w in workers {
        w.join().map_err(|_| closed("connection thread panicked"))??;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelInfo {
    pub model_id: String,
    pub n_blocks: u32,
    pub hidden_dim: u32,
}

/// Arguments of a capture request.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptureSpec {
    pub prompt: String,
    pub blocks: Vec<u32>,
    pub output_dir: String,
    pub stem: String,
    pub trajectory_id: String,
    pub channel: String,
    pub context_length: u32,
    pub context: Option<PromptContext>,
}

/// Typed session on top of a transport. Error responses become
/// [`Error::Protocol`], and every response must echo the expected sampling
/// settings.
pub struct Client {
    transport: Box<dyn Transport>,
    pub session_id: String,
    pub sampling: Sampling,
    pub info: Option<ModelInfo>,
}

impl Client {
    pub fn new(transport: Box<dyn Transport>, session_id: impl Into<String>) -> Self {
        Client {
            transport,
            session_id: session_id.into(),
            sampling: Sampling::default(),
            info: None,
        }
    }

    /// Sends a raw line and decodes the response without interpreting it.
    pub fn raw(&mut self, line: &str) -> Result<Response> {
        let reply = self.transport.exchange(line)?;
        serde_json::from_str(&reply).map_err(|e| Error::Protocol {
            code: "malformed_response".into(),
            message: format!("{e}: {reply}"),
        })
    }

    pub fn send(&mut self, request: &Request) -> Result<Response> {
        let response = self.raw(&serde_json::to_string(request)?)?;
        match &response {
            Response::Error { code, message, .. } => Err(Error::Protocol {
                code: code.as_str().into(),
                message: message.clone(),
            }),
            other => {
                if other.sampling() != Some(&self.sampling) {
                    return Err(Error::Protocol {
                        code: "sampling_mismatch".into(),
                        message: format!("expected {:?}, got {:?}", self.sampling, other.sampling()),
                    });
                }
                Ok(response)
            }
        }
    }

    fn unexpected(response: Response) -> Error {
        Error::Protocol {
            code: "unexpected_response".into(),
            message: format!("{response:?}"),
        }
    }

    pub fn hello(&mut self) -> Result<ModelInfo> {
        let request = Request::Hello {
            session_id: self.session_id.clone(),
            protocol_version: PROTOCOL_VERSION,
            client: concat!("picl/", env!("CARGO_PKG_VERSION")).into(),
        };
        match self.send(&request)? {
            Response::Hello {
                protocol_version,
                model_id,
                n_blocks,
                hidden_dim,
                ..
            } => {
                if protocol_version != PROTOCOL_VERSION {
                    return Err(Error::Protocol {
                        code: "version_mismatch".into(),
                        message: format!("model speaks version {protocol_version}"),
                    });
                }
                let info = ModelInfo {
                    model_id,
                    n_blocks,
                    hidden_dim,
                };
                self.info = Some(info.clone());
                Ok(info)
            }
            other => Err(Self::unexpected(other)),
        }
    }

    pub fn generate(
        &mut self,
        prompt: &str,
        n_samples: u32,
        steps: u32,
        seed: u64,
        context: Option<PromptContext>,
    ) -> Result<Vec<GeneratedSample>> {
        let request = Request::Generate {
            session_id: self.session_id.clone(),
            prompt: prompt.to_owned(),
            n_samples,
            steps,
            seed,
            context,
        };
        match self.send(&request)? {
            Response::Generated { samples, .. } if samples.len() == n_samples as usize => Ok(samples),
            other => Err(Self::unexpected(other)),
        }
    }

    /// Returns the written tensors and the character length of each token.
    pub fn capture(&mut self, spec: CaptureSpec) -> Result<(Vec<CapturedTensor>, Vec<usize>)> {
        let request = Request::Capture {
            session_id: self.session_id.clone(),
            prompt: spec.prompt,
            blocks: spec.blocks,
            output_dir: spec.output_dir,
            stem: spec.stem,
            trajectory_id: spec.trajectory_id,
            channel: spec.channel,
            context_length: spec.context_length,
            context: spec.context,
        };
        match self.send(&request)? {
            Response::Captured {
                tensors, token_lengths, ..
            } => Ok((tensors, token_lengths)),
            other => Err(Self::unexpected(other)),
        }
    }

    pub fn intervene(&mut self, block: u32, checkpoint: &Path, units: &[usize], mode: AblationMode) -> Result<usize> {
        let request = Request::Intervene {
            session_id: self.session_id.clone(),
            block,
            checkpoint: checkpoint.to_string_lossy().into_owned(),
            units: units.to_vec(),
            mode,
        };
        match self.send(&request)? {
            Response::Intervened { active_edits, .. } => Ok(active_edits),
            other => Err(Self::unexpected(other)),
        }
    }

    pub fn clear(&mut self) -> Result<()> {
        match self.send(&Request::Clear {
            session_id: self.session_id.clone(),
        })? {
            Response::Cleared { .. } => Ok(()),
            other => Err(Self::unexpected(other)),
        }
    }

    pub fn bye(&mut self) -> Result<()> {
        match self.send(&Request::Bye {
            session_id: self.session_id.clone(),
        })? {
            Response::Goodbye { .. } => Ok(()),
            other => Err(Self::unexpected(other)),
        }
    }
}

/// Opens a transport without greeting the model. Endpoints:
/// - `tcp://host:port`
/// - `stdio:<program> [args...]`, spawning the model process
/// - `mock` or `mock:<config.toml>`, an in-process mock model
pub fn open_transport(endpoint: &str) -> Result<Box<dyn Transport>> {
    Ok(if let Some(addr) = endpoint.strip_prefix("tcp://") {
        Box::new(LineTransport::tcp(addr)?)
    } else if let Some(command) = endpoint.strip_prefix("stdio:") {
        let mut parts = command.split_whitespace().map(str::to_owned);
        let program = parts.next().ok_or_else(|| Error::invalid("empty stdio command"))?;
        Box::new(LineTransport::spawn(&program, &parts.collect::<Vec<_>>())?)
    } else if endpoint == "mock" {
        Box::new(InProcess {
            handler: crate::mock::MockModel::new(crate::mock::MockConfig::default())?,
        })
    } else if let Some(path) = endpoint.strip_prefix("mock:") {
        let config: crate::mock::MockConfig = crate::io::read_toml(Path::new(path))?;
        Box::new(InProcess {
            handler: crate::mock::MockModel::new(config)?,
        })
    } else {
        return Err(Error::invalid(format!("unknown adapter endpoint {endpoint:?}")));
    })
}

/// Opens a session on `endpoint` and says hello.
pub fn connect(endpoint: &str, session_id: &str) -> Result<Client> {
    let mut client = Client::new(open_transport(endpoint)?, session_id);
    client.hello()?;
    Ok(client)
}
