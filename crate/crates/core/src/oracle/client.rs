//! Engine-side connection to an out-of-process oracle.

use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::str::FromStr;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use super::wire::{self, Handshake, Request, Response};
use super::{Capability, Oracle, PROTOCOL_VERSION};
use crate::concepts::{HeatMap, SuperpixelSet};
use crate::error::{EndpointError, Error, Result};
use crate::mask::{BinaryMask, BoundingBox, Image};

pub const TIMEOUT_ENV: &str = "LCE_ORACLE_TIMEOUT_MS";

/// Where an endpoint lives: `cmd:<command line>`, `tcp:<host:port>`, or
/// `synthetic` for the in-process backends.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EndpointSpec {
    Command(Vec<String>),
    Tcp(String),
    Synthetic,
}

impl FromStr for EndpointSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(cmd) = s.strip_prefix("cmd:") {
            let argv: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
            if argv.is_empty() {
                return Err(Error::Config("`cmd:` endpoint has no command".into()));
            }
            Ok(EndpointSpec::Command(argv))
        } else if let Some(addr) = s.strip_prefix("tcp:") {
            if addr.is_empty() {
                return Err(Error::Config("`tcp:` endpoint has no address".into()));
            }
            Ok(EndpointSpec::Tcp(addr.to_string()))
        } else if s == "synthetic" {
            Ok(EndpointSpec::Synthetic)
        } else {
            Err(Error::Config(format!(
                "endpoint `{s}` must start with `cmd:` or `tcp:`, or be `synthetic`"
            )))
        }
    }
}

impl std::fmt::Display for EndpointSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EndpointSpec::Command(argv) => write!(f, "cmd:{}", argv.join(" ")),
            EndpointSpec::Tcp(addr) => write!(f, "tcp:{addr}"),
            EndpointSpec::Synthetic => f.write_str("synthetic"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConnectOptions {
    pub timeout_ms: u64,
    /// Images per `predict` frame.
    pub max_batch: usize,
}

impl Default for ConnectOptions {
    fn default() -> Self {
        Self {
            timeout_ms: 30_000,
            max_batch: 64,
        }
    }
}

impl ConnectOptions {
    /// Applies `LCE_ORACLE_TIMEOUT_MS` when it is set to a valid integer.
    pub fn with_env_overrides(mut self) -> Self {
        if let Ok(v) = std::env::var(TIMEOUT_ENV) {
            match v.trim().parse() {
                Ok(ms) => self.timeout_ms = ms,
                Err(_) => log::warn!("ignoring non-numeric {TIMEOUT_ENV}={v}"),
            }
        }
        self
    }
}

struct Connection {
    writer: Box<dyn Write + Send>,
    lines: Receiver<io::Result<String>>,
    child: Option<Child>,
    next_id: u64,
}

/// An oracle reached over the line protocol.
pub struct RemoteOracle {
    conn: Mutex<Connection>,
    capabilities: Vec<Capability>,
    timeout: Duration,
    max_batch: usize,
}

fn transport(e: impl std::fmt::Display) -> EndpointError {
    EndpointError::Transport(e.to_string())
}

fn spawn_reader(reader: impl Read + Send + 'static) -> Receiver<io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        for line in BufReader::new(reader).lines() {
            let stop = line.is_err();
            if tx.send(line).is_err() || stop {
                break;
            }
        }
    });
    rx
}

impl RemoteOracle {
    /// Connects and performs the handshake. Fails if the endpoint lacks any
    /// capability in `required`.
    pub fn connect(spec: &EndpointSpec, options: ConnectOptions, required: &[Capability]) -> Result<Self> {
        let options = options.with_env_overrides();
        let conn = match spec {
            EndpointSpec::Command(argv) => {
                let mut child = Command::new(&argv[0])
                    .args(&argv[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| Error::endpoint("spawn", transport(format!("{}: {e}", argv[0]))))?;
                let stdin = child.stdin.take().expect("stdin piped");
                let stdout = child.stdout.take().expect("stdout piped");
                Connection {
                    writer: Box::new(stdin),
                    lines: spawn_reader(stdout),
                    child: Some(child),
                    next_id: 0,
                }
            }
            EndpointSpec::Tcp(addr) => {
                let target = addr
                    .to_socket_addrs()
                    .map_err(|e| Error::endpoint("connect", transport(e)))?
                    .next()
                    .ok_or_else(|| Error::endpoint("connect", transport(format!("{addr} did not resolve"))))?;
                let stream = TcpStream::connect_timeout(&target, Duration::from_millis(options.timeout_ms))
                    .map_err(|e| Error::endpoint("connect", transport(e)))?;
                let read_half = stream
                    .try_clone()
                    .map_err(|e| Error::endpoint("connect", transport(e)))?;
                Connection {
                    writer: Box::new(stream),
                    lines: spawn_reader(read_half),
                    child: None,
                    next_id: 0,
                }
            }
            EndpointSpec::Synthetic => {
                return Err(Error::Config(
                    "the synthetic endpoint runs in process; it has no connection".into(),
                ))
            }
        };
        Self::handshake(conn, options, required)
    }

    /// Wraps an already-open byte stream pair (used by tests and embedders).
    pub fn from_streams(
        writer: impl Write + Send + 'static,
        reader: impl Read + Send + 'static,
        options: ConnectOptions,
        required: &[Capability],
    ) -> Result<Self> {
        let conn = Connection {
            writer: Box::new(writer),
            lines: spawn_reader(reader),
            child: None,
            next_id: 0,
        };
        Self::handshake(conn, options.with_env_overrides(), required)
    }

    fn handshake(conn: Connection, options: ConnectOptions, required: &[Capability]) -> Result<Self> {
        if options.max_batch == 0 {
            return Err(Error::Config("max_batch must be at least 1".into()));
        }
        let mut oracle = Self {
            conn: Mutex::new(conn),
            capabilities: Vec::new(),
            timeout: Duration::from_millis(options.timeout_ms),
            max_batch: options.max_batch,
        };
        let offer: Handshake = oracle.call(
            wire::HANDSHAKE,
            &Handshake {
                protocol_version: PROTOCOL_VERSION,
                capabilities: required.to_vec(),
            },
        )?;
        if offer.protocol_version != PROTOCOL_VERSION {
            return Err(Error::endpoint(
                wire::HANDSHAKE,
                EndpointError::VersionMismatch {
                    expected: PROTOCOL_VERSION,
                    found: offer.protocol_version,
                },
            ));
        }
        for cap in required {
            if !offer.capabilities.contains(cap) {
                return Err(Error::endpoint(
                    wire::HANDSHAKE,
                    EndpointError::MissingCapability(cap.method().to_string()),
                ));
            }
        }
        oracle.capabilities = offer.capabilities;
        Ok(oracle)
    }

    pub fn max_batch(&self) -> usize {
        self.max_batch
    }

    fn call<P: Serialize, R: DeserializeOwned>(&self, method: &str, params: &P) -> Result<R> {
        let mut out = self.call_many(method, std::slice::from_ref(params))?;
        Ok(out.pop().expect("one response per request"))
    }

    /// Sends every request before reading, then matches responses to
    /// requests by id in whatever order they arrive. The connection is held
    /// for the whole exchange.
    fn call_many<P: Serialize, R: DeserializeOwned>(&self, method: &str, params: &[P]) -> Result<Vec<R>> {
        let err = |e| Error::endpoint(method, e);
        let mut conn = self.conn.lock().map_err(|_| err(transport("connection lock poisoned")))?;
        let first_id = conn.next_id;
        conn.next_id += params.len() as u64;
        let mut frames = String::new();
        for (i, p) in params.iter().enumerate() {
            let req = Request {
                id: first_id + i as u64,
                method: method.to_string(),
                params: serde_json::to_value(p).map_err(|e| err(EndpointError::Malformed(e.to_string())))?,
            };
            frames.push_str(&wire::to_line(&req));
        }
        conn.writer
            .write_all(frames.as_bytes())
            .and_then(|_| conn.writer.flush())
            .map_err(|e| err(transport(e)))?;

        let mut pending: HashMap<u64, Option<Value>> =
            (first_id..first_id + params.len() as u64).map(|id| (id, None)).collect();
        let mut remaining = params.len();
        let deadline = Instant::now() + self.timeout;
        while remaining > 0 {
            let wait = deadline.saturating_duration_since(Instant::now());
            let line = match conn.lines.recv_timeout(wait) {
                Ok(Ok(line)) => line,
                Ok(Err(e)) => return Err(err(transport(e))),
                Err(RecvTimeoutError::Timeout) => {
                    return Err(err(EndpointError::Timeout(self.timeout.as_millis() as u64)))
                }
                Err(RecvTimeoutError::Disconnected) => return Err(err(EndpointError::Closed)),
            };
            if line.trim().is_empty() {
                continue;
            }
            let resp: Response = serde_json::from_str(&line)
                .map_err(|e| err(EndpointError::Malformed(format!("{e}: {line}"))))?;
            let Some(id) = resp.id else {
                let e = resp.error.unwrap_or(wire::ErrorObject {
                    code: wire::INVALID_REQUEST,
                    message: "response without id".into(),
                });
                return Err(err(EndpointError::Remote {
                    code: e.code,
                    message: e.message,
                }));
            };
            let Some(slot) = pending.get_mut(&id) else {
                if id < first_id {
                    log::warn!("discarding late response {id} to an abandoned request");
                    continue;
                }
                return Err(err(EndpointError::Malformed(format!("unexpected response id {id}"))));
            };
            if slot.is_some() {
                return Err(err(EndpointError::Malformed(format!("duplicate response id {id}"))));
            }
            match (resp.result, resp.error) {
                (_, Some(e)) => {
                    return Err(err(EndpointError::Remote {
                        code: e.code,
                        message: e.message,
                    }))
                }
                (Some(v), None) => *slot = Some(v),
                (None, None) => {
                    return Err(err(EndpointError::Malformed(format!(
                        "response {id} has neither result nor error"
                    ))))
                }
            }
            remaining -= 1;
        }
        (first_id..first_id + params.len() as u64)
            .map(|id| {
                let v = pending.remove(&id).flatten().expect("all responses collected");
                serde_json::from_value(v).map_err(|e| err(EndpointError::Malformed(e.to_string())))
            })
            .collect()
    }

    fn ensure(&self, cap: Capability) -> Result<()> {
        if self.capabilities.contains(&cap) {
            Ok(())
        } else {
            Err(Error::endpoint(
                cap.method(),
                EndpointError::MissingCapability(cap.method().to_string()),
            ))
        }
    }
}

impl Drop for RemoteOracle {
    fn drop(&mut self) {
        if let Ok(conn) = self.conn.get_mut() {
            if let Some(child) = conn.child.as_mut() {
                let _ = child.kill();
                let _ = child.wait();
            }
        }
    }
}

fn malformed(method: &str, msg: impl Into<String>) -> Error {
    Error::endpoint(method, EndpointError::Malformed(msg.into()))
}

impl Oracle for RemoteOracle {
    fn capabilities(&self) -> Vec<Capability> {
        self.capabilities.clone()
    }

    fn predict(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        self.ensure(Capability::Predict)?;
        if images.is_empty() {
            return Err(Error::contract("predict needs at least one image"));
        }
        let frames: Vec<wire::PredictParams> = images
            .chunks(self.max_batch)
            .map(|chunk| wire::PredictParams {
                images: chunk.iter().map(wire::ImagePayload::encode).collect(),
            })
            .collect();
        let results: Vec<wire::PredictResult> = self.call_many("predict", &frames)?;
        let mut out = Vec::with_capacity(images.len());
        for (frame, result) in frames.iter().zip(results) {
            if result.probabilities.len() != frame.images.len() {
                return Err(malformed(
                    "predict",
                    format!(
                        "{} vectors for {} images",
                        result.probabilities.len(),
                        frame.images.len()
                    ),
                ));
            }
            for v in result.probabilities {
                let sum: f64 = v.iter().sum();
                if v.is_empty() || v.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-6 {
                    return Err(malformed("predict", format!("invalid probability vector {v:?}")));
                }
                out.push(v);
            }
        }
        Ok(out)
    }

    fn segment_points(&self, image: &Image, points: &[(usize, usize)]) -> Result<Vec<BinaryMask>> {
        self.ensure(Capability::SegmentPoints)?;
        if points.is_empty() {
            return Ok(Vec::new());
        }
        let result: wire::MasksResult = self.call(
            "segment_points",
            &wire::SegmentPointsParams {
                image: wire::ImagePayload::encode(image),
                points: points.iter().map(|&(x, y)| [x, y]).collect(),
            },
        )?;
        if result.masks.len() != points.len() {
            return Err(malformed("segment_points", "mask count differs from prompt count"));
        }
        result
            .decode(image.width(), image.height())
            .map_err(|e| malformed("segment_points", e.to_string()))
    }

    fn segment_boxes(&self, image: &Image, boxes: &[BoundingBox]) -> Result<Vec<BinaryMask>> {
        self.ensure(Capability::SegmentBoxes)?;
        if boxes.is_empty() {
            return Ok(Vec::new());
        }
        let result: wire::MasksResult = self.call(
            "segment_boxes",
            &wire::SegmentBoxesParams {
                image: wire::ImagePayload::encode(image),
                boxes: boxes.iter().map(wire::box_to_wire).collect(),
            },
        )?;
        if result.masks.len() != boxes.len() {
            return Err(malformed("segment_boxes", "mask count differs from prompt count"));
        }
        result
            .decode(image.width(), image.height())
            .map_err(|e| malformed("segment_boxes", e.to_string()))
    }

    fn heatmap(&self, image: &Image, target_class: usize) -> Result<HeatMap> {
        self.ensure(Capability::Heatmap)?;
        let result: wire::HeatmapPayload = self.call(
            "heatmap",
            &wire::HeatmapParams {
                image: wire::ImagePayload::encode(image),
                target_class,
            },
        )?;
        result.decode().map_err(|e| malformed("heatmap", e.to_string()))
    }

    fn superpixels(&self, image: &Image, k: usize) -> Result<SuperpixelSet> {
        self.ensure(Capability::Superpixels)?;
        let result: wire::SuperpixelPayload = self.call(
            "superpixels",
            &wire::SuperpixelParams {
                image: wire::ImagePayload::encode(image),
                k,
            },
        )?;
        result.decode().map_err(|e| malformed("superpixels", e.to_string()))
    }
}
