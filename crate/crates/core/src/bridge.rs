//! Wire protocol for policies running outside the harness process.
//!
//! Every frame is a little-endian `u32` length, then one type byte, then the
//! payload. The length counts the type byte and the payload, so an empty
//! frame has length 1. HELLO, RESET, ERR and BYE carry UTF-8 JSON; ACT
//! carries `{"values": [...]}`; OBS is binary:
//!
//! ```text
//! u32 header_len | header JSON | image payloads in header order | q (f64 LE) | q_dot (f64 LE)
//! ```
//!
//! The harness speaks first with HELLO and the policy answers with HELLO.
//! RESET has no reply. Every OBS gets exactly one ACT. The harness ends
//! with BYE. Either side may send ERR, which aborts the session.

use std::io::{self, Read, Write};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::episode::{Action, CameraId, CameraViews, EmbodimentConfig, Image, Modality, Observation};
use crate::policy::{Mode, Policy, PolicyError, PolicyInput, ReportedResources};

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);
/// Frames above this size are rejected before allocation.
pub const MAX_FRAME: u32 = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum FrameType {
    Hello = 1,
    Reset = 2,
    Obs = 3,
    Act = 4,
    Err = 5,
    Bye = 6,
}

impl FrameType {
    pub fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            1 => FrameType::Hello,
            2 => FrameType::Reset,
            3 => FrameType::Obs,
            4 => FrameType::Act,
            5 => FrameType::Err,
            6 => FrameType::Bye,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameType,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn json(kind: FrameType, v: &Value) -> Self {
        Frame {
            kind,
            payload: serde_json::to_vec(v).expect("json encodes"),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + self.payload.len());
        out.extend_from_slice(&(self.payload.len() as u32 + 1).to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.payload);
        out
    }

    fn parse_json<T: for<'de> Deserialize<'de>>(&self) -> Result<T, BridgeError> {
        serde_json::from_slice(&self.payload).map_err(|e| BridgeError::Malformed(format!("{:?} payload: {e}", self.kind)))
    }
}

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("stream closed")]
    Closed,
    #[error("frame length {0} out of range")]
    BadLength(u32),
    #[error("unknown frame type {0}")]
    UnknownType(u8),
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("peer error {code}: {message}")]
    Remote { code: String, message: String },
    #[error("embodiment mismatch: expected {expected} joints, peer has {got}")]
    EmbodimentMismatch { expected: u32, got: u32 },
}

impl BridgeError {
    /// Short code sent in ERR frames.
    pub fn code(&self) -> &'static str {
        match self {
            BridgeError::Io(_) | BridgeError::Closed => "Disconnected",
            BridgeError::BadLength(_) | BridgeError::UnknownType(_) | BridgeError::Malformed(_) => "MalformedFrame",
            BridgeError::Protocol(_) => "ProtocolViolation",
            BridgeError::Remote { .. } => "Remote",
            BridgeError::EmbodimentMismatch { .. } => "EmbodimentMismatch",
        }
    }
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> io::Result<()> {
    w.write_all(&frame.to_bytes())?;
    w.flush()
}

/// Reads one frame. A clean end of stream before the prefix is `Closed`.
pub fn read_frame(r: &mut impl Read) -> Result<Frame, BridgeError> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Err(BridgeError::Closed),
            Ok(0) => return Err(BridgeError::Malformed("truncated length prefix".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(len);
    if len == 0 || len > MAX_FRAME {
        return Err(BridgeError::BadLength(len));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => BridgeError::Malformed(format!("frame truncated, expected {len} bytes")),
        _ => BridgeError::Io(e),
    })?;
    let kind = FrameType::from_u8(body[0]).ok_or(BridgeError::UnknownType(body[0]))?;
    body.remove(0);
    Ok(Frame { kind, payload: body })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub protocol_version: u32,
    pub dof: u32,
    #[serde(default)]
    pub cameras: Vec<String>,
    /// Policy-side footprint, optionally announced in the reply.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact_bytes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accelerator_mem_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResetMsg {
    pub instruction: String,
    pub embodiment: EmbodimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActMsg {
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrMsg {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ImageHeader {
    camera: String,
    modality: String,
    width: u32,
    height: u32,
    bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ObsHeader {
    robot_id: String,
    dof: u32,
    t: u64,
    wall_time: f64,
    images: Vec<ImageHeader>,
}

const MODALITIES: [Modality; 3] = [Modality::Rgb, Modality::Depth, Modality::Segmentation];

/// Binary OBS payload carrying the views of `cameras` only.
pub fn encode_obs(obs: &Observation, robot_id: &str, cameras: &[CameraId]) -> Vec<u8> {
    let mut images = Vec::new();
    let mut blobs: Vec<&[u8]> = Vec::new();
    for cam in cameras {
        let Some(v) = obs.views.get(cam) else { continue };
        for m in MODALITIES {
            let img = v.get(m);
            images.push(ImageHeader {
                camera: cam.as_str().to_string(),
                modality: m.as_str().to_string(),
                width: img.width,
                height: img.height,
                bytes: img.data.len() as u64,
            });
            blobs.push(&img.data);
        }
    }
    let header = ObsHeader {
        robot_id: robot_id.to_string(),
        dof: obs.q.len() as u32,
        t: obs.t,
        wall_time: obs.wall_time,
        images,
    };
    let h = serde_json::to_vec(&header).expect("header encodes");
    let mut out = Vec::new();
    out.extend_from_slice(&(h.len() as u32).to_le_bytes());
    out.extend_from_slice(&h);
    for b in blobs {
        out.extend_from_slice(b);
    }
    for v in obs.q.iter().chain(&obs.q_dot) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Inverse of [`encode_obs`]; sizes must match the header exactly.
pub fn decode_obs(bytes: &[u8]) -> Result<Observation, BridgeError> {
    let bad = |m: &str| BridgeError::Malformed(format!("OBS: {m}"));
    if bytes.len() < 4 {
        return Err(bad("missing header length"));
    }
    let hlen = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let body = &bytes[4..];
    if hlen > body.len() {
        return Err(bad("header overruns payload"));
    }
    let header: ObsHeader = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(&e.to_string()))?;
    let mut rest = &body[hlen..];
    let mut views: std::collections::BTreeMap<CameraId, Vec<Image>> = Default::default();
    for ih in &header.images {
        let cam: CameraId = ih.camera.parse().map_err(|_| bad(&format!("unknown camera {}", ih.camera)))?;
        let modality = MODALITIES
            .into_iter()
            .find(|m| m.as_str() == ih.modality)
            .ok_or_else(|| bad(&format!("unknown modality {}", ih.modality)))?;
        let expect = ih.width as u64 * ih.height as u64 * modality.stride() as u64;
        if ih.bytes != expect {
            return Err(bad(&format!("{} {} declares {} bytes, shape needs {expect}", ih.camera, ih.modality, ih.bytes)));
        }
        if (rest.len() as u64) < ih.bytes {
            return Err(bad("image data truncated"));
        }
        let (data, tail) = rest.split_at(ih.bytes as usize);
        rest = tail;
        let slot = views.entry(cam).or_default();
        if slot.len() != MODALITIES.iter().position(|m| *m == modality).unwrap() {
            return Err(bad("images out of order"));
        }
        slot.push(Image {
            width: ih.width,
            height: ih.height,
            modality,
            data: data.to_vec(),
        });
    }
    let n = header.dof as usize;
    if rest.len() != n * 16 {
        return Err(bad(&format!("expected {} joint bytes, found {}", n * 16, rest.len())));
    }
    let floats: Vec<f64> = rest.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let mut out = std::collections::BTreeMap::new();
    for (cam, mut imgs) in views {
        if imgs.len() != 3 {
            return Err(bad(&format!("camera {cam} lacks a modality")));
        }
        let segmentation = imgs.pop().unwrap();
        let depth = imgs.pop().unwrap();
        let rgb = imgs.pop().unwrap();
        out.insert(cam, CameraViews { rgb, depth, segmentation });
    }
    Ok(Observation {
        views: out,
        q: floats[..n].to_vec(),
        q_dot: floats[n..].to_vec(),
        t: header.t,
        wall_time: header.wall_time,
    })
}

fn err_frame(e: &BridgeError) -> Frame {
    Frame::json(FrameType::Err, &json!({"code": e.code(), "message": e.to_string()}))
}

/// What a policy-side session did before it ended.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SessionSummary {
    pub resets: u64,
    pub observations: u64,
    pub actions: u64,
    /// Set when the session aborted instead of ending with BYE.
    pub error: Option<String>,
}

/// Runs the policy side of a session until BYE, end of stream or error.
///
/// `dof` pins the embodiment the policy accepts; `None` accepts any.
pub fn serve_policy_session(
    r: &mut impl Read,
    w: &mut impl Write,
    policy: &mut dyn Policy,
    dof: Option<u32>,
) -> SessionSummary {
    let mut summary = SessionSummary::default();
    if let Err(e) = serve_inner(r, w, policy, dof, &mut summary) {
        if !matches!(e, BridgeError::Remote { .. } | BridgeError::Closed | BridgeError::Io(_)) {
            let _ = write_frame(w, &err_frame(&e));
        }
        summary.error = Some(e.to_string());
    }
    summary
}

fn serve_inner(
    r: &mut impl Read,
    w: &mut impl Write,
    policy: &mut dyn Policy,
    dof: Option<u32>,
    summary: &mut SessionSummary,
) -> Result<(), BridgeError> {
    let mut hello: Option<u32> = None;
    let mut embodiment: Option<EmbodimentConfig> = None;
    loop {
        let f = read_frame(r)?;
        match f.kind {
            FrameType::Hello => {
                let h: Hello = f.parse_json()?;
                if h.protocol_version != PROTOCOL_VERSION {
                    return Err(BridgeError::Protocol(format!("unsupported protocol version {}", h.protocol_version)));
                }
                // A pinned dof is announced back; the harness decides whether
                // the mismatch is fatal.
                let d = dof.unwrap_or(h.dof);
                hello = Some(d);
                let reply = Hello {
                    protocol_version: PROTOCOL_VERSION,
                    dof: d,
                    cameras: h.cameras,
                    artifact_bytes: None,
                    accelerator_mem_bytes: None,
                };
                write_frame(w, &Frame::json(FrameType::Hello, &serde_json::to_value(reply).unwrap()))?;
            }
            FrameType::Reset => {
                let d = hello.ok_or_else(|| BridgeError::Protocol("RESET before HELLO".into()))?;
                let m: ResetMsg = f.parse_json()?;
                if m.embodiment.dof != d {
                    return Err(BridgeError::EmbodimentMismatch { expected: d, got: m.embodiment.dof });
                }
                policy
                    .reset(&m.instruction, &m.embodiment)
                    .map_err(|e| BridgeError::Protocol(e.to_string()))?;
                embodiment = Some(m.embodiment);
                summary.resets += 1;
            }
            FrameType::Obs => {
                let emb = embodiment.as_ref().ok_or_else(|| BridgeError::Protocol("OBS before RESET".into()))?;
                let obs = decode_obs(&f.payload)?;
                if obs.q.len() != emb.dof as usize {
                    return Err(BridgeError::Protocol(format!("OBS carries {} joints, expected {}", obs.q.len(), emb.dof)));
                }
                summary.observations += 1;
                let input = PolicyInput {
                    observation: &obs,
                    privileged: None,
                };
                let a = policy.act(&input).map_err(|e| BridgeError::Protocol(e.to_string()))?;
                write_frame(w, &Frame::json(FrameType::Act, &json!({"values": a.values()})))?;
                summary.actions += 1;
            }
            FrameType::Bye => return Ok(()),
            FrameType::Err => {
                let m: ErrMsg = f.parse_json()?;
                return Err(BridgeError::Remote {
                    code: m.code,
                    message: m.message,
                });
            }
            FrameType::Act => return Err(BridgeError::Protocol("unexpected ACT from harness".into())),
        }
    }
}

/// Harness-side policy that forwards every call over the wire.
pub struct BridgePolicy {
    writer: Box<dyn Write + Send>,
    frames: Receiver<Result<Frame, BridgeError>>,
    child: Option<Child>,
    timeout: Duration,
    cameras: Vec<CameraId>,
    robot_id: String,
    dof: Option<u32>,
    dead: Option<PolicyError>,
    resources: ReportedResources,
}

impl BridgePolicy {
    /// Wraps an already connected byte stream.
    pub fn connect(reader: Box<dyn Read + Send>, writer: Box<dyn Write + Send>, timeout: Duration) -> Self {
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let mut reader = reader;
            loop {
                let f = read_frame(&mut reader);
                let stop = f.is_err();
                if tx.send(f).is_err() || stop {
                    break;
                }
            }
        });
        BridgePolicy {
            writer,
            frames: rx,
            child: None,
            timeout,
            cameras: CameraId::ALL.to_vec(),
            robot_id: String::new(),
            dof: None,
            dead: None,
            resources: ReportedResources::default(),
        }
    }

    /// Starts `command` under `sh -c` and talks to it over stdio.
    pub fn spawn(command: &str, timeout: Duration) -> Result<Self, PolicyError> {
        if let Some(path) = command.strip_prefix("unix:") {
            return Self::connect_unix(path, timeout);
        }
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| PolicyError::BridgeDisconnected(format!("spawn {command}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut p = Self::connect(Box::new(stdout), Box::new(stdin), timeout);
        p.child = Some(child);
        Ok(p)
    }

    #[cfg(unix)]
    pub fn connect_unix(path: &str, timeout: Duration) -> Result<Self, PolicyError> {
        let s = std::os::unix::net::UnixStream::connect(path)
            .map_err(|e| PolicyError::BridgeDisconnected(format!("{path}: {e}")))?;
        let r = s.try_clone().map_err(|e| PolicyError::BridgeDisconnected(e.to_string()))?;
        Ok(Self::connect(Box::new(r), Box::new(s), timeout))
    }

    #[cfg(not(unix))]
    pub fn connect_unix(path: &str, _: Duration) -> Result<Self, PolicyError> {
        Err(PolicyError::BridgeDisconnected(format!("unix sockets unsupported: {path}")))
    }

    /// Restricts which cameras are sent in OBS frames.
    pub fn with_cameras(mut self, cameras: Vec<CameraId>) -> Self {
        self.cameras = cameras;
        self
    }

    pub fn child_id(&self) -> Option<u32> {
        self.child.as_ref().map(|c| c.id())
    }

    fn fail(&mut self, e: PolicyError) -> PolicyError {
        self.dead = Some(e.clone());
        e
    }

    fn send(&mut self, f: &Frame) -> Result<(), PolicyError> {
        match write_frame(&mut self.writer, f) {
            Ok(()) => Ok(()),
            Err(e) => Err(self.fail(PolicyError::BridgeDisconnected(e.to_string()))),
        }
    }

    fn recv(&mut self) -> Result<Frame, PolicyError> {
        let e = match self.frames.recv_timeout(self.timeout) {
            Ok(Ok(f)) if f.kind == FrameType::Err => {
                let m: ErrMsg = f.parse_json().unwrap_or(ErrMsg {
                    code: "Remote".into(),
                    message: String::from_utf8_lossy(&f.payload).into_owned(),
                });
                PolicyError::ProtocolViolation(format!("peer error {}: {}", m.code, m.message))
            }
            Ok(Ok(f)) => return Ok(f),
            Ok(Err(BridgeError::Closed | BridgeError::Io(_))) | Err(RecvTimeoutError::Disconnected) => {
                PolicyError::BridgeDisconnected("policy process closed the stream".into())
            }
            Ok(Err(e)) => {
                let _ = write_frame(&mut self.writer, &err_frame(&e));
                PolicyError::ProtocolViolation(e.to_string())
            }
            Err(RecvTimeoutError::Timeout) => PolicyError::BridgeTimeout(self.timeout),
        };
        Err(self.fail(e))
    }

    fn handshake(&mut self, embodiment: &EmbodimentConfig) -> Result<(), PolicyError> {
        let hello = Hello {
            protocol_version: PROTOCOL_VERSION,
            dof: embodiment.dof,
            cameras: self.cameras.iter().map(|c| c.as_str().to_string()).collect(),
            artifact_bytes: None,
            accelerator_mem_bytes: None,
        };
        self.send(&Frame::json(FrameType::Hello, &serde_json::to_value(hello).unwrap()))?;
        let f = self.recv()?;
        if f.kind != FrameType::Hello {
            return Err(self.fail(PolicyError::ProtocolViolation(format!("expected HELLO, got {:?}", f.kind))));
        }
        let h: Hello = match f.parse_json() {
            Ok(h) => h,
            Err(e) => return Err(self.fail(PolicyError::ProtocolViolation(e.to_string()))),
        };
        if h.protocol_version != PROTOCOL_VERSION {
            return Err(self.fail(PolicyError::ProtocolViolation(format!(
                "peer speaks protocol {}",
                h.protocol_version
            ))));
        }
        if h.dof != embodiment.dof {
            return Err(self.fail(PolicyError::EmbodimentMismatch {
                expected: h.dof,
                got: embodiment.dof,
            }));
        }
        self.dof = Some(h.dof);
        self.resources = ReportedResources {
            artifact_bytes: h.artifact_bytes,
            accelerator_mem_bytes: h.accelerator_mem_bytes,
        };
        Ok(())
    }
}

impl Policy for BridgePolicy {
    fn reset(&mut self, instruction: &str, embodiment: &EmbodimentConfig) -> Result<(), PolicyError> {
        if let Some(e) = &self.dead {
            return Err(e.clone());
        }
        match self.dof {
            None => self.handshake(embodiment)?,
            Some(d) if d != embodiment.dof => {
                return Err(PolicyError::EmbodimentMismatch {
                    expected: d,
                    got: embodiment.dof,
                })
            }
            Some(_) => {}
        }
        self.robot_id = embodiment.robot_id.clone();
        let msg = ResetMsg {
            instruction: instruction.to_string(),
            embodiment: embodiment.clone(),
        };
        self.send(&Frame::json(FrameType::Reset, &serde_json::to_value(msg).unwrap()))
    }

    fn act(&mut self, input: &PolicyInput<'_>) -> Result<Action, PolicyError> {
        if let Some(e) = &self.dead {
            return Err(e.clone());
        }
        let dof = self
            .dof
            .ok_or_else(|| PolicyError::ProtocolViolation("act before reset".into()))?;
        let payload = encode_obs(input.observation, &self.robot_id, &self.cameras);
        self.send(&Frame {
            kind: FrameType::Obs,
            payload,
        })?;
        let f = self.recv()?;
        if f.kind != FrameType::Act {
            return Err(self.fail(PolicyError::ProtocolViolation(format!("expected ACT, got {:?}", f.kind))));
        }
        let values = match f.parse_json::<ActMsg>() {
            Ok(m) if m.values.len() == dof as usize + 1 && m.values.iter().all(|v| v.is_finite()) => m.values,
            Ok(m) => {
                let e = BridgeError::Malformed(format!("ACT has {} values, expected {}", m.values.len(), dof + 1));
                let _ = write_frame(&mut self.writer, &err_frame(&e));
                return Err(self.fail(PolicyError::MalformedAction(e.to_string())));
            }
            Err(e) => {
                let _ = write_frame(&mut self.writer, &err_frame(&e));
                return Err(self.fail(PolicyError::MalformedAction(e.to_string())));
            }
        };
        Ok(Action(values))
    }

    fn mode(&self) -> Mode {
        Mode::ExternalBridge
    }

    fn resources(&self) -> ReportedResources {
        self.resources
    }

    fn process_id(&self) -> Option<u32> {
        self.child_id()
    }
}

impl Drop for BridgePolicy {
    fn drop(&mut self) {
        if self.dead.is_none() {
            let _ = write_frame(&mut self.writer, &Frame::json(FrameType::Bye, &json!({})));
        }
        if let Some(mut c) = self.child.take() {
            // Give a well-behaved child a moment to exit on BYE.
            for _ in 0..50 {
                if let Ok(Some(_)) = c.try_wait() {
                    return;
                }
                std::thread::sleep(Duration::from_millis(2));
            }
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

/// Policy-side helper: returns the zero action for every observation.
pub struct EchoPolicy {
    dim: usize,
}

impl EchoPolicy {
    pub fn new() -> Self {
        EchoPolicy { dim: 0 }
    }
}

impl Default for EchoPolicy {
    fn default() -> Self {
        Self::new()
    }
}

impl Policy for EchoPolicy {
    fn reset(&mut self, _: &str, embodiment: &EmbodimentConfig) -> Result<(), PolicyError> {
        self.dim = embodiment.action_dim();
        Ok(())
    }

    fn act(&mut self, _: &PolicyInput<'_>) -> Result<Action, PolicyError> {
        Ok(Action::zeros(self.dim))
    }
}

#[cfg(test)]
mod tests;
