//! Binary wire protocol and the process-separated server / client roles.
//!
//! Every frame is `msg_type: u8`, `payload_len: u32` (little-endian), then
//! the payload. Floats travel as f32, which is lossless for encoder
//! parameters and features, so a wire run reproduces the in-process
//! simulator bit for bit.
//!
//! Payload layouts (all little-endian):
//!
//! | type | message        | payload |
//! |------|----------------|---------|
//! | 1    | HELLO          | client_id u32, shard_size u32 |
//! | 2    | MODEL_UP       | params_q, params_k |
//! | 3    | FEATURES_UP    | count u32, d u16, count·d f32 |
//! | 4    | MODEL_DOWN     | params_q, params_k |
//! | 5    | FEATURES_DOWN  | count u32, d u16, count·d f32 |
//! | 6    | ROUND_BEGIN    | round u32, config digest u64, flags u8 |
//! | 7    | ROUND_DONE     | client round summary |
//! | 8    | BYE            | empty |
//!
//! Parameters are a layer count u16, then per layer rows u16, cols u16,
//! rows·cols f32 weights (row-major) and rows f32 biases.

use std::collections::BTreeMap;
use std::io::{self, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::time::Instant;

use log::{debug, info};

use crate::config::ExperimentConfig;
use crate::data::ClientShard;
use crate::federation::{
    initial_params, ClientNode, ClientRoundSummary, ClientUpload, Download, ExperimentOutcome, RoundReport, Server,
    Setup,
};
use crate::math::{EncoderParams, FeatureVector, Layer};
use crate::{Error, Result};

pub const HEADER_LEN: usize = 5;
/// Largest payload a decoder accepts.
pub const MAX_PAYLOAD: usize = 256 * 1024 * 1024;

/// ROUND_BEGIN flag: send MODEL_UP and FEATURES_UP now.
pub const FLAG_UPLOAD: u8 = 0b01;
/// ROUND_BEGIN flag: expect MODEL_DOWN and FEATURES_DOWN, then train.
pub const FLAG_SELECTED: u8 = 0b10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageType {
    Hello = 1,
    ModelUp = 2,
    FeaturesUp = 3,
    ModelDown = 4,
    FeaturesDown = 5,
    RoundBegin = 6,
    RoundDone = 7,
    Bye = 8,
}

impl MessageType {
    pub fn from_byte(b: u8) -> Option<Self> {
        use MessageType::*;
        Some(match b {
            1 => Hello,
            2 => ModelUp,
            3 => FeaturesUp,
            4 => ModelDown,
            5 => FeaturesDown,
            6 => RoundBegin,
            7 => RoundDone,
            8 => Bye,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        use MessageType::*;
        match self {
            Hello => "HELLO",
            ModelUp => "MODEL_UP",
            FeaturesUp => "FEATURES_UP",
            ModelDown => "MODEL_DOWN",
            FeaturesDown => "FEATURES_DOWN",
            RoundBegin => "ROUND_BEGIN",
            RoundDone => "ROUND_DONE",
            Bye => "BYE",
        }
    }
}

/// Main and momentum encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPair {
    pub q: EncoderParams,
    pub k: EncoderParams,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello { client_id: u32, shard_size: u32 },
    ModelUp(ModelPair),
    FeaturesUp(Vec<FeatureVector>),
    ModelDown(ModelPair),
    FeaturesDown(Vec<FeatureVector>),
    RoundBegin { round: u32, config_digest: u64, flags: u8 },
    RoundDone(ClientRoundSummary),
    Bye,
}

impl Message {
    pub fn message_type(&self) -> MessageType {
        match self {
            Message::Hello { .. } => MessageType::Hello,
            Message::ModelUp(_) => MessageType::ModelUp,
            Message::FeaturesUp(_) => MessageType::FeaturesUp,
            Message::ModelDown(_) => MessageType::ModelDown,
            Message::FeaturesDown(_) => MessageType::FeaturesDown,
            Message::RoundBegin { .. } => MessageType::RoundBegin,
            Message::RoundDone(_) => MessageType::RoundDone,
            Message::Bye => MessageType::Bye,
        }
    }
}

/// Reasons a frame cannot be encoded or decoded. Each variant has its own
/// numeric [`code`](FrameError::code).
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FrameError {
    #[error("unknown message type 0x{byte:02x} at byte offset {offset}")]
    UnknownType { byte: u8, offset: usize },
    #[error("payload truncated while reading {field} at byte offset {offset}")]
    Truncated { field: &'static str, offset: usize },
    #[error("payload_len is {declared} but the message occupies {used} bytes")]
    LengthMismatch { declared: usize, used: usize },
    #[error("payload of {len} bytes exceeds the {max}-byte limit")]
    Oversized { len: usize, max: usize },
    #[error("invalid {field} at byte offset {offset}: {reason}")]
    InvalidField {
        field: &'static str,
        offset: usize,
        reason: String,
    },
}

impl FrameError {
    pub fn code(&self) -> u8 {
        match self {
            FrameError::UnknownType { .. } => 1,
            FrameError::Truncated { .. } => 2,
            FrameError::LengthMismatch { .. } => 3,
            FrameError::Oversized { .. } => 4,
            FrameError::InvalidField { .. } => 5,
        }
    }
}

/// Result of a successful decode attempt.
#[derive(Debug, Clone, PartialEq)]
pub enum Decoded {
    /// A complete frame and the number of bytes it occupied.
    Frame { message: Message, consumed: usize },
    /// The buffer holds a valid prefix; at least `needed` bytes in total are
    /// required.
    NeedMore { needed: usize },
}

fn invalid(field: &'static str, offset: usize, reason: impl Into<String>) -> FrameError {
    FrameError::InvalidField {
        field,
        offset,
        reason: reason.into(),
    }
}

fn dim_u16(field: &'static str, v: usize) -> std::result::Result<u16, FrameError> {
    u16::try_from(v).map_err(|_| invalid(field, 0, format!("{v} does not fit in u16")))
}

fn count_u32(field: &'static str, v: usize) -> std::result::Result<u32, FrameError> {
    u32::try_from(v).map_err(|_| invalid(field, 0, format!("{v} does not fit in u32")))
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn params(&mut self, p: &EncoderParams) -> std::result::Result<(), FrameError> {
        self.u16(dim_u16("layer count", p.layers().len())?);
        for l in p.layers() {
            self.u16(dim_u16("layer rows", l.rows)?);
            self.u16(dim_u16("layer cols", l.cols)?);
            l.weight.iter().for_each(|&v| self.f32(v as f32));
            l.bias.iter().for_each(|&v| self.f32(v as f32));
        }
        Ok(())
    }

    fn features(&mut self, rows: &[FeatureVector]) -> std::result::Result<(), FrameError> {
        let d = rows.first().map_or(0, FeatureVector::dim);
        if rows.iter().any(|r| r.dim() != d) {
            return Err(invalid("feature rows", 0, "rows differ in dimension"));
        }
        self.u32(count_u32("feature count", rows.len())?);
        self.u16(dim_u16("feature dim", d)?);
        rows.iter().flat_map(|r| r.values()).for_each(|&v| self.f32(v));
        Ok(())
    }

    fn u16_list(&mut self, field: &'static str, v: &[u16]) -> std::result::Result<(), FrameError> {
        self.u32(count_u32(field, v.len())?);
        v.iter().for_each(|&x| self.u16(x));
        Ok(())
    }

    fn summary(&mut self, s: &ClientRoundSummary) -> std::result::Result<(), FrameError> {
        self.u32(s.client);
        self.u32(s.round);
        self.u32(s.steps);
        self.f64(s.contrast);
        self.f64(s.neigh);
        self.f64(s.total);
        self.u32(count_u32("epoch losses", s.epoch_losses.len())?);
        s.epoch_losses.iter().for_each(|&v| self.f64(v));
        self.u16_list("query labels", &s.query_labels)?;
        self.u16_list("local bank labels", &s.local_bank_labels)?;
        self.u16_list("upload labels", &s.upload_labels)?;
        self.u16_list("class set", &s.class_set)
    }
}

/// Serialises one message into a complete frame.
pub fn encode_frame(message: &Message) -> std::result::Result<Vec<u8>, FrameError> {
    let mut w = Writer(vec![message.message_type() as u8, 0, 0, 0, 0]);
    match message {
        Message::Hello { client_id, shard_size } => {
            w.u32(*client_id);
            w.u32(*shard_size);
        }
        Message::ModelUp(m) | Message::ModelDown(m) => {
            w.params(&m.q)?;
            w.params(&m.k)?;
        }
        Message::FeaturesUp(rows) | Message::FeaturesDown(rows) => w.features(rows)?,
        Message::RoundBegin {
            round,
            config_digest,
            flags,
        } => {
            w.u32(*round);
            w.u64(*config_digest);
            w.u8(*flags);
        }
        Message::RoundDone(s) => w.summary(s)?,
        Message::Bye => {}
    }
    let len = w.0.len() - HEADER_LEN;
    let declared = u32::try_from(len).map_err(|_| FrameError::Oversized {
        len,
        max: u32::MAX as usize,
    })?;
    w.0[1..HEADER_LEN].copy_from_slice(&declared.to_le_bytes());
    Ok(w.0)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    /// Offset of `buf[0]` within the frame, for error messages.
    base: usize,
}

impl<'a> Reader<'a> {
    fn offset(&self) -> usize {
        self.base + self.pos
    }

    fn take(&mut self, field: &'static str, n: usize) -> std::result::Result<&'a [u8], FrameError> {
        if n > self.buf.len() - self.pos {
            return Err(FrameError::Truncated {
                field,
                offset: self.offset(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    /// Bytes for `count` items of `size` bytes, checked before any allocation.
    fn take_items(&mut self, field: &'static str, count: usize, size: usize) -> std::result::Result<&'a [u8], FrameError> {
        let n = count.checked_mul(size).ok_or(FrameError::Truncated {
            field,
            offset: self.offset(),
        })?;
        self.take(field, n)
    }

    fn u8(&mut self, field: &'static str) -> std::result::Result<u8, FrameError> {
        Ok(self.take(field, 1)?[0])
    }
    fn u16(&mut self, field: &'static str) -> std::result::Result<u16, FrameError> {
        Ok(u16::from_le_bytes(self.take(field, 2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self, field: &'static str) -> std::result::Result<u32, FrameError> {
        Ok(u32::from_le_bytes(self.take(field, 4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, field: &'static str) -> std::result::Result<u64, FrameError> {
        Ok(u64::from_le_bytes(self.take(field, 8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self, field: &'static str) -> std::result::Result<f64, FrameError> {
        Ok(f64::from_le_bytes(self.take(field, 8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, field: &'static str, count: usize) -> std::result::Result<Vec<f32>, FrameError> {
        Ok(self
            .take_items(field, count, 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn f64s(&mut self, field: &'static str, count: usize) -> std::result::Result<Vec<f64>, FrameError> {
        Ok(self
            .take_items(field, count, 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn u16_list(&mut self, field: &'static str) -> std::result::Result<Vec<u16>, FrameError> {
        let n = self.u32(field)? as usize;
        Ok(self
            .take_items(field, n, 2)?
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().expect("2 bytes")))
            .collect())
    }

    fn params(&mut self) -> std::result::Result<EncoderParams, FrameError> {
        let start = self.offset();
        let count = self.u16("layer count")? as usize;
        let mut layers = Vec::new();
        for _ in 0..count {
            let rows = self.u16("layer rows")? as usize;
            let cols = self.u16("layer cols")? as usize;
            let weight = self.f32s("layer weights", rows * cols)?;
            let bias = self.f32s("layer bias", rows)?;
            layers.push(Layer {
                rows,
                cols,
                weight: weight.into_iter().map(f64::from).collect(),
                bias: bias.into_iter().map(f64::from).collect(),
            });
        }
        EncoderParams::from_layers(layers).map_err(|e| invalid("encoder parameters", start, e.to_string()))
    }

    fn features(&mut self) -> std::result::Result<Vec<FeatureVector>, FrameError> {
        let count = self.u32("feature count")? as usize;
        let at = self.offset();
        let d = self.u16("feature dim")? as usize;
        if d == 0 && count > 0 {
            return Err(invalid("feature dim", at, "zero-width features"));
        }
        let values = self.f32s("feature rows", count.saturating_mul(d))?;
        Ok(values.chunks_exact(d.max(1)).map(|c| FeatureVector::from_values(c.to_vec())).collect())
    }

    fn summary(&mut self) -> std::result::Result<ClientRoundSummary, FrameError> {
        let client = self.u32("client")?;
        let round = self.u32("round")?;
        let steps = self.u32("steps")?;
        let contrast = self.f64("contrast loss")?;
        let neigh = self.f64("neighborhood loss")?;
        let total = self.f64("total loss")?;
        let n = self.u32("epoch losses")? as usize;
        Ok(ClientRoundSummary {
            client,
            round,
            steps,
            contrast,
            neigh,
            total,
            epoch_losses: self.f64s("epoch losses", n)?,
            query_labels: self.u16_list("query labels")?,
            local_bank_labels: self.u16_list("local bank labels")?,
            upload_labels: self.u16_list("upload labels")?,
            class_set: self.u16_list("class set")?,
        })
    }
}

/// Decodes the frame at the start of `bytes`; trailing bytes are left alone.
pub fn decode_frame(bytes: &[u8]) -> std::result::Result<Decoded, FrameError> {
    let Some(&type_byte) = bytes.first() else {
        return Ok(Decoded::NeedMore { needed: HEADER_LEN });
    };
    let kind = MessageType::from_byte(type_byte).ok_or(FrameError::UnknownType {
        byte: type_byte,
        offset: 0,
    })?;
    if bytes.len() < HEADER_LEN {
        return Ok(Decoded::NeedMore { needed: HEADER_LEN });
    }
    let len = u32::from_le_bytes(bytes[1..HEADER_LEN].try_into().expect("4 bytes")) as usize;
    if len > MAX_PAYLOAD {
        return Err(FrameError::Oversized { len, max: MAX_PAYLOAD });
    }
    let total = HEADER_LEN + len;
    if bytes.len() < total {
        return Ok(Decoded::NeedMore { needed: total });
    }
    let mut r = Reader {
        buf: &bytes[HEADER_LEN..total],
        pos: 0,
        base: HEADER_LEN,
    };
    let message = match kind {
        MessageType::Hello => Message::Hello {
            client_id: r.u32("client id")?,
            shard_size: r.u32("shard size")?,
        },
        MessageType::ModelUp => Message::ModelUp(ModelPair {
            q: r.params()?,
            k: r.params()?,
        }),
        MessageType::ModelDown => Message::ModelDown(ModelPair {
            q: r.params()?,
            k: r.params()?,
        }),
        MessageType::FeaturesUp => Message::FeaturesUp(r.features()?),
        MessageType::FeaturesDown => Message::FeaturesDown(r.features()?),
        MessageType::RoundBegin => {
            let round = r.u32("round")?;
            let config_digest = r.u64("config digest")?;
            let at = r.offset();
            let flags = r.u8("flags")?;
            if flags & !(FLAG_UPLOAD | FLAG_SELECTED) != 0 {
                return Err(invalid("flags", at, format!("unknown bits 0x{flags:02x}")));
            }
            Message::RoundBegin {
                round,
                config_digest,
                flags,
            }
        }
        MessageType::RoundDone => Message::RoundDone(r.summary()?),
        MessageType::Bye => Message::Bye,
    };
    if r.pos != len {
        return Err(FrameError::LengthMismatch {
            declared: len,
            used: r.pos,
        });
    }
    Ok(Decoded::Frame {
        message,
        consumed: total,
    })
}

fn closed(peer: &str, step: &str) -> impl FnOnce(io::Error) -> Error {
    let (peer, step) = (peer.to_string(), step.to_string());
    move |e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            Error::Protocol(format!("{peer} disconnected during {step}"))
        } else {
            Error::Protocol(format!("{peer}: I/O failure during {step}: {e}"))
        }
    }
}

/// Reads exactly one frame from a stream.
pub fn read_message(reader: &mut impl Read, peer: &str, step: &str) -> Result<Message> {
    let mut buf = vec![0u8; HEADER_LEN];
    reader.read_exact(&mut buf).map_err(closed(peer, step))?;
    loop {
        match decode_frame(&buf)? {
            Decoded::Frame { message, .. } => return Ok(message),
            Decoded::NeedMore { needed } => {
                let have = buf.len();
                buf.resize(needed, 0);
                reader.read_exact(&mut buf[have..]).map_err(closed(peer, step))?;
            }
        }
    }
}

pub fn write_message(writer: &mut impl Write, message: &Message) -> Result<()> {
    writer.write_all(&encode_frame(message)?)?;
    writer.flush()?;
    Ok(())
}

fn unexpected(peer: &str, expected: &str, got: &Message) -> Error {
    Error::Protocol(format!(
        "{peer}: expected {expected}, got {}",
        got.message_type().name()
    ))
}

struct Connection {
    peer: String,
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Connection {
    fn new(stream: TcpStream, peer: String) -> Result<Self> {
        stream.set_nodelay(true)?;
        Ok(Connection {
            reader: BufReader::new(stream.try_clone()?),
            writer: stream,
            peer,
        })
    }

    fn send(&mut self, m: &Message) -> Result<()> {
        write_message(&mut self.writer, m).map_err(|e| match e {
            Error::Io(io) => Error::Protocol(format!("{}: send failed: {io}", self.peer)),
            other => other,
        })
    }

    fn recv(&mut self, step: &str) -> Result<Message> {
        read_message(&mut self.reader, &self.peer, step)
    }
}

fn recv_upload(conn: &mut Connection, client: u32) -> Result<ClientUpload> {
    let step = "step 1 (upload)";
    let models = match conn.recv(step)? {
        Message::ModelUp(m) => m,
        other => return Err(unexpected(&conn.peer, "MODEL_UP", &other)),
    };
    let features = match conn.recv(step)? {
        Message::FeaturesUp(f) => f,
        other => return Err(unexpected(&conn.peer, "FEATURES_UP", &other)),
    };
    Ok(ClientUpload {
        client,
        params_q: models.q,
        params_k: models.k,
        features,
    })
}

/// Runs the server role on an already bound listener: waits for
/// `federation.clients` HELLOs, drives every round over the wire, then sends
/// BYE. Round reports are handed to `sink` as they complete.
pub fn server_loop(
    listener: &TcpListener,
    cfg: &ExperimentConfig,
    mut sink: impl FnMut(&RoundReport),
) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let setup = Setup::from_config(cfg)?;
    let digest = cfg.digest();
    let clients = cfg.federation.clients;

    let mut conns: BTreeMap<u32, Connection> = BTreeMap::new();
    let mut sizes = BTreeMap::new();
    while conns.len() < clients as usize {
        let (stream, addr) = listener.accept()?;
        let mut conn = Connection::new(stream, format!("peer {addr}"))?;
        match conn.recv("handshake")? {
            Message::Hello { client_id, shard_size } => {
                if client_id >= clients || conns.contains_key(&client_id) {
                    return Err(Error::Protocol(format!(
                        "{}: invalid or duplicate client id {client_id}",
                        conn.peer
                    )));
                }
                if shard_size == 0 {
                    return Err(Error::Protocol(format!("client {client_id} reported an empty shard")));
                }
                info!("client {client_id} connected from {addr} with {shard_size} samples");
                conn.peer = format!("client {client_id}");
                sizes.insert(client_id, shard_size as usize);
                conns.insert(client_id, conn);
            }
            other => return Err(unexpected(&conn.peer, "HELLO", &other)),
        }
    }

    let cfg = Arc::new(cfg.clone());
    let mut server = Server::new(Arc::clone(&cfg), setup.init_params, sizes, setup.probe);
    let mut reports = Vec::with_capacity(cfg.federation.rounds as usize);
    for round in 0..cfg.federation.rounds {
        let start = Instant::now();
        let plan = server.plan_round(round);
        for (&id, conn) in conns.iter_mut() {
            let mut flags = 0;
            if plan.uploaders.contains(&id) {
                flags |= FLAG_UPLOAD;
            }
            if plan.selected.contains(&id) {
                flags |= FLAG_SELECTED;
            }
            conn.send(&Message::RoundBegin {
                round,
                config_digest: digest,
                flags,
            })?;
        }
        for &id in &plan.uploaders {
            let upload = recv_upload(conns.get_mut(&id).expect("connected"), id)?;
            server.accept_upload(upload)?;
        }
        server.aggregate()?;
        for &id in &plan.selected {
            let d = server.download_for(id);
            let conn = conns.get_mut(&id).expect("connected");
            conn.send(&Message::ModelDown(ModelPair {
                q: d.params_q,
                k: d.params_k,
            }))?;
            conn.send(&Message::FeaturesDown(d.remote))?;
        }
        for &id in &plan.selected {
            let conn = conns.get_mut(&id).expect("connected");
            match conn.recv("step 4 (local learning)")? {
                Message::RoundDone(s) if s.client == id && s.round == round => server.accept_done(s)?,
                Message::RoundDone(s) => {
                    return Err(Error::Protocol(format!(
                        "{}: ROUND_DONE for client {} round {} during round {round}",
                        conn.peer, s.client, s.round
                    )))
                }
                other => return Err(unexpected(&conn.peer, "ROUND_DONE", &other)),
            }
        }
        let report = server.finish_round(start.elapsed().as_secs_f64())?;
        debug!("round {round} done");
        sink(&report);
        reports.push(report);
    }

    let plan = server.plan_closing(cfg.federation.rounds);
    for &id in &plan.uploaders {
        conns.get_mut(&id).expect("connected").send(&Message::RoundBegin {
            round: plan.round,
            config_digest: digest,
            flags: FLAG_UPLOAD,
        })?;
    }
    for &id in &plan.uploaders {
        let upload = recv_upload(conns.get_mut(&id).expect("connected"), id)?;
        server.accept_upload(upload)?;
    }
    server.aggregate()?;
    for conn in conns.values_mut() {
        conn.send(&Message::Bye)?;
    }
    server.into_outcome(reports)
}

/// What a client saw during its session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionSummary {
    pub client: u32,
    pub rounds_trained: u32,
    pub uploads: u32,
}

/// Runs the client role until the server says BYE.
///
/// Without an explicit `shard`, the client rebuilds its partition from the
/// experiment config, exactly as the in-process simulator does.
pub fn client_session(
    addr: impl ToSocketAddrs,
    cfg: &ExperimentConfig,
    client_id: u32,
    shard: Option<ClientShard>,
) -> Result<SessionSummary> {
    cfg.validate()?;
    let shard = match shard {
        Some(mut s) => {
            s.client_id = client_id;
            s
        }
        None => {
            let mut shards = Setup::from_config(cfg)?.shards;
            if client_id as usize >= shards.len() {
                return Err(Error::Config(format!(
                    "client id {client_id} out of range for {} clients",
                    shards.len()
                )));
            }
            shards.swap_remove(client_id as usize)
        }
    };
    let mut node = ClientNode::new(shard, &initial_params(cfg)?, Arc::new(cfg.clone()))?;
    let digest = cfg.digest();

    let stream = TcpStream::connect(addr)?;
    let mut conn = Connection::new(stream, "server".into())?;
    conn.send(&Message::Hello {
        client_id,
        shard_size: node.shard_size() as u32,
    })?;
    let mut summary = SessionSummary {
        client: client_id,
        rounds_trained: 0,
        uploads: 0,
    };
    loop {
        match conn.recv("waiting for the next round")? {
            Message::Bye => return Ok(summary),
            Message::RoundBegin {
                round,
                config_digest,
                flags,
            } => {
                if config_digest != digest {
                    return Err(Error::Protocol(format!(
                        "config digest mismatch in round {round}: server {config_digest:016x}, client {digest:016x}"
                    )));
                }
                if flags & FLAG_UPLOAD != 0 {
                    if !node.has_pending_upload() {
                        return Err(Error::Protocol(format!(
                            "round {round}: upload requested but no local update is pending"
                        )));
                    }
                    let up = node.take_upload();
                    conn.send(&Message::ModelUp(ModelPair {
                        q: up.params_q,
                        k: up.params_k,
                    }))?;
                    conn.send(&Message::FeaturesUp(up.features))?;
                    summary.uploads += 1;
                }
                if flags & FLAG_SELECTED != 0 {
                    let step = "step 3 (download)";
                    let models = match conn.recv(step)? {
                        Message::ModelDown(m) => m,
                        other => return Err(unexpected("server", "MODEL_DOWN", &other)),
                    };
                    let remote = match conn.recv(step)? {
                        Message::FeaturesDown(f) => f,
                        other => return Err(unexpected("server", "FEATURES_DOWN", &other)),
                    };
                    let s = node.local_update(
                        round,
                        Download {
                            params_q: models.q,
                            params_k: models.k,
                            remote,
                        },
                    )?;
                    conn.send(&Message::RoundDone(s))?;
                    summary.rounds_trained += 1;
                }
            }
            other => return Err(unexpected("server", "ROUND_BEGIN or BYE", &other)),
        }
    }
}
