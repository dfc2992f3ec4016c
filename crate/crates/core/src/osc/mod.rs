//! OSC 1.0 wire format: messages, bundles and time tags, with strict
//! padding checks so that `encode(decode(bytes)) == bytes`.

mod mapping;

pub use mapping::{decode_frame, AddressMap, Fragment, MappingError, Route};

use std::net::SocketAddr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const BUNDLE_TAG: &[u8; 8] = b"#bundle\0";
/// Seconds between the NTP epoch (1900) and the Unix epoch (1970).
const NTP_UNIX_OFFSET: f64 = 2_208_988_800.0;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("malformed OSC packet at byte {offset}: {kind}")]
pub struct OscError {
    pub offset: usize,
    pub kind: OscErrorKind,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OscErrorKind {
    #[error("empty packet")]
    Empty,
    #[error("length is not a multiple of 4")]
    Misaligned,
    #[error("truncated")]
    Truncated,
    #[error("unterminated string")]
    Unterminated,
    #[error("non-zero padding")]
    BadPadding,
    #[error("string is not UTF-8")]
    NotUtf8,
    #[error("address must start with '/'")]
    BadAddress,
    #[error("type tag string must start with ','")]
    BadTypeTags,
    #[error("unsupported type tag {0:?}")]
    UnsupportedTag(char),
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error("bundle element size {0} is invalid")]
    BadElementSize(usize),
}

fn err<T>(offset: usize, kind: OscErrorKind) -> Result<T, OscError> {
    Err(OscError { offset, kind })
}

/// 64-bit NTP time tag; the value 1 means "immediately".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TimeTag(pub u64);

impl TimeTag {
    pub const IMMEDIATE: TimeTag = TimeTag(1);

    /// From seconds since the Unix epoch.
    pub fn from_unix_seconds(secs: f64) -> Self {
        Self::from_ntp_seconds(secs + NTP_UNIX_OFFSET)
    }

    pub fn to_unix_seconds(self) -> f64 {
        self.to_ntp_seconds() - NTP_UNIX_OFFSET
    }

    pub fn from_ntp_seconds(secs: f64) -> Self {
        let whole = secs.floor();
        let frac = ((secs - whole) * 4_294_967_296.0).round().min(u32::MAX as f64);
        TimeTag(((whole as u64) << 32) | frac as u64)
    }

    pub fn to_ntp_seconds(self) -> f64 {
        (self.0 >> 32) as f64 + (self.0 & 0xFFFF_FFFF) as f64 / 4_294_967_296.0
    }

    pub fn is_immediate(self) -> bool {
        self == Self::IMMEDIATE
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "lowercase")]
pub enum OscType {
    Int(i32),
    Float(f32),
    String(String),
    Blob(Vec<u8>),
}

impl OscType {
    pub fn tag(&self) -> char {
        match self {
            OscType::Int(_) => 'i',
            OscType::Float(_) => 'f',
            OscType::String(_) => 's',
            OscType::Blob(_) => 'b',
        }
    }

    /// Numeric value of an int or float argument.
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            OscType::Int(v) => Some(*v as f64),
            OscType::Float(v) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            OscType::String(s) => Some(s),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OscMessage {
    pub address: String,
    pub args: Vec<OscType>,
}

impl OscMessage {
    pub fn new(address: impl Into<String>, args: Vec<OscType>) -> Self {
        Self { address: address.into(), args }
    }

    /// `,` followed by one tag per argument.
    pub fn type_tags(&self) -> String {
        std::iter::once(',').chain(self.args.iter().map(OscType::tag)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OscBundle {
    pub timetag: TimeTag,
    pub content: Vec<OscPacket>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OscPacket {
    Message(OscMessage),
    Bundle(OscBundle),
}

/// A decoded message with its transport context.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedMessage {
    pub message: OscMessage,
    pub source: Option<SocketAddr>,
    /// Reference-clock seconds at arrival.
    pub t_arrival: f64,
    /// Time tag of the innermost enclosing bundle, if any.
    pub timetag: Option<TimeTag>,
}

impl ReceivedMessage {
    pub fn type_tags(&self) -> String {
        self.message.type_tags()
    }
}

fn padded(len: usize) -> usize {
    (len + 3) & !3
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    /// Offset of `buf[0]` in the original datagram, for error reporting.
    base: usize,
}

impl<'a> Reader<'a> {
    fn at(&self) -> usize {
        self.base + self.pos
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], OscError> {
        if self.remaining() < n {
            return err(self.at(), OscErrorKind::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, OscError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, OscError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn padding(&mut self, used: usize) -> Result<(), OscError> {
        let start = self.at();
        let pad = self.take(padded(used) - used)?;
        if pad.iter().any(|b| *b != 0) {
            return err(start, OscErrorKind::BadPadding);
        }
        Ok(())
    }

    fn string(&mut self) -> Result<String, OscError> {
        let start = self.at();
        let rest = &self.buf[self.pos..];
        let Some(nul) = rest.iter().position(|b| *b == 0) else {
            return err(start, OscErrorKind::Unterminated);
        };
        let s = std::str::from_utf8(&rest[..nul]).map_err(|_| OscError { offset: start, kind: OscErrorKind::NotUtf8 })?;
        let total = padded(nul + 1);
        if rest.len() < total {
            return err(start, OscErrorKind::Truncated);
        }
        if rest[nul..total].iter().any(|b| *b != 0) {
            return err(start + nul, OscErrorKind::BadPadding);
        }
        self.pos += total;
        Ok(s.to_string())
    }

    fn blob(&mut self) -> Result<Vec<u8>, OscError> {
        let len = self.u32()? as usize;
        let data = self.take(len)?.to_vec();
        self.padding(len)?;
        Ok(data)
    }
}

/// Decode one datagram.
pub fn decode(bytes: &[u8]) -> Result<OscPacket, OscError> {
    decode_at(bytes, 0)
}

fn decode_at(bytes: &[u8], base: usize) -> Result<OscPacket, OscError> {
    if bytes.is_empty() {
        return err(base, OscErrorKind::Empty);
    }
    if bytes.len() % 4 != 0 {
        return err(base + bytes.len(), OscErrorKind::Misaligned);
    }
    if bytes.starts_with(BUNDLE_TAG) {
        decode_bundle(bytes, base).map(OscPacket::Bundle)
    } else {
        decode_message(bytes, base).map(OscPacket::Message)
    }
}

fn decode_message(bytes: &[u8], base: usize) -> Result<OscMessage, OscError> {
    let mut r = Reader { buf: bytes, pos: 0, base };
    let address = r.string()?;
    if !address.starts_with('/') {
        return err(base, OscErrorKind::BadAddress);
    }
    let mut args = Vec::new();
    if r.remaining() > 0 {
        let tag_at = r.at();
        let tags = r.string()?;
        let Some(tags) = tags.strip_prefix(',') else {
            return err(tag_at, OscErrorKind::BadTypeTags);
        };
        for t in tags.chars() {
            let arg_at = r.at();
            args.push(match t {
                'i' => OscType::Int(r.u32()? as i32),
                'f' => OscType::Float(f32::from_bits(r.u32()?)),
                's' => OscType::String(r.string()?),
                'b' => OscType::Blob(r.blob()?),
                other => return err(arg_at, OscErrorKind::UnsupportedTag(other)),
            });
        }
    }
    if r.remaining() > 0 {
        return err(r.at(), OscErrorKind::Trailing(r.remaining()));
    }
    Ok(OscMessage { address, args })
}

fn decode_bundle(bytes: &[u8], base: usize) -> Result<OscBundle, OscError> {
    let mut r = Reader { buf: bytes, pos: BUNDLE_TAG.len(), base };
    let timetag = TimeTag(r.u64()?);
    let mut content = Vec::new();
    while r.remaining() > 0 {
        let size_at = r.at();
        let size = r.u32()? as usize;
        if size == 0 || size % 4 != 0 {
            return err(size_at, OscErrorKind::BadElementSize(size));
        }
        let elem_base = r.at();
        let elem = r.take(size)?;
        content.push(decode_at(elem, elem_base)?);
    }
    Ok(OscBundle { timetag, content })
}

fn push_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(s.as_bytes());
    let n = padded(s.len() + 1) - s.len();
    out.extend(std::iter::repeat_n(0, n));
}

/// Encode a packet. Messages always carry a type tag string.
pub fn encode(packet: &OscPacket) -> Vec<u8> {
    let mut out = Vec::new();
    encode_into(packet, &mut out);
    out
}

fn encode_into(packet: &OscPacket, out: &mut Vec<u8>) {
    match packet {
        OscPacket::Message(m) => {
            push_string(out, &m.address);
            push_string(out, &m.type_tags());
            for a in &m.args {
                match a {
                    OscType::Int(v) => out.extend_from_slice(&v.to_be_bytes()),
                    OscType::Float(v) => out.extend_from_slice(&v.to_bits().to_be_bytes()),
                    OscType::String(s) => push_string(out, s),
                    OscType::Blob(b) => {
                        out.extend_from_slice(&(b.len() as u32).to_be_bytes());
                        out.extend_from_slice(b);
                        out.extend(std::iter::repeat_n(0, padded(b.len()) - b.len()));
                    }
                }
            }
        }
        OscPacket::Bundle(b) => {
            out.extend_from_slice(BUNDLE_TAG);
            out.extend_from_slice(&b.timetag.0.to_be_bytes());
            for p in &b.content {
                let size_at = out.len();
                out.extend_from_slice(&[0; 4]);
                encode_into(p, out);
                let size = (out.len() - size_at - 4) as u32;
                out[size_at..size_at + 4].copy_from_slice(&size.to_be_bytes());
            }
        }
    }
}

/// Decode a datagram and flatten bundles into messages tagged with the
/// enclosing bundle's time tag.
pub fn parse_osc_packet(bytes: &[u8], source: Option<SocketAddr>, t_arrival: f64) -> Result<Vec<ReceivedMessage>, OscError> {
    let packet = decode(bytes)?;
    let mut out = Vec::new();
    flatten(packet, None, &mut |message, timetag| {
        out.push(ReceivedMessage { message, source, t_arrival, timetag })
    });
    Ok(out)
}

fn flatten(packet: OscPacket, timetag: Option<TimeTag>, sink: &mut impl FnMut(OscMessage, Option<TimeTag>)) {
    match packet {
        OscPacket::Message(m) => sink(m, timetag),
        OscPacket::Bundle(b) => {
            for p in b.content {
                flatten(p, Some(b.timetag), sink);
            }
        }
    }
}
