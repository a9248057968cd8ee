//! Request body, piggybacked first-token frame, and the token event stream.
//!
//! Canonical framing is SSE-style:
//!
//! ```text
//! data: {"first_token":"<tok>","mask_b64":"<base64>","L":<int>}\n\n
//! data: {"i":1,"token":"<tok>"}\n\n
//! ...
//! data: {"i":<L-1>,"token":"<tok>"}\n\n
//! data: [DONE]\n\n
//! ```
//!
//! `L` is `"*"` when the cloud streams until end of text. JSON string
//! escaping keeps `\n\n` out of every payload, so frames are self-delimiting.
//! A compact `token#mask#L` form is also provided; it cannot carry tokens
//! that contain `#`.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::maskcodec::{CodecError, CompressedMask};

pub const DATA_PREFIX: &[u8] = b"data: ";
pub const FRAME_END: &[u8] = b"\n\n";
pub const DONE: &str = "[DONE]";
/// Token text that marks end of generation.
pub const EOT: &str = "<eot>";
/// Largest frame the stream decoder buffers before giving up on it.
pub const MAX_FRAME_BYTES: usize = 1 << 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("frame is missing the `data: ` prefix")]
    MissingPrefix,
    #[error("frame is not terminated by a blank line")]
    Unterminated,
    #[error("frame exceeds {MAX_FRAME_BYTES} bytes")]
    Oversized,
    #[error("payload is not valid UTF-8")]
    Utf8,
    #[error("payload is not a JSON object: {0}")]
    Json(String),
    #[error("field `{field}`: {reason}")]
    Field { field: &'static str, reason: String },
    #[error("unexpected field `{0}`")]
    UnknownField(String),
    #[error("token contains the compact delimiter `#`")]
    DelimiterInToken,
    #[error("compact frame needs exactly three `#`-separated parts")]
    CompactShape,
    #[error("stream: {0}")]
    Sequence(String),
    #[error(transparent)]
    Mask(#[from] CodecError),
}

fn field_err(field: &'static str, reason: impl Into<String>) -> ProtocolError {
    ProtocolError::Field {
        field,
        reason: reason.into(),
    }
}

/// How many tokens the cloud generates (first token included).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenLimit {
    Tokens(u64),
    /// Generate until end of text.
    Unbounded,
}

impl TokenLimit {
    pub fn get(self) -> Option<u64> {
        match self {
            Self::Tokens(n) => Some(n),
            Self::Unbounded => None,
        }
    }

    /// Tokens produced when the model would stop on its own after `n`.
    pub fn emitted(self, n: u64) -> u64 {
        match self {
            Self::Tokens(l) => l.min(n),
            Self::Unbounded => n,
        }
    }
}

impl std::fmt::Display for TokenLimit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Tokens(n) => write!(f, "{n}"),
            Self::Unbounded => f.write_str("*"),
        }
    }
}

impl std::str::FromStr for TokenLimit {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "*" {
            return Ok(Self::Unbounded);
        }
        match s.parse::<u64>() {
            Ok(n) if n >= 1 => Ok(Self::Tokens(n)),
            _ => Err(field_err("L", format!("expected an integer >= 1 or \"*\", got {s:?}"))),
        }
    }
}

impl TokenLimit {
    fn to_json(self) -> Value {
        match self {
            Self::Tokens(n) => Value::from(n),
            Self::Unbounded => Value::from("*"),
        }
    }

    fn from_json(v: &Value) -> Result<Self, ProtocolError> {
        match v {
            Value::Number(n) => match n.as_u64() {
                Some(n) if n >= 1 => Ok(Self::Tokens(n)),
                _ => Err(field_err("L", format!("expected an integer >= 1, got {n}"))),
            },
            Value::String(s) if s == "*" => Ok(Self::Unbounded),
            other => Err(field_err("L", format!("expected an integer or \"*\", got {other}"))),
        }
    }
}

/// Device-to-cloud request body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssistRequest {
    pub scene: String,
    pub model_version_label: String,
    pub device_class: String,
    pub prefix: String,
    pub content: String,
    pub suffix: String,
    pub request_id: String,
}

impl AssistRequest {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.content.trim().is_empty() && self.suffix.trim().is_empty() {
            return Err(field_err("content", "content and suffix are both empty"));
        }
        for (name, v) in [
            ("scene", &self.scene),
            ("model_version_label", &self.model_version_label),
            ("device_class", &self.device_class),
            ("request_id", &self.request_id),
        ] {
            if v.is_empty() {
                return Err(field_err(name, "must not be empty"));
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("plain struct serializes")
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let req: Self =
            serde_json::from_slice(bytes).map_err(|e| ProtocolError::Json(e.to_string()))?;
        req.validate()?;
        Ok(req)
    }
}

/// First cloud response: the first token, the compressed selection mask and
/// the assisted-token count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FirstTokenFrame {
    pub token: String,
    pub mask: CompressedMask,
    pub limit: TokenLimit,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamEvent {
    /// Decoding position, starting at 1.
    pub index: u64,
    pub token: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StreamMessage {
    First(FirstTokenFrame),
    Token(StreamEvent),
    Done,
}

fn frame(payload: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + 8);
    out.extend_from_slice(DATA_PREFIX);
    out.extend_from_slice(payload.as_bytes());
    out.extend_from_slice(FRAME_END);
    out
}

fn object(pairs: Vec<(&str, Value)>) -> String {
    // serde_json's map keeps insertion order only with `preserve_order`;
    // write the object by hand to pin field order.
    let body: Vec<String> = pairs
        .into_iter()
        .map(|(k, v)| format!("{}:{}", Value::from(k), v))
        .collect();
    format!("{{{}}}", body.join(","))
}

pub fn encode_first_frame(f: &FirstTokenFrame) -> Vec<u8> {
    frame(&object(vec![
        ("first_token", Value::from(f.token.as_str())),
        ("mask_b64", Value::from(B64.encode(f.mask.as_bytes()))),
        ("L", f.limit.to_json()),
    ]))
}

pub fn encode_stream_event(e: &StreamEvent) -> Vec<u8> {
    frame(&object(vec![
        ("i", Value::from(e.index)),
        ("token", Value::from(e.token.as_str())),
    ]))
}

pub fn encode_done() -> Vec<u8> {
    frame(DONE)
}

pub fn encode_message(m: &StreamMessage) -> Vec<u8> {
    match m {
        StreamMessage::First(f) => encode_first_frame(f),
        StreamMessage::Token(e) => encode_stream_event(e),
        StreamMessage::Done => encode_done(),
    }
}

/// Strip `data: ` and the trailing blank line from one complete frame.
fn unframe(bytes: &[u8]) -> Result<&str, ProtocolError> {
    let body = bytes
        .strip_prefix(DATA_PREFIX)
        .ok_or(ProtocolError::MissingPrefix)?;
    let body = body
        .strip_suffix(FRAME_END)
        .ok_or(ProtocolError::Unterminated)?;
    if body.windows(2).any(|w| w == FRAME_END) {
        return Err(ProtocolError::Sequence("more than one frame".into()));
    }
    std::str::from_utf8(body).map_err(|_| ProtocolError::Utf8)
}

fn parse_object(payload: &str) -> Result<Map<String, Value>, ProtocolError> {
    match serde_json::from_str::<Value>(payload) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(other) => Err(ProtocolError::Json(format!("expected an object, got {other}"))),
        Err(e) => Err(ProtocolError::Json(e.to_string())),
    }
}

fn only_fields(m: &Map<String, Value>, allowed: &[&str]) -> Result<(), ProtocolError> {
    match m.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(ProtocolError::UnknownField(k.clone())),
        None => Ok(()),
    }
}

fn string_field(m: &Map<String, Value>, field: &'static str) -> Result<String, ProtocolError> {
    match m.get(field) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(other) => Err(field_err(field, format!("expected a string, got {other}"))),
        None => Err(field_err(field, "missing")),
    }
}

fn first_from_object(m: &Map<String, Value>) -> Result<FirstTokenFrame, ProtocolError> {
    only_fields(m, &["first_token", "mask_b64", "L"])?;
    let token = string_field(m, "first_token")?;
    let mask_b64 = string_field(m, "mask_b64")?;
    let limit = TokenLimit::from_json(m.get("L").ok_or_else(|| field_err("L", "missing"))?)?;
    let raw = B64
        .decode(mask_b64.as_bytes())
        .map_err(|e| field_err("mask_b64", e.to_string()))?;
    let mask = CompressedMask::from_bytes(raw)?;
    // Surface codec errors at the protocol boundary.
    crate::maskcodec::unpack(&mask)?;
    Ok(FirstTokenFrame { token, mask, limit })
}

fn event_from_object(m: &Map<String, Value>) -> Result<StreamEvent, ProtocolError> {
    only_fields(m, &["i", "token"])?;
    let index = match m.get("i") {
        Some(Value::Number(n)) => match n.as_u64() {
            Some(i) if i >= 1 => i,
            _ => return Err(field_err("i", format!("expected an integer >= 1, got {n}"))),
        },
        Some(other) => return Err(field_err("i", format!("expected an integer, got {other}"))),
        None => return Err(field_err("i", "missing")),
    };
    let token = string_field(m, "token")?;
    Ok(StreamEvent { index, token })
}

fn message_from_payload(payload: &str) -> Result<StreamMessage, ProtocolError> {
    if payload == DONE {
        return Ok(StreamMessage::Done);
    }
    let m = parse_object(payload)?;
    if m.contains_key("first_token") {
        first_from_object(&m).map(StreamMessage::First)
    } else {
        event_from_object(&m).map(StreamMessage::Token)
    }
}

pub fn decode_first_frame(bytes: &[u8]) -> Result<FirstTokenFrame, ProtocolError> {
    first_from_object(&parse_object(unframe(bytes)?)?)
}

pub fn decode_stream_event(bytes: &[u8]) -> Result<StreamEvent, ProtocolError> {
    event_from_object(&parse_object(unframe(bytes)?)?)
}

pub fn decode_message(bytes: &[u8]) -> Result<StreamMessage, ProtocolError> {
    message_from_payload(unframe(bytes)?)
}

/// `token#mask_b64#L`.
pub fn encode_compact(f: &FirstTokenFrame) -> Result<Vec<u8>, ProtocolError> {
    if f.token.contains('#') {
        return Err(ProtocolError::DelimiterInToken);
    }
    Ok(format!("{}#{}#{}", f.token, B64.encode(f.mask.as_bytes()), f.limit).into_bytes())
}

pub fn decode_compact(bytes: &[u8]) -> Result<FirstTokenFrame, ProtocolError> {
    let text = std::str::from_utf8(bytes).map_err(|_| ProtocolError::Utf8)?;
    let parts: Vec<&str> = text.split('#').collect();
    let [token, mask_b64, limit] = parts[..] else {
        return Err(ProtocolError::CompactShape);
    };
    let raw = B64
        .decode(mask_b64.as_bytes())
        .map_err(|e| field_err("mask_b64", e.to_string()))?;
    let mask = CompressedMask::from_bytes(raw)?;
    crate::maskcodec::unpack(&mask)?;
    Ok(FirstTokenFrame {
        token: token.to_owned(),
        mask,
        limit: limit.parse()?,
    })
}

/// Incremental decoder for a byte stream of frames. Feed bytes in arbitrary
/// chunks; each complete frame yields one item. A malformed frame produces an
/// error for that frame only and decoding resumes at the next boundary.
#[derive(Debug, Default)]
pub struct StreamDecoder {
    buf: Vec<u8>,
    scan_from: usize,
    discarding: bool,
}

impl StreamDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Bytes received but not yet part of a complete frame.
    pub fn pending(&self) -> usize {
        self.buf.len()
    }

    pub fn next_message(&mut self) -> Option<Result<StreamMessage, ProtocolError>> {
        if !self.discarding {
            // Extra blank lines between frames carry nothing.
            let blank = self.buf.iter().take_while(|&&b| b == b'\n').count();
            if blank > 0 {
                self.buf.drain(..blank);
                self.scan_from = self.scan_from.saturating_sub(blank);
            }
        }
        let start = self.scan_from.saturating_sub(1);
        match self.buf[start..].windows(2).position(|w| w == FRAME_END) {
            Some(pos) => {
                let end = start + pos + 2;
                let frame: Vec<u8> = self.buf.drain(..end).collect();
                self.scan_from = 0;
                if std::mem::take(&mut self.discarding) {
                    // Tail of an oversized frame that was already reported.
                    return self.next_message();
                }
                Some(
                    frame
                        .strip_prefix(DATA_PREFIX)
                        .ok_or(ProtocolError::MissingPrefix)
                        .and_then(|b| {
                            std::str::from_utf8(&b[..b.len() - 2]).map_err(|_| ProtocolError::Utf8)
                        })
                        .and_then(message_from_payload),
                )
            }
            None => {
                self.scan_from = self.buf.len();
                if self.buf.len() > MAX_FRAME_BYTES {
                    let keep_newline = self.buf.last() == Some(&b'\n');
                    self.buf.clear();
                    if keep_newline {
                        self.buf.push(b'\n');
                    }
                    self.scan_from = self.buf.len();
                    if std::mem::replace(&mut self.discarding, true) {
                        return None;
                    }
                    return Some(Err(ProtocolError::Oversized));
                }
                None
            }
        }
    }

    pub fn drain(&mut self) -> Vec<Result<StreamMessage, ProtocolError>> {
        std::iter::from_fn(|| self.next_message()).collect()
    }
}

/// Check that `messages` form one conforming cloud session: one first frame,
/// then events `1..=k` with `k = L - 1` (or fewer if the last one is EOT),
/// then `[DONE]`. Returns the number of token events.
pub fn check_session(messages: &[StreamMessage]) -> Result<u64, ProtocolError> {
    let seq = |s: &str| ProtocolError::Sequence(s.to_owned());
    let (first, rest) = messages.split_first().ok_or_else(|| seq("empty session"))?;
    let StreamMessage::First(first) = first else {
        return Err(seq("session must open with the first-token frame"));
    };
    let (last, events) = rest.split_last().ok_or_else(|| seq("missing [DONE]"))?;
    if *last != StreamMessage::Done {
        return Err(seq("session must end with [DONE]"));
    }
    let mut prev_token = first.token.as_str();
    for (k, m) in events.iter().enumerate() {
        match m {
            StreamMessage::Token(e) if e.index == k as u64 + 1 => prev_token = &e.token,
            StreamMessage::Token(e) => {
                return Err(seq(&format!("event index {} out of order at {}", e.index, k + 1)))
            }
            _ => return Err(seq("unexpected frame inside the token stream")),
        }
    }
    let count = events.len() as u64;
    let ended_naturally = prev_token == EOT;
    match first.limit {
        TokenLimit::Tokens(l) if count + 1 > l => Err(seq(&format!(
            "{count} events exceed the early-termination bound L - 1 = {}",
            l - 1
        ))),
        TokenLimit::Tokens(l) if count + 1 < l && !ended_naturally => Err(seq(&format!(
            "stream ended after {count} events without EOT (L - 1 = {})",
            l - 1
        ))),
        TokenLimit::Unbounded if !ended_naturally => Err(seq("unbounded stream ended without EOT")),
        _ => Ok(count),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maskcodec::pack;
    use crate::refiner::SelectionMask;

    fn frame3() -> FirstTokenFrame {
        FirstTokenFrame {
            token: "The".into(),
            mask: pack(&SelectionMask::all_ones(3)),
            limit: TokenLimit::Tokens(5),
        }
    }

    #[test]
    fn first_frame_shape() {
        let bytes = encode_first_frame(&frame3());
        let text = String::from_utf8(bytes.clone()).unwrap();
        let b64 = B64.encode(frame3().mask.as_bytes());
        assert_eq!(
            text,
            format!("data: {{\"first_token\":\"The\",\"mask_b64\":\"{b64}\",\"L\":5}}\n\n")
        );
        assert_eq!(decode_first_frame(&bytes).unwrap(), frame3());
    }

    #[test]
    fn first_token_only_frame() {
        let f = FirstTokenFrame {
            token: "Hi".into(),
            mask: pack(&SelectionMask::all_ones(2)),
            limit: TokenLimit::Tokens(1),
        };
        assert_eq!(decode_first_frame(&encode_first_frame(&f)).unwrap(), f);
        let unbounded = FirstTokenFrame {
            limit: TokenLimit::Unbounded,
            ..f
        };
        let bytes = encode_first_frame(&unbounded);
        assert!(String::from_utf8_lossy(&bytes).contains("\"L\":\"*\""));
        assert_eq!(decode_first_frame(&bytes).unwrap(), unbounded);
    }

    #[test]
    fn event_shape() {
        let e = StreamEvent {
            index: 1,
            token: "quick".into(),
        };
        assert_eq!(encode_stream_event(&e), b"data: {\"i\":1,\"token\":\"quick\"}\n\n");
        assert_eq!(decode_stream_event(&encode_stream_event(&e)).unwrap(), e);
        assert_eq!(encode_done(), b"data: [DONE]\n\n");
    }

    #[test]
    fn tokens_with_newlines_and_hashes_survive() {
        let e = StreamEvent {
            index: 7,
            token: "a\n\nb#\"c\"".into(),
        };
        let bytes = encode_stream_event(&e);
        assert_eq!(bytes.windows(2).filter(|w| *w == FRAME_END).count(), 1);
        assert_eq!(decode_stream_event(&bytes).unwrap(), e);
    }

    #[test]
    fn field_errors_name_the_field() {
        let cases: [(&[u8], &str); 5] = [
            (b"data: {\"i\":0,\"token\":\"x\"}\n\n", "i"),
            (b"data: {\"i\":\"1\",\"token\":\"x\"}\n\n", "i"),
            (b"data: {\"i\":1,\"token\":3}\n\n", "token"),
            (b"data: {\"i\":1}\n\n", "token"),
            (b"data: {\"first_token\":\"x\",\"mask_b64\":\"AAAA\",\"L\":0}\n\n", "L"),
        ];
        for (bytes, field) in cases {
            match decode_message(bytes) {
                Err(ProtocolError::Field { field: f, .. }) => assert_eq!(f, field),
                other => panic!("{other:?}"),
            }
        }
        assert!(matches!(
            decode_message(b"data: {\"i\":1,\"token\":\"x\",\"z\":1}\n\n"),
            Err(ProtocolError::UnknownField(_))
        ));
        assert!(matches!(decode_message(b"{\"i\":1}\n\n"), Err(ProtocolError::MissingPrefix)));
        assert!(matches!(decode_message(b"data: [DONE]\n"), Err(ProtocolError::Unterminated)));
    }

    #[test]
    fn mask_errors_propagate() {
        let bad = format!(
            "data: {{\"first_token\":\"x\",\"mask_b64\":\"{}\",\"L\":2}}\n\n",
            B64.encode([9u8, 0, 0, 0, 1, 2])
        );
        assert!(matches!(decode_message(bad.as_bytes()), Err(ProtocolError::Mask(_))));
    }

    #[test]
    fn compact_codec() {
        let f = frame3();
        let bytes = encode_compact(&f).unwrap();
        assert!(bytes.starts_with(b"The#"));
        assert!(bytes.ends_with(b"#5"));
        assert_eq!(decode_compact(&bytes).unwrap(), f);
        let hashy = FirstTokenFrame {
            token: "#tag".into(),
            ..f
        };
        assert_eq!(encode_compact(&hashy), Err(ProtocolError::DelimiterInToken));
        assert!(decode_compact(b"a#b").is_err());
    }

    #[test]
    fn stream_decoder_reassembles_split_frames() {
        let mut wire = encode_first_frame(&frame3());
        for i in 1..=4 {
            wire.extend(encode_stream_event(&StreamEvent {
                index: i,
                token: format!("t{i}"),
            }));
        }
        wire.extend(encode_done());
        let mut dec = StreamDecoder::new();
        let mut out = Vec::new();
        for chunk in wire.chunks(3) {
            dec.push(chunk);
            out.extend(dec.drain());
        }
        let msgs: Vec<StreamMessage> = out.into_iter().map(Result::unwrap).collect();
        assert_eq!(msgs.len(), 6);
        assert_eq!(check_session(&msgs).unwrap(), 4);
        assert_eq!(dec.pending(), 0);
    }

    #[test]
    fn stream_decoder_recovers_after_garbage() {
        let mut wire = b"garbage\n\n".to_vec();
        wire.extend(encode_stream_event(&StreamEvent {
            index: 1,
            token: "ok".into(),
        }));
        let mut dec = StreamDecoder::new();
        dec.push(&wire);
        let out = dec.drain();
        assert_eq!(out.len(), 2);
        assert!(out[0].is_err());
        assert!(out[1].is_ok());
    }

    #[test]
    fn oversized_frames_are_dropped() {
        let mut dec = StreamDecoder::new();
        dec.push(&vec![b'x'; MAX_FRAME_BYTES + 10]);
        assert!(matches!(dec.next_message(), Some(Err(ProtocolError::Oversized))));
        dec.push(b"yyy\n\n");
        assert!(dec.next_message().is_none());
        dec.push(&encode_done());
        assert_eq!(dec.next_message(), Some(Ok(StreamMessage::Done)));
    }

    #[test]
    fn session_conformance() {
        let first = StreamMessage::First(frame3());
        let ev = |i: u64, t: &str| {
            StreamMessage::Token(StreamEvent {
                index: i,
                token: t.into(),
            })
        };
        let full = vec![first.clone(), ev(1, "a"), ev(2, "b"), ev(3, "c"), ev(4, "d"), StreamMessage::Done];
        assert_eq!(check_session(&full).unwrap(), 4);
        let early = vec![first.clone(), ev(1, "a"), ev(2, EOT), StreamMessage::Done];
        assert_eq!(check_session(&early).unwrap(), 2);
        let short = vec![first.clone(), ev(1, "a"), StreamMessage::Done];
        assert!(check_session(&short).is_err());
        let long = vec![first.clone(), ev(1, "a"), ev(2, "b"), ev(3, "c"), ev(4, "d"), ev(5, "e"), StreamMessage::Done];
        assert!(check_session(&long).is_err());
        let gap = vec![first, ev(2, "a"), StreamMessage::Done];
        assert!(check_session(&gap).is_err());
    }

    #[test]
    fn request_round_trip_and_validation() {
        let req = AssistRequest {
            scene: "qa".into(),
            model_version_label: "m-7b".into(),
            device_class: "phone".into(),
            prefix: "You are helpful.".into(),
            content: "Some text.".into(),
            suffix: "Question?".into(),
            request_id: "r1".into(),
        };
        assert_eq!(AssistRequest::decode(&req.encode()).unwrap(), req);
        let empty = AssistRequest {
            content: " ".into(),
            suffix: String::new(),
            ..req.clone()
        };
        assert!(AssistRequest::decode(&empty.encode()).is_err());
        assert!(AssistRequest::decode(b"{\"scene\":1}").is_err());
    }

    #[test]
    fn token_limit_parsing() {
        assert_eq!("*".parse::<TokenLimit>().unwrap(), TokenLimit::Unbounded);
        assert_eq!("12".parse::<TokenLimit>().unwrap(), TokenLimit::Tokens(12));
        assert!("0".parse::<TokenLimit>().is_err());
        assert_eq!(TokenLimit::Tokens(21).emitted(500), 21);
        assert_eq!(TokenLimit::Tokens(21).emitted(3), 3);
        assert_eq!(TokenLimit::Unbounded.emitted(500), 500);
    }
}
