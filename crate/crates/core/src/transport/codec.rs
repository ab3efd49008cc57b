//! Length-prefixed wire format.
//!
//! ```text
//! "HZL1" | type u8 | frame_id u64 LE | payload_len u32 LE | payload
//! ```
//!
//! Decoding is canonical: any accepted byte string re-encodes to itself.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::haze_model::FrameId;

pub const MAGIC: [u8; 4] = *b"HZL1";
pub const HEADER_LEN: usize = 17;
pub const MAX_PAYLOAD: usize = 64 << 20;

pub const TYPE_FRAME_DATA: u8 = 1;
pub const TYPE_AIRLIGHT_UPDATE: u8 = 2;
pub const TYPE_END_OF_STREAM: u8 = 3;
pub const TYPE_SKIP: u8 = 4;

/// Transmission planes follow the image.
pub const FLAG_TRANSMISSION: u8 = 1;
/// Three airlight floats follow.
pub const FLAG_AIRLIGHT: u8 = 1 << 1;
/// The image plane holds the dehazed output rather than the hazy input.
pub const FLAG_DEHAZED: u8 = 1 << 2;
const KNOWN_FLAGS: u8 = FLAG_TRANSMISSION | FLAG_AIRLIGHT | FLAG_DEHAZED;

const FRAME_HEADER_LEN: usize = 9;
const AIRLIGHT_UPDATE_LEN: usize = 21;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("payload of {0} bytes exceeds the 64 MiB limit")]
    Oversize(u64),
    #[error("truncated message: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("malformed {kind} payload: {msg}")]
    Malformed { kind: &'static str, msg: String },
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

fn malformed(kind: &'static str, msg: impl Into<String>) -> ProtocolError {
    ProtocolError::Malformed { kind, msg: msg.into() }
}

/// Planes carried by a `FrameData` message.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePayload {
    pub width: u32,
    pub height: u32,
    /// RGB24, row-major; the dehazed output when `dehazed` is set.
    pub image: Vec<u8>,
    pub dehazed: bool,
    pub transmission: Option<Vec<f32>>,
    pub airlight: Option<[f32; 3]>,
}

impl FramePayload {
    pub fn new(width: u32, height: u32, image: Vec<u8>) -> Self {
        Self { width, height, image, dehazed: false, transmission: None, airlight: None }
    }

    pub fn flags(&self) -> u8 {
        let mut flags = 0;
        if self.transmission.is_some() {
            flags |= FLAG_TRANSMISSION;
        }
        if self.airlight.is_some() {
            flags |= FLAG_AIRLIGHT;
        }
        if self.dehazed {
            flags |= FLAG_DEHAZED;
        }
        flags
    }

    fn encoded_len(&self) -> usize {
        FRAME_HEADER_LEN
            + self.image.len()
            + self.transmission.as_ref().map_or(0, |t| 4 * t.len())
            + self.airlight.map_or(0, |_| 12)
    }
}

/// Airlight state committed at frame `k` (the message's frame id).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AirlightUpdate {
    pub rgb: [f32; 3],
    /// Ids below this have been resolved by the sender.
    pub cursor: FrameId,
    /// False for the bootstrap state, in which case the message's frame id is 0.
    pub committed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    FrameData(FramePayload),
    AirlightUpdate(AirlightUpdate),
    /// Endpoints acknowledge with the number of airlight estimates they ran.
    EndOfStream { estimations: Option<u64> },
    Skip,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub frame_id: FrameId,
    pub body: Body,
}

impl WireMessage {
    pub fn frame(frame_id: FrameId, payload: FramePayload) -> Self {
        Self { frame_id, body: Body::FrameData(payload) }
    }

    pub fn skip(frame_id: FrameId) -> Self {
        Self { frame_id, body: Body::Skip }
    }

    pub fn end_of_stream(frame_id: FrameId, estimations: Option<u64>) -> Self {
        Self { frame_id, body: Body::EndOfStream { estimations } }
    }

    pub fn airlight(last_update: Option<FrameId>, rgb: [f32; 3], cursor: FrameId) -> Self {
        Self {
            frame_id: last_update.unwrap_or(0),
            body: Body::AirlightUpdate(AirlightUpdate { rgb, cursor, committed: last_update.is_some() }),
        }
    }

    pub fn msg_type(&self) -> u8 {
        match self.body {
            Body::FrameData(_) => TYPE_FRAME_DATA,
            Body::AirlightUpdate(_) => TYPE_AIRLIGHT_UPDATE,
            Body::EndOfStream { .. } => TYPE_END_OF_STREAM,
            Body::Skip => TYPE_SKIP,
        }
    }
}

fn push_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_message(msg: &WireMessage) -> Vec<u8> {
    let mut payload = Vec::new();
    match &msg.body {
        Body::FrameData(p) => {
            payload.reserve(p.encoded_len());
            payload.extend_from_slice(&p.width.to_le_bytes());
            payload.extend_from_slice(&p.height.to_le_bytes());
            payload.push(p.flags());
            payload.extend_from_slice(&p.image);
            if let Some(t) = &p.transmission {
                push_f32s(&mut payload, t);
            }
            if let Some(a) = &p.airlight {
                push_f32s(&mut payload, a);
            }
        }
        Body::AirlightUpdate(u) => {
            push_f32s(&mut payload, &u.rgb);
            payload.extend_from_slice(&u.cursor.to_le_bytes());
            payload.push(u8::from(u.committed));
        }
        Body::EndOfStream { estimations } => {
            if let Some(n) = estimations {
                payload.extend_from_slice(&n.to_le_bytes());
            }
        }
        Body::Skip => {}
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&MAGIC);
    out.push(msg.msg_type());
    out.extend_from_slice(&msg.frame_id.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

pub fn write_message<W: Write>(writer: &mut W, msg: &WireMessage) -> io::Result<()> {
    writer.write_all(&encode_message(msg))
}

struct Header {
    msg_type: u8,
    frame_id: FrameId,
    payload_len: usize,
}

fn parse_header(bytes: &[u8; HEADER_LEN]) -> Result<Header, ProtocolError> {
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(ProtocolError::BadMagic(magic));
    }
    let msg_type = bytes[4];
    if !(TYPE_FRAME_DATA..=TYPE_SKIP).contains(&msg_type) {
        return Err(ProtocolError::UnknownType(msg_type));
    }
    let frame_id = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes"));
    let payload_len = u32::from_le_bytes(bytes[13..17].try_into().expect("4 bytes")) as usize;
    if payload_len > MAX_PAYLOAD {
        return Err(ProtocolError::Oversize(payload_len as u64));
    }
    Ok(Header { msg_type, frame_id, payload_len })
}

fn read_unit_f32s(bytes: &[u8], kind: &'static str, what: &str) -> Result<Vec<f32>, ProtocolError> {
    bytes
        .chunks_exact(4)
        .map(|c| {
            let v = f32::from_le_bytes(c.try_into().expect("4 bytes"));
            if (0.0..=1.0).contains(&v) {
                Ok(v)
            } else {
                Err(malformed(kind, format!("{what} value {v} outside [0, 1]")))
            }
        })
        .collect()
}

fn decode_frame(payload: &[u8]) -> Result<FramePayload, ProtocolError> {
    const KIND: &str = "FrameData";
    if payload.len() < FRAME_HEADER_LEN {
        return Err(malformed(KIND, "shorter than the frame header"));
    }
    let width = u32::from_le_bytes(payload[0..4].try_into().expect("4 bytes"));
    let height = u32::from_le_bytes(payload[4..8].try_into().expect("4 bytes"));
    let flags = payload[8];
    if flags & !KNOWN_FLAGS != 0 {
        return Err(malformed(KIND, format!("unknown flag bits {flags:#04x}")));
    }
    if width == 0 || height == 0 {
        return Err(malformed(KIND, "zero dimension"));
    }
    let pixels = (width as usize)
        .checked_mul(height as usize)
        .filter(|&n| n <= MAX_PAYLOAD)
        .ok_or_else(|| malformed(KIND, "dimensions exceed the payload limit"))?;
    let image_len = 3 * pixels;
    let t_len = if flags & FLAG_TRANSMISSION != 0 { 4 * pixels } else { 0 };
    let a_len = if flags & FLAG_AIRLIGHT != 0 { 12 } else { 0 };
    let expected = FRAME_HEADER_LEN + image_len + t_len + a_len;
    if payload.len() != expected {
        return Err(malformed(KIND, format!("{width}x{height} flags {flags:#04x} needs {expected} bytes, got {}", payload.len())));
    }
    let mut at = FRAME_HEADER_LEN;
    let image = payload[at..at + image_len].to_vec();
    at += image_len;
    let transmission = (t_len > 0)
        .then(|| read_unit_f32s(&payload[at..at + t_len], KIND, "transmission"))
        .transpose()?;
    at += t_len;
    let airlight = (a_len > 0)
        .then(|| read_unit_f32s(&payload[at..at + a_len], KIND, "airlight").map(|v| [v[0], v[1], v[2]]))
        .transpose()?;
    Ok(FramePayload { width, height, image, dehazed: flags & FLAG_DEHAZED != 0, transmission, airlight })
}

fn decode_body(header: &Header, payload: &[u8]) -> Result<WireMessage, ProtocolError> {
    let body = match header.msg_type {
        TYPE_FRAME_DATA => Body::FrameData(decode_frame(payload)?),
        TYPE_AIRLIGHT_UPDATE => {
            const KIND: &str = "AirlightUpdate";
            if payload.len() != AIRLIGHT_UPDATE_LEN {
                return Err(malformed(KIND, format!("expected {AIRLIGHT_UPDATE_LEN} bytes, got {}", payload.len())));
            }
            let rgb = read_unit_f32s(&payload[..12], KIND, "airlight")?;
            let cursor = u64::from_le_bytes(payload[12..20].try_into().expect("8 bytes"));
            let committed = match payload[20] {
                0 if header.frame_id == 0 => false,
                0 => return Err(malformed(KIND, "bootstrap state must carry frame id 0")),
                1 => true,
                b => return Err(malformed(KIND, format!("commit flag {b} is not 0 or 1"))),
            };
            Body::AirlightUpdate(AirlightUpdate { rgb: [rgb[0], rgb[1], rgb[2]], cursor, committed })
        }
        TYPE_END_OF_STREAM => match payload.len() {
            0 => Body::EndOfStream { estimations: None },
            8 => Body::EndOfStream { estimations: Some(u64::from_le_bytes(payload.try_into().expect("8 bytes"))) },
            n => return Err(malformed("EndOfStream", format!("payload must be 0 or 8 bytes, got {n}"))),
        },
        TYPE_SKIP if payload.is_empty() => Body::Skip,
        TYPE_SKIP => return Err(malformed("Skip", "payload must be empty")),
        t => return Err(ProtocolError::UnknownType(t)),
    };
    Ok(WireMessage { frame_id: header.frame_id, body })
}

/// Decodes the first message in `bytes`, returning it with the number of bytes consumed.
pub fn decode_message(bytes: &[u8]) -> Result<(WireMessage, usize), ProtocolError> {
    let header_bytes: &[u8; HEADER_LEN] = bytes
        .get(..HEADER_LEN)
        .and_then(|h| h.try_into().ok())
        .ok_or(ProtocolError::Truncated { needed: HEADER_LEN, available: bytes.len() })?;
    let header = parse_header(header_bytes)?;
    let end = HEADER_LEN + header.payload_len;
    let payload = bytes
        .get(HEADER_LEN..end)
        .ok_or(ProtocolError::Truncated { needed: end, available: bytes.len() })?;
    Ok((decode_body(&header, payload)?, end))
}

/// Reads one message. `Ok(None)` on a clean end of stream before any header byte.
pub fn read_message<R: Read>(reader: &mut R) -> Result<Option<WireMessage>, ProtocolError> {
    let mut header_bytes = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match reader.read(&mut header_bytes[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(ProtocolError::Truncated { needed: HEADER_LEN, available: filled }),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let header = parse_header(&header_bytes)?;
    let mut payload = vec![0u8; header.payload_len];
    reader.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => {
            ProtocolError::Truncated { needed: HEADER_LEN + header.payload_len, available: HEADER_LEN }
        }
        _ => ProtocolError::Io(e),
    })?;
    decode_body(&header, &payload).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn end_of_stream_is_seventeen_bytes() {
        let bytes = encode_message(&WireMessage::end_of_stream(0, None));
        let mut expected = b"HZL1".to_vec();
        expected.push(3);
        expected.extend([0u8; 12]);
        assert_eq!(bytes, expected);
        assert_eq!(decode_message(&bytes).unwrap(), (WireMessage::end_of_stream(0, None), 17));
    }

    #[test]
    fn frame_round_trip() {
        let mut p = FramePayload::new(2, 1, vec![1, 2, 3, 4, 5, 6]);
        let msg = WireMessage::frame(9, p.clone());
        let bytes = encode_message(&msg);
        assert_eq!(bytes.len(), HEADER_LEN + 9 + 6);
        assert_eq!(decode_message(&bytes).unwrap().0, msg);
        p.transmission = Some(vec![0.25, 1.0]);
        p.airlight = Some([0.8, 0.9, 1.0]);
        p.dehazed = true;
        let msg = WireMessage::frame(u64::MAX, p);
        assert_eq!(decode_message(&encode_message(&msg)).unwrap().0, msg);
    }

    #[test]
    fn airlight_update_round_trip() {
        for msg in [WireMessage::airlight(Some(16), [0.5, 0.6, 0.7], 17), WireMessage::airlight(None, [1.0; 3], 0)] {
            assert_eq!(decode_message(&encode_message(&msg)).unwrap().0, msg);
        }
    }

    #[test]
    fn rejects_bad_framing() {
        let good = encode_message(&WireMessage::skip(3));
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_message(&bad), Err(ProtocolError::BadMagic(_))));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(decode_message(&bad), Err(ProtocolError::UnknownType(9))));
        let mut bad = good.clone();
        bad[13..17].copy_from_slice(&(MAX_PAYLOAD as u32 + 1).to_le_bytes());
        assert!(matches!(decode_message(&bad), Err(ProtocolError::Oversize(_))));
        let frame = encode_message(&WireMessage::frame(1, FramePayload::new(2, 1, vec![0; 6])));
        assert!(matches!(decode_message(&frame[..frame.len() - 1]), Err(ProtocolError::Truncated { .. })));
    }

    #[test]
    fn rejects_out_of_range_planes() {
        let mut p = FramePayload::new(1, 1, vec![0; 3]);
        p.transmission = Some(vec![1.5]);
        assert!(decode_message(&encode_message(&WireMessage::frame(0, p.clone()))).is_err());
        p.transmission = Some(vec![f32::NAN]);
        assert!(decode_message(&encode_message(&WireMessage::frame(0, p))).is_err());
    }

    #[test]
    fn concatenated_messages_separate() {
        let msgs = [
            WireMessage::frame(0, FramePayload::new(1, 1, vec![7, 8, 9])),
            WireMessage::skip(1),
            WireMessage::end_of_stream(2, Some(5)),
        ];
        let stream: Vec<u8> = msgs.iter().flat_map(encode_message).collect();
        let mut at = 0;
        for m in &msgs {
            let (decoded, used) = decode_message(&stream[at..]).unwrap();
            assert_eq!(&decoded, m);
            at += used;
        }
        assert_eq!(at, stream.len());
        let mut cursor = std::io::Cursor::new(stream);
        for m in &msgs {
            assert_eq!(read_message(&mut cursor).unwrap().as_ref(), Some(m));
        }
        assert!(read_message(&mut cursor).unwrap().is_none());
    }
}
