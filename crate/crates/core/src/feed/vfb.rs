//! VFB1 binary frames. Big-endian throughout:
//!
//! ```text
//! 0x56 0x46 | version 0x01 | kind u8 | channel u8 | seq u32 | symbol_len u8
//! | symbol | mic [4] | publish_ts u64 | payload_len u16 | payload
//! ```
//!
//! Tick payload: `exchange_ts u64 | bid i64 | ask i64 | bid_size u32 |
//! ask_size u32 | flags u8`, optionally followed by an opaque extension block
//! filling the rest of the payload. Other kinds carry an opaque body.
//!
//! The feed id is not on the wire; the handler that owns the stream supplies it.

use std::io::{self, Read, Write};
use std::sync::Arc;

use thiserror::Error;

use crate::model::{
    Mic, Notification, NotificationKind, Payload, Price, SymbolRef, TickFlags, TickPayload, VirtualTime,
    MAX_WIRE_SIZE, MIN_WIRE_SIZE,
};

pub const MAGIC: [u8; 2] = [0x56, 0x46];
pub const VERSION: u8 = 0x01;
/// Frame bytes before the symbol, plus those between symbol and payload.
pub const HEADER_FIXED_LEN: usize = 2 + 1 + 1 + 1 + 4 + 1 + 4 + 8 + 2;
pub const TICK_FIXED_LEN: usize = 8 + 8 + 8 + 4 + 4 + 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VfbError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported frame version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated frame")]
    TruncatedFrame,
    #[error("unknown kind code {0}")]
    UnknownKindCode(u8),
    #[error("invalid field {0}")]
    InvalidField(&'static str),
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
    #[error("payload of {0} bytes does not fit the 16-bit length field")]
    UnencodableSize(usize),
}

pub fn payload_len(payload: &Payload) -> usize {
    match payload {
        Payload::Tick(t) => TICK_FIXED_LEN + t.extension.len(),
        Payload::Body(b) => b.len(),
    }
}

pub fn frame_len(n: &Notification) -> usize {
    HEADER_FIXED_LEN + n.symbol.local_symbol().len() + payload_len(&n.payload)
}

/// Encodes `n` into a fresh buffer.
pub fn encode_vfb_frame(n: &Notification) -> Result<Vec<u8>, VfbError> {
    let mut out = Vec::with_capacity(frame_len(n));
    encode_into(n, &mut out)?;
    Ok(out)
}

/// Appends the frame for `n` to `out`.
pub fn encode_into(n: &Notification, out: &mut Vec<u8>) -> Result<(), VfbError> {
    let plen = payload_len(&n.payload);
    if plen > u16::MAX as usize {
        return Err(VfbError::UnencodableSize(plen));
    }
    let symbol = n.symbol.local_symbol().as_bytes();
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(n.kind.code());
    out.push(n.channel_id);
    out.extend_from_slice(&n.seq_no.to_be_bytes());
    out.push(symbol.len() as u8);
    out.extend_from_slice(symbol);
    out.extend_from_slice(n.symbol.mic().as_bytes());
    out.extend_from_slice(&n.publish_ts.as_micros().to_be_bytes());
    out.extend_from_slice(&(plen as u16).to_be_bytes());
    match &n.payload {
        Payload::Tick(t) => {
            out.extend_from_slice(&t.exchange_ts.as_micros().to_be_bytes());
            out.extend_from_slice(&t.bid.raw().to_be_bytes());
            out.extend_from_slice(&t.ask.raw().to_be_bytes());
            out.extend_from_slice(&t.bid_size.to_be_bytes());
            out.extend_from_slice(&t.ask_size.to_be_bytes());
            out.push(t.flags.bits());
            out.extend_from_slice(&t.extension);
        }
        Payload::Body(b) => out.extend_from_slice(b),
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], VfbError> {
        let end = self.pos.checked_add(n).ok_or(VfbError::TruncatedFrame)?;
        let s = self.buf.get(self.pos..end).ok_or(VfbError::TruncatedFrame)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, VfbError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, VfbError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, VfbError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, VfbError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> Result<i64, VfbError> {
        Ok(i64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses exactly one frame. `wire_size` is the frame length.
pub fn parse_vfb_frame(feed_id: &Arc<str>, bytes: &[u8]) -> Result<Notification, VfbError> {
    let (n, used) = parse_prefix(feed_id, bytes)?;
    if used != bytes.len() {
        return Err(VfbError::TrailingBytes(bytes.len() - used));
    }
    Ok(n)
}

/// Parses the frame at the start of `bytes`, returning it and its length.
pub fn parse_prefix(feed_id: &Arc<str>, bytes: &[u8]) -> Result<(Notification, usize), VfbError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(2)? != MAGIC {
        return Err(VfbError::BadMagic);
    }
    let version = c.u8()?;
    if version != VERSION {
        return Err(VfbError::UnsupportedVersion(version));
    }
    let kind_code = c.u8()?;
    let kind = NotificationKind::from_code(kind_code).map_err(|_| VfbError::UnknownKindCode(kind_code))?;
    let channel_id = c.u8()?;
    let seq_no = c.u32()?;
    let symbol_len = c.u8()? as usize;
    let symbol_bytes = c.take(symbol_len)?;
    let mic_bytes: [u8; 4] = c.take(4)?.try_into().unwrap();
    let publish_ts = VirtualTime::from_micros(c.u64()?);
    let plen = c.u16()? as usize;
    let payload_bytes = c.take(plen)?;

    let symbol_str = std::str::from_utf8(symbol_bytes).map_err(|_| VfbError::InvalidField("symbol"))?;
    let mic = Mic::from_bytes(mic_bytes).map_err(|_| VfbError::InvalidField("mic"))?;
    let symbol = SymbolRef::new(symbol_str, mic).map_err(|_| VfbError::InvalidField("symbol"))?;

    let payload = if kind == NotificationKind::Tick {
        if plen < TICK_FIXED_LEN {
            return Err(VfbError::InvalidField("payload_len"));
        }
        let mut p = Cursor {
            buf: payload_bytes,
            pos: 0,
        };
        let exchange_ts = VirtualTime::from_micros(p.u64()?);
        let bid = Price::from_raw(p.i64()?);
        let ask = Price::from_raw(p.i64()?);
        let bid_size = p.u32()?;
        let ask_size = p.u32()?;
        let flags = TickFlags::from_bits(p.u8()?).ok_or(VfbError::InvalidField("flags"))?;
        let tick = TickPayload {
            bid,
            ask,
            bid_size,
            ask_size,
            exchange_ts,
            flags,
            extension: Arc::from(&payload_bytes[TICK_FIXED_LEN..]),
        };
        tick.check().map_err(VfbError::InvalidField)?;
        Payload::Tick(tick)
    } else {
        Payload::Body(Arc::from(payload_bytes))
    };

    let used = c.pos;
    if kind != NotificationKind::News && !(MIN_WIRE_SIZE..=MAX_WIRE_SIZE).contains(&used) {
        return Err(VfbError::InvalidField("wire_size"));
    }
    Ok((
        Notification {
            feed_id: feed_id.clone(),
            channel_id,
            seq_no,
            kind,
            symbol,
            publish_ts,
            payload,
            enriched: None,
            wire_size: used as u32,
        },
        used,
    ))
}

/// Reads the next whole frame from a stream of concatenated frames.
/// `Ok(None)` at a clean end of stream.
pub fn read_frame<R: Read>(reader: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut head = [0u8; 10];
    let mut got = 0;
    while got < head.len() {
        let n = reader.read(&mut head[got..])?;
        if n == 0 {
            return if got == 0 {
                Ok(None)
            } else {
                Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated frame header"))
            };
        }
        got += n;
    }
    let symbol_len = head[9] as usize;
    let mut frame = head.to_vec();
    frame.resize(10 + symbol_len + 4 + 8 + 2, 0);
    reader.read_exact(&mut frame[10..])?;
    let plen = u16::from_be_bytes([frame[frame.len() - 2], frame[frame.len() - 1]]) as usize;
    let start = frame.len();
    frame.resize(start + plen, 0);
    reader.read_exact(&mut frame[start..])?;
    Ok(Some(frame))
}

/// Writes `frames` back to back.
pub fn write_stream<'a, W: Write>(writer: &mut W, notifications: impl IntoIterator<Item = &'a Notification>) -> io::Result<usize> {
    let mut buf = Vec::with_capacity(256);
    let mut count = 0;
    for n in notifications {
        buf.clear();
        encode_into(n, &mut buf).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        writer.write_all(&buf)?;
        count += 1;
    }
    Ok(count)
}
