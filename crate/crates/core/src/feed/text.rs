//! Line-delimited text records, one notification per line.
//!
//! ```text
//! tick:   1|feed|channel|seq|publish_ts|symbol|mic|bid|ask|bid_size|ask_size|flags[|exchange_ts[|ext_hex]]
//! other:  kind|feed|channel|seq|publish_ts|symbol|mic|body_hex
//! ```
//!
//! `kind` is the numeric kind code shared with VFB1 (1 tick, 2 reference,
//! 3 statistics, 4 news). Times are integer microseconds, prices decimals with
//! up to four fractional digits, `flags` the decimal flag byte. A missing
//! `exchange_ts` defaults to `publish_ts`. Inside `feed` and `symbol` a
//! literal `|` is written `\|` and a backslash `\\`.

use std::fmt::Write as _;
use std::sync::Arc;

use thiserror::Error;

use crate::model::{Mic, Notification, NotificationKind, Payload, Price, SymbolRef, TickFlags, TickPayload, VirtualTime};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TextError {
    #[error("malformed record: field {0}")]
    MalformedRecord(&'static str),
    #[error("unknown kind code {0:?}")]
    UnknownKindCode(String),
}

fn split_escaped(line: &str) -> Result<Vec<String>, TextError> {
    let mut fields = Vec::with_capacity(14);
    let mut cur = String::new();
    let mut chars = line.chars();
    while let Some(c) = chars.next() {
        match c {
            '\\' => match chars.next() {
                Some(e @ ('|' | '\\')) => cur.push(e),
                _ => return Err(TextError::MalformedRecord("escape")),
            },
            '|' => fields.push(std::mem::take(&mut cur)),
            c => cur.push(c),
        }
    }
    fields.push(cur);
    Ok(fields)
}

fn escape(s: &str, out: &mut String) {
    for c in s.chars() {
        if c == '|' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
}

fn hex_decode(s: &str) -> Option<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok())
        .collect()
}

fn hex_encode(bytes: &[u8], out: &mut String) {
    for b in bytes {
        let _ = write!(out, "{b:02x}");
    }
}

pub fn parse_text_record(line: &str) -> Result<Notification, TextError> {
    use TextError::MalformedRecord as M;
    let line = line.strip_suffix('\n').unwrap_or(line);
    let line = line.strip_suffix('\r').unwrap_or(line);
    if line.trim().is_empty() {
        return Err(M("kind"));
    }
    let f = split_escaped(line)?;
    let kind_field = f[0].as_str();
    let kind = match kind_field.parse::<u8>() {
        Ok(code) => NotificationKind::from_code(code).map_err(|_| TextError::UnknownKindCode(kind_field.to_string()))?,
        Err(_) => return Err(TextError::UnknownKindCode(kind_field.to_string())),
    };
    let expected: &[usize] = if kind == NotificationKind::Tick { &[12, 13, 14] } else { &[8] };
    if !expected.contains(&f.len()) {
        return Err(M("field_count"));
    }
    if f[1].is_empty() {
        return Err(M("feed"));
    }
    let feed_id: Arc<str> = Arc::from(f[1].as_str());
    let channel_id: u8 = f[2].parse().map_err(|_| M("channel"))?;
    let seq_no: u32 = f[3].parse().map_err(|_| M("seq"))?;
    let publish_ts = VirtualTime::from_micros(f[4].parse().map_err(|_| M("publish_ts"))?);
    let mic = Mic::new(&f[6]).map_err(|_| M("mic"))?;
    let symbol = SymbolRef::new(&f[5], mic).map_err(|_| M("symbol"))?;

    if kind != NotificationKind::Tick {
        let body = hex_decode(&f[7]).ok_or(M("body"))?;
        let n = Notification::with_body(feed_id, channel_id, seq_no, kind, symbol, publish_ts, Arc::from(body));
        return checked_size(n);
    }

    let bid: Price = f[7].parse().map_err(|_| M("bid"))?;
    let ask: Price = f[8].parse().map_err(|_| M("ask"))?;
    let bid_size: u32 = f[9].parse().map_err(|_| M("bid_size"))?;
    let ask_size: u32 = f[10].parse().map_err(|_| M("ask_size"))?;
    let flags = f[11]
        .parse::<u8>()
        .ok()
        .and_then(TickFlags::from_bits)
        .ok_or(M("flags"))?;
    let exchange_ts = match f.get(12) {
        Some(s) => VirtualTime::from_micros(s.parse().map_err(|_| M("exchange_ts"))?),
        None => publish_ts,
    };
    let extension = match f.get(13) {
        Some(s) => hex_decode(s).ok_or(M("extension"))?,
        None => Vec::new(),
    };
    let tick = TickPayload {
        bid,
        ask,
        bid_size,
        ask_size,
        exchange_ts,
        flags,
        extension: Arc::from(extension),
    };
    tick.check().map_err(|field| match field {
        "bid" => M("bid"),
        "ask" => M("ask"),
        _ => M("flags"),
    })?;
    checked_size(Notification::new(
        feed_id,
        channel_id,
        seq_no,
        symbol,
        publish_ts,
        Payload::Tick(tick),
    ))
}

fn checked_size(n: Notification) -> Result<Notification, TextError> {
    if n.within_size_bounds() {
        Ok(n)
    } else {
        Err(TextError::MalformedRecord("wire_size"))
    }
}

/// Formats `n` as a text record (no trailing newline). Optional tick fields
/// are written only when they differ from their defaults.
pub fn format_text_record(n: &Notification) -> String {
    let mut out = String::with_capacity(96);
    let _ = write!(out, "{}|", n.kind.code());
    escape(&n.feed_id, &mut out);
    let _ = write!(out, "|{}|{}|{}|", n.channel_id, n.seq_no, n.publish_ts);
    escape(n.symbol.local_symbol(), &mut out);
    let _ = write!(out, "|{}|", n.symbol.mic());
    match &n.payload {
        Payload::Tick(t) => {
            let _ = write!(
                out,
                "{}|{}|{}|{}|{}",
                t.bid,
                t.ask,
                t.bid_size,
                t.ask_size,
                t.flags.bits()
            );
            if t.exchange_ts != n.publish_ts || !t.extension.is_empty() {
                let _ = write!(out, "|{}", t.exchange_ts);
            }
            if !t.extension.is_empty() {
                out.push('|');
                hex_encode(&t.extension, &mut out);
            }
        }
        Payload::Body(b) => hex_encode(b, &mut out),
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_line_is_malformed() {
        assert_eq!(parse_text_record(""), Err(TextError::MalformedRecord("kind")));
    }

    #[test]
    fn negative_size_is_malformed() {
        let line = "1|NASDAQ|3|42|1000000|AAPL|XNAS|153.45|153.46|-100|200|0";
        assert_eq!(parse_text_record(line), Err(TextError::MalformedRecord("bid_size")));
    }

    #[test]
    fn unknown_kind() {
        let line = "7|NASDAQ|3|42|1000000|AAPL|XNAS|00";
        assert_eq!(parse_text_record(line), Err(TextError::UnknownKindCode("7".into())));
    }

    #[test]
    fn escaping_round_trip() {
        let line = r"1|feed\|a\\b|0|1|5|A\|B|XNAS|1.0000|1.0100|1|1|0";
        let n = parse_text_record(line).unwrap();
        assert_eq!(&*n.feed_id, r"feed|a\b");
        assert_eq!(n.symbol.local_symbol(), "A|B");
        assert_eq!(format_text_record(&n), line);
    }

    #[test]
    fn body_record() {
        let n = parse_text_record("2|REF|0|9|77|SAP|XETR|deadbeef").unwrap();
        assert_eq!(n.kind, NotificationKind::Reference);
        assert_eq!(n.payload, Payload::Body(Arc::from(&[0xde, 0xad, 0xbe, 0xef][..])));
        assert_eq!(format_text_record(&n), "2|REF|0|9|77|SAP|XETR|deadbeef");
        assert!(parse_text_record("2|REF|0|9|77|SAP|XETR|abc").is_err());
    }
}
