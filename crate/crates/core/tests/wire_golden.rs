//! Golden files for both wire formats. `TP_BLESS=1` rewrites them.

use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use proptest::prelude::*;
use tickplant_core::feed::text::{format_text_record, parse_text_record};
use tickplant_core::feed::vfb::{parse_prefix, write_stream};
use tickplant_core::feed::{encode_vfb_frame, parse_vfb_frame};
use tickplant_core::{Notification, NotificationKind, Payload, Price, SymbolRef, TickFlags, TickPayload, VirtualTime};

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn sym(s: &str) -> SymbolRef {
    s.parse().unwrap()
}

fn quote(bid: &str, ask: &str, bsz: u32, asz: u32, ts: u64, flags: TickFlags) -> Payload {
    Payload::Tick(TickPayload::quote(
        bid.parse().unwrap(),
        ask.parse().unwrap(),
        bsz,
        asz,
        VirtualTime::from_micros(ts),
        flags,
    ))
}

fn corpus(feed: &Arc<str>) -> Vec<Notification> {
    let mut with_ext = TickPayload::quote(
        Price::from_raw(1_234_500),
        Price::from_raw(1_234_600),
        300,
        200,
        VirtualTime::from_micros(34_200_000_100),
        TickFlags::empty(),
    );
    with_ext.extension = Arc::from(&b"\x01\x02venue"[..]);
    let mut exchange_lag = quote("99.9900", "100.0100", 1, 1, 34_200_000_000, TickFlags::empty());
    if let Payload::Tick(t) = &mut exchange_lag {
        t.exchange_ts = VirtualTime::from_micros(34_199_999_250);
    }
    vec![
        Notification::new(feed.clone(), 0, 1, sym("VOD@XLON"), VirtualTime::from_micros(28_800_000_000), quote("72.1000", "72.1200", 5000, 4200, 28_800_000_000, TickFlags::OPEN)),
        Notification::new(feed.clone(), 0, 2, sym("BARC@XLON"), VirtualTime::from_micros(28_800_000_017), quote("1.8765", "1.8770", 10, 999_999, 28_800_000_017, TickFlags::empty())),
        Notification::new(feed.clone(), 1, 1, sym("7203@XTKS"), VirtualTime::from_micros(34_200_000_000), exchange_lag),
        Notification::new(feed.clone(), 1, 2, sym("AAPL@XNAS"), VirtualTime::from_micros(34_200_000_100), Payload::Tick(with_ext)),
        Notification::new(feed.clone(), 1, 3, sym("SAP@XETR"), VirtualTime::from_micros(34_200_001_000), quote("120.5000", "120.4900", 7, 8, 34_200_001_000, TickFlags::empty())),
        Notification::new(feed.clone(), 2, 4_000_000_000, sym("SAP@XETR"), VirtualTime::from_micros(61_200_000_000), quote("121.0000", "121.0500", 1, 2, 61_200_000_000, TickFlags::CLOSE | TickFlags::DAY_HIGH_RESET)),
        Notification::with_body(feed.clone(), 3, 1, NotificationKind::Reference, sym("VOD@XLON"), VirtualTime::from_micros(25_200_000_000), Arc::from(&b"GB00BH4HKS39|Vodafone Group"[..])),
        Notification::with_body(feed.clone(), 3, 2, NotificationKind::Statistics, sym("VOD@XLON"), VirtualTime::from_micros(61_200_000_000), Arc::from(vec![0u8, 1, 2, 0xfe, 0xff])),
        Notification::with_body(feed.clone(), 4, 1, NotificationKind::News, sym("VOD@XLON"), VirtualTime::from_micros(43_200_000_000), Arc::from(vec![b'N'; 300])),
    ]
}

/// Frame bytes assembled field by field from the documented layout.
fn hand_frame(n: &Notification) -> Vec<u8> {
    let mut payload = Vec::new();
    match &n.payload {
        Payload::Tick(t) => {
            payload.extend(t.exchange_ts.as_micros().to_be_bytes());
            payload.extend(t.bid.raw().to_be_bytes());
            payload.extend(t.ask.raw().to_be_bytes());
            payload.extend(t.bid_size.to_be_bytes());
            payload.extend(t.ask_size.to_be_bytes());
            payload.push(t.flags.bits());
            payload.extend_from_slice(&t.extension);
        }
        Payload::Body(b) => payload.extend_from_slice(b),
    }
    let local = n.symbol.local_symbol().as_bytes();
    let mut f = vec![0x56, 0x46, 0x01, n.kind.code(), n.channel_id];
    f.extend(n.seq_no.to_be_bytes());
    f.push(local.len() as u8);
    f.extend_from_slice(local);
    f.extend_from_slice(n.symbol.mic().as_bytes());
    f.extend(n.publish_ts.as_micros().to_be_bytes());
    f.extend((payload.len() as u16).to_be_bytes());
    f.extend(payload);
    f
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Vec<u8> {
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap()).collect()
}

fn check_or_bless(name: &str, actual: &str) {
    let path = golden(name);
    if std::env::var_os("TP_BLESS").is_some() {
        fs::write(&path, actual).unwrap();
    }
    let expected = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(actual, expected, "{name} drifted; rerun with TP_BLESS=1 if intended");
}

#[test]
fn vfb_golden() {
    let feed: Arc<str> = Arc::from("FEED-GOLD");
    let mut text = String::from("# one VFB1 frame per line, hex; feed id FEED-GOLD\n");
    for n in corpus(&feed) {
        let frame = encode_vfb_frame(&n).unwrap();
        assert_eq!(frame, hand_frame(&n));
        assert_eq!(frame.len() as u32, n.wire_size);
        text.push_str(&hex(&frame));
        text.push('\n');
    }
    check_or_bless("frames.vfb.hex", &text);

    let mut stream = Vec::new();
    write_stream(&mut stream, &corpus(&feed)).unwrap();
    if std::env::var_os("TP_BLESS").is_some() {
        fs::write(golden("frames.vfb"), &stream).unwrap();
    }
    let from_file = fs::read(golden("frames.vfb")).unwrap();
    assert_eq!(from_file, stream);

    for (line, n) in text.lines().skip(1).zip(corpus(&feed)) {
        assert_eq!(parse_vfb_frame(&feed, &unhex(line)).unwrap(), n);
    }
    let mut rest = &from_file[..];
    let mut parsed = Vec::new();
    while !rest.is_empty() {
        let (n, used) = parse_prefix(&feed, rest).unwrap();
        parsed.push(n);
        rest = &rest[used..];
    }
    assert_eq!(parsed, corpus(&feed));
}

#[test]
fn text_golden() {
    let feed: Arc<str> = Arc::from("FEED|GOLD\\1");
    let mut text = String::new();
    for n in corpus(&feed) {
        text.push_str(&format_text_record(&n));
        text.push('\n');
    }
    check_or_bless("records.txt", &text);
    for (line, n) in text.lines().zip(corpus(&feed)) {
        assert_eq!(parse_text_record(line).unwrap(), n);
    }
}

#[test]
fn text_rejects_malformed() {
    for bad in [
        "",
        "9|F|0|1|0|A|XNAS|",
        "1|F|0|1|0|A|XNAS|1|2|3",
        "1|F|0|x|0|A|XNAS|1.0|2.0|1|1|0",
        "2|F|0|1|0|A|XNAS|abc",
        "2|F\\x|0|1|0|A|XNAS|00",
        "1|F|0|1|0|A|XNAS|1.00001|2.0|1|1|0",
    ] {
        assert!(parse_text_record(bad).is_err(), "{bad:?}");
    }
}

fn arb_notification() -> impl Strategy<Value = Notification> {
    (
        0u8..=255,
        any::<u32>(),
        "[A-Z0-9]{1,12}",
        prop::sample::select(vec!["XNAS", "XLON", "XTKS"]),
        0u64..=u64::MAX / 2,
        prop_oneof![
            (1i64..=1_000_000_000, 0i64..=100_000, any::<u32>(), any::<u32>(), 0u8..8, prop::collection::vec(any::<u8>(), 0..20))
                .prop_map(|(bid, spread, bs, asz, fl, ext)| {
                    let mut t = TickPayload::quote(
                        Price::from_raw(bid),
                        Price::from_raw(bid + spread),
                        bs,
                        asz,
                        VirtualTime::from_micros(bid as u64),
                        TickFlags::from_bits_truncate(fl),
                    );
                    t.extension = Arc::from(ext);
                    (NotificationKind::Tick, Payload::Tick(t))
                }),
            (2u8..=4, prop::collection::vec(any::<u8>(), 0..120))
                .prop_map(|(k, b)| (NotificationKind::from_code(k).unwrap(), Payload::Body(Arc::from(b)))),
        ],
    )
        .prop_map(|(ch, seq, local, mic, ts, (kind, payload))| {
            let s: SymbolRef = format!("{local}@{mic}").parse().unwrap();
            let mut n = Notification::new(Arc::from("P"), ch, seq, s, VirtualTime::from_micros(ts), payload);
            n.kind = kind;
            n
        })
}

proptest! {
    #[test]
    fn vfb_round_trip(n in arb_notification()) {
        let frame = encode_vfb_frame(&n).unwrap();
        prop_assert_eq!(&frame, &hand_frame(&n));
        prop_assert_eq!(parse_vfb_frame(&n.feed_id, &frame).unwrap(), n.clone());
        for cut in [0, 1, frame.len() / 2, frame.len() - 1] {
            prop_assert!(parse_vfb_frame(&n.feed_id, &frame[..cut]).is_err());
        }
    }

    #[test]
    fn text_round_trip(n in arb_notification()) {
        let line = format_text_record(&n);
        prop_assert!(!line.contains('\n'));
        prop_assert_eq!(parse_text_record(&line).unwrap(), n);
    }
}
