//! Feed handlers: receive, check, purge and normalize incoming feeds.

mod handler;
pub mod text;
pub mod vfb;

pub use handler::{
    FeedError, FeedHandler, GapEvent, HandlerCounters, Ingested, QuarantineEntry, QuarantineReason, SequenceCheck,
    WireFormat, FIRST_SEQ,
};
pub use text::{format_text_record, parse_text_record, TextError};
pub use vfb::{encode_into, encode_vfb_frame, parse_vfb_frame, VfbError};
