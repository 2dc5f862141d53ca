//! Wire format. All integers are big-endian.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "RBIS" (52 42 49 53)
//! 4       1     version (0x01)
//! 5       1     type (0x01 SYNC, 0x02 FOLLOW_UP)
//! 6       4     seq
//! 10      8     tsf_us
//! -- FOLLOW_UP only --
//! 18      8     master_time_ns
//! 26      1     count of extra entries (present only when count > 0)
//! 27      12*n  extra entries: seq u32, master_time_ns u64
//! ```
//!
//! A SYNC is 18 bytes and a single-entry FOLLOW_UP is 26 bytes.

use thiserror::Error;

use crate::clock::{TimePointNs, TsfTimestamp};

pub const MAGIC: [u8; 4] = *b"RBIS";
pub const VERSION: u8 = 0x01;
pub const TYPE_SYNC: u8 = 0x01;
pub const TYPE_FOLLOW_UP: u8 = 0x02;

pub const HEADER_LEN: usize = 6;
pub const SYNC_LEN: usize = 18;
pub const FOLLOW_UP_LEN: usize = 26;
pub const ENTRY_LEN: usize = 12;
pub const MAX_EXTRA_ENTRIES: usize = u8::MAX as usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SyncMessage {
    pub seq: u32,
    pub tsf_us: TsfTimestamp,
}

/// Master timestamp of one earlier SYNC, carried in a batched FOLLOW_UP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FollowUpEntry {
    pub seq: u32,
    pub master_time_ns: TimePointNs,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FollowUpMessage {
    pub seq: u32,
    pub tsf_us: TsfTimestamp,
    pub master_time_ns: TimePointNs,
    /// Older SYNCs covered by this FOLLOW_UP, oldest first.
    pub extra: Vec<FollowUpEntry>,
}

impl FollowUpMessage {
    pub fn single(seq: u32, tsf_us: TsfTimestamp, master_time_ns: TimePointNs) -> Self {
        FollowUpMessage {
            seq,
            tsf_us,
            master_time_ns,
            extra: Vec::new(),
        }
    }

    /// Every covered (seq, master time) pair in seq order.
    pub fn entries(&self) -> impl Iterator<Item = FollowUpEntry> + '_ {
        self.extra.iter().copied().chain(std::iter::once(FollowUpEntry {
            seq: self.seq,
            master_time_ns: self.master_time_ns,
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Message {
    Sync(SyncMessage),
    FollowUp(FollowUpMessage),
}

impl Message {
    pub fn seq(&self) -> u32 {
        match self {
            Message::Sync(m) => m.seq,
            Message::FollowUp(m) => m.seq,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("truncated message: need {needed} bytes, got {got}")]
    Truncated { needed: usize, got: usize },
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0:#04x}")]
    UnsupportedVersion(u8),
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("{extra} unexpected trailing bytes")]
    TrailingBytes { extra: usize },
    #[error("FOLLOW_UP entry count must be non-zero when present")]
    ZeroEntryCount,
}

pub fn encode(message: &Message) -> Vec<u8> {
    match message {
        Message::Sync(m) => {
            let mut out = Vec::with_capacity(SYNC_LEN);
            put_header(&mut out, TYPE_SYNC, m.seq, m.tsf_us);
            out
        }
        Message::FollowUp(m) => {
            assert!(
                m.extra.len() <= MAX_EXTRA_ENTRIES,
                "FOLLOW_UP carries at most {MAX_EXTRA_ENTRIES} extra entries"
            );
            let mut out = Vec::with_capacity(FOLLOW_UP_LEN + 1 + m.extra.len() * ENTRY_LEN);
            put_header(&mut out, TYPE_FOLLOW_UP, m.seq, m.tsf_us);
            out.extend_from_slice(&m.master_time_ns.0.to_be_bytes());
            if !m.extra.is_empty() {
                out.push(m.extra.len() as u8);
                for e in &m.extra {
                    out.extend_from_slice(&e.seq.to_be_bytes());
                    out.extend_from_slice(&e.master_time_ns.0.to_be_bytes());
                }
            }
            out
        }
    }
}

fn put_header(out: &mut Vec<u8>, kind: u8, seq: u32, tsf: TsfTimestamp) {
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(kind);
    out.extend_from_slice(&seq.to_be_bytes());
    out.extend_from_slice(&tsf.0.to_be_bytes());
}

fn need(bytes: &[u8], needed: usize) -> Result<(), DecodeError> {
    if bytes.len() < needed {
        return Err(DecodeError::Truncated {
            needed,
            got: bytes.len(),
        });
    }
    Ok(())
}

fn be_u32(b: &[u8]) -> u32 {
    u32::from_be_bytes(b[..4].try_into().expect("4 bytes"))
}

fn be_u64(b: &[u8]) -> u64 {
    u64::from_be_bytes(b[..8].try_into().expect("8 bytes"))
}

pub fn decode(bytes: &[u8]) -> Result<Message, DecodeError> {
    need(bytes, HEADER_LEN)?;
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(DecodeError::BadMagic(magic));
    }
    if bytes[4] != VERSION {
        return Err(DecodeError::UnsupportedVersion(bytes[4]));
    }
    match bytes[5] {
        TYPE_SYNC => {
            need(bytes, SYNC_LEN)?;
            if bytes.len() > SYNC_LEN {
                return Err(DecodeError::TrailingBytes {
                    extra: bytes.len() - SYNC_LEN,
                });
            }
            Ok(Message::Sync(SyncMessage {
                seq: be_u32(&bytes[6..]),
                tsf_us: TsfTimestamp(be_u64(&bytes[10..])),
            }))
        }
        TYPE_FOLLOW_UP => {
            need(bytes, FOLLOW_UP_LEN)?;
            let mut msg = FollowUpMessage::single(
                be_u32(&bytes[6..]),
                TsfTimestamp(be_u64(&bytes[10..])),
                TimePointNs(be_u64(&bytes[18..])),
            );
            if bytes.len() > FOLLOW_UP_LEN {
                let count = bytes[FOLLOW_UP_LEN] as usize;
                if count == 0 {
                    return Err(DecodeError::ZeroEntryCount);
                }
                let total = FOLLOW_UP_LEN + 1 + count * ENTRY_LEN;
                need(bytes, total)?;
                if bytes.len() > total {
                    return Err(DecodeError::TrailingBytes {
                        extra: bytes.len() - total,
                    });
                }
                msg.extra = bytes[FOLLOW_UP_LEN + 1..total]
                    .chunks_exact(ENTRY_LEN)
                    .map(|c| FollowUpEntry {
                        seq: be_u32(c),
                        master_time_ns: TimePointNs(be_u64(&c[4..])),
                    })
                    .collect();
            }
            Ok(Message::FollowUp(msg))
        }
        other => Err(DecodeError::UnknownType(other)),
    }
}
