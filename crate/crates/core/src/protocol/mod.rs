//! SYNC / FOLLOW_UP messages and the master and slave state machines.
//!
//! The master numbers every beacon and later tells slaves what its own clock
//! read at that beacon. A slave timestamps the SYNC on reception and pairs it
//! with the master's value by seq, which yields one [`TimestampTuple`] per
//! beacon. Neither side needs to know the path delay.
//!
//! [`TimestampTuple`]: crate::estimator::TimestampTuple

mod master;
mod slave;
pub mod wire;

pub use master::{BeaconOutput, MasterConfig, MasterError, MasterSession};
pub use slave::{
    PendingSync, SlaveConfig, SlaveCounters, SlaveSession, DEFAULT_PAIRING_TIMEOUT_NS, DEFAULT_PENDING_CAPACITY,
};
pub use wire::{decode, encode, DecodeError, FollowUpEntry, FollowUpMessage, Message, SyncMessage};

/// Default UDP port for SYNC; FOLLOW_UP uses the next port.
pub const DEFAULT_PORT: u16 = 5819;
