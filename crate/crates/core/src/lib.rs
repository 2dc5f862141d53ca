//! Reference broadcast synchronization over 802.11 beacons.
//!
//! A master stamps every beacon (SYNC) with its TSF counter and later sends
//! the precise transmit time in a FOLLOW_UP. Slaves pair the two, estimate
//! offset and skew relative to the master, and optionally discipline their
//! clock with a PI servo. The same pipeline runs inside a deterministic
//! simulator and as a pair of UDP daemons.

pub mod analyze;
pub mod clock;
pub mod config;
pub mod estimator;
pub mod live;
pub mod node;
pub mod protocol;
pub mod servo;
pub mod sim;
pub mod stats;
pub mod trace;
