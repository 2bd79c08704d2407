//! Encode, transmit and recover program metadata through memory read addresses.

pub mod analysis;
pub mod channel;
pub mod codec;
pub mod decoder;
pub mod demo;
pub mod encoder;
pub mod error;
pub mod events_io;
pub mod schema;
pub mod serde_hex;
pub mod trace;

pub use codec::{ChannelConfig, Packet, PhysAddr};
pub use error::{Error, Result};
pub use schema::Event;
pub use trace::{Cmd, TraceRecord};
