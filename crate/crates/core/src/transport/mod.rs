//! Multi-process mode: stages as TCP endpoints driven by the monitor process.

pub mod codec;
pub mod driver;
pub mod server;
pub mod topology;

pub use codec::{decode_message, encode_message, read_message, write_message, Body, FramePayload, ProtocolError, WireMessage};
pub use driver::{run_distributed, TransportError};
pub use server::{push_source, EndpointOptions, ServerHandle, SourceStream, StageServer};
pub use topology::{Role, StageEndpoints, TopologyAssignment, BIND_ENV};
