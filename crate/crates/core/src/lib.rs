//! Client-server frame bus for Gaussian-splat rendering.
//!
//! A renderer process (the server) publishes color and depth frames into a
//! shared frame region and receives camera/object poses over a small
//! length-prefixed JSON protocol. Viewers (clients) attach to the region
//! with an attachment token obtained during the handshake.

pub mod bench;
pub mod client;
pub mod compositor;
pub mod export;
pub mod framebus;
pub mod gateway;
pub mod geometry;
pub mod image;
pub mod server;
pub mod splatref;
pub mod wire;
