//! Network and tooling layer around `etbot-core`: the WebSocket frame
//! protocol, the HTTP/WebSocket server, chat adapters, service
//! configuration and the transcript runner used for golden tests.

pub mod adapter;
pub mod config;
pub mod server;
pub mod transcript;
pub mod wire;
