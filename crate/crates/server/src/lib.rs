//! Network front end for the remote-laboratory core: HTTP and WebSocket
//! services, device agents on real sockets, an HTTP virtual user and the
//! `rlabs` command line.

pub mod agents;
pub mod cli;
pub mod client;
pub mod remote;
pub mod routes;
pub mod stack;

pub use agents::{spawn_fleet, AgentEndpoints, AgentExit, AgentFleet, AgentNotice, FleetOptions};
pub use client::{FrameStream, HttpLabClient, ReceivedFrame};
pub use remote::{HttpCloud, HttpMedia, UreqWebhook};
pub use stack::{configured_tester, Endpoints, EventSink, LaunchError, LaunchOptions, Role, Stack};
