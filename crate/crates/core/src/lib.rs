//! Core of a remote-laboratory platform with simulated experiment hardware.

pub mod agent;
pub mod clock;
pub mod config;
pub mod cloud;
pub mod cv;
pub mod image;
pub mod orchestrator;
pub mod physics;
pub mod protocol;
pub mod scenario;
pub mod signaling;
pub mod sim;
pub mod tester;
