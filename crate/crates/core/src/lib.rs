//! One-time-pad encrypted datagram sessions.
//!
//! Layers, bottom up: [`md5`] and [`codec`] (packet format), [`vault`] (pad
//! storage), [`session`] (stop-and-wait protocol), [`transport`] (UDP and a
//! simulated network), [`hub`] (pad distribution), [`app`] (the daemon), and
//! [`harness`] / [`jamlab`] for running whole networks in virtual time.

pub mod app;
pub mod codec;
pub mod harness;
pub mod hub;
pub mod hygiene;
pub mod jamlab;
pub mod md5;
pub mod session;
pub mod transport;
pub mod vault;
