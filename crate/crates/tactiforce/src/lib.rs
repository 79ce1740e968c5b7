//! Frame to force pipeline, teleoperation loop and message bus, with the
//! file formats and command line that tie them together.

pub mod bench;
pub mod bus;
pub mod cli;
pub mod config;
pub mod formats;
pub mod live;
