//! File formats and command implementations behind the `ata` binary.

pub mod commands;
pub mod docs;
pub mod error;
pub mod fvol;
