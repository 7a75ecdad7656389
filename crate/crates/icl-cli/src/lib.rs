//! Library surface of the `icl-lab` binary: every subcommand is a plain
//! function so the integration tests can drive the pipeline in-process.

pub mod episodes;
pub mod fitcmd;
pub mod report;
pub mod svg;
pub mod sweep;
pub mod verify;

use std::path::PathBuf;

/// Where outputs land when `--out` is not given: `$ICL_LAB_OUT` or
/// `./icl-out`.
pub fn default_out_root() -> PathBuf {
    std::env::var_os("ICL_LAB_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("icl-out"))
}

/// Exit code contract: 0 success, 1 validation failure, 2 threshold or fit
/// failure.
pub mod exit_codes {
    pub const OK: i32 = 0;
    pub const VALIDATION: i32 = 1;
    pub const THRESHOLD: i32 = 2;
}
