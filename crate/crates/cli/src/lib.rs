//! Command-line driver for controlface.

pub mod commands;
pub mod config;

use controlface::Error;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Shape(_) => EXIT_USAGE,
        Error::Io { .. } | Error::Format { .. } | Error::Missing(_) => EXIT_IO,
        Error::Numerical { .. } | Error::Tensor(_) => EXIT_NUMERICAL,
    }
}
