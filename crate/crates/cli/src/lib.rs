//! Batch front end for the `scorealign` pipeline.

pub mod commands;
pub mod config;

use scorealign::Error;

/// Process exit status for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_input_format() {
        2
    } else if matches!(err, Error::Io { .. }) {
        3
    } else if err.is_numerical() {
        4
    } else {
        1
    }
}
