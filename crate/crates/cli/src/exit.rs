//! Process exit codes.

use std::fmt;

use tokenformer::Error;

pub const OK: u8 = 0;
pub const USAGE: u8 = 1;
pub const DATA: u8 = 2;
pub const NUMERICAL: u8 = 3;

/// A check the user asked for came back over tolerance.
#[derive(Debug)]
pub struct CheckFailed(pub String);

/// Bad flag combinations found after parsing.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}
impl std::error::Error for Usage {}

pub fn code_for(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return NUMERICAL;
    }
    if err.downcast_ref::<Usage>().is_some() {
        return USAGE;
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return DATA;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Numerical { .. } | Error::NonFinite(_)) => NUMERICAL,
        Some(
            Error::Config(_)
            | Error::IncompatibleConfig(_)
            | Error::Unsupported(_)
            | Error::ContextLength { .. }
            | Error::Expansion(_),
        ) => USAGE,
        Some(_) => DATA,
        None => DATA,
    }
}

/// Output piped into something like `head` that stopped reading.
pub fn is_broken_pipe(err: &anyhow::Error) -> bool {
    err.chain().filter_map(|e| e.downcast_ref::<std::io::Error>()).any(|e| e.kind() == std::io::ErrorKind::BrokenPipe)
}
