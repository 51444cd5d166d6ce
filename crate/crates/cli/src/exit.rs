use std::fmt;

use adapterseg::Error;

pub const CONFIG: u8 = 2;
pub const DATA: u8 = 3;
pub const NUMERIC: u8 = 4;

/// An error raised by the command layer itself, carrying its exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: CONFIG,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: DATA,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

fn library_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::UnknownConfigKey(_)
        | Error::Version { .. }
        | Error::Format { .. }
        | Error::StageWidths(_)
        | Error::Parameters { .. }
        | Error::EncoderHash { .. } => CONFIG,
        Error::Dataset(_)
        | Error::EmptyDataset(_)
        | Error::DuplicateStem { .. }
        | Error::Decode { .. } => DATA,
        Error::NonFinite(_) | Error::NonFiniteLoss { .. } => NUMERIC,
        Error::InvalidInput(_) | Error::Shape(_) | Error::Io { .. } => 1,
    }
}

/// Exit status for an error: 2 configuration, 3 data, 4 numeric abort,
/// 1 anything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.code;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return library_code(e);
        }
    }
    1
}
