use std::fmt;

/// Configuration, validation or missing-input failure. Maps to exit code 2;
/// any other error maps to 1.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub type Result<T> = anyhow::Result<T>;

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.chain().any(|e| e.is::<Invalid>()) {
        2
    } else {
        1
    }
}

/// Wraps an error as invalid input while keeping its message.
pub trait OrInvalid<T> {
    fn or_invalid(self, context: &str) -> Result<T>;
}

impl<T, E: fmt::Display> OrInvalid<T> for std::result::Result<T, E> {
    fn or_invalid(self, context: &str) -> Result<T> {
        self.map_err(|e| invalid(format!("{context}: {e}")))
    }
}
