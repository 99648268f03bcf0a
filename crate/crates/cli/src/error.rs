use std::fmt;

use picoseg::backend::BackendError;
use picoseg::binio::FormatError;
use picoseg::coco::CocoError;
use picoseg::imageio::ImageError;
use picoseg::loss::LossError;
use picoseg::net::NetError;
use picoseg::quant::QuantError;
use picoseg::roi::RoiError;

/// Error reported on stderr as `{"error": class, "message": ...}`.
#[derive(Debug)]
pub struct CliError {
    pub class: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(class: &'static str, message: impl Into<String>) -> Self {
        Self {
            class,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new("usage", message)
    }

    pub fn io(context: impl fmt::Display, err: std::io::Error) -> Self {
        Self::new("io", format!("{context}: {err}"))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({ "error": self.class, "message": self.message })
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.class, self.message)
    }
}

impl std::error::Error for CliError {}

macro_rules! classify {
    ($($ty:ty => $class:expr),* $(,)?) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                Self::new($class, e.to_string())
            }
        })*
    };
}

classify! {
    RoiError => "roi",
    NetError => "net",
    QuantError => "quant",
    LossError => "loss",
    CocoError => "coco",
    ImageError => "image",
    FormatError => "format",
    serde_json::Error => "json",
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        Self::new(e.class(), e.to_string())
    }
}
