//! Identifiers and small value types shared by every module.

use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(value: impl Into<String>) -> Self {
                Self(value.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(value: &str) -> Self {
                Self(value.to_owned())
            }
        }
    };
}

string_id!(
    /// Opaque chat channel identifier.
    ChannelId
);
string_id!(
    /// Opaque tester identifier.
    UserId
);
string_id!(CharterId);
string_id!(ReportId);
string_id!(SessionId);
string_id!(FlowId);

/// Milliseconds on the engine's (virtual) clock.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);

    pub fn from_secs(secs: u64) -> Self {
        Timestamp(secs * 1000)
    }

    pub fn millis(self) -> u64 {
        self.0
    }

    pub fn plus_millis(self, ms: u64) -> Self {
        Timestamp(self.0.saturating_add(ms))
    }

    pub fn plus_secs(self, secs: u64) -> Self {
        self.plus_millis(secs.saturating_mul(1000))
    }

    pub fn millis_since(self, earlier: Timestamp) -> u64 {
        self.0.saturating_sub(earlier.0)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ms", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MediaKind {
    Image,
    File,
}

/// A file shared in the chat. The engine only ever sees a reference to the
/// uploaded content, never the bytes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attachment {
    pub filename: String,
    pub media_kind: MediaKind,
    pub content_ref: String,
    pub size_bytes: u64,
}

impl Attachment {
    pub fn new(
        filename: impl Into<String>,
        media_kind: MediaKind,
        content_ref: impl Into<String>,
        size_bytes: u64,
    ) -> Self {
        Self {
            filename: filename.into(),
            media_kind,
            content_ref: content_ref.into(),
            size_bytes,
        }
    }

    pub fn is_valid(&self) -> bool {
        !self.filename.trim().is_empty()
    }
}

/// Renders a millisecond span as e.g. `7 min 30 s`.
pub fn format_span(ms: u64) -> String {
    let total_secs = (ms + 500) / 1000;
    let (mins, secs) = (total_secs / 60, total_secs % 60);
    match (mins, secs) {
        (0, s) => format!("{s} s"),
        (m, 0) => format!("{m} min"),
        (m, s) => format!("{m} min {s} s"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_formatting() {
        assert_eq!(format_span(450_000), "7 min 30 s");
        assert_eq!(format_span(900_000), "15 min");
        assert_eq!(format_span(42_000), "42 s");
        assert_eq!(format_span(0), "0 s");
    }

    #[test]
    fn attachment_requires_filename() {
        assert!(Attachment::new("shot.png", MediaKind::Image, "up/1", 10).is_valid());
        assert!(!Attachment::new("  ", MediaKind::File, "up/2", 0).is_valid());
    }
}
