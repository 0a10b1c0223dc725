//! Header line shared by every file the tool writes.
//!
//! Each artifact starts with `# taskforest <version> config=<hash>`. Readers
//! skip any line beginning with `#`, so headers never affect parsing.

use std::fmt;

use sha2::{Digest, Sha256};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtifactHeader {
    pub version: String,
    pub config_hash: String,
}

impl ArtifactHeader {
    pub fn new(config_hash: impl Into<String>) -> Self {
        ArtifactHeader {
            version: TOOL_VERSION.to_string(),
            config_hash: config_hash.into(),
        }
    }

    /// Header whose hash is derived from an arbitrary canonical config string.
    pub fn for_config_text(text: &str) -> Self {
        Self::new(short_hash(text.as_bytes()))
    }

    pub fn parse(line: &str) -> Option<Self> {
        let rest = line.strip_prefix("# taskforest ")?;
        let (version, hash) = rest.split_once(" config=")?;
        Some(ArtifactHeader {
            version: version.to_string(),
            config_hash: hash.trim_end().to_string(),
        })
    }
}

impl Default for ArtifactHeader {
    fn default() -> Self {
        Self::new("none")
    }
}

impl fmt::Display for ArtifactHeader {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "# taskforest {} config={}", self.version, self.config_hash)
    }
}

/// First 16 hex digits of the SHA-256 of `bytes`.
pub fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
