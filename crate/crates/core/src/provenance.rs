//! Seed/config stamping for output files.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Hex SHA-256 (first 16 hex digits) of the JSON serialisation of `config`.
pub fn config_hash<T: Serialize + ?Sized>(config: &T) -> String {
    let bytes = serde_json::to_vec(config).expect("config serialises to JSON");
    let digest = Sha256::digest(&bytes);
    hex::encode(&digest[..8])
}

/// `# celltwin seed=<seed> config_hash=<hash>` followed by a newline.
pub fn comment_header(seed: u64, config_hash: &str) -> String {
    format!("# celltwin seed={seed} config_hash={config_hash}\n")
}

/// Lines of a text file with `#` comment lines removed.
pub fn strip_comments(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for line in text.lines().filter(|l| !l.starts_with('#')) {
        out.push_str(line);
        out.push('\n');
    }
    out
}
