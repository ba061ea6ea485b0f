// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::LifecycleError;

/// Length of a hex-encoded SHA-256 digest.
pub const DIGEST_HEX_LEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    File,
    Registry,
    Config,
}

/// One observable change introduced by a run.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub kind: ArtifactKind,
    pub digest: String,
    pub run_id: String,
}

impl ArtifactRecord {
    pub fn new(
        path: impl Into<String>,
        kind: ArtifactKind,
        digest: impl Into<String>,
        run_id: impl Into<String>,
    ) -> Result<Self, LifecycleError> {
        let path = path.into();
        let digest = digest.into();
        if path.is_empty() {
            return Err(LifecycleError::InvalidArtifact("empty path".into()));
        }
        if digest.len() != DIGEST_HEX_LEN
            || !digest.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
        {
            return Err(LifecycleError::InvalidArtifact(format!(
                "digest `{digest}` is not {DIGEST_HEX_LEN} lowercase hex characters"
            )));
        }
        Ok(ArtifactRecord {
            path,
            kind,
            digest,
            run_id: run_id.into(),
        })
    }

    /// Record whose digest is the SHA-256 of `content`.
    pub fn from_content(
        path: impl Into<String>,
        kind: ArtifactKind,
        content: &[u8],
        run_id: impl Into<String>,
    ) -> Result<Self, LifecycleError> {
        Self::new(path, kind, hex::encode(Sha256::digest(content)), run_id)
    }

    fn identity(&self) -> (&str, ArtifactKind, &str) {
        (&self.path, self.kind, &self.digest)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SanitizationReport {
    pub run_prev: String,
    pub run_next: String,
    pub intersection: BTreeSet<ArtifactRecord>,
    pub clean: bool,
}

/// Artifacts of the previous run that reappear in the next one, compared on
/// (path, kind, digest) with run ids ignored.
pub fn sanitization_check(
    run_prev: &str,
    manifest_prev: &BTreeSet<ArtifactRecord>,
    run_next: &str,
    manifest_next: &BTreeSet<ArtifactRecord>,
) -> Result<SanitizationReport, LifecycleError> {
    if run_prev == run_next {
        return Err(LifecycleError::SameRun(run_prev.to_string()));
    }
    let next: BTreeSet<_> = manifest_next.iter().map(ArtifactRecord::identity).collect();
    let intersection: BTreeSet<ArtifactRecord> = manifest_prev
        .iter()
        .filter(|r| next.contains(&r.identity()))
        .cloned()
        .collect();
    Ok(SanitizationReport {
        run_prev: run_prev.to_string(),
        run_next: run_next.to_string(),
        clean: intersection.is_empty(),
        intersection,
    })
}
