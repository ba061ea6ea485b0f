// SPDX-License-Identifier: Apache-2.0

//! Image ingestion: stream to a temporary file, check the header, then
//! rename into the workspace's known image path.

use std::path::{Path, PathBuf};
use std::time::Instant;

use bytes::Bytes;
use futures_util::{Stream, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::fs::File;
use tokio::io::AsyncWriteExt;
use tracing::{debug, info};

use crate::lifecycle::Workspace;

/// QCOW2 magic, "QFI\xfb".
pub const QCOW2_MAGIC: [u8; 4] = [0x51, 0x46, 0x49, 0xFB];
/// Size of the fixed QCOW2 version 2 header.
pub const MIN_HEADER_LEN: u64 = 72;
pub const DEFAULT_MAX_UPLOAD: u64 = 64 << 30;

#[derive(Debug, Error)]
pub enum UploadError {
    #[error("image is not QCOW2: {0}")]
    BadFormat(String),
    #[error("empty upload")]
    EmptyUpload,
    #[error("upload exceeds the {limit} byte cap")]
    TooLarge { limit: u64 },
    #[error("uploads are only accepted while the loader is active")]
    WrongState,
    #[error("another upload is in progress")]
    Busy,
    #[error("upload stream failed: {0}")]
    Stream(String),
    #[error("upload I/O: {0}")]
    Io(#[from] std::io::Error),
}

impl UploadError {
    pub fn code(&self) -> &'static str {
        match self {
            UploadError::BadFormat(_) => "bad_format",
            UploadError::EmptyUpload => "empty_upload",
            UploadError::TooLarge { .. } => "too_large",
            UploadError::WrongState => "wrong_state",
            UploadError::Busy => "busy",
            UploadError::Stream(_) => "stream_error",
            UploadError::Io(_) => "io_error",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    Qcow2,
}

/// A validated image staged in the session workspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub stored_path: PathBuf,
    pub size_bytes: u64,
    pub format: ImageFormat,
    pub upload_seconds: f64,
}

/// Header check: magic bytes and the minimum header length. Nothing deeper;
/// the hypervisor is the consumer of the image structure.
pub fn validate_header(prefix: &[u8], total_len: u64) -> Result<(), UploadError> {
    if total_len == 0 {
        return Err(UploadError::EmptyUpload);
    }
    if prefix.len() >= QCOW2_MAGIC.len() && prefix[..4] != QCOW2_MAGIC {
        return Err(UploadError::BadFormat(format!(
            "magic {:02x?} is not QFI\\xfb",
            &prefix[..4]
        )));
    }
    if total_len < MIN_HEADER_LEN {
        return Err(UploadError::BadFormat(format!(
            "{total_len} bytes is shorter than a QCOW2 header"
        )));
    }
    Ok(())
}

/// Removes the temporary file unless the upload was committed.
struct TempGuard {
    path: PathBuf,
    armed: bool,
}

impl Drop for TempGuard {
    fn drop(&mut self) {
        if self.armed {
            let _ = std::fs::remove_file(&self.path);
        }
    }
}

/// Streams `body` into the workspace and returns the staged image.
pub async fn store_upload<S, E>(
    mut body: S,
    workspace: &Workspace,
    max_bytes: u64,
) -> Result<ImageRef, UploadError>
where
    S: Stream<Item = Result<Bytes, E>> + Unpin,
    E: std::fmt::Display,
{
    let started = Instant::now();
    tokio::fs::create_dir_all(workspace.root()).await?;
    let temp = workspace
        .root()
        .join(format!(".upload-{}.part", uuid::Uuid::new_v4().simple()));
    let mut guard = TempGuard {
        path: temp.clone(),
        armed: true,
    };
    let mut file = File::create(&temp).await?;

    let mut written: u64 = 0;
    let mut prefix: Vec<u8> = Vec::with_capacity(QCOW2_MAGIC.len());
    while let Some(chunk) = body.next().await {
        let chunk = chunk.map_err(|e| UploadError::Stream(e.to_string()))?;
        if chunk.is_empty() {
            continue;
        }
        if prefix.len() < QCOW2_MAGIC.len() {
            let take = (QCOW2_MAGIC.len() - prefix.len()).min(chunk.len());
            prefix.extend_from_slice(&chunk[..take]);
            // Reject as soon as the magic is known to be wrong.
            if prefix.len() == QCOW2_MAGIC.len() {
                validate_header(&prefix, u64::MAX)?;
            }
        }
        written += chunk.len() as u64;
        if written > max_bytes {
            return Err(UploadError::TooLarge { limit: max_bytes });
        }
        file.write_all(&chunk).await?;
    }
    validate_header(&prefix, written)?;
    file.sync_all().await?;
    drop(file);

    let target = workspace.image_path();
    tokio::fs::rename(&temp, &target).await?;
    guard.armed = false;
    let size_bytes = tokio::fs::metadata(&target).await?.len();
    let upload_seconds = started.elapsed().as_secs_f64();
    info!(size_bytes, upload_seconds, path = %target.display(), "image staged");
    Ok(ImageRef {
        stored_path: target,
        size_bytes,
        format: ImageFormat::Qcow2,
        upload_seconds,
    })
}

/// Whether `path` starts with the QCOW2 magic.
pub fn has_qcow2_magic(path: &Path) -> std::io::Result<bool> {
    use std::io::Read;
    let mut buf = [0u8; 4];
    let mut f = std::fs::File::open(path)?;
    match f.read_exact(&mut buf) {
        Ok(()) => Ok(buf == QCOW2_MAGIC),
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Ok(false),
        Err(e) => {
            debug!(error = %e, "magic read failed");
            Err(e)
        }
    }
}
