// SPDX-License-Identifier: Apache-2.0

//! Per-session writable area and its teardown.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use serde::Serialize;
use tracing::{debug, warn};

use super::{ArtifactKind, ArtifactRecord, LifecycleError};

const IMAGE_FILE: &str = "image.qcow2";
const LOGS_PREFIX: &str = "logs/";
const WIPE_ATTEMPTS: u32 = 3;
const WIPE_RETRY_DELAY: Duration = Duration::from_millis(25);

/// The writable directory owned by one session: staged image, guest logs,
/// runtime sockets and scratch files. Everything in it is destroyed at
/// teardown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Known path of the validated image.
    pub fn image_path(&self) -> PathBuf {
        self.root.join(IMAGE_FILE)
    }

    pub fn logs_dir(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn run_dir(&self) -> PathBuf {
        self.root.join("run")
    }

    pub fn create(&self) -> io::Result<()> {
        fs::create_dir_all(self.logs_dir())?;
        fs::create_dir_all(self.run_dir())
    }

    pub fn exists(&self) -> bool {
        fs::symlink_metadata(&self.root).is_ok()
    }

    /// Records every file in the workspace except the staged input image,
    /// which is baseline rather than something the run introduced, and the
    /// orchestrator's own logs under `logs/`.
    pub fn scan(&self, run_id: &str) -> io::Result<Vec<ArtifactRecord>> {
        let mut out = Vec::new();
        if self.exists() {
            scan_dir(&self.root, &self.root, run_id, &mut out)?;
        }
        out.retain(|r| r.path != IMAGE_FILE);
        Ok(out)
    }
}

fn scan_dir(base: &Path, dir: &Path, run_id: &str, out: &mut Vec<ArtifactRecord>) -> io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        let ty = entry.file_type()?;
        if ty.is_dir() {
            scan_dir(base, &path, run_id, out)?;
            continue;
        }
        let rel = path
            .strip_prefix(base)
            .unwrap_or(&path)
            .to_string_lossy()
            .replace('\\', "/");
        if rel == IMAGE_FILE || rel.starts_with(LOGS_PREFIX) {
            continue;
        }
        let content = if ty.is_symlink() {
            fs::read_link(&path)?.to_string_lossy().into_owned().into_bytes()
        } else if ty.is_file() {
            fs::read(&path).unwrap_or_default()
        } else {
            // Sockets and fifos: record presence only. Opening a fifo would block.
            Vec::new()
        };
        let kind = if ty.is_symlink() {
            ArtifactKind::Config
        } else {
            ArtifactKind::File
        };
        out.push(
            ArtifactRecord::from_content(rel, kind, &content, run_id)
                .expect("relative path is non-empty"),
        );
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TeardownReport {
    /// False when the workspace was already absent.
    pub removed: bool,
    pub attempts: u32,
}

/// Recursively deletes the workspace and verifies it is gone. Calling it on
/// an absent workspace is a successful no-op.
pub fn teardown(workspace: &Workspace) -> Result<TeardownReport, LifecycleError> {
    if !workspace.exists() {
        return Ok(TeardownReport {
            removed: false,
            attempts: 0,
        });
    }
    for attempt in 1..=WIPE_ATTEMPTS {
        match fs::remove_dir_all(workspace.root()) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => debug!(attempt, error = %e, "workspace removal failed"),
        }
        if !workspace.exists() {
            return Ok(TeardownReport {
                removed: true,
                attempts: attempt,
            });
        }
        thread::sleep(WIPE_RETRY_DELAY);
    }
    let survivors = list_survivors(workspace.root());
    warn!(root = %workspace.root().display(), count = survivors.len(), "workspace wipe incomplete");
    Err(LifecycleError::WipeIncomplete { survivors })
}

fn list_survivors(root: &Path) -> Vec<PathBuf> {
    let mut out = vec![root.to_path_buf()];
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let Ok(entries) = fs::read_dir(&dir) else { continue };
        for entry in entries.flatten() {
            let p = entry.path();
            if entry.file_type().map(|t| t.is_dir()).unwrap_or(false) {
                stack.push(p.clone());
            }
            out.push(p);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicBool, Ordering};
    use std::sync::Arc;

    use super::*;

    #[test]
    fn removes_populated_workspace() {
        let tmp = tempfile::tempdir().unwrap();
        let ws = Workspace::new(tmp.path().join("s"));
        ws.create().unwrap();
        fs::write(ws.image_path(), b"QFI\xfbimage").unwrap();
        fs::write(ws.logs_dir().join("guest.log"), b"log").unwrap();
        fs::write(ws.run_dir().join("scratch"), b"tmp").unwrap();

        let report = teardown(&ws).unwrap();
        assert!(report.removed);
        assert!(!ws.exists());
    }

    #[test]
    fn absent_or_empty_workspace_is_fine() {
        let tmp = tempfile::tempdir().unwrap();
        let ws = Workspace::new(tmp.path().join("s"));
        assert_eq!(
            teardown(&ws).unwrap(),
            TeardownReport {
                removed: false,
                attempts: 0
            }
        );
        fs::create_dir(ws.root()).unwrap();
        assert!(teardown(&ws).unwrap().removed);
        // idempotent
        assert!(!teardown(&ws).unwrap().removed);
    }

    #[test]
    fn does_not_follow_symlinks_out_of_the_workspace() {
        let tmp = tempfile::tempdir().unwrap();
        let outside = tmp.path().join("outside");
        fs::create_dir(&outside).unwrap();
        fs::write(outside.join("keep"), b"host data").unwrap();
        let ws = Workspace::new(tmp.path().join("s"));
        ws.create().unwrap();
        std::os::unix::fs::symlink(&outside, ws.run_dir().join("link")).unwrap();

        teardown(&ws).unwrap();
        assert!(outside.join("keep").exists());
    }

    #[test]
    fn lingering_writer_surfaces_wipe_incomplete() {
        let tmp = tempfile::tempdir().unwrap();
        let ws = Workspace::new(tmp.path().join("s"));
        ws.create().unwrap();

        let stop = Arc::new(AtomicBool::new(false));
        let writer = {
            let stop = stop.clone();
            let dir = ws.run_dir();
            thread::spawn(move || {
                let mut i = 0u64;
                while !stop.load(Ordering::Relaxed) {
                    let _ = fs::create_dir_all(&dir);
                    let _ = fs::write(dir.join(format!("f{}", i % 8)), b"x");
                    i += 1;
                }
            })
        };
        thread::sleep(Duration::from_millis(20));
        let res = teardown(&ws);
        stop.store(true, Ordering::Relaxed);
        writer.join().unwrap();

        match res {
            Err(LifecycleError::WipeIncomplete { survivors }) => {
                assert!(survivors.iter().any(|p| p == ws.root()));
            }
            other => panic!("expected WipeIncomplete, got {other:?}"),
        }
        // once the writer is gone the wipe completes
        assert!(teardown(&ws).unwrap().removed);
    }

    #[test]
    fn scan_skips_the_baseline_image() {
        let tmp = tempfile::tempdir().unwrap();
        let ws = Workspace::new(tmp.path().join("s"));
        ws.create().unwrap();
        fs::write(ws.image_path(), b"QFI\xfb").unwrap();
        fs::write(ws.run_dir().join("dropped.bin"), b"payload").unwrap();
        fs::write(ws.logs_dir().join("guest.stderr"), b"").unwrap();

        let records = ws.scan("run-1").unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].path, "run/dropped.bin");
        assert_eq!(records[0].run_id, "run-1");
        assert_eq!(
            records[0],
            ArtifactRecord::from_content("run/dropped.bin", ArtifactKind::File, b"payload", "run-1").unwrap()
        );
    }

    #[test]
    fn scan_does_not_open_fifos() {
        let tmp = tempfile::tempdir().unwrap();
        let ws = Workspace::new(tmp.path().join("s"));
        ws.create().unwrap();
        let fifo = std::ffi::CString::new(ws.run_dir().join("pipe").into_os_string().into_encoded_bytes()).unwrap();
        assert_eq!(unsafe { libc::mkfifo(fifo.as_ptr(), 0o600) }, 0);

        let records = ws.scan("r").unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].path, "run/pipe");
        teardown(&ws).unwrap();
    }
}
